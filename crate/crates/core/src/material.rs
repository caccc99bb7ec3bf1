//! Elastic free energy densities and their conjugate stresses.
//!
//! The default model is the isotropic quadratic gradient energy
//!
//! ```text
//! W = λ/2 (E_AA)² + μ E_AB E_AB + ½ μ l² E_AB,C E_AB,C
//! ```
//!
//! Stresses are assembled from the derivatives of `W` with respect to `E`
//! and `Grad E`:
//!
//! ```text
//! P_iJ  = F_iA S_AJ + H_AJC F_iA,C        S = ∂W/∂E, H = ∂W/∂(Grad E)
//! B_iJK = sym_JK (F_iA H_AJK)
//! ```
//!
//! which for the quadratic model is `P = λ tr E F + 2μ F E + μ l² F_iA,C E_AJ,C`
//! and `B_iJK = μ l² F_iA E_AJ,K` (symmetrized over `J, K`).

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::kinematics::{zero_mat, zero_tens, Kinematics, Mat3, Tens3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MaterialModel {
    #[default]
    #[serde(rename = "toupin-quadratic")]
    ToupinQuadratic,
    /// Non-convex double well in `E_11` plus the gradient term; 1D only.
    #[serde(rename = "multiwell-1d")]
    Multiwell1d,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialParams {
    pub lambda: f64,
    pub mu: f64,
    pub l: f64,
    #[serde(default)]
    pub model: MaterialModel,
}

impl MaterialParams {
    pub fn toupin(lambda: f64, mu: f64, l: f64) -> Self {
        Self {
            lambda,
            mu,
            l,
            model: MaterialModel::ToupinQuadratic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return Err(Error::config("material.mu", "must be positive"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("material.lambda", "must be non-negative"));
        }
        if !(self.l >= 0.0) || !self.l.is_finite() {
            return Err(Error::config("material.l", "must be non-negative"));
        }
        Ok(())
    }

    /// Modulus of the gradient term, `μ l²`.
    pub fn gradient_modulus(&self) -> f64 {
        self.mu * self.l * self.l
    }
}

/// Reference-configuration stresses: first Piola-Kirchhoff `P`, hyperstress
/// `B` (symmetric in its trailing pair) and the energy density `W`.
#[derive(Debug, Clone, Copy)]
pub struct StressState<T> {
    pub p: Mat3<T>,
    pub b: Tens3<T>,
    pub w: T,
}

/// Current-configuration stresses.
#[derive(Debug, Clone, Copy)]
pub struct CurrentStress {
    pub sigma: Mat3<f64>,
    pub beta: Tens3<f64>,
    pub j: f64,
}

/// Non-gradient and gradient parts of the energy density, in that order.
pub fn energy_parts<T: Scalar>(k: &Kinematics<T>, m: &MaterialParams) -> (T, T) {
    let mut grad_sq = T::zero();
    for a in 0..3 {
        for b in 0..3 {
            for c in 0..3 {
                grad_sq += k.grad_e[a][b][c] * k.grad_e[a][b][c];
            }
        }
    }
    let gradient = grad_sq * (0.5 * m.gradient_modulus());
    let local = match m.model {
        MaterialModel::ToupinQuadratic => {
            let tr = k.e[0][0] + k.e[1][1] + k.e[2][2];
            let mut ee = T::zero();
            for a in 0..3 {
                for b in 0..3 {
                    ee += k.e[a][b] * k.e[a][b];
                }
            }
            tr * tr * (0.5 * m.lambda) + ee * m.mu
        }
        MaterialModel::Multiwell1d => multiwell_potential(k.e[0][0]).0,
    };
    (local, gradient)
}

pub fn energy_density<T: Scalar>(k: &Kinematics<T>, m: &MaterialParams) -> T {
    let (local, gradient) = energy_parts(k, m);
    local + gradient
}

/// `w(E) = E⁴/4 − E³/3 − 3E²/4` and `w'(E)`.
fn multiwell_potential<T: Scalar>(e: T) -> (T, T) {
    let e2 = e * e;
    let e3 = e2 * e;
    let w = e2 * e2 * 0.25 - e3 * (1.0 / 3.0) - e2 * 0.75;
    let dw = e3 - e2 - e * 1.5;
    (w, dw)
}

/// Double-well energy in `E_11` and its derivative; the gradient contribution
/// `½ μ l² (E_11,1)²` belongs to [`energy_parts`].
pub fn multiwell_energy_1d(e11: f64) -> (f64, f64) {
    multiwell_potential(e11)
}

/// Stationary strains of the double well: `E = 0` and the roots of
/// `E² − E − 3/2`, lower well first.
pub fn multiwell_wells() -> (f64, f64) {
    let disc = 7.0f64.sqrt();
    ((1.0 - disc) / 2.0, (1.0 + disc) / 2.0)
}

/// Second Piola-Kirchhoff stress `S = ∂W/∂E` and `H = ∂W/∂(Grad E)`.
fn strain_conjugates<T: Scalar>(k: &Kinematics<T>, m: &MaterialParams) -> (Mat3<T>, Tens3<T>) {
    let mut s = zero_mat::<T>();
    match m.model {
        MaterialModel::ToupinQuadratic => {
            let tr = k.e[0][0] + k.e[1][1] + k.e[2][2];
            let lt = tr * m.lambda;
            for a in 0..3 {
                for b in 0..3 {
                    s[a][b] = k.e[a][b] * (2.0 * m.mu);
                }
                s[a][a] += lt;
            }
        }
        MaterialModel::Multiwell1d => {
            s[0][0] = multiwell_potential(k.e[0][0]).1;
        }
    }
    let gm = m.gradient_modulus();
    let mut h = zero_tens::<T>();
    for a in 0..3 {
        for b in 0..3 {
            for c in 0..3 {
                h[a][b][c] = k.grad_e[a][b][c] * gm;
            }
        }
    }
    (s, h)
}

/// First Piola-Kirchhoff stress and symmetrized hyperstress.
pub fn stresses<T: Scalar>(k: &Kinematics<T>, m: &MaterialParams) -> StressState<T> {
    let (s, h) = strain_conjugates(k, m);
    let gradient = m.gradient_modulus() != 0.0;
    let mut p = zero_mat::<T>();
    for i in 0..3 {
        for j in 0..3 {
            let mut v = T::zero();
            for a in 0..3 {
                v += k.f[i][a] * s[a][j];
            }
            if gradient {
                for a in 0..3 {
                    for c in 0..3 {
                        v += h[a][j][c] * k.grad_f[i][a][c];
                    }
                }
            }
            p[i][j] = v;
        }
    }
    let mut b = zero_tens::<T>();
    if gradient {
        let mut raw = zero_tens::<T>();
        for i in 0..3 {
            for j in 0..3 {
                for kk in 0..3 {
                    let mut v = T::zero();
                    for a in 0..3 {
                        v += k.f[i][a] * h[a][j][kk];
                    }
                    raw[i][j][kk] = v;
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                for kk in j..3 {
                    let v = (raw[i][j][kk] + raw[i][kk][j]) * 0.5;
                    b[i][j][kk] = v;
                    b[i][kk][j] = v;
                }
            }
        }
    }
    StressState {
        p,
        b,
        w: energy_density(k, m),
    }
}

/// Pushes `P` and `B` forward to the current configuration:
/// `σ_ij = (P_iJ F_jJ + B_iJK F_jJ,K)/J` and `β_ijk = B_iJK F_jJ F_kK / J`.
pub fn cauchy_pushforward(k: &Kinematics<f64>, s: &StressState<f64>) -> Result<CurrentStress> {
    let j = k.j;
    if !(j > 0.0) {
        return Err(Error::ElementInversion { element: 0, det: j });
    }
    let mut sigma = [[0.0; 3]; 3];
    for i in 0..3 {
        for jj in 0..3 {
            let mut v = 0.0;
            for cj in 0..3 {
                v += s.p[i][cj] * k.f[jj][cj];
                for ck in 0..3 {
                    v += s.b[i][cj][ck] * k.grad_f[jj][cj][ck];
                }
            }
            sigma[i][jj] = v / j;
        }
    }
    let mut beta = [[[0.0; 3]; 3]; 3];
    for i in 0..3 {
        for jj in 0..3 {
            for kk in 0..3 {
                let mut v = 0.0;
                for cj in 0..3 {
                    for ck in 0..3 {
                        v += s.b[i][cj][ck] * k.f[jj][cj] * k.f[kk][ck];
                    }
                }
                beta[i][jj][kk] = v / j;
            }
        }
    }
    Ok(CurrentStress { sigma, beta, j })
}
