//! Pointwise kinematics from the first and second displacement gradients.

use crate::autodiff::{det3, Scalar};
use crate::error::{Error, Result};

pub type Mat3<T> = [[T; 3]; 3];
pub type Tens3<T> = [[[T; 3]; 3]; 3];

/// Strain measure used by the constitutive evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrainMode {
    /// Green-Lagrange strain with the full deformation gradient.
    #[default]
    Finite,
    /// Infinitesimal strain; `F` is held at the identity in the stresses.
    Small,
}

/// Kinematic state at a material point.
///
/// `grad_f[i][j][k] = F_{iJ,K}` is symmetric in its trailing pair and
/// `grad_e[a][b][c] = E_{AB,C}` is symmetric in its leading pair.
#[derive(Debug, Clone, Copy)]
pub struct Kinematics<T> {
    pub f: Mat3<T>,
    pub grad_f: Tens3<T>,
    pub e: Mat3<T>,
    pub grad_e: Tens3<T>,
    pub j: T,
}

pub fn zero_mat<T: Scalar>() -> Mat3<T> {
    [[T::zero(); 3]; 3]
}

pub fn zero_tens<T: Scalar>() -> Tens3<T> {
    [[[T::zero(); 3]; 3]; 3]
}

pub fn identity<T: Scalar>() -> Mat3<T> {
    let mut m = zero_mat();
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = T::one();
    }
    m
}

/// Builds the kinematic state from `∂u/∂X` and `∂²u/∂X∂X`.
///
/// The second gradient is symmetrized in its trailing indices on input. In
/// finite mode a non-positive `J` is reported as an inversion (element id 0;
/// callers attach their own).
pub fn compute_kinematics<T: Scalar>(
    grad_u: &Mat3<T>,
    grad_grad_u: &Tens3<T>,
    mode: StrainMode,
) -> Result<Kinematics<T>> {
    let mut ggu = zero_tens::<T>();
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                ggu[i][j][k] = (grad_grad_u[i][j][k] + grad_grad_u[i][k][j]) * 0.5;
            }
        }
    }

    match mode {
        StrainMode::Finite => {
            let mut f = *grad_u;
            for (i, row) in f.iter_mut().enumerate() {
                row[i] = row[i] + 1.0;
            }
            let j = det3(&f);
            if !(j.value() > 0.0) {
                return Err(Error::ElementInversion {
                    element: 0,
                    det: j.value(),
                });
            }
            let mut e = zero_mat::<T>();
            for a in 0..3 {
                for b in a..3 {
                    let mut s = T::zero();
                    for k in 0..3 {
                        s += f[k][a] * f[k][b];
                    }
                    if a == b {
                        s = s - 1.0;
                    }
                    e[a][b] = s * 0.5;
                    e[b][a] = e[a][b];
                }
            }
            let mut grad_e = zero_tens::<T>();
            for a in 0..3 {
                for b in a..3 {
                    for c in 0..3 {
                        let mut s = T::zero();
                        for k in 0..3 {
                            s += ggu[k][a][c] * f[k][b] + f[k][a] * ggu[k][b][c];
                        }
                        grad_e[a][b][c] = s * 0.5;
                        grad_e[b][a][c] = grad_e[a][b][c];
                    }
                }
            }
            Ok(Kinematics {
                f,
                grad_f: ggu,
                e,
                grad_e,
                j,
            })
        }
        StrainMode::Small => {
            let mut e = zero_mat::<T>();
            for a in 0..3 {
                for b in 0..3 {
                    e[a][b] = (grad_u[a][b] + grad_u[b][a]) * 0.5;
                }
            }
            let mut grad_e = zero_tens::<T>();
            for a in 0..3 {
                for b in 0..3 {
                    for c in 0..3 {
                        grad_e[a][b][c] = (ggu[a][b][c] + ggu[b][a][c]) * 0.5;
                    }
                }
            }
            Ok(Kinematics {
                f: identity(),
                grad_f: zero_tens(),
                e,
                grad_e,
                j: T::one(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_rotation(rng: &mut impl Rng) -> Mat3<f64> {
        let mut q = [0.0; 4];
        for v in q.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let [w, x, y, z] = q.map(|v| v / n);
        [
            [1. - 2. * (y * y + z * z), 2. * (x * y - z * w), 2. * (x * z + y * w)],
            [2. * (x * y + z * w), 1. - 2. * (x * x + z * z), 2. * (y * z - x * w)],
            [2. * (x * z - y * w), 2. * (y * z + x * w), 1. - 2. * (x * x + y * y)],
        ]
    }

    fn random_state(rng: &mut impl Rng, scale: f64) -> (Mat3<f64>, Tens3<f64>) {
        let mut h = [[0.0; 3]; 3];
        let mut g = [[[0.0; 3]; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                h[i][j] = rng.random_range(-scale..scale);
                for k in j..3 {
                    g[i][j][k] = rng.random_range(-1.0..1.0);
                    g[i][k][j] = g[i][j][k];
                }
            }
        }
        (h, g)
    }

    #[test]
    fn reference_state() {
        let k = compute_kinematics(&zero_mat::<f64>(), &zero_tens(), StrainMode::Finite).unwrap();
        assert_eq!(k.f, identity::<f64>());
        assert_eq!(k.e, zero_mat::<f64>());
        assert_eq!(k.grad_e, zero_tens::<f64>());
        assert_eq!(k.j, 1.0);
    }

    #[test]
    fn uniaxial_stretch_and_simple_shear() {
        let mut h = zero_mat::<f64>();
        h[0][0] = 0.1;
        let k = compute_kinematics(&h, &zero_tens(), StrainMode::Finite).unwrap();
        assert!((k.e[0][0] - 0.105).abs() < 1e-15);
        assert!((k.j - 1.1).abs() < 1e-15);

        let mut h = zero_mat::<f64>();
        h[0][1] = 0.2;
        let k = compute_kinematics(&h, &zero_tens(), StrainMode::Finite).unwrap();
        assert!((k.e[0][1] - 0.1).abs() < 1e-15);
        assert!((k.e[1][0] - 0.1).abs() < 1e-15);
        assert!((k.e[1][1] - 0.02).abs() < 1e-15);
        assert!((k.j - 1.0).abs() < 1e-15);
    }

    #[test]
    fn inversion_is_rejected() {
        let mut h = zero_mat::<f64>();
        h[2][2] = -1.5;
        assert!(matches!(
            compute_kinematics(&h, &zero_tens(), StrainMode::Finite),
            Err(Error::ElementInversion { .. })
        ));
        // the small-strain branch never inverts
        assert!(compute_kinematics(&h, &zero_tens(), StrainMode::Small).is_ok());
    }

    #[test]
    fn trailing_symmetrization() {
        let mut g = zero_tens::<f64>();
        g[0][1][2] = 1.0;
        let k = compute_kinematics(&zero_mat(), &g, StrainMode::Finite).unwrap();
        assert_eq!(k.grad_f[0][1][2], 0.5);
        assert_eq!(k.grad_f[0][2][1], 0.5);
    }

    #[test]
    fn frame_indifference() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for _ in 0..50 {
            let (h, g) = random_state(&mut rng, 0.3);
            let q = random_rotation(&mut rng);
            let k = compute_kinematics(&h, &g, StrainMode::Finite).unwrap();
            // rotated state: QF = I + (QF - I), Q GradF
            let mut hq = zero_mat::<f64>();
            let mut gq = zero_tens::<f64>();
            for i in 0..3 {
                for j in 0..3 {
                    hq[i][j] = (0..3).map(|m| q[i][m] * k.f[m][j]).sum::<f64>() - if i == j { 1.0 } else { 0.0 };
                    for l in 0..3 {
                        gq[i][j][l] = (0..3).map(|m| q[i][m] * k.grad_f[m][j][l]).sum();
                    }
                }
            }
            let kq = compute_kinematics(&hq, &gq, StrainMode::Finite).unwrap();
            for a in 0..3 {
                for b in 0..3 {
                    assert!((k.e[a][b] - kq.e[a][b]).abs() < 1e-12);
                    for c in 0..3 {
                        assert!((k.grad_e[a][b][c] - kq.grad_e[a][b][c]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn strain_gradient_matches_finite_differences() {
        // u(X) = (a X1^2 + b X2 X3, c X1 X2, d X3^2 + e X1 X3): analytic first and second gradients
        let (a, b, c, d, e) = (0.1, -0.05, 0.07, 0.03, 0.08);
        let grad = |x: [f64; 3]| -> Mat3<f64> {
            [
                [2. * a * x[0], b * x[2], b * x[1]],
                [c * x[1], c * x[0], 0.0],
                [e * x[2], 0.0, 2. * d * x[2] + e * x[0]],
            ]
        };
        let mut hess = zero_tens::<f64>();
        hess[0][0][0] = 2. * a;
        hess[0][1][2] = b;
        hess[0][2][1] = b;
        hess[1][0][1] = c;
        hess[1][1][0] = c;
        hess[2][2][2] = 2. * d;
        hess[2][0][2] = e;
        hess[2][2][0] = e;
        let x0 = [0.3, 0.7, -0.4];
        let k = compute_kinematics(&grad(x0), &hess, StrainMode::Finite).unwrap();
        let h = 1e-6;
        for cdir in 0..3 {
            let mut xp = x0;
            let mut xm = x0;
            xp[cdir] += h;
            xm[cdir] -= h;
            let kp = compute_kinematics(&grad(xp), &hess, StrainMode::Finite).unwrap();
            let km = compute_kinematics(&grad(xm), &hess, StrainMode::Finite).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let fd = (kp.e[i][j] - km.e[i][j]) / (2.0 * h);
                    let an = k.grad_e[i][j][cdir];
                    assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{fd} {an}");
                }
            }
        }
    }

    #[test]
    fn small_strain_branch() {
        let mut h = zero_mat::<f64>();
        h[0][1] = 0.2;
        let mut g = zero_tens::<f64>();
        g[0][1][1] = 1.0;
        let k = compute_kinematics(&h, &g, StrainMode::Small).unwrap();
        assert_eq!(k.f, identity::<f64>());
        assert!((k.e[0][1] - 0.1).abs() < 1e-15);
        assert_eq!(k.e[1][1], 0.0);
        assert!((k.grad_e[0][1][1] - 0.5).abs() < 1e-15);
        assert!((k.grad_e[1][0][1] - 0.5).abs() < 1e-15);
    }
}
