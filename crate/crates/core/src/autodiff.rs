//! Forward-mode algorithmic differentiation.
//!
//! Physics kernels are written once over the [`Scalar`] trait. Evaluating them
//! with `f64` gives residuals; evaluating them with [`Dual`] numbers seeded by
//! [`lift`] carries exact first derivatives alongside, from which
//! [`extract_jacobian`] reads the Jacobian.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Real-like scalar algebra shared by `f64` and dual numbers.
pub trait Scalar:
    Copy
    + Debug
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + Send
    + Sync
{
    fn from_f64(v: f64) -> Self;
    fn value(&self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn powf(self, e: f64) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline]
    fn powf(self, e: f64) -> Self {
        f64::powf(self, e)
    }
}

/// Augmented scalar: a value plus `N` directional derivatives (seeds).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const N: usize> {
    pub value: f64,
    pub seeds: [f64; N],
}

impl<const N: usize> Dual<N> {
    /// A constant; all seeds are zero.
    #[inline]
    pub fn constant(value: f64) -> Self {
        Self { value, seeds: [0.0; N] }
    }

    /// An independent variable with unit seed in slot `slot`.
    #[inline]
    pub fn variable(value: f64, slot: usize) -> Self {
        let mut seeds = [0.0; N];
        seeds[slot] = 1.0;
        Self { value, seeds }
    }

    /// Applies a scalar function with known value and derivative.
    #[inline]
    fn chain(self, value: f64, slope: f64) -> Self {
        let mut seeds = self.seeds;
        for s in seeds.iter_mut() {
            *s *= slope;
        }
        Self { value, seeds }
    }
}

impl<const N: usize> PartialOrd for Dual<N> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.value.partial_cmp(&other.value)
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl<const N: usize> AddAssign for Dual<N> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        self.value += rhs.value;
        for (a, b) in self.seeds.iter_mut().zip(rhs.seeds.iter()) {
            *a += b;
        }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self -= rhs;
        self
    }
}

impl<const N: usize> SubAssign for Dual<N> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        self.value -= rhs.value;
        for (a, b) in self.seeds.iter_mut().zip(rhs.seeds.iter()) {
            *a -= b;
        }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut seeds = [0.0; N];
        for i in 0..N {
            seeds[i] = self.seeds[i] * rhs.value + self.value * rhs.seeds[i];
        }
        Self {
            value: self.value * rhs.value,
            seeds,
        }
    }
}

impl<const N: usize> MulAssign for Dual<N> {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.value;
        let value = self.value * inv;
        let mut seeds = [0.0; N];
        for i in 0..N {
            seeds[i] = (self.seeds[i] - value * rhs.seeds[i]) * inv;
        }
        Self { value, seeds }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.chain(-self.value, -1.0)
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: f64) -> Self {
        self.value += rhs;
        self
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: f64) -> Self {
        self.value -= rhs;
        self
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: f64) -> Self {
        self.chain(self.value * rhs, rhs)
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        self * (1.0 / rhs)
    }
}

impl<const N: usize> Scalar for Dual<N> {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Self::constant(v)
    }
    #[inline]
    fn value(&self) -> f64 {
        self.value
    }
    fn sqrt(self) -> Self {
        let r = self.value.sqrt();
        self.chain(r, 0.5 / r)
    }
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.value.ln(), 1.0 / self.value)
    }
    fn powi(self, n: i32) -> Self {
        let slope = if n == 0 { 0.0 } else { n as f64 * self.value.powi(n - 1) };
        self.chain(self.value.powi(n), slope)
    }
    fn powf(self, e: f64) -> Self {
        self.chain(self.value.powf(e), e * self.value.powf(e - 1.0))
    }
}

/// Seeds each dof with the unit vector of its position.
pub fn lift<const N: usize>(dofs: &[f64]) -> Result<Vec<Dual<N>>> {
    if dofs.len() > N {
        return Err(Error::SeedMismatch {
            expected: N,
            found: dofs.len(),
        });
    }
    Ok(dofs.iter().enumerate().map(|(i, &v)| Dual::variable(v, i)).collect())
}

/// Dense Jacobian `J[r][c] = seed c of residual r` for the first `ndof` seeds.
pub fn extract_jacobian<const N: usize>(residual: &[Dual<N>], ndof: usize) -> Result<Vec<Vec<f64>>> {
    if ndof > N {
        return Err(Error::SeedMismatch {
            expected: N,
            found: ndof,
        });
    }
    Ok(residual.iter().map(|r| r.seeds[..ndof].to_vec()).collect())
}

/// Determinant of a 3×3 matrix.
pub fn det3<T: Scalar>(m: &[[T; 3]; 3]) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Inverse of a 3×3 matrix by cofactors; `None` when the determinant vanishes.
pub fn inv3<T: Scalar>(m: &[[T; 3]; 3]) -> Option<[[T; 3]; 3]> {
    let det = det3(m);
    if det.value() == 0.0 {
        return None;
    }
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [c(1, 1, 2, 2), -c(0, 1, 2, 2), c(0, 1, 1, 2)],
        [-c(1, 0, 2, 2), c(0, 0, 2, 2), -c(0, 0, 1, 2)],
        [c(1, 0, 2, 1), -c(0, 0, 2, 1), c(0, 0, 1, 1)],
    ];
    let mut out = adj;
    for row in out.iter_mut() {
        for v in row.iter_mut() {
            *v = *v / det;
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lift_seeds_identity() {
        let d = lift::<2>(&[3.0, -1.0]).unwrap();
        assert_eq!(d[0].seeds, [1.0, 0.0]);
        assert_eq!(d[1].seeds, [0.0, 1.0]);
        assert!(matches!(lift::<1>(&[1.0, 2.0]), Err(Error::SeedMismatch { .. })));
    }

    #[test]
    fn square_and_product_rules() {
        let x = lift::<1>(&[3.0]).unwrap()[0];
        let y = x * x;
        assert_eq!(y.value, 9.0);
        assert_eq!(y.seeds[0], 6.0);

        let v = lift::<2>(&[1.0, 2.0]).unwrap();
        let f = v[0] * v[1] + v[0].exp();
        let e = std::f64::consts::E;
        assert!((f.value - (2.0 + e)).abs() < 1e-15);
        assert!((f.seeds[0] - (2.0 + e)).abs() < 1e-15);
        assert!((f.seeds[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constants_have_zero_seeds() {
        let c = Dual::<4>::from_f64(2.5);
        assert_eq!(c.seeds, [0.0; 4]);
        let x = Dual::<4>::variable(2.0, 1);
        let y = (x * c + 1.0) / c - c;
        assert!((y.seeds[1] - 1.0).abs() < 1e-15);
        assert_eq!(y.seeds[0], 0.0);
    }

    #[test]
    fn elementary_functions_match_calculus() {
        let x = Dual::<1>::variable(1.7, 0);
        let h = 1e-6;
        type Pair = (fn(Dual<1>) -> Dual<1>, fn(f64) -> f64);
        let checks: [Pair; 5] = [
            (|x| x.sqrt(), |x| x.sqrt()),
            (|x| x.ln(), |x| x.ln()),
            (|x| x.powi(3), |x| x.powi(3)),
            (|x| x.powf(2.5), |x| x.powf(2.5)),
            (|x| Dual::one() / x, |x| 1.0 / x),
        ];
        for (fd, ff) in checks {
            let d = fd(x);
            let fdv = (ff(1.7 + h) - ff(1.7 - h)) / (2.0 * h);
            assert!((d.seeds[0] - fdv).abs() < 1e-8);
            assert_eq!(d.value, ff(1.7));
        }
    }

    #[test]
    fn linear_residual_jacobian_is_exact() {
        let k = [[4.0, -1.0, 0.5], [-1.0, 3.0, 2.0], [0.0, 2.0, 5.0]];
        let f = [1.0, 0.0, -2.0];
        let u = lift::<3>(&[0.3, -0.2, 0.9]).unwrap();
        let r: Vec<Dual<3>> = (0..3)
            .map(|i| {
                let mut s = Dual::constant(-f[i]);
                for j in 0..3 {
                    s += u[j] * k[i][j];
                }
                s
            })
            .collect();
        let jac = extract_jacobian(&r, 3).unwrap();
        for i in 0..3 {
            assert_eq!(jac[i], k[i].to_vec());
        }
        assert!(extract_jacobian::<3>(&[], 0).unwrap().is_empty());
        assert!(extract_jacobian(&r, 4).is_err());
    }

    #[test]
    fn det_and_inverse() {
        let m = [[2.0, 1.0, 0.0], [0.5, 3.0, 1.0], [0.0, -1.0, 4.0]];
        let inv = inv3(&m).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..3).map(|k| m[i][k] * inv[k][j]).sum();
                assert!((s - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
        assert!(inv3(&[[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]]).is_none());
    }
}
