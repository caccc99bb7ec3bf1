//! Univariate B-spline bases on open knot vectors and their rational,
//! tensor-product composition.
//!
//! Basis values follow the Cox-de Boor recursion; derivatives are obtained
//! from the degree-reduction identity
//!
//! ```text
//! B'_{i,p}(ξ) = p/(ξ_{i+p} - ξ_i) B_{i,p-1}(ξ) - p/(ξ_{i+p+1} - ξ_{i+1}) B_{i+1,p-1}(ξ)
//! ```
//!
//! with every `0/0` quotient taken as zero.

use crate::error::{Error, Result};

/// A clamped (open) knot vector of a given polynomial degree.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    degree: usize,
    knots: Vec<f64>,
}

impl KnotVector {
    /// Validates and wraps a knot sequence.
    ///
    /// The first and last knot values must each appear exactly `degree + 1`
    /// times and no interior knot may be repeated more than `degree + 1` times.
    pub fn new(degree: usize, knots: Vec<f64>) -> Result<Self> {
        if degree < 1 {
            return Err(Error::invalid("knot vector degree must be at least 1"));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::invalid("knots must be finite"));
        }
        if knots.len() < 2 * (degree + 1) {
            return Err(Error::invalid(format!(
                "a degree-{degree} open knot vector needs at least {} knots, got {}",
                2 * (degree + 1),
                knots.len()
            )));
        }
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("knots must be non-decreasing"));
        }
        let mut run = 1;
        for w in knots.windows(2) {
            if w[1] == w[0] {
                run += 1;
                if run > degree + 1 {
                    return Err(Error::invalid(format!(
                        "knot {} has multiplicity above degree + 1",
                        w[0]
                    )));
                }
            } else {
                run = 1;
            }
        }
        let m = knots.len();
        let first = knots[0];
        let last = knots[m - 1];
        let clamped_front = knots[..=degree].iter().all(|&k| k == first) && knots[degree + 1] > first;
        let clamped_back = knots[m - degree - 1..].iter().all(|&k| k == last) && knots[m - degree - 2] < last;
        if !(clamped_front && clamped_back) {
            return Err(Error::invalid(
                "knot vector must be open: end knots repeated exactly degree + 1 times",
            ));
        }
        Ok(Self { degree, knots })
    }

    /// Open knot vector with `spans` equal knot spans on `[lo, hi]` and simple
    /// interior knots (C^{p-1} continuity).
    pub fn uniform(degree: usize, spans: usize, lo: f64, hi: f64) -> Result<Self> {
        if spans == 0 {
            return Err(Error::invalid("at least one knot span is required"));
        }
        if !(hi > lo) {
            return Err(Error::invalid("uniform knot vector needs hi > lo"));
        }
        let mut knots = vec![lo; degree + 1];
        for k in 1..spans {
            knots.push(lo + (hi - lo) * k as f64 / spans as f64);
        }
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        Self::new(degree, knots)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions `n`.
    pub fn basis_count(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[self.degree], self.knots[self.basis_count()])
    }

    /// Indices `s` of the nonempty spans `[knots[s], knots[s+1])`, in order.
    pub fn spans(&self) -> Vec<usize> {
        (self.degree..self.basis_count())
            .filter(|&s| self.knots[s] < self.knots[s + 1])
            .collect()
    }

    /// Greville abscissae, one per basis function.
    pub fn greville(&self) -> Vec<f64> {
        let p = self.degree;
        (0..self.basis_count())
            .map(|i| self.knots[i + 1..=i + p].iter().sum::<f64>() / p as f64)
            .collect()
    }

    /// Locates the knot span containing `xi`; the domain end belongs to the
    /// last nonempty span.
    pub fn find_span(&self, xi: f64) -> Result<usize> {
        let (lo, hi) = self.domain();
        if !(xi >= lo && xi <= hi) {
            return Err(Error::Domain { value: xi, lo, hi });
        }
        let n = self.basis_count();
        if xi == hi {
            // last nonempty span; open knots guarantee knots[n-1] < knots[n]
            return Ok(n - 1);
        }
        // largest s in [p, n-1] with knots[s] <= xi
        let mut low = self.degree;
        let mut high = n;
        while high - low > 1 {
            let mid = (low + high) / 2;
            if xi < self.knots[mid] {
                high = mid;
            } else {
                low = mid;
            }
        }
        Ok(low)
    }

    /// Evaluates the `p+1` basis functions that are nonzero at `xi`, with up to
    /// `nderiv` derivatives.
    pub fn eval_basis(&self, xi: f64, nderiv: usize) -> Result<BasisEval> {
        if nderiv > 2 {
            return Err(Error::invalid("at most two basis derivatives are supported"));
        }
        let span = self.find_span(xi)?;
        Ok(self.eval_basis_on_span(span, xi, nderiv))
    }

    /// Same as [`eval_basis`](Self::eval_basis) with the span supplied by the
    /// caller; `xi` may sit on either closed end of the span.
    pub fn eval_basis_on_span(&self, span: usize, xi: f64, nderiv: usize) -> BasisEval {
        let p = self.degree;
        let u = &self.knots;
        // ndu[j][r]: basis of degree j (upper triangle) and knot differences (lower)
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = xi - u[span + 1 - j];
            right[j] = u[span + j] - xi;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = if ndu[j][r] == 0.0 {
                    0.0
                } else {
                    ndu[r][j - 1] / ndu[j][r]
                };
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }

        let values: Vec<f64> = (0..=p).map(|j| ndu[j][p]).collect();
        let mut ders = vec![vec![0.0; p + 1]; nderiv + 1];
        ders[0].clone_from(&values);

        let mut a = [vec![0.0; p + 1], vec![0.0; p + 1]];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=nderiv {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p as isize - k as isize;
                if pk < 0 {
                    // derivative order exceeds the degree
                    ders[k][r] = 0.0;
                    std::mem::swap(&mut s1, &mut s2);
                    continue;
                }
                let pk = pk as usize;
                if r >= k {
                    let den = ndu[pk + 1][rk as usize];
                    a[s2][0] = if den == 0.0 { 0.0 } else { a[s1][0] / den };
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if (r as isize - 1) <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    let den = ndu[pk + 1][idx];
                    a[s2][j] = if den == 0.0 {
                        0.0
                    } else {
                        (a[s1][j] - a[s1][j - 1]) / den
                    };
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    let den = ndu[pk + 1][r];
                    a[s2][k] = if den == 0.0 { 0.0 } else { -a[s1][k - 1] / den };
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for (k, row) in ders.iter_mut().enumerate().skip(1) {
            for v in row.iter_mut() {
                *v *= factor;
            }
            factor *= p.saturating_sub(k) as f64;
        }

        let mut ders = ders.into_iter();
        let _ = ders.next();
        let d1 = ders.next().unwrap_or_else(|| vec![0.0; p + 1]);
        let d2 = ders.next().unwrap_or_else(|| vec![0.0; p + 1]);
        BasisEval { span, values, d1, d2 }
    }
}

/// Nonzero basis functions at a parametric point: functions
/// `span - p ..= span`, with derivatives per unit parametric length.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisEval {
    pub span: usize,
    pub values: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

impl BasisEval {
    /// Global index of the first nonzero function.
    pub fn first_index(&self) -> usize {
        self.span + 1 - self.values.len()
    }
}

/// Strictly positive NURBS weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet(Vec<f64>);

impl WeightSet {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(**w > 0.0)) {
            return Err(Error::invalid(format!("weight {i} is not positive ({w})")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(count: usize) -> Self {
        Self(vec![1.0; count])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_polynomial(&self) -> bool {
        self.0.iter().all(|&w| w == 1.0)
    }
}

/// Values and parametric derivatives of the `(p+1)^dim` local functions of a
/// tensor-product (possibly rational) basis. Function `a` has multi-index
/// `(a_0, a_1, a_2)` with direction 0 varying fastest; unused directions carry
/// zero derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBasis {
    pub values: Vec<f64>,
    pub grads: Vec<[f64; 3]>,
    pub hessians: Vec<[[f64; 3]; 3]>,
}

/// Tensor-product composition of per-direction evaluations, divided through
/// by the weight function when `weights` is given.
///
/// `weights` holds one weight per local function in tensor order.
pub fn rational_derivatives(bvals: &[BasisEval], weights: Option<&[f64]>) -> Result<TensorBasis> {
    let dim = bvals.len();
    if !(1..=3).contains(&dim) {
        return Err(Error::invalid("tensor basis needs 1 to 3 directions"));
    }
    let counts: Vec<usize> = bvals.iter().map(|b| b.values.len()).collect();
    let total: usize = counts.iter().product();
    if let Some(w) = weights {
        if w.len() != total {
            return Err(Error::invalid(format!(
                "expected {total} local weights, got {}",
                w.len()
            )));
        }
        if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::invalid(format!("weight {i} is not positive ({v})")));
        }
    }

    let mut values = vec![0.0; total];
    let mut grads = vec![[0.0; 3]; total];
    let mut hessians = vec![[[0.0; 3]; 3]; total];
    let mut idx = [0usize; 3];
    for a in 0..total {
        let mut rem = a;
        for d in 0..dim {
            idx[d] = rem % counts[d];
            rem /= counts[d];
        }
        // per-direction factor for derivative order k
        let f = |d: usize, k: usize| -> f64 {
            let b = &bvals[d];
            match k {
                0 => b.values[idx[d]],
                1 => b.d1[idx[d]],
                _ => b.d2[idx[d]],
            }
        };
        let mut v = 1.0;
        for d in 0..dim {
            v *= f(d, 0);
        }
        values[a] = v;
        for alpha in 0..dim {
            let mut g = 1.0;
            for d in 0..dim {
                g *= f(d, usize::from(d == alpha));
            }
            grads[a][alpha] = g;
            for beta in alpha..dim {
                let mut h = 1.0;
                for d in 0..dim {
                    let k = usize::from(d == alpha) + usize::from(d == beta);
                    h *= f(d, k);
                }
                hessians[a][alpha][beta] = h;
                hessians[a][beta][alpha] = h;
            }
        }
    }

    let Some(w) = weights else {
        return Ok(TensorBasis {
            values,
            grads,
            hessians,
        });
    };

    let mut wsum = 0.0;
    let mut wgrad = [0.0; 3];
    let mut whess = [[0.0; 3]; 3];
    for a in 0..total {
        wsum += w[a] * values[a];
        for al in 0..3 {
            wgrad[al] += w[a] * grads[a][al];
            for be in 0..3 {
                whess[al][be] += w[a] * hessians[a][al][be];
            }
        }
    }
    for a in 0..total {
        let n = w[a] * values[a] / wsum;
        let mut g = [0.0; 3];
        for al in 0..3 {
            g[al] = (w[a] * grads[a][al] - n * wgrad[al]) / wsum;
        }
        let mut h = [[0.0; 3]; 3];
        for al in 0..3 {
            for be in 0..3 {
                h[al][be] =
                    (w[a] * hessians[a][al][be] - g[al] * wgrad[be] - g[be] * wgrad[al] - n * whess[al][be]) / wsum;
            }
        }
        values[a] = n;
        grads[a] = g;
        hessians[a] = h;
    }
    Ok(TensorBasis {
        values,
        grads,
        hessians,
    })
}
