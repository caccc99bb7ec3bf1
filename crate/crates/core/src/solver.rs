//! Newton iteration with load stepping, backed by a sparse LU solve.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::LuError;
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::assembly::{NonlinearSystem, SparseMatrix};
use crate::error::{Error, Result};

const MAX_BISECTIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewtonConfig {
    pub tol_rel: f64,
    pub tol_abs: f64,
    pub max_iter: usize,
    pub load_steps: usize,
    /// Backtrack along the Newton direction until the residual norm drops.
    pub line_search: bool,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol_rel: 1e-10,
            tol_abs: 1e-12,
            max_iter: 50,
            load_steps: 10,
            line_search: false,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_rel > 0.0) {
            return Err(Error::config("solver.tol_rel", "must be positive"));
        }
        if !(self.tol_abs > 0.0) {
            return Err(Error::config("solver.tol_abs", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::config("solver.max_iter", "must be at least 1"));
        }
        if self.load_steps == 0 {
            return Err(Error::config("solver.load_steps", "must be at least 1"));
        }
        Ok(())
    }
}

/// History of one (sub)step of the load path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub load_factor: f64,
    pub iterations: usize,
    /// `‖R‖₂` before the first and after every correction.
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub steps: Vec<StepReport>,
    pub u: Vec<f64>,
    pub converged: bool,
}

impl SolveReport {
    pub fn total_iterations(&self) -> usize {
        self.steps.iter().map(|s| s.iterations).sum()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solves `R(U) = 0` from the system's current `U`, ramping loads and
/// boundary data over `cfg.load_steps` equal increments. On success the
/// converged field is left in `system.u`.
pub fn newton_solve(system: &mut NonlinearSystem, cfg: &NewtonConfig) -> Result<SolveReport> {
    cfg.validate()?;
    let mut steps = Vec::new();
    let mut done = 0.0;
    for step in 1..=cfg.load_steps {
        let target = step as f64 / cfg.load_steps as f64;
        load_increment(system, cfg, step, done, target, 0, &mut steps)?;
        done = target;
    }
    Ok(SolveReport {
        steps,
        u: system.u.clone(),
        converged: true,
    })
}

fn load_increment(
    system: &mut NonlinearSystem,
    cfg: &NewtonConfig,
    step: usize,
    from: f64,
    to: f64,
    depth: usize,
    steps: &mut Vec<StepReport>,
) -> Result<()> {
    let saved = system.u.clone();
    match newton_at(system, cfg, step, to) {
        Ok(report) => {
            steps.push(report);
            Ok(())
        }
        Err(err @ Error::ElementInversion { .. }) => {
            if depth == MAX_BISECTIONS {
                return Err(err);
            }
            system.u = saved;
            system.set_load_factor(from);
            let mid = 0.5 * (from + to);
            load_increment(system, cfg, step, from, mid, depth + 1, steps)?;
            load_increment(system, cfg, step, mid, to, depth + 1, steps)
        }
        Err(err) => Err(err),
    }
}

fn newton_at(system: &mut NonlinearSystem, cfg: &NewtonConfig, step: usize, lf: f64) -> Result<StepReport> {
    system.set_load_factor(lf);
    let (mut r, mut k) = system.assemble(&system.u)?;
    let mut rn = norm(&r);
    let tol = cfg.tol_abs.max(cfg.tol_rel * rn);
    let mut history = vec![rn];
    let mut iterations = 0;
    loop {
        if iterations > 0 && (rn <= tol || rn <= roundoff_floor(&k, &system.u)) {
            return Ok(StepReport {
                load_factor: lf,
                iterations,
                residuals: history,
            });
        }
        if iterations == cfg.max_iter {
            return Err(Error::NonConvergence {
                step,
                iterations,
                last_residual: rn,
                history,
            });
        }
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let du = linear_solve(&k, &neg)?;
        iterations += 1;
        let base = system.u.clone();
        let mut alpha = 1.0;
        loop {
            let trial: Vec<f64> = base.iter().zip(&du).map(|(u, d)| u + alpha * d).collect();
            let attempt = system.assemble(&trial);
            let accept = match &attempt {
                Ok((rt, _)) => !cfg.line_search || norm(rt) <= (1.0 - 1e-4 * alpha) * rn || alpha < 1e-3,
                Err(Error::ElementInversion { .. }) => !cfg.line_search || alpha < 1e-3,
                Err(_) => true,
            };
            if accept {
                let (rt, kt) = attempt?;
                system.u = trial;
                r = rt;
                k = kt;
                break;
            }
            alpha *= 0.5;
        }
        rn = norm(&r);
        history.push(rn);
        if !rn.is_finite() {
            return Err(Error::NonConvergence {
                step,
                iterations,
                last_residual: rn,
                history,
            });
        }
    }
}

/// Residual norm below which assembly roundoff dominates:
/// `16 ε ‖ |K| |U| ‖₂`.
fn roundoff_floor(k: &SparseMatrix, u: &[f64]) -> f64 {
    let mut y = vec![0.0; k.n];
    for c in 0..k.n {
        for p in k.col_ptr[c]..k.col_ptr[c + 1] {
            y[k.row_idx[p]] += k.values[p].abs() * u[c].abs();
        }
    }
    16.0 * f64::EPSILON * norm(&y)
}

/// Direct sparse LU solve of `K x = r`.
pub fn linear_solve(k: &SparseMatrix, r: &[f64]) -> Result<Vec<f64>> {
    if r.len() != k.n {
        return Err(Error::invalid(format!(
            "right-hand side has {} entries for a {}x{} matrix",
            r.len(),
            k.n,
            k.n
        )));
    }
    if k.n == 0 {
        return Ok(Vec::new());
    }
    for c in 0..k.n {
        if k.values[k.col_ptr[c]..k.col_ptr[c + 1]].iter().all(|v| *v == 0.0) {
            return Err(Error::SingularMatrix { dof: c });
        }
    }
    let symbolic = SymbolicSparseColMatRef::new_checked(k.n, k.n, &k.col_ptr, None, &k.row_idx);
    let mat = SparseColMatRef::new(symbolic, &k.values);
    let lu = mat.sp_lu().map_err(|e| match e {
        LuError::SymbolicSingular { index } => Error::SingularMatrix { dof: index },
        LuError::Generic(g) => Error::invalid(format!("sparse factorization failed: {g:?}")),
    })?;
    let solve = |rhs: &[f64]| -> Vec<f64> {
        let b = Mat::from_fn(k.n, 1, |i, _| rhs[i]);
        let x = lu.solve(&b);
        (0..k.n).map(|i| x[(i, 0)]).collect()
    };
    let mut x = solve(r);
    if let Some(dof) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::SingularMatrix { dof });
    }
    // one step of iterative refinement
    let kx = k.matvec(&x);
    let res: Vec<f64> = r.iter().zip(&kx).map(|(a, b)| a - b).collect();
    for (xi, di) in x.iter_mut().zip(solve(&res)) {
        *xi += di;
    }
    Ok(x)
}
