//! Analytic references, error seminorms, convergence studies, energy
//! partition and field sampling.

use serde::Serialize;

use crate::assembly::{interpolate, BcKind, BoundaryCondition, NonlinearSystem};
use crate::error::{Error, Result};
use crate::kinematics::{compute_kinematics, Kinematics, StrainMode};
use crate::material::{
    cauchy_pushforward, energy_parts, multiwell_wells, stresses, CurrentStress, MaterialModel, MaterialParams,
    StressState,
};
use crate::mesh::{PatchGeometry, QuadratureRule};
use crate::solver::{newton_solve, NewtonConfig, SolveReport};

/// Exact displacement of the 1D bar under end traction with vanishing end
/// strain, and its first two derivatives:
///
/// ```text
/// u = t l / (μ (e^{L/l} + 1)) (1 − e^{L/l} + e^{(L−x)/l} − e^{x/l}) + t x / μ
/// ```
///
/// evaluated in a form that never forms `e^{L/l}`.
pub fn analytic_1d(x: f64, mu: f64, l: f64, t: f64, length: f64) -> Result<(f64, f64, f64)> {
    if !(mu > 0.0) || !(l > 0.0) || !(length > 0.0) {
        return Err(Error::invalid("analytic solution needs mu > 0, l > 0 and L > 0"));
    }
    if !(0.0..=length).contains(&x) {
        return Err(Error::Domain {
            value: x,
            lo: 0.0,
            hi: length,
        });
    }
    let a = length / l;
    let d = 1.0 + (-a).exp();
    let left = (-x / l).exp();
    let right = ((x - length) / l).exp();
    let u = t * l / mu * (-(0.5 * a).tanh() + (left - right) / d) + t * x / mu;
    let du = t / mu * (1.0 - (left + right) / d);
    let d2u = t / (mu * l) * (left - right) / d;
    Ok((u, du, d2u))
}

/// The 1D bar `0 ≤ x ≤ L`: `u = 0` and `u' = 0` at `x = 0`, `u' = 0` and
/// traction `t` at `x = L`.
///
/// `mu` and `l` are the moduli of the stress-strain relations `σ = μ u'` and
/// `β = μ l² u''`; [`Bar1d::material`] converts them to energy parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bar1d {
    pub mu: f64,
    pub l: f64,
    pub t: f64,
    pub length: f64,
    pub elements: usize,
    pub degree: usize,
    pub mode: StrainMode,
}

impl Default for Bar1d {
    fn default() -> Self {
        Self {
            mu: 1.0,
            l: 1.0,
            t: 1.0,
            length: 1.0,
            elements: 100,
            degree: 2,
            mode: StrainMode::Small,
        }
    }
}

impl Bar1d {
    /// With `λ = 0` the energy gives `σ = 2μ' u'` and `β = μ' l'² u''`, so
    /// `μ' = μ/2` and `l' = √2 l`.
    pub fn material(&self) -> MaterialParams {
        MaterialParams::toupin(0.0, 0.5 * self.mu, std::f64::consts::SQRT_2 * self.l)
    }

    pub fn system(&self) -> Result<NonlinearSystem> {
        if self.elements == 0 {
            return Err(Error::config("elements", "must be at least 1"));
        }
        if self.degree < 2 {
            return Err(Error::config("degree", "must be at least 2 for a C1 basis"));
        }
        let g = PatchGeometry::box_patch(&[self.length], &[self.elements], self.degree)?;
        let mut bcs = vec![
            BoundaryCondition::on_face("xmin", 0, BcKind::DirichletU, 0.0)?,
            BoundaryCondition::on_face("xmax", 0, BcKind::Traction, self.t)?,
        ];
        if self.l > 0.0 {
            bcs.push(BoundaryCondition::on_face("xmin", 0, BcKind::DirichletDu, 0.0)?);
            bcs.push(BoundaryCondition::on_face("xmax", 0, BcKind::DirichletDu, 0.0)?);
        }
        NonlinearSystem::new(g, self.material(), self.mode, bcs)
    }

    pub fn solve(&self, cfg: &NewtonConfig) -> Result<(NonlinearSystem, SolveReport)> {
        let mut sys = self.system()?;
        let report = newton_solve(&mut sys, cfg)?;
        Ok((sys, report))
    }

    pub fn exact(&self, x: f64) -> Result<(f64, f64, f64)> {
        analytic_1d(x, self.mu, self.l, self.t, self.length)
    }
}

/// Exact displacement with its first and second gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactField {
    pub u: [f64; 3],
    pub grad: [[f64; 3]; 3],
    pub hess: [[[f64; 3]; 3]; 3],
}

impl ExactField {
    /// Field `u_1(x_1)` from scalar value and derivatives.
    pub fn axial(u: f64, du: f64, d2u: f64) -> Self {
        let mut f = ExactField {
            u: [0.0; 3],
            grad: [[0.0; 3]; 3],
            hess: [[[0.0; 3]; 3]; 3],
        };
        f.u[0] = u;
        f.grad[0][0] = du;
        f.hess[0][0][0] = d2u;
        f
    }
}

fn elevated_rule(geometry: &PatchGeometry) -> QuadratureRule {
    QuadratureRule::tensor(&geometry.degrees().iter().map(|p| p + 2).collect::<Vec<_>>())
}

/// `(∫ |D^m u − D^m u^h|² dV)^½` for `m ∈ {1, 2}` with `p + 2` Gauss points
/// per direction.
pub fn seminorm_error(
    system: &NonlinearSystem,
    u: &[f64],
    exact: impl Fn(&[f64; 3]) -> ExactField,
    m: usize,
) -> Result<f64> {
    if !(1..=2).contains(&m) {
        return Err(Error::invalid("seminorm order must be 1 or 2"));
    }
    let g = system.geometry();
    let dim = g.dim();
    let nc = system.ncomp();
    let rule = elevated_rule(g);
    let mut total = 0.0;
    for e in g.elements() {
        let lu = system.gather(e, u);
        let scale = e.reference_scale(dim);
        for (t, w) in rule.points.iter().zip(&rule.weights) {
            let xi = e.map_reference(dim, t);
            let pb = g.physical_basis(e, &xi)?;
            let s = interpolate(&pb, &lu, nc);
            let ex = exact(&pb.geometry.x);
            let mut sq = 0.0;
            for i in 0..nc {
                for j in 0..dim {
                    if m == 1 {
                        sq += (s.grad_u[i][j] - ex.grad[i][j]).powi(2);
                    } else {
                        for k in 0..dim {
                            sq += (s.grad_grad_u[i][j][k] - ex.hess[i][j][k]).powi(2);
                        }
                    }
                }
            }
            total += sq * w * scale * pb.det;
        }
    }
    Ok(total.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorRow {
    pub elements: usize,
    pub h: f64,
    pub h1: f64,
    pub h2: f64,
}

/// Errors of one degree over a mesh sequence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub degree: usize,
    pub rows: Vec<ErrorRow>,
    /// Slopes between successive rows, `(H¹, H²)`.
    pub pair_slopes: Vec<(f64, f64)>,
    /// Least-squares slopes of `log e` against `log h`.
    pub slope_h1: Option<f64>,
    pub slope_h2: Option<f64>,
}

/// Least-squares slope of `log y` against `log x`; `None` below two points.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 || x.len() != y.len() {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    Some(sxy / sxx)
}

impl ErrorReport {
    pub fn from_rows(degree: usize, rows: Vec<ErrorRow>) -> Self {
        let pair_slopes = rows
            .windows(2)
            .map(|w| {
                let r = (w[0].h / w[1].h).ln();
                ((w[0].h1 / w[1].h1).ln() / r, (w[0].h2 / w[1].h2).ln() / r)
            })
            .collect();
        let h: Vec<f64> = rows.iter().map(|r| r.h).collect();
        let e1: Vec<f64> = rows.iter().map(|r| r.h1).collect();
        let e2: Vec<f64> = rows.iter().map(|r| r.h2).collect();
        Self {
            degree,
            slope_h1: loglog_slope(&h, &e1),
            slope_h2: loglog_slope(&h, &e2),
            pair_slopes,
            rows,
        }
    }
}

/// Small-strain 1D study against the analytic solution. Meshes must be
/// strictly increasing so that `h` strictly decreases.
pub fn convergence_study(template: &Bar1d, meshes: &[usize], degrees: &[usize]) -> Result<Vec<ErrorReport>> {
    if meshes.is_empty() {
        return Err(Error::config("meshes", "mesh list is empty"));
    }
    if degrees.is_empty() {
        return Err(Error::config("degrees", "degree list is empty"));
    }
    if meshes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("meshes", "element counts must be strictly increasing"));
    }
    let cfg = NewtonConfig {
        load_steps: 1,
        ..Default::default()
    };
    let mut out = Vec::new();
    for &p in degrees {
        let mut rows = Vec::new();
        for &n in meshes {
            let bar = Bar1d {
                elements: n,
                degree: p,
                mode: StrainMode::Small,
                ..*template
            };
            let (sys, rep) = bar.solve(&cfg)?;
            let exact = |x: &[f64; 3]| {
                let (u, du, d2u) = bar.exact(x[0].clamp(0.0, bar.length)).expect("validated bar");
                ExactField::axial(u, du, d2u)
            };
            rows.push(ErrorRow {
                elements: n,
                h: bar.length / n as f64,
                h1: seminorm_error(&sys, &rep.u, exact, 1)?,
                h2: seminorm_error(&sys, &rep.u, exact, 2)?,
            });
        }
        out.push(ErrorReport::from_rows(p, rows));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergySplit {
    pub non_gradient: f64,
    pub gradient: f64,
    pub total: f64,
}

/// Integrated non-gradient and gradient parts of the stored energy.
pub fn energy_split(system: &NonlinearSystem, u: &[f64]) -> Result<EnergySplit> {
    let g = system.geometry();
    let dim = g.dim();
    let rule = elevated_rule(g);
    let (mut local, mut grad) = (0.0, 0.0);
    for e in g.elements() {
        let lu = system.gather(e, u);
        let scale = e.reference_scale(dim);
        for (t, w) in rule.points.iter().zip(&rule.weights) {
            let xi = e.map_reference(dim, t);
            let pb = g.physical_basis(e, &xi)?;
            let s = interpolate(&pb, &lu, system.ncomp());
            let k = compute_kinematics(&s.grad_u, &s.grad_grad_u, system.mode()).map_err(|err| match err {
                Error::ElementInversion { det, .. } => Error::ElementInversion { element: e.id, det },
                other => other,
            })?;
            let (a, b) = energy_parts(&k, system.material());
            let wt = w * scale * pb.det;
            local += a * wt;
            grad += b * wt;
        }
    }
    Ok(EnergySplit {
        non_gradient: local,
        gradient: grad,
        total: local + grad,
    })
}

/// Field data at one parametric point.
#[derive(Debug, Clone, Copy)]
pub struct ProbeSample {
    pub xi: [f64; 3],
    pub x: [f64; 3],
    pub u: [f64; 3],
    pub magnitude: f64,
    pub kinematics: Kinematics<f64>,
    pub stress: StressState<f64>,
    pub current: CurrentStress,
}

/// Evaluates the solution at parametric points.
pub fn field_probe(system: &NonlinearSystem, u: &[f64], points: &[[f64; 3]]) -> Result<Vec<ProbeSample>> {
    let g = system.geometry();
    points
        .iter()
        .map(|xi| {
            let e = g.locate(xi)?;
            let pb = g.physical_basis(e, xi)?;
            let s = interpolate(&pb, &system.gather(e, u), system.ncomp());
            let tag = |err: Error| match err {
                Error::ElementInversion { det, .. } => Error::ElementInversion { element: e.id, det },
                other => other,
            };
            let kinematics = compute_kinematics(&s.grad_u, &s.grad_grad_u, system.mode()).map_err(tag)?;
            let stress = stresses(&kinematics, system.material());
            let current = cauchy_pushforward(&kinematics, &stress).map_err(tag)?;
            Ok(ProbeSample {
                xi: *xi,
                x: s.x,
                u: s.u,
                magnitude: (s.u[0] * s.u[0] + s.u[1] * s.u[1] + s.u[2] * s.u[2]).sqrt(),
                kinematics,
                stress,
                current,
            })
        })
        .collect()
}

/// Per-direction parametric sample coordinates: `density` uniform
/// subdivisions of every knot span plus the Greville abscissae, sorted and
/// deduplicated.
pub fn sample_axes(geometry: &PatchGeometry, density: usize) -> Vec<Vec<f64>> {
    geometry
        .knots()
        .iter()
        .map(|kv| {
            let mut v: Vec<f64> = Vec::new();
            for s in kv.spans() {
                let (a, b) = (kv.knots()[s], kv.knots()[s + 1]);
                for k in 0..=density.max(1) {
                    v.push(a + (b - a) * k as f64 / density.max(1) as f64);
                }
            }
            v.extend(kv.greville());
            v.sort_by(f64::total_cmp);
            v.dedup_by(|a, b| (*a - *b).abs() <= 1e-14);
            v
        })
        .collect()
}

/// Tensor grid of [`sample_axes`], direction 0 fastest.
pub fn sample_grid(geometry: &PatchGeometry, density: usize) -> (Vec<usize>, Vec<[f64; 3]>) {
    let axes = sample_axes(geometry, density);
    let mut dims = vec![1usize; 3];
    for (d, a) in axes.iter().enumerate() {
        dims[d] = a.len();
    }
    let mut pts = Vec::with_capacity(dims.iter().product());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let idx = [i, j, k];
                let mut p = [0.0; 3];
                for (d, a) in axes.iter().enumerate() {
                    p[d] = a[idx[d]];
                }
                pts.push(p);
            }
        }
    }
    (dims, pts)
}

/// Reference positions and displacements on the [`sample_grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampledField {
    pub dims: Vec<usize>,
    pub x: Vec<[f64; 3]>,
    pub u: Vec<[f64; 3]>,
}

/// Evaluates position and displacement on the sample grid from per-axis
/// basis tables.
pub fn sample_displacements(system: &NonlinearSystem, u: &[f64], density: usize) -> Result<SampledField> {
    let g = system.geometry();
    let nc = system.ncomp();
    let axes = sample_axes(g, density);
    let tables: Vec<Vec<(usize, Vec<f64>)>> = axes
        .iter()
        .zip(g.knots())
        .map(|(a, kv)| {
            a.iter()
                .map(|&xi| kv.eval_basis(xi, 0).map(|b| (b.first_index(), b.values)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let unit = vec![(0usize, vec![1.0])];
    let table = |d: usize| if d < tables.len() { &tables[d] } else { &unit };
    let mut dims = vec![1usize; 3];
    for (d, a) in axes.iter().enumerate() {
        dims[d] = a.len();
    }
    let w = g.weights().as_slice();
    let cps = g.control_points();
    let n = dims.iter().product();
    let (mut xs, mut us) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (f2, b2) in table(2) {
        for (f1, b1) in table(1) {
            for (f0, b0) in table(0) {
                let (mut x, mut v, mut wsum) = ([0.0; 3], [0.0; 3], 0.0);
                for (c, n2) in b2.iter().enumerate() {
                    for (b, n1) in b1.iter().enumerate() {
                        for (a, n0) in b0.iter().enumerate() {
                            let f = g.flat_index([f0 + a, f1 + b, f2 + c]);
                            let r = n0 * n1 * n2 * w[f];
                            wsum += r;
                            for d in 0..3 {
                                x[d] += r * cps[f][d];
                            }
                            for (i, vi) in v.iter_mut().enumerate().take(nc) {
                                *vi += r * u[f * nc + i];
                            }
                        }
                    }
                }
                xs.push(x.map(|c| c / wsum));
                us.push(v.map(|c| c / wsum));
            }
        }
    }
    Ok(SampledField { dims, x: xs, u: us })
}

/// Largest displacement magnitude over the sample grid.
pub fn u_max(system: &NonlinearSystem, u: &[f64], density: usize) -> Result<f64> {
    let s = sample_displacements(system, u, density)?;
    Ok(s.u
        .iter()
        .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
        .fold(0.0, f64::max))
}

/// 1D double-well bar with fixed ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Multiwell1d {
    pub l: f64,
    /// Modulus of the gradient term is `mu · l²`.
    pub mu: f64,
    pub elements: usize,
    pub degree: usize,
}

#[derive(Debug, Clone)]
pub struct MultiwellResult {
    pub report: SolveReport,
    /// `(x, E_11)` samples.
    pub strain: Vec<(f64, f64)>,
    pub interfaces: usize,
    /// Distance between the 10 % and 90 % crossings of the jump between wells.
    pub width: f64,
    pub energy: EnergySplit,
}

impl Multiwell1d {
    pub fn system(&self) -> Result<NonlinearSystem> {
        let g = PatchGeometry::box_patch(&[1.0], &[self.elements], self.degree)?;
        let bcs = vec![
            BoundaryCondition::on_face("xmin", 0, BcKind::DirichletU, 0.0)?,
            BoundaryCondition::on_face("xmax", 0, BcKind::DirichletU, 0.0)?,
        ];
        let m = MaterialParams {
            lambda: 0.0,
            mu: self.mu,
            l: self.l,
            model: MaterialModel::Multiwell1d,
        };
        let mut sys = NonlinearSystem::new(g, m, StrainMode::Small, bcs)?;
        seed_single_interface(&mut sys);
        Ok(sys)
    }

    pub fn solve(&self, cfg: &NewtonConfig) -> Result<MultiwellResult> {
        let mut sys = self.system()?;
        let report = newton_solve(&mut sys, cfg)?;
        let profile = strain_profile(&sys, &report.u)?;
        let energy = energy_split(&sys, &report.u)?;
        Ok(MultiwellResult {
            report,
            strain: profile.strain,
            interfaces: profile.interfaces,
            width: profile.width,
            energy,
        })
    }
}

/// Seeds a 1D bar with a single smooth interface between the two wells,
/// placed so that the mean strain vanishes, with width `l`.
pub fn seed_single_interface(system: &mut NonlinearSystem) {
    let (lo, hi) = multiwell_wells();
    let cps = system.geometry().control_points();
    let (a, len) = (cps[0][0], cps[cps.len() - 1][0] - cps[0][0]);
    let x0 = a + len * (-lo / (hi - lo));
    let w = system.material().l.max(1e-3 * len);
    let strain = |x: f64| lo + (hi - lo) * 0.5 * (1.0 - ((x - x0) / w).tanh());
    let n = 4000;
    let integral = |x: f64| -> f64 {
        let h = (x - a) / n as f64;
        (0..n).map(|k| strain(a + (k as f64 + 0.5) * h) * h).sum()
    };
    let end = integral(a + len);
    system.set_initial_guess(|p| [integral(p[0]) - end * (p[0] - a) / len, 0.0, 0.0]);
}

/// Axial strain along a 1D bar with its well-to-well interfaces.
#[derive(Debug, Clone, PartialEq)]
pub struct StrainProfile {
    /// `(x, E_11)` samples.
    pub strain: Vec<(f64, f64)>,
    pub interfaces: usize,
    /// Distance between the 10 % and 90 % crossings of the jump between wells.
    pub width: f64,
}

pub fn strain_profile(system: &NonlinearSystem, u: &[f64]) -> Result<StrainProfile> {
    let (lo, hi) = multiwell_wells();
    let (_, pts) = sample_grid(system.geometry(), 20);
    let samples = field_probe(system, u, &pts)?;
    let strain: Vec<(f64, f64)> = samples.iter().map(|s| (s.x[0], s.kinematics.e[0][0])).collect();
    let mid = 0.5 * (lo + hi);
    let interfaces = strain
        .windows(2)
        .filter(|w| (w[0].1 - mid).signum() != (w[1].1 - mid).signum())
        .count();
    let crossing = |level: f64| -> Option<f64> {
        strain.windows(2).find_map(|w| {
            let (a, b) = (w[0].1 - level, w[1].1 - level);
            if a == 0.0 {
                Some(w[0].0)
            } else if a.signum() != b.signum() {
                Some(w[0].0 + (w[1].0 - w[0].0) * a / (a - b))
            } else {
                None
            }
        })
    };
    let width = match (crossing(lo + 0.1 * (hi - lo)), crossing(lo + 0.9 * (hi - lo))) {
        (Some(a), Some(b)) => (b - a).abs(),
        _ => f64::NAN,
    };
    Ok(StrainProfile {
        strain,
        interfaces,
        width,
    })
}
