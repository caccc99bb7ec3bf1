//! Run configuration, command implementations and file exporters behind the
//! `gradiga` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    convergence_study, energy_split, field_probe, sample_grid, seed_single_interface, strain_profile, u_max, Bar1d,
    EnergySplit, ErrorReport, StrainProfile,
};
use crate::assembly::{BcKind, BcValue, BoundaryCondition, NonlinearSystem, DEFAULT_PENALTY};
use crate::error::{Error, Result};
use crate::kinematics::StrainMode;
use crate::material::{energy_parts, MaterialModel, MaterialParams};
use crate::mesh::{BoundaryEntity, Edge, Face, PatchGeometry};
use crate::solver::{newton_solve, NewtonConfig, SolveReport};

#[derive(Debug, Parser)]
#[command(
    name = "gradiga",
    version,
    about = "Finite-strain gradient elasticity on C1 spline patches"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the boundary value problem described by a JSON run configuration.
    Run(RunArgs),
    /// Solve the 1D bar and compare it with the analytic solution.
    #[command(name = "validate-1d")]
    Validate1d(Validate1dArgs),
    /// Mesh convergence study of the 1D bar in the H1 and H2 seminorms.
    Converge(ConvergeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Path of the run configuration.
    pub config: PathBuf,
    /// Directory for relative output paths (default: current directory).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Replaces `geometry.elements`, e.g. `--elements 2,2,20`.
    #[arg(long, value_delimiter = ',')]
    pub elements: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Args)]
pub struct Validate1dArgs {
    #[arg(long, default_value_t = 1.0)]
    pub l: f64,
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    /// End traction.
    #[arg(long, default_value_t = 1.0)]
    pub t: f64,
    /// Bar length.
    #[arg(long = "length", short = 'L', default_value_t = 1.0)]
    pub length: f64,
    /// Number of knot spans.
    #[arg(long = "elements", short = 'N', default_value_t = 100)]
    pub elements: usize,
    #[arg(long, default_value_t = 2)]
    pub degree: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Small)]
    pub mode: ModeArg,
    /// Sample subdivisions per knot span.
    #[arg(long, default_value_t = 10)]
    pub density: usize,
    /// CSV destination; standard output when omitted.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Small,
    Finite,
}

impl From<ModeArg> for StrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Small => StrainMode::Small,
            ModeArg::Finite => StrainMode::Finite,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ConvergeArgs {
    #[arg(long, value_delimiter = ',', num_args = 0.., default_values_t = [2, 3])]
    pub degrees: Vec<usize>,
    /// Knot span counts, strictly increasing.
    #[arg(long, value_delimiter = ',', num_args = 0.., default_values_t = [10, 20, 40, 80, 160])]
    pub meshes: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub l: f64,
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    #[arg(long, default_value_t = 1.0)]
    pub t: f64,
    #[arg(long = "length", short = 'L', default_value_t = 1.0)]
    pub length: f64,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

/// Process exit status for an error: 2 configuration, 3 solve failure, 4 I/O.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidInput(_) => 2,
        Error::NonConvergence { .. } | Error::ElementInversion { .. } | Error::SingularMatrix { .. } => 3,
        Error::Io { .. } => 4,
        Error::Domain { .. } | Error::SeedMismatch { .. } => 1,
    }
}

/// Runs a parsed command and returns the text for standard output.
pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Validate1d(a) => cmd_validate_1d(a),
        Command::Converge(a) => cmd_converge(a),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    /// Box edge lengths, one per parametric direction.
    pub extents: Vec<f64>,
    pub elements: Vec<usize>,
    #[serde(default = "default_degree")]
    pub degree: usize,
}

fn default_degree() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BcConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge: Option<[String; 2]>,
    pub component: usize,
    pub kind: BcKind,
    pub value: BcValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub vtk: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    /// Sample subdivisions per knot span of the VTK grid.
    pub density: usize,
    /// Sample subdivisions per knot span for `|u|_max`.
    pub umax_density: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            vtk: None,
            csv: None,
            density: 4,
            umax_density: 10,
        }
    }
}

/// How the `Du` penalty constants of a run relate to the material.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyScaling {
    /// The configured constant is used as is.
    #[default]
    None,
    /// The configured constant is multiplied by `max(μ l², 1)`.
    GradientModulus,
}

impl PenaltyScaling {
    pub fn factor(self, material: &MaterialParams) -> f64 {
        match self {
            PenaltyScaling::None => 1.0,
            PenaltyScaling::GradientModulus => (material.mu * material.l * material.l).max(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub geometry: GeometryConfig,
    pub material: MaterialParams,
    #[serde(default)]
    pub mode: StrainMode,
    #[serde(default)]
    pub bcs: Vec<BcConfig>,
    #[serde(default)]
    pub solver: NewtonConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
    #[serde(default)]
    pub penalty_scaling: PenaltyScaling,
    /// Length scales to sweep; each replaces `material.l`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path.is_empty() || path == "." || path == "?" {
                "config".to_string()
            } else {
                path
            };
            Error::config(key, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        Self::from_json(&text)
    }

    pub fn dim(&self) -> usize {
        self.geometry.extents.len()
    }

    /// Checks every field that can be checked without building the mesh.
    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        let dim = g.extents.len();
        if !(1..=3).contains(&dim) {
            return Err(Error::config("geometry.extents", "needs one to three entries"));
        }
        if g.extents.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::config("geometry.extents", "must be positive and finite"));
        }
        if g.elements.len() != dim {
            return Err(Error::config(
                "geometry.elements",
                format!("needs {dim} entries to match extents"),
            ));
        }
        if g.elements.contains(&0) {
            return Err(Error::config("geometry.elements", "must be at least 1"));
        }
        if !(2..=8).contains(&g.degree) {
            return Err(Error::config("geometry.degree", "must be between 2 and 8"));
        }
        self.material.validate()?;
        if self.material.model == MaterialModel::Multiwell1d && dim != 1 {
            return Err(Error::config(
                "material.model",
                "the multiwell model is one-dimensional",
            ));
        }
        self.solver.validate()?;
        if self.outputs.density == 0 {
            return Err(Error::config("outputs.density", "must be at least 1"));
        }
        if self.outputs.umax_density == 0 {
            return Err(Error::config("outputs.umax_density", "must be at least 1"));
        }
        if let Some(ls) = &self.sweep {
            if ls.is_empty() {
                return Err(Error::config("sweep", "must list at least one length scale"));
            }
            if ls.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                return Err(Error::config("sweep", "length scales must be finite and non-negative"));
            }
        }
        self.boundary_conditions()?;
        Ok(())
    }

    pub fn boundary_conditions(&self) -> Result<Vec<BoundaryCondition>> {
        let dim = self.dim();
        let face = |key: String, name: &str| -> Result<Face> {
            let f = Face::parse(name).ok_or_else(|| Error::config(key.clone(), format!("unknown face `{name}`")))?;
            if f.dir >= dim {
                return Err(Error::config(key, format!("face `{name}` does not exist in {dim}D")));
            }
            Ok(f)
        };
        self.bcs
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let target = match (&b.face, &b.edge) {
                    (Some(f), None) => BoundaryEntity::Face(face(format!("bcs[{i}].face"), f)?),
                    (None, Some([a, c])) => {
                        let key = format!("bcs[{i}].edge");
                        let (fa, fc) = (face(key.clone(), a)?, face(key.clone(), c)?);
                        if fa.dir == fc.dir {
                            return Err(Error::config(key, format!("faces {fa} and {fc} do not share an edge")));
                        }
                        BoundaryEntity::Edge(Edge::new(fa, fc))
                    }
                    _ => {
                        return Err(Error::config(
                            format!("bcs[{i}]"),
                            "needs exactly one of `face` and `edge`",
                        ))
                    }
                };
                let mut bc = BoundaryCondition::new(target, b.component, b.kind, b.value);
                bc.penalty = b.penalty.unwrap_or(DEFAULT_PENALTY);
                Ok(bc)
            })
            .collect()
    }

    /// Assembler for the configured problem with length scale `l`.
    pub fn system(&self, l: f64) -> Result<NonlinearSystem> {
        let g = &self.geometry;
        let geometry = PatchGeometry::box_patch(&g.extents, &g.elements, g.degree)?;
        let material = MaterialParams { l, ..self.material };
        let scale = self.penalty_scaling.factor(&material);
        let mut bcs = self.boundary_conditions()?;
        for bc in &mut bcs {
            bc.penalty *= scale;
        }
        let mut sys = NonlinearSystem::new(geometry, material, self.mode, bcs)?;
        if material.model == MaterialModel::Multiwell1d {
            seed_single_interface(&mut sys);
        }
        Ok(sys)
    }

    /// Length scales to solve for.
    pub fn cases(&self) -> Vec<f64> {
        self.sweep.clone().unwrap_or_else(|| vec![self.material.l])
    }
}

/// Converged solution of one configured case with its derived quantities.
#[derive(Debug, Clone)]
pub struct CaseResult {
    pub l: f64,
    pub system: NonlinearSystem,
    pub report: SolveReport,
    pub u_max: f64,
    pub energy: EnergySplit,
    /// Strain profile of multiwell runs.
    pub profile: Option<StrainProfile>,
}

pub fn solve_case(cfg: &RunConfig, l: f64) -> Result<CaseResult> {
    let mut system = cfg.system(l)?;
    let report = newton_solve(&mut system, &cfg.solver)?;
    let u_max = u_max(&system, &report.u, cfg.outputs.umax_density)?;
    let energy = energy_split(&system, &report.u)?;
    let profile = if cfg.material.model == MaterialModel::Multiwell1d {
        Some(strain_profile(&system, &report.u)?)
    } else {
        None
    };
    Ok(CaseResult {
        l,
        system,
        report,
        u_max,
        energy,
        profile,
    })
}

/// `gradiga run`: solve every case, then write the requested files. Nothing
/// is written unless all cases converge.
pub fn cmd_run(args: &RunArgs) -> Result<String> {
    let config = args.config.as_path();
    let mut cfg = RunConfig::from_path(config)?;
    if let Some(e) = &args.elements {
        cfg.geometry.elements = e.clone();
        cfg.validate()?;
    }
    let resolve = |p: &Path| match args.out_dir.as_deref() {
        Some(d) if p.is_relative() => d.join(p),
        _ => p.to_path_buf(),
    };
    let cases = cfg.cases();
    for &l in &cases {
        MaterialParams { l, ..cfg.material }.validate()?;
    }
    let results = cases.iter().map(|&l| solve_case(&cfg, l)).collect::<Result<Vec<_>>>()?;
    let mut out = String::new();
    let name = cfg.name.clone().unwrap_or_else(|| config.display().to_string());
    for r in &results {
        let _ = writeln!(
            out,
            "{name}: l = {}, |u|_max = {:.6e}, energy = {:.6e} + {:.6e} = {:.6e}, Newton iterations = {}",
            r.l,
            r.u_max,
            r.energy.non_gradient,
            r.energy.gradient,
            r.energy.total,
            r.report.total_iterations()
        );
        if let Some(p) = &r.profile {
            let _ = writeln!(
                out,
                "{name}: interfaces = {}, interface width = {:.6e}",
                p.interfaces, p.width
            );
        }
    }
    if let Some(csv) = &cfg.outputs.csv {
        let path = resolve(csv);
        let text = if cfg.sweep.is_some() {
            sweep_csv(&results)
        } else {
            summary_csv(&results[0])
        };
        write_file(&path, &text)?;
        let _ = writeln!(out, "wrote {}", path.display());
    }
    if let Some(vtk) = &cfg.outputs.vtk {
        let base = resolve(vtk);
        for r in &results {
            let path = if cfg.sweep.is_some() {
                sweep_path(&base, r.l)
            } else {
                base.clone()
            };
            write_vtk(&path, &r.system, &r.report.u, cfg.outputs.density, &name)?;
            let _ = writeln!(out, "wrote {}", path.display());
        }
    }
    Ok(out)
}

fn sweep_path(base: &Path, l: f64) -> PathBuf {
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = base
        .extension()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "vtk".into());
    base.with_file_name(format!("{stem}_l{l}.{ext}"))
}

/// One row per quantity: `quantity,step,iteration,value`.
pub fn summary_csv(r: &CaseResult) -> String {
    let mut s = String::from("quantity,step,iteration,value\n");
    let _ = writeln!(s, "l,,,{}", r.l);
    let _ = writeln!(s, "u_max,,,{}", r.u_max);
    let _ = writeln!(s, "energy_non_gradient,,,{}", r.energy.non_gradient);
    let _ = writeln!(s, "energy_gradient,,,{}", r.energy.gradient);
    let _ = writeln!(s, "energy_total,,,{}", r.energy.total);
    let _ = writeln!(s, "converged,,,{}", u8::from(r.report.converged));
    if let Some(p) = &r.profile {
        let _ = writeln!(s, "interfaces,,,{}", p.interfaces);
        let _ = writeln!(s, "interface_width,,,{}", p.width);
    }
    for (k, step) in r.report.steps.iter().enumerate() {
        let _ = writeln!(s, "load_factor,{},,{}", k + 1, step.load_factor);
        for (it, res) in step.residuals.iter().enumerate() {
            let _ = writeln!(s, "residual,{},{it},{res}", k + 1);
        }
    }
    s
}

/// Energy split and `|u|_max` against the length scale.
pub fn sweep_csv(results: &[CaseResult]) -> String {
    let mut s = String::from("l,E_strain,E_gradient,u_max\n");
    for r in results {
        let _ = writeln!(s, "{},{},{},{}", r.l, r.energy.non_gradient, r.energy.gradient, r.u_max);
    }
    s
}

/// Legacy ASCII VTK structured grid of the deformed sample grid with
/// displacement, `|u|`, energy densities and `det F` as point data.
pub fn vtk_string(system: &NonlinearSystem, u: &[f64], density: usize, title: &str) -> Result<String> {
    let (dims, pts) = sample_grid(system.geometry(), density);
    let samples = field_probe(system, u, &pts)?;
    let n = samples.len();
    let mut s = String::with_capacity(n * 120);
    s.push_str("# vtk DataFile Version 3.0\n");
    let title: String = title.chars().filter(|c| *c != '\n').take(255).collect();
    let _ = writeln!(s, "{title}");
    s.push_str("ASCII\nDATASET STRUCTURED_GRID\n");
    let _ = writeln!(s, "DIMENSIONS {} {} {}", dims[0], dims[1], dims[2]);
    let _ = writeln!(s, "POINTS {n} double");
    for p in &samples {
        let _ = writeln!(s, "{:e} {:e} {:e}", p.x[0] + p.u[0], p.x[1] + p.u[1], p.x[2] + p.u[2]);
    }
    let _ = writeln!(s, "POINT_DATA {n}");
    s.push_str("VECTORS displacement double\n");
    for p in &samples {
        let _ = writeln!(s, "{:e} {:e} {:e}", p.u[0], p.u[1], p.u[2]);
    }
    let energies: Vec<(f64, f64)> = samples
        .iter()
        .map(|p| energy_parts(&p.kinematics, system.material()))
        .collect();
    type Column<'a> = (&'a str, Box<dyn Fn(usize) -> f64 + 'a>);
    let scalars: [Column; 4] = [
        ("u_magnitude", Box::new(|k| samples[k].magnitude)),
        ("energy_density_non_gradient", Box::new(|k| energies[k].0)),
        ("energy_density_gradient", Box::new(|k| energies[k].1)),
        ("det_F", Box::new(|k| samples[k].kinematics.j)),
    ];
    for (name, f) in scalars.iter() {
        let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
        for k in 0..n {
            let _ = writeln!(s, "{:e}", f(k));
        }
    }
    Ok(s)
}

pub fn write_vtk(path: &Path, system: &NonlinearSystem, u: &[f64], density: usize, title: &str) -> Result<()> {
    write_file(path, &vtk_string(system, u, density, title)?)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// `gradiga validate-1d`: samples `(x, u_h, u_exact, error)` along the bar.
pub fn cmd_validate_1d(a: &Validate1dArgs) -> Result<String> {
    check_positive("l", a.l)?;
    check_positive("mu", a.mu)?;
    check_positive("length", a.length)?;
    if !a.t.is_finite() {
        return Err(Error::config("t", "must be finite"));
    }
    if a.density == 0 {
        return Err(Error::config("density", "must be at least 1"));
    }
    let bar = Bar1d {
        mu: a.mu,
        l: a.l,
        t: a.t,
        length: a.length,
        elements: a.elements,
        degree: a.degree,
        mode: a.mode.into(),
    };
    let cfg = NewtonConfig {
        load_steps: if bar.mode == StrainMode::Small { 1 } else { 10 },
        ..NewtonConfig::default()
    };
    let (sys, rep) = bar.solve(&cfg)?;
    let (_, pts) = sample_grid(sys.geometry(), a.density);
    let samples = field_probe(&sys, &rep.u, &pts)?;
    let mut csv = String::from("x,u_h,u_exact,error\n");
    let (mut max_err, mut max_u, mut end) = (0.0f64, 0.0f64, 0.0);
    for p in &samples {
        let x = p.x[0].clamp(0.0, a.length);
        let (ue, _, _) = bar.exact(x)?;
        let err = p.u[0] - ue;
        max_err = max_err.max(err.abs());
        max_u = max_u.max(ue.abs());
        end = p.u[0];
        let _ = writeln!(csv, "{x},{},{ue},{err}", p.u[0]);
    }
    let (ue_end, _, _) = bar.exact(a.length)?;
    let mode = match bar.mode {
        StrainMode::Small => "small",
        StrainMode::Finite => "finite",
    };
    let report = format!(
        "mode {mode}: u_h(L) = {end:.9e}, u_exact(L) = {ue_end:.9e}, max |u_h - u_exact| = {max_err:.3e} \
         ({:.3e} of max |u|), Newton iterations = {}\n",
        max_err / max_u,
        rep.total_iterations()
    );
    emit(a.output.as_deref(), csv, report)
}

/// `gradiga converge`: `|e|_H1` and `|e|_H2` against `h` per degree.
pub fn cmd_converge(a: &ConvergeArgs) -> Result<String> {
    check_positive("l", a.l)?;
    check_positive("mu", a.mu)?;
    check_positive("length", a.length)?;
    if a.degrees.is_empty() {
        return Err(Error::config("degrees", "degree list is empty"));
    }
    let template = Bar1d {
        mu: a.mu,
        l: a.l,
        t: a.t,
        length: a.length,
        ..Bar1d::default()
    };
    let reports = convergence_study(&template, &a.meshes, &a.degrees)?;
    let csv = convergence_csv(&reports);
    let mut report = String::new();
    for r in &reports {
        let fmt = |s: Option<f64>| s.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            report,
            "degree {}: least-squares slopes H1 {}, H2 {}",
            r.degree,
            fmt(r.slope_h1),
            fmt(r.slope_h2)
        );
    }
    emit(a.output.as_deref(), csv, report)
}

/// Columns `degree,elements,h,H1,H2,slope_H1,slope_H2`; slopes are taken
/// against the previous row and left empty on the first row of a degree.
pub fn convergence_csv(reports: &[ErrorReport]) -> String {
    let mut s = String::from("degree,elements,h,H1,H2,slope_H1,slope_H2\n");
    for r in reports {
        for (k, row) in r.rows.iter().enumerate() {
            let _ = write!(s, "{},{},{},{},{}", r.degree, row.elements, row.h, row.h1, row.h2);
            match k.checked_sub(1).map(|j| r.pair_slopes[j]) {
                Some((a, b)) => {
                    let _ = writeln!(s, ",{a},{b}");
                }
                None => s.push_str(",,\n"),
            }
        }
    }
    s
}

fn emit(path: Option<&Path>, csv: String, report: String) -> Result<String> {
    match path {
        Some(p) => {
            write_file(p, &csv)?;
            Ok(format!("{report}wrote {}\n", p.display()))
        }
        None => Ok(format!("{csv}{report}")),
    }
}

fn check_positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(key, "must be positive and finite"))
    }
}
