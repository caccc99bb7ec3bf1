//! Finite-strain gradient elasticity on C¹ spline patches.
//!
//! The energy density is St. Venant-Kirchhoff plus `½ μ l² Grad E ⋮ Grad E`.
//! Displacements live in a B-spline or NURBS space of degree two or more,
//! normal-derivative conditions are imposed weakly, and the nonlinear system
//! is solved by Newton's method with Jacobians from forward-mode AD.
//!
//! ```
//! use gradiga::{Bar1d, NewtonConfig};
//!
//! let bar = Bar1d { l: 0.1, ..Bar1d::default() };
//! let (_, report) = bar.solve(&NewtonConfig::default()).unwrap();
//! let (exact, _, _) = bar.exact(1.0).unwrap();
//! assert!((report.u.last().unwrap() - exact).abs() < 1e-4);
//! ```

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod assembly;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod kinematics;
pub mod material;
pub mod mesh;
pub mod solver;
pub mod splines;

pub use analysis::{Bar1d, Multiwell1d};
pub use assembly::{BcKind, BcValue, BoundaryCondition, NonlinearSystem};
pub use error::{Error, Result};
pub use kinematics::StrainMode;
pub use material::MaterialParams;
pub use mesh::PatchGeometry;
pub use solver::{newton_solve, NewtonConfig, SolveReport};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/splines.md")]
    mod splines {}
    #[doc = include_str!("../../../book/src/material.md")]
    mod material {}
    #[doc = include_str!("../../../book/src/system.md")]
    mod system {}
    #[doc = include_str!("../../../book/src/solver.md")]
    mod solver {}
    #[doc = include_str!("../../../book/src/bar.md")]
    mod bar {}
    #[doc = include_str!("../../../book/src/runs.md")]
    mod runs {}
    #[doc = include_str!("../../../book/src/multiwell.md")]
    mod multiwell {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
