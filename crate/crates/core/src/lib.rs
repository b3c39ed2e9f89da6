//! Numerical homogenization of doubly-nonlinear parabolic problems
//!
//! `D_t w - div z = div h`, `w in d phi(u, x/eps)`, `z in gamma(grad u, x/eps)`,
//!
//! with both constitutive inclusions certified through representative
//! functions (Fenchel and Fitzpatrick) whose gap vanishes exactly on the
//! graph of the operator.
//!
//! * [`convexcore`]: potentials, conjugates, subdifferentials, smoothing.
//! * [`fitz`]: monotone graphs, representative functions, null-minimization residuals.
//! * [`cellsolve`]: periodic cell problems and effective laws.
//! * [`evolver`]: implicit Euler for the oscillating and the homogenized problem.
//! * [`twoscale`]: two-scale pairings, unfolding and corrector errors.
//!
//! Everything numerical is generic over [`Real`] (`f32`, `f64`); the `*64`
//! aliases below fix `f64`.

pub mod cellsolve;
pub mod convexcore;
pub mod error;
pub mod evolver;
pub mod fitz;
pub mod scalar;
pub mod twoscale;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Preset64 = convexcore::Preset<f64>;
pub type Potential64 = convexcore::Potential<f64>;
pub type ConjugatePair64 = convexcore::ConjugatePair<f64>;
pub type ScalarGraph64 = fitz::MonotoneGraph<f64, 1>;
pub type PlanarGraph64 = fitz::MonotoneGraph<f64, 2>;
pub type RepresentativeFn64 = fitz::RepresentativeFn<f64>;
pub type CellGrid64 = cellsolve::CellGrid<f64>;
pub type EffectiveLaw64 = cellsolve::EffectiveLaw<f64>;

pub type ProblemData64 = evolver::ProblemData<f64>;
pub type Trajectory64 = evolver::Trajectory<f64>;
pub type TwoScaleField64 = twoscale::TwoScaleField<f64>;
