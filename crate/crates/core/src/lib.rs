//! Sketched multiple regression and sketched kernel regression trained by
//! one-pass SGD.
//!
//! Every term of the generalization-error decomposition
//! (irreducible + approximation + excess) is available in closed form, next
//! to Monte Carlo machinery that measures the same quantities and fits their
//! power-law exponents.
//!
//! The crate is organised bottom-up:
//!
//! * [`spectrum`] builds the data covariance `G` (power-law eigenvalues,
//!   optional random rotation).
//! * [`sampling`] draws the sketch `R`, the true parameter `W*` and streams
//!   `(Rx, y)` pairs straight from their joint Gaussian law.
//! * [`regression`] evaluates population risks, the optimal sketched
//!   parameter and the error decomposition exactly.
//! * [`sgd`] trains the sketched model with one-pass SGD.
//! * [`theory`] holds the bias / variance / effective-dimension formulas and
//!   Gaussian moment identities.
//! * [`kernel`] instantiates the pipeline with a feature map.
//! * [`experiments`] runs seeded Monte Carlo sweeps, fits log-log slopes and
//!   writes `sweep.csv` / `summary.json`.
//!
//! Trials run on a rayon pool when the `parallel` feature is enabled (the
//! default) and sequentially otherwise; results never depend on the worker
//! count.

pub mod error;
pub mod experiments;
pub mod kernel;
pub mod linalg;
pub mod oracle;
pub mod regression;
pub mod rng;
pub mod sampling;
pub mod sgd;
pub mod spectrum;
pub mod theory;
pub mod trials;
pub mod verify;

pub use error::{Error, Result};
pub use regression::{DecompositionReport, SketchSystem, SketchedModel};
pub use sampling::{ParameterMatrix, SketchMatrix, SketchedDataStream};
pub use sgd::{ScheduleMode, StepSchedule};
pub use spectrum::Covariance;
pub use theory::{SketchedSpectrum, TheoryReport};
