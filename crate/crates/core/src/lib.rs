//! Decoupled expectation–maximization diffusion sampling for inverse problems.
//!
//! The E-step pulls a noisy state onto the prior with Tweedie denoising or a
//! few probability-flow ODE steps; the M-step runs likelihood-only Langevin
//! refinement against the measurement. Priors are closed-form (isotropic
//! Gaussian, Gaussian mixtures), so posteriors, scores and flows can all be
//! checked against exact answers.
//!
//! Everything is generic over [`Real`] (`f32` or `f64`); the aliases below fix
//! the scalar for the common case.

pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod odesolve;
pub mod operators;
pub mod prior;
pub mod refine;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod schedule;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use odesolve::{OdeMethod, OdeState, SIGMA_FLOOR};
pub use operators::{ForwardOperator, GradConvention, ImageShape, Measurement, SharedOperator};
pub use prior::{GmmPrior, IsotropicGaussianPrior, ScoreModel};
pub use refine::{RefineConfig, WarmStart};
pub use sampler::{SamplerConfig, SamplerOutput, Trace};
pub use scalar::Real;
pub use schedule::{NoiseSchedule, StepSizeSchedule};

pub type GmmPriorF64 = GmmPrior<f64>;
pub type GmmPriorF32 = GmmPrior<f32>;
pub type IsotropicGaussianPriorF64 = IsotropicGaussianPrior<f64>;
pub type IsotropicGaussianPriorF32 = IsotropicGaussianPrior<f32>;
pub type MeasurementF64 = Measurement<f64>;
pub type SamplerConfigF64 = SamplerConfig<f64>;
pub type SamplerConfigF32 = SamplerConfig<f32>;
pub type MatF64 = Mat<f64>;
