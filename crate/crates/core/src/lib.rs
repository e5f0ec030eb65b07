//! Generalized Gaussian process functional regression.
//!
//! Each batch (curve) `m` is observed as `z_m(t)` from an exponential-family
//! or ordinal model whose linear predictor is
//!
//! ```text
//! η_m(t) = μ_m(t) + τ_m(t),   μ_m(t) = Φ(t)ᵀ B u_m,   τ_m ~ GP(0, k(x_m(t), x_m(t'); θ))
//! ```
//!
//! with a cubic B-spline mean and a latent Gaussian process over functional
//! covariates. `B`, `θ` (and ordinal thresholds) are fitted by maximizing an
//! approximate marginal likelihood; predictions integrate the latent
//! posterior numerically.
//!
//! ```no_run
//! use ggpfr::{fit, simulate, ModelSpec, BatchPredictor, TestPoint};
//!
//! let sim = simulate::sim_binomial_se(60, 40, 1).unwrap();
//! let model = fit::fit(&sim.data, &ModelSpec::default()).unwrap();
//! let batch = &sim.data.batches[0];
//! let pred = BatchPredictor::new(&model, std::slice::from_ref(batch)).unwrap()
//!     .predict(TestPoint { t: 0.5, x: &[0.5], u: &batch.scalar_covariates, w: None })
//!     .unwrap();
//! println!("{} ± {}", pred.response_mean, pred.response_var.sqrt());
//! ```

pub mod basis;
pub mod data;
pub mod error;
pub mod family;
pub mod fit;
pub mod kernels;
pub mod latent;
pub mod linalg;
pub mod mixed;
pub mod model_io;
pub mod optim;
pub mod predict;
pub mod quadrature;
pub mod simulate;
pub mod special;

pub use basis::{KnotMethod, SplineBasis};
pub use data::{CsvSchema, Dataset, FunctionalBatch};
pub use error::{Error, ErrorClass, Result};
pub use family::ObservationFamily;
pub use fit::{BasisDim, FittedModel, ModelSpec, ObjectiveKind};
pub use kernels::{KernelKind, KernelParams};
pub use latent::LatentPosterior;
pub use mixed::{ClusteredDataset, GammaMode};
pub use predict::{BatchPredictor, PredictiveDistribution, TestPoint};
