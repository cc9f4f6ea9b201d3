//! Pyramid adversarial training for small Vision Transformers.
//!
//! The crate is organized around five parts:
//!
//! * [`pyramid`] and [`attack`]: multi-scale perturbation pyramids and the
//!   signed-gradient PGD loop that optimizes them.
//! * [`backbone`]: a Vision Transformer whose dropout masks and
//!   stochastic-depth gates are explicit, seedable realizations.
//! * [`trainer`]: the mixed clean + adversarial objective with matched
//!   regularization, AdamW and a warmup-cosine schedule.
//! * [`evaluator`]: clean accuracy, corruption robustness, band-limited
//!   noise, Fourier spectra of perturbations and white-box attacks.
//! * [`dataio`]: CIFAR-10 binary ingestion, a synthetic shapes set,
//!   augmentation and deterministic batching.
//!
//! Model and attack code is generic over [`Scalar`] (`f32` or `f64`);
//! training runs in `f32`. The aliases below name the common instances.

pub mod arrays;
pub mod attack;
pub mod backbone;
pub mod batch;
pub mod dataio;
mod error;
pub mod evaluator;
pub mod pyramid;
pub mod rng;
mod scalar;
pub mod trainer;

pub use attack::{pgd_pixel_attack, pgd_pyramid_attack, AttackResult, Differentiable, PixelSpec};
pub use backbone::{init_params, DropConfig, DropMode, DropRealization, ModelConfig, ModelParams};
pub use batch::{ImageBatch, ImageShape};
pub use error::{Error, Result};
pub use pyramid::{PerturbationPyramid, PyramidSpec, RandomMode, TargetMode};
pub use scalar::Scalar;

/// Single-precision parameters, used for training.
pub type Params32 = ModelParams<f32>;
/// Double-precision parameters, used for gradient checks.
pub type Params64 = ModelParams<f64>;
pub type Batch32 = ImageBatch<f32>;
pub type Batch64 = ImageBatch<f64>;
pub type Pyramid32 = PerturbationPyramid<f32>;
pub type Pyramid64 = PerturbationPyramid<f64>;
