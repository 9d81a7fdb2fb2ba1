//! Self-supervised representation learning for small nucleus image patches.
//!
//! The crate is organized as a pipeline:
//!
//! - [`tensor`]: dense f64 arrays with reverse-mode autodiff and gradient
//!   checking; everything differentiable is built on it.
//! - [`pixels`]: fixed-size RGB patch buffers in `[0,1]`.
//! - [`encoder`]: a small vision transformer with pluggable pooling, FLOP
//!   accounting, and a binary checkpoint format.
//! - [`augment`]: stochastic view generation (rotation crops, photometric
//!   jitter, stain-aware color transforms) driven by named policies.
//! - [`stain`]: optical-density color math, stain basis estimation,
//!   normalization, and a Gaussian-mixture model over per-image stain stats.
//! - [`objectives`]: contrastive and self-distillation losses plus embedding
//!   spread regularizers.
//! - [`trainer`]: optimization loop with EMA teacher, schedules, masking,
//!   deterministic data-parallel gradient accumulation, and checkpoints.
//! - [`probe`]: frozen-feature evaluation (logistic and ridge probes,
//!   classification/regression metrics, dataset splits).
//! - [`analysis`]: PCA, embedding-shift metrics, neighborhood graphs, spatial
//!   autocorrelation, and k-medoids clustering.
//! - [`dataio`]: dataset manifests, patch extraction, and the embedding file
//!   format.
//! - [`synth`]: procedural nucleus image generator with known generative
//!   parameters, for tests and end-to-end exercises of the pipeline.

pub mod analysis;
pub mod augment;
pub mod dataio;
pub mod encoder;
pub mod objectives;
pub mod pixels;
pub mod probe;
pub mod rng;
pub mod stain;
pub mod synth;
pub mod tensor;
pub mod trainer;

mod util;
