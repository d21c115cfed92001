//! Markov wavelet conditional score models at desk scale.
//!
//! An image is split by an orthonormal Haar pyramid into a coarse low-pass
//! band and per-scale detail bands. A global bias-free CNN denoises the
//! low-pass band, and local conditional CNNs denoise each detail band given
//! the coarser low-pass image. Denoiser residuals estimate scores, which
//! drive a stochastic ascent sampler for synthesis and super-resolution.
//! Closed-form Gaussian models supply exact denoisers, scores and samples
//! for validating every piece without training.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod eval;
pub mod error;
pub mod imageio;
pub mod model;
pub mod ops;
pub mod optim;
pub mod oracle;
pub mod sampler;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::ExperimentConfig;
pub use data::{Dataset, DatasetSpec};
pub use denoiser::{ConditionalDenoiser, Denoiser};
pub use error::{Error, Result};
pub use model::{LayerSpec, Model, NetworkSpec};
pub use oracle::{Basis, GaussianModel, Spectrum};
pub use sampler::{SampleTrace, SamplerConfig};
pub use tensor::{Scalar, Tensor};
pub use train::{TrainConfig, TrainMode};
pub use wavelet::WaveletPyramid;
