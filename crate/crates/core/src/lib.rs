//! Spatial variational auto-encoders.
//!
//! Latent codes are `N` feature maps of size `d×d` sampled from
//! matrix-variate normal distributions with diagonal row/column covariances
//! (optionally with a rank-one mean), next to the classic vector-latent VAE
//! and a reshape-only spatial baseline.
//!
//! Layout:
//! - [`tensor`], [`tape`], [`conv`], [`gradcheck`]: dense f64 tensors with a
//!   reverse-mode tape, convolution and transposed convolution.
//! - [`latent`]: Kronecker-diagonal identity, reparameterized samplers, KL to
//!   the standard normal prior, encoder output accounting.
//! - [`model`]: the four model variants, ELBO, checkpoints.
//! - [`data`]: MNIST IDX / CIFAR-10 / image-folder loaders, batching, PNG grids.
//! - [`train`]: Adam, the training loop, run logs, timing harness.
//! - [`eval`]: Parzen-window log-likelihood estimation.
//! - [`selfcheck`]: the oracle suites behind `svae check`.

pub mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod latent;
pub mod model;
pub mod rng;
pub mod selfcheck;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Result, SvaeError};
pub use tensor::Tensor;
