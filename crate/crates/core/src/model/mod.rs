//! The four VAE variants: shared convolutional encoder trunk, a
//! variant-specific dense head, reparameterized sampling, a transposed-conv
//! decoder, and the ELBO objective with a Gaussian likelihood.

mod checkpoint;
mod config;
mod network;
mod params;

pub use crate::latent::VariantKind;
pub use checkpoint::{Checkpoint, MAGIC};
pub use config::{ConvSpec, ModelConfig, Projection};
pub use network::{Bound, ElboBreakdown, ElboVars, LatentStats, Model, NamedParam};
pub use params::VariantParams;
