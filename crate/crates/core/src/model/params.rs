//! Splitting raw encoder outputs into per-variant distribution parameters.
//!
//! Head layouts (per datum, `L` = latent numel):
//!
//! | variant | segments |
//! |---------|----------|
//! | original, naive | `mean[L] | log_var[L]` |
//! | mvn | `M_1..M_N (d² each) | log diag Ω_1..Ω_N (d each) | log diag Ψ_1..Ψ_N (d each)` |
//! | lowrank-mvn | `μ_1..μ_N | ν_1..ν_N | log diag Ω_1..Ω_N | log diag Ψ_1..Ψ_N` (d each) |

use rand::Rng;

use crate::error::{Result, SvaeError};
use crate::latent::{
    sample_diag_gaussian_with_noise, sample_lowrank_mvn, sample_mvn, DiagonalGaussianParams, LatentSample,
    LowRankMvnParams, MvnFeatureMapParams, VariantKind,
};
use crate::rng::standard_normals;
use crate::tensor::Tensor;

use super::config::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum VariantParams {
    /// Original (`shape = [C]`) or naive spatial (`shape = [N, d, d]`).
    Diagonal {
        params: DiagonalGaussianParams,
        shape: Vec<usize>,
    },
    Mvn(Vec<MvnFeatureMapParams>),
    LowRank(Vec<LowRankMvnParams>),
}

impl VariantParams {
    /// Interprets one datum's head output.
    pub fn from_raw(cfg: &ModelConfig, raw: &[f64]) -> Result<Self> {
        let width = cfg.head_width();
        if raw.len() != width {
            return Err(SvaeError::dim(
                "VariantParams::from_raw",
                "head width",
                width,
                raw.len(),
            ));
        }
        let (d, n) = (cfg.d, cfg.n_maps);
        let chunk = |seg: usize, k: usize, len: usize| raw[seg + k * len..seg + (k + 1) * len].to_vec();
        Ok(match cfg.variant {
            VariantKind::Original | VariantKind::NaiveSpatial => {
                let l = cfg.latent_numel();
                VariantParams::Diagonal {
                    params: DiagonalGaussianParams::new(raw[..l].to_vec(), raw[l..].to_vec())?,
                    shape: cfg.latent_shape(),
                }
            }
            VariantKind::MvnSpatial => {
                let (om, ps) = (n * d * d, n * d * d + n * d);
                let maps = (0..n)
                    .map(|k| MvnFeatureMapParams::new(chunk(0, k, d * d), chunk(om, k, d), chunk(ps, k, d)))
                    .collect::<Result<_>>()?;
                VariantParams::Mvn(maps)
            }
            VariantKind::LowRankMvnSpatial => {
                let maps = (0..n)
                    .map(|k| {
                        LowRankMvnParams::new(
                            chunk(0, k, d),
                            chunk(n * d, k, d),
                            chunk(2 * n * d, k, d),
                            chunk(3 * n * d, k, d),
                        )
                    })
                    .collect::<Result<_>>()?;
                VariantParams::LowRank(maps)
            }
        })
    }

    /// Inverse of [`VariantParams::from_raw`].
    pub fn to_raw(&self) -> Vec<f64> {
        match self {
            VariantParams::Diagonal { params, .. } => params.mean.iter().chain(&params.log_var).copied().collect(),
            VariantParams::Mvn(maps) => {
                let mut out: Vec<f64> = maps.iter().flat_map(|m| m.mean_matrix.iter().copied()).collect();
                out.extend(maps.iter().flat_map(|m| m.log_diag_omega.iter().copied()));
                out.extend(maps.iter().flat_map(|m| m.log_diag_psi.iter().copied()));
                out
            }
            VariantParams::LowRank(maps) => {
                let mut out: Vec<f64> = maps.iter().flat_map(|m| m.mu.iter().copied()).collect();
                out.extend(maps.iter().flat_map(|m| m.nu.iter().copied()));
                out.extend(maps.iter().flat_map(|m| m.log_diag_omega.iter().copied()));
                out.extend(maps.iter().flat_map(|m| m.log_diag_psi.iter().copied()));
                out
            }
        }
    }

    /// Flattened mean and log-variance over the whole latent.
    pub fn to_diagonal(&self) -> DiagonalGaussianParams {
        match self {
            VariantParams::Diagonal { params, .. } => params.clone(),
            VariantParams::Mvn(maps) => concat(maps.iter().map(MvnFeatureMapParams::to_diagonal)),
            VariantParams::LowRank(maps) => concat(maps.iter().map(|m| m.to_mvn().to_diagonal())),
        }
    }

    pub fn latent_shape(&self) -> Vec<usize> {
        match self {
            VariantParams::Diagonal { shape, .. } => shape.clone(),
            VariantParams::Mvn(maps) => vec![maps.len(), maps[0].d(), maps[0].d()],
            VariantParams::LowRank(maps) => vec![maps.len(), maps[0].d(), maps[0].d()],
        }
    }

    /// Draws a latent sample, dispatching to the matching sampler. Spatial
    /// draws are shaped `[N, d, d]`; the naive variant samples a flat vector
    /// and reshapes it.
    pub fn reparameterize(&self, rng: &mut impl Rng) -> Result<LatentSample> {
        let shape = self.latent_shape();
        match self {
            VariantParams::Diagonal { params, .. } => {
                let eps = standard_normals(rng, params.dim());
                let s = sample_diag_gaussian_with_noise(params, &eps)?;
                Ok(LatentSample {
                    z: s.z.reshape(&shape)?,
                    epsilon: s.epsilon.reshape(&shape)?,
                })
            }
            VariantParams::Mvn(maps) => stack_maps(maps.iter().map(|m| sample_mvn(m, rng)), &shape),
            VariantParams::LowRank(maps) => stack_maps(maps.iter().map(|m| sample_lowrank_mvn(m, rng)), &shape),
        }
    }

    /// Same as [`VariantParams::reparameterize`] with explicit noise laid out
    /// like the latent.
    pub fn reparameterize_with_noise(&self, eps: &[f64]) -> Result<LatentSample> {
        let shape = self.latent_shape();
        let diag = self.to_diagonal();
        let s = sample_diag_gaussian_with_noise(&diag, eps)?;
        Ok(LatentSample {
            z: s.z.reshape(&shape)?,
            epsilon: s.epsilon.reshape(&shape)?,
        })
    }
}

fn concat(parts: impl Iterator<Item = DiagonalGaussianParams>) -> DiagonalGaussianParams {
    let mut out = DiagonalGaussianParams {
        mean: vec![],
        log_var: vec![],
    };
    for p in parts {
        out.mean.extend(p.mean);
        out.log_var.extend(p.log_var);
    }
    out
}

fn stack_maps(samples: impl Iterator<Item = Result<LatentSample>>, shape: &[usize]) -> Result<LatentSample> {
    let (mut z, mut eps) = (Vec::new(), Vec::new());
    for s in samples {
        let s = s?;
        z.extend_from_slice(s.z.data());
        eps.extend_from_slice(s.epsilon.data());
    }
    Ok(LatentSample {
        z: Tensor::new(shape, z)?,
        epsilon: Tensor::new(shape, eps)?,
    })
}
