//! Latent-distribution mathematics.
//!
//! All posteriors in scope have diagonal covariance, so every variant reduces
//! to independent univariate Gaussians per latent coordinate:
//!
//! - diagonal Gaussian: `z_i = mean_i + exp(log_var_i / 2) * eps_i`
//! - matrix-variate normal with diagonal `Ω`, `Ψ`: the covariance
//!   `Ω ⊗ Ψ` is diagonal with `diag(Ω ⊗ Ψ) = vec(diag(Ω) diag(Ψ)ᵀ)`, so
//!   `z[i, j] = M[i, j] + sqrt(Ω_i Ψ_j) * eps[i, j]`
//! - low-rank mean: as above with `M = μ νᵀ`.
//!
//! Positive scales are parameterized by their logarithms. Maps are `d×d`
//! row-major, so flat index `i * d + j` is location `(i, j)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Result, SvaeError};
use crate::rng::standard_normals;
use crate::tensor::Tensor;

/// The four model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariantKind {
    /// Vector latent of dimension `C`.
    Original,
    /// A `d²N` vector latent reshaped into `N` maps of `d×d`.
    NaiveSpatial,
    /// `N` maps sampled from matrix-variate normals.
    MvnSpatial,
    /// Matrix-variate normals with rank-one means `μ νᵀ`.
    LowRankMvnSpatial,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::Original,
        VariantKind::NaiveSpatial,
        VariantKind::MvnSpatial,
        VariantKind::LowRankMvnSpatial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Original => "original",
            VariantKind::NaiveSpatial => "naive",
            VariantKind::MvnSpatial => "mvn",
            VariantKind::LowRankMvnSpatial => "lowrank-mvn",
        }
    }

    pub fn is_spatial(self) -> bool {
        self != VariantKind::Original
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = SvaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(VariantKind::Original),
            "naive" => Ok(VariantKind::NaiveSpatial),
            "mvn" => Ok(VariantKind::MvnSpatial),
            "lowrank-mvn" | "lowrank" => Ok(VariantKind::LowRankMvnSpatial),
            other => Err(SvaeError::contract(format!(
                "unknown variant {other:?} (expected original, naive, mvn, lowrank-mvn)"
            ))),
        }
    }
}

/// Number of encoder outputs each variant needs.
///
/// `Original -> 2C`, `NaiveSpatial -> 2d²N`, `MvnSpatial -> (d² + 2d)N`,
/// `LowRankMvnSpatial -> 4dN`.
pub fn param_count(variant: VariantKind, d: usize, n: usize, c: usize) -> Result<usize> {
    match variant {
        VariantKind::Original => {
            if c == 0 {
                return Err(SvaeError::contract("latent dimension C must be >= 1"));
            }
            Ok(2 * c)
        }
        _ if d == 0 || n == 0 => Err(SvaeError::contract(format!(
            "spatial variants need d >= 1 and N >= 1 (got d={d}, N={n})"
        ))),
        VariantKind::NaiveSpatial => Ok(2 * d * d * n),
        VariantKind::MvnSpatial => Ok((d * d + 2 * d) * n),
        VariantKind::LowRankMvnSpatial => Ok(4 * d * n),
    }
}

fn same_len(op: &'static str, what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(SvaeError::dim(op, what, a, b));
    }
    Ok(())
}

/// Diagonal of `D1 ⊗ D2` for diagonal `D1`, `D2` given by their diagonals:
/// the row-major flatten of `d1 d2ᵀ`.
pub fn kron_diag(d1: &[f64], d2: &[f64]) -> Result<Vec<f64>> {
    same_len("kron_diag", "factor length", d1.len(), d2.len())?;
    Ok(d1.iter().flat_map(|&a| d2.iter().map(move |&b| a * b)).collect())
}

/// Rank-one mean matrix `μ νᵀ`, row-major.
pub fn mean_matrix(mu: &[f64], nu: &[f64]) -> Result<Vec<f64>> {
    same_len("mean_matrix", "vector length", mu.len(), nu.len())?;
    Ok(mu.iter().flat_map(|&a| nu.iter().map(move |&b| a * b)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussianParams {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvnFeatureMapParams {
    /// `d×d` mean, row-major.
    pub mean_matrix: Vec<f64>,
    pub log_diag_omega: Vec<f64>,
    pub log_diag_psi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankMvnParams {
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub log_diag_omega: Vec<f64>,
    pub log_diag_psi: Vec<f64>,
}

/// A latent draw together with the standard-normal noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Tensor,
    pub epsilon: Tensor,
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(SvaeError::numeric(format!(
            "{op}: non-finite value {} at index {i}",
            values[i]
        ))),
        None => Ok(()),
    }
}

impl DiagonalGaussianParams {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        let p = DiagonalGaussianParams { mean, log_var };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        same_len(
            "DiagonalGaussianParams",
            "log_var length",
            self.mean.len(),
            self.log_var.len(),
        )?;
        check_finite("DiagonalGaussianParams.mean", &self.mean)?;
        check_finite("DiagonalGaussianParams.log_var", &self.log_var)
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|l| l.exp()).collect()
    }
}

impl MvnFeatureMapParams {
    pub fn new(mean_matrix: Vec<f64>, log_diag_omega: Vec<f64>, log_diag_psi: Vec<f64>) -> Result<Self> {
        let p = MvnFeatureMapParams {
            mean_matrix,
            log_diag_omega,
            log_diag_psi,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn d(&self) -> usize {
        self.log_diag_omega.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        same_len("MvnFeatureMapParams", "log_diag_psi length", d, self.log_diag_psi.len())?;
        same_len(
            "MvnFeatureMapParams",
            "mean_matrix numel",
            d * d,
            self.mean_matrix.len(),
        )?;
        check_finite("MvnFeatureMapParams.mean_matrix", &self.mean_matrix)?;
        check_finite("MvnFeatureMapParams.log_diag_omega", &self.log_diag_omega)?;
        check_finite("MvnFeatureMapParams.log_diag_psi", &self.log_diag_psi)
    }

    /// Per-location variances `diag(Ω ⊗ Ψ)`.
    pub fn variance(&self) -> Vec<f64> {
        let omega: Vec<f64> = self.log_diag_omega.iter().map(|l| l.exp()).collect();
        let psi: Vec<f64> = self.log_diag_psi.iter().map(|l| l.exp()).collect();
        kron_diag(&omega, &psi).expect("validated lengths")
    }

    /// The equivalent independent-Gaussian parameters over the flattened map.
    pub fn to_diagonal(&self) -> DiagonalGaussianParams {
        let log_var = self
            .log_diag_omega
            .iter()
            .flat_map(|&a| self.log_diag_psi.iter().map(move |&b| a + b))
            .collect();
        DiagonalGaussianParams {
            mean: self.mean_matrix.clone(),
            log_var,
        }
    }
}

impl LowRankMvnParams {
    pub fn new(mu: Vec<f64>, nu: Vec<f64>, log_diag_omega: Vec<f64>, log_diag_psi: Vec<f64>) -> Result<Self> {
        let p = LowRankMvnParams {
            mu,
            nu,
            log_diag_omega,
            log_diag_psi,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn d(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        same_len("LowRankMvnParams", "nu length", d, self.nu.len())?;
        same_len(
            "LowRankMvnParams",
            "log_diag_omega length",
            d,
            self.log_diag_omega.len(),
        )?;
        same_len("LowRankMvnParams", "log_diag_psi length", d, self.log_diag_psi.len())?;
        for (name, v) in [
            ("LowRankMvnParams.mu", &self.mu),
            ("LowRankMvnParams.nu", &self.nu),
            ("LowRankMvnParams.log_diag_omega", &self.log_diag_omega),
            ("LowRankMvnParams.log_diag_psi", &self.log_diag_psi),
        ] {
            check_finite(name, v)?;
        }
        Ok(())
    }

    /// Full-mean form with `M = μ νᵀ`.
    pub fn to_mvn(&self) -> MvnFeatureMapParams {
        MvnFeatureMapParams {
            mean_matrix: mean_matrix(&self.mu, &self.nu).expect("validated lengths"),
            log_diag_omega: self.log_diag_omega.clone(),
            log_diag_psi: self.log_diag_psi.clone(),
        }
    }
}

fn reparameterize(op: &'static str, mean: &[f64], std: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    same_len(op, "noise length", mean.len(), eps.len())?;
    let z: Vec<f64> = mean.iter().zip(std).zip(eps).map(|((m, s), e)| m + s * e).collect();
    check_finite(op, &z)?;
    Ok(z)
}

/// `z = mean + exp(log_var / 2) * eps` with caller-supplied noise.
pub fn sample_diag_gaussian_with_noise(p: &DiagonalGaussianParams, eps: &[f64]) -> Result<LatentSample> {
    p.validate()?;
    let std: Vec<f64> = p.log_var.iter().map(|l| (0.5 * l).exp()).collect();
    let z = reparameterize("sample_diag_gaussian", &p.mean, &std, eps)?;
    let n = z.len();
    Ok(LatentSample {
        z: Tensor::new(&[n], z)?,
        epsilon: Tensor::new(&[n], eps.to_vec())?,
    })
}

pub fn sample_diag_gaussian(p: &DiagonalGaussianParams, rng: &mut impl Rng) -> Result<LatentSample> {
    let eps = standard_normals(rng, p.dim());
    sample_diag_gaussian_with_noise(p, &eps)
}

/// One `d×d` map: `z[i, j] = M[i, j] + sqrt(Ω_i Ψ_j) * eps[i, j]`.
pub fn sample_mvn_with_noise(p: &MvnFeatureMapParams, eps: &[f64]) -> Result<LatentSample> {
    p.validate()?;
    let d = p.d();
    let std: Vec<f64> = p.variance().iter().map(|v| v.sqrt()).collect();
    let z = reparameterize("sample_mvn", &p.mean_matrix, &std, eps)?;
    Ok(LatentSample {
        z: Tensor::new(&[d, d], z)?,
        epsilon: Tensor::new(&[d, d], eps.to_vec())?,
    })
}

pub fn sample_mvn(p: &MvnFeatureMapParams, rng: &mut impl Rng) -> Result<LatentSample> {
    let d = p.d();
    let eps = standard_normals(rng, d * d);
    sample_mvn_with_noise(p, &eps)
}

/// One `d×d` map: `z[i, j] = μ_i ν_j + sqrt(Ω_i Ψ_j) * eps[i, j]`.
pub fn sample_lowrank_mvn_with_noise(p: &LowRankMvnParams, eps: &[f64]) -> Result<LatentSample> {
    p.validate()?;
    sample_mvn_with_noise(&p.to_mvn(), eps)
}

pub fn sample_lowrank_mvn(p: &LowRankMvnParams, rng: &mut impl Rng) -> Result<LatentSample> {
    let d = p.d();
    let eps = standard_normals(rng, d * d);
    sample_lowrank_mvn_with_noise(p, &eps)
}

/// `KL(∏ N(mean_i, exp(log_var_i)) || N(0, I))
///   = ½ Σ (exp(log_var) + mean² − 1 − log_var)`.
pub fn kl_to_standard_normal(means: &[f64], log_vars: &[f64]) -> Result<f64> {
    same_len("kl_to_standard_normal", "log_vars length", means.len(), log_vars.len())?;
    check_finite("kl_to_standard_normal.means", means)?;
    check_finite("kl_to_standard_normal.log_vars", log_vars)?;
    let kl = 0.5
        * means
            .iter()
            .zip(log_vars)
            .map(|(m, lv)| lv.exp_m1() - lv + m * m)
            .sum::<f64>();
    if !kl.is_finite() {
        return Err(SvaeError::numeric(format!("KL overflowed to {kl}")));
    }
    Ok(kl)
}
