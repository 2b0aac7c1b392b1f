//! Parzen-window log-likelihood estimates.
//!
//! Model samples are treated as centres of an isotropic Gaussian mixture of
//! bandwidth `σ`. The bandwidth is chosen on held-out validation points and
//! the test log-likelihood is reported as a mean with its standard error.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Result, SvaeError};
use crate::model::Model;
use crate::rng::{derive_seed, seeded, standard_normals};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            let mut g: Vec<f64> = (0..n)
                .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
                .collect();
            g[0] = lo;
            g[n - 1] = hi;
            g
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParzenConfig {
    pub n_model_samples: usize,
    pub sigma_grid: Vec<f64>,
    /// Validation points used for bandwidth selection; `None` uses all
    /// points handed in.
    pub n_valid: Option<usize>,
    /// Test points scored; `None` scores all of them.
    pub n_test: Option<usize>,
    pub seed: u64,
}

impl Default for ParzenConfig {
    fn default() -> Self {
        ParzenConfig {
            n_model_samples: 10_000,
            sigma_grid: log_grid(0.01, 1.0, 20),
            n_valid: None,
            n_test: None,
            seed: 0,
        }
    }
}

impl ParzenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_grid.is_empty() {
            return Err(SvaeError::contract("sigma grid is empty"));
        }
        if let Some(s) = self.sigma_grid.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(SvaeError::contract(format!("sigma grid entry {s} is not positive")));
        }
        if self.n_model_samples == 0 {
            return Err(SvaeError::contract("n_model_samples must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParzenReport {
    pub chosen_sigma: f64,
    pub mean_log_likelihood: f64,
    pub std_error: f64,
    pub n_test: usize,
    pub n_model_samples: usize,
}

impl ParzenReport {
    pub fn record(&self) -> String {
        format!(
            "parzen chosen_sigma={} mean_log_likelihood={} std_error={} n_test={} n_model_samples={}",
            self.chosen_sigma, self.mean_log_likelihood, self.std_error, self.n_test, self.n_model_samples
        )
    }
}

impl fmt::Display for ParzenReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Parzen log-likelihood {:.2} ± {:.2} (σ = {:.4}, {} test points, {} samples)",
            self.mean_log_likelihood, self.std_error, self.chosen_sigma, self.n_test, self.n_model_samples
        )
    }
}

/// Anything that can draw flat sample vectors.
pub trait Sampler {
    fn dim(&self) -> usize;
    /// `[n, dim]`
    fn sample(&self, n: usize, rng: &mut dyn rand::RngCore) -> Result<Tensor>;
}

impl Sampler for Model {
    fn dim(&self) -> usize {
        self.config().image_numel()
    }

    fn sample(&self, n: usize, mut rng: &mut dyn rand::RngCore) -> Result<Tensor> {
        let images = self.generate(n, 100, &mut rng)?;
        images.reshape(&[n, self.dim()])
    }
}

/// `N(mean, std² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSampler {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl GaussianSampler {
    /// Expected log-density of a draw under its own distribution.
    pub fn expected_log_density(&self) -> f64 {
        let d = self.mean.len() as f64;
        -0.5 * d * (LN_2PI + 2.0 * self.std.ln()) - 0.5 * d
    }
}

impl Sampler for GaussianSampler {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sample(&self, n: usize, mut rng: &mut dyn rand::RngCore) -> Result<Tensor> {
        let d = self.dim();
        let eps = standard_normals(&mut rng, n * d);
        let data = eps
            .iter()
            .enumerate()
            .map(|(i, e)| self.mean[i % d] + self.std * e)
            .collect();
        Tensor::new(&[n, d], data)
    }
}

fn rows(t: &Tensor) -> Result<(usize, usize)> {
    let n = *t
        .shape()
        .first()
        .ok_or_else(|| SvaeError::contract("expected a batch of points, got a scalar"))?;
    if n == 0 {
        return Err(SvaeError::contract("point set is empty"));
    }
    Ok((n, t.numel() / n))
}

fn sq_distances(x: &[f64], samples: &[f64]) -> Vec<f64> {
    samples
        .chunks_exact(x.len())
        .map(|s| x.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect()
}

fn log_density_from_sq(sq: &[f64], dim: usize, sigma: f64) -> f64 {
    let inv = -0.5 / (sigma * sigma);
    let m = sq.iter().fold(f64::NEG_INFINITY, |acc, &d| acc.max(d * inv));
    let s: f64 = sq.iter().map(|&d| (d * inv - m).exp()).sum();
    m + s.ln() - (sq.len() as f64).ln() - 0.5 * dim as f64 * (LN_2PI + 2.0 * sigma.ln())
}

/// `log( (1/n) Σ_i N(x; s_i, σ² I) )` via log-sum-exp. `samples` is `[n, ..]`
/// with each row flattened to `x.len()` values.
pub fn parzen_log_density(x: &[f64], samples: &Tensor, sigma: f64) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(SvaeError::contract(format!("sigma must be positive, got {sigma}")));
    }
    let (_, d) = rows(samples)?;
    if d != x.len() {
        return Err(SvaeError::dim("parzen_log_density", "point dimension", d, x.len()));
    }
    Ok(log_density_from_sq(&sq_distances(x, samples.data()), d, sigma))
}

/// Per-point log densities for every σ in `grid`: result `[point][sigma]`.
/// Points are evaluated in parallel; output order follows `points`.
fn log_densities(points: &Tensor, samples: &Tensor, grid: &[f64]) -> Result<Vec<Vec<f64>>> {
    let (_, d) = rows(samples)?;
    let (_, dp) = rows(points)?;
    if d != dp {
        return Err(SvaeError::dim("parzen", "point dimension", d, dp));
    }
    Ok(points
        .data()
        .par_chunks_exact(d)
        .map(|x| {
            let sq = sq_distances(x, samples.data());
            grid.iter().map(|&s| log_density_from_sq(&sq, d, s)).collect()
        })
        .collect())
}

/// The grid value maximizing the mean validation log density; ties go to
/// the smaller σ.
pub fn cross_validate_sigma(valid: &Tensor, samples: &Tensor, grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(SvaeError::contract("sigma grid is empty"));
    }
    if let Some(s) = grid.iter().find(|s| s.is_nan() || **s <= 0.0) {
        return Err(SvaeError::contract(format!("sigma grid entry {s} is not positive")));
    }
    let per_point = log_densities(valid, samples, grid)?;
    let mut totals = vec![0.0; grid.len()];
    for row in &per_point {
        for (t, v) in totals.iter_mut().zip(row) {
            *t += v;
        }
    }
    let mut best = 0;
    for i in 1..grid.len() {
        let better = totals[i] > totals[best] || (totals[i] == totals[best] && grid[i] < grid[best]);
        if better {
            best = i;
        }
    }
    Ok(grid[best])
}

fn head(t: &Tensor, limit: Option<usize>) -> Result<Tensor> {
    let (n, d) = rows(t)?;
    let k = limit.map_or(n, |l| l.min(n)).max(1);
    Tensor::new(&[k, d], t.data()[..k * d].to_vec())
}

/// Draws model samples, selects σ on `valid` and scores `test`. Both point
/// sets are `[n, ..]` and flattened per row.
pub fn evaluate_parzen(
    sampler: &dyn Sampler,
    valid: &Tensor,
    test: &Tensor,
    cfg: &ParzenConfig,
) -> Result<ParzenReport> {
    cfg.validate()?;
    let mut rng = seeded(derive_seed(cfg.seed, &[0x9a5e]));
    let samples = sampler.sample(cfg.n_model_samples, &mut rng)?;
    let valid = head(valid, cfg.n_valid)?;
    let test = head(test, cfg.n_test)?;
    let sigma = cross_validate_sigma(&valid, &samples, &cfg.sigma_grid)?;
    let lls: Vec<f64> = log_densities(&test, &samples, &[sigma])?
        .into_iter()
        .map(|v| v[0])
        .collect();
    let n = lls.len() as f64;
    let mean = lls.iter().sum::<f64>() / n;
    let var = if lls.len() > 1 {
        lls.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(ParzenReport {
        chosen_sigma: sigma,
        mean_log_likelihood: mean,
        std_error: (var / n).sqrt(),
        n_test: lls.len(),
        n_model_samples: cfg.n_model_samples,
    })
}

/// Draws `n` points from `sampler` with a fixed seed, e.g. as synthetic
/// validation or test data.
pub fn draw_points(sampler: &dyn Sampler, n: usize, seed: u64) -> Result<Tensor> {
    let mut rng = seeded(seed);
    sampler.sample(n, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(d: usize, data: &[f64]) -> Tensor {
        Tensor::new(&[data.len() / d, d], data.to_vec()).unwrap()
    }

    fn naive(x: &[f64], samples: &[f64], sigma: f64) -> f64 {
        let d = x.len();
        let n = samples.len() / d;
        let norm = (2.0 * std::f64::consts::PI * sigma * sigma).powf(-(d as f64) / 2.0);
        let p: f64 = samples
            .chunks(d)
            .map(|s| {
                let sq: f64 = x.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum();
                norm * (-sq / (2.0 * sigma * sigma)).exp()
            })
            .sum::<f64>()
            / n as f64;
        p.ln()
    }

    #[test]
    fn kernel_centre() {
        let v = parzen_log_density(&[0.3], &pts(1, &[0.3]), 1.0).unwrap();
        assert!((v - (-0.918_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn two_term_sum() {
        let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let v = parzen_log_density(&[0.0], &pts(1, &[0.0, 2.0]), 1.0).unwrap();
        assert!((v - ((phi(0.0) + phi(2.0)) / 2.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_samples_and_bad_sigma() {
        let empty = Tensor::zeros(&[0, 2]);
        assert!(matches!(
            parzen_log_density(&[0.0, 0.0], &empty, 1.0),
            Err(SvaeError::Contract(_))
        ));
        assert!(parzen_log_density(&[0.0], &pts(1, &[0.0]), 0.0).is_err());
    }

    #[test]
    fn far_sample_only_changes_normalizer() {
        let s = pts(2, &[0.1, 0.2, -0.3, 0.5, 0.0, 0.0]);
        let mut far = s.data().to_vec();
        far.extend([1e4, -1e4]);
        let far = pts(2, &far);
        let x = [0.05, 0.1];
        let a = parzen_log_density(&x, &s, 0.2).unwrap();
        let b = parzen_log_density(&x, &far, 0.2).unwrap();
        assert!((b - (a + (3.0f64).ln() - (4.0f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn single_grid_value_is_chosen() {
        let s = pts(1, &[0.0, 1.0]);
        assert_eq!(cross_validate_sigma(&s, &s, &[0.37]).unwrap(), 0.37);
        assert!(cross_validate_sigma(&s, &s, &[]).is_err());
    }

    #[test]
    fn validation_on_samples_prefers_small_sigma() {
        let g = GaussianSampler {
            mean: vec![0.0; 3],
            std: 1.0,
        };
        let s = draw_points(&g, 50, 1).unwrap();
        let grid = log_grid(0.01, 1.0, 20);
        assert_eq!(cross_validate_sigma(&s, &s, &grid).unwrap(), 0.01);
    }

    #[test]
    fn density_of_samples_decreases_beyond_small_end() {
        let g = GaussianSampler {
            mean: vec![0.0; 2],
            std: 1.0,
        };
        let s = draw_points(&g, 40, 2).unwrap();
        let grid = log_grid(0.01, 1.0, 20);
        let dens = log_densities(&s, &s, &grid).unwrap();
        let means: Vec<f64> = (0..grid.len())
            .map(|j| dens.iter().map(|r| r[j]).sum::<f64>())
            .collect();
        assert!(means.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn ties_go_to_smaller_sigma() {
        // Identical grid entries produce exact ties.
        let s = pts(1, &[0.0, 1.0]);
        assert_eq!(cross_validate_sigma(&s, &s, &[0.5, 0.5]).unwrap(), 0.5);
        let dup = [0.3, 0.3];
        assert_eq!(cross_validate_sigma(&s, &s, &dup).unwrap(), 0.3);
    }

    #[test]
    fn report_is_reproducible() {
        let g = GaussianSampler {
            mean: vec![0.5, -0.5],
            std: 0.3,
        };
        let v = draw_points(&g, 50, 10).unwrap();
        let t = draw_points(&g, 60, 11).unwrap();
        let cfg = ParzenConfig {
            n_model_samples: 500,
            ..Default::default()
        };
        let a = evaluate_parzen(&g, &v, &t, &cfg).unwrap();
        let b = evaluate_parzen(&g, &v, &t, &cfg).unwrap();
        assert_eq!(a.record(), b.record());
        assert!(cfg.sigma_grid.contains(&a.chosen_sigma));
    }

    proptest! {
        #[test]
        fn logsumexp_matches_direct_sum(
            n in 1usize..=100,
            d in 1usize..6,
            sigma in 0.2f64..3.0,
            seed: u64,
        ) {
            let mut rng = seeded(seed);
            let samples = standard_normals(&mut rng, n * d);
            let x = standard_normals(&mut rng, d);
            let got = parzen_log_density(&x, &pts(d, &samples), sigma).unwrap();
            let want = naive(&x, &samples, sigma);
            prop_assert!((got - want).abs() < 1e-10, "{} vs {}", got, want);
        }

        #[test]
        fn permutation_invariant(seed: u64) {
            let mut rng = seeded(seed);
            let samples = standard_normals(&mut rng, 20);
            let rev: Vec<f64> = samples.chunks(2).rev().flatten().copied().collect();
            let x = [0.1, -0.2];
            let a = parzen_log_density(&x, &pts(2, &samples), 0.5).unwrap();
            let b = parzen_log_density(&x, &pts(2, &rev), 0.5).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
