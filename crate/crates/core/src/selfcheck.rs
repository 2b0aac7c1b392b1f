//! Oracle suites behind `svae check`.
//!
//! Each suite recomputes a quantity by an independent route (dense matrices,
//! direct summation, finite differences, Monte Carlo) and compares.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;

use crate::conv::{conv2d_forward, conv_transpose2d_forward, ConvGeom};
use crate::error::Result;
use crate::eval::parzen_log_density;
use crate::gradcheck::{analytic_gradients, GradCheck, GradCheckReport};
use crate::latent::{
    kl_to_standard_normal, kron_diag, param_count, sample_diag_gaussian_with_noise, sample_lowrank_mvn_with_noise,
    sample_mvn, sample_mvn_with_noise, DiagonalGaussianParams, LowRankMvnParams, MvnFeatureMapParams, VariantKind,
};
use crate::model::{Bound, Model, ModelConfig};
use crate::rng::{derive_seed, seeded, standard_normals};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct CheckOptions {
    pub seed: u64,
    /// Perturbs one analytic gradient coordinate before comparison; the
    /// gradient suite must then fail.
    pub corrupt_gradient: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Suite = fn(&CheckOptions) -> Result<(bool, String)>;

pub const SUITES: [(&str, Suite); 8] = [
    ("kronecker", kronecker),
    ("param-counts", param_counts),
    ("kl", kl),
    ("moments", moments),
    ("sampler-reduction", reduction),
    ("gradients", gradients),
    ("adjointness", adjointness),
    ("parzen", parzen),
];

pub fn run_all(opts: &CheckOptions) -> Vec<SuiteResult> {
    SUITES
        .iter()
        .map(|&(name, suite)| {
            let t0 = Instant::now();
            let (passed, detail) = match suite(opts) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            SuiteResult {
                name,
                passed,
                detail,
                seconds: t0.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

pub fn render_table(results: &[SuiteResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<18} {:<6} {:>8}  detail", "suite", "result", "seconds");
    for r in results {
        let _ = writeln!(
            out,
            "{:<18} {:<6} {:>8.3}  {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let _ = writeln!(out, "{} suites, {} failed", results.len(), failed);
    out
}

/// Diagonal of `diag(a) ⊗ diag(b)` read off the dense Kronecker matrix.
pub fn dense_kron_diagonal(a: &[f64], b: &[f64]) -> Vec<f64> {
    let (m, n) = (a.len(), b.len());
    let size = m * n;
    let mut k = vec![0.0; size * size];
    for i1 in 0..m {
        for i2 in 0..n {
            for j1 in 0..m {
                for j2 in 0..n {
                    let av = if i1 == j1 { a[i1] } else { 0.0 };
                    let bv = if i2 == j2 { b[i2] } else { 0.0 };
                    k[(i1 * n + i2) * size + j1 * n + j2] = av * bv;
                }
            }
        }
    }
    (0..size).map(|i| k[i * size + i]).collect()
}

fn kronecker(o: &CheckOptions) -> Result<(bool, String)> {
    let mut rng = seeded(derive_seed(o.seed, &[1]));
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let d = rng.gen_range(1..=16);
        let a: Vec<f64> = (0..d).map(|_| rng.gen_range(0.01..5.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.gen_range(0.01..5.0)).collect();
        let got = kron_diag(&a, &b)?;
        for (x, y) in got.iter().zip(dense_kron_diagonal(&a, &b)) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok((worst < 1e-12, format!("200 pairs, max abs error {worst:.1e}")))
}

fn param_counts(_: &CheckOptions) -> Result<(bool, String)> {
    let got = [
        param_count(VariantKind::Original, 3, 64, 81)?,
        param_count(VariantKind::NaiveSpatial, 3, 64, 81)?,
        param_count(VariantKind::MvnSpatial, 3, 64, 81)?,
        param_count(VariantKind::LowRankMvnSpatial, 3, 64, 81)?,
    ];
    Ok((got == [162, 1152, 960, 768], format!("{got:?}")))
}

/// Monte-Carlo `E_q[log q(z) − log p(z)]` for a diagonal Gaussian.
pub fn kl_monte_carlo(p: &DiagonalGaussianParams, draws: usize, rng: &mut impl Rng) -> f64 {
    let mut total = 0.0;
    let eps = standard_normals(rng, p.dim() * draws);
    for e in eps.chunks_exact(p.dim()) {
        for ((m, lv), ei) in p.mean.iter().zip(&p.log_var).zip(e) {
            let z = m + (0.5 * lv).exp() * ei;
            // log q − log p; the 2π terms cancel.
            total += -0.5 * lv - 0.5 * ei * ei + 0.5 * z * z;
        }
    }
    total / draws as f64
}

fn kl(o: &CheckOptions) -> Result<(bool, String)> {
    let zero = kl_to_standard_normal(&[0.0; 16], &[0.0; 16])?;
    let mut rng = seeded(derive_seed(o.seed, &[3]));
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let mean: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let log_var: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = DiagonalGaussianParams::new(mean, log_var)?;
        let exact = kl_to_standard_normal(&p.mean, &p.log_var)?;
        let mc = kl_monte_carlo(&p, 100_000, &mut rng);
        worst = worst.max(((mc - exact) / exact).abs());
    }
    Ok((
        zero == 0.0 && worst < 0.02,
        format!("KL(0,0)={zero}, 3 sets x 1e5 draws, max rel error {worst:.2e}"),
    ))
}

fn moments(o: &CheckOptions) -> Result<(bool, String)> {
    let d = 3;
    let p = MvnFeatureMapParams::new(
        vec![0.5, -1.0, 0.0, 2.0, 0.3, -0.2, 1.0, 0.0, -0.7],
        vec![-0.5, 0.0, 0.4],
        vec![0.2, -0.3, 0.1],
    )?;
    let var = p.variance();
    let n = 20_000;
    let mut rng = seeded(derive_seed(o.seed, &[4]));
    let (mut s1, mut s2) = (vec![0.0; d * d], vec![0.0; d * d]);
    for _ in 0..n {
        let z = sample_mvn(&p, &mut rng)?.z;
        for (k, v) in z.data().iter().enumerate() {
            s1[k] += v;
            s2[k] += v * v;
        }
    }
    let mut worst = 0.0f64;
    for k in 0..d * d {
        let mean = s1[k] / n as f64;
        let emp_var = s2[k] / n as f64 - mean * mean;
        let se_mean = (var[k] / n as f64).sqrt();
        let se_var = var[k] * (2.0 / (n - 1) as f64).sqrt();
        worst = worst
            .max((mean - p.mean_matrix[k]).abs() / se_mean)
            .max((emp_var - var[k]).abs() / se_var);
    }
    Ok((
        worst < 5.0,
        format!("3x3 map, 2e4 draws, worst deviation {worst:.2} SE"),
    ))
}

fn reduction(o: &CheckOptions) -> Result<(bool, String)> {
    let c = 9;
    let mut rng = seeded(derive_seed(o.seed, &[5]));
    let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let log_var: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let eps = standard_normals(&mut rng, c);
    let reference =
        sample_diag_gaussian_with_noise(&DiagonalGaussianParams::new(mean.clone(), log_var.clone())?, &eps)?;
    let kl_ref = kl_to_standard_normal(&mean, &log_var)?;

    // Per map: Ω = Ψ = exp(log_var / 2), ν = 1.
    let mut worst = 0.0f64;
    let (mut mvn_lv, mut low_lv) = (Vec::new(), Vec::new());
    let (mut mvn_m, mut low_m) = (Vec::new(), Vec::new());
    for k in 0..c {
        let half = 0.5 * log_var[k];
        let mvn = MvnFeatureMapParams::new(vec![mean[k]], vec![half], vec![half])?;
        let low = LowRankMvnParams::new(vec![mean[k]], vec![1.0], vec![half], vec![half])?;
        let zm = sample_mvn_with_noise(&mvn, &eps[k..=k])?.z.data()[0];
        let zl = sample_lowrank_mvn_with_noise(&low, &eps[k..=k])?.z.data()[0];
        worst = worst
            .max((zm - reference.z.data()[k]).abs())
            .max((zl - reference.z.data()[k]).abs());
        let (dm, dl) = (mvn.to_diagonal(), low.to_mvn().to_diagonal());
        mvn_m.extend(dm.mean);
        mvn_lv.extend(dm.log_var);
        low_m.extend(dl.mean);
        low_lv.extend(dl.log_var);
    }
    worst = worst
        .max((kl_to_standard_normal(&mvn_m, &mvn_lv)? - kl_ref).abs())
        .max((kl_to_standard_normal(&low_m, &low_lv)? - kl_ref).abs());
    Ok((worst <= 1e-12, format!("d=1, N=C={c}: max |dz|, |dKL| = {worst:.1e}")))
}

/// Finite-difference check of the full negative ELBO of a 4×4-image,
/// d = 2, N = 2 model.
pub fn elbo_gradient_report(variant: VariantKind, seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let model = Model::new(ModelConfig::tiny(variant), derive_seed(seed, &[6, variant as u64]))?;
    let mut rng = seeded(derive_seed(seed, &[7, variant as u64]));
    let batch = 2;
    let x = Tensor::new(
        &[batch, 1, 4, 4],
        (0..batch * 16).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )?;
    let eps = model.draw_noise(batch, &mut rng);
    let params: Vec<Tensor> = model.params().iter().map(|p| p.tensor.clone()).collect();
    let mut loss = |t: &mut crate::tape::Tape, vars: &[crate::tape::Var]| {
        Ok(model.elbo_on_tape(t, &Bound::from_vars(vars.to_vec()), &x, &eps)?.loss)
    };
    let check = GradCheck::default();
    let (_, mut analytic) = analytic_gradients(&mut loss, &params)?;
    if corrupt {
        let g = &mut analytic[0][0];
        *g = *g * 1.5 + 1e-3;
    }
    check.compare(&analytic, loss, &params)
}

fn gradients(o: &CheckOptions) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for v in VariantKind::ALL {
        let r = elbo_gradient_report(v, o.seed, o.corrupt_gradient)?;
        worst = worst.max(r.max_relative_error);
        parts.push(format!("{v} {:.1e}", r.max_relative_error));
    }
    Ok((worst < 1e-4, format!("ELBO max rel error: {}", parts.join(", "))))
}

fn adjointness(o: &CheckOptions) -> Result<(bool, String)> {
    let mut rng = seeded(derive_seed(o.seed, &[8]));
    let mut worst = 0.0f64;
    // Geometries whose transposed output recovers the 9x9 input exactly.
    for (k, s, p) in [(1, 1, 0), (3, 1, 1), (3, 2, 1), (5, 2, 2), (3, 3, 0)] {
        let g = ConvGeom::conv(2, 3, 9, 9, 4, k, s, p)?;
        let t = ConvGeom::transpose(2, 4, g.out_h, g.out_w, 3, k, s, p)?;
        let u = standard_normals(&mut rng, g.input_len());
        let v = standard_normals(&mut rng, g.output_len());
        let w = standard_normals(&mut rng, g.weight_len());
        let cu = conv2d_forward(&g, &u, &w, &[0.0; 4])?;
        let ctv = conv_transpose2d_forward(&t, &v, &w, &[0.0; 3])?;
        let lhs: f64 = cu.iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(&ctv).map(|(a, b)| a * b).sum();
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    Ok((
        worst < 1e-10,
        format!("<conv u, v> vs <u, conv^T v>: max rel error {worst:.1e}"),
    ))
}

fn parzen(o: &CheckOptions) -> Result<(bool, String)> {
    let mut rng = seeded(derive_seed(o.seed, &[9]));
    let mut worst = 0.0f64;
    for n in [1, 7, 50, 100] {
        let d = 3;
        let samples = standard_normals(&mut rng, n * d);
        let x = standard_normals(&mut rng, d);
        let sigma = rng.gen_range(0.2..2.0);
        let got = parzen_log_density(&x, &Tensor::new(&[n, d], samples.clone())?, sigma)?;
        let norm = (2.0 * std::f64::consts::PI * sigma * sigma).powf(-1.5);
        let direct = (samples
            .chunks(d)
            .map(|s| {
                let sq: f64 = x.iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum();
                norm * (-sq / (2.0 * sigma * sigma)).exp()
            })
            .sum::<f64>()
            / n as f64)
            .ln();
        worst = worst.max((got - direct).abs());
    }
    Ok((
        worst < 1e-10,
        format!("log-sum-exp vs direct sum: max abs error {worst:.1e}"),
    ))
}
