//! Adam, the seeded training loop, resumable trainer state and the timing
//! harness.
//!
//! Every random draw during training comes from
//! `derive_seed(seed, [stream, epoch, step])`, so a run is a pure function of
//! the seed, the configuration and the data.

mod adam;
mod bench;

use std::fmt;
use std::time::Instant;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use bench::{bench, BenchConfig, BenchRow, TimingLine};

use crate::data::{BatchIterator, Dataset};
use crate::error::{Result, SvaeError};
use crate::model::{Checkpoint, ElboBreakdown, Model, NamedParam};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

const NOISE_STREAM: u64 = 0x6e6f;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 disables periodic saves.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(SvaeError::contract("batch size must be positive"));
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub mean_elbo: f64,
    pub mean_recon: f64,
    pub mean_kl: f64,
    pub steps: usize,
    pub wall_seconds: f64,
}

impl EpochReport {
    /// One run-log line. Wall time is left out so that logs of repeated runs
    /// compare equal byte for byte.
    pub fn record(&self) -> String {
        format!(
            "epoch={} mean_elbo={} mean_recon={} mean_kl={} steps={}",
            self.epoch, self.mean_elbo, self.mean_recon, self.mean_kl, self.steps
        )
    }
}

impl fmt::Display for EpochReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {:>3}  elbo {:>12.4}  recon {:>12.4}  kl {:>9.4}  {:.2}s",
            self.epoch, self.mean_elbo, self.mean_recon, self.mean_kl, self.wall_seconds
        )
    }
}

/// A model together with its optimizer state and progress counters.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    adam: AdamState,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            model,
            cfg,
            adam: AdamState::new(),
            epochs_done: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn global_step(&self) -> u64 {
        self.adam.step
    }

    /// Noise for step `step` of epoch `epoch` (both 0-based).
    pub fn step_noise(&self, batch: usize, epoch: usize, step: usize) -> Tensor {
        let mut rng = seeded(derive_seed(self.cfg.seed, &[NOISE_STREAM, epoch as u64, step as u64]));
        self.model.draw_noise(batch, &mut rng)
    }

    /// One Adam step on `x`; returns the pre-update ELBO of the batch.
    pub fn step(&mut self, x: &Tensor, epoch: usize, step: usize) -> Result<ElboBreakdown> {
        let eps = self.step_noise(x.shape()[0], epoch, step);
        let out = self.model.elbo_and_grad(x, &eps)?;
        adam_step(
            self.model.params_mut().iter_mut().map(|p| &mut p.tensor),
            &mut self.adam,
            &self.cfg.adam,
        )?;
        Ok(out)
    }

    /// Runs the next epoch over shuffled full batches.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochReport> {
        let epoch = self.epochs_done;
        let batches = BatchIterator::new(data.len(), self.cfg.batch_size)?.train_batches(self.cfg.seed, epoch as u64);
        if batches.is_empty() {
            return Err(SvaeError::contract(format!(
                "dataset of {} images has no full batch of {}",
                data.len(),
                self.cfg.batch_size
            )));
        }
        let (mut recon, mut kl, mut wall) = (0.0, 0.0, 0.0);
        for (s, idx) in batches.iter().enumerate() {
            let x = data.batch(idx);
            let t0 = Instant::now();
            let b = self.step(&x, epoch, s)?;
            wall += t0.elapsed().as_secs_f64();
            recon += b.reconstruction;
            kl += b.kl;
        }
        self.epochs_done += 1;
        let n = batches.len() as f64;
        let (mean_recon, mean_kl) = (recon / n, kl / n);
        Ok(EpochReport {
            epoch: self.epochs_done,
            mean_elbo: mean_recon - mean_kl,
            mean_recon,
            mean_kl,
            steps: batches.len(),
            wall_seconds: wall,
        })
    }

    /// Model parameters plus Adam moments (`adam.m.*`, `adam.v.*`) and
    /// progress counters.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.model);
        ckpt.meta
            .push(("trainer.epochs_done".into(), self.epochs_done.to_string()));
        ckpt.meta.push(("trainer.adam_step".into(), self.adam.step.to_string()));
        ckpt.meta.push(("trainer.seed".into(), self.cfg.seed.to_string()));
        if !self.adam.m.is_empty() {
            for (i, p) in self.model.params().iter().enumerate() {
                for (prefix, buf) in [("adam.m", &self.adam.m[i]), ("adam.v", &self.adam.v[i])] {
                    ckpt.arrays.push(NamedParam {
                        name: format!("{prefix}.{}", p.name),
                        tensor: Tensor::new(p.tensor.shape(), buf.clone()).expect("moment matches parameter"),
                    });
                }
            }
        }
        ckpt
    }

    /// Restores a trainer written by [`Trainer::checkpoint`]. Plain model
    /// checkpoints resume with fresh optimizer state.
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let model = ckpt.to_model()?;
        let counter = |key: &str| -> Result<u64> {
            ckpt.meta(key)
                .map(|v| {
                    v.parse()
                        .map_err(|_| SvaeError::format("checkpoint", 0, format!("{key}={v} is not an integer")))
                })
                .unwrap_or(Ok(0))
        };
        let mut adam = AdamState {
            step: counter("trainer.adam_step")?,
            ..AdamState::default()
        };
        if adam.step > 0 {
            for p in model.params() {
                let get = |prefix: &str| {
                    ckpt.array(&format!("{prefix}.{}", p.name))
                        .map(|t| t.data().to_vec())
                        .ok_or_else(|| SvaeError::format("checkpoint", 0, format!("missing {prefix}.{}", p.name)))
                };
                adam.m.push(get("adam.m")?);
                adam.v.push(get("adam.v")?);
            }
        }
        let mut t = Trainer::new(model, cfg)?;
        t.adam = adam;
        t.epochs_done = counter("trainer.epochs_done")? as usize;
        Ok(t)
    }
}

/// Result of a training run. When `aborted` is set, `checkpoint` holds the
/// state at the end of the last completed epoch.
#[derive(Debug)]
pub struct TrainOutcome {
    pub reports: Vec<EpochReport>,
    pub checkpoint: Checkpoint,
    pub aborted: Option<SvaeError>,
}

pub fn train(model: Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, data, cfg, |_, _| Ok(()))
}

/// [`train`] with a callback after every completed epoch.
pub fn train_with(
    model: Model,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport, &Trainer) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut last_good = trainer.checkpoint();
    let mut reports = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        match trainer.run_epoch(data) {
            Ok(r) => {
                last_good = trainer.checkpoint();
                on_epoch(&r, &trainer)?;
                reports.push(r);
            }
            Err(e @ SvaeError::Numeric(_)) => {
                return Ok(TrainOutcome {
                    reports,
                    checkpoint: last_good,
                    aborted: Some(e),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutcome {
        reports,
        checkpoint: last_good,
        aborted: None,
    })
}

/// Mean squared pixel error of decoding each image's posterior mean.
pub fn reconstruction_mse(model: &Model, data: &Dataset, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for idx in BatchIterator::new(data.len(), batch_size)?.eval_batches() {
        let x = data.batch(&idx);
        let means: Vec<f64> = model.encode(&x)?.iter().flat_map(|p| p.to_diagonal().mean).collect();
        let z = Tensor::new(&[idx.len(), model.config().latent_numel()], means)?;
        let x_hat = model.decode(&z)?;
        total += x
            .data()
            .iter()
            .zip(x_hat.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    Ok(total / (data.len() * data.image_numel()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::latent::VariantKind;
    use crate::model::ModelConfig;

    fn tiny_data(n: usize) -> Dataset {
        let data = (0..n * 16).map(|i| ((i * 37 % 101) as f64) / 100.0).collect();
        Dataset::new(Tensor::new(&[n, 1, 4, 4], data).unwrap(), None, "tiny", Split::Train).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn report_identity_and_determinism() {
        let data = tiny_data(10);
        let run = || {
            let m = Model::new(ModelConfig::tiny(VariantKind::MvnSpatial), 3).unwrap();
            train(m, &data, &cfg()).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.reports.len(), 2);
        for (x, y) in a.reports.iter().zip(&b.reports) {
            assert_eq!(x.record(), y.record());
            assert!((x.mean_elbo - (x.mean_recon - x.mean_kl)).abs() < 1e-9);
            assert_eq!(x.steps, 2);
        }
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let data = tiny_data(8);
        let x0 = data.batch(&[0, 1, 2, 3]);
        let x1 = data.batch(&[4, 5, 6, 7]);
        let model = Model::new(ModelConfig::tiny(VariantKind::LowRankMvnSpatial), 5).unwrap();

        let mut straight = Trainer::new(model.clone(), cfg()).unwrap();
        straight.step(&x0, 0, 0).unwrap();
        straight.step(&x1, 0, 1).unwrap();

        let mut first = Trainer::new(model, cfg()).unwrap();
        first.step(&x0, 0, 0).unwrap();
        let bytes = first.checkpoint().to_bytes();
        let mut resumed = Trainer::resume(&Checkpoint::from_bytes(&bytes, "mem").unwrap(), cfg()).unwrap();
        resumed.step(&x1, 0, 1).unwrap();

        assert_eq!(resumed.global_step(), 2);
        for (a, b) in straight.model().params().iter().zip(resumed.model().params()) {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
    }

    #[test]
    fn divergence_keeps_last_good_checkpoint() {
        let data = tiny_data(8);
        let m = Model::new(ModelConfig::tiny(VariantKind::Original), 1).unwrap();
        let initial = Checkpoint::from_model(&m);
        let mut bad = m.clone();
        let head = bad.params().iter().position(|p| p.name == "head.bias").unwrap();
        bad.params_mut()[head].tensor.data_mut()[0] = f64::NAN;
        let out = train(bad, &data, &cfg()).unwrap();
        assert!(matches!(out.aborted, Some(SvaeError::Numeric(_))));
        assert!(out.reports.is_empty());
        assert_eq!(out.checkpoint.meta("trainer.epochs_done"), Some("0"));
        for (a, b) in out.checkpoint.arrays.iter().zip(&initial.arrays) {
            if a.name != "head.bias" {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn batch_larger_than_dataset_is_contract_error() {
        let m = Model::new(ModelConfig::tiny(VariantKind::Original), 1).unwrap();
        let c = TrainConfig {
            batch_size: 64,
            ..cfg()
        };
        assert!(matches!(train(m, &tiny_data(8), &c), Err(SvaeError::Contract(_))));
    }

    #[test]
    fn reconstruction_mse_is_a_pixel_average() {
        let m = Model::new(ModelConfig::tiny(VariantKind::NaiveSpatial), 2).unwrap();
        let mse = reconstruction_mse(&m, &tiny_data(5), 2).unwrap();
        assert!(mse > 0.0 && mse < 1.0);
    }
}
