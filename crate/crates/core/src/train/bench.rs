//! Per-model epoch and generation timing.
//!
//! Models are stepped round-robin, batch by batch, so that slow drifts in
//! machine load hit every model equally. Each model's epoch time is the sum
//! of its own step times (forward, backward and update; batch assembly is
//! excluded). Generation runs the decoder only.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::data::{BatchIterator, Dataset};
use crate::error::{Result, SvaeError};
use crate::latent::VariantKind;
use crate::model::Model;
use crate::rng::{derive_seed, seeded};

use super::{AdamConfig, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub seed: u64,
    pub n_generate: usize,
    /// Images decoded per generation call.
    pub generate_chunk: usize,
    pub adam: AdamConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch_size: 64,
            seed: 0,
            n_generate: 10_000,
            generate_chunk: 100,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: VariantKind,
    pub head_width: usize,
    pub decoder_params: usize,
    pub train_images: usize,
    pub train_epoch_seconds: f64,
    pub n_generate: usize,
    pub generate_seconds: f64,
}

impl BenchRow {
    pub fn timing_lines(&self) -> [TimingLine; 2] {
        [
            TimingLine {
                op: "train_epoch".into(),
                variant: self.variant,
                count: self.train_images,
                seconds: self.train_epoch_seconds,
            },
            TimingLine {
                op: "generate".into(),
                variant: self.variant,
                count: self.n_generate,
                seconds: self.generate_seconds,
            },
        ]
    }
}

/// `timing op=<op> variant=<name> count=<n> seconds=<s>`
#[derive(Debug, Clone, PartialEq)]
pub struct TimingLine {
    pub op: String,
    pub variant: VariantKind,
    pub count: usize,
    pub seconds: f64,
}

impl fmt::Display for TimingLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "timing op={} variant={} count={} seconds={:.6}",
            self.op, self.variant, self.count, self.seconds
        )
    }
}

impl FromStr for TimingLine {
    type Err = SvaeError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| SvaeError::format("timing line", 0, format!("{why}: {s:?}"));
        let rest = s
            .trim()
            .strip_prefix("timing ")
            .ok_or_else(|| bad("missing 'timing' prefix"))?;
        let mut fields = std::collections::HashMap::new();
        for kv in rest.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("field without '='"))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(&format!("missing {k}")));
        Ok(TimingLine {
            op: get("op")?.to_string(),
            variant: get("variant")?.parse()?,
            count: get("count")?.parse().map_err(|_| bad("count is not an integer"))?,
            seconds: get("seconds")?.parse().map_err(|_| bad("seconds is not a number"))?,
        })
    }
}

/// Times one training epoch and `n_generate` generated images per model.
pub fn bench(models: &[Model], data: &Dataset, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if models.is_empty() {
        return Err(SvaeError::contract("bench needs at least one model"));
    }
    let tcfg = TrainConfig {
        epochs: 1,
        batch_size: cfg.batch_size,
        adam: cfg.adam,
        seed: cfg.seed,
        checkpoint_every: 0,
    };
    let mut trainers = models
        .iter()
        .map(|m| Trainer::new(m.clone(), tcfg.clone()))
        .collect::<Result<Vec<_>>>()?;
    let batches = BatchIterator::new(data.len(), cfg.batch_size)?.train_batches(cfg.seed, 0);
    if batches.is_empty() {
        return Err(SvaeError::contract(format!(
            "dataset of {} images has no full batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let k = trainers.len();

    // Untimed warm-up so first-touch allocation is not charged to anyone.
    let warm = data.batch(&batches[0]);
    for t in &mut trainers {
        t.step(&warm, 1, 0)?;
    }

    let mut train_secs = vec![0.0; k];
    for (s, idx) in batches.iter().enumerate() {
        let x = data.batch(idx);
        for r in 0..k {
            let i = (s + r) % k;
            let t0 = Instant::now();
            trainers[i].step(&x, 0, s)?;
            train_secs[i] += t0.elapsed().as_secs_f64();
        }
    }

    let chunk = cfg.generate_chunk.max(1);
    let mut rngs: Vec<_> = (0..k)
        .map(|i| seeded(derive_seed(cfg.seed, &[0x6e, i as u64])))
        .collect();
    let mut gen_secs = vec![0.0; k];
    let (mut done, mut round) = (0, 0);
    while done < cfg.n_generate {
        let b = chunk.min(cfg.n_generate - done);
        for r in 0..k {
            let i = (round + r) % k;
            let t0 = Instant::now();
            models[i].generate(b, b, &mut rngs[i])?;
            gen_secs[i] += t0.elapsed().as_secs_f64();
        }
        done += b;
        round += 1;
    }

    Ok(models
        .iter()
        .enumerate()
        .map(|(i, m)| BenchRow {
            variant: m.variant(),
            head_width: m.config().head_width(),
            decoder_params: m.decoder_param_count(),
            train_images: batches.len() * cfg.batch_size,
            train_epoch_seconds: train_secs[i],
            n_generate: cfg.n_generate,
            generate_seconds: gen_secs[i],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timing_line_round_trip() {
        let line = TimingLine {
            op: "generate".into(),
            variant: VariantKind::LowRankMvnSpatial,
            count: 10_000,
            seconds: 1.375,
        };
        let text = line.to_string();
        assert_eq!(
            text,
            "timing op=generate variant=lowrank-mvn count=10000 seconds=1.375000"
        );
        assert_eq!(text.parse::<TimingLine>().unwrap(), line);
        assert!("op=generate".parse::<TimingLine>().is_err());
    }
}
