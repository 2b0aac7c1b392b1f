//! Run configuration: built-in defaults, overridden by a flat `key = value`
//! file, overridden by command-line flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use svae_core::eval::ParzenConfig;
use svae_core::latent::VariantKind;
use svae_core::model::ModelConfig;
use svae_core::train::{AdamConfig, BenchConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Folder,
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "folder" => Ok(DatasetKind::Folder),
            other => Err(format!("unknown dataset {other:?} (expected mnist, cifar10 or folder)")),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Folder => "folder",
        })
    }
}

/// Every tunable of a run. Keys in config files use the field names.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: VariantKind,
    pub d: usize,
    pub n_maps: usize,
    pub latent_dim: usize,
    pub likelihood_sigma: f64,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub out: PathBuf,
    /// Use only the first `train_limit` training images; 0 uses all.
    pub train_limit: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_every: usize,
    pub grid_rows: usize,
    pub count: usize,
    pub n_model_samples: usize,
    /// 0 scores every test image.
    pub n_test: usize,
    pub n_generate: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            variant: VariantKind::LowRankMvnSpatial,
            d: 3,
            n_maps: 64,
            latent_dim: 81,
            likelihood_sigma: 1.0,
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data/mnist-subset"),
            out: PathBuf::from("out"),
            train_limit: 0,
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 1,
            grid_rows: 8,
            count: 64,
            n_model_samples: 10_000,
            n_test: 0,
            n_generate: 10_000,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| format!("bad value {value:?} for {key}: {e}"))
}

impl RunConfig {
    pub const KEYS: [&'static str; 22] = [
        "seed",
        "variant",
        "d",
        "n_maps",
        "latent_dim",
        "likelihood_sigma",
        "dataset",
        "data_dir",
        "out",
        "train_limit",
        "epochs",
        "batch_size",
        "learning_rate",
        "beta1",
        "beta2",
        "adam_eps",
        "checkpoint_every",
        "grid_rows",
        "count",
        "n_model_samples",
        "n_test",
        "n_generate",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "variant" => self.variant = v.parse().map_err(|e| format!("bad value {v:?} for variant: {e}"))?,
            "d" => self.d = parse(key, v)?,
            "n_maps" => self.n_maps = parse(key, v)?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "likelihood_sigma" => self.likelihood_sigma = parse(key, v)?,
            "dataset" => self.dataset = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "train_limit" => self.train_limit = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "grid_rows" => self.grid_rows = parse(key, v)?,
            "count" => self.count = parse(key, v)?,
            "n_model_samples" => self.n_model_samples = parse(key, v)?,
            "n_test" => self.n_test = parse(key, v)?,
            "n_generate" => self.n_generate = parse(key, v)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<(), String> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("{source}:{}: expected key = value, got {raw:?}", i + 1))?;
            self.set(k, v).map_err(|e| format!("{source}:{}: {e}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn model_config(&self) -> svae_core::Result<ModelConfig> {
        let mut cfg = match self.dataset {
            DatasetKind::Mnist => ModelConfig::mnist(self.variant, self.d, self.n_maps, self.latent_dim)?,
            DatasetKind::Cifar10 => ModelConfig::cifar10(self.variant, self.d, self.n_maps, self.latent_dim)?,
            DatasetKind::Folder => ModelConfig::folder64(self.variant, self.d, self.n_maps, self.latent_dim)?,
        };
        cfg.likelihood_sigma = self.likelihood_sigma;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            betas: (self.beta1, self.beta2),
            eps: self.adam_eps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: self.adam(),
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn parzen_config(&self) -> ParzenConfig {
        ParzenConfig {
            n_model_samples: self.n_model_samples,
            n_test: (self.n_test > 0).then_some(self.n_test),
            seed: self.seed,
            ..ParzenConfig::default()
        }
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            batch_size: self.batch_size,
            seed: self.seed,
            n_generate: self.n_generate,
            adam: self.adam(),
            ..BenchConfig::default()
        }
    }

    /// All keys with their current values, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let v = |k: &str| -> String {
            match k {
                "seed" => self.seed.to_string(),
                "variant" => self.variant.to_string(),
                "d" => self.d.to_string(),
                "n_maps" => self.n_maps.to_string(),
                "latent_dim" => self.latent_dim.to_string(),
                "likelihood_sigma" => self.likelihood_sigma.to_string(),
                "dataset" => self.dataset.to_string(),
                "data_dir" => self.data_dir.display().to_string(),
                "out" => self.out.display().to_string(),
                "train_limit" => self.train_limit.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "learning_rate" => self.learning_rate.to_string(),
                "beta1" => self.beta1.to_string(),
                "beta2" => self.beta2.to_string(),
                "adam_eps" => self.adam_eps.to_string(),
                "checkpoint_every" => self.checkpoint_every.to_string(),
                "grid_rows" => self.grid_rows.to_string(),
                "count" => self.count.to_string(),
                "n_model_samples" => self.n_model_samples.to_string(),
                "n_test" => self.n_test.to_string(),
                "n_generate" => self.n_generate.to_string(),
                _ => unreachable!("KEYS lists every field"),
            }
        };
        Self::KEYS.iter().map(|k| format!("{k}={}\n", v(k))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# fixture\nseed = 5\nepochs=3\nvariant = mvn\n", "fixture")
            .unwrap();
        // flag layer
        cfg.set("seed", "9").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.variant, VariantKind::MvnSpatial);
        assert_eq!(cfg.batch_size, 64);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("variant", "original").unwrap();
        cfg.set("learning_rate", "0.0005").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text(), "dump").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_name_the_line() {
        let mut cfg = RunConfig::default();
        let e = cfg.apply_text("seed=1\nbogus=2\n", "f.cfg").unwrap_err();
        assert!(e.starts_with("f.cfg:2:"), "{e}");
        let e = cfg.apply_text("epochs=many\n", "f.cfg").unwrap_err();
        assert!(e.contains("epochs"), "{e}");
        assert!(cfg.apply_text("no equals sign\n", "f.cfg").is_err());
    }

    #[test]
    fn original_head_width() {
        let mut cfg = RunConfig::default();
        cfg.set("variant", "original").unwrap();
        assert_eq!(cfg.model_config().unwrap().head_width(), 162);
    }
}
