use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use svae_core::data::{load_cifar10, load_image_folder, load_mnist_idx, save_png_grid, Dataset, Split};
use svae_core::eval::evaluate_parzen;
use svae_core::latent::VariantKind;
use svae_core::model::{Checkpoint, Model};
use svae_core::rng::{derive_seed, seeded};
use svae_core::selfcheck::{render_table, run_all, CheckOptions};
use svae_core::train::{self as training, TimingLine};
use svae_core::{SvaeError, Tensor};

use crate::config::{DatasetKind, RunConfig};
use crate::Failure;

const INIT_STREAM: u64 = 0x1417;
const GRID_STREAM: u64 = 0x6715;
const GENERATE_STREAM: u64 = 0x6e4e;

fn io(path: &Path, e: std::io::Error) -> Failure {
    Failure::Usage(
        SvaeError::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .to_string(),
    )
}

fn append_line(path: &Path, line: &str) -> Result<(), Failure> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io(path, e))?;
    writeln!(f, "{line}").map_err(|e| io(path, e))
}

fn mnist_file(dir: &Path, stem: &str) -> PathBuf {
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        gz
    } else {
        dir.join(stem)
    }
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset, Failure> {
    let dir = &cfg.data_dir;
    if !dir.is_dir() {
        return Err(io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let data = match cfg.dataset {
        DatasetKind::Mnist => {
            let prefix = if split == Split::Train { "train" } else { "t10k" };
            let images = mnist_file(dir, &format!("{prefix}-images-idx3-ubyte"));
            let labels = mnist_file(dir, &format!("{prefix}-labels-idx1-ubyte"));
            load_mnist_idx(&images, labels.exists().then_some(labels.as_path()))?
        }
        DatasetKind::Cifar10 => load_cifar10(dir, split)?,
        DatasetKind::Folder => {
            let all = load_image_folder(dir, 64)?;
            let (train, test) = all.split_validation(0.1)?;
            if split == Split::Train {
                train
            } else {
                Dataset {
                    split: Split::Test,
                    ..test
                }
            }
        }
    };
    if split == Split::Train && cfg.train_limit > 0 && cfg.train_limit < data.len() {
        return Ok(data.slice(0..cfg.train_limit)?);
    }
    Ok(data)
}

fn flatten(data: &Dataset) -> Result<Tensor, Failure> {
    Ok(data.images.clone().reshape(&[data.len(), data.image_numel()])?)
}

fn save_grids(images: &Tensor, rows: usize, out: &Path, stem: &str) -> Result<Vec<PathBuf>, Failure> {
    let rows = rows.max(1);
    let per = rows * rows;
    let n = images.shape()[0];
    let chunks: Vec<usize> = (0..n).step_by(per).collect();
    let mut written = Vec::new();
    for (i, &start) in chunks.iter().enumerate() {
        let idx: Vec<usize> = (start..(start + per).min(n)).collect();
        let grid_rows = rows.min(idx.len().div_ceil(rows));
        let path = if chunks.len() == 1 {
            out.join(format!("{stem}.png"))
        } else {
            out.join(format!("{stem}_{i:04}.png"))
        };
        save_png_grid(&images.gather_rows(&idx), grid_rows, &path)?;
        written.push(path);
    }
    Ok(written)
}

fn describe(model: &Model) -> String {
    let c = model.config();
    format!(
        "model variant={} d={} n_maps={} latent_dim={} latent_shape={:?} head_width={} params={} decoder_params={}",
        c.variant,
        c.d,
        c.n_maps,
        c.latent_dim,
        c.latent_shape(),
        c.head_width(),
        model.param_count(),
        model.decoder_param_count()
    )
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let model_cfg = cfg.model_config()?;
    let data = load_split(cfg, Split::Train)?;
    let out = &cfg.out;
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let model = Model::new(model_cfg, derive_seed(cfg.seed, &[INIT_STREAM]))?;

    let log = out.join("run.log");
    fs::write(&log, "").map_err(|e| io(&log, e))?;
    fs::write(out.join("run.cfg"), cfg.to_text()).map_err(|e| io(out, e))?;
    let header = describe(&model);
    println!("{header}");
    println!("data {} images from {}", data.len(), cfg.data_dir.display());
    append_line(&log, &header)?;

    let grid_count = cfg.grid_rows.max(1).pow(2);
    let tcfg = cfg.train_config();
    let mut io_error = None;
    let outcome = training::train_with(model, &data, &tcfg, |report, trainer| {
        let result = (|| -> Result<(), Failure> {
            println!("{report}");
            append_line(&log, &report.record())?;
            let mut rng = seeded(derive_seed(cfg.seed, &[GRID_STREAM]));
            let samples = trainer.model().generate(grid_count, 100, &mut rng)?;
            save_png_grid(
                &samples,
                cfg.grid_rows.max(1),
                &out.join(format!("samples_epoch_{:03}.png", report.epoch)),
            )?;
            if cfg.checkpoint_every > 0 && report.epoch % cfg.checkpoint_every == 0 {
                trainer
                    .checkpoint()
                    .save(&out.join(format!("svae_epoch_{:03}.ckpt", report.epoch)))?;
            }
            Ok(())
        })();
        result.map_err(|e| {
            let msg = match &e {
                Failure::Usage(m) | Failure::Diverged(m) => m.clone(),
                Failure::CheckFailed => "check failed".into(),
            };
            io_error = Some(e);
            SvaeError::Contract(msg)
        })
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => return Err(io_error.take().unwrap_or_else(|| e.into())),
    };
    if let Some(err) = outcome.aborted {
        let path = out.join("svae_last_good.ckpt");
        outcome.checkpoint.save(&path)?;
        append_line(&log, &format!("aborted reason={:?}", err.to_string()))?;
        return Err(Failure::Diverged(format!(
            "{err}; last good checkpoint saved to {}",
            path.display()
        )));
    }
    let final_path = out.join("svae_final.ckpt");
    outcome.checkpoint.save(&final_path)?;
    println!("wrote {}", final_path.display());
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<Model, Failure> {
    let path = checkpoint.unwrap_or_else(|| cfg.out.join("svae_final.ckpt"));
    Ok(Checkpoint::load(&path)?.to_model()?)
}

pub fn generate(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<(), Failure> {
    let model = load_model(cfg, checkpoint)?;
    fs::create_dir_all(&cfg.out).map_err(|e| io(&cfg.out, e))?;
    let mut rng = seeded(derive_seed(cfg.seed, &[GENERATE_STREAM]));
    let t0 = Instant::now();
    let images = model.generate(cfg.count, 100, &mut rng)?;
    let seconds = t0.elapsed().as_secs_f64();
    let written = save_grids(&images, cfg.grid_rows, &cfg.out, "samples")?;
    println!(
        "{}",
        TimingLine {
            op: "generate".into(),
            variant: model.variant(),
            count: cfg.count,
            seconds,
        }
    );
    println!("wrote {} grid(s) starting at {}", written.len(), written[0].display());
    Ok(())
}

pub fn eval_parzen(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<(), Failure> {
    let model = load_model(cfg, checkpoint)?;
    let train = load_split(cfg, Split::Train)?;
    let (_, valid) = train.split_validation(0.1)?;
    let test = load_split(cfg, Split::Test)?;
    let report = evaluate_parzen(&model, &flatten(&valid)?, &flatten(&test)?, &cfg.parzen_config())?;
    println!("{report}");
    println!("{}", report.record());
    fs::create_dir_all(&cfg.out).map_err(|e| io(&cfg.out, e))?;
    append_line(&cfg.out.join("run.log"), &report.record())
}

pub fn bench(cfg: &RunConfig) -> Result<(), Failure> {
    let data = load_split(cfg, Split::Train)?;
    let models = VariantKind::ALL
        .iter()
        .map(|&v| {
            let c = RunConfig {
                variant: v,
                ..cfg.clone()
            };
            Model::new(c.model_config()?, derive_seed(cfg.seed, &[INIT_STREAM]))
        })
        .collect::<svae_core::Result<Vec<_>>>()?;
    let rows = training::bench(&models, &data, &cfg.bench_config())?;
    println!(
        "{:<12} {:>6} {:>8} {:>14} {:>14}",
        "variant", "head", "dec_par", "epoch_s", "generate_s"
    );
    for r in &rows {
        println!(
            "{:<12} {:>6} {:>8} {:>14.4} {:>14.4}",
            r.variant.name(),
            r.head_width,
            r.decoder_params,
            r.train_epoch_seconds,
            r.generate_seconds
        );
    }
    for r in &rows {
        for line in r.timing_lines() {
            println!("{line}");
        }
    }
    Ok(())
}

pub fn check(cfg: &RunConfig, corrupt_gradient: bool) -> Result<(), Failure> {
    let results = run_all(&CheckOptions {
        seed: cfg.seed,
        corrupt_gradient,
    });
    print!("{}", render_table(&results));
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure::CheckFailed)
    }
}
