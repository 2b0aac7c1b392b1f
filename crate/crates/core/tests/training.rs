use std::path::Path;

use svae_core::data::{load_mnist_idx, Dataset};
use svae_core::latent::VariantKind;
use svae_core::model::{Model, ModelConfig};
use svae_core::train::{adam_step, train, AdamConfig, AdamState, TrainConfig, Trainer};
use svae_core::Tensor;

fn mnist_head(n: usize) -> Dataset {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset");
    load_mnist_idx(&dir.join("train-images-idx3-ubyte.gz"), None)
        .unwrap()
        .slice(0..n)
        .unwrap()
}

#[test]
fn adam_finds_quadratic_minimum() {
    // f(x) = (x - 1.5)^2, minimum at 1.5.
    let cfg = AdamConfig {
        learning_rate: 0.2,
        betas: (0.5, 0.99),
        eps: 1e-8,
    };
    let mut x = Tensor::new(&[1], vec![0.0]).unwrap();
    let mut state = AdamState::new();
    for _ in 0..100 {
        let g = 2.0 * (x.data()[0] - 1.5);
        x.grad = Some(vec![g]);
        adam_step([&mut x], &mut state, &cfg).unwrap();
    }
    assert!((x.data()[0] - 1.5).abs() < 1e-6, "{}", x.data()[0]);
    assert_eq!(state.step, 100);
}

#[test]
fn small_model_elbo_rises_and_kl_leaves_zero() {
    let data = mnist_head(200);
    let cfg = ModelConfig::mnist(VariantKind::LowRankMvnSpatial, 3, 4, 36).unwrap();
    let model = Model::new(cfg, 11).unwrap();
    let tcfg = TrainConfig {
        epochs: 3,
        batch_size: 20,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let out = train(model, &data, &tcfg).unwrap();
    assert!(out.aborted.is_none());
    let elbo: Vec<f64> = out.reports.iter().map(|r| r.mean_elbo).collect();
    assert!(elbo.windows(2).all(|w| w[1] > w[0]), "{elbo:?}");
    assert!(out.reports[0].mean_kl > 0.0);
    for r in &out.reports {
        assert!((r.mean_elbo - (r.mean_recon - r.mean_kl)).abs() < 1e-9);
    }
}

#[test]
fn every_variant_trains_deterministically() {
    let data = mnist_head(40);
    let tcfg = TrainConfig {
        epochs: 1,
        batch_size: 20,
        seed: 12,
        ..TrainConfig::default()
    };
    for v in VariantKind::ALL {
        let cfg = ModelConfig::mnist(v, 3, 2, 18).unwrap();
        let a = train(Model::new(cfg.clone(), 13).unwrap(), &data, &tcfg).unwrap();
        let b = train(Model::new(cfg, 13).unwrap(), &data, &tcfg).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes(), "{v}");
        let (ra, rb): (Vec<String>, Vec<String>) = (
            a.reports.iter().map(|r| r.record()).collect(),
            b.reports.iter().map(|r| r.record()).collect(),
        );
        assert_eq!(ra, rb, "{v}");
    }
}

#[test]
fn resumed_step_equals_uninterrupted_step() {
    let data = mnist_head(40);
    let tcfg = TrainConfig {
        epochs: 2,
        batch_size: 20,
        seed: 14,
        ..TrainConfig::default()
    };
    let cfg = ModelConfig::mnist(VariantKind::MvnSpatial, 3, 2, 18).unwrap();
    let straight = train(Model::new(cfg.clone(), 15).unwrap(), &data, &tcfg).unwrap();

    let mut first = Trainer::new(
        Model::new(cfg, 15).unwrap(),
        TrainConfig {
            epochs: 1,
            ..tcfg.clone()
        },
    )
    .unwrap();
    first.run_epoch(&data).unwrap();
    let bytes = first.checkpoint().to_bytes();
    let ckpt = svae_core::model::Checkpoint::from_bytes(&bytes, "memory").unwrap();
    let mut resumed = Trainer::resume(&ckpt, tcfg).unwrap();
    resumed.run_epoch(&data).unwrap();
    assert_eq!(resumed.checkpoint().to_bytes(), straight.checkpoint.to_bytes());
}
