use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use svae_core::train::TimingLine;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset")
}

fn svae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svae"))
        .args(args)
        .arg("--data-dir")
        .arg(data_dir())
        .output()
        .expect("spawn svae")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--out",
        out.to_str().unwrap(),
        "--epochs",
        "1",
        "--limit",
        "128",
        "--batch-size",
        "32",
        "--n-maps",
        "4",
    ];
    args.extend_from_slice(extra);
    svae(&args)
}

#[test]
fn train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = small_train(dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "run.log",
        "run.cfg",
        "samples_epoch_001.png",
        "svae_epoch_001.ckpt",
        "svae_final.ckpt",
    ] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let log = std::fs::read_to_string(dir.path().join("run.log")).unwrap();
    assert!(log.starts_with("model variant=lowrank-mvn"), "{log}");
    assert!(log.contains("epoch=1 mean_elbo="), "{log}");
}

#[test]
fn original_variant_reports_head_width_162() {
    let dir = tempfile::tempdir().unwrap();
    let o = small_train(dir.path(), &["--variant", "original", "--latent-dim", "81"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("head_width=162"), "{}", stdout(&o));
}

#[test]
fn missing_dataset_is_exit_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-data");
    let o = Command::new(env!("CARGO_BIN_EXE_svae"))
        .args(["train", "--out"])
        .arg(dir.path())
        .arg("--data-dir")
        .arg(&missing)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no-such-data"), "{}", stderr(&o));
}

#[test]
fn bad_flag_value_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = small_train(dir.path(), &["--variant", "gan"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--variant"), "{}", stderr(&o));
}

#[test]
fn generate_writes_one_square_grid_and_timing_line() {
    let dir = tempfile::tempdir().unwrap();
    assert!(small_train(dir.path(), &[]).status.success());
    let out = dir.path().to_str().unwrap();
    let o = svae(&[
        "generate", "--out", out, "--n-maps", "4", "--count", "64", "--rows", "8",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let img = svae_core::data::read_png(&dir.path().join("samples.png")).unwrap();
    let grid = 8 * 28 + 7 * svae_core::data::GRID_SEPARATOR;
    assert_eq!(img.shape(), &[1, 1, grid, grid]);

    let line = stdout(&o)
        .lines()
        .find(|l| l.starts_with("timing "))
        .unwrap()
        .to_string();
    let t: TimingLine = line.parse().unwrap();
    assert_eq!((t.op.as_str(), t.count), ("generate", 64));
    assert_eq!(t.variant.name(), "lowrank-mvn");
    assert!(t.seconds >= 0.0);
}

#[test]
fn generate_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    assert!(small_train(dir.path(), &[]).status.success());
    let ckpt = dir.path().join("svae_final.ckpt");
    let mut pngs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = svae(&[
            "generate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--count",
            "16",
            "--rows",
            "4",
            "--seed",
            "3",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        pngs.push(std::fs::read(out.join("samples.png")).unwrap());
    }
    assert_eq!(pngs[0], pngs[1]);
}

#[test]
fn generate_splits_large_counts_across_grids() {
    let dir = tempfile::tempdir().unwrap();
    assert!(small_train(dir.path(), &[]).status.success());
    let out = dir.path().to_str().unwrap();
    let o = svae(&[
        "generate", "--out", out, "--n-maps", "4", "--count", "20", "--rows", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..3 {
        assert!(dir.path().join(format!("samples_{i:04}.png")).is_file());
    }
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"SVAE1\nnot a header").unwrap();
    let o = svae(&[
        "generate",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.ckpt"), "{}", stderr(&o));
}

#[test]
fn check_passes_and_lists_suites() {
    let o = svae(&["check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    let passes = text.lines().filter(|l| l.contains(" PASS ")).count();
    assert!(passes >= 6, "{text}");
    assert!(text.contains("0 failed"), "{text}");
}

#[test]
fn corrupted_gradient_fails_check() {
    let o = svae(&["check", "--corrupt-gradient"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    let failing: Vec<&str> = text.lines().filter(|l| l.contains(" FAIL ")).collect();
    assert_eq!(failing.len(), 1, "{text}");
    assert!(failing[0].starts_with("gradients"), "{text}");
}

#[test]
fn divergence_is_exit_3_with_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = svae(&[
        "train",
        "--out",
        dir.path().to_str().unwrap(),
        "--epochs",
        "3",
        "--limit",
        "128",
        "--n-maps",
        "4",
        "--learning-rate",
        "1e6",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(dir.path().join("svae_last_good.ckpt").is_file());
    assert!(!dir.path().join("svae_final.ckpt").exists());
}

#[test]
fn eval_parzen_appends_a_record() {
    let dir = tempfile::tempdir().unwrap();
    assert!(small_train(dir.path(), &[]).status.success());
    let out = dir.path().to_str().unwrap();
    let o = svae(&[
        "eval-parzen",
        "--out",
        out,
        "--n-maps",
        "4",
        "--n-samples",
        "200",
        "--n-test",
        "20",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(dir.path().join("run.log")).unwrap();
    let rec = log.lines().last().unwrap();
    assert!(rec.starts_with("parzen chosen_sigma="), "{rec}");
    assert!(rec.contains("n_test=20 n_model_samples=200"), "{rec}");
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "variant = naive\nn_maps = 2\nepochs = 1\ntrain_limit = 64\nbatch_size = 32\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = svae(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--n-maps",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("variant=naive"), "{text}");
    assert!(text.contains("n_maps=3"), "{text}");
}

#[test]
fn generate_timing_line_matches_bench_format() {
    let dir = tempfile::tempdir().unwrap();
    assert!(small_train(dir.path(), &[]).status.success());
    let out = dir.path().to_str().unwrap();
    let g = svae(&[
        "generate", "--out", out, "--n-maps", "4", "--count", "10000", "--rows", "100",
    ]);
    assert!(g.status.success(), "{}", stderr(&g));
    let b = svae(&[
        "bench",
        "--n-maps",
        "4",
        "--limit",
        "64",
        "--batch-size",
        "32",
        "--n-generate",
        "50",
    ]);
    assert!(b.status.success(), "{}", stderr(&b));

    let timing = |o: &Output| -> Vec<TimingLine> {
        stdout(o)
            .lines()
            .filter(|l| l.starts_with("timing "))
            .map(|l| l.parse().unwrap())
            .collect()
    };
    let from_generate = timing(&g);
    assert_eq!(from_generate.len(), 1);
    assert_eq!(from_generate[0].count, 10_000);
    let from_bench = timing(&b);
    let bench_gen: Vec<&TimingLine> = from_bench.iter().filter(|t| t.op == "generate").collect();
    assert_eq!(bench_gen.len(), 4);
    assert!(from_bench.iter().any(|t| t.op == "train_epoch"));
    let same_variant = bench_gen
        .iter()
        .find(|t| t.variant == from_generate[0].variant)
        .unwrap();
    let shape = |t: &TimingLine| {
        t.to_string()
            .split_whitespace()
            .map(|f| f.split('=').next().unwrap().to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(shape(same_variant), shape(&from_generate[0]));
}
