use std::fs;
use std::path::Path;
use std::process::Command;

use caw_cli::checkpoint::Checkpoint;
use caw_cli::commands::{self, TrainOptions, CONCEPT_CKPT, MODEL_CKPT, TRAIN_LOG};
use caw_cli::dataset::{manifest_hash, Dataset, SplitName};
use caw_cli::{CliError, ExperimentConfig};
use caw_core::mask::MaskMode;
use tempfile::TempDir;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.num_samples = 160;
    cfg.concept.samples_per_concept = 20;
    cfg.concept.epochs = 3;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 16;
    cfg.train.update_period = Some(3);
    cfg.eval.importance_repeats = 3;
    cfg
}

fn with_data(cfg: &ExperimentConfig) -> TempDir {
    let dir = TempDir::new().unwrap();
    commands::gen_data(cfg, &dir.path().join("data")).unwrap();
    dir
}

fn caw() -> Command {
    Command::new(env!("CARGO_BIN_EXE_caw"))
}

#[test]
fn default_generation_splits_seventy_fifteen_fifteen() {
    let cfg = ExperimentConfig::default();
    let dir = TempDir::new().unwrap();
    let s = commands::gen_data(&cfg, dir.path()).unwrap();
    assert_eq!(
        (s.num_samples, s.train, s.val, s.test),
        (3000, 2100, 450, 450)
    );
    for split in ["train", "val", "test"] {
        assert!(dir.path().join(split).is_dir());
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let cfg = small_config();
    let (a, b, c) = (
        TempDir::new().unwrap(),
        TempDir::new().unwrap(),
        TempDir::new().unwrap(),
    );
    commands::gen_data(&cfg, a.path()).unwrap();
    commands::gen_data(&cfg, b.path()).unwrap();
    let other = ExperimentConfig { seed: 9, ..cfg };
    commands::gen_data(&other, c.path()).unwrap();
    let (ha, hb, hc) = (
        manifest_hash(a.path()).unwrap(),
        manifest_hash(b.path()).unwrap(),
        manifest_hash(c.path()).unwrap(),
    );
    assert_eq!(ha, hb);
    assert_ne!(ha, hc);
}

#[test]
fn single_sample_dataset_round_trips() {
    let mut cfg = ExperimentConfig::default();
    cfg.data.num_samples = 1;
    let dir = TempDir::new().unwrap();
    commands::gen_data(&cfg, dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    let fresh = Dataset::synthesize(&cfg.synth_spec(), 1, cfg.data.fractions).unwrap();
    assert_eq!(ds.samples, fresh.samples);
    assert_eq!(ds.manifest, fresh.manifest);
}

#[test]
fn zero_epoch_checkpoint_loads_and_round_trips() {
    let mut cfg = small_config();
    cfg.train.epochs = 0;
    let dir = with_data(&cfg);
    let out = dir.path().join("run");
    commands::train(
        &cfg,
        &dir.path().join("data"),
        &out,
        &TrainOptions::default(),
    )
    .unwrap();
    for name in [CONCEPT_CKPT, MODEL_CKPT] {
        let path = out.join(name);
        let bytes = fs::read(&path).unwrap();
        let ckpt = Checkpoint::load(&path).unwrap();
        ckpt.to_net::<f32>().unwrap();
        let again = out.join(format!("{name}.again"));
        ckpt.save(&again).unwrap();
        assert_eq!(fs::read(&again).unwrap(), bytes);
    }
    assert_eq!(
        fs::read_to_string(out.join(TRAIN_LOG)).unwrap(),
        "step,ce_loss,align_objective,ortho_residual\n"
    );
}

#[test]
fn eval_is_repeatable_and_refuses_other_architectures() {
    let cfg = small_config();
    let dir = with_data(&cfg);
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    commands::train(&cfg, &data, &out, &TrainOptions::default()).unwrap();
    let ckpt = out.join(MODEL_CKPT);
    let first = commands::eval(&cfg, &data, &ckpt, &out).unwrap();
    let bytes = fs::read(out.join(commands::METRICS_JSON)).unwrap();
    let second = commands::eval(&cfg, &data, &ckpt, &out).unwrap();
    assert_eq!(first, second);
    assert_eq!(fs::read(out.join(commands::METRICS_JSON)).unwrap(), bytes);
    assert_eq!(first.per_concept.len(), 4);
    assert_eq!(first.config_hash, cfg.hash());

    let json: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    for key in [
        "per_concept",
        "mean_auc",
        "acc",
        "f1",
        "seed",
        "config_hash",
    ] {
        assert!(json.get(key).is_some(), "missing {key}");
    }

    let mut wider = cfg.clone();
    wider.net.hidden_channels += 1;
    assert!(matches!(
        commands::eval(&wider, &data, &ckpt, &out),
        Err(CliError::Checkpoint(_))
    ));
}

#[test]
fn checkpoint_version_mismatch_is_refused() {
    let cfg = small_config();
    let dir = TempDir::new().unwrap();
    let net = caw_core::nn::init_main_net::<f32>(&cfg.net_config(), &cfg.train_config()).unwrap();
    let ckpt = Checkpoint::from_net(
        caw_cli::checkpoint::CheckpointKind::Model,
        &net,
        &cfg,
        &Default::default(),
    );
    let path = dir.path().join("m.ckpt");
    let text = ckpt
        .to_json()
        .replacen("\"format_version\":1", "\"format_version\":99", 1);
    fs::write(&path, text).unwrap();
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(matches!(err, CliError::Checkpoint(_)));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn resumed_training_continues_the_loss_trace() {
    let mut cfg = small_config();
    cfg.train.epochs = 4;
    let dir = with_data(&cfg);
    let data = dir.path().join("data");
    let straight = dir.path().join("straight");
    commands::train(&cfg, &data, &straight, &TrainOptions::default()).unwrap();

    let split = dir.path().join("split");
    let half = ExperimentConfig {
        train: caw_cli::config::TrainSection {
            epochs: 2,
            ..cfg.train.clone()
        },
        ..cfg.clone()
    };
    commands::train(&half, &data, &split, &TrainOptions::default()).unwrap();
    let summary = commands::train(
        &cfg,
        &data,
        &split,
        &TrainOptions {
            resume: Some(split.join(MODEL_CKPT)),
            lesion: None,
        },
    )
    .unwrap();
    assert_eq!(summary.epochs_done, 4);

    let losses = |p: &Path| -> Vec<f64> {
        fs::read_to_string(p.join(TRAIN_LOG))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect()
    };
    let (a, b) = (losses(&straight), losses(&split));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 0.1 * x.abs(), "{x} vs {y}");
    }
}

#[test]
fn single_gamma_sweep_matches_train_then_eval() {
    let cfg = small_config();
    let dir = with_data(&cfg);
    let data = dir.path().join("data");
    let rows = commands::sweep_threshold(&cfg, &data, dir.path(), &[cfg.train.gamma]).unwrap();
    assert_eq!(rows.len(), 1);
    let out = dir.path().join("run");
    commands::train(&cfg, &data, &out, &TrainOptions::default()).unwrap();
    let report = commands::eval(&cfg, &data, &out.join(MODEL_CKPT), &out).unwrap();
    assert_eq!(rows[0].disease_auc, report.disease_auc);
    assert_eq!(rows[0].concept_auc, report.mean_auc);
    let csv = fs::read_to_string(dir.path().join(commands::SWEEP_CSV)).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "gamma,disease_auc,concept_auc");

    assert!(matches!(
        commands::sweep_threshold(&cfg, &data, dir.path(), &[]),
        Err(CliError::Usage(_))
    ));
}

#[test]
fn importance_and_explain_outputs() {
    let cfg = small_config();
    let dir = with_data(&cfg);
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    commands::train(&cfg, &data, &out, &TrainOptions::default()).unwrap();
    let ckpt = out.join(MODEL_CKPT);

    let imp = commands::importance(&cfg, &data, &ckpt, &out).unwrap();
    assert_eq!(imp.per_concept.len(), 4);
    let mut rank = imp.rank.clone();
    rank.sort_unstable();
    assert_eq!(rank, vec![0, 1, 2, 3]);
    assert!(imp
        .per_concept
        .iter()
        .all(|e| e.mean > 0.0 && e.std_err >= 0.0));

    let ds = Dataset::load(&data).unwrap();
    let i = ds.indices(SplitName::Test)[0];
    let image = data.join(&ds.manifest.samples[i].image);
    let a = commands::explain(&ckpt, &image, &out.join("a")).unwrap();
    let b = commands::explain(&ckpt, &image, &out.join("b")).unwrap();
    assert_eq!(a.scores.len(), 4);
    assert_eq!(a.maps.len(), 4);
    assert_eq!(a.scores, b.scores);
    for m in &a.maps {
        assert_eq!(
            fs::read(out.join("a").join(m)).unwrap(),
            fs::read(out.join("b").join(m)).unwrap()
        );
    }

    let bad = dir.path().join("bad.ppm");
    fs::write(&bad, b"P6\n2 2\n255\n").unwrap();
    assert!(commands::explain(&ckpt, &bad, &out).is_err());
}

#[test]
fn lesion_mode_reads_external_masks() {
    let mut cfg = small_config();
    cfg.train.mask_mode = MaskMode::Lesion;
    let dir = with_data(&cfg);
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    assert!(matches!(
        commands::train(&cfg, &data, &out, &TrainOptions::default()),
        Err(CliError::Usage(_))
    ));
    let opts = TrainOptions {
        resume: None,
        lesion: Some(data.clone()),
    };
    let s = commands::train(&cfg, &data, &out, &opts).unwrap();
    assert_eq!(s.epochs_done, 2);
}

#[test]
fn binary_reports_exit_codes() {
    let dir = TempDir::new().unwrap();
    let status = caw().args(["no-such-command"]).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, r#"{"seed": 1, "bogus": true}"#).unwrap();
    let status = caw()
        .arg("--config")
        .arg(&cfg_path)
        .arg("config")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    let status = caw()
        .args(["--out"])
        .arg(dir.path())
        .args(["eval", "--data"])
        .arg(dir.path().join("missing"))
        .args(["--checkpoint"])
        .arg(dir.path().join("missing.ckpt"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));

    let out = caw()
        .args([
            "--seed",
            "7",
            "--gamma",
            "0.3",
            "--mask-mode",
            "raw",
            "config",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg: ExperimentConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(
        (cfg.seed, cfg.train.gamma, cfg.train.mask_mode),
        (7, 0.3, MaskMode::Raw)
    );

    let status = caw().args(["--gamma", "1.5", "config"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn binary_generates_data() {
    let dir = TempDir::new().unwrap();
    let out = caw()
        .arg("--out")
        .arg(dir.path())
        .args(["gen-data", "--n", "5"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ds = Dataset::load(dir.path()).unwrap();
    assert_eq!(ds.samples.len(), 5);
}
