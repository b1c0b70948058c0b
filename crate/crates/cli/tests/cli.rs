use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use clap::Parser;
use must_cli::commands::{write_fixture, CHECKPOINT_FILE, HEATMAPS_FILE, METRICS_FILE};
use must_cli::{execute, run, Cli, CliError};
use must_core::data_io::{load_png, read_metrics, MetricsRecord};
use must_core::fixture::{build_fixture, FixtureConfig, PretrainConfig};
use must_core::model::ModelConfig;

struct Tiny {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

fn tiny() -> &'static Tiny {
    static TINY: OnceLock<Tiny> = OnceLock::new();
    TINY.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = FixtureConfig {
            image_size: 16,
            source_per_class: 6,
            target_train: 12,
            target_test: 9,
            model: ModelConfig {
                image_size: 16,
                patch_size: 4,
                embed_dim: 16,
                depth: 1,
                num_heads: 2,
                proj_dim: 8,
                num_classes: 3,
                logit_scale: 10.0,
            },
            pretrain: PretrainConfig { epochs: 1, batch_size: 6, ..PretrainConfig::default() },
            ..FixtureConfig::default()
        };
        let root = dir.path().join("fx");
        write_fixture(&build_fixture(&cfg).unwrap(), &root).unwrap();
        Tiny { _dir: dir, root }
    })
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn adapt_args(out: &Path, extra: &[&str]) -> Vec<String> {
    let root = &tiny().root;
    let mut args: Vec<String> = [
        "must",
        "adapt",
        "--manifest",
        &s(&root.join("manifest.tsv")),
        "--embeddings",
        &s(&root.join("embeddings.txt")),
        "--init-checkpoint",
        &s(&root.join("init.ckpt")),
        "--out",
        &s(out),
        "--batch-size",
        "4",
        "--base-lr",
        "1e-2",
    ]
    .iter()
    .map(|a| a.to_string())
    .collect();
    args.extend(extra.iter().map(|a| a.to_string()));
    args
}

fn execute_args(args: &[String]) -> Result<serde_json::Value, CliError> {
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    execute(cli.command)
}

fn test_images(n: usize) -> Vec<String> {
    (0..n).map(|i| s(&tiny().root.join(format!("test/{i:05}.png")))).collect()
}

#[test]
fn zero_epochs_is_a_zero_shot_evaluation() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run(adapt_args(out.path(), &["--epochs", "0"])), 0);
    let records = read_metrics(&out.path().join(METRICS_FILE)).unwrap();
    assert_eq!(records.len(), 2);
    assert!(matches!(records[0], MetricsRecord::Eval { step: 0, .. }));
    match &records[1] {
        MetricsRecord::Final { accuracy, zero_shot_accuracy, .. } => assert_eq!(accuracy, zero_shot_accuracy),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn exit_codes() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run(["must", "adapt", "--no-such-flag"]), 2);
    assert_eq!(run(["must", "adapt", "--epochs", "1"]), 2, "missing --out and --manifest");
    assert_eq!(run(adapt_args(out.path(), &["--threshold=-1"])), 2);
    assert_eq!(run(adapt_args(out.path(), &["--mode", "sideways"])), 2);
    let mut missing = adapt_args(out.path(), &[]);
    missing[3] = s(&out.path().join("absent.tsv"));
    assert_eq!(run(missing), 1);
    assert_eq!(run(["must", "--help"]), 0);
}

#[test]
fn config_file_uses_flag_names_and_flags_win() {
    let out = tempfile::tempdir().unwrap();
    let cfg = out.path().join("run.toml");
    fs::write(&cfg, "epochs = 2\nmask-ratio = 0.5\nlambda-align = 0.3\n").unwrap();
    let mut args = adapt_args(&out.path().join("a"), &["--epochs", "1"]);
    args.extend(["--config".to_string(), s(&cfg)]);
    let summary = execute_args(&args).unwrap();
    assert_eq!(summary["total_steps"], 3);

    fs::write(&cfg, "epoch = 2\n").unwrap();
    let mut args = adapt_args(&out.path().join("b"), &[]);
    args.extend(["--config".to_string(), s(&cfg)]);
    assert_eq!(run(args), 2);
}

#[test]
fn resume_with_changed_config_is_refused() {
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().join("run");
    execute_args(&adapt_args(&dir, &["--epochs", "2", "--max-steps", "2"])).unwrap();
    let ckpt = s(&dir.join(CHECKPOINT_FILE));
    let err = execute_args(&adapt_args(&dir, &["--epochs", "3", "--threshold", "0.5", "--resume", &ckpt])).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, CliError::Usage(_)));
    assert!(msg.contains("epochs") && msg.contains("threshold"), "{msg}");

    let done = execute_args(&adapt_args(&dir, &["--resume", &ckpt])).unwrap();
    assert_eq!(done["steps"], 6);
    assert_eq!(done["completed"], true);
}

#[test]
fn recover_dump_writes_triplets() {
    let out = tempfile::tempdir().unwrap();
    let ckpt = s(&tiny().root.join("init.ckpt"));
    let mut args = vec!["must".to_string(), "recover-dump".into(), "--checkpoint".into(), ckpt.clone()];
    args.extend(["--out".into(), s(out.path()), "--mask-ratio".into(), "0.5".into()]);
    args.extend(test_images(3));
    assert_eq!(run(&args), 0);
    let mut files: Vec<_> = fs::read_dir(out.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert_eq!(files.len(), 9);
    let masked = load_png(&out.path().join("000_00000_masked.png")).unwrap();
    assert!(masked.data().iter().any(|&v| v == 128.0 / 255.0));
    let recovered = load_png(&out.path().join("000_00000_recovered.png")).unwrap();
    assert!(recovered.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let zero = tempfile::tempdir().unwrap();
    let mut args = vec!["must".to_string(), "recover-dump".into(), "--checkpoint".into(), ckpt];
    args.extend(["--out".into(), s(zero.path()), "--mask-ratio".into(), "0".into()]);
    args.extend(test_images(1));
    assert_eq!(run(&args), 0);
    let read = |name: &str| fs::read(zero.path().join(name)).unwrap();
    assert_eq!(read("000_00000_original.png"), read("000_00000_recovered.png"));
}

fn attention(checkpoint: &Path, out: &Path, n: usize) -> Vec<Vec<f64>> {
    let mut args = vec!["must".to_string(), "attention-dump".into(), "--checkpoint".into(), s(checkpoint)];
    args.extend(["--out".into(), s(out)]);
    args.extend(test_images(n));
    assert_eq!(run(&args), 0);
    let maps: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(HEATMAPS_FILE)).unwrap()).unwrap();
    let maps = maps.as_array().unwrap();
    assert_eq!(maps.len(), n);
    maps.iter()
        .map(|m| {
            assert_eq!(m["grid"], 4);
            assert!(out.join(m["overlay"].as_str().unwrap()).exists());
            m["values"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect()
        })
        .collect()
}

#[test]
fn attention_dump_tracks_adaptation() {
    let out = tempfile::tempdir().unwrap();
    let before = attention(&tiny().root.join("init.ckpt"), &out.path().join("before"), 3);
    assert!(before.iter().all(|v| v.len() == 16));

    let run_dir = out.path().join("run");
    execute_args(&adapt_args(&run_dir, &["--epochs", "2", "--threshold", "0"])).unwrap();
    let after = attention(&run_dir.join(CHECKPOINT_FILE), &out.path().join("after"), 3);
    let l1: f64 = before.iter().flatten().zip(after.iter().flatten()).map(|(a, b)| (a - b).abs()).sum();
    assert!(l1 > 0.0);
}

#[test]
fn transductive_writes_inferred_labels() {
    let out = tempfile::tempdir().unwrap();
    let summary = execute_args(&adapt_args(out.path(), &["--epochs", "1", "--mode", "transductive"])).unwrap();
    assert_eq!(summary["mode"], "transductive");
    let labels = fs::read_to_string(out.path().join("inferred_labels.tsv")).unwrap();
    assert_eq!(labels.lines().count(), 9);
    assert!(labels.lines().all(|l| ["circle", "square", "triangle"].contains(&l.split('\t').nth(1).unwrap())));
}
