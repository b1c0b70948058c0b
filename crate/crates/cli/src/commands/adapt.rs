use std::fs;
use std::path::{Path, PathBuf};

use must_core::data_io::{
    load_checkpoint, load_dataset, read_metrics, save_checkpoint, Checkpoint, Dataset, MetricsLogger, MetricsRecord,
    Split,
};
use must_core::trainer::{adapt, AdaptData, AdaptHooks, EvalReport, Mode, TrainConfig, Trainer};
use must_core::zeroshot::{build_head, load_class_embeddings, ClassEmbeddings};
use must_core::{LossBreakdown, MustError, Vit};
use serde::Serialize;

use crate::config::AdaptOptions;
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LABELS_FILE: &str = "inferred_labels.tsv";

/// Written to `summary.json` and printed at the end of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptSummary {
    pub mode: Mode,
    pub steps: u64,
    pub total_steps: u64,
    pub completed: bool,
    pub zero_shot_accuracy: Option<f64>,
    pub accuracy: Option<f64>,
    pub mean_per_class: Option<f64>,
    pub teacher_accuracy: Option<f64>,
    pub clamp_warnings: u64,
    pub checkpoint: PathBuf,
}

struct RunHooks<'a> {
    metrics: MetricsLogger,
    checkpoint: &'a Path,
    class_names: &'a [String],
}

impl AdaptHooks for RunHooks<'_> {
    fn on_step(&mut self, trainer: &Trainer, lr: f64, loss: &LossBreakdown) -> must_core::Result<()> {
        self.metrics.log(&MetricsRecord::Step {
            step: trainer.step,
            epoch: (trainer.step - 1) / trainer.steps_per_epoch,
            lr,
            loss: *loss,
        })
    }

    fn on_eval(&mut self, trainer: &Trainer, report: &EvalReport) -> must_core::Result<()> {
        self.metrics.log(&eval_record(trainer.step, report))
    }

    fn on_epoch_end(&mut self, trainer: &Trainer, _epoch: u64) -> must_core::Result<()> {
        save_checkpoint(&Checkpoint::from_trainer(trainer, self.class_names), self.checkpoint)
    }
}

fn eval_record(step: u64, r: &EvalReport) -> MetricsRecord {
    MetricsRecord::Eval {
        step,
        accuracy: r.accuracy,
        mean_per_class: r.mean_per_class,
        absent_classes: r.absent_classes.clone(),
    }
}

/// Embeddings reordered to the manifest's class order.
fn embeddings_for(ds: &Dataset, path: &Path) -> Result<Vec<ClassEmbeddings>, CliError> {
    let mut table = load_class_embeddings(path)?;
    if table.len() != ds.num_classes() {
        return Err(CliError::Usage(format!(
            "{} has {} classes but the manifest declares {}",
            path.display(),
            table.len(),
            ds.num_classes()
        )));
    }
    ds.class_names
        .iter()
        .map(|name| {
            let i = table.iter().position(|c| &c.name == name).ok_or_else(|| {
                CliError::Usage(format!("class `{name}` has no embedding in {}", path.display()))
            })?;
            Ok(table.swap_remove(i))
        })
        .collect()
}

fn usage_on_config(e: MustError) -> CliError {
    match e {
        MustError::InvalidConfig(msg) => CliError::Usage(msg),
        other => other.into(),
    }
}

fn fresh_trainer(opts: &AdaptOptions, ds: &Dataset, train_len: usize) -> Result<Trainer, CliError> {
    let init_path = AdaptOptions::required(&opts.init_checkpoint, "init-checkpoint")?;
    let emb_path = AdaptOptions::required(&opts.embeddings, "embeddings")?;
    let init = load_checkpoint(init_path)?;
    let mut model = init.model;
    model.num_classes = ds.num_classes();
    let vit = Vit::new(model)?;
    let mut params = init.params;
    vit.zero_params().check_same_structure(&params).map_err(|_| {
        CliError::Usage(format!(
            "{} was saved for {} classes but the manifest declares {}",
            init_path.display(),
            init.class_names.len(),
            ds.num_classes()
        ))
    })?;
    let head = build_head(&embeddings_for(ds, emb_path)?, vit.config().logit_scale)?;
    vit.install_head(&mut params, &head)?;
    let config = opts.train_config(TrainConfig::default());
    config.validate().map_err(usage_on_config)?;
    Trainer::new(vit, params, config, train_len).map_err(usage_on_config)
}

fn resumed_trainer(opts: &AdaptOptions, ds: &Dataset, path: &Path) -> Result<Trainer, CliError> {
    let ckpt = load_checkpoint(path)?;
    let saved = ckpt
        .training
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("{} holds no training state to resume", path.display())))?
        .config
        .clone();
    let requested = opts.train_config(saved.clone());
    let differing = requested.diff(&saved);
    if !differing.is_empty() {
        return Err(CliError::Usage(format!(
            "refusing to resume from {}: configuration differs in {}",
            path.display(),
            differing.join(", ")
        )));
    }
    if ckpt.class_names != ds.class_names {
        return Err(CliError::Usage(format!(
            "refusing to resume from {}: class names differ from the manifest",
            path.display()
        )));
    }
    Ok(ckpt.into_trainer()?)
}

/// Drops records past `step` left behind by an interrupted run, keeping the
/// surviving lines byte for byte; returns the zero-shot accuracy if the
/// run's initial evaluation is on record.
fn trim_metrics(path: &Path, step: u64) -> Result<Option<f64>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    let records = read_metrics(path)?;
    let text = fs::read_to_string(path).map_err(CliError::io(format!("reading {}", path.display())))?;
    let mut kept = String::new();
    let mut zero_shot = None;
    for (record, line) in records.iter().zip(text.lines().filter(|l| !l.trim().is_empty())) {
        if record.step() > step {
            continue;
        }
        if let MetricsRecord::Eval { step: 0, accuracy, .. } = record {
            zero_shot = Some(*accuracy);
        }
        kept.push_str(line);
        kept.push('\n');
    }
    fs::write(path, kept).map_err(CliError::io(format!("rewriting {}", path.display())))?;
    Ok(zero_shot)
}

/// `must adapt`: adapts the zero-shot model on the manifest's images.
pub fn cmd_adapt(opts: &AdaptOptions) -> Result<AdaptSummary, CliError> {
    let out = AdaptOptions::required(&opts.out, "out")?;
    let manifest = AdaptOptions::required(&opts.manifest, "manifest")?;
    fs::create_dir_all(out).map_err(CliError::io(format!("creating {}", out.display())))?;
    let ds = load_dataset(manifest)?;
    let train = ds.load_split(Split::Train)?;
    let (test, test_labels) = ds.load_labeled(Split::Test)?;
    let mode = opts.mode.unwrap_or(Mode::Standard);
    let train_len = match mode {
        Mode::Standard => train.len(),
        Mode::Transductive => test.len(),
    };

    let metrics_path = out.join(METRICS_FILE);
    let checkpoint_path = out.join(CHECKPOINT_FILE);
    let (mut trainer, mut zero_shot) = match &opts.resume {
        Some(path) => {
            let t = resumed_trainer(opts, &ds, path)?;
            let zs = trim_metrics(&metrics_path, t.step)?;
            (t, zs)
        }
        None => {
            let t = fresh_trainer(opts, &ds, train_len)?;
            if metrics_path.exists() {
                fs::remove_file(&metrics_path).map_err(CliError::io(format!("removing {}", metrics_path.display())))?;
            }
            (t, None)
        }
    };

    let data = AdaptData { train: &train, test: &test, test_labels: &test_labels };
    let mut hooks = RunHooks {
        metrics: MetricsLogger::open(&metrics_path)?,
        checkpoint: &checkpoint_path,
        class_names: &ds.class_names,
    };
    let report = adapt(&mut trainer, &data, opts.max_steps, &mut hooks)?;
    save_checkpoint(&Checkpoint::from_trainer(&trainer, &ds.class_names), &checkpoint_path)?;
    if let Some(r) = &report.initial {
        zero_shot = Some(r.accuracy);
    }

    let completed = trainer.step >= trainer.total_steps();
    let accuracy = report.final_eval.as_ref().map(|r| r.accuracy);
    let mean_per_class = report.final_eval.as_ref().map(|r| r.mean_per_class);
    let teacher_accuracy = report.teacher_final.as_ref().map(|r| r.accuracy);
    if completed {
        hooks.metrics.log(&MetricsRecord::Final {
            step: trainer.step,
            accuracy,
            mean_per_class,
            teacher_accuracy,
            zero_shot_accuracy: zero_shot,
            clamp_warnings: trainer.clamp_warnings,
            inferred_labels: report.inferred_labels.clone(),
        })?;
    }
    if let Some(labels) = &report.inferred_labels {
        let mut text = String::new();
        for (entry, &y) in ds.entries(Split::Test).iter().filter(|e| e.label.is_some()).zip(labels) {
            text.push_str(&format!("{}\t{}\n", entry.path.display(), ds.class_names[y]));
        }
        let path = out.join(LABELS_FILE);
        fs::write(&path, text).map_err(CliError::io(format!("writing {}", path.display())))?;
    }

    let summary = AdaptSummary {
        mode: trainer.config().mode,
        steps: trainer.step,
        total_steps: trainer.total_steps(),
        completed,
        zero_shot_accuracy: zero_shot,
        accuracy,
        mean_per_class,
        teacher_accuracy,
        clamp_warnings: trainer.clamp_warnings,
        checkpoint: checkpoint_path,
    };
    let path = out.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&path, json + "\n").map_err(CliError::io(format!("writing {}", path.display())))?;
    Ok(summary)
}
