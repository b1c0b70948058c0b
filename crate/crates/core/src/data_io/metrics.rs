use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, MustError, Result};
use crate::losses::LossBreakdown;

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricsRecord {
    Step {
        step: u64,
        epoch: u64,
        lr: f64,
        #[serde(flatten)]
        loss: LossBreakdown,
    },
    Eval {
        step: u64,
        accuracy: f64,
        mean_per_class: f64,
        absent_classes: Vec<usize>,
    },
    Final {
        step: u64,
        accuracy: Option<f64>,
        mean_per_class: Option<f64>,
        teacher_accuracy: Option<f64>,
        zero_shot_accuracy: Option<f64>,
        clamp_warnings: u64,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        inferred_labels: Option<Vec<usize>>,
    },
}

impl MetricsRecord {
    pub fn step(&self) -> u64 {
        match self {
            MetricsRecord::Step { step, .. } | MetricsRecord::Eval { step, .. } | MetricsRecord::Final { step, .. } => *step,
        }
    }
}

/// Append-only JSON-lines writer that refuses records going back in step.
#[derive(Debug)]
pub struct MetricsLogger {
    file: File,
    last_step: Option<u64>,
}

impl MetricsLogger {
    /// Opens `path` for appending; existing records set the step floor.
    pub fn open(path: &Path) -> Result<Self> {
        let last_step = if path.exists() { read_metrics(path)?.last().map(MetricsRecord::step) } else { None };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file, last_step })
    }

    pub fn log(&mut self, record: &MetricsRecord) -> Result<()> {
        if let Some(last) = self.last_step {
            if record.step() < last {
                return Err(invalid_input(format!("metrics step {} precedes {last}", record.step())));
            }
        }
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        self.last_step = Some(record.step());
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| MustError::Parse { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}
