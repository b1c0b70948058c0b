use std::fs;
use std::path::{Path, PathBuf};

use must_core::data_io::{format_manifest, save_checkpoint, save_png, Checkpoint, Dataset, Entry};
use must_core::fixture::{build_fixture, Fixture, FixtureConfig};
use must_core::trainer::evaluate;
use must_core::zeroshot::format_class_embeddings;
use must_core::{Image, Vit};
use serde::Serialize;

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const INIT_CHECKPOINT_FILE: &str = "init.ckpt";
pub const INFO_FILE: &str = "fixture.json";

/// Where `must fixture` put its outputs, and the zero-shot test accuracy it measured.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixtureFiles {
    pub manifest: PathBuf,
    pub embeddings: PathBuf,
    pub init_checkpoint: PathBuf,
    pub zero_shot_accuracy: f64,
    pub pretrain_loss: Vec<f64>,
}

fn write_split(out: &Path, dir: &str, images: &[Image], labels: Option<&[usize]>) -> Result<Vec<Entry>, CliError> {
    fs::create_dir_all(out.join(dir)).map_err(CliError::io(format!("creating {}", out.join(dir).display())))?;
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let rel = PathBuf::from(dir).join(format!("{i:05}.png"));
            save_png(img, &out.join(&rel))?;
            Ok(Entry { path: rel, label: labels.map(|l| l[i]), line: 0 })
        })
        .collect()
}

/// Writes an already built fixture to `out`. Train images are unlabeled in
/// the manifest.
pub fn write_fixture(fixture: &Fixture, out: &Path) -> Result<FixtureFiles, CliError> {
    fs::create_dir_all(out).map_err(CliError::io(format!("creating {}", out.display())))?;
    let train = write_split(out, "train", &fixture.train, None)?;
    let test = write_split(out, "test", &fixture.test, Some(&fixture.test_labels))?;
    let ds = Dataset { root: out.to_path_buf(), class_names: fixture.class_names.clone(), train, test };

    let manifest = out.join(MANIFEST_FILE);
    fs::write(&manifest, format_manifest(&ds)).map_err(CliError::io(format!("writing {}", manifest.display())))?;
    let embeddings = out.join(EMBEDDINGS_FILE);
    fs::write(&embeddings, format_class_embeddings(&fixture.embeddings))
        .map_err(CliError::io(format!("writing {}", embeddings.display())))?;
    let init_checkpoint = out.join(INIT_CHECKPOINT_FILE);
    let ckpt = Checkpoint {
        model: fixture.model.clone(),
        class_names: fixture.class_names.clone(),
        params: fixture.params.clone(),
        training: None,
    };
    save_checkpoint(&ckpt, &init_checkpoint)?;

    let vit = Vit::new(fixture.model.clone())?;
    let zero_shot_accuracy = evaluate(&vit, &fixture.params, &fixture.test, &fixture.test_labels)?.accuracy;
    let files = FixtureFiles {
        manifest,
        embeddings,
        init_checkpoint,
        zero_shot_accuracy,
        pretrain_loss: fixture.pretrain_history.clone(),
    };
    let info = out.join(INFO_FILE);
    let json = serde_json::to_string_pretty(&files).expect("fixture info serializes");
    fs::write(&info, json + "\n").map_err(CliError::io(format!("writing {}", info.display())))?;
    Ok(files)
}

/// `must fixture`: renders the synthetic dataset, pretrains the backbone and
/// writes everything `must adapt` needs.
pub fn cmd_fixture(cfg: &FixtureConfig, out: &Path) -> Result<FixtureFiles, CliError> {
    let fixture = build_fixture(cfg)?;
    write_fixture(&fixture, out)
}
