use std::fs;
use std::path::{Path, PathBuf};

use must_core::augment::test_transform;
use must_core::data_io::{load_checkpoint, load_png, save_png};
use must_core::masking::sample_mask;
use must_core::model::cls_attention_from;
use must_core::rng::derive_seed;
use must_core::{Image, Params, Vit};
use serde::Serialize;

use crate::error::CliError;

/// Fill color of masked patches in the middle image of a triplet.
pub const MASK_GRAY: f32 = 0.5;

pub const HEATMAPS_FILE: &str = "heatmaps.json";

#[derive(Debug, Clone, PartialEq)]
pub struct RecoverOptions {
    pub mask_ratio: f64,
    pub mask_patch_size: usize,
    pub seed: u64,
}

impl Default for RecoverOptions {
    fn default() -> Self {
        Self { mask_ratio: 0.3, mask_patch_size: 8, seed: 0 }
    }
}

fn load_model(checkpoint: &Path) -> Result<(Vit, Params), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let vit = Vit::new(ckpt.model)?;
    Ok((vit, ckpt.params))
}

fn load_inputs(vit: &Vit, images: &[PathBuf]) -> Result<Vec<Image>, CliError> {
    let size = vit.config().image_size;
    images.iter().map(|p| Ok(test_transform(&load_png(p)?, size)?)).collect()
}

fn output_stem(index: usize, path: &Path) -> String {
    let stem = path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
    format!("{index:03}_{stem}")
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))
}

/// Original, masked and recovered views of one image.
#[derive(Debug, Clone)]
pub struct Recovery {
    pub original: Image,
    pub masked: Image,
    pub recovered: Image,
}

/// Masks `image`, decodes pixels at the masked patches and pastes them
/// over the original.
pub fn recover(vit: &Vit, params: &Params, image: &Image, opts: &RecoverOptions, seed: u64) -> Result<Recovery, CliError> {
    let cfg = vit.config();
    let geometry = cfg.mask_geometry(opts.mask_patch_size)?;
    let mask = sample_mask(geometry, opts.mask_ratio, seed)?;
    let out = vit.forward_tokens(params, image, Some(&mask))?;
    let gray = vec![MASK_GRAY as f64; cfg.patch_values()];
    let mut masked = image.clone();
    let mut recovered = image.clone();
    for (&pos, z) in out.msk_positions.iter().zip(&out.msk_embeds) {
        let pixels: Vec<f64> = vit.decode_pixels(params, z)?.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        recovered.write_patch(cfg.patch_size, pos, &pixels);
        masked.write_patch(cfg.patch_size, pos, &gray);
    }
    Ok(Recovery { original: image.clone(), masked, recovered })
}

/// `must recover-dump`: writes `<name>_original.png`, `<name>_masked.png`
/// and `<name>_recovered.png` per input. Returns the written paths.
pub fn cmd_recover_dump(
    checkpoint: &Path,
    images: &[PathBuf],
    out_dir: &Path,
    opts: &RecoverOptions,
) -> Result<Vec<PathBuf>, CliError> {
    let (vit, params) = load_model(checkpoint)?;
    let inputs = load_inputs(&vit, images)?;
    ensure_dir(out_dir)?;
    let mut written = Vec::with_capacity(inputs.len() * 3);
    for (i, (image, path)) in inputs.iter().zip(images).enumerate() {
        let r = recover(&vit, &params, image, opts, derive_seed(opts.seed, &[i as u64]))?;
        let stem = output_stem(i, path);
        for (suffix, img) in [("original", &r.original), ("masked", &r.masked), ("recovered", &r.recovered)] {
            let target = out_dir.join(format!("{stem}_{suffix}.png"));
            save_png(img, &target)?;
            written.push(target);
        }
    }
    Ok(written)
}

/// Per-image attention grid as stored in `heatmaps.json`.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Heatmap {
    pub image: String,
    pub overlay: String,
    pub grid: usize,
    /// Row-major, `grid × grid`, scaled to `[0, 1]`.
    pub values: Vec<f64>,
}

/// Red-tinted blend of `image` with the nearest-neighbour upsampled map.
pub fn overlay(image: &Image, values: &[f64], grid: usize) -> Image {
    let (w, h) = (image.width(), image.height());
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let a = values[(y * grid / h) * grid + x * grid / w] as f32;
            let [r, g, b] = image.pixel(x, y);
            let shade = 0.4 + 0.6 * a;
            out.set_pixel(x, y, [(r * shade + 0.6 * a).min(1.0), g * shade, b * shade]);
        }
    }
    out
}

/// `must attention-dump`: one overlay PNG per input plus `heatmaps.json`.
pub fn cmd_attention_dump(checkpoint: &Path, images: &[PathBuf], out_dir: &Path) -> Result<Vec<Heatmap>, CliError> {
    let (vit, params) = load_model(checkpoint)?;
    let inputs = load_inputs(&vit, images)?;
    ensure_dir(out_dir)?;
    let grid = vit.config().grid();
    let mut maps = Vec::with_capacity(inputs.len());
    for (i, (image, path)) in inputs.iter().zip(images).enumerate() {
        let out = vit.forward_tokens(&params, image, None)?;
        let values = cls_attention_from(&out);
        let name = format!("{}_attention.png", output_stem(i, path));
        save_png(&overlay(image, &values, grid), &out_dir.join(&name))?;
        maps.push(Heatmap { image: path.display().to_string(), overlay: name, grid, values });
    }
    let path = out_dir.join(HEATMAPS_FILE);
    let json = serde_json::to_string_pretty(&maps).expect("heatmaps serialize");
    fs::write(&path, json + "\n").map_err(CliError::io(format!("writing {}", path.display())))?;
    Ok(maps)
}
