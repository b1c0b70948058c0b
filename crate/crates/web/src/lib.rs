//! WebAssembly bindings behind `www/index.html`. Each export returns JSON or
//! raw RGBA bytes so the page needs no glue beyond what wasm-bindgen emits.

use must_core::augment::{strong_augment, weak_augment, AugmentPolicy};
use must_core::fixture::{render, Domain};
use must_core::masking::{sample_mask, MaskGeometry};
use must_core::rng::{derive_seed, rng_from};
use must_core::teacher::EmaSchedule;
use must_core::trainer::{cosine_lr, layerwise_lrs, scaled_lr};
use must_core::Image;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct MaskPreview {
    pub grid: usize,
    pub masked: Vec<usize>,
    pub achieved_ratio: f64,
}

pub fn mask_preview_data(grid: usize, patch_px: usize, unit_px: usize, ratio: f64, seed: u64) -> Result<MaskPreview, String> {
    let geometry = MaskGeometry::new(grid, patch_px, unit_px).map_err(|e| e.to_string())?;
    let mask = sample_mask(geometry, ratio, seed).map_err(|e| e.to_string())?;
    Ok(MaskPreview { grid, masked: mask.masked_indices().to_vec(), achieved_ratio: mask.achieved_ratio() })
}

/// Patch indices masked for one draw, as `{grid, masked, achieved_ratio}`.
#[wasm_bindgen]
pub fn mask_preview(grid: usize, patch_px: usize, unit_px: usize, ratio: f64, seed: u64) -> Result<String, JsError> {
    let preview = mask_preview_data(grid, patch_px, unit_px, ratio, seed).map_err(|e| JsError::new(&e))?;
    Ok(serde_json::to_string(&preview).expect("preview serializes"))
}

#[derive(Debug, Serialize)]
pub struct Schedules {
    pub peak_lr: f64,
    pub lr: Vec<f64>,
    pub ema_decay: Vec<f64>,
    /// Learning rate of each parameter group, embeddings first.
    pub layer_lrs: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn schedule_data(
    base_lr: f64,
    batch_size: usize,
    total_steps: u64,
    ema_mu0: f64,
    ema_mu_n: u64,
    depth: usize,
    layer_decay: f64,
) -> Result<Schedules, String> {
    let ema = EmaSchedule::new(ema_mu0, ema_mu_n).map_err(|e| e.to_string())?;
    let peak_lr = scaled_lr(base_lr, batch_size);
    let steps = 0..=total_steps;
    Ok(Schedules {
        peak_lr,
        lr: steps.clone().map(|s| cosine_lr(s, total_steps, peak_lr)).collect(),
        ema_decay: steps.map(|s| ema.decay_at(s)).collect(),
        layer_lrs: layerwise_lrs(peak_lr, layer_decay, depth),
    })
}

/// Learning-rate, EMA-decay and per-layer learning-rate curves as JSON.
#[wasm_bindgen]
pub fn schedule_curves(
    base_lr: f64,
    batch_size: usize,
    total_steps: u64,
    ema_mu0: f64,
    ema_mu_n: u64,
    depth: usize,
    layer_decay: f64,
) -> Result<String, JsError> {
    let data = schedule_data(base_lr, batch_size, total_steps, ema_mu0, ema_mu_n, depth, layer_decay)
        .map_err(|e| JsError::new(&e))?;
    Ok(serde_json::to_string(&data).expect("schedules serialize"))
}

fn push_rgba(out: &mut Vec<u8>, image: &Image) {
    for px in image.data().chunks_exact(3) {
        out.extend(px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out.push(255);
    }
}

/// A rendered fixture shape followed by its weak and strong views, each
/// `size × size` RGBA, concatenated.
pub fn augment_preview_data(class: usize, target_domain: bool, size: usize, magnitude: f64, seed: u64) -> Result<Vec<u8>, String> {
    if class >= 3 {
        return Err(format!("class {class} out of range (0..3)"));
    }
    let domain = if target_domain { Domain::Target } else { Domain::Source };
    let image = render(class, domain, size, &mut rng_from(seed));
    let policy = AugmentPolicy { randaug_m: magnitude, ..AugmentPolicy::strong() };
    let weak = weak_augment(&image, size, derive_seed(seed, &[1])).map_err(|e| e.to_string())?;
    let strong = strong_augment(&image, size, derive_seed(seed, &[2]), &policy).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(3 * size * size * 4);
    for img in [&image, &weak, &strong] {
        push_rgba(&mut out, img);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn augment_preview(class: usize, target_domain: bool, size: usize, magnitude: f64, seed: u64) -> Result<Vec<u8>, JsError> {
    augment_preview_data(class, target_domain, size, magnitude, seed).map_err(|e| JsError::new(&e))
}
