//! Dataset manifests, PNG I/O, checkpoints and the metrics stream.

mod checkpoint;
mod manifest;
mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use manifest::{format_manifest, load_dataset, parse_manifest, Dataset, Entry, Split};
pub use metrics::{read_metrics, MetricsLogger, MetricsRecord};

use std::path::Path;

use crate::error::{MustError, Result};
use crate::image::Image;

/// Decodes a PNG (or any 8-bit image the decoder accepts) into RGB `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| MustError::Load { path: path.to_path_buf(), msg: e.to_string() })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Image::new(w as usize, h as usize, data)
}

/// Encodes an image as 8-bit RGB PNG, clamping to `[0, 1]` first.
pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, image.width() as u32, image.height() as u32, image::ColorType::Rgb8)?;
    Ok(())
}
