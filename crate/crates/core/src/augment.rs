//! Weak and strong augmentation pipelines.
//!
//! Every pipeline is a pure function of `(image, seed, policy)`. The trainer
//! derives per-sample, per-view seeds, so the weak and strong views of one
//! image draw from unrelated streams.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Result};
use crate::image::Image;
use crate::rng::rng_from;

/// Shorter-edge resize factor applied before the weak random crop.
pub const WEAK_RESIZE_FACTOR: f64 = 1.15;
/// Largest RandAug magnitude level.
pub const MAX_LEVEL: f64 = 10.0;
const GEOMETRIC_FILL: [f32; 3] = [0.0; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    pub randaug_n: usize,
    pub randaug_m: f64,
    pub crop_scale_range: (f64, f64),
}

impl AugmentPolicy {
    pub fn weak() -> Self {
        Self { kind: AugmentKind::Weak, randaug_n: 0, randaug_m: 0.0, crop_scale_range: (1.0, 1.0) }
    }

    pub fn strong() -> Self {
        Self { kind: AugmentKind::Strong, randaug_n: 2, randaug_m: 9.0, crop_scale_range: (0.5, 1.0) }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(invalid_config(format!("crop scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        if !(0.0..=MAX_LEVEL).contains(&self.randaug_m) {
            return Err(invalid_config(format!("RandAug magnitude {} outside [0, {MAX_LEVEL}]", self.randaug_m)));
        }
        Ok(())
    }
}

/// The RandAug operation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RandOp {
    Brightness,
    Contrast,
    Saturation,
    Posterize,
    Solarize,
    Rotate,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

impl RandOp {
    pub const ALL: [RandOp; 10] = [
        RandOp::Brightness,
        RandOp::Contrast,
        RandOp::Saturation,
        RandOp::Posterize,
        RandOp::Solarize,
        RandOp::Rotate,
        RandOp::ShearX,
        RandOp::ShearY,
        RandOp::TranslateX,
        RandOp::TranslateY,
    ];
}

/// The random decisions of one strong augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongPlan {
    /// Crop box `(x0, y0, w, h)` in source pixels.
    pub crop: (usize, usize, usize, usize),
    pub flip: bool,
    /// Operation and sign (`±1`) for signed magnitudes.
    pub ops: Vec<(RandOp, f32)>,
}

fn check_target(image: &Image, target: usize) -> Result<()> {
    if target == 0 {
        return Err(invalid_input("target size must be positive"));
    }
    if !image.is_finite() {
        return Err(invalid_input("image contains non-finite values"));
    }
    Ok(())
}

/// Bilinear resize of a region `(x0, y0, w, h)` to `out_w × out_h`.
pub fn resize_region(image: &Image, region: (f32, f32, f32, f32), out_w: usize, out_h: usize) -> Image {
    let (x0, y0, w, h) = region;
    if x0 == 0.0 && y0 == 0.0 && w as usize == out_w && h as usize == out_h
        && image.width() == out_w && image.height() == out_h
    {
        return image.clone();
    }
    let sx = w / out_w as f32;
    let sy = h / out_h as f32;
    let mut out = Image::filled(out_w, out_h, [0.0; 3]);
    for y in 0..out_h {
        let src_y = y0 + (y as f32 + 0.5) * sy - 0.5;
        for x in 0..out_w {
            let src_x = x0 + (x as f32 + 0.5) * sx - 0.5;
            out.set_pixel(x, y, image.sample_bilinear(src_x, src_y, GEOMETRIC_FILL));
        }
    }
    out
}

pub fn resize(image: &Image, out_w: usize, out_h: usize) -> Image {
    resize_region(image, (0.0, 0.0, image.width() as f32, image.height() as f32), out_w, out_h)
}

/// Resizes so the shorter edge equals `size`, keeping the aspect ratio.
pub fn resize_shorter_edge(image: &Image, size: usize) -> Image {
    let (w, h) = (image.width(), image.height());
    let short = w.min(h) as f64;
    let scale = size as f64 / short;
    let (nw, nh) = if w <= h {
        (size, ((h as f64 * scale).round() as usize).max(size))
    } else {
        (((w as f64 * scale).round() as usize).max(size), size)
    };
    resize(image, nw, nh)
}

pub fn crop(image: &Image, x0: usize, y0: usize, w: usize, h: usize) -> Image {
    let mut out = Image::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(x, y, image.pixel(x0 + x, y0 + y));
        }
    }
    out
}

/// Resize the shorter edge to `1.15 × target`, then a random `target²` crop.
pub fn weak_augment(image: &Image, target: usize, seed: u64) -> Result<Image> {
    check_target(image, target)?;
    let mut rng = rng_from(seed);
    let resized = resize_shorter_edge(image, (target as f64 * WEAK_RESIZE_FACTOR).round() as usize);
    let x0 = rng.gen_range(0..=resized.width() - target);
    let y0 = rng.gen_range(0..=resized.height() - target);
    let mut out = crop(&resized, x0, y0, target, target);
    out.clamp01();
    Ok(out)
}

/// Deterministic shorter-edge resize plus center crop.
pub fn test_transform(image: &Image, target: usize) -> Result<Image> {
    check_target(image, target)?;
    let resized = resize_shorter_edge(image, target);
    let x0 = (resized.width() - target) / 2;
    let y0 = (resized.height() - target) / 2;
    Ok(crop(&resized, x0, y0, target, target))
}

/// Samples a random-resized-crop box (10 attempts, then a center fallback),
/// aspect ratios in `[3/4, 4/3]`.
fn sample_crop(rng: &mut impl Rng, w: usize, h: usize, scale: (f64, f64)) -> (usize, usize, usize, usize) {
    let area = (w * h) as f64;
    let (lr_lo, lr_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target_area = area * rng.gen_range(scale.0..=scale.1);
        let aspect = rng.gen_range(lr_lo..=lr_hi).exp();
        let cw = (target_area * aspect).sqrt().round() as usize;
        let ch = (target_area / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let y0 = rng.gen_range(0..=h - ch);
            let x0 = rng.gen_range(0..=w - cw);
            return (x0, y0, cw, ch);
        }
    }
    let ratio = w as f64 / h as f64;
    let (cw, ch) = if ratio < 0.75 {
        (w, (w as f64 / 0.75).round() as usize)
    } else if ratio > 4.0 / 3.0 {
        ((h as f64 * 4.0 / 3.0).round() as usize, h)
    } else {
        (w, h)
    };
    ((w - cw) / 2, (h - ch) / 2, cw, ch)
}

pub fn plan_strong(width: usize, height: usize, seed: u64, policy: &AugmentPolicy) -> StrongPlan {
    let mut rng = rng_from(seed);
    let crop = sample_crop(&mut rng, width, height, policy.crop_scale_range);
    let flip = rng.gen_bool(0.5);
    let ops = (0..policy.randaug_n)
        .map(|_| {
            let op = RandOp::ALL[rng.gen_range(0..RandOp::ALL.len())];
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            (op, sign)
        })
        .collect();
    StrongPlan { crop, flip, ops }
}

/// Random resized crop, horizontal flip with probability 0.5, then
/// `randaug_n` RandAug operations at magnitude `randaug_m`; clamped to `[0, 1]`.
pub fn strong_augment(image: &Image, target: usize, seed: u64, policy: &AugmentPolicy) -> Result<Image> {
    check_target(image, target)?;
    policy.validate()?;
    let plan = plan_strong(image.width(), image.height(), seed, policy);
    Ok(apply_strong_plan(image, target, &plan, policy.randaug_m))
}

pub fn apply_strong_plan(image: &Image, target: usize, plan: &StrongPlan, magnitude: f64) -> Image {
    let (x0, y0, w, h) = plan.crop;
    let mut out = resize_region(image, (x0 as f32, y0 as f32, w as f32, h as f32), target, target);
    if plan.flip {
        out = flip_horizontal(&out);
    }
    let level = (magnitude / MAX_LEVEL) as f32;
    for &(op, sign) in &plan.ops {
        out = apply_op(&out, op, level, sign);
    }
    out.clamp01();
    out
}

pub fn flip_horizontal(image: &Image) -> Image {
    let (w, h) = (image.width(), image.height());
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(x, y, image.pixel(w - 1 - x, y));
        }
    }
    out
}

fn luminance(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn map_pixels(image: &Image, f: impl Fn([f32; 3]) -> [f32; 3]) -> Image {
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let v = f([px[0], px[1], px[2]]);
        px.copy_from_slice(&v);
    }
    out
}

/// Inverse-maps each output pixel through the 2×2 matrix `inv` about the
/// image center, plus a translation in output pixels.
fn affine(image: &Image, inv: [f32; 4], shift: (f32, f32)) -> Image {
    let (w, h) = (image.width(), image.height());
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    let mut out = Image::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f32 - cx - shift.0;
            let dy = y as f32 - cy - shift.1;
            let sx = inv[0] * dx + inv[1] * dy + cx;
            let sy = inv[2] * dx + inv[3] * dy + cy;
            out.set_pixel(x, y, image.sample_bilinear(sx, sy, GEOMETRIC_FILL));
        }
    }
    out
}

/// Applies one RandAug op. `level` is the magnitude in `[0, 1]`.
pub fn apply_op(image: &Image, op: RandOp, level: f32, sign: f32) -> Image {
    let size = image.width().min(image.height()) as f32;
    match op {
        RandOp::Brightness => {
            let f = 1.0 + sign * 0.9 * level;
            map_pixels(image, |p| p.map(|c| c * f))
        }
        RandOp::Contrast => {
            let f = 1.0 + sign * 0.9 * level;
            let n = (image.width() * image.height()) as f32;
            let mean = image.data().chunks_exact(3).map(|p| luminance([p[0], p[1], p[2]])).sum::<f32>() / n;
            map_pixels(image, |p| p.map(|c| mean + f * (c - mean)))
        }
        RandOp::Saturation => {
            let f = 1.0 + sign * 0.9 * level;
            map_pixels(image, |p| {
                let g = luminance(p);
                p.map(|c| g + f * (c - g))
            })
        }
        RandOp::Posterize => {
            let bits = 8 - (4.0 * level).floor() as u32;
            let shift = 8 - bits;
            map_pixels(image, |p| {
                p.map(|c| {
                    let q = ((c.clamp(0.0, 1.0) * 255.0).round() as u32 >> shift) << shift;
                    q as f32 / 255.0
                })
            })
        }
        RandOp::Solarize => {
            let thr = 1.0 - level;
            map_pixels(image, |p| p.map(|c| if c >= thr { 1.0 - c } else { c }))
        }
        RandOp::Rotate => {
            let a = (sign * 30.0 * level).to_radians();
            let (s, c) = a.sin_cos();
            affine(image, [c, s, -s, c], (0.0, 0.0))
        }
        RandOp::ShearX => affine(image, [1.0, -sign * 0.3 * level, 0.0, 1.0], (0.0, 0.0)),
        RandOp::ShearY => affine(image, [1.0, 0.0, -sign * 0.3 * level, 1.0], (0.0, 0.0)),
        RandOp::TranslateX => affine(image, [1.0, 0.0, 0.0, 1.0], (sign * 0.3 * level * size, 0.0)),
        RandOp::TranslateY => affine(image, [1.0, 0.0, 0.0, 1.0], (0.0, sign * 0.3 * level * size)),
    }
}

/// Dispatches on the policy kind.
pub fn augment(image: &Image, target: usize, seed: u64, policy: &AugmentPolicy) -> Result<Image> {
    match policy.kind {
        AugmentKind::Weak => weak_augment(image, target, seed),
        AugmentKind::Strong => strong_augment(image, target, seed, policy),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn noise(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = rng_from(seed);
        Image::new(w, h, (0..w * h * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn weak_examples() {
        let c = Image::filled(40, 36, [0.2, 0.4, 0.6]);
        let out = weak_augment(&c, 32, 3).unwrap();
        assert_eq!((out.width(), out.height()), (32, 32));
        for px in out.data().chunks_exact(3) {
            assert!((px[0] - 0.2).abs() < 1e-6 && (px[1] - 0.4).abs() < 1e-6 && (px[2] - 0.6).abs() < 1e-6);
        }
        let img = noise(32, 32, 1);
        assert_eq!(weak_augment(&img, 32, 9).unwrap(), weak_augment(&img, 32, 9).unwrap());
        assert!(weak_augment(&img, 0, 9).is_err());
    }

    #[test]
    fn strong_identity_configuration() {
        let img = noise(40, 40, 2);
        let policy = AugmentPolicy { randaug_n: 0, crop_scale_range: (1.0, 1.0), ..AugmentPolicy::strong() };
        let seed = (0..100).find(|&s| !plan_strong(40, 40, s, &policy).flip).unwrap();
        let out = strong_augment(&img, 32, seed, &policy).unwrap();
        let mut want = resize(&img, 32, 32);
        want.clamp01();
        assert_eq!(out, want);
    }

    #[test]
    fn strong_is_deterministic_and_seed_sensitive() {
        let img = noise(32, 32, 3);
        let p = AugmentPolicy::strong();
        assert_eq!(strong_augment(&img, 32, 5, &p).unwrap(), strong_augment(&img, 32, 5, &p).unwrap());
        assert_ne!(strong_augment(&img, 32, 5, &p).unwrap(), strong_augment(&img, 32, 6, &p).unwrap());
    }

    #[test]
    fn test_transform_examples() {
        let img = noise(32, 32, 4);
        assert_eq!(test_transform(&img, 32).unwrap(), img);
        let wide = noise(48, 40, 5);
        let once = test_transform(&wide, 32).unwrap();
        assert_eq!((once.width(), once.height()), (32, 32));
        assert_eq!(test_transform(&once, 32).unwrap(), once);
    }

    #[test]
    fn policy_validation() {
        let mut p = AugmentPolicy::strong();
        p.crop_scale_range = (0.0, 1.0);
        assert!(p.validate().is_err());
        p.crop_scale_range = (0.8, 0.5);
        assert!(p.validate().is_err());
        p.crop_scale_range = (0.5, 1.0);
        p.randaug_m = 11.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn every_op_preserves_shape() {
        let img = noise(16, 16, 6);
        for op in RandOp::ALL {
            for sign in [-1.0, 1.0] {
                let out = apply_op(&img, op, 0.9, sign);
                assert_eq!((out.width(), out.height()), (16, 16));
                assert!(out.is_finite());
            }
        }
        // zero magnitude leaves photometric ops (except solarize at 1.0) untouched
        for op in [RandOp::Brightness, RandOp::Contrast, RandOp::Saturation] {
            let out = apply_op(&img, op, 0.0, 1.0);
            for (a, b) in out.data().iter().zip(img.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn outputs_stay_in_unit_range(seed in any::<u64>(), n in 0usize..4, m in 0.0f64..10.0) {
            let img = noise(36, 34, seed ^ 0xABCD);
            let p = AugmentPolicy { randaug_n: n, randaug_m: m, ..AugmentPolicy::strong() };
            let s = strong_augment(&img, 32, seed, &p).unwrap();
            prop_assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let w = weak_augment(&img, 32, seed).unwrap();
            prop_assert!(w.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
