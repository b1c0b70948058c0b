//! Synthetic three-shape dataset with a domain shift, plus the pretraining
//! that turns it into a zero-shot starting point for adaptation.
//!
//! Shapes are always brighter than their background. Source images have a
//! gray background and saturated shapes; target images have tinted
//! backgrounds, duller shapes and pixel noise. The backbone is pretrained on
//! source images to map each class onto a fixed prototype direction. The
//! zero-shot head is instead built from noisy copies of those prototypes,
//! standing in for prompt embeddings that only roughly match the image
//! features.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::augment::{strong_augment, test_transform, weak_augment, AugmentPolicy};
use crate::error::{invalid_config, Result};
use crate::image::Image;
use crate::losses::{RunningMeanState, TopK};
use crate::masking::sample_mask;
use crate::model::{ModelConfig, Vit};
use crate::params::Params;
use crate::rng::{derive_seed, rng_from, sample_seed, Rng, ViewTag};
use crate::trainer::{batch_objective, cosine_lr, AdamW, ObjectiveConfig, PreparedBatch};
use crate::zeroshot::{build_head, ClassEmbeddings, ClassifierHead};

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];

/// Test accuracy of the default fixture's zero-shot head before adaptation,
/// measured once with `FixtureConfig::default()`.
pub const ZERO_SHOT_ACCURACY: f64 = 0.688;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub image_size: usize,
    pub source_per_class: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub prompts_per_class: usize,
    pub prompt_noise: f64,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            source_per_class: 600,
            target_train: 2000,
            target_test: 500,
            prompts_per_class: 4,
            prompt_noise: 1.0,
            model: fixture_model(),
            pretrain: PretrainConfig::default(),
            seed: 7,
        }
    }
}

/// The backbone used by the fixture: 4×4 patches of 8 px, three blocks.
pub fn fixture_model() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        patch_size: 8,
        embed_dim: 48,
        depth: 3,
        num_heads: 3,
        proj_dim: 32,
        num_classes: 3,
        logit_scale: 20.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mask_ratio: f64,
    pub mask_unit_px: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 40, batch_size: 32, lr: 3e-3, weight_decay: 0.05, mask_ratio: 0.0, mask_unit_px: 8 }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

fn inside(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    match class {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs().max(dy.abs()) <= 0.8 * r,
        _ => {
            // upward equilateral triangle inscribed in radius r
            let h = 0.5 * r;
            dy <= h && dy >= -r + (dx.abs() * 3f64.sqrt()) && dy >= -r
        }
    }
}

/// Draws one image of `class`, quantized to 8 bits so it survives a PNG
/// round trip unchanged.
pub fn render(class: usize, domain: Domain, size: usize, rng: &mut Rng) -> Image {
    let noise = Normal::new(0.0, 0.08).expect("valid std");
    let (bg, fg, r, grain) = match domain {
        Domain::Source => {
            let shade = rng.gen_range(0.05..0.3) as f32;
            let fg = hsv_to_rgb(rng.gen(), 0.8, rng.gen_range(0.85..1.0));
            ([shade; 3], fg, rng.gen_range(0.32..0.4) * size as f64, 0.0)
        }
        Domain::Target => {
            let bg = hsv_to_rgb(rng.gen(), 0.4, rng.gen_range(0.2..0.45));
            let fg = hsv_to_rgb(rng.gen(), rng.gen_range(0.4..0.9), rng.gen_range(0.55..0.9));
            (bg, fg, rng.gen_range(0.32..0.4) * size as f64, 1.0)
        }
    };
    let jitter = 0.12 * size as f64;
    let cx = size as f64 / 2.0 + rng.gen_range(-jitter..jitter);
    let cy = size as f64 / 2.0 + rng.gen_range(-jitter..jitter);
    let mut img = Image::filled(size, size, bg);
    for y in 0..size {
        for x in 0..size {
            // 2×2 supersampling for soft edges
            let mut cover = 0.0;
            for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let dx = x as f64 + sx - cx;
                let dy = y as f64 + sy - cy;
                if inside(class, dx, dy, r) {
                    cover += 0.25;
                }
            }
            let mut px = [0f32; 3];
            for c in 0..3 {
                let v = bg[c] as f64 * (1.0 - cover) + fg[c] as f64 * cover + grain * noise.sample(rng);
                px[c] = ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32;
            }
            img.set_pixel(x, y, px);
        }
    }
    img
}

/// One random unit vector per class: the directions the backbone is
/// pretrained to produce.
pub fn class_prototypes(dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from(derive_seed(seed, &[ViewTag::Fixture as u64, 1]));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    (0..CLASS_NAMES.len())
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
            let n = crate::linalg::norm2(&v);
            v.iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Stand-ins for text embeddings: each prompt is its class prototype plus
/// isotropic noise of expected norm `noise`, so the averaged head is close to
/// but not aligned with the pretraining directions.
pub fn prompt_embeddings(prototypes: &[Vec<f64>], prompts: usize, noise: f64, seed: u64) -> Vec<ClassEmbeddings> {
    let mut rng = rng_from(derive_seed(seed, &[ViewTag::Fixture as u64, 2]));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    CLASS_NAMES
        .iter()
        .zip(prototypes)
        .map(|(name, proto)| {
            let scale = noise / (proto.len() as f64).sqrt();
            let vectors = (0..prompts).map(|_| proto.iter().map(|p| p + scale * unit.sample(&mut rng)).collect()).collect();
            ClassEmbeddings { name: name.to_string(), vectors }
        })
        .collect()
}

/// Supervised training of everything except the classifier rows on labeled
/// images, drawing zoomed crops, strong views and evaluation views in equal
/// parts. A nonzero `mask_ratio` also trains the pixel decoder.
/// Returns the mean loss of each epoch.
pub fn pretrain(vit: &Vit, params: &mut Params, images: &[Image], labels: &[usize], cfg: &PretrainConfig, seed: u64) -> Result<Vec<f64>> {
    if images.is_empty() || images.len() != labels.len() || cfg.batch_size == 0 {
        return Err(invalid_config("pretraining needs labeled images"));
    }
    let k = vit.config().num_classes;
    let size = vit.config().image_size;
    let geo = vit.config().mask_geometry(cfg.mask_unit_px)?;
    let objective = ObjectiveConfig {
        threshold: 0.0,
        lambda_reg: 0.0,
        lambda_align: 0.0,
        top_k: TopK::All,
        use_moving_average: false,
        unmasked_cls_forward: cfg.mask_ratio > 0.0,
    };
    let groups = vit.param_groups();
    let decay: Vec<bool> = groups.iter().map(|g| g.weight_decay).collect();
    let frozen: Vec<bool> = groups.iter().map(|g| g.classifier).collect();
    let strong = AugmentPolicy::strong();
    let mut optim = AdamW::new(params);
    let steps_per_epoch = images.len().div_ceil(cfg.batch_size);
    let total = (steps_per_epoch * cfg.epochs) as u64;
    let mut running = RunningMeanState::new(k, 0.99)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs as u64 {
        let mut order: Vec<usize> = (0..images.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng_from(sample_seed(seed, epoch, 0, ViewTag::Shuffle)));
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = PreparedBatch { strong: Vec::new(), masks: Vec::new(), teacher_probs: Vec::new() };
            for &i in chunk {
                let view_seed = sample_seed(seed, epoch, i as u64, ViewTag::Weak);
                let view = match view_seed % 3 {
                    0 => weak_augment(&images[i], size, view_seed)?,
                    1 => strong_augment(&images[i], size, view_seed, &strong)?,
                    _ => test_transform(&images[i], size)?,
                };
                batch.strong.push(view);
                batch.masks.push(sample_mask(geo, cfg.mask_ratio, sample_seed(seed, epoch, i as u64, ViewTag::Mask))?);
                let mut onehot = vec![0.0; k];
                onehot[labels[i]] = 1.0;
                batch.teacher_probs.push(onehot);
            }
            let out = batch_objective(vit, params, &batch, &objective, &mut running)?;
            sum += out.breakdown.total * chunk.len() as f64;
            let lr = cosine_lr(step, total, cfg.lr);
            optim.step(params, &out.grads, &vec![lr; params.len()], cfg.weight_decay, &decay, &frozen)?;
            step += 1;
        }
        history.push(sum / images.len() as f64);
    }
    Ok(history)
}

/// Everything the end-to-end experiment needs.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub class_names: Vec<String>,
    pub embeddings: Vec<ClassEmbeddings>,
    pub head: ClassifierHead,
    pub model: ModelConfig,
    /// Pretrained parameters with the zero-shot head installed.
    pub params: Params,
    pub train: Vec<Image>,
    /// Kept for diagnostics; never written to the manifest.
    pub train_labels: Vec<usize>,
    pub test: Vec<Image>,
    pub test_labels: Vec<usize>,
    pub pretrain_history: Vec<f64>,
}

fn draw_split(n: usize, domain: Domain, cfg: &FixtureConfig, stream: u64) -> (Vec<Image>, Vec<usize>) {
    let mut rng = rng_from(derive_seed(cfg.seed, &[ViewTag::Fixture as u64, stream]));
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % CLASS_NAMES.len();
        images.push(render(class, domain, cfg.image_size, &mut rng));
        labels.push(class);
    }
    (images, labels)
}

/// Rendered images of every split.
#[derive(Debug, Clone)]
pub struct FixtureImages {
    pub source: Vec<Image>,
    pub source_labels: Vec<usize>,
    pub train: Vec<Image>,
    pub train_labels: Vec<usize>,
    pub test: Vec<Image>,
    pub test_labels: Vec<usize>,
}

pub fn render_images(cfg: &FixtureConfig) -> FixtureImages {
    let (source, source_labels) = draw_split(cfg.source_per_class * CLASS_NAMES.len(), Domain::Source, cfg, 2);
    let (train, train_labels) = draw_split(cfg.target_train, Domain::Target, cfg, 3);
    let (test, test_labels) = draw_split(cfg.target_test, Domain::Target, cfg, 4);
    FixtureImages { source, source_labels, train, train_labels, test, test_labels }
}

/// Renders all splits, builds the zero-shot head and pretrains the backbone
/// on the source domain.
pub fn build_fixture(cfg: &FixtureConfig) -> Result<Fixture> {
    let mut model = cfg.model.clone();
    model.image_size = cfg.image_size;
    model.num_classes = CLASS_NAMES.len();
    let vit = Vit::new(model.clone())?;
    let prototypes = class_prototypes(model.proj_dim, cfg.seed);
    let embeddings = prompt_embeddings(&prototypes, cfg.prompts_per_class, cfg.prompt_noise, cfg.seed);
    let head = build_head(&embeddings, model.logit_scale)?;
    let images = render_images(cfg);

    let mut params = vit.init_params(&mut rng_from(derive_seed(cfg.seed, &[ViewTag::Init as u64])));
    let source_head = ClassifierHead::from_rows(prototypes.concat(), model.proj_dim, CLASS_NAMES.map(String::from).to_vec(), model.logit_scale)?;
    vit.install_head(&mut params, &source_head)?;
    let pretrain_history =
        pretrain(&vit, &mut params, &images.source, &images.source_labels, &cfg.pretrain, derive_seed(cfg.seed, &[5]))?;
    vit.install_head(&mut params, &head)?;
    Ok(Fixture {
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        embeddings,
        head,
        model,
        params,
        train: images.train,
        train_labels: images.train_labels,
        test: images.test,
        test_labels: images.test_labels,
        pretrain_history,
    })
}
