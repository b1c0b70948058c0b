//! Small vision transformer with `[CLS]` / `[MSK]` tokens, a shared
//! projection head, a linear classifier and a linear pixel decoder.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, MustError, Result};
use crate::image::Image;
use crate::linalg::{add_assign, dot, norm2};
use crate::masking::{apply_mask, MaskGeometry, MaskSpec};
use crate::nn::{
    attention, attention_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward,
    AttentionCache, AttentionGrads, AttentionWeights, LayerNormCache,
};
use crate::params::{ParamId, Params, Tensor};
use crate::zeroshot::ClassifierHead;

pub const INIT_STD: f64 = 0.02;
pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub proj_dim: usize,
    pub num_classes: usize,
    pub logit_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            embed_dim: 128,
            depth: 6,
            num_heads: 4,
            proj_dim: 64,
            num_classes: 10,
            logit_scale: 100.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("num_heads", self.num_heads),
            ("proj_dim", self.proj_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(invalid_config(format!("{name} must be at least 1")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(invalid_config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(invalid_config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(invalid_config("logit_scale must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Tokens per sequence, including `[CLS]`.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    /// RGB values per patch, `N = 3·p²`.
    pub fn patch_values(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn mask_geometry(&self, unit_px: usize) -> Result<MaskGeometry> {
        MaskGeometry::new(self.grid(), self.patch_size, unit_px)
    }
}

#[derive(Debug, Clone)]
struct BlockIds {
    norm1_w: ParamId,
    norm1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    attn_out_w: ParamId,
    attn_out_b: ParamId,
    norm2_w: ParamId,
    norm2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    msk: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    norm_w: ParamId,
    norm_b: ParamId,
    proj_w: ParamId,
    head_w: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
}

/// Per-parameter optimizer metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamGroup {
    /// Depth index: 0 = embeddings and tokens, 1..=L blocks, L+1 heads.
    pub depth: usize,
    pub weight_decay: bool,
    pub classifier: bool,
}

/// Output of the backbone for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenOutputs {
    pub cls_embed: Vec<f64>,
    /// One per masked patch, in ascending patch order.
    pub msk_embeds: Vec<Vec<f64>>,
    pub msk_positions: Vec<usize>,
    pub patch_embeds: Vec<Vec<f64>>,
    pub patch_positions: Vec<usize>,
    /// Final-layer attention, `heads × T × T`.
    pub attn_last: Vec<f64>,
    pub num_heads: usize,
    pub seq_len: usize,
}

/// Unit-norm projected feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedFeature(Vec<f64>);

impl ProjectedFeature {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// ℓ2 normalization; zero input is a degenerate projection.
pub fn l2_normalize(u: &[f64]) -> Result<ProjectedFeature> {
    let n = norm2(u);
    if n == 0.0 || !n.is_finite() {
        return Err(MustError::DegenerateProjection);
    }
    Ok(ProjectedFeature(u.iter().map(|x| x / n).collect()))
}

/// Gradient of `v = u/‖u‖` pulled back to `u`.
pub fn l2_normalize_backward(u: &[f64], v: &[f64], dv: &[f64]) -> Vec<f64> {
    let n = norm2(u);
    let inner = dot(v, dv);
    v.iter().zip(dv).map(|(&vi, &gi)| (gi - vi * inner) / n).collect()
}

/// `logit_scale · W v` for a K×d weight matrix.
pub fn logits_from_rows(rows: &[f64], dim: usize, scale: f64, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != dim || !rows.len().is_multiple_of(dim) {
        return Err(invalid_input(format!(
            "feature dimension {} does not match classifier dimension {dim}",
            v.len()
        )));
    }
    Ok(rows.chunks_exact(dim).map(|r| scale * dot(r, v)).collect())
}

pub fn classify(v: &ProjectedFeature, head: &ClassifierHead) -> Result<Vec<f64>> {
    logits_from_rows(head.weights(), head.dim(), head.logit_scale(), v.as_slice())
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ln2_out: Vec<f64>,
    fc1_out: Vec<f64>,
    act: Vec<f64>,
}

/// Everything the backward pass needs from one forward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    patches: Vec<f64>,
    masked: Vec<bool>,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
}

/// Activations of the projection head for one token.
#[derive(Debug, Clone)]
pub struct ProjectionCache {
    z: Vec<f64>,
    u: Vec<f64>,
    pub v: ProjectedFeature,
}

#[derive(Debug, Clone)]
pub struct Vit {
    config: ModelConfig,
    layout: Layout,
    template: Params,
}

impl Vit {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let hidden = MLP_RATIO * d;
        let mut p = Params::new();
        let mut add = |name: String, shape: &[usize]| p.push(Tensor::zeros(name, shape));
        let patch_w = add("patch_embed.weight".into(), &[config.patch_values(), d]);
        let patch_b = add("patch_embed.bias".into(), &[d]);
        let cls = add("cls_token".into(), &[d]);
        let msk = add("msk_token".into(), &[d]);
        let pos = add("pos_embed".into(), &[config.seq_len(), d]);
        let blocks = (0..config.depth)
            .map(|i| BlockIds {
                norm1_w: add(format!("blocks.{i}.norm1.weight"), &[d]),
                norm1_b: add(format!("blocks.{i}.norm1.bias"), &[d]),
                qkv_w: add(format!("blocks.{i}.attn.qkv.weight"), &[d, 3 * d]),
                qkv_b: add(format!("blocks.{i}.attn.qkv.bias"), &[3 * d]),
                attn_out_w: add(format!("blocks.{i}.attn.proj.weight"), &[d, d]),
                attn_out_b: add(format!("blocks.{i}.attn.proj.bias"), &[d]),
                norm2_w: add(format!("blocks.{i}.norm2.weight"), &[d]),
                norm2_b: add(format!("blocks.{i}.norm2.bias"), &[d]),
                fc1_w: add(format!("blocks.{i}.mlp.fc1.weight"), &[d, hidden]),
                fc1_b: add(format!("blocks.{i}.mlp.fc1.bias"), &[hidden]),
                fc2_w: add(format!("blocks.{i}.mlp.fc2.weight"), &[hidden, d]),
                fc2_b: add(format!("blocks.{i}.mlp.fc2.bias"), &[d]),
            })
            .collect();
        let norm_w = add("norm.weight".into(), &[d]);
        let norm_b = add("norm.bias".into(), &[d]);
        let proj_w = add("proj.weight".into(), &[d, config.proj_dim]);
        let head_w = add("head.weight".into(), &[config.num_classes, config.proj_dim]);
        let dec_w = add("decoder.weight".into(), &[d, config.patch_values()]);
        let dec_b = add("decoder.bias".into(), &[config.patch_values()]);
        let layout = Layout {
            patch_w,
            patch_b,
            cls,
            msk,
            pos,
            blocks,
            norm_w,
            norm_b,
            proj_w,
            head_w,
            dec_w,
            dec_b,
        };
        Ok(Self { config, layout, template: p })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Zero-valued parameter store with this model's structure.
    pub fn zero_params(&self) -> Params {
        self.template.clone()
    }

    /// Random initialization: normal(0, 0.02) for weights, tokens and
    /// positional embeddings; zero biases; unit LayerNorm gains. Classifier
    /// rows are normalized.
    pub fn init_params(&self, rng: &mut impl Rng) -> Params {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut p = self.template.clone();
        for t in p.tensors_mut() {
            let is_norm_gain = t.name.ends_with("norm1.weight")
                || t.name.ends_with("norm2.weight")
                || t.name == "norm.weight";
            if is_norm_gain {
                t.data.iter_mut().for_each(|v| *v = 1.0);
            } else if t.name.ends_with(".bias") {
                continue;
            } else {
                t.data.iter_mut().for_each(|v| *v = normal.sample(rng));
            }
        }
        let k = self.config.num_classes;
        let dim = self.config.proj_dim;
        let head = p.get_mut(self.layout.head_w);
        for r in 0..k {
            let row = &mut head[r * dim..(r + 1) * dim];
            let n = norm2(row);
            row.iter_mut().for_each(|v| *v /= n);
        }
        p
    }

    /// Copies a classifier head into the parameter store.
    pub fn install_head(&self, params: &mut Params, head: &ClassifierHead) -> Result<()> {
        if head.num_classes() != self.config.num_classes || head.dim() != self.config.proj_dim {
            return Err(invalid_input(format!(
                "head is {}x{}, model expects {}x{}",
                head.num_classes(),
                head.dim(),
                self.config.num_classes,
                self.config.proj_dim
            )));
        }
        params.get_mut(self.layout.head_w).copy_from_slice(head.weights());
        Ok(())
    }

    pub fn head_id(&self) -> ParamId {
        self.layout.head_w
    }

    pub fn msk_token_id(&self) -> ParamId {
        self.layout.msk
    }

    pub fn decoder_ids(&self) -> (ParamId, ParamId) {
        (self.layout.dec_w, self.layout.dec_b)
    }

    pub fn projection_id(&self) -> ParamId {
        self.layout.proj_w
    }

    pub fn head_weights<'a>(&self, params: &'a Params) -> &'a [f64] {
        params.get(self.layout.head_w)
    }

    /// Optimizer grouping for every parameter, in store order.
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let top = self.config.depth + 1;
        self.template
            .tensors()
            .iter()
            .map(|t| {
                let depth = if let Some(rest) = t.name.strip_prefix("blocks.") {
                    rest.split('.').next().and_then(|i| i.parse::<usize>().ok()).map_or(top, |i| i + 1)
                } else if matches!(
                    t.name.as_str(),
                    "patch_embed.weight" | "patch_embed.bias" | "cls_token" | "msk_token" | "pos_embed"
                ) {
                    0
                } else {
                    top
                };
                let weight_decay = t.shape.len() >= 2 && t.name.ends_with(".weight");
                ParamGroup { depth, weight_decay, classifier: t.name == "head.weight" }
            })
            .collect()
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.config.image_size;
        if image.width() != s || image.height() != s {
            return Err(invalid_input(format!(
                "image is {}x{}, model expects {s}x{s}",
                image.width(),
                image.height()
            )));
        }
        Ok(())
    }

    pub fn forward_tokens(&self, params: &Params, image: &Image, mask: Option<&MaskSpec>) -> Result<TokenOutputs> {
        self.forward_with_cache(params, image, mask).map(|(o, _)| o)
    }

    pub fn forward_batch(
        &self,
        params: &Params,
        images: &[Image],
        masks: Option<&[MaskSpec]>,
    ) -> Result<Vec<TokenOutputs>> {
        if let Some(m) = masks {
            if m.len() != images.len() {
                return Err(invalid_input("one mask per image required"));
            }
        }
        images
            .iter()
            .enumerate()
            .map(|(i, img)| self.forward_tokens(params, img, masks.map(|m| &m[i])))
            .collect()
    }

    pub fn forward_with_cache(
        &self,
        params: &Params,
        image: &Image,
        mask: Option<&MaskSpec>,
    ) -> Result<(TokenOutputs, ForwardCache)> {
        self.check_image(image)?;
        let cfg = &self.config;
        let l = &self.layout;
        let (d, g, t) = (cfg.embed_dim, cfg.num_patches(), cfg.seq_len());
        let nval = cfg.patch_values();
        if let Some(m) = mask {
            if m.geometry().grid != cfg.grid() || m.geometry().patch_px != cfg.patch_size {
                return Err(invalid_input("mask geometry does not match the patch grid"));
            }
            if let Some(&bad) = m.masked_indices().iter().find(|&&i| i >= g) {
                return Err(invalid_input(format!("mask index {bad} out of range for {g} patches")));
            }
        }
        let patches: Vec<f64> = image.patchify(cfg.patch_size)?.into_iter().flatten().collect();
        let mut emb = linear(&patches, g, params.get(l.patch_w), Some(params.get(l.patch_b)), nval, d);
        let mut masked = vec![false; g];
        if let Some(m) = mask {
            apply_mask(&mut emb, d, m, params.get(l.msk))?;
            for &i in m.masked_indices() {
                masked[i] = true;
            }
        }
        let mut x = Vec::with_capacity(t * d);
        x.extend_from_slice(params.get(l.cls));
        x.extend_from_slice(&emb);
        add_assign(&mut x, params.get(l.pos));

        let mut blocks = Vec::with_capacity(cfg.depth);
        let hidden = MLP_RATIO * d;
        for b in &l.blocks {
            let (h1, ln1) = layer_norm(&x, t, d, params.get(b.norm1_w), params.get(b.norm1_b));
            let w = AttentionWeights {
                qkv_w: params.get(b.qkv_w),
                qkv_b: params.get(b.qkv_b),
                out_w: params.get(b.attn_out_w),
                out_b: params.get(b.attn_out_b),
            };
            let (a, attn) = attention(&h1, t, d, cfg.num_heads, &w);
            let mut x_mid = x;
            add_assign(&mut x_mid, &a);
            let (h2, ln2) = layer_norm(&x_mid, t, d, params.get(b.norm2_w), params.get(b.norm2_b));
            let fc1_out = linear(&h2, t, params.get(b.fc1_w), Some(params.get(b.fc1_b)), d, hidden);
            let act = gelu(&fc1_out);
            let m = linear(&act, t, params.get(b.fc2_w), Some(params.get(b.fc2_b)), hidden, d);
            let mut x_out = x_mid;
            add_assign(&mut x_out, &m);
            blocks.push(BlockCache { ln1, attn, ln2, ln2_out: h2, fc1_out, act });
            x = x_out;
        }
        let (z, final_ln) = layer_norm(&x, t, d, params.get(l.norm_w), params.get(l.norm_b));

        let attn_last = blocks.last().map(|b| b.attn.probs.clone()).unwrap_or_default();
        let row = |i: usize| z[i * d..(i + 1) * d].to_vec();
        let mut out = TokenOutputs {
            cls_embed: row(0),
            msk_embeds: Vec::new(),
            msk_positions: Vec::new(),
            patch_embeds: Vec::new(),
            patch_positions: Vec::new(),
            attn_last,
            num_heads: cfg.num_heads,
            seq_len: t,
        };
        for (i, &is_masked) in masked.iter().enumerate() {
            if is_masked {
                out.msk_embeds.push(row(i + 1));
                out.msk_positions.push(i);
            } else {
                out.patch_embeds.push(row(i + 1));
                out.patch_positions.push(i);
            }
        }
        Ok((out, ForwardCache { patches, masked, blocks, final_ln }))
    }

    /// Backpropagates `dz` (`T × embed_dim`, one row per output token with
    /// `[CLS]` first) into `grads`.
    pub fn backward_tokens(&self, params: &Params, cache: &ForwardCache, dz: &[f64], grads: &mut Params) {
        let cfg = &self.config;
        let l = &self.layout;
        let (d, g, t) = (cfg.embed_dim, cfg.num_patches(), cfg.seq_len());
        let hidden = MLP_RATIO * d;
        let mut dx = {
            let (mut gw, mut gb) = (vec![0.0; d], vec![0.0; d]);
            let dx = layer_norm_backward(dz, &cache.final_ln, d, params.get(l.norm_w), &mut gw, &mut gb);
            add_assign(grads.get_mut(l.norm_w), &gw);
            add_assign(grads.get_mut(l.norm_b), &gb);
            dx
        };
        for (b, c) in l.blocks.iter().zip(&cache.blocks).rev() {
            // x_out = x_mid + fc2(gelu(fc1(ln2(x_mid))))
            let mut g_fc2_w = vec![0.0; hidden * d];
            let mut g_fc2_b = vec![0.0; d];
            let d_act = linear_backward(&c.act, &dx, t, params.get(b.fc2_w), hidden, d, &mut g_fc2_w, Some(&mut g_fc2_b));
            let d_fc1 = gelu_backward(&c.fc1_out, &d_act);
            let mut g_fc1_w = vec![0.0; d * hidden];
            let mut g_fc1_b = vec![0.0; hidden];
            let d_h2 =
                linear_backward(&c.ln2_out, &d_fc1, t, params.get(b.fc1_w), d, hidden, &mut g_fc1_w, Some(&mut g_fc1_b));
            let (mut g_n2w, mut g_n2b) = (vec![0.0; d], vec![0.0; d]);
            let d_mid_ln = layer_norm_backward(&d_h2, &c.ln2, d, params.get(b.norm2_w), &mut g_n2w, &mut g_n2b);
            let mut d_mid = dx;
            add_assign(&mut d_mid, &d_mid_ln);

            // x_mid = x_in + attn(ln1(x_in))
            let w = AttentionWeights {
                qkv_w: params.get(b.qkv_w),
                qkv_b: params.get(b.qkv_b),
                out_w: params.get(b.attn_out_w),
                out_b: params.get(b.attn_out_b),
            };
            let mut gq = vec![0.0; d * 3 * d];
            let mut gqb = vec![0.0; 3 * d];
            let mut go = vec![0.0; d * d];
            let mut gob = vec![0.0; d];
            let d_h1 = attention_backward(
                &d_mid,
                &c.attn,
                t,
                d,
                cfg.num_heads,
                &w,
                AttentionGrads { qkv_w: &mut gq, qkv_b: &mut gqb, out_w: &mut go, out_b: &mut gob },
            );
            let (mut g_n1w, mut g_n1b) = (vec![0.0; d], vec![0.0; d]);
            let d_in_ln = layer_norm_backward(&d_h1, &c.ln1, d, params.get(b.norm1_w), &mut g_n1w, &mut g_n1b);
            let mut d_in = d_mid;
            add_assign(&mut d_in, &d_in_ln);

            for (id, gv) in [
                (b.fc2_w, g_fc2_w),
                (b.fc2_b, g_fc2_b),
                (b.fc1_w, g_fc1_w),
                (b.fc1_b, g_fc1_b),
                (b.norm2_w, g_n2w),
                (b.norm2_b, g_n2b),
                (b.qkv_w, gq),
                (b.qkv_b, gqb),
                (b.attn_out_w, go),
                (b.attn_out_b, gob),
                (b.norm1_w, g_n1w),
                (b.norm1_b, g_n1b),
            ] {
                add_assign(grads.get_mut(id), &gv);
            }
            dx = d_in;
        }
        // embeddings
        add_assign(grads.get_mut(l.pos), &dx);
        add_assign(grads.get_mut(l.cls), &dx[..d]);
        let mut d_emb = dx[d..].to_vec();
        {
            let g_msk = grads.get_mut(l.msk);
            for (i, &m) in cache.masked.iter().enumerate() {
                if m {
                    add_assign(g_msk, &d_emb[i * d..(i + 1) * d]);
                    d_emb[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        let nval = cfg.patch_values();
        let mut gpw = vec![0.0; nval * d];
        let mut gpb = vec![0.0; d];
        linear_backward(&cache.patches, &d_emb, g, params.get(l.patch_w), nval, d, &mut gpw, Some(&mut gpb));
        add_assign(grads.get_mut(l.patch_w), &gpw);
        add_assign(grads.get_mut(l.patch_b), &gpb);
    }

    /// `h(z)`: bias-free linear map to `proj_dim` followed by ℓ2 normalization.
    pub fn project(&self, params: &Params, z: &[f64]) -> Result<ProjectedFeature> {
        self.project_with_cache(params, z).map(|c| c.v)
    }

    pub fn project_with_cache(&self, params: &Params, z: &[f64]) -> Result<ProjectionCache> {
        let d = self.config.embed_dim;
        if z.len() != d {
            return Err(invalid_input(format!("embedding has {} values, expected {d}", z.len())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(invalid_input("non-finite embedding"));
        }
        let u = linear(z, 1, params.get(self.layout.proj_w), None, d, self.config.proj_dim);
        let v = l2_normalize(&u)?;
        Ok(ProjectionCache { z: z.to_vec(), u, v })
    }

    /// Returns the gradient with respect to the projected token embedding.
    pub fn project_backward(&self, params: &Params, cache: &ProjectionCache, dv: &[f64], grads: &mut Params) -> Vec<f64> {
        let du = l2_normalize_backward(&cache.u, cache.v.as_slice(), dv);
        let d = self.config.embed_dim;
        let dp = self.config.proj_dim;
        let mut gw = vec![0.0; d * dp];
        let dz = linear_backward(&cache.z, &du, 1, params.get(self.layout.proj_w), d, dp, &mut gw, None);
        add_assign(grads.get_mut(self.layout.proj_w), &gw);
        dz
    }

    /// Logits from the classifier stored in `params`.
    pub fn classify_params(&self, params: &Params, v: &ProjectedFeature) -> Result<Vec<f64>> {
        logits_from_rows(params.get(self.layout.head_w), self.config.proj_dim, self.config.logit_scale, v.as_slice())
    }

    /// Accumulates the classifier gradient and returns `∂/∂v`.
    pub fn classify_backward(&self, params: &Params, v: &ProjectedFeature, dlogits: &[f64], grads: &mut Params) -> Vec<f64> {
        let dim = self.config.proj_dim;
        let s = self.config.logit_scale;
        let w = params.get(self.layout.head_w);
        let mut dv = vec![0.0; dim];
        let gw = grads.get_mut(self.layout.head_w);
        for (k, &g) in dlogits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w[k * dim..(k + 1) * dim];
            for j in 0..dim {
                gw[k * dim + j] += s * g * v.as_slice()[j];
                dv[j] += s * g * row[j];
            }
        }
        dv
    }

    /// Linear pixel decoder: `N = 3·p²` raw values, no activation.
    pub fn decode_pixels(&self, params: &Params, z: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.embed_dim;
        if z.len() != d {
            return Err(invalid_input(format!("embedding has {} values, expected {d}", z.len())));
        }
        let (w, b) = (params.get(self.layout.dec_w), params.get(self.layout.dec_b));
        Ok(linear(z, 1, w, Some(b), d, self.config.patch_values()))
    }

    pub fn decode_backward(&self, params: &Params, z: &[f64], dy: &[f64], grads: &mut Params) -> Vec<f64> {
        let d = self.config.embed_dim;
        let n = self.config.patch_values();
        let mut gw = vec![0.0; d * n];
        let mut gb = vec![0.0; n];
        let dz = linear_backward(z, dy, 1, params.get(self.layout.dec_w), d, n, &mut gw, Some(&mut gb));
        add_assign(grads.get_mut(self.layout.dec_w), &gw);
        add_assign(grads.get_mut(self.layout.dec_b), &gb);
        dz
    }

    /// Projected `[CLS]` feature of an unmasked forward.
    pub fn image_feature(&self, params: &Params, image: &Image) -> Result<ProjectedFeature> {
        let out = self.forward_tokens(params, image, None)?;
        self.project(params, &out.cls_embed)
    }

    /// Head-averaged last-layer attention from `[CLS]` to each patch,
    /// min-max scaled to `[0, 1]`. Constant scores give an all-zero map.
    pub fn cls_attention_map(&self, params: &Params, image: &Image) -> Result<Vec<f64>> {
        let out = self.forward_tokens(params, image, None)?;
        Ok(cls_attention_from(&out))
    }
}

pub fn cls_attention_from(out: &TokenOutputs) -> Vec<f64> {
    let t = out.seq_len;
    let g = t - 1;
    let mut scores = vec![0.0; g];
    for h in 0..out.num_heads {
        let row = &out.attn_last[h * t * t..h * t * t + t];
        for (s, &a) in scores.iter_mut().zip(&row[1..]) {
            *s += a / out.num_heads as f64;
        }
    }
    minmax_normalize(&scores)
}

pub fn minmax_normalize(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 0.0 || !span.is_finite() {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / span).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::sample_mask;
    use crate::rng::rng_from;

    fn small() -> (Vit, Params) {
        let cfg = ModelConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            proj_dim: 8,
            num_classes: 3,
            logit_scale: 100.0,
        };
        let vit = Vit::new(cfg).unwrap();
        let params = vit.init_params(&mut rng_from(0));
        (vit, params)
    }

    fn test_image(seed: u64) -> Image {
        use rand::Rng;
        let mut rng = rng_from(seed);
        Image::new(32, 32, (0..32 * 32 * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn token_counts_follow_grid() {
        let (vit, params) = small();
        let img = test_image(1);
        let out = vit.forward_tokens(&params, &img, None).unwrap();
        assert_eq!(out.patch_embeds.len(), 64);
        assert_eq!(out.msk_embeds.len(), 0);
        assert_eq!(out.cls_embed.len(), 16);

        let geo = vit.config().mask_geometry(8).unwrap();
        let mask = sample_mask(geo, 0.25, 3).unwrap();
        assert_eq!(mask.len(), 16);
        let out = vit.forward_tokens(&params, &img, Some(&mask)).unwrap();
        assert_eq!(out.msk_embeds.len(), 16);
        assert_eq!(out.patch_embeds.len(), 48);
        assert_eq!(out.msk_positions, mask.masked_indices());
    }

    #[test]
    fn forward_is_deterministic() {
        let (vit, params) = small();
        let img = test_image(2);
        let geo = vit.config().mask_geometry(8).unwrap();
        let mask = sample_mask(geo, 0.3, 5).unwrap();
        let a = vit.forward_tokens(&params, &img, Some(&mask)).unwrap();
        let b = vit.forward_tokens(&params, &img, Some(&mask)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let (vit, params) = small();
        let out = vit.forward_tokens(&params, &test_image(3), None).unwrap();
        let t = out.seq_len;
        for r in 0..out.num_heads * t {
            let row = &out.attn_last[r * t..(r + 1) * t];
            assert!(row.iter().all(|&a| a >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn msk_token_irrelevant_without_mask() {
        let (vit, mut params) = small();
        let img = test_image(4);
        let a = vit.forward_tokens(&params, &img, None).unwrap();
        params.get_mut(vit.msk_token_id()).iter_mut().for_each(|v| *v = 7.5);
        let b = vit.forward_tokens(&params, &img, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masked_input_is_msk_token_plus_position() {
        // With depth 0 blocks the output is LN(input); compare the masked row
        // against LN(msk + pos) computed by hand.
        let cfg = ModelConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 4,
            depth: 1,
            num_heads: 1,
            proj_dim: 2,
            num_classes: 2,
            logit_scale: 1.0,
        };
        let vit = Vit::new(cfg).unwrap();
        let mut params = vit.init_params(&mut rng_from(9));
        // zero out the residual branches so the block is the identity
        for t in params.tensors_mut() {
            if t.name.contains("attn.proj") || t.name.contains("mlp.fc2") {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let geo = vit.config().mask_geometry(4).unwrap();
        let mask = MaskSpec::from_indices(geo, vec![2]).unwrap();
        let out = vit.forward_tokens(&params, &test_image(5).clone_resized_8(), Some(&mask)).unwrap();
        let pos = params.get(params.find("pos_embed").unwrap());
        let msk = params.get(vit.msk_token_id());
        let input: Vec<f64> = (0..4).map(|j| msk[j] + pos[3 * 4 + j]).collect();
        let (want, _) = layer_norm(&input, 1, 4, &[1.0; 4], &[0.0; 4]);
        for (a, b) in out.msk_embeds[0].iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    impl Image {
        fn clone_resized_8(&self) -> Image {
            let mut data = Vec::new();
            for y in 0..8 {
                for x in 0..8 {
                    data.extend_from_slice(&self.pixel(x, y));
                }
            }
            Image::new(8, 8, data).unwrap()
        }
    }

    #[test]
    fn shape_errors() {
        let (vit, params) = small();
        let img = Image::filled(16, 16, [0.5; 3]);
        assert!(matches!(vit.forward_tokens(&params, &img, None), Err(MustError::InvalidInput(_))));
        let bad_geo = MaskGeometry::new(8, 4, 4).unwrap();
        let big = MaskSpec::from_indices(MaskGeometry::new(16, 4, 4).unwrap(), vec![100]).unwrap();
        assert!(vit.forward_tokens(&params, &test_image(1), Some(&big)).is_err());
        let ok = MaskSpec::from_indices(bad_geo, vec![63]).unwrap();
        assert!(vit.forward_tokens(&params, &test_image(1), Some(&ok)).is_ok());
    }

    #[test]
    fn projection_examples() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((v.as_slice()[1] - 0.8).abs() < 1e-15);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(MustError::DegenerateProjection)));

        let (vit, params) = small();
        let z: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let z2: Vec<f64> = z.iter().map(|v| 2.0 * v).collect();
        let a = vit.project(&params, &z).unwrap();
        let b = vit.project(&params, &z2).unwrap();
        assert!((norm2(a.as_slice()) - 1.0).abs() < 1e-12);
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn classify_examples() {
        let head = ClassifierHead::from_rows(vec![1.0, 0.0, 0.0, 1.0], 2, vec!["a".into(), "b".into()], 100.0).unwrap();
        let v = l2_normalize(&[0.6, 0.8]).unwrap();
        let logits = classify(&v, &head).unwrap();
        assert!((logits[0] - 60.0).abs() < 1e-12);
        assert!((logits[1] - 80.0).abs() < 1e-12);
        let wrong = l2_normalize(&[1.0, 0.0, 0.0]).unwrap();
        assert!(classify(&wrong, &head).is_err());
    }

    #[test]
    fn decoder_shapes() {
        let (vit, mut params) = small();
        let z = vec![0.3; 16];
        assert_eq!(vit.decode_pixels(&params, &z).unwrap().len(), 48);
        let (w, b) = vit.decoder_ids();
        params.get_mut(w).iter_mut().for_each(|v| *v = 0.0);
        params.get_mut(b).iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        let y = vit.decode_pixels(&params, &[9.0; 16]).unwrap();
        assert_eq!(y, (0..48).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn heatmap_minmax() {
        let (vit, params) = small();
        let h = vit.cls_attention_map(&params, &test_image(6)).unwrap();
        assert_eq!(h.len(), 64);
        let lo = h.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
        assert_eq!(minmax_normalize(&[0.2; 5]), vec![0.0; 5]);
    }

    #[test]
    fn param_groups_cover_depths() {
        let (vit, params) = small();
        let groups = vit.param_groups();
        assert_eq!(groups.len(), params.len());
        for (t, g) in params.tensors().iter().zip(&groups) {
            match t.name.as_str() {
                "pos_embed" | "cls_token" | "msk_token" => {
                    assert_eq!(g.depth, 0);
                    assert!(!g.weight_decay);
                }
                "patch_embed.weight" => assert!(g.depth == 0 && g.weight_decay),
                "blocks.1.attn.qkv.weight" => assert!(g.depth == 2 && g.weight_decay),
                "blocks.0.norm1.weight" => assert!(g.depth == 1 && !g.weight_decay),
                "head.weight" => assert!(g.depth == 3 && g.classifier && g.weight_decay),
                "decoder.bias" => assert!(g.depth == 3 && !g.weight_decay),
                _ => {}
            }
        }
    }
}
