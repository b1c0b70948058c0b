use crate::augment::{strong_augment, weak_augment};
use crate::error::{invalid_config, invalid_input, MustError, Result};
use crate::image::Image;
use crate::linalg::{add_assign, softmax, softmax_backward};
use crate::losses::{loss_align, loss_cls, loss_mim, loss_reg, loss_total, LossBreakdown, LossParts, RunningMeanState, TopK};
use crate::masking::{sample_mask, MaskSpec};
use crate::model::Vit;
use crate::params::Params;
use crate::rng::{sample_seed, ViewTag};
use crate::teacher::TeacherState;

use super::optim::AdamW;
use super::{cosine_lr, layerwise_lrs, scaled_lr, TrainConfig};

/// Inputs of one student update that do not depend on the student
/// parameters: strong views, their masks, and the teacher's probabilities.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub strong: Vec<Image>,
    pub masks: Vec<MaskSpec>,
    pub teacher_probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub threshold: f64,
    pub lambda_reg: f64,
    pub lambda_align: f64,
    pub top_k: TopK,
    pub use_moving_average: bool,
    pub unmasked_cls_forward: bool,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub breakdown: LossBreakdown,
    pub grads: Params,
    /// Log-clamp hits in the self-training and fairness terms.
    pub clamped: usize,
}

struct SampleState {
    masked_cache: crate::model::ForwardCache,
    cls_cache: Option<crate::model::ForwardCache>,
    cls_proj: crate::model::ProjectionCache,
    probs: Vec<f64>,
    msk_z: Vec<Vec<f64>>,
    msk_proj: Vec<crate::model::ProjectionCache>,
    msk_pos: Vec<usize>,
}

/// Total loss of one batch and its gradient with respect to every student
/// parameter. `running` is updated in place when the moving average is on.
pub fn batch_objective(
    vit: &Vit,
    params: &Params,
    batch: &PreparedBatch,
    cfg: &ObjectiveConfig,
    running: &mut RunningMeanState,
) -> Result<ObjectiveOutput> {
    let b = batch.strong.len();
    if b == 0 || batch.masks.len() != b || batch.teacher_probs.len() != b {
        return Err(invalid_input("prepared batch is empty or inconsistent"));
    }
    let patch = vit.config().patch_size;

    let mut samples = Vec::with_capacity(b);
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for (img, mask) in batch.strong.iter().zip(&batch.masks) {
        let (out, masked_cache) = vit.forward_with_cache(params, img, Some(mask))?;
        let (cls_z, cls_cache) = if cfg.unmasked_cls_forward {
            let (o, c) = vit.forward_with_cache(params, img, None)?;
            (o.cls_embed, Some(c))
        } else {
            (out.cls_embed.clone(), None)
        };
        let cls_proj = vit.project_with_cache(params, &cls_z)?;
        let probs = softmax(&vit.classify_params(params, &cls_proj.v)?);
        let tiles = if out.msk_positions.is_empty() { Vec::new() } else { img.patchify(patch)? };
        let mut msk_proj = Vec::with_capacity(out.msk_embeds.len());
        for (z, &pos) in out.msk_embeds.iter().zip(&out.msk_positions) {
            preds.push(vit.decode_pixels(params, z)?);
            targets.push(tiles[pos].clone());
            msk_proj.push(vit.project_with_cache(params, z)?);
        }
        samples.push(SampleState {
            masked_cache,
            cls_cache,
            cls_proj,
            probs,
            msk_z: out.msk_embeds,
            msk_proj,
            msk_pos: out.msk_positions,
        });
    }

    let student: Vec<Vec<f64>> = samples.iter().map(|s| s.probs.clone()).collect();
    let cls = loss_cls(&student, &batch.teacher_probs, cfg.threshold)?;
    let reg = loss_reg(&student, running, cfg.use_moving_average)?;
    let mim = loss_mim(&preds, &targets)?;
    let v_c: Vec<Vec<f64>> = samples.iter().map(|s| s.cls_proj.v.as_slice().to_vec()).collect();
    let v_m: Vec<Vec<Vec<f64>>> = samples
        .iter()
        .map(|s| s.msk_proj.iter().map(|p| p.v.as_slice().to_vec()).collect())
        .collect();
    let align = loss_align(&v_c, &v_m, cfg.top_k)?;
    let breakdown = loss_total(
        LossParts { l_cls: cls.value, l_reg: reg.value, l_mim: mim.value, l_align: align.value, keep_rate: cls.keep_rate },
        cfg.lambda_reg,
        cfg.lambda_align,
    );

    let cfgm = vit.config();
    let (d, t) = (cfgm.embed_dim, cfgm.seq_len());
    let mut grads = params.zeros_like();
    let mut mim_row = 0;
    for (i, s) in samples.iter().enumerate() {
        let mut dp = cls.grad[i].clone();
        for (g, r) in dp.iter_mut().zip(&reg.grad[i]) {
            *g += cfg.lambda_reg * r;
        }
        let dlogits = softmax_backward(&s.probs, &dp);
        let mut dv_c = vit.classify_backward(params, &s.cls_proj.v, &dlogits, &mut grads);
        for (g, a) in dv_c.iter_mut().zip(&align.grad_cls[i]) {
            *g += cfg.lambda_align * a;
        }
        let dz_cls = vit.project_backward(params, &s.cls_proj, &dv_c, &mut grads);

        let mut dz = vec![0.0; t * d];
        for (j, (z, pos)) in s.msk_z.iter().zip(&s.msk_pos).enumerate() {
            let mut dzm = vit.decode_backward(params, z, &mim.grad[mim_row], &mut grads);
            mim_row += 1;
            let dv_m: Vec<f64> = align.grad_msk[i][j].iter().map(|g| cfg.lambda_align * g).collect();
            add_assign(&mut dzm, &vit.project_backward(params, &s.msk_proj[j], &dv_m, &mut grads));
            let row = 1 + pos;
            add_assign(&mut dz[row * d..(row + 1) * d], &dzm);
        }
        match &s.cls_cache {
            Some(cache) => {
                let mut dz_u = vec![0.0; t * d];
                dz_u[..d].copy_from_slice(&dz_cls);
                vit.backward_tokens(params, cache, &dz_u, &mut grads);
            }
            None => add_assign(&mut dz[..d], &dz_cls),
        }
        vit.backward_tokens(params, &s.masked_cache, &dz, &mut grads);
    }
    Ok(ObjectiveOutput { breakdown, grads, clamped: cls.clamped + reg.clamped })
}

/// Student, EMA teacher, optimizer and bookkeeping for one adaptation run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub(crate) vit: Vit,
    pub params: Params,
    pub teacher: TeacherState,
    pub optim: AdamW,
    pub running_mean: RunningMeanState,
    pub(crate) config: TrainConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub steps_per_epoch: u64,
    pub clamp_warnings: u64,
}

impl Trainer {
    pub fn new(vit: Vit, params: Params, config: TrainConfig, train_size: usize) -> Result<Self> {
        config.validate()?;
        if train_size == 0 {
            return Err(invalid_config("training set is empty"));
        }
        vit.zero_params().check_same_structure(&params)?;
        vit.config().mask_geometry(config.mask_patch_size)?;
        let schedule = config.ema_schedule()?;
        let running_mean = RunningMeanState::new(vit.config().num_classes, config.mean_momentum)?;
        Ok(Self {
            teacher: TeacherState::init(&params, schedule),
            optim: AdamW::new(&params),
            running_mean,
            steps_per_epoch: train_size.div_ceil(config.batch_size) as u64,
            vit,
            params,
            config,
            step: 0,
            clamp_warnings: 0,
        })
    }

    pub fn vit(&self) -> &Vit {
        &self.vit
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch * self.config.epochs as u64
    }

    pub fn current_epoch(&self) -> u64 {
        self.step / self.steps_per_epoch
    }

    /// Peak learning rate after batch scaling.
    pub fn peak_lr(&self) -> f64 {
        scaled_lr(self.config.base_lr, self.config.batch_size)
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step, self.total_steps(), self.peak_lr())
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            threshold: self.config.threshold,
            lambda_reg: self.config.lambda_reg,
            lambda_align: self.config.lambda_align,
            top_k: self.config.align_top_k,
            use_moving_average: false,
            unmasked_cls_forward: self.config.unmasked_cls_forward,
        }
    }

    /// Augments the batch, samples masks and runs the teacher on the weak
    /// views. `indices` are dataset positions used for seed derivation.
    pub fn prepare_batch(&self, images: &[&Image], indices: &[usize], epoch: u64) -> Result<PreparedBatch> {
        let size = self.vit.config().image_size;
        let geo = self.vit.config().mask_geometry(self.config.mask_patch_size)?;
        let seed = self.config.seed;
        let mut strong = Vec::with_capacity(images.len());
        let mut masks = Vec::with_capacity(images.len());
        let mut teacher_probs = Vec::with_capacity(images.len());
        for (img, &idx) in images.iter().zip(indices) {
            let idx = idx as u64;
            let weak = weak_augment(img, size, sample_seed(seed, epoch, idx, ViewTag::Weak))?;
            strong.push(strong_augment(img, size, sample_seed(seed, epoch, idx, ViewTag::Strong), &self.config.strong)?);
            masks.push(sample_mask(geo, self.config.mask_ratio, sample_seed(seed, epoch, idx, ViewTag::Mask))?);
            let v = self.vit.image_feature(&self.teacher.delta, &weak)?;
            teacher_probs.push(softmax(&self.vit.classify_params(&self.teacher.delta, &v)?));
        }
        Ok(PreparedBatch { strong, masks, teacher_probs })
    }

    /// Loss and gradients at the current student parameters, without
    /// touching any state.
    pub fn evaluate_objective(&self, batch: &PreparedBatch) -> Result<ObjectiveOutput> {
        let mut running = self.running_mean.clone();
        let mut cfg = self.objective_config();
        cfg.use_moving_average = self.uses_moving_average(batch.strong.len());
        batch_objective(&self.vit, &self.params, batch, &cfg, &mut running)
    }

    fn uses_moving_average(&self, batch_len: usize) -> bool {
        self.vit.config().num_classes > batch_len
    }

    /// One optimizer step on a prepared batch followed by the EMA update.
    pub fn step_on(&mut self, batch: &PreparedBatch) -> Result<LossBreakdown> {
        let mut cfg = self.objective_config();
        // the trigger uses the nominal batch size so a short final batch does not flip modes
        cfg.use_moving_average = self.uses_moving_average(self.config.batch_size);
        let mut running = self.running_mean.clone();
        let out = batch_objective(&self.vit, &self.params, batch, &cfg, &mut running)?;
        if !out.breakdown.is_finite() || !out.grads.is_finite() {
            return Err(MustError::NonFiniteLoss { step: self.step, breakdown: out.breakdown });
        }
        let groups = self.vit.param_groups();
        let group_lrs = layerwise_lrs(self.current_lr(), self.config.layer_decay, self.vit.config().depth);
        let lrs: Vec<f64> = groups.iter().map(|g| group_lrs[g.depth]).collect();
        let decay: Vec<bool> = groups.iter().map(|g| g.weight_decay).collect();
        let frozen: Vec<bool> = groups.iter().map(|g| g.classifier && self.config.freeze_classifier).collect();
        self.optim.step(&mut self.params, &out.grads, &lrs, self.config.weight_decay, &decay, &frozen)?;
        self.teacher.update(&self.params)?;
        self.running_mean = running;
        self.clamp_warnings += out.clamped as u64;
        self.step += 1;
        Ok(out.breakdown)
    }

    /// Prepares and trains on one batch.
    pub fn train_step(&mut self, images: &[&Image], indices: &[usize], epoch: u64) -> Result<LossBreakdown> {
        let batch = self.prepare_batch(images, indices, epoch)?;
        self.step_on(&batch)
    }
}
