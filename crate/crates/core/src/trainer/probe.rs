//! Frozen-feature linear probe used to check the fairness regularizer in
//! isolation from the backbone.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid_config, Result};
use crate::linalg::{softmax, softmax_backward};
use crate::losses::{kl_to_uniform, loss_cls, loss_reg, RunningMeanState};
use crate::params::{Params, Tensor};
use crate::rng::{derive_seed, rng_from};
use crate::teacher::TeacherState;

use super::AdamW;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Standard deviation of the per-class Gaussian clusters.
    pub spread: f64,
    /// Standard deviation of the feature noise in the strong view.
    pub view_noise: f64,
    /// Initial logit offset toward class 0.
    pub init_bias: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub threshold: f64,
    pub lambda_reg: f64,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            dim: 4,
            samples_per_class: 200,
            spread: 0.8,
            view_noise: 0.3,
            init_bias: 1.5,
            batch_size: 32,
            steps: 200,
            lr: 0.05,
            threshold: 0.5,
            lambda_reg: 1.0,
            ema_decay: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    /// Mean student prediction over the whole pool after training.
    pub mean_probs: Vec<f64>,
    pub kl_to_uniform: f64,
    pub accuracy: f64,
}

fn probs(params: &Params, x: &[f64], k: usize, d: usize) -> Vec<f64> {
    let (w, b) = (&params.tensors()[0].data, &params.tensors()[1].data);
    let logits: Vec<f64> = (0..k).map(|c| b[c] + (0..d).map(|j| w[c * d + j] * x[j]).sum::<f64>()).collect();
    softmax(&logits)
}

/// Self-trains a linear classifier on fixed Gaussian-mixture features with
/// an EMA teacher and the real self-training and fairness losses.
pub fn fairness_probe(cfg: &ProbeConfig) -> Result<ProbeResult> {
    let (k, d) = (cfg.num_classes, cfg.dim);
    if k < 2 || d == 0 || cfg.samples_per_class == 0 || cfg.batch_size == 0 {
        return Err(invalid_config("probe needs at least 2 classes and non-empty data"));
    }
    let mut rng = rng_from(derive_seed(cfg.seed, &[0]));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|c| (0..d).map(|j| if j == c % d { 2.0 } else { 0.0 }).collect())
        .collect();
    let mut xs = Vec::with_capacity(k * cfg.samples_per_class);
    let mut ys = Vec::with_capacity(k * cfg.samples_per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..cfg.samples_per_class {
            xs.push(center.iter().map(|m| m + cfg.spread * unit.sample(&mut rng)).collect::<Vec<f64>>());
            ys.push(c);
        }
    }

    // Prototype weights plus a bias that pulls predictions toward class 0.
    let mut w = Tensor::zeros("head.weight", &[k, d]);
    for (c, center) in centers.iter().enumerate() {
        w.data[c * d..(c + 1) * d].copy_from_slice(center);
    }
    let mut b = Tensor::zeros("head.bias", &[k]);
    b.data[0] = cfg.init_bias;
    let mut params = Params::from_tensors(vec![w, b]);
    let mut teacher = TeacherState::init(&params, crate::teacher::EmaSchedule { mu0: cfg.ema_decay, mu_n: 1, mu_max: cfg.ema_decay });
    let mut optim = AdamW::new(&params);
    let mut running = RunningMeanState::new(k, crate::losses::DEFAULT_MEAN_MOMENTUM)?;

    for _ in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..xs.len())).collect();
        let strong: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| xs[i].iter().map(|v| v + cfg.view_noise * unit.sample(&mut rng)).collect())
            .collect();
        let student: Vec<Vec<f64>> = strong.iter().map(|x| probs(&params, x, k, d)).collect();
        let teacher_p: Vec<Vec<f64>> = idx.iter().map(|&i| probs(&teacher.delta, &xs[i], k, d)).collect();
        let cls = loss_cls(&student, &teacher_p, cfg.threshold)?;
        let reg = loss_reg(&student, &mut running, false)?;

        let mut grads = params.zeros_like();
        for (n, x) in strong.iter().enumerate() {
            let dp: Vec<f64> = cls.grad[n].iter().zip(&reg.grad[n]).map(|(a, r)| a + cfg.lambda_reg * r).collect();
            let dl = softmax_backward(&student[n], &dp);
            let g = grads.tensors_mut();
            for (c, &dc) in dl.iter().enumerate().take(k) {
                for (w, &xj) in g[0].data[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *w += dc * xj;
                }
                g[1].data[c] += dc;
            }
        }
        optim.step(&mut params, &grads, &[cfg.lr, cfg.lr], 0.0, &[false, false], &[false, false])?;
        teacher.update_with_decay(&params, cfg.ema_decay)?;
    }

    let mut mean = vec![0.0; k];
    let mut correct = 0;
    for (x, &y) in xs.iter().zip(&ys) {
        let p = probs(&params, x, k, d);
        for (m, v) in mean.iter_mut().zip(&p) {
            *m += v / xs.len() as f64;
        }
        if crate::linalg::argmax(&p) == y {
            correct += 1;
        }
    }
    Ok(ProbeResult {
        kl_to_uniform: kl_to_uniform(&mean),
        mean_probs: mean,
        accuracy: correct as f64 / xs.len() as f64,
    })
}
