use crate::error::{MustError, Result};
use crate::params::Params;

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Params,
    pub v: Params,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &Params) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    /// One update. `lrs[i]` is the learning rate of tensor `i`; tensors with
    /// `frozen[i]` are skipped entirely, and weight decay applies only where
    /// `decay[i]` holds.
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &Params,
        lrs: &[f64],
        weight_decay: f64,
        decay: &[bool],
        frozen: &[bool],
    ) -> Result<()> {
        params.check_same_structure(grads)?;
        params.check_same_structure(&self.m)?;
        let n = params.len();
        if lrs.len() != n || decay.len() != n || frozen.len() != n {
            return Err(MustError::InvalidState("optimizer group metadata length mismatch".into()));
        }
        self.t += 1;
        let (b1, b2) = ADAM_BETAS;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let tensors = params.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for i in 0..n {
            if frozen[i] {
                continue;
            }
            let lr = lrs[i];
            let g = &grads.tensors()[i].data;
            let p = &mut tensors[i].data;
            let m = &mut ms[i].data;
            let v = &mut vs[i].data;
            let shrink = if decay[i] { 1.0 - lr * weight_decay } else { 1.0 };
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] * shrink - lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
