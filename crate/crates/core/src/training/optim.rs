use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamId, ParamStore, Tensor};

/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_at_step(step: u64, d: usize, warmup: u64) -> Result<f32> {
    if step == 0 {
        return Err(Error::Invalid("learning-rate steps start at 1".into()));
    }
    if warmup == 0 {
        return Err(Error::Config("warmup must be positive".into()));
    }
    let (s, w) = (step as f64, warmup as f64);
    Ok(((d as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))) as f32)
}

/// Adam with bias correction and a step counter per tensor, so tensors that
/// start training late get a fresh correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f32, beta2: f32, eps: f32) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Adam {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; store.len()],
        }
    }

    /// Applies one update to each tensor in `ids`.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        lr: f32,
        ids: &[ParamId],
    ) -> Result<()> {
        for &id in ids {
            let i = id.index();
            let g = grads.get(id);
            if g.shape() != store.get(id).shape() {
                return Err(Error::dim("adam", store.get(id).shape(), g.shape()));
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
