use serde::{Deserialize, Serialize};

use super::{Gradients, Params, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter of a [`Params`] store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        Self::with_hyper(params, AdamHyper::default())
    }

    pub fn with_hyper(params: &Params, hyper: AdamHyper) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            hyper,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &Gradients,
        lr: f64,
    ) -> Result<(), TensorError> {
        if params.len() != self.m.len() {
            return Err(TensorError::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        for id in params.ids() {
            let g = grads.wrt(id)?;
            if g.shape() != params.get(id).shape() {
                return Err(TensorError::mismatch(
                    "adam_step",
                    params.get(id).shape(),
                    g.shape(),
                ));
            }
        }
        self.t += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for id in params.ids() {
            let g = grads.wrt(id)?.data();
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(lr_max: f64, lr_min: f64, total_steps: usize) -> Result<Self, TensorError> {
        if !(lr_min <= lr_max) || total_steps < 1 {
            return Err(TensorError::InvalidArgument(format!(
                "cosine schedule needs lr_min <= lr_max and T >= 1 (got {lr_min}, {lr_max}, {total_steps})"
            )));
        }
        Ok(Self {
            lr_max,
            lr_min,
            total_steps,
        })
    }
}

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi t / T)) / 2` for `0 <= t <= T`.
pub fn cosine_lr(step: usize, sched: &CosineSchedule) -> Result<f64, TensorError> {
    if step > sched.total_steps {
        return Err(TensorError::InvalidArgument(format!(
            "step {step} beyond schedule length {}",
            sched.total_steps
        )));
    }
    let frac = step as f64 / sched.total_steps as f64;
    Ok(sched.lr_min
        + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}
