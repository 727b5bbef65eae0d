use crate::error::{invalid, NumericsError, Result};
use crate::params::ParamSet;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient (`g + wd·θ`).
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment accumulators mirroring the parameter shapes.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(invalid("adam", format!("learning rate must be > 0, got {}", config.lr)));
        }
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update. Parameters without a gradient entry are
    /// treated as having zero gradient. Nothing is modified if any gradient
    /// is non-finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        for (id, name, _) in params.iter() {
            if let Some(g) = grads.get(id) {
                if !g.all_finite() {
                    return Err(NumericsError::NonFiniteGradient(name.to_string()));
                }
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for id in params.ids() {
            let p = params.get_mut(id);
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for i in 0..p.len() {
                let theta = p.data()[i];
                let gi = g.map_or(0.0, |g| g.data()[i]) + c.weight_decay * theta;
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = c.lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                p.data_mut()[i] = theta - update;
            }
        }
        Ok(())
    }
}
