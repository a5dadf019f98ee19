//! Adam with serializable moment buffers.

use tch::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Settings for a network whose regularizer runs every `interval`
    /// steps, with the learning rate and betas rescaled to compensate for
    /// the extra, lazily applied gradient.
    pub fn lazy(lr: f64, beta1: f64, beta2: f64, interval: usize) -> Self {
        let c = if interval == 0 {
            1.0
        } else {
            interval as f64 / (interval as f64 + 1.0)
        };
        Self {
            lr: lr * c,
            beta1: beta1.powf(c),
            beta2: beta2.powf(c),
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    pub config: AdamConfig,
    params: Vec<(String, Tensor)>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: i64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: Vec<(String, Tensor)>) -> Self {
        let m = params.iter().map(|(_, p)| p.zeros_like().detach()).collect();
        let v = params.iter().map(|(_, p)| p.zeros_like().detach()).collect();
        Self {
            config,
            params,
            m,
            v,
            steps: 0,
        }
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn zero_grad(&self) {
        for (_, p) in &self.params {
            let mut g = p.grad();
            if g.defined() {
                let _ = g.detach_().zero_();
            }
        }
    }

    /// One update from the accumulated gradients. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self) -> Result<()> {
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.steps as f64;
        let bias1 = 1.0 - beta1.powf(t);
        let bias2 = 1.0 - beta2.powf(t);
        tch::no_grad(|| {
            for ((name, p), (m, v)) in self.params.iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
                let g = p.grad();
                let g = if g.defined() { g } else { p.zeros_like() };
                if !bool::try_from(g.isfinite().all()).unwrap_or(false) {
                    return Err(Error::NonFinite(format!("gradient of {name}")));
                }
                *m = &*m * beta1 + &g * (1.0 - beta1);
                *v = &*v * beta2 + g.square() * (1.0 - beta2);
                let update = (&*m / bias1) / ((&*v / bias2).sqrt() + eps) * lr;
                let _ = p.shallow_clone().f_sub_(&update)?;
            }
            Ok(())
        })
    }
}
