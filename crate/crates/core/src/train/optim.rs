use std::collections::BTreeMap;

use usfnet_autograd::Tensor;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// `lr_init * decay^(epoch / step)`, never below `lr_min`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let steps = epoch / cfg.lr_step_epochs.max(1);
    let lr = cfg.lr_init * cfg.lr_decay.powi(steps.min(i32::MAX as usize) as i32);
    lr.max(cfg.lr_min)
}

/// SGD with heavy-ball momentum and coupled L2 weight decay:
/// `g += wd * p; v = mu * v + g; p -= lr * v`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    /// Applies one update. Gradients are first rescaled so that their global
    /// L2 norm is at most `clip`; returns the norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64, clip: Option<f64>) -> Result<f64> {
        let norm = grads.values().flat_map(|g| g.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Invalid(format!("non-finite gradient norm {norm}")));
        }
        let scale = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Invalid(format!("gradient shape mismatch for `{name}`")));
            }
            let v = self.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (mu, wd) = (self.momentum, self.weight_decay);
            let pd = p.data_mut();
            for ((pi, vi), gi) in pd.iter_mut().zip(v.data_mut()).zip(g.data()) {
                let d = gi * scale + wd * *pi;
                *vi = mu * *vi + d;
                *pi -= lr * *vi;
            }
        }
        Ok(norm)
    }
}
