//! Training losses and evaluation metrics.

mod metrics;
mod ssim;

pub use metrics::{metric_suite, FrameMetrics, MetricTable, StepMetrics};
pub use ssim::{ms_ssim, ms_ssim_images, ssim_images, SsimParams, TERM_FLOOR};

use serde::{Deserialize, Serialize};
use usfnet_autograd::{Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Per-component losses and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_m: f64,
    pub l_ms: f64,
    pub l_c: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_m: f64, l_ms: f64, l_c: f64, weights: [f64; 3]) -> Self {
        LossBreakdown { l_m, l_ms, l_c, total: weights[0] * l_m + weights[1] * l_ms + weights[2] * l_c }
    }
}

/// Everything `total_loss` needs besides the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct LossParams {
    pub weights: [f64; 3],
    pub ce_decay: f64,
    pub ce_epsilon: f64,
    pub ssim: SsimParams,
}

impl LossParams {
    pub fn from_config(cfg: &ModelConfig, h: usize, w: usize) -> Self {
        LossParams {
            weights: cfg.loss_weights,
            ce_decay: cfg.ce_decay,
            ce_epsilon: cfg.ce_epsilon,
            ssim: SsimParams::from_config(cfg, h, w),
        }
    }
}

fn same_shape(a: &Var<'_>, b: &Var<'_>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Invalid(format!("{what}: shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn mse_loss<'g>(pred: Var<'g>, target: Var<'g>) -> Result<Var<'g>> {
    same_shape(&pred, &target, "mse_loss")?;
    Ok(pred.sub(target)?.square().mean())
}

/// `(B, T, C, H, W)` -> `(B*T*C, 1, H, W)`.
fn as_images<'g>(x: Var<'g>) -> Result<Var<'g>> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::Invalid(format!("expected image tensor, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok(x.reshape(&[x.value().numel() / (h * w), 1, h, w])?)
}

/// `1 - MS-SSIM`, averaged over every image plane.
pub fn msssim_loss<'g>(pred: Var<'g>, target: Var<'g>, p: &SsimParams) -> Result<Var<'g>> {
    same_shape(&pred, &target, "msssim_loss")?;
    let v = ms_ssim_images(as_images(pred)?, as_images(target)?, p)?;
    Ok(v.neg().shift(1.0).mean())
}

/// `decay^i` for future frame `i = 1..=frames`.
pub fn ce_frame_weights(frames: usize, decay: f64) -> Vec<f64> {
    (1..=frames).map(|i| decay.powi(i as i32)).collect()
}

/// Weighted sum of per-frame cross-entropies.
pub fn weighted_frame_sum(frame_ce: &[f64], decay: f64) -> f64 {
    ce_frame_weights(frame_ce.len(), decay).iter().zip(frame_ce).map(|(w, c)| w * c).sum()
}

/// Per-pixel Bernoulli cross-entropy of `pred` against `target`, minus the
/// target's own entropy, both after clipping to `[eps, 1 - eps]`; per-frame
/// means weighted by `decay^i` and summed. Frames are axis 1 of `(B, T, ...)`.
pub fn weighted_ce_loss<'g>(pred: Var<'g>, target: Var<'g>, decay: f64, eps: f64) -> Result<Var<'g>> {
    same_shape(&pred, &target, "weighted_ce_loss")?;
    let shape = pred.shape();
    if shape.len() < 2 {
        return Err(Error::Invalid(format!("weighted_ce_loss expects (B, T, ...), got {shape:?}")));
    }
    let clip = |v: Var<'g>| v.clamp(eps, 1.0 - eps);
    let (p, y) = (clip(pred), clip(target));
    let one_minus = |v: Var<'g>| v.neg().shift(1.0);
    // y ln y + (1-y) ln(1-y) - y ln p - (1-y) ln(1-p)
    let cross = y.mul(p.ln())?.add(one_minus(y).mul(one_minus(p).ln())?)?;
    let own = y.mul(y.ln())?.add(one_minus(y).mul(one_minus(y).ln())?)?;
    let map = own.sub(cross)?;
    let other: Vec<usize> = (0..shape.len()).filter(|&a| a != 1).collect();
    let per_frame = map.mean_axes(&other)?;
    let mut wshape = vec![1; shape.len()];
    wshape[1] = shape[1];
    let w = Tensor::new(&wshape, ce_frame_weights(shape[1], decay))?;
    Ok(per_frame.mul(pred.graph().constant(w))?.sum())
}

/// Weighted sum of the three losses; returns the differentiable total and its breakdown.
pub fn total_loss<'g>(pred: Var<'g>, target: Var<'g>, p: &LossParams) -> Result<(Var<'g>, LossBreakdown)> {
    let lm = mse_loss(pred, target)?;
    let lms = msssim_loss(pred, target, &p.ssim)?;
    let lc = weighted_ce_loss(pred, target, p.ce_decay, p.ce_epsilon)?;
    let total = lm.scale(p.weights[0]).add(lms.scale(p.weights[1]))?.add(lc.scale(p.weights[2]))?;
    let b = LossBreakdown::new(lm.value().item(), lms.value().item(), lc.value().item(), p.weights);
    Ok((total, b))
}
