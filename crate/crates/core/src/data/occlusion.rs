use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use usfnet_autograd::Tensor;

use crate::error::{Error, Result};

/// Linear ramp of the input occlusion rate over the training epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSchedule {
    pub p_start: f64,
    pub p_end: f64,
    pub total_epochs: usize,
    pub patch_size: usize,
}

impl OcclusionSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.p_start && self.p_start <= self.p_end && self.p_end <= 1.0) {
            return Err(Error::Config(format!(
                "occlusion rates must satisfy 0 <= p_start <= p_end <= 1, got {} and {}",
                self.p_start, self.p_end
            )));
        }
        if self.patch_size == 0 || self.total_epochs == 0 {
            return Err(Error::Config("occlusion patch size and epoch count must be positive".into()));
        }
        Ok(())
    }
}

/// `p_start + (p_end - p_start) * epoch / (total_epochs - 1)`; a single-epoch schedule uses `p_start`.
pub fn occlusion_rate(s: &OcclusionSchedule, epoch: usize) -> Result<f64> {
    s.validate()?;
    if epoch >= s.total_epochs {
        return Err(Error::Invalid(format!("epoch {epoch} outside 0..{}", s.total_epochs)));
    }
    if s.total_epochs == 1 {
        return Ok(s.p_start);
    }
    let frac = epoch as f64 / (s.total_epochs - 1) as f64;
    Ok((s.p_start + (s.p_end - s.p_start) * frac).clamp(s.p_start, s.p_end))
}

/// Zeroes `round(p * P)` distinct patches of each `(b, t)` frame of a
/// `(B, T, C, H, W)` tensor, where `P` is the number of whole patches per frame.
/// All channels of a patch are masked together.
pub fn apply_occlusion<R: Rng + ?Sized>(x: &Tensor, p: f64, patch: usize, rng: &mut R) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Invalid(format!("occlusion rate {p} outside [0, 1]")));
    }
    if x.rank() != 5 || patch == 0 {
        return Err(Error::Invalid(format!("occlusion expects (B,T,C,H,W) and a positive patch, got {:?}", x.shape())));
    }
    let mut out = x.clone();
    if p == 0.0 {
        return Ok(out);
    }
    let (b, t, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4));
    if p == 1.0 {
        return Ok(Tensor::zeros(x.shape()));
    }
    let (gh, gw) = (h / patch, w / patch);
    let total = gh * gw;
    let k = ((p * total as f64).round() as usize).min(total);
    let data = out.data_mut();
    for frame in 0..b * t {
        for idx in sample(rng, total, k).into_iter() {
            let (py, px) = (idx / gw, idx % gw);
            for ch in 0..c {
                let base = (frame * c + ch) * h * w;
                for y in py * patch..(py + 1) * patch {
                    data[base + y * w + px * patch..base + y * w + (px + 1) * patch].fill(0.0);
                }
            }
        }
    }
    Ok(out)
}
