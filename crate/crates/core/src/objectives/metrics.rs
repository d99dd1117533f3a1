use std::path::Path;

use serde::{Deserialize, Serialize};
use usfnet_autograd::{Graph, Tensor};

use super::ssim::{ssim_images, SsimParams};
use super::mse_loss;
use crate::error::{Error, Result};

/// Metrics of one predicted frame. `psnr` is `f64::INFINITY` when the MSE is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub sequence: String,
    /// 1-based extrapolation step.
    pub step: usize,
    pub mse: f64,
    pub ssim: f64,
    pub psnr: f64,
}

/// Averages over all sequences at one extrapolation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mse: f64,
    pub ssim: f64,
    /// Mean over finite PSNR values; `None` if every frame was exact.
    pub psnr: Option<f64>,
    pub psnr_infinite: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub frames: Vec<FrameMetrics>,
    pub steps: Vec<StepMetrics>,
    pub mean_mse: f64,
    pub mean_ssim: f64,
    pub mean_psnr: Option<f64>,
    pub psnr_infinite: usize,
}

fn finite_mean(vals: impl Iterator<Item = f64>) -> (Option<f64>, usize) {
    let (mut s, mut n, mut inf) = (0.0, 0usize, 0usize);
    for v in vals {
        if v.is_finite() {
            s += v;
            n += 1;
        } else {
            inf += 1;
        }
    }
    ((n > 0).then(|| s / n as f64), inf)
}

fn mean(vals: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in vals {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl MetricTable {
    /// Aggregates per-frame rows (any order) into per-step and overall means.
    pub fn from_frames(frames: Vec<FrameMetrics>) -> Self {
        let max_step = frames.iter().map(|f| f.step).max().unwrap_or(0);
        let steps = (1..=max_step)
            .map(|k| {
                let at = || frames.iter().filter(move |f| f.step == k);
                let (psnr, psnr_infinite) = finite_mean(at().map(|f| f.psnr));
                StepMetrics { step: k, mse: mean(at().map(|f| f.mse)), ssim: mean(at().map(|f| f.ssim)), psnr, psnr_infinite }
            })
            .collect();
        let (mean_psnr, psnr_infinite) = finite_mean(frames.iter().map(|f| f.psnr));
        MetricTable {
            mean_mse: mean(frames.iter().map(|f| f.mse)),
            mean_ssim: mean(frames.iter().map(|f| f.ssim)),
            mean_psnr,
            psnr_infinite,
            steps,
            frames,
        }
    }

    /// Per-sequence, per-timestep rows; `timestep = step + offset` (offset = observed frames).
    pub fn to_csv(&self, offset: usize) -> Result<String> {
        #[derive(Serialize)]
        struct Row<'a> {
            sequence: &'a str,
            timestep: usize,
            mse: f64,
            ssim: f64,
            psnr: String,
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for f in &self.frames {
            let psnr = if f.psnr.is_finite() { format!("{}", f.psnr) } else { "inf".to_string() };
            w.serialize(Row { sequence: &f.sequence, timestep: f.step + offset, mse: f.mse, ssim: f.ssim, psnr })
                .map_err(|e| Error::Invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
    }

    /// One row per timestep with the cross-sequence means.
    pub fn steps_csv(&self, offset: usize) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["timestep", "mse", "ssim", "psnr", "psnr_infinite"]).map_err(|e| Error::Invalid(e.to_string()))?;
        for s in &self.steps {
            let psnr = s.psnr.map_or_else(|| "inf".to_string(), |v| v.to_string());
            w.write_record([
                (s.step + offset).to_string(),
                s.mse.to_string(),
                s.ssim.to_string(),
                psnr,
                s.psnr_infinite.to_string(),
            ])
            .map_err(|e| Error::Invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path, offset: usize) -> Result<()> {
        std::fs::write(path, self.to_csv(offset)?).map_err(|e| Error::io(path, e))
    }
}

/// Per-frame MSE, SSIM and PSNR of `(B, T, C, H, W)` predictions.
pub fn metric_suite(pred: &Tensor, target: &Tensor, max_val: f64) -> Result<MetricTable> {
    if pred.shape() != target.shape() || pred.rank() != 5 {
        return Err(Error::Invalid(format!(
            "metric_suite expects equal (B,T,C,H,W) shapes, got {:?} and {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if max_val <= 0.0 {
        return Err(Error::Invalid("max_val must be positive".into()));
    }
    let (b, t, c, h, w) = (pred.dim(0), pred.dim(1), pred.dim(2), pred.dim(3), pred.dim(4));
    let params = SsimParams::flat(1, max_val);
    let mut frames = Vec::with_capacity(b * t);
    for bi in 0..b {
        let (ps, ts) = (pred.narrow(0, bi, 1)?, target.narrow(0, bi, 1)?);
        for ti in 0..t {
            let pf = ps.narrow(1, ti, 1)?.into_reshape(&[c, 1, h, w])?;
            let tf = ts.narrow(1, ti, 1)?.into_reshape(&[c, 1, h, w])?;
            let g = Graph::new();
            let (pv, tv) = (g.constant(pf), g.constant(tf));
            let mse = mse_loss(pv, tv)?.value().item();
            let ssim = ssim_images(pv, tv, &params)?.value().mean();
            let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (max_val * max_val / mse).log10() };
            frames.push(FrameMetrics { sequence: bi.to_string(), step: ti + 1, mse, ssim, psnr });
        }
    }
    Ok(MetricTable::from_frames(frames))
}
