//! Bilinear upsampling and adaptive average pooling.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Source taps `(i0, i1, w0, w1)` for each output index of a half-pixel-centred
/// linear resize (`align_corners = false`).
fn linear_taps(input: usize, scale: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..input * scale)
        .map(|o| {
            let src = ((o as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub fn upsample_bilinear_forward(x: &Tensor, scale: usize) -> Result<Tensor> {
    if x.rank() != 4 || scale == 0 {
        return Err(Error::shape(format!("bilinear upsample expects (N,C,H,W), got {:?}", x.shape())));
    }
    let (planes, h, w) = (x.dim(0) * x.dim(1), x.dim(2), x.dim(3));
    let (ho, wo) = (h * scale, w * scale);
    let ty = linear_taps(h, scale);
    let tx = linear_taps(w, scale);
    let mut out = vec![0.0; planes * ho * wo];
    let mut rows = vec![0.0; h * wo];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (ox, &(i0, i1, w0, w1)) in tx.iter().enumerate() {
                rows[y * wo + ox] = w0 * src[y * w + i0] + w1 * src[y * w + i1];
            }
        }
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(i0, i1, w0, w1)) in ty.iter().enumerate() {
            for ox in 0..wo {
                dst[oy * wo + ox] = w0 * rows[i0 * wo + ox] + w1 * rows[i1 * wo + ox];
            }
        }
    }
    Tensor::new(&[x.dim(0), x.dim(1), ho, wo], out)
}

pub fn upsample_bilinear_backward(in_shape: &[usize], gout: &Tensor, scale: usize) -> Tensor {
    let (planes, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (h * scale, w * scale);
    let ty = linear_taps(h, scale);
    let tx = linear_taps(w, scale);
    let mut gx = vec![0.0; planes * h * w];
    let mut rows = vec![0.0; h * wo];
    for p in 0..planes {
        rows.fill(0.0);
        let g = &gout.data()[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(i0, i1, w0, w1)) in ty.iter().enumerate() {
            for ox in 0..wo {
                let v = g[oy * wo + ox];
                rows[i0 * wo + ox] += w0 * v;
                rows[i1 * wo + ox] += w1 * v;
            }
        }
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (ox, &(i0, i1, w0, w1)) in tx.iter().enumerate() {
                let v = rows[y * wo + ox];
                dst[y * w + i0] += w0 * v;
                dst[y * w + i1] += w1 * v;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), gx)
}

/// Bin `[start, end)` of adaptive pooling bin `i` when mapping `len` inputs to `bins` outputs.
pub fn adaptive_bin(i: usize, len: usize, bins: usize) -> (usize, usize) {
    let start = (i * len) / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end)
}

pub fn adaptive_avg_pool_axis(x: &Tensor, axis: usize, bins: usize) -> Result<Tensor> {
    if axis >= x.rank() || bins == 0 || x.dim(axis) == 0 {
        return Err(Error::shape(format!("adaptive pool axis {axis} to {bins} bins on {:?}", x.shape())));
    }
    let len = x.dim(axis);
    let outer = numel(&x.shape()[..axis]);
    let inner = numel(&x.shape()[axis + 1..]);
    let mut out = vec![0.0; outer * bins * inner];
    for o in 0..outer {
        for b in 0..bins {
            let (s, e) = adaptive_bin(b, len, bins);
            let inv = 1.0 / (e - s) as f64;
            let dst = &mut out[(o * bins + b) * inner..][..inner];
            for l in s..e {
                let src = &x.data()[(o * len + l) * inner..][..inner];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += v * inv;
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = bins;
    Tensor::new(&shape, out)
}

pub fn adaptive_avg_pool_axis_backward(in_shape: &[usize], axis: usize, gout: &Tensor) -> Tensor {
    let len = in_shape[axis];
    let bins = gout.dim(axis);
    let outer = numel(&in_shape[..axis]);
    let inner = numel(&in_shape[axis + 1..]);
    let mut gx = vec![0.0; numel(in_shape)];
    for o in 0..outer {
        for b in 0..bins {
            let (s, e) = adaptive_bin(b, len, bins);
            let inv = 1.0 / (e - s) as f64;
            let src = &gout.data()[(o * bins + b) * inner..][..inner];
            for l in s..e {
                let dst = &mut gx[(o * len + l) * inner..][..inner];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += v * inv;
                }
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), gx)
}
