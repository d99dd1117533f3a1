//! Numpy-style broadcasting for binary element-wise kernels.

use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Tensor};

/// Result shape of broadcasting `a` against `b` (shorter shape is left-padded with ones).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let pa = pad_shape(a, r);
    let pb = pad_shape(b, r);
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

fn pad_shape(s: &[usize], rank: usize) -> Vec<usize> {
    let mut v = vec![1; rank - s.len()];
    v.extend_from_slice(s);
    v
}

/// Strides of `shape` viewed inside `out_shape`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let padded = pad_shape(shape, out_shape.len());
    let st = strides(&padded);
    padded
        .iter()
        .zip(st)
        .zip(out_shape)
        .map(|((&d, s), &o)| if d == 1 && o != 1 { 0 } else { s })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out_shape`.
fn for_each2(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let r = out_shape.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_shape[r - 1];
    let (ia, ib) = (sa[r - 1], sb[r - 1]);
    let outer = numel(&out_shape[..r - 1]);
    let mut idx = vec![0usize; r - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    for _ in 0..outer {
        for i in 0..inner {
            f(o + i, oa + i * ia, ob + i * ib);
        }
        o += inner;
        for a in (0..r - 1).rev() {
            idx[a] += 1;
            oa += sa[a];
            ob += sb[a];
            if idx[a] < out_shape[a] {
                break;
            }
            oa -= sa[a] * out_shape[a];
            ob -= sb[a] * out_shape[a];
            idx[a] = 0;
        }
    }
}

pub fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let (da, db) = (a.data(), b.data());
    let mut out = vec![0.0; numel(&out_shape)];
    for_each2(&out_shape, &sa, &sb, |o, i, j| out[o] = f(da[i], db[j]));
    Tensor::new(&out_shape, out)
}

/// Like [`binary`] but with a third tensor that already has the broadcast shape.
pub fn ternary_out(
    g: &Tensor,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Tensor {
    let out_shape = g.shape();
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let (dg, da, db) = (g.data(), a.data(), b.data());
    let mut out = vec![0.0; g.numel()];
    for_each2(out_shape, &sa, &sb, |o, i, j| out[o] = f(dg[o], da[i], db[j]));
    Tensor::from_parts(out_shape.to_vec(), out)
}

/// Sums `t` over the axes along which `shape` was broadcast to reach `t`'s shape.
pub fn reduce_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let st = broadcast_strides(shape, t.shape());
    let zero = vec![0; t.rank()];
    let mut out = vec![0.0; numel(shape)];
    let d = t.data();
    for_each2(t.shape(), &st, &zero, |o, i, _| out[i] += d[o]);
    Tensor::from_parts(shape.to_vec(), out)
}

pub fn broadcast_to(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if t.shape() == shape {
        return Ok(t.clone());
    }
    let target = broadcast_shape(t.shape(), shape)?;
    if target != shape {
        return Err(Error::shape(format!("cannot broadcast {:?} to {shape:?}", t.shape())));
    }
    let st = broadcast_strides(t.shape(), shape);
    let zero = vec![0; shape.len()];
    let d = t.data();
    let mut out = vec![0.0; numel(shape)];
    for_each2(shape, &st, &zero, |o, i, _| out[o] = d[i]);
    Ok(Tensor::from_parts(shape.to_vec(), out))
}
