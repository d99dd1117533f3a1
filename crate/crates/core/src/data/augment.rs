use rand::Rng;
use usfnet_autograd::Tensor;

use crate::error::{Error, Result};

/// Applies symmetry `k` of the square to the last two axes: bit 0 flips columns,
/// bit 1 flips rows, bit 2 then transposes. Transposes need square frames.
pub fn dihedral(x: &Tensor, k: u8) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 || k > 7 {
        return Err(Error::Invalid(format!("dihedral expects rank >= 2 and k < 8, got {s:?} and {k}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let transpose = k & 4 != 0;
    if transpose && h != w {
        return Err(Error::Invalid(format!("transposing needs square frames, got {h}x{w}")));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for plane in src.chunks(h * w) {
        for i in 0..h {
            for j in 0..w {
                let (a, b) = if transpose { (j, i) } else { (i, j) };
                let r = if k & 2 != 0 { h - 1 - a } else { a };
                let c = if k & 1 != 0 { w - 1 - b } else { b };
                out.push(plane[r * w + c]);
            }
        }
    }
    Ok(Tensor::new(s, out)?)
}

/// Draws one symmetry per sample of a `(B, T, C, H, W)` pair and applies it to
/// inputs and targets alike. Non-square frames only draw flips.
pub fn augment_pair<R: Rng + ?Sized>(x: &Tensor, y: &Tensor, rng: &mut R) -> Result<(Tensor, Tensor)> {
    if x.rank() != 5 || y.rank() != 5 || x.dim(0) != y.dim(0) {
        return Err(Error::Invalid(format!("augmentation expects two (B,T,C,H,W) batches, got {:?} and {:?}", x.shape(), y.shape())));
    }
    let n = if x.dim(3) == x.dim(4) { 8 } else { 4 };
    let (mut xs, mut ys) = (Vec::with_capacity(x.dim(0)), Vec::with_capacity(x.dim(0)));
    for b in 0..x.dim(0) {
        let k = rng.gen_range(0..n);
        xs.push(dihedral(&x.narrow(0, b, 1)?, k)?);
        ys.push(dihedral(&y.narrow(0, b, 1)?, k)?);
    }
    let cat = |parts: &[Tensor]| -> Result<Tensor> { Ok(Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)?) };
    Ok((cat(&xs)?, cat(&ys)?))
}
