//! 2-D convolution kernels (NCHW layout, weights `(C_out, C_in / groups, kh, kw)`).
//!
//! Depthwise-style groups (one input channel per group) run as direct loops;
//! everything else goes through im2col + GEMM.

use crate::error::{Error, Result};
use crate::kernels::linalg::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl Conv2dOpts {
    /// Stride-1 convolution that keeps spatial size for an odd kernel `k` at `dilation`.
    pub fn same(k: usize, dilation: usize) -> Self {
        Self { padding: dilation * (k - 1) / 2, dilation, ..Self::default() }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn out_size(&self, input: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        (input + 2 * self.padding).checked_sub(span).map(|v| v / self.stride + 1)
    }
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
}

fn geometry(x: &[usize], wt: &[usize], o: &Conv2dOpts) -> Result<Geometry> {
    if x.len() != 4 || wt.len() != 4 {
        return Err(Error::shape(format!("conv2d expects rank-4 input/weight, got {x:?} / {wt:?}")));
    }
    if o.groups == 0 || o.stride == 0 || o.dilation == 0 {
        return Err(Error::invalid(format!("conv2d options {o:?}")));
    }
    let (n, cin, h, w) = (x[0], x[1], x[2], x[3]);
    let (cout, cin_g, kh, kw) = (wt[0], wt[1], wt[2], wt[3]);
    if cin % o.groups != 0 || cout % o.groups != 0 || cin / o.groups != cin_g {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input {x:?}, weight {wt:?}, groups {}",
            o.groups
        )));
    }
    let ho = o
        .out_size(h, kh)
        .ok_or_else(|| Error::shape(format!("conv2d kernel larger than padded input {x:?}")))?;
    let wo = o
        .out_size(w, kw)
        .ok_or_else(|| Error::shape(format!("conv2d kernel larger than padded input {x:?}")))?;
    Ok(Geometry { n, cin, h, w, cout, kh, kw, ho, wo, cin_g, cout_g: cout / o.groups })
}

/// Range of output columns whose input column `ox * stride + offset` lands inside `[0, w)`.
#[inline]
fn valid_range(offset: isize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 { ((-offset) + s - 1) / s } else { 0 };
    let hi_incl = (w as isize - 1 - offset).div_euclid(s);
    let hi = (hi_incl + 1).clamp(0, wo as isize);
    (lo.min(hi) as usize, hi as usize)
}

/// Single-plane correlation: `out += x ⋆ k` with the given geometry.
#[allow(clippy::too_many_arguments)]
pub(crate) fn plane_forward(
    x: &[f64],
    h: usize,
    w: usize,
    k: &[f64],
    kh: usize,
    kw: usize,
    o: &Conv2dOpts,
    out: &mut [f64],
    ho: usize,
    wo: usize,
) {
    let (s, p, d) = (o.stride, o.padding as isize, o.dilation);
    for ki in 0..kh {
        for kj in 0..kw {
            let wv = k[ki * kw + kj];
            if wv == 0.0 {
                continue;
            }
            let off_x = (kj * d) as isize - p;
            let (lo, hi) = valid_range(off_x, s, w, wo);
            if lo >= hi {
                continue;
            }
            for oy in 0..ho {
                let iy = (oy * s + ki * d) as isize - p;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let xrow = &x[iy as usize * w..(iy as usize + 1) * w];
                let orow = &mut out[oy * wo..(oy + 1) * wo];
                if s == 1 {
                    let start = (lo as isize + off_x) as usize;
                    for (ov, xv) in orow[lo..hi].iter_mut().zip(&xrow[start..start + (hi - lo)]) {
                        *ov += wv * xv;
                    }
                } else {
                    for ox in lo..hi {
                        orow[ox] += wv * xrow[(ox as isize * s as isize + off_x) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`plane_forward`]: accumulates input and kernel gradients.
#[allow(clippy::too_many_arguments)]
pub(crate) fn plane_backward(
    x: &[f64],
    h: usize,
    w: usize,
    k: &[f64],
    kh: usize,
    kw: usize,
    o: &Conv2dOpts,
    gout: &[f64],
    ho: usize,
    wo: usize,
    mut gx: Option<&mut [f64]>,
    mut gk: Option<&mut [f64]>,
) {
    let (s, p, d) = (o.stride, o.padding as isize, o.dilation);
    for ki in 0..kh {
        for kj in 0..kw {
            let wv = k[ki * kw + kj];
            let off_x = (kj * d) as isize - p;
            let (lo, hi) = valid_range(off_x, s, w, wo);
            if lo >= hi {
                continue;
            }
            let mut acc = 0.0;
            for oy in 0..ho {
                let iy = (oy * s + ki * d) as isize - p;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let iy = iy as usize;
                let grow = &gout[oy * wo..(oy + 1) * wo];
                for ox in lo..hi {
                    let ix = (ox as isize * s as isize + off_x) as usize;
                    let g = grow[ox];
                    acc += g * x[iy * w + ix];
                    if let Some(gx) = gx.as_deref_mut() {
                        gx[iy * w + ix] += wv * g;
                    }
                }
            }
            if let Some(gk) = gk.as_deref_mut() {
                gk[ki * kw + kj] += acc;
            }
        }
    }
}

fn im2col(x: &[f64], g: &Geometry, o: &Conv2dOpts, col: &mut [f64]) {
    // x: one group's input planes (cin_g, h, w); col: (cin_g*kh*kw, ho*wo)
    let (s, p, d) = (o.stride, o.padding as isize, o.dilation);
    let hw = g.ho * g.wo;
    for ci in 0..g.cin_g {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut col[((ci * g.kh + ki) * g.kw + kj) * hw..][..hw];
                row.fill(0.0);
                let off_x = (kj * d) as isize - p;
                let (lo, hi) = valid_range(off_x, s, g.w, g.wo);
                for oy in 0..g.ho {
                    let iy = (oy * s + ki * d) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let xrow = &plane[iy as usize * g.w..];
                    let crow = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    for ox in lo..hi {
                        crow[ox] = xrow[(ox as isize * s as isize + off_x) as usize];
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &Geometry, o: &Conv2dOpts, gx: &mut [f64]) {
    let (s, p, d) = (o.stride, o.padding as isize, o.dilation);
    let hw = g.ho * g.wo;
    for ci in 0..g.cin_g {
        let plane = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &col[((ci * g.kh + ki) * g.kw + kj) * hw..][..hw];
                let off_x = (kj * d) as isize - p;
                let (lo, hi) = valid_range(off_x, s, g.w, g.wo);
                for oy in 0..g.ho {
                    let iy = (oy * s + ki * d) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    let crow = &row[oy * g.wo..(oy + 1) * g.wo];
                    for ox in lo..hi {
                        plane[base + (ox as isize * s as isize + off_x) as usize] += crow[ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &Tensor, wt: &Tensor, bias: Option<&Tensor>, o: &Conv2dOpts) -> Result<Tensor> {
    let g = geometry(x.shape(), wt.shape(), o)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape(format!("conv2d bias {:?} for {} outputs", b.shape(), g.cout)));
        }
    }
    let (xs, ws) = (x.data(), wt.data());
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let ksz = g.cin_g * g.kh * g.kw;
    let mut out = vec![0.0; g.n * g.cout * out_plane];
    let mut col = if g.cin_g == 1 { Vec::new() } else { vec![0.0; ksz * out_plane] };
    for n in 0..g.n {
        for grp in 0..o.groups {
            let xg = &xs[(n * g.cin + grp * g.cin_g) * in_plane..][..g.cin_g * in_plane];
            let og = &mut out[(n * g.cout + grp * g.cout_g) * out_plane..][..g.cout_g * out_plane];
            let wg = &ws[grp * g.cout_g * ksz..][..g.cout_g * ksz];
            if g.cin_g == 1 {
                for oc in 0..g.cout_g {
                    plane_forward(
                        xg,
                        g.h,
                        g.w,
                        &wg[oc * ksz..(oc + 1) * ksz],
                        g.kh,
                        g.kw,
                        o,
                        &mut og[oc * out_plane..(oc + 1) * out_plane],
                        g.ho,
                        g.wo,
                    );
                }
            } else {
                im2col(xg, &g, o, &mut col);
                // og (cout_g, hw) = wg (cout_g, ksz) * col (ksz, hw)
                gemm(g.cout_g, ksz, out_plane, wg, (ksz, 1), &col, (out_plane, 1), og, (out_plane, 1), 0.0);
            }
        }
        if let Some(b) = bias {
            for (oc, &bv) in b.data().iter().enumerate() {
                for v in &mut out[(n * g.cout + oc) * out_plane..][..out_plane] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)
}

pub struct ConvGrads {
    pub x: Option<Tensor>,
    pub w: Option<Tensor>,
    pub b: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    wt: &Tensor,
    gout: &Tensor,
    o: &Conv2dOpts,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> Result<ConvGrads> {
    let g = geometry(x.shape(), wt.shape(), o)?;
    let (xs, ws, gs) = (x.data(), wt.data(), gout.data());
    let in_plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let ksz = g.cin_g * g.kh * g.kw;
    let mut gx = if need_x { vec![0.0; x.numel()] } else { Vec::new() };
    let mut gw = if need_w { vec![0.0; wt.numel()] } else { Vec::new() };
    let mut col = if g.cin_g == 1 { Vec::new() } else { vec![0.0; ksz * out_plane] };
    let mut gcol = if g.cin_g == 1 || !need_x { Vec::new() } else { vec![0.0; ksz * out_plane] };
    for n in 0..g.n {
        for grp in 0..o.groups {
            let xoff = (n * g.cin + grp * g.cin_g) * in_plane;
            let xg = &xs[xoff..][..g.cin_g * in_plane];
            let gg = &gs[(n * g.cout + grp * g.cout_g) * out_plane..][..g.cout_g * out_plane];
            let woff = grp * g.cout_g * ksz;
            let wg = &ws[woff..][..g.cout_g * ksz];
            if g.cin_g == 1 {
                for oc in 0..g.cout_g {
                    let gx_plane = if need_x { Some(&mut gx[xoff..xoff + in_plane]) } else { None };
                    let gk = if need_w {
                        Some(&mut gw[woff + oc * ksz..woff + (oc + 1) * ksz])
                    } else {
                        None
                    };
                    plane_backward(
                        xg,
                        g.h,
                        g.w,
                        &wg[oc * ksz..(oc + 1) * ksz],
                        g.kh,
                        g.kw,
                        o,
                        &gg[oc * out_plane..(oc + 1) * out_plane],
                        g.ho,
                        g.wo,
                        gx_plane,
                        gk,
                    );
                }
            } else {
                if need_w {
                    im2col(xg, &g, o, &mut col);
                    // gw_g (cout_g, ksz) += gg (cout_g, hw) * col^T (hw, ksz)
                    gemm(
                        g.cout_g,
                        out_plane,
                        ksz,
                        gg,
                        (out_plane, 1),
                        &col,
                        (1, out_plane),
                        &mut gw[woff..woff + g.cout_g * ksz],
                        (ksz, 1),
                        1.0,
                    );
                }
                if need_x {
                    // gcol (ksz, hw) = wg^T (ksz, cout_g) * gg (cout_g, hw)
                    gemm(ksz, g.cout_g, out_plane, wg, (1, ksz), gg, (out_plane, 1), &mut gcol, (out_plane, 1), 0.0);
                    col2im(&gcol, &g, o, &mut gx[xoff..xoff + g.cin_g * in_plane]);
                }
            }
        }
    }
    let b = need_b.then(|| {
        let mut gb = vec![0.0; g.cout];
        for n in 0..g.n {
            for (oc, acc) in gb.iter_mut().enumerate() {
                *acc += gs[(n * g.cout + oc) * out_plane..][..out_plane].iter().sum::<f64>();
            }
        }
        Tensor::from_parts(vec![g.cout], gb)
    });
    Ok(ConvGrads {
        x: need_x.then(|| Tensor::from_parts(x.shape().to_vec(), gx)),
        w: need_w.then(|| Tensor::from_parts(wt.shape().to_vec(), gw)),
        b,
    })
}

/// Per-sample grouped convolution with generated kernels.
///
/// `x` is `(M, C, H, W)`, `k` is `(M, J, K, K)` with odd `K`; channel `c` of sample `m`
/// is correlated with `k[m, c / (C / J)]` using zero "same" padding.
pub fn dynamic_conv_forward(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (m, c, h, w, j, ks) = dyn_dims(x, k)?;
    let o = Conv2dOpts::same(ks, 1);
    let per = c / j;
    let plane = h * w;
    let mut out = vec![0.0; x.numel()];
    for mi in 0..m {
        for ci in 0..c {
            let kk = &k.data()[(mi * j + ci / per) * ks * ks..][..ks * ks];
            let off = (mi * c + ci) * plane;
            plane_forward(&x.data()[off..off + plane], h, w, kk, ks, ks, &o, &mut out[off..off + plane], h, w);
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn dynamic_conv_backward(x: &Tensor, k: &Tensor, gout: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, c, h, w, j, ks) = dyn_dims(x, k)?;
    let o = Conv2dOpts::same(ks, 1);
    let per = c / j;
    let plane = h * w;
    let mut gx = vec![0.0; x.numel()];
    let mut gk = vec![0.0; k.numel()];
    for mi in 0..m {
        for ci in 0..c {
            let koff = (mi * j + ci / per) * ks * ks;
            let off = (mi * c + ci) * plane;
            plane_backward(
                &x.data()[off..off + plane],
                h,
                w,
                &k.data()[koff..koff + ks * ks],
                ks,
                ks,
                &o,
                &gout.data()[off..off + plane],
                h,
                w,
                Some(&mut gx[off..off + plane]),
                Some(&mut gk[koff..koff + ks * ks]),
            );
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), gx), Tensor::from_parts(k.shape().to_vec(), gk)))
}

fn dyn_dims(x: &Tensor, k: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (xs, kshape) = (x.shape(), k.shape());
    if xs.len() != 4 || kshape.len() != 4 || xs[0] != kshape[0] || kshape[2] != kshape[3] || kshape[2] % 2 == 0 {
        return Err(Error::shape(format!("dynamic conv expects x (M,C,H,W) and k (M,J,K,K) odd K, got {xs:?} / {kshape:?}")));
    }
    if kshape[1] == 0 || xs[1] % kshape[1] != 0 {
        return Err(Error::shape(format!("{} groups do not divide {} channels", kshape[1], xs[1])));
    }
    Ok((xs[0], xs[1], xs[2], xs[3], kshape[1], kshape[2]))
}
