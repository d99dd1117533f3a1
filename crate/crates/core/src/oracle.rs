//! Brute-force reference implementations.
//!
//! Everything here is written with explicit scalar loops and shares no code
//! with the model or objective paths. Used by tests and the probes only.

use usfnet_autograd::Tensor;

use crate::error::{Error, Result};
use crate::objectives::SsimParams;

fn row_softmax(logits: &[f64]) -> Vec<f64> {
    let mut mx = f64::NEG_INFINITY;
    for &l in logits {
        if l > mx {
            mx = l;
        }
    }
    let mut e = Vec::with_capacity(logits.len());
    let mut total = 0.0;
    for &l in logits {
        let v = (l - mx).exp();
        total += v;
        e.push(v);
    }
    for v in &mut e {
        *v /= total;
    }
    e
}

fn dot(a: &Tensor, i: usize, b: &Tensor, j: usize) -> f64 {
    let d = a.dim(1);
    let mut s = 0.0;
    for c in 0..d {
        s += a.data()[i * d + c] * b.data()[j * d + c];
    }
    s
}

/// Mean of contiguous token bins: bin `i` covers `[floor(i N / n), ceil((i+1) N / n))`.
pub fn pool_tokens(q: &Tensor, n: usize) -> Tensor {
    let (len, d) = (q.dim(0), q.dim(1));
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let start = (i * len) / n;
        let mut end = ((i + 1) * len) / n;
        if end * n < (i + 1) * len {
            end += 1;
        }
        for c in 0..d {
            let mut s = 0.0;
            for t in start..end {
                s += q.at(&[t, c]);
            }
            out.set(&[i, c], s / (end - start) as f64);
        }
    }
    out
}

/// The two attention matrices `(n, N)` and `(N, n)` of agent attention.
pub fn two_stage_attention_weights(q: &Tensor, k: &Tensor, agents: &Tensor, scaled: bool) -> (Tensor, Tensor) {
    let (big_n, d, n) = (q.dim(0), q.dim(1), agents.dim(0));
    let scale = if scaled { 1.0 / (d as f64).sqrt() } else { 1.0 };
    let mut s1 = Tensor::zeros(&[n, big_n]);
    for a in 0..n {
        let logits: Vec<f64> = (0..big_n).map(|j| dot(agents, a, k, j) * scale).collect();
        for (j, p) in row_softmax(&logits).into_iter().enumerate() {
            s1.set(&[a, j], p);
        }
    }
    let mut s2 = Tensor::zeros(&[big_n, n]);
    for i in 0..big_n {
        let logits: Vec<f64> = (0..n).map(|a| dot(q, i, agents, a) * scale).collect();
        for (a, p) in row_softmax(&logits).into_iter().enumerate() {
            s2.set(&[i, a], p);
        }
    }
    (s1, s2)
}

/// `softmax(Q A^T) (softmax(A K^T) V)` for single-sequence `(N, d)` operands and agents `(n, d)`.
pub fn dense_two_stage_attention(q: &Tensor, k: &Tensor, v: &Tensor, agents: &Tensor, scaled: bool) -> Tensor {
    let (big_n, d, n) = (q.dim(0), v.dim(1), agents.dim(0));
    let (s1, s2) = two_stage_attention_weights(q, k, agents, scaled);
    let mut af = Tensor::zeros(&[n, d]);
    for a in 0..n {
        for c in 0..d {
            let mut acc = 0.0;
            for j in 0..big_n {
                acc += s1.at(&[a, j]) * v.at(&[j, c]);
            }
            af.set(&[a, c], acc);
        }
    }
    let mut out = Tensor::zeros(&[big_n, d]);
    for i in 0..big_n {
        for c in 0..d {
            let mut acc = 0.0;
            for a in 0..n {
                acc += s2.at(&[i, a]) * af.at(&[a, c]);
            }
            out.set(&[i, c], acc);
        }
    }
    out
}

/// Plain `softmax(Q K^T) V`.
pub fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor, scaled: bool) -> Tensor {
    let (big_n, d) = (q.dim(0), v.dim(1));
    let scale = if scaled { 1.0 / (q.dim(1) as f64).sqrt() } else { 1.0 };
    let mut out = Tensor::zeros(&[big_n, d]);
    for i in 0..big_n {
        let logits: Vec<f64> = (0..k.dim(0)).map(|j| dot(q, i, k, j) * scale).collect();
        let p = row_softmax(&logits);
        for c in 0..d {
            let mut acc = 0.0;
            for (j, pj) in p.iter().enumerate() {
                acc += pj * v.at(&[j, c]);
            }
            out.set(&[i, c], acc);
        }
    }
    out
}

/// Sequential zero-padded "same" convolutions of a single `(H, W)` plane; each
/// stage is a `(k, k)` kernel with a dilation.
pub fn direct_dilated_conv(x: &Tensor, kernel_stack: &[(Tensor, usize)]) -> Tensor {
    let mut cur = x.clone();
    for (kern, dil) in kernel_stack {
        let (h, w) = (cur.dim(0), cur.dim(1));
        let k = kern.dim(0);
        let pad = (dil * (k - 1) / 2) as isize;
        let mut next = Tensor::zeros(&[h, w]);
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        let y = i as isize + (a * dil) as isize - pad;
                        let xx = j as isize + (b * dil) as isize - pad;
                        if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                            acc += kern.at(&[a, b]) * cur.at(&[y as usize, xx as usize]);
                        }
                    }
                }
                next.set(&[i, j], acc);
            }
        }
        cur = next;
    }
    cur
}

/// Width of the nonzero band of `t` along rows and columns (`|v| > tol`).
pub fn support_extent(t: &Tensor, tol: f64) -> (usize, usize) {
    let (h, w) = (t.dim(0), t.dim(1));
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for i in 0..h {
        for j in 0..w {
            if t.at(&[i, j]).abs() > tol {
                r0 = r0.min(i);
                r1 = r1.max(i);
                c0 = c0.min(j);
                c1 = c1.max(j);
            }
        }
    }
    if r0 == usize::MAX {
        return (0, 0);
    }
    (r1 - r0 + 1, c1 - c0 + 1)
}

/// Grouped per-sample convolution: `x` is `(M, C, H, W)`, `kernels` `(M, J, K, K)`;
/// channel `c` uses kernel `c / (C / J)`, zero "same" padding.
pub fn grouped_dynamic_conv(x: &Tensor, kernels: &Tensor) -> Tensor {
    let (m, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (j, k) = (kernels.dim(1), kernels.dim(2));
    let per = c / j;
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros(x.shape());
    for s in 0..m {
        for ch in 0..c {
            let g = ch / per;
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for a in 0..k {
                        for b in 0..k {
                            let sy = y as isize + a as isize - r;
                            let sx = xx as isize + b as isize - r;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                acc += kernels.at(&[s, g, a, b]) * x.at(&[s, ch, sy as usize, sx as usize]);
                            }
                        }
                    }
                    out.set(&[s, ch, y, xx], acc);
                }
            }
        }
    }
    out
}

/// Pointwise map `out[m, o, p] = b[o] + sum_i w[o, i] x[m, i, p]` over `(M, C, H, W)`.
pub fn pointwise(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (m, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let cout = w.dim(0);
    let mut out = Tensor::zeros(&[m, cout, h, wd]);
    for s in 0..m {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[o];
                    for i in 0..cin {
                        acc += w.at(&[o, i, 0, 0]) * x.at(&[s, i, y, xx]);
                    }
                    out.set(&[s, o, y, xx], acc);
                }
            }
        }
    }
    out
}

/// Pointwise weights and bias of the gated update.
pub struct GateWeights<'a> {
    pub w1: (&'a Tensor, &'a Tensor),
    pub w2: (&'a Tensor, &'a Tensor),
    pub proj: (&'a Tensor, &'a Tensor),
    pub fuse: (&'a Tensor, &'a Tensor),
}

/// `fuse(cat(x_d, proj((w1 x_d + b) * sigmoid(w2 x_t0 + c))))` evaluated elementwise.
pub fn gated_update(x_d: &Tensor, x_t0: &Tensor, p: &GateWeights) -> Tensor {
    let lin = pointwise(x_d, p.w1.0, p.w1.1);
    let pre = pointwise(x_t0, p.w2.0, p.w2.1);
    let mut gate = lin.clone();
    for (g, z) in gate.data_mut().iter_mut().zip(pre.data()) {
        *g *= 1.0 / (1.0 + (-z).exp());
    }
    let projected = pointwise(&gate, p.proj.0, p.proj.1);
    let (m, c, h, w) = (x_d.dim(0), x_d.dim(1), x_d.dim(2), x_d.dim(3));
    let mut cat = Tensor::zeros(&[m, 2 * c, h, w]);
    for s in 0..m {
        for ch in 0..2 * c {
            for y in 0..h {
                for xx in 0..w {
                    let v = if ch < c { x_d.at(&[s, ch, y, xx]) } else { projected.at(&[s, ch - c, y, xx]) };
                    cat.set(&[s, ch, y, xx], v);
                }
            }
        }
    }
    pointwise(&cat, p.fuse.0, p.fuse.1)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<Vec<f64>> {
    let half = (size / 2) as f64;
    let mut w = vec![vec![0.0; size]; size];
    let mut total = 0.0;
    for (a, row) in w.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let (da, db) = (a as f64 - half, b as f64 - half);
            *v = (-(da * da + db * db) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    for row in &mut w {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    w
}

/// Means over all windows of `l`, `c*s` and `l*c*s` at one level.
fn ssim_level(x: &[Vec<f64>], y: &[Vec<f64>], p: &SsimParams) -> (f64, f64, f64) {
    let win = gaussian_window(p.window, p.sigma);
    let k = p.window;
    let (h, w) = (x.len(), x[0].len());
    let (mut lsum, mut cssum, mut full, mut count) = (0.0, 0.0, 0.0, 0usize);
    for i in 0..=h - k {
        for j in 0..=w - k {
            let (mut mx, mut my) = (0.0, 0.0);
            for a in 0..k {
                for b in 0..k {
                    mx += win[a][b] * x[i + a][j + b];
                    my += win[a][b] * y[i + a][j + b];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for a in 0..k {
                for b in 0..k {
                    let dx = x[i + a][j + b] - mx;
                    let dy = y[i + a][j + b] - my;
                    vx += win[a][b] * dx * dx;
                    vy += win[a][b] * dy * dy;
                    cxy += win[a][b] * dx * dy;
                }
            }
            let (sx, sy) = (vx.max(0.0).sqrt(), vy.max(0.0).sqrt());
            let l = (2.0 * mx * my + p.c1) / (mx * mx + my * my + p.c1);
            let c = (2.0 * sx * sy + p.c2) / (vx + vy + p.c2);
            let s = (cxy + p.c3) / (sx * sy + p.c3);
            lsum += l;
            cssum += c * s;
            full += l * c * s;
            count += 1;
        }
    }
    let n = count as f64;
    (lsum / n, cssum / n, full / n)
}

/// 2x decimation with the normalised `[1 2 1] x [1 2 1] / 16` kernel and zero padding.
fn decimate(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (h, w) = (x.len(), x[0].len());
    let taps = [1.0, 2.0, 1.0];
    let (oh, ow) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
    let mut out = vec![vec![0.0; ow]; oh];
    for (oi, row) in out.iter_mut().enumerate() {
        for (oj, v) in row.iter_mut().enumerate() {
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (a, ta) in taps.iter().enumerate() {
                for (b, tb) in taps.iter().enumerate() {
                    let y = (2 * oi + a) as isize - 1;
                    let xx = (2 * oj + b) as isize - 1;
                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                        acc += ta * tb * x[y as usize][xx as usize];
                        wsum += ta * tb;
                    }
                }
            }
            *v = acc / wsum;
        }
    }
    out
}

fn plane(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.dim(0)).map(|i| (0..t.dim(1)).map(|j| t.at(&[i, j])).collect()).collect()
}

/// Multi-scale SSIM of two `(H, W)` images by direct evaluation of every window.
pub fn scalar_msssim(x: &Tensor, y: &Tensor, p: &SsimParams) -> f64 {
    let floor = 1e-6;
    let (mut xs, mut ys) = (plane(x), plane(y));
    let mut value = 1.0;
    for lvl in 0..p.levels {
        let (l, cs, _) = ssim_level(&xs, &ys, p);
        let (l, cs) = (l.max(floor), cs.max(floor));
        value *= cs.powf(p.weights[lvl]);
        if p.per_level_luminance {
            value *= l.powf(p.weights[lvl]);
        } else if lvl == 0 {
            value *= l.powf(p.alpha);
        }
        if lvl + 1 < p.levels {
            xs = decimate(&xs);
            ys = decimate(&ys);
        }
    }
    value
}

/// Single-scale SSIM of two `(H, W)` images: the mean of the per-window index.
pub fn scalar_ssim(x: &Tensor, y: &Tensor, p: &SsimParams) -> f64 {
    ssim_level(&plane(x), &plane(y), p).2
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_difference_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Result<Tensor> {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Invalid(format!("function is not finite around coordinate {i}")));
        }
        g.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// `||a - b|| / max(||a||, ||b||)`, the figure of merit for gradient checks.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let mut diff = 0.0;
    let (mut na, mut nb) = (0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-300)
}

pub fn scalar_mse(a: &Tensor, b: &Tensor) -> f64 {
    let mut s = 0.0;
    for i in 0..a.numel() {
        let d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    s / a.numel() as f64
}
