use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = a · b + beta · c` for an `(m, k) × (k, n)` product with explicit
/// `(row, col)` strides on every operand.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
    sc: (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(m == 0 || k == 0 || (m - 1) * sa.0 + (k - 1) * sa.1 < a.len());
    assert!(k == 0 || (k - 1) * sb.0 + (n - 1) * sb.1 < b.len());
    assert!((m - 1) * sc.0 + (n - 1) * sc.1 < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

pub(crate) struct BmmDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batched: bool,
    pub b_batched: bool,
}

/// Shapes of `op(a) · op(b)` for rank-3 operands; a batch dim of 1 broadcasts.
pub(crate) fn bmm_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<BmmDims> {
    if a.len() != 3 || b.len() != 3 {
        return Err(Error::shape(format!("bmm expects rank-3 operands, got {a:?} and {b:?}")));
    }
    let (m, ka) = if ta { (a[2], a[1]) } else { (a[1], a[2]) };
    let (kb, n) = if tb { (b[2], b[1]) } else { (b[1], b[2]) };
    if ka != kb {
        return Err(Error::shape(format!("bmm inner dims differ: {a:?}{} x {b:?}{}", if ta { "ᵀ" } else { "" }, if tb { "ᵀ" } else { "" })));
    }
    let batch = match (a[0], b[0]) {
        (x, y) if x == y => x,
        (1, y) => y,
        (x, 1) => x,
        _ => return Err(Error::shape(format!("bmm batch dims differ: {a:?} vs {b:?}"))),
    };
    Ok(BmmDims { batch, m, k: ka, n, a_batched: a[0] != 1 || batch == 1, b_batched: b[0] != 1 || batch == 1 })
}

fn op_strides(rows: usize, cols: usize, transposed: bool) -> (usize, usize) {
    // strides of op(X) where X is stored row-major as (rows, cols)
    if transposed {
        (1, cols)
    } else {
        let _ = rows;
        (cols, 1)
    }
}

pub fn bmm(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let d = bmm_dims(a.shape(), b.shape(), ta, tb)?;
    let (ar, ac) = (a.dim(1), a.dim(2));
    let (br, bc) = (b.dim(1), b.dim(2));
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for i in 0..d.batch {
        let ai = if d.a_batched { i } else { 0 };
        let bi = if d.b_batched { i } else { 0 };
        gemm(
            d.m,
            d.k,
            d.n,
            &a.data()[ai * ar * ac..(ai + 1) * ar * ac],
            op_strides(ar, ac, ta),
            &b.data()[bi * br * bc..(bi + 1) * br * bc],
            op_strides(br, bc, tb),
            &mut out[i * d.m * d.n..(i + 1) * d.m * d.n],
            (d.n, 1),
            0.0,
        );
    }
    Tensor::new(&[d.batch, d.m, d.n], out)
}

/// Gradients of `c = op(a) · op(b)` with respect to the stored `a` and `b`.
pub fn bmm_backward(a: &Tensor, b: &Tensor, ta: bool, tb: bool, gc: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = bmm_dims(a.shape(), b.shape(), ta, tb)?;
    let (ar, ac) = (a.dim(1), a.dim(2));
    let (br, bc) = (b.dim(1), b.dim(2));
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    for i in 0..d.batch {
        let ai = if d.a_batched { i } else { 0 };
        let bi = if d.b_batched { i } else { 0 };
        let g = &gc.data()[i * d.m * d.n..(i + 1) * d.m * d.n];
        let bsl = &b.data()[bi * br * bc..(bi + 1) * br * bc];
        let asl = &a.data()[ai * ar * ac..(ai + 1) * ar * ac];
        let bop = op_strides(br, bc, tb);
        let aop = op_strides(ar, ac, ta);
        // d op(a) = g · op(b)ᵀ, shape (m, k); written into a's storage layout.
        let ga_s = if ta { (1, ac) } else { (ac, 1) };
        gemm(d.m, d.n, d.k, g, (d.n, 1), bsl, (bop.1, bop.0), &mut ga[ai * ar * ac..(ai + 1) * ar * ac], ga_s, 1.0);
        // d op(b) = op(a)ᵀ · g, shape (k, n)
        let gb_s = if tb { (1, bc) } else { (bc, 1) };
        gemm(d.k, d.m, d.n, asl, (aop.1, aop.0), g, (d.n, 1), &mut gb[bi * br * bc..(bi + 1) * br * bc], gb_s, 1.0);
    }
    Ok((Tensor::from_parts(a.shape().to_vec(), ga), Tensor::from_parts(b.shape().to_vec(), gb)))
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let d = *x.shape().last().unwrap_or(&1);
    let mut out = x.data().to_vec();
    if d == 0 {
        return x.clone();
    }
    for row in out.chunks_mut(d) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

pub fn softmax_last_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    let d = *y.shape().last().unwrap_or(&1);
    let mut gx = vec![0.0; y.numel()];
    for ((yr, gr), out) in y.data().chunks(d).zip(gy.data().chunks(d)).zip(gx.chunks_mut(d)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    Tensor::new(y.shape(), gx).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
        let d = bmm_dims(a.shape(), b.shape(), ta, tb).unwrap();
        Tensor::from_fn(&[d.batch, d.m, d.n], |idx| {
            let (i, r) = (idx / (d.m * d.n), idx % (d.m * d.n));
            let (r, c) = (r / d.n, r % d.n);
            let ai = if a.dim(0) == 1 { 0 } else { i };
            let bi = if b.dim(0) == 1 { 0 } else { i };
            (0..d.k)
                .map(|k| {
                    let av = if ta { a.at(&[ai, k, r]) } else { a.at(&[ai, r, k]) };
                    let bv = if tb { b.at(&[bi, c, k]) } else { b.at(&[bi, k, c]) };
                    av * bv
                })
                .sum()
        })
    }

    #[test]
    fn bmm_all_transpose_combinations() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a_shape = if ta { [2, 4, 3] } else { [2, 3, 4] };
            let b_shape = if tb { [1, 5, 4] } else { [1, 4, 5] };
            let a = Tensor::from_fn(&a_shape, |i| (i as f64 * 0.3).sin());
            let b = Tensor::from_fn(&b_shape, |i| (i as f64 * 0.7).cos());
            let c = bmm(&a, &b, ta, tb).unwrap();
            assert!(c.max_abs_diff(&naive(&a, &b, ta, tb)) < 1e-12);
            // adjoint identity for the backward
            let g = Tensor::from_fn(c.shape(), |i| (i as f64 * 1.1).sin());
            let (ga, gb) = bmm_backward(&a, &b, ta, tb, &g).unwrap();
            let lhs: f64 = c.data().iter().zip(g.data()).map(|(x, y)| x * y).sum();
            let ra: f64 = a.data().iter().zip(ga.data()).map(|(x, y)| x * y).sum();
            let rb: f64 = b.data().iter().zip(gb.data()).map(|(x, y)| x * y).sum();
            assert!((lhs - ra).abs() < 1e-10 && (lhs - rb).abs() < 1e-10, "ta={ta} tb={tb}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_fn(&[3, 7], |i| i as f64 * 13.0 - 40.0);
        let y = softmax_last(&x);
        for row in y.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
