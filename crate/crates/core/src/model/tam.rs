//! Temporal branch: convolutional token embedding and two-stage agent attention
//! over the joint space-time token sequence.

use usfnet_autograd::Var;

use crate::config::TemporalBranch;
use crate::error::{Error, Result};
use crate::nn::{fold_time, unfold_time, BatchNorm2d, Conv2d, Module, ParamSpec, Session};

/// 3x3 strided conv + BN + ReLU, then a depthwise conv with residual. Halves H and W.
#[derive(Debug, Clone)]
pub struct ConvEmbed {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub dw: Conv2d,
}

impl ConvEmbed {
    pub fn new(name: &str, cin: usize, cout: usize) -> Self {
        ConvEmbed {
            conv: Conv2d::new(format!("{name}.conv"), cin, cout, 3).stride(2),
            bn: BatchNorm2d::new(format!("{name}.bn"), cout),
            dw: Conv2d::depthwise(format!("{name}.dw"), cout, 3),
        }
    }

    /// `(B, T, C_in, H, W)` -> `(B, T, C_out, H/2, W/2)`.
    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let b = x.dim(0);
        let y = self.bn.forward(s, self.conv.forward(s, fold_time(x)?)?)?.relu();
        let e = y.add(self.dw.forward(s, y)?)?;
        unfold_time(e, b)
    }
}

impl Module for ConvEmbed {
    fn collect(&self, out: &mut Vec<ParamSpec>) {
        self.conv.collect(out);
        self.bn.collect(out);
        self.dw.collect(out);
    }
}

/// `(B, T, C, H, W)` -> `(B, T*H*W, C)`, tokens ordered frame-major then row-major.
pub fn to_tokens<'g>(x: Var<'g>) -> Result<Var<'g>> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::Invalid(format!("expected (B,T,C,H,W), got {s:?}")));
    }
    Ok(x.permute(&[0, 1, 3, 4, 2])?.reshape(&[s[0], s[1] * s[3] * s[4], s[2]])?)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<'g>(x: Var<'g>, t: usize, h: usize, w: usize) -> Result<Var<'g>> {
    let (b, n, c) = (x.dim(0), x.dim(1), x.dim(2));
    if n != t * h * w {
        return Err(Error::Invalid(format!("{n} tokens do not tile {t}x{h}x{w}")));
    }
    Ok(x.reshape(&[b, t, h, w, c])?.permute(&[0, 1, 4, 2, 3])?)
}

/// Result of the attention core, all batched over the leading axis.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput<'g> {
    /// `(B, N, d)`.
    pub out: Var<'g>,
    /// `(B, n, d)`; absent for dense attention.
    pub agents: Option<Var<'g>>,
    /// Agent-to-key weights `(B, n, N)`, or the dense `(B, N, N)` matrix.
    pub stage1: Var<'g>,
    /// Query-to-agent weights `(B, N, n)`.
    pub stage2: Option<Var<'g>>,
}

impl AttentionOutput<'_> {
    /// Bytes held by the attention weight matrices.
    pub fn matrix_bytes(&self) -> usize {
        let n1 = self.stage1.value().numel();
        let n2 = self.stage2.map_or(0, |v| v.value().numel());
        (n1 + n2) * std::mem::size_of::<f64>()
    }
}

fn logit_scale(d: usize, scaled: bool) -> f64 {
    if scaled {
        1.0 / (d as f64).sqrt()
    } else {
        1.0
    }
}

/// Agents are `q` average-pooled over the token axis to `n` bins; then
/// `softmax(Q A^T) softmax(A K^T) V`. Inputs are `(B, N, d)`.
pub fn agent_attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>, n: usize, scaled: bool) -> Result<AttentionOutput<'g>> {
    let big_n = q.dim(1);
    if n == 0 || n > big_n {
        return Err(Error::Invalid(format!("agent count {n} must be in 1..={big_n}")));
    }
    let scale = logit_scale(q.dim(2), scaled);
    let agents = q.adaptive_avg_pool_axis(1, n)?;
    let stage1 = agents.bmm(k, false, true)?.scale(scale).softmax_last();
    let agent_feats = stage1.bmm(v, false, false)?;
    let stage2 = q.bmm(agents, false, true)?.scale(scale).softmax_last();
    let out = stage2.bmm(agent_feats, false, false)?;
    Ok(AttentionOutput { out, agents: Some(agents), stage1, stage2: Some(stage2) })
}

/// Plain `softmax(Q K^T) V` over `(B, N, d)` inputs.
pub fn dense_attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>, scaled: bool) -> Result<AttentionOutput<'g>> {
    let scale = logit_scale(q.dim(2), scaled);
    let stage1 = q.bmm(k, false, true)?.scale(scale).softmax_last();
    let out = stage1.bmm(v, false, false)?;
    Ok(AttentionOutput { out, agents: None, stage1, stage2: None })
}

#[derive(Debug, Clone)]
pub struct Tam {
    /// Per-frame, per-channel 3x3 aggregation producing queries.
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub v_dw: Conv2d,
    pub tail_dw: Conv2d,
    pub tail_pw: Conv2d,
    pub bn: BatchNorm2d,
    pub frames: usize,
    pub channels: usize,
    pub agents: usize,
    pub scaled: bool,
    pub mode: TemporalBranch,
}

impl Tam {
    pub fn new(name: &str, frames: usize, channels: usize, agents: usize, scaled: bool, mode: TemporalBranch) -> Self {
        let tc = frames * channels;
        Tam {
            q: Conv2d::depthwise(format!("{name}.q"), tc, 3),
            k: Conv2d::depthwise(format!("{name}.k"), tc, 3),
            v: Conv2d::pointwise(format!("{name}.v"), channels, channels),
            v_dw: Conv2d::depthwise(format!("{name}.v_dw"), channels, 3),
            tail_dw: Conv2d::depthwise(format!("{name}.tail_dw"), 2 * channels, 3),
            tail_pw: Conv2d::pointwise(format!("{name}.tail_pw"), 2 * channels, channels),
            bn: BatchNorm2d::new(format!("{name}.bn"), channels),
            frames,
            channels,
            agents,
            scaled,
            mode,
        }
    }

    /// Token projections `(B, N, C)` for `(B, T, C, H, W)` input.
    pub fn project<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
        let sh = x.shape();
        if sh.len() != 5 || sh[1] != self.frames || sh[2] != self.channels {
            return Err(Error::Invalid(format!(
                "temporal branch expects (B,{},{},H,W), got {sh:?}",
                self.frames, self.channels
            )));
        }
        let (b, t, c, h, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
        let stacked = x.reshape(&[b, t * c, h, w])?;
        let grid = |y: Var<'g>| y.reshape(&[b, t, c, h, w]);
        let q = to_tokens(grid(self.q.forward(s, stacked)?)?)?;
        let k = to_tokens(grid(self.k.forward(s, stacked)?)?)?;
        let v = to_tokens(unfold_time(self.v.forward(s, fold_time(x)?)?, b)?)?;
        Ok((q, k, v))
    }

    /// Attention core on `(B, T, C, H, W)` input; `None` when the branch is disabled.
    pub fn attend<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Option<(AttentionOutput<'g>, Var<'g>)>> {
        let (q, k, v) = self.project(s, x)?;
        let att = match self.mode {
            TemporalBranch::Agent => agent_attention(q, k, v, self.agents, self.scaled)?,
            TemporalBranch::Dense => dense_attention(q, k, v, self.scaled)?,
            TemporalBranch::None => return Ok(None),
        };
        Ok(Some((att, v)))
    }

    /// `(B, T, C, H, W)` in and out.
    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let Some((att, v)) = self.attend(s, x)? else {
            return Ok(x);
        };
        let (b, t, h, w) = (x.dim(0), x.dim(1), x.dim(3), x.dim(4));
        let vg = fold_time(from_tokens(v, t, h, w)?)?;
        let ag = fold_time(from_tokens(att.out, t, h, w)?)?;
        let v2 = vg.add(self.v_dw.forward(s, vg)?)?;
        let cat = Var::concat(&[v2, ag], 1)?;
        let y = self.bn.forward(s, self.tail_pw.forward(s, self.tail_dw.forward(s, cat)?)?)?;
        unfold_time(y, b)
    }
}

impl Module for Tam {
    fn collect(&self, out: &mut Vec<ParamSpec>) {
        if self.mode == TemporalBranch::None {
            return;
        }
        self.q.collect(out);
        self.k.collect(out);
        self.v.collect(out);
        self.v_dw.collect(out);
        self.tail_dw.collect(out);
        self.tail_pw.collect(out);
        self.bn.collect(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use usfnet_autograd::{Graph, Tensor};

    #[test]
    fn token_round_trip() {
        let g = Graph::new();
        let x = g.constant(Tensor::randn(&[2, 3, 4, 2, 5], &mut ChaCha8Rng::seed_from_u64(1)));
        let t = to_tokens(x).unwrap();
        assert_eq!(t.shape(), vec![2, 30, 4]);
        // token (frame 1, row 1, col 2) channel 3
        assert_eq!(t.value().at(&[1, 10 + 5 + 2, 3]), x.value().at(&[1, 1, 3, 1, 2]));
        let back = from_tokens(t, 3, 2, 5).unwrap();
        assert_eq!(back.value().data(), x.value().data());
    }

    #[test]
    fn equal_value_rows_pass_through() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = g.constant(Tensor::randn(&[1, 12, 4], &mut rng));
        let k = g.constant(Tensor::randn(&[1, 12, 4], &mut rng));
        let row = [0.3, -1.2, 2.0, 0.7];
        let v = g.constant(Tensor::from_fn(&[1, 12, 4], |i| row[i % 4]));
        let a = agent_attention(q, k, v, 3, true).unwrap();
        for (i, val) in a.out.value().data().iter().enumerate() {
            assert!((val - row[i % 4]).abs() < 1e-12);
        }
        assert!(agent_attention(q, k, v, 13, true).is_err());
    }

    #[test]
    fn embed_and_branch_shapes() {
        let (t, c) = (10, 64);
        let emb = ConvEmbed::new("embed", 64, c);
        let tam = Tam::new("tam", t, c, 49, true, TemporalBranch::Agent);
        let mut specs = emb.param_specs();
        specs.extend(tam.param_specs());
        let store = ParamStore::init(&specs, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let g = Graph::new();
        let s = Session::new(&g, &store, Mode::Eval);
        let f3 = g.constant(Tensor::randn(&[1, t, 64, 8, 8], &mut ChaCha8Rng::seed_from_u64(4)));
        let e = emb.forward(&s, f3).unwrap();
        assert_eq!(to_tokens(e).unwrap().shape(), vec![1, 160, 64]);
        let (att, _) = tam.attend(&s, e).unwrap().unwrap();
        assert_eq!(att.stage1.shape(), vec![1, 49, 160]);
        assert_eq!(att.matrix_bytes(), 2 * 49 * 160 * 8);
        assert_eq!(tam.forward(&s, e).unwrap().shape(), e.shape());
    }

    #[test]
    fn embed_zero_in_zero_out() {
        let emb = ConvEmbed::new("embed", 8, 8);
        let mut store = ParamStore::init(&emb.param_specs(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for (name, t) in store.params_mut() {
            if name.ends_with(".bias") {
                *t = Tensor::zeros(t.shape());
            }
        }
        let g = Graph::new();
        let s = Session::new(&g, &store, Mode::Eval);
        let e = emb.forward(&s, g.constant(Tensor::zeros(&[2, 3, 8, 8, 8]))).unwrap();
        assert_eq!(e.shape(), vec![2, 3, 8, 4, 4]);
        assert!(e.value().data().iter().all(|&v| v == 0.0));
    }
}
