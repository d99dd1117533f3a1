//! Receptive-field impulse probe and attention cost sweep.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use usfnet_autograd::{Graph, Tensor};

use crate::config::{receptive_field, KernelSpec};
use crate::error::{Error, Result};
use crate::model::{agent_attention, dense_attention, Ssm};
use crate::nn::{Mode, Module, ParamStore, Session};
use crate::oracle;

/// The kernel decompositions compared in the receptive-field ablation.
pub fn rf_table_specs() -> Vec<KernelSpec> {
    [
        vec![(3, 1), (5, 2)],
        vec![(3, 1), (7, 3)],
        vec![(5, 1), (7, 3)],
        vec![(5, 1), (7, 4)],
        vec![(7, 1), (9, 4)],
    ]
    .into_iter()
    .map(|v| KernelSpec::new(v).expect("static specs are valid"))
    .collect()
}

/// The decompositions compared in the kernel-count ablation.
pub fn kernel_count_specs() -> Vec<KernelSpec> {
    [vec![(23, 1)], vec![(5, 1), (7, 3)], vec![(3, 1), (5, 1), (7, 2)]]
        .into_iter()
        .map(|v| KernelSpec::new(v).expect("static specs are valid"))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RfRow {
    pub spec: String,
    pub formula: usize,
    /// Support width of the production stage chain's impulse response.
    pub measured: usize,
    /// Support width of the nested-loop reference.
    pub oracle: usize,
    /// Max abs difference between production and reference responses.
    pub max_diff: f64,
}

impl RfRow {
    pub fn matches(&self) -> bool {
        self.measured == self.formula && self.oracle == self.formula
    }
}

/// Pushes a unit impulse through the SSM's dilated depthwise stages with
/// random weights and zero biases; support counted at `|v| > 1e-12`.
pub fn rf_probe(specs: &[KernelSpec], seed: u64) -> Result<Vec<RfRow>> {
    let mut rows = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let formula = receptive_field(spec);
        let size = 2 * formula + 1;
        let ssm = Ssm::new("probe", 1, spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let mut store = ParamStore::init(&ssm.param_specs(), &mut rng)?;
        for (name, t) in store.params_mut() {
            if name.ends_with(".bias") {
                *t = Tensor::zeros(t.shape());
            }
        }
        let impulse = Tensor::from_fn(&[size, size], |j| if j == size * size / 2 { 1.0 } else { 0.0 });
        let g = Graph::new();
        let s = Session::new(&g, &store, Mode::Eval);
        let outs = ssm.stage_chain(&s, g.constant(impulse.reshape(&[1, 1, size, size])?))?;
        let last = outs.last().ok_or_else(|| Error::Invalid("empty kernel spec".into()))?;
        let resp = last.value().reshape(&[size, size])?;

        let stack = ssm
            .stages
            .iter()
            .map(|st| {
                let w = store.get(&st.weight_name())?;
                Ok((w.reshape(&[st.kernel, st.kernel])?, st.opts.dilation))
            })
            .collect::<Result<Vec<_>>>()?;
        let reference = oracle::direct_dilated_conv(&impulse, &stack);
        let max_diff = resp.data().iter().zip(reference.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let (mh, mw) = oracle::support_extent(&resp, 1e-12);
        let (oh, ow) = oracle::support_extent(&reference, 1e-12);
        rows.push(RfRow {
            spec: spec.to_string(),
            formula,
            measured: mh.max(mw),
            oracle: oh.max(ow),
            max_diff,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct CostRow {
    pub tokens: usize,
    pub agent_secs: f64,
    pub dense_secs: f64,
    pub agent_matrix_bytes: usize,
    pub dense_matrix_bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComplexityReport {
    pub agents: usize,
    pub dim: usize,
    pub rows: Vec<CostRow>,
    /// Log-log slope of runtime against token count.
    pub agent_slope: f64,
    pub dense_slope: f64,
    /// Attention-matrix bytes at `agents` and at `agents / 2`, largest N.
    pub memory_at_n: usize,
    pub memory_at_half_n: usize,
}

impl ComplexityReport {
    pub fn memory_ratio(&self) -> f64 {
        self.memory_at_half_n as f64 / self.memory_at_n as f64
    }
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

fn time_min(repeats: usize, mut f: impl FnMut() -> Result<usize>) -> Result<(f64, usize)> {
    let mut best = f64::INFINITY;
    let mut bytes = 0;
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        bytes = f()?;
        best = best.min(t0.elapsed().as_secs_f64());
    }
    Ok((best, bytes))
}

/// Forward cost of the agent attention core and of dense softmax attention
/// over token counts `dims` (batch 1, feature width `dim`).
pub fn attention_complexity_probe(dims: &[usize], agents: usize, dim: usize, repeats: usize, seed: u64) -> Result<ComplexityReport> {
    if dims.len() < 2 {
        return Err(Error::Invalid("need at least two token counts".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(dims.len());
    let mut mem = (0, 0);
    for &n_tok in dims {
        let q = Tensor::randn(&[1, n_tok, dim], &mut rng);
        let k = Tensor::randn(&[1, n_tok, dim], &mut rng);
        let v = Tensor::randn(&[1, n_tok, dim], &mut rng);
        let run_agent = |n: usize| -> Result<usize> {
            let g = Graph::new();
            let o = agent_attention(g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()), n, true)?;
            Ok(o.matrix_bytes())
        };
        let (agent_secs, agent_matrix_bytes) = time_min(repeats, || run_agent(agents))?;
        let (dense_secs, dense_matrix_bytes) = time_min(repeats, || {
            let g = Graph::new();
            let o = dense_attention(g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()), true)?;
            Ok(o.matrix_bytes())
        })?;
        mem = (agent_matrix_bytes, run_agent((agents / 2).max(1))?);
        rows.push(CostRow { tokens: n_tok, agent_secs, dense_secs, agent_matrix_bytes, dense_matrix_bytes });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.tokens as f64).collect();
    let agent_slope = loglog_slope(&xs, &rows.iter().map(|r| r.agent_secs).collect::<Vec<_>>());
    let dense_slope = loglog_slope(&xs, &rows.iter().map(|r| r.dense_secs).collect::<Vec<_>>());
    Ok(ComplexityReport { agents, dim, rows, agent_slope, dense_slope, memory_at_n: mem.0, memory_at_half_n: mem.1 })
}
