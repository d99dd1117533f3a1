//! Spatial selection: a chain of dilated depthwise convolutions whose
//! per-stage outputs are reweighted by sigmoid spatial maps.

use usfnet_autograd::Var;

use crate::config::KernelSpec;
use crate::error::{Error, Result};
use crate::nn::{fold_time, unfold_time, Conv2d, Module, ParamSpec, Session};

/// How the per-branch spatial weights are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsmGate {
    Learned,
    /// Every weight is exactly one.
    Ones,
}

#[derive(Debug, Clone)]
pub struct Ssm {
    pub pre: Conv2d,
    pub stages: Vec<Conv2d>,
    pub spatial: Conv2d,
    pub out: Conv2d,
    pub channels: usize,
}

/// Intermediate maps of one SSM pass, frames folded into the batch axis.
#[derive(Debug, Clone)]
pub struct SsmTrace<'g> {
    pub stage_outputs: Vec<Var<'g>>,
    /// `(M, branches, H, W)`, values in `(0, 1)`.
    pub weights: Var<'g>,
    pub x_sa: Var<'g>,
}

impl Ssm {
    pub fn new(name: &str, channels: usize, kernels: &KernelSpec) -> Self {
        let stages = kernels
            .stages()
            .iter()
            .enumerate()
            .map(|(i, &(k, d))| Conv2d::depthwise(format!("{name}.stage{}", i + 1), channels, k).dilation(d))
            .collect();
        let m = kernels.len();
        Ssm {
            pre: Conv2d::depthwise(format!("{name}.pre"), channels, 3),
            stages,
            spatial: Conv2d::new(format!("{name}.spatial"), 2, m, 7),
            out: Conv2d::pointwise(format!("{name}.out"), m * channels, channels),
            channels,
        }
    }

    pub fn branches(&self) -> usize {
        self.stages.len()
    }

    /// Runs only the dilated stage chain on `(M, C, H, W)`, returning every stage output.
    pub fn stage_chain<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Vec<Var<'g>>> {
        let mut h = x;
        let mut outs = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            h = st.forward(s, h)?;
            outs.push(h);
        }
        Ok(outs)
    }

    /// `x` is `(B, T, C, H, W)` or `(M, C, H, W)`; the shape is preserved.
    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        Ok(self.forward_traced(s, x, SsmGate::Learned)?.0)
    }

    pub fn forward_traced<'g>(&self, s: &Session<'g>, x: Var<'g>, gate: SsmGate) -> Result<(Var<'g>, SsmTrace<'g>)> {
        if x.shape().len() == 5 {
            let b = x.dim(0);
            let (y, t) = self.forward_traced(s, fold_time(x)?, gate)?;
            return Ok((unfold_time(y, b)?, t));
        }
        let m = self.branches();
        if self.spatial.cout != m {
            return Err(Error::Invalid(format!("SSM has {m} kernel stages but {} selection maps", self.spatial.cout)));
        }
        let h = self.pre.forward(s, x)?.gelu();
        let stage_outputs = self.stage_chain(s, h)?;
        let xk = Var::concat(&stage_outputs, 1)?;
        let avg = xk.mean_axes(&[1])?;
        let max = xk.max_axis(1)?;
        let weights = self.spatial.forward(s, Var::concat(&[avg, max], 1)?)?.sigmoid();
        let weighted = match gate {
            SsmGate::Learned => {
                let w = weights.chunk(m, 1)?;
                let parts = stage_outputs.iter().zip(w).map(|(&xi, wi)| xi.mul(wi)).collect::<std::result::Result<Vec<_>, _>>()?;
                Var::concat(&parts, 1)?
            }
            SsmGate::Ones => xk,
        };
        let x_sa = self.out.forward(s, weighted)?;
        Ok((x_sa.mul(x)?, SsmTrace { stage_outputs, weights, x_sa }))
    }
}

impl Module for Ssm {
    fn collect(&self, out: &mut Vec<ParamSpec>) {
        self.pre.collect(out);
        for st in &self.stages {
            st.collect(out);
        }
        self.spatial.collect(out);
        self.out.collect(out);
    }
}
