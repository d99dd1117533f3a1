//! Bottleneck module joining the spatial selection branch, the temporal
//! attention branch and their guided fusion.

use usfnet_autograd::Var;

use super::encoder::FeaturePyramid;
use super::ssm::Ssm;
use super::tam::{ConvEmbed, Tam};
use super::tgm::Tgm;
use crate::config::{ModelConfig, TemporalBranch};
use crate::error::Result;
use crate::nn::{fold_time, unfold_time, Conv2d, Module, ParamSpec, Session};

#[derive(Debug, Clone)]
pub struct Ustm {
    /// Strided 3x3 conv taking the bottleneck map from /8 to /16.
    pub down: Conv2d,
    pub ssm: Option<Ssm>,
    pub embed: ConvEmbed,
    pub tam: Tam,
    pub tgm: Tgm,
}

/// All branch outputs, each `(B, T, C4, H/16, W/16)`.
#[derive(Debug, Clone, Copy)]
pub struct UstmOutput<'g> {
    pub x_s: Var<'g>,
    pub x_t: Var<'g>,
    pub x_d: Var<'g>,
    /// Temporal branch output kept for the decoder gate (same node as `x_t`).
    pub x_t0: Var<'g>,
}

impl Ustm {
    pub fn new(cfg: &ModelConfig) -> Self {
        let [_, _, c3, c4] = cfg.channels();
        let ab = &cfg.ablation;
        Ustm {
            down: Conv2d::new("ustm.down", c3, c4, 3).stride(2),
            ssm: ab.ssm.then(|| Ssm::new("ustm.ssm", c4, &cfg.ssm_kernels)),
            embed: ConvEmbed::new("ustm.embed", c3, c4),
            tam: Tam::new("ustm.tam", cfg.in_frames, c4, cfg.agent_tokens, cfg.attention_scaling, ab.temporal),
            tgm: Tgm::new(
                "ustm.tgm",
                c4,
                cfg.tgm_groups,
                cfg.tgm_regions,
                cfg.tgm_kernel,
                cfg.dynamic_kernel_softmax,
                ab.tgm,
            ),
        }
    }

    /// Spatial branch on the bottleneck map `(B, T, C3, H/8, W/8)`.
    pub fn spatial<'g>(&self, s: &Session<'g>, x_b: Var<'g>) -> Result<Var<'g>> {
        let b = x_b.dim(0);
        let xb = unfold_time(self.down.forward(s, fold_time(x_b)?)?, b)?;
        match &self.ssm {
            Some(ssm) => ssm.forward(s, xb),
            None => Ok(xb),
        }
    }

    /// Temporal branch on `f3`.
    pub fn temporal<'g>(&self, s: &Session<'g>, f3: Var<'g>) -> Result<Var<'g>> {
        let e = self.embed.forward(s, f3)?;
        self.tam.forward(s, e)
    }

    pub fn forward<'g>(&self, s: &Session<'g>, p: &FeaturePyramid<'g>) -> Result<UstmOutput<'g>> {
        let x_s = self.spatial(s, p.x_b())?;
        let x_t = self.temporal(s, p.f3)?;
        let x_d = self.tgm.forward(s, x_s, x_t)?;
        Ok(UstmOutput { x_s, x_t, x_d, x_t0: x_t })
    }
}

impl Module for Ustm {
    fn collect(&self, out: &mut Vec<ParamSpec>) {
        self.down.collect(out);
        if let Some(ssm) = &self.ssm {
            ssm.collect(out);
        }
        self.embed.collect(out);
        if self.tam.mode != TemporalBranch::None {
            self.tam.collect(out);
        }
        self.tgm.collect(out);
    }
}
