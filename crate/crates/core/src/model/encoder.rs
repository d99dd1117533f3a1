//! Hierarchical encoder: three stages of strided downsampling plus Basic Layers.

use usfnet_autograd::Var;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{fold_time, unfold_time, ChannelLayerNorm, Conv2d, Module, ParamSpec, Session, SqueezeExcite};

/// Whether the squeeze-excitation gate is applied or replaced by ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeMode {
    Learned,
    Identity,
}

/// DW 3x3 -> channel LN -> DW 3x3 -> SE -> PW, plus identity residual.
#[derive(Debug, Clone)]
pub struct BasicLayer {
    pub dw1: Conv2d,
    pub norm: ChannelLayerNorm,
    pub dw2: Conv2d,
    pub se: SqueezeExcite,
    pub pw: Conv2d,
}

impl BasicLayer {
    pub fn new(name: &str, channels: usize, se_ratio: usize) -> Self {
        BasicLayer {
            dw1: Conv2d::depthwise(format!("{name}.dw1"), channels, 3),
            norm: ChannelLayerNorm::new(format!("{name}.norm"), channels),
            dw2: Conv2d::depthwise(format!("{name}.dw2"), channels, 3),
            se: SqueezeExcite::new(&format!("{name}.se"), channels, se_ratio),
            pw: Conv2d::pointwise(format!("{name}.pw"), channels, channels),
        }
    }

    /// Accepts `(M, C, H, W)` or `(B, T, C, H, W)`; frames are processed independently.
    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        self.forward_with(s, x, SeMode::Learned)
    }

    pub fn forward_with<'g>(&self, s: &Session<'g>, x: Var<'g>, se: SeMode) -> Result<Var<'g>> {
        if x.shape().len() == 5 {
            let b = x.dim(0);
            return unfold_time(self.forward_with(s, fold_time(x)?, se)?, b);
        }
        let mut h = self.dw1.forward(s, x)?;
        h = self.norm.forward(s, h)?;
        h = self.dw2.forward(s, h)?;
        if se == SeMode::Learned {
            h = self.se.forward(s, h)?;
        }
        h = self.pw.forward(s, h)?;
        Ok(h.add(x)?)
    }
}

impl Module for BasicLayer {
    fn collect(&self, out: &mut Vec<ParamSpec>) {
        self.dw1.collect(out);
        self.norm.collect(out);
        self.dw2.collect(out);
        self.se.collect(out);
        self.pw.collect(out);
    }
}

#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub down: Conv2d,
    pub blocks: Vec<BasicLayer>,
}

impl EncoderStage {
    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let mut h = self.down.forward(s, x)?;
        for b in &self.blocks {
            h = b.forward(s, h)?;
        }
        Ok(h)
    }
}

impl Module for EncoderStage {
    fn collect(&self, out: &mut Vec<ParamSpec>) {
        self.down.collect(out);
        for b in &self.blocks {
            b.collect(out);
        }
    }
}

/// Per-stage features, each `(B, T, C_i, H / 2^i, W / 2^i)`.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid<'g> {
    pub f1: Var<'g>,
    pub f2: Var<'g>,
    pub f3: Var<'g>,
}

impl<'g> FeaturePyramid<'g> {
    /// The bottleneck map (same node as `f3`).
    pub fn x_b(&self) -> Var<'g> {
        self.f3
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        let ch = cfg.channels();
        let mut cin = cfg.image_channels;
        let stages = (0..3)
            .map(|i| {
                let c = ch[i];
                let name = format!("encoder.stage{}", i + 1);
                let stage = EncoderStage {
                    down: Conv2d::new(format!("{name}.down"), cin, c, 3).stride(2),
                    blocks: (0..cfg.stage_depths[i])
                        .map(|j| BasicLayer::new(&format!("{name}.block{}", j + 1), c, cfg.se_reduction))
                        .collect(),
                };
                cin = c;
                stage
            })
            .collect();
        Encoder { stages }
    }

    /// `x` is `(B, T, C, H, W)`.
    pub fn encode<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<FeaturePyramid<'g>> {
        let b = x.dim(0);
        let mut h = fold_time(x)?;
        let mut feats = Vec::with_capacity(3);
        for st in &self.stages {
            h = st.forward(s, h)?;
            feats.push(unfold_time(h, b)?);
        }
        Ok(FeaturePyramid { f1: feats[0], f2: feats[1], f3: feats[2] })
    }
}

impl Module for Encoder {
    fn collect(&self, out: &mut Vec<ParamSpec>) {
        for st in &self.stages {
            st.collect(out);
        }
    }
}
