//! Gated update of the bottleneck features and progressive upsampling back
//! to the input resolution.

use usfnet_autograd::Var;

use crate::config::{ModelConfig, OutputHead};
use crate::error::{Error, Result};
use crate::nn::{fold_time, unfold_time, Conv2d, Module, ParamSpec, Session};

/// `fuse(cat(x_d, pw((w1 x_d + b) * sigmoid(w2 x_t0 + c))))`.
#[derive(Debug, Clone)]
pub struct Dum {
    pub w1: Conv2d,
    pub w2: Conv2d,
    pub pw: Conv2d,
    pub fuse: Conv2d,
}

impl Dum {
    pub fn new(name: &str, channels: usize) -> Self {
        Dum {
            w1: Conv2d::pointwise(format!("{name}.w1"), channels, channels),
            w2: Conv2d::pointwise(format!("{name}.w2"), channels, channels),
            pw: Conv2d::pointwise(format!("{name}.pw"), channels, channels),
            fuse: Conv2d::pointwise(format!("{name}.fuse"), 2 * channels, channels),
        }
    }

    /// Gate on `(M, C, H, W)` maps.
    pub fn gate<'g>(&self, s: &Session<'g>, x_d: Var<'g>, x_t0: Var<'g>) -> Result<Var<'g>> {
        let lin = self.w1.forward(s, x_d)?;
        let att = self.w2.forward(s, x_t0)?.sigmoid();
        Ok(lin.mul(att)?)
    }

    /// `(B, T, C, H, W)` in and out.
    pub fn forward<'g>(&self, s: &Session<'g>, x_d: Var<'g>, x_t0: Var<'g>) -> Result<Var<'g>> {
        if x_d.shape() != x_t0.shape() || x_d.shape().len() != 5 {
            return Err(Error::Invalid(format!("gate inputs differ: {:?} vs {:?}", x_d.shape(), x_t0.shape())));
        }
        let b = x_d.dim(0);
        let (xd, xt) = (fold_time(x_d)?, fold_time(x_t0)?);
        let g = self.pw.forward(s, self.gate(s, xd, xt)?)?;
        unfold_time(self.fuse.forward(s, Var::concat(&[xd, g], 1)?)?, b)
    }
}

impl Module for Dum {
    fn collect(&self, out: &mut Vec<ParamSpec>) {
        self.w1.collect(out);
        self.w2.collect(out);
        self.pw.collect(out);
        self.fuse.collect(out);
    }
}

/// 3x3 conv + GELU, 3x3 conv, bilinear x2.
#[derive(Debug, Clone)]
pub struct UpStage {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl UpStage {
    pub fn new(name: &str, cin: usize, cout: usize) -> Self {
        UpStage {
            conv1: Conv2d::new(format!("{name}.conv1"), cin, cout, 3),
            conv2: Conv2d::new(format!("{name}.conv2"), cout, cout, 3),
        }
    }

    /// Accepts `(M, C, H, W)` or `(B, T, C, H, W)`.
    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        if x.shape().len() == 5 {
            let b = x.dim(0);
            return unfold_time(self.forward(s, fold_time(x)?)?, b);
        }
        let h = self.conv1.forward(s, x)?.gelu();
        Ok(self.conv2.forward(s, h)?.upsample_bilinear(2)?)
    }
}

impl Module for UpStage {
    fn collect(&self, out: &mut Vec<ParamSpec>) {
        self.conv1.collect(out);
        self.conv2.collect(out);
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub dum: Option<Dum>,
    pub ups: Vec<UpStage>,
    /// Conv after the final bilinear x2.
    pub restore: Conv2d,
    /// 1x1 conv over the frame-stacked channels producing `tau * C` maps.
    pub head: Conv2d,
    pub in_frames: usize,
    pub out_frames: usize,
    pub image_channels: usize,
    pub output: OutputHead,
}

impl Decoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        let c4 = cfg.bottleneck_channels();
        let widths = cfg.decoder_channels();
        let mut cin = c4;
        let ups = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let st = UpStage::new(&format!("decoder.up{}", i + 1), cin, c);
                cin = c;
                st
            })
            .collect();
        let last = widths[2];
        Decoder {
            dum: cfg.ablation.dum.then(|| Dum::new("decoder.dum", c4)),
            ups,
            restore: Conv2d::new("decoder.restore", last, last, 3),
            head: Conv2d::pointwise("decoder.head", cfg.in_frames * last, cfg.out_frames * cfg.image_channels)
                .with_bias_init(0.5),
            in_frames: cfg.in_frames,
            out_frames: cfg.out_frames,
            image_channels: cfg.image_channels,
            output: cfg.output_head,
        }
    }

    /// Gated bottleneck map `d4`.
    pub fn d4<'g>(&self, s: &Session<'g>, x_d: Var<'g>, x_t0: Var<'g>) -> Result<Var<'g>> {
        match &self.dum {
            Some(d) => d.forward(s, x_d, x_t0),
            None => Ok(x_d),
        }
    }

    /// `(B, T, C4, H/16, W/16)` -> `(B, tau, C, H, W)`.
    pub fn forward<'g>(&self, s: &Session<'g>, x_d: Var<'g>, x_t0: Var<'g>) -> Result<Var<'g>> {
        let b = x_d.dim(0);
        let mut h = fold_time(self.d4(s, x_d, x_t0)?)?;
        for up in &self.ups {
            h = up.forward(s, h)?;
        }
        h = self.restore.forward(s, h.upsample_bilinear(2)?)?;
        let (c, hh, ww) = (h.dim(1), h.dim(2), h.dim(3));
        let stacked = h.reshape(&[b, self.in_frames * c, hh, ww])?;
        let y = self.head.forward(s, stacked)?.reshape(&[b, self.out_frames, self.image_channels, hh, ww])?;
        Ok(match self.output {
            OutputHead::Clamp => y.clamp(0.0, 1.0),
            OutputHead::Sigmoid => y.sigmoid(),
        })
    }
}

impl Module for Decoder {
    fn collect(&self, out: &mut Vec<ParamSpec>) {
        if let Some(d) = &self.dum {
            d.collect(out);
        }
        for u in &self.ups {
            u.collect(out);
        }
        self.restore.collect(out);
        self.head.collect(out);
    }
}
