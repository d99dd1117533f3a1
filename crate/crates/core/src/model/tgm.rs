//! Fusion of the spatial and temporal branches with temporally guided
//! dynamic convolution.

use usfnet_autograd::Var;

use crate::error::{Error, Result};
use crate::nn::{fold_time, unfold_time, ChannelLayerNorm, Conv2d, Init, Module, ParamSpec, Session};

#[derive(Debug, Clone)]
pub struct Tgm {
    pub name: String,
    pub fuse_dw: Conv2d,
    pub proj_c: Conv2d,
    pub proj_p: Conv2d,
    pub norm: ChannelLayerNorm,
    pub out: Conv2d,
    pub channels: usize,
    pub groups: usize,
    pub regions: usize,
    pub kernel: usize,
    pub softmax_kernels: bool,
    /// When false the dynamic path is skipped and `X_U = X_F`.
    pub guided: bool,
}

/// Intermediates of one pass, frames folded into the batch axis (`M = B*T`).
#[derive(Debug, Clone, Copy)]
pub struct TgmTrace<'g> {
    /// `(M, C, H, W)`.
    pub fused: Var<'g>,
    /// `(M*J, HW, S^2)`.
    pub corr: Option<Var<'g>>,
    /// `(M, J, K, K)`.
    pub kernels: Option<Var<'g>>,
    pub updated: Var<'g>,
}

impl Tgm {
    #[allow(clippy::too_many_arguments)]
    pub fn new(name: &str, channels: usize, groups: usize, regions: usize, kernel: usize, softmax_kernels: bool, guided: bool) -> Self {
        Tgm {
            name: name.to_string(),
            fuse_dw: Conv2d::depthwise(format!("{name}.fuse_dw"), channels, 3),
            proj_c: Conv2d::pointwise(format!("{name}.proj_c"), channels, channels),
            proj_p: Conv2d::pointwise(format!("{name}.proj_p"), channels, channels),
            norm: ChannelLayerNorm::new(format!("{name}.norm"), channels),
            out: Conv2d::new(format!("{name}.out"), channels, channels, 3),
            channels,
            groups,
            regions,
            kernel,
            softmax_kernels,
            guided,
        }
    }

    fn map_weight(&self) -> String {
        format!("{}.kernel_map.weight", self.name)
    }

    fn map_bias(&self) -> String {
        format!("{}.kernel_map.bias", self.name)
    }

    fn check(&self) -> Result<()> {
        if self.groups == 0 || !self.channels.is_multiple_of(self.groups) {
            return Err(Error::Invalid(format!("{} groups do not divide {} channels", self.groups, self.channels)));
        }
        if self.regions == 0 {
            return Err(Error::Invalid("region grid must be at least 1x1".into()));
        }
        Ok(())
    }

    /// `(M, C, H, W)` fused map -> per-sample kernels `(M, J, K, K)` and the correlation.
    pub fn dynamic_kernels<'g>(&self, s: &Session<'g>, xf: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        self.check()?;
        let (m, c, h, w) = (xf.dim(0), xf.dim(1), xf.dim(2), xf.dim(3));
        let (j, sr, k) = (self.groups, self.regions, self.kernel);
        let xc = self.proj_c.forward(s, xf)?.reshape(&[m * j, c / j, h * w])?;
        let pooled = xf.adaptive_avg_pool2d(sr, sr)?;
        let xp = self.proj_p.forward(s, pooled)?.reshape(&[m * j, c / j, sr * sr])?;
        let corr = xc.bmm(xp, true, false)?;
        let summary = corr.mean_axes(&[1])?;
        let wmap = s.param(&self.map_weight())?.reshape(&[1, sr * sr, k * k])?;
        let bias = s.param(&self.map_bias())?;
        let mut logits = summary.bmm(wmap, false, false)?.add(bias)?;
        if self.softmax_kernels {
            logits = logits.softmax_last();
        }
        Ok((logits.reshape(&[m, j, k, k])?, corr))
    }

    pub fn forward<'g>(&self, s: &Session<'g>, x_s: Var<'g>, x_t: Var<'g>) -> Result<Var<'g>> {
        Ok(self.forward_traced(s, x_s, x_t, None)?.0)
    }

    /// `x_s`, `x_t` are `(B, T, C, H, W)`. `kernels` replaces the generated
    /// dynamic kernels when given.
    pub fn forward_traced<'g>(
        &self,
        s: &Session<'g>,
        x_s: Var<'g>,
        x_t: Var<'g>,
        kernels: Option<Var<'g>>,
    ) -> Result<(Var<'g>, TgmTrace<'g>)> {
        if x_s.shape() != x_t.shape() {
            return Err(Error::Invalid(format!("fusion inputs differ: {:?} vs {:?}", x_s.shape(), x_t.shape())));
        }
        let b = x_s.dim(0);
        let f0 = fold_time(x_s.add(x_t)?)?;
        let fused = f0.add(self.fuse_dw.forward(s, f0)?)?;
        let (updated, corr, kernels) = if self.guided {
            let (kern, corr) = match kernels {
                Some(k) => (k, None),
                None => {
                    let (k, c) = self.dynamic_kernels(s, fused)?;
                    (k, Some(c))
                }
            };
            (fused.add(fused.dynamic_conv(kern)?)?, corr, Some(kern))
        } else {
            (fused, None, None)
        };
        let x_d = self.out.forward(s, self.norm.forward(s, updated)?)?;
        Ok((unfold_time(x_d, b)?, TgmTrace { fused, corr, kernels, updated }))
    }
}

impl Module for Tgm {
    fn collect(&self, out: &mut Vec<ParamSpec>) {
        self.fuse_dw.collect(out);
        if self.guided {
            self.proj_c.collect(out);
            self.proj_p.collect(out);
            let s2 = self.regions * self.regions;
            let k2 = self.kernel * self.kernel;
            let bound = 1.0 / (s2 as f64).sqrt();
            out.push(ParamSpec::param(self.map_weight(), &[s2, k2], Init::Uniform(bound)));
            out.push(ParamSpec::param(self.map_bias(), &[k2], Init::Uniform(bound)));
        }
        self.norm.collect(out);
        self.out.collect(out);
    }
}
