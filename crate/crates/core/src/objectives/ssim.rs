use usfnet_autograd::{Conv2dOpts, Graph, Tensor, Var};

use crate::config::{effective_levels, Luminance, ModelConfig, MsSsimExponents};
use crate::error::{Error, Result};

const STANDARD_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const FLAT_WEIGHT: f64 = 0.0448;
/// Lower bound applied to the per-level mean terms before exponentiation.
pub const TERM_FLOOR: f64 = 1e-6;

/// Window, constants and exponents of (MS-)SSIM.
///
/// Contrast and structure share one exponent per level (`beta_j = gamma_j`),
/// so they are evaluated as their pixelwise product.
#[derive(Debug, Clone, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub levels: usize,
    pub alpha: f64,
    pub weights: Vec<f64>,
    pub per_level_luminance: bool,
}

impl SsimParams {
    fn base(levels: usize, max_val: f64, weights: Vec<f64>) -> Self {
        let c2 = (0.03 * max_val).powi(2);
        SsimParams {
            window: 11,
            sigma: 1.5,
            c1: (0.01 * max_val).powi(2),
            c2,
            c3: c2 / 2.0,
            levels,
            alpha: 1.0,
            weights,
            per_level_luminance: false,
        }
    }

    /// `alpha = 1`, `beta = gamma = 0.0448` at every level.
    pub fn flat(levels: usize, max_val: f64) -> Self {
        Self::base(levels, max_val, vec![FLAT_WEIGHT; levels])
    }

    /// The conventional per-level weights, truncated to `levels` and renormalised.
    pub fn standard(levels: usize, max_val: f64) -> Self {
        let take = levels.min(STANDARD_WEIGHTS.len());
        let sum: f64 = STANDARD_WEIGHTS[..take].iter().sum();
        let mut w: Vec<f64> = STANDARD_WEIGHTS[..take].iter().map(|v| v / sum).collect();
        w.resize(levels, 0.0);
        let mut p = Self::base(levels, max_val, w);
        p.alpha = p.weights[0];
        p
    }

    pub fn from_config(cfg: &ModelConfig, h: usize, w: usize) -> Self {
        let levels = effective_levels(cfg.msssim_levels, h, w).max(1);
        let mut p = match cfg.msssim_exponents {
            MsSsimExponents::Flat => Self::flat(levels, 1.0),
            MsSsimExponents::Standard => Self::standard(levels, 1.0),
        };
        p.per_level_luminance = cfg.luminance == Luminance::PerLevel;
        p
    }

    pub fn min_size(&self) -> usize {
        self.window << (self.levels - 1)
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.levels == 0 || self.window.is_multiple_of(2) || self.weights.len() != self.levels {
            return Err(Error::Invalid(format!("inconsistent SSIM parameters: {self:?}")));
        }
        if h.min(w) < self.min_size() {
            return Err(Error::Invalid(format!(
                "image too small for {} levels: {h}x{w} < {}",
                self.levels,
                self.min_size()
            )));
        }
        Ok(())
    }
}

fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode Gaussian filtering of every channel of `(P, C, H, W)`.
fn gaussian_filter<'g>(g: &'g Graph, x: Var<'g>, p: &SsimParams) -> Result<Var<'g>> {
    let c = x.dim(1);
    let taps = gaussian_taps(p.window, p.sigma);
    let row = Tensor::from_fn(&[c, 1, 1, p.window], |i| taps[i % p.window]);
    let col = Tensor::from_fn(&[c, 1, p.window, 1], |i| taps[i % p.window]);
    let opts = Conv2dOpts::default().with_groups(c);
    Ok(x.conv2d(g.constant(row), None, opts)?.conv2d(g.constant(col), None, opts)?)
}

/// Halves `(P, C, H, W)` with a `[1 2 1]^2 / 16` blur at stride 2, renormalised at the borders.
fn decimate<'g>(g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
    let c = x.dim(1);
    let k = [1.0, 2.0, 1.0];
    let w = Tensor::from_fn(&[c, 1, 3, 3], |i| k[(i % 9) / 3] * k[i % 3] / 16.0);
    let opts = Conv2dOpts { stride: 2, padding: 1, dilation: 1, groups: c };
    let num = x.conv2d(g.constant(w.clone()), None, opts)?;
    let ones = Tensor::ones(&[1, c, x.dim(2), x.dim(3)]);
    let norm = usfnet_autograd::kernels::conv::conv2d_forward(&ones, &w, None, &opts)?;
    Ok(num.div(g.constant(norm))?)
}

/// Local statistics maps of one level: `(l_map, cs_map)`, each `(P, 1, H', W')`.
fn level_maps<'g>(g: &'g Graph, x: Var<'g>, y: Var<'g>, p: &SsimParams) -> Result<(Var<'g>, Var<'g>)> {
    let stack = Var::concat(&[x, y, x.square(), y.square(), x.mul(y)?], 1)?;
    let f = gaussian_filter(g, stack, p)?.chunk(5, 1)?;
    let (mx, my) = (f[0], f[1]);
    let mxx = mx.square();
    let myy = my.square();
    let mxy = mx.mul(my)?;
    let vx = f[2].sub(mxx)?;
    let vy = f[3].sub(myy)?;
    let cxy = f[4].sub(mxy)?;
    let l = mxy.scale(2.0).shift(p.c1).div(mxx.add(myy)?.shift(p.c1))?;
    let cs = cxy.scale(2.0).shift(p.c2).div(vx.add(vy)?.shift(p.c2))?;
    Ok((l, cs))
}

/// Per-image MS-SSIM of `(P, 1, H, W)` stacks; returns shape `(P, 1, 1, 1)`.
pub fn ms_ssim_images<'g>(x: Var<'g>, y: Var<'g>, p: &SsimParams) -> Result<Var<'g>> {
    if x.shape() != y.shape() || x.shape().len() != 4 || x.dim(1) != 1 {
        return Err(Error::Invalid(format!("ms_ssim expects equal (P,1,H,W) inputs, got {:?} and {:?}", x.shape(), y.shape())));
    }
    p.validate(x.dim(2), x.dim(3))?;
    let g = x.graph();
    let (mut xs, mut ys) = (x, y);
    let mut value: Option<Var<'g>> = None;
    let mut push = |v: Var<'g>| -> Result<()> {
        value = Some(match value {
            None => v,
            Some(acc) => acc.mul(v)?,
        });
        Ok(())
    };
    for lvl in 0..p.levels {
        let (l, cs) = level_maps(g, xs, ys, p)?;
        let cs_mean = cs.mean_axes(&[2, 3])?.clamp(TERM_FLOOR, f64::INFINITY);
        push(cs_mean.powf(p.weights[lvl]))?;
        if p.per_level_luminance || lvl == 0 {
            let l_mean = l.mean_axes(&[2, 3])?.clamp(TERM_FLOOR, f64::INFINITY);
            let e = if p.per_level_luminance { p.weights[lvl] } else { p.alpha };
            push(l_mean.powf(e))?;
        }
        if lvl + 1 < p.levels {
            let both = decimate(g, Var::concat(&[xs, ys], 1)?)?.chunk(2, 1)?;
            xs = both[0];
            ys = both[1];
        }
    }
    value.ok_or_else(|| Error::Invalid("no pyramid levels".into()))
}

/// Mean single-scale SSIM map value per image of `(P, 1, H, W)` stacks, shape `(P, 1, 1, 1)`.
pub fn ssim_images<'g>(x: Var<'g>, y: Var<'g>, p: &SsimParams) -> Result<Var<'g>> {
    if x.shape() != y.shape() || x.shape().len() != 4 || x.dim(1) != 1 {
        return Err(Error::Invalid(format!("ssim expects equal (P,1,H,W) inputs, got {:?} and {:?}", x.shape(), y.shape())));
    }
    let single = SsimParams { levels: 1, weights: vec![1.0], ..p.clone() };
    single.validate(x.dim(2), x.dim(3))?;
    let (l, cs) = level_maps(x.graph(), x, y, &single)?;
    Ok(l.mul(cs)?.mean_axes(&[2, 3])?)
}

/// MS-SSIM of two `(H, W)` images.
pub fn ms_ssim(x: &Tensor, y: &Tensor, p: &SsimParams) -> Result<f64> {
    let g = Graph::new();
    let shape = [1, 1, x.dim(0), x.dim(1)];
    let xv = g.constant(x.reshape(&shape)?);
    let yv = g.constant(y.reshape(&shape)?);
    Ok(ms_ssim_images(xv, yv, p)?.value().item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_weights_renormalise() {
        let p = SsimParams::standard(3, 1.0);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p.weights.len(), 3);
        let p5 = SsimParams::standard(5, 1.0);
        assert!((p5.weights[0] - 0.0448 / 1.0001).abs() < 1e-12);
    }

    #[test]
    fn too_small_images_rejected() {
        let p = SsimParams::flat(3, 1.0);
        assert_eq!(p.min_size(), 44);
        assert!(p.validate(43, 64).is_err());
        assert!(p.validate(44, 44).is_ok());
    }

    #[test]
    fn constants_follow_max_val() {
        let p = SsimParams::flat(1, 255.0);
        assert!((p.c1 - 6.5025).abs() < 1e-12);
        assert!((p.c2 - 58.5225).abs() < 1e-12);
        assert_eq!(p.c3, p.c2 / 2.0);
    }
}
