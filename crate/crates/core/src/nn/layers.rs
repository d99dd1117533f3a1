use usfnet_autograd::{Conv2dOpts, Tensor, Var};

use super::params::{Init, Module, ParamSpec, Session};
use crate::error::{Error, Result};

/// 2-D convolution with `same` padding (for odd kernels at stride 1).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub opts: Conv2dOpts,
    pub bias: bool,
    pub bias_init: Option<f64>,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        Conv2d {
            name: name.into(),
            cin,
            cout,
            kernel,
            opts: Conv2dOpts::same(kernel, 1),
            bias: true,
            bias_init: None,
        }
    }

    pub fn depthwise(name: impl Into<String>, channels: usize, kernel: usize) -> Self {
        Self::new(name, channels, channels, kernel).groups(channels)
    }

    pub fn pointwise(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, 1)
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.opts.stride = s;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.opts.dilation = d;
        self.opts.padding = d * (self.kernel - 1) / 2;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.opts.groups = g;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn with_bias_init(mut self, v: f64) -> Self {
        self.bias_init = Some(v);
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    fn fan_in(&self) -> usize {
        self.cin / self.opts.groups * self.kernel * self.kernel
    }

    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        if x.dim(1) != self.cin {
            return Err(Error::Invalid(format!("{}: expected {} input channels, got {:?}", self.name, self.cin, x.shape())));
        }
        let w = s.param(&self.weight_name())?;
        let b = if self.bias { Some(s.param(&self.bias_name())?) } else { None };
        Ok(x.conv2d(w, b, self.opts)?)
    }
}

impl Module for Conv2d {
    fn collect(&self, out: &mut Vec<ParamSpec>) {
        // Unit-variance weights; biases at the smaller 1/sqrt(fan_in) scale.
        let fan_in = self.fan_in() as f64;
        out.push(ParamSpec::param(
            self.weight_name(),
            &[self.cout, self.cin / self.opts.groups, self.kernel, self.kernel],
            Init::Uniform((3.0 / fan_in).sqrt()),
        ));
        if self.bias {
            let init = self.bias_init.map_or(Init::Uniform(1.0 / fan_in.sqrt()), Init::Const);
            out.push(ParamSpec::param(self.bias_name(), &[self.cout], init));
        }
    }
}

fn channel_view<'g>(s: &Session<'g>, name: &str, c: usize) -> Result<Var<'g>> {
    Ok(s.param(name)?.reshape(&[1, c, 1, 1])?)
}

/// Normalisation over the channel axis at every spatial location.
#[derive(Debug, Clone)]
pub struct ChannelLayerNorm {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
}

impl ChannelLayerNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        ChannelLayerNorm { name: name.into(), channels, eps: 1e-6 }
    }

    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let mu = x.mean_axes(&[1])?;
        let xc = x.sub(mu)?;
        let var = xc.square().mean_axes(&[1])?;
        let xn = xc.div(var.shift(self.eps).sqrt())?;
        let g = channel_view(s, &format!("{}.weight", self.name), self.channels)?;
        let b = channel_view(s, &format!("{}.bias", self.name), self.channels)?;
        Ok(xn.mul(g)?.add(b)?)
    }
}

impl Module for ChannelLayerNorm {
    fn collect(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec::param(format!("{}.weight", self.name), &[self.channels], Init::Const(1.0)));
        out.push(ParamSpec::param(format!("{}.bias", self.name), &[self.channels], Init::Const(0.0)));
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm2d { name: name.into(), channels, eps: 1e-5, momentum: 0.1 }
    }

    fn key(&self, k: &str) -> String {
        format!("{}.{k}", self.name)
    }

    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let c = self.channels;
        let g = s.graph();
        let (xc, denom) = if s.training() {
            let mu = x.mean_axes(&[0, 2, 3])?;
            let xc = x.sub(mu)?;
            let var = xc.square().mean_axes(&[0, 2, 3])?;
            let count = x.dim(0) * x.dim(2) * x.dim(3);
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            let m = self.momentum;
            let run_mean = blend(s.buffer(&self.key("running_mean"))?, &mu.value(), m, 1.0);
            let run_var = blend(s.buffer(&self.key("running_var"))?, &var.value(), m, unbias);
            s.record_buffer(&self.key("running_mean"), run_mean);
            s.record_buffer(&self.key("running_var"), run_var);
            (xc, var.shift(self.eps).sqrt())
        } else {
            let mu = g.constant(s.buffer(&self.key("running_mean"))?.reshape(&[1, c, 1, 1])?);
            let var = s.buffer(&self.key("running_var"))?.reshape(&[1, c, 1, 1])?;
            (x.sub(mu)?, g.constant(var.map(|v| (v + self.eps).sqrt())))
        };
        let w = channel_view(s, &self.key("weight"), c)?;
        let b = channel_view(s, &self.key("bias"), c)?;
        Ok(xc.div(denom)?.mul(w)?.add(b)?)
    }
}

fn blend(running: &Tensor, batch: &Tensor, m: f64, batch_scale: f64) -> Tensor {
    Tensor::from_fn(running.shape(), |i| (1.0 - m) * running.data()[i] + m * batch_scale * batch.data()[i])
}

impl Module for BatchNorm2d {
    fn collect(&self, out: &mut Vec<ParamSpec>) {
        let c = self.channels;
        out.push(ParamSpec::param(self.key("weight"), &[c], Init::Const(1.0)));
        out.push(ParamSpec::param(self.key("bias"), &[c], Init::Const(0.0)));
        out.push(ParamSpec::buffer(self.key("running_mean"), &[c], Init::Const(0.0)));
        out.push(ParamSpec::buffer(self.key("running_var"), &[c], Init::Const(1.0)));
    }
}

/// Squeeze-excitation channel gate.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub reduce: Conv2d,
    pub expand: Conv2d,
}

impl SqueezeExcite {
    pub fn new(name: &str, channels: usize, ratio: usize) -> Self {
        let hidden = (channels / ratio.max(1)).max(1);
        SqueezeExcite {
            reduce: Conv2d::pointwise(format!("{name}.reduce"), channels, hidden),
            expand: Conv2d::pointwise(format!("{name}.expand"), hidden, channels),
        }
    }

    /// Per-channel gates in (0, 1), shape `(M, C, 1, 1)`.
    pub fn gates<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let pooled = x.mean_axes(&[2, 3])?;
        let h = self.reduce.forward(s, pooled)?.relu();
        Ok(self.expand.forward(s, h)?.sigmoid())
    }

    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.mul(self.gates(s, x)?).map_err(Into::into)
    }
}

impl Module for SqueezeExcite {
    fn collect(&self, out: &mut Vec<ParamSpec>) {
        self.reduce.collect(out);
        self.expand.collect(out);
    }
}

/// `(B, T, C, H, W)` -> `(B*T, C, H, W)`.
pub fn fold_time<'g>(x: Var<'g>) -> Result<Var<'g>> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::Invalid(format!("expected a (B,T,C,H,W) tensor, got {s:?}")));
    }
    Ok(x.reshape(&[s[0] * s[1], s[2], s[3], s[4]])?)
}

/// `(B*T, C, H, W)` -> `(B, T, C, H, W)`.
pub fn unfold_time<'g>(x: Var<'g>, batch: usize) -> Result<Var<'g>> {
    let s = x.shape();
    if s.len() != 4 || batch == 0 || !s[0].is_multiple_of(batch) {
        return Err(Error::Invalid(format!("cannot unfold {s:?} into batch {batch}")));
    }
    Ok(x.reshape(&[batch, s[0] / batch, s[1], s[2], s[3]])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ParamStore};
    use usfnet_autograd::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_for(m: &dyn Module, seed: u64) -> ParamStore {
        ParamStore::init(&m.param_specs(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn layer_norm_normalises_channels() {
        let ln = ChannelLayerNorm::new("ln", 3);
        let store = store_for(&ln, 0);
        let g = Graph::new();
        let s = Session::new(&g, &store, Mode::Eval);
        let x = g.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.7).sin() * 3.0));
        let y = ln.forward(&s, x).unwrap().value();
        for n in 0..2 {
            for p in 0..4 {
                let v: Vec<f64> = (0..3).map(|c| y.data()[n * 12 + c * 4 + p]).collect();
                let mean = v.iter().sum::<f64>() / 3.0;
                let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 3.0;
                assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn batch_norm_train_updates_running_stats_eval_uses_them() {
        let bn = BatchNorm2d::new("bn", 2);
        let mut store = store_for(&bn, 0);
        let x = Tensor::from_fn(&[3, 2, 2, 2], |i| i as f64);
        let g = Graph::new();
        let s = Session::new(&g, &store, Mode::Train);
        let y = bn.forward(&s, g.constant(x.clone())).unwrap().value();
        assert!(y.sum().abs() < 1e-9);
        let upd = s.take_buffer_updates();
        let rm = &upd["bn.running_mean"];
        // channel 0 holds 0..4, 8..12, 16..20 -> mean 9.5
        assert!((rm.data()[0] - 0.95).abs() < 1e-12);
        for (k, v) in upd {
            store.insert_buffer(k, v);
        }
        let g2 = Graph::new();
        let s2 = Session::new(&g2, &store, Mode::Eval);
        let y2 = bn.forward(&s2, g2.constant(x)).unwrap().value();
        assert!(y2.max_abs_diff(&y) > 0.1);
    }

    #[test]
    fn se_gates_are_strictly_positive() {
        let se = SqueezeExcite::new("se", 8, 4);
        let store = store_for(&se, 3);
        let g = Graph::new();
        let s = Session::new(&g, &store, Mode::Eval);
        let x = g.constant(Tensor::randn(&[2, 8, 4, 4], &mut ChaCha8Rng::seed_from_u64(1)));
        let gates = se.gates(&s, x).unwrap().value();
        assert_eq!(gates.shape(), &[2, 8, 1, 1]);
        assert!(gates.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let y = se.forward(&s, x).unwrap().value();
        assert!(y.data().iter().zip(x.value().data()).all(|(a, b)| a * b >= 0.0));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let c = Conv2d::new("c", 3, 4, 3);
        let store = store_for(&c, 0);
        let g = Graph::new();
        let s = Session::new(&g, &store, Mode::Eval);
        assert!(c.forward(&s, g.constant(Tensor::zeros(&[1, 2, 4, 4]))).is_err());
        let y = c.forward(&s, g.constant(Tensor::zeros(&[1, 3, 5, 5]))).unwrap();
        assert_eq!(y.shape(), vec![1, 4, 5, 5]);
        let d = Conv2d::new("d", 3, 4, 3).stride(2);
        let store = store_for(&d, 0);
        let s = Session::new(&g, &store, Mode::Eval);
        assert_eq!(d.forward(&s, g.constant(Tensor::zeros(&[1, 3, 8, 8]))).unwrap().shape(), vec![1, 4, 4, 4]);
    }
}
