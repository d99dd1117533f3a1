#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usfnet_core::config::{KernelSpec, ModelConfig, OutputHead, TemporalBranch};
use usfnet_core::data::{generate_synthetic, load_dataset, SequenceSet, Split, SynthSpec};
use usfnet_core::model::{BasicLayer, Decoder, Dum, Ssm, Tam, Tgm, UsfNet};
use usfnet_core::nn::{Mode, Module, ParamStore, Session};
use usfnet_core::objectives::{mse_loss, msssim_loss, weighted_ce_loss, SsimParams};
use usfnet_core::oracle::relative_error;
use usfnet_core::{Graph, Result, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
/// Gradient blocks with both norms under this are zero to difference precision.
pub const ZERO_GRAD: f64 = 1e-7;
pub const GRAD_TOL: f64 = 1e-4;
/// Entries checked per tensor; smaller tensors are checked in full.
const ENTRIES_PER_TENSOR: usize = 6;

type Forward = dyn for<'g> Fn(&Session<'g>, &[Var<'g>]) -> Result<Var<'g>>;

/// Worst relative error between analytic and central-difference gradients of
/// `sum(w * f(inputs))` over the inputs and every parameter tensor.
pub fn gradcheck(store: &ParamStore, inputs: &[Tensor], f: &Forward, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = {
        let g = Graph::new();
        let s = Session::new(&g, store, Mode::Train);
        let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        f(&s, &xs)?.value().shape().to_vec()
    };
    let weights = Tensor::randn(&probe, &mut rng);
    let objective = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let s = Session::new(&g, store, Mode::Train).with_param_grads(false);
        let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&s, &xs)?.value();
        // Compensated sum, so round-off in the reduction stays below the step's resolution.
        let (mut sum, mut c) = (0.0f64, 0.0f64);
        for (a, b) in y.data().iter().zip(weights.data()) {
            let t = sum + a * b;
            c += if sum.abs() >= (a * b).abs() { (sum - t) + a * b } else { (a * b - t) + sum };
            sum = t;
        }
        Ok(sum + c)
    };

    let g = Graph::new();
    let s = Session::new(&g, store, Mode::Train);
    let xs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&s, &xs)?.mul(g.constant(weights.clone()))?.sum();
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut compare = |label: &str, analytic: &Tensor, numeric: Vec<f64>, idx: &[usize]| {
        let a: Vec<f64> = idx.iter().map(|&i| analytic.data()[i]).collect();
        let n = a.len();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let vanishing = norm(&a) < ZERO_GRAD && norm(&numeric) < ZERO_GRAD;
        let err = if vanishing { 0.0 } else { relative_error(&Tensor::new(&[n], a).expect("len"), &Tensor::new(&[n], numeric.clone()).expect("len")) };
        if std::env::var_os("GRADCHECK_VERBOSE").is_some() {
            eprintln!("{label}: {err:.3e} analytic {a:?} numeric {numeric:?}", a = idx.iter().map(|&i| analytic.data()[i]).collect::<Vec<_>>());
        }
        worst = worst.max(err);
    };

    for (k, x) in inputs.iter().enumerate() {
        let idx = pick(x.numel(), &mut rng);
        let mut num = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            num.push((objective(store, &plus)? - objective(store, &minus)?) / (2.0 * FD_STEP));
        }
        let analytic = grads.get_or_zeros(xs[k]);
        if analytic.data().iter().all(|&v| v.abs() < ZERO_GRAD) {
            return Err(usfnet_core::Error::Invalid(format!("gradient w.r.t. input {k} vanishes; the check is vacuous")));
        }
        compare(&format!("input{k}"), &analytic, num, &idx);
    }
    for (name, var) in s.bound_params() {
        let t = store.get(&name)?;
        let idx = pick(t.numel(), &mut rng);
        let mut num = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut plus = store.clone();
            plus.get_mut(&name)?.data_mut()[i] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(&name)?.data_mut()[i] -= FD_STEP;
            num.push((objective(&plus, inputs)? - objective(&minus, inputs)?) / (2.0 * FD_STEP));
        }
        compare(&name, &grads.get_or_zeros(var), num, &idx);
    }
    Ok(worst)
}

fn pick(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= ENTRIES_PER_TENSOR {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..ENTRIES_PER_TENSOR).map(|_| rng.gen_range(0..n)).collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

fn init(m: &impl Module, seed: u64) -> ParamStore {
    ParamStore::init(&m.param_specs(), &mut ChaCha8Rng::seed_from_u64(seed)).expect("init")
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        in_frames: 2,
        out_frames: 2,
        base_channels: 4,
        stage_depths: [1, 1, 1],
        agent_tokens: 2,
        tgm_regions: 2,
        tgm_groups: 2,
        msssim_levels: 1,
        ..ModelConfig::default()
    }
}

/// Named gradient checks, one per module or loss.
pub fn gradient_cases() -> Vec<(&'static str, Box<dyn Fn() -> Result<f64>>)> {
    vec![
        (
            "encoder basic layer",
            Box::new(|| {
                let m = BasicLayer::new("block", 4, 2);
                gradcheck(&init(&m, 1), &[randn(&[1, 2, 4, 5, 5], 2)], &move |s, x| m.forward(s, x[0]), 3)
            }),
        ),
        (
            "spatial selection",
            Box::new(|| {
                let m = Ssm::new("ssm", 3, &KernelSpec::new(vec![(3, 1), (3, 2)])?);
                gradcheck(&init(&m, 4), &[randn(&[1, 2, 3, 6, 6], 5)], &move |s, x| m.forward(s, x[0]), 6)
            }),
        ),
        (
            "temporal agent attention",
            Box::new(|| {
                let m = Tam::new("tam", 2, 4, 3, true, TemporalBranch::Agent);
                gradcheck(&init(&m, 7), &[randn(&[2, 2, 4, 2, 3], 8)], &move |s, x| m.forward(s, x[0]), 9)
            }),
        ),
        (
            "temporal guidance",
            Box::new(|| {
                let m = Tgm::new("tgm", 4, 2, 2, 3, true, true);
                let xs = [randn(&[1, 2, 4, 4, 4], 10), randn(&[1, 2, 4, 4, 4], 11)];
                gradcheck(&init(&m, 12), &xs, &move |s, x| m.forward(s, x[0], x[1]), 13)
            }),
        ),
        (
            "dynamic update",
            Box::new(|| {
                let m = Dum::new("dum", 4);
                let xs = [randn(&[1, 2, 4, 3, 3], 14), randn(&[1, 2, 4, 3, 3], 15)];
                gradcheck(&init(&m, 16), &xs, &move |s, x| m.forward(s, x[0], x[1]), 17)
            }),
        ),
        (
            "full decode",
            Box::new(|| {
                let cfg = tiny_model();
                let m = Decoder::new(&cfg);
                let c4 = cfg.bottleneck_channels();
                let xs = [randn(&[1, 2, c4, 1, 1], 18), randn(&[1, 2, c4, 1, 1], 19)];
                gradcheck(&init(&m, 20), &xs, &move |s, x| m.forward(s, x[0], x[1]), 21)
            }),
        ),
        (
            "end-to-end network",
            Box::new(|| {
                let cfg = ModelConfig { base_channels: 8, output_head: OutputHead::Sigmoid, ..tiny_model() };
                let m = UsfNet::new(&cfg);
                let store = m.init_params(22)?;
                gradcheck(&store, &[uniform(&[1, 2, 1, 32, 32], 0.0, 1.0, 23)], &move |s, x| m.forward(s, x[0]), 24)
            }),
        ),
        (
            "mse loss",
            Box::new(|| {
                let y = uniform(&[1, 2, 1, 6, 6], 0.0, 1.0, 25);
                gradcheck(&ParamStore::default(), &[uniform(&[1, 2, 1, 6, 6], 0.0, 1.0, 26)], &move |s, x| {
                    mse_loss(x[0], s.graph().constant(y.clone()))
                }, 27)
            }),
        ),
        (
            "ms-ssim loss",
            Box::new(|| {
                let y = uniform(&[1, 1, 1, 24, 24], 0.0, 1.0, 28);
                let p = SsimParams::flat(2, 1.0);
                gradcheck(&ParamStore::default(), &[uniform(&[1, 1, 1, 24, 24], 0.0, 1.0, 29)], &move |s, x| {
                    msssim_loss(x[0], s.graph().constant(y.clone()), &p)
                }, 30)
            }),
        ),
        (
            "weighted cross-entropy loss",
            Box::new(|| {
                let y = uniform(&[1, 3, 1, 4, 4], 0.0, 1.0, 31);
                gradcheck(&ParamStore::default(), &[uniform(&[1, 3, 1, 4, 4], 0.05, 0.95, 32)], &move |s, x| {
                    weighted_ce_loss(x[0], s.graph().constant(y.clone()), 0.9, 1e-7)
                }, 33)
            }),
        ),
    ]
}

/// Writes `n` synthetic sequences under `root` and loads both splits.
pub fn synthetic_sets(spec: &SynthSpec, n: usize, root: &Path) -> Result<(SequenceSet, SequenceSet)> {
    generate_synthetic(spec, n, root)?;
    let train = SequenceSet::load(&load_dataset(root, Split::Train)?)?;
    let test = match load_dataset(root, Split::Test) {
        Ok(r) if !r.is_empty() => SequenceSet::load(&r)?,
        _ => SequenceSet { ids: Vec::new(), frames: Vec::new(), frame_interval_s: spec.frame_interval_s },
    };
    Ok((train, test))
}
