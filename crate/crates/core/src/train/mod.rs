//! Training loop, evaluation harness and inference.

pub mod checkpoint;
mod optim;

pub use checkpoint::Dtype;
pub use optim::{lr_at, Sgd};

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use usfnet_autograd::{Graph, Tensor};

use crate::config::{validate_config, Config};
use crate::data::{apply_occlusion, augment_pair, occlusion_rate, OcclusionSchedule, SequenceSet};
use crate::error::{Error, Result};
use crate::model::UsfNet;
use crate::nn::{Mode, Module, ParamStore, Session};
use crate::objectives::{metric_suite, total_loss, LossBreakdown, LossParams, MetricTable};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Mean losses of one epoch plus the validation MSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Occlusion rate applied to the inputs.
    pub p: f64,
    pub steps: usize,
    pub l_m: f64,
    pub l_ms: f64,
    pub l_c: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_mse: Option<f64>,
}

/// Parameters, optimizer state and bookkeeping of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: Config,
    pub params: ParamStore,
    pub optimizer: Sgd,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Number of completed optimizer steps.
    pub step: usize,
    pub lr: f64,
    pub occlusion: f64,
    pub seed: u64,
    pub best_metric: Option<f64>,
    pub dtype: Dtype,
    pub history: Vec<EpochRecord>,
    /// Set when a run stopped inside an epoch.
    pub partial: Option<PartialEpoch>,
}

/// Progress through an unfinished epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialEpoch {
    pub batches_done: usize,
    /// Running sums of `l_m`, `l_ms`, `l_c`, total.
    pub sums: [f64; 4],
}

impl TrainState {
    pub fn new(config: Config, seed: u64) -> Result<Self> {
        config.train.validate()?;
        let params = UsfNet::new(&config.model).init_params(seed)?;
        let tc = &config.train;
        Ok(TrainState {
            optimizer: Sgd::new(tc.momentum, tc.weight_decay),
            lr: tc.lr_init,
            params,
            config,
            epoch: 0,
            step: 0,
            occlusion: 0.0,
            seed,
            best_metric: None,
            dtype: Dtype::F32,
            history: Vec::new(),
            partial: None,
        })
    }

    pub fn network(&self) -> UsfNet {
        UsfNet::new(&self.config.model)
    }

    /// Errors unless the stored tensors are exactly those the configured model declares.
    pub fn check_params(&self) -> Result<()> {
        self.params.check_against(&self.network().param_specs())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load(path)
    }
}

/// Where and how long to train.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Receives `last.ckpt`, `best.ckpt` and the JSONL log when set.
    pub out_dir: Option<PathBuf>,
    /// Stops after this many optimizer steps in total.
    pub max_steps: Option<usize>,
}

const OCCLUSION_SALT: u64 = 0x6f63_636c_7573_696f;
const AUGMENT_SALT: u64 = 0x6175_676d_656e_7421;

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn check_resolution(cfg: &Config, data: &SequenceSet) -> Result<(usize, usize)> {
    let first = data.frames.first().ok_or_else(|| Error::Data("dataset is empty".into()))?;
    let (h, w) = (first.dim(2), first.dim(3));
    validate_config(&cfg.model, (h, w)).into_result()?;
    let need = cfg.model.in_frames + cfg.model.out_frames;
    for (id, f) in data.ids.iter().zip(&data.frames) {
        if f.dim(0) != need || f.dim(1) != cfg.model.image_channels || f.dim(2) != h || f.dim(3) != w {
            return Err(Error::Data(format!(
                "sequence `{id}` has shape {:?}, expected ({need}, {}, {h}, {w})",
                f.shape(),
                cfg.model.image_channels
            )));
        }
    }
    Ok((h, w))
}

/// Trains a freshly initialised model; the last `validation_fraction` of
/// `data` is held out for model selection.
pub fn train(cfg: &Config, data: &SequenceSet, epochs: usize, seed: u64, opts: &TrainOptions) -> Result<TrainState> {
    let mut cfg = cfg.clone();
    cfg.train.epochs = epochs;
    let mut state = TrainState::new(cfg, seed)?;
    train_epochs(&mut state, data, opts, |_| {})?;
    Ok(state)
}

/// Runs the remaining epochs of `state` (from `state.epoch` to `config.train.epochs`).
pub fn train_epochs(
    state: &mut TrainState,
    data: &SequenceSet,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<()> {
    let cfg = state.config.clone();
    let tc = &cfg.train;
    tc.validate()?;
    let (h, w) = check_resolution(&cfg, data)?;
    let (train_set, val_set) = data.clone().split_tail(tc.validation_fraction);
    if train_set.is_empty() {
        return Err(Error::Data("no training sequences left after the validation split".into()));
    }
    let net = UsfNet::new(&cfg.model);
    state.check_params()?;
    let loss_params = LossParams::from_config(&cfg.model, h, w);
    let schedule = OcclusionSchedule {
        p_start: tc.occlusion.p_start,
        p_end: tc.occlusion.p_end,
        total_epochs: tc.epochs,
        patch_size: tc.occlusion.patch_size,
    };
    let clip = (tc.clip_norm > 0.0).then_some(tc.clip_norm);
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    while state.epoch < tc.epochs {
        if opts.max_steps.is_some_and(|m| state.step >= m) {
            break;
        }
        let epoch = state.epoch;
        let lr = lr_at(epoch, tc);
        let p = occlusion_rate(&schedule, epoch)?;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut epoch_rng(state.seed, epoch as u64 + 1));
        let PartialEpoch { batches_done, mut sums } =
            state.partial.take().unwrap_or(PartialEpoch { batches_done: 0, sums: [0.0; 4] });
        let mut steps = batches_done;
        for (bi, batch) in order.chunks(tc.batch_size).enumerate().skip(batches_done) {
            if opts.max_steps.is_some_and(|m| state.step >= m) {
                state.partial = Some(PartialEpoch { batches_done: bi, sums });
                if let Some(dir) = &opts.out_dir {
                    state.save(&dir.join(LAST_CHECKPOINT))?;
                }
                return Ok(());
            }
            let (mut x, mut y) = train_set.batch(batch, cfg.model.in_frames, cfg.model.out_frames)?;
            if tc.augment {
                let mut aug_rng = epoch_rng(state.seed ^ AUGMENT_SALT, ((epoch as u64) << 32) | bi as u64);
                (x, y) = augment_pair(&x, &y, &mut aug_rng)?;
            }
            let mut occ_rng = epoch_rng(state.seed ^ OCCLUSION_SALT, ((epoch as u64) << 32) | bi as u64);
            let x = apply_occlusion(&x, p, tc.occlusion.patch_size, &mut occ_rng)?;
            let g = Graph::new();
            let s = Session::new(&g, &state.params, Mode::Train);
            let pred = net.forward(&s, g.constant(x))?;
            let (loss, br) = total_loss(pred, g.constant(y), &loss_params)?;
            if !br.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: state.step,
                    sequences: batch.iter().map(|&i| train_set.ids[i].clone()).collect(),
                });
            }
            let grads = g.backward(loss)?;
            let named: BTreeMap<String, Tensor> =
                s.bound_params().into_iter().map(|(n, v)| (n, grads.get_or_zeros(v))).collect();
            let buffers = s.take_buffer_updates();
            drop(s);
            state.optimizer.step(&mut state.params, &named, lr, clip)?;
            for (name, t) in buffers {
                state.params.insert_buffer(name, t);
            }
            for (acc, v) in sums.iter_mut().zip([br.l_m, br.l_ms, br.l_c, br.total]) {
                *acc += v;
            }
            steps += 1;
            state.step += 1;
        }
        let n = steps.max(1) as f64;
        let val_mse = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_params(&net, &state.params, &val_set, tc.batch_size)?.mean_mse)
        };
        let rec = EpochRecord {
            epoch,
            lr,
            p,
            steps,
            l_m: sums[0] / n,
            l_ms: sums[1] / n,
            l_c: sums[2] / n,
            total: sums[3] / n,
            val_mse,
        };
        state.epoch += 1;
        state.lr = lr;
        state.occlusion = p;
        state.history.push(rec.clone());
        let improved = match (val_mse, state.best_metric) {
            (Some(v), Some(b)) => v < b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            state.best_metric = val_mse;
        }
        if let Some(dir) = &opts.out_dir {
            append_log(&dir.join(TRAIN_LOG), &rec)?;
            state.save(&dir.join(LAST_CHECKPOINT))?;
            if improved {
                state.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        on_epoch(&rec);
    }
    Ok(())
}

fn append_log(path: &Path, rec: &EpochRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(rec).map_err(|e| Error::Invalid(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Runs `net` in evaluation mode over `data` and tabulates per-frame metrics.
pub fn evaluate_params(net: &UsfNet, params: &ParamStore, data: &SequenceSet, batch_size: usize) -> Result<MetricTable> {
    let (t_in, t_out) = (net.config.in_frames, net.config.out_frames);
    run_metrics(data, batch_size, t_in, t_out, |x| {
        let g = Graph::new();
        let s = Session::new(&g, params, Mode::Eval);
        let y = net.forward(&s, g.constant(x))?;
        Ok((*y.value()).clone())
    })
}

fn run_metrics(
    data: &SequenceSet,
    batch_size: usize,
    t_in: usize,
    t_out: usize,
    mut predict: impl FnMut(Tensor) -> Result<Tensor>,
) -> Result<MetricTable> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut frames = Vec::new();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk, t_in, t_out)?;
        let pred = predict(x)?;
        for mut f in metric_suite(&pred, &y, 1.0)?.frames {
            let local: usize = f.sequence.parse().map_err(|_| Error::Invalid("bad sequence index".into()))?;
            f.sequence = data.ids[chunk[local]].clone();
            frames.push(f);
        }
    }
    Ok(crate::objectives::MetricTable::from_frames(frames))
}

/// Metrics of the trained model on `data`; parameters are not modified.
pub fn evaluate(state: &TrainState, data: &SequenceSet) -> Result<MetricTable> {
    check_resolution(&state.config, data)?;
    evaluate_params(&state.network(), &state.params, data, state.config.train.batch_size)
}

/// Repeats the last observed frame for every future step.
pub fn persistence_forecast(x: &Tensor, out_frames: usize) -> Result<Tensor> {
    let t = x.dim(1);
    let last = x.narrow(1, t - 1, 1)?;
    let parts: Vec<&Tensor> = std::iter::repeat_n(&last, out_frames).collect();
    Ok(Tensor::concat(&parts, 1)?)
}

/// Metrics of the persistence forecast on `data`.
pub fn persistence_baseline(data: &SequenceSet, in_frames: usize, out_frames: usize) -> Result<MetricTable> {
    run_metrics(data, 8, in_frames, out_frames, |x| persistence_forecast(&x, out_frames))
}

/// Output of [`predict`].
#[derive(Debug, Clone)]
pub struct Prediction {
    /// `(B, tau, C, H, W)`, or `(tau, C, H, W)` for unbatched input.
    pub frames: Tensor,
    pub elapsed: Duration,
}

/// Forecasts from `(T, C, H, W)` or `(B, T, C, H, W)` observed frames.
pub fn predict(state: &TrainState, input: &Tensor) -> Result<Prediction> {
    let m = &state.config.model;
    let batched = input.rank() == 5;
    let x = match input.rank() {
        4 => input.reshape(&[1, input.dim(0), input.dim(1), input.dim(2), input.dim(3)])?,
        5 => input.clone(),
        _ => return Err(Error::Invalid(format!("expected (T,C,H,W) or (B,T,C,H,W) input, got {:?}", input.shape()))),
    };
    if x.dim(1) != m.in_frames {
        return Err(Error::Invalid(format!("expected {} frames, got {}", m.in_frames, x.dim(1))));
    }
    if x.dim(2) != m.image_channels {
        return Err(Error::Invalid(format!("expected {} channels, got {}", m.image_channels, x.dim(2))));
    }
    validate_config(m, (x.dim(3), x.dim(4))).into_result()?;
    let start = Instant::now();
    let net = state.network();
    let g = Graph::new();
    let s = Session::new(&g, &state.params, Mode::Eval);
    let y = (*net.forward(&s, g.constant(x))?.value()).clone();
    let elapsed = start.elapsed();
    let frames = if batched { y } else { y.into_reshape(&[m.out_frames, m.image_channels, input.dim(2), input.dim(3)])? };
    Ok(Prediction { frames, elapsed })
}

/// Mean loss breakdown of `state` on `data` without occlusion or updates.
pub fn loss_on(state: &TrainState, data: &SequenceSet) -> Result<LossBreakdown> {
    let (h, w) = check_resolution(&state.config, data)?;
    let m = &state.config.model;
    let lp = LossParams::from_config(m, h, w);
    let net = state.network();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut sums = [0.0; 3];
    let mut n = 0.0;
    for chunk in idx.chunks(state.config.train.batch_size.max(1)) {
        let (x, y) = data.batch(chunk, m.in_frames, m.out_frames)?;
        let g = Graph::new();
        let s = Session::new(&g, &state.params, Mode::Eval);
        let pred = net.forward(&s, g.constant(x))?;
        let (_, br) = total_loss(pred, g.constant(y), &lp)?;
        let k = chunk.len() as f64;
        for (acc, v) in sums.iter_mut().zip([br.l_m, br.l_ms, br.l_c]) {
            *acc += v * k;
        }
        n += k;
    }
    Ok(LossBreakdown::new(sums[0] / n, sums[1] / n, sums[2] / n, m.loss_weights))
}
