//! Acceptance criteria, one line each. Pass criterion numbers as arguments to
//! run a subset: `cargo test -p usfnet-core --test acceptance -- 7 8`.
//! Missed criteria only fail the process when `ACCEPTANCE_STRICT` is set;
//! errors and panics always do.

mod common;

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usfnet_core::config::{Config, ModelConfig, TemporalBranch};
use usfnet_core::data::{generate_synthetic, SequenceSet, SynthSpec};
use usfnet_core::model::{Tam, Tgm};
use usfnet_core::nn::{Mode, Module, ParamStore, Session};
use usfnet_core::objectives::{ms_ssim, total_loss, weighted_frame_sum, LossParams, MetricTable, SsimParams};
use usfnet_core::probes::{attention_complexity_probe, rf_probe, rf_table_specs};
use usfnet_core::train::{self, checkpoint, TrainOptions, TrainState, BEST_CHECKPOINT};
use usfnet_core::{oracle, Graph, Tensor};

use common::{gradient_cases, synthetic_sets, GRAD_TOL};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = fn(&mut Shared) -> usfnet_core::Result<Outcome>;

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_row_sum_error(m: &Tensor) -> f64 {
    let cols = *m.shape().last().expect("rank >= 1");
    m.data().chunks(cols).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

fn receptive_fields(_: &mut Shared) -> usfnet_core::Result<Outcome> {
    let t0 = Instant::now();
    let rows = rf_probe(&rf_table_specs(), 0)?;
    let elapsed = t0.elapsed();
    let formula: Vec<usize> = rows.iter().map(|r| r.formula).collect();
    let measured: Vec<usize> = rows.iter().map(|r| r.measured).collect();
    let pass = formula == [11, 21, 23, 29, 39] && rows.iter().all(|r| r.matches()) && elapsed < Duration::from_secs(60);
    Ok(outcome(pass, format!("formula {formula:?}, measured {measured:?}, {:.2}s", elapsed.as_secs_f64())))
}

fn attention_oracle(_: &mut Shared) -> usfnet_core::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut worst_row) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let (t, h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let c = rng.gen_range(1..=6);
        let b = rng.gen_range(1..=2);
        let big_n = t * h * w;
        let n = rng.gen_range(1..=big_n);
        let tam = Tam::new("tam", t, c, n, true, TemporalBranch::Agent);
        let store = ParamStore::init(&tam.param_specs(), &mut ChaCha8Rng::seed_from_u64(100 + i))?;
        let g = Graph::new();
        let s = Session::new(&g, &store, Mode::Eval);
        let x = g.constant(Tensor::randn(&[b, t, c, h, w], &mut rng));
        let (q, k, v) = tam.project(&s, x)?;
        let (att, _) = tam.attend(&s, x)?.expect("agent mode attends");
        for bi in 0..b {
            let slice = |y: &Tensor| y.narrow(0, bi, 1).and_then(|z| z.into_reshape(&[big_n, c]));
            let (qb, kb, vb) = (slice(&q.value())?, slice(&k.value())?, slice(&v.value())?);
            let agents = oracle::pool_tokens(&qb, n);
            let expected = oracle::dense_two_stage_attention(&qb, &kb, &vb, &agents, true);
            worst = worst.max(max_abs_diff(&slice(&att.out.value())?, &expected));
        }
        worst_row = worst_row.max(max_row_sum_error(&att.stage1.value()));
        worst_row = worst_row.max(max_row_sum_error(&att.stage2.expect("agent stage").value()));
    }
    Ok(outcome(worst <= 1e-6 && worst_row <= 1e-5, format!("max |diff| {worst:.2e}, max row-sum error {worst_row:.2e}")))
}

fn attention_complexity(_: &mut Shared) -> usfnet_core::Result<Outcome> {
    let t0 = Instant::now();
    let r = attention_complexity_probe(&[256, 512, 1024, 2048, 4096], 49, 32, 3, 3)?;
    let elapsed = t0.elapsed();
    let ratio = r.memory_ratio();
    let expected_ratio = (r.agents / 2) as f64 / r.agents as f64;
    let pass = r.agent_slope < 1.3
        && r.dense_slope > 1.7
        && (ratio - 0.5).abs() <= 0.05
        && (ratio - expected_ratio).abs() < 1e-12
        && elapsed < Duration::from_secs(600);
    Ok(outcome(
        pass,
        format!(
            "slope agent {:.2} dense {:.2}, memory ratio {ratio:.3} at n {} -> {}, {:.1}s",
            r.agent_slope,
            r.dense_slope,
            r.agents,
            r.agents / 2,
            elapsed.as_secs_f64()
        ),
    ))
}

fn tgm_oracle(_: &mut Shared) -> usfnet_core::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let groups = [1, 2, 4][rng.gen_range(0..3)];
        let channels = groups * rng.gen_range(1..=3);
        let kernel = [1, 3, 5][rng.gen_range(0..3)];
        let regions = rng.gen_range(1..=3);
        let tgm = Tgm::new("tgm", channels, groups, regions, kernel, rng.gen(), true);
        let store = ParamStore::init(&tgm.param_specs(), &mut ChaCha8Rng::seed_from_u64(200 + i))?;
        let g = Graph::new();
        let s = Session::new(&g, &store, Mode::Eval);
        let shape = [rng.gen_range(1..=2), rng.gen_range(1..=2), channels, rng.gen_range(3..=6), rng.gen_range(3..=6)];
        let xs = g.constant(Tensor::randn(&shape, &mut rng));
        let xt = g.constant(Tensor::randn(&shape, &mut rng));
        let (_, tr) = tgm.forward_traced(&s, xs, xt, None)?;
        let fused = tr.fused.value();
        let conv = oracle::grouped_dynamic_conv(&fused, &tr.kernels.expect("guided").value());
        let mut expected = (*fused).clone();
        expected.add_assign(&conv);
        worst = worst.max(max_abs_diff(&tr.updated.value(), &expected));
    }

    let tgm = Tgm::new("tgm", 8, 4, 2, 3, true, true);
    let store = ParamStore::init(&tgm.param_specs(), &mut ChaCha8Rng::seed_from_u64(5))?;
    let g = Graph::new();
    let s = Session::new(&g, &store, Mode::Eval);
    let xs = g.constant(Tensor::randn(&[2, 3, 8, 5, 5], &mut rng));
    let xt = g.constant(Tensor::randn(&[2, 3, 8, 5, 5], &mut rng));
    let delta = g.constant(Tensor::from_fn(&[6, 4, 3, 3], |j| if j % 9 == 4 { 1.0 } else { 0.0 }));
    let (_, tr) = tgm.forward_traced(&s, xs, xt, Some(delta))?;
    let doubled = tr.fused.value().scale(2.0);
    let exact = tr.updated.value().data() == doubled.data();
    Ok(outcome(worst <= 1e-6 && exact, format!("max |diff| {worst:.2e}, delta kernels give 2*X_F exactly: {exact}")))
}

fn gradients(_: &mut Shared) -> usfnet_core::Result<Outcome> {
    let t0 = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    let mut failed = Vec::new();
    for (name, case) in gradient_cases() {
        let err = case()?;
        if err >= GRAD_TOL {
            failed.push(format!("{name} {err:.2e}"));
        }
        if err > worst.1 {
            worst = (name.to_string(), err);
        }
    }
    let elapsed = t0.elapsed();
    let pass = failed.is_empty() && elapsed < Duration::from_secs(900);
    let detail = format!("worst {} {:.2e}, failing {:?}, {:.1}s", worst.0, worst.1, failed, elapsed.as_secs_f64());
    Ok(outcome(pass, detail))
}

fn loss_identities(_: &mut Shared) -> usfnet_core::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::from_fn(&[2, 3, 1, 64, 64], |_| rng.gen::<f64>());
    let y = Tensor::from_fn(&[2, 3, 1, 64, 64], |_| rng.gen::<f64>());
    let cfg = ModelConfig::default();
    let lp = LossParams::from_config(&cfg, 64, 64);
    let frame = x.narrow(0, 0, 1)?.narrow(1, 0, 1)?.into_reshape(&[64, 64])?;
    let self_sim = ms_ssim(&frame, &frame, &SsimParams::from_config(&cfg, 64, 64))?;

    let g = Graph::new();
    let (_, same) = total_loss(g.constant(x.clone()), g.constant(x.clone()), &lp)?;
    let zeros = same.l_m == 0.0 && same.l_ms.abs() <= 1e-12 && same.l_c.abs() <= lp.ce_epsilon && same.total.abs() <= lp.ce_epsilon;

    let (total, b) = total_loss(g.constant(x), g.constant(y), &lp)?;
    let combined = 0.7 * b.l_m + 0.2 * b.l_ms + 0.1 * b.l_c;
    let weighted = b.total == combined && total.value().item() == combined;

    let ce = weighted_frame_sum(&[1.0, 1.0], 0.9);
    let pass = (self_sim - 1.0).abs() <= 1e-12 && zeros && weighted && ce == 1.71;
    Ok(outcome(
        pass,
        format!(
            "ms_ssim(x,x) = {self_sim}, identical-pair losses ({:.1e}, {:.1e}, {:.1e}), weighted total exact: {weighted}, ce example {ce}",
            same.l_m, same.l_ms, same.l_c
        ),
    ))
}

fn overfit_config() -> Config {
    let mut cfg = Config::default();
    let t = &mut cfg.train;
    t.epochs = 200;
    t.batch_size = 4;
    t.lr_init = 0.05;
    t.lr_step_epochs = 60;
    t.lr_decay = 0.5;
    t.validation_fraction = 0.0;
    t.occlusion.p_end = 0.0;
    cfg
}

fn overfit(_: &mut Shared) -> usfnet_core::Result<Outcome> {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| usfnet_core::Error::Invalid(e.to_string()))?;
    let spec = SynthSpec { test_fraction: 0.0, seed: 7, ..SynthSpec::default() };
    let (data, _) = synthetic_sets(&spec, 4, dir.path())?;
    let cfg = overfit_config();
    let a = train::train(&cfg, &data, cfg.train.epochs, 11, &TrainOptions::default())?;
    let b = train::train(&cfg, &data, cfg.train.epochs, 11, &TrainOptions::default())?;
    let elapsed = t0.elapsed();
    let first = a.history.first().map_or(f64::NAN, |r| r.total);
    let last = a.history.last().map_or(f64::NAN, |r| r.total);
    let deterministic = a.params.fingerprint() == b.params.fingerprint() && a.history == b.history;
    let ratio = last / first;
    let pass = a.step == 200 && ratio <= 0.10 && deterministic && elapsed < Duration::from_secs(1800);
    Ok(outcome(
        pass,
        format!(
            "{} steps, total loss {first:.4} -> {last:.4} ({:.1}%), deterministic: {deterministic}, {:.0}s for two runs",
            a.step,
            100.0 * ratio,
            elapsed.as_secs_f64()
        ),
    ))
}

/// Training protocol shared by the baseline and ablation criteria.
fn protocol_config() -> Config {
    let mut cfg = Config::default();
    let t = &mut cfg.train;
    t.epochs = 30;
    t.batch_size = 4;
    t.lr_init = 0.05;
    t.lr_step_epochs = 10;
    t.lr_decay = 0.5;
    t.augment = true;
    t.occlusion.p_end = 0.0;
    cfg
}

struct ProtocolData {
    _dir: tempfile::TempDir,
    train: SequenceSet,
    test: SequenceSet,
}

struct ProtocolRun {
    table: MetricTable,
    elapsed: Duration,
}

#[derive(Default)]
struct Shared {
    data: OnceCell<ProtocolData>,
    runs: BTreeMap<&'static str, ProtocolRun>,
}

impl Shared {
    fn data(&mut self) -> usfnet_core::Result<&ProtocolData> {
        if self.data.get().is_none() {
            let dir = tempfile::tempdir().map_err(|e| usfnet_core::Error::Invalid(e.to_string()))?;
            let spec = SynthSpec { test_fraction: 0.25, seed: 21, ..SynthSpec::default() };
            let (train, test) = synthetic_sets(&spec, 64, dir.path())?;
            let _ = self.data.set(ProtocolData { _dir: dir, train, test });
        }
        Ok(self.data.get().expect("initialised"))
    }

    /// Trains `variant` under the shared protocol and evaluates the best-validation checkpoint on the test split.
    fn run(&mut self, variant: &'static str) -> usfnet_core::Result<&ProtocolRun> {
        if !self.runs.contains_key(variant) {
            let mut cfg = protocol_config();
            match variant {
                "full" => {}
                "no_tgm" => cfg.model.ablation.tgm = false,
                "no_dum" => cfg.model.ablation.dum = false,
                other => return Err(usfnet_core::Error::Invalid(format!("unknown variant {other}"))),
            }
            let t0 = Instant::now();
            let out = tempfile::tempdir().map_err(|e| usfnet_core::Error::Invalid(e.to_string()))?;
            let data = self.data()?;
            let opts = TrainOptions { out_dir: Some(out.path().to_path_buf()), max_steps: None };
            train::train(&cfg, &data.train, cfg.train.epochs, 31, &opts)?;
            let best = TrainState::load(&out.path().join(BEST_CHECKPOINT))?;
            let table = train::evaluate(&best, &data.test)?;
            let run = ProtocolRun { table, elapsed: t0.elapsed() };
            self.runs.insert(variant, run);
        }
        Ok(&self.runs[variant])
    }
}

fn baseline_beat(shared: &mut Shared) -> usfnet_core::Result<Outcome> {
    let m = protocol_config().model;
    let baseline = {
        let data = shared.data()?;
        train::persistence_baseline(&data.test, m.in_frames, m.out_frames)?
    };
    let run = shared.run("full")?;
    let steps: Vec<f64> = run.table.steps.iter().map(|s| s.step as f64).collect();
    let curve: Vec<f64> = run.table.steps.iter().map(|s| s.mse).collect();
    let slope = linear_slope(&steps, &curve);
    let pass = run.table.mean_mse < baseline.mean_mse && slope >= 0.0 && run.elapsed < Duration::from_secs(7200);
    Ok(outcome(
        pass,
        format!(
            "model MSE {:.5} vs persistence {:.5}, per-step MSE trend {slope:+.2e}/step, {:.0}s",
            run.table.mean_mse,
            baseline.mean_mse,
            run.elapsed.as_secs_f64()
        ),
    ))
}

fn linear_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

fn ablation_direction(shared: &mut Shared) -> usfnet_core::Result<Outcome> {
    let full = shared.run("full")?.table.mean_mse;
    let no_tgm = shared.run("no_tgm")?.table.mean_mse;
    let no_dum = shared.run("no_dum")?.table.mean_mse;
    let pass = no_tgm >= full && no_dum >= full;
    Ok(outcome(pass, format!("MSE full {full:.5}, without TGM {no_tgm:.5}, without DUM {no_dum:.5}")))
}

fn files_under(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).expect("readable dir").flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).expect("under root").to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).expect("readable file"));
            }
        }
    }
    out
}

fn round_trip(_: &mut Shared) -> usfnet_core::Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| usfnet_core::Error::Invalid(e.to_string()))?;
    let spec = SynthSpec { resolution: 32, frames: 4, test_fraction: 0.0, seed: 3, ..SynthSpec::default() };
    let (data, _) = synthetic_sets(&spec, 4, &dir.path().join("data"))?;
    let mut cfg = Config::default();
    cfg.model = ModelConfig { base_channels: 4, ..common::tiny_model() };
    cfg.train.validation_fraction = 0.0;
    let state = train::train(&cfg, &data, 1, 5, &TrainOptions::default())?;

    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    state.save(&p1)?;
    TrainState::load(&p1)?.save(&p2)?;
    let bytes = fs::read(&p1).map_err(|e| usfnet_core::Error::Invalid(e.to_string()))?;
    let ckpt_same = bytes == fs::read(&p2).map_err(|e| usfnet_core::Error::Invalid(e.to_string()))?
        && checkpoint::encode(&checkpoint::decode(&bytes)?)? == bytes;

    let before = state.params.fingerprint();
    train::evaluate(&state, &data)?;
    let eval_pure = state.params.fingerprint() == before;

    let full = SynthSpec { seed: 9, ..SynthSpec::default() };
    generate_synthetic(&full, 6, &dir.path().join("s1"))?;
    generate_synthetic(&full, 6, &dir.path().join("s2"))?;
    let (f1, f2) = (files_under(&dir.path().join("s1")), files_under(&dir.path().join("s2")));
    let synth_same = !f1.is_empty() && f1 == f2;
    Ok(outcome(
        ckpt_same && eval_pure && synth_same,
        format!(
            "checkpoint save/load/save identical: {ckpt_same} ({} bytes), evaluate keeps params: {eval_pure}, synth identical: {synth_same} ({} files)",
            bytes.len(),
            f1.len()
        ),
    ))
}

fn main() -> ExitCode {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, Check); 10] = [
        ("receptive-field fidelity", receptive_fields),
        ("attention oracle equivalence", attention_oracle),
        ("attention complexity", attention_complexity),
        ("dynamic-kernel oracle equivalence", tgm_oracle),
        ("gradient suite", gradients),
        ("loss identities", loss_identities),
        ("overfit capacity", overfit),
        ("persistence baseline beaten", baseline_beat),
        ("ablation direction", ablation_direction),
        ("round-trip and determinism", round_trip),
    ];
    let mut shared = Shared::default();
    let (mut run, mut failures, mut broken) = (0, 0, 0);
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        run += 1;
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut shared)));
        let (pass, detail) = match result {
            Ok(Ok(o)) => (o.pass, o.detail),
            Ok(Err(e)) => {
                broken += 1;
                (false, format!("error: {e}"))
            }
            Err(_) => {
                broken += 1;
                (false, "panicked".to_string())
            }
        };
        if !pass {
            failures += 1;
        }
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>2} {name}: {detail} [{:.1}s]", t0.elapsed().as_secs_f64());
    }
    println!("{} of {run} acceptance criteria passed", run - failures);
    // A criterion that is measured and missed is reported; one that cannot be measured is a harness bug.
    let strict = std::env::var_os("ACCEPTANCE_STRICT").is_some();
    if broken > 0 || (strict && failures > 0) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
