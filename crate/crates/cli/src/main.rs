mod manifest;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use usfnet_core::data::{load_dataset, read_frame, write_frame, Split, SynthSpec};
use usfnet_core::data::{generate_synthetic, SequenceSet};
use usfnet_core::objectives::MetricTable;
use usfnet_core::probes::{attention_complexity_probe, kernel_count_specs, rf_probe, rf_table_specs};
use usfnet_core::train::{self, TrainOptions, TrainState, BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG};
use usfnet_core::{Config, KernelSpec, Tensor};

use manifest::RunManifest;

const ENV_PREFIX: &str = "USFNET";

#[derive(Parser)]
#[command(name = "usfnet", version, about = "Cloud image sequence extrapolation")]
struct Cli {
    /// TOML run configuration; `USFNET_SECTION__KEY=value` variables override single keys.
    #[arg(long, global = true, env = "USFNET_CONFIG")]
    config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true, env = "USFNET_SEED")]
    seed: Option<u64>,
    /// Output directory (the dataset root for `synth`).
    #[arg(long, global = true, env = "USFNET_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic moving-blob dataset.
    Synth(SynthArgs),
    /// Train a model on the train split of a dataset.
    Train(TrainArgs),
    /// Per-timestep metrics of a model and of the persistence baseline.
    Eval(EvalArgs),
    /// Forecast future frames from a directory of observed PNG frames.
    Predict(PredictArgs),
    /// Time agent attention against dense attention over token counts.
    BenchAttn(BenchArgs),
    /// Compare measured and formula receptive fields of kernel decompositions.
    RfProbe(RfArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    /// Number of sequences.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 6)]
    blobs: usize,
    #[arg(long, default_value_t = 0.5)]
    velocity_min: f64,
    #[arg(long, default_value_t = 2.0)]
    velocity_max: f64,
    #[arg(long, default_value_t = 3.0)]
    scale_min: f64,
    #[arg(long, default_value_t = 12.0)]
    scale_max: f64,
    /// Frames per sequence; defaults to observed plus predicted frames of the config.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Dataset root containing manifest.json.
    #[arg(long)]
    data: PathBuf,
    /// Overrides `train.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Continue from a checkpoint instead of a fresh initialisation.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Trained checkpoint; without it a freshly initialised model is scored.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of observed frames, taken in file-name order.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    /// Token counts to sweep.
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
    tokens: Vec<usize>,
    #[arg(long, default_value_t = 49)]
    agents: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
enum SpecSet {
    /// Five two-stage decompositions with receptive fields 11 to 39.
    Table,
    /// One, two and three stage decompositions.
    KernelCount,
}

#[derive(Args, Serialize)]
struct RfArgs {
    #[arg(long, value_enum, default_value_t = SpecSet::Table)]
    set: SpecSet,
    /// Explicit decompositions such as `5:1,7:3`; replaces `--set`.
    #[arg(long = "spec")]
    specs: Vec<String>,
}

struct Ctx {
    config_path: Option<PathBuf>,
    seed: Option<u64>,
    out: PathBuf,
}

fn usage_error(msg: &str) -> ! {
    Cli::command().error(ErrorKind::MissingRequiredArgument, msg).exit()
}

fn resolve_config(path: Option<&Path>) -> Result<Config> {
    let base = match path {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => Config::default(),
    };
    let vars = std::env::vars().filter(|(k, _)| k.contains("__"));
    Ok(base.with_env_overrides(ENV_PREFIX, vars)?)
}

fn begin(ctx: &Ctx, command: &str, args: &impl Serialize, config: &Config) -> Result<RunManifest> {
    fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    let args = serde_json::to_value(args)?;
    Ok(RunManifest {
        command: command.to_string(),
        config_path: ctx.config_path.clone(),
        seed: ctx.seed,
        input_hash: manifest::input_hash(command, &args, &config.to_toml_string()?, ctx.seed),
        output_dir: ctx.out.clone(),
        started_unix: manifest::now_unix(),
        finished_unix: 0.0,
        artifacts: Vec::new(),
    })
}

fn load_split(root: &Path, split: Split) -> Result<SequenceSet> {
    let recs = load_dataset(root, split)?;
    if recs.is_empty() {
        bail!("{}: no sequences in the {split:?} split", root.display());
    }
    Ok(SequenceSet::load(&recs)?)
}

fn cmd_synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let cfg = resolve_config(ctx.config_path.as_deref())?;
    let seed = ctx.seed.expect("checked by caller");
    let spec = SynthSpec {
        resolution: a.resolution,
        n_blobs: a.blobs,
        scale_range: (a.scale_min, a.scale_max),
        velocity_range: (a.velocity_min, a.velocity_max),
        frames: a.frames.unwrap_or(cfg.model.in_frames + cfg.model.out_frames),
        test_fraction: a.test_fraction,
        seed,
        ..SynthSpec::default()
    };
    spec.validate()?;
    let run = begin(ctx, "synth", a, &cfg)?;
    let m = generate_synthetic(&spec, a.n as usize, &ctx.out)?;
    let count = |s: Split| m.sequences.iter().filter(|e| e.split == s).count();
    println!("dataset  {}", ctx.out.display());
    println!("split    sequences  frames  resolution");
    for (name, s) in [("train", Split::Train), ("test", Split::Test)] {
        println!("{name:<8} {:>9}  {:>6}  {}x{}", count(s), spec.frames, spec.resolution, spec.resolution);
    }
    let mut files = vec![ctx.out.join("manifest.json")];
    for e in &m.sequences {
        files.extend(e.frames.iter().map(|f| ctx.out.join(f)));
    }
    manifest::finish(run, &ctx.out, &files)?;
    Ok(())
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let seed = ctx.seed.expect("checked by caller");
    let mut state = match &a.resume {
        Some(p) => TrainState::load(p).with_context(|| format!("resuming from {}", p.display()))?,
        None => TrainState::new(resolve_config(ctx.config_path.as_deref())?, seed)?,
    };
    if let Some(e) = a.epochs {
        state.config.train.epochs = e;
    }
    let data = load_split(&a.data, Split::Train)?;
    let run = begin(ctx, "train", a, &state.config)?;
    let cfg_path = ctx.out.join("config.toml");
    state.config.save(&cfg_path)?;
    let opts = TrainOptions { out_dir: Some(ctx.out.clone()), max_steps: a.max_steps };
    let epochs = state.config.train.epochs;
    println!("training on {} sequences, {} parameters", data.len(), state.params.param_count());
    train::train_epochs(&mut state, &data, &opts, |r| {
        let val = r.val_mse.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        println!(
            "epoch {:>3}/{epochs}  lr {:.2e}  p {:.2}  loss {:.6} (mse {:.6} msssim {:.6} ce {:.6})  val_mse {val}",
            r.epoch + 1,
            r.lr,
            r.p,
            r.total,
            r.l_m,
            r.l_ms,
            r.l_c
        );
    })?;
    let files: Vec<PathBuf> = [LAST_CHECKPOINT, BEST_CHECKPOINT, TRAIN_LOG]
        .iter()
        .map(|f| ctx.out.join(f))
        .chain(std::iter::once(cfg_path))
        .filter(|p| p.is_file())
        .collect();
    manifest::finish(run, &ctx.out, &files)?;
    println!("{} steps, checkpoints in {}", state.step, ctx.out.display());
    Ok(())
}

fn metric_series(t: &MetricTable) -> [Vec<f64>; 3] {
    [
        t.steps.iter().map(|s| s.mse).collect(),
        t.steps.iter().map(|s| s.ssim).collect(),
        t.steps.iter().map(|s| s.psnr.unwrap_or(f64::INFINITY)).collect(),
    ]
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let state = match &a.checkpoint {
        Some(p) => TrainState::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?,
        None => {
            let Some(seed) = ctx.seed else { usage_error("eval without --checkpoint needs --seed for the initialisation") };
            TrainState::new(resolve_config(ctx.config_path.as_deref())?, seed)?
        }
    };
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let data = load_split(&a.data, split)?;
    let run = begin(ctx, "eval", a, &state.config)?;
    let m = &state.config.model;
    let model = train::evaluate(&state, &data)?;
    let base = train::persistence_baseline(&data, m.in_frames, m.out_frames)?;

    let out = |f: &str| ctx.out.join(f);
    model.write_csv(&out("metrics.csv"), m.in_frames)?;
    base.write_csv(&out("persistence_metrics.csv"), m.in_frames)?;
    fs::write(out("steps.csv"), model.steps_csv(m.in_frames)?)?;
    fs::write(out("persistence_steps.csv"), base.steps_csv(m.in_frames)?)?;
    let (ms, bs) = (metric_series(&model), metric_series(&base));
    let panels: Vec<Vec<plot::Series>> = (0..3)
        .map(|i| vec![plot::Series { values: &bs[i], color: [150, 150, 150] }, plot::Series { values: &ms[i], color: [31, 119, 180] }])
        .collect();
    plot::write_panels(&out("curves.png"), &panels)?;

    #[derive(Serialize)]
    struct Summary {
        sequences: usize,
        model_mse: f64,
        model_ssim: f64,
        model_psnr: Option<f64>,
        persistence_mse: f64,
        persistence_ssim: f64,
        persistence_psnr: Option<f64>,
    }
    let summary = Summary {
        sequences: data.len(),
        model_mse: model.mean_mse,
        model_ssim: model.mean_ssim,
        model_psnr: model.mean_psnr,
        persistence_mse: base.mean_mse,
        persistence_ssim: base.mean_ssim,
        persistence_psnr: base.mean_psnr,
    };
    fs::write(out("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;

    let psnr = |v: Option<f64>| v.map_or_else(|| "inf".to_string(), |p| format!("{p:.3}"));
    println!("{:<12} {:>10} {:>8} {:>8}", "", "mse", "ssim", "psnr");
    println!("{:<12} {:>10.6} {:>8.4} {:>8}", "model", model.mean_mse, model.mean_ssim, psnr(model.mean_psnr));
    println!("{:<12} {:>10.6} {:>8.4} {:>8}", "persistence", base.mean_mse, base.mean_ssim, psnr(base.mean_psnr));
    let files: Vec<PathBuf> =
        ["metrics.csv", "persistence_metrics.csv", "steps.csv", "persistence_steps.csv", "curves.png", "summary.json"]
            .iter()
            .map(|f| out(f))
            .collect();
    manifest::finish(run, &ctx.out, &files)?;
    Ok(())
}

fn cmd_predict(ctx: &Ctx, a: &PredictArgs) -> Result<()> {
    let state = TrainState::load(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.input)
        .with_context(|| format!("reading {}", a.input.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    paths.sort();
    if paths.is_empty() {
        bail!("{}: no PNG frames", a.input.display());
    }
    let frames = paths.iter().map(|p| read_frame(p)).collect::<usfnet_core::Result<Vec<_>>>()?;
    let (h, w) = (frames[0].dim(1), frames[0].dim(2));
    if let Some(p) = paths.iter().zip(&frames).find(|(_, f)| f.shape() != frames[0].shape()).map(|(p, _)| p) {
        bail!("{}: frame size differs from {}", p.display(), paths[0].display());
    }
    let refs: Vec<&Tensor> = frames.iter().collect();
    let x = Tensor::concat(&refs, 0)?.into_reshape(&[frames.len(), 1, h, w])?;
    let run = begin(ctx, "predict", a, &state.config)?;
    let pred = train::predict(&state, &x)?;
    let mut files = Vec::new();
    for t in 0..pred.frames.dim(0) {
        let p = ctx.out.join(format!("pred_{t:03}.png"));
        write_frame(&p, &pred.frames.narrow(0, t, 1)?)?;
        files.push(p);
    }
    println!("wrote {} frames to {} ({:.3} s)", files.len(), ctx.out.display(), pred.elapsed.as_secs_f64());
    manifest::finish(run, &ctx.out, &files)?;
    Ok(())
}

fn cmd_bench(ctx: &Ctx, a: &BenchArgs) -> Result<()> {
    let cfg = resolve_config(ctx.config_path.as_deref())?;
    let run = begin(ctx, "bench-attn", a, &cfg)?;
    let r = attention_complexity_probe(&a.tokens, a.agents, a.dim, a.repeats, ctx.seed.unwrap_or(0))?;
    let path = ctx.out.join("bench_attn.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for row in &r.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    println!("{:>8} {:>12} {:>12} {:>14} {:>14}", "tokens", "agent_s", "dense_s", "agent_bytes", "dense_bytes");
    for row in &r.rows {
        println!(
            "{:>8} {:>12.6} {:>12.6} {:>14} {:>14}",
            row.tokens, row.agent_secs, row.dense_secs, row.agent_matrix_bytes, row.dense_matrix_bytes
        );
    }
    println!("slope  agent {:.3}  dense {:.3}", r.agent_slope, r.dense_slope);
    println!("memory ratio at n/2: {:.3}", r.memory_ratio());
    manifest::finish(run, &ctx.out, &[path])?;
    Ok(())
}

fn cmd_rf(ctx: &Ctx, a: &RfArgs) -> Result<()> {
    let cfg = resolve_config(ctx.config_path.as_deref())?;
    let specs = if a.specs.is_empty() {
        match a.set {
            SpecSet::Table => rf_table_specs(),
            SpecSet::KernelCount => kernel_count_specs(),
        }
    } else {
        a.specs.iter().map(|s| s.parse::<KernelSpec>()).collect::<usfnet_core::Result<_>>()?
    };
    let run = begin(ctx, "rf-probe", a, &cfg)?;
    let rows = rf_probe(&specs, ctx.seed.unwrap_or(0))?;
    let path = ctx.out.join("rf_probe.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    println!("{:<22} {:>7} {:>8} {:>6} {:>9}", "spec", "formula", "measured", "oracle", "max_diff");
    for r in &rows {
        println!("{:<22} {:>7} {:>8} {:>6} {:>9.2e}", r.spec, r.formula, r.measured, r.oracle, r.max_diff);
    }
    manifest::finish(run, &ctx.out, &[path])?;
    if let Some(r) = rows.iter().find(|r| !r.matches()) {
        bail!("measured receptive field {} differs from formula {} for {}", r.measured, r.formula, r.spec);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (needs_seed, default_out) = match &cli.cmd {
        Cmd::Synth(_) => (true, "data"),
        Cmd::Train(_) => (true, "runs/train"),
        Cmd::Eval(_) => (false, "runs/eval"),
        Cmd::Predict(_) => (false, "runs/predict"),
        Cmd::BenchAttn(_) => (false, "runs/bench-attn"),
        Cmd::RfProbe(_) => (false, "runs/rf-probe"),
    };
    if needs_seed && cli.seed.is_none() {
        usage_error("--seed is required for this command");
    }
    let ctx = Ctx { config_path: cli.config, seed: cli.seed, out: cli.out.unwrap_or_else(|| default_out.into()) };
    match &cli.cmd {
        Cmd::Synth(a) => cmd_synth(&ctx, a),
        Cmd::Train(a) => cmd_train(&ctx, a),
        Cmd::Eval(a) => cmd_eval(&ctx, a),
        Cmd::Predict(a) => cmd_predict(&ctx, a),
        Cmd::BenchAttn(a) => cmd_bench(&ctx, a),
        Cmd::RfProbe(a) => cmd_rf(&ctx, a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
