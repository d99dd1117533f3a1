mod common;

use std::fs;

use usfnet_core::config::Config;
use usfnet_core::data::{load_dataset, load_frames, Manifest, Split, SynthSpec};
use usfnet_core::train::{self, TrainOptions, TrainState, BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG};

fn spec() -> SynthSpec {
    SynthSpec { resolution: 32, frames: 4, test_fraction: 0.25, seed: 3, ..SynthSpec::default() }
}

fn tiny_config(epochs: usize) -> Config {
    let mut cfg = Config { model: common::tiny_model(), ..Config::default() };
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 2;
    cfg.train.validation_fraction = 0.25;
    cfg
}

#[test]
fn generated_dataset_loads_by_split() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = common::synthetic_sets(&spec(), 8, dir.path()).unwrap();
    assert_eq!((train.len(), test.len()), (6, 2));
    assert_eq!(test.ids, vec!["seq_00006", "seq_00007"]);
    for f in train.frames.iter().chain(&test.frames) {
        assert_eq!(f.shape(), &[4, 1, 32, 32]);
        assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let recs = load_dataset(dir.path(), Split::Train).unwrap();
    assert!(recs.windows(2).all(|w| w[0].id < w[1].id));
    assert_eq!(recs[0].resolution, (32, 32));
    assert_eq!(load_frames(&recs[0]).unwrap(), train.frames[0]);
}

#[test]
fn broken_datasets_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_dataset(dir.path(), Split::Train).unwrap_err();
    assert!(err.to_string().contains("manifest not found"));

    common::synthetic_sets(&spec(), 3, dir.path()).unwrap();
    let missing = dir.path().join("seq_00001/frame_002.png");
    fs::remove_file(&missing).unwrap();
    let err = load_dataset(dir.path(), Split::Train).unwrap_err().to_string();
    assert!(err.contains("missing frame") && err.contains("frame_002.png"), "{err}");

    let mut m = Manifest::read(dir.path()).unwrap();
    m.sequences[1].frames.truncate(2);
    m.write(dir.path()).unwrap();
    let err = load_dataset(dir.path(), Split::Test).unwrap_err().to_string();
    assert!(err.contains("has 2 frames, expected 4"), "{err}");
}

#[test]
fn training_writes_artifacts_and_checkpoints_reload() {
    let dir = tempfile::tempdir().unwrap();
    let (train_set, test_set) = common::synthetic_sets(&spec(), 8, dir.path().join("data").as_path()).unwrap();
    let out = dir.path().join("run");
    let opts = TrainOptions { out_dir: Some(out.clone()), max_steps: None };
    let state = train::train(&tiny_config(2), &train_set, 2, 5, &opts).unwrap();
    assert_eq!(state.epoch, 2);
    // 6 sequences, 1 held out for validation, batches of 2.
    assert_eq!(state.step, 6);
    assert_eq!(state.history.len(), 2);
    assert!(state.history.iter().all(|r| r.total.is_finite() && r.val_mse.is_some()));

    let log = fs::read_to_string(out.join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], 0);

    let last = TrainState::load(&out.join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(last.step, 6);
    assert_eq!(last.history, state.history);
    let best = TrainState::load(&out.join(BEST_CHECKPOINT)).unwrap();
    let best_val = state.history.iter().filter_map(|r| r.val_mse).fold(f64::INFINITY, f64::min);
    assert_eq!(best.best_metric.map(|v| v as f32), Some(best_val as f32));

    let table = train::evaluate(&best, &test_set).unwrap();
    assert_eq!(table.frames.len(), 2 * 2);
    assert_eq!(table.steps.len(), 2);
    assert!(table.mean_mse.is_finite());
    let loss = train::loss_on(&best, &test_set).unwrap();
    assert!(loss.total.is_finite() && loss.total >= 0.0);
}

#[test]
fn resume_from_disk_continues_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let (train_set, _) = common::synthetic_sets(&spec(), 8, dir.path().join("data").as_path()).unwrap();
    let out = dir.path().join("run");
    let cfg = tiny_config(3);
    let full = train::train(&cfg, &train_set, 3, 9, &TrainOptions::default()).unwrap();

    let opts = TrainOptions { out_dir: Some(out.clone()), max_steps: Some(4) };
    let stopped = train::train(&cfg, &train_set, 3, 9, &opts).unwrap();
    assert_eq!(stopped.step, 4);
    let mut resumed = TrainState::load(&out.join(LAST_CHECKPOINT)).unwrap();
    resumed.dtype = usfnet_core::train::Dtype::F32;
    train::train_epochs(&mut resumed, &train_set, &TrainOptions::default(), |_| {}).unwrap();
    assert_eq!(resumed.step, full.step);
    assert_eq!(resumed.epoch, 3);
    // f32 payloads round the resumed parameters, so only closeness holds here.
    let (a, b): (Vec<_>, Vec<_>) = (full.params.params().collect(), resumed.params.params().collect());
    for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert!(ta.max_abs_diff(tb) < 1e-3, "{na}: {}", ta.max_abs_diff(tb));
    }
}

#[test]
fn mismatched_data_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let (train_set, _) = common::synthetic_sets(&SynthSpec { frames: 5, ..spec() }, 4, dir.path()).unwrap();
    let err = train::train(&tiny_config(1), &train_set, 1, 0, &TrainOptions::default()).unwrap_err().to_string();
    assert!(err.contains("expected (4, 1, 32, 32)"), "{err}");
}

#[test]
fn predict_handles_unbatched_input() {
    let dir = tempfile::tempdir().unwrap();
    let (train_set, _) = common::synthetic_sets(&spec(), 4, dir.path()).unwrap();
    let state = TrainState::new(tiny_config(1), 2).unwrap();
    let x = train_set.frames[0].narrow(0, 0, 2).unwrap();
    let p = train::predict(&state, &x).unwrap();
    assert_eq!(p.frames.shape(), &[2, 1, 32, 32]);
    assert!(p.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let batched = train::predict(&state, &x.reshape(&[1, 2, 1, 32, 32]).unwrap()).unwrap();
    assert_eq!(batched.frames.data(), p.frames.data());
}
