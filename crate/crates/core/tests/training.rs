mod common;

use common::tiny_config;
use mujica::checkpoint;
use mujica::model::{Connection, FusionMode, ModelConfig, SISR_PREFIX};
use mujica::synthetic::procedural_material;
use mujica::train::{run_training, Pair, TrainConfig, Trainer};
use mujica::Error;

fn setup() -> (ModelConfig, TrainConfig, Vec<Pair>) {
    let model = tiny_config(Connection::Dc, FusionMode::Wmca);
    let cfg = TrainConfig {
        epochs: 1,
        steps_per_epoch: 6,
        batch: 2,
        patch: 8,
        lights_n: 2,
        lr0: 5e-4,
        warmup_steps: 2,
        checkpoint_every: 3,
        seed: 5,
        ..Default::default()
    };
    let pairs = (0..2)
        .map(|i| Pair::from_hr(format!("m{i}"), procedural_material(32, 20 + i), model.scale).unwrap())
        .collect();
    (model, cfg, pairs)
}

#[test]
fn smoke_run_logs_every_step() {
    let (model, cfg, pairs) = setup();
    let dir = tempfile::tempdir().unwrap();
    let out = run_training(&pairs, model, cfg, dir.path(), None).unwrap();
    assert_eq!(out.reports.len(), 6);
    assert_eq!(out.warmup_losses.len(), 2);
    assert!(out.reports.iter().all(|r| r.is_finite()));
    let log = std::fs::read_to_string(&out.log).unwrap();
    assert_eq!(log.lines().count(), 8);
    assert!(dir.path().join("step000003.ckpt").exists());
    assert!(out.checkpoint.exists());
}

#[test]
fn same_seed_same_checkpoint() {
    let (model, cfg, pairs) = setup();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_training(&pairs, model.clone(), cfg.clone(), a.path(), None).unwrap();
    let rb = run_training(&pairs, model.clone(), cfg.clone(), b.path(), None).unwrap();
    assert_eq!(std::fs::read(&ra.checkpoint).unwrap(), std::fs::read(&rb.checkpoint).unwrap());

    let c = tempfile::tempdir().unwrap();
    let rc = run_training(&pairs, model, TrainConfig { seed: 6, ..cfg }, c.path(), None).unwrap();
    assert_ne!(std::fs::read(&ra.checkpoint).unwrap(), std::fs::read(&rc.checkpoint).unwrap());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (model, cfg, pairs) = setup();
    let full = tempfile::tempdir().unwrap();
    let whole = run_training(&pairs, model.clone(), cfg.clone(), full.path(), None).unwrap();

    let part = tempfile::tempdir().unwrap();
    run_training(&pairs, model.clone(), cfg.clone(), part.path(), None).unwrap();
    let mid = part.path().join("step000003.ckpt");
    let resumed_dir = tempfile::tempdir().unwrap();
    let resumed = run_training(&pairs, model, cfg, resumed_dir.path(), Some(&mid)).unwrap();
    assert_eq!(resumed.reports.len(), 3);
    assert!(resumed.warmup_losses.is_empty());
    assert_eq!(whole.reports[3..], resumed.reports[..]);

    let a = checkpoint::read(&whole.checkpoint).unwrap();
    let b = checkpoint::read(&resumed.checkpoint).unwrap();
    assert_eq!(a.tensors, b.tensors);
}

#[test]
fn frozen_path_untouched_by_adapter_steps() {
    let (model, cfg, pairs) = setup();
    let mut t = Trainer::from_configs(model, cfg, 6).unwrap();
    t.warm_up(&pairs, 2).unwrap();
    let before = t.model.params.clone();
    for _ in 0..6 {
        let batch = t.sample_batch(&pairs).unwrap();
        t.train_step(&batch).unwrap();
    }
    for (name, v) in before.iter() {
        let after = t.model.params.get(name).unwrap();
        if name.starts_with(SISR_PREFIX) {
            assert!(t.model.params.is_frozen(name), "{name}");
            assert_eq!(v.data(), after.data(), "{name}");
        }
    }
    assert!(before.iter().any(|(n, v)| !n.starts_with(SISR_PREFIX) && v.data() != t.model.params.get(n).unwrap().data()));
}

#[test]
fn non_finite_loss_stops_with_a_checkpoint() {
    let (model, cfg, pairs) = setup();
    let mut t = Trainer::from_configs(model, cfg, 6).unwrap();
    let name = t.model.params.trainable_names().into_iter().find(|n| n.ends_with(".alpha")).unwrap();
    t.model.params.get_mut(&name).unwrap().data_mut()[0] = f32::NAN;
    let batch = t.sample_batch(&pairs).unwrap();
    match t.train_step(&batch) {
        Err(Error::NonFinite { step: 0, .. }) => {}
        other => panic!("expected a non-finite error, got {other:?}"),
    }

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.ckpt");
    t.save(&p).unwrap();
    let (model, cfg, _) = setup();
    let out_dir = tempfile::tempdir().unwrap();
    // resuming from a poisoned state fails on its first step and records it
    let err = run_training(&pairs, model, cfg, out_dir.path(), Some(&p)).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
    assert!(out_dir.path().join("nonfinite_step0.ckpt").exists());
}
