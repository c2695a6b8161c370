//! Trains a small model on procedural materials end to end: warm-up of the
//! frozen path, then adapter steps, with a JSON-lines log and checkpoints.
//!
//! cargo run --release --example train -- /tmp/mujica-train

use std::path::PathBuf;

use mujica::model::ModelConfig;
use mujica::synthetic::procedural_material;
use mujica::train::{run_training, Pair, TrainConfig};

fn main() -> mujica::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("mujica-train"));
    let model = ModelConfig { channels: 16, embed_dim: 16, heads: 2, cabs: 2, growth: 8, backbone_depth: 1, ..Default::default() };
    let pairs = (0..4)
        .map(|i| Pair::from_hr(format!("mat_{i}"), procedural_material(64, i), model.scale))
        .collect::<mujica::Result<Vec<_>>>()?;
    let cfg = TrainConfig {
        epochs: 2,
        steps_per_epoch: 20,
        batch: 2,
        patch: 16,
        warmup_steps: 20,
        checkpoint_every: 20,
        lr0: 1e-3,
        ..Default::default()
    };
    let run = run_training(&pairs, model, cfg, &out, None)?;
    if let (Some(w0), Some(w1)) = (run.warmup_losses.first(), run.warmup_losses.last()) {
        println!("warm-up: {w0:.4} -> {w1:.4}");
    }
    for (i, r) in run.reports.iter().enumerate().step_by(5) {
        println!("step {i:3}: total {:.4} (rendering {:.4}, maps {:.4})", r.total, r.rec_pixel + r.rec_perc, r.mat_pixel + r.mat_perc);
    }
    println!("log {}, checkpoint {}", run.log.display(), run.checkpoint.display());
    Ok(())
}
