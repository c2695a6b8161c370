//! Overfits the adapter to a single procedural material and compares the
//! rendered result against bicubic upscaling.
//!
//! cargo run --release --example overfit -- --steps 300 --warmup 5

use std::time::Instant;

use clap::Parser;
use mujica::eval::{evaluate_pair, EvalOptions};
use mujica::model::ModelConfig;
use mujica::render::ShadingParams;
use mujica::synthetic::procedural_material;
use mujica::train::{Pair, TrainConfig, Trainer};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr0: f64,
    #[arg(long, default_value_t = 2e-3)]
    warmup_lr: f64,
    #[arg(long, default_value_t = 3)]
    material_seed: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reuses a warmed-up model from this checkpoint, writing it first if absent.
    #[arg(long)]
    warm_cache: Option<std::path::PathBuf>,
}

fn main() -> mujica::Result<()> {
    let a = Args::parse();
    let model = ModelConfig::default();
    let pair = Pair::from_hr("overfit", procedural_material(64 * model.scale, a.material_seed), model.scale)?;
    let cfg = TrainConfig { batch: 1, patch: 64, lr0: a.lr0, warmup_lr: a.warmup_lr, seed: a.seed, ..Default::default() };
    let mut t = Trainer::from_configs(model, cfg, a.steps)?;
    let pairs = [pair];

    match &a.warm_cache {
        Some(p) if p.exists() => {
            t.model = mujica::checkpoint::load_model(p)?;
            t.warmed_up = true;
        }
        _ => {
            let clock = Instant::now();
            let warm = t.warm_up(&pairs, a.warmup)?;
            if let (Some(f), Some(l)) = (warm.first(), warm.last()) {
                println!("warm-up {} steps: {f:.5} -> {l:.5} ({:.1}s)", warm.len(), clock.elapsed().as_secs_f64());
            }
            if let Some(p) = &a.warm_cache {
                mujica::checkpoint::save_model(p, &t.model)?;
            }
        }
    }
    let opts = EvalOptions::default();
    let sh = ShadingParams::default();
    let (before, _) = evaluate_pair(&t.model, &pairs[0], &t.lights, &sh, &opts)?;
    println!("after warm-up: render psnr {:.3} dB, bicubic {:.3} dB", before.model.render.psnr_mean, before.baseline.as_ref().unwrap().render.psnr_mean);

    let clock = Instant::now();
    let mut first = None;
    let mut last = 0.0;
    for s in 0..a.steps {
        let batch = t.sample_batch(&pairs)?;
        let r = t.train_step(&batch)?;
        first.get_or_insert(r.total);
        last = r.total;
        if s % 25 == 0 || s + 1 == a.steps {
            println!(
                "step {s:4} loss {:.5} (rec {:.5}+{:.5}, mat {:.5}+{:.5}) lr {:.2e}",
                r.total, r.rec_pixel, r.rec_perc, r.mat_pixel, r.mat_perc, t.lr()
            );
        }
    }
    let secs = clock.elapsed().as_secs_f64();
    let first = first.unwrap_or(0.0);
    let (after, _) = evaluate_pair(&t.model, &pairs[0], &t.lights, &sh, &opts)?;
    let base = after.baseline.as_ref().unwrap().render.psnr_mean;
    println!("{} steps in {secs:.1}s ({:.2}s/step)", a.steps, secs / a.steps.max(1) as f64);
    println!("loss {first:.5} -> {last:.5} (ratio {:.3})", last / first);
    println!("render psnr {:.3} dB vs bicubic {base:.3} dB (delta {:+.3})", after.model.render.psnr_mean, after.model.render.psnr_mean - base);
    Ok(())
}
