//! Scores a model against bicubic upscaling on held-out procedural
//! materials and writes the JSON/CSV report with render previews.
//!
//! cargo run --release --example evaluate -- [model.ckpt] [out-dir]

use std::path::PathBuf;

use mujica::adapter::Mujica;
use mujica::eval::{evaluate_model, EvalOptions};
use mujica::model::ModelConfig;
use mujica::render::ShadingParams;
use mujica::synthetic::procedural_material;
use mujica::train::Pair;

fn main() -> mujica::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = match args.next().filter(|a| a != "-") {
        Some(p) => mujica::checkpoint::load_model(p.as_ref())?,
        None => Mujica::new(ModelConfig { backbone_depth: 1, ..Default::default() }, 0)?,
    };
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("mujica-eval"));
    let pairs = (100..103)
        .map(|i| Pair::from_hr(format!("held_{i}"), procedural_material(64, i), model.config.scale))
        .collect::<mujica::Result<Vec<_>>>()?;

    let report = evaluate_model(&model, &pairs, &EvalOptions::default(), &ShadingParams::default(), Some(&out))?;
    for m in &report.materials {
        let base = m.baseline.as_ref().map_or(f64::NAN, |b| b.render.psnr_mean);
        println!(
            "{}: render {:.2} dB (bicubic {base:.2}), spread across lights {:.3} dB",
            m.material, m.model.render.psnr_mean, m.model.render.psnr_std_across_lights
        );
    }
    std::fs::write(out.join("report.json"), report.to_json())?;
    report.write_csv(&out.join("report.csv"))?;
    println!("mean render psnr {:.2} dB, report in {}", report.mean_render_psnr, out.display());
    Ok(())
}
