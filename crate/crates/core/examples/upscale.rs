//! Upscales a material whole and in tiles, reporting the largest difference.
//! Without a checkpoint a freshly initialised model is used.
//!
//! cargo run --release --example upscale -- [model.ckpt]

use mujica::adapter::Mujica;
use mujica::material::bicubic_resample_set;
use mujica::model::ModelConfig;
use mujica::synthetic::procedural_material;

fn main() -> mujica::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(p) => mujica::checkpoint::load_model(p.as_ref())?,
        None => Mujica::new(ModelConfig { backbone_depth: 1, ..Default::default() }, 0)?,
    };
    let scale = model.config.scale;
    let lr = bicubic_resample_set(&procedural_material(96 * scale, 2), 1.0 / scale as f64)?;

    let whole = model.upscale(&lr)?;
    let tiled = model.upscale_tiled(&lr, 48, 8)?;
    for kind in whole.kinds() {
        let (a, b) = (whole.get(kind).unwrap(), tiled.get(kind).unwrap());
        let gap = a.pixels.data().iter().zip(b.pixels.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        println!("{kind}: {:?} -> {:?}, tiled max gap {gap:.2e}", lr.get(kind).unwrap().resolution(), a.resolution());
    }
    Ok(())
}
