//! Relights a procedural material from a ring of directions and writes one
//! sRGB preview per light.
//!
//! cargo run --example render -- 6 /tmp/mujica-render

use std::path::PathBuf;

use mujica::material::{save_png, BitDepth};
use mujica::render::{fibonacci_hemisphere, linear_to_srgb, render_set, ShadingParams};
use mujica::synthetic::procedural_material;

fn main() -> mujica::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(6);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("mujica-render"));
    std::fs::create_dir_all(&out)?;

    let set = procedural_material(128, 7);
    let lights = fibonacci_hemisphere(n)?;
    for (i, (img, light)) in render_set(&set, &lights, &ShadingParams::default())?.iter().zip(&lights.lights).enumerate() {
        let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / img.data().len() as f64;
        let path = out.join(format!("render_{i:02}.png"));
        save_png(&img.map(linear_to_srgb), &path, BitDepth::Eight, false)?;
        println!("light {:?}: mean radiance {mean:.4} -> {}", light.direction.map(|c| (c * 1e3).round() / 1e3), path.display());
    }
    Ok(())
}
