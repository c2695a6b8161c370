//! Writes a small procedural dataset and derives its low-resolution trees.
//!
//! cargo run --example dataset -- /tmp/mujica-data

use std::path::PathBuf;

use mujica::cli::{prepare, PrepareArgs};
use mujica::material::load_material_set;
use mujica::synthetic::write_dataset;

fn main() -> mujica::Result<()> {
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("mujica-data"));
    let dirs = write_dataset(&root, 4, 128, 0)?;
    prepare(&PrepareArgs { root: root.clone(), scales: vec![2, 4] })?;
    for dir in &dirs {
        let (lr, report) = load_material_set(&dir.join("lr_x4"), &[])?;
        println!("{}: x4 {:?}, maps {:?}, {report:?}", dir.display(), lr.resolution().unwrap(), lr.kinds());
    }
    Ok(())
}
