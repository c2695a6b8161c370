//! Seeded procedural materials: a tile-and-groove height field with
//! multi-octave value noise driving all four maps coherently.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::material::{save_material_set, BitDepth, MapKind, MaterialMap, MaterialSet};
use crate::tensor::Tensor;

/// Lattice value noise with smoothstep interpolation.
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(cells: usize, rng: &mut ChaCha8Rng) -> Self {
        let lattice = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen::<f64>()).collect();
        Self { cells, lattice }
    }

    /// `u, v` in [0, 1].
    fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.cells;
        let (x, y) = (u * n as f64, v * n as f64);
        let (x0, y0) = ((x.floor() as usize).min(n - 1), (y.floor() as usize).min(n - 1));
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (s(x - x0 as f64), s(y - y0 as f64));
        let l = |i: usize, j: usize| self.lattice[j * (n + 1) + i];
        let top = l(x0, y0) * (1.0 - fx) + l(x0 + 1, y0) * fx;
        let bot = l(x0, y0 + 1) * (1.0 - fx) + l(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Sum of octaves with halving amplitude, normalised to [0, 1].
struct Fbm {
    octaves: Vec<ValueNoise>,
}

impl Fbm {
    fn new(base_cells: usize, octaves: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { octaves: (0..octaves).map(|o| ValueNoise::new(base_cells << o, rng)).collect() }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let (mut sum, mut amp, mut norm) = (0.0, 1.0, 0.0);
        for o in &self.octaves {
            sum += amp * o.at(u, v);
            norm += amp;
            amp *= 0.5;
        }
        sum / norm
    }
}

/// Four-map material of `size × size` pixels, deterministic in `seed`.
pub fn procedural_material(size: usize, seed: u64) -> MaterialSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let detail = Fbm::new(4, 5, &mut rng);
    let tint = Fbm::new(3, 3, &mut rng);
    let rough_noise = Fbm::new(6, 4, &mut rng);
    let metal_noise = Fbm::new(3, 2, &mut rng);
    let tiles = rng.gen_range(3..7) as f64;
    let groove = rng.gen_range(0.04..0.09);
    let color_a: [f64; 3] = [rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9)];
    let color_b: [f64; 3] = [rng.gen_range(0.05..0.6), rng.gen_range(0.05..0.6), rng.gen_range(0.05..0.6)];
    let bump = rng.gen_range(2.0..5.0);
    let metal_cut = rng.gen_range(0.55..0.7);

    let n = size;
    let mut height = vec![0.0; n * n];
    let mut mortar = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (u, v) = ((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
            let row = (v * tiles).floor();
            let shift = if row as i64 % 2 == 0 { 0.0 } else { 0.5 };
            let (fu, fv) = ((u * tiles + shift).fract(), (v * tiles).fract());
            let edge = fu.min(1.0 - fu).min(fv.min(1.0 - fv));
            let m = 1.0 - ((edge / groove).clamp(0.0, 1.0));
            mortar[y * n + x] = m;
            height[y * n + x] = 0.6 * detail.at(u, v) - 0.5 * m * m;
        }
    }
    let h_at = |x: isize, y: isize| {
        let cx = x.clamp(0, n as isize - 1) as usize;
        let cy = y.clamp(0, n as isize - 1) as usize;
        height[cy * n + cx]
    };

    let mut base = Vec::with_capacity(n * n * 3);
    let mut normal = Vec::with_capacity(n * n * 3);
    let mut rough = Vec::with_capacity(n * n * 3);
    let mut metal = Vec::with_capacity(n * n * 3);
    let scale = bump * n as f64 / 64.0;
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let (u, v) = ((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
            let (xi, yi) = (x as isize, y as isize);
            let dx = (h_at(xi + 1, yi) - h_at(xi - 1, yi)) * 0.5 * scale;
            let dy = (h_at(xi, yi + 1) - h_at(xi, yi - 1)) * 0.5 * scale;
            let len = (dx * dx + dy * dy + 1.0).sqrt();
            normal.extend([-dx / len, -dy / len, 1.0 / len].map(|c| ((c + 1.0) * 0.5) as f32));

            let t = tint.at(u, v);
            let d = detail.at(u, v);
            let shade = 1.0 - 0.6 * mortar[i];
            for c in 0..3 {
                let col = color_a[c] * t + color_b[c] * (1.0 - t);
                base.push(((col * (0.75 + 0.5 * d) * shade).clamp(0.0, 1.0)) as f32);
            }
            let r = (0.25 + 0.6 * rough_noise.at(u, v) + 0.2 * mortar[i]).clamp(0.05, 1.0) as f32;
            rough.extend([r; 3]);
            let mv = metal_noise.at(u, v);
            let m = (((mv - metal_cut) * 20.0).clamp(0.0, 1.0) * (1.0 - mortar[i])) as f32;
            metal.extend([m; 3]);
        }
    }
    let mk = |kind, data| MaterialMap::new(kind, Tensor::from_vec(&[n, n, 3], data).expect("shape")).expect("map");
    MaterialSet::from_maps([
        mk(MapKind::Basecolor, base),
        mk(MapKind::Normal, normal),
        mk(MapKind::Roughness, rough),
        mk(MapKind::Metallic, metal),
    ])
    .expect("uniform resolution")
}

/// Writes `count` materials as `<root>/mat_{i:03}/<kind>.png` (16-bit).
pub fn write_dataset(root: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    (0..count)
        .map(|i| {
            let dir = root.join(format!("mat_{i:03}"));
            save_material_set(&procedural_material(size, seed.wrapping_add(i as u64)), &dir, BitDepth::Sixteen)?;
            Ok(dir)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::decode_normal;

    #[test]
    fn deterministic_and_valid() {
        let a = procedural_material(32, 4);
        assert_eq!(a, procedural_material(32, 4));
        assert_ne!(a, procedural_material(32, 5));
        assert_eq!(a.len(), 4);
        for m in a.maps() {
            assert!(m.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let (_, bad) = decode_normal(a.get(MapKind::Normal).unwrap()).unwrap();
        assert_eq!(bad, 0);
        let r = a.get(MapKind::Roughness).unwrap();
        assert!(r.pixels.data().chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    }
}
