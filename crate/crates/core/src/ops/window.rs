//! Non-overlapping window partitioning of channels-last feature maps.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Feature map cut into `S×S` windows: `windows` is `[n_windows, S², C]`,
/// windows in row-major grid order and tokens row-major inside a window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowGrid<T> {
    pub windows: Tensor<T>,
    pub origin: (usize, usize),
    pub size: usize,
}

impl<T: Real> WindowGrid<T> {
    pub fn count(&self) -> usize {
        self.windows.shape()[0]
    }
}

fn check(h: usize, w: usize, s: usize) -> Result<()> {
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Shape(format!("window {s} does not tile {h}x{w}")));
    }
    Ok(())
}

/// Maps `(window, token)` to the flat pixel index of a `h×w` image.
fn pixel_of(w: usize, s: usize, win: usize, tok: usize) -> usize {
    let gw = w / s;
    let (wy, wx) = (win / gw, win % gw);
    let (ty, tx) = (tok / s, tok % s);
    (wy * s + ty) * w + wx * s + tx
}

pub fn window_partition<T: Real>(x: &Tensor<T>, s: usize) -> Result<WindowGrid<T>> {
    let sh = x.shape();
    if sh.len() != 3 {
        return Err(Error::Shape(format!("window_partition expects [H,W,C], got {sh:?}")));
    }
    let (h, w, c) = (sh[0], sh[1], sh[2]);
    check(h, w, s)?;
    let nw = (h / s) * (w / s);
    let n = s * s;
    let mut out = Tensor::zeros(&[nw, n, c]);
    for win in 0..nw {
        for tok in 0..n {
            let p = pixel_of(w, s, win, tok);
            let dst = (win * n + tok) * c;
            out.data_mut()[dst..dst + c].copy_from_slice(&x.data()[p * c..(p + 1) * c]);
        }
    }
    Ok(WindowGrid { windows: out, origin: (h, w), size: s })
}

pub fn window_reverse<T: Real>(grid: &WindowGrid<T>) -> Result<Tensor<T>> {
    let (h, w) = grid.origin;
    let s = grid.size;
    check(h, w, s)?;
    let sh = grid.windows.shape();
    let n = s * s;
    let nw = (h / s) * (w / s);
    if sh.len() != 3 || sh[0] != nw || sh[1] != n {
        return Err(Error::Shape(format!("window grid {sh:?} does not match {h}x{w}/{s}")));
    }
    let c = sh[2];
    let mut out = Tensor::zeros(&[h, w, c]);
    for win in 0..nw {
        for tok in 0..n {
            let p = pixel_of(w, s, win, tok);
            let src = (win * n + tok) * c;
            out.data_mut()[p * c..(p + 1) * c]
                .copy_from_slice(&grid.windows.data()[src..src + c]);
        }
    }
    Ok(out)
}

impl<T: Real> Tape<T> {
    pub fn window_partition(&mut self, x: Var, s: usize) -> Result<Var> {
        let grid = window_partition(self.value(x), s)?;
        let (origin, size) = (grid.origin, grid.size);
        Ok(self.push_op(&[x], grid.windows, move |g, sink| {
            let back = WindowGrid { windows: g.clone(), origin, size };
            sink.add(x, window_reverse(&back).expect("reverse"));
        }))
    }

    pub fn window_reverse(&mut self, x: Var, h: usize, w: usize, s: usize) -> Result<Var> {
        let grid = WindowGrid { windows: self.value(x).clone(), origin: (h, w), size: s };
        let out = window_reverse(&grid)?;
        Ok(self.push_op(&[x], out, move |g, sink| {
            sink.add(x, window_partition(g, s).expect("partition").windows);
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_windows() {
        let x = Tensor::<f32>::zeros(&[16, 16, 3]);
        let g = window_partition(&x, 8).unwrap();
        assert_eq!(g.windows.shape(), &[4, 64, 3]);
        let x = Tensor::<f32>::zeros(&[64, 64, 2]);
        assert_eq!(window_partition(&x, 8).unwrap().count(), 64);
    }

    #[test]
    fn first_window_holds_top_left_block() {
        let x = Tensor::from_vec(&[4, 4, 1], (0..16).map(|v| v as f32).collect()).unwrap();
        let g = window_partition(&x, 2).unwrap();
        assert_eq!(&g.windows.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&g.windows.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn rejects_indivisible() {
        let x = Tensor::<f32>::zeros(&[10, 8, 1]);
        assert!(window_partition(&x, 4).is_err());
    }
}
