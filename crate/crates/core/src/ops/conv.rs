//! Channels-last convolution and sub-pixel rearrangement.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }
}

fn im2col<T: Real>(x: &[T], g: ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.ho * g.wo * patch];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * patch..(oy * g.wo + ox + 1) * patch];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.k + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut x = vec![T::zero(); g.h * g.w * g.cin];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * patch..(oy * g.wo + ox + 1) * patch];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * g.k + kx) * g.cin;
                    for c in 0..g.cin {
                        x[dst + c] = x[dst + c] + row[src + c];
                    }
                }
            }
        }
    }
    x
}

impl<T: Real> Tape<T> {
    /// 2D convolution on an `[H, W, Cin]` image with a `[k, k, Cin, Cout]`
    /// kernel, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (vx, vw) = (self.value_rc(x), self.value_rc(w));
        let xs = vx.shape();
        let ws = vw.shape();
        if xs.len() != 3 || ws.len() != 4 || ws[0] != ws[1] || ws[2] != xs[2] {
            return Err(Error::Shape(format!("conv2d: input {xs:?}, kernel {ws:?}")));
        }
        let (h, wd, cin) = (xs[0], xs[1], xs[2]);
        let (k, cout) = (ws[0], ws[3]);
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape(format!("conv2d: {k}x{k} kernel on {h}x{wd}")));
        }
        let g = ConvGeom {
            h,
            w: wd,
            cin,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(vx.data(), g);
        let rows = g.ho * g.wo;
        let mut out = Tensor::zeros(&[g.ho, g.wo, cout]);
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.len() != cout {
                return Err(Error::Shape(format!("conv2d bias {} != {cout}", vb.len())));
            }
            for row in out.data_mut().chunks_mut(cout) {
                row.copy_from_slice(vb.data());
            }
        }
        gemm(rows, g.patch(), cout, &cols, false, vw.data(), false, T::one(), out.data_mut());
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(&inputs, out, move |gr, s| {
            if s.wants(w) {
                let mut dw = Tensor::zeros(vw.shape());
                gemm(g.patch(), rows, cout, &cols, true, gr.data(), false, T::zero(), dw.data_mut());
                s.add(w, dw);
            }
            if let Some(b) = b {
                if s.wants(b) {
                    let mut db = vec![T::zero(); cout];
                    for row in gr.data().chunks(cout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    s.add(b, Tensor::from_vec(&[cout], db).expect("shape"));
                }
            }
            if s.wants(x) {
                let mut dcols = vec![T::zero(); rows * g.patch()];
                gemm(rows, cout, g.patch(), gr.data(), false, vw.data(), true, T::zero(), &mut dcols);
                let dx = col2im(&dcols, g);
                s.add(x, Tensor::from_vec(&[g.h, g.w, g.cin], dx).expect("shape"));
            }
        }))
    }

    /// Sub-pixel rearrangement `[H, W, C·s²] -> [sH, sW, C]`; channel
    /// `c·s² + i·s + j` lands at output offset `(i, j)` of channel `c`.
    pub fn pixel_shuffle(&mut self, x: Var, s: usize) -> Result<Var> {
        let out = pixel_shuffle(self.value(x), s)?;
        Ok(self.push_op(&[x], out, move |g, sink| {
            sink.add(x, pixel_unshuffle(g, s).expect("inverse shuffle"));
        }))
    }
}

pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let sh = x.shape();
    if sh.len() != 3 || s == 0 || sh[2] % (s * s) != 0 {
        return Err(Error::Shape(format!("pixel_shuffle: {sh:?} with factor {s}")));
    }
    let (h, w, cs) = (sh[0], sh[1], sh[2]);
    let c = cs / (s * s);
    let mut out = Tensor::zeros(&[h * s, w * s, c]);
    let (src, dst) = (x.data(), out.data_mut());
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                for i in 0..s {
                    for j in 0..s {
                        let from = (y * w + xx) * cs + ch * s * s + i * s + j;
                        let to = ((y * s + i) * w * s + xx * s + j) * c + ch;
                        dst[to] = src[from];
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let sh = x.shape();
    if sh.len() != 3 || s == 0 || sh[0] % s != 0 || sh[1] % s != 0 {
        return Err(Error::Shape(format!("pixel_unshuffle: {sh:?} with factor {s}")));
    }
    let (hs, ws, c) = (sh[0], sh[1], sh[2]);
    let (h, w) = (hs / s, ws / s);
    let cs = c * s * s;
    let mut out = Tensor::zeros(&[h, w, cs]);
    let (src, dst) = (x.data(), out.data_mut());
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                for i in 0..s {
                    for j in 0..s {
                        let to = (y * w + xx) * cs + ch * s * s + i * s + j;
                        let from = ((y * s + i) * ws + xx * s + j) * c + ch;
                        dst[to] = src[from];
                    }
                }
            }
        }
    }
    Ok(out)
}
