//! Multi-head window attention with several query streams sharing one
//! key/value stream:
//!
//! `out = Σ_i softmax(Q_i·Kᵀ/√d_h + b_i)·V`, evaluated per window and head.
//!
//! With a single query stream this is ordinary window self-attention.

use std::rc::Rc;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm_strided, Real, Tensor};

/// Index into a `(2S−1)²` relative-position table for every (query, key)
/// token pair of an `S×S` window.
pub fn relative_position_index(s: usize) -> Vec<usize> {
    let n = s * s;
    let span = 2 * s - 1;
    let mut idx = Vec::with_capacity(n * n);
    for q in 0..n {
        let (qy, qx) = (q / s, q % s);
        for k in 0..n {
            let (ky, kx) = (k / s, k % s);
            let dy = qy + s - 1 - ky;
            let dx = qx + s - 1 - kx;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Forward result; `probs` is `[streams, windows, heads, N, N]`.
pub struct AttentionOutput<T> {
    pub out: Tensor<T>,
    pub probs: Vec<T>,
}

struct Dims {
    nw: usize,
    n: usize,
    d: usize,
    dh: usize,
}

fn dims<T: Real>(
    qs: &[&Tensor<T>],
    k: &Tensor<T>,
    v: &Tensor<T>,
    biases: &[&Tensor<T>],
    heads: usize,
    s: usize,
) -> Result<Dims> {
    let ks = k.shape();
    if ks.len() != 3 || ks[1] != s * s {
        return Err(Error::Shape(format!("attention keys {ks:?} for window {s}")));
    }
    if v.shape() != ks {
        return Err(Error::Shape(format!("values {:?} vs keys {ks:?}", v.shape())));
    }
    if qs.is_empty() || qs.len() != biases.len() {
        return Err(Error::Shape(format!(
            "{} query streams but {} bias tables",
            qs.len(),
            biases.len()
        )));
    }
    for q in qs {
        if q.shape() != ks {
            return Err(Error::Shape(format!("query {:?} vs keys {ks:?}", q.shape())));
        }
    }
    let span = 2 * s - 1;
    for b in biases {
        if b.shape() != [heads, span * span] {
            return Err(Error::Shape(format!(
                "bias table {:?}, expected [{heads}, {}]",
                b.shape(),
                span * span
            )));
        }
    }
    let d = ks[2];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("dim {d} not divisible by {heads} heads")));
    }
    Ok(Dims { nw: ks[0], n: ks[1], d, dh: d / heads })
}

pub fn window_attention<T: Real>(
    qs: &[&Tensor<T>],
    k: &Tensor<T>,
    v: &Tensor<T>,
    biases: &[&Tensor<T>],
    heads: usize,
    s: usize,
) -> Result<AttentionOutput<T>> {
    let dm = dims(qs, k, v, biases, heads, s)?;
    let Dims { nw, n, d, dh, .. } = dm;
    let idx = relative_position_index(s);
    let span2 = (2 * s - 1) * (2 * s - 1);
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut out = Tensor::zeros(k.shape());
    let mut probs = vec![T::zero(); qs.len() * nw * heads * n * n];
    for (qi, q) in qs.iter().enumerate() {
        for w in 0..nw {
            for h in 0..heads {
                let base = w * n * d + h * dh;
                let p0 = ((qi * nw + w) * heads + h) * n * n;
                let p = &mut probs[p0..p0 + n * n];
                gemm_strided(
                    n,
                    dh,
                    n,
                    &q.data()[base..],
                    (d, 1),
                    &k.data()[base..],
                    (1, d),
                    T::zero(),
                    p,
                    (n, 1),
                );
                let bias = &biases[qi].data()[h * span2..(h + 1) * span2];
                for r in 0..n {
                    let row = &mut p[r * n..(r + 1) * n];
                    let mut mx = T::neg_infinity();
                    for (c, x) in row.iter_mut().enumerate() {
                        *x = *x * scale + bias[idx[r * n + c]];
                        mx = mx.max(*x);
                    }
                    let mut sum = T::zero();
                    for x in row.iter_mut() {
                        *x = (*x - mx).exp();
                        sum = sum + *x;
                    }
                    for x in row.iter_mut() {
                        *x = *x / sum;
                    }
                }
                let end = w * n * d + n * d;
                gemm_strided(
                    n,
                    n,
                    dh,
                    p,
                    (n, 1),
                    &v.data()[base..],
                    (d, 1),
                    T::one(),
                    &mut out.data_mut()[base..end],
                    (d, 1),
                );
            }
        }
    }
    Ok(AttentionOutput { out, probs })
}

impl<T: Real> Tape<T> {
    /// Records [`window_attention`]. `qs` and `biases` pair up per query
    /// stream; `k`/`v` are `[windows, S², d]`.
    pub fn window_attention(
        &mut self,
        qs: &[Var],
        k: Var,
        v: Var,
        biases: &[Var],
        heads: usize,
        s: usize,
    ) -> Result<Var> {
        let q_vals: Vec<Rc<Tensor<T>>> = qs.iter().map(|&q| self.value_rc(q)).collect();
        let b_vals: Vec<Rc<Tensor<T>>> = biases.iter().map(|&b| self.value_rc(b)).collect();
        let (kv, vv) = (self.value_rc(k), self.value_rc(v));
        let qr: Vec<&Tensor<T>> = q_vals.iter().map(|t| t.as_ref()).collect();
        let br: Vec<&Tensor<T>> = b_vals.iter().map(|t| t.as_ref()).collect();
        let AttentionOutput { out, probs } = window_attention(&qr, &kv, &vv, &br, heads, s)?;
        let Dims { nw, n, d, dh, .. } = dims(&qr, &kv, &vv, &br, heads, s)?;
        let idx = relative_position_index(s);
        let span2 = (2 * s - 1) * (2 * s - 1);
        let scale = T::one() / T::c(dh as f64).sqrt();

        let qs_v = qs.to_vec();
        let bs_v = biases.to_vec();
        let mut inputs = qs.to_vec();
        inputs.extend_from_slice(biases);
        inputs.push(k);
        inputs.push(v);
        Ok(self.push_op(&inputs, out, move |g, sink| {
            let gd = g.data();
            let want_k = sink.wants(k);
            let mut dk = vec![T::zero(); kv.len()];
            let mut dv = vec![T::zero(); vv.len()];
            let mut dqs: Vec<Vec<T>> = qs_v
                .iter()
                .map(|&q| if sink.wants(q) { vec![T::zero(); kv.len()] } else { Vec::new() })
                .collect();
            let mut dbs: Vec<Vec<T>> = bs_v
                .iter()
                .map(|&b| if sink.wants(b) { vec![T::zero(); heads * span2] } else { Vec::new() })
                .collect();
            let mut dp = vec![T::zero(); n * n];
            let mut ds = vec![T::zero(); n * n];
            for w in 0..nw {
                for h in 0..heads {
                    let base = w * n * d + h * dh;
                    let end = w * n * d + n * d;
                    // dP = dO·Vᵀ, identical for every query stream
                    gemm_strided(
                        n,
                        dh,
                        n,
                        &gd[base..],
                        (d, 1),
                        &vv.data()[base..],
                        (1, d),
                        T::zero(),
                        &mut dp,
                        (n, 1),
                    );
                    for qi in 0..qs_v.len() {
                        let p0 = ((qi * nw + w) * heads + h) * n * n;
                        let p = &probs[p0..p0 + n * n];
                        // dV += Pᵀ·dO
                        gemm_strided(
                            n,
                            n,
                            dh,
                            p,
                            (1, n),
                            &gd[base..],
                            (d, 1),
                            T::one(),
                            &mut dv[base..end],
                            (d, 1),
                        );
                        for r in 0..n {
                            let mut dot = T::zero();
                            for c in 0..n {
                                dot = dot + dp[r * n + c] * p[r * n + c];
                            }
                            for c in 0..n {
                                ds[r * n + c] = p[r * n + c] * (dp[r * n + c] - dot);
                            }
                        }
                        if !dbs[qi].is_empty() {
                            let db = &mut dbs[qi][h * span2..(h + 1) * span2];
                            for (t, &val) in ds.iter().enumerate() {
                                db[idx[t]] = db[idx[t]] + val;
                            }
                        }
                        for x in ds.iter_mut() {
                            *x = *x * scale;
                        }
                        if !dqs[qi].is_empty() {
                            gemm_strided(
                                n,
                                n,
                                dh,
                                &ds,
                                (n, 1),
                                &kv.data()[base..],
                                (d, 1),
                                T::one(),
                                &mut dqs[qi][base..end],
                                (d, 1),
                            );
                        }
                        if want_k {
                            gemm_strided(
                                n,
                                n,
                                dh,
                                &ds,
                                (1, n),
                                &q_vals[qi].data()[base..],
                                (d, 1),
                                T::one(),
                                &mut dk[base..end],
                                (d, 1),
                            );
                        }
                    }
                }
            }
            let shape = kv.shape().to_vec();
            for (qi, dq) in dqs.into_iter().enumerate() {
                if !dq.is_empty() {
                    sink.add(qs_v[qi], Tensor::from_vec(&shape, dq).expect("shape"));
                }
            }
            for (bi, db) in dbs.into_iter().enumerate() {
                if !db.is_empty() {
                    sink.add(bs_v[bi], Tensor::from_vec(&[heads, span2], db).expect("shape"));
                }
            }
            if want_k {
                sink.add(k, Tensor::from_vec(&shape, dk).expect("shape"));
            }
            sink.add(v, Tensor::from_vec(&shape, dv).expect("shape"));
        }))
    }
}
