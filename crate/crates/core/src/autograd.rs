//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass together with a
//! closure that maps the output gradient onto its inputs. Nodes that do not
//! depend on any gradient-requiring leaf are stored without a closure, so
//! frozen sub-networks cost nothing on the way back.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &mut GradSink<T>)>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Accumulates gradients flowing into the parents of a node.
pub struct GradSink<T> {
    grads: Vec<Option<Tensor<T>>>,
    live: Vec<bool>,
}

impl<T: Real> GradSink<T> {
    /// True when `v` needs a gradient at all; lets kernels skip work.
    pub fn wants(&self, v: Var) -> bool {
        self.live[v.0]
    }

    pub fn add(&mut self, v: Var, g: Tensor<T>) {
        if !self.live[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Rc::new(value), requires_grad, backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value_rc(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation. `backward` is dropped when no input needs a
    /// gradient.
    pub fn push_op(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &mut GradSink<T>) + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let backward: Option<BackwardFn<T>> =
            if requires_grad { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node { value: Rc::new(value), requires_grad, backward });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let seed = Tensor::full(self.shape(loss), T::one());
        self.backward_with(loss, seed)
    }

    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Gradients<T> {
        let n = self.nodes.len();
        let live: Vec<bool> = self.nodes.iter().map(|nd| nd.requires_grad).collect();
        let mut sink = GradSink { grads: (0..n).map(|_| None).collect(), live };
        sink.add(out, seed);
        for i in (0..=out.0).rev() {
            let Some(bw) = &self.nodes[i].backward else { continue };
            let Some(g) = sink.grads[i].take() else { continue };
            bw(&g, &mut sink);
        }
        Gradients { grads: sink.grads }
    }

    // ------------------------------------------------------------------
    // elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push_op(&[a, b], out, move |g, s| {
            s.add(a, g.clone());
            s.add(b, g.clone());
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let vb = self.value(b);
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(vb.data()) {
            *o = *o - y;
        }
        Ok(self.push_op(&[a, b], out, move |g, s| {
            s.add(a, g.clone());
            if s.wants(b) {
                s.add(b, g.map(|v| -v));
            }
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value_rc(a), self.value_rc(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push_op(&[a, b], out, move |g, s| {
            if s.wants(a) {
                let d = g.data().iter().zip(vb.data()).map(|(&g, &y)| g * y).collect();
                s.add(a, Tensor::from_vec(g.shape(), d).expect("shape"));
            }
            if s.wants(b) {
                let d = g.data().iter().zip(va.data()).map(|(&g, &x)| g * x).collect();
                s.add(b, Tensor::from_vec(g.shape(), d).expect("shape"));
            }
        }))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|v| v * k);
        self.push_op(&[a], out, move |g, s| s.add(a, g.map(|v| v * k)))
    }

    /// `alpha * x` where `alpha` is a one-element tensor.
    pub fn scale_by(&mut self, x: Var, alpha: Var) -> Result<Var> {
        if self.value(alpha).len() != 1 {
            return Err(Error::Shape("scale_by expects a scalar".into()));
        }
        let k = self.value(alpha).data()[0];
        let vx = self.value_rc(x);
        let out = vx.map(|v| v * k);
        Ok(self.push_op(&[x, alpha], out, move |g, s| {
            if s.wants(x) {
                s.add(x, g.map(|v| v * k));
            }
            if s.wants(alpha) {
                let d = g.data().iter().zip(vx.data()).fold(T::zero(), |acc, (&g, &v)| acc + g * v);
                s.add(alpha, Tensor::scalar(d));
            }
        }))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let va = self.value_rc(a);
        let out = va.map(|v| if v > T::zero() { v } else { v * slope });
        self.push_op(&[a], out, move |g, s| {
            let d = g
                .data()
                .iter()
                .zip(va.data())
                .map(|(&g, &x)| if x > T::zero() { g } else { g * slope })
                .collect();
            s.add(a, Tensor::from_vec(g.shape(), d).expect("shape"));
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, T::zero())
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value_rc(a);
        let k = T::c((2.0 / std::f64::consts::PI).sqrt());
        let c = T::c(0.044715);
        let half = T::c(0.5);
        let three = T::c(3.0);
        let out = va.map(|x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()));
        self.push_op(&[a], out, move |g, s| {
            let d = g
                .data()
                .iter()
                .zip(va.data())
                .map(|(&g, &x)| {
                    let u = k * (x + c * x * x * x);
                    let t = u.tanh();
                    let du = k * (T::one() + three * c * x * x);
                    g * (half * (T::one() + t) + half * x * (T::one() - t * t) * du)
                })
                .collect();
            s.add(a, Tensor::from_vec(g.shape(), d).expect("shape"));
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(a).to_vec();
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push_op(&[a], out, move |g, s| {
            s.add(a, g.clone().reshaped(&src_shape).expect("reshape back"));
        }))
    }

    // ------------------------------------------------------------------
    // reductions

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(&[a], out, move |g, s| {
            s.add(a, Tensor::full(&shape, g.data()[0]));
        })
    }

    /// Sum of one-element tensors.
    pub fn add_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Ok(self.constant(Tensor::scalar(T::zero())));
        }
        let mut total = T::zero();
        for &x in xs {
            if self.value(x).len() != 1 {
                return Err(Error::Shape("add_scalars expects scalars".into()));
            }
            total = total + self.value(x).data()[0];
        }
        let xs = xs.to_vec();
        Ok(self.push_op(&xs.clone(), Tensor::scalar(total), move |g, s| {
            for &x in &xs {
                s.add(x, g.clone());
            }
        }))
    }

    // ------------------------------------------------------------------
    // dense layers

    /// `x·w + b` applied to every row of `x` (last axis = input features).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value_rc(x), self.value_rc(w));
        let cin = vx.last_dim();
        let ws = vw.shape();
        if ws.len() != 2 || ws[0] != cin {
            return Err(Error::Shape(format!(
                "linear: input has {cin} features, weight is {ws:?}"
            )));
        }
        let cout = ws[1];
        let rows = vx.rows();
        let mut out_shape = vx.shape().to_vec();
        *out_shape.last_mut().expect("rank>0") = cout;
        let mut out = Tensor::zeros(&out_shape);
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.len() != cout {
                return Err(Error::Shape(format!("linear bias {} != {cout}", vb.len())));
            }
            for row in out.data_mut().chunks_mut(cout) {
                row.copy_from_slice(vb.data());
            }
        }
        gemm(rows, cin, cout, vx.data(), false, vw.data(), false, T::one(), out.data_mut());
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(&inputs, out, move |g, s| {
            if s.wants(x) {
                let mut dx = Tensor::zeros(vx.shape());
                gemm(rows, cout, cin, g.data(), false, vw.data(), true, T::zero(), dx.data_mut());
                s.add(x, dx);
            }
            if s.wants(w) {
                let mut dw = Tensor::zeros(vw.shape());
                gemm(cin, rows, cout, vx.data(), true, g.data(), false, T::zero(), dw.data_mut());
                s.add(w, dw);
            }
            if let Some(b) = b {
                if s.wants(b) {
                    let mut db = vec![T::zero(); cout];
                    for row in g.data().chunks(cout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    s.add(b, Tensor::from_vec(&[cout], db).expect("shape"));
                }
            }
        }))
    }

    /// LayerNorm over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value_rc(x);
        let c = vx.last_dim();
        let (vg, vb) = (self.value_rc(gamma), self.value_rc(beta));
        if vg.len() != c || vb.len() != c {
            return Err(Error::Shape(format!("layer_norm affine params must have {c} entries")));
        }
        let rows = vx.rows();
        let eps = T::c(eps);
        let cn = T::c(c as f64);
        let mut xhat = vec![T::zero(); vx.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = Tensor::zeros(vx.shape());
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().fold(T::zero(), |a, &b| a + b) / cn;
            let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[r * c + j] = xh;
                out.data_mut()[r * c + j] = xh * vg.data()[j] + vb.data()[j];
            }
        }
        Ok(self.push_op(&[x, gamma, beta], out, move |g, s| {
            let gd = g.data();
            if s.wants(gamma) || s.wants(beta) {
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        dg[j] = dg[j] + gd[r * c + j] * xhat[r * c + j];
                        db[j] = db[j] + gd[r * c + j];
                    }
                }
                s.add(gamma, Tensor::from_vec(&[c], dg).expect("shape"));
                s.add(beta, Tensor::from_vec(&[c], db).expect("shape"));
            }
            if s.wants(x) {
                let mut dx = vec![T::zero(); gd.len()];
                for r in 0..rows {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..c {
                        let d = gd[r * c + j] * vg.data()[j];
                        mean_d = mean_d + d;
                        mean_dx = mean_dx + d * xhat[r * c + j];
                    }
                    mean_d = mean_d / cn;
                    mean_dx = mean_dx / cn;
                    for j in 0..c {
                        let d = gd[r * c + j] * vg.data()[j];
                        dx[r * c + j] = inv_std[r] * (d - mean_d - xhat[r * c + j] * mean_dx);
                    }
                }
                s.add(x, Tensor::from_vec(g.shape(), dx).expect("shape"));
            }
        }))
    }

    /// Concatenation along the last axis; all inputs share leading dims.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let lead = {
            let s = self.shape(xs[0]);
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape(format!("concat: {:?} vs lead {lead:?}", s)));
            }
            widths.push(*s.last().expect("rank>0"));
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out_shape = lead.clone();
        out_shape.push(total);
        let mut out = Tensor::zeros(&out_shape);
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let src = self.value(x).data();
            for r in 0..rows {
                out.data_mut()[r * total + off..r * total + off + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let xs = xs.to_vec();
        Ok(self.push_op(&xs.clone(), out, move |g, s| {
            let mut off = 0;
            for (&x, &w) in xs.iter().zip(&widths) {
                if s.wants(x) {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    let mut shape = lead.clone();
                    shape.push(w);
                    s.add(x, Tensor::from_vec(&shape, d).expect("shape"));
                }
                off += w;
            }
        }))
    }

    /// Channel slice `[.., start..start+len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("rank>0");
        if start + len > c {
            return Err(Error::Shape(format!("slice {start}+{len} beyond {c}")));
        }
        let rows = self.value(x).rows();
        let src = self.value(x).data();
        let mut d = Vec::with_capacity(rows * len);
        for r in 0..rows {
            d.extend_from_slice(&src[r * c + start..r * c + start + len]);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().expect("rank>0") = len;
        let out = Tensor::from_vec(&out_shape, d)?;
        Ok(self.push_op(&[x], out, move |g, s| {
            let mut dx = Tensor::zeros(&shape);
            for r in 0..rows {
                dx.data_mut()[r * c + start..r * c + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            s.add(x, dx);
        }))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }
}
