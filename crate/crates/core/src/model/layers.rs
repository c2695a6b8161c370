//! Parameter-name based layer helpers. Each layer owns the tensors under
//! its prefix: `{prefix}.w` / `{prefix}.b` for affine maps, `{prefix}.g` /
//! `{prefix}.b` for LayerNorm.

use crate::autograd::Var;
use crate::error::Result;
use crate::params::{Graph, Init, ParamSet};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

pub fn init_linear<T: Real>(ps: &mut ParamSet<T>, init: &mut Init, prefix: &str, cin: usize, cout: usize) {
    ps.insert(format!("{prefix}.w"), init.fan_in(&[cin, cout], cin));
    ps.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

pub fn init_conv<T: Real>(
    ps: &mut ParamSet<T>,
    init: &mut Init,
    prefix: &str,
    k: usize,
    cin: usize,
    cout: usize,
) {
    ps.insert(format!("{prefix}.w"), init.fan_in(&[k, k, cin, cout], k * k * cin));
    ps.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

pub fn init_norm<T: Real>(ps: &mut ParamSet<T>, prefix: &str, c: usize) {
    ps.insert(format!("{prefix}.g"), Tensor::full(&[c], T::one()));
    ps.insert(format!("{prefix}.b"), Tensor::zeros(&[c]));
}

pub fn linear<T: Real>(g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.p(&format!("{prefix}.w"))?;
    let b = g.p(&format!("{prefix}.b"))?;
    g.linear(x, w, Some(b))
}

pub fn conv<T: Real>(g: &mut Graph<T>, prefix: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = g.p(&format!("{prefix}.w"))?;
    let b = g.p(&format!("{prefix}.b"))?;
    g.conv2d(x, w, Some(b), stride, pad)
}

pub fn norm<T: Real>(g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.p(&format!("{prefix}.g"))?;
    let beta = g.p(&format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Two-layer MLP with GELU.
pub fn mlp<T: Real>(g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, &format!("{prefix}.fc2"), h)
}

pub fn init_mlp<T: Real>(ps: &mut ParamSet<T>, init: &mut Init, prefix: &str, c: usize, ratio: usize) {
    init_linear(ps, init, &format!("{prefix}.fc1"), c, c * ratio);
    init_linear(ps, init, &format!("{prefix}.fc2"), c * ratio, c);
}

pub fn bias_table_len(window: usize) -> usize {
    (2 * window - 1) * (2 * window - 1)
}

/// Pre-norm window self-attention block:
/// `h = x + Attn(LN(x))`, `y = h + MLP(LN(h))`. Shape-preserving.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub prefix: String,
    pub channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
}

impl TransformerBlock {
    pub fn init<T: Real>(&self, ps: &mut ParamSet<T>, init: &mut Init) {
        let p = &self.prefix;
        let (c, d) = (self.channels, self.dim);
        init_norm(ps, &format!("{p}.norm1"), c);
        for n in ["q", "k", "v"] {
            init_linear(ps, init, &format!("{p}.attn.{n}"), c, d);
        }
        ps.insert(
            format!("{p}.attn.bias"),
            init.small(&[self.heads, bias_table_len(self.window)], 0.02),
        );
        init_linear(ps, init, &format!("{p}.attn.proj"), d, c);
        init_norm(ps, &format!("{p}.norm2"), c);
        init_mlp(ps, init, &format!("{p}.mlp"), c, self.mlp_ratio);
    }

    /// Names of the output projections; zeroing them makes the block the
    /// identity.
    pub fn output_projections(&self) -> Vec<String> {
        let p = &self.prefix;
        vec![
            format!("{p}.attn.proj.w"),
            format!("{p}.attn.proj.b"),
            format!("{p}.mlp.fc2.w"),
            format!("{p}.mlp.fc2.b"),
        ]
    }

    pub fn param_count(&self) -> usize {
        let (c, d) = (self.channels, self.dim);
        let hidden = c * self.mlp_ratio;
        2 * c
            + 3 * (c * d + d)
            + self.heads * bias_table_len(self.window)
            + d * c
            + c
            + 2 * c
            + c * hidden
            + hidden
            + hidden * c
            + c
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let p = &self.prefix;
        let shape = g.shape(x).to_vec();
        let (h, w) = (shape[0], shape[1]);
        let xn = norm(g, &format!("{p}.norm1"), x)?;
        let win = g.window_partition(xn, self.window)?;
        let q = linear(g, &format!("{p}.attn.q"), win)?;
        let k = linear(g, &format!("{p}.attn.k"), win)?;
        let v = linear(g, &format!("{p}.attn.v"), win)?;
        let bias = g.p(&format!("{p}.attn.bias"))?;
        let a = g.window_attention(&[q], k, v, &[bias], self.heads, self.window)?;
        let a = linear(g, &format!("{p}.attn.proj"), a)?;
        let a = g.window_reverse(a, h, w, self.window)?;
        let hres = g.add(x, a)?;
        let hn = norm(g, &format!("{p}.norm2"), hres)?;
        let m = mlp(g, &format!("{p}.mlp"), hn)?;
        g.add(hres, m)
    }
}
