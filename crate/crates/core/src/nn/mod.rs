//! Neural building blocks over [`crate::autodiff`]: linear maps, layer
//! normalization, GELU MLPs, multi-head self-attention, transformer encoder
//! blocks and context-conditioned kernel-encoder blocks.
//!
//! Parameters are registered in a [`ParamStore`] under dotted names derived
//! from a caller-supplied prefix, e.g. `enc.t1.layer0.attn.q.w`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Shape of a stack of attention layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionBlockConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden_dim: usize,
    pub num_layers: usize,
}

impl AttentionBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.mlp_hidden_dim == 0 {
            return Err(Error::Config(format!("degenerate attention block {self:?}")));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

fn check_width(t: Tensor<'_>, width: usize, what: &str) -> Result<()> {
    let (_, c) = t.shape();
    if c != width {
        return Err(Error::Shape(format!("{what} expects width {width}, got {c}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    /// Weights and bias uniform in `±1/sqrt(in_dim)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() };
        let w = store.add(format!("{name}.w"), Matrix::from_vec(in_dim, out_dim, draw(in_dim * out_dim)));
        let b = store.add(format!("{name}.b"), Matrix::from_vec(1, out_dim, draw(out_dim)));
        Self { w, b, in_dim, out_dim }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Tensor<'g>) -> Tensor<'g> {
        x.affine(p.get(self.w), p.get(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0));
        let beta = store.add(format!("{name}.beta"), Matrix::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Tensor<'g>) -> Tensor<'g> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), LAYER_NORM_EPS)
    }
}

/// Fully connected network with GELU between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width, input first and output last.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Tensor<'g>) -> Tensor<'g> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.gelu();
            }
            h = l.forward(p, h);
        }
        h
    }
}

/// Scaled dot-product multi-head self-attention, no positional encoding.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim % heads == 0, "embed_dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn output(&self) -> &Linear {
        &self.o
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, seq: Tensor<'g>) -> Result<Tensor<'g>> {
        check_width(seq, self.dim, "attention")?;
        let g = seq.graph();
        let q = self.q.forward(p, seq);
        let k = self.k.forward(p, seq);
        let v = self.v.forward(p, seq);
        Ok(self.o.forward(p, g.attention(q, k, v, self.heads)))
    }
}

/// Post-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    mlp: Mlp,
    ln2: LayerNorm,
}

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &AttentionBlockConfig, rng: &mut R) -> Self {
        let h = cfg.embed_dim;
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), h, cfg.num_heads, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), h),
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[h, cfg.mlp_hidden_dim, h], rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), h),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, seq: Tensor<'g>) -> Result<Tensor<'g>> {
        let a = self.attn.forward(p, seq)?;
        let h = self.ln1.forward(p, seq.add(a));
        let m = self.mlp.forward(p, h);
        Ok(self.ln2.forward(p, h.add(m)))
    }
}

/// Stack of [`TransformerLayer`]s.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    layers: Vec<TransformerLayer>,
    cfg: AttentionBlockConfig,
}

impl TransformerEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionBlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let layers =
            (0..cfg.num_layers).map(|i| TransformerLayer::new(store, &format!("{name}.layer{i}"), &cfg, rng)).collect();
        Ok(Self { layers, cfg })
    }

    pub fn config(&self) -> &AttentionBlockConfig {
        &self.cfg
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, seq: Tensor<'g>) -> Result<Tensor<'g>> {
        check_width(seq, self.cfg.embed_dim, "transformer encoder")?;
        let mut h = seq;
        for l in &self.layers {
            h = l.forward(p, h)?;
        }
        Ok(h)
    }
}

/// Attention layer whose element-wise MLP also sees a fixed context vector:
/// MHSA, add & norm, concat context per element, MLP, add & norm.
#[derive(Clone, Debug)]
pub struct KernelEncoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    mlp: Mlp,
    ln2: LayerNorm,
    context_dim: usize,
}

impl KernelEncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &AttentionBlockConfig,
        context_dim: usize,
        rng: &mut R,
    ) -> Self {
        let h = cfg.embed_dim;
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), h, cfg.num_heads, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), h),
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[h + context_dim, cfg.mlp_hidden_dim, h], rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), h),
            context_dim,
        }
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attn
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, seq: Tensor<'g>, context: Tensor<'g>) -> Result<Tensor<'g>> {
        if context.shape() != (1, self.context_dim) {
            return Err(Error::Shape(format!(
                "kernel encoder context must be 1x{}, got {:?}",
                self.context_dim,
                context.shape()
            )));
        }
        let g: &Graph = seq.graph();
        let a = self.attn.forward(p, seq)?;
        let h = self.ln1.forward(p, seq.add(a));
        let m = seq.shape().0;
        let joined = g.concat_cols(&[h, context.broadcast_rows(m)]);
        let out = self.mlp.forward(p, joined);
        Ok(self.ln2.forward(p, h.add(out)))
    }
}

#[derive(Clone, Debug)]
pub struct KernelEncoderStack {
    layers: Vec<KernelEncoderLayer>,
    cfg: AttentionBlockConfig,
}

impl KernelEncoderStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionBlockConfig,
        context_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.num_layers)
            .map(|i| KernelEncoderLayer::new(store, &format!("{name}.layer{i}"), &cfg, context_dim, rng))
            .collect();
        Ok(Self { layers, cfg })
    }

    pub fn layers(&self) -> &[KernelEncoderLayer] {
        &self.layers
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, seq: Tensor<'g>, context: Tensor<'g>) -> Result<Tensor<'g>> {
        check_width(seq, self.cfg.embed_dim, "kernel encoder")?;
        let mut h = seq;
        for l in &self.layers {
            h = l.forward(p, h, context)?;
        }
        Ok(h)
    }
}
