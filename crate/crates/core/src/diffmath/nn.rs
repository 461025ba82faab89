//! Layers assembled from graph primitives. Each layer owns parameter ids
//! into a shared [`ParamStore`].

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{glorot, ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::ssl::rope::RopeTable;

/// Low-rank update `scale · x A B` attached to a [`Linear`].
#[derive(Debug, Clone, Copy)]
pub struct LoraParams {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraParams {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub lora: Option<LoraParams>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot(in_dim, out_dim, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[out_dim])));
        Linear { name: name.to_string(), w, b, in_dim, out_dim, lora: None }
    }

    /// Same as [`Linear::new`] with Gaussian weights of the given std.
    pub fn new_normal<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::randn(&[in_dim, out_dim], std, rng));
        let b = Some(store.add(format!("{name}.b"), Tensor::zeros(&[out_dim])));
        Linear { name: name.to_string(), w, b, in_dim, out_dim, lora: None }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.in_dim {
            return Err(Error::shape(
                "linear",
                format!("{}: input {:?}, expected {} features", self.name, g.shape(x), self.in_dim),
            ));
        }
        let w = g.param(store, self.w);
        let mut y = g.matmul(x, w)?;
        if let Some(b) = self.b {
            let b = g.param(store, b);
            y = g.add_broadcast(y, b)?;
        }
        if let Some(l) = self.lora {
            let a = g.param(store, l.a);
            let bm = g.param(store, l.b);
            let xa = g.matmul(x, a)?;
            let xab = g.matmul(xa, bm)?;
            let delta = g.scale(xab, T::from_f64_lossy(l.scale()))?;
            y = g.add(y, delta)?;
        }
        Ok(y)
    }

    /// Extra trainable values a LoRA adapter of `rank` adds to this layer.
    pub fn lora_param_count(&self, rank: usize) -> usize {
        rank * (self.in_dim + self.out_dim)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layernorm(x, gamma, beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl TransformerConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(format!(
                "transformer width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Multi-head self-attention over fixed-length sequences stacked by rows.
#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub width: usize,
}

impl Attention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Attention {
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), width, width, true, rng),
            heads,
            width,
        }
    }

    /// `x: [batch·seq, width]`; attention is restricted to each block of
    /// `seq` rows. `rope`, when given, rotates queries and keys of every
    /// sequence with the same per-position table.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        seq: usize,
        rope: Option<&Arc<RopeTable<T>>>,
    ) -> Result<Var> {
        let rows = g.value(x).rows();
        if seq == 0 || rows % seq != 0 {
            return Err(Error::shape("attention", format!("{rows} rows not a multiple of seq {seq}")));
        }
        let batch = rows / seq;
        let hd = self.width / self.heads;
        let scale = T::from_f64_lossy(1.0 / (hd as f64).sqrt());
        let qkv = self.qkv.forward(g, store, x)?;
        let mut per_head = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice_cols(qkv, h * hd, hd)?;
            let k = g.slice_cols(qkv, self.width + h * hd, hd)?;
            let v = g.slice_cols(qkv, 2 * self.width + h * hd, hd)?;
            let mut outs = Vec::with_capacity(batch);
            for b in 0..batch {
                let (mut qb, mut kb) = if batch == 1 {
                    (q, k)
                } else {
                    (g.slice_rows(q, b * seq, seq)?, g.slice_rows(k, b * seq, seq)?)
                };
                let vb = if batch == 1 { v } else { g.slice_rows(v, b * seq, seq)? };
                if let Some(t) = rope {
                    qb = t.apply_graph(g, qb)?;
                    kb = t.apply_graph(g, kb)?;
                }
                let kt = g.transpose(kb)?;
                let s = g.matmul(qb, kt)?;
                let s = g.scale(s, scale)?;
                let a = g.softmax(s)?;
                outs.push(g.matmul(a, vb)?);
            }
            per_head.push(if batch == 1 { outs[0] } else { g.concat_rows(&outs)? });
        }
        let merged = if self.heads == 1 { per_head[0] } else { g.concat_cols(&per_head)? };
        self.proj.forward(g, store, merged)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        let hidden = cfg.width * cfg.mlp_ratio;
        TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.width),
            attn: Attention::new(store, &format!("{name}.attn"), cfg.width, cfg.heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.width),
            fc1: Linear::new(store, &format!("{name}.fc1"), cfg.width, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, cfg.width, true, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        seq: usize,
        rope: Option<&Arc<RopeTable<T>>>,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let h = self.attn.forward(g, store, h, seq, rope)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, store, h)?;
        g.add(x, h)
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.attn.qkv, &mut self.attn.proj, &mut self.fc1, &mut self.fc2]
    }

    pub fn linears(&self) -> [&Linear; 4] {
        [&self.attn.qkv, &self.attn.proj, &self.fc1, &self.fc2]
    }
}

/// Convolution with `[k, k, cin, cout]` weights over `[H, W, C]` maps.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel * kernel * cin;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn(&[kernel, kernel, cin, cout], std, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv2d { w, b, kernel, stride, pad, cin, cout }
    }

    /// Identity-initialised `k×k` same-size convolution (`cin == cout`).
    pub fn identity<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, kernel: usize) -> Self {
        let mut w = Tensor::zeros(&[kernel, kernel, channels, channels]);
        let center = kernel / 2;
        for c in 0..channels {
            let idx = ((center * kernel + center) * channels + c) * channels + c;
            w.data_mut()[idx] = T::one();
        }
        let w = store.add(format!("{name}.w"), w);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[channels]));
        Conv2d { w, b, kernel, stride: 1, pad: kernel / 2, cin: channels, cout: channels }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}
