//! Gated attention pooling over a bag of tile features followed by a
//! linear classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::nn::Linear;
use crate::diffmath::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbmilConfig {
    pub in_dim: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone)]
pub struct GatedAbmil {
    pub cfg: AbmilConfig,
    pub embed: Linear,
    pub attn_v: Linear,
    pub attn_u: Linear,
    pub attn_w: Linear,
    pub head: Linear,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AbmilOutput {
    /// `[1, out_dim]`
    pub logits: Var,
    /// `[1, n]`, sums to one.
    pub attention: Var,
    /// `[1, hidden]` attention-pooled bag vector.
    pub pooled: Var,
}

impl GatedAbmil {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: AbmilConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.in_dim == 0 || cfg.hidden == 0 || cfg.attn_dim == 0 || cfg.out_dim == 0 {
            return Err(Error::Config("abmil dims must be positive".into()));
        }
        Ok(GatedAbmil {
            cfg,
            embed: Linear::new(store, &format!("{name}.embed"), cfg.in_dim, cfg.hidden, true, rng),
            attn_v: Linear::new(store, &format!("{name}.attn_v"), cfg.hidden, cfg.attn_dim, true, rng),
            attn_u: Linear::new(store, &format!("{name}.attn_u"), cfg.hidden, cfg.attn_dim, true, rng),
            attn_w: Linear::new(store, &format!("{name}.attn_w"), cfg.attn_dim, 1, true, rng),
            head: Linear::new(store, &format!("{name}.head"), cfg.hidden, cfg.out_dim, true, rng),
        })
    }

    /// `x: [n, in_dim]` for one bag.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<AbmilOutput> {
        if g.value(x).rank() != 2 || g.value(x).rows() == 0 {
            return Err(Error::EmptyBag);
        }
        let h = self.embed.forward(g, store, x)?;
        let h = g.gelu(h)?;
        let v = self.attn_v.forward(g, store, h)?;
        let v = g.tanh(v)?;
        let u = self.attn_u.forward(g, store, h)?;
        let u = g.sigmoid(u)?;
        let gate = g.mul(v, u)?;
        let s = self.attn_w.forward(g, store, gate)?;
        let s = g.transpose(s)?;
        let attention = g.softmax(s)?;
        let pooled = g.matmul(attention, h)?;
        let logits = self.head.forward(g, store, pooled)?;
        Ok(AbmilOutput { logits, attention, pooled })
    }

    pub fn linears(&self) -> [&Linear; 5] {
        [&self.embed, &self.attn_v, &self.attn_u, &self.attn_w, &self.head]
    }

    /// Linear layers in front of the classifier.
    pub fn backbone_linears_mut(&mut self) -> Vec<&mut Linear> {
        vec![&mut self.embed, &mut self.attn_v, &mut self.attn_u, &mut self.attn_w]
    }
}

/// Class probabilities and attention weights for one bag.
pub fn abmil_forward(model: &GatedAbmil, store: &ParamStore<f32>, features: &Tensor<f32>) -> Result<(Vec<f32>, Vec<f32>)> {
    if features.rank() != 2 || features.rows() == 0 {
        return Err(Error::EmptyBag);
    }
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let out = model.forward(&mut g, store, x)?;
    let probs = g.softmax(out.logits)?;
    Ok((g.value(probs).data().to_vec(), g.value(out.attention).data().to_vec()))
}
