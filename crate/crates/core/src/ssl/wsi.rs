//! Slide transformer over tile features with 2-D rotary positions, a
//! learned mask embedding and a leading class token.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rope::{RopeTable, DEFAULT_ROPE_BASE};
use crate::diffmath::nn::{LayerNorm, Linear, TransformerBlock, TransformerConfig};
use crate::diffmath::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WsiConfig {
    pub in_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Output classes of the token classifier.
    pub classes: usize,
    pub rope_base: f64,
}

impl Default for WsiConfig {
    /// Six blocks of width 512 with eight heads.
    fn default() -> Self {
        WsiConfig { in_dim: 16, width: 512, depth: 6, heads: 8, mlp_ratio: 4, classes: 512, rope_base: DEFAULT_ROPE_BASE }
    }
}

impl WsiConfig {
    pub fn block(&self) -> TransformerConfig {
        TransformerConfig { width: self.width, depth: self.depth, heads: self.heads, mlp_ratio: self.mlp_ratio }
    }

    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        if self.in_dim == 0 || self.classes == 0 || self.depth == 0 {
            return Err(Error::Config("wsi transformer dims must be positive".into()));
        }
        let hd = self.width / self.heads;
        if hd % 4 != 0 {
            return Err(Error::Config(format!("head dim {hd} must be divisible by 4 for 2-D rotary embedding")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct WsiTransformer {
    pub cfg: WsiConfig,
    pub input: Linear,
    pub cls: ParamId,
    pub mask_embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

impl WsiTransformer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: WsiConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let input = Linear::new(store, &format!("{name}.input"), cfg.in_dim, cfg.width, true, rng);
        let cls = store.add(format!("{name}.cls"), Tensor::randn(&[1, cfg.width], 0.02, rng));
        let mask_embed = store.add(format!("{name}.mask_embed"), Tensor::randn(&[cfg.width], 0.02, rng));
        let block_cfg = cfg.block();
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, &format!("{name}.block{i}"), &block_cfg, rng))
            .collect();
        let ln_f = LayerNorm::new(store, &format!("{name}.ln_f"), cfg.width);
        let head = Linear::new_normal(store, &format!("{name}.head"), cfg.width, cfg.classes, 0.02, rng);
        Ok(WsiTransformer { cfg, input, cls, mask_embed, blocks, ln_f, head })
    }

    /// Rotary table for a class token followed by `coords`.
    pub fn rope_table<T: Scalar>(&self, coords: &[(f64, f64)]) -> Result<Arc<RopeTable<T>>> {
        let mut c = Vec::with_capacity(coords.len() + 1);
        c.push(None);
        c.extend(coords.iter().map(|&p| Some(p)));
        Ok(Arc::new(RopeTable::new(self.cfg.width / self.cfg.heads, &c, self.cfg.rope_base)?))
    }

    /// Hidden states `[batch·(n+1), width]` for `batch` bags stacked in
    /// `x: [batch·n, in_dim]`, all sharing `coords`. Row 0 of each block
    /// is the class token. Rows flagged in `mask` have their input
    /// replaced by the mask embedding.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        coords: &[(f64, f64)],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let n = coords.len();
        let rows = g.value(x).rows();
        if n == 0 || rows == 0 {
            return Err(Error::EmptyBag);
        }
        if rows % n != 0 {
            return Err(Error::shape("wsi_transformer", format!("{rows} rows for bags of {n} tiles")));
        }
        let batch = rows / n;
        let mut h = self.input.forward(g, store, x)?;
        if let Some(m) = mask {
            if m.len() != rows {
                return Err(Error::shape("wsi_transformer", format!("mask of {} for {rows} rows", m.len())));
            }
            if m.iter().any(|&b| b) {
                let e = g.param(store, self.mask_embed);
                h = g.mask_rows(h, e, m)?;
            }
        }
        let cls = g.param(store, self.cls);
        let mut parts = Vec::with_capacity(2 * batch);
        for b in 0..batch {
            parts.push(cls);
            parts.push(if batch == 1 { h } else { g.slice_rows(h, b * n, n)? });
        }
        let mut h = g.concat_rows(&parts)?;
        let table = self.rope_table(coords)?;
        for block in &self.blocks {
            h = block.forward(g, store, h, n + 1, Some(&table))?;
        }
        self.ln_f.forward(g, store, h)
    }

    /// Row indices of tile tokens (class tokens skipped) in `encode`'s
    /// output.
    pub fn tile_rows(batch: usize, n: usize) -> Vec<usize> {
        (0..batch).flat_map(|b| (0..n).map(move |i| b * (n + 1) + 1 + i)).collect()
    }

    /// Row indices of the class tokens.
    pub fn cls_rows(batch: usize, n: usize) -> Vec<usize> {
        (0..batch).map(|b| b * (n + 1)).collect()
    }

    /// Token-classifier logits `[batch·n, classes]` for every tile.
    pub fn token_logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, hidden: Var, n: usize) -> Result<Var> {
        let batch = g.value(hidden).rows() / (n + 1);
        let tiles = g.gather_rows(hidden, &Self::tile_rows(batch, n))?;
        self.head.forward(g, store, tiles)
    }

    /// Every linear layer of the backbone; the token classifier is not
    /// included.
    pub fn backbone_linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out: Vec<&mut Linear> = vec![&mut self.input];
        for b in &mut self.blocks {
            out.extend(b.linears_mut());
        }
        out
    }

    pub fn backbone_linears(&self) -> Vec<&Linear> {
        let mut out: Vec<&Linear> = vec![&self.input];
        for b in &self.blocks {
            out.extend(b.linears());
        }
        out
    }
}
