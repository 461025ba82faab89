use rand::Rng;

use crate::diffmath::nn::{Linear, TransformerBlock, TransformerConfig};
use crate::diffmath::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Per-token MLP `D → hidden → d` with a tanh in between.
#[derive(Debug, Clone)]
pub struct VqEncoder {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl VqEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_dim: usize, hidden: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        VqEncoder {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, true, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim
    }

    /// `[rows, D] → [rows, d]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.tanh(h)?;
        self.fc2.forward(g, store, h)
    }

    /// Latents for `rows × D` tokens without keeping a tape.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, tokens: Tensor<T>) -> Result<Tensor<T>> {
        if tokens.rank() != 2 || tokens.cols() != self.in_dim() {
            return Err(Error::shape(
                "encode",
                format!("tokens {:?}, encoder expects {} features", tokens.shape(), self.in_dim()),
            ));
        }
        let mut g = Graph::new();
        let x = g.constant(tokens);
        let y = self.forward(&mut g, store, x)?;
        Ok(g.value(y).clone())
    }
}

/// Transformer decoder: linear stem to `width`, learned positional
/// embedding per grid slot, pre-norm blocks, linear head to `D`.
#[derive(Debug, Clone)]
pub struct VqDecoder {
    pub stem: Linear,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub head: Linear,
    pub seq: usize,
    pub config: TransformerConfig,
}

impl VqDecoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        seq: usize,
        config: TransformerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let stem = Linear::new(store, &format!("{name}.stem"), in_dim, config.width, true, rng);
        let pos = store.add(format!("{name}.pos"), Tensor::randn(&[seq, config.width], 0.02, rng));
        let blocks = (0..config.depth)
            .map(|i| TransformerBlock::new(store, &format!("{name}.block{i}"), &config, rng))
            .collect();
        let head = Linear::new(store, &format!("{name}.head"), config.width, out_dim, true, rng);
        Ok(VqDecoder { stem, pos, blocks, head, seq, config })
    }

    pub fn in_dim(&self) -> usize {
        self.stem.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.head.out_dim
    }

    /// `[B·n, in] → [B·n, D]`; attention is confined to each tile's `n` rows.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let h = self.stem.forward(g, store, z)?;
        let pos = g.param(store, self.pos);
        let mut h = g.add_broadcast(h, pos)?;
        for block in &self.blocks {
            h = block.forward(g, store, h, self.seq, None)?;
        }
        self.head.forward(g, store, h)
    }

    pub fn decode<T: Scalar>(&self, store: &ParamStore<T>, z: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(z);
        let y = self.forward(&mut g, store, x)?;
        Ok(g.value(y).clone())
    }
}
