//! Two-dimensional rotary position embedding.
//!
//! The first half of each head vector rotates with the row coordinate,
//! the second half with the column coordinate. Within a half, consecutive
//! pairs `(2j, 2j+1)` rotate at frequency `base^(-2j/half)`.

use std::sync::Arc;

use crate::diffmath::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Per-token rotation angles for one head dimension.
#[derive(Debug, Clone)]
pub struct RopeTable<T> {
    head_dim: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    /// `coords[i]` is `(row, col)`; `None` leaves token `i` unrotated.
    pub fn new(head_dim: usize, coords: &[Option<(f64, f64)>], base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(Error::shape("rope2d", format!("head dim {head_dim} not divisible by 4")));
        }
        let half = head_dim / 2;
        let pairs_per_axis = half / 2;
        let mut cos = Vec::with_capacity(coords.len() * half);
        let mut sin = Vec::with_capacity(coords.len() * half);
        for c in coords {
            for axis in 0..2 {
                for j in 0..pairs_per_axis {
                    let freq = base.powf(-2.0 * j as f64 / half as f64);
                    let angle = match c {
                        Some((r, col)) => freq * if axis == 0 { *r } else { *col },
                        None => 0.0,
                    };
                    cos.push(T::from_f64_lossy(angle.cos()));
                    sin.push(T::from_f64_lossy(angle.sin()));
                }
            }
        }
        Ok(RopeTable { head_dim, cos, sin })
    }

    pub fn from_grid(head_dim: usize, coords: &[(f64, f64)], base: f64) -> Result<Self> {
        let c: Vec<_> = coords.iter().map(|&c| Some(c)).collect();
        Self::new(head_dim, &c, base)
    }

    pub fn tokens(&self) -> usize {
        self.cos.len() / (self.head_dim / 2)
    }

    fn rotate(&self, x: &[T], out: &mut [T], inverse: bool) {
        let pairs = self.head_dim / 2;
        for (t, (xr, or)) in x
            .chunks_exact(self.head_dim)
            .zip(out.chunks_exact_mut(self.head_dim))
            .enumerate()
        {
            for p in 0..pairs {
                let (c, mut s) = (self.cos[t * pairs + p], self.sin[t * pairs + p]);
                if inverse {
                    s = -s;
                }
                let (a, b) = (xr[2 * p], xr[2 * p + 1]);
                or[2 * p] = a * c - b * s;
                or[2 * p + 1] = a * s + b * c;
            }
        }
    }

    /// Rotate a `[tokens, head_dim]` array.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.head_dim || x.rows() != self.tokens() {
            return Err(Error::shape(
                "rope2d",
                format!("{:?} vs table {}x{}", x.shape(), self.tokens(), self.head_dim),
            ));
        }
        let mut out = vec![T::zero(); x.len()];
        self.rotate(x.data(), &mut out, false);
        Tensor::new(x.shape().to_vec(), out)
    }

    /// Rotate a graph node, recording the inverse rotation as its backward.
    pub fn apply_graph(self: &Arc<Self>, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let value = self.apply(g.value(x))?;
        let table = Arc::clone(self);
        g.custom(
            &[x],
            value,
            Box::new(move |grad: &Tensor<T>| {
                let mut dx = vec![T::zero(); grad.len()];
                table.rotate(grad.data(), &mut dx, true);
                vec![Tensor::new(grad.shape().to_vec(), dx).expect("shape")]
            }),
        )
    }
}

/// Rotate `x: [tokens, head_dim]` by integer grid coordinates.
pub fn rope2d_apply<T: Scalar>(x: &Tensor<T>, coords: &[(f64, f64)]) -> Result<Tensor<T>> {
    RopeTable::from_grid(x.cols(), coords, DEFAULT_ROPE_BASE)?.apply(x)
}
