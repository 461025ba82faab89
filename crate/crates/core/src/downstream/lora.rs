//! Low-rank adapters on existing linear layers.

use rand::Rng;

use crate::diffmath::nn::{Linear, LoraParams};
use crate::diffmath::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_LORA_RANK: usize = 16;

/// Attach a rank-`rank` update to every layer and freeze the base
/// weights. `A` starts Gaussian and `B` at zero, so the wrapped layers
/// compute exactly what they did before. Returns the number of values
/// added.
pub fn lora_wrap<T: Scalar>(
    store: &mut ParamStore<T>,
    linears: Vec<&mut Linear>,
    rank: usize,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<usize> {
    if rank == 0 {
        return Err(Error::Config("lora rank must be positive".into()));
    }
    let mut added = 0;
    for lin in linears {
        if lin.lora.is_some() {
            return Err(Error::Config(format!("{} already carries a lora update", lin.name)));
        }
        let std = 1.0 / (lin.in_dim as f64).sqrt();
        let a = store.add(format!("{}.lora_a", lin.name), Tensor::randn(&[lin.in_dim, rank], std, rng));
        let b = store.add(format!("{}.lora_b", lin.name), Tensor::zeros(&[rank, lin.out_dim]));
        store.set_trainable(lin.w, false);
        if let Some(bias) = lin.b {
            store.set_trainable(bias, false);
        }
        lin.lora = Some(LoraParams { a, b, rank, alpha });
        added += lin.lora_param_count(rank);
    }
    Ok(added)
}

/// Fold each update into its base weight (`W += (α/r) A B`) and detach
/// it. The adapter tensors stay in the store but are no longer read.
pub fn lora_merge<T: Scalar>(store: &mut ParamStore<T>, linears: Vec<&mut Linear>) -> Result<()> {
    for lin in linears {
        let Some(l) = lin.lora.take() else { continue };
        let delta = store.get(l.a).matmul(store.get(l.b))?;
        let s = T::from_f64_lossy(l.scale());
        let w = store.get_mut(lin.w);
        for (w, d) in w.data_mut().iter_mut().zip(delta.data()) {
            *w = *w + s * *d;
        }
        store.set_trainable(l.a, false);
        store.set_trainable(l.b, false);
    }
    Ok(())
}
