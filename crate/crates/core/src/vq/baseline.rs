//! Summary-token baseline: a decoder of the same architecture asked to
//! rebuild every patch token from the tile's summary vector alone.

use crate::diffmath::rng::labeled_rng;
use crate::diffmath::{AdamW, GradBuffer, Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::msvq::train::cosine_f64;
use crate::msvq::{fit, reconstruction_fidelity, FitConfig, ScaleSchedule, Tokenizer, TokenizerConfig};
use crate::synth::TileST;

use super::VqDecoder;

/// Decoder fed with the summary token repeated at every grid slot.
#[derive(Debug, Clone)]
pub struct ClsDecoder {
    pub store: ParamStore<f32>,
    pub decoder: VqDecoder,
    pub dim: usize,
    pub n: usize,
}

impl ClsDecoder {
    pub fn new(cfg: &TokenizerConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let decoder = VqDecoder::new(
            &mut store,
            "cls_decoder",
            cfg.dim,
            cfg.dim,
            cfg.n(),
            cfg.decoder,
            &mut labeled_rng(cfg.seed, "tokenizer-decoder", 0),
        )?;
        Ok(ClsDecoder { store, decoder, dim: cfg.dim, n: cfg.n() })
    }

    fn inputs(&self, tiles: &[&TileST]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut x = Vec::with_capacity(tiles.len() * self.n * self.dim);
        let mut y = Vec::with_capacity(tiles.len() * self.n * self.dim);
        for t in tiles {
            let cls = t.cls.as_ref().ok_or(Error::MissingCls(t.tile_id))?;
            if cls.len() != self.dim || t.tokens.len() != self.n * self.dim {
                return Err(Error::shape("cls decoder", format!("tile {} geometry", t.tile_id)));
            }
            for _ in 0..self.n {
                x.extend_from_slice(cls);
            }
            y.extend_from_slice(&t.tokens);
        }
        let rows = tiles.len() * self.n;
        Ok((Tensor::new(vec![rows, self.dim], x)?, Tensor::new(vec![rows, self.dim], y)?))
    }

    /// One step on `1 − mean cos`; returns the mean cosine.
    pub fn train_step(&mut self, tiles: &[&TileST], opt: &mut AdamW<f32>) -> Result<f64> {
        let (x, y) = self.inputs(tiles)?;
        let mut g = Graph::new();
        let x = g.constant(x);
        let y = g.constant(y);
        let o = self.decoder.forward(&mut g, &self.store, x)?;
        let cos = g.cosine_similarity(o, y)?;
        let mean = g.mean(cos)?;
        let one = g.constant(Tensor::scalar(1.0));
        let loss = g.sub(one, mean)?;
        let value = g.value(mean).item() as f64;
        let grads = g.backward(loss)?;
        let mut buf = GradBuffer::new(&self.store);
        grads.accumulate_into(&mut buf);
        opt.step(&mut self.store, &buf)?;
        Ok(value)
    }

    /// Mean patch cosine over `tiles`.
    pub fn fidelity(&self, tiles: &[TileST]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for t in tiles {
            let (x, _) = self.inputs(&[t])?;
            let o = self.decoder.decode(&self.store, x)?;
            for i in 0..self.n {
                total += cosine_f64(o.row(i), t.token(i));
                count += 1;
            }
        }
        Ok(total / count.max(1) as f64)
    }
}

/// Per-epoch held-out fidelity of the quantized path and the summary path.
#[derive(Debug, Clone, PartialEq)]
pub struct FidelityCurves {
    pub vq: Vec<f64>,
    pub cls: Vec<f64>,
}

/// Train a tokenizer and an equally sized summary-token decoder with the
/// same step budget and batch order, evaluating both on `eval` after every
/// epoch.
pub fn cls_baseline_recon(
    train: &[TileST],
    eval: &[TileST],
    cfg: &TokenizerConfig,
    sched: &ScaleSchedule,
    fit_cfg: &FitConfig,
) -> Result<FidelityCurves> {
    if let Some(t) = train.iter().chain(eval).find(|t| t.cls.is_none()) {
        return Err(Error::MissingCls(t.tile_id));
    }
    let mut tok = Tokenizer::<f32>::new(cfg.clone())?;
    let mut vq = Vec::with_capacity(fit_cfg.epochs);
    fit(&mut tok, train, sched, fit_cfg, |t, _| {
        vq.push(reconstruction_fidelity(t, eval, sched)?);
        Ok(())
    })?;

    let mut cls_dec = ClsDecoder::new(cfg)?;
    let mut opt = AdamW::new(fit_cfg.adam, fit_cfg.schedule(train.len()));
    let mut rng = labeled_rng(fit_cfg.seed, "tokenizer-fit", 0);
    let mut cls = Vec::with_capacity(fit_cfg.epochs);
    for _ in 0..fit_cfg.epochs {
        let order = crate::msvq::shuffled(train.len(), &mut rng);
        for chunk in order.chunks(fit_cfg.batch_size.max(1)) {
            let batch: Vec<&TileST> = chunk.iter().map(|&i| &train[i]).collect();
            cls_dec.train_step(&batch, &mut opt)?;
        }
        cls.push(cls_dec.fidelity(eval)?);
    }
    Ok(FidelityCurves { vq, cls })
}
