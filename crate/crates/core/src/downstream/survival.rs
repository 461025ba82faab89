//! Discrete-time survival: time bins, the hazard likelihood and the
//! risk score derived from it.

use crate::diffmath::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_SURVIVAL_BINS: usize = 4;

/// Interior cut points splitting `times` into `bins` groups of roughly
/// equal size (linearly interpolated quantiles). Event times are used
/// when any exist so that censoring does not drag the cuts.
pub fn quantile_cuts(times: &[f64], events: &[bool], bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(Error::Config("survival needs at least one bin".into()));
    }
    if times.len() != events.len() {
        return Err(Error::Data("survival times and events differ in length".into()));
    }
    let mut pool: Vec<f64> = times.iter().zip(events).filter(|(_, &e)| e).map(|(&t, _)| t).collect();
    if pool.is_empty() {
        pool = times.to_vec();
    }
    if pool.is_empty() {
        return Err(Error::Data("no survival times".into()));
    }
    if pool.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("survival time"));
    }
    pool.sort_by(f64::total_cmp);
    let last = (pool.len() - 1) as f64;
    Ok((1..bins)
        .map(|k| {
            let pos = last * k as f64 / bins as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            pool[lo] + (pool[hi] - pool[lo]) * (pos - lo as f64)
        })
        .collect())
}

/// Bin of time `t`: the number of cut points strictly below it.
pub fn time_bin(t: f64, cuts: &[f64]) -> usize {
    cuts.partition_point(|&c| c < t)
}

/// Mean negative log-likelihood of discrete hazards `h = σ(logits)`,
/// logits `[n, bins]`. An event in bin `b` contributes
/// `-ln h_b - Σ_{j<b} ln(1 - h_j)`; a sample censored in bin `b`
/// contributes `-Σ_{j≤b} ln(1 - h_j)`.
pub fn hazard_nll<T: Scalar>(g: &mut Graph<T>, logits: Var, bins: &[usize], events: &[bool]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != bins.len() || events.len() != bins.len() || bins.is_empty() {
        return Err(Error::shape(
            "hazard_nll",
            format!("logits {shape:?} for {} bins and {} events", bins.len(), events.len()),
        ));
    }
    let k = shape[1];
    if let Some(&b) = bins.iter().find(|&&b| b >= k) {
        return Err(Error::Data(format!("time bin {b} out of range for {k} hazard bins")));
    }
    let n = bins.len();
    let mut hit = vec![T::zero(); n * k];
    let mut survived = vec![T::zero(); n * k];
    for (i, (&b, &e)) in bins.iter().zip(events).enumerate() {
        let upto = if e { b } else { b + 1 };
        for j in 0..upto {
            survived[i * k + j] = T::one();
        }
        if e {
            hit[i * k + b] = T::one();
        }
    }
    let log_h = g.log_sigmoid(logits)?;
    let neg = g.scale(logits, -T::one())?;
    let log_s = g.log_sigmoid(neg)?;
    let hit = g.constant(Tensor::new(vec![n, k], hit)?);
    let survived = g.constant(Tensor::new(vec![n, k], survived)?);
    let a = g.mul(log_h, hit)?;
    let b = g.mul(log_s, survived)?;
    let ll = g.add(a, b)?;
    let total = g.sum(ll)?;
    g.scale(total, T::from_f64_lossy(-1.0 / n as f64))
}

/// Survival curve `S_j = Π_{i≤j} (1 - h_i)` of one row of hazard logits.
pub fn survival_curve(logits: &[f64]) -> Vec<f64> {
    let mut s = 1.0;
    logits
        .iter()
        .map(|&z| {
            s *= 1.0 - 1.0 / (1.0 + (-z).exp());
            s
        })
        .collect()
}

/// Risk score `-Σ_j S_j`; higher means an earlier expected event.
pub fn risk_score(logits: &[f64]) -> f64 {
    -survival_curve(logits).iter().sum::<f64>()
}
