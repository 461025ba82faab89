use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, tol: 1e-4, abs_floor: 1e-3 }
    }
}

impl GradCheckConfig {
    pub fn with_tol(tol: f64) -> Self {
        GradCheckConfig { tol, ..Default::default() }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, element)` with the largest error.
    pub worst: (usize, usize),
    pub checked: usize,
    pub passed: bool,
}

fn eval<F>(f: &F, point: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compare analytic gradients of a scalar function against central
/// differences at `point`.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let a = eval(&f, point)?;
    let b = eval(&f, point)?;
    if a.to_bits() != b.to_bits() {
        return Err(Error::NonDeterministic(a, b));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), checked: 0, passed: true };
    let mut probe: Vec<Tensor<f64>> = point.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(point[i].shape());
        let analytic = grads.wrt(v).unwrap_or(&zeros).clone();
        for j in 0..point[i].len() {
            let orig = point[i].data()[j];
            probe[i].data_mut()[j] = orig + cfg.step;
            let up = eval(&f, &probe)?;
            probe[i].data_mut()[j] = orig - cfg.step;
            let down = eval(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let an = analytic.data()[j];
            let denom = an.abs().max(numeric.abs()).max(cfg.abs_floor);
            let err = (an - numeric).abs() / denom;
            report.checked += 1;
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst = (i, j);
            }
        }
    }
    report.passed = report.max_rel_err <= cfg.tol;
    Ok(report)
}
