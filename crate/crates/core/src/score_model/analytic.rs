use crate::error::{Error, Result};
use crate::forward_sde::{ForwardProcess, Kernel};
use crate::score_model::data::DataSpec;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// −(x − mean)/variance.
pub fn kernel_score(x: &[f64], mean: &[f64], variance: f64) -> Result<Vec<f64>> {
    if !(variance > 0.0) {
        return Err(Error::Singular(format!("kernel variance {variance} is not positive")));
    }
    Ok(x.iter().zip(mean).map(|(a, m)| -(a - m) / variance).collect())
}

/// log N(x; mean, variance·I).
pub fn gaussian_log_density(x: &[f64], mean: &[f64], variance: f64) -> f64 {
    let d = x.len() as f64;
    let q: f64 = x.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum();
    -0.5 * (q / variance + d * (LN_2PI + variance.ln()))
}

/// ∇ log p_t(x_t | x₀) for the forward kernel.
pub fn true_score_kernel(x_t: &[f64], x0: &[f64], t: f64, process: &ForwardProcess) -> Result<Vec<f64>> {
    let m = process.marginal(x0, t)?;
    if m.variance <= 0.0 {
        return Err(Error::Singular(format!("kernel is degenerate at t = {t}")));
    }
    kernel_score(x_t, &m.mean, m.variance)
}

/// Means and variances of the mixture pushed through the kernel.
fn pushed_components(data: &DataSpec, kernel: Kernel, target: &[f64]) -> Result<Vec<(f64, Vec<f64>, f64)>> {
    data.components
        .iter()
        .map(|c| {
            let v = kernel.variance + c.std * c.std * kernel.decay * kernel.decay;
            if !(v > 0.0) {
                return Err(Error::Singular("mixture component has zero variance".into()));
            }
            Ok((c.weight, kernel.marginal(&c.mean, target).mean, v))
        })
        .collect()
}

/// ∇ log of Σ_k w_k N(target + a(m_k − target), v + s_k²a²) with
/// log-sum-exp responsibilities.
pub fn mixture_score(x: &[f64], data: &DataSpec, kernel: Kernel, target: &[f64]) -> Result<Vec<f64>> {
    let comps = pushed_components(data, kernel, target)?;
    let logs: Vec<f64> = comps
        .iter()
        .map(|(w, m, v)| w.ln() + gaussian_log_density(x, m, *v))
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut out = vec![0.0; x.len()];
    for ((_, m, v), r) in comps.iter().zip(&weights) {
        for ((o, a), b) in out.iter_mut().zip(x).zip(m) {
            *o -= (r / z) * (a - b) / v;
        }
    }
    Ok(out)
}

pub fn mixture_log_density(x: &[f64], data: &DataSpec, kernel: Kernel, target: &[f64]) -> Result<f64> {
    let comps = pushed_components(data, kernel, target)?;
    let logs: Vec<f64> = comps
        .iter()
        .map(|(w, m, v)| w.ln() + gaussian_log_density(x, m, *v))
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln())
}

/// Exact marginal score of `data` under the forward kernel at time `t`,
/// with the process's μ as drift target.
pub fn true_score_mixture(x_t: &[f64], data: &DataSpec, t: f64, process: &ForwardProcess) -> Result<Vec<f64>> {
    if t <= 0.0 {
        return Err(Error::Singular("mixture score needs t > 0".into()));
    }
    mixture_score(x_t, data, process.kernel(t)?, &process.params.mu)
}
