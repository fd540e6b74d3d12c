//! Temporal distribution discrepancy: the lower bound on ‖x₀ − x̂_T‖², its
//! Monte Carlo check, distribution-gap metrics and the initial magnitude I₀.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF};

use crate::error::{ensure_finite, Error, Result};
use crate::forward_sde::{simulate_ensemble, EnsembleConfig, ForwardProcess, GaussianMarginal, VolatilityMode};
use crate::rng::{NoiseStream, StreamDomain};

/// Laurent–Massart one-sided χ² tail: d + 2√(−d ln δ) − 2 ln δ.
pub fn chi_square_tail_term(d: usize, delta: f64) -> Result<f64> {
    if d == 0 {
        return Err(Error::Domain("d must be at least 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    let l = delta.ln();
    let d = d as f64;
    Ok(d + 2.0 * (-d * l).sqrt() - 2.0 * l)
}

/// Score-norm bound for Gaussian data: the largest ‖∇ log N(m, v I)‖ over
/// the ball holding 99.9% of its mass, sqrt(q₀.₉₉₉(χ²_d) / v).
pub fn default_score_bound(d: usize, variance: f64) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::Singular(format!("variance {variance} must be positive")));
    }
    let chi = ChiSquared::new(d as f64).map_err(|e| Error::Invalid(e.to_string()))?;
    // statrs' inverse is only good to ~1e-5; polish with Newton on the CDF.
    let mut q = chi.inverse_cdf(0.999);
    for _ in 0..4 {
        q -= (chi.cdf(q) - 0.999) / chi.pdf(q);
    }
    Ok((q / variance).sqrt())
}

/// Supremum of τσ_t over a fine uniform grid on [0, t].
pub fn sup_diffusion(process: &ForwardProcess, t: f64) -> Result<f64> {
    let n = 10_000;
    let mut best = 0.0f64;
    for i in 0..=n {
        best = best.max(process.diffusion_at(t * i as f64 / n as f64)?);
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TddInputs {
    pub x0: Vec<f64>,
    pub process: ForwardProcess,
    pub t_final: f64,
    pub delta: f64,
    /// Score-norm bound C.
    pub score_bound: f64,
    pub sigma_max: f64,
}

impl TddInputs {
    /// Fill C and σ_max with their defaults: the Gaussian score bound of the
    /// terminal kernel and the grid supremum of τσ_t.
    pub fn with_defaults(x0: Vec<f64>, process: ForwardProcess, t_final: f64, delta: f64) -> Result<Self> {
        let v = process.kernel(t_final)?.variance;
        let score_bound = default_score_bound(process.d(), v)?;
        let sigma_max = sup_diffusion(&process, t_final)?;
        let inputs = TddInputs { x0, process, t_final, delta, score_bound, sigma_max };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x0.len() != self.process.d() {
            return Err(Error::Invalid("x0 dimension mismatch".into()));
        }
        ensure_finite(&self.x0, "x0")?;
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Domain(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.t_final > 0.0 && self.t_final <= self.process.t_end() * (1.0 + 1e-12)) {
            return Err(Error::Domain(format!("T = {} must lie in (0, t_end]", self.t_final)));
        }
        if !(self.score_bound > 0.0) {
            return Err(Error::Invalid("score bound C must be positive".into()));
        }
        let sup = sup_diffusion(&self.process, self.t_final)?;
        if !(self.sigma_max >= sup * (1.0 - 1e-9)) {
            return Err(Error::Invalid(format!(
                "sigma_max = {} is below sup τσ_t = {sup}",
                self.sigma_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TddReport {
    pub bound: f64,
    pub term_residual: f64,
    pub term_stationary: f64,
    pub term_noise: f64,
    pub empirical_lhs: Option<f64>,
    pub exceed_fraction: Option<f64>,
    pub delta: f64,
}

impl TddReport {
    /// The signed expression inside the absolute value.
    pub fn inner(&self) -> f64 {
        self.term_residual + self.term_stationary - self.term_noise
    }
}

/// |(‖x₀−μ‖² − S)e^{−2θ̄_T} + S − σ_max²(Cσ_max² + χ(d, δ))| with
/// S = τ²σ_T²/(2θ_T) (τ²λ² under the coupling).
pub fn tdd_lower_bound(inputs: &TddInputs) -> Result<TddReport> {
    inputs.validate()?;
    let p = &inputs.process;
    let t = inputs.t_final;
    if p.theta_at(t)? <= 0.0 {
        return Err(Error::Singular(format!("theta vanishes at T = {t}")));
    }
    let stationary = p.reference_variance(t)?;
    let dist2: f64 = inputs.x0.iter().zip(&p.params.mu).map(|(a, b)| (a - b) * (a - b)).sum();
    let residual = (dist2 - stationary) * (-2.0 * p.schedule.theta_bar(t)?).exp();
    let s2 = inputs.sigma_max * inputs.sigma_max;
    let noise = s2 * (inputs.score_bound * s2 + chi_square_tail_term(p.d(), inputs.delta)?);
    Ok(TddReport {
        bound: (residual + stationary - noise).abs(),
        term_residual: residual,
        term_stationary: stationary,
        term_noise: noise,
        empirical_lhs: None,
        exceed_fraction: None,
        delta: inputs.delta,
    })
}

/// Bound plus Monte Carlo LHS: simulate `n_runs` Euler–Maruyama forward runs
/// from x₀ and record the mean of ‖x₀ − x̂_T‖² and how often it exceeds the bound.
pub fn tdd_monte_carlo(inputs: &TddInputs, n_runs: usize, n_steps: usize, seed: u64) -> Result<TddReport> {
    let mut report = tdd_lower_bound(inputs)?;
    if n_runs == 0 || n_steps == 0 {
        return Err(Error::Invalid("n_runs and n_steps must be at least 1".into()));
    }
    let p = &inputs.process;
    let dt = inputs.t_final / n_steps as f64;
    let lhs: Vec<Result<f64>> = (0..n_runs)
        .into_par_iter()
        .map(|r| {
            let mut stream = NoiseStream::new(seed, StreamDomain::Forward, r as u64);
            let mut x = inputs.x0.clone();
            let mut dw = vec![0.0; p.d()];
            for i in 0..n_steps {
                for v in dw.iter_mut() {
                    *v = dt.sqrt() * stream.normal();
                }
                p.advance(&mut x, inputs.t_final * i as f64 / n_steps as f64, dt, &dw);
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step: n_steps, detail: format!("run {r}") });
            }
            Ok(x.iter().zip(&inputs.x0).map(|(a, b)| (a - b) * (a - b)).sum())
        })
        .collect();
    let lhs = lhs.into_iter().collect::<Result<Vec<f64>>>()?;
    let exceed = lhs.iter().filter(|&&v| v >= report.bound).count();
    report.empirical_lhs = Some(lhs.iter().sum::<f64>() / n_runs as f64);
    report.exceed_fraction = Some(exceed as f64 / n_runs as f64);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardGap {
    /// |μ − mean(x_T)| per coordinate.
    pub mean_gap: Vec<f64>,
    /// |S − var(x_T)| with S the stationary reference variance.
    pub var_gap: f64,
    pub mean_gap_closed: Vec<f64>,
    pub var_gap_closed: f64,
    pub mean_se: f64,
    pub var_se: f64,
}

/// Monte Carlo gap between law(x_T) and the stationary law, next to its
/// closed form.
pub fn empirical_forward_gap(
    x0: &[f64],
    process: &ForwardProcess,
    t_final: f64,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<ForwardGap> {
    if n_paths < 1000 {
        return Err(Error::Invalid(format!("need at least 1000 paths, got {n_paths}")));
    }
    if (t_final - process.t_end()).abs() > 1e-12 * process.t_end() {
        return Err(Error::Domain("T must equal the schedule horizon t_end".into()));
    }
    let stats = simulate_ensemble(process, x0, &EnsembleConfig::new(n_paths, n_steps, seed).with_stride(n_steps))?;
    let last = stats.times.len() - 1;
    let s = process.reference_variance(t_final)?;
    let k = process.kernel(t_final)?;
    let mu = &process.params.mu;
    Ok(ForwardGap {
        mean_gap: stats.means[last].iter().zip(mu).map(|(m, u)| (u - m).abs()).collect(),
        var_gap: (s - stats.variances[last]).abs(),
        mean_gap_closed: x0.iter().zip(mu).map(|(x, u)| ((x - u) * k.decay).abs()).collect(),
        var_gap_closed: (s - k.variance).abs(),
        mean_se: stats.mean_standard_error(last),
        var_se: stats.variance_standard_error(last),
    })
}

/// KL(a ‖ b) for isotropic Gaussians, summed over coordinates.
pub fn gaussian_kl(a: &GaussianMarginal, b: &GaussianMarginal) -> Result<f64> {
    if a.d() != b.d() {
        return Err(Error::Invalid("dimension mismatch".into()));
    }
    if !(b.variance > 0.0) {
        return Err(Error::Domain("target variance must be positive".into()));
    }
    if a.variance < 0.0 {
        return Err(Error::Numeric(format!("negative variance {}", a.variance)));
    }
    if a.variance == 0.0 {
        return Ok(f64::INFINITY);
    }
    let d = a.d() as f64;
    let r = a.variance / b.variance;
    let dm: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(0.5 * (d * (r - 1.0 - r.ln()) + dm / b.variance))
}

/// Delta-method standard error of `gaussian_kl(â, b)` when â is fitted from
/// `n` Gaussian samples.
pub fn gaussian_kl_standard_error(a_hat: &GaussianMarginal, b: &GaussianMarginal, n: usize) -> f64 {
    let n = n as f64;
    let d = a_hat.d() as f64;
    let mean_part: f64 = a_hat
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| ((x - y) / b.variance).powi(2) * a_hat.variance / n)
        .sum();
    let dv = 0.5 * d * (1.0 / b.variance - 1.0 / a_hat.variance);
    let var_part = dv * dv * 2.0 * a_hat.variance * a_hat.variance / (n * d);
    (mean_part + var_part).sqrt()
}

/// 2-Wasserstein distance between isotropic Gaussians.
pub fn gaussian_w2(a: &GaussianMarginal, b: &GaussianMarginal) -> Result<f64> {
    if a.d() != b.d() {
        return Err(Error::Invalid("dimension mismatch".into()));
    }
    if a.variance < 0.0 || b.variance < 0.0 {
        return Err(Error::Numeric("negative variance".into()));
    }
    let dm: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((dm + a.d() as f64 * (a.variance.sqrt() - b.variance.sqrt()).powi(2)).sqrt())
}

/// I₀ = (‖μ − x₀‖ θ̄_T)² + d ∫₀ᵀ τ²σ_t² dt, coefficients frozen at x₀.
/// Under the coupling the diffusion part is 2τ²λ²θ̄_T·d.
pub fn initial_magnitude_i0(x0: &[f64], process: &ForwardProcess, t_final: f64) -> Result<f64> {
    if x0.len() != process.d() {
        return Err(Error::Invalid("x0 dimension mismatch".into()));
    }
    let tb = process.schedule.theta_bar(t_final)?;
    let dist: f64 = x0.iter().zip(&process.params.mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let tau2 = process.params.tau * process.params.tau;
    let diffusion = match &process.volatility {
        VolatilityMode::Coupled => 2.0 * tau2 * process.params.lambda.powi(2) * tb,
        VolatilityMode::Decoupled(v) => {
            let f = |t: f64| v.value(t).powi(2);
            tau2 * quadrature::integrate(f, 0.0, t_final, 1e-12).integral
        }
    };
    Ok((dist * tb).powi(2) + diffusion * process.d() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_sde::ProcessParams;
    use crate::schedules::{DecoupledVolatility, Schedule};

    fn unit_process() -> ForwardProcess {
        ForwardProcess::coupled(ProcessParams::scalar(0.0, 1.0, 1.0).unwrap(), Schedule::constant(1.0)).unwrap()
    }

    #[test]
    fn chi_square_examples() {
        let oracle = 1.0 + 2.0 * (-(0.05f64).ln()).sqrt() - 2.0 * 0.05f64.ln();
        assert!((chi_square_tail_term(1, 0.05).unwrap() - oracle).abs() < 1e-14);
        assert!((chi_square_tail_term(1, 0.05).unwrap() - 10.453).abs() < 1e-3);
        assert!((chi_square_tail_term(1, 1.0 - 1e-12).unwrap() - 1.0).abs() < 1e-5);
        assert!(chi_square_tail_term(1, 0.0).is_err());
        assert!(chi_square_tail_term(1, 1.0).is_err());
        assert!(chi_square_tail_term(0, 0.5).is_err());
    }

    #[test]
    fn bound_plug_in_example() {
        let inputs = TddInputs {
            x0: vec![2.0],
            process: unit_process(),
            t_final: 1.0,
            delta: 0.05,
            score_bound: 1.0,
            sigma_max: 2f64.sqrt(),
        };
        let r = tdd_lower_bound(&inputs).unwrap();
        let chi = 1.0 + 2.0 * (-(0.05f64).ln()).sqrt() - 2.0 * 0.05f64.ln();
        let oracle = ((4.0 - 1.0) * (-2f64).exp() + 1.0 - 2.0 * (2.0 + chi)).abs();
        assert!((r.bound - oracle).abs() < 1e-12);
        assert!((r.bound - 23.5).abs() < 0.05);
    }

    #[test]
    fn bound_special_cases() {
        let far = ForwardProcess::coupled(ProcessParams::scalar(0.0, 1.0, 2.0).unwrap(), Schedule::constant(60.0))
            .unwrap();
        let inputs = TddInputs::with_defaults(vec![3.0], far, 1.0, 0.2).unwrap();
        let r = tdd_lower_bound(&inputs).unwrap();
        assert!(r.term_residual.abs() < 1e-40);
        assert!((r.bound - (4.0 - r.term_noise).abs()).abs() < 1e-12);

        let inputs = TddInputs::with_defaults(vec![0.0], unit_process(), 1.0, 0.2).unwrap();
        let r = tdd_lower_bound(&inputs).unwrap();
        assert!((r.term_residual + (-2f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn sigma_max_below_sup_is_rejected() {
        let inputs = TddInputs {
            x0: vec![2.0],
            process: unit_process(),
            t_final: 1.0,
            delta: 0.05,
            score_bound: 1.0,
            sigma_max: 1.0,
        };
        assert!(matches!(tdd_lower_bound(&inputs), Err(Error::Invalid(_))));
    }

    #[test]
    fn kl_examples() {
        let a = GaussianMarginal { mean: vec![0.3, -1.0], variance: 2.0 };
        assert_eq!(gaussian_kl(&a, &a).unwrap(), 0.0);
        let a = GaussianMarginal { mean: vec![0.0], variance: 1.0 };
        let b = GaussianMarginal { mean: vec![0.0], variance: std::f64::consts::E };
        let kl = gaussian_kl(&a, &b).unwrap();
        assert!((kl - 1.0 / (2.0 * std::f64::consts::E)).abs() < 1e-15);
        assert!((kl - 0.1839).abs() < 1e-4);
        let zero = GaussianMarginal { mean: vec![0.0], variance: 0.0 };
        assert!(matches!(gaussian_kl(&a, &zero), Err(Error::Domain(_))));
    }

    #[test]
    fn w2_examples() {
        let a = GaussianMarginal { mean: vec![0.0, 0.0], variance: 1.0 };
        let b = GaussianMarginal { mean: vec![3.0, 4.0], variance: 4.0 };
        assert!((gaussian_w2(&a, &b).unwrap() - (25.0f64 + 2.0).sqrt()).abs() < 1e-14);
        assert_eq!(gaussian_w2(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn i0_examples() {
        assert!((initial_magnitude_i0(&[2.0], &unit_process(), 1.0).unwrap() - 6.0).abs() < 1e-14);
        let tiny = ForwardProcess::coupled(ProcessParams::scalar(0.0, 1e-12, 1.0).unwrap(), Schedule::constant(1.0))
            .unwrap();
        assert!(initial_magnitude_i0(&[0.0], &tiny, 1.0).unwrap() < 1e-20);
        let l1 = ForwardProcess::coupled(ProcessParams::scalar(0.0, 1.0, 1.0).unwrap(), Schedule::constant(1.0))
            .unwrap();
        let l2 = ForwardProcess::coupled(ProcessParams::scalar(0.0, 2.0, 1.0).unwrap(), Schedule::constant(1.0))
            .unwrap();
        let d1 = initial_magnitude_i0(&[0.0], &l1, 1.0).unwrap();
        let d2 = initial_magnitude_i0(&[0.0], &l2, 1.0).unwrap();
        assert!((d2 - 4.0 * d1).abs() < 1e-12);
    }

    #[test]
    fn i0_decoupled_constant_matches_closed_form() {
        let p = ForwardProcess::new(
            ProcessParams::scalar(0.0, 1.0, 2.0).unwrap(),
            Schedule::constant(1.0),
            VolatilityMode::Decoupled(DecoupledVolatility::Constant(3.0)),
        )
        .unwrap();
        let v = initial_magnitude_i0(&[1.0], &p, 1.0).unwrap();
        assert!((v - (1.0 + 4.0 * 9.0)).abs() < 1e-10);
    }

    #[test]
    fn default_score_bound_matches_quantile() {
        // The 99.9% two-sided normal quantile is 3.2905.
        let c = default_score_bound(1, 4.0).unwrap();
        assert!((c - 3.290_526_731 / 2.0).abs() < 1e-8);
    }
}
