//! The τ-stiffened mean-reverting forward process
//! `dx = θ_t (μ − x) dt + τ σ_t dW`, its Euler–Maruyama discretization and
//! closed-form Gaussian marginals.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::rng::{NoiseStream, StreamDomain};
use crate::schedules::{CoupledVolatility, DecoupledVolatility, Schedule};
use crate::stats::{variance_standard_error, Moments};

/// Paths per parallel work unit. Fixed so reductions do not depend on the
/// number of worker threads.
pub(crate) const BLOCK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessParams {
    /// Drift target, one entry per coordinate.
    pub mu: Vec<f64>,
    pub lambda: f64,
    pub tau: f64,
}

impl ProcessParams {
    pub fn new(mu: Vec<f64>, lambda: f64, tau: f64) -> Result<Self> {
        let p = ProcessParams { mu, lambda, tau };
        p.validate()?;
        Ok(p)
    }

    pub fn scalar(mu: f64, lambda: f64, tau: f64) -> Result<Self> {
        Self::new(vec![mu], lambda, tau)
    }

    pub fn d(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.is_empty() {
            return Err(Error::Invalid("dimension d must be at least 1".into()));
        }
        ensure_finite(&self.mu, "mu")?;
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.tau.is_finite() && self.tau >= 1.0) {
            return Err(Error::Invalid(format!("tau must be at least 1, got {}", self.tau)));
        }
        Ok(())
    }

    /// τ²λ², the stationary variance under the coupling.
    pub fn stationary_variance(&self) -> f64 {
        self.tau * self.tau * self.lambda * self.lambda
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolatilityMode {
    Coupled,
    Decoupled(DecoupledVolatility),
}

/// Law of `x_t` given `x_0`: `N(target + decay·(x_0 − target), variance·I)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kernel {
    pub decay: f64,
    pub variance: f64,
}

impl Kernel {
    pub fn marginal(&self, x0: &[f64], target: &[f64]) -> GaussianMarginal {
        let mean = x0
            .iter()
            .zip(target)
            .map(|(x, m)| m + self.decay * (x - m))
            .collect();
        GaussianMarginal { mean, variance: self.variance }
    }
}

/// Isotropic Gaussian `N(mean, variance·I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMarginal {
    pub mean: Vec<f64>,
    pub variance: f64,
}

impl GaussianMarginal {
    pub fn d(&self) -> usize {
        self.mean.len()
    }
}

/// Draw `mean + sqrt(variance)·z`.
pub fn sample_marginal(m: &GaussianMarginal, stream: &mut NoiseStream) -> Result<Vec<f64>> {
    if !(m.variance >= 0.0) {
        return Err(Error::Numeric(format!("negative variance {}", m.variance)));
    }
    let sd = m.variance.sqrt();
    Ok(m.mean.iter().map(|mu| mu + sd * stream.normal()).collect())
}

/// A forward process: parameters, rate schedule and volatility family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardProcess {
    pub params: ProcessParams,
    pub schedule: Schedule,
    pub volatility: VolatilityMode,
}

impl ForwardProcess {
    pub fn new(params: ProcessParams, schedule: Schedule, volatility: VolatilityMode) -> Result<Self> {
        params.validate()?;
        schedule.validate()?;
        if let VolatilityMode::Decoupled(v) = &volatility {
            v.validate()?;
        }
        Ok(ForwardProcess { params, schedule, volatility })
    }

    pub fn coupled(params: ProcessParams, schedule: Schedule) -> Result<Self> {
        Self::new(params, schedule, VolatilityMode::Coupled)
    }

    pub fn d(&self) -> usize {
        self.params.d()
    }

    pub fn t_end(&self) -> f64 {
        self.schedule.t_end
    }

    pub fn theta_at(&self, t: f64) -> Result<f64> {
        self.schedule.theta_at(t)
    }

    /// σ_t, before the τ multiplier.
    pub fn sigma_at(&self, t: f64) -> Result<f64> {
        match &self.volatility {
            VolatilityMode::Coupled => {
                CoupledVolatility { lambda: self.params.lambda }.sigma_at(&self.schedule, t)
            }
            VolatilityMode::Decoupled(v) => v.sigma_at(&self.schedule, t),
        }
    }

    /// τσ_t, the full diffusion coefficient.
    pub fn diffusion_at(&self, t: f64) -> Result<f64> {
        Ok(self.params.tau * self.sigma_at(t)?)
    }

    /// `x + θ_t(μ − x)dt + τσ_t dW`.
    pub fn em_step(&self, x: &[f64], t: f64, dt: f64, dw: &[f64]) -> Result<Vec<f64>> {
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("dt must be positive, got {dt}")));
        }
        ensure_finite(x, "state")?;
        ensure_finite(dw, "increment")?;
        if x.len() != self.d() || dw.len() != self.d() {
            return Err(Error::Invalid("dimension mismatch in em_step".into()));
        }
        let theta = self.theta_at(t)?;
        let g = self.diffusion_at(t)?;
        let out: Vec<f64> = x
            .iter()
            .zip(&self.params.mu)
            .zip(dw)
            .map(|((x, m), w)| x + theta * (m - x) * dt + g * w)
            .collect();
        ensure_finite(&out, "state")?;
        Ok(out)
    }

    /// Euler–Maruyama trajectory on the uniform grid of `n_steps` intervals
    /// over [0, t_end], driven by the first `n_steps` increments of `path`.
    pub fn simulate(&self, x0: &[f64], n_steps: usize, path: &BrownianPath) -> Result<Trajectory> {
        if n_steps == 0 {
            return Err(Error::Invalid("n_steps must be at least 1".into()));
        }
        if x0.len() != self.d() || path.d() != self.d() {
            return Err(Error::Invalid("dimension mismatch between x0, path and process".into()));
        }
        ensure_finite(x0, "x0")?;
        let dt = self.t_end() / n_steps as f64;
        if (path.dt() - dt).abs() > 1e-12 * dt {
            return Err(Error::Alignment(format!(
                "path step {} differs from simulation step {dt}",
                path.dt()
            )));
        }
        let mut times = Vec::with_capacity(n_steps + 1);
        let mut states = Vec::with_capacity(n_steps + 1);
        times.push(0.0);
        states.push(x0.to_vec());
        let mut x = x0.to_vec();
        for i in 0..n_steps {
            let dw = path.increment(i as i64).ok_or_else(|| {
                Error::Range(format!("path has no increment for step {i}"))
            })?;
            let t = self.t_end() * i as f64 / n_steps as f64;
            self.advance(&mut x, t, dt, dw);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step: i + 1, detail: "non-finite state".into() });
            }
            times.push(self.t_end() * (i + 1) as f64 / n_steps as f64);
            states.push(x.clone());
        }
        Ok(Trajectory { times, states })
    }

    /// In-place EM update without domain checks; `t` must lie in the domain.
    pub(crate) fn advance(&self, x: &mut [f64], t: f64, dt: f64, dw: &[f64]) {
        let theta_dt = self.schedule.rate(t) * dt;
        let g = self.params.tau * self.sigma_unchecked(t);
        for ((x, m), w) in x.iter_mut().zip(&self.params.mu).zip(dw) {
            *x += theta_dt * (m - *x) + g * w;
        }
    }

    pub(crate) fn sigma_unchecked(&self, t: f64) -> f64 {
        match &self.volatility {
            VolatilityMode::Coupled => self.params.lambda * (2.0 * self.schedule.rate(t)).sqrt(),
            VolatilityMode::Decoupled(v) => v.value(t),
        }
    }

    /// Transition kernel from time 0 to `t`.
    pub fn kernel(&self, t: f64) -> Result<Kernel> {
        let tb = self.schedule.theta_bar(t)?;
        let decay = (-tb).exp();
        let variance = match &self.volatility {
            VolatilityMode::Coupled => self.params.stationary_variance() * -(-2.0 * tb).exp_m1(),
            VolatilityMode::Decoupled(v) => self.decoupled_variance(v, t.clamp(0.0, self.t_end()), tb),
        };
        Ok(Kernel { decay, variance })
    }

    /// τ² ∫₀ᵗ σ_s² e^{−2(θ̄_t − θ̄_s)} ds by adaptive quadrature, split at the
    /// volatility table's knots.
    fn decoupled_variance(&self, v: &DecoupledVolatility, t: f64, tb: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let f = |s: f64| {
            let sig = v.value(s);
            sig * sig * (-2.0 * (tb - self.schedule.integral(s))).exp()
        };
        let mut cuts = vec![0.0];
        cuts.extend(v.knots().iter().copied().filter(|&k| k > 0.0 && k < t));
        cuts.push(t);
        let scale = match v {
            DecoupledVolatility::Constant(s) => s * s,
            DecoupledVolatility::Table { values, .. } => values.iter().fold(0.0, |a, b| f64::max(a, b * b)),
        };
        let integral: f64 = cuts
            .windows(2)
            .map(|w| quadrature::integrate(f, w[0], w[1], 1e-14 * scale.max(1.0)).integral)
            .sum();
        self.params.tau * self.params.tau * integral
    }

    /// Closed-form law of `x_t` given `x_0`.
    pub fn marginal(&self, x0: &[f64], t: f64) -> Result<GaussianMarginal> {
        if x0.len() != self.d() {
            return Err(Error::Invalid("x0 dimension mismatch".into()));
        }
        Ok(self.kernel(t)?.marginal(x0, &self.params.mu))
    }

    /// `N(μ, τ²λ²)`.
    pub fn stationary_law(&self) -> GaussianMarginal {
        stationary_law(&self.params)
    }

    /// Stationary variance used as the terminal reference: τ²λ² under the
    /// coupling, τ²σ_T²/(2θ_T) evaluated at `t` otherwise.
    pub fn reference_variance(&self, t: f64) -> Result<f64> {
        match &self.volatility {
            VolatilityMode::Coupled => Ok(self.params.stationary_variance()),
            VolatilityMode::Decoupled(_) => {
                let theta = self.theta_at(t)?;
                if theta <= 0.0 {
                    return Err(Error::Singular(format!("theta vanishes at t = {t}")));
                }
                let g = self.diffusion_at(t)?;
                Ok(g * g / (2.0 * theta))
            }
        }
    }
}

/// `N(μ, τ²λ²)`.
pub fn stationary_law(params: &ProcessParams) -> GaussianMarginal {
    GaussianMarginal { mean: params.mu.clone(), variance: params.stationary_variance() }
}

/// Discretized Wiener increments on a uniform grid.
///
/// Step `i` covers `[i·dt, (i+1)·dt)`. Non-negative steps come from the
/// `Forward` stream (normal number `i·d + j` for coordinate `j`), negative
/// steps from the `ForwardPast` stream, so every increment is a pure
/// function of `(seed, path_index, step, coordinate)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BrownianPath {
    seed: u64,
    path_index: u64,
    dt: f64,
    d: usize,
    first_step: i64,
    increments: Vec<f64>,
}

impl BrownianPath {
    /// Increments for steps `0..n_steps`.
    pub fn generate(seed: u64, path_index: u64, dt: f64, n_steps: usize, d: usize) -> Result<Self> {
        Self::two_sided(seed, path_index, dt, 0, n_steps, d)
    }

    /// Increments for steps `-n_past..n_future`.
    pub fn two_sided(
        seed: u64,
        path_index: u64,
        dt: f64,
        n_past: usize,
        n_future: usize,
        d: usize,
    ) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Invalid(format!("dt must be positive, got {dt}")));
        }
        if d == 0 {
            return Err(Error::Invalid("dimension must be at least 1".into()));
        }
        let sd = dt.sqrt();
        let mut increments = vec![0.0; (n_past + n_future) * d];
        let mut past = NoiseStream::new(seed, StreamDomain::ForwardPast, path_index);
        for k in 0..n_past {
            let row = n_past - 1 - k;
            for j in 0..d {
                increments[row * d + j] = sd * past.normal();
            }
        }
        let mut fwd = NoiseStream::new(seed, StreamDomain::Forward, path_index);
        for v in &mut increments[n_past * d..] {
            *v = sd * fwd.normal();
        }
        Ok(BrownianPath { seed, path_index, dt, d, first_step: -(n_past as i64), increments })
    }

    /// Regenerate the increment for one step directly from the keystream.
    pub fn regenerate_increment(seed: u64, path_index: u64, dt: f64, d: usize, step: i64) -> Vec<f64> {
        let (domain, pos) = if step >= 0 {
            (StreamDomain::Forward, step as u64 * d as u64)
        } else {
            (StreamDomain::ForwardPast, (-step - 1) as u64 * d as u64)
        };
        let mut s = NoiseStream::at_normal(seed, domain, path_index, pos);
        (0..d).map(|_| dt.sqrt() * s.normal()).collect()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of stored steps.
    pub fn n_steps(&self) -> usize {
        self.increments.len() / self.d
    }

    /// First stored step index (negative for two-sided paths).
    pub fn first_step(&self) -> i64 {
        self.first_step
    }

    /// One past the last stored step index.
    pub fn end_step(&self) -> i64 {
        self.first_step + self.n_steps() as i64
    }

    pub fn increment(&self, step: i64) -> Option<&[f64]> {
        if step < self.first_step || step >= self.end_step() {
            return None;
        }
        let row = (step - self.first_step) as usize;
        Some(&self.increments[row * self.d..(row + 1) * self.d])
    }

    /// Grid index of time `t`, or an alignment error if `t` is off-grid.
    pub fn step_of(&self, t: f64) -> Result<i64> {
        grid_index(t, self.dt)
    }

    /// Base-flow shift ϑ_s: step `i` of the result is step `i + s/dt` here.
    pub fn shifted(&self, s: f64) -> Result<BrownianPath> {
        let k = self.step_of(s)?;
        let first = self.first_step - k;
        if first > 0 || self.end_step() - k <= 0 {
            return Err(Error::Range(format!(
                "shift by {s} leaves no increments at time 0 (stored steps {}..{})",
                self.first_step,
                self.end_step()
            )));
        }
        Ok(BrownianPath { first_step: first, ..self.clone() })
    }

    /// W(b·dt) − W(a·dt) for step indices `a ≤ b`.
    pub fn displacement(&self, from_step: i64, to_step: i64) -> Result<Vec<f64>> {
        let mut w = vec![0.0; self.d];
        for i in from_step..to_step {
            let dw = self
                .increment(i)
                .ok_or_else(|| Error::Range(format!("step {i} not stored")))?;
            for (a, b) in w.iter_mut().zip(dw) {
                *a += b;
            }
        }
        Ok(w)
    }
}

pub(crate) fn grid_index(t: f64, dt: f64) -> Result<i64> {
    let r = t / dt;
    let k = r.round();
    if !r.is_finite() || (r - k).abs() > 1e-9 * k.abs().max(1.0) {
        return Err(Error::Alignment(format!("time {t} is not a multiple of dt = {dt}")));
    }
    Ok(k as i64)
}

/// States on an increasing time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Vec<Vec<f64>>) -> Result<Self> {
        if times.len() != states.len() {
            return Err(Error::Invalid("times and states differ in length".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Invalid("trajectory times must increase strictly".into()));
        }
        Ok(Trajectory { times, states })
    }

    pub fn terminal(&self) -> &[f64] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Long-format CSV `t,path,dim,value`; path numbers are positions in `paths`.
pub fn write_trajectories_csv<W: Write>(mut w: W, paths: &[Trajectory]) -> Result<()> {
    writeln!(w, "t,path,dim,value")?;
    for (p, traj) in paths.iter().enumerate() {
        for (t, x) in traj.times.iter().zip(&traj.states) {
            for (j, v) in x.iter().enumerate() {
                writeln!(w, "{t:?},{p},{j},{v:?}")?;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    /// Record every `stride`-th grid time (the final time is always kept).
    pub stride: usize,
}

impl EnsembleConfig {
    pub fn new(n_paths: usize, n_steps: usize, seed: u64) -> Self {
        EnsembleConfig { n_paths, n_steps, seed, stride: 1 }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride.max(1);
        self
    }
}

/// Ensemble mean and isotropic variance at recorded grid times.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleStats {
    pub times: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
    pub n_paths: usize,
}

impl EnsembleStats {
    pub(crate) fn from_moments(times: Vec<f64>, moments: &[Moments]) -> Self {
        EnsembleStats {
            times,
            means: moments.iter().map(|m| m.mean().to_vec()).collect(),
            variances: moments.iter().map(Moments::isotropic_variance).collect(),
            n_paths: moments.first().map_or(0, |m| m.count() as usize),
        }
    }

    pub fn d(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Standard error of each mean coordinate at record `i`.
    pub fn mean_standard_error(&self, i: usize) -> f64 {
        (self.variances[i] / self.n_paths as f64).sqrt()
    }

    pub fn variance_standard_error(&self, i: usize) -> f64 {
        variance_standard_error(self.variances[i], self.n_paths as u64, self.d())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_stats_csv(w, &self.times, &self.means, &self.variances)
    }
}

/// CSV `t,mean_0..mean_{d-1},variance`.
pub fn write_stats_csv<W: Write>(mut w: W, times: &[f64], means: &[Vec<f64>], variances: &[f64]) -> Result<()> {
    let d = means.first().map_or(0, Vec::len);
    let mut header = String::from("t");
    for j in 0..d {
        header.push_str(&format!(",mean_{j}"));
    }
    header.push_str(",variance");
    writeln!(w, "{header}")?;
    for ((t, m), v) in times.iter().zip(means).zip(variances) {
        let mut line = format!("{t:?}");
        for x in m {
            line.push_str(&format!(",{x:?}"));
        }
        line.push_str(&format!(",{v:?}"));
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Grid step indices kept for a given stride (always including the last).
pub(crate) fn recorded_steps(n_steps: usize, stride: usize) -> Vec<usize> {
    let mut steps: Vec<usize> = (0..=n_steps).step_by(stride.max(1)).collect();
    if *steps.last().unwrap() != n_steps {
        steps.push(n_steps);
    }
    steps
}

/// Simulate `n_paths` independent EM paths from `x0` and collect moments.
///
/// Path `p` is driven by the same increments as
/// `BrownianPath::generate(seed, p, dt, n_steps, d)`.
pub fn simulate_ensemble(process: &ForwardProcess, x0: &[f64], cfg: &EnsembleConfig) -> Result<EnsembleStats> {
    if cfg.n_steps == 0 || cfg.n_paths == 0 {
        return Err(Error::Invalid("n_steps and n_paths must be at least 1".into()));
    }
    if x0.len() != process.d() {
        return Err(Error::Invalid("x0 dimension mismatch".into()));
    }
    ensure_finite(x0, "x0")?;
    let d = process.d();
    let n = cfg.n_steps;
    let dt = process.t_end() / n as f64;
    let sd = dt.sqrt();
    let steps = recorded_steps(n, cfg.stride);
    let n_blocks = cfg.n_paths.div_ceil(BLOCK);
    let coef: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let t = process.t_end() * i as f64 / n as f64;
            (process.schedule.rate(t) * dt, process.params.tau * process.sigma_unchecked(t))
        })
        .collect();

    let blocks: Vec<Result<Vec<Moments>>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![Moments::new(d); steps.len()];
            let mut x = vec![0.0; d];
            for p in b * BLOCK..((b + 1) * BLOCK).min(cfg.n_paths) {
                let mut stream = NoiseStream::new(cfg.seed, StreamDomain::Forward, p as u64);
                x.copy_from_slice(x0);
                let mut r = 0;
                if steps[0] == 0 {
                    acc[0].push(&x);
                    r = 1;
                }
                for (i, &(theta_dt, g)) in coef.iter().enumerate() {
                    for (x, m) in x.iter_mut().zip(&process.params.mu) {
                        *x += theta_dt * (m - *x) + g * (sd * stream.normal());
                    }
                    if x.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Divergence {
                            step: i + 1,
                            detail: format!("path {p} became non-finite"),
                        });
                    }
                    if r < steps.len() && steps[r] == i + 1 {
                        acc[r].push(&x);
                        r += 1;
                    }
                }
            }
            Ok(acc)
        })
        .collect();

    let mut total = vec![Moments::new(d); steps.len()];
    for block in blocks {
        for (t, m) in total.iter_mut().zip(block?) {
            t.merge(&m);
        }
    }
    let times = steps.iter().map(|&i| process.t_end() * i as f64 / n as f64).collect();
    let stats = EnsembleStats::from_moments(times, &total);
    for (m, v) in stats.means.iter().zip(&stats.variances) {
        ensure_finite(m, "ensemble mean")?;
        ensure_finite(&[*v], "ensemble variance")?;
    }
    Ok(stats)
}
