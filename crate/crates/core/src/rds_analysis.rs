//! The discretized forward SDE viewed as a random dynamical system: flow
//! maps driven by a fixed noise realization, base-flow shifts, the cocycle
//! identity, pullback attractors and the Lyapunov operator LV.
//!
//! Coefficients are extended to all of ℝ periodically with period `t_end`,
//! which leaves them untouched on [0, t_end) and gives pullback runs from
//! negative start times a well-defined two-sided system.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::forward_sde::{grid_index, BrownianPath, ForwardProcess, GaussianMarginal, BLOCK};
use crate::stats::Moments;

/// Solution operator φ(t, s; ω) of a forward process.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap {
    pub process: ForwardProcess,
}

impl FlowMap {
    pub fn new(process: ForwardProcess) -> Self {
        FlowMap { process }
    }

    fn coefficient_time(&self, u: f64) -> f64 {
        u.rem_euclid(self.process.t_end())
    }

    /// φ(t, s; ω)x: Euler–Maruyama from `s` to `t` on ω's grid, using ω's
    /// increments for the steps in [s, t).
    pub fn flow(&self, t: f64, s: f64, omega: &BrownianPath, x: &[f64]) -> Result<Vec<f64>> {
        if t < s {
            return Err(Error::Domain(format!("flow needs s <= t, got s = {s}, t = {t}")));
        }
        if x.len() != self.process.d() || omega.d() != self.process.d() {
            return Err(Error::Invalid("dimension mismatch between state, path and process".into()));
        }
        ensure_finite(x, "state")?;
        let dt = omega.dt();
        let (i_s, i_t) = (grid_index(s, dt)?, grid_index(t, dt)?);
        if i_s < omega.first_step() || i_t > omega.end_step() {
            return Err(Error::Alignment(format!(
                "interval [{s}, {t}] is not covered by the path (steps {}..{})",
                omega.first_step(),
                omega.end_step()
            )));
        }
        let mut out = x.to_vec();
        for i in i_s..i_t {
            let dw = omega.increment(i).expect("range checked above");
            self.process.advance(&mut out, self.coefficient_time(i as f64 * dt), dt, dw);
        }
        ensure_finite(&out, "flow state")?;
        Ok(out)
    }

    /// ∫ θ over a window of length `len` ending at time 0.
    pub fn window_theta_bar(&self, len: f64) -> f64 {
        let period = self.process.t_end();
        let full = self.process.schedule.integral(period);
        let cycles = (len / period).floor();
        let rest = len - cycles * period;
        cycles * full + full - self.process.schedule.integral(period - rest)
    }
}

/// ϑ_s ω.
pub fn base_shift(omega: &BrownianPath, s: f64) -> Result<BrownianPath> {
    omega.shifted(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Holds,
    Violated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDeviation {
    pub s: f64,
    pub t: f64,
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocycleReport {
    pub schedule: String,
    pub tol: f64,
    pub pairs: Vec<PairDeviation>,
    pub max_deviation: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocycleConfig {
    pub n_paths: usize,
    /// Grid intervals over [0, t_end]; paths carry twice that many steps.
    pub n_steps: usize,
    pub seed: u64,
    pub tol: f64,
}

/// Compare φ(t, s; ω)x with φ(t − s, 0; ϑ_s ω)x for every pair and path,
/// replaying identical increments on both sides.
pub fn check_cocycle(map: &FlowMap, pairs: &[(f64, f64)], x: &[f64], cfg: &CocycleConfig) -> Result<CocycleReport> {
    if cfg.n_paths == 0 || cfg.n_steps == 0 {
        return Err(Error::Invalid("n_paths and n_steps must be at least 1".into()));
    }
    for &(s, t) in pairs {
        if !(s < t) || s < 0.0 || t > map.process.t_end() {
            return Err(Error::Domain(format!("pair (s = {s}, t = {t}) must satisfy 0 <= s < t <= t_end")));
        }
    }
    let d = map.process.d();
    let dt = map.process.t_end() / cfg.n_steps as f64;
    let per_path: Vec<Result<Vec<f64>>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let omega = BrownianPath::generate(cfg.seed, p as u64, dt, 2 * cfg.n_steps, d)?;
            pairs
                .iter()
                .map(|&(s, t)| {
                    let lhs = map.flow(t, s, &omega, x)?;
                    let shifted = base_shift(&omega, s)?;
                    let rhs = map.flow(t - s, 0.0, &shifted, x)?;
                    Ok(euclidean(&lhs, &rhs))
                })
                .collect()
        })
        .collect();
    let mut worst = vec![0.0f64; pairs.len()];
    for devs in per_path {
        for (w, v) in worst.iter_mut().zip(devs?) {
            *w = w.max(v);
        }
    }
    let max_deviation = worst.iter().copied().fold(0.0, f64::max);
    Ok(CocycleReport {
        schedule: map.process.schedule.kind.name().to_string(),
        tol: cfg.tol,
        pairs: pairs
            .iter()
            .zip(&worst)
            .map(|(&(s, t), &deviation)| PairDeviation { s, t, deviation })
            .collect(),
        max_deviation,
        verdict: if max_deviation <= cfg.tol { Verdict::Holds } else { Verdict::Violated },
    })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PullbackConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PullbackPoint {
    pub s: f64,
    pub estimate: GaussianMarginal,
    /// Distance of (mean, std) to the stationary pair.
    pub distance: f64,
    pub distance_se: f64,
    pub window_theta_bar: f64,
    pub insufficient_window: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PullbackEstimate {
    pub points: Vec<PullbackPoint>,
    /// Estimate at the earliest start time.
    pub attractor: GaussianMarginal,
    pub insufficient_window: bool,
}

/// Empirical law of φ(0, s; ω)x over `x_set` and independent paths, for
/// each start time in `s_values` (decreasing, non-positive).
pub fn pullback_attractor_estimate(
    map: &FlowMap,
    x_set: &[Vec<f64>],
    s_values: &[f64],
    cfg: &PullbackConfig,
) -> Result<PullbackEstimate> {
    if x_set.is_empty() || s_values.is_empty() || cfg.n_paths < 2 {
        return Err(Error::Invalid("need a non-empty x_set, s_values and at least 2 paths".into()));
    }
    if s_values.iter().any(|&s| s > 0.0) || s_values.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Invalid("s_values must be non-positive and strictly decreasing".into()));
    }
    let d = map.process.d();
    let s_min = *s_values.last().unwrap();
    let n_past = (-grid_index(s_min, cfg.dt)?) as usize;
    let n_blocks = cfg.n_paths.div_ceil(BLOCK);
    let blocks: Vec<Result<Vec<Moments>>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![Moments::new(d); s_values.len()];
            for p in b * BLOCK..((b + 1) * BLOCK).min(cfg.n_paths) {
                let omega = BrownianPath::two_sided(cfg.seed, p as u64, cfg.dt, n_past, 0, d)?;
                for (k, &s) in s_values.iter().enumerate() {
                    for x in x_set {
                        acc[k].push(&map.flow(0.0, s, &omega, x)?);
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![Moments::new(d); s_values.len()];
    for block in blocks {
        for (t, m) in total.iter_mut().zip(block?) {
            t.merge(&m);
        }
    }

    let target_mean = &map.process.params.mu;
    let target_sd = map.process.reference_variance(map.process.t_end())?.sqrt();
    let n = cfg.n_paths as f64;
    let points: Vec<PullbackPoint> = s_values
        .iter()
        .zip(&total)
        .map(|(&s, m)| {
            let variance = m.isotropic_variance();
            let sd = variance.sqrt();
            let dm: f64 = m.mean().iter().zip(target_mean).map(|(a, b)| (a - b) * (a - b)).sum();
            let window = map.window_theta_bar(-s);
            PullbackPoint {
                s,
                estimate: GaussianMarginal { mean: m.mean().to_vec(), variance },
                distance: (dm + (sd - target_sd).powi(2)).sqrt(),
                distance_se: (d as f64 * variance / n + variance / (2.0 * n)).sqrt(),
                window_theta_bar: window,
                insufficient_window: window < 10.0,
            }
        })
        .collect();
    let last = points.last().unwrap();
    Ok(PullbackEstimate {
        attractor: last.estimate.clone(),
        insufficient_window: last.insufficient_window,
        points,
    })
}

/// Quadratic Lyapunov function V(z) = zᵀQz scanned over an annulus.
#[derive(Clone, Debug, PartialEq)]
pub struct LyapunovSpec {
    q: DMatrix<f64>,
    pub radius: f64,
    /// Grid points per axis over [−radius, radius].
    pub resolution: usize,
}

impl LyapunovSpec {
    pub fn new(q: DMatrix<f64>, radius: f64, resolution: usize) -> Result<Self> {
        if !q.is_square() || q.nrows() == 0 {
            return Err(Error::Invalid("Q must be a non-empty square matrix".into()));
        }
        if (&q - q.transpose()).abs().max() > 1e-12 * q.abs().max().max(1.0) {
            return Err(Error::Invalid("Q must be symmetric".into()));
        }
        if q.clone().cholesky().is_none() {
            return Err(Error::Invalid("Q must be positive definite".into()));
        }
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::Invalid(format!("radius must be positive, got {radius}")));
        }
        if resolution < 2 {
            return Err(Error::Invalid("resolution must be at least 2".into()));
        }
        Ok(LyapunovSpec { q, radius, resolution })
    }

    pub fn identity(d: usize, radius: f64, resolution: usize) -> Result<Self> {
        Self::new(DMatrix::identity(d, d), radius, resolution)
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn d(&self) -> usize {
        self.q.nrows()
    }

    /// Excluded inner radius ε = radius/100.
    pub fn inner_radius(&self) -> f64 {
        self.radius / 100.0
    }
}

/// LV(z) = zᵀQb + bᵀQz + σᵀQσ at deviation state `z` and time `t`.
pub fn lyapunov_lv<B, S>(b: B, sigma: S, q: &DMatrix<f64>, z: &[f64], t: f64) -> f64
where
    B: Fn(f64, &[f64]) -> Vec<f64>,
    S: Fn(f64, &[f64]) -> Vec<f64>,
{
    let zv = nalgebra::DVector::from_column_slice(z);
    let bv = nalgebra::DVector::from_vec(b(t, z));
    let sv = nalgebra::DVector::from_vec(sigma(t, z));
    zv.dot(&(q * &bv)) + bv.dot(&(q * &zv)) + sv.dot(&(q * &sv))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovVerdict {
    pub holds: bool,
    pub worst_point: Vec<f64>,
    pub worst_value: f64,
    pub points_checked: usize,
}

/// Grid-scan LV over {ε ≤ |z| ≤ radius} at time `t`.
pub fn check_negative_definite<B, S>(spec: &LyapunovSpec, b: B, sigma: S, t: f64) -> Result<LyapunovVerdict>
where
    B: Fn(f64, &[f64]) -> Vec<f64> + Sync,
    S: Fn(f64, &[f64]) -> Vec<f64> + Sync,
{
    let d = spec.d();
    let n = spec.resolution;
    let total = (n as f64).powi(d as i32);
    if total > 5e7 {
        return Err(Error::Invalid(format!("grid of {total} points is too large")));
    }
    let total = total as usize;
    let eps = spec.inner_radius();
    let axis: Vec<f64> = (0..n)
        .map(|i| -spec.radius + 2.0 * spec.radius * i as f64 / (n - 1) as f64)
        .collect();
    let best = (0..total)
        .into_par_iter()
        .filter_map(|mut idx| {
            let mut z = vec![0.0; d];
            for v in z.iter_mut() {
                *v = axis[idx % n];
                idx /= n;
            }
            let r = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            (r >= eps && r <= spec.radius).then(|| (lyapunov_lv(&b, &sigma, spec.q(), &z, t), z))
        })
        .map(|(v, z)| (v, z, 1usize))
        .reduce_with(|a, b| {
            let count = a.2 + b.2;
            // Ties resolve to the lexicographically smaller point so the
            // reported argmax is independent of the reduction tree.
            let keep_a = a.0 > b.0 || (a.0 == b.0 && a.1 <= b.1);
            if keep_a { (a.0, a.1, count) } else { (b.0, b.1, count) }
        });
    let (worst_value, worst_point, points_checked) =
        best.ok_or_else(|| Error::Invalid("annulus contains no grid points".into()))?;
    Ok(LyapunovVerdict { holds: worst_value < 0.0, worst_point, worst_value, points_checked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_sde::ProcessParams;
    use crate::schedules::{Schedule, ScheduleKind};

    fn map(kind: ScheduleKind) -> FlowMap {
        FlowMap::new(
            ForwardProcess::coupled(ProcessParams::scalar(0.5, 1.0, 1.0).unwrap(), Schedule::new(kind, 1.0))
                .unwrap(),
        )
    }

    #[test]
    fn flow_identity_and_order() {
        let m = map(ScheduleKind::Cosine);
        let omega = BrownianPath::generate(1, 0, 0.01, 200, 1).unwrap();
        assert_eq!(m.flow(0.4, 0.4, &omega, &[3.0]).unwrap(), vec![3.0]);
        assert!(matches!(m.flow(0.2, 0.4, &omega, &[3.0]), Err(Error::Domain(_))));
        assert!(matches!(m.flow(0.405, 0.0, &omega, &[3.0]), Err(Error::Alignment(_))));
        assert!(matches!(m.flow(2.5, 0.0, &omega, &[3.0]), Err(Error::Alignment(_))));
    }

    #[test]
    fn cocycle_examples() {
        let cfg = CocycleConfig { n_paths: 8, n_steps: 100, seed: 3, tol: 1e-9 };
        let pairs = [(0.1, 0.5), (0.3, 0.8)];
        let r = check_cocycle(&map(ScheduleKind::Constant), &pairs, &[2.0], &cfg).unwrap();
        assert_eq!(r.verdict, Verdict::Holds);
        assert!(r.max_deviation <= 1e-12);
        let r = check_cocycle(&map(ScheduleKind::Cosine), &pairs, &[2.0], &cfg).unwrap();
        assert_eq!(r.verdict, Verdict::Violated);
        let r = check_cocycle(&map(ScheduleKind::Linear), &[(0.3, 0.8)], &[2.0], &cfg).unwrap();
        assert_eq!(r.verdict, Verdict::Violated);
        assert_eq!(r.pairs.len(), 1);
    }

    #[test]
    fn cocycle_report_json_shape() {
        let cfg = CocycleConfig { n_paths: 2, n_steps: 10, seed: 0, tol: 1e-9 };
        let r = check_cocycle(&map(ScheduleKind::Constant), &[(0.2, 0.6)], &[1.0], &cfg).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["schedule"], "constant");
        assert_eq!(v["verdict"], "holds");
        assert_eq!(v["pairs"][0]["s"], 0.2);
        assert!(v["max_deviation"].is_number());
        assert!(v["tol"].is_number());
    }

    #[test]
    fn window_integral_periodic() {
        let m = map(ScheduleKind::Linear);
        // One full period of θt/2 plus half of the next (taken from its end).
        let w = m.window_theta_bar(1.5);
        assert!((w - (0.5 + (0.5 - 0.125))).abs() < 1e-14);
        assert!((map(ScheduleKind::Constant).window_theta_bar(12.0) - 12.0).abs() < 1e-12);
    }

    #[test]
    fn lv_examples() {
        let q = DMatrix::identity(2, 2);
        let drift = |_: f64, z: &[f64]| z.iter().map(|v| -v).collect::<Vec<_>>();
        let none = |_: f64, z: &[f64]| vec![0.0; z.len()];
        assert_eq!(lyapunov_lv(drift, none, &q, &[1.0, 2.0], 0.0), -10.0);
        assert_eq!(lyapunov_lv(drift, none, &q, &[0.0, 0.0], 0.0), 0.0);
        let c = 0.7;
        let noise = move |_: f64, z: &[f64]| vec![c; z.len()];
        let lv = lyapunov_lv(drift, noise, &q, &[1.0, 2.0], 0.0);
        assert!((lv - (-2.0 * 5.0 + c * c * 2.0)).abs() < 1e-14);
    }

    #[test]
    fn negative_definite_examples() {
        let spec = LyapunovSpec::identity(2, 1.0, 21).unwrap();
        let none = |_: f64, z: &[f64]| vec![0.0; z.len()];
        let attract = |_: f64, z: &[f64]| z.iter().map(|v| -v).collect::<Vec<_>>();
        let repel = |_: f64, z: &[f64]| z.iter().map(|v| 0.5 * v).collect::<Vec<_>>();
        assert!(check_negative_definite(&spec, attract, none, 0.0).unwrap().holds);
        let v = check_negative_definite(&spec, repel, none, 0.0).unwrap();
        assert!(!v.holds);
        assert!(v.worst_value > 0.0);
    }

    #[test]
    fn spec_rejects_bad_q() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(LyapunovSpec::new(asym, 1.0, 5).is_err());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(LyapunovSpec::new(indefinite, 1.0, 5).is_err());
    }
}
