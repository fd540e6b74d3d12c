//! Mean-reversion rate schedules θ_t, their integrals θ̄_t and the volatility
//! that accompanies them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Linear,
    Cosine,
    Log,
    Quadratic,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 5] = [
        ScheduleKind::Constant,
        ScheduleKind::Linear,
        ScheduleKind::Cosine,
        ScheduleKind::Log,
        ScheduleKind::Quadratic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Log => "log",
            ScheduleKind::Quadratic => "quadratic",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScheduleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown schedule kind '{s}'")))
    }
}

/// Time-dependent mean-reversion rate on [0, t_end].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub theta: f64,
    /// Sharpness of the log schedule; unused by the other kinds.
    pub k: f64,
    pub t_end: f64,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, theta: f64) -> Self {
        Schedule { kind, theta, k: 1.0, t_end: 1.0 }
    }

    pub fn constant(theta: f64) -> Self {
        Self::new(ScheduleKind::Constant, theta)
    }

    pub fn with_k(mut self, k: f64) -> Self {
        self.k = k;
        self
    }

    pub fn with_t_end(mut self, t_end: f64) -> Self {
        self.t_end = t_end;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta.is_finite() && self.theta > 0.0) {
            return Err(Error::Invalid(format!("theta must be positive, got {}", self.theta)));
        }
        if !(self.k.is_finite() && self.k > 0.0) {
            return Err(Error::Invalid(format!("k must be positive, got {}", self.k)));
        }
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return Err(Error::Invalid(format!("t_end must be positive, got {}", self.t_end)));
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<f64> {
        let slack = 1e-12 * self.t_end;
        if !t.is_finite() || t < -slack || t > self.t_end + slack {
            return Err(Error::Domain(format!(
                "t = {t} outside schedule domain [0, {}]",
                self.t_end
            )));
        }
        Ok(t.clamp(0.0, self.t_end))
    }

    /// θ_t.
    pub fn theta_at(&self, t: f64) -> Result<f64> {
        Ok(self.rate(self.check_time(t)?))
    }

    /// θ̄_t = ∫₀ᵗ θ_s ds.
    pub fn theta_bar(&self, t: f64) -> Result<f64> {
        Ok(self.integral(self.check_time(t)?))
    }

    /// θ̄_t − θ̄_s.
    pub fn theta_bar_between(&self, s: f64, t: f64) -> Result<f64> {
        Ok(self.theta_bar(t)? - self.theta_bar(s)?)
    }

    /// Unchecked rate; callers guarantee `t` is inside the domain.
    pub(crate) fn rate(&self, t: f64) -> f64 {
        let th = self.theta;
        match self.kind {
            ScheduleKind::Constant => th,
            ScheduleKind::Linear => th * t,
            ScheduleKind::Quadratic => th * t * t,
            ScheduleKind::Cosine => th * (1.0 - (th * t).cos()),
            ScheduleKind::Log => th * sigmoid(self.k * t),
        }
    }

    pub(crate) fn integral(&self, t: f64) -> f64 {
        let th = self.theta;
        match self.kind {
            ScheduleKind::Constant => th * t,
            ScheduleKind::Linear => th * t * t / 2.0,
            ScheduleKind::Quadratic => th * t * t * t / 3.0,
            ScheduleKind::Cosine => th * t - (th * t).sin(),
            ScheduleKind::Log => {
                let x = self.k * t;
                (th / self.k) * (softplus(x) - std::f64::consts::LN_2)
            }
        }
    }

    /// Largest θ_t over a uniform grid of `n` intervals (endpoints included).
    pub fn max_rate(&self, n: usize) -> f64 {
        (0..=n)
            .map(|i| self.rate(self.t_end * i as f64 / n as f64))
            .fold(0.0, f64::max)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Volatility tied to the rate so that σ_t²/(2θ_t) = λ².
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledVolatility {
    pub lambda: f64,
}

impl CoupledVolatility {
    pub fn sigma_at(&self, sched: &Schedule, t: f64) -> Result<f64> {
        Ok(self.lambda * (2.0 * sched.theta_at(t)?).sqrt())
    }
}

/// Volatility chosen independently of the rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoupledVolatility {
    Constant(f64),
    /// Piecewise-linear interpolation through `(times[i], values[i])`,
    /// held constant outside the knots.
    Table { times: Vec<f64>, values: Vec<f64> },
}

impl DecoupledVolatility {
    pub fn validate(&self) -> Result<()> {
        match self {
            DecoupledVolatility::Constant(s) => {
                if !(s.is_finite() && *s > 0.0) {
                    return Err(Error::Invalid(format!("sigma must be positive, got {s}")));
                }
            }
            DecoupledVolatility::Table { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return Err(Error::Invalid("sigma table needs matching, non-empty columns".into()));
                }
                if times.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::Invalid("sigma table times must increase strictly".into()));
                }
                if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(Error::Invalid("sigma table values must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn sigma_at(&self, sched: &Schedule, t: f64) -> Result<f64> {
        let t = sched.check_time(t)?;
        Ok(self.value(t))
    }

    pub(crate) fn value(&self, t: f64) -> f64 {
        match self {
            DecoupledVolatility::Constant(s) => *s,
            DecoupledVolatility::Table { times, values } => {
                let i = times.partition_point(|&k| k <= t);
                if i == 0 {
                    values[0]
                } else if i == times.len() {
                    values[times.len() - 1]
                } else {
                    let w = (t - times[i - 1]) / (times[i] - times[i - 1]);
                    values[i - 1] + w * (values[i] - values[i - 1])
                }
            }
        }
    }

    /// Interior knots where the volatility has a kink.
    pub(crate) fn knots(&self) -> &[f64] {
        match self {
            DecoupledVolatility::Constant(_) => &[],
            DecoupledVolatility::Table { times, .. } => times,
        }
    }
}

/// Which volatility family a process uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Volatility<'a> {
    Coupled(CoupledVolatility),
    Decoupled(&'a DecoupledVolatility),
}

/// σ_t for either volatility family.
pub fn sigma_at(v: Volatility<'_>, sched: &Schedule, t: f64) -> Result<f64> {
    match v {
        Volatility::Coupled(c) => c.sigma_at(sched, t),
        Volatility::Decoupled(d) => d.sigma_at(sched, t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn rate_examples() {
        assert_eq!(Schedule::constant(1.0).theta_at(0.5).unwrap(), 1.0);
        assert_eq!(Schedule::new(ScheduleKind::Linear, 2.0).theta_at(1.0).unwrap(), 2.0);
        let cos = Schedule::new(ScheduleKind::Cosine, 1.0).with_t_end(4.0);
        assert!((cos.theta_at(PI).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn integral_examples() {
        assert_eq!(Schedule::constant(1.0).theta_bar(1.0).unwrap(), 1.0);
        let cos = Schedule::new(ScheduleKind::Cosine, 1.0).with_t_end(4.0);
        assert!((cos.theta_bar(PI).unwrap() - PI).abs() < 1e-14);
        let log = Schedule::new(ScheduleKind::Log, 1.0).with_k(10.0);
        assert_eq!(log.theta_bar(0.0).unwrap(), 0.0);
    }

    #[test]
    fn outside_domain_is_rejected() {
        let s = Schedule::constant(1.0);
        assert!(matches!(s.theta_at(1.5), Err(Error::Domain(_))));
        assert!(matches!(s.theta_bar(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn sigma_examples() {
        let c = CoupledVolatility { lambda: 1.0 };
        assert!((c.sigma_at(&Schedule::constant(2.0), 0.3).unwrap() - 2.0).abs() < 1e-15);
        let c = CoupledVolatility { lambda: 10.0 };
        assert!((c.sigma_at(&Schedule::constant(0.5), 0.9).unwrap() - 10.0).abs() < 1e-14);
        let d = DecoupledVolatility::Constant(3.0);
        assert_eq!(d.sigma_at(&Schedule::constant(1.0), 0.2).unwrap(), 3.0);
    }

    #[test]
    fn table_interpolates() {
        let d = DecoupledVolatility::Table { times: vec![0.0, 1.0], values: vec![1.0, 3.0] };
        d.validate().unwrap();
        assert_eq!(d.value(0.5), 2.0);
        assert_eq!(d.value(2.0), 3.0);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ScheduleKind::ALL {
            assert_eq!(k.name().parse::<ScheduleKind>().unwrap(), k);
        }
        assert!("sigmoid".parse::<ScheduleKind>().is_err());
    }
}
