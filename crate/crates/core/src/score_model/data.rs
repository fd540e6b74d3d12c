use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::rng::NoiseStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    PointMass,
    Gaussian,
    GaussianMixture,
}

/// One isotropic Gaussian component `N(mean, std²·I)` with mixing weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Linear measurement `y = A·x + noise_sigma·n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    /// Rows of A (n rows of length d).
    pub a: Vec<Vec<f64>>,
    pub noise_sigma: f64,
}

impl DegradationSpec {
    pub fn new(a: Vec<Vec<f64>>, noise_sigma: f64) -> Result<Self> {
        let spec = DegradationSpec { a, noise_sigma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn identity(d: usize, noise_sigma: f64) -> Result<Self> {
        let a = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::new(a, noise_sigma)
    }

    /// Keep every `factor`-th coordinate, starting at 0.
    pub fn subsample(d: usize, factor: usize, noise_sigma: f64) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Invalid("subsampling factor must be positive".into()));
        }
        let a = (0..d)
            .step_by(factor)
            .map(|k| (0..d).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::new(a, noise_sigma)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.a.first().map_or(0, Vec::len);
        if self.a.is_empty() || d == 0 || self.a.iter().any(|r| r.len() != d) {
            return Err(Error::Invalid("A must be a non-empty rectangular matrix".into()));
        }
        for row in &self.a {
            ensure_finite(row, "A")?;
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Invalid("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn d(&self) -> usize {
        self.a[0].len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.a.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    /// `A·x + noise_sigma·n` with `n` drawn from `stream`.
    pub fn measure(&self, x: &[f64], stream: &mut NoiseStream) -> Vec<f64> {
        let mut y = self.apply(x);
        for v in y.iter_mut() {
            *v += self.noise_sigma * stream.normal();
        }
        y
    }

    /// Adjoint embedding `Aᵀ·y` back into d dimensions.
    pub fn lift(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d()];
        for (row, yi) in self.a.iter().zip(y) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yi;
            }
        }
        out
    }
}

/// Clean-data law: a point mass, a Gaussian or a Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub kind: DataKind,
    pub components: Vec<Component>,
    pub degradation: Option<DegradationSpec>,
}

impl DataSpec {
    pub fn point_mass(x0: Vec<f64>) -> Result<Self> {
        Self::new(DataKind::PointMass, vec![Component { weight: 1.0, mean: x0, std: 0.0 }])
    }

    pub fn gaussian(mean: Vec<f64>, std: f64) -> Result<Self> {
        Self::new(DataKind::Gaussian, vec![Component { weight: 1.0, mean, std }])
    }

    pub fn mixture(components: Vec<Component>) -> Result<Self> {
        Self::new(DataKind::GaussianMixture, components)
    }

    pub fn new(kind: DataKind, components: Vec<Component>) -> Result<Self> {
        let spec = DataSpec { kind, components, degradation: None };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_degradation(mut self, degradation: DegradationSpec) -> Result<Self> {
        degradation.validate()?;
        if degradation.d() != self.dim() {
            return Err(Error::Invalid("degradation width differs from data dimension".into()));
        }
        self.degradation = Some(degradation);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.components.first() else {
            return Err(Error::Invalid("data needs at least one component".into()));
        };
        let d = first.mean.len();
        if d == 0 {
            return Err(Error::Invalid("component means must be non-empty".into()));
        }
        let mut total = 0.0;
        for c in &self.components {
            if c.mean.len() != d {
                return Err(Error::Invalid("component means differ in dimension".into()));
            }
            ensure_finite(&c.mean, "component mean")?;
            if !(c.weight.is_finite() && c.weight > 0.0) {
                return Err(Error::Invalid(format!("weights must be positive, got {}", c.weight)));
            }
            if !(c.std.is_finite() && c.std >= 0.0) {
                return Err(Error::Invalid(format!("stds must be non-negative, got {}", c.std)));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("weights sum to {total}, not 1")));
        }
        match self.kind {
            DataKind::PointMass if self.components.len() != 1 || first.std != 0.0 => {
                Err(Error::Invalid("a point mass has one component with zero std".into()))
            }
            DataKind::Gaussian if self.components.len() != 1 => {
                Err(Error::Invalid("a Gaussian has exactly one component".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn sample(&self, stream: &mut NoiseStream) -> Vec<f64> {
        let c = if self.components.len() == 1 {
            &self.components[0]
        } else {
            let u = stream.uniform();
            let mut acc = 0.0;
            self.components
                .iter()
                .find(|c| {
                    acc += c.weight;
                    u < acc
                })
                .unwrap_or_else(|| self.components.last().unwrap())
        };
        c.mean.iter().map(|m| m + c.std * stream.normal()).collect()
    }

    /// Mean vector of the law.
    pub fn law_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for c in &self.components {
            for (a, b) in m.iter_mut().zip(&c.mean) {
                *a += c.weight * b;
            }
        }
        m
    }

    /// Coordinate-averaged variance of the law.
    pub fn law_variance(&self) -> f64 {
        let mean = self.law_mean();
        let d = self.dim();
        let mut total = 0.0;
        for j in 0..d {
            let second: f64 = self
                .components
                .iter()
                .map(|c| c.weight * (c.std * c.std + c.mean[j] * c.mean[j]))
                .sum();
            total += second - mean[j] * mean[j];
        }
        total / d as f64
    }
}

/// A clean sample with its lifted measurement, when there is one.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub x0: Vec<f64>,
    pub y: Option<Vec<f64>>,
}

/// Anything that can generate training pairs.
pub trait TrainingSource: Sync {
    fn dim(&self) -> usize;
    fn draw(&self, stream: &mut NoiseStream) -> TrainingPair;
}

impl TrainingSource for DataSpec {
    fn dim(&self) -> usize {
        DataSpec::dim(self)
    }

    fn draw(&self, stream: &mut NoiseStream) -> TrainingPair {
        let x0 = self.sample(stream);
        let y = self.degradation.as_ref().map(|deg| deg.lift(&deg.measure(&x0, stream)));
        TrainingPair { x0, y }
    }
}
