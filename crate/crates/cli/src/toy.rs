//! Desk-scale inverse problem: short piecewise-smooth 1d signals observed
//! through a linear operator with additive Gaussian noise.

use mrsde::score_model::{DegradationSpec, TrainingPair, TrainingSource};
use mrsde::{NoiseStream, Result, StreamDomain};

#[derive(Clone, Debug, PartialEq)]
pub struct ToyInverseProblem {
    pub d: usize,
    pub degradation: DegradationSpec,
    pub train_seed: u64,
    pub test_seed: u64,
}

/// One held-out case.
#[derive(Clone, Debug, PartialEq)]
pub struct TestCase {
    pub clean: Vec<f64>,
    /// Lifted measurement Aᵀy.
    pub degraded: Vec<f64>,
}

impl ToyInverseProblem {
    pub fn new(d: usize, degradation: DegradationSpec, train_seed: u64, test_seed: u64) -> Result<Self> {
        if degradation.d() != d {
            return Err(mrsde::Error::Invalid(format!(
                "operator acts on {} coordinates, signals have {d}",
                degradation.d()
            )));
        }
        Ok(ToyInverseProblem { d, degradation, train_seed, test_seed })
    }

    /// Two Gaussian bumps plus a step on a uniform grid over [0, 1].
    pub fn signal(&self, stream: &mut NoiseStream) -> Vec<f64> {
        let grid: Vec<f64> = (0..self.d).map(|i| i as f64 / (self.d - 1).max(1) as f64).collect();
        let mut x = vec![0.0; self.d];
        for _ in 0..2 {
            let c = stream.uniform();
            let w = 0.1 + 0.2 * stream.uniform();
            let h = 2.0 * stream.uniform() - 1.0;
            for (xi, g) in x.iter_mut().zip(&grid) {
                *xi += h * (-(g - c).powi(2) / (2.0 * w * w)).exp();
            }
        }
        let at = 0.2 + 0.6 * stream.uniform();
        let jump = stream.uniform() - 0.5;
        for (xi, g) in x.iter_mut().zip(&grid) {
            if *g > at {
                *xi += jump;
            }
        }
        x
    }

    /// Held-out case `i`, a pure function of `(test_seed, i)`.
    pub fn test_case(&self, i: usize) -> TestCase {
        let clean = self.signal(&mut NoiseStream::new(self.test_seed, StreamDomain::Data, i as u64));
        let mut noise = NoiseStream::new(self.test_seed, StreamDomain::Measurement, i as u64);
        let degraded = self.degradation.lift(&self.degradation.measure(&clean, &mut noise));
        TestCase { clean, degraded }
    }
}

impl TrainingSource for ToyInverseProblem {
    fn dim(&self) -> usize {
        self.d
    }

    fn draw(&self, stream: &mut NoiseStream) -> TrainingPair {
        let x0 = self.signal(stream);
        let y = self.degradation.lift(&self.degradation.measure(&x0, stream));
        TrainingPair { x0, y: Some(y) }
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// 10·log₁₀(max²/mse) with max the largest magnitude of the clean signal.
pub fn psnr(clean: &[f64], mse: f64) -> f64 {
    let peak = clean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    10.0 * (peak * peak / mse).log10()
}
