//! Score network S(x, y, t) built around an MLP.
//!
//! The MLP predicts a correction to a skip connection on the rescaled
//! deviation `u = (x − μ)/a_t`; the denoised estimate
//! `D = μ + c_skip·u + c_out·F(c_in·u, y, time features)` is turned into a
//! score through the Gaussian kernel: `S = −(x − μ − a_t(D − μ))/v_t`.
//! With `σ̃² = v_t/a_t²` and data scale `s`:
//! `c_skip = s²/(σ̃²+s²)`, `c_out = σ̃s/√(σ̃²+s²)`, `c_in = 1/√(σ̃²+s²)`.

use std::f64::consts::TAU;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::forward_sde::Kernel;
use crate::score_model::mlp::{Activation, Cache, Layer, Mlp};

/// Scalar time features: t, sin 2πt, cos 2πt.
pub const TIME_FEATURES: usize = 3;

/// One score evaluation request.
#[derive(Clone, Debug, PartialEq)]
pub struct NetQuery<'a> {
    pub x: &'a [f64],
    /// Lifted measurement; required by conditioned nets.
    pub y: Option<&'a [f64]>,
    pub t: f64,
    pub kernel: Kernel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet {
    mlp: Mlp,
    d: usize,
    conditioned: bool,
    data_scale: f64,
    /// Drift target used when the net is not conditioned on y.
    anchor: Vec<f64>,
    seed: u64,
}

pub(crate) struct BatchForward {
    pub scores: Array2<f64>,
    pub cache: Cache,
    /// ∂S/∂F per sample (a scalar multiple of the identity).
    pub jac: Vec<f64>,
}

#[derive(Clone, Copy)]
struct Precond {
    c_skip: f64,
    c_out: f64,
    c_in: f64,
}

fn precond(kernel: Kernel, s: f64) -> Result<Precond> {
    if !(kernel.variance > 0.0 && kernel.decay > 0.0) {
        return Err(Error::Singular(format!(
            "score net needs a non-degenerate kernel (decay {}, variance {})",
            kernel.decay, kernel.variance
        )));
    }
    let sig2 = kernel.variance / (kernel.decay * kernel.decay);
    let norm = (sig2 + s * s).sqrt();
    Ok(Precond { c_skip: s * s / (sig2 + s * s), c_out: sig2.sqrt() * s / norm, c_in: 1.0 / norm })
}

impl ScoreNet {
    pub fn new(
        d: usize,
        hidden: &[usize],
        activation: Activation,
        conditioned: bool,
        anchor: Vec<f64>,
        data_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if anchor.len() != d {
            return Err(Error::Invalid("anchor must have length d".into()));
        }
        let mut widths = vec![Self::input_width(d)];
        widths.extend_from_slice(hidden);
        widths.push(d);
        Self::from_mlp(Mlp::new(&widths, activation, seed)?, conditioned, anchor, data_scale, seed)
    }

    pub fn from_mlp(mlp: Mlp, conditioned: bool, anchor: Vec<f64>, data_scale: f64, seed: u64) -> Result<Self> {
        let d = mlp.output_width();
        if mlp.input_width() != Self::input_width(d) {
            return Err(Error::Invalid(format!(
                "MLP input width {} should be 2d + {TIME_FEATURES} = {}",
                mlp.input_width(),
                Self::input_width(d)
            )));
        }
        if anchor.len() != d {
            return Err(Error::Invalid("anchor must have length d".into()));
        }
        if !(data_scale.is_finite() && data_scale > 0.0) {
            return Err(Error::Invalid("data scale must be positive".into()));
        }
        Ok(ScoreNet { mlp, d, conditioned, data_scale, anchor, seed })
    }

    pub fn input_width(d: usize) -> usize {
        2 * d + TIME_FEATURES
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn conditioned(&self) -> bool {
        self.conditioned
    }

    pub fn data_scale(&self) -> f64 {
        self.data_scale
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn drift_target<'a>(&'a self, q: &NetQuery<'a>) -> Result<&'a [f64]> {
        if self.conditioned {
            let y = q.y.ok_or_else(|| Error::Invalid("conditioned net needs y".into()))?;
            if y.len() != self.d {
                return Err(Error::Invalid("y must be lifted to length d".into()));
            }
            Ok(y)
        } else {
            Ok(&self.anchor)
        }
    }

    pub(crate) fn forward_batch(&self, queries: &[NetQuery<'_>]) -> Result<BatchForward> {
        let d = self.d;
        let n = queries.len();
        let mut input = Array2::zeros((n, Self::input_width(d)));
        let mut pre = Vec::with_capacity(n);
        for (i, q) in queries.iter().enumerate() {
            if q.x.len() != d {
                return Err(Error::Invalid("state must have length d".into()));
            }
            let mu = self.drift_target(q)?;
            let c = precond(q.kernel, self.data_scale)?;
            let mut row = input.row_mut(i);
            for j in 0..d {
                row[j] = c.c_in * (q.x[j] - mu[j]) / q.kernel.decay;
                if self.conditioned {
                    row[d + j] = mu[j];
                }
            }
            row[2 * d] = q.t;
            row[2 * d + 1] = (TAU * q.t).sin();
            row[2 * d + 2] = (TAU * q.t).cos();
            pre.push(c);
        }
        let (f, cache) = self.mlp.forward(input.view());
        let mut scores = Array2::zeros((n, d));
        let mut jac = Vec::with_capacity(n);
        for (i, q) in queries.iter().enumerate() {
            let mu = self.drift_target(q)?;
            let Kernel { decay: a, variance: v } = q.kernel;
            let c = pre[i];
            for j in 0..d {
                let u = (q.x[j] - mu[j]) / a;
                let denoised = mu[j] + c.c_skip * u + c.c_out * f[[i, j]];
                scores[[i, j]] = -(q.x[j] - mu[j] - a * (denoised - mu[j])) / v;
            }
            jac.push(a * c.c_out / v);
        }
        Ok(BatchForward { scores, cache, jac })
    }

    pub(crate) fn backward(&self, fwd: &BatchForward, grad_scores: &Array2<f64>) -> Vec<Layer> {
        let mut g = grad_scores.clone();
        for (mut row, &j) in g.rows_mut().into_iter().zip(&fwd.jac) {
            row *= j;
        }
        self.mlp.backward(&fwd.cache, &g)
    }

    /// Scores for a batch of queries (rows of the result).
    pub fn scores(&self, queries: &[NetQuery<'_>]) -> Result<Array2<f64>> {
        Ok(self.forward_batch(queries)?.scores)
    }

    pub fn score(&self, x: &[f64], y: Option<&[f64]>, t: f64, kernel: Kernel) -> Result<Vec<f64>> {
        Ok(self.scores(&[NetQuery { x, y, t, kernel }])?.row(0).to_vec())
    }

    /// Clean-signal estimate D implied by the score.
    pub fn denoise(&self, x: &[f64], y: Option<&[f64]>, t: f64, kernel: Kernel) -> Result<Vec<f64>> {
        let q = NetQuery { x, y, t, kernel };
        let s = self.score(x, y, t, kernel)?;
        let mu = self.drift_target(&q)?;
        Ok((0..self.d)
            .map(|j| mu[j] + (x[j] - mu[j] + kernel.variance * s[j]) / kernel.decay)
            .collect())
    }
}
