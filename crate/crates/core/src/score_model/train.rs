use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::forward_sde::{sample_marginal, ForwardProcess};
use crate::rng::{NoiseStream, StreamDomain};
use crate::score_model::data::TrainingSource;
use crate::score_model::mlp::{flatten, Layer};
use crate::score_model::net::{NetQuery, ScoreNet};

/// Weight applied to the squared score error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossWeightMode {
    /// |w| = 1/τ².
    PaperMagnitude,
    /// w = 1.
    Unit,
    /// w = v_t/τ², equalizing the error scale across times.
    Variance,
}

impl LossWeightMode {
    pub fn weight(self, tau: f64, variance: f64) -> f64 {
        match self {
            LossWeightMode::PaperMagnitude => 1.0 / (tau * tau),
            LossWeightMode::Unit => 1.0,
            LossWeightMode::Variance => variance / (tau * tau),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper-magnitude" => Ok(LossWeightMode::PaperMagnitude),
            "unit" => Ok(LossWeightMode::Unit),
            "variance" => Ok(LossWeightMode::Variance),
            _ => Err(Error::Invalid(format!("unknown loss weight mode '{s}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossWeightMode::PaperMagnitude => "paper-magnitude",
            LossWeightMode::Unit => "unit",
            LossWeightMode::Variance => "variance",
        }
    }
}

/// One denoising-score-matching example.
#[derive(Clone, Debug, PartialEq)]
pub struct DsmSample {
    pub x0: Vec<f64>,
    /// Lifted measurement, which is also the drift target μ for this sample.
    pub y: Option<Vec<f64>>,
    pub t: f64,
    pub x_t: Vec<f64>,
}

/// Weighted mean squared error between the net's score and the kernel
/// score, averaged over batch and coordinates, with exact gradients.
pub fn dsm_loss(
    net: &ScoreNet,
    batch: &[DsmSample],
    process: &ForwardProcess,
    mode: LossWeightMode,
) -> Result<(f64, Vec<Layer>)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let d = net.d();
    let kernels = batch
        .iter()
        .map(|s| process.kernel(s.t))
        .collect::<Result<Vec<_>>>()?;
    let queries: Vec<NetQuery<'_>> = batch
        .iter()
        .zip(&kernels)
        .map(|(s, &kernel)| NetQuery { x: &s.x_t, y: s.y.as_deref(), t: s.t, kernel })
        .collect();
    let fwd = net.forward_batch(&queries)?;
    let scale = 1.0 / (batch.len() * d) as f64;
    let mut grad = Array2::zeros((batch.len(), d));
    let mut loss = 0.0;
    for (i, (s, k)) in batch.iter().zip(&kernels).enumerate() {
        let mu = s.y.as_deref().unwrap_or(&process.params.mu);
        let w = mode.weight(process.params.tau, k.variance);
        for j in 0..d {
            let target = -(s.x_t[j] - (mu[j] + k.decay * (s.x0[j] - mu[j]))) / k.variance;
            let r = fwd.scores[[i, j]] - target;
            loss += w * r * r * scale;
            grad[[i, j]] = 2.0 * w * r * scale;
        }
    }
    Ok((loss, net.backward(&fwd, &grad)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Times are drawn uniformly on (t_min, T].
    pub t_min: f64,
    pub loss_weight_mode: LossWeightMode,
    /// Fractions of `steps` after which the rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 128,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Sgd,
            seed: 42,
            t_min: 1e-3,
            loss_weight_mode: LossWeightMode::PaperMagnitude,
            lr_milestones: Vec::new(),
            lr_decay: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, t_end: f64) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("steps and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        if !(self.t_min > 0.0 && self.t_min < t_end) {
            return Err(Error::Invalid(format!("t_min must lie in (0, {t_end})")));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Invalid("lr milestones are fractions in [0, 1]".into()));
        }
        Ok(())
    }

    fn rate_at(&self, step: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| step >= (m * self.steps as f64) as usize)
            .count();
        self.learning_rate * self.lr_decay.powi(passed as i32)
    }
}

/// The `step`-th training batch: pairs from `source`, times on (t_min, T],
/// and x_t drawn from the forward kernel around each pair's drift target.
pub fn draw_batch(
    source: &dyn TrainingSource,
    process: &ForwardProcess,
    cfg: &TrainConfig,
    step: usize,
) -> Result<Vec<DsmSample>> {
    let mut stream = NoiseStream::new(cfg.seed, StreamDomain::Training, step as u64);
    let t_end = process.t_end();
    (0..cfg.batch_size)
        .map(|_| {
            let pair = source.draw(&mut stream);
            let t = cfg.t_min + (t_end - cfg.t_min) * (1.0 - stream.uniform());
            let mu = pair.y.as_deref().unwrap_or(&process.params.mu);
            let m = process.kernel(t)?.marginal(&pair.x0, mu);
            let x_t = sample_marginal(&m, &mut stream)?;
            Ok(DsmSample { x0: pair.x0, y: pair.y, t, x_t })
        })
        .collect()
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub net: ScoreNet,
    /// Mini-batch loss at every step.
    pub losses: Vec<f64>,
}

pub fn train(net: ScoreNet, source: &dyn TrainingSource, process: &ForwardProcess, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_monitored(net, source, process, cfg, 0, |_, _| {})
}

/// Like [`train`], calling `monitor(step, net)` before the first step and
/// after every `every` steps (never when `every` is 0).
pub fn train_monitored(
    mut net: ScoreNet,
    source: &dyn TrainingSource,
    process: &ForwardProcess,
    cfg: &TrainConfig,
    every: usize,
    mut monitor: impl FnMut(usize, &ScoreNet),
) -> Result<TrainOutcome> {
    cfg.validate(process.t_end())?;
    if source.dim() != net.d() || process.d() != net.d() {
        return Err(Error::Invalid("data, process and network dimensions differ".into()));
    }
    let mut params = net.mlp().params_flat();
    let mut adam = Adam::new(params.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    if every > 0 {
        monitor(0, &net);
    }
    for step in 0..cfg.steps {
        let batch = draw_batch(source, process, cfg, step)?;
        let (loss, grads) = dsm_loss(&net, &batch, process, cfg.loss_weight_mode)?;
        let grads = flatten(&grads);
        if !loss.is_finite() || ensure_finite(&grads, "gradient").is_err() {
            return Err(Error::Training { step, loss });
        }
        losses.push(loss);
        let lr = cfg.rate_at(step);
        match cfg.optimizer {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(&grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => adam.update(&mut params, &grads, lr),
        }
        if ensure_finite(&params, "parameters").is_err() {
            return Err(Error::Training { step, loss: f64::NAN });
        }
        net.mlp_mut().set_params_flat(&params)?;
        if every > 0 && (step + 1) % every == 0 {
            monitor(step + 1, &net);
        }
    }
    Ok(TrainOutcome { net, losses })
}
