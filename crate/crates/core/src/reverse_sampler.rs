//! Reverse-time Euler–Maruyama sampling
//! `x ← x − [f(x, t) − g_t² ∇log p_t(x)]·dt + g_t·ΔŴ` for the mean-reverting
//! variants and a variance-preserving baseline.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discrepancy::gaussian_w2;
use crate::error::{ensure_finite, Error, Result};
use crate::forward_sde::{
    EnsembleStats, ForwardProcess, GaussianMarginal, Kernel, ProcessParams, VolatilityMode, BLOCK,
};
use crate::rng::{NoiseStream, StreamDomain};
use crate::schedules::{DecoupledVolatility, Schedule};
use crate::score_model::{kernel_score, mixture_score, DataSpec, ScoreNet};
use crate::stats::Moments;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantKind {
    D3gm,
    Ou,
    CoefDecoupled,
    SgmVp,
}

impl VariantKind {
    pub fn name(self) -> &'static str {
        match self {
            VariantKind::D3gm => "d3gm",
            VariantKind::Ou => "ou",
            VariantKind::CoefDecoupled => "coef-decoupled",
            VariantKind::SgmVp => "sgm-vp",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [VariantKind::D3gm, VariantKind::Ou, VariantKind::CoefDecoupled, VariantKind::SgmVp]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown variant '{s}'")))
    }
}

/// Linear β_t from `min` at t = 0 to `max` at t = T.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VpBeta {
    pub min: f64,
    pub max: f64,
}

impl Default for VpBeta {
    fn default() -> Self {
        VpBeta { min: 0.1, max: 20.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub kind: VariantKind,
    pub process: ForwardProcess,
    pub beta: VpBeta,
}

impl VariantSpec {
    /// Coupled volatility with τ ≥ 1.
    pub fn d3gm(params: ProcessParams, schedule: Schedule) -> Result<Self> {
        Self::build(VariantKind::D3gm, ForwardProcess::coupled(params, schedule)?)
    }

    /// Coupled volatility with τ = 1.
    pub fn ou(mu: Vec<f64>, lambda: f64, schedule: Schedule) -> Result<Self> {
        Self::build(VariantKind::Ou, ForwardProcess::coupled(ProcessParams::new(mu, lambda, 1.0)?, schedule)?)
    }

    /// σ_t chosen independently of θ_t.
    pub fn coef_decoupled(params: ProcessParams, schedule: Schedule, sigma: DecoupledVolatility) -> Result<Self> {
        Self::build(
            VariantKind::CoefDecoupled,
            ForwardProcess::new(params, schedule, VolatilityMode::Decoupled(sigma))?,
        )
    }

    /// Drift −½β_t x, diffusion √β_t, prior N(0, I).
    pub fn sgm_vp(d: usize, t_end: f64, beta: VpBeta) -> Result<Self> {
        let process = ForwardProcess::coupled(
            ProcessParams::new(vec![0.0; d], 1.0, 1.0)?,
            Schedule::constant(1.0).with_t_end(t_end),
        )?;
        let spec = VariantSpec { kind: VariantKind::SgmVp, process, beta };
        spec.validate()?;
        Ok(spec)
    }

    fn build(kind: VariantKind, process: ForwardProcess) -> Result<Self> {
        let spec = VariantSpec { kind, process, beta: VpBeta::default() };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let coupled = matches!(self.process.volatility, VolatilityMode::Coupled);
        let tau = self.process.params.tau;
        match self.kind {
            VariantKind::D3gm if !coupled || tau < 1.0 => {
                Err(Error::Invalid("d3gm needs coupled volatility and tau >= 1".into()))
            }
            VariantKind::Ou if !coupled || tau != 1.0 => {
                Err(Error::Invalid("ou needs coupled volatility and tau = 1".into()))
            }
            VariantKind::CoefDecoupled if coupled => {
                Err(Error::Invalid("coef-decoupled needs decoupled volatility".into()))
            }
            VariantKind::SgmVp if !(self.beta.min > 0.0 && self.beta.max >= self.beta.min) => {
                Err(Error::Invalid("sgm-vp needs 0 < beta_min <= beta_max".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn d(&self) -> usize {
        self.process.d()
    }

    pub fn t_end(&self) -> f64 {
        self.process.t_end()
    }

    /// Point the drift pulls towards: μ, or the origin for sgm-vp.
    pub fn target(&self) -> Vec<f64> {
        match self.kind {
            VariantKind::SgmVp => vec![0.0; self.d()],
            _ => self.process.params.mu.clone(),
        }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= 0.0 && t <= self.t_end() * (1.0 + 1e-12)) {
            return Err(Error::Domain(format!("t = {t} outside [0, {}]", self.t_end())));
        }
        Ok(())
    }

    fn beta_at(&self, t: f64) -> f64 {
        self.beta.min + (self.beta.max - self.beta.min) * t / self.t_end()
    }

    /// Rate r_t such that the forward drift is r_t·(target − x).
    pub fn drift_rate(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        match self.kind {
            VariantKind::SgmVp => Ok(0.5 * self.beta_at(t)),
            _ => self.process.theta_at(t),
        }
    }

    pub fn drift(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let r = self.drift_rate(t)?;
        Ok(x.iter().zip(self.target()).map(|(x, m)| r * (m - x)).collect())
    }

    /// g_t: τσ_t, or √β_t for sgm-vp.
    pub fn diffusion(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        match self.kind {
            VariantKind::SgmVp => Ok(self.beta_at(t).sqrt()),
            _ => self.process.diffusion_at(t),
        }
    }

    pub fn kernel(&self, t: f64) -> Result<Kernel> {
        self.check_time(t)?;
        match self.kind {
            VariantKind::SgmVp => {
                let b = self.beta.min * t + (self.beta.max - self.beta.min) * t * t / (2.0 * self.t_end());
                Ok(Kernel { decay: (-0.5 * b).exp(), variance: -(-b).exp_m1() })
            }
            _ => self.process.kernel(t),
        }
    }

    /// Initial law for from-stationary sampling.
    pub fn prior(&self) -> Result<GaussianMarginal> {
        let mean = self.target();
        let variance = match self.kind {
            VariantKind::SgmVp => 1.0,
            _ => self.process.reference_variance(self.t_end())?,
        };
        Ok(GaussianMarginal { mean, variance })
    }
}

/// One reverse step of size `dt` from time `t`.
pub fn reverse_step(x: &[f64], t: f64, dt: f64, score: &[f64], variant: &VariantSpec, dw: &[f64]) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("dt must be positive, got {dt}")));
    }
    ensure_finite(x, "state")?;
    ensure_finite(score, "score")?;
    ensure_finite(dw, "increment")?;
    let f = variant.drift(x, t)?;
    let g = variant.diffusion(t)?;
    let out: Vec<f64> = x
        .iter()
        .zip(&f)
        .zip(score.iter().zip(dw))
        .map(|((x, f), (s, w))| x - (f - g * g * s) * dt + g * w)
        .collect();
    ensure_finite(&out, "state")?;
    Ok(out)
}

/// Score used by the sampler.
#[derive(Clone, Debug)]
pub enum ScoreFn<'a> {
    /// Kernel score around a known clean point.
    Kernel { x0: Vec<f64> },
    /// Exact marginal score of a Gaussian or mixture data law.
    Data(&'a DataSpec),
    /// Learned score; `y` is the lifted measurement for conditioned nets.
    Network { net: &'a ScoreNet, y: Option<Vec<f64>> },
}

impl ScoreFn<'_> {
    pub fn eval(&self, x: &[f64], t: f64, kernel: Kernel, target: &[f64]) -> Result<Vec<f64>> {
        match self {
            ScoreFn::Kernel { x0 } => kernel_score(x, &kernel.marginal(x0, target).mean, kernel.variance),
            ScoreFn::Data(data) => mixture_score(x, data, kernel, target),
            ScoreFn::Network { net, y } => net.score(x, y.as_deref(), t, kernel),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ForwardStart {
    Point(Vec<f64>),
    Data(DataSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// x_T drawn from the variant's prior.
    FromStationary,
    /// x_T drawn from the exact forward law at T started from a clean sample.
    FromForward(ForwardStart),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    Standard,
    /// Every Gaussian draw negated; pairs with `Standard` for antithetic runs.
    Antithetic,
    /// No noise at all: deterministic drift-only path from the prior mean.
    Off,
}

impl NoiseMode {
    fn sign(self) -> f64 {
        match self {
            NoiseMode::Standard => 1.0,
            NoiseMode::Antithetic => -1.0,
            NoiseMode::Off => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoints {
    None,
    /// Grid points nearest to these times.
    Times(Vec<f64>),
    /// Every `n`-th grid point.
    Stride(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    pub n_steps: usize,
    pub t_min: f64,
    pub init: Init,
    pub noise: NoiseMode,
    /// Keep the full path and per-step diagnostics in [`SampleRun`].
    pub record: bool,
    /// Where ensembles collect moments (start and end are always included).
    pub checkpoints: Checkpoints,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            n_steps: 1000,
            t_min: 1e-3,
            init: Init::FromStationary,
            noise: NoiseMode::Standard,
            record: false,
            checkpoints: Checkpoints::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: f64,
    pub score_norm: f64,
    pub drift_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRun {
    pub init_state: Vec<f64>,
    /// Clean sample behind a from-forward start.
    pub x0: Option<Vec<f64>>,
    pub terminal: Vec<f64>,
    /// Decreasing from T to t_min; empty unless recorded.
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Precomputed per-step coefficients on the grid T = t_0 > … > t_n = t_min.
struct ReversePlan {
    times: Vec<f64>,
    kernels: Vec<Kernel>,
    rates: Vec<f64>,
    diffusions: Vec<f64>,
    target: Vec<f64>,
    prior: GaussianMarginal,
    terminal_kernel: Kernel,
    h: f64,
}

impl ReversePlan {
    fn new(variant: &VariantSpec, opts: &SampleOptions) -> Result<Self> {
        variant.validate()?;
        let t_end = variant.t_end();
        if opts.n_steps == 0 {
            return Err(Error::Invalid("n_steps must be at least 1".into()));
        }
        if !(opts.t_min > 0.0 && opts.t_min < t_end) {
            return Err(Error::Invalid(format!("t_min must lie in (0, {t_end})")));
        }
        let n = opts.n_steps;
        let h = (t_end - opts.t_min) / n as f64;
        let times: Vec<f64> = (0..=n).map(|k| if k == n { opts.t_min } else { t_end - k as f64 * h }).collect();
        let mut kernels = Vec::with_capacity(n);
        let mut rates = Vec::with_capacity(n);
        let mut diffusions = Vec::with_capacity(n);
        for &t in &times[..n] {
            kernels.push(variant.kernel(t)?);
            rates.push(variant.drift_rate(t)?);
            diffusions.push(variant.diffusion(t)?);
        }
        Ok(ReversePlan {
            times,
            kernels,
            rates,
            diffusions,
            target: variant.target(),
            prior: variant.prior()?,
            terminal_kernel: variant.kernel(t_end)?,
            h,
        })
    }

    fn checkpoint_steps(&self, c: &Checkpoints) -> Vec<usize> {
        let n = self.times.len() - 1;
        let mut steps = vec![0, n];
        match c {
            Checkpoints::None => {}
            Checkpoints::Stride(s) => steps.extend((0..=n).step_by((*s).max(1))),
            Checkpoints::Times(ts) => {
                for &t in ts {
                    let k = ((self.times[0] - t) / self.h).round().clamp(0.0, n as f64) as usize;
                    steps.push(k);
                }
            }
        }
        steps.sort_unstable();
        steps.dedup();
        steps
    }

    fn run(
        &self,
        score: &ScoreFn<'_>,
        opts: &SampleOptions,
        seed: u64,
        index: u64,
        mut visit: impl FnMut(usize, &[f64]),
    ) -> Result<SampleRun> {
        let d = self.target.len();
        let sign = opts.noise.sign();
        let mut init_stream = NoiseStream::new(seed, StreamDomain::Init, index);
        let (mut x, x0) = match &opts.init {
            Init::FromStationary => {
                let sd = self.prior.variance.sqrt();
                let x = self.prior.mean.iter().map(|m| m + sign * sd * init_stream.normal()).collect();
                (x, None)
            }
            Init::FromForward(start) => {
                let x0 = match start {
                    ForwardStart::Point(p) => p.clone(),
                    ForwardStart::Data(data) => data.sample(&mut init_stream),
                };
                if x0.len() != d {
                    return Err(Error::Invalid("clean sample dimension mismatch".into()));
                }
                let m = self.terminal_kernel.marginal(&x0, &self.target);
                let sd = m.variance.sqrt();
                let x = m.mean.iter().map(|m| m + sign * sd * init_stream.normal()).collect();
                (x, Some(x0))
            }
        };
        let init_state: Vec<f64> = x;
        x = init_state.clone();
        let mut noise = NoiseStream::new(seed, StreamDomain::Reverse, index);
        let n = self.kernels.len();
        let mut run = SampleRun {
            init_state,
            x0,
            terminal: Vec::new(),
            times: Vec::new(),
            states: Vec::new(),
            diagnostics: Vec::new(),
        };
        if opts.record {
            run.times.push(self.times[0]);
            run.states.push(x.clone());
        }
        visit(0, &x);
        let sqrt_h = self.h.sqrt();
        for k in 0..n {
            let t = self.times[k];
            let s = score.eval(&x, t, self.kernels[k], &self.target)?;
            let (r, g) = (self.rates[k], self.diffusions[k]);
            let mut drift_sq = 0.0;
            for j in 0..d {
                let net_drift = r * (self.target[j] - x[j]) - g * g * s[j];
                drift_sq += net_drift * net_drift;
                x[j] += -net_drift * self.h + g * sign * sqrt_h * noise.normal();
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step: k + 1, detail: format!("reverse run {index} at t = {t}") });
            }
            if opts.record {
                run.times.push(self.times[k + 1]);
                run.states.push(x.clone());
                run.diagnostics.push(StepDiagnostics {
                    t,
                    score_norm: s.iter().map(|v| v * v).sum::<f64>().sqrt(),
                    drift_norm: drift_sq.sqrt(),
                });
            }
            visit(k + 1, &x);
        }
        run.terminal = x;
        Ok(run)
    }
}

/// One reverse run with stream index `index`.
pub fn sample_run(variant: &VariantSpec, score: &ScoreFn<'_>, opts: &SampleOptions, seed: u64, index: u64) -> Result<SampleRun> {
    ReversePlan::new(variant, opts)?.run(score, opts, seed, index, |_, _| {})
}

/// One reverse run (stream index 0).
pub fn sample(variant: &VariantSpec, score: &ScoreFn<'_>, opts: &SampleOptions, seed: u64) -> Result<SampleRun> {
    sample_run(variant, score, opts, seed, 0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReverseEnsemble {
    pub terminals: Vec<Vec<f64>>,
    /// Clean samples behind from-forward starts, in run order.
    pub clean: Vec<Option<Vec<f64>>>,
    /// Moments at the checkpoint grid times (decreasing).
    pub stats: EnsembleStats,
}

impl ReverseEnsemble {
    pub fn terminal_fit(&self) -> GaussianMarginal {
        let last = self.stats.times.len() - 1;
        GaussianMarginal { mean: self.stats.means[last].clone(), variance: self.stats.variances[last] }
    }
}

/// `n_runs` independent reverse runs in parallel; run `i` uses stream index `i`.
pub fn sample_ensemble(
    variant: &VariantSpec,
    score: &ScoreFn<'_>,
    opts: &SampleOptions,
    seed: u64,
    n_runs: usize,
) -> Result<ReverseEnsemble> {
    if n_runs == 0 {
        return Err(Error::Invalid("n_runs must be at least 1".into()));
    }
    let quiet = SampleOptions { record: false, ..opts.clone() };
    let plan = ReversePlan::new(variant, &quiet)?;
    let steps = plan.checkpoint_steps(&opts.checkpoints);
    let d = variant.d();
    type Block = (Vec<Vec<f64>>, Vec<Option<Vec<f64>>>, Vec<Moments>);
    let blocks: Vec<Result<Block>> = (0..n_runs.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![Moments::new(d); steps.len()];
            let mut terminals = Vec::new();
            let mut clean = Vec::new();
            for i in b * BLOCK..((b + 1) * BLOCK).min(n_runs) {
                let mut r = 0;
                let run = plan.run(score, &quiet, seed, i as u64, |k, x| {
                    if r < steps.len() && steps[r] == k {
                        acc[r].push(x);
                        r += 1;
                    }
                })?;
                terminals.push(run.terminal);
                clean.push(run.x0);
            }
            Ok((terminals, clean, acc))
        })
        .collect();
    let mut terminals = Vec::with_capacity(n_runs);
    let mut clean = Vec::with_capacity(n_runs);
    let mut total = vec![Moments::new(d); steps.len()];
    for block in blocks {
        let (t, c, acc) = block?;
        terminals.extend(t);
        clean.extend(c);
        for (m, a) in total.iter_mut().zip(&acc) {
            m.merge(a);
        }
    }
    let times = steps.iter().map(|&k| plan.times[k]).collect();
    Ok(ReverseEnsemble { terminals, clean, stats: EnsembleStats::from_moments(times, &total) })
}

/// Variants sharing data, seeds and budget.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareSpec {
    /// (label, variant) pairs; labels name rows in the output.
    pub variants: Vec<(String, VariantSpec)>,
    pub data: DataSpec,
    pub seeds: Vec<u64>,
    pub n_runs: usize,
    pub options: SampleOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: String,
    pub seed: u64,
    /// Mean of ‖x̂₀ − E[x₀]‖² over runs.
    pub terminal_mse: f64,
    /// W₂ between the Gaussian fit of x̂₀ and the data law's Gaussian moments.
    pub terminal_w2: f64,
    pub terminal_var: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub variant: String,
    pub t: f64,
    /// ‖ensemble mean − E[x₀]‖, averaged over seeds.
    pub mean_dist: f64,
    /// Ensemble variance, averaged over seeds.
    pub var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub curves: Vec<CurvePoint>,
}

impl ComparisonTable {
    /// CSV `variant,seed,terminal_mse,terminal_w2,steps`.
    pub fn write_rows_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "variant,seed,terminal_mse,terminal_w2,steps")?;
        for r in &self.rows {
            writeln!(w, "{},{},{:?},{:?},{}", r.variant, r.seed, r.terminal_mse, r.terminal_w2, r.steps)?;
        }
        Ok(())
    }

    /// CSV `variant,t,mean_dist,var`.
    pub fn write_curves_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "variant,t,mean_dist,var")?;
        for c in &self.curves {
            writeln!(w, "{},{:?},{:?},{:?}", c.variant, c.t, c.mean_dist, c.var)?;
        }
        Ok(())
    }

    pub fn rows_for<'a>(&'a self, variant: &'a str) -> impl Iterator<Item = &'a ComparisonRow> + 'a {
        self.rows.iter().filter(move |r| r.variant == variant)
    }
}

/// Run every variant on every seed with the exact data score and tabulate
/// terminal errors and per-step distance-to-target curves.
pub fn trajectory_compare(spec: &CompareSpec) -> Result<ComparisonTable> {
    if spec.variants.is_empty() || spec.seeds.is_empty() || spec.n_runs < 2 {
        return Err(Error::Invalid("need variants, seeds and at least 2 runs".into()));
    }
    let data_mean = spec.data.law_mean();
    let data_law = GaussianMarginal { mean: data_mean.clone(), variance: spec.data.law_variance() };
    let opts = SampleOptions { checkpoints: Checkpoints::Stride(1), ..spec.options.clone() };
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for (label, variant) in &spec.variants {
        if variant.d() != spec.data.dim() {
            return Err(Error::Invalid(format!("variant {label} dimension differs from the data")));
        }
        let score = ScoreFn::Data(&spec.data);
        let mut curve: Vec<(f64, f64, f64)> = Vec::new();
        for &seed in &spec.seeds {
            let ens = sample_ensemble(variant, &score, &opts, seed, spec.n_runs)?;
            let mse = ens
                .terminals
                .iter()
                .map(|x| x.iter().zip(&data_mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .sum::<f64>()
                / ens.terminals.len() as f64;
            let fit = ens.terminal_fit();
            rows.push(ComparisonRow {
                variant: label.clone(),
                seed,
                terminal_mse: mse,
                terminal_w2: gaussian_w2(&fit, &data_law)?,
                terminal_var: fit.variance,
                steps: opts.n_steps,
            });
            if curve.is_empty() {
                curve = ens.stats.times.iter().map(|&t| (t, 0.0, 0.0)).collect();
            }
            for (c, (m, v)) in curve.iter_mut().zip(ens.stats.means.iter().zip(&ens.stats.variances)) {
                c.1 += m.iter().zip(&data_mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                c.2 += v;
            }
        }
        let k = spec.seeds.len() as f64;
        curves.extend(curve.into_iter().map(|(t, dist, var)| CurvePoint {
            variant: label.clone(),
            t,
            mean_dist: dist / k,
            var: var / k,
        }));
    }
    Ok(ComparisonTable { rows, curves })
}
