use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use mrsde::discrepancy::{gaussian_kl, gaussian_kl_standard_error, tdd_monte_carlo, TddInputs, TddReport};
use mrsde::forward_sde::write_stats_csv;
use mrsde::rds_analysis::{check_cocycle, CocycleConfig, FlowMap};
use mrsde::reverse_sampler::{
    sample_run, trajectory_compare, CompareSpec, SampleOptions, ScoreFn, VariantSpec, VpBeta,
};
use mrsde::score_model::{
    save_checkpoint, train, Activation, DataSpec, DegradationSpec, LossWeightMode, OptimizerKind, ScoreNet,
    TrainConfig, TrainOutcome,
};
use mrsde::{
    simulate_ensemble, DecoupledVolatility, EnsembleConfig, Error, ForwardProcess, GaussianMarginal, ProcessParams,
    Result,
};

use crate::config::{Command, Formats, RunConfig};
use crate::toy::{mse, psnr, ToyInverseProblem};

/// Files written by a command, relative to its output directory.
pub struct Outputs {
    dir: PathBuf,
    formats: Formats,
    files: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path, formats: Formats) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Outputs { dir: dir.to_path_buf(), formats, files: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    fn record(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.record(name);
        Ok(())
    }

    fn csv(&mut self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        if !self.formats.csv {
            return Ok(());
        }
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.write(name, &buf)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        if !self.formats.json {
            return Ok(());
        }
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

/// Run a command and write its outputs, `config.ini` and `manifest.json`.
pub fn execute(run: &RunConfig) -> Result<Vec<String>> {
    run.validate()?;
    let mut out = Outputs::new(&run.output_dir()?, run.formats()?)?;
    match run.command {
        Command::Simulate => simulate(run, &mut out)?,
        Command::Cocycle => cocycle(run, &mut out)?,
        Command::Tdd => tdd(run, &mut out)?,
        Command::TrainRestore => train_restore(run, &mut out)?,
        Command::Compare => compare(run, &mut out)?,
    }
    out.write("config.ini", run.config.to_ini().as_bytes())?;
    let manifest = json!({
        "command": run.command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": run.config.to_json(),
        "files": out.files().iter().filter(|f| *f != "config.ini").collect::<Vec<_>>(),
        "rerun": format!("mrsde {} --config config.ini", run.command.name()),
    });
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    out.write("manifest.json", text.as_bytes())?;
    Ok(out.files().to_vec())
}

fn simulate(run: &RunConfig, out: &mut Outputs) -> Result<()> {
    let process = run.process()?;
    let x0 = run.vector("process.x0")?;
    let cfg = EnsembleConfig::new(run.positive("mc.paths")?, run.positive("mc.steps")?, run.get("mc.seed")?)
        .with_stride(run.positive("mc.stride")?);
    let stats = simulate_ensemble(&process, &x0, &cfg)?;
    let closed = stats.times.iter().map(|&t| process.marginal(&x0, t)).collect::<Result<Vec<_>>>()?;
    let means: Vec<Vec<f64>> = closed.iter().map(|m| m.mean.clone()).collect();
    let variances: Vec<f64> = closed.iter().map(|m| m.variance).collect();
    out.csv("ensemble.csv", |w| stats.write_csv(w))?;
    out.csv("marginal.csv", |w| write_stats_csv(w, &stats.times, &means, &variances))?;

    let z = |diff: f64, se: f64| if diff == 0.0 { 0.0 } else { diff.abs() / se };
    let mut max_mean_z = 0.0f64;
    let mut max_var_z = 0.0f64;
    let mut max_var_rel = 0.0f64;
    for i in 0..stats.times.len() {
        for (a, b) in stats.means[i].iter().zip(&means[i]) {
            max_mean_z = max_mean_z.max(z(a - b, stats.mean_standard_error(i)));
        }
        let dv = stats.variances[i] - variances[i];
        max_var_z = max_var_z.max(z(dv, stats.variance_standard_error(i)));
        if variances[i] > 0.0 {
            max_var_rel = max_var_rel.max(dv.abs() / variances[i]);
        }
    }
    out.json(
        "summary.json",
        &json!({
            "paths": cfg.n_paths,
            "steps": cfg.n_steps,
            "records": stats.times.len(),
            "max_mean_z": max_mean_z,
            "max_variance_z": max_var_z,
            "max_variance_rel_dev": max_var_rel,
        }),
    )
}

fn parse_pairs(raw: &str) -> Result<Vec<(f64, f64)>> {
    raw.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let bad = || Error::Invalid(format!("cocycle pair '{p}' must look like s:t"));
            let (s, t) = p.split_once(':').ok_or_else(bad)?;
            Ok((s.trim().parse().map_err(|_| bad())?, t.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

fn cocycle(run: &RunConfig, out: &mut Outputs) -> Result<()> {
    let map = FlowMap::new(run.process()?);
    let pairs = parse_pairs(run.config.str("cocycle.pairs")?)?;
    if pairs.is_empty() {
        return Err(Error::Invalid("cocycle.pairs is empty".into()));
    }
    let cfg = CocycleConfig {
        n_paths: run.positive("mc.paths")?,
        n_steps: run.positive("mc.steps")?,
        seed: run.get("mc.seed")?,
        tol: run.get("cocycle.tol")?,
    };
    let report = check_cocycle(&map, &pairs, &run.vector("process.x0")?, &cfg)?;
    out.json("cocycle.json", &report)?;
    out.csv("cocycle.csv", |w| {
        writeln!(w, "s,t,deviation")?;
        for p in &report.pairs {
            writeln!(w, "{:?},{:?},{:?}", p.s, p.t, p.deviation)?;
        }
        Ok(())
    })
}

fn tdd_inputs(run: &RunConfig, process: ForwardProcess, t_final: f64) -> Result<TddInputs> {
    let mut inputs = TddInputs::with_defaults(run.vector("process.x0")?, process, t_final, run.get("tdd.delta")?)?;
    if !run.config.str("tdd.score_bound")?.is_empty() {
        inputs.score_bound = run.get("tdd.score_bound")?;
        inputs.validate()?;
    }
    Ok(inputs)
}

fn tdd(run: &RunConfig, out: &mut Outputs) -> Result<()> {
    let process = run.process()?;
    let (paths, steps, seed) = (run.positive("mc.paths")?, run.positive("mc.steps")?, run.get::<u64>("mc.seed")?);
    let report = tdd_monte_carlo(&tdd_inputs(run, process.clone(), run.get("tdd.t_final")?)?, paths, steps, seed)?;
    out.json("tdd.json", &report)?;

    let sweep: Vec<(f64, TddReport)> = run
        .list::<f64>("tdd.t_grid")?
        .into_iter()
        .map(|t| Ok((t, tdd_monte_carlo(&tdd_inputs(run, process.clone(), t)?, paths, steps, seed)?)))
        .collect::<Result<_>>()?;
    out.csv("tdd_sweep.csv", |w| {
        writeln!(w, "T,bound,term_residual,term_stationary,term_noise,empirical_lhs,exceed_fraction")?;
        for (t, r) in &sweep {
            writeln!(
                w,
                "{t:?},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.bound,
                r.term_residual,
                r.term_stationary,
                r.term_noise,
                r.empirical_lhs.unwrap_or(f64::NAN),
                r.exceed_fraction.unwrap_or(f64::NAN)
            )?;
        }
        Ok(())
    })?;

    let t_final: f64 = run.get("tdd.t_final")?;
    let kl_paths = run.positive("tdd.kl_paths")?;
    let x0 = run.vector("process.x0")?;
    let mut rows = Vec::new();
    for tau in run.list::<f64>("tdd.tau_grid")? {
        let params = ProcessParams::new(process.params.mu.clone(), process.params.lambda, tau)?;
        let p = ForwardProcess::new(params, process.schedule, process.volatility.clone())?;
        let reference = GaussianMarginal { mean: p.params.mu.clone(), variance: p.reference_variance(t_final)? };
        let closed = gaussian_kl(&p.marginal(&x0, t_final)?, &reference)?;
        let n = run.positive("tdd.kl_steps")?;
        let horizon = ForwardProcess::new(p.params.clone(), p.schedule.with_t_end(t_final), p.volatility.clone())?;
        let stats = simulate_ensemble(&horizon, &x0, &EnsembleConfig::new(kl_paths, n, seed).with_stride(n))?;
        let last = stats.times.len() - 1;
        let fit = GaussianMarginal { mean: stats.means[last].clone(), variance: stats.variances[last] };
        rows.push((tau, closed, gaussian_kl(&fit, &reference)?, gaussian_kl_standard_error(&fit, &reference, kl_paths)));
    }
    out.csv("kl_sweep.csv", |w| {
        writeln!(w, "tau,kl_closed,kl_empirical,kl_se")?;
        for (tau, c, e, se) in &rows {
            writeln!(w, "{tau:?},{c:?},{e:?},{se:?}")?;
        }
        Ok(())
    })
}

fn train_config(run: &RunConfig, seed: u64) -> Result<TrainConfig> {
    let optimizer = match run.config.str("train.optimizer")? {
        "adam" => OptimizerKind::Adam,
        "sgd" => OptimizerKind::Sgd,
        other => return Err(Error::Invalid(format!("unknown optimizer '{other}'"))),
    };
    Ok(TrainConfig {
        steps: run.positive("train.steps")?,
        batch_size: run.positive("train.batch")?,
        learning_rate: run.get("train.lr")?,
        optimizer,
        seed,
        t_min: run.get("train.t_min")?,
        loss_weight_mode: LossWeightMode::parse(run.config.str("train.weight")?)?,
        lr_milestones: run.list("train.milestones")?,
        lr_decay: 0.2,
    })
}

#[derive(Serialize)]
struct SignalMetrics {
    index: usize,
    mse_input: f64,
    mse_d3gm: f64,
    mse_ou: f64,
    psnr_input: f64,
    psnr_d3gm: f64,
    psnr_ou: f64,
}

fn train_restore(run: &RunConfig, out: &mut Outputs) -> Result<()> {
    let d = run.dim()?;
    if run.config.str("process.mu")? != "measurement" {
        return Err(Error::Invalid("train-restore takes its drift target from the measurement (process.mu = measurement)".into()));
    }
    let noise: f64 = run.get("problem.noise")?;
    let degradation = match run.config.str("problem.operator")? {
        "subsample" => DegradationSpec::subsample(d, run.positive("problem.factor")?, noise)?,
        "identity" => DegradationSpec::identity(d, noise)?,
        other => return Err(Error::Invalid(format!("unknown operator '{other}'"))),
    };
    let problem = ToyInverseProblem::new(d, degradation, run.get("problem.train_seed")?, run.get("problem.test_seed")?)?;
    let sched = run.schedule()?;
    let lambda: f64 = run.get("process.lambda")?;
    let tau: f64 = run.get("process.tau")?;
    let seed: u64 = run.get("mc.seed")?;
    let cfg = train_config(run, problem.train_seed)?;
    let hidden: Vec<usize> = run.list("train.hidden")?;
    let activation = Activation::parse(run.config.str("train.activation")?)?;
    let data_scale: f64 = run.get("train.data_scale")?;

    // The per-sample measurement replaces μ during training, so the
    // process only contributes λ, τ and the schedule.
    let fit = |tau: f64| -> Result<TrainOutcome> {
        let process = ForwardProcess::coupled(ProcessParams::new(vec![0.0; d], lambda, tau)?, sched)?;
        let net = ScoreNet::new(d, &hidden, activation, true, vec![0.0; d], data_scale, seed)?;
        train(net, &problem, &process, &cfg)
    };
    let main = fit(tau)?;
    let base = fit(1.0)?;
    save_checkpoint(&main.net, cfg.loss_weight_mode, out.dir(), "score_d3gm")?;
    save_checkpoint(&base.net, cfg.loss_weight_mode, out.dir(), "score_ou")?;
    for name in ["score_d3gm.json", "score_d3gm.bin", "score_ou.json", "score_ou.bin"] {
        out.record(name);
    }

    let opts = SampleOptions { n_steps: run.positive("sample.steps")?, t_min: run.get("sample.t_min")?, ..Default::default() };
    let runs = run.positive("sample.runs")?;
    let n_test = run.positive("problem.test_signals")?;
    let restore = |variant: &VariantSpec, net: &ScoreNet, y: &[f64], i: usize| -> Result<Vec<f64>> {
        let score = ScoreFn::Network { net, y: Some(y.to_vec()) };
        let mut acc = vec![0.0; d];
        for r in 0..runs {
            let x = sample_run(variant, &score, &opts, seed, (i * runs + r) as u64)?.terminal;
            for (a, v) in acc.iter_mut().zip(&x) {
                *a += v / runs as f64;
            }
        }
        Ok(acc)
    };
    let cases: Vec<_> = (0..n_test).map(|i| problem.test_case(i)).collect();
    let restored = cases
        .par_iter()
        .enumerate()
        .map(|(i, case)| {
            let d3gm = VariantSpec::d3gm(ProcessParams::new(case.degraded.clone(), lambda, tau)?, sched)?;
            let ou = VariantSpec::ou(case.degraded.clone(), lambda, sched)?;
            Ok((restore(&d3gm, &main.net, &case.degraded, i)?, restore(&ou, &base.net, &case.degraded, i)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let metrics: Vec<SignalMetrics> = cases
        .iter()
        .zip(&restored)
        .enumerate()
        .map(|(index, (case, (a, b)))| {
            let (mi, ma, mb) = (mse(&case.degraded, &case.clean), mse(a, &case.clean), mse(b, &case.clean));
            SignalMetrics {
                index,
                mse_input: mi,
                mse_d3gm: ma,
                mse_ou: mb,
                psnr_input: psnr(&case.clean, mi),
                psnr_d3gm: psnr(&case.clean, ma),
                psnr_ou: psnr(&case.clean, mb),
            }
        })
        .collect();
    let mean = |f: fn(&SignalMetrics) -> f64| metrics.iter().map(f).sum::<f64>() / metrics.len() as f64;
    out.json(
        "metrics.json",
        &json!({
            "test_signals": n_test,
            "mean_mse_input": mean(|m| m.mse_input),
            "mean_mse_d3gm": mean(|m| m.mse_d3gm),
            "mean_mse_ou": mean(|m| m.mse_ou),
            "d3gm_beats_input": metrics.iter().filter(|m| m.mse_d3gm < m.mse_input).count(),
            "ou_beats_input": metrics.iter().filter(|m| m.mse_ou < m.mse_input).count(),
            "d3gm_beats_ou": metrics.iter().filter(|m| m.mse_d3gm < m.mse_ou).count(),
            "final_loss_d3gm": main.losses.last(),
            "final_loss_ou": base.losses.last(),
            "signals": metrics,
        }),
    )?;
    out.csv("restored.csv", |w| {
        writeln!(w, "signal,index,clean,degraded,d3gm,ou")?;
        for (i, (case, (a, b))) in cases.iter().zip(&restored).enumerate() {
            for j in 0..d {
                writeln!(w, "{i},{j},{:?},{:?},{:?},{:?}", case.clean[j], case.degraded[j], a[j], b[j])?;
            }
        }
        Ok(())
    })?;
    out.csv("training.csv", |w| {
        writeln!(w, "step,loss_d3gm,loss_ou")?;
        for (k, (a, b)) in main.losses.iter().zip(&base.losses).enumerate() {
            writeln!(w, "{k},{a:?},{b:?}")?;
        }
        Ok(())
    })
}

/// The variants named in `compare.variants`, built from the shared config.
pub fn compare_variants(run: &RunConfig) -> Result<Vec<(String, VariantSpec)>> {
    let sched = run.schedule()?;
    let params = run.params()?;
    run.list::<String>("compare.variants")?
        .into_iter()
        .map(|name| {
            let v = match name.as_str() {
                "d3gm" => VariantSpec::d3gm(params.clone(), sched)?,
                "ou" => VariantSpec::ou(params.mu.clone(), params.lambda, sched)?,
                "coef-decoupled" => VariantSpec::coef_decoupled(
                    ProcessParams::new(params.mu.clone(), params.lambda, 1.0)?,
                    sched,
                    DecoupledVolatility::Constant(run.get("compare.sigma")?),
                )?,
                "sgm-vp" => VariantSpec::sgm_vp(params.d(), sched.t_end, VpBeta::default())?,
                other => return Err(Error::Invalid(format!("unknown variant '{other}'"))),
            };
            Ok((name, v))
        })
        .collect()
}

fn compare(run: &RunConfig, out: &mut Outputs) -> Result<()> {
    let base: u64 = run.get("mc.seed")?;
    let spec = CompareSpec {
        variants: compare_variants(run)?,
        data: DataSpec::gaussian(run.vector("data.mean")?, run.get("data.std")?)?,
        seeds: (0..run.positive("compare.seeds")? as u64).map(|s| base + s).collect(),
        n_runs: run.positive("mc.paths")?,
        options: SampleOptions { n_steps: run.positive("sample.steps")?, t_min: run.get("sample.t_min")?, ..Default::default() },
    };
    let table = trajectory_compare(&spec)?;
    out.csv("compare_rows.csv", |w| table.write_rows_csv(w))?;
    out.csv("compare_curves.csv", |w| table.write_curves_csv(w))?;
    let mut summary = serde_json::Map::new();
    for (name, _) in &spec.variants {
        let rows: Vec<_> = table.rows_for(name).collect();
        let n = rows.len() as f64;
        summary.insert(
            name.clone(),
            json!({
                "mean_terminal_mse": rows.iter().map(|r| r.terminal_mse).sum::<f64>() / n,
                "mean_terminal_w2": rows.iter().map(|r| r.terminal_w2).sum::<f64>() / n,
                "mean_terminal_var": rows.iter().map(|r| r.terminal_var).sum::<f64>() / n,
            }),
        );
    }
    let by_seed = |name: &str| table.rows_for(name).map(|r| r.terminal_mse).collect::<Vec<_>>();
    let (d3, ou, dec) = (by_seed("d3gm"), by_seed("ou"), by_seed("coef-decoupled"));
    if !d3.is_empty() && d3.len() == ou.len() && ou.len() == dec.len() {
        let held = (0..d3.len()).filter(|&i| d3[i] <= ou[i] && ou[i] < dec[i]).count();
        summary.insert("ordering_holds_on_seeds".into(), json!(held));
    }
    summary.insert("seeds".into(), json!(spec.seeds));
    out.json("compare.json", &serde_json::Value::Object(summary))
}
