use mrsde::discrepancy::gaussian_w2;
use mrsde::reverse_sampler::{
    reverse_step, sample, sample_ensemble, sample_run, trajectory_compare, Checkpoints, CompareSpec, ForwardStart,
    Init, NoiseMode, SampleOptions, ScoreFn, VariantSpec, VpBeta,
};
use mrsde::score_model::DataSpec;
use mrsde::{DecoupledVolatility, Error, GaussianMarginal, ProcessParams, Schedule, ScheduleKind};

fn cosine() -> Schedule {
    Schedule::new(ScheduleKind::Cosine, 1.0)
}

fn toy_variants() -> Vec<(String, VariantSpec)> {
    let d3gm = VariantSpec::d3gm(ProcessParams::scalar(3.0, 1.0, 2.0).unwrap(), cosine()).unwrap();
    let ou = VariantSpec::ou(vec![3.0], 1.0, cosine()).unwrap();
    let dec = VariantSpec::coef_decoupled(
        ProcessParams::scalar(3.0, 1.0, 1.0).unwrap(),
        cosine(),
        DecoupledVolatility::Constant(80.0),
    )
    .unwrap();
    vec![("d3gm".into(), d3gm), ("ou".into(), ou), ("coef-decoupled".into(), dec)]
}

#[test]
fn reverse_step_arithmetic() {
    // x = 1, μ = 0, θ = 1, τ = 1, σ = √2, score −0.5, dt 0.01.
    let v = VariantSpec::ou(vec![0.0], 1.0, Schedule::constant(1.0)).unwrap();
    assert!((v.diffusion(0.3).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    let x = reverse_step(&[1.0], 0.3, 0.01, &[-0.5], &v, &[0.0]).unwrap();
    assert!((x[0] - 1.0).abs() < 1e-14);
    let x = reverse_step(&[1.0], 0.3, 0.01, &[0.0], &v, &[0.0]).unwrap();
    assert!((x[0] - 1.01).abs() < 1e-14);
    assert!(matches!(reverse_step(&[1.0], 0.3, 0.0, &[0.0], &v, &[0.0]), Err(Error::Domain(_))));
}

#[test]
fn point_mass_recovery() {
    let v = VariantSpec::d3gm(ProcessParams::scalar(3.0, 10.0, 2.0).unwrap(), cosine()).unwrap();
    let score = ScoreFn::Kernel { x0: vec![1.0] };
    let ens = sample_ensemble(&v, &score, &SampleOptions::default(), 42, 10_000).unwrap();
    let last = ens.stats.times.len() - 1;
    let err = (ens.stats.means[last][0] - 1.0).abs();
    let se = ens.stats.mean_standard_error(last);
    assert!(err <= 3.0 * se, "err {err}, se {se}");
}

#[test]
fn gaussian_closure_at_checkpoints() {
    let data = DataSpec::gaussian(vec![1.0, -0.5], 1.0).unwrap();
    let v = VariantSpec::d3gm(ProcessParams::new(vec![3.0, 3.0], 1.0, 2.0).unwrap(), cosine()).unwrap();
    let opts = SampleOptions {
        init: Init::FromForward(ForwardStart::Data(data.clone())),
        checkpoints: Checkpoints::Times(vec![0.9, 0.7, 0.5, 0.3, 0.1]),
        ..Default::default()
    };
    let ens = sample_ensemble(&v, &ScoreFn::Data(&data), &opts, 7, 20_000).unwrap();
    assert_eq!(ens.stats.times.len(), 7);
    for i in 1..6 {
        let t = ens.stats.times[i];
        let k = v.kernel(t).unwrap();
        let m = k.marginal(&data.law_mean(), &v.target());
        let var = k.variance + k.decay * k.decay * data.law_variance();
        let se = ens.stats.mean_standard_error(i);
        for (a, b) in ens.stats.means[i].iter().zip(&m.mean) {
            assert!((a - b).abs() < 4.0 * se, "t {t}: mean {a} vs {b}");
        }
        let vse = ens.stats.variance_standard_error(i);
        assert!((ens.stats.variances[i] - var).abs() < 4.0 * vse, "t {t}: var {} vs {var}", ens.stats.variances[i]);
    }
}

#[test]
fn antithetic_pairs_average_to_noiseless_path() {
    let data = DataSpec::gaussian(vec![1.0], 0.5).unwrap();
    let v = VariantSpec::d3gm(ProcessParams::scalar(3.0, 1.0, 2.0).unwrap(), cosine()).unwrap();
    let base = SampleOptions { n_steps: 400, record: true, ..Default::default() };
    let off = sample(&v, &ScoreFn::Data(&data), &SampleOptions { noise: NoiseMode::Off, ..base.clone() }, 3).unwrap();
    for index in 0..5 {
        let plus = sample_run(&v, &ScoreFn::Data(&data), &base, 3, index).unwrap();
        let minus =
            sample_run(&v, &ScoreFn::Data(&data), &SampleOptions { noise: NoiseMode::Antithetic, ..base.clone() }, 3, index)
                .unwrap();
        for ((a, b), c) in plus.states.iter().zip(&minus.states).zip(&off.states) {
            assert!((0.5 * (a[0] + b[0]) - c[0]).abs() < 1e-10);
        }
    }
}

#[test]
fn step_refinement_does_not_hurt_w2() {
    let data = DataSpec::gaussian(vec![1.0], 1.0).unwrap();
    let law = GaussianMarginal { mean: vec![1.0], variance: 1.0 };
    let v = VariantSpec::d3gm(ProcessParams::scalar(3.0, 1.0, 2.0).unwrap(), cosine()).unwrap();
    let w2 = |n_steps: usize, seed: u64| {
        let opts = SampleOptions { n_steps, init: Init::FromForward(ForwardStart::Data(data.clone())), ..Default::default() };
        let ens = sample_ensemble(&v, &ScoreFn::Data(&data), &opts, seed, 4000).unwrap();
        gaussian_w2(&ens.terminal_fit(), &law).unwrap()
    };
    let diffs: Vec<f64> = (0..10).map(|s| w2(200, s) - w2(100, s)).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean <= 2.0 * sd / n.sqrt(), "mean increase {mean}, se {}", sd / n.sqrt());
}

#[test]
fn stiffer_prior_gives_smaller_w2() {
    let data = DataSpec::gaussian(vec![1.0], 1.0).unwrap();
    let law = GaussianMarginal { mean: vec![1.0], variance: 1.0 };
    let mean_w2 = |tau: f64| {
        let v = VariantSpec::d3gm(ProcessParams::scalar(3.0, 1.0, tau).unwrap(), cosine()).unwrap();
        (0..10)
            .map(|seed| {
                let ens = sample_ensemble(&v, &ScoreFn::Data(&data), &SampleOptions::default(), seed, 2000).unwrap();
                gaussian_w2(&ens.terminal_fit(), &law).unwrap()
            })
            .sum::<f64>()
            / 10.0
    };
    let (w1, w2) = (mean_w2(1.0), mean_w2(2.0));
    assert!(w2 <= w1, "tau=2: {w2}, tau=1: {w1}");
}

#[test]
fn vp_baseline_stays_finite_on_shifted_data() {
    let data = DataSpec::gaussian(vec![5.0, -4.0], 0.3).unwrap();
    let v = VariantSpec::sgm_vp(2, 1.0, VpBeta::default()).unwrap();
    let run = sample(&v, &ScoreFn::Data(&data), &SampleOptions::default(), 1).unwrap();
    assert!(run.terminal.iter().all(|x| x.is_finite()));
}

#[test]
fn variant_ordering_on_gaussian_toy() {
    let spec = CompareSpec {
        variants: toy_variants(),
        data: DataSpec::gaussian(vec![1.0], 1.0).unwrap(),
        seeds: (0..10).collect(),
        n_runs: 2000,
        options: SampleOptions::default(),
    };
    let table = trajectory_compare(&spec).unwrap();
    let col = |name: &str| table.rows_for(name).map(|r| (r.terminal_mse, r.terminal_var)).collect::<Vec<_>>();
    let (d3, ou, dec) = (col("d3gm"), col("ou"), col("coef-decoupled"));
    let wins = (0..10).filter(|&i| d3[i].0 <= ou[i].0 && ou[i].0 < dec[i].0).count();
    assert!(wins >= 8, "ordering held on {wins}/10 seeds");
    let avg = |c: &[(f64, f64)]| c.iter().map(|r| r.1).sum::<f64>() / c.len() as f64;
    assert!(avg(&dec) >= 2.0 * avg(&d3));
}

#[test]
fn comparison_is_reproducible_across_thread_counts() {
    let spec = CompareSpec {
        variants: toy_variants(),
        data: DataSpec::gaussian(vec![1.0], 1.0).unwrap(),
        seeds: vec![5, 6],
        n_runs: 600,
        options: SampleOptions { n_steps: 100, ..Default::default() },
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let table = trajectory_compare(&spec).unwrap();
            let mut rows = Vec::new();
            let mut curves = Vec::new();
            table.write_rows_csv(&mut rows).unwrap();
            table.write_curves_csv(&mut curves).unwrap();
            (rows, curves)
        })
    };
    let a = run(1);
    assert_eq!(a, run(4));
    assert_eq!(a, run(3));
    let text = String::from_utf8(a.0).unwrap();
    assert!(text.starts_with("variant,seed,terminal_mse,terminal_w2,steps\n"));
    assert_eq!(text.lines().count(), 1 + 3 * 2);
    assert!(String::from_utf8(a.1).unwrap().starts_with("variant,t,mean_dist,var\n"));
}

#[test]
fn divergence_names_the_step() {
    let v = VariantSpec::coef_decoupled(
        ProcessParams::scalar(0.0, 1.0, 1.0).unwrap(),
        Schedule::constant(1.0),
        DecoupledVolatility::Constant(1e200),
    )
    .unwrap();
    let err = sample(&v, &ScoreFn::Kernel { x0: vec![1.0] }, &SampleOptions::default(), 0).unwrap_err();
    assert!(err.is_numeric(), "{err:?}");
}
