use mrsde::discrepancy::{
    chi_square_tail_term, empirical_forward_gap, gaussian_kl, gaussian_kl_standard_error, gaussian_w2,
    initial_magnitude_i0, tdd_lower_bound, tdd_monte_carlo, TddInputs,
};
use mrsde::{
    simulate_ensemble, EnsembleConfig, Error, ForwardProcess, GaussianMarginal, ProcessParams, Schedule, ScheduleKind,
};

fn coupled(mu: f64, lambda: f64, tau: f64, sched: Schedule) -> ForwardProcess {
    ForwardProcess::coupled(ProcessParams::scalar(mu, lambda, tau).unwrap(), sched).unwrap()
}

#[test]
fn chi_square_term() {
    let ln = 0.05f64.ln();
    let oracle = 1.0 + 2.0 * (-ln).sqrt() - 2.0 * ln;
    assert!((chi_square_tail_term(1, 0.05).unwrap() - oracle).abs() < 1e-13);
    assert!((oracle - 10.453).abs() < 5e-4);
    assert!((chi_square_tail_term(1, 1.0 - 1e-15).unwrap() - 1.0).abs() < 1e-6);
    let mut prev = 0.0;
    for d in 1..50 {
        let v = chi_square_tail_term(d, 0.1).unwrap();
        assert!(v > prev);
        prev = v;
    }
    for bad in [0.0, 1.0, -0.5, 2.0] {
        assert!(matches!(chi_square_tail_term(1, bad), Err(Error::Domain(_))));
    }
}

#[test]
fn bound_plug_in_example() {
    let inputs = TddInputs {
        x0: vec![2.0],
        process: coupled(0.0, 1.0, 1.0, Schedule::constant(1.0)),
        t_final: 1.0,
        delta: 0.05,
        score_bound: 1.0,
        sigma_max: 2f64.sqrt(),
    };
    let r = tdd_lower_bound(&inputs).unwrap();
    let chi = 1.0 + 2.0 * (-(0.05f64).ln()).sqrt() - 2.0 * 0.05f64.ln();
    let oracle = ((4.0 - 1.0) * (-2f64).exp() + 1.0 - 2.0 * (2.0 + chi)).abs();
    assert!((r.bound - oracle).abs() < 1e-12);
    assert!((r.bound - 23.5).abs() < 0.01);
    assert!((r.bound - (r.term_residual + r.term_stationary - r.term_noise).abs()).abs() < 1e-15);
}

#[test]
fn bound_limits() {
    let long = TddInputs::with_defaults(vec![3.0], coupled(1.0, 2.0, 1.5, Schedule::constant(60.0)), 1.0, 0.1).unwrap();
    let r = tdd_lower_bound(&long).unwrap();
    assert!(r.term_residual.abs() < 1e-40);
    assert!((r.bound - (9.0 - r.term_noise).abs()).abs() < 1e-9);

    let at_mu = TddInputs::with_defaults(vec![1.0], coupled(1.0, 2.0, 1.5, Schedule::constant(1.0)), 1.0, 0.1).unwrap();
    let r = tdd_lower_bound(&at_mu).unwrap();
    assert!((r.term_residual + 9.0 * (-2f64).exp()).abs() < 1e-12);

    let lin = TddInputs::with_defaults(vec![1.0], coupled(0.0, 1.0, 1.0, Schedule::new(ScheduleKind::Linear, 1.0)), 1.0, 0.1)
        .unwrap();
    assert!(TddInputs { t_final: 0.0, ..lin }.validate().is_err());
}

#[test]
fn residual_shrinks_with_horizon() {
    for kind in ScheduleKind::ALL {
        let sched = Schedule::new(kind, 1.0).with_t_end(8.0);
        let p = coupled(0.0, 1.0, 1.0, sched);
        let mut prev = f64::INFINITY;
        for i in 1..=16 {
            let t = 0.5 * i as f64;
            let r = tdd_lower_bound(&TddInputs::with_defaults(vec![5.0], p.clone(), t, 0.05).unwrap()).unwrap();
            assert!(r.term_residual.abs() < prev, "{kind} at T = {t}");
            prev = r.term_residual.abs();
        }
        assert!(prev < 1e-3, "{kind}: {prev}");
    }
}

#[test]
fn monte_carlo_exceeds_bound_for_every_schedule() {
    let thetas = [
        (ScheduleKind::Constant, 1.0),
        (ScheduleKind::Linear, 2.0),
        (ScheduleKind::Cosine, 2.0),
        (ScheduleKind::Log, 2.0),
        (ScheduleKind::Quadratic, 2.5),
    ];
    for (kind, theta) in thetas {
        let p = coupled(0.0, 1.0, 1.0, Schedule::new(kind, theta));
        for delta in [0.05, 0.2] {
            let inputs = TddInputs::with_defaults(vec![40.0], p.clone(), 1.0, delta).unwrap();
            let r = tdd_monte_carlo(&inputs, 500, 200, 42).unwrap();
            assert!(r.inner() > 0.0, "{kind}: bound argument should be positive");
            let f = r.exceed_fraction.unwrap();
            let err = (delta * (1.0 - delta) / 500.0).sqrt();
            assert!(f >= 1.0 - delta - 2.0 * err, "{kind} delta {delta}: {f}");
        }
    }
}

#[test]
fn forward_gap_matches_closed_form() {
    for kind in ScheduleKind::ALL {
        let p = coupled(0.0, 1.0, 1.0, Schedule::new(kind, 1.5));
        let g = empirical_forward_gap(&[2.0], &p, 1.0, 20_000, 1000, 9).unwrap();
        assert!((g.mean_gap[0] - g.mean_gap_closed[0]).abs() < 4.0 * g.mean_se, "{kind}");
        assert!((g.var_gap - g.var_gap_closed).abs() < 4.0 * g.var_se, "{kind}");
    }
    let g = empirical_forward_gap(&[2.0], &coupled(0.0, 1.0, 1.0, Schedule::constant(1.0)), 1.0, 100_000, 1000, 1)
        .unwrap();
    assert!((g.mean_gap_closed[0] - 2.0 * (-1f64).exp()).abs() < 1e-15);
    assert!((g.mean_gap[0] - 0.7358).abs() < 4.0 * g.mean_se);
    let far = empirical_forward_gap(&[2.0], &coupled(0.0, 1.0, 1.0, Schedule::constant(50.0)), 1.0, 1000, 1000, 1)
        .unwrap();
    assert!(far.mean_gap_closed[0] < 1e-20 && far.var_gap_closed < 1e-40);
    assert!(far.mean_gap[0] < 4.0 * far.mean_se && far.var_gap < 4.0 * far.var_se);
    let t1 = empirical_forward_gap(&[2.0], &coupled(0.0, 1.0, 1.0, Schedule::constant(1.0)), 1.0, 1000, 100, 1).unwrap();
    let t2 = empirical_forward_gap(&[2.0], &coupled(0.0, 1.0, 2.0, Schedule::constant(1.0)), 1.0, 1000, 100, 1).unwrap();
    assert_eq!(t1.mean_gap_closed, t2.mean_gap_closed);
    assert!(empirical_forward_gap(&[2.0], &coupled(0.0, 1.0, 1.0, Schedule::constant(1.0)), 1.0, 999, 10, 1).is_err());
}

#[test]
fn kl_examples() {
    let a = GaussianMarginal { mean: vec![0.3, -1.0], variance: 2.0 };
    assert_eq!(gaussian_kl(&a, &a).unwrap(), 0.0);
    let n01 = GaussianMarginal { mean: vec![0.0], variance: 1.0 };
    let n0e = GaussianMarginal { mean: vec![0.0], variance: std::f64::consts::E };
    let kl = gaussian_kl(&n01, &n0e).unwrap();
    assert!((kl - 0.5 * ((-1f64).exp() - 1.0 + 1.0)).abs() < 1e-15);
    assert!((kl - 0.1839).abs() < 1e-4);
    assert!(matches!(gaussian_kl(&n01, &GaussianMarginal { mean: vec![0.0], variance: 0.0 }), Err(Error::Domain(_))));
    let w = gaussian_w2(&n01, &GaussianMarginal { mean: vec![3.0], variance: 4.0 }).unwrap();
    assert!((w - 10f64.sqrt()).abs() < 1e-15);
}

#[test]
fn stiffness_shrinks_kl_to_the_stationary_law() {
    let mut prev = f64::INFINITY;
    for tau in [1.0, 2.0, 4.0] {
        let p = coupled(0.0, 1.0, tau, Schedule::constant(1.0));
        let law_t = p.marginal(&[2.0], 1.0).unwrap();
        let stationary = p.stationary_law();
        let kl = gaussian_kl(&law_t, &stationary).unwrap();
        // Closed form: ½(r − 1 − ln r) + ½ (2e⁻¹)²/τ² with r = 1 − e⁻².
        let r = 1.0 - (-2f64).exp();
        let oracle = 0.5 * (r - 1.0 - r.ln()) + 0.5 * 4.0 * (-2f64).exp() / (tau * tau);
        assert!((kl - oracle).abs() < 1e-13);
        assert!(kl < prev);
        prev = kl;

        let n = 100_000;
        let s = simulate_ensemble(&p, &[2.0], &EnsembleConfig::new(n, 1000, 3).with_stride(1000)).unwrap();
        let last = s.times.len() - 1;
        let fit = GaussianMarginal { mean: s.means[last].clone(), variance: s.variances[last] };
        let emp = gaussian_kl(&fit, &stationary).unwrap();
        let se = gaussian_kl_standard_error(&fit, &stationary, n);
        assert!((emp - kl).abs() < 4.0 * se, "tau {tau}: {emp} vs {kl} (se {se})");
    }
}

#[test]
fn initial_magnitude() {
    let p = coupled(0.0, 1.0, 1.0, Schedule::constant(1.0));
    assert!((initial_magnitude_i0(&[2.0], &p, 1.0).unwrap() - 6.0).abs() < 1e-14);
    let tiny = coupled(0.7, 1e-12, 1.0, Schedule::constant(1.0));
    assert!(initial_magnitude_i0(&[0.7], &tiny, 1.0).unwrap() < 1e-20);
    let diffusion = |lambda: f64| {
        let p = coupled(0.0, lambda, 1.3, Schedule::new(ScheduleKind::Cosine, 2.0));
        initial_magnitude_i0(&[0.0], &p, 1.0).unwrap()
    };
    assert!((diffusion(2.0) / diffusion(1.0) - 4.0).abs() < 1e-12);
}
