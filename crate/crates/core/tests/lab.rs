use lipcenter::families::{lip_budget_rho, make_nabcd_bounds, NabcdParams, RhoParams};
use lipcenter::hypotheses::{assemble_report, HypothesisSettings};
use lipcenter::lab::{
    flow_psi, invariance_residual, invariance_samples, make_r4_example, make_test_perturbation, ValidationSettings,
};
use lipcenter::sampling;
use lipcenter::scalar::ScalarFn;
use lipcenter::solver::{iterate_to_fixed_point, GridSpec, Problem, SolverSettings};
use lipcenter::trichotomy::{check_bounds, check_cocycle, check_splitting};
use lipcenter::NormSpec;
use proptest::prelude::*;

fn rho_params() -> impl Strategy<Value = RhoParams> {
    (0.0..0.5f64, -1.5..-0.9f64, 0.0..0.5f64, -1.5..-0.9f64, 1.0..2.0f64, 0.0..0.3f64)
        .prop_map(|(a, b, c, d, big_d, eps)| RhoParams::exponential(a, b, c, d, big_d, eps))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn closed_form_agrees_with_integration(p in rho_params(), t in -5.0..5.0f64, s in -5.0..5.0f64) {
        let ex = make_r4_example(&NabcdParams::from_rho(&p)).unwrap();
        let a = ex.op.evaluate(t, s).unwrap();
        let b = ex.integrated_operator(1e-11).evaluate(t, s).unwrap();
        for i in 0..4 {
            let rel = (a[(i, i)] - b[(i, i)]).abs() / a[(i, i)].abs();
            prop_assert!(rel <= 1e-6, "entry {i}: {} vs {}", a[(i, i)], b[(i, i)]);
        }
    }

    #[test]
    fn shipped_example_satisfies_its_bounds(p in rho_params(), seed in 0u64..1000) {
        let ex = make_r4_example(&NabcdParams::from_rho(&p)).unwrap();
        let pairs = sampling::uniform_pairs(&mut sampling::rng(seed), -5.0, 5.0, 100);
        let split = check_splitting(&ex.chart.splitting(), &ex.op, &pairs, NormSpec::MaxNorm, 1e-8).unwrap();
        prop_assert!(split.pass && split.worst <= 1e-8);
        let rep = check_bounds(&ex.op, &ex.chart.splitting(), &ex.bounds, NormSpec::MaxNorm, &pairs, 1e-12).unwrap();
        prop_assert!(rep.pass, "{rep:?}");
        for m in [rep.d1, rep.d2, rep.d3] {
            prop_assert!(m.worst_ratio <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn flow_composes(tau1 in -1.5..1.5f64, tau2 in -1.5..1.5f64, s in -3.0..3.0f64, seed in 0u64..1000) {
        let p = RhoParams::exponential(0.0, -1.0, 0.0, -1.0, 1.0, 0.0);
        let ex = make_r4_example(&NabcdParams::from_rho(&p)).unwrap();
        let f = make_test_perturbation(lip_budget_rho(&p, 0.05, 1.0).unwrap(), 4).perturbation;
        let v = sampling::point_in_box(&mut sampling::rng(seed), 1.0, 4);
        let (_, direct) = flow_psi(&ex.op, &f, tau1 + tau2, s, &v, 1e-12).unwrap();
        let (t1, mid) = flow_psi(&ex.op, &f, tau1, s, &v, 1e-12).unwrap();
        let (_, composed) = flow_psi(&ex.op, &f, tau2, t1, &mid, 1e-12).unwrap();
        for (a, b) in direct.iter().zip(&composed) {
            prop_assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn test_perturbations_respect_their_budgets(p in rho_params(), delta in 0.001..0.3f64, seed in 0u64..1000) {
        let gamma = if p.eps > 0.0 { p.eps } else { 0.3 };
        let budget = lip_budget_rho(&p, delta, gamma).unwrap();
        let audit = make_test_perturbation(budget, 4).audit(10_000, seed, 10.0, 2.0, NormSpec::MaxNorm);
        prop_assert!(audit.pass, "{audit:?}");
    }
}

#[test]
fn oscillating_weights_still_satisfy_the_bounds() {
    let one = ScalarFn::constant(1.0);
    let g = ScalarFn::with_derivative(|t: f64| (0.5 * t).exp(), |t: f64| 0.5 * (0.5 * t).exp());
    let e = ScalarFn::with_derivative(|t: f64| 1.0 + t.abs(), |t: f64| if t >= 0.0 { 1.0 } else { -1.0 });
    let p = NabcdParams::from_functions(&one, &g, &one, &g, &e, &e, &e, &e);
    let ex = make_r4_example(&p).unwrap();
    assert!(make_nabcd_bounds(&p).is_ok());
    let pairs = sampling::uniform_pairs(&mut sampling::rng(3), -6.0, 6.0, 500);
    let rep = check_bounds(&ex.op, &ex.chart.splitting(), &ex.bounds, NormSpec::MaxNorm, &pairs, 1e-12).unwrap();
    assert!(rep.pass, "{rep:?}");
}

#[test]
fn cocycle_residual_tracks_integration_tolerance() {
    let p = RhoParams::exponential(0.2, -0.5, 0.1, -0.5, 1.5, 0.1);
    let ex = make_r4_example(&NabcdParams::from_rho(&p)).unwrap();
    let triples = sampling::uniform_triples(&mut sampling::rng(4), -4.0, 4.0, 40);
    let loose = check_cocycle(&ex.integrated_operator(1e-6), &triples, NormSpec::MaxNorm).unwrap();
    let tight = check_cocycle(&ex.integrated_operator(5e-7), &triples, NormSpec::MaxNorm).unwrap();
    assert!(tight <= loose, "{tight} > {loose}");
    assert!(check_cocycle(&ex.op, &triples, NormSpec::MaxNorm).unwrap() <= 1e-8);
}

#[test]
fn invariance_improves_with_the_grid() {
    let p = RhoParams::exponential(0.0, -1.0, 0.0, -1.0, 1.0, 0.0);
    let budget = lip_budget_rho(&p, 0.05, 1.0).unwrap();
    let bounds = lipcenter::families::make_rho_bounds(&p).unwrap();
    let report = assemble_report(&bounds, &budget, &HypothesisSettings::default()).unwrap();
    let spec = GridSpec {
        n_t: 21,
        n_s: 11,
        n_xi: 5,
        ..GridSpec::default()
    };
    let st = ValidationSettings {
        samples: 60,
        ..ValidationSettings::default()
    };
    let mut worst = Vec::new();
    let mut samples = None;
    for g in [spec, spec.refined()] {
        let ex = make_r4_example(&NabcdParams::from_rho(&p)).unwrap();
        let f = make_test_perturbation(budget.clone(), 4).perturbation;
        let pr = Problem::new(ex.op, ex.chart, ex.bounds, f, NormSpec::MaxNorm).unwrap();
        let (disc, state) = iterate_to_fixed_point(pr, g, Some(&report), &SolverSettings::default()).unwrap();
        let smp = samples.get_or_insert_with(|| invariance_samples(&disc, &st)).clone();
        worst.push(invariance_residual(&disc, &state, &smp, None, &st).unwrap().worst);
    }
    assert!(worst[0] / worst[1] >= 2.0, "{worst:?}");
}
