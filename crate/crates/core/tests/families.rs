use lipcenter::families::{
    lemma4_bound, lemma4_integral, lip_budget_rho, make_exponential_bounds, make_mu_polynomial_bounds,
    make_nabcd_bounds, make_polynomial_bounds, make_rho_bounds, MonotoneFn, MuParams, NabcdParams, RhoParams,
};
use lipcenter::trichotomy::BoundFamily;
use proptest::prelude::*;

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn assert_same(x: &BoundFamily, y: &BoundFamily, t: f64, s: f64, tol: f64) {
    let (t, s) = if t >= s { (t, s) } else { (s, t) };
    for (u, v) in [(t, s), (s, t)] {
        assert!(rel(x.alpha(u, v), y.alpha(u, v)) <= tol, "alpha({u}, {v})");
    }
    assert!(rel(x.beta_plus(t, s), y.beta_plus(t, s)) <= tol, "beta_plus({t}, {s})");
    assert!(rel(x.beta_minus(s, t), y.beta_minus(s, t)) <= tol, "beta_minus({s}, {t})");
}

fn rates() -> impl Strategy<Value = (f64, f64, f64, f64, f64, f64)> {
    (-1.0..1.0f64, -2.0..0.0f64, -1.0..1.0f64, -2.0..0.0f64, 1.0..3.0f64, 0.0..0.5f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rho_identity_reduces_to_exponential((a, b, c, d, big_d, eps) in rates(), t in -8.0..8.0f64, s in -8.0..8.0f64) {
        let x = make_rho_bounds(&RhoParams::exponential(a, b, c, d, big_d, eps)).unwrap();
        let y = make_exponential_bounds(a, b, c, d, big_d, eps).unwrap();
        assert_same(&x, &y, t, s, 1e-12);
    }

    #[test]
    fn mu_identity_reduces_to_polynomial((a, b, c, d, big_d, eps) in rates(), t in -8.0..8.0f64, s in -8.0..8.0f64) {
        let x = make_mu_polynomial_bounds(&MuParams::polynomial(a, b, c, d, big_d, eps)).unwrap();
        let y = make_polynomial_bounds(a, b, c, d, big_d, eps).unwrap();
        assert_same(&x, &y, t, s, 1e-12);
    }

    #[test]
    fn nabcd_substitution_reproduces_rho_family(
        (a, b, c, d, big_d, eps) in rates(),
        rho in prop_oneof![Just(MonotoneFn::Identity), Just(MonotoneFn::Cubic), Just(MonotoneFn::Sinh)],
        t in -3.0..3.0f64,
        s in -3.0..3.0f64,
    ) {
        let p = RhoParams { rho, ..RhoParams::exponential(a, b, c, d, big_d, eps) };
        let x = make_nabcd_bounds(&NabcdParams::from_rho(&p)).unwrap();
        let y = make_rho_bounds(&p).unwrap();
        prop_assume!(t != s);
        assert_same(&x, &y, t, s, 1e-12);
    }

    #[test]
    fn budget_is_linear_in_delta(d1 in 0.001..0.16f64, d2 in 0.001..0.16f64, r in -20.0..20.0f64) {
        let p = RhoParams::exponential(0.1, -1.0, 0.0, -0.8, 1.2, 0.0);
        let b1 = lip_budget_rho(&p, d1, 0.5).unwrap();
        let b2 = lip_budget_rho(&p, d2, 0.5).unwrap();
        prop_assert!(rel(b1.eval(r) / d1, b2.eval(r) / d2) <= 1e-14);
    }

    #[test]
    fn lemma4_integral_is_dominated(
        lambda in -6.0..0.0f64,
        nu in -6.0..0.0f64,
        eps in 0.0..2.0f64,
        p in -10.0..10.0f64,
    ) {
        prop_assume!(lambda + eps <= 0.0 && nu + eps <= 0.0 && lambda + eps + nu + 1.0 <= -0.05);
        let i = lemma4_integral(lambda, nu, eps, p, 1e-12).unwrap();
        let b = lemma4_bound(lambda, nu, eps, p).unwrap();
        prop_assert!(i <= b * (1.0 + 1e-9), "{i} > {b}");
    }
}

#[test]
fn lemma4_negative_p_branch() {
    assert!((lemma4_bound(-2.0, -2.0, 0.0, -1.0).unwrap() - 1.0).abs() < 1e-15);
    let i = lemma4_integral(-2.0, -2.0, 0.0, -1.0, 1e-12).unwrap();
    assert!(i > 0.0 && i < 1.0);
}

#[test]
fn exponential_bounds_in_closed_form() {
    let b = make_exponential_bounds(0.2, -0.5, 0.1, -0.5, 1.5, 0.1).unwrap();
    let (t, s) = (2.0f64, -1.0f64);
    assert!(rel(b.alpha(t, s), 1.5 * (0.2 * 3.0 + 0.1 * 1.0f64).exp()) < 1e-14);
    assert!(rel(b.alpha(s, t), 1.5 * (0.1 * 3.0 + 0.1 * 2.0f64).exp()) < 1e-14);
    assert!(rel(b.beta_plus(t, s), 1.5 * (-0.5 * 3.0 + 0.1 * 1.0f64).exp()) < 1e-14);
    assert!(rel(b.beta_minus(s, t), 1.5 * (-0.5 * 3.0 + 0.1 * 2.0f64).exp()) < 1e-14);
}
