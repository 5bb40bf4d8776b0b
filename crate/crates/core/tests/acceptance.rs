//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and fails
//! if any criterion fails.

use std::io::Write;
use std::time::Instant;

use lipcenter::families::{
    lemma4_bound, lemma4_integral, lip_budget_rho, make_exponential_bounds, sample_lemma4_tuples, LipBudget,
    NabcdParams, RhoParams,
};
use lipcenter::hypotheses::{assemble_report, compute_mn, HypothesisReport, HypothesisSettings};
use lipcenter::lab::{
    growth_samples, invariance_residual, invariance_samples, lipschitz_growth_check, make_r4_example,
    make_test_perturbation, ValidationSettings,
};
use lipcenter::sampling;
use lipcenter::solver::{iterate_to_fixed_point, Discretization, GridSpec, Perturbation, Problem, SolverSettings, SolverState};
use lipcenter::trichotomy::{check_bounds, check_cocycle, check_splitting};
use lipcenter::NormSpec;
use nalgebra::DVector;
use rand::Rng;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn exp_params() -> RhoParams {
    RhoParams::exponential(0.0, -1.0, 0.0, -1.0, 1.0, 0.0)
}

fn exp_report(budget: &LipBudget) -> HypothesisReport {
    let bounds = make_exponential_bounds(0.0, -1.0, 0.0, -1.0, 1.0, 0.0).unwrap();
    assemble_report(&bounds, budget, &HypothesisSettings::default()).unwrap()
}

fn exp_solve(spec: GridSpec, budget: &LipBudget, report: &HypothesisReport) -> (Discretization, SolverState) {
    let ex = make_r4_example(&NabcdParams::from_rho(&exp_params())).unwrap();
    let f = make_test_perturbation(budget.clone(), 4).perturbation;
    let pr = Problem::new(ex.op, ex.chart, ex.bounds, f, NormSpec::MaxNorm).unwrap();
    iterate_to_fixed_point(pr, spec, Some(report), &SolverSettings::default()).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

fn criterion_1() -> Outcome {
    let mut rng = sampling::rng(1);
    let mut worst = 0.0f64;
    let mut in_range = true;
    for _ in 0..1000 {
        let sigma: f64 = rng.gen_range(1e-6..0.5);
        let omega: f64 = rng.gen_range(1e-6..(0.5 - sigma));
        let (m, n) = compute_mn(sigma, omega).unwrap();
        let (a, b, c) = ((m - 1.0) / sigma, n / omega, m * (1.0 + n));
        worst = worst.max(rel(a, b)).max(rel(b, c)).max(rel(a, c));
        in_range &= 1.0 < m && m < 2.0 && 0.0 < n && n < 1.0;
    }
    Outcome {
        id: 1,
        name: "M/N identity",
        pass: worst <= 1e-10 && in_range,
        detail: format!("worst relative gap {worst:.2e}, ranges ok: {in_range}"),
    }
}

fn criterion_2() -> Outcome {
    let tuples = sample_lemma4_tuples(&mut sampling::rng(2), 200);
    let mut worst = 0.0f64;
    for &(l, nu, e, p) in &tuples {
        let i = lemma4_integral(l, nu, e, p, 1e-12).unwrap();
        let b = lemma4_bound(l, nu, e, p).unwrap();
        worst = worst.max(i / b);
    }
    let eb = lemma4_bound(-2.0, -2.0, 0.0, 0.0).unwrap();
    let ei = lemma4_integral(-2.0, -2.0, 0.0, 0.0, 1e-12).unwrap();
    let eq_ok = (eb - 1.0 / 3.0).abs() <= 1e-9 && (ei - 1.0 / 3.0).abs() <= 1e-9;
    Outcome {
        id: 2,
        name: "Lemma 4 dominance",
        pass: worst <= 1.0 + 1e-9 && eq_ok && tuples.len() == 200,
        detail: format!("max integral/bound {worst:.12}, equality case bound {eb:.12} integral {ei:.12}"),
    }
}

fn criterion_3(r: &HypothesisReport) -> Outcome {
    let checks = [
        ("sigma", (r.sigma - 0.05).abs() <= 1e-6),
        ("omega", (r.omega - 0.025).abs() <= 1e-6),
        ("M", (r.m - 1.054118).abs() <= 1e-5),
        ("N", (r.n - 0.027059).abs() <= 1e-5),
        ("q", r.contraction_factor <= 0.08),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Outcome {
        id: 3,
        name: "sigma/omega/M/N on the exponential setup",
        pass: failed.is_empty() && r.pass,
        detail: format!(
            "sigma {:.9} omega {:.9} M {:.7} N {:.7} q {:.7}{}",
            r.sigma,
            r.omega,
            r.m,
            r.n,
            r.contraction_factor,
            if failed.is_empty() { String::new() } else { format!(", out of tolerance: {failed:?}") }
        ),
    }
}

fn criterion_4() -> Outcome {
    let ex = make_r4_example(&NabcdParams::from_rho(&exp_params())).unwrap();
    let report = exp_report(&LipBudget::zero());
    let op = ex.op.clone();
    let pr = Problem::new(ex.op, ex.chart, ex.bounds, Perturbation::zero(4), NormSpec::MaxNorm).unwrap();
    let (disc, state) = iterate_to_fixed_point(pr, GridSpec::default(), Some(&report), &SolverSettings::default()).unwrap();
    let g = &disc.grid;
    let (mut phi_ratio, mut x_err) = (0.0f64, 0.0f64);
    for i in 0..g.s.n {
        for l in 0..g.n_xi_total {
            let xi = g.xi_point(l);
            let nx = xi.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if nx > 0.0 {
                let ph = state.phi.get(i, l).iter().fold(0.0f64, |a, v| a.max(v.abs()));
                phi_ratio = phi_ratio.max(ph / nx);
            }
            for j in 0..g.t.n {
                let tt = op.evaluate(g.t.node(j), g.s.node(i)).unwrap();
                let v = tt * DVector::from_vec(vec![xi[0], xi[1], 0.0, 0.0]);
                let x = state.x.get(j, i, l);
                x_err = x_err.max((x[0] - v[0]).abs()).max((x[1] - v[1]).abs());
            }
        }
    }
    Outcome {
        id: 4,
        name: "zero perturbation",
        pass: state.iterations == 1 && phi_ratio <= 1e-10 && x_err <= 1e-8,
        detail: format!("iterations {}, sup|phi|/|xi| {phi_ratio:.2e}, |x - TPxi| {x_err:.2e}", state.iterations),
    }
}

fn criterion_5(report: &HypothesisReport, state: &SolverState) -> Outcome {
    let q = report.contraction_factor;
    let late: Vec<f64> = state
        .history
        .iter()
        .filter(|h| h.iteration > 2)
        .filter_map(|h| h.ratio)
        .collect();
    let worst = late.iter().copied().fold(0.0f64, f64::max);
    let last = state.history.last().map_or(f64::NAN, |h| h.d_second);
    Outcome {
        id: 5,
        name: "contraction rate",
        pass: worst <= q * 1.1 && state.iterations <= 12 && state.converged && last < 1e-8,
        detail: format!(
            "iterations {}, ratios after iteration 2 {:?} (limit {:.4}), final step {last:.2e}",
            state.iterations,
            late.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>(),
            q * 1.1
        ),
    }
}

fn main_run() -> Vec<Outcome> {
    let mut out = Vec::new();
    out.push(criterion_1());
    out.push(criterion_2());

    let budget = lip_budget_rho(&exp_params(), 0.05, 1.0).unwrap();
    let report = exp_report(&budget);
    out.push(criterion_3(&report));
    out.push(criterion_4());

    let t0 = Instant::now();
    let (disc, state) = exp_solve(GridSpec::default(), &budget, &report);
    let solve_time = t0.elapsed().as_secs_f64();
    out.push({
        let mut o = criterion_5(&report, &state);
        o.detail.push_str(&format!(" solve {solve_time:.1}s"));
        o
    });
    let (fine_disc, fine_state) = exp_solve(GridSpec::default().refined(), &budget, &report);

    let st = ValidationSettings::default();
    out.push({
        let samples = invariance_samples(&disc, &st);
        let coarse = invariance_residual(&disc, &state, &samples, None, &st).unwrap();
        let fine = invariance_residual(&fine_disc, &fine_state, &samples, None, &st).unwrap();
        let control = invariance_residual(&disc, &state, &samples, Some(&[0.0, 0.0, 0.1, 0.0]), &st).unwrap();
        let factor = coarse.worst / fine.worst;
        Outcome {
            id: 6,
            name: "invariance",
            pass: samples.len() == 200 && coarse.worst <= 5e-3 && factor >= 1.8 && control.worst >= 0.05,
            detail: format!(
                "worst residual {:.3e} ({} skipped), refined {:.3e}, factor {factor:.2}, off-graph control {:.3}",
                coarse.worst, coarse.skipped, fine.worst, control.worst
            ),
        }
    });
    out.push({
        let samples = growth_samples(&disc, &st);
        let g = lipschitz_growth_check(&disc, &state, &report, &samples, &st).unwrap();
        Outcome {
            id: 7,
            name: "Lipschitz growth",
            pass: g.samples == 500 && g.pass && (g.growth_factor - g.m_one_plus_n).abs() <= 1e-10 * g.growth_factor,
            detail: format!(
                "worst ratio {:.6} against N/omega = {:.6} (M(1+N) = {:.6})",
                g.worst_ratio, g.growth_factor, g.m_one_plus_n
            ),
        }
    });
    out.push(criterion_8());
    out.push({
        let samples = disc.transport_samples(200, sampling::DEFAULT_SEED);
        let coarse = disc.verify_graph_transport_detailed(&state, &samples).unwrap();
        let fine = fine_disc.verify_graph_transport_detailed(&fine_state, &samples).unwrap();
        let factor = coarse.worst / fine.worst;
        Outcome {
            id: 9,
            name: "graph transport",
            pass: coarse.worst <= 5e-4 && factor >= 2.0,
            detail: format!(
                "worst residual {:.3e} ({} of {} samples left the box), refined {:.3e}, factor {factor:.2}",
                coarse.worst,
                coarse.skipped,
                samples.len(),
                fine.worst
            ),
        }
    });
    out
}

fn criterion_8() -> Outcome {
    let p = NabcdParams::from_rho(&RhoParams::exponential(0.2, -0.5, 0.1, -0.5, 1.5, 0.1));
    let ex = make_r4_example(&p).unwrap();
    let pairs = sampling::uniform_pairs(&mut sampling::rng(8), -5.0, 5.0, 400);
    let triples = sampling::uniform_triples(&mut sampling::rng(9), -5.0, 5.0, 200);
    let split = check_splitting(&ex.chart.splitting(), &ex.op, &pairs, NormSpec::MaxNorm, 1e-8).unwrap();
    let cocycle = check_cocycle(&ex.op, &triples, NormSpec::MaxNorm).unwrap();
    let bounds = check_bounds(&ex.op, &ex.chart.splitting(), &ex.bounds, NormSpec::MaxNorm, &pairs, 1e-8).unwrap();
    let excess = [bounds.d1.worst_ratio, bounds.d2.worst_ratio, bounds.d3.worst_ratio]
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max)
        - 1.0;
    let integ = ex.integrated_operator(1e-11);
    let mut agree = 0.0f64;
    for &(t, s) in pairs.iter().take(100) {
        let a = ex.op.evaluate(t, s).unwrap();
        let b = integ.evaluate(t, s).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            if *x != 0.0 {
                agree = agree.max(rel(*x, *y));
            } else {
                agree = agree.max(y.abs());
            }
        }
    }
    Outcome {
        id: 8,
        name: "structural axioms",
        pass: split.worst <= 1e-8 && cocycle <= 1e-8 && excess <= 1e-8 && agree <= 1e-6,
        detail: format!(
            "splitting {:.1e}, cocycle {cocycle:.1e}, bound excess {excess:.1e}, closed vs integrated {agree:.1e}",
            split.worst
        ),
    }
}

#[test]
fn acceptance_criteria() {
    let outcomes = main_run();
    let mut stdout = std::io::stdout();
    for o in &outcomes {
        writeln!(
            stdout,
            "criterion {} {:<42} {}  {}",
            o.id,
            o.name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        )
        .unwrap();
    }
    let failed: Vec<u32> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert_eq!(outcomes.len(), 9);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
