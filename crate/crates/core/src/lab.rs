//! The explicit four-dimensional example, test perturbations, the perturbed
//! flow and end-to-end checks of the invariant manifold.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::families::{check_nabcd_condition, default_condition_samples, make_nabcd_bounds, LipBudget, NabcdConditionReport, NabcdParams};
use crate::hypotheses::HypothesisReport;
use crate::norm::NormSpec;
use crate::ode::{self, OdeOptions};
use crate::sampling;
use crate::scalar::{ScalarFn, Side};
use crate::solver::{Discretization, Perturbation, SolverState};
use crate::trichotomy::{BoundFamily, EvolutionOperator, SplittingChart};
use crate::{Error, Result};

/// `eps*(t) = (ln eps)'(t) (cos t - 1)/2 - ln eps(t) sin t / 2`, and `0` at `t = 0`.
pub fn eps_star(log_eps: &ScalarFn, t: f64) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    log_eps.derivative(t, Side::Right) * 0.5 * (t.cos() - 1.0) - log_eps.eval(t) * 0.5 * t.sin()
}

/// Diagonal system in `R^4` whose evolution operator is known in closed form,
/// with coordinate splitting `E = (u, v)`, `F+ = w`, `F- = z`.
#[derive(Clone, Debug)]
pub struct R4Example {
    pub params: NabcdParams,
    pub op: EvolutionOperator,
    pub chart: SplittingChart,
    pub bounds: BoundFamily,
    pub condition: NabcdConditionReport,
}

/// Component order `(u, v, w, z)`: log-growth, sign of the `g` term, log-eps.
fn components(p: &NabcdParams) -> [(ScalarFn, f64, ScalarFn); 4] {
    [
        (p.log_g_a.clone(), -1.0, p.log_eps_a.clone()),
        (p.log_g_c.clone(), 1.0, p.log_eps_c.clone()),
        (p.log_g_d.clone(), -1.0, p.log_eps_d.clone()),
        (p.log_g_b.clone(), 1.0, p.log_eps_b.clone()),
    ]
}

pub fn make_r4_example(p: &NabcdParams) -> Result<R4Example> {
    let bounds = make_nabcd_bounds(p)?;
    let condition = check_nabcd_condition(p, &default_condition_samples(), 1e-12);
    let comp = components(p);
    let c2 = comp.clone();
    let op = EvolutionOperator::closed_form(4, move |t, s| {
        let (ct, cs) = (0.5 * (t.cos() - 1.0), 0.5 * (s.cos() - 1.0));
        let d: Vec<f64> = comp
            .iter()
            .map(|(lg, sg, le)| (sg * (lg.eval(t) - lg.eval(s)) + ct * le.eval(t) - cs * le.eval(s)).exp())
            .collect();
        DMatrix::from_diagonal(&DVector::from_vec(d))
    })
    .with_generator(move |t| generator_diag(&c2, t));
    Ok(R4Example {
        params: p.clone(),
        op,
        chart: SplittingChart::coordinate(2, 1, 1),
        bounds,
        condition,
    })
}

fn generator_diag(comp: &[(ScalarFn, f64, ScalarFn); 4], t: f64) -> DMatrix<f64> {
    let d: Vec<f64> = comp
        .iter()
        .map(|(lg, sg, le)| sg * lg.derivative(t, Side::Right) + eps_star(le, t))
        .collect();
    DMatrix::from_diagonal(&DVector::from_vec(d))
}

impl R4Example {
    pub fn generator(&self, t: f64) -> DMatrix<f64> {
        generator_diag(&components(&self.params), t)
    }

    /// The same operator obtained by integrating the linear equation.
    pub fn integrated_operator(&self, tol: f64) -> EvolutionOperator {
        let comp = components(&self.params);
        EvolutionOperator::integrated(4, move |t| generator_diag(&comp, t), tol)
    }
}

/// `w(v)_i = sin v_{i+1}` (indices mod `n`): `1`-Lipschitz in the max norm, `w(0) = 0`.
pub fn rotated_sine(v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for i in 0..n {
        out[i] = v[(i + 1) % n].sin();
    }
}

/// `f(t, v) = budget(t) w(v)`.
#[derive(Clone, Debug)]
pub struct TestPerturbation {
    pub budget: LipBudget,
    pub perturbation: Perturbation,
}

pub fn make_test_perturbation(budget: LipBudget, dim: usize) -> TestPerturbation {
    let perturbation = if budget.is_zero() {
        Perturbation::zero(dim)
    } else {
        let b = budget.clone();
        Perturbation::new(dim, budget.clone(), move |t, v, out| {
            rotated_sine(v, out);
            let l = b.eval(t);
            out.iter_mut().for_each(|o| *o *= l);
        })
    };
    TestPerturbation { budget, perturbation }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AuditReport {
    pub samples: usize,
    /// Largest `|f(t,v) - f(t,w)| / (budget(t) |v - w|)`.
    pub lipschitz_ratio: f64,
    /// Largest `|f(t,v)| / (budget(t) |v|)`.
    pub growth_ratio: f64,
    pub zero_residual: f64,
    pub pass: bool,
}

impl TestPerturbation {
    /// Monte-Carlo check of `Lip(f_t) <= budget(t)` and `f(t, 0) = 0`.
    pub fn audit(&self, n: usize, seed: u64, t_half: f64, v_half: f64, norm: NormSpec) -> AuditReport {
        let dim = self.perturbation.dim();
        let mut rng = sampling::rng(seed);
        let (mut fa, mut fb) = (vec![0.0; dim], vec![0.0; dim]);
        let zero = vec![0.0; dim];
        let mut rep = AuditReport {
            samples: n,
            lipschitz_ratio: 0.0,
            growth_ratio: 0.0,
            zero_residual: 0.0,
            pass: true,
        };
        for _ in 0..n {
            let t = rng.gen_range(-t_half..=t_half);
            let a = sampling::point_in_box(&mut rng, v_half, dim);
            let b = sampling::point_in_box(&mut rng, v_half, dim);
            self.perturbation.eval(t, &zero, &mut fa);
            rep.zero_residual = rep.zero_residual.max(norm.vector(&fa));
            let l = self.budget.eval(t);
            self.perturbation.eval(t, &a, &mut fa);
            self.perturbation.eval(t, &b, &mut fb);
            if l > 0.0 {
                let diff: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| x - y).collect();
                let dv: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
                rep.lipschitz_ratio = rep.lipschitz_ratio.max(norm.vector(&diff) / (l * norm.vector(&dv)));
                rep.growth_ratio = rep.growth_ratio.max(norm.vector(&fa) / (l * norm.vector(&a)));
            } else if norm.vector(&fa) > 0.0 || norm.vector(&fb) > 0.0 {
                rep.lipschitz_ratio = f64::INFINITY;
            }
        }
        rep.pass = rep.lipschitz_ratio <= 1.0 + 1e-12 && rep.growth_ratio <= 1.0 + 1e-12 && rep.zero_residual == 0.0;
        rep
    }
}

/// `Psi_tau(s, v) = (s + tau, v(s + tau))` for `v' = A(t) v + f(t, v)`.
pub fn flow_psi(op: &EvolutionOperator, f: &Perturbation, tau: f64, s: f64, v: &[f64], tol: f64) -> Result<(f64, Vec<f64>)> {
    if !op.has_generator() {
        return Err(Error::Precondition("the flow needs the generator A(t)".into()));
    }
    let n = op.dim();
    if v.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: v.len() });
    }
    let mut fbuf = vec![0.0; n];
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| {
        let a = op.generator(t).expect("generator present");
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += a[(i, j)] * y[j];
            }
            dy[i] = acc;
        }
        f.eval(t, y, &mut fbuf);
        for i in 0..n {
            dy[i] += fbuf[i];
        }
    };
    let end = ode::solve(rhs, s, v, s + tau, &OdeOptions::with_tol(tol))?;
    Ok((s + tau, end))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationSettings {
    pub samples: usize,
    pub tau_half: f64,
    /// Fraction of the `xi`-box the starting points are drawn from.
    pub box_fraction: f64,
    pub ode_tol: f64,
    pub floor: f64,
    pub growth_samples: usize,
    /// `t - s` range of the Lipschitz growth check.
    pub growth_span: f64,
    pub growth_tol: f64,
    pub seed: u64,
}

impl Default for ValidationSettings {
    fn default() -> Self {
        Self {
            samples: 200,
            tau_half: 2.0,
            box_fraction: 0.9,
            ode_tol: 1e-10,
            floor: 1e-6,
            growth_samples: 500,
            growth_span: 3.0,
            growth_tol: 1e-2,
            seed: sampling::DEFAULT_SEED,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvarianceSample {
    pub tau: f64,
    pub s: f64,
    pub xi: Vec<f64>,
    pub residual: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub worst: f64,
    pub mean: f64,
    pub evaluated: usize,
    /// Samples whose end point left the `xi`-box.
    pub skipped: usize,
    pub per_sample: Vec<InvarianceSample>,
}

/// `(tau, s, xi)` with `|s|, |s + tau| <= S` and `xi` in the shrunk box.
pub fn invariance_samples(disc: &Discretization, st: &ValidationSettings) -> Vec<(f64, f64, Vec<f64>)> {
    let mut rng = sampling::rng(st.seed);
    let big_s = disc.grid.spec.s_half;
    let half = st.box_fraction * disc.grid.spec.xi_half;
    let mut out = Vec::with_capacity(st.samples);
    while out.len() < st.samples {
        let tau: f64 = rng.gen_range(-st.tau_half..=st.tau_half);
        let lo = (-big_s).max(-big_s - tau);
        let hi = big_s.min(big_s - tau);
        if lo > hi {
            continue;
        }
        let s = rng.gen_range(lo..=hi);
        out.push((tau, s, sampling::point_in_box(&mut rng, half, disc.grid.k)));
    }
    out
}

/// Flows `(s, xi + phi(s, xi) + offset)` by `tau` and measures the distance of
/// the end point from the graph, relative to `max(|xi|, floor)`.
pub fn invariance_residual(
    disc: &Discretization,
    state: &SolverState,
    samples: &[(f64, f64, Vec<f64>)],
    offset: Option<&[f64]>,
    st: &ValidationSettings,
) -> Result<InvarianceReport> {
    let pr = &disc.problem;
    let (k, n) = (disc.grid.k, pr.chart.dim());
    let results: Vec<Result<Option<f64>>> = Execution::default().map(samples.len(), |i| {
        let (tau, s, ref xi) = samples[i];
        let mut c = vec![0.0; n];
        c[..k].copy_from_slice(xi);
        disc.phi_eval(&state.phi, s, xi, &mut c[k..]);
        if let Some(o) = offset {
            c.iter_mut().zip(o).for_each(|(a, b)| *a += b);
        }
        let v = pr.chart.embed(s, &c);
        let (t, end) = flow_psi(&pr.op, &pr.perturbation, tau, s, v.as_slice(), st.ode_tol)?;
        let ce = pr.chart.coords(t, &DVector::from_vec(end))?;
        let center = &ce.as_slice()[..k];
        if center.iter().any(|x| x.abs() > disc.grid.spec.xi_half) {
            return Ok(None);
        }
        let mut on_graph = vec![0.0; n - k];
        disc.phi_eval(&state.phi, t, center, &mut on_graph);
        let mut diff = vec![0.0; n];
        for j in 0..n - k {
            diff[k + j] = ce[k + j] - on_graph[j];
        }
        let mut xc = vec![0.0; n];
        xc[..k].copy_from_slice(xi);
        let denom = pr.state_norm(s, &xc).max(st.floor);
        Ok(Some(pr.state_norm(t, &diff) / denom))
    });
    let mut per_sample = Vec::with_capacity(samples.len());
    let (mut worst, mut sum, mut evaluated, mut skipped) = (0.0f64, 0.0, 0usize, 0usize);
    for ((tau, s, xi), r) in samples.iter().zip(results) {
        let r = r?;
        match r {
            Some(v) => {
                worst = worst.max(v);
                sum += v;
                evaluated += 1;
            }
            None => skipped += 1,
        }
        per_sample.push(InvarianceSample {
            tau: *tau,
            s: *s,
            xi: xi.clone(),
            residual: r,
        });
    }
    if skipped > 0 {
        log::warn!("{skipped} invariance samples left the xi-box and were skipped");
    }
    Ok(InvarianceReport {
        worst,
        mean: if evaluated > 0 { sum / evaluated as f64 } else { f64::NAN },
        evaluated,
        skipped,
        per_sample,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GrowthReport {
    pub worst_ratio: f64,
    /// `N / omega`
    pub growth_factor: f64,
    /// `M (1 + N)`; equal to `N / omega` by the defining quadratic.
    pub m_one_plus_n: f64,
    pub samples: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// `(t, s, xi, xi_bar)` with `|s| <= S`, `|t - s| <= span`, `xi != xi_bar`.
pub fn growth_samples(disc: &Discretization, st: &ValidationSettings) -> Vec<(f64, f64, Vec<f64>, Vec<f64>)> {
    let mut rng = sampling::rng(st.seed ^ 0x9e37_79b9);
    let big_s = disc.grid.spec.s_half;
    let half = st.box_fraction * disc.grid.spec.xi_half;
    (0..st.growth_samples)
        .map(|_| {
            let s = rng.gen_range(-big_s..=big_s);
            let t = s + rng.gen_range(-st.growth_span..=st.growth_span);
            let a = sampling::point_in_box(&mut rng, half, disc.grid.k);
            let b = sampling::point_in_box(&mut rng, half, disc.grid.k);
            (t, s, a, b)
        })
        .collect()
}

/// Largest `|Psi_{t-s}(s, xi + phi) - Psi_{t-s}(s, xi_bar + phi)| / ((N / omega) alpha_{t,s} |xi - xi_bar|)`.
pub fn lipschitz_growth_check(
    disc: &Discretization,
    state: &SolverState,
    report: &HypothesisReport,
    samples: &[(f64, f64, Vec<f64>, Vec<f64>)],
    st: &ValidationSettings,
) -> Result<GrowthReport> {
    if !(report.sigma > 0.0 && report.omega > 0.0) {
        return Err(Error::Precondition(
            "N / omega is undefined when sigma = omega = 0 (zero perturbation)".into(),
        ));
    }
    let pr = &disc.problem;
    let (k, n) = (disc.grid.k, pr.chart.dim());
    let growth = report.n / report.omega;
    let start = |s: f64, xi: &[f64]| {
        let mut c = vec![0.0; n];
        c[..k].copy_from_slice(xi);
        disc.phi_eval(&state.phi, s, xi, &mut c[k..]);
        pr.chart.embed(s, &c)
    };
    let ratios: Vec<Result<f64>> = Execution::default().map(samples.len(), |i| {
        let (t, s, ref a, ref b) = samples[i];
        let dxi: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let mut c = vec![0.0; n];
        c[..k].copy_from_slice(&dxi);
        let dn = pr.state_norm(s, &c);
        if dn == 0.0 {
            return Err(Error::InvalidParameters("xi and xi_bar coincide".into()));
        }
        let (_, va) = flow_psi(&pr.op, &pr.perturbation, t - s, s, start(s, a).as_slice(), st.ode_tol)?;
        let (_, vb) = flow_psi(&pr.op, &pr.perturbation, t - s, s, start(s, b).as_slice(), st.ode_tol)?;
        let diff: Vec<f64> = va.iter().zip(&vb).map(|(x, y)| x - y).collect();
        Ok(pr.norm.vector(&diff) / (growth * pr.bounds.alpha(t, s) * dn))
    });
    let mut worst: f64 = 0.0;
    for r in ratios {
        worst = worst.max(r?);
    }
    Ok(GrowthReport {
        worst_ratio: worst,
        growth_factor: growth,
        m_one_plus_n: report.m * (1.0 + report.n),
        samples: samples.len(),
        tolerance: st.growth_tol,
        pass: worst <= 1.0 + st.growth_tol,
    })
}
