//! Concrete trichotomy bound families, their hypothesis predicates and the
//! Lipschitz budgets that make the perturbation small enough.
//!
//! The nonuniform `(g_a, g_b, g_c, g_d)` family is stored through the
//! logarithms of its functions so that rapidly growing rates (for instance
//! `rho(t) = t^3 + t`) can be evaluated without overflow.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::quadrature::{self, Direction, HalfLineOptions};
use crate::sampling;
use crate::scalar::{ScalarFn, Side};
use crate::trichotomy::{BoundFamily, FamilyTag};
use crate::{Error, Result};

/// Horizon of the default sample grids used by the parameter checks.
pub const CHECK_HORIZON: f64 = 20.0;

/// Odd, increasing (resp. increasing and unbounded) time reparametrisations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MonotoneFn {
    #[default]
    Identity,
    /// `t^3 + t`
    Cubic,
    Sinh,
    Linear {
        slope: f64,
    },
}

impl MonotoneFn {
    pub fn to_scalar(self) -> ScalarFn {
        match self {
            MonotoneFn::Identity => ScalarFn::identity(),
            MonotoneFn::Cubic => ScalarFn::with_derivative(|t| t * t * t + t, |t| 3.0 * t * t + 1.0),
            MonotoneFn::Sinh => ScalarFn::with_derivative(f64::sinh, f64::cosh),
            MonotoneFn::Linear { slope } => ScalarFn::with_derivative(move |t| slope * t, move |_| slope),
        }
    }
}

/// `a * x` with the convention `0 * inf = 0`.
#[inline]
fn lin(a: f64, x: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * x
    }
}

fn ln_of(f: &ScalarFn) -> ScalarFn {
    let v = f.clone();
    if f.has_closed_derivative() {
        let d = f.clone();
        ScalarFn::with_derivative(move |t| v.eval(t).ln(), move |t| d.derivative(t, Side::Right) / d.eval(t))
    } else {
        ScalarFn::new(move |t| v.eval(t).ln())
    }
}

/// Nonuniform `(g_a, g_b, g_c, g_d)` parameters, stored as `ln g_i` and
/// `ln eps_i`.
#[derive(Clone, Debug)]
pub struct NabcdParams {
    pub log_g_a: ScalarFn,
    pub log_g_b: ScalarFn,
    pub log_g_c: ScalarFn,
    pub log_g_d: ScalarFn,
    pub log_eps_a: ScalarFn,
    pub log_eps_b: ScalarFn,
    pub log_eps_c: ScalarFn,
    pub log_eps_d: ScalarFn,
}

impl NabcdParams {
    /// From the functions themselves; closed-form derivatives carry over.
    #[allow(clippy::too_many_arguments)]
    pub fn from_functions(
        g_a: &ScalarFn,
        g_b: &ScalarFn,
        g_c: &ScalarFn,
        g_d: &ScalarFn,
        eps_a: &ScalarFn,
        eps_b: &ScalarFn,
        eps_c: &ScalarFn,
        eps_d: &ScalarFn,
    ) -> Self {
        Self {
            log_g_a: ln_of(g_a),
            log_g_b: ln_of(g_b),
            log_g_c: ln_of(g_c),
            log_g_d: ln_of(g_d),
            log_eps_a: ln_of(eps_a),
            log_eps_b: ln_of(eps_b),
            log_eps_c: ln_of(eps_c),
            log_eps_d: ln_of(eps_d),
        }
    }

    /// Substitution `g_i = exp(-i rho)`, `eps_i = D exp(eps |rho|)`.
    pub fn from_rho(p: &RhoParams) -> Self {
        let rho = p.rho.to_scalar();
        let g = |k: f64| {
            let (r, dr) = (rho.clone(), rho.clone());
            ScalarFn::with_derivative(move |t| lin(-k, r.eval(t)), move |t| -k * dr.derivative(t, Side::Right))
        };
        let (big_d, eps) = (p.big_d, p.eps);
        let (r, dr) = (rho.clone(), rho.clone());
        let le = ScalarFn::with_derivative(
            move |t| big_d.ln() + lin(eps, r.eval(t).abs()),
            move |t| eps * r_sign(dr.eval(t)) * dr.derivative(t, Side::Right),
        );
        Self {
            log_g_a: g(p.a),
            log_g_b: g(p.b),
            log_g_c: g(p.c),
            log_g_d: g(p.d),
            log_eps_a: le.clone(),
            log_eps_b: le.clone(),
            log_eps_c: le.clone(),
            log_eps_d: le,
        }
    }

    /// Copy whose derivatives are all taken by finite differences.
    pub fn with_finite_differences(&self) -> Self {
        Self {
            log_g_a: self.log_g_a.without_derivative(),
            log_g_b: self.log_g_b.without_derivative(),
            log_g_c: self.log_g_c.without_derivative(),
            log_g_d: self.log_g_d.without_derivative(),
            log_eps_a: self.log_eps_a.without_derivative(),
            log_eps_b: self.log_eps_b.without_derivative(),
            log_eps_c: self.log_eps_c.without_derivative(),
            log_eps_d: self.log_eps_d.without_derivative(),
        }
    }

    pub fn g_a(&self, t: f64) -> f64 {
        self.log_g_a.eval(t).exp()
    }
    pub fn g_b(&self, t: f64) -> f64 {
        self.log_g_b.eval(t).exp()
    }
    pub fn g_c(&self, t: f64) -> f64 {
        self.log_g_c.eval(t).exp()
    }
    pub fn g_d(&self, t: f64) -> f64 {
        self.log_g_d.eval(t).exp()
    }
    pub fn eps_a(&self, t: f64) -> f64 {
        self.log_eps_a.eval(t).exp()
    }
    pub fn eps_b(&self, t: f64) -> f64 {
        self.log_eps_b.eval(t).exp()
    }
    pub fn eps_c(&self, t: f64) -> f64 {
        self.log_eps_c.eval(t).exp()
    }
    pub fn eps_d(&self, t: f64) -> f64 {
        self.log_eps_d.eval(t).exp()
    }

    /// Positivity of the `g`'s (finite logarithms) and `eps >= 1` at samples.
    pub fn validate(&self, samples: &[f64]) -> Result<()> {
        let gs = [
            ("g_a", &self.log_g_a),
            ("g_b", &self.log_g_b),
            ("g_c", &self.log_g_c),
            ("g_d", &self.log_g_d),
        ];
        let es = [
            ("eps_a", &self.log_eps_a),
            ("eps_b", &self.log_eps_b),
            ("eps_c", &self.log_eps_c),
            ("eps_d", &self.log_eps_d),
        ];
        for &t in samples {
            for (name, f) in gs {
                let v = f.eval(t);
                if v.is_nan() || v == f64::NEG_INFINITY {
                    return Err(Error::InvalidParameters(format!("{name}({t}) is not positive")));
                }
            }
            for (name, f) in es {
                let v = f.eval(t);
                if !(v >= -1e-14) {
                    return Err(Error::InvalidParameters(format!("{name}({t}) < 1")));
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn r_sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Exponential rates in `rho(t)` with nonuniform part `D exp(eps |rho(s)|)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    #[serde(rename = "D")]
    pub big_d: f64,
    pub eps: f64,
    #[serde(default)]
    pub rho: MonotoneFn,
}

impl RhoParams {
    pub fn exponential(a: f64, b: f64, c: f64, d: f64, big_d: f64, eps: f64) -> Self {
        Self {
            a,
            b,
            c,
            d,
            big_d,
            eps,
            rho: MonotoneFn::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_d_eps(self.big_d, self.eps)?;
        let rho = self.rho.to_scalar();
        let grid = sampling::log_symmetric_grid(CHECK_HORIZON, sampling::CHECK_POINTS);
        for w in grid.windows(2) {
            if !(rho.eval(w[1]) > rho.eval(w[0])) {
                return Err(Error::InvalidParameters(format!(
                    "rho is not strictly increasing on [{}, {}]",
                    w[0], w[1]
                )));
            }
        }
        for &t in &grid {
            let (p, m) = (rho.eval(t), rho.eval(-t));
            if (p + m).abs() > 1e-12 * (1.0 + p.abs()) {
                return Err(Error::InvalidParameters(format!("rho is not odd at t={t}")));
            }
        }
        Ok(())
    }
}

/// Polynomial rates in `mu(t)` with nonuniform part `D (|mu(s)| + 1)^eps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    #[serde(rename = "D")]
    pub big_d: f64,
    pub eps: f64,
    #[serde(default)]
    pub mu: MonotoneFn,
}

impl MuParams {
    pub fn polynomial(a: f64, b: f64, c: f64, d: f64, big_d: f64, eps: f64) -> Self {
        Self {
            a,
            b,
            c,
            d,
            big_d,
            eps,
            mu: MonotoneFn::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_d_eps(self.big_d, self.eps)?;
        let mu = self.mu.to_scalar();
        for t in sampling::log_symmetric_grid(CHECK_HORIZON, sampling::CHECK_POINTS) {
            let dm = mu.derivative(t, Side::Right);
            if !(dm > 0.0) {
                return Err(Error::InvalidParameters(format!("mu'({t}) = {dm} is not positive")));
            }
        }
        Ok(())
    }
}

fn check_d_eps(big_d: f64, eps: f64) -> Result<()> {
    if !(big_d >= 1.0) || !big_d.is_finite() {
        return Err(Error::InvalidParameters(format!("D must be >= 1, got {big_d}")));
    }
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::InvalidParameters(format!("eps must be >= 0, got {eps}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub enum FamilyParams {
    Generic,
    Nabcd(NabcdParams),
    Rho(RhoParams),
    Mu(MuParams),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NabcdConditionReport {
    /// Smallest sampled value of the left-hand side.
    pub min_ratio: f64,
    pub at: (f64, f64),
    pub samples: usize,
    pub pass: bool,
}

/// Samples the growth condition that makes the three-branch `alpha` dominate
/// the center flow, over pairs with `t >= s`.
pub fn check_nabcd_condition(p: &NabcdParams, samples: &[(f64, f64)], tol: f64) -> NabcdConditionReport {
    let mut min = f64::INFINITY;
    let mut at = (f64::NAN, f64::NAN);
    for &(t, s) in samples {
        if t < s {
            continue;
        }
        let l = p.log_g_a.eval(s) + p.log_g_c.eval(s) - p.log_g_a.eval(t) - p.log_g_c.eval(t)
            + 0.5 * (t.cos() - 1.0) * (p.log_eps_a.eval(t) - p.log_eps_c.eval(t))
            + 0.5 * (s.cos() - 1.0) * (p.log_eps_c.eval(s) - p.log_eps_a.eval(s));
        if l < min || l.is_nan() {
            min = l;
            at = (t, s);
        }
    }
    let min_ratio = min.exp();
    NabcdConditionReport {
        min_ratio,
        at,
        samples: samples.len(),
        pass: min_ratio >= 1.0 - tol,
    }
}

pub fn default_condition_samples() -> Vec<(f64, f64)> {
    sampling::pairs_ge(&sampling::log_symmetric_grid(CHECK_HORIZON, sampling::CHECK_POINTS))
}

/// The three-branch nonuniform `(g_a, g_b, g_c, g_d)` bounds.
pub fn make_nabcd_bounds(p: &NabcdParams) -> Result<BoundFamily> {
    p.validate(&sampling::log_symmetric_grid(CHECK_HORIZON, sampling::CHECK_POINTS))?;
    let cond = check_nabcd_condition(p, &default_condition_samples(), 1e-12);
    if !cond.pass {
        log::warn!(
            "growth condition fails: ratio {} at (t, s) = {:?}",
            cond.min_ratio,
            cond.at
        );
    }
    let (pa, pb, pd) = (p.clone(), p.clone(), p.clone());
    Ok(BoundFamily::new(
        FamilyTag::Nabcd,
        FamilyParams::Nabcd(p.clone()),
        move |t, s| {
            let l = if t > s {
                pa.log_g_a.eval(s) - pa.log_g_a.eval(t) + pa.log_eps_a.eval(s)
            } else if t == s {
                pa.log_eps_a.eval(s).min(pa.log_eps_c.eval(s))
            } else {
                pa.log_g_c.eval(t) - pa.log_g_c.eval(s) + pa.log_eps_c.eval(s)
            };
            l.exp()
        },
        move |t, s| (pd.log_g_d.eval(s) - pd.log_g_d.eval(t) + pd.log_eps_d.eval(s)).exp(),
        move |t, s| (pb.log_g_b.eval(t) - pb.log_g_b.eval(s) + pb.log_eps_b.eval(s)).exp(),
    ))
}

fn rho_family(p: &RhoParams, tag: FamilyTag) -> Result<BoundFamily> {
    p.validate()?;
    let rho = p.rho.to_scalar();
    let q = *p;
    let (r1, r2, r3) = (rho.clone(), rho.clone(), rho);
    Ok(BoundFamily::new(
        tag,
        FamilyParams::Rho(q),
        move |t, s| {
            let (rt, rs) = (r1.eval(t), r1.eval(s));
            let e = if t >= s { lin(q.a, rt - rs) } else { lin(q.c, rs - rt) };
            q.big_d * (e + lin(q.eps, rs.abs())).exp()
        },
        move |t, s| {
            let (rt, rs) = (r2.eval(t), r2.eval(s));
            q.big_d * (lin(q.d, rt - rs) + lin(q.eps, rs.abs())).exp()
        },
        move |t, s| {
            let (rt, rs) = (r3.eval(t), r3.eval(s));
            q.big_d * (lin(q.b, rs - rt) + lin(q.eps, rs.abs())).exp()
        },
    ))
}

pub fn make_rho_bounds(p: &RhoParams) -> Result<BoundFamily> {
    rho_family(p, FamilyTag::RhoExponential)
}

/// `rho = identity`.
pub fn make_exponential_bounds(a: f64, b: f64, c: f64, d: f64, big_d: f64, eps: f64) -> Result<BoundFamily> {
    rho_family(&RhoParams::exponential(a, b, c, d, big_d, eps), FamilyTag::Exponential)
}

fn mu_family(p: &MuParams, tag: FamilyTag) -> Result<BoundFamily> {
    p.validate()?;
    let mu = p.mu.to_scalar();
    let q = *p;
    let (m1, m2, m3) = (mu.clone(), mu.clone(), mu);
    let weight = move |ms: f64| (ms.abs() + 1.0).powf(q.eps);
    Ok(BoundFamily::new(
        tag,
        FamilyParams::Mu(q),
        move |t, s| {
            let (mt, ms) = (m1.eval(t), m1.eval(s));
            let base = if t >= s {
                (mt - ms + 1.0).powf(q.a)
            } else {
                (ms - mt + 1.0).powf(q.c)
            };
            q.big_d * base * weight(ms)
        },
        move |t, s| {
            let (mt, ms) = (m2.eval(t), m2.eval(s));
            q.big_d * (mt - ms + 1.0).powf(q.d) * weight(ms)
        },
        move |t, s| {
            let (mt, ms) = (m3.eval(t), m3.eval(s));
            q.big_d * (ms - mt + 1.0).powf(q.b) * weight(ms)
        },
    ))
}

pub fn make_mu_polynomial_bounds(p: &MuParams) -> Result<BoundFamily> {
    mu_family(p, FamilyTag::MuPolynomial)
}

/// `mu = identity`.
pub fn make_polynomial_bounds(a: f64, b: f64, c: f64, d: f64, big_d: f64, eps: f64) -> Result<BoundFamily> {
    mu_family(&MuParams::polynomial(a, b, c, d, big_d, eps), FamilyTag::Polynomial)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetTag {
    Zero,
    Nabcd,
    Rho,
    Mu,
    Custom,
}

/// Summary of the `gamma` used to build a budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GammaInfo {
    None,
    Constant { gamma: f64 },
    Function,
    RemarkDefault { anchor: f64 },
}

/// Maximal admissible `Lip(f_r)` as a function of `r`.
#[derive(Clone)]
pub struct LipBudget {
    pub tag: BudgetTag,
    pub delta: f64,
    pub gamma: GammaInfo,
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for LipBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LipBudget")
            .field("tag", &self.tag)
            .field("delta", &self.delta)
            .field("gamma", &self.gamma)
            .finish()
    }
}

impl LipBudget {
    pub fn zero() -> Self {
        Self {
            tag: BudgetTag::Zero,
            delta: 0.0,
            gamma: GammaInfo::None,
            f: Arc::new(|_| 0.0),
        }
    }

    pub fn custom(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            tag: BudgetTag::Custom,
            delta: f64::NAN,
            gamma: GammaInfo::Function,
            f: Arc::new(f),
        }
    }

    #[inline]
    pub fn eval(&self, r: f64) -> f64 {
        (self.f)(r)
    }

    pub fn is_zero(&self) -> bool {
        self.tag == BudgetTag::Zero
    }

    /// `kappa * budget`, with `delta` scaled accordingly.
    pub fn scaled(&self, kappa: f64) -> Self {
        let f = self.f.clone();
        Self {
            tag: self.tag,
            delta: self.delta * kappa,
            gamma: self.gamma.clone(),
            f: Arc::new(move |r| kappa * f(r)),
        }
    }
}

/// `gamma` for the nonuniform `(g_a, g_b, g_c, g_d)` budget.
#[derive(Clone, Debug)]
pub enum NabcdGamma {
    Function(ScalarFn),
    /// The canonical choice anchored at a fixed time `s`.
    RemarkDefault { anchor: f64 },
}

/// `(g_c g_d / eps_c)' / (g_c g_d / eps_c)`
fn bracket_cd(p: &NabcdParams, r: f64, side: Side) -> f64 {
    p.log_g_c.derivative(r, side) + p.log_g_d.derivative(r, side) - p.log_eps_c.derivative(r, side)
}

/// `(-1 / (g_a g_b eps_a))' * (g_a g_b eps_a)`
fn bracket_ab(p: &NabcdParams, r: f64, side: Side) -> f64 {
    p.log_g_a.derivative(r, side) + p.log_g_b.derivative(r, side) + p.log_eps_a.derivative(r, side)
}

/// `gamma(t)` of the canonical choice, one-sided at `t = 0`.
pub fn remark_gamma(p: &NabcdParams, anchor: f64, t: f64, side: Side) -> f64 {
    let s = anchor;
    let t1 = 0.5
        * (p.log_eps_c.eval(s) - p.log_g_c.eval(s) - p.log_g_d.eval(s) + p.log_g_c.eval(t) + p.log_g_d.eval(t)
            - p.log_eps_c.eval(t))
            .exp()
        * bracket_cd(p, t, side);
    let t2 = 0.5
        * (p.log_g_a.eval(s) + p.log_g_b.eval(s) + p.log_eps_a.eval(s)
            - p.log_g_a.eval(t)
            - p.log_g_b.eval(t)
            - p.log_eps_a.eval(t))
            .exp()
        * bracket_ab(p, t, side);
    t1.min(t2) / p.log_eps_a.eval(t).max(p.log_eps_c.eval(t)).exp()
}

fn nabcd_terms(p: &NabcdParams, gamma: &NabcdGamma, r: f64, side: Side) -> [f64; 3] {
    let first = (-p.log_eps_c.eval(r) - p.log_eps_d.eval(r)).exp() * bracket_cd(p, r, side);
    let second = (-p.log_eps_a.eval(r) - p.log_eps_b.eval(r)).exp() * bracket_ab(p, r, side);
    let third = match gamma {
        NabcdGamma::Function(g) => g.eval(r),
        NabcdGamma::RemarkDefault { anchor } => remark_gamma(p, *anchor, r, side),
    };
    [first, second, third]
}

/// Budget `delta * min{...}` for the nonuniform `(g_a, g_b, g_c, g_d)` family.
/// At `r = 0` the smaller of the two one-sided evaluations is used.
pub fn lip_budget_nabcd(p: &NabcdParams, delta: f64, gamma: NabcdGamma) -> Result<LipBudget> {
    if !(delta > 0.0 && delta < 1.0 / 6.0) {
        return Err(Error::InvalidParameters(format!("delta must lie in (0, 1/6), got {delta}")));
    }
    for r in sampling::log_symmetric_grid(CHECK_HORIZON, sampling::CHECK_POINTS) {
        if r == 0.0 {
            continue;
        }
        if !(bracket_cd(p, r, Side::Right) > 0.0) {
            return Err(Error::BudgetUndefined(format!(
                "positivity condition (g_c g_d / eps_c)' > 0 fails at r={r}"
            )));
        }
        if !(bracket_ab(p, r, Side::Right) > 0.0) {
            return Err(Error::BudgetUndefined(format!(
                "positivity condition (-1 / (g_a g_b eps_a))' > 0 fails at r={r}"
            )));
        }
    }
    let info = match &gamma {
        NabcdGamma::Function(_) => GammaInfo::Function,
        NabcdGamma::RemarkDefault { anchor } => GammaInfo::RemarkDefault { anchor: *anchor },
    };
    let q = p.clone();
    let f = move |r: f64| {
        let m = if r == 0.0 {
            let l = nabcd_terms(&q, &gamma, r, Side::Left);
            let rt = nabcd_terms(&q, &gamma, r, Side::Right);
            l.iter().chain(rt.iter()).copied().fold(f64::INFINITY, f64::min)
        } else {
            nabcd_terms(&q, &gamma, r, Side::Right)
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min)
        };
        delta * m.max(0.0)
    };
    Ok(LipBudget {
        tag: BudgetTag::Nabcd,
        delta,
        gamma: info,
        f: Arc::new(f),
    })
}

/// `(int eps_a gamma, int eps_c gamma)` over the real line.
pub fn gamma_integrals(p: &NabcdParams, gamma: &NabcdGamma) -> Result<(f64, f64)> {
    let g = |r: f64| match gamma {
        NabcdGamma::Function(f) => f.eval(r),
        NabcdGamma::RemarkDefault { anchor } => remark_gamma(p, *anchor, r, Side::Right),
    };
    let opts = HalfLineOptions::default();
    let mut out = [0.0; 2];
    for (k, le) in [&p.log_eps_a, &p.log_eps_c].into_iter().enumerate() {
        let h = |r: f64| le.eval(r).exp() * g(r);
        let fwd = quadrature::half_line(h, 0.0, Direction::Forward, &opts)?;
        let bwd = quadrature::half_line(h, 0.0, Direction::Backward, &opts)?;
        if !fwd.converged || !bwd.converged {
            return Err(Error::Quadrature("gamma integral does not converge".into()));
        }
        out[k] = fwd.value + bwd.value;
    }
    Ok((out[0], out[1]))
}

/// Budget for the `rho` exponential family, with `sgn(0) = 0`.
pub fn lip_budget_rho(p: &RhoParams, delta: f64, gamma: f64) -> Result<LipBudget> {
    p.validate()?;
    if !(delta > 0.0) {
        return Err(Error::InvalidParameters(format!("delta must be positive, got {delta}")));
    }
    if !(p.a + p.b + p.eps < 0.0 && p.c + p.d + p.eps < 0.0) {
        return Err(Error::InvalidParameters(format!(
            "need a + b + eps < 0 and c + d + eps < 0, got {} and {}",
            p.a + p.b + p.eps,
            p.c + p.d + p.eps
        )));
    }
    if p.eps > 0.0 {
        if (gamma - p.eps).abs() > 1e-12 * p.eps.max(1.0) {
            return Err(Error::InvalidGamma(format!("gamma must equal eps = {} when eps > 0, got {gamma}", p.eps)));
        }
    } else {
        let upper = 2.0 / p.big_d * (-p.c - p.d).min(-p.a - p.b);
        if !(gamma > 0.0 && gamma < upper) {
            return Err(Error::InvalidGamma(format!("gamma must lie in (0, {upper}), got {gamma}")));
        }
    }
    let rho = p.rho.to_scalar();
    let q = *p;
    let f = move |r: f64| {
        let rr = rho.eval(r).abs();
        let sg = r_sign(r);
        let m = (-q.c - q.d - q.eps * sg)
            .min(-q.a - q.b + q.eps * sg)
            .min(0.5 * q.big_d * gamma * lin(q.eps - gamma, rr).exp());
        let scale = rho.derivative(r, Side::Right) / (q.big_d * q.big_d) * (-2.0 * lin(q.eps, rr)).exp();
        let v = delta * scale * m;
        if v.is_finite() {
            v.max(0.0)
        } else {
            0.0
        }
    };
    Ok(LipBudget {
        tag: BudgetTag::Rho,
        delta,
        gamma: GammaInfo::Constant { gamma },
        f: Arc::new(f),
    })
}

fn mu_conditions(p: &MuParams, gamma: f64) -> Result<()> {
    let mut failed = Vec::new();
    if !(gamma > 0.0) {
        failed.push("gamma > 0");
    }
    if !(p.a <= 0.0) {
        failed.push("a <= 0");
    }
    if !(p.c <= 0.0) {
        failed.push("c <= 0");
    }
    if !(2.0 * p.eps <= gamma) {
        failed.push("2 eps <= gamma");
    }
    if !(p.eps - gamma + 1.0 < 0.0) {
        failed.push("eps - gamma + 1 < 0");
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidParameters(format!("violated: {}", failed.join(", "))))
    }
}

/// Budget `delta mu'(r) (|mu(r)| + 1)^(-gamma)` for the `mu` polynomial family.
pub fn lip_budget_mu(p: &MuParams, delta: f64, gamma: f64) -> Result<LipBudget> {
    p.validate()?;
    mu_conditions(p, gamma)?;
    if !(delta > 0.0) {
        return Err(Error::InvalidParameters(format!("delta must be positive, got {delta}")));
    }
    let mu = p.mu.to_scalar();
    let f = move |r: f64| delta * mu.derivative(r, Side::Right) * (mu.eval(r).abs() + 1.0).powf(-gamma);
    Ok(LipBudget {
        tag: BudgetTag::Mu,
        delta,
        gamma: GammaInfo::Constant { gamma },
        f: Arc::new(f),
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MuSmallness {
    /// `sigma <= delta * sigma_per_delta`
    pub sigma_per_delta: f64,
    /// `omega <= delta * omega_per_delta`
    pub omega_per_delta: f64,
    /// Largest `delta` with `2 sigma + 2 omega < 1` from these bounds (exclusive).
    pub delta_threshold: f64,
}

/// Makes "delta sufficiently small" explicit for the `mu` family by bounding
/// `sigma` and `omega` linearly in `delta` and solving `2 sigma + 2 omega < 1`.
pub fn mu_delta_threshold(p: &MuParams, gamma: f64) -> Result<MuSmallness> {
    mu_conditions(p, gamma)?;
    let (ab, cd) = (p.a + p.b, p.c + p.d);
    if !(ab + p.eps < 0.0 && cd + p.eps < 0.0) {
        return Err(Error::InvalidParameters("need a + b + eps < 0 and c + d + eps < 0".into()));
    }
    let hi = ab.max(cd) + 2.0 * p.eps - gamma + 1.0;
    let lo = ab.min(cd) + 2.0 * p.eps - gamma + 1.0;
    if !(hi < 0.0) {
        return Err(Error::InvalidParameters(format!(
            "max(a + b, c + d) + 2 eps - gamma + 1 = {hi} must be negative"
        )));
    }
    let sigma_per_delta = 2.0 * p.big_d / (p.eps - gamma + 1.0).abs();
    let omega_per_delta =
        p.big_d * p.big_d * ((2f64.powf(p.eps + 1.0) + 1.0) / hi.abs() + 1.0 / lo.abs());
    Ok(MuSmallness {
        sigma_per_delta,
        omega_per_delta,
        delta_threshold: 1.0 / (2.0 * (sigma_per_delta + omega_per_delta)),
    })
}

fn lemma4_conditions(lambda: f64, nu: f64, eps: f64) -> Result<()> {
    let mut failed = Vec::new();
    if !(lambda < 0.0) {
        failed.push("lambda < 0");
    }
    if !(nu < 0.0) {
        failed.push("nu < 0");
    }
    if !(eps >= 0.0) {
        failed.push("eps >= 0");
    }
    if !(lambda + eps + nu + 1.0 < 0.0) {
        failed.push("lambda + eps + nu + 1 < 0");
    }
    if !(lambda + eps <= 0.0) {
        failed.push("lambda + eps <= 0");
    }
    if !(nu + eps <= 0.0) {
        failed.push("nu + eps <= 0");
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Domain(format!("violated: {}", failed.join(", "))))
    }
}

/// Closed-form bound on the integral of
/// `(1 + tau)^lambda (|tau + p| + 1)^nu (|p| + 1)^eps` over `[0, inf)`.
pub fn lemma4_bound(lambda: f64, nu: f64, eps: f64, p: f64) -> Result<f64> {
    lemma4_conditions(lambda, nu, eps)?;
    let den = (lambda + eps + nu + 1.0).abs();
    Ok(if p >= 0.0 {
        1.0 / den
    } else {
        (2f64.powf(eps + 1.0) + 1.0) / den
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Lemma4Integral {
    pub value: f64,
    pub truncated_at: f64,
    /// Majorant of the neglected tail.
    pub tail_bound: f64,
}

/// Largest `ln(1 + tau)` handled by the truncated quadrature.
const MAX_LOG_TRUNCATION: f64 = 700.0;

/// Quadrature value of the same integral. The substitution `tau = e^u - 1`
/// turns the algebraic tail into an exponential one; integration stops at
/// `tau >= 2|p|` where the majorant `2^(-nu) (|p|+1)^eps (1+tau)^(lambda+nu)`
/// leaves a tail below `tol`.
pub fn lemma4_integral_detailed(lambda: f64, nu: f64, eps: f64, p: f64, tol: f64) -> Result<Lemma4Integral> {
    if !(lambda + nu + 1.0 < 0.0) || !(nu < 0.0) || !(eps >= 0.0) {
        return Err(Error::Domain(format!(
            "integrand not integrable for lambda={lambda}, nu={nu}, eps={eps}"
        )));
    }
    let k = lambda + nu + 1.0;
    let pa = p.abs();
    let pref = (pa + 1.0).powf(eps);
    // tail(X) = 2^(-nu) pref (1+X)^k / |k| < tol
    let need = ((tol * k.abs()).ln() + nu * 2f64.ln() - pref.ln()) / k;
    let u_end = need.max((1.0 + 2.0 * pa).ln()).max(1.0);
    if !(u_end <= MAX_LOG_TRUNCATION) {
        return Err(Error::Quadrature(format!(
            "truncation point exp({u_end}) - 1 too large"
        )));
    }
    let g = |u: f64| {
        let tau = u.exp_m1();
        (u * (lambda + 1.0)).exp() * ((tau + p).abs() + 1.0).powf(nu) * pref
    };
    let breaks: Vec<f64> = if p < 0.0 { vec![pa.ln_1p()] } else { Vec::new() };
    let value = quadrature::integrate_with_breaks(&g, 0.0, u_end, &breaks, 0.1 * tol)?;
    let tail_bound = 2f64.powf(-nu) * pref * (u_end * k).exp() / k.abs();
    Ok(Lemma4Integral {
        value,
        truncated_at: u_end.exp_m1(),
        tail_bound,
    })
}

pub fn lemma4_integral(lambda: f64, nu: f64, eps: f64, p: f64, tol: f64) -> Result<f64> {
    lemma4_integral_detailed(lambda, nu, eps, p, tol).map(|r| r.value)
}

/// Admissible `(lambda, nu, eps, p)` tuples, keeping `lambda + eps + nu + 1`
/// at least `0.05` below zero.
pub fn sample_lemma4_tuples(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, f64, f64, f64)> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let eps = rng.gen_range(0.0..2.0);
        let lambda = rng.gen_range(-6.0..0.0);
        let nu = rng.gen_range(-6.0..0.0);
        let p = rng.gen_range(-10.0..10.0);
        if lambda + eps <= 0.0 && nu + eps <= 0.0 && lambda + eps + nu + 1.0 <= -0.05 {
            out.push((lambda, nu, eps, p));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn exp_params() -> RhoParams {
        RhoParams::exponential(0.0, -1.0, 0.0, -1.0, 1.0, 0.0)
    }

    #[test]
    fn constant_functions_give_unit_alpha() {
        let one = ScalarFn::constant(1.0);
        let p = NabcdParams::from_functions(&one, &one, &one, &one, &one, &one, &one, &one);
        let b = make_nabcd_bounds(&p).unwrap();
        for &(t, s) in &[(1.0, -2.0), (0.0, 0.0), (-3.0, 4.0)] {
            assert_eq!(b.alpha(t, s), 1.0);
        }
    }

    #[test]
    fn diagonal_branch_is_min_of_eps() {
        let one = ScalarFn::constant(1.0);
        let ea = ScalarFn::new(|t: f64| 1.0 + t.abs());
        let ec = ScalarFn::new(|t: f64| 1.0 + 2.0 * t.abs());
        let p = NabcdParams::from_functions(&one, &one, &one, &one, &ea, &one, &ec, &one);
        let b = make_nabcd_bounds(&p).unwrap();
        assert_relative_eq!(b.alpha(1.0, 1.0), 2.0, max_relative = 1e-14);
        // off-diagonal branches
        assert_relative_eq!(b.alpha(1.5, 1.0), 2.0, max_relative = 1e-14);
        assert_relative_eq!(b.alpha(0.5, 1.0), 3.0, max_relative = 1e-14);
    }

    #[test]
    fn nabcd_substitution_reproduces_rho_family() {
        for rho in [MonotoneFn::Identity, MonotoneFn::Cubic] {
            let p = RhoParams {
                a: 0.3,
                b: -0.9,
                c: 0.2,
                d: -0.7,
                big_d: 1.7,
                eps: 0.15,
                rho,
            };
            let direct = make_rho_bounds(&p).unwrap();
            let via = make_nabcd_bounds(&NabcdParams::from_rho(&p)).unwrap();
            let grid = sampling::uniform_grid(-2.0, 2.0, 21);
            for &t in &grid {
                for &s in &grid {
                    assert_relative_eq!(direct.alpha(t, s), via.alpha(t, s), max_relative = 1e-12);
                    if t >= s {
                        assert_relative_eq!(direct.beta_plus(t, s), via.beta_plus(t, s), max_relative = 1e-12);
                    }
                    if t <= s {
                        assert_relative_eq!(direct.beta_minus(t, s), via.beta_minus(t, s), max_relative = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn rho_identity_is_exponential_family() {
        let p = RhoParams::exponential(0.2, -0.5, 0.1, -0.4, 2.0, 0.05);
        let a = make_rho_bounds(&p).unwrap();
        let b = make_exponential_bounds(0.2, -0.5, 0.1, -0.4, 2.0, 0.05).unwrap();
        assert_relative_eq!(a.alpha(1.0, 0.0), 2.0 * 0.2f64.exp(), max_relative = 1e-14);
        for &(t, s) in &[(3.0, -1.0), (-2.0, 1.5), (0.5, 0.5)] {
            assert_relative_eq!(a.alpha(t, s), b.alpha(t, s), max_relative = 1e-12);
        }
        let q = MuParams {
            mu: MonotoneFn::Identity,
            ..MuParams::polynomial(-0.5, -1.0, -0.2, -1.5, 1.2, 0.1)
        };
        let a = make_mu_polynomial_bounds(&q).unwrap();
        let b = make_polynomial_bounds(-0.5, -1.0, -0.2, -1.5, 1.2, 0.1).unwrap();
        for &(t, s) in &[(3.0, -1.0), (-2.0, 1.5), (0.5, 0.5)] {
            assert_relative_eq!(a.alpha(t, s), b.alpha(t, s), max_relative = 1e-12);
        }
    }

    #[test]
    fn cubic_rho_substitution() {
        let p = RhoParams {
            rho: MonotoneFn::Cubic,
            ..RhoParams::exponential(0.1, -1.0, 0.0, -1.0, 1.0, 0.0)
        };
        let b = make_rho_bounds(&p).unwrap();
        assert_relative_eq!(b.alpha(2.0, 1.0), 2.2255409284924674, max_relative = 1e-14);
    }

    #[test]
    fn polynomial_zero_exponent() {
        let b = make_polynomial_bounds(0.0, -1.0, 0.0, -1.0, 1.5, 0.0).unwrap();
        assert_eq!(b.alpha(3.0, 1.0), 1.5);
        assert_eq!(b.alpha(-7.0, -8.0), 1.5);
    }

    #[test]
    fn non_monotone_rho_rejected() {
        let p = RhoParams {
            rho: MonotoneFn::Linear { slope: -1.0 },
            ..exp_params()
        };
        assert!(matches!(make_rho_bounds(&p), Err(Error::InvalidParameters(_))));
    }

    #[test]
    fn growth_condition_tracks_a_plus_c() {
        let samples = default_condition_samples();
        let ok = RhoParams::exponential(0.3, -1.0, 0.2, -1.0, 1.0, 0.1);
        assert!(check_nabcd_condition(&NabcdParams::from_rho(&ok), &samples, 1e-12).pass);
        let bad = RhoParams::exponential(-0.3, -1.0, -0.2, -1.0, 1.0, 0.1);
        assert!(!check_nabcd_condition(&NabcdParams::from_rho(&bad), &samples, 1e-12).pass);
        let one = ScalarFn::constant(1.0);
        let e = ScalarFn::new(|t: f64| 2.0 + t.sin());
        let eq = NabcdParams::from_functions(&one, &one, &one, &one, &e, &one, &e, &one);
        let r = check_nabcd_condition(&eq, &samples, 1e-12);
        assert!(r.pass);
        assert_relative_eq!(r.min_ratio, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn exponential_budgets_agree() {
        let p = exp_params();
        let rb = lip_budget_rho(&p, 0.05, 1.0).unwrap();
        let nb = lip_budget_nabcd(&NabcdParams::from_rho(&p), 0.05, NabcdGamma::RemarkDefault { anchor: 0.0 }).unwrap();
        for &r in &[-7.0f64, -1.0, -1e-3, 0.0, 0.4, 3.0] {
            let want = 0.025 * (-r.abs()).exp();
            assert_relative_eq!(rb.eval(r), want, max_relative = 1e-12);
            assert_relative_eq!(nb.eval(r), want, max_relative = 1e-9);
        }
        let fd = lip_budget_nabcd(
            &NabcdParams::from_rho(&p).with_finite_differences(),
            0.05,
            NabcdGamma::RemarkDefault { anchor: 0.0 },
        )
        .unwrap();
        for &r in &[-2.0, 0.0, 1.3] {
            assert_relative_eq!(fd.eval(r), nb.eval(r), max_relative = 1e-6);
        }
    }

    #[test]
    fn nabcd_budget_preconditions() {
        let p = NabcdParams::from_rho(&exp_params());
        let e = lip_budget_nabcd(&p, 0.2, NabcdGamma::RemarkDefault { anchor: 0.0 });
        assert!(matches!(e, Err(Error::InvalidParameters(_))));
        // a + b > 0 breaks the second positivity condition
        let bad = NabcdParams::from_rho(&RhoParams::exponential(0.0, 1.0, 0.0, -1.0, 1.0, 0.0));
        let e = lip_budget_nabcd(&bad, 0.05, NabcdGamma::RemarkDefault { anchor: 0.0 });
        assert!(matches!(e, Err(Error::BudgetUndefined(_))));
    }

    #[test]
    fn remark_gamma_integrals_are_at_most_one() {
        for (p, anchor) in [
            (exp_params(), 0.0),
            (RhoParams::exponential(0.2, -1.0, 0.1, -0.8, 1.5, 0.1), 0.7),
        ] {
            let n = NabcdParams::from_rho(&p);
            let (ia, ic) = gamma_integrals(&n, &NabcdGamma::RemarkDefault { anchor }).unwrap();
            assert!(ia <= 1.0 + 1e-6 && ic <= 1.0 + 1e-6, "{ia} {ic}");
        }
    }

    #[test]
    fn rho_gamma_rule() {
        let p = exp_params();
        assert!(matches!(lip_budget_rho(&p, 0.05, 3.0), Err(Error::InvalidGamma(_))));
        assert!(matches!(lip_budget_rho(&p, 0.05, 0.0), Err(Error::InvalidGamma(_))));
        let q = RhoParams::exponential(0.0, -1.0, 0.0, -1.0, 1.0, 0.2);
        assert!(matches!(lip_budget_rho(&q, 0.05, 0.3), Err(Error::InvalidGamma(_))));
        assert!(lip_budget_rho(&q, 0.05, 0.2).is_ok());
    }

    #[test]
    fn rho_budget_sign_convention_at_origin() {
        let q = RhoParams::exponential(0.0, -1.0, 0.0, -1.0, 1.0, 0.2);
        let b = lip_budget_rho(&q, 0.1, 0.2).unwrap();
        // sgn(0) = 0: min{1, 1, 0.1} = 0.1
        assert_relative_eq!(b.eval(0.0), 0.1 * 0.1, max_relative = 1e-14);
    }

    #[test]
    fn mu_budget() {
        let p = MuParams::polynomial(0.0, -2.0, 0.0, -2.0, 1.0, 0.0);
        let b = lip_budget_mu(&p, 0.01, 3.0).unwrap();
        for &r in &[-4.0, 0.0, 2.5] {
            assert_relative_eq!(b.eval(r), 0.01 * (r.abs() + 1.0).powi(-3), max_relative = 1e-12);
        }
        let e = lip_budget_mu(&p, 0.01, 0.5).unwrap_err();
        assert!(e.to_string().contains("eps - gamma + 1 < 0"));
        let t = mu_delta_threshold(&p, 3.0).unwrap();
        assert!(t.delta_threshold > 0.0);
        let d = t.delta_threshold * 0.999;
        assert!(2.0 * d * (t.sigma_per_delta + t.omega_per_delta) < 1.0);
    }

    #[test]
    fn lemma4_examples() {
        assert_relative_eq!(lemma4_bound(-2.0, -2.0, 0.0, 0.0).unwrap(), 1.0 / 3.0);
        assert_relative_eq!(lemma4_bound(-2.0, -2.0, 0.0, -1.0).unwrap(), 1.0);
        assert_relative_eq!(lemma4_bound(-3.0, -1.0, 0.0, 1.0).unwrap(), 1.0 / 3.0);
        let v = lemma4_integral(-2.0, -2.0, 0.0, 0.0, 1e-12).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-10);
        let v = lemma4_integral(-4.0, -1.0, 0.0, 0.0, 1e-12).unwrap();
        assert!((v - 0.25).abs() < 1e-10);
        // int (1+t)^-3 (t+2)^-1 = 3/2 - ln 2 - 1/2... frozen from an independent evaluation
        let v = lemma4_integral(-3.0, -1.0, 0.0, 1.0, 1e-12).unwrap();
        assert!((v - 0.193_147_180_559_945_3).abs() < 1e-10 && v <= 1.0 / 3.0);
        let v = lemma4_integral(-2.0, -2.0, 0.0, -1.0, 1e-12).unwrap();
        assert!((v - 0.32750522119).abs() < 1e-9);
    }

    #[test]
    fn lemma4_domain_errors_name_the_inequality() {
        let e = lemma4_bound(-0.5, -0.4, 0.0, 0.0).unwrap_err();
        assert!(e.to_string().contains("lambda + eps + nu + 1 < 0"));
        let e = lemma4_bound(-2.0, -2.0, 2.5, 0.0).unwrap_err().to_string();
        assert!(e.contains("lambda + eps <= 0") && e.contains("nu + eps <= 0"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn budgets_scale_linearly_in_delta(d in 0.001..0.16f64, r in -10.0..10.0f64) {
            let p = exp_params();
            let b1 = lip_budget_rho(&p, d, 1.0).unwrap();
            let b2 = lip_budget_rho(&p, 0.5 * d, 1.0).unwrap();
            prop_assert!((b1.eval(r) - 2.0 * b2.eval(r)).abs() <= 1e-15 * b1.eval(r).max(1e-300));
        }

        #[test]
        fn lemma4_dominance(seed in 0u64..1000) {
            let mut rng = sampling::rng(seed);
            let (l, n, e, p) = sample_lemma4_tuples(&mut rng, 1)[0];
            let v = lemma4_integral(l, n, e, p, 1e-12).unwrap();
            let b = lemma4_bound(l, n, e, p).unwrap();
            prop_assert!(v <= b * (1.0 + 1e-9), "{l} {n} {e} {p}: {v} > {b}");
        }
    }
}
