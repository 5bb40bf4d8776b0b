//! The smallness quantities `sigma` and `omega`, the space constants `M`, `N`
//! and the contraction factor, assembled into a certificate.
//!
//! Both suprema are over unbounded index sets. They are approximated on a
//! finite horizon, refined locally by golden-section search, and re-evaluated
//! on a doubled horizon; a value is flagged converged only when the doubling
//! moves it by less than the convergence tolerance.

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::families::LipBudget;
use crate::quadrature::{self, Direction, HalfLineOptions};
use crate::sampling;
use crate::trichotomy::{check_vanishing_limits, BoundFamily, LimitCheck, LimitSchedule};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SupSettings {
    pub horizon: f64,
    /// Horizon used for the convergence check; `<= horizon` disables it.
    pub max_horizon: f64,
    pub grid_points: usize,
    pub refine: bool,
    pub quad_tol: f64,
    pub conv_tol: f64,
    pub execution: Execution,
}

impl Default for SupSettings {
    fn default() -> Self {
        Self {
            horizon: 20.0,
            max_horizon: 40.0,
            grid_points: 101,
            refine: true,
            quad_tol: 1e-10,
            conv_tol: 1e-6,
            execution: Execution::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SupDiagnostics {
    pub horizon: f64,
    pub grid_points: usize,
    /// `(t, s)` for `sigma`; `(s, s)` for `omega`.
    pub argmax: (f64, f64),
    pub grid_value: f64,
    /// Increase obtained by the local refinement.
    pub refinement_gain: f64,
    /// Change when the integral at the argmax is recomputed with a 100x tighter tolerance.
    pub quadrature_change: f64,
    pub doubled_horizon: Option<f64>,
    pub doubled_value: Option<f64>,
    /// Largest neglected-tail estimate of the half-line integrals (`omega` only).
    pub tail_estimate: f64,
    pub converged: bool,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SupResult {
    pub value: f64,
    pub diagnostics: SupDiagnostics,
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Maximises a unimodal-looking `f` on `[lo, hi]`; returns `(x, f(x))`.
fn golden_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64, iters: usize) -> (f64, f64) {
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let candidates = [(lo, f(lo)), (hi, f(hi)), (c, fc), (d, fd)];
    candidates
        .into_iter()
        .filter(|p| p.1.is_finite())
        .fold((lo, f64::NEG_INFINITY), |best, p| if p.1 > best.1 { p } else { best })
}

/// `|int_s^t alpha_{t,r} Lip(r) alpha_{r,s} / alpha_{t,s} dr|`
pub fn sigma_integral(bounds: &BoundFamily, lip: &LipBudget, t: f64, s: f64, tol: f64) -> Result<f64> {
    if t == s {
        return Ok(0.0);
    }
    let den = bounds.alpha(t, s);
    let g = |r: f64| {
        let l = lip.eval(r);
        if l == 0.0 {
            0.0
        } else {
            bounds.alpha(t, r) * l * bounds.alpha(r, s) / den
        }
    };
    Ok(quadrature::integrate(g, s.min(t), s.max(t), tol)?.abs())
}

struct OmegaValue {
    value: f64,
    tail: f64,
    converged: bool,
}

fn omega_at(bounds: &BoundFamily, lip: &LipBudget, s: f64, tol: f64) -> Result<OmegaValue> {
    let opts = HalfLineOptions {
        abs_tol: tol,
        ..HalfLineOptions::default()
    };
    let back = quadrature::half_line(
        |r| {
            let l = lip.eval(r);
            if l == 0.0 {
                0.0
            } else {
                bounds.beta_plus(s, r) * l * bounds.alpha(r, s)
            }
        },
        s,
        Direction::Backward,
        &opts,
    )?;
    let fwd = quadrature::half_line(
        |r| {
            let l = lip.eval(r);
            if l == 0.0 {
                0.0
            } else {
                bounds.beta_minus(s, r) * l * bounds.alpha(r, s)
            }
        },
        s,
        Direction::Forward,
        &opts,
    )?;
    Ok(OmegaValue {
        value: back.value + fwd.value,
        tail: back.tail_estimate.max(fwd.tail_estimate),
        converged: back.converged && fwd.converged,
    })
}

/// `int_{-inf}^s beta+_{s,r} Lip(r) alpha_{r,s} dr + int_s^inf beta-_{s,r} Lip(r) alpha_{r,s} dr`
pub fn omega_integral(bounds: &BoundFamily, lip: &LipBudget, s: f64, tol: f64) -> Result<f64> {
    omega_at(bounds, lip, s, tol).map(|v| v.value)
}

struct SigmaPass {
    value: f64,
    grid_value: f64,
    argmax: (f64, f64),
}

fn sigma_pass(bounds: &BoundFamily, lip: &LipBudget, horizon: f64, st: &SupSettings) -> Result<SigmaPass> {
    let grid = sampling::uniform_grid(-horizon, horizon, st.grid_points);
    let n = grid.len();
    let vals = st.execution.map(n * n, |k| {
        let (t, s) = (grid[k / n], grid[k % n]);
        sigma_integral(bounds, lip, t, s, st.quad_tol)
    });
    let mut best = (0usize, f64::NEG_INFINITY);
    for (k, v) in vals.into_iter().enumerate() {
        let v = v?;
        if v.is_nan() {
            return Err(Error::Quadrature(format!(
                "sigma integrand not finite at (t, s) = ({}, {})",
                grid[k / n],
                grid[k % n]
            )));
        }
        if v > best.1 {
            best = (k, v);
        }
    }
    let (mut t, mut s) = (grid[best.0 / n], grid[best.0 % n]);
    let grid_value = best.1;
    let mut value = grid_value;
    if st.refine && grid_value > 0.0 {
        let h = grid[1] - grid[0];
        let f = |t: f64, s: f64| sigma_integral(bounds, lip, t, s, st.quad_tol).unwrap_or(f64::NAN);
        for _ in 0..2 {
            let (lo, hi) = ((t - h).max(-horizon), (t + h).min(horizon));
            let (tt, v) = golden_max(|x| f(x, s), lo, hi, 40);
            if v > value {
                value = v;
                t = tt;
            }
            let (lo, hi) = ((s - h).max(-horizon), (s + h).min(horizon));
            let (ss, v) = golden_max(|x| f(t, x), lo, hi, 40);
            if v > value {
                value = v;
                s = ss;
            }
        }
    }
    Ok(SigmaPass {
        value,
        grid_value,
        argmax: (t, s),
    })
}

/// Supremum of [`sigma_integral`] over `(t, s)` in the horizon square.
pub fn compute_sigma(bounds: &BoundFamily, lip: &LipBudget, st: &SupSettings) -> Result<SupResult> {
    let first = sigma_pass(bounds, lip, st.horizon, st)?;
    let (t, s) = first.argmax;
    let fine = sigma_integral(bounds, lip, t, s, st.quad_tol * 1e-2)?;
    let quadrature_change = (fine - first.value).abs();
    let mut warnings = Vec::new();
    let (mut doubled_horizon, mut doubled_value) = (None, None);
    let mut value = first.value;
    let mut converged = quadrature_change < st.conv_tol;
    if st.max_horizon > st.horizon {
        let second = sigma_pass(bounds, lip, st.max_horizon, st)?;
        doubled_horizon = Some(st.max_horizon);
        doubled_value = Some(second.value);
        let change = second.value - first.value;
        if change.abs() >= st.conv_tol {
            converged = false;
            warnings.push(format!(
                "sigma moved by {change:.3e} between horizons {} and {}; the supremum may be larger or infinite",
                st.horizon, st.max_horizon
            ));
        }
        value = value.max(second.value);
    } else {
        converged = false;
        warnings.push("horizon doubling disabled; convergence not assessed".into());
    }
    Ok(SupResult {
        value,
        diagnostics: SupDiagnostics {
            horizon: st.horizon,
            grid_points: st.grid_points,
            argmax: first.argmax,
            grid_value: first.grid_value,
            refinement_gain: first.value - first.grid_value,
            quadrature_change,
            doubled_horizon,
            doubled_value,
            tail_estimate: 0.0,
            converged,
            warnings,
        },
    })
}

struct OmegaPass {
    value: f64,
    grid_value: f64,
    argmax: f64,
    tail: f64,
    converged: bool,
}

fn omega_pass(bounds: &BoundFamily, lip: &LipBudget, horizon: f64, st: &SupSettings) -> Result<OmegaPass> {
    let grid = sampling::uniform_grid(-horizon, horizon, st.grid_points);
    let vals = st
        .execution
        .map(grid.len(), |i| omega_at(bounds, lip, grid[i], st.quad_tol));
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut tail: f64 = 0.0;
    let mut converged = true;
    for (i, v) in vals.into_iter().enumerate() {
        let v = v?;
        if v.value.is_nan() {
            return Err(Error::Quadrature(format!("omega integrand not finite at s = {}", grid[i])));
        }
        tail = tail.max(v.tail);
        converged &= v.converged;
        if v.value > best.1 {
            best = (i, v.value);
        }
    }
    let mut s = grid[best.0];
    let grid_value = best.1;
    let mut value = grid_value;
    if st.refine && grid_value > 0.0 {
        let h = grid[1] - grid[0];
        let (ss, v) = golden_max(
            |x| omega_integral(bounds, lip, x, st.quad_tol).unwrap_or(f64::NAN),
            (s - h).max(-horizon),
            (s + h).min(horizon),
            40,
        );
        if v > value {
            value = v;
            s = ss;
        }
    }
    Ok(OmegaPass {
        value,
        grid_value,
        argmax: s,
        tail,
        converged,
    })
}

/// Supremum over `s` of [`omega_integral`].
pub fn compute_omega(bounds: &BoundFamily, lip: &LipBudget, st: &SupSettings) -> Result<SupResult> {
    let first = omega_pass(bounds, lip, st.horizon, st)?;
    let fine = omega_integral(bounds, lip, first.argmax, st.quad_tol * 1e-2)?;
    let quadrature_change = (fine - first.value).abs();
    let mut warnings = Vec::new();
    if !first.converged {
        warnings.push("a half-line integral did not show a decaying tail; omega may be infinite".into());
    }
    let mut converged = first.converged && quadrature_change < st.conv_tol;
    let (mut doubled_horizon, mut doubled_value) = (None, None);
    let mut value = first.value;
    let mut tail = first.tail;
    if st.max_horizon > st.horizon {
        let second = omega_pass(bounds, lip, st.max_horizon, st)?;
        doubled_horizon = Some(st.max_horizon);
        doubled_value = Some(second.value);
        tail = tail.max(second.tail);
        converged &= second.converged;
        let change = second.value - first.value;
        if change.abs() >= st.conv_tol {
            converged = false;
            warnings.push(format!(
                "omega moved by {change:.3e} between horizons {} and {}; the supremum may be larger or infinite",
                st.horizon, st.max_horizon
            ));
        }
        value = value.max(second.value);
    } else {
        converged = false;
        warnings.push("horizon doubling disabled; convergence not assessed".into());
    }
    Ok(SupResult {
        value,
        diagnostics: SupDiagnostics {
            horizon: st.horizon,
            grid_points: st.grid_points,
            argmax: (first.argmax, first.argmax),
            grid_value: first.grid_value,
            refinement_gain: first.value - first.grid_value,
            quadrature_change,
            doubled_horizon,
            doubled_value,
            tail_estimate: tail,
            converged,
            warnings,
        },
    })
}

/// The constants `(M, N)` of the contraction space.
///
/// Both are written through `K = 2 / ((1 - sigma - omega) + sqrt(disc))`, the
/// rationalised form of the quadratic roots, so that `sigma = 0` or
/// `omega = 0` are handled by continuity (`M = 1 + sigma K`, `N = omega K`).
pub fn compute_mn(sigma: f64, omega: f64) -> Result<(f64, f64)> {
    if !(sigma >= 0.0 && omega >= 0.0) || !sigma.is_finite() || !omega.is_finite() {
        return Err(Error::InvalidParameters(format!(
            "sigma and omega must be finite and non-negative, got {sigma}, {omega}"
        )));
    }
    if 2.0 * sigma + 2.0 * omega >= 1.0 {
        return Err(Error::HypothesisViolated(format!(
            "2 sigma + 2 omega = {} >= 1",
            2.0 * sigma + 2.0 * omega
        )));
    }
    let disc = 1.0 - 2.0 * sigma - 2.0 * omega + (sigma - omega).powi(2);
    let k = 2.0 / ((1.0 - sigma - omega) + disc.sqrt());
    let (m, n) = (1.0 + sigma * k, omega * k);
    let prod = m * (1.0 + n);
    if (prod - k).abs() > 1e-10 * k {
        return Err(Error::Domain(format!("M(1+N) = {prod} differs from {k}")));
    }
    Ok((m, n))
}

/// `(sigma + omega) max{1 + N, M}`
pub fn contraction_factor(sigma: f64, omega: f64, m: f64, n: f64) -> f64 {
    (sigma + omega) * (1.0 + n).max(m)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct HypothesisSettings {
    pub sigma: SupSettings,
    pub omega: SupSettings,
    pub limits: LimitSchedule,
    pub limit_samples: Vec<f64>,
}

impl Default for HypothesisSettings {
    fn default() -> Self {
        Self {
            sigma: SupSettings::default(),
            omega: SupSettings::default(),
            limits: LimitSchedule::default(),
            limit_samples: sampling::uniform_grid(-5.0, 5.0, 11),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub sigma: f64,
    pub omega: f64,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "N")]
    pub n: f64,
    #[serde(rename = "q")]
    pub contraction_factor: f64,
    pub limits_ok: bool,
    pub smallness_ok: bool,
    pub sigma_converged: bool,
    pub omega_converged: bool,
    pub sigma_diagnostics: SupDiagnostics,
    pub omega_diagnostics: SupDiagnostics,
    pub limits: Vec<LimitCheck>,
    pub settings: HypothesisSettings,
    pub pass: bool,
    pub reasons: Vec<String>,
}

impl HypothesisReport {
    /// `N / omega`, the Lipschitz factor of the flow on the manifold (`1` when `omega = 0`).
    pub fn growth_factor(&self) -> f64 {
        if self.omega > 0.0 {
            self.n / self.omega
        } else {
            1.0 + self.sigma
        }
    }
}

/// Runs the limit check, `sigma`, `omega`, `M`, `N` and `q`.
pub fn assemble_report(bounds: &BoundFamily, lip: &LipBudget, settings: &HypothesisSettings) -> Result<HypothesisReport> {
    let limits = check_vanishing_limits(bounds, &settings.limit_samples, &settings.limits);
    let limits_ok = limits.iter().all(|c| c.pass);
    let sigma = compute_sigma(bounds, lip, &settings.sigma)?;
    let omega = compute_omega(bounds, lip, &settings.omega)?;
    let (sv, ov) = (sigma.value, omega.value);
    let smallness_ok = 2.0 * sv + 2.0 * ov < 1.0;
    let mut reasons = Vec::new();
    if !limits_ok {
        let bad: Vec<String> = limits
            .iter()
            .filter(|c| !c.pass)
            .map(|c| format!("s={} ({:?}/{:?})", c.s, c.backward.verdict, c.forward.verdict))
            .collect();
        reasons.push(format!("vanishing limits fail at {}", bad.join(", ")));
    }
    let (m, n, q) = if smallness_ok {
        let (m, n) = compute_mn(sv, ov)?;
        (m, n, contraction_factor(sv, ov, m, n))
    } else {
        reasons.push(format!("2 sigma + 2 omega = {} >= 1", 2.0 * sv + 2.0 * ov));
        (f64::NAN, f64::NAN, f64::NAN)
    };
    for w in sigma.diagnostics.warnings.iter().chain(&omega.diagnostics.warnings) {
        reasons.push(w.clone());
    }
    let sigma_converged = sigma.diagnostics.converged;
    let omega_converged = omega.diagnostics.converged;
    if !sigma_converged && sigma.diagnostics.warnings.is_empty() {
        reasons.push("sigma quadrature not converged".into());
    }
    if !omega_converged && omega.diagnostics.warnings.is_empty() {
        reasons.push("omega quadrature not converged".into());
    }
    let pass = limits_ok && smallness_ok && sigma_converged && omega_converged;
    Ok(HypothesisReport {
        sigma: sv,
        omega: ov,
        m,
        n,
        contraction_factor: q,
        limits_ok,
        smallness_ok,
        sigma_converged,
        omega_converged,
        sigma_diagnostics: sigma.diagnostics,
        omega_diagnostics: omega.diagnostics,
        limits,
        settings: settings.clone(),
        pass,
        reasons,
    })
}
