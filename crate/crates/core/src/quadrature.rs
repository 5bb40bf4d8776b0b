//! Adaptive Simpson quadrature, Gauss-Legendre rules and half-line integration
//! with tail control.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const MAX_DEPTH: u32 = 48;
const INITIAL_PANELS: usize = 8;

/// Integrates `f` over `[a, b]` (either orientation) with adaptive Simpson.
///
/// The interval is split at `0` when it contains the origin, since the bound
/// functions and budgets handled here are typically only piecewise smooth
/// there, and each piece starts from a few uniform panels before adapting.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64) -> Result<f64> {
    integrate_with_breaks(&f, a, b, &[0.0], abs_tol)
}

pub fn integrate_with_breaks<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    breaks: &[f64],
    abs_tol: f64,
) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    if b < a {
        return integrate_with_breaks(f, b, a, breaks, abs_tol).map(|v| -v);
    }
    let mut cuts = vec![a];
    let mut inner: Vec<f64> = breaks.iter().copied().filter(|&x| x > a && x < b).collect();
    inner.sort_by(f64::total_cmp);
    cuts.extend(inner);
    cuts.push(b);
    let pieces = (cuts.len() - 1) * INITIAL_PANELS;
    let tol = abs_tol / pieces as f64;
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let h = (w[1] - w[0]) / INITIAL_PANELS as f64;
        for k in 0..INITIAL_PANELS {
            let lo = w[0] + k as f64 * h;
            let hi = if k + 1 == INITIAL_PANELS { w[1] } else { lo + h };
            total += simpson_panel(f, lo, hi, tol)?;
        }
    }
    Ok(total)
}

fn simpson_panel<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64> {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let v = recurse(f, a, b, fa, fm, fb, whole, tol, MAX_DEPTH);
    if !v.is_finite() {
        return Err(Error::Quadrature(format!(
            "non-finite integrand on [{a}, {b}]"
        )));
    }
    Ok(v)
}

#[allow(clippy::too_many_arguments)]
fn recurse<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol || !delta.is_finite() {
        return left + right + delta / 15.0;
    }
    let half = (0.5 * tol).max(f64::EPSILON * (left + right).abs());
    recurse(f, a, m, fa, flm, fm, left, half, depth - 1)
        + recurse(f, m, b, fm, frm, fb, right, half, depth - 1)
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let dp = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, dp)
}

/// Direction of a half-line integral starting at a finite point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// `int_start^{+inf}`
    Forward,
    /// `int_{-inf}^start`
    Backward,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HalfLineOptions {
    pub abs_tol: f64,
    /// Panels stop once a panel contributes less than this and decays.
    pub tail_tol: f64,
    pub first_panel: f64,
    pub max_panels: usize,
}

impl Default for HalfLineOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            tail_tol: 1e-12,
            first_panel: 1.0,
            max_panels: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HalfLineResult {
    pub value: f64,
    /// Geometric extrapolation of the neglected tail.
    pub tail_estimate: f64,
    /// Distance from the start point at which integration stopped.
    pub truncated_at: f64,
    pub converged: bool,
}

/// Integrates a non-negative integrand over a half-line using panels of
/// doubling length. The tail beyond the last panel is estimated from the
/// ratio of the last two panel contributions; the result is flagged as not
/// converged when panels stop decaying before `max_panels`.
pub fn half_line<F: Fn(f64) -> f64>(
    f: F,
    start: f64,
    direction: Direction,
    opts: &HalfLineOptions,
) -> Result<HalfLineResult> {
    let sign = match direction {
        Direction::Forward => 1.0,
        Direction::Backward => -1.0,
    };
    let mut total = 0.0;
    let mut lo = 0.0;
    let mut hi = opts.first_panel;
    let mut prev: Option<f64> = None;
    for _ in 0..opts.max_panels {
        let a = start + sign * lo;
        let b = start + sign * hi;
        let piece = integrate(&f, a.min(b), a.max(b), opts.abs_tol)?;
        total += piece;
        if let Some(p) = prev {
            // Equal-width or flat panels can look "decaying" by rounding alone.
            let decaying = piece == 0.0 || piece <= 0.5 * p;
            if decaying && piece.abs() <= opts.tail_tol {
                let ratio = if p > 0.0 { piece / p } else { 0.0 };
                let tail = if ratio < 1.0 {
                    piece * ratio / (1.0 - ratio)
                } else {
                    f64::INFINITY
                };
                return Ok(HalfLineResult {
                    value: total,
                    tail_estimate: tail,
                    truncated_at: hi,
                    converged: tail <= opts.tail_tol.max(opts.abs_tol),
                });
            }
        }
        prev = Some(piece);
        lo = hi;
        hi *= 2.0;
    }
    Ok(HalfLineResult {
        value: total,
        tail_estimate: f64::INFINITY,
        truncated_at: lo,
        converged: false,
    })
}
