//! Dormand-Prince 5(4) integrator with adaptive step-size control.
//!
//! Integrates forward or backward in time. Time `0` is treated as a
//! breakpoint when it lies strictly inside the interval, because the
//! coefficient functions used in this crate are only piecewise smooth there.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Relative step floor: `|h| < h_min_rel * (1 + |t|)` aborts the run.
    pub h_min_rel: f64,
    pub max_steps: usize,
    pub split_at_zero: bool,
}

impl OdeOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            rtol: tol,
            atol: tol,
            ..Self::default()
        }
    }
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-10,
            h_min_rel: 1e-14,
            max_steps: 1_000_000,
            split_at_zero: true,
        }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Solves `y' = f(t, y)`, `y(t0) = y0`, and returns `y(t1)`.
pub fn solve<F>(mut f: F, t0: f64, y0: &[f64], t1: f64, opts: &OdeOptions) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let mut y = y0.to_vec();
    if t0 == t1 {
        return Ok(y);
    }
    if opts.split_at_zero && t0 * t1 < 0.0 {
        segment(&mut f, t0, &mut y, 0.0, opts)?;
        segment(&mut f, 0.0, &mut y, t1, opts)?;
    } else {
        segment(&mut f, t0, &mut y, t1, opts)?;
    }
    Ok(y)
}

fn segment<F>(f: &mut F, t0: f64, y: &mut [f64], t1: f64, opts: &OdeOptions) -> Result<()>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];

    let mut t = t0;
    f(t, y, &mut k[0]);

    // initial step from the Hairer-Norsett-Wanner heuristic
    let sc = |yi: f64| opts.atol + opts.rtol * yi.abs();
    let d0 = rms(y.iter().map(|&yi| yi / sc(yi)));
    let d1 = rms(k[0].iter().zip(y.iter()).map(|(&ki, &yi)| ki / sc(yi)));
    let mut h = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h = h.min(span);

    let mut steps = 0usize;
    let mut rejected_last = false;
    while (t1 - t) * dir > 0.0 {
        steps += 1;
        if steps > opts.max_steps {
            return Err(Error::Stiffness { t });
        }
        let remaining = (t1 - t).abs();
        let last = h >= remaining * (1.0 - 1e-12);
        if last {
            h = remaining;
        }
        if h < opts.h_min_rel * (1.0 + t.abs()) {
            return Err(Error::Stiffness { t });
        }
        let hs = dir * h;

        stage(&mut tmp, y, hs, &k, &[A21]);
        f_into(f, t + C2 * hs, &tmp, &mut k, 1);
        stage(&mut tmp, y, hs, &k, &[A31, A32]);
        f_into(f, t + C3 * hs, &tmp, &mut k, 2);
        stage(&mut tmp, y, hs, &k, &[A41, A42, A43]);
        f_into(f, t + C4 * hs, &tmp, &mut k, 3);
        stage(&mut tmp, y, hs, &k, &[A51, A52, A53, A54]);
        f_into(f, t + C5 * hs, &tmp, &mut k, 4);
        stage(&mut tmp, y, hs, &k, &[A61, A62, A63, A64, A65]);
        f_into(f, t + hs, &tmp, &mut k, 5);
        stage(&mut ynew, y, hs, &k, &[A71, 0.0, A73, A74, A75, A76]);
        let tn = if last { t1 } else { t + hs };
        f_into(f, tn, &ynew, &mut k, 6);

        let mut acc = 0.0;
        for i in 0..n {
            let e = hs
                * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i]
                    + E7 * k[6][i]);
            let s = opts.atol + opts.rtol * y[i].abs().max(ynew[i].abs());
            acc += (e / s).powi(2);
        }
        let err = (acc / n.max(1) as f64).sqrt();
        if !err.is_finite() {
            h *= 0.2;
            rejected_last = true;
            continue;
        }
        if err <= 1.0 {
            t = tn;
            y.copy_from_slice(&ynew);
            k.swap(0, 6);
            let mut fac = if err == 0.0 { 5.0 } else { 0.9 * err.powf(-0.2) };
            fac = fac.clamp(0.2, 5.0);
            if rejected_last {
                fac = fac.min(1.0);
            }
            h *= fac;
            rejected_last = false;
        } else {
            h *= (0.9 * err.powf(-0.2)).max(0.2);
            rejected_last = true;
        }
    }
    Ok(())
}

fn rms<I: Iterator<Item = f64>>(it: I) -> f64 {
    let mut n = 0usize;
    let mut s = 0.0;
    for v in it {
        s += v * v;
        n += 1;
    }
    (s / n.max(1) as f64).sqrt()
}

fn stage(out: &mut [f64], y: &[f64], h: f64, k: &[Vec<f64>], a: &[f64]) {
    for i in 0..y.len() {
        let mut acc = 0.0;
        for (j, aj) in a.iter().enumerate() {
            acc += aj * k[j][i];
        }
        out[i] = y[i] + h * acc;
    }
}

fn f_into<F>(f: &mut F, t: f64, y: &[f64], k: &mut [Vec<f64>], idx: usize)
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let mut buf = std::mem::take(&mut k[idx]);
    f(t, y, &mut buf);
    k[idx] = buf;
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exponential_growth_both_directions() {
        let opts = OdeOptions::with_tol(1e-12);
        let y = solve(|_, y, dy| dy[0] = y[0], 0.0, &[1.0], 3.0, &opts).unwrap();
        assert_relative_eq!(y[0], 3.0f64.exp(), max_relative = 1e-10);
        let y = solve(|_, y, dy| dy[0] = y[0], 0.0, &[1.0], -3.0, &opts).unwrap();
        assert_relative_eq!(y[0], (-3.0f64).exp(), max_relative = 1e-10);
    }

    #[test]
    fn harmonic_oscillator_and_zero_span() {
        let opts = OdeOptions::with_tol(1e-11);
        let rhs = |_: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -y[0];
        };
        let y = solve(rhs, -1.0, &[1.0, 0.0], 2.0 * std::f64::consts::PI - 1.0, &opts).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-9 && y[1].abs() < 1e-9);
        let y = solve(rhs, 1.0, &[0.3, 0.4], 1.0, &opts).unwrap();
        assert_eq!(y, vec![0.3, 0.4]);
    }

    #[test]
    fn tolerance_controls_error() {
        let exact = (2.0f64).exp();
        let mut last = f64::INFINITY;
        for tol in [1e-6, 1e-8, 1e-10] {
            let y = solve(|t, y, dy| dy[0] = t * y[0], 0.0, &[1.0], 2.0, &OdeOptions::with_tol(tol)).unwrap();
            let e = (y[0] - exact).abs() / exact;
            assert!(e <= last + 1e-15);
            assert!(e < 10.0 * tol);
            last = e;
        }
    }

    #[test]
    fn underflow_reports_stiffness() {
        let opts = OdeOptions {
            max_steps: 50,
            ..OdeOptions::with_tol(1e-12)
        };
        let err = solve(|_, y, dy| dy[0] = y[0] * y[0], 0.0, &[1.0], 2.0, &opts).unwrap_err();
        assert!(matches!(err, Error::Stiffness { .. }));
    }
}
