//! Real functions of one variable with an optional closed-form derivative.

use std::fmt;
use std::sync::Arc;

type Fun = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Offset used to read one-sided limits of a closed-form derivative at `0`.
const ONE_SIDED_OFFSET: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone)]
pub struct ScalarFn {
    value: Fun,
    derivative: Option<Fun>,
}

impl fmt::Debug for ScalarFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarFn")
            .field("closed_form_derivative", &self.derivative.is_some())
            .finish()
    }
}

impl ScalarFn {
    pub fn new(value: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            value: Arc::new(value),
            derivative: None,
        }
    }

    pub fn with_derivative(
        value: impl Fn(f64) -> f64 + Send + Sync + 'static,
        derivative: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            value: Arc::new(value),
            derivative: Some(Arc::new(derivative)),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::with_derivative(move |_| c, |_| 0.0)
    }

    pub fn identity() -> Self {
        Self::with_derivative(|t| t, |_| 1.0)
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        (self.value)(t)
    }

    pub fn has_closed_derivative(&self) -> bool {
        self.derivative.is_some()
    }

    /// Derivative at `t`.
    ///
    /// With a closed form it is evaluated directly (at `0` the requested
    /// one-sided limit is read just off the origin). Otherwise a central
    /// difference with step `1e-6 (1 + |t|)` is used, switching to a
    /// second-order one-sided stencil whenever the central stencil would
    /// straddle `0`, where the functions of interest may have a corner.
    pub fn derivative(&self, t: f64, side: Side) -> f64 {
        if let Some(d) = &self.derivative {
            if t == 0.0 {
                let off = match side {
                    Side::Left => -ONE_SIDED_OFFSET,
                    Side::Right => ONE_SIDED_OFFSET,
                };
                return d(off);
            }
            return d(t);
        }
        let h = 1e-6 * (1.0 + t.abs());
        let f = &self.value;
        let straddles = t != 0.0 && t.abs() < h;
        if t == 0.0 || straddles {
            let dir = if t == 0.0 {
                match side {
                    Side::Left => -1.0,
                    Side::Right => 1.0,
                }
            } else {
                t.signum()
            };
            let h = dir * h;
            return (-3.0 * f(t) + 4.0 * f(t + h) - f(t + 2.0 * h)) / (2.0 * h);
        }
        (f(t + h) - f(t - h)) / (2.0 * h)
    }

    /// Drops the closed-form derivative, forcing finite differences.
    pub fn without_derivative(&self) -> Self {
        Self {
            value: self.value.clone(),
            derivative: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_difference_matches_closed_form() {
        let f = ScalarFn::with_derivative(|t: f64| t.sin() * t.exp(), |t: f64| t.exp() * (t.sin() + t.cos()));
        let g = f.without_derivative();
        for &t in &[-3.0, -0.5, 0.7, 2.0] {
            let a = f.derivative(t, Side::Right);
            let b = g.derivative(t, Side::Right);
            assert!((a - b).abs() < 1e-7 * (1.0 + a.abs()), "{t}: {a} vs {b}");
        }
    }

    #[test]
    fn one_sided_at_corner() {
        // |t| has derivatives -1 and +1 at the origin
        let closed = ScalarFn::with_derivative(|t: f64| t.abs(), |t: f64| t.signum());
        let fd = ScalarFn::new(|t: f64| t.abs());
        for f in [&closed, &fd] {
            assert!((f.derivative(0.0, Side::Left) + 1.0).abs() < 1e-9);
            assert!((f.derivative(0.0, Side::Right) - 1.0).abs() < 1e-9);
        }
        // close to the corner the stencil must not cross it
        assert!((fd.derivative(1e-8, Side::Left) - 1.0).abs() < 1e-6);
    }
}
