//! Vector norms on `R^n` and the operator norms they induce.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Iteration cap for operator norms that have no closed form.
pub const POWER_ITERATIONS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NormSpec {
    #[default]
    MaxNorm,
    Euclidean,
    PNorm { p: f64 },
}

impl NormSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NormSpec::PNorm { p } if !(p >= 1.0) => Err(Error::InvalidParameters(format!(
                "p-norm requires p >= 1, got {p}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn vector(&self, v: &[f64]) -> f64 {
        match *self {
            NormSpec::MaxNorm => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            NormSpec::Euclidean => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            NormSpec::PNorm { p } => p_norm(v, p),
        }
    }

    pub fn vec(&self, v: &DVector<f64>) -> f64 {
        self.vector(v.as_slice())
    }

    /// Induced operator norm. Exact for the max norm and for `p = 1`;
    /// otherwise a power-iteration estimate (a lower bound of the true value).
    pub fn operator(&self, a: &DMatrix<f64>) -> f64 {
        match *self {
            NormSpec::MaxNorm => max_row_sum(a),
            NormSpec::PNorm { p } if p.is_infinite() => max_row_sum(a),
            NormSpec::PNorm { p: 1.0 } => max_col_sum(a),
            NormSpec::Euclidean => spectral_norm(a),
            NormSpec::PNorm { p: 2.0 } => spectral_norm(a),
            NormSpec::PNorm { p } => p_operator_norm(a, p),
        }
    }
}

fn p_norm(v: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        return v.iter().fold(0.0, |m, x| m.max(x.abs()));
    }
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    scale * v.iter().map(|x| (x.abs() / scale).powf(p)).sum::<f64>().powf(1.0 / p)
}

fn max_row_sum(a: &DMatrix<f64>) -> f64 {
    a.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn max_col_sum(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn start_vector(n: usize) -> DVector<f64> {
    DVector::from_fn(n, |i, _| 1.0 + 0.1 * (i as f64 + 1.0).sqrt())
}

fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.ncols() == 0 || a.iter().all(|x| *x == 0.0) {
        return 0.0;
    }
    let ata = a.transpose() * a;
    let mut x = start_vector(a.ncols());
    x /= x.norm();
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let y = &ata * &x;
        let ny = y.norm();
        if ny == 0.0 {
            break;
        }
        lambda = x.dot(&y);
        x = y / ny;
    }
    // Rayleigh quotient of the final iterate.
    lambda = lambda.max(x.dot(&(&ata * &x)));
    lambda.max(0.0).sqrt()
}

fn dual(v: &DVector<f64>, p: f64) -> DVector<f64> {
    let n = p_norm(v.as_slice(), p);
    if n == 0.0 {
        return DVector::zeros(v.len());
    }
    v.map(|x| x.signum() * (x.abs() / n).powf(p - 1.0))
}

/// Boyd/Higham power method for the induced `p`-norm, `1 < p < inf`.
fn p_operator_norm(a: &DMatrix<f64>, p: f64) -> f64 {
    let q = p / (p - 1.0);
    let mut x = start_vector(a.ncols());
    let nx = p_norm(x.as_slice(), p);
    x /= nx;
    let mut est = p_norm((a * &x).as_slice(), p);
    for _ in 0..POWER_ITERATIONS {
        let y = a * &x;
        est = est.max(p_norm(y.as_slice(), p));
        let z = a.transpose() * dual(&y, p);
        if p_norm(z.as_slice(), q) <= z.dot(&x) {
            break;
        }
        x = dual(&z, q);
    }
    est.max(p_norm((a * &x).as_slice(), p))
}
