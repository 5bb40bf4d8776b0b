//! Uniform axes and tensor-product interpolation on them.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    #[default]
    Multilinear,
    /// Four-point Lagrange per axis, one-sided near the edges.
    Cubic,
}

/// At most four `(index, weight)` entries along one axis.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    pub len: usize,
}

impl Stencil {
    fn single(i: usize) -> Self {
        Self {
            idx: [i, 0, 0, 0],
            w: [1.0, 0.0, 0.0, 0.0],
            len: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidParameters(format!(
                "axis needs n >= 2 and lo < hi, got n={n}, [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi, n })
    }

    pub fn symmetric(half_width: f64, n: usize) -> Result<Self> {
        Self::new(-half_width, half_width, n)
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.hi
        } else {
            self.lo + i as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.node(i)).collect()
    }

    pub fn contains(&self, x: f64) -> bool {
        let slack = 1e-12 * self.step();
        x >= self.lo - slack && x <= self.hi + slack
    }

    /// Index of the node equal to `x` up to a tiny fraction of the spacing.
    pub fn index_of(&self, x: f64) -> Option<usize> {
        let u = (x - self.lo) / self.step();
        let i = u.round();
        if (u - i).abs() < 1e-9 && i >= 0.0 && (i as usize) < self.n {
            Some(i as usize)
        } else {
            None
        }
    }

    /// Interpolation stencil at `x`, which is clamped into the axis range.
    pub fn stencil(&self, x: f64, order: Interpolation) -> Stencil {
        let h = self.step();
        let u = ((x - self.lo) / h).clamp(0.0, (self.n - 1) as f64);
        let i = (u.floor() as usize).min(self.n - 2);
        let frac = u - i as f64;
        if frac == 0.0 {
            return Stencil::single(i);
        }
        if order == Interpolation::Cubic && self.n >= 4 {
            let j0 = i.saturating_sub(1).min(self.n - 4);
            let v = u - j0 as f64;
            return Stencil {
                idx: [j0, j0 + 1, j0 + 2, j0 + 3],
                w: [
                    -(v - 1.0) * (v - 2.0) * (v - 3.0) / 6.0,
                    v * (v - 2.0) * (v - 3.0) / 2.0,
                    -v * (v - 1.0) * (v - 3.0) / 2.0,
                    v * (v - 1.0) * (v - 2.0) / 6.0,
                ],
                len: 4,
            };
        }
        Stencil {
            idx: [i, i + 1, 0, 0],
            w: [1.0 - frac, frac, 0.0, 0.0],
            len: 2,
        }
    }
}

/// Tensor-product interpolation of records of `ncomp` values.
///
/// Record `r` occupies `data[r * ncomp .. (r + 1) * ncomp]`; the record index
/// of a grid point is `base + sum_d idx_d * strides[d]`. The result is written
/// into `out[..ncomp]`.
pub fn tensor_eval(
    stencils: &[Stencil],
    strides: &[usize],
    data: &[f64],
    base: usize,
    ncomp: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(stencils.len(), strides.len());
    out[..ncomp].iter_mut().for_each(|o| *o = 0.0);
    let dims = stencils.len();
    let mut counter = [0usize; 8];
    assert!(dims <= counter.len(), "at most 8 interpolation axes");
    loop {
        let mut w = 1.0;
        let mut rec = base;
        for d in 0..dims {
            let st = &stencils[d];
            w *= st.w[counter[d]];
            rec += st.idx[counter[d]] * strides[d];
        }
        if w != 0.0 {
            let off = rec * ncomp;
            for c in 0..ncomp {
                out[c] += w * data[off + c];
            }
        }
        // advance the mixed-radix counter
        let mut d = 0;
        loop {
            if d == dims {
                return;
            }
            counter[d] += 1;
            if counter[d] < stencils[d].len {
                break;
            }
            counter[d] = 0;
            d += 1;
        }
    }
}
