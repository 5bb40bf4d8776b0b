//! Evolution operators, invariant splittings and trichotomy bounds, with
//! sample-based certification of the structural axioms.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::families::FamilyParams;
use crate::norm::NormSpec;
use crate::ode::{self, OdeOptions};
use crate::{Error, Result};

pub type MatFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
pub type MatFn2 = Arc<dyn Fn(f64, f64) -> DMatrix<f64> + Send + Sync>;
pub type Fn2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorSource {
    ClosedForm,
    Integrated,
}

/// The family `(t, s) -> T_{t,s}`.
#[derive(Clone)]
pub struct EvolutionOperator {
    dim: usize,
    closed: Option<MatFn2>,
    generator: Option<MatFn>,
    ode: OdeOptions,
}

impl fmt::Debug for EvolutionOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EvolutionOperator")
            .field("dim", &self.dim)
            .field("source", &self.source())
            .field("has_generator", &self.generator.is_some())
            .finish()
    }
}

impl EvolutionOperator {
    pub fn closed_form(
        dim: usize,
        t: impl Fn(f64, f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            closed: Some(Arc::new(t)),
            generator: None,
            ode: OdeOptions::default(),
        }
    }

    /// `T_{t,s}` obtained by integrating `X' = A(t) X`, `X(s) = I`.
    pub fn integrated(
        dim: usize,
        a: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
        tol: f64,
    ) -> Self {
        Self {
            dim,
            closed: None,
            generator: Some(Arc::new(a)),
            ode: OdeOptions::with_tol(tol),
        }
    }

    /// Constant coefficients: `T_{t,s} = exp(A (t - s))`.
    pub fn constant(a: DMatrix<f64>) -> Self {
        let dim = a.nrows();
        let gen = a.clone();
        Self::closed_form(dim, move |t, s| (&a * (t - s)).exp()).with_generator(move |_| gen.clone())
    }

    /// Attaches the coefficient matrix `A(t)`, needed for perturbed flows.
    pub fn with_generator(mut self, a: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.generator = Some(Arc::new(a));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> OperatorSource {
        if self.closed.is_some() {
            OperatorSource::ClosedForm
        } else {
            OperatorSource::Integrated
        }
    }

    pub fn tolerance(&self) -> Option<f64> {
        self.closed.is_none().then_some(self.ode.rtol)
    }

    pub fn generator(&self, t: f64) -> Option<DMatrix<f64>> {
        self.generator.as_ref().map(|a| a(t))
    }

    pub fn has_generator(&self) -> bool {
        self.generator.is_some()
    }

    pub fn evaluate(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        if let Some(c) = &self.closed {
            let m = c(t, s);
            if m.nrows() != self.dim || m.ncols() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    found: m.nrows(),
                });
            }
            return Ok(m);
        }
        let a = self
            .generator
            .as_ref()
            .ok_or_else(|| Error::Precondition("integrated operator without A(t)".into()))?;
        let n = self.dim;
        let mut y0 = vec![0.0; n * n];
        for i in 0..n {
            y0[i * n + i] = 1.0;
        }
        // column-major n x n state, X' = A(t) X
        let y = ode::solve(
            |t, y, dy| {
                let at = a(t);
                for j in 0..n {
                    for i in 0..n {
                        let mut acc = 0.0;
                        for l in 0..n {
                            acc += at[(i, l)] * y[j * n + l];
                        }
                        dy[j * n + i] = acc;
                    }
                }
            },
            s,
            &y0,
            t,
            &self.ode,
        )?;
        Ok(DMatrix::from_column_slice(n, n, &y))
    }
}

/// A time-dependent frame whose columns span `E_t`, `F+_t` and `F-_t`, in that
/// order. Coordinates relative to the frame are `(center, plus, minus)`.
#[derive(Clone)]
pub struct SplittingChart {
    k: usize,
    p: usize,
    m: usize,
    frame: Option<MatFn>,
}

impl fmt::Debug for SplittingChart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SplittingChart")
            .field("dims", &(self.k, self.p, self.m))
            .field("coordinate", &self.frame.is_none())
            .finish()
    }
}

impl SplittingChart {
    /// Coordinate splitting: the first `k` axes are central, the next `p`
    /// unstable-in-the-past and the last `m` unstable-in-the-future.
    pub fn coordinate(k: usize, p: usize, m: usize) -> Self {
        Self {
            k,
            p,
            m,
            frame: None,
        }
    }

    pub fn with_frame(
        k: usize,
        p: usize,
        m: usize,
        frame: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            k,
            p,
            m,
            frame: Some(Arc::new(frame)),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.k, self.p, self.m)
    }

    pub fn dim(&self) -> usize {
        self.k + self.p + self.m
    }

    pub fn is_coordinate(&self) -> bool {
        self.frame.is_none()
    }

    pub fn frame(&self, t: f64) -> DMatrix<f64> {
        match &self.frame {
            Some(b) => b(t),
            None => DMatrix::identity(self.dim(), self.dim()),
        }
    }

    pub fn frame_inverse(&self, t: f64) -> Result<DMatrix<f64>> {
        match &self.frame {
            None => Ok(DMatrix::identity(self.dim(), self.dim())),
            Some(b) => b(t)
                .try_inverse()
                .ok_or_else(|| Error::InvalidParameters(format!("singular frame at t={t}"))),
        }
    }

    /// Full state from chart coordinates.
    pub fn embed(&self, t: f64, coords: &[f64]) -> DVector<f64> {
        let c = DVector::from_column_slice(coords);
        match &self.frame {
            None => c,
            Some(b) => b(t) * c,
        }
    }

    pub fn coords(&self, t: f64, v: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.frame {
            None => Ok(v.clone()),
            Some(_) => Ok(self.frame_inverse(t)? * v),
        }
    }

    fn projection(&self, t: f64, lo: usize, hi: usize) -> Result<DMatrix<f64>> {
        let n = self.dim();
        let mut d = DMatrix::zeros(n, n);
        for i in lo..hi {
            d[(i, i)] = 1.0;
        }
        match &self.frame {
            None => Ok(d),
            Some(b) => Ok(b(t) * d * self.frame_inverse(t)?),
        }
    }

    pub fn p(&self, t: f64) -> Result<DMatrix<f64>> {
        self.projection(t, 0, self.k)
    }

    pub fn q_plus(&self, t: f64) -> Result<DMatrix<f64>> {
        self.projection(t, self.k, self.k + self.p)
    }

    pub fn q_minus(&self, t: f64) -> Result<DMatrix<f64>> {
        self.projection(t, self.k + self.p, self.dim())
    }

    pub fn splitting(&self) -> InvariantSplitting {
        let (a, b, c) = (self.clone(), self.clone(), self.clone());
        InvariantSplitting::new(
            self.dim(),
            move |t| a.p(t).expect("frame invertible"),
            move |t| b.q_plus(t).expect("frame invertible"),
            move |t| c.q_minus(t).expect("frame invertible"),
        )
    }
}

/// Projection families `P_t`, `Q+_t`, `Q-_t`.
#[derive(Clone)]
pub struct InvariantSplitting {
    dim: usize,
    p: MatFn,
    qp: MatFn,
    qm: MatFn,
}

impl fmt::Debug for InvariantSplitting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InvariantSplitting").field("dim", &self.dim).finish()
    }
}

impl InvariantSplitting {
    pub fn new(
        dim: usize,
        p: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
        qp: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
        qm: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            p: Arc::new(p),
            qp: Arc::new(qp),
            qm: Arc::new(qm),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn p(&self, t: f64) -> DMatrix<f64> {
        (self.p)(t)
    }

    pub fn q_plus(&self, t: f64) -> DMatrix<f64> {
        (self.qp)(t)
    }

    pub fn q_minus(&self, t: f64) -> DMatrix<f64> {
        (self.qm)(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyTag {
    Generic,
    Nabcd,
    RhoExponential,
    Exponential,
    MuPolynomial,
    Polynomial,
}

/// Bound functions `alpha` (on all of `R^2`), `beta+` (on `t >= s`) and
/// `beta-` (on `t <= s`).
#[derive(Clone)]
pub struct BoundFamily {
    pub tag: FamilyTag,
    pub params: FamilyParams,
    alpha: Fn2,
    beta_plus: Fn2,
    beta_minus: Fn2,
}

impl fmt::Debug for BoundFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BoundFamily")
            .field("tag", &self.tag)
            .field("params", &self.params)
            .finish()
    }
}

impl BoundFamily {
    pub fn new(
        tag: FamilyTag,
        params: FamilyParams,
        alpha: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        beta_plus: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        beta_minus: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            tag,
            params,
            alpha: Arc::new(alpha),
            beta_plus: Arc::new(beta_plus),
            beta_minus: Arc::new(beta_minus),
        }
    }

    pub fn generic(
        alpha: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        beta_plus: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        beta_minus: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(FamilyTag::Generic, FamilyParams::Generic, alpha, beta_plus, beta_minus)
    }

    #[inline]
    pub fn alpha(&self, t: f64, s: f64) -> f64 {
        (self.alpha)(t, s)
    }

    #[inline]
    pub fn beta_plus(&self, t: f64, s: f64) -> f64 {
        (self.beta_plus)(t, s)
    }

    #[inline]
    pub fn beta_minus(&self, t: f64, s: f64) -> f64 {
        (self.beta_minus)(t, s)
    }

    /// Same family with `alpha` multiplied by `k`; tagged generic.
    pub fn with_alpha_scaled(&self, k: f64) -> Self {
        let a = self.alpha.clone();
        Self {
            tag: FamilyTag::Generic,
            params: FamilyParams::Generic,
            alpha: Arc::new(move |t, s| k * a(t, s)),
            beta_plus: self.beta_plus.clone(),
            beta_minus: self.beta_minus.clone(),
        }
    }
}

fn ensure_dim(expected: usize, m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != expected || m.ncols() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: m.nrows(),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplittingReport {
    pub sum_to_identity: f64,
    pub mutual_annihilation: f64,
    pub idempotency: f64,
    pub commutes_p: f64,
    pub commutes_q_plus: f64,
    pub commutes_q_minus: f64,
    pub worst: f64,
    pub tolerance: f64,
    pub samples: usize,
    pub pass: bool,
}

/// Largest residual of each splitting axiom over `(t, s)` samples.
pub fn check_splitting(
    splitting: &InvariantSplitting,
    op: &EvolutionOperator,
    samples: &[(f64, f64)],
    norm: NormSpec,
    tol: f64,
) -> Result<SplittingReport> {
    if samples.is_empty() {
        return Err(Error::Precondition("no samples".into()));
    }
    if splitting.dim() != op.dim() {
        return Err(Error::DimensionMismatch {
            expected: op.dim(),
            found: splitting.dim(),
        });
    }
    let n = op.dim();
    let rows = Execution::default().map(samples.len(), |i| -> Result<[f64; 6]> {
        let (t, s) = samples[i];
        let (p, qp, qm) = (splitting.p(t), splitting.q_plus(t), splitting.q_minus(t));
        for m in [&p, &qp, &qm] {
            ensure_dim(n, m)?;
        }
        let id = DMatrix::<f64>::identity(n, n);
        let r1 = norm.operator(&(&p + &qp + &qm - &id));
        let r2 = [
            &p * &qp,
            &p * &qm,
            &qp * &p,
            &qm * &p,
            &qp * &qm,
            &qm * &qp,
        ]
        .iter()
        .map(|m| norm.operator(m))
        .fold(0.0, f64::max);
        let r3 = [(&p * &p - &p), (&qp * &qp - &qp), (&qm * &qm - &qm)]
            .iter()
            .map(|m| norm.operator(m))
            .fold(0.0, f64::max);
        let tt = op.evaluate(t, s)?;
        let (ps, qps, qms) = (splitting.p(s), splitting.q_plus(s), splitting.q_minus(s));
        let c1 = norm.operator(&(&p * &tt - &tt * &ps));
        let c2 = norm.operator(&(&qp * &tt - &tt * &qps));
        let c3 = norm.operator(&(&qm * &tt - &tt * &qms));
        Ok([r1, r2, r3, c1, c2, c3])
    });
    let mut worst = [0.0f64; 6];
    for r in rows {
        let r = r?;
        for i in 0..6 {
            worst[i] = worst[i].max(r[i]);
        }
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    Ok(SplittingReport {
        sum_to_identity: worst[0],
        mutual_annihilation: worst[1],
        idempotency: worst[2],
        commutes_p: worst[3],
        commutes_q_plus: worst[4],
        commutes_q_minus: worst[5],
        worst: max,
        tolerance: tol,
        samples: samples.len(),
        pass: max <= tol,
    })
}

/// Largest `|T_{t,r} T_{r,s} - T_{t,s}|` over `(t, r, s)` samples.
pub fn check_cocycle(op: &EvolutionOperator, samples: &[(f64, f64, f64)], norm: NormSpec) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Precondition("no samples".into()));
    }
    let res = Execution::default().map(samples.len(), |i| -> Result<f64> {
        let (t, r, s) = samples[i];
        let lhs = op.evaluate(t, r)? * op.evaluate(r, s)?;
        Ok(norm.operator(&(lhs - op.evaluate(t, s)?)))
    });
    res.into_iter().try_fold(0.0f64, |m, r| Ok(m.max(r?)))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Margin {
    /// `max (|T proj| - bound)`
    pub worst: f64,
    /// `max |T proj| / bound`
    pub worst_ratio: f64,
    pub at: (f64, f64),
    pub samples: usize,
}

impl Margin {
    fn empty() -> Self {
        Self {
            worst: f64::NEG_INFINITY,
            worst_ratio: 0.0,
            at: (f64::NAN, f64::NAN),
            samples: 0,
        }
    }

    fn update(&mut self, value: f64, bound: f64, at: (f64, f64)) {
        let m = value - bound;
        if m > self.worst {
            self.worst = m;
            self.at = at;
        }
        self.worst_ratio = self.worst_ratio.max(value / bound);
        self.samples += 1;
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundReport {
    pub d1: Margin,
    pub d2: Margin,
    pub d3: Margin,
    pub tolerance: f64,
    pub pass: bool,
}

fn positive_bound(v: f64, what: &str, t: f64, s: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::InvalidBoundFamily(format!(
            "{what}({t}, {s}) = {v} is not positive and finite"
        )))
    }
}

/// Worst margins of the three trichotomy inequalities. A sample passes when
/// `|T proj| <= bound * (1 + tol)`.
pub fn check_bounds(
    op: &EvolutionOperator,
    splitting: &InvariantSplitting,
    bounds: &BoundFamily,
    norm: NormSpec,
    samples: &[(f64, f64)],
    tol: f64,
) -> Result<BoundReport> {
    if samples.is_empty() {
        return Err(Error::Precondition("no samples".into()));
    }
    if splitting.dim() != op.dim() {
        return Err(Error::DimensionMismatch {
            expected: op.dim(),
            found: splitting.dim(),
        });
    }
    type Row = (f64, f64, Option<(f64, f64)>, Option<(f64, f64)>);
    let rows = Execution::default().map(samples.len(), |i| -> Result<Row> {
        let (t, s) = samples[i];
        let tt = op.evaluate(t, s)?;
        let a = positive_bound(bounds.alpha(t, s), "alpha", t, s)?;
        let v1 = norm.operator(&(&tt * splitting.p(s)));
        let d2 = if t >= s {
            let b = positive_bound(bounds.beta_plus(t, s), "beta_plus", t, s)?;
            Some((norm.operator(&(&tt * splitting.q_plus(s))), b))
        } else {
            None
        };
        let d3 = if t <= s {
            let b = positive_bound(bounds.beta_minus(t, s), "beta_minus", t, s)?;
            Some((norm.operator(&(&tt * splitting.q_minus(s))), b))
        } else {
            None
        };
        Ok((v1, a, d2, d3))
    });
    let (mut d1, mut d2, mut d3) = (Margin::empty(), Margin::empty(), Margin::empty());
    for (row, &(t, s)) in rows.into_iter().zip(samples) {
        let (v1, a, p, m) = row?;
        d1.update(v1, a, (t, s));
        if let Some((v, b)) = p {
            d2.update(v, b, (t, s));
        }
        if let Some((v, b)) = m {
            d3.update(v, b, (t, s));
        }
    }
    let ok = |m: &Margin| m.samples == 0 || m.worst_ratio <= 1.0 + tol;
    let pass = ok(&d1) && ok(&d2) && ok(&d3);
    Ok(BoundReport {
        d1,
        d2,
        d3,
        tolerance: tol,
        pass,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LimitSchedule {
    /// Offsets `|r - s| = base * 2^k` for `k = 0..=doublings`.
    pub base: f64,
    pub doublings: u32,
    pub tol: f64,
    /// Number of trailing schedule points that must be non-increasing.
    pub tail_points: usize,
}

impl Default for LimitSchedule {
    fn default() -> Self {
        Self {
            base: 1.0,
            doublings: 64,
            tol: 1e-6,
            tail_points: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LimitVerdict {
    Vanishes,
    /// Decreasing at the end of the schedule but still above tolerance.
    HorizonTooSmall,
    /// Flat or increasing at the end of the schedule.
    ConditionViolated,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LimitSide {
    pub verdict: LimitVerdict,
    pub last_value: f64,
    pub last_offset: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LimitCheck {
    pub s: f64,
    /// `beta+_{s,r} alpha_{r,s}` as `r -> -inf`
    pub backward: LimitSide,
    /// `beta-_{s,r} alpha_{r,s}` as `r -> +inf`
    pub forward: LimitSide,
    pub pass: bool,
}

fn limit_side(values: &[(f64, f64)], sched: &LimitSchedule) -> LimitSide {
    let Some(&(off, last)) = values.last() else {
        return LimitSide {
            verdict: LimitVerdict::ConditionViolated,
            last_value: f64::NAN,
            last_offset: 0.0,
        };
    };
    let k = sched.tail_points.max(2).min(values.len());
    let tail = &values[values.len() - k..];
    let monotone = tail.windows(2).all(|w| w[1].1 <= w[0].1);
    let verdict = if monotone && last <= sched.tol {
        LimitVerdict::Vanishes
    } else if tail.len() >= 2 && tail[tail.len() - 1].1 < tail[tail.len() - 2].1 {
        LimitVerdict::HorizonTooSmall
    } else {
        LimitVerdict::ConditionViolated
    };
    LimitSide {
        verdict,
        last_value: last,
        last_offset: off,
    }
}

/// Evaluates both vanishing-limit products along a geometric schedule. The
/// schedule is cut short where a product stops being finite.
pub fn check_vanishing_limits(bounds: &BoundFamily, s_samples: &[f64], sched: &LimitSchedule) -> Vec<LimitCheck> {
    Execution::default().map(s_samples.len(), |i| {
        let s = s_samples[i];
        let mut back = Vec::new();
        let mut fwd = Vec::new();
        let mut back_open = true;
        let mut fwd_open = true;
        for k in 0..=sched.doublings {
            let off = sched.base * 2f64.powi(k as i32);
            if back_open {
                let r = s - off;
                let v = bounds.beta_plus(s, r) * bounds.alpha(r, s);
                if v.is_finite() {
                    back.push((off, v));
                } else {
                    back_open = false;
                }
            }
            if fwd_open {
                let r = s + off;
                let v = bounds.beta_minus(s, r) * bounds.alpha(r, s);
                if v.is_finite() {
                    fwd.push((off, v));
                } else {
                    fwd_open = false;
                }
            }
        }
        let backward = limit_side(&back, sched);
        let forward = limit_side(&fwd, sched);
        let pass = backward.verdict == LimitVerdict::Vanishes && forward.verdict == LimitVerdict::Vanishes;
        LimitCheck {
            s,
            backward,
            forward,
            pass,
        }
    })
}
