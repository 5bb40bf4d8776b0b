//! Discretised Lyapunov-Perron operator and its fixed-point iteration.
//!
//! The trajectory field `x(t, s, xi)` lives on a `(t, s, xi)` tensor grid and
//! the graph map `phi(s, xi)` on the `(s, xi)` sub-grid; both are stored in
//! chart coordinates. One application of the operator is a map over the
//! `(s, xi)` records: for each record the perturbation is evaluated at the
//! Gauss nodes of every `t`-interval and the three integrals are accumulated
//! outward from `s`.
//!
//! Layouts (dimension `0` of `xi` varies fastest in the linear index `l`):
//!
//! * centre field: `((i_s * n_xi^k + l) * n_t + j_t) * k + c`;
//! * graph field: `(i_s * n_xi^k + l) * (p + m) + c`, the `F+` block first.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::families::LipBudget;
use crate::hypotheses::HypothesisReport;
use crate::interp::{tensor_eval, Axis, Interpolation, Stencil};
use crate::norm::NormSpec;
use crate::quadrature::{self, Direction, HalfLineOptions};
use crate::sampling;
use crate::trichotomy::{BoundFamily, EvolutionOperator, SplittingChart};
use crate::{Error, Result};

pub type RhsFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Nonlinearity `f(t, v)` together with the budget its Lipschitz constants respect.
#[derive(Clone)]
pub struct Perturbation {
    dim: usize,
    f: RhsFn,
    pub budget: LipBudget,
    zero: bool,
}

impl fmt::Debug for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Perturbation")
            .field("dim", &self.dim)
            .field("budget", &self.budget)
            .field("zero", &self.zero)
            .finish()
    }
}

impl Perturbation {
    pub fn new(dim: usize, budget: LipBudget, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self {
            dim,
            f: Arc::new(f),
            budget,
            zero: false,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            f: Arc::new(|_, _, out: &mut [f64]| out.iter_mut().for_each(|o| *o = 0.0)),
            budget: LipBudget::zero(),
            zero: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    #[inline]
    pub fn eval(&self, t: f64, v: &[f64], out: &mut [f64]) {
        (self.f)(t, v, out)
    }
}

/// Everything the operator needs about the equation `v' = A(t)v + f(t, v)`.
#[derive(Clone, Debug)]
pub struct Problem {
    pub op: EvolutionOperator,
    pub chart: SplittingChart,
    pub bounds: BoundFamily,
    pub perturbation: Perturbation,
    pub norm: NormSpec,
}

impl Problem {
    pub fn new(
        op: EvolutionOperator,
        chart: SplittingChart,
        bounds: BoundFamily,
        perturbation: Perturbation,
        norm: NormSpec,
    ) -> Result<Self> {
        let n = op.dim();
        for found in [chart.dim(), perturbation.dim()] {
            if found != n {
                return Err(Error::DimensionMismatch { expected: n, found });
            }
        }
        norm.validate()?;
        Ok(Self {
            op,
            chart,
            bounds,
            perturbation,
            norm,
        })
    }

    /// Norm of the state with chart coordinates `coords` at time `t`.
    pub fn state_norm(&self, t: f64, coords: &[f64]) -> f64 {
        if self.chart.is_coordinate() {
            self.norm.vector(coords)
        } else {
            self.norm.vec(&self.chart.embed(t, coords))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// `t`-grid on `[-t_half, t_half]`; also the truncation radius of the half-line integrals.
    pub t_half: f64,
    pub n_t: usize,
    pub s_half: f64,
    pub n_s: usize,
    /// `xi`-box `[-xi_half, xi_half]^k`.
    pub xi_half: f64,
    pub n_xi: usize,
    /// Gauss-Legendre nodes per `t`-interval.
    pub gauss_points: usize,
    pub interpolation: Interpolation,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            t_half: 10.0,
            n_t: 41,
            s_half: 5.0,
            n_s: 21,
            xi_half: 1.0,
            n_xi: 9,
            gauss_points: 4,
            interpolation: Interpolation::Multilinear,
        }
    }
}

impl GridSpec {
    /// Halves every spacing; the old nodes stay nodes.
    pub fn refined(&self) -> Self {
        Self {
            n_t: 2 * self.n_t - 1,
            n_s: 2 * self.n_s - 1,
            n_xi: 2 * self.n_xi - 1,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_half > 0.0 && self.t_half >= self.s_half && self.xi_half > 0.0) {
            return Err(Error::GridMismatch(format!(
                "need 0 < s_half <= t_half and xi_half > 0, got s_half={}, t_half={}, xi_half={}",
                self.s_half, self.t_half, self.xi_half
            )));
        }
        if self.gauss_points == 0 || self.n_xi < 2 {
            return Err(Error::GridMismatch("need gauss_points >= 1 and n_xi >= 2".into()));
        }
        let t = Axis::symmetric(self.t_half, self.n_t)?;
        let s = Axis::symmetric(self.s_half, self.n_s)?;
        for i in 0..s.n {
            if t.index_of(s.node(i)).is_none() {
                return Err(Error::GridMismatch(format!(
                    "s-node {} is not a t-node; the s-grid must be a sub-grid of the t-grid",
                    s.node(i)
                )));
            }
        }
        Ok(())
    }
}

/// Resolved axes, index maps and quadrature nodes of a [`GridSpec`].
#[derive(Clone, Debug)]
pub struct Grid {
    pub spec: GridSpec,
    pub t: Axis,
    pub s: Axis,
    pub xi: Axis,
    pub k: usize,
    pub p: usize,
    pub m: usize,
    /// Number of `xi` nodes, `n_xi^k`.
    pub n_xi_total: usize,
    /// `t`-index of every `s`-node.
    pub s_in_t: Vec<usize>,
    /// Gauss nodes, grouped by `t`-interval.
    pub r: Vec<f64>,
    pub w: Vec<f64>,
}

impl Grid {
    pub fn new(spec: GridSpec, dims: (usize, usize, usize)) -> Result<Self> {
        spec.validate()?;
        let (k, p, m) = dims;
        if k == 0 {
            return Err(Error::GridMismatch("centre direction must be non-trivial".into()));
        }
        let t = Axis::symmetric(spec.t_half, spec.n_t)?;
        let s = Axis::symmetric(spec.s_half, spec.n_s)?;
        let xi = Axis::symmetric(spec.xi_half, spec.n_xi)?;
        let s_in_t = (0..s.n).map(|i| t.index_of(s.node(i)).expect("validated")).collect();
        let (gx, gw) = quadrature::gauss_legendre(spec.gauss_points);
        let mut r = Vec::with_capacity((t.n - 1) * gx.len());
        let mut w = Vec::with_capacity(r.capacity());
        for j in 0..t.n - 1 {
            let (a, b) = (t.node(j), t.node(j + 1));
            let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
            for (x, wt) in gx.iter().zip(&gw) {
                r.push(c + h * x);
                w.push(h * wt);
            }
        }
        let n_xi_total = spec
            .n_xi
            .checked_pow(k as u32)
            .ok_or_else(|| Error::GridMismatch("xi grid too large".into()))?;
        Ok(Self {
            spec,
            t,
            s,
            xi,
            k,
            p,
            m,
            n_xi_total,
            s_in_t,
            r,
            w,
        })
    }

    pub fn n_r(&self) -> usize {
        self.r.len()
    }

    /// Centre coordinates of the `l`-th `xi` node.
    pub fn xi_point(&self, l: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        let mut rem = l;
        for o in out.iter_mut() {
            *o = self.xi.node(rem % self.spec.n_xi);
            rem /= self.spec.n_xi;
        }
        out
    }

    /// Linear index of a `xi` node given by coordinates.
    pub fn xi_index(&self, xi: &[f64]) -> Option<usize> {
        let mut l = 0;
        let mut stride = 1;
        for &c in xi {
            l += self.xi.index_of(c)? * stride;
            stride *= self.spec.n_xi;
        }
        Some(l)
    }

    fn same_shape(&self, other: &Grid) -> bool {
        self.spec == other.spec && (self.k, self.p, self.m) == (other.k, other.p, other.m)
    }
}

/// Discrete trajectory field `x(t, s, xi)` in centre coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterField {
    pub n_t: usize,
    pub n_s: usize,
    pub n_xi_total: usize,
    pub k: usize,
    pub values: Vec<f64>,
}

impl CenterField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            n_t: grid.t.n,
            n_s: grid.s.n,
            n_xi_total: grid.n_xi_total,
            k: grid.k,
            values: vec![0.0; grid.t.n * grid.s.n * grid.n_xi_total * grid.k],
        }
    }

    #[inline]
    pub fn offset(&self, j_t: usize, i_s: usize, l: usize) -> usize {
        ((i_s * self.n_xi_total + l) * self.n_t + j_t) * self.k
    }

    pub fn get(&self, j_t: usize, i_s: usize, l: usize) -> &[f64] {
        let o = self.offset(j_t, i_s, l);
        &self.values[o..o + self.k]
    }

    fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n_t, self.n_s, self.n_xi_total, self.k)
    }
}

/// Discrete graph map `phi(s, xi) = (phi+, phi-)` in chart coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphField {
    pub n_s: usize,
    pub n_xi_total: usize,
    pub p: usize,
    pub m: usize,
    pub values: Vec<f64>,
}

impl GraphField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            n_s: grid.s.n,
            n_xi_total: grid.n_xi_total,
            p: grid.p,
            m: grid.m,
            values: vec![0.0; grid.s.n * grid.n_xi_total * (grid.p + grid.m)],
        }
    }

    pub fn width(&self) -> usize {
        self.p + self.m
    }

    #[inline]
    pub fn offset(&self, i_s: usize, l: usize) -> usize {
        (i_s * self.n_xi_total + l) * self.width()
    }

    pub fn get(&self, i_s: usize, l: usize) -> &[f64] {
        let o = self.offset(i_s, l);
        &self.values[o..o + self.width()]
    }

    fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n_s, self.n_xi_total, self.p, self.m)
    }
}

/// Row-major `rows x cols` block times `v`, added into `out` with factor `a`.
#[inline]
fn gemv_acc(mat: &[f64], rows: usize, cols: usize, v: &[f64], a: f64, out: &mut [f64]) {
    for i in 0..rows {
        let row = &mat[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for j in 0..cols {
            acc += row[j] * v[j];
        }
        out[i] += a * acc;
    }
}

fn push_rows(dst: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            dst.push(m[(i, j)]);
        }
    }
}

/// Transfer matrices for one `s`-node.
#[derive(Clone, Debug)]
struct SNodeOps {
    j_s: usize,
    /// `n x k`: centre coordinates at `s` to the state.
    xi_embed: Vec<f64>,
    /// Per `t`-node, `k x n`: centre coordinates at `t_j` of `T_{t_j,s}`.
    a: Vec<f64>,
    /// Per Gauss node, `n x n`: `T_{s,r} P_r`.
    b: Vec<f64>,
    /// Per Gauss node, `p x n`: `F+` coordinates at `s` of `T_{s,r} Q+_r`.
    lp: Vec<f64>,
    /// Per Gauss node, `m x n`: minus the `F-` coordinates at `s` of `T_{s,r} Q-_r`.
    lm: Vec<f64>,
}

/// `f` evaluated along the Gauss nodes for one `(s, xi)` record.
struct Integrand {
    f: Vec<f64>,
    extrapolated: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    /// Target for the a-posteriori bound on `d''`.
    pub tol: f64,
    pub max_iters: usize,
    /// Run even when the hypothesis certificate fails or is absent.
    pub force: bool,
    /// Allowed excess of an observed step ratio over `q`.
    pub ratio_slack: f64,
    /// Iterations excluded from the ratio diagnostics.
    pub burn_in: usize,
    pub execution: Execution,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 50,
            force: false,
            ratio_slack: 0.1,
            burn_in: 2,
            execution: Execution::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    /// `d'` between consecutive trajectory fields.
    #[serde(with = "crate::nullable")]
    pub d_prime: f64,
    /// `d` between consecutive graph maps.
    #[serde(with = "crate::nullable")]
    pub d: f64,
    #[serde(with = "crate::nullable")]
    pub d_second: f64,
    /// `d''` step over the previous one.
    pub ratio: Option<f64>,
    /// `q / (1 - q) * d''`
    #[serde(with = "crate::nullable")]
    pub error_bound: f64,
}

#[derive(Clone, Debug)]
pub struct SolverState {
    pub x: CenterField,
    pub phi: GraphField,
    pub iterations: usize,
    pub history: Vec<StepRecord>,
    pub q: f64,
    pub m: f64,
    pub n: f64,
    pub error_bound: f64,
    pub converged: bool,
    /// Evaluations of `phi` outside the `xi`-box in the last sweep.
    pub extrapolations: usize,
    /// Certified bound on the truncated half-line tails, relative to `|xi|`.
    pub truncation_bound: f64,
    pub warnings: Vec<String>,
}

impl SolverState {
    pub fn ratios(&self) -> Vec<f64> {
        self.history.iter().filter_map(|h| h.ratio).collect()
    }

    pub fn summary(&self) -> SolverSummary {
        SolverSummary {
            iterations: self.iterations,
            q: self.q,
            m: self.m,
            n: self.n,
            error_bound: self.error_bound,
            converged: self.converged,
            extrapolations: self.extrapolations,
            truncation_bound: self.truncation_bound,
            history: self.history.clone(),
            warnings: self.warnings.clone(),
        }
    }
}

/// Serializable part of a [`SolverState`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverSummary {
    pub iterations: usize,
    #[serde(with = "crate::nullable")]
    pub q: f64,
    #[serde(rename = "M")]
    #[serde(with = "crate::nullable")]
    pub m: f64,
    #[serde(rename = "N")]
    #[serde(with = "crate::nullable")]
    pub n: f64,
    #[serde(with = "crate::nullable")]
    pub error_bound: f64,
    pub converged: bool,
    pub extrapolations: usize,
    #[serde(with = "crate::nullable")]
    pub truncation_bound: f64,
    pub history: Vec<StepRecord>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CenterFieldReport {
    /// `max |x(s, s, xi) - xi| / |xi|`
    pub identity_residual: f64,
    /// `max |x(t, s, 0)|`
    pub zero_residual: f64,
    /// Largest `|x(t,s,xi) - x(t,s,xi')| / (alpha_{t,s} |xi - xi'|)` over neighbouring nodes.
    pub lipschitz: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TransportReport {
    pub worst: f64,
    pub evaluated: usize,
    /// Samples whose trajectory left the `xi`-box.
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GraphFieldReport {
    /// `max |phi(s, 0)|`
    pub zero_residual: f64,
    /// Largest `|phi(s,xi) - phi(s,xi')| / |xi - xi'|` over neighbouring nodes.
    pub lipschitz: f64,
}

/// A [`Problem`] on a fixed grid with all transfer matrices precomputed.
pub struct Discretization {
    pub problem: Problem,
    pub grid: Grid,
    ops: Vec<SNodeOps>,
    t_stencil: Vec<Stencil>,
    s_stencil: Vec<Stencil>,
    /// `n x n` frames at the Gauss nodes; empty for coordinate charts.
    frames: Vec<f64>,
    /// `alpha_{t_j, s_i}` at index `i_s * n_t + j_t`.
    alpha: Vec<f64>,
    /// `|xi|` at index `i_s * n_xi_total + l`.
    xi_norm: Vec<f64>,
    xi_strides: Vec<usize>,
}

impl fmt::Debug for Discretization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Discretization")
            .field("grid", &self.grid.spec)
            .field("problem", &self.problem)
            .finish()
    }
}

impl Discretization {
    pub fn new(problem: Problem, spec: GridSpec) -> Result<Self> {
        Self::with_execution(problem, spec, Execution::default())
    }

    pub fn with_execution(problem: Problem, spec: GridSpec, exec: Execution) -> Result<Self> {
        let grid = Grid::new(spec, problem.chart.dims())?;
        let (k, p, m) = (grid.k, grid.p, grid.m);
        let n = problem.chart.dim();
        let chart = &problem.chart;
        let op = &problem.op;

        let per_s: Vec<Result<SNodeOps>> = exec.map(grid.s.n, |i_s| {
            let s = grid.s.node(i_s);
            let finv_s = chart.frame_inverse(s)?;
            let frame_s = chart.frame(s);
            let mut xi_embed = Vec::with_capacity(n * k);
            push_rows(&mut xi_embed, &frame_s.columns(0, k).into_owned());
            let mut a = Vec::with_capacity(grid.t.n * k * n);
            for j in 0..grid.t.n {
                let t = grid.t.node(j);
                let c = chart.frame_inverse(t)?.rows(0, k).into_owned();
                push_rows(&mut a, &(c * op.evaluate(t, s)?));
            }
            let mut b = Vec::with_capacity(grid.n_r() * n * n);
            let mut lp = Vec::with_capacity(grid.n_r() * p * n);
            let mut lm = Vec::with_capacity(grid.n_r() * m * n);
            let cp = finv_s.rows(k, p).into_owned();
            let cm = -finv_s.rows(k + p, m).into_owned();
            for &r in &grid.r {
                let tsr = op.evaluate(s, r)?;
                push_rows(&mut b, &(&tsr * chart.p(r)?));
                push_rows(&mut lp, &(&cp * &tsr * chart.q_plus(r)?));
                push_rows(&mut lm, &(&cm * &tsr * chart.q_minus(r)?));
            }
            Ok(SNodeOps {
                j_s: grid.s_in_t[i_s],
                xi_embed,
                a,
                b,
                lp,
                lm,
            })
        });
        let ops = per_s.into_iter().collect::<Result<Vec<_>>>()?;

        let order = spec.interpolation;
        let t_stencil = grid.r.iter().map(|&r| grid.t.stencil(r, order)).collect();
        let s_stencil = grid
            .r
            .iter()
            .map(|&r| grid.s.stencil(r.clamp(-spec.s_half, spec.s_half), order))
            .collect();
        let mut frames = Vec::new();
        if !chart.is_coordinate() {
            for &r in &grid.r {
                push_rows(&mut frames, &chart.frame(r));
            }
        }
        let mut alpha = Vec::with_capacity(grid.s.n * grid.t.n);
        for i_s in 0..grid.s.n {
            for j in 0..grid.t.n {
                alpha.push(problem.bounds.alpha(grid.t.node(j), grid.s.node(i_s)));
            }
        }
        let mut xi_norm = Vec::with_capacity(grid.s.n * grid.n_xi_total);
        let mut buf = vec![0.0; n];
        for i_s in 0..grid.s.n {
            for l in 0..grid.n_xi_total {
                buf[..k].copy_from_slice(&grid.xi_point(l));
                xi_norm.push(problem.state_norm(grid.s.node(i_s), &buf));
            }
        }
        let mut xi_strides = Vec::with_capacity(k + 1);
        let mut st = 1;
        for _ in 0..=k {
            xi_strides.push(st);
            st *= spec.n_xi;
        }
        Ok(Self {
            problem,
            grid,
            ops,
            t_stencil,
            s_stencil,
            frames,
            alpha,
            xi_norm,
            xi_strides,
        })
    }

    fn n(&self) -> usize {
        self.problem.chart.dim()
    }

    /// `x(t, s, xi) = T_{t,s} P_s xi` in centre coordinates.
    pub fn initial_center(&self) -> CenterField {
        let g = &self.grid;
        let (k, n) = (g.k, self.n());
        let mut x = CenterField::zeros(g);
        let mut pxi = vec![0.0; n];
        for i_s in 0..g.s.n {
            let ops = &self.ops[i_s];
            for l in 0..g.n_xi_total {
                let xi = g.xi_point(l);
                pxi.iter_mut().for_each(|v| *v = 0.0);
                gemv_acc(&ops.xi_embed, n, k, &xi, 1.0, &mut pxi);
                for j in 0..g.t.n {
                    let o = x.offset(j, i_s, l);
                    gemv_acc(&ops.a[j * k * n..(j + 1) * k * n], k, n, &pxi, 1.0, &mut x.values[o..o + k]);
                }
            }
        }
        x
    }

    fn check_fields(&self, x: &CenterField, phi: &GraphField) -> Result<()> {
        let g = &self.grid;
        if x.shape() != (g.t.n, g.s.n, g.n_xi_total, g.k) {
            return Err(Error::GridMismatch(format!("centre field shape {:?}", x.shape())));
        }
        if phi.shape() != (g.s.n, g.n_xi_total, g.p, g.m) {
            return Err(Error::GridMismatch(format!("graph field shape {:?}", phi.shape())));
        }
        Ok(())
    }

    /// Interpolates `phi(s, y)`, clamping `s` into the grid and extending
    /// positively homogeneously outside the `xi`-box. Returns whether the
    /// extension was used.
    pub fn phi_eval(&self, phi: &GraphField, s: f64, y: &[f64], out: &mut [f64]) -> bool {
        let sst = self.grid.s.stencil(s.clamp(-self.grid.spec.s_half, self.grid.spec.s_half), self.grid.spec.interpolation);
        self.phi_eval_with(phi, sst, y, out)
    }

    fn phi_eval_with(&self, phi: &GraphField, s_stencil: Stencil, y: &[f64], out: &mut [f64]) -> bool {
        let g = &self.grid;
        let k = g.k;
        let lam = y.iter().fold(0.0f64, |a, v| a.max(v.abs())) / g.spec.xi_half;
        let scale = if lam > 1.0 { lam } else { 1.0 };
        let mut st = [s_stencil; 9];
        assert!(k < st.len(), "at most 8 centre dimensions");
        for d in 0..k {
            st[d] = g.xi.stencil(y[d] / scale, g.spec.interpolation);
        }
        st[k] = s_stencil;
        tensor_eval(&st[..=k], &self.xi_strides, &phi.values, 0, phi.width(), out);
        if scale > 1.0 {
            out[..phi.width()].iter_mut().for_each(|v| *v *= scale);
            true
        } else {
            false
        }
    }

    /// `x(t, s_i, xi_l)` at an arbitrary `t`, interpolated along the `t`-axis.
    pub fn x_eval(&self, x: &CenterField, t: f64, i_s: usize, l: usize, out: &mut [f64]) {
        let st = self.grid.t.stencil(t, self.grid.spec.interpolation);
        tensor_eval(&[st], &[1], &x.values, (i_s * x.n_xi_total + l) * x.n_t, x.k, out);
    }

    fn integrand(&self, x: &CenterField, phi: &GraphField, i_s: usize, l: usize) -> Integrand {
        let g = &self.grid;
        let (k, n, w) = (g.k, self.n(), phi.width());
        let nr = g.n_r();
        let mut f = vec![0.0; nr * n];
        let mut extrapolated = 0;
        if self.problem.perturbation.is_zero() {
            return Integrand { f, extrapolated };
        }
        let base = (i_s * x.n_xi_total + l) * x.n_t;
        let mut c = vec![0.0; n];
        let mut u = vec![0.0; n];
        for q in 0..nr {
            let r = g.r[q];
            tensor_eval(&[self.t_stencil[q]], &[1], &x.values, base, k, &mut c[..k]);
            let (head, tail) = c.split_at_mut(k);
            if self.phi_eval_with(phi, self.s_stencil[q], head, &mut tail[..w]) {
                extrapolated += 1;
            }
            let arg: &[f64] = if self.frames.is_empty() {
                &c
            } else {
                u.iter_mut().for_each(|v| *v = 0.0);
                gemv_acc(&self.frames[q * n * n..(q + 1) * n * n], n, n, &c, 1.0, &mut u);
                &u
            };
            self.problem.perturbation.eval(r, arg, &mut f[q * n..(q + 1) * n]);
        }
        Integrand { f, extrapolated }
    }

    /// One operator application for a single `(s, xi)` record: the new
    /// `x(., s, xi)` along the `t`-grid and the new `phi(s, xi)`.
    fn apply_record(&self, x: &CenterField, phi: &GraphField, i_s: usize, l: usize) -> (Vec<f64>, Vec<f64>, usize) {
        let g = &self.grid;
        let (k, p, m, n) = (g.k, g.p, g.m, self.n());
        let gp = g.spec.gauss_points;
        let ops = &self.ops[i_s];
        let Integrand { f, extrapolated } = self.integrand(x, phi, i_s, l);
        let xi = g.xi_point(l);
        let mut pxi = vec![0.0; n];
        gemv_acc(&ops.xi_embed, n, k, &xi, 1.0, &mut pxi);

        let mut xs = vec![0.0; g.t.n * k];
        let mut acc = pxi.clone();
        let js = ops.j_s;
        let kn = k * n;
        gemv_acc(&ops.a[js * kn..(js + 1) * kn], k, n, &acc, 1.0, &mut xs[js * k..(js + 1) * k]);
        for j in js..g.t.n - 1 {
            for q in j * gp..(j + 1) * gp {
                gemv_acc(&ops.b[q * n * n..(q + 1) * n * n], n, n, &f[q * n..(q + 1) * n], g.w[q], &mut acc);
            }
            gemv_acc(&ops.a[(j + 1) * kn..(j + 2) * kn], k, n, &acc, 1.0, &mut xs[(j + 1) * k..(j + 2) * k]);
        }
        acc.copy_from_slice(&pxi);
        for j in (0..js).rev() {
            for q in j * gp..(j + 1) * gp {
                gemv_acc(&ops.b[q * n * n..(q + 1) * n * n], n, n, &f[q * n..(q + 1) * n], -g.w[q], &mut acc);
            }
            gemv_acc(&ops.a[j * kn..(j + 1) * kn], k, n, &acc, 1.0, &mut xs[j * k..(j + 1) * k]);
        }

        let mut ph = vec![0.0; p + m];
        let (plus, minus) = ph.split_at_mut(p);
        for q in 0..js * gp {
            gemv_acc(&ops.lp[q * p * n..(q + 1) * p * n], p, n, &f[q * n..(q + 1) * n], g.w[q], plus);
        }
        for q in js * gp..g.n_r() {
            gemv_acc(&ops.lm[q * m * n..(q + 1) * m * n], m, n, &f[q * n..(q + 1) * n], g.w[q], minus);
        }
        (xs, ph, extrapolated)
    }

    /// `T(x, phi) = (J(x, phi), L+(x, phi) + L-(x, phi))` and the number of
    /// homogeneous extensions used.
    pub fn apply(&self, x: &CenterField, phi: &GraphField, exec: Execution) -> Result<(CenterField, GraphField, usize)> {
        self.check_fields(x, phi)?;
        let g = &self.grid;
        let nrec = g.s.n * g.n_xi_total;
        let parts = exec.map(nrec, |rec| self.apply_record(x, phi, rec / g.n_xi_total, rec % g.n_xi_total));
        let mut xn = CenterField::zeros(g);
        let mut pn = GraphField::zeros(g);
        let (xw, pw) = (g.t.n * g.k, pn.width());
        let mut extrap = 0;
        for (rec, (xs, ph, e)) in parts.into_iter().enumerate() {
            xn.values[rec * xw..(rec + 1) * xw].copy_from_slice(&xs);
            pn.values[rec * pw..(rec + 1) * pw].copy_from_slice(&ph);
            extrap += e;
        }
        Ok((xn, pn, extrap))
    }

    pub fn apply_j(&self, x: &CenterField, phi: &GraphField) -> Result<CenterField> {
        Ok(self.apply(x, phi, Execution::default())?.0)
    }

    /// The `F+` block of the new graph map; the `F-` block is zero.
    pub fn apply_l_plus(&self, x: &CenterField, phi: &GraphField) -> Result<GraphField> {
        let mut out = self.apply(x, phi, Execution::default())?.1;
        let (p, w) = (out.p, out.width());
        for rec in out.values.chunks_mut(w) {
            rec[p..].iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(out)
    }

    /// The `F-` block of the new graph map; the `F+` block is zero.
    pub fn apply_l_minus(&self, x: &CenterField, phi: &GraphField) -> Result<GraphField> {
        let mut out = self.apply(x, phi, Execution::default())?.1;
        let (p, w) = (out.p, out.width());
        for rec in out.values.chunks_mut(w) {
            rec[..p].iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(out)
    }

    fn graph_norm(&self, s: f64, block: &[f64], buf: &mut [f64]) -> f64 {
        let k = self.grid.k;
        buf[..k].iter_mut().for_each(|v| *v = 0.0);
        buf[k..].copy_from_slice(block);
        self.problem.state_norm(s, buf)
    }

    fn center_norm(&self, t: f64, block: &[f64], buf: &mut [f64]) -> f64 {
        let k = self.grid.k;
        buf[..k].copy_from_slice(block);
        buf[k..].iter_mut().for_each(|v| *v = 0.0);
        self.problem.state_norm(t, buf)
    }

    /// `max |phi - psi| / |xi|` over the grid nodes with `xi != 0`.
    pub fn metric_d(&self, phi: &GraphField, psi: &GraphField) -> Result<f64> {
        if phi.shape() != psi.shape() || phi.shape() != GraphField::zeros(&self.grid).shape() {
            return Err(Error::GridMismatch("graph fields on different grids".into()));
        }
        let g = &self.grid;
        let mut buf = vec![0.0; self.n()];
        let mut diff = vec![0.0; phi.width()];
        let mut best: f64 = 0.0;
        for i_s in 0..g.s.n {
            let s = g.s.node(i_s);
            for l in 0..g.n_xi_total {
                let nx = self.xi_norm[i_s * g.n_xi_total + l];
                if nx == 0.0 {
                    continue;
                }
                for ((d, a), b) in diff.iter_mut().zip(phi.get(i_s, l)).zip(psi.get(i_s, l)) {
                    *d = a - b;
                }
                best = best.max(self.graph_norm(s, &diff, &mut buf) / nx);
            }
        }
        Ok(best)
    }

    /// `max |x - y| / (alpha_{t,s} |xi|)` over the grid nodes with `xi != 0`.
    pub fn metric_dprime(&self, x: &CenterField, y: &CenterField) -> Result<f64> {
        if x.shape() != y.shape() || x.shape() != CenterField::zeros(&self.grid).shape() {
            return Err(Error::GridMismatch("centre fields on different grids".into()));
        }
        let g = &self.grid;
        let mut buf = vec![0.0; self.n()];
        let mut diff = vec![0.0; g.k];
        let mut best: f64 = 0.0;
        for i_s in 0..g.s.n {
            for l in 0..g.n_xi_total {
                let nx = self.xi_norm[i_s * g.n_xi_total + l];
                if nx == 0.0 {
                    continue;
                }
                for j in 0..g.t.n {
                    for ((d, a), b) in diff.iter_mut().zip(x.get(j, i_s, l)).zip(y.get(j, i_s, l)) {
                        *d = a - b;
                    }
                    let v = self.center_norm(g.t.node(j), &diff, &mut buf) / (self.alpha[i_s * g.t.n + j] * nx);
                    best = best.max(v);
                }
            }
        }
        Ok(best)
    }

    /// `d' + d`
    pub fn metric_dsecond(&self, a: (&CenterField, &GraphField), b: (&CenterField, &GraphField)) -> Result<f64> {
        Ok(self.metric_dprime(a.0, b.0)? + self.metric_d(a.1, b.1)?)
    }

    /// Largest `omega`-integrand mass beyond the truncation radius over the `s`-grid.
    pub fn truncation_tail(&self) -> Result<f64> {
        let g = &self.grid;
        let lip = &self.problem.perturbation.budget;
        if self.problem.perturbation.is_zero() || lip.is_zero() {
            return Ok(0.0);
        }
        let b = &self.problem.bounds;
        let opts = HalfLineOptions {
            abs_tol: 1e-14,
            tail_tol: 1e-16,
            ..HalfLineOptions::default()
        };
        let big_t = g.spec.t_half;
        let mut worst: f64 = 0.0;
        for i_s in 0..g.s.n {
            let s = g.s.node(i_s);
            let back = quadrature::half_line(
                |r| b.beta_plus(s, r) * lip.eval(r) * b.alpha(r, s),
                -big_t,
                Direction::Backward,
                &opts,
            )?;
            let fwd = quadrature::half_line(
                |r| b.beta_minus(s, r) * lip.eval(r) * b.alpha(r, s),
                big_t,
                Direction::Forward,
                &opts,
            )?;
            if !back.converged || !fwd.converged {
                return Err(Error::Truncation(format!("tail integrals beyond +-{big_t} do not decay at s={s}")));
            }
            worst = worst.max(back.value + back.tail_estimate + fwd.value + fwd.tail_estimate);
        }
        Ok(worst)
    }

    /// Banach iteration from `(T P xi, 0)` with the a-posteriori stopping rule
    /// `max(step, q / (1 - q) * step) <= tol`.
    pub fn iterate(&self, report: Option<&HypothesisReport>, settings: &SolverSettings) -> Result<SolverState> {
        let mut warnings = Vec::new();
        let gate_ok = report.map(|r| r.pass).unwrap_or(false);
        if !gate_ok {
            if !settings.force {
                let why = match report {
                    None => "no hypothesis certificate supplied".to_string(),
                    Some(r) => r.reasons.join("; "),
                };
                return Err(Error::HypothesisViolated(why));
            }
            warnings.push("hypothesis certificate failed or absent; running anyway".into());
        }
        let (q, mm, nn) = match report {
            Some(r) if r.smallness_ok => (r.contraction_factor, r.m, r.n),
            _ => (f64::NAN, f64::NAN, f64::NAN),
        };
        let tail = self.truncation_tail()?;
        let truncation_bound = if mm.is_finite() { mm * (1.0 + nn) * tail } else { 2.0 * tail };
        if truncation_bound >= settings.tol {
            return Err(Error::Truncation(format!(
                "neglected tails beyond +-{} bounded by {truncation_bound:.3e}, not below {:.1e}",
                self.grid.spec.t_half, settings.tol
            )));
        }

        let mut x = self.initial_center();
        let mut phi = GraphField::zeros(&self.grid);
        let mut history: Vec<StepRecord> = Vec::new();
        let mut extrapolations;
        let mut slow_streak = 0;
        let mut warned_slow = false;
        for it in 1..=settings.max_iters {
            let (xn, pn, e) = self.apply(&x, &phi, settings.execution)?;
            extrapolations = e;
            let d_prime = self.metric_dprime(&xn, &x)?;
            let d = self.metric_d(&pn, &phi)?;
            let step = d_prime + d;
            let ratio = history.last().and_then(|h| (h.d_second > 0.0).then(|| step / h.d_second));
            let error_bound = if q.is_finite() { q / (1.0 - q) * step } else { step };
            history.push(StepRecord {
                iteration: it,
                d_prime,
                d,
                d_second: step,
                ratio,
                error_bound,
            });
            x = xn;
            phi = pn;
            if let Some(rt) = ratio {
                if it > settings.burn_in && q.is_finite() && rt > q * (1.0 + settings.ratio_slack) && step > 1e3 * f64::EPSILON {
                    slow_streak += 1;
                } else {
                    slow_streak = 0;
                }
                if slow_streak >= 2 && !warned_slow {
                    warned_slow = true;
                    warnings.push(format!(
                        "step ratio {rt:.3} exceeds q = {q:.3} persistently; the discretisation may be too coarse"
                    ));
                }
            }
            if step.max(error_bound) <= settings.tol {
                if extrapolations > 0 {
                    warnings.push(format!("{extrapolations} evaluations of phi used the homogeneous extension"));
                }
                return Ok(SolverState {
                    x,
                    phi,
                    iterations: it,
                    history,
                    q,
                    m: mm,
                    n: nn,
                    error_bound,
                    converged: true,
                    extrapolations,
                    truncation_bound,
                    warnings,
                });
            }
        }
        Err(Error::NonConvergence {
            iterations: settings.max_iters,
            ratios: history.iter().filter_map(|h| h.ratio).collect(),
        })
    }

    /// Sample points for [`Self::verify_graph_transport`]: grid nodes with `|t| <= S` and `xi != 0`.
    pub fn transport_samples(&self, n: usize, seed: u64) -> Vec<(f64, f64, Vec<f64>)> {
        use rand::Rng;
        let g = &self.grid;
        let mut rng = sampling::rng(seed);
        let t_lo = g.t.index_of(-g.spec.s_half).expect("s-grid inside t-grid");
        let t_hi = g.t.index_of(g.spec.s_half).expect("s-grid inside t-grid");
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let j = rng.gen_range(t_lo..=t_hi);
            let i = rng.gen_range(0..g.s.n);
            let l = rng.gen_range(0..g.n_xi_total);
            let xi = g.xi_point(l);
            if xi.iter().all(|v| *v == 0.0) {
                continue;
            }
            out.push((g.t.node(j), g.s.node(i), xi));
        }
        out
    }

    /// Worst relative residual of the graph-transport identities
    /// `phi+-(t, x(t,s,xi)) = T_{t,s} Q+-_s phi+-(s, xi) + int_s^t T_{t,r} Q+-_r f dr`
    /// at grid nodes `(t, s, xi)` with `|t| <= S`.
    ///
    /// Samples whose trajectory point `x(t,s,xi)` leaves the `xi`-box are skipped:
    /// there `phi` is only known through its homogeneous extension.
    pub fn verify_graph_transport(&self, state: &SolverState, samples: &[(f64, f64, Vec<f64>)]) -> Result<f64> {
        self.verify_graph_transport_detailed(state, samples).map(|r| r.worst)
    }

    pub fn verify_graph_transport_detailed(
        &self,
        state: &SolverState,
        samples: &[(f64, f64, Vec<f64>)],
    ) -> Result<TransportReport> {
        self.check_fields(&state.x, &state.phi)?;
        let g = &self.grid;
        let (k, p, n) = (g.k, g.p, self.n());
        let gp = g.spec.gauss_points;
        let chart = &self.problem.chart;
        let op = &self.problem.op;
        let res: Vec<Result<Option<f64>>> = Execution::default().map(samples.len(), |idx| {
            let (t, s, ref xi) = samples[idx];
            let bad = || Error::GridMismatch(format!("({t}, {s}, {xi:?}) is not a grid node"));
            let j_t = g.t.index_of(t).ok_or_else(bad)?;
            let i_s = g.s.index_of(s).ok_or_else(bad)?;
            let l = g.xi_index(xi).ok_or_else(bad)?;
            if g.s.index_of(t).is_none() {
                return Err(Error::GridMismatch(format!("t = {t} lies outside the s-range")));
            }
            let nx = self.xi_norm[i_s * g.n_xi_total + l];
            if nx == 0.0 {
                return Ok(Some(0.0));
            }
            let mut lhs = vec![0.0; n - k];
            if self.phi_eval(&state.phi, t, state.x.get(j_t, i_s, l), &mut lhs) {
                return Ok(None);
            }

            let finv_t = chart.frame_inverse(t)?;
            let cpm = finv_t.rows(k, n - k).into_owned();
            let mut c = vec![0.0; n];
            c[k..].copy_from_slice(state.phi.get(i_s, l));
            let v = chart.embed(s, &c);
            let mut rhs: Vec<f64> = (&cpm * op.evaluate(t, s)? * v).iter().copied().collect();

            let Integrand { f, .. } = self.integrand(&state.x, &state.phi, i_s, l);
            let js = g.s_in_t[i_s];
            let (lo, hi, sign) = if j_t >= js { (js, j_t, 1.0) } else { (j_t, js, -1.0) };
            for q in lo * gp..hi * gp {
                let r = g.r[q];
                let fq = nalgebra::DVector::from_column_slice(&f[q * n..(q + 1) * n]);
                let ttr = op.evaluate(t, r)?;
                let plus = cpm.rows(0, p) * &ttr * chart.q_plus(r)? * &fq;
                let minus = cpm.rows(p, n - k - p) * &ttr * chart.q_minus(r)? * &fq;
                for i in 0..p {
                    rhs[i] += sign * g.w[q] * plus[i];
                }
                for i in 0..n - k - p {
                    rhs[p + i] += sign * g.w[q] * minus[i];
                }
            }
            let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
            let mut buf = vec![0.0; n];
            Ok(Some(self.graph_norm(t, &diff, &mut buf) / nx))
        });
        let mut rep = TransportReport {
            worst: 0.0,
            evaluated: 0,
            skipped: 0,
        };
        for r in res {
            match r? {
                Some(v) => {
                    rep.worst = rep.worst.max(v);
                    rep.evaluated += 1;
                }
                None => rep.skipped += 1,
            }
        }
        Ok(rep)
    }

    /// Structural checks of a trajectory field.
    pub fn check_center_field(&self, x: &CenterField) -> Result<CenterFieldReport> {
        if x.shape() != CenterField::zeros(&self.grid).shape() {
            return Err(Error::GridMismatch("centre field on a different grid".into()));
        }
        let g = &self.grid;
        let n = self.n();
        let mut buf = vec![0.0; n];
        let mut diff = vec![0.0; g.k];
        let mut rep = CenterFieldReport {
            identity_residual: 0.0,
            zero_residual: 0.0,
            lipschitz: 0.0,
        };
        let zero_l = g.xi_index(&vec![0.0; g.k]);
        for i_s in 0..g.s.n {
            let js = g.s_in_t[i_s];
            let s = g.s.node(i_s);
            for l in 0..g.n_xi_total {
                let xi = g.xi_point(l);
                let nx = self.xi_norm[i_s * g.n_xi_total + l];
                if nx > 0.0 {
                    for ((d, a), b) in diff.iter_mut().zip(x.get(js, i_s, l)).zip(&xi) {
                        *d = a - b;
                    }
                    rep.identity_residual = rep.identity_residual.max(self.center_norm(s, &diff, &mut buf) / nx);
                }
                if Some(l) == zero_l {
                    for j in 0..g.t.n {
                        rep.zero_residual = rep.zero_residual.max(self.center_norm(g.t.node(j), x.get(j, i_s, l), &mut buf));
                    }
                }
                for d in 0..g.k {
                    let stride = self.xi_strides[d];
                    if (l / stride) % g.spec.n_xi + 1 == g.spec.n_xi {
                        continue;
                    }
                    let l2 = l + stride;
                    let mut dxi = vec![0.0; g.k];
                    dxi[d] = g.xi.step();
                    let dn = self.center_norm(s, &dxi, &mut buf);
                    for j in 0..g.t.n {
                        for ((o, a), b) in diff.iter_mut().zip(x.get(j, i_s, l2)).zip(x.get(j, i_s, l)) {
                            *o = a - b;
                        }
                        let v = self.center_norm(g.t.node(j), &diff, &mut buf) / (self.alpha[i_s * g.t.n + j] * dn);
                        rep.lipschitz = rep.lipschitz.max(v);
                    }
                }
            }
        }
        Ok(rep)
    }

    /// Structural checks of a graph map.
    pub fn check_graph_field(&self, phi: &GraphField) -> Result<GraphFieldReport> {
        if phi.shape() != GraphField::zeros(&self.grid).shape() {
            return Err(Error::GridMismatch("graph field on a different grid".into()));
        }
        let g = &self.grid;
        let mut buf = vec![0.0; self.n()];
        let mut diff = vec![0.0; phi.width()];
        let mut rep = GraphFieldReport {
            zero_residual: 0.0,
            lipschitz: 0.0,
        };
        let zero_l = g.xi_index(&vec![0.0; g.k]);
        for i_s in 0..g.s.n {
            let s = g.s.node(i_s);
            if let Some(z) = zero_l {
                rep.zero_residual = rep.zero_residual.max(self.graph_norm(s, phi.get(i_s, z), &mut buf));
            }
            for l in 0..g.n_xi_total {
                for d in 0..g.k {
                    let stride = self.xi_strides[d];
                    if (l / stride) % g.spec.n_xi + 1 == g.spec.n_xi {
                        continue;
                    }
                    let l2 = l + stride;
                    let mut dxi = vec![0.0; g.k];
                    dxi[d] = g.xi.step();
                    let dn = self.center_norm(s, &dxi, &mut buf);
                    for ((o, a), b) in diff.iter_mut().zip(phi.get(i_s, l2)).zip(phi.get(i_s, l)) {
                        *o = a - b;
                    }
                    rep.lipschitz = rep.lipschitz.max(self.graph_norm(s, &diff, &mut buf) / dn);
                }
            }
        }
        Ok(rep)
    }
}

/// Convenience wrapper: discretise and iterate.
pub fn iterate_to_fixed_point(
    problem: Problem,
    spec: GridSpec,
    report: Option<&HypothesisReport>,
    settings: &SolverSettings,
) -> Result<(Discretization, SolverState)> {
    let disc = Discretization::with_execution(problem, spec, settings.execution)?;
    let state = disc.iterate(report, settings)?;
    Ok((disc, state))
}

/// Checks that two grids coincide.
pub fn same_grid(a: &Discretization, b: &Discretization) -> bool {
    a.grid.same_shape(&b.grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{lip_budget_rho, make_exponential_bounds, RhoParams};
    use crate::hypotheses::{assemble_report, HypothesisSettings, SupSettings};
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn diag_op() -> EvolutionOperator {
        EvolutionOperator::closed_form(4, |t, s| {
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, (-(t - s)).exp(), (t - s).exp()]))
        })
    }

    fn small_grid() -> GridSpec {
        GridSpec {
            t_half: 10.0,
            n_t: 21,
            s_half: 3.0,
            n_s: 7,
            xi_half: 1.0,
            n_xi: 5,
            gauss_points: 4,
            interpolation: Interpolation::Multilinear,
        }
    }

    fn problem(delta: f64) -> Problem {
        let bounds = make_exponential_bounds(0.0, -1.0, 0.0, -1.0, 1.0, 0.0).unwrap();
        let pert = if delta == 0.0 {
            Perturbation::zero(4)
        } else {
            let b = lip_budget_rho(&RhoParams::exponential(0.0, -1.0, 0.0, -1.0, 1.0, 0.0), delta, 1.0).unwrap();
            let bb = b.clone();
            Perturbation::new(4, b, move |t, v, out| {
                let l = bb.eval(t);
                for i in 0..4 {
                    out[i] = l * v[(i + 1) % 4].sin();
                }
            })
        };
        Problem::new(diag_op(), SplittingChart::coordinate(2, 1, 1), bounds, pert, NormSpec::MaxNorm).unwrap()
    }

    fn report(pr: &Problem) -> HypothesisReport {
        let st = SupSettings {
            grid_points: 41,
            ..SupSettings::default()
        };
        assemble_report(&pr.bounds, &pr.perturbation.budget, &HypothesisSettings {
            sigma: st,
            omega: st,
            ..HypothesisSettings::default()
        })
        .unwrap()
    }

    #[test]
    fn grid_validation() {
        let bad = GridSpec {
            n_t: 40,
            ..GridSpec::default()
        };
        assert!(matches!(bad.validate(), Err(Error::GridMismatch(_))));
        assert!(GridSpec::default().validate().is_ok());
        assert!(GridSpec::default().refined().validate().is_ok());
        let g = Grid::new(GridSpec::default(), (2, 1, 1)).unwrap();
        assert_eq!(g.n_r(), 160);
        assert_relative_eq!(g.w.iter().sum::<f64>(), 20.0, epsilon = 1e-12);
        assert_eq!(g.xi_point(10), vec![-0.75, -0.75]);
        assert_eq!(g.xi_index(&[-0.75, -0.75]), Some(10));
    }

    #[test]
    fn zero_perturbation_is_a_fixed_point() {
        let pr = problem(0.0);
        let rep = report(&pr);
        let (disc, st) = iterate_to_fixed_point(pr, small_grid(), Some(&rep), &SolverSettings::default()).unwrap();
        assert_eq!(st.iterations, 1);
        assert!(st.phi.values.iter().all(|v| *v == 0.0));
        assert_eq!(disc.metric_dprime(&st.x, &disc.initial_center()).unwrap(), 0.0);
        let c = disc.check_center_field(&st.x).unwrap();
        assert!(c.identity_residual < 1e-15 && c.zero_residual == 0.0 && c.lipschitz <= 1.0 + 1e-12);
        let samples = disc.transport_samples(20, 1);
        assert_eq!(disc.verify_graph_transport(&st, &samples).unwrap(), 0.0);
    }

    #[test]
    fn gate_refuses_failed_certificate() {
        let pr = problem(0.5);
        let rep = report(&pr);
        let disc = Discretization::new(pr, small_grid()).unwrap();
        assert!(matches!(
            disc.iterate(Some(&rep), &SolverSettings::default()),
            Err(Error::HypothesisViolated(_))
        ));
        assert!(matches!(disc.iterate(None, &SolverSettings::default()), Err(Error::HypothesisViolated(_))));
    }

    #[test]
    fn metrics_on_linear_fields() {
        let pr = problem(0.05);
        let disc = Discretization::new(pr, small_grid()).unwrap();
        let mut phi = GraphField::zeros(&disc.grid);
        // phi(s, xi) = C xi with C = [[0.3, -0.2], [0.1, 0.4]], max-norm induced norm 0.5
        for i_s in 0..disc.grid.s.n {
            for l in 0..disc.grid.n_xi_total {
                let xi = disc.grid.xi_point(l);
                let o = phi.offset(i_s, l);
                phi.values[o] = 0.3 * xi[0] - 0.2 * xi[1];
                phi.values[o + 1] = 0.1 * xi[0] + 0.4 * xi[1];
            }
        }
        let zero = GraphField::zeros(&disc.grid);
        assert_relative_eq!(disc.metric_d(&phi, &zero).unwrap(), 0.5, epsilon = 1e-14);
        assert_eq!(disc.metric_d(&phi, &phi).unwrap(), 0.0);
        let x = disc.initial_center();
        let dp = disc.metric_dprime(&x, &CenterField::zeros(&disc.grid)).unwrap();
        assert!(dp <= 1.0 + 1e-14 && dp > 0.99);
        // homogeneous extension reproduces linear maps outside the box
        let mut out = [0.0; 2];
        assert!(disc.phi_eval(&phi, 0.3, &[2.0, -3.0], &mut out));
        assert_relative_eq!(out[0], 1.2, epsilon = 1e-12);
        assert_relative_eq!(out[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn small_problem_contracts_and_respects_bounds() {
        let pr = problem(0.05);
        let rep = report(&pr);
        assert!(rep.pass, "{:?}", rep.reasons);
        let (disc, st) = iterate_to_fixed_point(pr, small_grid(), Some(&rep), &SolverSettings::default()).unwrap();
        assert!(st.converged && st.iterations <= 12);
        for r in st.ratios().iter().skip(1) {
            assert!(*r <= rep.contraction_factor * 1.1, "{r}");
        }
        let gf = disc.check_graph_field(&st.phi).unwrap();
        assert!(gf.zero_residual == 0.0 && gf.lipschitz <= rep.n * 1.05, "{gf:?}");
        let cf = disc.check_center_field(&st.x).unwrap();
        assert!(cf.lipschitz <= rep.m * 1.05, "{cf:?}");
        // L-bound: |L(x, phi)(s, xi)| <= M (1 + N) omega |xi|
        let d = disc.metric_d(&st.phi, &GraphField::zeros(&disc.grid)).unwrap();
        assert!(d <= rep.m * (1.0 + rep.n) * rep.omega * 1.01);
    }

    #[test]
    fn quadrature_refinement_oracle() {
        let pr = problem(0.05);
        let coarse = Discretization::new(pr.clone(), small_grid()).unwrap();
        let fine = Discretization::new(pr, GridSpec {
            gauss_points: 16,
            ..small_grid()
        })
        .unwrap();
        let x = coarse.initial_center();
        let mut phi = GraphField::zeros(&coarse.grid);
        for (i, v) in phi.values.iter_mut().enumerate() {
            *v = 0.01 * ((i % 7) as f64 - 3.0) / 3.0;
        }
        let (a, pa, _) = coarse.apply(&x, &phi, Execution::Sequential).unwrap();
        let (b, pb, _) = fine.apply(&x, &phi, Execution::Parallel).unwrap();
        let dx = a.values.iter().zip(&b.values).fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
        let dp = pa.values.iter().zip(&pb.values).fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
        assert!(dx < 1e-6 && dp < 1e-6, "{dx} {dp}");
    }

    #[test]
    fn parallel_and_sequential_sweeps_agree() {
        let disc = Discretization::new(problem(0.05), small_grid()).unwrap();
        let x = disc.initial_center();
        let phi = GraphField::zeros(&disc.grid);
        let a = disc.apply(&x, &phi, Execution::Sequential).unwrap();
        let b = disc.apply(&x, &phi, Execution::Parallel).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
