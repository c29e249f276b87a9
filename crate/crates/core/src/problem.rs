//! Local problems, Lagrangian derivatives and the KKT block inverse.
//!
//! Agent `i` holds a strongly convex cost `f_i`, a local equality block
//! `A_i x = b_i` and optionally convex inequalities `g_i^l(x) <= s_i(t)`
//! handled through a logarithmic barrier with parameter `c_i`:
//!
//! ```text
//! f_i^c(x, t) = f_i(x) - (1/c_i) Σ_l log(s_i(t) - g_i^l(x))
//! L_i(x, λ)   = f_i^c(x, t) + λᵀ (A_i x - b_i)
//! ```

use crate::error::{Error, Result};
use crate::linalg::{chol_solve, chol_solve_mat, cholesky, rank};
use nalgebra::{DMatrix, DVector};
use std::fmt::Debug;
use std::sync::Arc;

/// Relative pivot floor for positive-definiteness checks.
pub const PD_PIVOT_TOL: f64 = 1e-12;
/// Relative pivot floor for the Schur complement `A H⁻¹ Aᵀ`.
pub const SCHUR_PIVOT_TOL: f64 = 1e-10;

/// A twice continuously differentiable function `Rⁿ → R`.
pub trait SmoothFunction: Send + Sync + Debug {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Declared strong-convexity modulus, zero when merely convex.
    fn convexity_modulus(&self) -> f64;
}

/// `½ xᵀ Q x + cᵀ x + k` with symmetric `Q`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    q: DMatrix<f64>,
    c: DVector<f64>,
    k: f64,
    modulus: f64,
}

impl Quadratic {
    pub fn new(q: DMatrix<f64>, c: DVector<f64>, k: f64) -> Result<Self> {
        if q.nrows() != q.ncols() || q.nrows() != c.len() {
            return Err(Error::InvalidInput("quadratic: dimension mismatch".into()));
        }
        if (&q - q.transpose()).abs().max() > 1e-12 * (1.0 + q.abs().max()) {
            return Err(Error::InvalidInput("quadratic: Q is not symmetric".into()));
        }
        let ev = crate::linalg::sym_eigenvalues(&q);
        let modulus = ev.first().cloned().unwrap_or(0.0).max(0.0);
        if ev.first().is_some_and(|&v| v < -1e-12) {
            return Err(Error::InvalidInput("quadratic: Q is not positive semidefinite".into()));
        }
        Ok(Quadratic { q, c, k, modulus })
    }
}

impl SmoothFunction for Quadratic {
    fn dim(&self) -> usize {
        self.c.len()
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q * x)) + self.c.dot(x) + self.k
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q * x + &self.c
    }
    fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.q.clone()
    }
    fn convexity_modulus(&self) -> f64 {
        self.modulus
    }
}

/// `‖x‖² - s·1ᵀx + cos(wᵀx / 2)`.
///
/// Strongly convex with modulus `2 - ‖w‖²/4` whenever `‖w‖² < 8`.
#[derive(Debug, Clone)]
pub struct QuadraticCosine {
    shift: f64,
    w: DVector<f64>,
}

impl QuadraticCosine {
    pub fn new(shift: f64, w: DVector<f64>) -> Result<Self> {
        if w.norm_squared() >= 8.0 {
            return Err(Error::InvalidInput(
                "quadratic-cosine: ‖w‖² must stay below 8 for convexity".into(),
            ));
        }
        Ok(QuadraticCosine { shift, w })
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.w
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }
}

impl SmoothFunction for QuadraticCosine {
    fn dim(&self) -> usize {
        self.w.len()
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        x.norm_squared() - self.shift * x.sum() + (0.5 * self.w.dot(x)).cos()
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let s = (0.5 * self.w.dot(x)).sin();
        let mut g = 2.0 * x - &self.w * (0.5 * s);
        g.add_scalar_mut(-self.shift);
        g
    }
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let c = (0.5 * self.w.dot(x)).cos();
        let n = self.w.len();
        DMatrix::identity(n, n) * 2.0 - (&self.w * self.w.transpose()) * (0.25 * c)
    }
    fn convexity_modulus(&self) -> f64 {
        2.0 - 0.25 * self.w.norm_squared()
    }
}

/// Affine map `dᵀx - e`.
#[derive(Debug, Clone)]
pub struct Affine {
    d: DVector<f64>,
    e: f64,
}

impl Affine {
    pub fn new(d: DVector<f64>, e: f64) -> Self {
        Affine { d, e }
    }
}

impl SmoothFunction for Affine {
    fn dim(&self) -> usize {
        self.d.len()
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.d.dot(x) - self.e
    }
    fn gradient(&self, _x: &DVector<f64>) -> DVector<f64> {
        self.d.clone()
    }
    fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.d.len(), self.d.len())
    }
    fn convexity_modulus(&self) -> f64 {
        0.0
    }
}

/// Pointwise sum of functions on the same space.
#[derive(Debug, Clone)]
pub struct Sum {
    parts: Vec<Arc<dyn SmoothFunction>>,
}

impl Sum {
    pub fn new(parts: Vec<Arc<dyn SmoothFunction>>) -> Result<Self> {
        let n = parts.first().map(|p| p.dim()).ok_or_else(|| {
            Error::InvalidInput("sum of zero functions".into())
        })?;
        if parts.iter().any(|p| p.dim() != n) {
            return Err(Error::InvalidInput("sum: dimension mismatch".into()));
        }
        Ok(Sum { parts })
    }
}

impl SmoothFunction for Sum {
    fn dim(&self) -> usize {
        self.parts[0].dim()
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.parts.iter().map(|p| p.value(x)).sum()
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = self.parts[0].gradient(x);
        for p in &self.parts[1..] {
            g += p.gradient(x);
        }
        g
    }
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut h = self.parts[0].hessian(x);
        for p in &self.parts[1..] {
            h += p.hessian(x);
        }
        h
    }
    fn convexity_modulus(&self) -> f64 {
        self.parts.iter().map(|p| p.convexity_modulus()).sum()
    }
}

/// Local equality block `A x = b` with full row rank.
#[derive(Debug, Clone, PartialEq)]
pub struct EqualityConstraint {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl EqualityConstraint {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::InvalidInput(format!(
                "equality block has {} rows but {} right-hand sides",
                a.nrows(),
                b.len()
            )));
        }
        if a.nrows() > 0 && rank(&a, 1e-12) < a.nrows() {
            return Err(Error::RankDeficient { agent: None });
        }
        Ok(EqualityConstraint { a, b })
    }

    /// The empty block on `Rⁿ`.
    pub fn none(n: usize) -> Self {
        EqualityConstraint { a: DMatrix::zeros(0, n), b: DVector::zeros(0) }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x - &self.b
    }
}

/// Slack relaxation `s(t) = s0 (1 - t/T_s)^q` on `[0, T_s)`, zero afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlackSchedule {
    pub initial: f64,
    pub horizon: f64,
    pub exponent: f64,
}

impl SlackSchedule {
    pub fn new(initial: f64, horizon: f64, exponent: f64) -> Result<Self> {
        if !(initial >= 0.0) || !(horizon > 0.0) || !(exponent > 1.0) {
            return Err(Error::InvalidInput(format!(
                "slack schedule needs s0 >= 0, T_s > 0, q > 1 (got {initial}, {horizon}, {exponent})"
            )));
        }
        Ok(SlackSchedule { initial, horizon, exponent })
    }

    /// Identically zero slack.
    pub fn zero() -> Self {
        SlackSchedule { initial: 0.0, horizon: 1.0, exponent: 2.0 }
    }

    /// `(s(t), ṡ(t))`.
    pub fn value(&self, t: f64) -> (f64, f64) {
        if self.initial == 0.0 || t >= self.horizon {
            return (0.0, 0.0);
        }
        let r = 1.0 - t / self.horizon;
        let q = self.exponent;
        (
            self.initial * r.powf(q),
            -self.initial * q / self.horizon * r.powf(q - 1.0),
        )
    }
}

/// Free-function form of [`SlackSchedule::value`].
pub fn slack_value(schedule: &SlackSchedule, t: f64) -> (f64, f64) {
    schedule.value(t)
}

/// Convex inequalities handled by a log barrier.
#[derive(Debug, Clone)]
pub struct InequalityBlock {
    pub constraints: Vec<Arc<dyn SmoothFunction>>,
    /// Barrier parameter `c`.
    pub barrier: f64,
    pub slack: SlackSchedule,
}

impl InequalityBlock {
    pub fn new(
        constraints: Vec<Arc<dyn SmoothFunction>>,
        barrier: f64,
        slack: SlackSchedule,
    ) -> Result<Self> {
        if !(barrier > 0.0) || !barrier.is_finite() {
            return Err(Error::InvalidInput(format!("barrier parameter {barrier} must be positive")));
        }
        Ok(InequalityBlock { constraints, barrier, slack })
    }

    /// Smallest `s(t) - g^l(x)`; `+∞` with no constraints.
    pub fn margin(&self, x: &DVector<f64>, t: f64) -> f64 {
        let (s, _) = self.slack.value(t);
        self.constraints
            .iter()
            .map(|g| s - g.value(x))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct LocalProblem {
    pub cost: Arc<dyn SmoothFunction>,
    pub eq: EqualityConstraint,
    pub ineq: Option<InequalityBlock>,
}

impl LocalProblem {
    pub fn new(
        cost: Arc<dyn SmoothFunction>,
        eq: EqualityConstraint,
        ineq: Option<InequalityBlock>,
    ) -> Result<Self> {
        let n = cost.dim();
        if eq.a().ncols() != n {
            return Err(Error::InvalidInput(format!(
                "equality block has {} columns, cost lives in R^{n}",
                eq.a().ncols()
            )));
        }
        if let Some(blk) = &ineq {
            if blk.constraints.iter().any(|g| g.dim() != n) {
                return Err(Error::InvalidInput("inequality dimension mismatch".into()));
            }
        }
        Ok(LocalProblem { cost, eq, ineq })
    }

    /// Primal dimension `n`.
    pub fn dim(&self) -> usize {
        self.cost.dim()
    }

    /// Dual dimension `r_i`.
    pub fn dual_dim(&self) -> usize {
        self.eq.rows()
    }

    pub fn inequality_count(&self) -> usize {
        self.ineq.as_ref().map_or(0, |b| b.constraints.len())
    }

    fn active_barrier(&self) -> Option<&InequalityBlock> {
        self.ineq.as_ref().filter(|b| !b.constraints.is_empty())
    }

    /// Barrier slacks `s - g^l(x)`, failing outside the open domain.
    fn barrier_slacks(&self, blk: &InequalityBlock, x: &DVector<f64>, t: f64) -> Result<Vec<f64>> {
        let (s, _) = blk.slack.value(t);
        let mut out = Vec::with_capacity(blk.constraints.len());
        for g in &blk.constraints {
            let d = s - g.value(x);
            if !(d > 0.0) {
                return Err(Error::DomainViolation { agent: None, margin: d });
            }
            out.push(d);
        }
        Ok(out)
    }

    /// Smallest barrier margin, `+∞` without inequalities.
    pub fn barrier_margin(&self, x: &DVector<f64>, t: f64) -> f64 {
        self.active_barrier().map_or(f64::INFINITY, |b| b.margin(x, t))
    }

    /// `f_i^c(x, t)`, or `f_i(x)` when `barrier` is false or no inequalities exist.
    pub fn cost_value(&self, x: &DVector<f64>, t: f64, barrier: bool) -> Result<f64> {
        let mut v = self.cost.value(x);
        if let (true, Some(blk)) = (barrier, self.active_barrier()) {
            for d in self.barrier_slacks(blk, x, t)? {
                v -= d.ln() / blk.barrier;
            }
        }
        Ok(v)
    }

    /// `∇_x f_i^c(x, t)`.
    pub fn cost_gradient(&self, x: &DVector<f64>, t: f64, barrier: bool) -> Result<DVector<f64>> {
        let mut g = self.cost.gradient(x);
        if let (true, Some(blk)) = (barrier, self.active_barrier()) {
            let slacks = self.barrier_slacks(blk, x, t)?;
            for (gl, d) in blk.constraints.iter().zip(slacks) {
                g += gl.gradient(x) * (1.0 / (blk.barrier * d));
            }
        }
        Ok(g)
    }

    /// `∇²_x f_i^c(x, t)`.
    pub fn cost_hessian(&self, x: &DVector<f64>, t: f64, barrier: bool) -> Result<DMatrix<f64>> {
        let mut h = self.cost.hessian(x);
        if let (true, Some(blk)) = (barrier, self.active_barrier()) {
            let slacks = self.barrier_slacks(blk, x, t)?;
            for (gl, d) in blk.constraints.iter().zip(slacks) {
                let gr = gl.gradient(x);
                h += (&gr * gr.transpose()) * (1.0 / (blk.barrier * d * d));
                h += gl.hessian(x) * (1.0 / (blk.barrier * d));
            }
        }
        Ok(h)
    }

    /// Stacked `[∇_x L_i; ∇_λ L_i]`.
    pub fn lagrangian_grad(
        &self,
        x: &DVector<f64>,
        lambda: &DVector<f64>,
        t: f64,
        barrier: bool,
    ) -> Result<DVector<f64>> {
        let gx = self.cost_gradient(x, t, barrier)? + self.eq.a().tr_mul(lambda);
        let gl = self.eq.residual(x);
        Ok(stack(&gx, &gl))
    }

    /// `∂/∂s ∇_z L_i^c`: x-block `-(1/c) Σ ∇g/(s-g)²`, λ-block zero.
    pub fn slack_cross(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let n = self.dim();
        let mut gx = DVector::zeros(n);
        if let Some(blk) = self.active_barrier() {
            let slacks = self.barrier_slacks(blk, x, t)?;
            for (gl, d) in blk.constraints.iter().zip(slacks) {
                gx -= gl.gradient(x) * (1.0 / (blk.barrier * d * d));
            }
        }
        Ok(stack(&gx, &DVector::zeros(self.dual_dim())))
    }
}

/// Vertical concatenation of two vectors.
pub fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut v = DVector::zeros(a.len() + b.len());
    v.rows_mut(0, a.len()).copy_from(a);
    v.rows_mut(a.len(), b.len()).copy_from(b);
    v
}

/// Per-agent state `(x_i, λ_i, y_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    /// Auxiliary variable, same length as `[x; λ]`.
    pub y: DVector<f64>,
}

impl AgentState {
    /// Initial state with `y = ∇L_i(z, t0)`; uses the barrier Lagrangian when
    /// `barrier` is set and the problem has inequalities.
    pub fn new(
        p: &LocalProblem,
        x: DVector<f64>,
        lambda: DVector<f64>,
        t0: f64,
        barrier: bool,
    ) -> Result<Self> {
        if x.len() != p.dim() || lambda.len() != p.dual_dim() {
            return Err(Error::InvalidInput(format!(
                "initial state has shape ({}, {}), expected ({}, {})",
                x.len(),
                lambda.len(),
                p.dim(),
                p.dual_dim()
            )));
        }
        if barrier {
            let m = p.barrier_margin(&x, t0);
            if !(m > 0.0) {
                return Err(Error::InfeasibleStart { agent: None, margin: m });
            }
        }
        let y = p.lagrangian_grad(&x, &lambda, t0, barrier)?;
        Ok(AgentState { x, lambda, y })
    }

    /// Replace the auxiliary variable. The result no longer satisfies the
    /// initialization contract; used to study the post-settling flow.
    pub fn with_auxiliary(mut self, y: DVector<f64>) -> Self {
        assert_eq!(y.len(), self.y.len(), "auxiliary length mismatch");
        self.y = y;
        self
    }

    pub fn z(&self) -> DVector<f64> {
        stack(&self.x, &self.lambda)
    }
}

/// `∇_z L_i` at the state's primal-dual point, equality Lagrangian.
pub fn local_lagrangian_grad(p: &LocalProblem, state: &AgentState, t: f64) -> Result<DVector<f64>> {
    p.lagrangian_grad(&state.x, &state.lambda, t, false)
}

/// `∇_z L_i^c`, barrier Lagrangian.
pub fn local_barrier_lagrangian_grad(
    p: &LocalProblem,
    state: &AgentState,
    t: f64,
) -> Result<DVector<f64>> {
    p.lagrangian_grad(&state.x, &state.lambda, t, true)
}

/// Full KKT Hessian `[[H, Aᵀ], [A, 0]]` of the equality Lagrangian.
pub fn local_hessian(p: &LocalProblem, state: &AgentState, t: f64) -> Result<DMatrix<f64>> {
    let h = p.cost_hessian(&state.x, t, false)?;
    Ok(kkt_matrix(&h, p.eq.a()))
}

/// `[[H, Aᵀ], [A, 0]]`.
pub fn kkt_matrix(h: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = h.nrows();
    let r = a.nrows();
    let mut k = DMatrix::zeros(n + r, n + r);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    k.view_mut((0, n), (n, r)).copy_from(&a.transpose());
    k.view_mut((n, 0), (r, n)).copy_from(a);
    k
}

/// Structured inverse of `[[H, Aᵀ], [A, 0]]`:
///
/// ```text
/// S = A H⁻¹ Aᵀ,  Q = S⁻¹ A H⁻¹,  P = H⁻¹ - H⁻¹ Aᵀ Q
/// inverse = [[P, Qᵀ], [Q, -S⁻¹]]
/// ```
#[derive(Debug, Clone)]
pub struct BlockInverse {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub s_inv: DMatrix<f64>,
}

impl BlockInverse {
    /// Apply the inverse to `[rx; rλ]`.
    pub fn apply(&self, rx: &DVector<f64>, rl: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let dx = &self.p * rx + self.q.tr_mul(rl);
        let dl = &self.q * rx - &self.s_inv * rl;
        (dx, dl)
    }

    /// Apply to a stacked vector.
    pub fn apply_stacked(&self, r: &DVector<f64>) -> DVector<f64> {
        let n = self.p.nrows();
        let m = self.s_inv.nrows();
        let (dx, dl) = self.apply(&r.rows(0, n).into_owned(), &r.rows(n, m).into_owned());
        stack(&dx, &dl)
    }

    pub fn assemble(&self) -> DMatrix<f64> {
        let n = self.p.nrows();
        let r = self.s_inv.nrows();
        let mut k = DMatrix::zeros(n + r, n + r);
        k.view_mut((0, 0), (n, n)).copy_from(&self.p);
        k.view_mut((0, n), (n, r)).copy_from(&self.q.transpose());
        k.view_mut((n, 0), (r, n)).copy_from(&self.q);
        k.view_mut((n, n), (r, r)).copy_from(&(-&self.s_inv));
        k
    }
}

/// Block inverse via Cholesky factorizations of `H` and `S`.
///
/// `A` may have zero rows, in which case `P = H⁻¹`.
pub fn block_inverse(h: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<BlockInverse> {
    let n = h.nrows();
    if h.ncols() != n || a.ncols() != n {
        return Err(Error::InvalidInput("block inverse: dimension mismatch".into()));
    }
    let r = a.nrows();
    let lh = cholesky(h, PD_PIVOT_TOL).ok_or(Error::SingularHessian { agent: None })?;
    let h_inv = chol_solve_mat(&lh, &DMatrix::identity(n, n));
    if r == 0 {
        return Ok(BlockInverse {
            p: h_inv,
            q: DMatrix::zeros(0, n),
            s_inv: DMatrix::zeros(0, 0),
        });
    }
    if r > n {
        return Err(Error::RankDeficient { agent: None });
    }
    let g = chol_solve_mat(&lh, &a.transpose());
    let mut s = a * &g;
    s = (&s + s.transpose()) * 0.5;
    let ls = cholesky(&s, SCHUR_PIVOT_TOL).ok_or(Error::RankDeficient { agent: None })?;
    let s_inv = chol_solve_mat(&ls, &DMatrix::identity(r, r));
    let q = chol_solve_mat(&ls, &g.transpose());
    let p = &h_inv - &g * &q;
    Ok(BlockInverse { p, q, s_inv })
}

/// Solve `[[H, Aᵀ], [A, 0]] d = r` without forming the inverse.
pub fn kkt_solve(h: &DMatrix<f64>, a: &DMatrix<f64>, r: &DVector<f64>) -> Result<DVector<f64>> {
    let n = h.nrows();
    let m = a.nrows();
    let lh = cholesky(h, PD_PIVOT_TOL).ok_or(Error::SingularHessian { agent: None })?;
    let rx = r.rows(0, n).into_owned();
    if m == 0 {
        return Ok(chol_solve(&lh, &rx));
    }
    let rl = r.rows(n, m).into_owned();
    let g = chol_solve_mat(&lh, &a.transpose());
    let s = a * &g;
    let ls = cholesky(&((&s + s.transpose()) * 0.5), SCHUR_PIVOT_TOL)
        .ok_or(Error::RankDeficient { agent: None })?;
    let hr = chol_solve(&lh, &rx);
    let dl = chol_solve(&ls, &(a * &hr - rl));
    let dx = hr - &g * &dl;
    Ok(stack(&dx, &dl))
}

/// Central finite differences, used only to validate analytic derivatives.
pub mod fd {
    use nalgebra::{DMatrix, DVector};

    pub fn gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        let mut xp = x.clone();
        for k in 0..x.len() {
            let step = h * (1.0 + x[k].abs());
            xp[k] = x[k] + step;
            let fp = f(&xp);
            xp[k] = x[k] - step;
            let fm = f(&xp);
            xp[k] = x[k];
            g[k] = (fp - fm) / (2.0 * step);
        }
        g
    }

    pub fn jacobian(
        f: impl Fn(&DVector<f64>) -> DVector<f64>,
        x: &DVector<f64>,
        h: f64,
    ) -> DMatrix<f64> {
        let m = f(x).len();
        let mut j = DMatrix::zeros(m, x.len());
        let mut xp = x.clone();
        for k in 0..x.len() {
            let step = h * (1.0 + x[k].abs());
            xp[k] = x[k] + step;
            let fp = f(&xp);
            xp[k] = x[k] - step;
            let fm = f(&xp);
            xp[k] = x[k];
            j.set_column(k, &((fp - fm) / (2.0 * step)));
        }
        j
    }
}

/// Relative agreement of a derivative against its finite-difference estimate.
pub fn relative_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / (1.0 + a.norm().max(b.norm()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
        DVector::from_fn(n, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        &m * m.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn block_inverse_two_by_two_example() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let bi = block_inverse(&h, &a).unwrap();
        assert!((bi.s_inv[(0, 0)] - 1.0).abs() < 1e-15);
        let p = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        assert!((&bi.p - p).abs().max() < 1e-15);
        assert!((&bi.q - DMatrix::from_row_slice(1, 2, &[0.5, 0.5])).abs().max() < 1e-15);
    }

    #[test]
    fn block_inverse_diagonal_example() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let bi = block_inverse(&h, &a).unwrap();
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.25]);
        assert!((&bi.p - p).abs().max() < 1e-15);
        assert!((bi.s_inv[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn block_inverse_without_constraints() {
        let h = DMatrix::from_row_slice(1, 1, &[4.0]);
        let bi = block_inverse(&h, &DMatrix::zeros(0, 1)).unwrap();
        assert_eq!(bi.p[(0, 0)], 0.25);
        assert_eq!(bi.assemble().nrows(), 1);
    }

    #[test]
    fn block_inverse_failures() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert_eq!(block_inverse(&h, &a).unwrap_err(), Error::SingularHessian { agent: None });
        let h = DMatrix::identity(2, 2);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(block_inverse(&h, &a).unwrap_err(), Error::RankDeficient { agent: None });
    }

    #[test]
    fn block_inverse_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.random_range(2..=8);
            let r = rng.random_range(1..n);
            let h = random_spd(&mut rng, n);
            let a = DMatrix::from_fn(r, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let bi = block_inverse(&h, &a).unwrap();
            let k = kkt_matrix(&h, &a);
            let prod = &k * bi.assemble();
            let id = DMatrix::<f64>::identity(n + r, n + r);
            let cond = {
                let sv = k.clone().svd(false, false).singular_values;
                sv.max() / sv.min()
            };
            assert!((&prod - &id).abs().max() <= 1e-10 * cond);
            assert!((&bi.p * a.transpose()).abs().max() < 1e-10 * cond);
            assert!((&a * &bi.p).abs().max() < 1e-10 * cond);
            assert!((&bi.p - bi.p.transpose()).abs().max() < 1e-10 * cond);
            let php = &bi.p * &h * &bi.p;
            assert!((&php - &bi.p).abs().max() < 1e-10 * cond);
            let ev = crate::linalg::sym_eigenvalues(&bi.p);
            assert!(ev[0] > -1e-10 * cond);
            let rhs = random_vec(&mut rng, n + r, 1.0);
            let d = kkt_solve(&h, &a, &rhs).unwrap();
            assert!((bi.apply_stacked(&rhs) - d).abs().max() < 1e-9 * cond);
        }
    }

    #[test]
    fn slack_schedule_examples() {
        let s = SlackSchedule::new(2.0, 1.0, 2.0).unwrap();
        let (v, d) = s.value(0.5);
        assert!((v - 0.5).abs() < 1e-15);
        assert!((d + 2.0).abs() < 1e-15);
        assert_eq!(s.value(1.0), (0.0, 0.0));
        assert_eq!(s.value(3.0), (0.0, 0.0));
        assert!(SlackSchedule::new(1.0, 1.0, 1.0).is_err());
        let (v0, _) = s.value(0.0);
        assert_eq!(v0, 2.0);
    }

    #[test]
    fn slack_derivative_matches_difference() {
        let s = SlackSchedule::new(1.5, 2.0, 3.0).unwrap();
        for &t in &[0.1, 0.7, 1.3, 1.9] {
            let h = 1e-6;
            let num = (s.value(t + h).0 - s.value(t - h).0) / (2.0 * h);
            assert!((num - s.value(t).1).abs() < 1e-6);
        }
    }

    fn catalog(rng: &mut ChaCha8Rng, n: usize) -> Vec<Arc<dyn SmoothFunction>> {
        let w = DVector::from_fn(n, |_, _| rng.random::<f64>());
        let q = random_spd(rng, n);
        vec![
            Arc::new(QuadraticCosine::new(2.0, w).unwrap()),
            Arc::new(Quadratic::new(q, random_vec(rng, n, 1.0), 0.3).unwrap()),
            Arc::new(Affine::new(random_vec(rng, n, 1.0), 0.4)),
        ]
    }

    #[test]
    fn catalog_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let funcs = catalog(&mut rng, 5);
        for f in &funcs {
            for _ in 0..100 {
                let x = random_vec(&mut rng, 5, 2.0);
                let g = f.gradient(&x);
                let gn = fd::gradient(|v| f.value(v), &x, 1e-6);
                let rel = (&g - &gn).norm() / (1.0 + g.norm());
                assert!(rel < 1e-5, "gradient mismatch {rel}");
                let h = f.hessian(&x);
                let hn = fd::jacobian(|v| f.gradient(v), &x, 1e-6);
                assert!(relative_gap(&h, &hn) < 1e-4);
            }
        }
    }

    #[test]
    fn quadratic_cosine_modulus_bounds_hessian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = DVector::from_fn(7, |_, _| rng.random::<f64>());
        let f = QuadraticCosine::new(1.0, w).unwrap();
        for _ in 0..50 {
            let x = random_vec(&mut rng, 7, 5.0);
            let ev = crate::linalg::sym_eigenvalues(&f.hessian(&x));
            assert!(ev[0] >= f.convexity_modulus() - 1e-12);
        }
    }

    fn barrier_problem(c: f64, s0: f64) -> LocalProblem {
        let cost: Arc<dyn SmoothFunction> = Arc::new(
            Quadratic::new(DMatrix::from_row_slice(1, 1, &[2.0]), DVector::zeros(1), 0.0).unwrap(),
        );
        let g: Arc<dyn SmoothFunction> = Arc::new(Affine::new(DVector::from_vec(vec![1.0]), 0.0));
        let slack = if s0 > 0.0 { SlackSchedule::new(s0, 1e9, 2.0).unwrap() } else { SlackSchedule::zero() };
        LocalProblem::new(
            cost,
            EqualityConstraint::none(1),
            Some(InequalityBlock::new(vec![g], c, slack).unwrap()),
        )
        .unwrap()
    }

    #[test]
    fn barrier_gradient_blows_up_at_boundary() {
        let c = 0.1;
        let p = barrier_problem(c, 1.0);
        for k in 2..=6 {
            let x = DVector::from_vec(vec![1.0 - 10f64.powi(-k)]);
            let g = p.cost_gradient(&x, 0.0, true).unwrap()[0];
            let ratio = g / (10f64.powi(k) / c);
            assert!((ratio - 1.0).abs() < 0.01, "k = {k}, ratio = {ratio}");
        }
        let outside = DVector::from_vec(vec![1.0]);
        assert!(matches!(
            p.cost_gradient(&outside, 0.0, true),
            Err(Error::DomainViolation { .. })
        ));
    }

    #[test]
    fn barrier_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4;
        let cost: Arc<dyn SmoothFunction> =
            Arc::new(QuadraticCosine::new(1.0, DVector::from_fn(n, |_, _| rng.random::<f64>())).unwrap());
        let g1: Arc<dyn SmoothFunction> = Arc::new(Affine::new(random_vec(&mut rng, n, 1.0), 3.0));
        let g2: Arc<dyn SmoothFunction> = Arc::new(
            Quadratic::new(DMatrix::identity(n, n), DVector::zeros(n), -4.0).unwrap(),
        );
        let a = DMatrix::from_fn(2, n, |_, _| rng.random::<f64>() - 0.5);
        let p = LocalProblem::new(
            cost,
            EqualityConstraint::new(a, DVector::from_vec(vec![0.2, -0.1])).unwrap(),
            Some(InequalityBlock::new(vec![g1, g2], 7.0, SlackSchedule::new(0.5, 2.0, 2.0).unwrap()).unwrap()),
        )
        .unwrap();
        let t = 0.4;
        for _ in 0..30 {
            let x = random_vec(&mut rng, n, 0.5);
            let lam = random_vec(&mut rng, 2, 1.0);
            let z = stack(&x, &lam);
            let lag = |z: &DVector<f64>| {
                let x = z.rows(0, n).into_owned();
                let l = z.rows(n, 2).into_owned();
                p.cost_value(&x, t, true).unwrap() + l.dot(&p.eq.residual(&x))
            };
            let gz = p.lagrangian_grad(&x, &lam, t, true).unwrap();
            let gn = fd::gradient(lag, &z, 1e-6);
            assert!((&gz - &gn).norm() / (1.0 + gz.norm()) < 1e-5);
            let h = kkt_matrix(&p.cost_hessian(&x, t, true).unwrap(), p.eq.a());
            let hn = fd::jacobian(
                |z| {
                    let x = z.rows(0, n).into_owned();
                    let l = z.rows(n, 2).into_owned();
                    p.lagrangian_grad(&x, &l, t, true).unwrap()
                },
                &z,
                1e-6,
            );
            assert!(relative_gap(&h, &hn) < 1e-4);
            // derivative with respect to the slack value, via the schedule time
            let dt = 1e-6;
            let (_, sdot) = p.ineq.as_ref().unwrap().slack.value(t);
            let gp = p.lagrangian_grad(&x, &lam, t + dt, true).unwrap();
            let gm = p.lagrangian_grad(&x, &lam, t - dt, true).unwrap();
            let num = (gp - gm) / (2.0 * dt);
            let ana = p.slack_cross(&x, t).unwrap() * sdot;
            assert!((&num - &ana).norm() / (1.0 + ana.norm()) < 1e-5);
        }
    }

    #[test]
    fn agent_state_initialization_contract() {
        let p = barrier_problem(10.0, 0.0);
        let s = AgentState::new(&p, DVector::from_vec(vec![-1.0]), DVector::zeros(0), 0.0, true).unwrap();
        let expected = p.lagrangian_grad(&s.x, &s.lambda, 0.0, true).unwrap();
        assert_eq!(s.y, expected);
        let bad = AgentState::new(&p, DVector::from_vec(vec![0.5]), DVector::zeros(0), 0.0, true);
        assert!(matches!(bad, Err(Error::InfeasibleStart { .. })));
    }

    proptest! {
        #[test]
        fn block_inverse_identities(seed in 0u64..10_000, n in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = rng.random_range(1..n);
            let h = random_spd(&mut rng, n);
            let a = DMatrix::from_fn(r, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            prop_assume!(rank(&a, 1e-6) == r);
            let bi = block_inverse(&h, &a).unwrap();
            let k = kkt_matrix(&h, &a);
            let sv = k.clone().svd(false, false).singular_values;
            let cond = sv.max() / sv.min();
            prop_assume!(cond < 1e8);
            let err = (&k * bi.assemble() - DMatrix::<f64>::identity(n + r, n + r)).abs().max();
            prop_assert!(err < 1e-10 * cond);
            prop_assert!((&bi.p * a.transpose()).abs().max() < 1e-10 * cond);
        }
    }
}
