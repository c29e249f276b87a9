//! Reference optima by damped Newton iteration on the stacked KKT system.
//!
//! The residual is assembled from [`LocalProblem::lagrangian_grad`], the same
//! routine the dynamics use:
//!
//! ```text
//! r(x, λ) = [Σ_i ∇_x L_i(x, λ_i); A_1 x - b_1; ...; A_N x - b_N]
//! ```

use crate::error::{Error, Result};
use crate::linalg::{lstsq_min_norm, rank};
use crate::problem::{kkt_matrix, kkt_solve, InequalityBlock, LocalProblem, SlackSchedule};
use nalgebra::{DMatrix, DVector};

/// Converged KKT point of the stacked problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub x: DVector<f64>,
    /// Multipliers per agent.
    pub lambda: Vec<DVector<f64>>,
    /// Euclidean norm of the stacked residual.
    pub kkt_residual: f64,
    /// False when the stacked constraint matrix is rank deficient; the
    /// multipliers are then the minimum-norm choice.
    pub duals_unique: bool,
    /// Barrier parameter per agent when solved with barriers.
    pub barrier: Option<Vec<f64>>,
    /// Newton iterations used.
    pub iterations: usize,
}

impl ReferenceSolution {
    /// `Σ_i f_i(x)`.
    pub fn cost(&self, problems: &[LocalProblem]) -> f64 {
        problems.iter().map(|p| p.cost.value(&self.x)).sum()
    }

    pub fn stacked_lambda(&self) -> DVector<f64> {
        let r: usize = self.lambda.iter().map(|l| l.len()).sum();
        DVector::from_iterator(r, self.lambda.iter().flat_map(|l| l.iter().cloned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tol: 1e-12, max_iter: 200, armijo: 1e-4 }
    }
}

fn stacked_a(problems: &[LocalProblem]) -> DMatrix<f64> {
    let n = problems[0].dim();
    let r: usize = problems.iter().map(|p| p.dual_dim()).sum();
    let mut a = DMatrix::zeros(r, n);
    let mut row = 0;
    for p in problems {
        a.view_mut((row, 0), (p.dual_dim(), n)).copy_from(p.eq.a());
        row += p.dual_dim();
    }
    a
}

fn split_lambda(problems: &[LocalProblem], v: &DVector<f64>, offset: usize) -> Vec<DVector<f64>> {
    let mut k = offset;
    problems
        .iter()
        .map(|p| {
            let l = v.rows(k, p.dual_dim()).into_owned();
            k += p.dual_dim();
            l
        })
        .collect()
}

/// Stacked KKT residual at `(x, λ)`, evaluated at `t` with or without barriers.
pub fn kkt_residual(
    problems: &[LocalProblem],
    x: &DVector<f64>,
    lambda: &[DVector<f64>],
    t: f64,
    barrier: bool,
) -> Result<DVector<f64>> {
    let n = x.len();
    let mut gx = DVector::zeros(n);
    let mut rest = Vec::new();
    for (i, (p, l)) in problems.iter().zip(lambda).enumerate() {
        let g = p.lagrangian_grad(x, l, t, barrier).map_err(|e| e.at_agent(i))?;
        gx += g.rows(0, n);
        rest.extend(g.rows(n, p.dual_dim()).iter().cloned());
    }
    Ok(DVector::from_iterator(n + rest.len(), gx.iter().cloned().chain(rest)))
}

struct Solved {
    x: DVector<f64>,
    lambda: Vec<DVector<f64>>,
    residual: f64,
    iterations: usize,
}

fn newton(
    problems: &[LocalProblem],
    mut x: DVector<f64>,
    mut lambda: Vec<DVector<f64>>,
    barrier: bool,
    full_rank: bool,
    opts: &NewtonOptions,
) -> Result<Solved> {
    let a = stacked_a(problems);
    let n = x.len();
    let t = 0.0;
    let mut r = kkt_residual(problems, &x, &lambda, t, barrier)?;
    let mut norm = r.norm();
    let mut it = 0;
    let mut floor = 0.0;
    while norm > opts.tol && it < opts.max_iter {
        it += 1;
        let mut h = DMatrix::zeros(n, n);
        for (i, p) in problems.iter().enumerate() {
            h += p.cost_hessian(&x, t, barrier).map_err(|e| e.at_agent(i))?;
        }
        floor = rounding_floor(problems, &x, &lambda, &h, barrier)?;
        let d = if full_rank {
            kkt_solve(&h, &a, &(-&r))?
        } else {
            lstsq_min_norm(&kkt_matrix(&h, &a), &(-&r), 1e-12)
        };
        let dx = d.rows(0, n).into_owned();
        let dl = split_lambda(problems, &d, n);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xt = &x + &dx * step;
            let lt: Vec<DVector<f64>> = lambda.iter().zip(&dl).map(|(l, d)| l + d * step).collect();
            if let Ok(rt) = kkt_residual(problems, &xt, &lt, t, barrier) {
                let nt = rt.norm();
                if nt <= (1.0 - opts.armijo * step) * norm {
                    accepted = Some((xt, lt, rt, nt));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((xt, lt, rt, nt)) => {
                x = xt;
                lambda = lt;
                r = rt;
                norm = nt;
            }
            // no further decrease is possible in floating point
            None => break,
        }
    }
    if norm > opts.tol.max(floor) {
        return Err(Error::NoConvergence { iterations: it, residual: norm });
    }
    Ok(Solved { x, lambda, residual: norm, iterations: it })
}

/// Residual level below which rounding dominates: the per-agent gradient
/// terms cancel in the sum, and `x` itself is only known to machine precision.
fn rounding_floor(
    problems: &[LocalProblem],
    x: &DVector<f64>,
    lambda: &[DVector<f64>],
    h: &DMatrix<f64>,
    barrier: bool,
) -> Result<f64> {
    let mut scale = 1.0 + h.norm() * x.norm();
    for (p, l) in problems.iter().zip(lambda) {
        scale += p.lagrangian_grad(x, l, 0.0, barrier)?.norm() + p.eq.a().norm() * l.norm();
    }
    Ok(16.0 * f64::EPSILON * scale)
}

/// Remove the component of the stacked multiplier in the null space of `Aᵀ`.
fn min_norm_duals(problems: &[LocalProblem], lambda: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let a = stacked_a(problems);
    let stacked = DVector::from_iterator(a.nrows(), lambda.iter().flat_map(|l| l.iter().cloned()));
    // least-squares projection onto range(A)
    let proj = &a * lstsq_min_norm(&a, &stacked, 1e-12);
    split_lambda(problems, &proj, 0)
}

/// KKT point of `min Σ f_i(x)` subject to `A_i x = b_i` for all `i`.
/// Inequalities are ignored.
pub fn solve_kkt(problems: &[LocalProblem]) -> Result<ReferenceSolution> {
    solve_kkt_with(problems, &NewtonOptions::default())
}

pub fn solve_kkt_with(problems: &[LocalProblem], opts: &NewtonOptions) -> Result<ReferenceSolution> {
    check_problems(problems)?;
    let a = stacked_a(problems);
    let full_rank = rank(&a, 1e-12) == a.nrows();
    let x0 = DVector::zeros(problems[0].dim());
    let l0 = problems.iter().map(|p| DVector::zeros(p.dual_dim())).collect();
    let s = newton(problems, x0, l0, false, full_rank, opts)?;
    let lambda = if full_rank { s.lambda } else { min_norm_duals(problems, &s.lambda) };
    Ok(ReferenceSolution {
        x: s.x,
        lambda,
        kkt_residual: s.residual,
        duals_unique: full_rank,
        barrier: None,
        iterations: s.iterations,
    })
}

fn check_problems(problems: &[LocalProblem]) -> Result<()> {
    let first = problems
        .first()
        .ok_or_else(|| Error::InvalidInput("no local problems".into()))?;
    if problems.iter().any(|p| p.dim() != first.dim()) {
        return Err(Error::InvalidInput("local problems differ in dimension".into()));
    }
    Ok(())
}

/// Copies of the problems with constant slack `s` and barrier parameters
/// `c_i = min(own_i or override, cap)`.
fn relaxed(problems: &[LocalProblem], s: f64, c: Option<f64>, cap: f64) -> Result<Vec<LocalProblem>> {
    problems
        .iter()
        .map(|p| {
            let ineq = match &p.ineq {
                Some(blk) => {
                    let slack = if s > 0.0 { SlackSchedule::new(s, 1.0, 2.0)? } else { SlackSchedule::zero() };
                    let ci = c.unwrap_or(blk.barrier).min(cap);
                    Some(InequalityBlock::new(blk.constraints.clone(), ci, slack)?)
                }
                None => None,
            };
            LocalProblem::new(p.cost.clone(), p.eq.clone(), ineq)
        })
        .collect()
}

fn min_margin(problems: &[LocalProblem], x: &DVector<f64>) -> f64 {
    problems.iter().map(|p| p.barrier_margin(x, 0.0)).fold(f64::INFINITY, f64::min)
}

fn target_barrier(problems: &[LocalProblem], c: Option<f64>) -> f64 {
    problems
        .iter()
        .filter_map(|p| p.ineq.as_ref())
        .map(|b| c.unwrap_or(b.barrier))
        .fold(1.0, f64::max)
}

/// Minimizer of `Σ f_i^c` with zero slack, subject to the equalities.
///
/// Each agent keeps its own barrier parameter unless `c` overrides it. A
/// strictly feasible start is found at `c = 1` by relaxing the slack and
/// shrinking it to zero along re-centered iterates; the barrier parameter is
/// then raised tenfold per stage up to its target.
pub fn solve_barrier_reference(problems: &[LocalProblem], c: Option<f64>) -> Result<ReferenceSolution> {
    check_problems(problems)?;
    let opts = NewtonOptions::default();
    let loose = NewtonOptions { tol: 1e-8, ..opts };
    let a = stacked_a(problems);
    let full_rank = rank(&a, 1e-12) == a.nrows();
    let eq = solve_kkt(problems)?;
    let (mut x, mut lambda) = (eq.x, eq.lambda);

    let m = min_margin(&relaxed(problems, 0.0, c, 1.0)?, &x);
    if !(m > 0.0) {
        let mut s = 1.0 - m;
        for round in 0.. {
            if round > 1000 {
                return Err(Error::InfeasibleStart { agent: None, margin: -s });
            }
            let stage = relaxed(problems, s, c, 1.0)?;
            let sol = newton(&stage, x.clone(), lambda.clone(), true, full_rank, &loose)?;
            x = sol.x;
            lambda = sol.lambda;
            let mr = min_margin(&stage, &x);
            if !(mr > 1e-12 * (1.0 + s)) {
                // the relaxation cannot shrink further: no strictly feasible point
                return Err(Error::InfeasibleStart { agent: None, margin: -s });
            }
            let s_next = s - 0.5 * mr;
            if s_next <= 0.0 {
                break;
            }
            s = s_next;
        }
    }

    let target = target_barrier(problems, c);
    let mut level: f64 = 1.0;
    let sol = loop {
        let last = level >= target;
        let stage = relaxed(problems, 0.0, c, level)?;
        let sol = newton(&stage, x.clone(), lambda.clone(), true, full_rank, if last { &opts } else { &loose })?;
        if last {
            break (sol, stage);
        }
        x = sol.x;
        lambda = sol.lambda;
        level = (level * 10.0).min(target);
    };
    let (sol, stage) = sol;
    let lambda = if full_rank { sol.lambda } else { min_norm_duals(problems, &sol.lambda) };
    let barrier = stage
        .iter()
        .map(|p| p.ineq.as_ref().map_or(f64::INFINITY, |b| b.barrier))
        .collect();
    Ok(ReferenceSolution {
        x: sol.x,
        lambda,
        kkt_residual: sol.residual,
        duals_unique: full_rank,
        barrier: Some(barrier),
        iterations: sol.iterations,
    })
}

/// Largest barrier parameter used by [`solve_constrained_reference`].
pub const CONTINUATION_BARRIER: f64 = 1e9;

/// Approximate optimum of the inequality-constrained problem by barrier
/// continuation up to `c = 1e9`; the objective error is at most `p / 1e9`.
pub fn solve_constrained_reference(problems: &[LocalProblem]) -> Result<ReferenceSolution> {
    solve_barrier_reference(problems, Some(CONTINUATION_BARRIER))
}
