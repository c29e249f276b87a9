//! Centralized continuous-time algorithms on the stacked problem.
//!
//! With `z = [x; λ]` and an auxiliary `y` started at `∇L(z(0))`, the flow
//!
//! ```text
//! ż = -(∇²L)⁻¹ (φ(y) + ∇_zc L · ċ + ∇_zs L · ṡ),   ẏ = -φ(y)
//! ```
//!
//! keeps `∇L(z(t)) - y(t)` constant, so `z` reaches the optimum once the
//! drive `φ` has steered `y` to zero.

use crate::error::{Error, Result};
use crate::integrator::OdeSystem;
use crate::problem::{block_inverse, stack, EqualityConstraint, LocalProblem, SlackSchedule, SmoothFunction, Sum};
use crate::protocols::{BoundaryLayer, Law};
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Largest barrier parameter the schedule ever returns.
pub const PENALTY_CAP: f64 = 1e12;

/// `c(t) = min(c0 · e^{r_c t}, cap)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltySchedule {
    pub initial: f64,
    pub rate: f64,
    pub cap: f64,
}

impl PenaltySchedule {
    pub fn new(initial: f64, rate: f64) -> Result<Self> {
        if !(initial > 0.0) || !(rate >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "penalty schedule needs c0 > 0 and r_c >= 0 (got {initial}, {rate})"
            )));
        }
        Ok(PenaltySchedule { initial, rate, cap: PENALTY_CAP.max(initial) })
    }

    pub fn constant(c: f64) -> Result<Self> {
        Self::new(c, 0.0)
    }

    /// `(c(t), ċ(t))`.
    pub fn value(&self, t: f64) -> (f64, f64) {
        let c = self.initial * (self.rate * t).exp();
        if c >= self.cap {
            (self.cap, 0.0)
        } else {
            (c, self.rate * c)
        }
    }
}

#[derive(Debug, Clone)]
pub struct CentralProblem {
    pub cost: Arc<dyn SmoothFunction>,
    pub eq: EqualityConstraint,
    pub ineq: Vec<Arc<dyn SmoothFunction>>,
    pub penalty: PenaltySchedule,
    pub slack: SlackSchedule,
}

impl CentralProblem {
    pub fn new(
        cost: Arc<dyn SmoothFunction>,
        eq: EqualityConstraint,
        ineq: Vec<Arc<dyn SmoothFunction>>,
        penalty: PenaltySchedule,
        slack: SlackSchedule,
    ) -> Result<Self> {
        let n = cost.dim();
        if eq.a().ncols() != n || ineq.iter().any(|g| g.dim() != n) {
            return Err(Error::InvalidInput("central problem: dimension mismatch".into()));
        }
        Ok(CentralProblem { cost, eq, ineq, penalty, slack })
    }

    /// Aggregate `F = Σ f_i`, stacked equalities and all inequalities.
    pub fn from_locals(locals: &[LocalProblem], penalty: PenaltySchedule, slack: SlackSchedule) -> Result<Self> {
        let first = locals
            .first()
            .ok_or_else(|| Error::InvalidInput("no local problems".into()))?;
        let n = first.dim();
        let cost: Arc<dyn SmoothFunction> =
            Arc::new(Sum::new(locals.iter().map(|p| p.cost.clone()).collect())?);
        let r: usize = locals.iter().map(|p| p.dual_dim()).sum();
        let mut a = DMatrix::zeros(r, n);
        let mut b = DVector::zeros(r);
        let mut row = 0;
        for p in locals {
            let m = p.dual_dim();
            a.view_mut((row, 0), (m, n)).copy_from(p.eq.a());
            b.rows_mut(row, m).copy_from(p.eq.b());
            row += m;
        }
        let ineq = locals
            .iter()
            .filter_map(|p| p.ineq.as_ref())
            .flat_map(|blk| blk.constraints.iter().cloned())
            .collect();
        Self::new(cost, EqualityConstraint::new(a, b)?, ineq, penalty, slack)
    }

    pub fn dim(&self) -> usize {
        self.cost.dim()
    }

    pub fn dual_dim(&self) -> usize {
        self.eq.rows()
    }

    fn slacks(&self, x: &DVector<f64>, t: f64) -> Result<Vec<f64>> {
        let (s, _) = self.slack.value(t);
        self.ineq
            .iter()
            .map(|g| {
                let d = s - g.value(x);
                if d > 0.0 {
                    Ok(d)
                } else {
                    Err(Error::DomainViolation { agent: None, margin: d })
                }
            })
            .collect()
    }

    /// Smallest `s(t) - g^l(x)`, `+∞` without inequalities.
    pub fn margin(&self, x: &DVector<f64>, t: f64) -> f64 {
        let (s, _) = self.slack.value(t);
        self.ineq.iter().map(|g| s - g.value(x)).fold(f64::INFINITY, f64::min)
    }

    /// `F(x) - (1/c) Σ log(s - g)` when `barrier` is set, else `F(x)`.
    pub fn cost_value(&self, x: &DVector<f64>, t: f64, barrier: bool) -> Result<f64> {
        let mut v = self.cost.value(x);
        if barrier {
            let (c, _) = self.penalty.value(t);
            for d in self.slacks(x, t)? {
                v -= d.ln() / c;
            }
        }
        Ok(v)
    }

    pub fn lagrangian_grad(&self, z: &DVector<f64>, t: f64, barrier: bool) -> Result<DVector<f64>> {
        let n = self.dim();
        let x = z.rows(0, n).into_owned();
        let lam = z.rows(n, self.dual_dim()).into_owned();
        let mut gx = self.cost.gradient(&x) + self.eq.a().tr_mul(&lam);
        if barrier {
            let (c, _) = self.penalty.value(t);
            for (g, d) in self.ineq.iter().zip(self.slacks(&x, t)?) {
                gx += g.gradient(&x) * (1.0 / (c * d));
            }
        }
        Ok(stack(&gx, &self.eq.residual(&x)))
    }

    /// `∇²_x` of the (barrier) cost.
    pub fn hessian_x(&self, x: &DVector<f64>, t: f64, barrier: bool) -> Result<DMatrix<f64>> {
        let mut h = self.cost.hessian(x);
        if barrier {
            let (c, _) = self.penalty.value(t);
            for (g, d) in self.ineq.iter().zip(self.slacks(x, t)?) {
                let gr = g.gradient(x);
                h += (&gr * gr.transpose()) * (1.0 / (c * d * d));
                h += g.hessian(x) * (1.0 / (c * d));
            }
        }
        Ok(h)
    }

    /// `∂/∂c ∇_z L̃`: x-block `-(1/c²) Σ ∇g/(s - g)`.
    pub fn penalty_cross(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let (c, _) = self.penalty.value(t);
        let mut gx = DVector::zeros(self.dim());
        for (g, d) in self.ineq.iter().zip(self.slacks(x, t)?) {
            gx -= g.gradient(x) * (1.0 / (c * c * d));
        }
        Ok(stack(&gx, &DVector::zeros(self.dual_dim())))
    }

    /// `∂/∂s ∇_z L̃`: x-block `-(1/c) Σ ∇g/(s - g)²`.
    pub fn slack_cross(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let (c, _) = self.penalty.value(t);
        let mut gx = DVector::zeros(self.dim());
        for (g, d) in self.ineq.iter().zip(self.slacks(x, t)?) {
            gx -= g.gradient(x) * (1.0 / (c * d * d));
        }
        Ok(stack(&gx, &DVector::zeros(self.dual_dim())))
    }
}

fn split(p: &CentralProblem, z: &DVector<f64>) -> DVector<f64> {
    z.rows(0, p.dim()).into_owned()
}

/// Newton flow on the equality-constrained problem; inequalities are ignored.
pub fn newton_cta_rhs(
    p: &CentralProblem,
    z: &DVector<f64>,
    y: &DVector<f64>,
    t: f64,
    drive: &Law,
    layer: Option<&BoundaryLayer>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let x = split(p, z);
    let phi = drive.eval(y, t, 1.0, layer);
    let bi = block_inverse(&p.cost.hessian(&x), p.eq.a())?;
    Ok((-bi.apply_stacked(&phi), -phi))
}

/// Barrier flow with growing penalty `c(t)` and shrinking slack `s(t)`.
pub fn barrier_cta_rhs(
    p: &CentralProblem,
    z: &DVector<f64>,
    y: &DVector<f64>,
    t: f64,
    drive: &Law,
    layer: Option<&BoundaryLayer>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let x = split(p, z);
    let phi = drive.eval(y, t, 1.0, layer);
    let mut rhs = phi.clone();
    if !p.ineq.is_empty() {
        let (_, cdot) = p.penalty.value(t);
        let (_, sdot) = p.slack.value(t);
        if cdot != 0.0 {
            rhs += p.penalty_cross(&x, t)? * cdot;
        }
        if sdot != 0.0 {
            rhs += p.slack_cross(&x, t)? * sdot;
        }
    }
    let bi = block_inverse(&p.hessian_x(&x, t, true)?, p.eq.a())?;
    Ok((-bi.apply_stacked(&rhs), -phi))
}

/// Suboptimality of the barrier minimizer, `p / c(t)`.
pub fn suboptimality_bound(p: &CentralProblem, t: f64) -> f64 {
    p.ineq.len() as f64 / p.penalty.value(t).0
}

/// The centralized flow as an integrable system on `[z; y]`.
#[derive(Debug, Clone)]
pub struct CentralSystem {
    pub problem: CentralProblem,
    pub drive: Law,
    pub barrier: bool,
    pub layer: Option<BoundaryLayer>,
    pub gain_step_fraction: f64,
}

impl CentralSystem {
    fn zdim(&self) -> usize {
        self.problem.dim() + self.problem.dual_dim()
    }

    /// Initial flat state `[z0; ∇L(z0, 0)]`.
    pub fn initial_state(&self, x0: &DVector<f64>, lambda0: &DVector<f64>) -> Result<Vec<f64>> {
        let z = stack(x0, lambda0);
        if self.barrier {
            let m = self.problem.margin(x0, 0.0);
            if !(m > 0.0) {
                return Err(Error::InfeasibleStart { agent: None, margin: m });
            }
        }
        let y = self.problem.lagrangian_grad(&z, 0.0, self.barrier)?;
        Ok(z.iter().chain(y.iter()).cloned().collect())
    }

    pub fn split_state(&self, s: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let m = self.zdim();
        (DVector::from_column_slice(&s[..m]), DVector::from_column_slice(&s[m..]))
    }
}

impl OdeSystem for CentralSystem {
    fn dim(&self) -> usize {
        2 * self.zdim()
    }

    fn rhs(&self, t: f64, s: &[f64], ds: &mut [f64]) -> Result<()> {
        let (z, y) = self.split_state(s);
        let (dz, dy) = if self.barrier {
            barrier_cta_rhs(&self.problem, &z, &y, t, &self.drive, self.layer.as_ref())?
        } else {
            newton_cta_rhs(&self.problem, &z, &y, t, &self.drive, self.layer.as_ref())?
        };
        let m = self.zdim();
        ds[..m].copy_from_slice(dz.as_slice());
        ds[m..].copy_from_slice(dy.as_slice());
        Ok(())
    }

    fn admissible(&self, t: f64, s: &[f64]) -> Result<()> {
        if self.barrier && !self.problem.ineq.is_empty() {
            let x = DVector::from_column_slice(&s[..self.problem.dim()]);
            let m = self.problem.margin(&x, t);
            if !(m > 0.0) {
                return Err(Error::DomainViolation { agent: None, margin: m });
            }
        }
        Ok(())
    }

    fn max_step(&self, t: f64) -> f64 {
        let g = self.drive.time_gain(t);
        if g > 0.0 {
            self.gain_step_fraction / g
        } else {
            f64::INFINITY
        }
    }

    fn horizons(&self) -> Vec<f64> {
        self.drive.horizon().into_iter().collect()
    }

    fn invariant(&self, t: f64, s: &[f64]) -> Option<Vec<f64>> {
        let (z, y) = self.split_state(s);
        let g = self.problem.lagrangian_grad(&z, t, self.barrier).ok()?;
        Some((g - y).iter().cloned().collect())
    }
}
