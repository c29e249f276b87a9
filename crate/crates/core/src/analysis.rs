//! Error metrics, spectral quantities and the theorem-level report.

use crate::dynamics::{central_system, identity_residual, AgentDerivative, EzgsSystem, Mode, Scenario, SwarmState};
use crate::error::{Error, Result};
use crate::graph::Network;
use crate::integrator::{OdeSystem, Trajectory};
use crate::linalg::kron_identity;
use crate::oracle::{solve_barrier_reference, solve_constrained_reference, solve_kkt, ReferenceSolution};
use crate::problem::block_inverse;
use crate::protocols::{sgn_pow, Family};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

/// Eigenvalues at or below this value count as zero.
pub const ZERO_EIGENVALUE: f64 = 1e-10;

/// Reference optima a run is measured against.
#[derive(Debug, Clone)]
pub struct References {
    /// Target of `E_x` and `E_λ`: the equality KKT point, or the barrier
    /// minimizer for barrier runs.
    pub target: ReferenceSolution,
    /// Optimum of the inequality-constrained problem, when inequalities exist.
    pub constrained: Option<ReferenceSolution>,
}

impl References {
    pub fn for_scenario(sc: &Scenario) -> Result<Self> {
        let has_ineq = sc.problems.iter().any(|p| p.inequality_count() > 0);
        match (sc.mode, has_ineq) {
            (Mode::Barrier, true) => Ok(References {
                target: solve_barrier_reference(&sc.problems, None)?,
                constrained: Some(solve_constrained_reference(&sc.problems)?),
            }),
            (Mode::Centralized, true) => {
                let c = solve_constrained_reference(&sc.problems)?;
                Ok(References { target: c.clone(), constrained: Some(c) })
            }
            _ => Ok(References { target: solve_kkt(&sc.problems)?, constrained: None }),
        }
    }
}

/// Metrics at one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSet {
    /// `(1/N) Σ ‖x_i - x*‖`.
    pub e_x: f64,
    /// `(1/N) Σ ‖λ_i - λ_i*‖`.
    pub e_lambda: f64,
    /// `‖Σ_i ∇_x L_i‖`.
    pub zgs_residual: f64,
    /// `max_i ‖A_i x_i - b_i‖`.
    pub feas_residual: f64,
    /// `max_{i,j} ‖x_i - x_j‖`.
    pub consensus_diameter: f64,
    /// `min_{i,l} (s_i - g_i^l(x_i))`, `+∞` without inequalities.
    pub ineq_margin: f64,
    /// `max_i ‖y_i‖`.
    pub y_norm: f64,
    /// Norm of the conserved-identity residual.
    pub identity_residual: f64,
    /// `Σ_i f_i^c(x*) - f_i^c(x_i) - ∇f_i^c(x_i)ᵀ(x* - x_i)`.
    pub lyapunov: f64,
    /// `F(x̄) - F(x*)` at the agent average against the constrained optimum.
    pub cost_gap: Option<f64>,
}

/// Metrics of one swarm state.
pub fn compute_metrics(sc: &Scenario, state: &SwarmState, refs: &References) -> Result<MetricSet> {
    if sc.mode == Mode::Centralized {
        return central_metrics(sc, state, refs);
    }
    let barrier = sc.mode == Mode::Barrier;
    let t = state.t;
    let n_agents = state.agents.len() as f64;
    let target = &refs.target;
    let n = sc.dim();
    let mut e_x = 0.0;
    let mut e_lambda = 0.0;
    let mut gsum = DVector::zeros(n);
    let mut feas: f64 = 0.0;
    let mut margin = f64::INFINITY;
    let mut y_norm: f64 = 0.0;
    let mut lyap = 0.0;
    for (i, (p, a)) in sc.problems.iter().zip(&state.agents).enumerate() {
        e_x += (&a.x - &target.x).norm() / n_agents;
        e_lambda += (&a.lambda - &target.lambda[i]).norm() / n_agents;
        let g = p.lagrangian_grad(&a.x, &a.lambda, t, barrier).map_err(|e| e.at_agent(i))?;
        gsum += g.rows(0, n);
        feas = feas.max(p.eq.residual(&a.x).norm());
        margin = margin.min(p.barrier_margin(&a.x, t));
        y_norm = y_norm.max(a.y.norm());
        let fx = p.cost_value(&a.x, t, barrier).map_err(|e| e.at_agent(i))?;
        let gx = p.cost_gradient(&a.x, t, barrier).map_err(|e| e.at_agent(i))?;
        let fstar = p.cost_value(&target.x, t, barrier).unwrap_or(f64::NAN);
        lyap += fstar - fx - gx.dot(&(&target.x - &a.x));
    }
    let mut diam: f64 = 0.0;
    for a in &state.agents {
        for b in &state.agents {
            diam = diam.max((&a.x - &b.x).norm());
        }
    }
    let cost_gap = refs.constrained.as_ref().map(|c| {
        let mut avg = DVector::zeros(n);
        for a in &state.agents {
            avg += &a.x / n_agents;
        }
        sc.problems.iter().map(|p| p.cost.value(&avg)).sum::<f64>() - c.cost(&sc.problems)
    });
    Ok(MetricSet {
        e_x,
        e_lambda,
        zgs_residual: gsum.norm(),
        feas_residual: feas,
        consensus_diameter: diam,
        ineq_margin: margin,
        y_norm,
        identity_residual: identity_residual(sc, state, barrier)?.norm(),
        lyapunov: lyap,
        cost_gap,
    })
}

fn central_metrics(sc: &Scenario, state: &SwarmState, refs: &References) -> Result<MetricSet> {
    let p = sc.central_problem()?;
    let barrier = !p.ineq.is_empty();
    let a = &state.agents[0];
    let t = state.t;
    let z = crate::problem::stack(&a.x, &a.lambda);
    let g = p.lagrangian_grad(&z, t, barrier)?;
    let n = p.dim();
    let lam_star = refs.target.stacked_lambda();
    let fx = p.cost_value(&a.x, t, barrier)?;
    let fstar = p.cost_value(&refs.target.x, t, barrier).unwrap_or(f64::NAN);
    let gx = g.rows(0, n) - p.eq.a().tr_mul(&a.lambda);
    Ok(MetricSet {
        e_x: (&a.x - &refs.target.x).norm(),
        e_lambda: (&a.lambda - lam_star).norm(),
        zgs_residual: g.rows(0, n).norm(),
        feas_residual: p.eq.residual(&a.x).norm(),
        consensus_diameter: 0.0,
        ineq_margin: p.margin(&a.x, t),
        y_norm: a.y.norm(),
        identity_residual: (&g - &a.y).norm(),
        lyapunov: fstar - fx - gx.dot(&(&refs.target.x - &a.x)),
        cost_gap: refs.constrained.as_ref().map(|c| p.cost.value(&a.x) - p.cost.value(&c.x)),
    })
}

/// Smallest positive eigenvalue of `M = B̄ᵀ P̄ B̄` with a null-space audit.
#[derive(Debug, Clone, PartialEq)]
pub struct Lambda2Report {
    /// Smallest eigenvalue above [`ZERO_EIGENVALUE`], if any.
    pub value: Option<f64>,
    pub null_dim: usize,
    /// `n · (m - N + components)`, the dimension of `N(B̄)`.
    pub expected_null_dim: usize,
    /// True when `M` has more zero eigenvalues than `N(B̄)` explains.
    pub degenerate: bool,
}

/// `M = (B ⊗ I_n)ᵀ diag(P_1, ..., P_N) (B ⊗ I_n)`.
pub fn assemble_m(net: &Network, p_blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = p_blocks[0].nrows();
    let nn = net.node_count();
    let bbar = kron_identity(&net.incidence(), n);
    let mut pbar = DMatrix::zeros(nn * n, nn * n);
    for (i, p) in p_blocks.iter().enumerate() {
        pbar.view_mut((i * n, i * n), (n, n)).copy_from(p);
    }
    bbar.transpose() * pbar * bbar
}

pub fn lambda2_from_projections(net: &Network, p_blocks: &[DMatrix<f64>]) -> Lambda2Report {
    let n = p_blocks[0].nrows();
    let m = assemble_m(net, p_blocks);
    let ev = crate::linalg::sym_eigenvalues(&((&m + m.transpose()) * 0.5));
    let null_dim = ev.iter().filter(|&&v| v <= ZERO_EIGENVALUE).count();
    let expected = n * net.cycle_rank();
    Lambda2Report {
        value: ev.iter().cloned().find(|&v| v > ZERO_EIGENVALUE),
        null_dim,
        expected_null_dim: expected,
        degenerate: null_dim > expected,
    }
}

/// Projection blocks `P_i` at the current iterates.
pub fn projections(sc: &Scenario, state: &SwarmState) -> Result<Vec<DMatrix<f64>>> {
    let barrier = sc.mode == Mode::Barrier;
    sc.problems
        .iter()
        .zip(&state.agents)
        .enumerate()
        .map(|(i, (p, a))| {
            let h = p.cost_hessian(&a.x, state.t, barrier).map_err(|e| e.at_agent(i))?;
            Ok(block_inverse(&h, p.eq.a()).map_err(|e| e.at_agent(i))?.p)
        })
        .collect()
}

pub fn lambda2_of_m(sc: &Scenario, state: &SwarmState) -> Result<Lambda2Report> {
    Ok(lambda2_from_projections(&sc.network, &projections(sc, state)?))
}

/// Sampled lower estimate of `inf f(w)ᵀ M f(w) / f(w)ᵀ f(w)` over `w ⟂ N(M)`
/// with `f = sgn^α`. Returns `None` when `M` vanishes.
pub fn lambda_f_estimate(m: &DMatrix<f64>, alpha: f64, samples: usize, seed: u64) -> Option<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let range: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&k| eig.eigenvalues[k] > ZERO_EIGENVALUE)
        .collect();
    if range.is_empty() {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::INFINITY;
    for _ in 0..samples {
        let mut w = DVector::zeros(m.nrows());
        for &k in &range {
            w += eig.eigenvectors.column(k) * (2.0 * rng.random::<f64>() - 1.0);
        }
        let f = sgn_pow(&w, alpha);
        let den = f.norm_squared();
        if den > 0.0 {
            best = best.min(f.dot(&(m * &f)) / den);
        }
    }
    Some(best)
}

/// Largest `‖ż_i‖` at a state, using the integrator's vector field.
pub fn max_agent_speed(sc: &Scenario, flat: &[f64], t: f64) -> Result<f64> {
    let mut d = vec![0.0; flat.len()];
    match sc.mode {
        Mode::Centralized => {
            let (sys, _) = central_system(sc)?;
            sys.rhs(t, flat, &mut d)?;
            let m = sys.problem.dim() + sys.problem.dual_dim();
            Ok(d[..m].iter().map(|v| v * v).sum::<f64>().sqrt())
        }
        _ => {
            let sys = EzgsSystem::new(sc);
            sys.rhs(t, flat, &mut d)?;
            let derivs = split_derivatives(sc, &d);
            Ok(derivs
                .iter()
                .map(|a| (a.dx.norm_squared() + a.dlambda.norm_squared()).sqrt())
                .fold(0.0, f64::max))
        }
    }
}

fn split_derivatives(sc: &Scenario, d: &[f64]) -> Vec<AgentDerivative> {
    let mut k = 0;
    sc.layout()
        .into_iter()
        .map(|(n, r)| {
            let a = AgentDerivative {
                dx: DVector::from_column_slice(&d[k..k + n]),
                dlambda: DVector::from_column_slice(&d[k + n..k + n + r]),
                dy: DVector::from_column_slice(&d[k + n + r..k + 2 * (n + r)]),
            };
            k += 2 * (n + r);
            a
        })
        .collect()
}

/// Fill the metric columns of a trajectory. `lambda2_M` is skipped in
/// centralized mode and set to 0 at samples where `M` vanishes.
pub fn annotate(traj: &mut Trajectory, sc: &Scenario, refs: &References) -> Result<()> {
    let len = traj.len();
    let mut cols: Vec<(&str, Vec<f64>)> = [
        "E_x",
        "E_lambda",
        "zgs_residual",
        "feas_residual",
        "consensus_diameter",
        "y_norm",
        "identity_residual",
        "identity_error_bound",
        "lyapunov",
        "zdot_max",
    ]
    .iter()
    .map(|&n| (n, Vec::with_capacity(len)))
    .collect();
    let barrier = sc.uses_barrier();
    let mut margin = Vec::new();
    let mut gap = Vec::new();
    let mut l2 = Vec::new();
    for k in 0..len {
        let t = traj.times[k];
        let state = sc.unpack(&traj.states[k], t);
        let m = compute_metrics(sc, &state, refs)?;
        let speed = max_agent_speed(sc, &traj.states[k], t)?;
        let vals = [
            m.e_x,
            m.e_lambda,
            m.zgs_residual,
            m.feas_residual,
            m.consensus_diameter,
            m.y_norm,
            m.identity_residual,
            traj.identity_error_bound[k],
            m.lyapunov,
            speed,
        ];
        for (c, v) in cols.iter_mut().zip(vals) {
            c.1.push(v);
        }
        margin.push(m.ineq_margin);
        if let Some(g) = m.cost_gap {
            gap.push(g);
        }
        if sc.mode != Mode::Centralized {
            l2.push(lambda2_of_m(sc, &state)?.value.unwrap_or(0.0));
        }
    }
    for (name, v) in cols {
        traj.set_metric(name, v);
    }
    if barrier {
        traj.set_metric("ineq_margin", margin);
    }
    if gap.len() == len {
        traj.set_metric("cost_gap", gap);
    }
    if l2.len() == len {
        traj.set_metric("lambda2_M", l2);
    }
    Ok(())
}

/// First sample index from which `values` stay at or below `tol` to the end.
pub fn settled_from(values: &[f64], tol: f64) -> Option<usize> {
    let mut idx = None;
    for (k, &v) in values.iter().enumerate().rev() {
        if v <= tol {
            idx = Some(k);
        } else {
            break;
        }
    }
    idx
}

/// Least-squares fit of `log v = a + b t` on `[t0, t1]`: `(slope, r²)`.
pub fn log_linear_fit(times: &[f64], values: &[f64], t0: f64, t1: f64) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, v)| **t >= t0 - 1e-12 && **t <= t1 + 1e-12 && **v > 0.0)
        .map(|(t, v)| (*t, v.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sty: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sty / stt;
    let r2 = if syy == 0.0 { 1.0 } else { sty * sty / (stt * syy) };
    Some((slope, r2))
}

/// Tolerances of the theorem-level checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteTolerances {
    /// `max_i ‖y_i‖` below which the drive counts as settled.
    pub drive_settle: f64,
    /// Bound on zgs and feasibility residuals after drive settling.
    pub zgs: f64,
    /// Multiple of the local-error estimate allowed for the identities.
    pub identity_factor: f64,
    /// Absolute slack added to the identity bound for rounding.
    pub identity_floor: f64,
    /// `E_x` threshold for settling detection.
    pub settle: f64,
    pub settle_hold: f64,
    /// `E_x(T)` and `E_λ(T)` bounds for prescribed-time runs.
    pub pt_primal: f64,
    pub pt_dual: f64,
    /// Extra allowance on the barrier gap `p/c`.
    pub gap_slack: f64,
}

impl Default for SuiteTolerances {
    fn default() -> Self {
        SuiteTolerances {
            drive_settle: 1e-8,
            zgs: 1e-6,
            identity_factor: 10.0,
            identity_floor: 1e-13,
            settle: 1e-6,
            settle_hold: 0.5,
            pt_primal: 1e-3,
            pt_dual: 1e-2,
            gap_slack: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub key: String,
    /// `None` when the check does not apply to this run.
    pub passed: Option<bool>,
    /// Hard checks decide the exit status of a run.
    pub hard: bool,
    pub detail: String,
    pub values: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TheoremReport {
    pub entries: Vec<ReportEntry>,
}

impl TheoremReport {
    pub fn entry(&self, key: &str) -> Option<&ReportEntry> {
        self.entries.iter().find(|e| e.key == key)
    }

    /// False when any applicable hard check failed.
    pub fn hard_ok(&self) -> bool {
        self.entries.iter().all(|e| !e.hard || e.passed != Some(false))
    }

    pub fn all_ok(&self) -> bool {
        self.entries.iter().all(|e| e.passed != Some(false))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let status = match e.passed {
                Some(true) => "PASS",
                Some(false) => "FAIL",
                None => "N/A ",
            };
            let kind = if e.hard { "hard" } else { "soft" };
            let _ = writeln!(s, "[{status}] {} ({kind}): {}", e.key, e.detail);
            for (k, v) in &e.values {
                let _ = writeln!(s, "        {k} = {v:e}");
            }
        }
        s
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let status = match e.passed {
                Some(true) => "pass",
                Some(false) => "fail",
                None => "n/a",
            };
            let _ = writeln!(s, "{}.status={status}", e.key);
            for (k, v) in &e.values {
                let _ = writeln!(s, "{}.{k}={}", e.key, crate::integrator::fmt_float(*v));
            }
        }
        s
    }
}

fn column<'a>(traj: &'a Trajectory, name: &str) -> Result<&'a [f64]> {
    traj.metric(name)
        .ok_or_else(|| Error::InvalidInput(format!("trajectory lacks metric column '{name}'")))
}

/// Theorem-level checks on an annotated trajectory.
pub fn check_theorem_suite(traj: &Trajectory, sc: &Scenario, tol: &SuiteTolerances) -> Result<TheoremReport> {
    let mut report = TheoremReport::default();
    if traj.is_empty() {
        return Ok(report);
    }
    let times = &traj.times;
    let e_x = column(traj, "E_x")?;
    let e_l = column(traj, "E_lambda")?;
    let zgs = column(traj, "zgs_residual")?;
    let feas = column(traj, "feas_residual")?;
    let ynorm = column(traj, "y_norm")?;
    let ident = column(traj, "identity_residual")?;
    let bound = column(traj, "identity_error_bound")?;
    let lyap = column(traj, "lyapunov")?;
    let speed = column(traj, "zdot_max")?;
    let family = sc.protocol.family;
    let t_end = *times.last().unwrap();

    // (a) zero-gradient-sum capture
    let drive_idx = settled_from(ynorm, tol.drive_settle);
    let worst_identity = ident
        .iter()
        .zip(bound)
        .map(|(r, b)| r - (tol.identity_factor * b + tol.identity_floor))
        .fold(f64::NEG_INFINITY, f64::max);
    let identity_ok = worst_identity <= 0.0;
    let (zgs_after, feas_after) = match drive_idx {
        Some(k) => (
            zgs[k..].iter().cloned().fold(0.0, f64::max),
            feas[k..].iter().cloned().fold(0.0, f64::max),
        ),
        None => (f64::NAN, f64::NAN),
    };
    let capture_ok = drive_idx.is_some() && zgs_after <= tol.zgs && feas_after <= tol.zgs;
    let max_ratio = ident
        .iter()
        .zip(bound)
        .map(|(r, b)| if *b > 0.0 { r / b } else if *r > tol.identity_floor { f64::INFINITY } else { 0.0 })
        .fold(0.0, f64::max);
    report.entries.push(ReportEntry {
        key: "zgs_capture".into(),
        passed: Some(capture_ok && identity_ok),
        hard: true,
        detail: match drive_idx {
            Some(k) => format!(
                "drive settled at t = {:.4}; residuals after settling zgs {:.3e}, feas {:.3e}; identity within bound: {identity_ok}",
                times[k], zgs_after, feas_after
            ),
            None => format!("drive never settled below {:e}", tol.drive_settle),
        },
        values: vec![
            ("drive_settle_time".into(), drive_idx.map_or(f64::NAN, |k| times[k])),
            ("zgs_after".into(), zgs_after),
            ("feas_after".into(), feas_after),
            ("identity_max".into(), ident.iter().cloned().fold(0.0, f64::max)),
            ("identity_to_bound_ratio".into(), max_ratio),
        ],
    });

    // (b) monotone Lyapunov function after settling
    let (mono_ok, worst_rise) = match drive_idx {
        Some(k) => {
            let mut worst: f64 = 0.0;
            for w in lyap[k..].windows(2) {
                worst = worst.max(w[1] - w[0] - (1e-12 + 1e-9 * w[0].abs()));
            }
            (worst <= 0.0, worst)
        }
        None => (false, f64::NAN),
    };
    report.entries.push(ReportEntry {
        key: "lyapunov_monotone".into(),
        passed: Some(mono_ok),
        hard: false,
        detail: format!("largest excess rise of V after drive settling {worst_rise:.3e}"),
        values: vec![("max_excess_rise".into(), worst_rise)],
    });

    // (c) settling class
    let settle = crate::integrator::settling_time_of(times, e_x, tol.settle, tol.settle_hold);
    let fit = log_linear_fit(times, e_x, 1.0, 4.0_f64.min(t_end));
    let (class_ok, detail) = match family {
        Family::Lp => {
            let early = crate::integrator::settling_time_of(times, e_x, tol.settle, 0.0).is_none_or(|t| t > 5.0);
            let fit_ok = fit.is_some_and(|(s, r2)| s < 0.0 && r2 >= 0.99);
            (
                early && fit_ok,
                format!("exponential class: no settling before t = 5: {early}; log-linear fit on [1, 4] {fit:?}"),
            )
        }
        Family::Ftp | Family::Fxtp => (settle.is_some(), format!("finite settling time {settle:?}")),
        Family::Ptp => {
            let horizon = sc.protocol.consensus_horizon().unwrap_or(f64::NAN);
            let k = traj.index_at(horizon);
            let ok = k.is_some_and(|k| (times[k] - horizon).abs() < 1e-9 && e_x[k] <= tol.pt_primal);
            (ok, format!("E_x at the horizon below {:e}: {ok}", tol.pt_primal))
        }
    };
    report.entries.push(ReportEntry {
        key: "settling_class".into(),
        passed: Some(class_ok),
        hard: false,
        detail,
        values: vec![
            ("settling_time".into(), settle.unwrap_or(f64::NAN)),
            ("fit_slope".into(), fit.map_or(f64::NAN, |f| f.0)),
            ("fit_r2".into(), fit.map_or(f64::NAN, |f| f.1)),
        ],
    });

    // (d) prescribed horizon
    if family == Family::Ptp {
        let horizon = sc.protocol.consensus_horizon().unwrap_or(f64::NAN);
        let entry = match traj.index_at(horizon).filter(|&k| (times[k] - horizon).abs() < 1e-9) {
            Some(k) => ReportEntry {
                key: "pt_horizon".into(),
                passed: Some(e_x[k] <= tol.pt_primal && e_l[k] <= tol.pt_dual),
                hard: true,
                detail: format!("E_x(T) = {:.3e}, E_lambda(T) = {:.3e} at T = {horizon}", e_x[k], e_l[k]),
                values: vec![("e_x_at_T".into(), e_x[k]), ("e_lambda_at_T".into(), e_l[k])],
            },
            None => ReportEntry {
                key: "pt_horizon".into(),
                passed: Some(false),
                hard: true,
                detail: format!("no sample at the horizon T = {horizon}"),
                values: vec![],
            },
        };
        report.entries.push(entry);
    } else {
        report.entries.push(ReportEntry {
            key: "pt_horizon".into(),
            passed: None,
            hard: true,
            detail: "not a prescribed-time run".into(),
            values: vec![],
        });
    }

    // (e) bounded inputs
    let finite = speed.iter().all(|v| v.is_finite());
    let peak = speed.iter().cloned().fold(0.0, f64::max);
    let mut values = vec![("max_zdot".into(), peak)];
    let mut ok = finite;
    let mut detail = format!("max sampled ‖ż_i‖ = {peak:.3e}");
    if family == Family::Ptp {
        let horizon = sc.protocol.consensus_horizon().unwrap_or(f64::NAN);
        let window: Vec<f64> = times
            .iter()
            .zip(speed)
            .filter(|(t, _)| **t >= horizon - 0.1 - 1e-12 && **t < horizon - 1e-12)
            .map(|(_, v)| *v)
            .collect();
        let decreasing = window.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9));
        let last = window.last().cloned().unwrap_or(f64::NAN);
        values.push(("zdot_before_T".into(), last));
        ok &= decreasing && last <= 1e-2 * peak.max(1e-300);
        detail += &format!("; decreasing on [T - 0.1, T): {decreasing}; last value before T {last:.3e}");
    }
    report.entries.push(ReportEntry { key: "bounded_input".into(), passed: Some(ok), hard: false, detail, values });

    // spectral floor along the run
    if let Some(l2) = traj.metric("lambda2_M") {
        let floor = l2.iter().cloned().fold(f64::INFINITY, f64::min);
        report.entries.push(ReportEntry {
            key: "lambda2_floor".into(),
            passed: Some(floor > 0.0),
            hard: false,
            detail: format!("smallest sampled λ₂(M) = {floor:.6e}"),
            values: vec![("min_lambda2".into(), floor)],
        });
        if family == Family::Ptp {
            let kappa = sc
                .protocol
                .coupling
                .iter()
                .filter_map(|l| match l {
                    crate::protocols::Law::Prescribed { kappa, .. } => Some(*kappa),
                    _ => None,
                })
                .fold(f64::INFINITY, f64::min);
            let prod = kappa * floor;
            report.entries.push(ReportEntry {
                key: "kappa_threshold".into(),
                passed: Some(prod >= 1.0),
                hard: false,
                detail: format!("κ · min λ₂(M) = {prod:.4} (at least 1 required for bounded inputs near T)"),
                values: vec![("kappa_lambda2".into(), prod)],
            });
        }
    }

    // (f) barrier feasibility and (g) suboptimality gap
    if let Some(margin) = traj.metric("ineq_margin") {
        let min_margin = margin.iter().cloned().fold(f64::INFINITY, f64::min);
        report.entries.push(ReportEntry {
            key: "barrier_feasibility".into(),
            passed: Some(min_margin > 0.0),
            hard: true,
            detail: format!("smallest sampled margin {min_margin:.3e}"),
            values: vec![("min_margin".into(), min_margin)],
        });
        let p: usize = sc.problems.iter().map(|p| p.inequality_count()).sum();
        let c = sc
            .problems
            .iter()
            .filter_map(|p| p.ineq.as_ref().map(|b| b.barrier))
            .fold(f64::INFINITY, f64::min);
        let c = if sc.mode == Mode::Centralized {
            sc.central.map_or(c, |s| s.penalty.value(t_end).0)
        } else {
            c
        };
        let bound = p as f64 / c + tol.gap_slack;
        match traj.metric("cost_gap") {
            Some(gap) => {
                let g = *gap.last().unwrap();
                report.entries.push(ReportEntry {
                    key: "barrier_gap".into(),
                    passed: Some(g <= bound),
                    hard: false,
                    detail: format!("F(x(t_end)) - F(x*) = {g:.3e}, bound p/c + slack = {bound:.3e}"),
                    values: vec![("gap".into(), g), ("bound".into(), bound)],
                });
            }
            None => report.entries.push(ReportEntry {
                key: "barrier_gap".into(),
                passed: None,
                hard: false,
                detail: "no constrained reference".into(),
                values: vec![],
            }),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Network;

    #[test]
    fn lambda2_two_nodes_unconstrained() {
        let net = Network::path(2).unwrap();
        let p = vec![DMatrix::identity(3, 3), DMatrix::identity(3, 3)];
        let r = lambda2_from_projections(&net, &p);
        assert!((r.value.unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(r.null_dim, 0);
        assert!(!r.degenerate);
    }

    #[test]
    fn lambda2_flags_degenerate_projections() {
        let net = Network::circle(4).unwrap();
        let p = vec![DMatrix::zeros(2, 2); 4];
        let r = lambda2_from_projections(&net, &p);
        assert!(r.value.is_none());
        assert!(r.degenerate);
    }

    #[test]
    fn log_fit_recovers_rate() {
        let t: Vec<f64> = (0..50).map(|k| k as f64 * 0.1).collect();
        let v: Vec<f64> = t.iter().map(|t| 3.0 * (-0.7 * t).exp()).collect();
        let (s, r2) = log_linear_fit(&t, &v, 1.0, 4.0).unwrap();
        assert!((s + 0.7).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn settled_from_tail() {
        assert_eq!(settled_from(&[1.0, 0.0, 2.0, 0.0, 0.0], 0.5), Some(3));
        assert_eq!(settled_from(&[1.0, 2.0], 0.5), None);
    }

    #[test]
    fn empty_report_for_empty_trajectory() {
        let sc = crate::presets::Preset::Case1Equality
            .scenario(Family::Lp, 42)
            .unwrap();
        let traj = Trajectory {
            times: vec![],
            states: vec![],
            identity_error_bound: vec![],
            metrics: vec![],
            termination: crate::integrator::Termination::Horizon,
            stats: Default::default(),
        };
        let r = check_theorem_suite(&traj, &sc, &SuiteTolerances::default()).unwrap();
        assert!(r.entries.is_empty());
    }

    fn quadratic_ring(seed: u64) -> Scenario {
        use crate::problem::{EqualityConstraint, LocalProblem, Quadratic, SmoothFunction};
        use std::sync::Arc;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sc = crate::presets::Preset::Case1Equality.scenario(Family::Lp, 42).unwrap();
        sc.problems = (0..6)
            .map(|i| {
                let g = DMatrix::from_fn(7, 7, |_, _| rng.random::<f64>() - 0.5);
                let q = &g * g.transpose() + DMatrix::identity(7, 7);
                let cost: Arc<dyn SmoothFunction> = Arc::new(Quadratic::new(q, DVector::zeros(7), 0.0).unwrap());
                let a = DMatrix::from_row_slice(1, 7, &crate::presets::CASE1_A[i]);
                let eq = EqualityConstraint::new(a, DVector::from_element(1, 1.0)).unwrap();
                LocalProblem::new(cost, eq, None).unwrap()
            })
            .collect();
        sc
    }

    #[test]
    fn lambda2_is_constant_for_quadratic_costs() {
        let sc = quadratic_ring(3);
        let mut first = None;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut st = sc.initial_state().unwrap();
            for a in &mut st.agents {
                a.x = DVector::from_fn(7, |_, _| 4.0 * rng.random::<f64>() - 2.0);
            }
            let v = lambda2_of_m(&sc, &st).unwrap().value.unwrap();
            let f = *first.get_or_insert(v);
            assert!((v - f).abs() <= 1e-10 * f, "{v} vs {f}");
        }
    }

    #[test]
    fn rayleigh_estimate_is_positive_on_presets() {
        let sc = crate::presets::Preset::Case1Equality.scenario(Family::Ftp, 42).unwrap();
        let st = sc.initial_state().unwrap();
        let r = lambda2_of_m(&sc, &st).unwrap();
        assert!(r.value.unwrap() > 0.0 && !r.degenerate);
        let m = assemble_m(&sc.network, &projections(&sc, &st).unwrap());
        for alpha in [0.1, 0.5, 0.9] {
            let lf = lambda_f_estimate(&m, alpha, 1000, 11).unwrap();
            assert!(lf >= 1e-12, "alpha {alpha}: {lf}");
        }
        // sgn^1 is the identity: the estimate is bounded below by λ₂
        let l1 = lambda_f_estimate(&m, 1.0, 200, 5).unwrap();
        assert!(l1 >= r.value.unwrap() * (1.0 - 1e-9));
    }

    #[test]
    fn metrics_vanish_at_the_optimum() {
        let sc = crate::presets::Preset::Case1Equality.scenario(Family::Lp, 42).unwrap();
        let refs = References::for_scenario(&sc).unwrap();
        let agents = (0..6)
            .map(|i| {
                crate::problem::AgentState::new(&sc.problems[i], refs.target.x.clone(), refs.target.lambda[i].clone(), 0.0, false)
                    .unwrap()
            })
            .collect();
        let m = compute_metrics(&sc, &SwarmState { t: 0.0, agents }, &refs).unwrap();
        assert_eq!(m.e_x, 0.0);
        assert_eq!(m.e_lambda, 0.0);
        assert_eq!(m.consensus_diameter, 0.0);
        assert!(m.zgs_residual < 1e-12 && m.feas_residual < 1e-12);
        assert_eq!(m.identity_residual, 0.0);
        assert_eq!(m.lyapunov, 0.0);
        assert_eq!(m.ineq_margin, f64::INFINITY);
        assert!(m.cost_gap.is_none());
    }

    #[test]
    fn linear_protocol_report() {
        let mut sc = crate::presets::Preset::Case1Equality.scenario(Family::Lp, 42).unwrap();
        sc.t_end = 4.0;
        let refs = References::for_scenario(&sc).unwrap();
        let mut tr = crate::dynamics::integrate(&sc).unwrap();
        annotate(&mut tr, &sc, &refs).unwrap();
        let r = check_theorem_suite(&tr, &sc, &SuiteTolerances::default()).unwrap();
        assert!(r.hard_ok(), "{}", r.to_text());
        for key in ["zgs_capture", "lyapunov_monotone", "settling_class", "lambda2_floor"] {
            assert_eq!(r.entry(key).unwrap().passed, Some(true), "{key}: {}", r.to_text());
        }
        assert_eq!(r.entry("pt_horizon").unwrap().passed, None);
        assert!(r.entry("barrier_gap").is_none());
        let s = r.entry("settling_class").unwrap();
        assert!(s.values[0].1.is_nan());
        assert!(s.values[1].1 < 0.0);
        let kv = r.to_key_values();
        assert!(kv.contains("zgs_capture.status=pass"));
        // λ₂(M) stays above a positive floor along the run
        let l2 = tr.metric("lambda2_M").unwrap();
        assert!(l2.iter().all(|&v| v > 1e-3));
    }

    #[test]
    fn centralized_metrics() {
        let text = "mode = \"centralized\"\nt_end = 0.5\n[scenario]\npreset = \"case1_equality\"\n[protocol]\nfamily = \"LP\"\n";
        let sc = crate::config::RunConfig::from_toml(text).unwrap().build_scenario().unwrap();
        let refs = References::for_scenario(&sc).unwrap();
        let mut tr = crate::dynamics::integrate(&sc).unwrap();
        annotate(&mut tr, &sc, &refs).unwrap();
        assert!(tr.metric("lambda2_M").is_none());
        let ex = tr.metric("E_x").unwrap();
        assert!(ex.last().unwrap() < &(1e-3 * ex[0]));
        let id = tr.metric("identity_residual").unwrap();
        assert_eq!(id[0], 0.0);
        assert!(id.iter().all(|&v| v < 1e-8));
    }
}
