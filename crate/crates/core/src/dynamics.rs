//! Distributed EZGS dynamics.
//!
//! Agent `i` evolves
//!
//! ```text
//! ż_i = -(∇²L_i)⁻¹ (g_i(y_i, t) + k0 Σ_j φ_ij + ∇_{z s} L_i · ṡ_i),   ẏ_i = -g_i(y_i, t)
//! ```
//!
//! with `φ_ij = [χ_ij(x_i - x_j, t); 0]`. The per-agent right-hand side only
//! receives the agent's own state and its neighbors' primal iterates, see
//! [`NeighborView`].

use crate::centralized::{CentralProblem, CentralSystem, PenaltySchedule};
use crate::error::{Error, Result};
use crate::graph::{Neighbor, Network};
use crate::integrator::{integrate_system, IntegratorSettings, OdeSystem, Trajectory};
use crate::problem::{block_inverse, AgentState, LocalProblem, SlackSchedule};
use crate::protocols::{BoundaryLayer, ProtocolSpec};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Equality-constrained flow on `L_i`.
    Equality,
    /// Barrier flow on `L_i^c` with slack schedules.
    Barrier,
    /// Single-agent flow on the aggregated problem.
    Centralized,
}

/// Penalty and slack schedules of the centralized barrier flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentralSetup {
    pub penalty: PenaltySchedule,
    pub slack: SlackSchedule,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub network: Network,
    pub problems: Vec<LocalProblem>,
    pub protocol: ProtocolSpec,
    pub mode: Mode,
    pub t_end: f64,
    pub settings: IntegratorSettings,
    pub x0: Vec<DVector<f64>>,
    pub lambda0: Vec<DVector<f64>>,
    /// Used in [`Mode::Centralized`] only.
    pub central: Option<CentralSetup>,
}

/// Snapshot of all agents at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwarmState {
    pub t: f64,
    pub agents: Vec<AgentState>,
}

/// Time derivative of one agent's state.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentDerivative {
    pub dx: DVector<f64>,
    pub dlambda: DVector<f64>,
    pub dy: DVector<f64>,
}

impl Scenario {
    /// Check shapes, connectivity and protocol consistency.
    pub fn validate(&self) -> Result<()> {
        let n_agents = self.network.node_count();
        if self.problems.len() != n_agents {
            return Err(Error::InvalidInput(format!(
                "{} local problems for {n_agents} agents",
                self.problems.len()
            )));
        }
        if !self.network.is_connected() {
            return Err(Error::InvalidInput("communication graph is not connected".into()));
        }
        let n = self.problems[0].dim();
        for (i, p) in self.problems.iter().enumerate() {
            if p.dim() != n {
                return Err(Error::InvalidInput(format!("agent {} has dimension {}, expected {n}", i + 1, p.dim())));
            }
            if self.mode != Mode::Centralized && p.dual_dim() == 0 {
                return Err(Error::InvalidInput(format!("agent {} has no local equality", i + 1)));
            }
            if self.x0.get(i).map(|v| v.len()) != Some(n)
                || self.lambda0.get(i).map(|v| v.len()) != Some(p.dual_dim())
            {
                return Err(Error::InvalidInput(format!("initial point of agent {} has wrong shape", i + 1)));
            }
        }
        if self.x0.len() != n_agents || self.lambda0.len() != n_agents {
            return Err(Error::InvalidInput("one initial point per agent required".into()));
        }
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return Err(Error::InvalidInput(format!("t_end = {} must be finite and non-negative", self.t_end)));
        }
        if self.mode == Mode::Centralized && self.central.is_none() {
            return Err(Error::InvalidInput("centralized mode needs penalty and slack schedules".into()));
        }
        self.protocol.validate(&self.network)?;
        self.settings.validate()
    }

    pub fn agent_count(&self) -> usize {
        self.problems.len()
    }

    pub fn dim(&self) -> usize {
        self.problems[0].dim()
    }

    /// Whether the barrier Lagrangian is in use.
    pub fn uses_barrier(&self) -> bool {
        match self.mode {
            Mode::Barrier => true,
            Mode::Centralized => self.problems.iter().any(|p| p.inequality_count() > 0),
            Mode::Equality => false,
        }
    }

    /// Boundary layer derived from the integrator settings.
    pub fn boundary_layer(&self) -> Option<BoundaryLayer> {
        (self.settings.boundary_layer > 0.0)
            .then_some(BoundaryLayer { step: self.settings.dt, factor: self.settings.boundary_layer })
    }

    /// Aggregated problem for the centralized flow.
    pub fn central_problem(&self) -> Result<CentralProblem> {
        let setup = self
            .central
            .ok_or_else(|| Error::InvalidInput("no centralized schedules configured".into()))?;
        CentralProblem::from_locals(&self.problems, setup.penalty, setup.slack)
    }

    /// `(n, r)` of each block in the flat state.
    pub fn layout(&self) -> Vec<(usize, usize)> {
        match self.mode {
            Mode::Centralized => vec![(self.dim(), self.problems.iter().map(|p| p.dual_dim()).sum())],
            _ => self.problems.iter().map(|p| (p.dim(), p.dual_dim())).collect(),
        }
    }

    /// Initial swarm state honouring `y_i(0) = ∇L_i(z_i(0))`.
    pub fn initial_state(&self) -> Result<SwarmState> {
        let barrier = self.mode == Mode::Barrier;
        let agents = self
            .problems
            .iter()
            .enumerate()
            .map(|(i, p)| {
                AgentState::new(p, self.x0[i].clone(), self.lambda0[i].clone(), 0.0, barrier)
                    .map_err(|e| e.at_agent(i))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SwarmState { t: 0.0, agents })
    }

    /// Flatten a swarm state as per-agent `[x_i; λ_i; y_i]` blocks.
    pub fn pack(&self, s: &SwarmState) -> Vec<f64> {
        let mut out = Vec::new();
        for a in &s.agents {
            out.extend(a.x.iter());
            out.extend(a.lambda.iter());
            out.extend(a.y.iter());
        }
        out
    }

    /// Inverse of [`Scenario::pack`] for the given layout.
    pub fn unpack(&self, flat: &[f64], t: f64) -> SwarmState {
        let mut agents = Vec::new();
        let mut k = 0;
        for (n, r) in self.layout() {
            let x = DVector::from_column_slice(&flat[k..k + n]);
            let lambda = DVector::from_column_slice(&flat[k + n..k + n + r]);
            let y = DVector::from_column_slice(&flat[k + n + r..k + 2 * (n + r)]);
            agents.push(AgentState { x, lambda, y });
            k += 2 * (n + r);
        }
        SwarmState { t, agents }
    }

    /// CSV columns: all `x`, then all `λ`, then all `y`, agents one-based.
    pub fn state_columns(&self) -> Vec<(String, usize)> {
        let layout = self.layout();
        let mut offsets = Vec::new();
        let mut k = 0;
        for &(n, r) in &layout {
            offsets.push(k);
            k += 2 * (n + r);
        }
        let mut cols = Vec::new();
        for (i, &(n, _)) in layout.iter().enumerate() {
            for c in 0..n {
                cols.push((format!("x_{}[{}]", i + 1, c + 1), offsets[i] + c));
            }
        }
        for (i, &(n, r)) in layout.iter().enumerate() {
            for c in 0..r {
                cols.push((format!("lambda_{}[{}]", i + 1, c + 1), offsets[i] + n + c));
            }
        }
        for (i, &(n, r)) in layout.iter().enumerate() {
            for c in 0..(n + r) {
                cols.push((format!("y_{}[{}]", i + 1, c + 1), offsets[i] + n + r + c));
            }
        }
        cols
    }
}

/// Everything agent `i` may read: its own state and its neighbors' `x_j`.
#[derive(Debug, Clone)]
pub struct NeighborView<'a> {
    pub agent: usize,
    pub own: &'a AgentState,
    pub neighbors: Vec<(Neighbor, &'a DVector<f64>)>,
}

impl<'a> NeighborView<'a> {
    pub fn new(net: &Network, state: &'a SwarmState, agent: usize) -> Self {
        let neighbors = net
            .neighbors(agent)
            .iter()
            .map(|nb| (*nb, &state.agents[nb.node].x))
            .collect();
        NeighborView { agent, own: &state.agents[agent], neighbors }
    }
}

/// Sum of coupling terms `Σ_j χ_ij` seen by one agent.
pub fn coupling_sum(sc: &Scenario, view: &NeighborView<'_>, t: f64, layer: Option<&BoundaryLayer>) -> DVector<f64> {
    let mut sum = DVector::zeros(view.own.x.len());
    for (nb, xj) in &view.neighbors {
        sum += sc
            .protocol
            .coupling_layered(nb.edge, nb.weight, &view.own.x, xj, t, layer);
    }
    sum
}

/// Right-hand side of one agent from its neighbor view.
pub fn agent_rhs(
    sc: &Scenario,
    view: &NeighborView<'_>,
    t: f64,
    barrier: bool,
    layer: Option<&BoundaryLayer>,
) -> Result<AgentDerivative> {
    let i = view.agent;
    let p = &sc.problems[i];
    let x = &view.own.x;
    let n = p.dim();
    let h = p.cost_hessian(x, t, barrier).map_err(|e| e.at_agent(i))?;
    let bi = block_inverse(&h, p.eq.a()).map_err(|e| e.at_agent(i))?;
    let gy = sc.protocol.drive_layered(i, &view.own.y, t, layer);
    let mut r = gy.clone();
    let chi = coupling_sum(sc, view, t, layer);
    for k in 0..n {
        r[k] += sc.protocol.k0 * chi[k];
    }
    if barrier {
        if let Some(blk) = &p.ineq {
            let (_, sdot) = blk.slack.value(t);
            if sdot != 0.0 {
                r += p.slack_cross(x, t).map_err(|e| e.at_agent(i))? * sdot;
            }
        }
    }
    let (dx, dl) = bi.apply(&r.rows(0, n).into_owned(), &r.rows(n, p.dual_dim()).into_owned());
    Ok(AgentDerivative { dx: -dx, dlambda: -dl, dy: -gy })
}

fn swarm_rhs(sc: &Scenario, state: &SwarmState, barrier: bool, layer: Option<&BoundaryLayer>) -> Result<Vec<AgentDerivative>> {
    (0..sc.agent_count())
        .map(|i| agent_rhs(sc, &NeighborView::new(&sc.network, state, i), state.t, barrier, layer))
        .collect()
}

/// Equality-constrained EZGS right-hand side, without regularization.
pub fn ezgs_rhs(sc: &Scenario, state: &SwarmState) -> Result<Vec<AgentDerivative>> {
    swarm_rhs(sc, state, false, None)
}

/// Barrier EZGS right-hand side, without regularization.
pub fn ezgs_barrier_rhs(sc: &Scenario, state: &SwarmState) -> Result<Vec<AgentDerivative>> {
    swarm_rhs(sc, state, true, None)
}

/// Post-settling primal flow `ẋ_i = -k0 P_i Σ_j χ_ij`.
pub fn reduced_flow_rhs(sc: &Scenario, state: &SwarmState) -> Result<Vec<DVector<f64>>> {
    let barrier = sc.mode == Mode::Barrier;
    (0..sc.agent_count())
        .map(|i| {
            let view = NeighborView::new(&sc.network, state, i);
            let p = &sc.problems[i];
            let h = p.cost_hessian(&view.own.x, state.t, barrier).map_err(|e| e.at_agent(i))?;
            let bi = block_inverse(&h, p.eq.a()).map_err(|e| e.at_agent(i))?;
            Ok(-(&bi.p * coupling_sum(sc, &view, state.t, None)) * sc.protocol.k0)
        })
        .collect()
}

/// Residual of the conserved identities: `Σ_i (∇_x L_i - y_{x,i})` followed
/// by `∇_λ L_i - y_{λ,i}` for every agent.
pub fn identity_residual(sc: &Scenario, state: &SwarmState, barrier: bool) -> Result<DVector<f64>> {
    let n = sc.dim();
    let mut sum = DVector::zeros(n);
    let mut dual = Vec::new();
    for (i, (p, a)) in sc.problems.iter().zip(&state.agents).enumerate() {
        let g = p
            .lagrangian_grad(&a.x, &a.lambda, state.t, barrier)
            .map_err(|e| e.at_agent(i))?;
        let d = g - &a.y;
        sum += d.rows(0, n);
        dual.extend(d.rows(n, p.dual_dim()).iter().cloned());
    }
    Ok(DVector::from_iterator(n + dual.len(), sum.iter().cloned().chain(dual)))
}

/// The distributed flow as an integrable system.
pub struct EzgsSystem<'a> {
    pub scenario: &'a Scenario,
    pub barrier: bool,
    pub layer: Option<BoundaryLayer>,
}

impl<'a> EzgsSystem<'a> {
    pub fn new(sc: &'a Scenario) -> Self {
        EzgsSystem { scenario: sc, barrier: sc.mode == Mode::Barrier, layer: sc.boundary_layer() }
    }
}

impl OdeSystem for EzgsSystem<'_> {
    fn dim(&self) -> usize {
        self.scenario.layout().iter().map(|(n, r)| 2 * (n + r)).sum()
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let state = self.scenario.unpack(y, t);
        let d = swarm_rhs(self.scenario, &state, self.barrier, self.layer.as_ref())?;
        let mut k = 0;
        for a in &d {
            for v in a.dx.iter().chain(a.dlambda.iter()).chain(a.dy.iter()) {
                dy[k] = *v;
                k += 1;
            }
        }
        Ok(())
    }

    fn admissible(&self, t: f64, y: &[f64]) -> Result<()> {
        if !self.barrier {
            return Ok(());
        }
        let state = self.scenario.unpack(y, t);
        for (i, (p, a)) in self.scenario.problems.iter().zip(&state.agents).enumerate() {
            let m = p.barrier_margin(&a.x, t);
            if !(m > 0.0) {
                return Err(Error::DomainViolation { agent: Some(i), margin: m });
            }
        }
        Ok(())
    }

    fn max_step(&self, t: f64) -> f64 {
        let g = self.scenario.protocol.time_varying_gain(&self.scenario.network, t);
        if g > 0.0 {
            self.scenario.settings.gain_step_fraction / g
        } else {
            f64::INFINITY
        }
    }

    fn horizons(&self) -> Vec<f64> {
        self.scenario.protocol.horizons()
    }

    fn invariant(&self, t: f64, y: &[f64]) -> Option<Vec<f64>> {
        let state = self.scenario.unpack(y, t);
        identity_residual(self.scenario, &state, self.barrier)
            .ok()
            .map(|v| v.iter().cloned().collect())
    }
}

/// Centralized system assembled from a scenario; agent 1 supplies the drive
/// law and the initial point.
pub fn central_system(sc: &Scenario) -> Result<(CentralSystem, Vec<f64>)> {
    let problem = sc.central_problem()?;
    let sys = CentralSystem {
        barrier: !problem.ineq.is_empty(),
        problem,
        drive: sc.protocol.drive[0].clone(),
        layer: sc.boundary_layer(),
        gain_step_fraction: sc.settings.gain_step_fraction,
    };
    let lambda0 = DVector::from_iterator(
        sc.lambda0.iter().map(|l| l.len()).sum(),
        sc.lambda0.iter().flat_map(|l| l.iter().cloned()),
    );
    let s0 = sys.initial_state(&sc.x0[0], &lambda0)?;
    Ok((sys, s0))
}

/// Integrate a scenario over `[0, t_end]` with its own settings.
pub fn integrate(sc: &Scenario) -> Result<Trajectory> {
    sc.validate()?;
    match sc.mode {
        Mode::Equality | Mode::Barrier => {
            let sys = EzgsSystem::new(sc);
            let y0 = sc.pack(&sc.initial_state()?);
            integrate_system(&sys, &y0, 0.0, sc.t_end, &sc.settings)
        }
        Mode::Centralized => {
            let (sys, s0) = central_system(sc)?;
            integrate_system(&sys, &s0, 0.0, sc.t_end, &sc.settings)
        }
    }
}
