//! TOML run configuration and scenario construction.
//!
//! A configuration names a preset or spells out agents inline. Protocol and
//! integrator sections only list overrides: missing keys fall back to the
//! preset's values, or to the library defaults for inline scenarios.
//!
//! ```toml
//! seed = 42
//! t_end = 5.0
//!
//! [scenario]
//! preset = "case1_equality"
//!
//! [protocol]
//! family = "FTP"
//! gain = 4.0
//!
//! [integrator]
//! dt = 5e-4
//!
//! [output]
//! dir = "out/ftp"
//! ```

use crate::centralized::PenaltySchedule;
use crate::dynamics::{CentralSetup, Mode, Scenario};
use crate::error::{Error, Result};
use crate::graph::Network;
use crate::integrator::IntegratorSettings;
use crate::presets::{Preset, DEFAULT_SEED};
use crate::problem::{
    Affine, EqualityConstraint, InequalityBlock, LocalProblem, Quadratic, QuadraticCosine, SlackSchedule,
    SmoothFunction,
};
use crate::protocols::{Family, ProtocolParams, ProtocolSpec};
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    pub scenario: ScenarioSource,
    #[serde(default)]
    pub protocol: ProtocolSection,
    /// Overrides of [`IntegratorSettings`] fields.
    #[serde(default)]
    pub integrator: toml::Table,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub central: Option<CentralSection>,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

/// A preset, inline agents, or a preset with its graph replaced.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    /// Edge list `[i, j, weight]` with one-based node indices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<(usize, usize, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agents: Option<Vec<AgentConfig>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub cost: CostConfig,
    /// Rows of `A_i`.
    #[serde(default)]
    pub a: Vec<Vec<f64>>,
    #[serde(default)]
    pub b: Vec<f64>,
    /// Affine inequalities `dᵀx - e <= s_i(t)`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inequalities: Vec<AffineConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub barrier: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slack: Option<SlackConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostConfig {
    /// `½xᵀQx + cᵀx + k`.
    Quadratic {
        q: Vec<Vec<f64>>,
        c: Vec<f64>,
        #[serde(default)]
        k: f64,
    },
    /// `‖x‖² - shift·1ᵀx + cos(wᵀx / 2)`.
    QuadraticCosine { shift: f64, w: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineConfig {
    pub d: Vec<f64>,
    pub e: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlackConfig {
    pub initial: f64,
    pub horizon: f64,
    pub exponent: f64,
}

impl SlackConfig {
    fn schedule(&self) -> Result<SlackSchedule> {
        if self.initial == 0.0 {
            return Ok(SlackSchedule::zero());
        }
        SlackSchedule::new(self.initial, self.horizon, self.exponent)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProtocolSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<Family>,
    /// Overrides of [`ProtocolParams`] fields.
    #[serde(flatten)]
    pub params: toml::Table,
}

/// Schedules of the centralized barrier flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CentralSection {
    #[serde(default = "one")]
    pub penalty_initial: f64,
    #[serde(default)]
    pub penalty_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slack: Option<SlackConfig>,
}

impl Default for CentralSection {
    fn default() -> Self {
        CentralSection { penalty_initial: 1.0, penalty_rate: 0.0, slack: None }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub csv: bool,
    pub report: bool,
    /// Whitespace-separated `t E_x E_lambda zgs_residual` table.
    pub summary: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("out"), csv: true, report: true, summary: true }
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        RunConfig {
            seed: DEFAULT_SEED,
            t_end: None,
            mode: None,
            scenario: ScenarioSource { preset: Some(preset), ..Default::default() },
            protocol: ProtocolSection::default(),
            integrator: toml::Table::new(),
            central: None,
            output: OutputSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn family(&self) -> Family {
        self.protocol
            .family
            .or(self.scenario.preset.map(|p| p.default_family()))
            .unwrap_or(Family::Ptp)
    }

    pub fn set_family(&mut self, family: Family) {
        self.protocol.family = Some(family);
    }

    /// Override one integrator field.
    pub fn set_integrator<V: Into<toml::Value>>(&mut self, key: &str, value: V) {
        self.integrator.insert(key.to_string(), value.into());
    }

    fn mode(&self) -> Mode {
        self.mode
            .or(self.scenario.preset.map(|p| p.mode()))
            .unwrap_or_else(|| {
                let any_ineq = self
                    .scenario
                    .agents
                    .as_ref()
                    .is_some_and(|a| a.iter().any(|a| !a.inequalities.is_empty()));
                if any_ineq {
                    Mode::Barrier
                } else {
                    Mode::Equality
                }
            })
    }

    pub fn protocol_params(&self) -> Result<ProtocolParams> {
        let base = self.scenario.preset.map_or_else(ProtocolParams::default, |p| p.protocol_params());
        merge(&base, &self.protocol.params, "protocol")
    }

    pub fn integrator_settings(&self) -> Result<IntegratorSettings> {
        let base = self.scenario.preset.map_or_else(IntegratorSettings::default, |p| p.default_settings());
        merge(&base, &self.integrator, "integrator")
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
            .or(self.scenario.preset.map(|p| p.default_t_end()))
            .unwrap_or(5.0)
    }

    /// Copy with every default spelled out, so that running it reproduces
    /// the same output.
    pub fn effective(&self) -> Result<RunConfig> {
        let mut out = self.clone();
        out.t_end = Some(self.t_end());
        out.mode = Some(self.mode());
        out.protocol = ProtocolSection { family: Some(self.family()), params: to_table(&self.protocol_params()?)? };
        out.integrator = to_table(&self.integrator_settings()?)?;
        if out.mode == Some(Mode::Centralized) && out.central.is_none() {
            out.central = Some(CentralSection::default());
        }
        Ok(out)
    }

    pub fn network(&self) -> Result<Network> {
        match (&self.scenario.edges, &self.scenario.agents, self.scenario.preset) {
            (Some(edges), agents, preset) => {
                let n = match (agents, preset) {
                    (Some(a), _) => a.len(),
                    (None, Some(_)) => crate::presets::AGENTS,
                    (None, None) => return Err(Error::Config("edge list given without agents or preset".into())),
                };
                let mut list = Vec::with_capacity(edges.len());
                for &(i, j, w) in edges {
                    if i == 0 || j == 0 {
                        return Err(Error::Config(format!("edge [{i}, {j}]: node indices are one-based")));
                    }
                    list.push((i - 1, j - 1, w));
                }
                Network::new(n, list)
            }
            (None, Some(agents), _) => Network::circle(agents.len()),
            (None, None, Some(_)) => Network::circle(crate::presets::AGENTS),
            (None, None, None) => Err(Error::Config("scenario needs a preset or an agent list".into())),
        }
    }

    /// Local problems with their initial points.
    #[allow(clippy::type_complexity)]
    pub fn problems(&self) -> Result<(Vec<LocalProblem>, Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        match (&self.scenario.agents, self.scenario.preset) {
            (Some(_), Some(_)) => Err(Error::Config("give either a preset or an agent list, not both".into())),
            (None, Some(p)) => {
                let problems = p.problems(self.seed)?;
                let x0 = vec![DVector::zeros(crate::presets::DIM); problems.len()];
                let l0 = problems.iter().map(|p| DVector::zeros(p.dual_dim())).collect();
                Ok((problems, x0, l0))
            }
            (Some(agents), None) => {
                let mut problems = Vec::new();
                let mut x0 = Vec::new();
                let mut l0 = Vec::new();
                for (i, a) in agents.iter().enumerate() {
                    let p = a.build().map_err(|e| match e {
                        Error::InvalidInput(m) | Error::Config(m) => Error::Config(format!("agent {}: {m}", i + 1)),
                        other => other,
                    })?;
                    x0.push(vector_or_zero(&a.x0, p.dim(), i, "x0")?);
                    l0.push(vector_or_zero(&a.lambda0, p.dual_dim(), i, "lambda0")?);
                    problems.push(p);
                }
                Ok((problems, x0, l0))
            }
            (None, None) => Err(Error::Config("scenario needs a preset or an agent list".into())),
        }
    }

    pub fn build_scenario(&self) -> Result<Scenario> {
        let network = self.network()?;
        let (problems, x0, lambda0) = self.problems()?;
        let protocol = ProtocolSpec::from_params(self.family(), &network, &self.protocol_params()?)?;
        let mode = self.mode();
        let central = match mode {
            Mode::Centralized => {
                let c = self.central.clone().unwrap_or_default();
                Some(CentralSetup {
                    penalty: PenaltySchedule::new(c.penalty_initial, c.penalty_rate)?,
                    slack: c.slack.map_or(Ok(SlackSchedule::zero()), |s| s.schedule())?,
                })
            }
            _ => None,
        };
        let sc = Scenario {
            network,
            problems,
            protocol,
            mode,
            t_end: self.t_end(),
            settings: self.integrator_settings()?,
            x0,
            lambda0,
            central,
        };
        sc.validate()?;
        Ok(sc)
    }
}

impl AgentConfig {
    fn build(&self) -> Result<LocalProblem> {
        let cost: Arc<dyn SmoothFunction> = match &self.cost {
            CostConfig::Quadratic { q, c, k } => Arc::new(Quadratic::new(matrix(q, c.len())?, DVector::from_vec(c.clone()), *k)?),
            CostConfig::QuadraticCosine { shift, w } => Arc::new(QuadraticCosine::new(*shift, DVector::from_vec(w.clone()))?),
        };
        let n = cost.dim();
        let eq = if self.a.is_empty() && self.b.is_empty() {
            EqualityConstraint::none(n)
        } else {
            EqualityConstraint::new(matrix(&self.a, n)?, DVector::from_vec(self.b.clone()))?
        };
        let ineq = if self.inequalities.is_empty() {
            None
        } else {
            let mut gs: Vec<Arc<dyn SmoothFunction>> = Vec::new();
            for g in &self.inequalities {
                if g.d.len() != n {
                    return Err(Error::Config(format!("inequality has {} coefficients, expected {n}", g.d.len())));
                }
                gs.push(Arc::new(Affine::new(DVector::from_vec(g.d.clone()), g.e)));
            }
            let barrier = self
                .barrier
                .ok_or_else(|| Error::Config("inequalities need a barrier parameter".into()))?;
            let slack = self.slack.map_or(Ok(SlackSchedule::zero()), |s| s.schedule())?;
            Some(InequalityBlock::new(gs, barrier, slack)?)
        };
        LocalProblem::new(cost, eq, ineq)
    }
}

fn matrix(rows: &[Vec<f64>], cols: usize) -> Result<DMatrix<f64>> {
    if let Some(r) = rows.iter().find(|r| r.len() != cols) {
        return Err(Error::Config(format!("matrix row has {} entries, expected {cols}", r.len())));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), cols, rows.iter().flatten().cloned()))
}

fn vector_or_zero(v: &Option<Vec<f64>>, len: usize, agent: usize, what: &str) -> Result<DVector<f64>> {
    match v {
        None => Ok(DVector::zeros(len)),
        Some(v) if v.len() == len => Ok(DVector::from_vec(v.clone())),
        Some(v) => Err(Error::Config(format!(
            "agent {}: {what} has {} entries, expected {len}",
            agent + 1,
            v.len()
        ))),
    }
}

fn to_table<T: Serialize>(v: &T) -> Result<toml::Table> {
    toml::Table::try_from(v).map_err(|e| Error::Config(e.to_string()))
}

fn merge<T: Serialize + DeserializeOwned>(base: &T, overrides: &toml::Table, section: &str) -> Result<T> {
    let base = to_table(base)?;
    let apply = |keys: &mut dyn Iterator<Item = (&String, &toml::Value)>| -> std::result::Result<T, toml::de::Error> {
        let mut table = base.clone();
        for (k, v) in keys {
            table.insert(k.clone(), v.clone());
        }
        table.try_into()
    };
    apply(&mut overrides.iter()).map_err(|e| {
        let culprit = overrides.iter().find(|kv| apply(&mut std::iter::once(*kv)).is_err());
        match culprit {
            Some((k, _)) => Error::Config(format!("[{section}] {k}: {}", e.message())),
            None => Error::Config(format!("[{section}] {}", e.message())),
        }
    })
}
