//! Built-in benchmark scenarios.
//!
//! Both presets use six agents on a unit-weight ring, decision variables in
//! `R⁷`, costs `f_i(x) = ‖x‖² - i·1ᵀx + cos(w_iᵀx / 2)` with `w_i` drawn
//! uniformly from `[0, 1)⁷`, and one scalar equality per agent. The second
//! preset adds `1ᵀx - x_i - (1 + (i-1)/10) <= 0` at agent `i`.

use crate::dynamics::{Mode, Scenario};
use crate::error::{Error, Result};
use crate::graph::Network;
use crate::integrator::{IntegratorSettings, Method};
use crate::problem::{Affine, EqualityConstraint, InequalityBlock, LocalProblem, QuadraticCosine, SlackSchedule, SmoothFunction};
use crate::protocols::{Family, ProtocolParams, ProtocolSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

pub const AGENTS: usize = 6;
pub const DIM: usize = 7;
pub const DEFAULT_SEED: u64 = 42;
/// Barrier parameter of the inequality preset.
pub const CASE2_BARRIER: f64 = 1000.0;

pub const CASE1_A: [[f64; DIM]; AGENTS] = [
    [0.0, 1.0, 2.0, 3.0, 3.0, -1.0, 2.0],
    [1.0, 0.0, 2.0, -1.0, 2.0, 1.0, 2.0],
    [0.0, 1.0, 2.0, 0.0, -1.0, -1.0, 0.0],
    [2.0, -1.0, 2.0, 1.0, -1.0, 2.0, 3.0],
    [1.0, 1.0, 3.0, 0.0, 2.0, 3.0, 0.0],
    [2.0, 3.0, 2.0, -1.0, 0.0, -1.0, -1.0],
];

pub const CASE1_B: [f64; AGENTS] = [-1.0, 2.0, 2.0, 2.0, 2.0, 3.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "case1_equality")]
    Case1Equality,
    #[serde(rename = "case2_inequality")]
    Case2Inequality,
}

impl Preset {
    pub const ALL: [Preset; 2] = [Preset::Case1Equality, Preset::Case2Inequality];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Case1Equality => "case1_equality",
            Preset::Case2Inequality => "case2_inequality",
        }
    }

    pub fn default_family(&self) -> Family {
        Family::Ptp
    }

    pub fn mode(&self) -> Mode {
        match self {
            Preset::Case1Equality => Mode::Equality,
            Preset::Case2Inequality => Mode::Barrier,
        }
    }

    /// Table parameters; the inequality preset raises `κ` to 20 and sets
    /// the linear gain to match.
    pub fn protocol_params(&self) -> ProtocolParams {
        match self {
            Preset::Case1Equality => ProtocolParams::default(),
            Preset::Case2Inequality => ProtocolParams { c0: 20.0, kappa: 20.0, ..Default::default() },
        }
    }

    pub fn default_t_end(&self) -> f64 {
        match self {
            Preset::Case1Equality => 8.0,
            Preset::Case2Inequality => 10.0,
        }
    }

    pub fn default_settings(&self) -> IntegratorSettings {
        match self {
            Preset::Case1Equality => IntegratorSettings::default(),
            Preset::Case2Inequality => IntegratorSettings { method: Method::Rk45Adaptive, ..Default::default() },
        }
    }

    pub fn problems(&self, seed: u64) -> Result<Vec<LocalProblem>> {
        match self {
            Preset::Case1Equality => case1_problems(seed),
            Preset::Case2Inequality => case2_problems(seed),
        }
    }

    /// Scenario with defaults for the given family and seed.
    pub fn scenario(&self, family: Family, seed: u64) -> Result<Scenario> {
        let network = Network::circle(AGENTS)?;
        let protocol = ProtocolSpec::from_params(family, &network, &self.protocol_params())?;
        let problems = self.problems(seed)?;
        let sc = Scenario {
            x0: vec![DVector::zeros(DIM); AGENTS],
            lambda0: problems.iter().map(|p| DVector::zeros(p.dual_dim())).collect(),
            network,
            problems,
            protocol,
            mode: self.mode(),
            t_end: self.default_t_end(),
            settings: self.default_settings(),
            central: None,
        };
        sc.validate()?;
        Ok(sc)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .iter()
            .find(|p| p.name() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown preset '{s}'")))
    }
}

/// Cost weights `w_1, ..., w_N`, each uniform on `[0, 1)^n`, from one stream.
pub fn cost_weights(seed: u64, agents: usize, n: usize) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..agents)
        .map(|_| DVector::from_fn(n, |_, _| rng.random::<f64>()))
        .collect()
}

fn case1_problems(seed: u64) -> Result<Vec<LocalProblem>> {
    cost_weights(seed, AGENTS, DIM)
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            let cost: Arc<dyn SmoothFunction> = Arc::new(QuadraticCosine::new((i + 1) as f64, w)?);
            let a = DMatrix::from_row_slice(1, DIM, &CASE1_A[i]);
            let eq = EqualityConstraint::new(a, DVector::from_element(1, CASE1_B[i]))?;
            LocalProblem::new(cost, eq, None)
        })
        .collect()
}

/// `1ᵀx - x_i - (1 + (i-1)/10)` for zero-based agent `i`.
pub fn case2_constraint(i: usize) -> Affine {
    let mut d = DVector::from_element(DIM, 1.0);
    d[i] = 0.0;
    Affine::new(d, 1.0 + i as f64 / 10.0)
}

fn case2_problems(seed: u64) -> Result<Vec<LocalProblem>> {
    case1_problems(seed)?
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let g: Arc<dyn SmoothFunction> = Arc::new(case2_constraint(i));
            let blk = InequalityBlock::new(vec![g], CASE2_BARRIER, SlackSchedule::zero())?;
            LocalProblem::new(p.cost, p.eq, Some(blk))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_are_reproducible_and_in_range() {
        let a = cost_weights(42, 6, 7);
        let b = cost_weights(42, 6, 7);
        assert_eq!(a, b);
        assert!(a.iter().all(|w| w.iter().all(|&v| (0.0..1.0).contains(&v))));
        assert_ne!(a, cost_weights(43, 6, 7));
    }

    #[test]
    fn presets_build() {
        for p in Preset::ALL {
            for f in Family::ALL {
                let sc = p.scenario(f, DEFAULT_SEED).unwrap();
                assert_eq!(sc.agent_count(), 6);
                assert_eq!(sc.dim(), 7);
                sc.initial_state().unwrap();
            }
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
    }

    #[test]
    fn case2_constraint_shape() {
        let g = case2_constraint(3);
        let x = DVector::from_element(DIM, 1.0);
        // 1ᵀx - x_4 - 1.3 = 7 - 1 - 1.3
        assert!((g.value(&x) - 4.7).abs() < 1e-15);
    }
}
