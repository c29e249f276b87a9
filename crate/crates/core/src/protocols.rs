//! Drive laws `g_i(y_i, t)` and coupling laws `χ_ij(x_i - x_j, t)`.
//!
//! Four families are supported: linear (LP), finite-time (FTP),
//! fixed-time (FxTP) and prescribed-time (PTP).

use crate::error::{Error, Result};
use crate::graph::Network;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Relative guard `ε_T / T` before a prescribed horizon.
pub const PT_GUARD_REL: f64 = 1e-9;

/// Signed power `|v|^α sgn(v)`, with `sgn^α(0) = 0` for every `α >= 0`.
pub fn sgn_pow_scalar(v: f64, alpha: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else if alpha == 0.0 {
        v.signum()
    } else if alpha == 1.0 {
        v
    } else {
        v.signum() * v.abs().powf(alpha)
    }
}

/// Component-wise signed power with a common exponent.
pub fn sgn_pow(v: &DVector<f64>, alpha: f64) -> DVector<f64> {
    v.map(|c| sgn_pow_scalar(c, alpha))
}

/// Component-wise signed power with per-component exponents.
pub fn sgn_pow_each(v: &DVector<f64>, alpha: &[f64]) -> DVector<f64> {
    assert_eq!(v.len(), alpha.len(), "exponent vector length mismatch");
    DVector::from_fn(v.len(), |k, _| sgn_pow_scalar(v[k], alpha[k]))
}

/// Linear boundary layer for fractional signed powers.
///
/// A term `a·sgn^α(v)` with `α < 1` is replaced on `|v| < δ` by the chord
/// `a·v·δ^(α-1)`, where `δ = (step·a·factor)^(1/(1-α))`. The substitute is odd
/// and monotone, so antisymmetry and passivity of the coupling survive, and it
/// removes the step-size chattering of explicit schemes near the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryLayer {
    pub step: f64,
    pub factor: f64,
}

impl BoundaryLayer {
    pub fn width(&self, gain: f64, alpha: f64) -> f64 {
        if alpha >= 1.0 {
            0.0
        } else {
            (self.step * gain * self.factor).powf(1.0 / (1.0 - alpha))
        }
    }

    /// `gain·sgn^α(v)` with the layer applied.
    pub fn term(&self, v: f64, gain: f64, alpha: f64) -> f64 {
        let d = self.width(gain, alpha);
        if v.abs() < d {
            gain * v * d.powf(alpha - 1.0)
        } else {
            gain * sgn_pow_scalar(v, alpha)
        }
    }
}

fn power_term(v: f64, gain: f64, alpha: f64, layer: Option<&BoundaryLayer>) -> f64 {
    match layer {
        Some(l) if alpha < 1.0 => l.term(v, gain, alpha),
        _ => gain * sgn_pow_scalar(v, alpha),
    }
}

/// Value of the time-base generator `μ(t; T) = (T / (T - t))^h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuValue {
    pub mu: f64,
    pub mu_dot: f64,
    /// `μ̇/μ = h / (T - t)`, clamped at `h / ε_T`.
    pub ratio: f64,
}

/// Time-base generator with horizon `T` and exponent `h > 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingFunction {
    pub horizon: f64,
    pub exponent: f64,
}

impl ScalingFunction {
    pub fn guard(&self) -> f64 {
        PT_GUARD_REL * self.horizon
    }

    /// Largest gain ratio ever returned, `h / ε_T`.
    pub fn max_ratio(&self) -> f64 {
        self.exponent / self.guard()
    }

    pub fn eval(&self, t: f64) -> MuValue {
        let (tt, h) = (self.horizon, self.exponent);
        if t >= tt {
            return MuValue { mu: 1.0, mu_dot: 0.0, ratio: 0.0 };
        }
        let gap = (tt - t).max(self.guard());
        let mu = (tt / gap).powf(h);
        let ratio = h / gap;
        MuValue { mu, mu_dot: mu * ratio, ratio }
    }
}

/// Free-function form of [`ScalingFunction::eval`].
pub fn mu_eval(t: f64, horizon: f64, exponent: f64) -> MuValue {
    ScalingFunction { horizon, exponent }.eval(t)
}

/// One drive or coupling law acting component-wise on a vector argument.
///
/// Coupling laws are additionally scaled by the edge weight `a_ij`.
#[derive(Debug, Clone, PartialEq)]
pub enum Law {
    /// `gain · v`.
    Linear { gain: f64 },
    /// `gain · (sgn^α(v) + sgn^β(v))`, the second term present for fixed-time laws.
    Power { gain: f64, alpha: f64, beta: Option<f64> },
    /// `(base + kappa · μ̇/μ(t)) · v`.
    Prescribed { base: f64, kappa: f64, scaling: ScalingFunction },
}

impl Law {
    pub fn eval(&self, v: &DVector<f64>, t: f64, weight: f64, layer: Option<&BoundaryLayer>) -> DVector<f64> {
        match *self {
            Law::Linear { gain } => v * (weight * gain),
            Law::Power { gain, alpha, beta } => {
                let g = weight * gain;
                v.map(|c| {
                    let mut out = power_term(c, g, alpha, layer);
                    if let Some(b) = beta {
                        out += g * sgn_pow_scalar(c, b);
                    }
                    out
                })
            }
            Law::Prescribed { base, kappa, scaling } => {
                v * (weight * (base + kappa * scaling.eval(t).ratio))
            }
        }
    }

    /// Time-varying part of the linear gain, used to bound the step size.
    pub fn time_gain(&self, t: f64) -> f64 {
        match *self {
            Law::Prescribed { kappa, scaling, .. } => kappa * scaling.eval(t).ratio,
            _ => 0.0,
        }
    }

    pub fn horizon(&self) -> Option<f64> {
        match *self {
            Law::Prescribed { scaling, .. } => Some(scaling.horizon),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "LP")]
    Lp,
    #[serde(rename = "FTP")]
    Ftp,
    #[serde(rename = "FxTP")]
    Fxtp,
    #[serde(rename = "PTP")]
    Ptp,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Lp, Family::Ftp, Family::Fxtp, Family::Ptp];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Lp => "LP",
            Family::Ftp => "FTP",
            Family::Fxtp => "FxTP",
            Family::Ptp => "PTP",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LP" => Ok(Family::Lp),
            "FTP" => Ok(Family::Ftp),
            "FXTP" => Ok(Family::Fxtp),
            "PTP" => Ok(Family::Ptp),
            _ => Err(Error::Config(format!("unknown protocol family '{s}'"))),
        }
    }
}

/// Exponent assignment `base + coef · v`, where `v` is the one-based agent
/// index, the smaller or the larger endpoint of an edge, or absent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentRule {
    pub base: f64,
    pub coef: f64,
    pub var: RuleVar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleVar {
    Constant,
    Agent,
    EdgeMin,
    EdgeMax,
}

impl ExponentRule {
    pub fn constant(v: f64) -> Self {
        ExponentRule { base: v, coef: 0.0, var: RuleVar::Constant }
    }

    /// Exponent of agent `i` (zero-based).
    pub fn agent(&self, i: usize) -> f64 {
        let k = (i + 1) as f64;
        match self.var {
            RuleVar::Constant => self.base,
            _ => self.base + self.coef * k,
        }
    }

    /// Exponent of edge `{i, j}` (zero-based endpoints).
    pub fn edge(&self, i: usize, j: usize) -> f64 {
        let (lo, hi) = ((i.min(j) + 1) as f64, (i.max(j) + 1) as f64);
        match self.var {
            RuleVar::Constant => self.base,
            RuleVar::Agent | RuleVar::EdgeMin => self.base + self.coef * lo,
            RuleVar::EdgeMax => self.base + self.coef * hi,
        }
    }
}

impl fmt::Display for ExponentRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let var = match self.var {
            RuleVar::Constant => return write!(f, "{}", self.base),
            RuleVar::Agent => "i",
            RuleVar::EdgeMin => "min(i,j)",
            RuleVar::EdgeMax => "max(i,j)",
        };
        if self.base != 0.0 {
            write!(f, "{}+", self.base)?;
        }
        write!(f, "{}*{}", self.coef, var)
    }
}

impl FromStr for ExponentRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse exponent rule '{s}'"));
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if let Ok(v) = compact.parse::<f64>() {
            return Ok(ExponentRule::constant(v));
        }
        let (base, term) = match compact.rfind('+') {
            Some(p) if p > 0 => (compact[..p].parse::<f64>().map_err(|_| bad())?, &compact[p + 1..]),
            _ => (0.0, compact.as_str()),
        };
        let (coef, var) = term.split_once('*').ok_or_else(bad)?;
        let coef = coef.parse::<f64>().map_err(|_| bad())?;
        let var = match var {
            "i" => RuleVar::Agent,
            "min(i,j)" => RuleVar::EdgeMin,
            "max(i,j)" => RuleVar::EdgeMax,
            _ => return Err(bad()),
        };
        Ok(ExponentRule { base, coef, var })
    }
}

impl Serialize for ExponentRule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ExponentRule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Scalar parameters from which a [`ProtocolSpec`] is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolParams {
    /// Linear gain of the LP family for both drive and coupling.
    pub c0: f64,
    /// Gain of the finite- and fixed-time families.
    pub gain: f64,
    /// Base linear gain `d` of the prescribed-time family.
    pub d: f64,
    /// Coupling amplification `κ` of the prescribed-time family.
    pub kappa: f64,
    /// Exponent `h` of the time-base generator.
    pub h: f64,
    /// Drive horizon `T0`.
    pub t0: f64,
    /// Consensus horizon `T`.
    pub t: f64,
    /// Coupling scale `k0`.
    pub k0: f64,
    pub alpha_agent: ExponentRule,
    pub beta_agent: ExponentRule,
    pub alpha_edge: ExponentRule,
    pub beta_edge: ExponentRule,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            c0: 20.0,
            gain: 5.0,
            d: 5.0,
            kappa: 10.0,
            h: 3.0,
            t0: 0.5,
            t: 1.0,
            k0: 1.0,
            alpha_agent: ExponentRule { base: 0.0, coef: 0.1, var: RuleVar::Agent },
            beta_agent: ExponentRule { base: 1.0, coef: 0.1, var: RuleVar::Agent },
            alpha_edge: ExponentRule { base: 0.0, coef: 0.1, var: RuleVar::EdgeMin },
            beta_edge: ExponentRule { base: 1.0, coef: 0.1, var: RuleVar::EdgeMin },
        }
    }
}

/// Fully expanded protocol: one drive law per agent, one coupling law per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSpec {
    pub family: Family,
    pub k0: f64,
    pub drive: Vec<Law>,
    /// Indexed like [`Network::edges`].
    pub coupling: Vec<Law>,
}

impl ProtocolSpec {
    pub fn from_params(family: Family, net: &Network, p: &ProtocolParams) -> Result<Self> {
        let n = net.node_count();
        let (drive, coupling): (Vec<Law>, Vec<Law>) = match family {
            Family::Lp => (
                vec![Law::Linear { gain: p.c0 }; n],
                vec![Law::Linear { gain: p.c0 }; net.edge_count()],
            ),
            Family::Ftp | Family::Fxtp => {
                let fx = family == Family::Fxtp;
                let drive = (0..n)
                    .map(|i| Law::Power {
                        gain: p.gain,
                        alpha: p.alpha_agent.agent(i),
                        beta: fx.then(|| p.beta_agent.agent(i)),
                    })
                    .collect();
                let coupling = net
                    .edges()
                    .iter()
                    .map(|e| Law::Power {
                        gain: p.gain,
                        alpha: p.alpha_edge.edge(e.i, e.j),
                        beta: fx.then(|| p.beta_edge.edge(e.i, e.j)),
                    })
                    .collect();
                (drive, coupling)
            }
            Family::Ptp => {
                let drive = Law::Prescribed {
                    base: p.d,
                    kappa: 1.0,
                    scaling: ScalingFunction { horizon: p.t0, exponent: p.h },
                };
                let coupling = Law::Prescribed {
                    base: p.d,
                    kappa: p.kappa,
                    scaling: ScalingFunction { horizon: p.t, exponent: p.h },
                };
                (vec![drive; n], vec![coupling; net.edge_count()])
            }
        };
        let spec = ProtocolSpec { family, k0: p.k0, drive, coupling };
        spec.validate(net)?;
        Ok(spec)
    }

    /// Check family consistency and parameter ranges against a network.
    pub fn validate(&self, net: &Network) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.drive.len() != net.node_count() || self.coupling.len() != net.edge_count() {
            return bad(format!(
                "protocol has {} drive and {} coupling laws for {} nodes and {} edges",
                self.drive.len(),
                self.coupling.len(),
                net.node_count(),
                net.edge_count()
            ));
        }
        if !(self.k0 > 0.0) {
            return bad(format!("coupling scale k0 = {} must be positive", self.k0));
        }
        let mut ptp_drive_horizon = None;
        for (k, law) in self.drive.iter().chain(self.coupling.iter()).enumerate() {
            let is_drive = k < self.drive.len();
            let what = if is_drive { "drive" } else { "coupling" };
            match (self.family, law) {
                (Family::Lp, Law::Linear { gain }) if *gain > 0.0 => {}
                (Family::Ftp | Family::Fxtp, Law::Power { gain, alpha, beta }) => {
                    if !(*gain > 0.0) {
                        return bad(format!("{what} gain must be positive"));
                    }
                    let alpha_ok = if is_drive {
                        (0.0..1.0).contains(alpha)
                    } else {
                        (0.0..=1.0).contains(alpha)
                    };
                    if !alpha_ok {
                        return bad(format!("{what} exponent α = {alpha} out of range"));
                    }
                    match (self.family, beta) {
                        (Family::Ftp, None) => {}
                        (Family::Fxtp, Some(b)) if *b > 1.0 => {}
                        _ => return bad(format!("{what} exponent β = {beta:?} inconsistent with {}", self.family)),
                    }
                }
                (Family::Ptp, Law::Prescribed { base, kappa, scaling }) => {
                    if !(*base > 0.0) || !(*kappa > 0.0) {
                        return bad(format!("{what} gains must be positive"));
                    }
                    if !(scaling.exponent > 1.0) || !(scaling.horizon > 0.0) {
                        return bad(format!("{what} horizon and exponent must satisfy T > 0, h > 1"));
                    }
                    if is_drive {
                        ptp_drive_horizon = Some(scaling.horizon);
                    } else if let Some(t0) = ptp_drive_horizon {
                        if scaling.horizon < t0 {
                            return bad(format!(
                                "consensus horizon {} precedes drive horizon {t0}",
                                scaling.horizon
                            ));
                        }
                    }
                }
                _ => return bad(format!("{what} law {law:?} does not belong to {}", self.family)),
            }
        }
        Ok(())
    }

    /// Drive `g_i(y_i, t)`.
    pub fn drive(&self, i: usize, y: &DVector<f64>, t: f64) -> DVector<f64> {
        self.drive[i].eval(y, t, 1.0, None)
    }

    pub fn drive_layered(&self, i: usize, y: &DVector<f64>, t: f64, layer: Option<&BoundaryLayer>) -> DVector<f64> {
        self.drive[i].eval(y, t, 1.0, layer)
    }

    /// Coupling `χ_ij(x_i - x_j, t)` on edge `edge` with weight `a_ij`.
    pub fn coupling(&self, edge: usize, weight: f64, xi: &DVector<f64>, xj: &DVector<f64>, t: f64) -> DVector<f64> {
        self.coupling[edge].eval(&(xi - xj), t, weight, None)
    }

    pub fn coupling_layered(
        &self,
        edge: usize,
        weight: f64,
        xi: &DVector<f64>,
        xj: &DVector<f64>,
        t: f64,
        layer: Option<&BoundaryLayer>,
    ) -> DVector<f64> {
        self.coupling[edge].eval(&(xi - xj), t, weight, layer)
    }

    /// Largest time-varying linear gain at `t`, scaled by edge weights.
    pub fn time_varying_gain(&self, net: &Network, t: f64) -> f64 {
        let d = self.drive.iter().map(|l| l.time_gain(t)).fold(0.0, f64::max);
        let c = self
            .coupling
            .iter()
            .zip(net.edges())
            .map(|(l, e)| self.k0 * e.weight * l.time_gain(t))
            .fold(0.0, f64::max);
        d.max(c)
    }

    /// Sorted prescribed horizons.
    pub fn horizons(&self) -> Vec<f64> {
        let mut h: Vec<f64> = self
            .drive
            .iter()
            .chain(self.coupling.iter())
            .filter_map(Law::horizon)
            .collect();
        h.sort_by(|a, b| a.partial_cmp(b).unwrap());
        h.dedup();
        h
    }

    /// Consensus horizon `T` of a prescribed-time protocol.
    pub fn consensus_horizon(&self) -> Option<f64> {
        self.coupling.iter().filter_map(Law::horizon).reduce(f64::max)
    }

    /// Drive horizon `T0` of a prescribed-time protocol.
    pub fn drive_horizon(&self) -> Option<f64> {
        self.drive.iter().filter_map(Law::horizon).reduce(f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ring() -> Network {
        Network::circle(6).unwrap()
    }

    #[test]
    fn sgn_pow_examples() {
        let v = DVector::from_vec(vec![-4.0, 0.0, 9.0]);
        assert_eq!(sgn_pow(&v, 0.5), DVector::from_vec(vec![-2.0, 0.0, 3.0]));
        assert_eq!(sgn_pow(&v, 0.0), DVector::from_vec(vec![-1.0, 0.0, 1.0]));
        assert_eq!(sgn_pow(&v, 1.0), v);
        let e = sgn_pow_each(&v, &[1.0, 0.3, 2.0]);
        assert_eq!(e, DVector::from_vec(vec![-4.0, 0.0, 81.0]));
    }

    #[test]
    fn mu_examples() {
        let m = mu_eval(0.5, 1.0, 3.0);
        assert!((m.mu - 8.0).abs() < 1e-12);
        assert!((m.ratio - 6.0).abs() < 1e-12);
        assert!((m.mu_dot - 48.0).abs() < 1e-9);
        let m = mu_eval(0.0, 1.0, 3.0);
        assert!((m.mu - 1.0).abs() < 1e-15 && (m.ratio - 3.0).abs() < 1e-15);
        let past = mu_eval(1.5, 1.0, 3.0);
        assert_eq!(past.ratio, 0.0);
        let near = mu_eval(1.0 - 1e-13, 1.0, 3.0);
        assert!((near.ratio - 3.0 / 1e-9).abs() < 1.0);
    }

    #[test]
    fn table_parameters() {
        let net = ring();
        let p = ProtocolParams::default();
        let f = ProtocolSpec::from_params(Family::Fxtp, &net, &p).unwrap();
        match f.drive[2] {
            Law::Power { gain, alpha, beta } => {
                assert_eq!(gain, 5.0);
                assert!((alpha - 0.3).abs() < 1e-15);
                assert!((beta.unwrap() - 1.3).abs() < 1e-15);
            }
            _ => panic!(),
        }
        // edge {0, 5} has min one-based index 1
        let k = net.edges().iter().position(|e| e.i == 0 && e.j == 5).unwrap();
        match f.coupling[k] {
            Law::Power { alpha, .. } => assert!((alpha - 0.1).abs() < 1e-15),
            _ => panic!(),
        }
        let ptp = ProtocolSpec::from_params(Family::Ptp, &net, &p).unwrap();
        assert_eq!(ptp.horizons(), vec![0.5, 1.0]);
        let y = DVector::from_vec(vec![1.0, -2.0]);
        assert_eq!(ptp.drive(0, &y, 0.0), &y * (5.0 + 6.0));
        let c = ptp.coupling(0, 1.0, &y, &DVector::zeros(2), 0.5);
        assert!((c - &y * (5.0 + 10.0 * 6.0)).abs().max() < 1e-12);
        let lp = ProtocolSpec::from_params(Family::Lp, &net, &p).unwrap();
        assert_eq!(lp.drive(0, &y, 3.0), &y * 20.0);
    }

    #[test]
    fn family_consistency() {
        let net = ring();
        let p = ProtocolParams { beta_agent: ExponentRule::constant(0.9), ..Default::default() };
        assert!(ProtocolSpec::from_params(Family::Fxtp, &net, &p).is_err());
        assert!(ProtocolSpec::from_params(Family::Ftp, &net, &p).is_ok());
        let p = ProtocolParams { alpha_agent: ExponentRule::constant(1.0), ..Default::default() };
        assert!(ProtocolSpec::from_params(Family::Ftp, &net, &p).is_err());
        let p = ProtocolParams { t: 0.2, ..Default::default() };
        assert!(ProtocolSpec::from_params(Family::Ptp, &net, &p).is_err());
        let mut spec = ProtocolSpec::from_params(Family::Lp, &net, &ProtocolParams::default()).unwrap();
        spec.drive[0] = Law::Prescribed {
            base: 1.0,
            kappa: 1.0,
            scaling: ScalingFunction { horizon: 1.0, exponent: 2.0 },
        };
        assert!(spec.validate(&net).is_err());
    }

    #[test]
    fn exponent_rule_roundtrip() {
        for s in ["0.1*i", "1+0.1*i", "0.1*min(i,j)", "1+0.1*min(i,j)", "0.3", "2+0.5*max(i,j)"] {
            let r: ExponentRule = s.parse().unwrap();
            let back: ExponentRule = r.to_string().parse().unwrap();
            assert_eq!(r, back);
        }
        assert!("0.1*k".parse::<ExponentRule>().is_err());
        let r: ExponentRule = "1+0.1*min(i,j)".parse().unwrap();
        assert!((r.edge(4, 2) - 1.3).abs() < 1e-15);
    }

    #[test]
    fn boundary_layer_matches_outside_and_is_continuous() {
        let l = BoundaryLayer { step: 1e-3, factor: 1.5 };
        let (g, a) = (5.0, 0.3);
        let d = l.width(g, a);
        for &v in &[2.0 * d, 10.0 * d, 1.0, -3.0] {
            assert_eq!(l.term(v, g, a), g * sgn_pow_scalar(v, a));
        }
        let inside = l.term(d * (1.0 - 1e-12), g, a);
        let outside = g * sgn_pow_scalar(d, a);
        assert!((inside - outside).abs() < 1e-9 * outside.abs());
        assert_eq!(l.term(0.0, g, 0.0), 0.0);
    }

    fn laws() -> impl Strategy<Value = Law> {
        prop_oneof![
            (0.1f64..30.0).prop_map(|gain| Law::Linear { gain }),
            (0.1f64..10.0, 0.0f64..1.0, proptest::option::of(1.0001f64..3.0))
                .prop_map(|(gain, alpha, beta)| Law::Power { gain, alpha, beta }),
            (0.1f64..10.0, 0.1f64..20.0, 0.2f64..2.0, 1.1f64..4.0).prop_map(|(base, kappa, horizon, exponent)| {
                Law::Prescribed { base, kappa, scaling: ScalingFunction { horizon, exponent } }
            }),
        ]
    }

    proptest! {
        #[test]
        fn sgn_pow_is_odd_and_passive(v in -1e3f64..1e3, a in 0.0f64..3.0) {
            prop_assert_eq!(sgn_pow_scalar(-v, a), -sgn_pow_scalar(v, a));
            prop_assert!(v * sgn_pow_scalar(v, a) >= 0.0);
        }

        #[test]
        fn coupling_antisymmetric_and_passive(
            law in laws(),
            u in proptest::collection::vec(-5.0f64..5.0, 3),
            v in proptest::collection::vec(-5.0f64..5.0, 3),
            t in 0.0f64..3.0,
            w in 0.1f64..3.0,
            layered in any::<bool>(),
        ) {
            let layer = BoundaryLayer { step: 1e-3, factor: 1.5 };
            let layer = layered.then_some(&layer);
            let u = DVector::from_vec(u);
            let v = DVector::from_vec(v);
            let fwd = law.eval(&(&u - &v), t, w, layer);
            let bwd = law.eval(&(&v - &u), t, w, layer);
            prop_assert!((&fwd + &bwd).abs().max() <= 1e-12 * (1.0 + fwd.abs().max()));
            prop_assert!((&u - &v).dot(&fwd) >= 0.0);
            let zero = law.eval(&DVector::zeros(3), t, w, layer);
            prop_assert_eq!(zero, DVector::zeros(3));
        }

        #[test]
        fn drive_zero_only_at_zero(law in laws(), y in proptest::collection::vec(-5.0f64..5.0, 3), t in 0.0f64..3.0) {
            let y = DVector::from_vec(y);
            let g = law.eval(&y, t, 1.0, None);
            for k in 0..3 {
                prop_assert_eq!(g[k] == 0.0, y[k] == 0.0);
                prop_assert!(g[k] * y[k] >= 0.0);
            }
        }
    }
}
