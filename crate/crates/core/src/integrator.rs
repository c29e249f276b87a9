//! Explicit Runge–Kutta integration with sampling and horizon guards.
//!
//! Steps are clipped so that they land exactly on output sample times.
//! For systems with prescribed horizons `T`, steps stop at `T - ε_T` and the
//! integration resumes from `T`; the dynamics are continuous there, so the
//! skipped interval of length `ε_T` contributes no state change beyond
//! roundoff.

use crate::error::{Error, Result};
use crate::protocols::PT_GUARD_REL;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// A first-order system `ẏ = F(t, y)` on a flat state vector.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()>;

    /// Reject states outside the domain of the vector field.
    fn admissible(&self, _t: f64, _y: &[f64]) -> Result<()> {
        Ok(())
    }

    /// Stability bound on the step size at time `t`.
    fn max_step(&self, _t: f64) -> f64 {
        f64::INFINITY
    }

    /// Prescribed horizons that steps must not straddle.
    fn horizons(&self) -> Vec<f64> {
        Vec::new()
    }

    /// Residual of a quantity the exact flow conserves at zero.
    fn invariant(&self, _t: f64, _y: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "rk4_fixed")]
    Rk4Fixed,
    #[serde(rename = "rk45_adaptive")]
    Rk45Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorSettings {
    pub method: Method,
    /// Fixed step, or the largest step in adaptive mode.
    pub dt: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub sample_interval: f64,
    pub max_steps: usize,
    /// Smallest step before [`Error::StepUnderflow`].
    pub dt_min: f64,
    /// Boundary-layer factor for fractional signed powers; zero disables it.
    pub boundary_layer: f64,
    /// Product of step size and time-varying gain allowed per step.
    pub gain_step_fraction: f64,
    /// Largest max-norm change of the state per step, estimated from the
    /// first stage; zero disables the cap.
    pub max_displacement: f64,
    /// Track a local-error estimate of the conserved identity.
    pub estimate_error: bool,
    /// Stop once the vector field max-norm drops below this value; zero disables.
    pub settle_tol: f64,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        IntegratorSettings {
            method: Method::Rk4Fixed,
            dt: 1e-3,
            abs_tol: 1e-12,
            rel_tol: 1e-10,
            sample_interval: 0.01,
            max_steps: 50_000_000,
            dt_min: 1e-12,
            boundary_layer: 1.5,
            gain_step_fraction: 0.1,
            max_displacement: 0.02,
            estimate_error: true,
            settle_tol: 0.0,
        }
    }
}

impl IntegratorSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("integrator: {m}")));
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad("dt must be positive");
        }
        if !(self.sample_interval > 0.0) {
            return bad("sample_interval must be positive");
        }
        if !(self.dt_min > 0.0) || self.dt_min > self.dt {
            return bad("dt_min must lie in (0, dt]");
        }
        if !(self.abs_tol > 0.0) || !(self.rel_tol >= 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.boundary_layer >= 0.0) {
            return bad("boundary_layer must be non-negative");
        }
        if !(self.gain_step_fraction > 0.0) {
            return bad("gain_step_fraction must be positive");
        }
        if !(self.max_displacement >= 0.0) {
            return bad("max_displacement must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    Horizon,
    Settled { t: f64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IntegrationStats {
    pub accepted: usize,
    pub rejected: usize,
    pub domain_halvings: usize,
    pub rhs_evals: usize,
    pub horizon_jumps: usize,
}

/// Sampled solution of an [`OdeSystem`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Accumulated local-error estimate of the conserved identity at each sample.
    pub identity_error_bound: Vec<f64>,
    /// Named metric columns aligned with `times`.
    pub metrics: Vec<(String, Vec<f64>)>,
    pub termination: Termination,
    pub stats: IntegrationStats,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn metric(&self, name: &str) -> Option<&[f64]> {
        self.metrics
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn set_metric(&mut self, name: &str, values: Vec<f64>) {
        assert_eq!(values.len(), self.times.len(), "metric length mismatch");
        match self.metrics.iter_mut().find(|(n, _)| n == name) {
            Some((_, v)) => *v = values,
            None => self.metrics.push((name.to_string(), values)),
        }
    }

    /// Index of the sample closest to `t`.
    pub fn index_at(&self, t: f64) -> Option<usize> {
        self.times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().partial_cmp(&(b.1 - t).abs()).unwrap())
            .map(|(k, _)| k)
    }

    /// Write samples as CSV: `t`, the selected state entries, then every metric.
    ///
    /// `columns` pairs a header name with an index into the flat state.
    /// Lines in `comments` are emitted first, each prefixed with `# `.
    pub fn write_csv<W: Write>(&self, mut w: W, columns: &[(String, usize)], comments: &[String]) -> Result<()> {
        for c in comments {
            writeln!(w, "# {c}")?;
        }
        let mut header = vec!["t".to_string()];
        header.extend(columns.iter().map(|(n, _)| n.clone()));
        header.extend(self.metrics.iter().map(|(n, _)| n.clone()));
        writeln!(w, "{}", header.join(","))?;
        for (k, t) in self.times.iter().enumerate() {
            let mut row = Vec::with_capacity(header.len());
            row.push(fmt_float(*t));
            for (_, idx) in columns {
                row.push(fmt_float(self.states[k][*idx]));
            }
            for (_, v) in &self.metrics {
                row.push(fmt_float(v[k]));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Round-trip float formatting with 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// First sample time `τ` such that the metric stays at or below `tol` on
/// `[τ, τ + hold]`. The window must lie inside the sampled range.
pub fn settling_time(traj: &Trajectory, metric: &str, tol: f64, hold: f64) -> Option<f64> {
    let values = traj.metric(metric)?;
    settling_time_of(&traj.times, values, tol, hold)
}

/// [`settling_time`] on raw columns.
pub fn settling_time_of(times: &[f64], values: &[f64], tol: f64, hold: f64) -> Option<f64> {
    let t_last = *times.last()?;
    let mut candidate: Option<usize> = None;
    for (k, &v) in values.iter().enumerate() {
        if v <= tol {
            if candidate.is_none() {
                candidate = Some(k);
            }
            let start = candidate.unwrap();
            if times[k] >= times[start] + hold - 1e-12 {
                return Some(times[start]);
            }
        } else {
            candidate = None;
        }
    }
    candidate
        .filter(|&s| times[s] + hold <= t_last + 1e-12)
        .map(|s| times[s])
}

struct Workspace {
    k: Vec<Vec<f64>>,
    tmp: Vec<f64>,
}

impl Workspace {
    fn new(n: usize, stages: usize) -> Self {
        Workspace { k: vec![vec![0.0; n]; stages], tmp: vec![0.0; n] }
    }
}

fn combine(out: &mut [f64], y: &[f64], h: f64, terms: &[(f64, &[f64])]) {
    for i in 0..y.len() {
        let mut s = 0.0;
        for (c, k) in terms {
            s += c * k[i];
        }
        out[i] = y[i] + h * s;
    }
}

/// `k1` is `F(t, y)` when the caller already has it.
fn first_stage<S: OdeSystem + ?Sized>(
    sys: &S,
    t: f64,
    y: &[f64],
    k1: Option<&[f64]>,
    out: &mut [f64],
    stats: &mut IntegrationStats,
) -> Result<()> {
    match k1 {
        Some(v) => out.copy_from_slice(v),
        None => {
            sys.rhs(t, y, out)?;
            stats.rhs_evals += 1;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn rk4_step<S: OdeSystem + ?Sized>(
    sys: &S,
    t: f64,
    y: &[f64],
    h: f64,
    k1: Option<&[f64]>,
    ws: &mut Workspace,
    out: &mut [f64],
    stats: &mut IntegrationStats,
) -> Result<()> {
    let (k, tmp) = (&mut ws.k, &mut ws.tmp);
    first_stage(sys, t, y, k1, &mut k[0], stats)?;
    combine(tmp, y, 0.5 * h, &[(1.0, &k[0])]);
    sys.rhs(t + 0.5 * h, tmp, &mut k[1])?;
    combine(tmp, y, 0.5 * h, &[(1.0, &k[1])]);
    sys.rhs(t + 0.5 * h, tmp, &mut k[2])?;
    combine(tmp, y, h, &[(1.0, &k[2])]);
    sys.rhs(t + h, tmp, &mut k[3])?;
    stats.rhs_evals += 3;
    combine(
        out,
        y,
        h / 6.0,
        &[(1.0, &k[0]), (2.0, &k[1]), (2.0, &k[2]), (1.0, &k[3])],
    );
    Ok(())
}

// Dormand–Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

#[allow(clippy::too_many_arguments)]
fn dp45_step<S: OdeSystem + ?Sized>(
    sys: &S,
    t: f64,
    y: &[f64],
    h: f64,
    k1: Option<&[f64]>,
    ws: &mut Workspace,
    y5: &mut [f64],
    y4: &mut [f64],
    stats: &mut IntegrationStats,
) -> Result<()> {
    let n = y.len();
    first_stage(sys, t, y, k1, &mut ws.k[0], stats)?;
    for s in 1..7 {
        for (i, (out, yi)) in ws.tmp.iter_mut().zip(y).enumerate() {
            let acc: f64 = DP_A[s][..s].iter().zip(&ws.k).map(|(a, k)| a * k[i]).sum();
            *out = yi + h * acc;
        }
        sys.rhs(t + DP_C[s] * h, &ws.tmp, &mut ws.k[s])?;
        stats.rhs_evals += 1;
    }
    for i in 0..n {
        let mut a5 = 0.0;
        let mut a4 = 0.0;
        for s in 0..7 {
            a5 += DP_B5[s] * ws.k[s][i];
            a4 += DP_B4[s] * ws.k[s][i];
        }
        y5[i] = y[i] + h * a5;
        y4[i] = y[i] + h * a4;
    }
    Ok(())
}

fn inv_gap<S: OdeSystem + ?Sized>(sys: &S, t: f64, a: &[f64], b: &[f64]) -> f64 {
    match (sys.invariant(t, a), sys.invariant(t, b)) {
        (Some(u), Some(v)) => u
            .iter()
            .zip(v.iter())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt(),
        _ => 0.0,
    }
}

fn rounding_floor(y: &[f64]) -> f64 {
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    f64::EPSILON * (1.0 + scale) * (y.len() as f64).sqrt()
}

fn is_domain_error(e: &Error) -> bool {
    matches!(e, Error::DomainViolation { .. })
}

/// Integrate `sys` from `(t0, y0)` to `t_end`.
pub fn integrate_system<S: OdeSystem + ?Sized>(
    sys: &S,
    y0: &[f64],
    t0: f64,
    t_end: f64,
    settings: &IntegratorSettings,
) -> Result<Trajectory> {
    settings.validate()?;
    if y0.len() != sys.dim() {
        return Err(Error::InvalidInput(format!(
            "initial state has length {}, system dimension is {}",
            y0.len(),
            sys.dim()
        )));
    }
    if !(t_end >= t0) {
        return Err(Error::InvalidInput(format!("t_end = {t_end} precedes t0 = {t0}")));
    }
    sys.admissible(t0, y0)?;
    let n = y0.len();
    let tiny = |t: f64| 1e-12 * t.abs().max(1.0);
    let horizons: Vec<f64> = sys.horizons().into_iter().filter(|&h| h > t0).collect();

    let mut traj = Trajectory {
        times: vec![t0],
        states: vec![y0.to_vec()],
        identity_error_bound: vec![0.0],
        metrics: Vec::new(),
        termination: Termination::Horizon,
        stats: IntegrationStats::default(),
    };
    let sample_time = |k: usize| (t0 + k as f64 * settings.sample_interval).min(t_end);
    let mut next_k = 1usize;

    let mut ws = Workspace::new(n, 7);
    let mut y = y0.to_vec();
    let mut y_new = vec![0.0; n];
    let mut y_alt = vec![0.0; n];
    let mut y_half = vec![0.0; n];
    let mut k_start = vec![0.0; n];
    let mut t = t0;
    let mut err_acc = 0.0;
    let mut h_adapt = settings.dt;
    let mut steps = 0usize;

    while t < t_end - tiny(t_end) {
        // resume past a prescribed horizon once the guard point is reached
        if let Some(&hz) = horizons
            .iter()
            .find(|&&hz| t < hz && t >= hz - PT_GUARD_REL * hz - tiny(hz))
        {
            t = hz;
            traj.stats.horizon_jumps += 1;
        } else {
            let guard = horizons
                .iter()
                .map(|&hz| hz - PT_GUARD_REL * hz)
                .find(|&g| g > t)
                .unwrap_or(f64::INFINITY);
            let target = sample_time(next_k).min(t_end).min(guard);
            let base = match settings.method {
                Method::Rk4Fixed => settings.dt,
                Method::Rk45Adaptive => h_adapt.min(settings.dt),
            };
            sys.rhs(t, &y, &mut k_start)?;
            traj.stats.rhs_evals += 1;
            let mut h = base.min(sys.max_step(t));
            if settings.max_displacement > 0.0 {
                let speed = k_start.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if speed > 0.0 {
                    h = h.min(settings.max_displacement / speed);
                }
            }
            let mut h = h.min(target - t);
            loop {
                if h < settings.dt_min {
                    return Err(Error::StepUnderflow { t });
                }
                let attempt = match settings.method {
                    Method::Rk4Fixed => {
                        rk4_step(sys, t, &y, h, Some(&k_start), &mut ws, &mut y_new, &mut traj.stats).and_then(|_| {
                            sys.admissible(t + h, &y_new)?;
                            if settings.estimate_error {
                                rk4_step(sys, t, &y, 0.5 * h, Some(&k_start), &mut ws, &mut y_half, &mut traj.stats)?;
                                sys.admissible(t + 0.5 * h, &y_half)?;
                                rk4_step(sys, t + 0.5 * h, &y_half, 0.5 * h, None, &mut ws, &mut y_alt, &mut traj.stats)?;
                                Ok(inv_gap(sys, t + h, &y_new, &y_alt) * 16.0 / 15.0)
                            } else {
                                Ok(0.0)
                            }
                        })
                        .map(|e| (e, 1.0))
                    }
                    Method::Rk45Adaptive => {
                        dp45_step(sys, t, &y, h, Some(&k_start), &mut ws, &mut y_new, &mut y_alt, &mut traj.stats).and_then(|_| {
                            sys.admissible(t + h, &y_new)?;
                            let mut err: f64 = 0.0;
                            for i in 0..n {
                                let sc = settings.abs_tol
                                    + settings.rel_tol * y[i].abs().max(y_new[i].abs());
                                err = err.max((y_new[i] - y_alt[i]).abs() / sc);
                            }
                            let inv = if settings.estimate_error {
                                inv_gap(sys, t + h, &y_new, &y_alt)
                            } else {
                                0.0
                            };
                            Ok((inv, err))
                        })
                    }
                };
                match attempt {
                    Err(e) if is_domain_error(&e) => {
                        traj.stats.domain_halvings += 1;
                        h *= 0.5;
                        if settings.method == Method::Rk45Adaptive {
                            h_adapt = h;
                        }
                    }
                    Err(e) => return Err(e),
                    Ok((inv, err)) => {
                        if settings.method == Method::Rk45Adaptive {
                            let fac = if err == 0.0 { 5.0 } else { 0.9 * err.powf(-0.2) };
                            if err > 1.0 {
                                traj.stats.rejected += 1;
                                h *= fac.clamp(0.1, 0.9);
                                h_adapt = h;
                                continue;
                            }
                            // keep the controller memory when the step was clipped
                            if h >= 0.99 * h_adapt.min(settings.dt) {
                                h_adapt = (h * fac.clamp(1.0, 5.0)).min(settings.dt);
                            }
                        }
                        err_acc += inv + if settings.estimate_error { rounding_floor(&y_new) } else { 0.0 };
                        let t_next = t + h;
                        t = if (target - t_next).abs() <= tiny(target) { target } else { t_next };
                        std::mem::swap(&mut y, &mut y_new);
                        traj.stats.accepted += 1;
                        break;
                    }
                }
            }
            steps += 1;
            if steps > settings.max_steps {
                return Err(Error::MaxStepsExceeded { t, steps: settings.max_steps });
            }
        }
        while next_k < usize::MAX && sample_time(next_k) <= t + tiny(t) {
            let ts = sample_time(next_k);
            if traj.times.last().is_none_or(|&last| ts > last) {
                traj.times.push(ts);
                traj.states.push(y.clone());
                traj.identity_error_bound.push(err_acc);
            }
            if ts >= t_end {
                next_k = usize::MAX;
                break;
            }
            next_k += 1;
        }
        if settings.settle_tol > 0.0 && traj.times.last() == Some(&t) {
            sys.rhs(t, &y, &mut ws.tmp)?;
            traj.stats.rhs_evals += 1;
            let m = ws.tmp.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if m <= settings.settle_tol {
                traj.termination = Termination::Settled { t };
                break;
            }
        }
    }
    if traj.times.last().is_none_or(|&last| last < t - tiny(t)) {
        traj.times.push(t);
        traj.states.push(y);
        traj.identity_error_bound.push(err_acc);
    }
    Ok(traj)
}
