//! Run orchestration: oracle, integration, analysis and output files.

use crate::analysis::{annotate, check_theorem_suite, lambda2_of_m, References, SuiteTolerances, TheoremReport};
use crate::config::RunConfig;
use crate::dynamics::{integrate, Mode, Scenario};
use crate::error::{Error, Result};
use crate::integrator::{fmt_float, Termination, Trajectory};
use crate::protocols::{Family, ProtocolSpec};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const REFERENCE_FILE: &str = "reference.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const REPORT_KV_FILE: &str = "report.kv";
pub const SUMMARY_FILE: &str = "summary.dat";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";

/// Exit status of the command-line runner.
pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_INVARIANT: i32 = 2;

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Fully resolved configuration.
    pub config: RunConfig,
    pub scenario: Scenario,
    pub references: References,
    pub trajectory: Trajectory,
    pub report: TheoremReport,
}

impl RunOutput {
    pub fn exit_code(&self) -> i32 {
        if self.report.hard_ok() {
            EXIT_OK
        } else {
            EXIT_INVARIANT
        }
    }

    fn label(&self) -> String {
        self.config
            .scenario
            .preset
            .map_or_else(|| "inline".to_string(), |p| p.name().to_string())
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec![
            format!("seed = {}", self.config.seed),
            format!("scenario = {}", self.label()),
            format!("family = {}", self.scenario.protocol.family),
            format!("mode = {}", mode_name(self.scenario.mode)),
        ];
        h.extend(reference_lines(&self.references));
        h
    }

    /// Write all enabled output files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let out = &self.config.output;
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        fs::write(&path, self.config.to_toml()?)?;
        written.push(path);
        let path = dir.join(REFERENCE_FILE);
        let mut refs = self.header().join("\n");
        refs.push('\n');
        fs::write(&path, refs)?;
        written.push(path);
        if out.csv {
            let path = dir.join(TRAJECTORY_FILE);
            let f = BufWriter::new(fs::File::create(&path)?);
            self.trajectory.write_csv(f, &self.scenario.state_columns(), &self.header())?;
            written.push(path);
        }
        if out.report {
            let path = dir.join(REPORT_FILE);
            fs::write(&path, self.report_text())?;
            written.push(path);
            let path = dir.join(REPORT_KV_FILE);
            let mut kv = String::new();
            let _ = writeln!(kv, "seed={}", self.config.seed);
            let _ = writeln!(kv, "scenario={}", self.label());
            let _ = writeln!(kv, "family={}", self.scenario.protocol.family);
            let _ = writeln!(kv, "termination={}", termination_name(&self.trajectory.termination));
            let _ = writeln!(kv, "hard_ok={}", self.report.hard_ok());
            kv += &self.report.to_key_values();
            fs::write(&path, kv)?;
            written.push(path);
        }
        if out.summary {
            let path = dir.join(SUMMARY_FILE);
            fs::write(&path, self.summary())?;
            written.push(path);
        }
        Ok(written)
    }

    pub fn report_text(&self) -> String {
        let mut s = String::new();
        for line in self.header() {
            let _ = writeln!(s, "{line}");
        }
        let st = &self.trajectory.stats;
        let _ = writeln!(
            s,
            "termination = {}; {} samples; {} accepted and {} rejected steps; {} domain halvings",
            termination_name(&self.trajectory.termination),
            self.trajectory.len(),
            st.accepted,
            st.rejected,
            st.domain_halvings
        );
        let _ = writeln!(s);
        s += &self.report.to_text();
        s
    }

    fn summary(&self) -> String {
        let cols = ["E_x", "E_lambda", "zgs_residual"];
        let mut s = format!("# seed {}\n# t {}\n", self.config.seed, cols.join(" "));
        for k in 0..self.trajectory.len() {
            s += &fmt_float(self.trajectory.times[k]);
            for c in cols {
                s.push(' ');
                s += &self.trajectory.metric(c).map_or("nan".into(), |v| fmt_float(v[k]));
            }
            s.push('\n');
        }
        s
    }
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Equality => "equality",
        Mode::Barrier => "barrier",
        Mode::Centralized => "centralized",
    }
}

fn termination_name(t: &Termination) -> String {
    match t {
        Termination::Horizon => "horizon".into(),
        Termination::Settled { t } => format!("settled at {}", fmt_float(*t)),
    }
}

fn join(v: &DVector<f64>) -> String {
    v.iter().map(|x| fmt_float(*x)).collect::<Vec<_>>().join(",")
}

fn reference_lines(r: &References) -> Vec<String> {
    let t = &r.target;
    let mut out = vec![
        format!("x_star = {}", join(&t.x)),
        format!("lambda_star = {}", join(&t.stacked_lambda())),
        format!("kkt_residual = {}", fmt_float(t.kkt_residual)),
        format!("duals_unique = {}", t.duals_unique),
    ];
    if let Some(c) = &t.barrier {
        out.push(format!(
            "barrier = {}",
            c.iter().map(|v| fmt_float(*v)).collect::<Vec<_>>().join(",")
        ));
    }
    if let Some(c) = &r.constrained {
        out.push(format!("constrained_x_star = {}", join(&c.x)));
        out.push(format!("constrained_kkt_residual = {}", fmt_float(c.kkt_residual)));
    }
    out
}

/// Solve the reference problem, integrate and analyse, without writing files.
pub fn execute(cfg: &RunConfig) -> Result<RunOutput> {
    let config = cfg.effective()?;
    let scenario = config.build_scenario()?;
    let references = References::for_scenario(&scenario)?;
    let mut trajectory = integrate(&scenario)?;
    annotate(&mut trajectory, &scenario, &references)?;
    let report = check_theorem_suite(&trajectory, &scenario, &SuiteTolerances::default())?;
    Ok(RunOutput { config, scenario, references, trajectory, report })
}

/// [`execute`] and write the outputs into the configured directory.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    let out = execute(cfg)?;
    out.write(&cfg.output.dir)?;
    Ok(out)
}

/// Run every protocol family in parallel, each into `<dir>/<family>`.
pub fn run_batch(cfg: &RunConfig) -> Vec<(Family, Result<RunOutput>)> {
    std::thread::scope(|s| {
        let handles: Vec<_> = Family::ALL
            .iter()
            .map(|&f| {
                let mut c = cfg.clone();
                c.set_family(f);
                c.output.dir = cfg.output.dir.join(f.name());
                (f, s.spawn(move || run(&c)))
            })
            .collect();
        handles
            .into_iter()
            .map(|(f, h)| (f, h.join().unwrap_or_else(|_| Err(Error::InvalidInput("worker panicked".into())))))
            .collect()
    })
}

/// A static-check violation found by [`diagnose`].
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub check: &'static str,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.check, self.message)
    }
}

/// Static checks without integration; an empty list means the config is
/// runnable.
pub fn diagnose(cfg: &RunConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |check: &'static str, e: Error| out.push(Diagnostic { check, message: e.to_string() });
    let params = cfg.protocol_params().map_err(|e| push("config", e)).ok();
    if let Err(e) = cfg.integrator_settings().and_then(|s| s.validate()) {
        push("integrator", e);
    }
    let network = cfg.network().map_err(|e| push("graph", e)).ok();
    if let Some(net) = &network {
        if !net.is_connected() {
            push(
                "connectivity",
                Error::InvalidInput(format!("graph has {} components", net.component_count())),
            );
        }
    }
    if let (Some(net), Some(p)) = (&network, &params) {
        if let Err(e) = ProtocolSpec::from_params(cfg.family(), net, p) {
            push("protocol", e);
        }
    }
    let problems = cfg.problems().map_err(|e| push("problem", e)).ok();
    if let Some((problems, x0, _)) = &problems {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for (i, p) in problems.iter().enumerate() {
            let n = p.dim();
            let mut points = vec![x0[i].clone()];
            points.extend((0..8).map(|_| DVector::from_fn(n, |_, _| 2.0 * rng.random::<f64>() - 1.0)));
            for x in &points {
                let h = p.cost.hessian(x);
                let min_ev = crate::linalg::sym_eigenvalues(&h).first().cloned().unwrap_or(0.0);
                if !(min_ev > 0.0) {
                    push(
                        "convexity",
                        Error::InvalidInput(format!("agent {}: Hessian eigenvalue {min_ev:e} at a test point", i + 1)),
                    );
                    break;
                }
            }
            let margin = p.barrier_margin(&x0[i], 0.0);
            if !(margin > 0.0) {
                push(
                    "feasibility",
                    Error::InfeasibleStart { agent: Some(i), margin },
                );
            }
        }
    }
    if out.is_empty() {
        match cfg.build_scenario() {
            Err(e) => out.push(Diagnostic { check: "scenario", message: e.to_string() }),
            Ok(sc) if sc.mode != Mode::Centralized => match sc.initial_state().and_then(|s| lambda2_of_m(&sc, &s)) {
                Ok(r) if r.degenerate => out.push(Diagnostic {
                    check: "spectrum",
                    message: format!(
                        "M has {} zero eigenvalues at the initial point, {} expected",
                        r.null_dim, r.expected_null_dim
                    ),
                }),
                Ok(_) => {}
                Err(e) => out.push(Diagnostic { check: "scenario", message: e.to_string() }),
            },
            Ok(_) => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::Preset;

    #[test]
    fn presets_pass_validation() {
        for p in Preset::ALL {
            for f in Family::ALL {
                let mut cfg = RunConfig::preset(p);
                cfg.set_family(f);
                assert_eq!(diagnose(&cfg), vec![], "{p} {f}");
            }
        }
    }

    #[test]
    fn disconnected_graph_is_named() {
        let mut cfg = RunConfig::preset(Preset::Case1Equality);
        cfg.scenario.edges = Some(vec![(1, 2, 1.0), (2, 3, 1.0), (4, 5, 1.0), (5, 6, 1.0)]);
        let d = diagnose(&cfg);
        assert!(d.iter().any(|d| d.check == "connectivity" && d.message.contains("2 components")), "{d:?}");
    }

    #[test]
    fn fixed_time_exponent_range_is_named() {
        let cfg = RunConfig::from_toml(
            "[scenario]\npreset = \"case1_equality\"\n[protocol]\nfamily = \"FxTP\"\nbeta_edge = \"0.5\"\n",
        )
        .unwrap();
        let d = diagnose(&cfg);
        assert!(d.iter().any(|d| d.check == "protocol" && d.message.contains("β")), "{d:?}");
    }

    #[test]
    fn infeasible_start_is_named() {
        let text = r#"
            [scenario]
            edges = [[1, 2, 1.0]]
            [[scenario.agents]]
            cost = { kind = "quadratic", q = [[2.0]], c = [0.0] }
            a = [[1.0]]
            b = [0.0]
            inequalities = [{ d = [1.0], e = -1.0 }]
            barrier = 10.0
            [[scenario.agents]]
            cost = { kind = "quadratic", q = [[2.0]], c = [0.0] }
            a = [[1.0]]
            b = [0.0]
        "#;
        let d = diagnose(&RunConfig::from_toml(text).unwrap());
        assert!(d.iter().any(|d| d.check == "feasibility"), "{d:?}");
    }
}
