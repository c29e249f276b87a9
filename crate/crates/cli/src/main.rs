use clap::{Args, Parser, Subcommand};
use ezgs::config::RunConfig;
use ezgs::presets::Preset;
use ezgs::protocols::Family;
use ezgs::runner::{self, EXIT_INVARIANT, EXIT_OK, EXIT_RUNTIME};
use std::path::PathBuf;
use std::process::ExitCode;

/// Simulate EZGS distributed optimization flows.
#[derive(Parser, Debug)]
#[command(name = "ezgs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate a scenario and write trajectory, reference and report files.
    Run(RunArgs),
    /// Run the static checks only (same as `run --validate-only`).
    Validate(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Built-in scenario: case1_equality or case2_inequality.
    #[arg(long, conflicts_with = "config")]
    preset: Option<Preset>,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Protocol family: LP, FTP, FxTP or PTP.
    #[arg(long)]
    protocol: Option<Family>,
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    /// Base integration step.
    #[arg(long)]
    dt: Option<f64>,
    /// Seed of the random cost weights.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run all four protocol families in parallel, one subdirectory each.
    #[arg(long)]
    batch: bool,
    /// Check the configuration without integrating.
    #[arg(long = "validate-only")]
    validate_only: bool,
}

impl RunArgs {
    fn config(&self) -> ezgs::Result<RunConfig> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(p)) => RunConfig::preset(p),
            (None, None) => RunConfig::preset(Preset::Case1Equality),
        };
        if let Some(f) = self.protocol {
            cfg.set_family(f);
        }
        if let Some(t) = self.t_end {
            cfg.t_end = Some(t);
        }
        if let Some(dt) = self.dt {
            cfg.set_integrator("dt", dt);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output.dir = o.clone();
        }
        Ok(cfg)
    }
}

fn validate(cfg: &RunConfig) -> i32 {
    let diags = runner::diagnose(cfg);
    if diags.is_empty() {
        println!("configuration valid");
        EXIT_OK
    } else {
        for d in &diags {
            println!("violation: {d}");
        }
        EXIT_INVARIANT
    }
}

fn run_one(cfg: &RunConfig) -> i32 {
    match runner::run(cfg) {
        Ok(out) => {
            print!("{}", out.report_text());
            log::info!("outputs written to {}", cfg.output.dir.display());
            out.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn run_batch(cfg: &RunConfig) -> i32 {
    let mut runtime_error = false;
    let mut invariant_failure = false;
    for (family, result) in runner::run_batch(cfg) {
        match result {
            Ok(out) => {
                let status = if out.report.hard_ok() { "ok" } else { "invariant failure" };
                println!("{family}: {status} -> {}", cfg.output.dir.join(family.name()).display());
                invariant_failure |= !out.report.hard_ok();
            }
            Err(e) => {
                eprintln!("{family}: error: {e}");
                runtime_error = true;
            }
        }
    }
    if runtime_error {
        EXIT_RUNTIME
    } else if invariant_failure {
        EXIT_INVARIANT
    } else {
        EXIT_OK
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (args, validate_only) = match &cli.command {
        Command::Run(a) => (a, a.validate_only),
        Command::Validate(a) => (a, true),
    };
    let cfg = match args.config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME as u8);
        }
    };
    let code = if validate_only {
        validate(&cfg)
    } else if args.batch {
        run_batch(&cfg)
    } else {
        run_one(&cfg)
    };
    ExitCode::from(code as u8)
}
