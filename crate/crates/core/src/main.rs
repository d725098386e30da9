use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use dampwave::experiments::{self, apply_env_overrides, error_exit_code, load_config, CheckVerdict, ExperimentConfig, ExperimentKind};
use dampwave::geometry::ManifoldKind;

/// Spectral Galerkin experiments for damped wave and Klein-Gordon operators.
///
/// Settings come from defaults, then the config file, then the environment
/// (DAMPWAVE_OUTPUT_DIR, DAMPWAVE_WORKERS), then command-line flags.
///
/// Exit status: 0 all checks PASS, 1 a check FAILed or the run broke,
/// 2 configuration error, 3 infeasible request (e.g. K too small for h).
#[derive(Parser)]
#[command(name = "dampwave", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named by the config's `kind`.
    Run(Common),
    /// Validate a config and print it with defaults filled in.
    Check(Common),
    /// Spectrum of the truncated generator.
    Spectrum(Common),
    /// Resolvent norm along the imaginary axis.
    Scan(Common),
    /// Energy evolution of random initial states.
    Evolve(Common),
    /// Filtered time-averaged energy against the modified resolvent constant.
    AvgEstimate(Common),
    /// Resolvent-to-average inequality over an h grid.
    Theorem31(Common),
    /// Coherent-state energy experiment and the implied lower bound on G(h).
    Ehrenfest(Common),
    /// Zero-set preserving mollification over an eps grid.
    Mollify(Common),
    /// Sampled geometric control check for supp b.
    Gcc(Common),
    /// Dyadic frequency-mixing norms of the damping.
    MixScan(Common),
    /// Cutoff and diagonalization errors over an h grid.
    DiagSuite(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; built-in defaults when absent.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// circle or torus2
    #[arg(long)]
    manifold: Option<String>,
    #[arg(long)]
    cutoff: Option<usize>,
    #[arg(long)]
    m: Option<f64>,
    /// Print the JSON report instead of the summary.
    #[arg(long)]
    json: bool,
}

fn build_config(common: &Common, kind: Option<ExperimentKind>) -> dampwave::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::new(kind.unwrap_or(ExperimentKind::Spectrum)),
    };
    if let Some(k) = kind {
        cfg.kind = k;
    }
    apply_env_overrides(&mut cfg)?;
    if let Some(d) = &common.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = &common.manifold {
        cfg.manifold.kind = match m.as_str() {
            "circle" => ManifoldKind::Circle,
            "torus2" => ManifoldKind::Torus2,
            other => return Err(dampwave::Error::Config { path: "--manifold".into(), msg: format!("unknown manifold `{other}`") }),
        };
    }
    if let Some(k) = common.cutoff {
        cfg.manifold.cutoff = k;
    }
    if let Some(m) = common.m {
        cfg.m = m;
    }
    Ok(cfg)
}

fn execute(common: &Common, kind: Option<ExperimentKind>, check_only: bool) -> anyhow::Result<i32> {
    let cfg = match build_config(common, kind) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(error_exit_code(&e));
        }
    };
    if check_only {
        return Ok(match cfg.validate() {
            Ok(()) => {
                print!("{}", cfg.to_toml().context("serializing config")?);
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                error_exit_code(&e)
            }
        });
    }
    match experiments::run(&cfg) {
        Ok(report) => {
            if common.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                for c in &report.checks {
                    let tag = match c.verdict {
                        CheckVerdict::Pass => "PASS",
                        CheckVerdict::Fail => "FAIL",
                        CheckVerdict::Info => "INFO",
                    };
                    let v = c.value.map(|v| format!("{v:.6e}")).unwrap_or_default();
                    println!("{tag:4} {:40} {v:>14}  {}", c.name, c.detail);
                }
                for a in &report.artifacts {
                    println!("wrote {} sha256={}", a.path.display(), a.sha256);
                }
                println!("report {}", experiments::report_path(&cfg).display());
            }
            Ok(report.exit_code())
        }
        Err(e) => {
            eprintln!("error: {e}");
            Ok(error_exit_code(&e))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, kind, check_only) = match &cli.command {
        Command::Run(c) => (c, None, false),
        Command::Check(c) => (c, None, true),
        Command::Spectrum(c) => (c, Some(ExperimentKind::Spectrum), false),
        Command::Scan(c) => (c, Some(ExperimentKind::Scan), false),
        Command::Evolve(c) => (c, Some(ExperimentKind::Evolve), false),
        Command::AvgEstimate(c) => (c, Some(ExperimentKind::AvgEstimate), false),
        Command::Theorem31(c) => (c, Some(ExperimentKind::Theorem31), false),
        Command::Ehrenfest(c) => (c, Some(ExperimentKind::Ehrenfest), false),
        Command::Mollify(c) => (c, Some(ExperimentKind::Mollify), false),
        Command::Gcc(c) => (c, Some(ExperimentKind::Gcc), false),
        Command::MixScan(c) => (c, Some(ExperimentKind::MixScan), false),
        Command::DiagSuite(c) => (c, Some(ExperimentKind::DiagSuite), false),
    };
    match execute(common, kind, check_only) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
