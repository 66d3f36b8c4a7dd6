use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use vtn_core::config::{TopologyConfig, DEFAULT_CONFIG};
use vtn_core::netsim::ScenarioName;
use vtn_core::runner::{self, TRACE_DIR};

/// Deterministic simulator for VASP trust infrastructure.
#[derive(Debug, Parser)]
#[command(name = "vtn", version)]
struct Cli {
    /// Workspace directory holding config.toml, manifest.toml and traces/.
    #[arg(long, global = true, env = "VTN_WORKSPACE", default_value = "vtn-workspace")]
    workspace: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// Override one configuration value, e.g. `scenario.amount=40` or
    /// `vasps.0.customers.1.balance=0`. Repeatable.
    #[arg(long = "override", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Provision a workspace: certificates, keys and devices.
    Init {
        /// Topology file. The built-in three-VASP topology when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run scenarios and write their traces.
    Run {
        /// S1..S5, a scenario alias, or `all`.
        #[arg(long, default_value = "all")]
        scenario: String,
        /// Run with this seed instead of the configured one.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Directory for trace files instead of the workspace's traces/.
        #[arg(long)]
        trace_out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Summarise the traces in the workspace.
    Report {
        /// Trace directory to read instead of the workspace's traces/.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
}

fn parse_scenarios(s: &str) -> Result<Vec<ScenarioName>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(ScenarioName::ALL.to_vec());
    }
    s.split(',')
        .map(|p| p.trim().parse::<ScenarioName>().map_err(anyhow::Error::from))
        .collect()
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Init { config, overrides } => {
            let text = match &config {
                Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                None => DEFAULT_CONFIG.to_string(),
            };
            let config = TopologyConfig::with_overrides(&text, &overrides.overrides)?;
            let manifest = runner::init(&cli.workspace, &config)?;
            println!(
                "initialised {} with {} VASPs, {} actors and {} wallet devices (seed {})",
                cli.workspace.display(),
                manifest.vasps.len(),
                manifest.actors.len(),
                manifest.devices.len(),
                manifest.seed
            );
            Ok(true)
        }
        Command::Run {
            scenario,
            seed_override,
            trace_out,
            overrides,
        } => {
            let names = parse_scenarios(&scenario)?;
            let config = runner::load_config(&cli.workspace, &overrides.overrides)?;
            let dir = trace_out.unwrap_or_else(|| cli.workspace.join(TRACE_DIR));
            let outcomes = runner::run(&config, &names, seed_override, &dir)?;
            for o in &outcomes {
                println!(
                    "{} {:<22} {} -> {}",
                    o.scenario,
                    o.scenario.describe(),
                    if o.passed() { "PASS" } else { "FAIL" },
                    o.trace_path.display()
                );
                for a in o.trace.failed_assertions() {
                    println!("    failed: {} {}", a.name, a.detail);
                }
            }
            Ok(outcomes.iter().all(|o| o.passed()))
        }
        Command::Report { traces } => {
            let dir = traces.unwrap_or_else(|| cli.workspace.join(TRACE_DIR));
            let report = runner::report(&dir)?;
            print!("{}", report.render());
            Ok(report.all_passed())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
