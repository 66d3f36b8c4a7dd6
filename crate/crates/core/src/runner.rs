//! On-disk workspaces: `init` provisions one from a configuration, `run`
//! executes scenarios into trace files and `report` summarises them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::codec::Encode;
use crate::config::{ConfigError, TopologyConfig};
use crate::netsim::{run_scenario, summarize, ScenarioName, ScenarioTrace, SimError, Simulation, TraceSummary};

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TRACE_DIR: &str = "traces";
pub const TRACE_EXTENSION: &str = "trace";

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0} is not an initialised workspace (run `vtn init` first)")]
    NotAWorkspace(PathBuf),
    #[error("{0} is not a trace file")]
    BadTrace(PathBuf),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub consortium: String,
    pub seed: u64,
    pub root_public_key: String,
    pub vasps: Vec<VaspEntry>,
    pub actors: Vec<ActorEntry>,
    pub devices: Vec<DeviceEntry>,
}

/// Certificates are hex encoded canonical bytes.
#[derive(Debug, Clone, Serialize)]
pub struct VaspEntry {
    pub vasp_number: u64,
    pub organization_name: String,
    pub identity_cert: String,
    pub transaction_cert: String,
    pub claims_cert: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ActorEntry {
    pub node: String,
    pub kind: String,
    pub identity_cert: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviceEntry {
    pub customer: String,
    pub device_id: String,
    pub attestation_public_key: String,
    pub boot_digest: String,
}

impl Manifest {
    pub fn from_simulation(sim: &Simulation) -> Self {
        Manifest {
            consortium: sim.config.consortium.clone(),
            seed: sim.seed,
            root_public_key: sim.root().public_key().to_hex(),
            vasps: sim
                .vasps
                .values()
                .map(|v| VaspEntry {
                    vasp_number: v.number.0,
                    organization_name: v.identity_cert.subject.organization_name.clone(),
                    identity_cert: hex::encode(v.identity_cert.canonical_encode()),
                    transaction_cert: hex::encode(v.transaction_cert.canonical_encode()),
                    claims_cert: hex::encode(v.claims_cert.canonical_encode()),
                })
                .collect(),
            actors: sim
                .actor_certs()
                .iter()
                .map(|(node, kind, cert)| ActorEntry {
                    node: node.0.clone(),
                    kind: format!("{kind:?}"),
                    identity_cert: hex::encode(cert.canonical_encode()),
                })
                .collect(),
            devices: sim
                .devices
                .iter()
                .map(|(customer, d)| DeviceEntry {
                    customer: customer.clone(),
                    device_id: d.device_id().to_string(),
                    attestation_public_key: d.attestation_public_key().to_hex(),
                    boot_digest: d.boot_digest().to_hex(),
                })
                .collect(),
        }
    }
}

/// Writes the configuration, the provisioning manifest and an empty trace
/// directory under `root`.
pub fn init(root: &Path, config: &TopologyConfig) -> Result<Manifest, RunnerError> {
    let sim = Simulation::build(config)?;
    let manifest = Manifest::from_simulation(&sim);
    let traces = root.join(TRACE_DIR);
    fs::create_dir_all(&traces).map_err(io(&traces))?;
    let config_path = root.join(CONFIG_FILE);
    fs::write(&config_path, config.to_toml_string()).map_err(io(&config_path))?;
    let manifest_path = root.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).expect("manifest serialises");
    fs::write(&manifest_path, text).map_err(io(&manifest_path))?;
    Ok(manifest)
}

/// The workspace configuration with `key=value` overrides applied.
pub fn load_config(root: &Path, overrides: &[String]) -> Result<TopologyConfig, RunnerError> {
    let path = root.join(CONFIG_FILE);
    if !path.is_file() {
        return Err(RunnerError::NotAWorkspace(root.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    Ok(TopologyConfig::with_overrides(&text, overrides)?)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub scenario: ScenarioName,
    pub trace: ScenarioTrace,
    pub trace_path: PathBuf,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.trace.passed()
    }
}

pub fn trace_file_name(name: ScenarioName) -> String {
    format!("{name}.{TRACE_EXTENSION}")
}

/// Runs each scenario on a fresh world and writes its trace to
/// `trace_dir`. Assertion failures are outcomes, not errors.
pub fn run(
    config: &TopologyConfig,
    scenarios: &[ScenarioName],
    seed: Option<u64>,
    trace_dir: &Path,
) -> Result<Vec<RunOutcome>, RunnerError> {
    fs::create_dir_all(trace_dir).map_err(io(trace_dir))?;
    let mut out = Vec::new();
    for &name in scenarios {
        let trace = match run_scenario(name, config, seed) {
            Ok(t) => t,
            Err(SimError::ScenarioAssertionFailed { trace }) => *trace,
            Err(e) => return Err(e.into()),
        };
        let path = trace_dir.join(trace_file_name(name));
        fs::write(&path, trace.render()).map_err(io(&path))?;
        out.push(RunOutcome {
            scenario: name,
            trace,
            trace_path: path,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub rows: Vec<TraceSummary>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.passed)
    }

    fn total(&self, events: &[&str]) -> usize {
        self.rows
            .iter()
            .map(|r| events.iter().map(|e| r.events(e)).sum::<usize>())
            .sum()
    }

    /// Payloads accepted by a beneficiary VASP.
    pub fn payloads(&self) -> usize {
        self.total(&["travel_rule.payload.validated"])
    }

    /// Consent receipts issued by claims stores.
    pub fn receipts(&self) -> usize {
        self.total(&["claims.released"])
    }

    /// Attestation evidence verified by supervisors or insurers.
    pub fn evidence(&self) -> usize {
        self.total(&[
            "wallet.onboard",
            "wallet.checkpoint",
            "insurer.audit",
            "wallet.offboard",
            "wallet.offboard.erasure_not_proven",
        ])
    }

    pub fn render(&self) -> String {
        let mut out = String::from("scenario  seed        result  assertions  events\n");
        for r in &self.rows {
            let events: usize = r.event_counts.values().sum();
            out.push_str(&format!(
                "{:<9} {:<11} {:<7} {:>4}/{:<5}  {events}\n",
                r.scenario,
                r.seed,
                if r.passed { "PASS" } else { "FAIL" },
                r.assertions_passed,
                r.assertions_passed + r.assertions_failed,
            ));
        }
        out.push_str(&format!(
            "payloads={} receipts={} evidence={}\n",
            self.payloads(),
            self.receipts(),
            self.evidence()
        ));
        out
    }
}

/// Summarises every trace file in `trace_dir`, sorted by file name.
pub fn report(trace_dir: &Path) -> Result<Report, RunnerError> {
    if !trace_dir.is_dir() {
        return Err(RunnerError::NotAWorkspace(trace_dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(trace_dir)
        .map_err(io(trace_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == TRACE_EXTENSION))
        .collect();
    paths.sort();
    let mut rows = Vec::new();
    for p in paths {
        let text = fs::read_to_string(&p).map_err(io(&p))?;
        rows.push(summarize(&text).ok_or_else(|| RunnerError::BadTrace(p.clone()))?);
    }
    Ok(Report { rows })
}
