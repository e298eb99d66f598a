//! Deterministic discrete-event engine and scenario runner.
//!
//! Everything runs on the simulated clock: quanta, directory heartbeats,
//! selections, transfers and restarts. Identical scenario files give
//! byte-identical metrics and event logs.

mod engine;
pub mod scenario;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use engine::{CliqueView, CommandError, ControlCommand, Engine, RunView, StatusView};
pub use scenario::{Action, ParamsUpdate, Scenario, ScenarioError, ScenarioEvent};

use crate::contract::ContractError;
use crate::events::{EventTag, LogEvent};
use crate::migrator::{MigrationReport, MigratorError, SimulationRecord};
use crate::resources::ResourceError;
use crate::worm::{BackupConfigError, CheckpointError, SolverError, SolverState};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Migrator(#[from] MigratorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Backup(#[from] BackupConfigError),
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// One line of the metrics log: a quantum verdict or a lifecycle event.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Position in the log, starting at 0.
    pub index: u64,
    pub time: f64,
    pub run_id: String,
    /// Quanta the run has completed, counted across migrations.
    pub quantum: u64,
    /// Quantum index within the current contract.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contract_quantum: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clique: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub average: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degradation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub violation: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<EventTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<Box<MigrationReport>>,
}

impl MetricsRecord {
    pub fn is_quantum(&self) -> bool {
        self.event.is_none() && self.rate.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub events: Vec<LogEvent>,
    pub records: Vec<SimulationRecord>,
    pub final_states: BTreeMap<String, SolverState>,
    pub migrations: Vec<MigrationReport>,
}

impl ScenarioOutcome {
    pub fn quanta<'a>(&'a self, run_id: &'a str) -> impl Iterator<Item = &'a MetricsRecord> + 'a {
        self.metrics.iter().filter(move |m| m.run_id == run_id && m.is_quantum())
    }

    pub fn record(&self, run_id: &str) -> Option<&SimulationRecord> {
        self.records.iter().find(|r| r.run_id == run_id)
    }

    pub fn events_tagged(&self, tag: EventTag) -> impl Iterator<Item = &LogEvent> {
        self.events.iter().filter(move |e| e.tag == tag)
    }
}

/// Runs a scenario to completion, keeping checkpoint files under `root`.
pub fn run_scenario(scenario: &Scenario, root: &Path) -> Result<ScenarioOutcome, SimError> {
    Engine::new(scenario.clone(), root)?.run_to_end()
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("plain data serializes"));
        out.push('\n');
    }
    out
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> io::Result<Vec<T>> {
    let file = io::BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(item);
    }
    Ok(out)
}

/// Columnar plot data: one row per quantum. `migration` is 1 on the quantum
/// after which a migration started.
pub fn export_plot_data(metrics: &[MetricsRecord]) -> String {
    struct Row<'a> {
        m: &'a MetricsRecord,
        migration: bool,
    }
    let mut rows: Vec<Row> = Vec::new();
    for m in metrics {
        if m.is_quantum() {
            rows.push(Row { m, migration: false });
        } else if m.event == Some(EventTag::MigrationStarted) {
            if let Some(r) = rows.iter_mut().rev().find(|r| r.m.run_id == m.run_id) {
                r.migration = true;
            }
        }
    }
    let mut out = String::from("run_id,time,quantum,clique,rate,violation,migration\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.m.run_id,
            r.m.time,
            r.m.quantum,
            r.m.clique.as_deref().unwrap_or(""),
            r.m.rate.unwrap_or(0.0),
            u8::from(r.m.violation),
            u8::from(r.migration)
        );
    }
    out
}

/// Writes `metrics.jsonl`, `events.jsonl`, `records.json` and `plot.csv`.
pub fn write_outputs(outcome: &ScenarioOutcome, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.jsonl"), to_jsonl(&outcome.metrics))?;
    fs::write(dir.join("events.jsonl"), to_jsonl(&outcome.events))?;
    fs::write(dir.join("plot.csv"), export_plot_data(&outcome.metrics))?;
    let mut f = fs::File::create(dir.join("records.json"))?;
    serde_json::to_writer_pretty(&mut f, &outcome.records).map_err(io::Error::other)?;
    f.write_all(b"\n")
}

/// Scenario files shipped with the crate.
pub mod bundled {
    pub const FIG5: &str = include_str!("../../scenarios/fig5.scenario");
    pub const TABLE1: &str = include_str!("../../scenarios/table1.scenario");
    pub const HIBERNATE: &str = include_str!("../../scenarios/hibernate.scenario");
    pub const CRASH: &str = include_str!("../../scenarios/crash.scenario");
    pub const PURGE: &str = include_str!("../../scenarios/purge.scenario");

    pub const ALL: [(&str, &str); 5] =
        [("fig5", FIG5), ("table1", TABLE1), ("hibernate", HIBERNATE), ("crash", CRASH), ("purge", PURGE)];

    pub fn get(name: &str) -> Option<&'static str> {
        let name = name.strip_suffix(".scenario").unwrap_or(name);
        ALL.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
    }
}
