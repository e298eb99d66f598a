//! Scenario files.
//!
//! A scenario is a TOML document:
//!
//! ```toml
//! version = 1
//! seed = 42
//! duration = 400.0
//!
//! [contract]
//! quantum_seconds = 10.0
//! degradation_threshold = 0.10
//! consecutive_required = 3
//!
//! [workload]
//! dims = [8, 8, 8]
//! backup_interval = 50.0
//!
//! [[clique]]
//! name = "uc"
//! link_bandwidth_mbps = 100.0
//! wan_bandwidth_mbps = 1.0
//! [[clique.machine]]
//! name = "uc-0"
//! domain = "cs.uiuc.edu"
//! op_sys = "LINUX"
//! cpu_count = 8
//! cpu_speed_mhz = 1000.0
//! mem_bytes = "8G"
//! iter_rate_factor = 5.0
//!
//! [[event]]
//! time = 0.0
//! kind = "RegisterClique"
//! clique = "uc"
//! ```
//!
//! Optional tables are `[transfer]` (see [`TransferModel`]), `[directory]`
//! (`ttl_seconds`) and `[policy]` (`better_resource`, `evacuation_margin`).
//! A top-level `request_ad` replaces the default request ad.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classad::{self, ClassAd};
use crate::contract::ContractParams;
use crate::migrator::TransferModel;
use crate::resources::Clique;
use crate::selector::DEFAULT_REQUEST_AD;

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    /// Simulated seconds to run; events after this are not processed.
    pub duration: f64,
    #[serde(default)]
    pub request_ad: Option<String>,
    #[serde(default)]
    pub contract: ContractParams,
    pub workload: Workload,
    #[serde(default)]
    pub transfer: TransferModel,
    #[serde(default)]
    pub directory: DirectoryConfig,
    #[serde(default)]
    pub policy: Policy,
    #[serde(default, rename = "clique")]
    pub cliques: Vec<Clique>,
    #[serde(default, rename = "event")]
    pub events: Vec<ScenarioEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    pub dims: [usize; 3],
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Total iterations; the run is done when it reaches them.
    #[serde(default)]
    pub iterations: Option<u64>,
    #[serde(default)]
    pub backup_interval: Option<f64>,
    #[serde(default = "default_retention")]
    pub backup_retention: usize,
}

fn default_alpha() -> f64 {
    0.1
}

fn default_retention() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DirectoryConfig {
    pub ttl_seconds: f64,
}

impl Default for DirectoryConfig {
    fn default() -> Self {
        Self { ttl_seconds: 600.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Policy {
    /// Let running runs move when a better clique registers.
    pub better_resource: bool,
    pub evacuation_margin: f64,
}

impl Default for Policy {
    fn default() -> Self {
        Self { better_resource: false, evacuation_margin: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub time: f64,
    #[serde(flatten)]
    pub action: Action,
}

/// Partial contract update; missing fields keep their current value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsUpdate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantum_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degradation_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consecutive_required: Option<u32>,
}

impl ParamsUpdate {
    pub fn apply(&self, base: &ContractParams) -> ContractParams {
        ContractParams {
            quantum_seconds: self.quantum_seconds.unwrap_or(base.quantum_seconds),
            degradation_threshold: self.degradation_threshold.unwrap_or(base.degradation_threshold),
            consecutive_required: self.consecutive_required.unwrap_or(base.consecutive_required),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Action {
    RegisterClique {
        clique: String,
        #[serde(default)]
        ttl_seconds: Option<f64>,
    },
    /// Planned withdrawal: a run on the clique checkpoints before it goes.
    DeregisterClique { clique: String },
    InjectLoad {
        clique: String,
        #[serde(default)]
        machine: Option<String>,
        delta: f64,
    },
    StartRun {
        run_id: String,
        /// Skips selection when set; requirements are still checked.
        #[serde(default)]
        clique: Option<String>,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// The clique disappears. Unless `graceful`, runs on it lose all work
    /// since their last backup.
    KillSource {
        clique: String,
        #[serde(default)]
        graceful: bool,
    },
    PurgeDeadline { clique: String, deadline: f64 },
    ManualMigrate {
        #[serde(default)]
        run_id: Option<String>,
        #[serde(default)]
        target: Option<String>,
    },
    SetContractParams {
        #[serde(default)]
        run_id: Option<String>,
        #[serde(flatten)]
        params: ParamsUpdate,
    },
    Annotation { text: String },
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = toml::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn request_text(&self) -> &str {
        self.request_ad.as_deref().unwrap_or(DEFAULT_REQUEST_AD)
    }

    pub fn parsed_request(&self) -> Result<ClassAd, ScenarioError> {
        let ad = classad::parse_ad(self.request_text()).map_err(|e| ScenarioError::Invalid(format!("request_ad: {e}")))?;
        if !ad.contains(classad::KEYWORD_REQUIREMENTS) {
            return invalid("request_ad has no requirements");
        }
        Ok(ad)
    }

    pub fn clique(&self, name: &str) -> Option<&Clique> {
        self.cliques.iter().find(|c| c.name == name)
    }

    /// Checks everything that can be checked before the first event runs.
    /// Events may appear in any order; the engine sorts them by time.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.version != SCENARIO_VERSION {
            return invalid(format!("unsupported version {} (expected {SCENARIO_VERSION})", self.version));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return invalid("duration must be positive");
        }
        self.contract.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.transfer.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.parsed_request()?;
        let w = &self.workload;
        if w.dims.iter().any(|&d| d == 0) {
            return invalid("workload dims must be positive");
        }
        if !(w.alpha.is_finite() && w.alpha > 0.0 && w.alpha <= 1.0 / 6.0) {
            return invalid("workload alpha must be in (0, 1/6]");
        }
        if let Some(i) = w.backup_interval {
            if !(i.is_finite() && i > 0.0) {
                return invalid("backup_interval must be positive");
            }
        }
        if w.backup_retention == 0 {
            return invalid("backup_retention must be at least 1");
        }
        if !(self.directory.ttl_seconds.is_finite() && self.directory.ttl_seconds > 0.0) {
            return invalid("directory ttl_seconds must be positive");
        }
        if !(self.policy.evacuation_margin.is_finite() && self.policy.evacuation_margin >= 0.0) {
            return invalid("evacuation_margin must be non-negative");
        }

        let mut names = BTreeSet::new();
        for c in &self.cliques {
            c.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
            if c.name == crate::migrator::STORE_NAME {
                return invalid("`store` is reserved for the migrator store");
            }
            if !names.insert(c.name.as_str()) {
                return invalid(format!("clique `{}` defined twice", c.name));
            }
        }

        let mut runs = BTreeSet::new();
        for e in &self.events {
            if let Action::StartRun { run_id, .. } = &e.action {
                if !runs.insert(run_id.as_str()) {
                    return invalid(format!("run `{run_id}` started twice"));
                }
            }
        }
        let known = |name: &str| -> Result<(), ScenarioError> {
            if names.contains(name) {
                Ok(())
            } else {
                invalid(format!("event refers to unknown clique `{name}`"))
            }
        };
        for (i, e) in self.events.iter().enumerate() {
            if !(e.time.is_finite() && e.time >= 0.0) {
                return invalid(format!("event {i} has an invalid time"));
            }
            match &e.action {
                Action::RegisterClique { clique, ttl_seconds } => {
                    known(clique)?;
                    if ttl_seconds.is_some_and(|t| !(t.is_finite() && t > 0.0)) {
                        return invalid(format!("event {i}: ttl_seconds must be positive"));
                    }
                }
                Action::DeregisterClique { clique } | Action::KillSource { clique, .. } => known(clique)?,
                Action::InjectLoad { clique, machine, delta } => {
                    known(clique)?;
                    if !delta.is_finite() {
                        return invalid(format!("event {i}: load delta must be finite"));
                    }
                    if let Some(m) = machine {
                        if !self.clique(clique).is_some_and(|c| c.members.iter().any(|x| &x.name == m)) {
                            return invalid(format!("event {i}: no machine `{m}` in `{clique}`"));
                        }
                    }
                }
                Action::StartRun { run_id, clique, .. } => {
                    if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.starts_with('.') {
                        return invalid(format!("event {i}: run id `{run_id}` is not a plain name"));
                    }
                    if let Some(c) = clique {
                        known(c)?;
                    }
                }
                Action::PurgeDeadline { clique, deadline } => {
                    known(clique)?;
                    if !(deadline.is_finite() && *deadline >= e.time) {
                        return invalid(format!("event {i}: purge deadline lies before the announcement"));
                    }
                }
                Action::ManualMigrate { run_id, target } => {
                    if let Some(r) = run_id {
                        if !runs.contains(r.as_str()) {
                            return invalid(format!("event {i}: no run `{r}` is started"));
                        }
                    }
                    if let Some(t) = target {
                        known(t)?;
                    }
                }
                Action::SetContractParams { run_id, params } => {
                    if let Some(r) = run_id {
                        if !runs.contains(r.as_str()) {
                            return invalid(format!("event {i}: no run `{r}` is started"));
                        }
                    }
                    params.apply(&self.contract).validate().map_err(|e| ScenarioError::Invalid(format!("event {i}: {e}")))?;
                }
                Action::Annotation { .. } => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
duration = 100.0
[workload]
dims = [4, 4, 4]
[[clique]]
name = "a"
link_bandwidth_mbps = 10.0
wan_bandwidth_mbps = 1.0
[[clique.machine]]
name = "a0"
domain = "cs.uiuc.edu"
op_sys = "LINUX"
cpu_count = 8
cpu_speed_mhz = 500.0
mem_bytes = "16G"
iter_rate_factor = 2.0
[[event]]
time = 0.0
kind = "RegisterClique"
clique = "a"
[[event]]
time = 5.0
kind = "SetContractParams"
degradation_threshold = 0.25
"#;

    #[test]
    fn parses_minimal() {
        let s = Scenario::from_toml(MINIMAL).unwrap();
        assert_eq!(s.cliques[0].members[0].mem_bytes, 16 << 30);
        assert_eq!(s.contract, ContractParams::default());
        assert_eq!(s.events.len(), 2);
        match &s.events[1].action {
            Action::SetContractParams { params, .. } => assert_eq!(params.degradation_threshold, Some(0.25)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_event_kind() {
        let text = MINIMAL.replace("kind = \"RegisterClique\"", "kind = \"Teleport\"");
        assert!(matches!(Scenario::from_toml(&text), Err(ScenarioError::Syntax(_))));
    }

    #[test]
    fn rejects_unknown_clique_and_bad_version() {
        let text = MINIMAL.replace("clique = \"a\"", "clique = \"zz\"");
        assert!(matches!(Scenario::from_toml(&text), Err(ScenarioError::Invalid(_))));
        let text = MINIMAL.replace("version = 1", "version = 7");
        assert!(matches!(Scenario::from_toml(&text), Err(ScenarioError::Invalid(_))));
    }

    #[test]
    fn rejects_invalid_params_update() {
        let text = MINIMAL.replace("degradation_threshold = 0.25", "degradation_threshold = 1.5");
        assert!(matches!(Scenario::from_toml(&text), Err(ScenarioError::Invalid(_))));
    }
}
