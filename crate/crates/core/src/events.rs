//! Lifecycle event records shared by the migrator, the engine and the
//! control plane.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventTag {
    RunStarted,
    CliqueRegistered,
    CliqueDeregistered,
    CliqueExpired,
    LoadInjected,
    Annotation,
    ContractTrigger,
    SelectionSucceeded,
    SelectionFailed,
    MigrationStarted,
    CheckpointWritten,
    BackupWritten,
    Staged,
    JobStarted,
    StartFailed,
    Restarted,
    Relocated,
    Recovered,
    Announced,
    MigrationAborted,
    MigrationCompleted,
    Hibernating,
    Lost,
    SourceKilled,
    PurgeScheduled,
    EvacuationStarted,
    Evacuated,
    Purged,
    OperatorAlert,
    ParamsChanged,
    CommandAccepted,
    CommandRejected,
    Paused,
    Resumed,
    Done,
}

impl fmt::Display for EventTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub time: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub run_id: Option<String>,
    pub tag: EventTag,
    pub detail: String,
}

impl LogEvent {
    pub fn new(time: f64, run_id: Option<&str>, tag: EventTag, detail: impl Into<String>) -> Self {
        Self { time, run_id: run_id.map(str::to_string), tag, detail: detail.into() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_serialize_screaming() {
        assert_eq!(EventTag::Relocated.to_string(), "RELOCATED");
        assert_eq!(EventTag::EvacuationStarted.to_string(), "EVACUATION_STARTED");
        let e = LogEvent::new(1.5, Some("r"), EventTag::Done, "ok");
        assert_eq!(serde_json::to_string(&e).unwrap(), r#"{"time":1.5,"run_id":"r","tag":"DONE","detail":"ok"}"#);
    }
}
