//! External migrator service.
//!
//! Tracks every run's status and checkpoint locations independently of the
//! run itself, stages checkpoints between sites, restarts runs on new
//! cliques, parks them in safe storage when nothing suitable is available,
//! and evacuates checkpoints before a site purges them.
//!
//! Every migration attempt ends in exactly one of: running on the target,
//! hibernating with a checkpoint in safe storage, running on the source
//! (attempt aborted while the source was still alive) or lost with its
//! checkpoints still tracked.

mod storage;
mod transfer;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use storage::Storage;
pub use transfer::{
    modeled_duration, LinkRef, LinkSpec, Site, TransferModel, TransferModelError, DISK_TOUCHES_PER_HOP, STORE_NAME,
};

use crate::events::{EventTag, LogEvent};
use crate::worm::{self, Ack, AnnounceError, CheckpointError, CheckpointMeta, InformationService, ResourceProfile, RetryPolicy, SolverState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunStatus {
    Running,
    Migrating,
    Hibernating,
    Lost,
    Done,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Running => "RUNNING",
            RunStatus::Migrating => "MIGRATING",
            RunStatus::Hibernating => "HIBERNATING",
            RunStatus::Lost => "LOST",
            RunStatus::Done => "DONE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Trigger {
    ContractViolation,
    Manual,
    BetterResource,
    SourceShutdown,
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Trigger::ContractViolation => "CONTRACT_VIOLATION",
            Trigger::Manual => "MANUAL",
            Trigger::BetterResource => "BETTER_RESOURCE",
            Trigger::SourceShutdown => "SOURCE_SHUTDOWN",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedCheckpoint {
    pub meta: CheckpointMeta,
    pub site: Site,
    pub purge_deadline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub run_id: String,
    pub status: RunStatus,
    pub current_clique: Option<String>,
    pub checkpoints: Vec<TrackedCheckpoint>,
    pub output_files: Vec<PathBuf>,
    pub profile: Option<ResourceProfile>,
    /// Set when a run ended without completing.
    pub failure: Option<String>,
}

impl SimulationRecord {
    /// Newest checkpoint by iteration; ties prefer safe storage.
    pub fn newest_checkpoint(&self) -> Option<&TrackedCheckpoint> {
        self.checkpoints
            .iter()
            .max_by(|a, b| a.meta.iteration.cmp(&b.meta.iteration).then((a.site == Site::Store).cmp(&(b.site == Site::Store))))
    }

    pub fn has_safe_checkpoint(&self) -> bool {
        self.checkpoints.iter().any(|c| c.site == Site::Store)
    }

    fn safe_copy_of(&self, iteration: u64) -> Option<&TrackedCheckpoint> {
        self.checkpoints.iter().find(|c| c.site == Site::Store && c.meta.iteration == iteration)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationPlan {
    pub run_id: String,
    /// Clique the run is leaving; `None` when it vanished.
    pub source: Option<String>,
    pub target: String,
    /// Existing checkpoint to restart from. `None` asks the running worm
    /// for a fresh one.
    pub checkpoint: Option<TrackedCheckpoint>,
    pub trigger: Trigger,
    pub direct: bool,
}

impl MigrationPlan {
    /// Sites the checkpoint passes through, as `(from, to)` pairs.
    pub fn hops(&self) -> Vec<(Site, Site)> {
        let target = Site::clique(self.target.clone());
        let origin = match (&self.checkpoint, &self.source) {
            (Some(c), _) => c.site.clone(),
            (None, Some(s)) => Site::clique(s.clone()),
            (None, None) => Site::Store,
        };
        if self.direct || origin == Site::Store {
            vec![(origin, target)]
        } else {
            vec![(origin, Site::Store), (Site::Store, target)]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopReport {
    pub from: String,
    pub to: String,
    pub mbps: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationReport {
    pub run_id: String,
    pub trigger: Trigger,
    pub target: String,
    pub checkpoint_bytes: u64,
    pub charged_bytes: u64,
    pub checkpoint_write_seconds: f64,
    pub hops: Vec<HopReport>,
    pub restart_latency_seconds: f64,
    pub duration_seconds: f64,
    pub disk_touches: u64,
    /// Iteration the restarted run resumes from.
    pub resumed_iteration: u64,
}

/// A migration whose checkpoint has reached the target and is waiting for
/// the job-start request.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedMigration {
    pub plan: MigrationPlan,
    pub target_checkpoint: CheckpointMeta,
    pub started_at: f64,
    /// When the start request reaches the target clique.
    pub start_at: f64,
    checkpoint_bytes: u64,
    write_seconds: f64,
    hops: Vec<HopReport>,
    touches_before: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MigrationOutcome {
    Restarted { state: SolverState, report: MigrationReport, resume_at: f64 },
    Hibernated { reason: String },
    /// The source was still alive, so the run keeps going there.
    Aborted { reason: String },
    Lost { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum BeginOutcome {
    Staged(Box<StagedMigration>),
    Ended(MigrationOutcome),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evacuation {
    pub run_id: String,
    pub from: PathBuf,
    pub to: CheckpointMeta,
    pub started_at: f64,
    pub completed_at: f64,
    pub deadline: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledEvacuation {
    pub run_id: String,
    pub location: PathBuf,
    pub start_by: f64,
    pub deadline: f64,
}

/// Asks a clique to start a run.
pub trait JobStarter {
    fn start_job(&mut self, clique: &str, run_id: &str, at: f64) -> Result<(), String>;
}

impl<F: FnMut(&str, &str, f64) -> Result<(), String>> JobStarter for F {
    fn start_job(&mut self, clique: &str, run_id: &str, at: f64) -> Result<(), String> {
        self(clique, run_id, at)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MigratorError {
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("run `{0}` is already registered")]
    DuplicateRun(String),
    #[error("request for run `{0}` carries a bad token")]
    Unauthorized(String),
    #[error("run `{run_id}` is {status}, cannot {action}")]
    InvalidState { run_id: String, status: RunStatus, action: &'static str },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("run `{0}` has no tracked checkpoint; unrecoverable")]
    Unrecoverable(String),
    #[error(transparent)]
    Storage(#[from] CheckpointError),
    #[error("storage io: {0}")]
    Io(#[from] std::io::Error),
}

pub struct Migrator {
    storage: Storage,
    model: TransferModel,
    wan: BTreeMap<String, f64>,
    records: BTreeMap<String, SimulationRecord>,
    tokens: BTreeMap<String, String>,
    events: Vec<LogEvent>,
    announce_policy: RetryPolicy,
}

impl Migrator {
    pub fn new(storage: Storage, model: TransferModel) -> Self {
        Self {
            storage,
            model,
            wan: BTreeMap::new(),
            records: BTreeMap::new(),
            tokens: BTreeMap::new(),
            events: Vec::new(),
            announce_policy: RetryPolicy::default(),
        }
    }

    /// Records a clique's bandwidth to the store for the cost model.
    pub fn set_wan_bandwidth(&mut self, clique: &str, mbps: f64) {
        self.wan.insert(clique.to_string(), mbps);
    }

    pub fn model(&self) -> &TransferModel {
        &self.model
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn storage_mut(&mut self) -> &mut Storage {
        &mut self.storage
    }

    pub fn record(&self, run_id: &str) -> Option<&SimulationRecord> {
        self.records.get(run_id)
    }

    pub fn records(&self) -> impl Iterator<Item = &SimulationRecord> {
        self.records.values()
    }

    pub fn events(&self) -> &[LogEvent] {
        &self.events
    }

    pub fn drain_events(&mut self) -> Vec<LogEvent> {
        std::mem::take(&mut self.events)
    }

    fn log(&mut self, time: f64, run_id: &str, tag: EventTag, detail: impl Into<String>) {
        self.events.push(LogEvent::new(time, Some(run_id), tag, detail));
    }

    fn rec_mut(&mut self, run_id: &str) -> Result<&mut SimulationRecord, MigratorError> {
        self.records.get_mut(run_id).ok_or_else(|| MigratorError::UnknownRun(run_id.to_string()))
    }

    fn bandwidth(&self, from: &Site, to: &Site) -> f64 {
        let wan = |c: &str| self.wan.get(c).copied();
        self.model.bandwidth(from, to, &wan)
    }

    pub fn register_run(
        &mut self,
        run_id: &str,
        clique: &str,
        profile: Option<ResourceProfile>,
        token: &str,
        now: f64,
    ) -> Result<(), MigratorError> {
        if self.records.contains_key(run_id) {
            return Err(MigratorError::DuplicateRun(run_id.to_string()));
        }
        self.records.insert(
            run_id.to_string(),
            SimulationRecord {
                run_id: run_id.to_string(),
                status: RunStatus::Running,
                current_clique: Some(clique.to_string()),
                checkpoints: Vec::new(),
                output_files: Vec::new(),
                profile,
                failure: None,
            },
        );
        self.tokens.insert(run_id.to_string(), token.to_string());
        self.log(now, run_id, EventTag::RunStarted, format!("on {clique}"));
        Ok(())
    }

    /// Checks the per-run shared token carried by worm-side requests.
    pub fn authorize(&self, run_id: &str, token: &str) -> Result<(), MigratorError> {
        match self.tokens.get(run_id) {
            None => Err(MigratorError::UnknownRun(run_id.to_string())),
            Some(t) if t == token => Ok(()),
            Some(_) => Err(MigratorError::Unauthorized(run_id.to_string())),
        }
    }

    pub fn update_profile(&mut self, run_id: &str, profile: ResourceProfile) -> Result<(), MigratorError> {
        self.rec_mut(run_id)?.profile = Some(profile);
        Ok(())
    }

    pub fn track_output(&mut self, run_id: &str, path: PathBuf) -> Result<(), MigratorError> {
        self.rec_mut(run_id)?.output_files.push(path);
        Ok(())
    }

    pub fn track_checkpoint(&mut self, run_id: &str, meta: CheckpointMeta, site: Site) -> Result<(), MigratorError> {
        let rec = self.rec_mut(run_id)?;
        rec.checkpoints.retain(|c| c.meta.location != meta.location);
        rec.checkpoints.push(TrackedCheckpoint { meta, site, purge_deadline: None });
        Ok(())
    }

    pub fn untrack_checkpoint(&mut self, run_id: &str, location: &std::path::Path) -> Result<(), MigratorError> {
        self.rec_mut(run_id)?.checkpoints.retain(|c| c.meta.location != location);
        Ok(())
    }

    /// Writes a checkpoint of the live worm at its current site and tracks it.
    pub fn checkpoint_now(&mut self, state: &SolverState, site: &Site, now: f64) -> Result<CheckpointMeta, MigratorError> {
        let meta = self.storage.write_state(site, state, now)?;
        self.track_checkpoint(&state.run_id, meta.clone(), site.clone())?;
        self.log(now, &state.run_id, EventTag::CheckpointWritten, format!("iteration {} at {site}", meta.iteration));
        Ok(meta)
    }

    pub fn mark_done(&mut self, run_id: &str, now: f64) -> Result<(), MigratorError> {
        let rec = self.rec_mut(run_id)?;
        rec.status = RunStatus::Done;
        self.log(now, run_id, EventTag::Done, "computation complete");
        Ok(())
    }

    /// Ends a run that could not continue, keeping the reason.
    pub fn mark_failed(&mut self, run_id: &str, now: f64, reason: &str) -> Result<(), MigratorError> {
        let rec = self.rec_mut(run_id)?;
        rec.status = RunStatus::Done;
        rec.current_clique = None;
        rec.failure = Some(reason.to_string());
        self.log(now, run_id, EventTag::Done, format!("failed: {reason}"));
        Ok(())
    }

    /// The run's host disappeared without warning.
    pub fn mark_lost(&mut self, run_id: &str, now: f64, reason: &str) -> Result<(), MigratorError> {
        let rec = self.rec_mut(run_id)?;
        if rec.status == RunStatus::Done {
            return Err(MigratorError::InvalidState { run_id: run_id.into(), status: rec.status, action: "lose" });
        }
        rec.status = RunStatus::Lost;
        rec.current_clique = None;
        self.log(now, run_id, EventTag::Lost, reason.to_string());
        Ok(())
    }

    /// Stages a checkpoint towards the plan's target. With `worm` set the
    /// run is alive on `plan.source` and provides a fresh checkpoint.
    pub fn begin_migration(&mut self, plan: MigrationPlan, worm: Option<&SolverState>, now: f64) -> Result<BeginOutcome, MigratorError> {
        let run_id = plan.run_id.clone();
        let rec = self.rec_mut(&run_id)?;
        if rec.status == RunStatus::Done || rec.status == RunStatus::Migrating {
            return Err(MigratorError::InvalidState { run_id, status: rec.status, action: "migrate" });
        }
        if worm.is_some() && (rec.status != RunStatus::Running || plan.source.is_none()) {
            return Err(MigratorError::InvalidPlan("a fresh checkpoint needs a running source".into()));
        }
        if plan.source.as_deref() == Some(plan.target.as_str()) {
            return Err(MigratorError::InvalidPlan("target equals source".into()));
        }
        let previous_status = rec.status;
        let source_alive = worm.is_some();
        rec.status = RunStatus::Migrating;
        let touches_before = self.storage.disk_touches();
        let from = plan.source.as_deref().unwrap_or("-");
        self.log(now, &run_id, EventTag::MigrationStarted, format!("{} {from} -> {}", plan.trigger, plan.target));

        let target = Site::clique(plan.target.clone());
        let mut t = now;
        let mut hops = Vec::new();
        let mut write_seconds = 0.0;
        let checkpoint_bytes;
        let mut current: TrackedCheckpoint;

        match (worm, &plan.checkpoint) {
            (Some(state), _) => {
                let source = Site::clique(plan.source.clone().expect("checked above"));
                let actual = worm::checkpoint::encoded_len(state) as u64;
                checkpoint_bytes = actual;
                let charged = self.model.charged_bytes(actual);
                if plan.direct {
                    // Memory-to-memory: the state lands on the target's disk only.
                    let mbps = self.bandwidth(&source, &target);
                    if self.model.is_down(&source, &target) {
                        return self.staging_failed(&run_id, previous_status, source_alive, now, &source, &target);
                    }
                    let meta = self.storage.write_state(&target, state, now)?;
                    let seconds = self.model.hop_seconds(charged, mbps);
                    t += seconds;
                    hops.push(HopReport { from: source.to_string(), to: target.to_string(), mbps, seconds });
                    self.log(t, &run_id, EventTag::Staged, format!("{source} -> {target} (memory, {seconds:.3} s)"));
                    current = TrackedCheckpoint { meta, site: target.clone(), purge_deadline: None };
                    self.track(&run_id, current.clone());
                } else {
                    let meta = self.storage.write_state(&source, state, now)?;
                    write_seconds = self.model.write_seconds(charged);
                    t += write_seconds;
                    self.log(t, &run_id, EventTag::CheckpointWritten, format!("iteration {} at {source}", meta.iteration));
                    current = TrackedCheckpoint { meta, site: source, purge_deadline: None };
                    self.track(&run_id, current.clone());
                }
            }
            (None, Some(ck)) => {
                current = ck.clone();
                checkpoint_bytes = ck.meta.size_bytes;
            }
            (None, None) => {
                let rec = self.rec_mut(&run_id)?;
                rec.status = previous_status;
                return Err(MigratorError::InvalidPlan("no checkpoint and no live worm".into()));
            }
        }

        let charged = self.model.charged_bytes(checkpoint_bytes);
        let mut plan_hops = plan.hops();
        if worm.is_some() && plan.direct {
            plan_hops.clear();
        }
        for (from, to) in plan_hops {
            if from != current.site {
                return Err(MigratorError::InvalidPlan(format!("hop starts at {from} but checkpoint is at {}", current.site)));
            }
            if self.model.is_down(&from, &to) {
                return self.staging_failed(&run_id, previous_status, source_alive, t, &from, &to);
            }
            let mbps = self.bandwidth(&from, &to);
            let seconds = self.model.hop_seconds(charged, mbps);
            let meta = self.storage.copy(&current.meta, &to, t + seconds)?;
            t += seconds;
            hops.push(HopReport { from: from.to_string(), to: to.to_string(), mbps, seconds });
            self.log(t, &run_id, EventTag::Staged, format!("{from} -> {to} ({seconds:.3} s)"));
            current = TrackedCheckpoint { meta, site: to, purge_deadline: None };
            self.track(&run_id, current.clone());
        }

        Ok(BeginOutcome::Staged(Box::new(StagedMigration {
            plan,
            target_checkpoint: current.meta,
            started_at: now,
            start_at: t,
            checkpoint_bytes,
            write_seconds,
            hops,
            touches_before,
        })))
    }

    fn track(&mut self, run_id: &str, ck: TrackedCheckpoint) {
        if let Some(rec) = self.records.get_mut(run_id) {
            rec.checkpoints.retain(|c| c.meta.location != ck.meta.location);
            rec.checkpoints.push(ck);
        }
    }

    fn staging_failed(
        &mut self,
        run_id: &str,
        previous: RunStatus,
        source_alive: bool,
        now: f64,
        from: &Site,
        to: &Site,
    ) -> Result<BeginOutcome, MigratorError> {
        let attempts = self.model.max_retries + 1;
        let reason = format!("transfer {from} -> {to} failed after {attempts} attempts");
        self.log(now, run_id, EventTag::OperatorAlert, reason.clone());
        let has_safe = self.records.get(run_id).is_some_and(|r| r.has_safe_checkpoint());
        if source_alive {
            let rec = self.rec_mut(run_id)?;
            rec.status = previous;
            self.log(now, run_id, EventTag::MigrationAborted, reason.clone());
            return Ok(BeginOutcome::Ended(MigrationOutcome::Aborted { reason }));
        }
        if has_safe {
            let rec = self.rec_mut(run_id)?;
            rec.status = previous;
            self.hibernate(run_id, now)?;
            return Ok(BeginOutcome::Ended(MigrationOutcome::Hibernated { reason }));
        }
        let rec = self.rec_mut(run_id)?;
        rec.status = RunStatus::Lost;
        rec.current_clique = None;
        self.log(now, run_id, EventTag::Lost, reason.clone());
        Ok(BeginOutcome::Ended(MigrationOutcome::Lost { reason }))
    }

    /// Issues the job-start request, reads the checkpoint on the target and
    /// has the restarted run announce itself.
    pub fn finish_migration(&mut self, staged: StagedMigration, starter: &mut dyn JobStarter) -> Result<MigrationOutcome, MigratorError> {
        let run_id = staged.plan.run_id.clone();
        let target = staged.plan.target.clone();
        let now = staged.start_at;
        if let Err(reason) = starter.start_job(&target, &run_id, now) {
            self.log(now, &run_id, EventTag::StartFailed, format!("{target}: {reason}"));
            self.rec_mut(&run_id)?.status = RunStatus::Lost;
            self.hibernate(&run_id, now)?;
            return Ok(match self.records[&run_id].status {
                RunStatus::Hibernating => MigrationOutcome::Hibernated { reason },
                _ => MigrationOutcome::Lost { reason },
            });
        }
        self.log(now, &run_id, EventTag::JobStarted, target.clone());
        let state = match self.storage.read_state(&staged.target_checkpoint.location) {
            Ok(s) => s,
            Err(e) => {
                let reason = format!("restart could not read checkpoint: {e}");
                self.log(now, &run_id, EventTag::StartFailed, reason.clone());
                self.rec_mut(&run_id)?.status = RunStatus::Lost;
                self.hibernate(&run_id, now)?;
                return Ok(MigrationOutcome::Hibernated { reason });
            }
        };
        let latency = self.model.restart_latency_seconds;
        let resume_at = now + latency;
        self.log(resume_at, &run_id, EventTag::Restarted, format!("{target} from iteration {}", state.iteration));

        let policy = self.announce_policy;
        match worm::announce(self, &run_id, &target, resume_at, policy) {
            Ok(a) => {
                let note = if a.ack.duplicate { " (duplicate)" } else { "" };
                self.log(resume_at, &run_id, EventTag::Announced, format!("{target}{note}"));
            }
            Err(e) => self.log(resume_at, &run_id, EventTag::OperatorAlert, format!("announce failed: {e}")),
        }
        let tag = if staged.plan.trigger == Trigger::SourceShutdown { EventTag::Recovered } else { EventTag::Relocated };
        self.notify_user(&run_id, tag, &target, resume_at)?;

        let hop_total: f64 = staged.hops.iter().map(|h| h.seconds).sum();
        let report = MigrationReport {
            run_id: run_id.clone(),
            trigger: staged.plan.trigger,
            target,
            checkpoint_bytes: staged.checkpoint_bytes,
            charged_bytes: self.model.charged_bytes(staged.checkpoint_bytes),
            checkpoint_write_seconds: staged.write_seconds,
            hops: staged.hops,
            restart_latency_seconds: latency,
            duration_seconds: staged.write_seconds + hop_total + latency,
            disk_touches: self.storage.disk_touches() - staged.touches_before,
            resumed_iteration: state.iteration,
        };
        Ok(MigrationOutcome::Restarted { state, report, resume_at })
    }

    /// Both phases back to back, for callers that do not interleave other
    /// events between staging and restart.
    pub fn migrate(
        &mut self,
        plan: MigrationPlan,
        worm: Option<&SolverState>,
        starter: &mut dyn JobStarter,
        now: f64,
    ) -> Result<MigrationOutcome, MigratorError> {
        match self.begin_migration(plan, worm, now)? {
            BeginOutcome::Staged(staged) => self.finish_migration(*staged, starter),
            BeginOutcome::Ended(outcome) => Ok(outcome),
        }
    }

    /// Parks the run: its newest checkpoint goes to safe storage and the run
    /// waits for a suitable clique. Without any checkpoint the run is lost.
    pub fn hibernate(&mut self, run_id: &str, now: f64) -> Result<&SimulationRecord, MigratorError> {
        let storage = &self.storage;
        let rec = self.records.get_mut(run_id).ok_or_else(|| MigratorError::UnknownRun(run_id.to_string()))?;
        if rec.status == RunStatus::Hibernating {
            return Ok(&self.records[run_id]);
        }
        if rec.status == RunStatus::Done {
            return Err(MigratorError::InvalidState { run_id: run_id.into(), status: rec.status, action: "hibernate" });
        }
        rec.checkpoints.retain(|c| storage.exists(&c.meta.location));
        let newest = rec.newest_checkpoint().cloned();
        let safe = newest.as_ref().and_then(|n| rec.safe_copy_of(n.meta.iteration).cloned());
        let Some(newest) = newest else {
            rec.status = RunStatus::Lost;
            rec.current_clique = None;
            self.log(now, run_id, EventTag::Lost, "no checkpoint to hibernate with");
            self.log(now, run_id, EventTag::OperatorAlert, "run lost: no checkpoint anywhere");
            return Ok(&self.records[run_id]);
        };
        let mut at = now;
        if safe.is_none() {
            if self.model.is_down(&newest.site, &Site::Store) {
                let rec = self.rec_mut(run_id)?;
                rec.status = RunStatus::Lost;
                rec.current_clique = None;
                self.log(now, run_id, EventTag::OperatorAlert, format!("cannot reach safe storage from {}", newest.site));
                return Ok(&self.records[run_id]);
            }
            let mbps = self.bandwidth(&newest.site, &Site::Store);
            at += self.model.hop_seconds(self.model.charged_bytes(newest.meta.size_bytes), mbps);
            let meta = self.storage.copy(&newest.meta, &Site::Store, at)?;
            self.log(at, run_id, EventTag::Staged, format!("{} -> store (safe storage)", newest.site));
            self.track(run_id, TrackedCheckpoint { meta, site: Site::Store, purge_deadline: None });
        }
        let rec = self.rec_mut(run_id)?;
        rec.status = RunStatus::Hibernating;
        rec.current_clique = None;
        self.notify_user(run_id, EventTag::Hibernating, STORE_NAME, at)?;
        Ok(&self.records[run_id])
    }

    /// Builds a restart plan from the newest tracked checkpoint after the
    /// run's host went away. Iterations after that checkpoint are redone.
    pub fn recover(&mut self, run_id: &str, target: &str, now: f64) -> Result<MigrationPlan, MigratorError> {
        let direct = self.model.direct;
        let storage = &self.storage;
        let rec = self.records.get_mut(run_id).ok_or_else(|| MigratorError::UnknownRun(run_id.to_string()))?;
        if rec.status == RunStatus::Done {
            return Err(MigratorError::InvalidState { run_id: run_id.into(), status: rec.status, action: "recover" });
        }
        rec.checkpoints.retain(|c| storage.exists(&c.meta.location));
        let Some(newest) = rec.newest_checkpoint().cloned() else {
            rec.status = RunStatus::Done;
            rec.current_clique = None;
            rec.failure = Some("unrecoverable: no tracked checkpoint".into());
            self.log(now, run_id, EventTag::OperatorAlert, "unrecoverable: no tracked checkpoint");
            return Err(MigratorError::Unrecoverable(run_id.to_string()));
        };
        Ok(MigrationPlan {
            run_id: run_id.to_string(),
            source: None,
            target: target.to_string(),
            checkpoint: Some(newest),
            trigger: Trigger::SourceShutdown,
            direct,
        })
    }

    /// Plan for a running worm moving to `target`.
    pub fn plan_for(&self, run_id: &str, target: &str, trigger: Trigger) -> Result<MigrationPlan, MigratorError> {
        let rec = self.records.get(run_id).ok_or_else(|| MigratorError::UnknownRun(run_id.to_string()))?;
        Ok(MigrationPlan {
            run_id: run_id.to_string(),
            source: rec.current_clique.clone(),
            target: target.to_string(),
            checkpoint: None,
            trigger,
            direct: self.model.direct,
        })
    }

    /// Plan to wake a hibernating run on `target` from safe storage.
    pub fn wake_plan(&self, run_id: &str, target: &str) -> Result<MigrationPlan, MigratorError> {
        let rec = self.records.get(run_id).ok_or_else(|| MigratorError::UnknownRun(run_id.to_string()))?;
        if rec.status != RunStatus::Hibernating {
            return Err(MigratorError::InvalidState { run_id: run_id.into(), status: rec.status, action: "wake" });
        }
        let newest = rec
            .checkpoints
            .iter()
            .filter(|c| c.site == Site::Store)
            .max_by_key(|c| c.meta.iteration)
            .cloned()
            .ok_or_else(|| MigratorError::Unrecoverable(run_id.to_string()))?;
        Ok(MigrationPlan {
            run_id: run_id.to_string(),
            source: None,
            target: target.to_string(),
            checkpoint: Some(newest),
            trigger: Trigger::BetterResource,
            direct: false,
        })
    }

    pub fn notify_user(&mut self, run_id: &str, tag: EventTag, location: &str, now: f64) -> Result<(), MigratorError> {
        self.rec_mut(run_id)?;
        let detail = match tag {
            EventTag::Relocated => format!("RELOCATED to {location}"),
            EventTag::Recovered => format!("RECOVERED on {location}"),
            EventTag::Hibernating => "HIBERNATING in safe storage".to_string(),
            other => format!("{other} {location}"),
        };
        self.log(now, run_id, tag, detail);
        Ok(())
    }

    /// Latest time an evacuation of `ck` can start and still beat its
    /// purge deadline with `margin` seconds to spare.
    pub fn evacuation_start(&self, ck: &TrackedCheckpoint, deadline: f64, margin: f64) -> f64 {
        let mbps = self.bandwidth(&ck.site, &Site::Store);
        deadline - self.model.hop_seconds(self.model.charged_bytes(ck.meta.size_bytes), mbps) - margin
    }

    /// Announces that `site` purges its files at `deadline`. Returns, per
    /// checkpoint lacking a safe copy, when its evacuation must start.
    pub fn set_purge_deadline(&mut self, site: &str, deadline: f64, margin: f64, now: f64) -> Vec<ScheduledEvacuation> {
        let site = Site::clique(site);
        let mut pending = Vec::new();
        let runs: Vec<String> = self.records.keys().cloned().collect();
        for run_id in runs {
            let rec = self.records.get_mut(&run_id).expect("key from map");
            let mut hits = Vec::new();
            for ck in rec.checkpoints.iter_mut().filter(|c| c.site == site) {
                ck.purge_deadline = Some(deadline);
                hits.push(ck.clone());
            }
            for ck in hits {
                if self.records[&run_id].safe_copy_of(ck.meta.iteration).is_some() {
                    continue;
                }
                let start_by = self.evacuation_start(&ck, deadline, margin);
                self.log(now, &run_id, EventTag::PurgeScheduled, format!(
                    "{} purged at {deadline}; evacuation must start by {start_by}",
                    ck.meta.location.display()
                ));
                pending.push(ScheduledEvacuation { run_id: run_id.clone(), location: ck.meta.location.clone(), start_by, deadline });
            }
        }
        pending
    }

    /// Copies every checkpoint of the run whose evacuation window has opened
    /// to safe storage. Checkpoints already safe are left alone.
    pub fn evacuate_before_purge(&mut self, run_id: &str, now: f64, margin: f64) -> Result<Vec<Evacuation>, MigratorError> {
        let rec = self.records.get(run_id).ok_or_else(|| MigratorError::UnknownRun(run_id.to_string()))?;
        let candidates: Vec<TrackedCheckpoint> = rec
            .checkpoints
            .iter()
            .filter(|c| c.site != Site::Store && c.purge_deadline.is_some())
            .filter(|c| rec.safe_copy_of(c.meta.iteration).is_none())
            .cloned()
            .collect();
        let mut done = Vec::new();
        for ck in candidates {
            let deadline = ck.purge_deadline.expect("filtered");
            if now < self.evacuation_start(&ck, deadline, margin) {
                continue;
            }
            if self.model.is_down(&ck.site, &Site::Store) {
                self.log(now, run_id, EventTag::OperatorAlert, format!("cannot evacuate {}: link down", ck.meta.location.display()));
                continue;
            }
            let mbps = self.bandwidth(&ck.site, &Site::Store);
            let completed_at = now + self.model.hop_seconds(self.model.charged_bytes(ck.meta.size_bytes), mbps);
            self.log(now, run_id, EventTag::EvacuationStarted, ck.meta.location.display().to_string());
            if completed_at > deadline {
                self.log(now, run_id, EventTag::OperatorAlert, format!(
                    "evacuation of {} finishes at {completed_at}, after the purge at {deadline}",
                    ck.meta.location.display()
                ));
            }
            let meta = self.storage.copy(&ck.meta, &Site::Store, completed_at)?;
            self.log(completed_at, run_id, EventTag::Evacuated, format!("{} -> {}", ck.meta.location.display(), meta.location.display()));
            self.track(run_id, TrackedCheckpoint { meta: meta.clone(), site: Site::Store, purge_deadline: None });
            done.push(Evacuation { run_id: run_id.to_string(), from: ck.meta.location.clone(), to: meta, started_at: now, completed_at, deadline });
        }
        Ok(done)
    }

    /// Deletes files on `site` whose purge deadline has passed.
    pub fn purge_site(&mut self, site: &str, now: f64) -> Result<Vec<CheckpointMeta>, MigratorError> {
        let site = Site::clique(site);
        let mut purged = Vec::new();
        let runs: Vec<String> = self.records.keys().cloned().collect();
        for run_id in runs {
            let doomed: Vec<CheckpointMeta> = self.records[&run_id]
                .checkpoints
                .iter()
                .filter(|c| c.site == site && c.purge_deadline.is_some_and(|d| d <= now))
                .map(|c| c.meta.clone())
                .collect();
            for meta in doomed {
                self.storage.delete(&meta.location)?;
                self.untrack_checkpoint(&run_id, &meta.location)?;
                self.log(now, &run_id, EventTag::Purged, meta.location.display().to_string());
                purged.push(meta);
            }
        }
        Ok(purged)
    }
}

impl InformationService for Migrator {
    fn announce(&mut self, run_id: &str, location: &str, _at: f64) -> Result<Ack, AnnounceError> {
        let rec = self.records.get_mut(run_id).ok_or_else(|| AnnounceError::UnknownRun(run_id.to_string()))?;
        let duplicate = rec.status == RunStatus::Running && rec.current_clique.as_deref() == Some(location);
        rec.status = RunStatus::Running;
        rec.current_clique = Some(location.to_string());
        Ok(Ack { run_id: run_id.to_string(), location: location.to_string(), duplicate })
    }
}
