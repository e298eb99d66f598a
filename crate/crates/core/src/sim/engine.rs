use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scenario::{Action, ParamsUpdate, Scenario};
use super::{MetricsRecord, ScenarioOutcome, SimError};
use crate::classad::{check_requirements, compute_rank, Value};
use crate::contract::{ContractError, ContractParams, ContractState, QuantumVerdict};
use crate::events::{EventTag, LogEvent};
use crate::migrator::{MigrationOutcome, MigrationReport, Migrator, MigratorError, RunStatus, Site, Storage, Trigger};
use crate::resources::{derive_clique_ad, Clique, Directory, MachineSpec};
use crate::selector::{self, SelectionRequest, SelectionResponse};
use crate::worm::{iterations_in_quantum, resource_profile, BackupSchedule, SolverState};

/// Operator request. Validated when submitted, applied at the run's next
/// quantum boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum ControlCommand {
    SetContractParams {
        #[serde(default)]
        run_id: Option<String>,
        #[serde(flatten)]
        params: ParamsUpdate,
    },
    MigrateNow {
        #[serde(default)]
        run_id: Option<String>,
        #[serde(default)]
        target: Option<String>,
    },
    Pause {
        #[serde(default)]
        run_id: Option<String>,
    },
    Resume {
        #[serde(default)]
        run_id: Option<String>,
    },
}

impl ControlCommand {
    pub fn run_id(&self) -> Option<&str> {
        match self {
            ControlCommand::SetContractParams { run_id, .. }
            | ControlCommand::MigrateNow { run_id, .. }
            | ControlCommand::Pause { run_id }
            | ControlCommand::Resume { run_id } => run_id.as_deref(),
        }
    }

    fn describe(&self) -> String {
        match self {
            ControlCommand::SetContractParams { params, .. } => {
                format!("set contract {}", serde_json::to_string(params).unwrap_or_default())
            }
            ControlCommand::MigrateNow { target: Some(t), .. } => format!("migrate to {t}"),
            ControlCommand::MigrateNow { target: None, .. } => "migrate to selected clique".into(),
            ControlCommand::Pause { .. } => "pause".into(),
            ControlCommand::Resume { .. } => "resume".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CommandError {
    #[error("no run to apply the command to")]
    NoRun,
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("run `{run_id}` is {status}")]
    NotRunning { run_id: String, status: RunStatus },
    #[error("unknown or unavailable clique `{0}`")]
    UnknownClique(String),
    #[error("clique `{target}` rejected: {reason}")]
    TargetRejected { target: String, reason: String },
    #[error("no migration target: {0}")]
    NoTarget(String),
    #[error(transparent)]
    InvalidParams(#[from] ContractError),
    #[error("the scenario has finished")]
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunView {
    pub run_id: String,
    pub status: RunStatus,
    pub clique: Option<String>,
    pub iteration: u64,
    pub quantum: u64,
    pub contract: ContractParams,
    pub consecutive_violations: u32,
    pub average: Option<f64>,
    pub paused: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusView {
    pub time: f64,
    pub finished: bool,
    pub runs: Vec<RunView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliqueView {
    pub name: String,
    pub cpu_count: u64,
    pub min_mem_size: u64,
    pub min_cpu_speed: f64,
    pub max_cpu_load: f64,
    pub rank: f64,
    pub matches: bool,
    pub expires_at: f64,
}

#[derive(Debug, Clone)]
enum Item {
    Scenario(Action),
    QuantumStart { run: String, epoch: u64 },
    QuantumEnd { run: String, epoch: u64 },
    /// A log event stamped in the future. `transit` ties it to one move of
    /// a run so the rest can be dropped when that move is aborted.
    Emit { event: LogEvent, transit: Option<(String, u64)> },
    Report { report: Box<MigrationReport>, transit: u64 },
    Evacuate { run: String },
    Purge { clique: String },
    Command(ControlCommand),
}

struct Queued {
    time: f64,
    seq: u64,
    item: Item,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // Reversed so the max-heap pops the earliest time, then the earliest insert.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

struct Quantum {
    iterations: u64,
    elapsed: f64,
}

struct Run {
    state: SolverState,
    clique: Option<String>,
    params: ContractParams,
    contract: Option<ContractState>,
    /// Bumped whenever the run leaves a clique; stale quantum events are dropped.
    epoch: u64,
    quantum: u64,
    current: Option<Quantum>,
    pending_params: Option<ContractParams>,
    pending_migrate: Option<Option<String>>,
    pending_better: bool,
    pause_requested: bool,
    paused: bool,
    backups: Option<BackupSchedule>,
    /// Counts moves; bumped when a move is aborted mid-flight.
    transit: u64,
    /// When the current move puts the run on its new clique.
    arriving_at: Option<f64>,
}

/// The discrete-event engine. Owns the clock, the queue, the directory, the
/// migrator and every run.
pub struct Engine {
    scenario: Scenario,
    request: SelectionRequest,
    now: f64,
    seq: u64,
    queue: BinaryHeap<Queued>,
    directory: Directory,
    defs: BTreeMap<String, Clique>,
    up: BTreeSet<String>,
    migrator: Migrator,
    runs: BTreeMap<String, Run>,
    rng: ChaCha8Rng,
    metrics: Vec<MetricsRecord>,
    events: Vec<LogEvent>,
    migrations: Vec<MigrationReport>,
    finished: bool,
}

impl Engine {
    /// `root` holds every checkpoint file the scenario writes.
    pub fn new(scenario: Scenario, root: &Path) -> Result<Self, SimError> {
        scenario.validate()?;
        let request = SelectionRequest::new(scenario.parsed_request()?, "worm")
            .map_err(|e| SimError::Scenario(super::ScenarioError::Invalid(e.to_string())))?;
        let migrator = Migrator::new(Storage::new(root), scenario.transfer.clone());
        let defs = scenario.cliques.iter().map(|c| (c.name.clone(), c.clone())).collect();
        let mut engine = Self {
            request,
            now: 0.0,
            seq: 0,
            queue: BinaryHeap::new(),
            directory: Directory::new(),
            defs,
            up: BTreeSet::new(),
            migrator,
            runs: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            metrics: Vec::new(),
            events: Vec::new(),
            migrations: Vec::new(),
            finished: false,
            scenario,
        };
        for e in engine.scenario.events.clone() {
            engine.schedule(e.time, Item::Scenario(e.action));
        }
        Ok(engine)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn metrics(&self) -> &[MetricsRecord] {
        &self.metrics
    }

    pub fn events(&self) -> &[LogEvent] {
        &self.events
    }

    pub fn migrations(&self) -> &[MigrationReport] {
        &self.migrations
    }

    pub fn migrator(&self) -> &Migrator {
        &self.migrator
    }

    pub fn directory(&self) -> &Directory {
        &self.directory
    }

    pub fn metrics_since(&self, since: usize) -> &[MetricsRecord] {
        &self.metrics[since.min(self.metrics.len())..]
    }

    pub fn events_since(&self, since: usize) -> &[LogEvent] {
        &self.events[since.min(self.events.len())..]
    }

    fn schedule(&mut self, time: f64, item: Item) {
        self.seq += 1;
        self.queue.push(Queued { time, seq: self.seq, item });
    }

    /// Time of the next event that will be processed, if any.
    pub fn next_time(&self) -> Option<f64> {
        if self.finished {
            return None;
        }
        self.queue.peek().map(|q| q.time).filter(|&t| t <= self.scenario.duration)
    }

    /// Processes one event. Returns `false` once the scenario is over.
    pub fn step(&mut self) -> Result<bool, SimError> {
        if self.next_time().is_none() {
            self.finished = true;
            return Ok(false);
        }
        let Queued { time, item, .. } = self.queue.pop().expect("peeked");
        self.now = self.now.max(time);
        self.keep_alive();
        self.handle(item)?;
        Ok(true)
    }

    /// Processes every event up to `t` and advances the clock to `t`.
    pub fn run_until(&mut self, t: f64) -> Result<(), SimError> {
        while self.next_time().is_some_and(|n| n <= t) {
            self.step()?;
        }
        if self.next_time().is_none() {
            self.finished = true;
        }
        self.now = self.now.max(t.min(self.scenario.duration));
        Ok(())
    }

    pub fn run_to_end(mut self) -> Result<ScenarioOutcome, SimError> {
        while self.step()? {}
        Ok(self.into_outcome())
    }

    pub fn into_outcome(self) -> ScenarioOutcome {
        ScenarioOutcome {
            metrics: self.metrics,
            events: self.events,
            records: self.migrator.records().cloned().collect(),
            final_states: self.runs.into_iter().map(|(id, r)| (id, r.state)).collect(),
            migrations: self.migrations,
        }
    }

    /// Cliques that are up re-register before their TTL runs out; anything
    /// else ages out of the directory.
    fn keep_alive(&mut self) {
        for name in &self.up {
            let _ = self.directory.heartbeat(name, self.now);
        }
        for gone in self.directory.refresh(self.now) {
            self.up.remove(&gone);
            self.log(LogEvent::new(self.now, None, EventTag::CliqueExpired, gone));
        }
    }

    fn log(&mut self, event: LogEvent) {
        if let Some(run_id) = event.run_id.clone() {
            let (clique, quantum) = match self.runs.get(&run_id) {
                Some(r) => (r.clique.clone(), r.quantum),
                None => (None, 0),
            };
            self.push_metric(MetricsRecord {
                time: event.time,
                run_id,
                quantum,
                clique,
                event: Some(event.tag),
                detail: Some(event.detail.clone()),
                ..MetricsRecord::default()
            });
        }
        self.events.push(event);
    }

    fn push_metric(&mut self, mut record: MetricsRecord) {
        record.index = self.metrics.len() as u64;
        self.metrics.push(record);
    }

    fn emit(&mut self, event: LogEvent, transit: Option<(String, u64)>) {
        if event.time > self.now {
            self.schedule(event.time, Item::Emit { event, transit });
        } else {
            self.log(event);
        }
    }

    fn in_transit(&self, transit: &Option<(String, u64)>) -> bool {
        match transit {
            Some((run, t)) => self.runs.get(run).is_some_and(|r| r.transit == *t),
            None => true,
        }
    }

    fn note(&mut self, run_id: Option<&str>, tag: EventTag, detail: impl Into<String>) {
        self.log(LogEvent::new(self.now, run_id, tag, detail));
    }

    fn flush_migrator(&mut self) {
        for e in self.migrator.drain_events() {
            self.emit(e, None);
        }
    }

    /// Like `flush_migrator`, for the events of a move of `run_id`.
    fn flush_move(&mut self, run_id: &str) {
        let transit = self.runs.get(run_id).map(|r| (run_id.to_string(), r.transit));
        for e in self.migrator.drain_events() {
            self.emit(e, transit.clone());
        }
    }

    fn handle(&mut self, item: Item) -> Result<(), SimError> {
        match item {
            Item::Scenario(action) => self.handle_action(action),
            Item::QuantumStart { run, epoch } => {
                if self.runs.get(&run).is_some_and(|r| r.epoch == epoch) {
                    self.boundary_start(&run)?;
                }
                Ok(())
            }
            Item::QuantumEnd { run, epoch } => {
                if self.runs.get(&run).is_some_and(|r| r.epoch == epoch) {
                    self.end_quantum(&run)?;
                }
                Ok(())
            }
            Item::Emit { event, transit } => {
                if self.in_transit(&transit) {
                    self.log(event);
                }
                Ok(())
            }
            Item::Report { report, transit } => {
                if !self.in_transit(&Some((report.run_id.clone(), transit))) {
                    return Ok(());
                }
                let detail = format!("{:.3} s, {} disk touches", report.duration_seconds, report.disk_touches);
                self.note(Some(&report.run_id.clone()), EventTag::MigrationCompleted, detail);
                if let Some(last) = self.metrics.last_mut() {
                    last.report = Some(report.clone());
                }
                self.migrations.push(*report);
                Ok(())
            }
            Item::Evacuate { run } => {
                let margin = self.scenario.policy.evacuation_margin;
                self.migrator.evacuate_before_purge(&run, self.now, margin)?;
                self.flush_migrator();
                Ok(())
            }
            Item::Purge { clique } => {
                self.migrator.purge_site(&clique, self.now)?;
                self.flush_migrator();
                Ok(())
            }
            Item::Command(cmd) => self.apply_command(cmd),
        }
    }

    fn handle_action(&mut self, action: Action) -> Result<(), SimError> {
        let now = self.now;
        match action {
            Action::RegisterClique { clique, ttl_seconds } => {
                let def = self.defs[&clique].clone();
                let ttl = ttl_seconds.unwrap_or(self.scenario.directory.ttl_seconds);
                self.migrator.set_wan_bandwidth(&clique, def.wan_bandwidth_mbps);
                let fresh = self.directory.register(def, ttl, now)?;
                self.up.insert(clique.clone());
                self.note(None, EventTag::CliqueRegistered, clique.clone());
                if fresh {
                    self.directory_grew(&clique)?;
                }
            }
            Action::DeregisterClique { clique } => self.source_loss(&clique, true, EventTag::CliqueDeregistered)?,
            Action::KillSource { clique, graceful } => self.source_loss(&clique, graceful, EventTag::SourceKilled)?,
            Action::InjectLoad { clique, machine, delta } => {
                let def = self.defs.get_mut(&clique).expect("validated clique");
                match def.apply_load(machine.as_deref(), delta, now) {
                    Ok(()) => {
                        if let Some(live) = self.directory.clique_mut(&clique) {
                            live.members = def.members.clone();
                        }
                        let target = machine.map(|m| format!("{clique}/{m}")).unwrap_or(clique);
                        self.note(None, EventTag::LoadInjected, format!("{target} {delta:+}"));
                    }
                    Err(e) => self.note(None, EventTag::OperatorAlert, format!("load change rejected: {e}")),
                }
            }
            Action::StartRun { run_id, clique, seed } => self.start_run(&run_id, clique.as_deref(), seed)?,
            Action::PurgeDeadline { clique, deadline } => {
                let margin = self.scenario.policy.evacuation_margin;
                let pending = self.migrator.set_purge_deadline(&clique, deadline, margin, now);
                self.flush_migrator();
                for p in pending {
                    self.schedule(p.start_by.max(now), Item::Evacuate { run: p.run_id });
                }
                self.schedule(deadline, Item::Purge { clique });
            }
            Action::ManualMigrate { run_id, target } => self.apply_command(ControlCommand::MigrateNow { run_id, target })?,
            Action::SetContractParams { run_id, params } => {
                self.apply_command(ControlCommand::SetContractParams { run_id, params })?
            }
            Action::Annotation { text } => self.note(None, EventTag::Annotation, text),
        }
        Ok(())
    }

    fn machine_for(&self, clique: &str) -> Option<MachineSpec> {
        self.directory
            .get(clique, self.now)
            .or_else(|| self.defs.get(clique))
            .map(Clique::effective_machine)
    }

    fn start_run(&mut self, run_id: &str, clique: Option<&str>, seed: Option<u64>) -> Result<(), SimError> {
        let now = self.now;
        let w = self.scenario.workload.clone();
        let state = SolverState::seeded(w.dims, w.alpha, seed.unwrap_or(self.scenario.seed), run_id)?;
        let token = format!("{:016x}", self.rng.gen::<u64>());
        let chosen = match clique {
            Some(c) => self.check_target(c).map(|_| c.to_string()).map_err(|e| e.to_string()),
            None => match selector::select(&self.request, &self.directory, now) {
                SelectionResponse::Success { clique_name, rank, .. } => {
                    self.note(Some(run_id), EventTag::SelectionSucceeded, format!("{clique_name} rank {rank}"));
                    Ok(clique_name)
                }
                SelectionResponse::Failure { reason } => Err(reason),
            },
        };
        let placeholder = chosen.as_deref().unwrap_or("-").to_string();
        self.migrator.register_run(run_id, &placeholder, Some(resource_profile(&state)), &token, now)?;
        let backups = match (&chosen, w.backup_interval) {
            (Ok(c), Some(interval)) => {
                let dir = self.migrator.storage().site_dir(&Site::clique(c.clone()));
                Some(BackupSchedule::new(interval, w.backup_retention, dir, now)?)
            }
            _ => None,
        };
        self.runs.insert(
            run_id.to_string(),
            Run {
                state,
                clique: chosen.as_ref().ok().cloned(),
                params: self.scenario.contract,
                contract: None,
                epoch: 0,
                quantum: 0,
                current: None,
                pending_params: None,
                pending_migrate: None,
                pending_better: false,
                pause_requested: false,
                paused: false,
                backups,
                transit: 0,
                arriving_at: None,
            },
        );
        self.flush_migrator();
        match chosen {
            Ok(_) => self.begin_quantum(run_id),
            Err(reason) => {
                self.note(Some(run_id), EventTag::StartFailed, reason.clone());
                self.migrator.mark_failed(run_id, now, &reason)?;
                self.flush_migrator();
            }
        }
        Ok(())
    }

    /// A boundary where the run may be held by a pause.
    fn boundary_start(&mut self, run_id: &str) -> Result<(), SimError> {
        let run = self.runs.get_mut(run_id).expect("known run");
        if run.pause_requested {
            run.pause_requested = false;
            run.paused = true;
            self.note(Some(run_id), EventTag::Paused, "held at quantum boundary");
            return Ok(());
        }
        self.begin_quantum(run_id);
        Ok(())
    }

    fn begin_quantum(&mut self, run_id: &str) {
        let now = self.now;
        let Some(clique) = self.runs[run_id].clique.clone() else { return };
        let machine = self.machine_for(&clique);
        let run = self.runs.get_mut(run_id).expect("known run");
        let mut changed = None;
        if let Some(p) = run.pending_params.take() {
            run.params = p;
            if let Some(c) = run.contract.as_mut() {
                c.set_params(p).expect("validated on submit");
            }
            changed = Some(p);
        }
        let q = run.params.quantum_seconds;
        let full = machine.map_or(0, |m| iterations_in_quantum(&m, q));
        let remaining = self.scenario.workload.iterations.map_or(u64::MAX, |n| n.saturating_sub(run.state.iteration));
        let iterations = full.min(remaining);
        // A final partial quantum ends early so its rate stays comparable.
        let elapsed = if iterations < full { q * iterations as f64 / full as f64 } else { q };
        run.current = Some(Quantum { iterations, elapsed });
        let epoch = run.epoch;
        if let Some(p) = changed {
            self.note(Some(run_id), EventTag::ParamsChanged, serde_json::to_string(&p).unwrap_or_default());
        }
        self.schedule(now + elapsed, Item::QuantumEnd { run: run_id.to_string(), epoch });
    }

    fn end_quantum(&mut self, run_id: &str) -> Result<(), SimError> {
        let now = self.now;
        let run = self.runs.get_mut(run_id).expect("known run");
        let Some(Quantum { iterations, elapsed }) = run.current.take() else { return Ok(()) };
        run.state.advance(iterations);
        run.quantum += 1;
        let rate = iterations as f64 / elapsed;
        let verdict: Option<QuantumVerdict> = match run.contract.as_mut() {
            Some(c) => Some(c.observe_rate(rate)),
            None if rate > 0.0 => {
                let c = ContractState::init(rate, run.params)?;
                let v = c.history()[0];
                run.contract = Some(c);
                Some(v)
            }
            None => None,
        };
        let record = MetricsRecord {
            time: now,
            run_id: run_id.to_string(),
            quantum: run.quantum,
            contract_quantum: verdict.map(|v| v.index),
            clique: run.clique.clone(),
            iterations: Some(iterations),
            iteration: Some(run.state.iteration),
            rate: Some(rate),
            average: verdict.map(|v| v.average),
            degradation: verdict.map(|v| v.degradation),
            threshold: Some(run.params.degradation_threshold),
            violation: verdict.is_some_and(|v| v.violation),
            ..MetricsRecord::default()
        };
        self.push_metric(record);

        self.backup(run_id)?;
        let run = &self.runs[run_id];
        if self.scenario.workload.iterations.is_some_and(|n| run.state.iteration >= n) {
            self.migrator.mark_done(run_id, now)?;
            self.flush_migrator();
            return Ok(());
        }

        if let Some(target) = self.runs.get_mut(run_id).expect("known run").pending_migrate.take() {
            match self.resolve_target(run_id, target.as_deref()) {
                Ok(t) => {
                    if self.migrate_running(run_id, &t, Trigger::Manual)? {
                        return Ok(());
                    }
                }
                Err(e) => self.note(Some(run_id), EventTag::CommandRejected, format!("migrate: {e}")),
            }
        }

        if verdict.is_some_and(|v| v.trigger) {
            let streak = self.runs[run_id].contract.as_ref().map_or(0, |c| c.consecutive_violations());
            self.note(Some(run_id), EventTag::ContractTrigger, format!("{streak} consecutive violations"));
            if let Some(t) = self.select_better(run_id) {
                if self.migrate_running(run_id, &t, Trigger::ContractViolation)? {
                    return Ok(());
                }
            }
            // Nothing better to go to: stay and require a fresh streak.
            if let Some(c) = self.runs.get_mut(run_id).expect("known run").contract.as_mut() {
                c.rearm();
            }
        }

        let run = self.runs.get_mut(run_id).expect("known run");
        if std::mem::take(&mut run.pending_better) {
            if let Some(t) = self.select_better(run_id) {
                if self.migrate_running(run_id, &t, Trigger::BetterResource)? {
                    return Ok(());
                }
            }
        }
        self.boundary_start(run_id)
    }

    fn backup(&mut self, run_id: &str) -> Result<(), SimError> {
        let now = self.now;
        let root = self.migrator.storage().root().to_path_buf();
        let run = self.runs.get_mut(run_id).expect("known run");
        let (Some(schedule), Some(clique)) = (run.backups.as_mut(), run.clique.clone()) else { return Ok(()) };
        let Some(written) = schedule.tick(&run.state, now)? else { return Ok(()) };
        let relative = |p: &Path| p.strip_prefix(&root).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
        let mut meta = written.meta;
        meta.location = relative(&meta.location);
        let detail = format!("iteration {} at {clique}", meta.iteration);
        self.migrator.track_checkpoint(run_id, meta, Site::clique(clique))?;
        for old in written.pruned {
            self.migrator.untrack_checkpoint(run_id, &relative(&old.location))?;
        }
        self.note(Some(run_id), EventTag::BackupWritten, detail);
        Ok(())
    }

    /// A live clique with a strictly higher rank than the run's current one.
    fn select_better(&mut self, run_id: &str) -> Option<String> {
        let current = self.runs[run_id].clique.clone()?;
        let req = selector::exclude_current(&self.request, &current);
        match selector::select(&req, &self.directory, self.now) {
            SelectionResponse::Success { clique_name, rank, .. } => {
                self.note(Some(run_id), EventTag::SelectionSucceeded, format!("{clique_name} rank {rank}"));
                Some(clique_name)
            }
            SelectionResponse::Failure { reason } => {
                self.note(Some(run_id), EventTag::SelectionFailed, reason);
                None
            }
        }
    }

    /// Moves a running worm. Returns `true` when it left its clique.
    fn migrate_running(&mut self, run_id: &str, target: &str, trigger: Trigger) -> Result<bool, SimError> {
        let now = self.now;
        let plan = self.migrator.plan_for(run_id, target, trigger)?;
        let state = self.runs[run_id].state.clone();
        let directory = &self.directory;
        let mut starter = |c: &str, _: &str, at: f64| {
            if directory.get(c, at).is_some() {
                Ok(())
            } else {
                Err(format!("clique `{c}` is not available"))
            }
        };
        let outcome = match self.migrator.migrate(plan, Some(&state), &mut starter, now) {
            Ok(o) => o,
            Err(MigratorError::InvalidPlan(reason)) => {
                self.flush_migrator();
                self.note(Some(run_id), EventTag::MigrationAborted, reason);
                return Ok(false);
            }
            Err(e) => return Err(e.into()),
        };
        self.flush_move(run_id);
        Ok(self.apply_outcome(run_id, target, outcome))
    }

    fn apply_outcome(&mut self, run_id: &str, target: &str, outcome: MigrationOutcome) -> bool {
        let site_dir = self.migrator.storage().site_dir(&Site::clique(target));
        let run = self.runs.get_mut(run_id).expect("known run");
        match outcome {
            MigrationOutcome::Restarted { state, report, resume_at } => {
                run.state = state;
                run.clique = Some(target.to_string());
                run.contract = None;
                run.current = None;
                run.pending_better = false;
                run.epoch += 1;
                if let Some(b) = run.backups.as_mut() {
                    b.relocate(site_dir, resume_at);
                }
                run.arriving_at = Some(resume_at);
                let epoch = run.epoch;
                let transit = run.transit;
                let profile = resource_profile(&run.state);
                let _ = self.migrator.update_profile(run_id, profile);
                self.schedule(resume_at, Item::Report { report: Box::new(report), transit });
                self.schedule(resume_at, Item::QuantumStart { run: run_id.to_string(), epoch });
                true
            }
            MigrationOutcome::Aborted { .. } => false,
            MigrationOutcome::Hibernated { .. } | MigrationOutcome::Lost { .. } => {
                run.clique = None;
                run.current = None;
                run.epoch += 1;
                true
            }
        }
    }

    fn source_loss(&mut self, clique: &str, graceful: bool, tag: EventTag) -> Result<(), SimError> {
        let now = self.now;
        self.directory.deregister(clique);
        self.up.remove(clique);
        self.note(None, tag, format!("{clique}{}", if graceful { " (graceful)" } else { "" }));
        let victims: Vec<String> = self
            .runs
            .iter()
            .filter(|(_, r)| r.clique.as_deref() == Some(clique))
            .map(|(id, _)| id.clone())
            .collect();
        for run_id in victims {
            if self.migrator.record(&run_id).is_some_and(|r| r.status != RunStatus::Running) {
                continue;
            }
            let run = self.runs.get_mut(&run_id).expect("known run");
            run.epoch += 1;
            run.current = None;
            run.clique = None;
            if run.arriving_at.take().is_some_and(|t| t >= now) {
                // Still on its way here: the move fails, and the checkpoint
                // it carried is the one to recover from.
                run.transit += 1;
                self.note(Some(&run_id), EventTag::MigrationAborted, format!("{clique} lost before the restart"));
                self.recover_run(&run_id)?;
                continue;
            }
            if graceful {
                let state = run.state.clone();
                self.migrator.checkpoint_now(&state, &Site::clique(clique), now)?;
            } else {
                self.migrator.mark_lost(&run_id, now, &format!("{clique} vanished"))?;
            }
            self.flush_migrator();
            self.recover_run(&run_id)?;
        }
        Ok(())
    }

    fn recover_run(&mut self, run_id: &str) -> Result<(), SimError> {
        let now = self.now;
        match selector::select(&self.request, &self.directory, now) {
            SelectionResponse::Success { clique_name, rank, .. } => {
                self.note(Some(run_id), EventTag::SelectionSucceeded, format!("{clique_name} rank {rank}"));
                let plan = match self.migrator.recover(run_id, &clique_name, now) {
                    Ok(p) => p,
                    Err(MigratorError::Unrecoverable(_)) => {
                        self.flush_migrator();
                        return Ok(());
                    }
                    Err(e) => return Err(e.into()),
                };
                self.restart_from_checkpoint(run_id, &clique_name, plan)
            }
            SelectionResponse::Failure { reason } => {
                self.note(Some(run_id), EventTag::SelectionFailed, reason);
                self.migrator.hibernate(run_id, now)?;
                self.flush_migrator();
                Ok(())
            }
        }
    }

    fn restart_from_checkpoint(&mut self, run_id: &str, target: &str, plan: crate::migrator::MigrationPlan) -> Result<(), SimError> {
        let now = self.now;
        let directory = &self.directory;
        let mut starter = |c: &str, _: &str, at: f64| {
            if directory.get(c, at).is_some() {
                Ok(())
            } else {
                Err(format!("clique `{c}` is not available"))
            }
        };
        let outcome = self.migrator.migrate(plan, None, &mut starter, now)?;
        self.flush_move(run_id);
        self.apply_outcome(run_id, target, outcome);
        Ok(())
    }

    /// Reacts to a newly visible clique: wakes hibernating runs and tells
    /// running ones to look for a better home at their next boundary.
    fn directory_grew(&mut self, clique: &str) -> Result<(), SimError> {
        let now = self.now;
        let ids: Vec<String> = self.runs.keys().cloned().collect();
        for run_id in ids {
            let status = self.migrator.record(&run_id).map(|r| r.status);
            match status {
                Some(RunStatus::Hibernating) => {
                    if let SelectionResponse::Success { clique_name, rank, .. } = selector::select(&self.request, &self.directory, now) {
                        self.note(Some(&run_id), EventTag::SelectionSucceeded, format!("{clique_name} rank {rank}"));
                        let plan = self.migrator.wake_plan(&run_id, &clique_name)?;
                        self.restart_from_checkpoint(&run_id, &clique_name, plan)?;
                    }
                }
                Some(RunStatus::Running) if self.scenario.policy.better_resource => {
                    let run = self.runs.get_mut(&run_id).expect("known run");
                    if run.clique.as_deref() != Some(clique) {
                        run.pending_better = true;
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn resolve_run(&self, run_id: Option<&str>) -> Result<String, CommandError> {
        match run_id {
            Some(id) if self.runs.contains_key(id) => Ok(id.to_string()),
            Some(id) => Err(CommandError::UnknownRun(id.to_string())),
            None => self
                .runs
                .keys()
                .find(|id| self.migrator.record(id).is_some_and(|r| r.status != RunStatus::Done))
                .or_else(|| self.runs.keys().next())
                .cloned()
                .ok_or(CommandError::NoRun),
        }
    }

    fn check_target(&self, target: &str) -> Result<(), CommandError> {
        let clique = self.directory.get(target, self.now).ok_or_else(|| CommandError::UnknownClique(target.to_string()))?;
        let ad = derive_clique_ad(clique, self.now);
        match check_requirements(&self.request.request_ad, &ad) {
            Ok(true) => Ok(()),
            Ok(false) => Err(CommandError::TargetRejected { target: target.into(), reason: "requirements not met".into() }),
            Err(e) => Err(CommandError::TargetRejected { target: target.into(), reason: e.to_string() }),
        }
    }

    /// Explicit targets are checked against the requirements; otherwise the
    /// selector picks the best clique other than the current one.
    fn resolve_target(&self, run_id: &str, target: Option<&str>) -> Result<String, CommandError> {
        let current = self.runs.get(run_id).and_then(|r| r.clique.clone());
        match target {
            Some(t) => {
                if current.as_deref() == Some(t) {
                    return Err(CommandError::TargetRejected { target: t.into(), reason: "already running there".into() });
                }
                self.check_target(t)?;
                Ok(t.to_string())
            }
            None => {
                let mut others = self.directory.clone();
                if let Some(c) = &current {
                    others.deregister(c);
                }
                match selector::select(&self.request, &others, self.now) {
                    SelectionResponse::Success { clique_name, .. } => Ok(clique_name),
                    SelectionResponse::Failure { reason } => Err(CommandError::NoTarget(reason)),
                }
            }
        }
    }

    /// Checks a command against the current state without applying it.
    pub fn validate_command(&self, cmd: &ControlCommand) -> Result<String, CommandError> {
        if self.finished {
            return Err(CommandError::Finished);
        }
        let run_id = self.resolve_run(cmd.run_id())?;
        let run = &self.runs[&run_id];
        let status = self.migrator.record(&run_id).map(|r| r.status).unwrap_or(RunStatus::Done);
        if status == RunStatus::Done {
            return Err(CommandError::NotRunning { run_id, status });
        }
        match cmd {
            ControlCommand::SetContractParams { params, .. } => {
                params.apply(run.pending_params.as_ref().unwrap_or(&run.params)).validate()?;
            }
            ControlCommand::MigrateNow { target, .. } => {
                if status != RunStatus::Running || run.clique.is_none() {
                    return Err(CommandError::NotRunning { run_id, status });
                }
                self.resolve_target(&run_id, target.as_deref())?;
            }
            ControlCommand::Pause { .. } | ControlCommand::Resume { .. } => {}
        }
        Ok(run_id)
    }

    /// Validates and queues an operator command at the current time.
    pub fn submit(&mut self, cmd: ControlCommand) -> Result<String, CommandError> {
        let run_id = self.validate_command(&cmd)?;
        self.schedule(self.now, Item::Command(cmd));
        Ok(run_id)
    }

    fn apply_command(&mut self, cmd: ControlCommand) -> Result<(), SimError> {
        let run_id = match self.validate_command(&cmd) {
            Ok(id) => id,
            Err(e) => {
                let run = cmd.run_id().map(str::to_string).or_else(|| self.resolve_run(None).ok());
                self.note(run.as_deref(), EventTag::CommandRejected, format!("{}: {e}", cmd.describe()));
                return Ok(());
            }
        };
        self.note(Some(&run_id), EventTag::CommandAccepted, cmd.describe());
        let run = self.runs.get_mut(&run_id).expect("validated");
        match cmd {
            ControlCommand::SetContractParams { params, .. } => {
                run.pending_params = Some(params.apply(run.pending_params.as_ref().unwrap_or(&run.params)));
            }
            ControlCommand::MigrateNow { target, .. } => run.pending_migrate = Some(target),
            ControlCommand::Pause { .. } => {
                if !run.paused {
                    run.pause_requested = true;
                }
            }
            ControlCommand::Resume { .. } => {
                run.pause_requested = false;
                if std::mem::take(&mut run.paused) {
                    self.note(Some(&run_id), EventTag::Resumed, "quantum restarted");
                    self.begin_quantum(&run_id);
                }
            }
        }
        Ok(())
    }

    pub fn status(&self) -> StatusView {
        let runs = self
            .runs
            .iter()
            .map(|(id, r)| {
                let rec = self.migrator.record(id);
                RunView {
                    run_id: id.clone(),
                    status: rec.map(|r| r.status).unwrap_or(RunStatus::Done),
                    clique: r.clique.clone(),
                    iteration: r.state.iteration,
                    quantum: r.quantum,
                    contract: r.params,
                    consecutive_violations: r.contract.as_ref().map_or(0, |c| c.consecutive_violations()),
                    average: r.contract.as_ref().map(|c| c.average()),
                    paused: r.paused,
                }
            })
            .collect();
        StatusView { time: self.now, finished: self.finished, runs }
    }

    pub fn resources(&self) -> Vec<CliqueView> {
        let req = &self.request.request_ad;
        self.directory
            .registrations()
            .filter(|r| !r.is_stale(self.now))
            .map(|reg| {
                let c = &reg.clique;
                let ad = derive_clique_ad(c, self.now);
                let num = |name: &str| match ad.get(name).map(|_| ad.eval_attr(name)) {
                    Some(Value::Real(v)) => v,
                    Some(Value::Integer(v)) => v as f64,
                    _ => 0.0,
                };
                CliqueView {
                    name: c.name.clone(),
                    cpu_count: c.cpu_count(),
                    min_mem_size: c.members.iter().map(|m| m.mem_bytes).min().unwrap_or(0),
                    min_cpu_speed: num("minCPUSpeed"),
                    max_cpu_load: c.max_load(),
                    rank: compute_rank(req, &ad),
                    matches: matches!(check_requirements(req, &ad), Ok(true)),
                    expires_at: reg.expires_at(),
                }
            })
            .collect()
    }

    /// Runs a selection against the live directory without side effects.
    pub fn preview_selection(&self, request_text: Option<&str>) -> SelectionResponse {
        match request_text {
            Some(text) => selector::select_text(text, "preview", &self.directory, self.now),
            None => selector::select(&self.request, &self.directory, self.now),
        }
    }
}
