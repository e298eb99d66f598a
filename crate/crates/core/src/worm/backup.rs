use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::{checkpoint_path, write_checkpoint, CheckpointError, CheckpointMeta};
use super::solver::SolverState;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackupConfigError {
    #[error("backup interval must be positive, got {0}")]
    Interval(f64),
    #[error("backup retention must be at least 1")]
    Retention,
}

/// Result of a tick that wrote a backup.
#[derive(Debug, Clone, PartialEq)]
pub struct BackupWritten {
    pub meta: CheckpointMeta,
    /// Older backups deleted to respect the retention count.
    pub pruned: Vec<CheckpointMeta>,
}

/// Writes a backup checkpoint each time the clock crosses a multiple of
/// `interval`, keeping the newest `retention` files.
#[derive(Debug, Clone)]
pub struct BackupSchedule {
    interval: f64,
    retention: usize,
    root: PathBuf,
    last_slot: u64,
    retained: VecDeque<CheckpointMeta>,
}

impl BackupSchedule {
    /// `root` is the site directory; files land in `<root>/<run_id>/`.
    pub fn new(interval: f64, retention: usize, root: impl Into<PathBuf>, now: f64) -> Result<Self, BackupConfigError> {
        if !(interval.is_finite() && interval > 0.0) {
            return Err(BackupConfigError::Interval(interval));
        }
        if retention == 0 {
            return Err(BackupConfigError::Retention);
        }
        Ok(Self {
            interval,
            retention,
            root: root.into(),
            last_slot: (now / interval).floor() as u64,
            retained: VecDeque::new(),
        })
    }

    /// Writes a backup if `now` has crossed an interval boundary since the
    /// previous tick.
    pub fn tick(&mut self, state: &SolverState, now: f64) -> Result<Option<BackupWritten>, CheckpointError> {
        let slot = (now / self.interval).floor() as u64;
        if slot <= self.last_slot {
            return Ok(None);
        }
        self.last_slot = slot;
        let path = self.root.join(checkpoint_path(&state.run_id, state.iteration));
        let meta = write_checkpoint(state, &path, now)?;
        self.retained.retain(|m| m.location != meta.location);
        self.retained.push_back(meta.clone());
        let mut pruned = Vec::new();
        while self.retained.len() > self.retention {
            let old = self.retained.pop_front().expect("non-empty");
            remove_if_present(&old.location)?;
            pruned.push(old);
        }
        Ok(Some(BackupWritten { meta, pruned }))
    }

    /// Moves future backups to a new site directory (after a migration).
    /// Backups already written stay where they are.
    pub fn relocate(&mut self, root: impl Into<PathBuf>, now: f64) {
        self.root = root.into();
        self.last_slot = (now / self.interval).floor() as u64;
        self.retained.clear();
    }

    pub fn retained(&self) -> impl Iterator<Item = &CheckpointMeta> {
        self.retained.iter()
    }

    pub fn interval(&self) -> f64 {
        self.interval
    }
}

/// Functional form: `Some(meta)` when a backup was written.
pub fn backup_tick(
    schedule: &mut BackupSchedule,
    state: &SolverState,
    now: f64,
) -> Result<Option<CheckpointMeta>, CheckpointError> {
    Ok(schedule.tick(state, now)?.map(|w| w.meta))
}

fn remove_if_present(path: &Path) -> std::io::Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e),
        _ => Ok(()),
    }
}
