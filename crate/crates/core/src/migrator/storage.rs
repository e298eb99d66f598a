use std::fs;
use std::path::{Path, PathBuf};

use super::transfer::Site;
use crate::worm::checkpoint::{self, checkpoint_path, CheckpointError, CheckpointMeta};
use crate::worm::SolverState;

/// Checkpoint files for every site under one root directory:
/// `sites/<clique>/<run>/ckpt-<n>.cwck` and `store/<run>/ckpt-<n>.cwck`.
///
/// Every file write and read is counted, which is how migrations report
/// how many times the state touched disk.
#[derive(Debug)]
pub struct Storage {
    root: PathBuf,
    writes: u64,
    reads: u64,
}

impl Storage {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), writes: 0, reads: 0 }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn site_dir(&self, site: &Site) -> PathBuf {
        match site {
            Site::Clique(name) => self.root.join("sites").join(name),
            Site::Store => self.root.join("store"),
        }
    }

    /// Location relative to the root, as recorded in checkpoint metadata.
    pub fn relative_path(&self, site: &Site, run_id: &str, iteration: u64) -> PathBuf {
        let base = match site {
            Site::Clique(name) => PathBuf::from("sites").join(name),
            Site::Store => PathBuf::from("store"),
        };
        base.join(checkpoint_path(run_id, iteration))
    }

    pub fn resolve(&self, location: &Path) -> PathBuf {
        self.root.join(location)
    }

    pub fn disk_touches(&self) -> u64 {
        self.writes + self.reads
    }

    pub fn write_state(&mut self, site: &Site, state: &SolverState, now: f64) -> Result<CheckpointMeta, CheckpointError> {
        let rel = self.relative_path(site, &state.run_id, state.iteration);
        let mut meta = checkpoint::write_checkpoint(state, &self.resolve(&rel), now)?;
        self.writes += 1;
        meta.location = rel;
        Ok(meta)
    }

    pub fn read_state(&mut self, location: &Path) -> Result<SolverState, CheckpointError> {
        let state = checkpoint::read_checkpoint(&self.resolve(location))?;
        self.reads += 1;
        Ok(state)
    }

    /// Copies a checkpoint file to another site: one read, one write.
    pub fn copy(&mut self, meta: &CheckpointMeta, to: &Site, now: f64) -> Result<CheckpointMeta, CheckpointError> {
        let bytes = fs::read(self.resolve(&meta.location))?;
        self.reads += 1;
        // Verify before spreading a damaged file any further.
        checkpoint::decode(&bytes)?;
        let rel = self.relative_path(to, &meta.run_id, meta.iteration);
        checkpoint::write_bytes(&bytes, &self.resolve(&rel))?;
        self.writes += 1;
        Ok(CheckpointMeta { location: rel, written_at: now, ..meta.clone() })
    }

    pub fn delete(&mut self, location: &Path) -> std::io::Result<bool> {
        match fs::remove_file(self.resolve(location)) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(e),
        }
    }

    pub fn exists(&self, location: &Path) -> bool {
        self.resolve(location).is_file()
    }
}
