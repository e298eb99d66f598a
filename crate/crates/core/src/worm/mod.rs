//! The migrating application: a deterministic stencil solver with
//! portable checkpoints, periodic backups and a restart announcement.

mod announce;
mod backup;
pub mod checkpoint;
mod solver;

pub use announce::{announce, Ack, AnnounceError, Announced, InformationService, RetryPolicy};
pub use backup::{backup_tick, BackupConfigError, BackupSchedule, BackupWritten};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, CheckpointMeta};
pub use solver::{iterations_in_quantum, resource_profile, run_quantum, step, ResourceProfile, SolverError, SolverState};
