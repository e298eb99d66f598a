//! Testbed for contract-driven application migration across a simulated
//! grid: ClassAd matchmaking, a TTL-refreshed resource directory, a
//! performance-contract monitor, a checkpointing stencil solver, a migrator
//! service and a deterministic discrete-event engine that drives them.

pub mod classad;
pub mod contract;
pub mod control;
pub mod events;
pub mod migrator;
pub mod resources;
pub mod selector;
pub mod sim;
pub mod worm;
