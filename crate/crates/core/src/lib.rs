//! A desk-scale, deterministic shared-storage LSM database kernel.
//!
//! The crate models a storage-compute disaggregated deployment end to end:
//! an LSM tablet engine over an object store, a quorum-replicated shared
//! log service, a metadata service riding that log, three-tier adaptive
//! caching with warming, lease-coordinated garbage collection,
//! cross-partition transactions, and a deterministic discrete-event
//! cluster simulator that drives all of it under fault injection.

pub mod cache;
pub mod clock;
pub mod config;
pub mod compaction;
pub mod cost;
pub mod engine;
pub mod gc;
pub mod log;
pub mod meta;
pub mod metrics;
pub mod runner;
pub mod sim;
pub mod store;
pub mod trace;
pub mod txn;
pub mod types;
pub mod wire;
pub mod workload;

pub use types::{
    Lsn, MacroBlockId, NodeId, Row, Scn, SsTable, SsTableKind, TabletId, TenantId,
};
