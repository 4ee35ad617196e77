//! Durable, statement-granular state capture for a small deterministic
//! scripting language.
//!
//! A [`vm::Vm`] executes DartScript one atomic statement at a time. A
//! [`capture::CaptureSession`] observes it between statements and persists
//! checkpoints and deltas into a [`store::Store`]; [`recovery`] materializes,
//! resumes, replays and diffs any persisted version.

pub mod capture;
pub mod delta;
pub mod digest;
pub mod heap;
pub mod recovery;
pub mod store;
pub mod vm;

pub use capture::{CaptureConfig, CaptureSession, CaptureStats, FaultPlan, SnapshotSink, Trigger};
pub use delta::{DeltaSet, MaterializedState, Strategy, StrategyChoice};
pub use digest::Digest128;
pub use heap::{Heap, ObjectId, ObjectKind, Value};
pub use recovery::{
    diff_versions, materialize, replay_to_statement, resume, run_captured, RecoveryError,
    RunOptions, RunReport,
};
pub use store::{Store, StoreError, StoreOptions, StoreReader};
pub use vm::{parse, Program, Vm};
