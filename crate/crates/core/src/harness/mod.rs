//! Experiment harness behind the `resa` command-line tool.
//!
//! Every command is deterministic given the seed and run spec, except for
//! the wall-clock columns of the benchmark.

mod bench;
mod drift;
pub mod io;
mod memaccess;
pub mod spec;
mod verify;

use crate::error::ResaError;

pub use bench::{cmd_bench, BenchRow};
pub use drift::{cmd_drift, DriftRow, SWEEP_RECTIFY_FREQS, SWEEP_SPARSITIES};
pub use memaccess::{cmd_generate, cmd_memaccess, run_row, MemAccessResult};
pub use spec::{seeded_prompt, PromptSource, ResultRow, RunSpec};
pub use verify::{cmd_verify, CheckResult, VerifyReport};

/// Process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    InvariantFailure = 1,
    ConfigError = 2,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

impl ResaError {
    /// Exit status a command reports when it fails with this error.
    pub fn exit_status(&self) -> ExitStatus {
        match self {
            ResaError::InvalidConfig(_)
            | ResaError::BadWeightHeader
            | ResaError::BadSnapshotHeader
            | ResaError::OracleTooLong { .. }
            | ResaError::EmptyPrompt
            | ResaError::TokenOutOfRange { .. }
            | ResaError::Io(_)
            | ResaError::Json(_)
            | ResaError::Csv(_) => ExitStatus::ConfigError,
            _ => ExitStatus::InvariantFailure,
        }
    }
}

/// Worker pool for sweeps, capped by `RESA_THREADS` when set.
pub(crate) fn sweep_pool() -> rayon::ThreadPool {
    let threads = std::env::var("RESA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
}
