//! Target adapters. Each run gets a fresh adapter session: a fresh
//! simulated machine or a fresh target process.

mod shim;
mod sim;

use civfuzz_core::monitor::RunMonitor;
use serde::{Deserialize, Serialize};

use crate::session::SessionError;

pub use shim::{ShimAdapter, ENV_IN_FD, ENV_OUT_FD, ENV_RUN_ID, ENV_RUN_SEED, ENV_SCHEDULE_NONCE};
pub use sim::{SimAdapter, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    /// Built-in simulated target driven by a scenario file.
    #[value(name = "sim")]
    #[serde(alias = "sim")]
    Simulated,
    /// External process speaking the wire protocol on inherited descriptors.
    #[value(name = "shim")]
    #[serde(alias = "shim")]
    NativeShim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunRequest {
    pub run_id: u64,
    pub seed: u64,
    /// Zero for fuzzing runs; replays use fresh non-zero values.
    pub schedule_nonce: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum AdapterError {
    #[error("cannot launch target: {0}")]
    Launch(String),
    /// The session broke down; the run is discarded.
    #[error("session aborted: {0}")]
    Session(#[from] SessionError),
    /// The target reported an error of its own; the run is discarded.
    #[error("target failed: {0}")]
    Target(String),
}

pub trait Adapter {
    fn kind(&self) -> AdapterKind;

    /// Performs one run, feeding every event to `monitor`.
    fn execute(&mut self, req: &RunRequest, monitor: &mut RunMonitor<'_>) -> Result<(), AdapterError>;
}
