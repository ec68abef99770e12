//! Deterministic simulated target: a small two-compartment runtime with a
//! fault-detecting memory model, driven by scenario documents that carry
//! planted interface bugs.

pub mod loopback;
pub mod machine;
pub mod memory;
pub mod program;

pub use loopback::{run_in_process, Loopback};
pub use machine::{run, Link, LinkError, RunEnd, RunParams, SimError};
pub use program::{PlantedOutcome, PlantedVuln, Scenario};
