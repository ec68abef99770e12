//! Core of the compartment-interface fuzzer: interface model, wire format,
//! mutation engine, crash triage and the simulated target. Everything here
//! is deterministic and free of I/O.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod crash;
pub mod crossing;
pub mod iface;
pub mod monitor;
pub mod mutation;
pub mod sim;
pub mod wire;
