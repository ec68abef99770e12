//! Campaign driver for the compartment-interface fuzzer: target adapters,
//! the monitor session, campaigns, crash storage and reports.

pub mod adapter;
pub mod campaign;
pub mod load;
pub mod report;
pub mod session;
pub mod store;

pub use adapter::{Adapter, AdapterError, AdapterKind};
pub use campaign::{Campaign, CampaignConfig, CampaignError, CampaignOutcome, ConfigError, StopReason, Target};
pub use report::{emit_table, CampaignReport, Format};
