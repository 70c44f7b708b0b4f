//! Experiment orchestration for the vpb-core lab: TOML configuration, dispatch
//! to the owning module, CSV/JSON persistence and regression comparison.

pub mod compare;
pub mod config;
pub mod error;
pub mod run;

pub use compare::{compare, DiffEntry, DiffReport, Tolerances};
pub use config::{parse_config, ExperimentConfig, ExperimentKind, ModesConfig, ValidateConfig};
pub use error::{CliError, Result};
pub use run::{execute, run, Check, Outcome, RunRecord, Summary, Table};
