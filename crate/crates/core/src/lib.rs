//! Leakage-aware model evaluation.
//!
//! The crate builds dependence-respecting resampling plans, fits models with
//! preprocessing estimated on training folds only, audits fitted results for
//! common leakage mechanisms, quantifies inflation between a leaky and a
//! guarded pipeline, and generates synthetic datasets with controlled leakage.
//!
//! The workflow mirrors the module layout:
//!
//! ```text
//! Dataset -> split::make_split_plan -> resample::fit_resample -> audit::audit
//!                                                             \-> dlsi::delta_lsi
//! ```

pub mod audit;
pub mod data;
pub mod dlsi;
pub mod error;
pub mod learners;
pub mod linalg;
pub mod metrics;
pub mod preprocess;
pub mod report;
pub mod resample;
pub mod sim;
pub mod split;
pub mod util;

pub use data::{
    column_matrix, load_csv, read_csv, write_csv, Column, ColumnValues, CsvOptions, Dataset,
    RoleMap, TaskKind,
};
pub use error::{Error, Result};

/// Version string echoed into reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Schema version of every JSON artifact written by this crate.
pub const SCHEMA_VERSION: u32 = 1;
