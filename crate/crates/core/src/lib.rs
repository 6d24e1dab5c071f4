//! KV-cache pruning schedules for coarse-to-fine visual autoregressive models.
//!
//! The pipeline runs calibration traces through [`trace`] into per-head
//! scale-attention tensors, scores heads in [`importance`], resolves a memory
//! budget in [`budget`], builds eviction schedules in [`scheduler`], and
//! replays them layer by layer in [`simulator`]. [`formats`] and
//! [`commands`] cover the file formats and the end-to-end operations.

pub mod budget;
pub mod commands;
pub mod error;
pub mod formats;
pub mod geometry;
pub mod heatmap;
pub mod importance;
pub mod scheduler;
pub mod simulator;
pub mod trace;

pub use budget::BudgetPlan;
pub use error::{Error, Result};
pub use geometry::{Config, Geometry, HeadId, ModelShape, ScaleSchedule};
pub use importance::ImportanceTable;
pub use scheduler::{Accounting, Mode, Policy, PruneItem, SchedulePlan};
pub use simulator::SimulationReport;
