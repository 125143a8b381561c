//! Experiment runner for task-agnostic guided feature expansion: config
//! files, dataset directories, checkpoints, emitted artifacts and the CLI
//! entry points. The numerical work lives in `tagfex_core`.

pub mod artifacts;
pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod experiment;
mod fsutil;

pub use fsutil::write_atomic;
pub use tagfex_core as core;
