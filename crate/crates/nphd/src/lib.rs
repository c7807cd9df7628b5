//! Std side of the workbench: configuration files, corpus and tokenizer
//! files, adapter checkpoints, run directories, vote persistence, the
//! evaluation HTTP service and the command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod files;
pub mod runs;
pub mod server;
pub mod store;

pub use nphd_core as core;
