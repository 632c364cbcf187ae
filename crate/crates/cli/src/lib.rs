//! Experiment runner: configuration, dataset loading, training across
//! modes and seeds, and report files.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use error::CliError;
