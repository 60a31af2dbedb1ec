//! Experiment orchestration for the `bap` command-line tool.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod record;
