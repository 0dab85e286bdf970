//! Command implementations and configuration for the `rollback` binary.

pub mod commands;
pub mod config;
