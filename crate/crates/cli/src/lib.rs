//! Command-line front end: configuration parsing and the command runners.

pub mod commands;
pub mod config;
