//! Command-line front end: configuration handling and the `generate`,
//! `train`, `eval` and `export` commands.

pub mod commands;
pub mod config;
