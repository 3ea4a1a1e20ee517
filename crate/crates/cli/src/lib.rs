//! Pipeline orchestration behind the `sfuda` command-line tool.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod reproduce;
