//! Library side of the `panther` command-line tool.

pub mod commands;
pub mod config;
