//! Experiment harness: config, subcommands, tables, pixmaps, reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod pixmap;
pub mod report;
pub mod table;
