//! Command-line front end of the MHPO toolkit: run configuration, run
//! directories, the certification lab and reporting.

pub use mhpo_core as core;

pub mod cli;
pub mod config;
pub mod error;
pub mod lab;
pub mod report;
pub mod runfiles;
