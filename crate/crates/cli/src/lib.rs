//! Experiment harness for toy selective state-space models: configuration,
//! task data, end-to-end pipelines and the `ssmlab` command line.

pub mod cli;
pub mod commands;
pub mod config;
pub mod pipeline;
pub mod run;
pub mod tasks;
