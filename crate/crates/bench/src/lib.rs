//! Synthetic benchmark harness: data generation, source training,
//! method comparison and reporting.

pub mod cli;
pub mod experiment;
pub mod pretrain;
pub mod report;
pub mod synthetic;
