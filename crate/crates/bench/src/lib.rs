//! Experiment harness for `lkreg`: pair datasets, encoder training,
//! single-pair registration and perturbation sweeps with CSV/Markdown
//! reports. The `lkreg` binary is a thin clap front end over [`commands`].

pub mod commands;
pub mod config;
pub mod dataset;
pub mod metrics;

pub use config::{Method, RunConfig};
