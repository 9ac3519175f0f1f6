//! File formats, configuration, toy data and the experiment harness.

pub mod ablate;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod gradcheck;
pub mod io;
pub mod kv;
pub mod manifest;
