//! File formats, run configuration and the command-line driver built on
//! `cryoslice-core`.

pub mod cli;
pub mod config;
pub mod fsio;
pub mod manifest;
pub mod mrc;
pub mod tables;
pub mod weights;
