//! HTTP service and command-line front end for building, exploring and
//! projecting into nomological networks.

pub mod batcher;
pub mod cli;
pub mod config;
pub mod server;
