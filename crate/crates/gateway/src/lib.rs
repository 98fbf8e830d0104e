//! CLI and HTTP annotation service for the activest engine.

pub mod cli;
pub mod server;
