//! Command-line runner and HTTP session service for the diagnosis model.

pub mod commands;
pub mod server;
