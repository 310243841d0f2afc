//! The `bimflow` command line: batch pipeline stages and the HTTP service.

pub mod commands;
pub mod server;
