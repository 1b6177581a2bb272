//! Command-line front end: subcommands, the reward-service HTTP server and
//! its client.

pub mod commands;
pub mod http;
pub mod wire;
