//! Command-line pipeline and HTTP inference service.

pub mod commands;
pub mod config;
pub mod inference;
pub mod server;

pub use config::Config;
