//! Command-line tools and the HTTP service around `inclg-core`.

pub mod commands;
pub mod server;
