//! Command line and live session server for the refgame listener.

pub mod cli;
pub mod server;
pub mod session;
