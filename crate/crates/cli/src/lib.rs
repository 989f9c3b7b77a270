//! Library surface of the experiment runner, shared by the `graphpl` binary
//! and the integration tests.

pub mod config;
pub mod manifest;
pub mod runner;
