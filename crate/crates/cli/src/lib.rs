//! Library surface of the `stlora` command-line tool.
//!
//! The binary is a thin argument-parsing shell over these modules; they are
//! exposed so integration tests can drive the same configuration, manifest,
//! and report plumbing the commands use.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod report;
