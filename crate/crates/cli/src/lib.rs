//! Pipelines behind the `rvqa` command.

pub mod commands;
pub mod experiment;
pub mod manifest;
