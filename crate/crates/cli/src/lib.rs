//! Pipeline stages behind the `pierce` command.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod stages;
