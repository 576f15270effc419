//! Configuration, experiment drivers and the closed-form checklist behind
//! the `gac` command line tool.

pub mod config;
pub mod experiments;
pub mod verify;
