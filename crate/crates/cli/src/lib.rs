//! Experiment harness for the saber library.

pub mod commands;
pub mod experiments;
pub mod io;
