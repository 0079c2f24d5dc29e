//! File formats, data directory handling and the `hoi` command implementations.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod dataset;
pub mod isaf;
