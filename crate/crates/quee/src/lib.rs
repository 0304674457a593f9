//! File formats, experiment configuration and the command-line front end
//! for `quee-core`.

pub mod cli;
pub mod config;
pub mod model_file;
pub mod output;
pub mod pipeline;
pub mod records;
