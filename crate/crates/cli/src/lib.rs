//! Library side of the `gradrank` command-line tool: job configuration and
//! the jobs behind each subcommand.

pub mod config;
pub mod jobs;
