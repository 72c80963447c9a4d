//! Pipelines around `codereviewer-core`: pull-request ingestion, dataset
//! building, training loops, checkpoint files and the command-line tool.

pub mod ingest;
pub mod corpus;
pub mod formats;
pub mod trainer;
pub mod manifest;
pub mod cli;
