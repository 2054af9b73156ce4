//! Std companion to `indret-core`: file formats, image IO, parallel
//! execution, pipeline orchestration, and the command-line interface.

pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod imgio;
pub mod parallel;
pub mod pipeline;
