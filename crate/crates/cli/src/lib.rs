//! Command-line tool and HTTP service for text-prompted segmentation.

pub mod api;
pub mod cli;
pub mod config;
pub mod engine;

pub use cli::main_with_args;
