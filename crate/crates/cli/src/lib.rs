//! Command-line interface and HTTP service for the artiscope toolkit.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod service;
