//! Command line and HTTP front end for the skeleton generation pipeline.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod service;
