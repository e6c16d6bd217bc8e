//! Command implementations behind the `sdlgm` binary.

pub mod commands;
pub mod config;
pub mod export;
