pub mod config;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod experiments;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod pipeline;
#[cfg(test)]
mod testutil;
pub mod text;
pub mod verify;
pub mod vision;

pub use error::{Error, Result};
