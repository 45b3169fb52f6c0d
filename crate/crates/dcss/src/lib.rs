//! Files, configuration and the `dcss` command-line driver around
//! `dcss-core`.

pub mod cli;
pub mod commands;
pub mod config;
pub mod datasets;
pub mod error;
pub mod tensors;

pub use error::{CliError, CliResult};

/// Pretty JSON with a trailing newline, as written to every artifact.
pub fn to_json_bytes<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("value serializes");
    out.push(b'\n');
    out
}
