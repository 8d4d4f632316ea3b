//! File formats, embedders, run orchestration and the command line for the
//! Self-Contrast toolkit. The algorithms themselves live in
//! `selfcontrast-core`; this crate adds everything that touches the outside
//! world.
//!
//! - [`formats`]: JSONL records and CSV tables.
//! - [`checkpoint`]: JSON model checkpoints.
//! - [`embed`]: embedder selection, a file-backed table and the HTTP client.
//! - [`stub`]: a loopback embedding server.
//! - [`config`]: the run config and its validation.
//! - [`manifest`]: per-stage file hashes of a run directory.
//! - [`pipeline`]: the stages and the run directory layout.
//! - [`cli`]: argument parsing and exit codes.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod embed;
pub mod formats;
pub mod manifest;
pub mod pipeline;
pub mod stub;
