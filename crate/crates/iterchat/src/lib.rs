//! File formats, the HTTP generation backend, the annotation service and the
//! pipeline steps behind the `iterchat` command.
//!
//! The algorithms live in [`iterchat_core`]; this crate adds IO.

pub mod http_backend;
pub mod jsonl;
pub mod pipeline;
pub mod service;

pub use iterchat_core as core;
