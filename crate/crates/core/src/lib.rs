//! Core algorithms for one-turn preference extraction datasets.
//!
//! A multi-turn preference-tracking dialogue is treated as a sequence of
//! one-turn steps: each step sees the accumulated preference state plus the
//! most recent (system, user) exchange and produces a *state gain*, a list of
//! slot edits that turns the old state into the new one.
//!
//! This crate is `no_std` (it needs `alloc`) and performs no IO. File formats,
//! the HTTP generation backend, the annotation service and the command-line
//! front end live in the `iterchat` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod backend;
pub mod dataset;
pub mod extractor;
pub mod ingest;
pub mod json;
pub mod metrics;
pub mod normalize;
pub mod prompts;
pub mod sampler;
pub mod schema;
pub mod state;

pub use backend::{BackendError, ChatMessage, Directive, GenerationBackend, Role, TemplateBackend};
pub use dataset::{explode, replay, DatasetError, DialogueTurn, IterChatRecord, MultiTurnDialogue};
pub use extractor::{ExtractionMode, ExtractionResult, ParseStatus};
pub use metrics::{EvalReport, SlotF1};
pub use normalize::normalize_value;
pub use sampler::{SampledScenario, SamplerConfig};
pub use schema::{parse_schema, PreferenceSchema, SlotDefinition};
pub use state::{apply_gain, diff_states, ApplyMode, GainOp, OpKind, PreferenceState, StateGain};
