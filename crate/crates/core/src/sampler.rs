//! Schema-driven sampling of synthetic one-turn records.
//!
//! A scenario is sampled first (history state, gain, context metadata) and
//! only then turned into text by a generation backend, so the labels of every
//! record are correct by construction.
//!
//! All draws are uniform within the configured ranges. Scenario `i` uses its
//! own ChaCha stream derived from `(seed, i)`, so any scenario can be
//! reproduced in isolation.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use chrono::{Duration, NaiveDate};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{attach_directive, BackendError, ChatMessage, Directive, GenerationBackend};
use crate::dataset::{turn_record_id, DialogueTurn, IterChatRecord, MultiTurnDialogue};
use crate::extractor::render_schema;
use crate::json::first_json_object;
use crate::normalize::normalize_value;
use crate::prompts::PromptSet;
use crate::schema::{PreferenceSchema, SlotDefinition};
use crate::state::{apply_gain, diff_states, ApplyMode, OpKind, PreferenceState, StateGain};

/// Attempts per record before a realization counts as failed.
pub const MAX_REALIZE_ATTEMPTS: u32 = 3;

/// Inclusive `[min, max]` range, written as a two-element JSON array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(u32, u32)", into = "(u32, u32)")]
pub struct CountRange {
    pub min: u32,
    pub max: u32,
}

impl CountRange {
    pub const fn new(min: u32, max: u32) -> Self {
        Self { min, max }
    }

    pub const fn exactly(n: u32) -> Self {
        Self { min: n, max: n }
    }

    fn draw(self, rng: &mut impl Rng) -> u32 {
        rng.random_range(self.min..=self.max)
    }
}

impl From<(u32, u32)> for CountRange {
    fn from((min, max): (u32, u32)) -> Self {
        Self { min, max }
    }
}

impl From<CountRange> for (u32, u32) {
    fn from(r: CountRange) -> Self {
        (r.min, r.max)
    }
}

/// The logical edits a scenario can draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainKind {
    AddNewSlot,
    AddValueToExisting,
    RemoveValue,
    /// Realized as REMOVE of one value plus ADD of another on the same slot.
    UpdateValue,
}

impl GainKind {
    pub const ALL: [GainKind; 4] =
        [GainKind::AddNewSlot, GainKind::AddValueToExisting, GainKind::RemoveValue, GainKind::UpdateValue];

    pub fn as_str(self) -> &'static str {
        match self {
            GainKind::AddNewSlot => "add_new_slot",
            GainKind::AddValueToExisting => "add_value_to_existing",
            GainKind::RemoveValue => "remove_value",
            GainKind::UpdateValue => "update_value",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainMix {
    #[serde(default)]
    pub add_new_slot: f64,
    #[serde(default)]
    pub add_value_to_existing: f64,
    #[serde(default)]
    pub remove_value: f64,
    #[serde(default)]
    pub update_value: f64,
}

impl GainMix {
    pub const UNIFORM: GainMix =
        GainMix { add_new_slot: 1.0, add_value_to_existing: 1.0, remove_value: 1.0, update_value: 1.0 };

    pub fn only(kind: GainKind) -> Self {
        let mut mix = GainMix { add_new_slot: 0.0, add_value_to_existing: 0.0, remove_value: 0.0, update_value: 0.0 };
        *mix.weight_mut(kind) = 1.0;
        mix
    }

    pub fn weight(&self, kind: GainKind) -> f64 {
        match kind {
            GainKind::AddNewSlot => self.add_new_slot,
            GainKind::AddValueToExisting => self.add_value_to_existing,
            GainKind::RemoveValue => self.remove_value,
            GainKind::UpdateValue => self.update_value,
        }
    }

    fn weight_mut(&mut self, kind: GainKind) -> &mut f64 {
        match kind {
            GainKind::AddNewSlot => &mut self.add_new_slot,
            GainKind::AddValueToExisting => &mut self.add_value_to_existing,
            GainKind::RemoveValue => &mut self.remove_value,
            GainKind::UpdateValue => &mut self.update_value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(default)]
    pub seed: u64,
    pub history_slot_count: CountRange,
    /// Number of earlier turns reported in the context metadata.
    #[serde(default = "default_turn_count")]
    pub history_turn_count: CountRange,
    pub gain_mix: GainMix,
    #[serde(default = "default_ops")]
    pub ops_per_record: CountRange,
    pub record_count: usize,
}

fn default_turn_count() -> CountRange {
    CountRange::new(1, 8)
}

fn default_ops() -> CountRange {
    CountRange::new(1, 2)
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("unsatisfiable sampler config: {0}")]
    Unsatisfiable(String),
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let invalid = |m: &str| Err(SamplerError::InvalidConfig(m.to_string()));
        if GainKind::ALL.iter().any(|k| !self.gain_mix.weight(*k).is_finite() || self.gain_mix.weight(*k) < 0.0) {
            return invalid("gain_mix weights must be finite and non-negative");
        }
        if GainKind::ALL.iter().all(|k| self.gain_mix.weight(*k) == 0.0) {
            return invalid("gain_mix needs at least one positive weight");
        }
        for (name, r) in [
            ("history_slot_count", self.history_slot_count),
            ("history_turn_count", self.history_turn_count),
            ("ops_per_record", self.ops_per_record),
        ] {
            if r.min > r.max {
                return Err(SamplerError::InvalidConfig(format!("{name} range is empty")));
            }
        }
        if self.ops_per_record.min == 0 {
            return invalid("ops_per_record must be at least 1");
        }
        if self.record_count == 0 {
            return invalid("record_count must be at least 1");
        }
        if self.history_slot_count.max == 0 && self.gain_mix.add_new_slot == 0.0 {
            let positive: Vec<&str> =
                GainKind::ALL.iter().filter(|k| self.gain_mix.weight(**k) > 0.0).map(|k| k.as_str()).collect();
            return Err(SamplerError::Unsatisfiable(format!(
                "{} weight positive but history_slot_count forces an empty history",
                positive.join("/")
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextMeta {
    pub past_turn_count: u32,
    pub timestamp: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledScenario {
    pub history_state: PreferenceState,
    pub target_state: PreferenceState,
    /// Canonical gain from history to target.
    pub gain: StateGain,
    pub gain_kinds: Vec<GainKind>,
    pub context_meta: ContextMeta,
}

/// RNG for scenario `index` under `seed`.
pub fn scenario_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Sample scenario `index` for `config.seed`.
pub fn sample_scenario(
    schema: &PreferenceSchema,
    config: &SamplerConfig,
    index: u64,
) -> Result<SampledScenario, SamplerError> {
    sample_scenario_with_rng(schema, config, &mut scenario_rng(config.seed, index))
}

fn pick<'a, T>(rng: &mut impl Rng, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

fn absent_values<'a>(slot: &'a SlotDefinition, state: &PreferenceState) -> Vec<&'a String> {
    slot.schema_values.iter().filter(|v| !state.contains(&slot.name, v)).collect()
}

/// Sample one scenario from an explicit RNG.
///
/// Each drawn edit touches a different slot. If an edit after the first has
/// no feasible kind left, the gain stops there; if the first has none, the
/// config is unsatisfiable for this schema.
pub fn sample_scenario_with_rng(
    schema: &PreferenceSchema,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<SampledScenario, SamplerError> {
    let samplable: Vec<&SlotDefinition> = schema.slots.iter().filter(|s| !s.schema_values.is_empty()).collect();
    let lo = config.history_slot_count.min as usize;
    if lo > samplable.len() {
        return Err(SamplerError::Unsatisfiable(format!(
            "history_slot_count.min = {lo} but the schema has only {} slots with values",
            samplable.len()
        )));
    }
    let hi = (config.history_slot_count.max as usize).min(samplable.len());
    let history_slots = rng.random_range(lo..=hi);

    let mut history = PreferenceState::new();
    for i in index::sample(rng, samplable.len(), history_slots) {
        let slot = samplable[i];
        let count = if slot.multi_valued { rng.random_range(1..=slot.schema_values.len().min(2)) } else { 1 };
        let values: Vec<&String> =
            index::sample(rng, slot.schema_values.len(), count).into_iter().map(|j| &slot.schema_values[j]).collect();
        history.add_values(&slot.name, &values);
    }

    let mut past_turn_count = config.history_turn_count.draw(rng);
    if !history.is_empty() && past_turn_count == 0 {
        past_turn_count = 1;
    }
    let minutes = rng.random_range(0..366 * 24 * 60);
    let timestamp =
        (NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date").and_hms_opt(9, 0, 0).expect("valid time")
            + Duration::minutes(minutes))
        .format("%Y-%m-%d %H:%M")
        .to_string();

    let (working, kinds) = sample_edits(schema, config, &history, rng)?;
    Ok(SampledScenario {
        gain: diff_states(&history, &working),
        history_state: history,
        target_state: working,
        gain_kinds: kinds,
        context_meta: ContextMeta { past_turn_count, timestamp },
    })
}

/// Draw `ops_per_record` edits on top of `history` and return the resulting
/// state with the kinds drawn.
pub fn sample_edits(
    schema: &PreferenceSchema,
    config: &SamplerConfig,
    history: &PreferenceState,
    rng: &mut impl Rng,
) -> Result<(PreferenceState, Vec<GainKind>), SamplerError> {
    let samplable: Vec<&SlotDefinition> = schema.slots.iter().filter(|s| !s.schema_values.is_empty()).collect();
    let op_count = config.ops_per_record.draw(rng);
    let mut working = history.clone();
    let mut touched = BTreeSet::new();
    let mut kinds = Vec::new();
    for i in 0..op_count {
        let untouched = |s: &&&SlotDefinition| !touched.contains(&normalize_value(&s.name));
        let candidates = |kind: GainKind| -> Vec<&SlotDefinition> {
            samplable
                .iter()
                .filter(untouched)
                .filter(|s| match kind {
                    GainKind::AddNewSlot => !working.contains_slot(&s.name),
                    GainKind::AddValueToExisting => {
                        s.multi_valued && working.contains_slot(&s.name) && !absent_values(s, &working).is_empty()
                    }
                    GainKind::RemoveValue => working.contains_slot(&s.name),
                    GainKind::UpdateValue => working.contains_slot(&s.name) && !absent_values(s, &working).is_empty(),
                })
                .copied()
                .collect()
        };
        let options: Vec<(GainKind, Vec<&SlotDefinition>, f64)> = GainKind::ALL
            .iter()
            .map(|&k| {
                let c = candidates(k);
                let w = if c.is_empty() { 0.0 } else { config.gain_mix.weight(k) };
                (k, c, w)
            })
            .collect();
        let total: f64 = options.iter().map(|o| o.2).sum();
        if total <= 0.0 {
            if i == 0 {
                return Err(SamplerError::Unsatisfiable(
                    "no gain kind with positive weight is feasible for the sampled history".to_string(),
                ));
            }
            break;
        }
        let mut x = rng.random::<f64>() * total;
        let mut chosen = options.iter().rev().find(|o| o.2 > 0.0).expect("positive total");
        for o in &options {
            if o.2 > 0.0 && x < o.2 {
                chosen = o;
                break;
            }
            x -= o.2;
        }
        let (kind, slots, _) = chosen;
        let slot = *pick(rng, slots);
        match kind {
            GainKind::AddNewSlot => {
                let v = pick(rng, &slot.schema_values).clone();
                working.add_values(&slot.name, &[v]);
            }
            GainKind::AddValueToExisting => {
                let v = (*pick(rng, &absent_values(slot, &working))).clone();
                working.add_values(&slot.name, &[v]);
            }
            GainKind::RemoveValue => {
                let current = working.get(&slot.name).expect("slot present").to_vec();
                working.remove_value(&slot.name, pick(rng, &current));
            }
            GainKind::UpdateValue => {
                let current = working.get(&slot.name).expect("slot present").to_vec();
                let old = pick(rng, &current).clone();
                let new = (*pick(rng, &absent_values(slot, &working))).clone();
                working.remove_value(&slot.name, &old);
                working.add_values(&slot.name, &[new]);
            }
        }
        touched.insert(normalize_value(&slot.name));
        kinds.push(*kind);
    }

    Ok((working, kinds))
}

#[derive(Debug, Error)]
pub enum RealizeError {
    #[error("scenario has an empty gain")]
    EmptyGain,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("generated user utterance is empty; raw reply: {raw}")]
    EmptyUtterance { raw: String },
}

/// Turn a scenario into a labeled record using a generation backend.
///
/// Labels come from the scenario; the backend only writes the utterances.
pub fn realize_record<B: GenerationBackend + ?Sized>(
    scenario: &SampledScenario,
    schema: &PreferenceSchema,
    backend: &B,
    prompts: &PromptSet,
    record_id: &str,
) -> Result<IterChatRecord, RealizeError> {
    if scenario.gain.is_empty() {
        return Err(RealizeError::EmptyGain);
    }
    let schema_text = render_schema(schema);
    let history = serde_json::to_string(&scenario.history_state).expect("state serialization");
    let gain = serde_json::to_string(&scenario.gain).expect("gain serialization");
    let past = format!("{}", scenario.context_meta.past_turn_count);
    let mut messages =
        alloc::vec![
            ChatMessage::system(prompts.render(
                &prompts.realize_system,
                &[("domain", &schema.domain_name), ("schema", schema_text.trim_end())],
            )),
            ChatMessage::user(prompts.render(
                &prompts.realize_user,
                &[
                    ("history", &history),
                    ("gain", &gain),
                    ("past_turn_count", &past),
                    ("timestamp", &scenario.context_meta.timestamp),
                ],
            )),
        ];
    if backend.wants_directives() {
        attach_directive(
            &mut messages,
            &Directive::Realize { history: scenario.history_state.clone(), gain: scenario.gain.clone() },
        );
    }
    let raw = backend.complete(&messages)?;
    let (system, user) = parse_utterances(&raw);
    if user.trim().is_empty() {
        return Err(RealizeError::EmptyUtterance { raw });
    }
    Ok(IterChatRecord {
        record_id: record_id.to_string(),
        source_dialogue_id: None,
        turn_index: Some(scenario.context_meta.past_turn_count + 1),
        history_preference: scenario.history_state.clone(),
        system_utterance: system,
        user_utterance: user,
        state_gain: Some(scenario.gain.clone()),
        preference_extraction: Some(scenario.target_state.clone()),
    })
}

/// `(system, user)` from a JSON reply, or from `system:`/`user:` lines.
fn parse_utterances(raw: &str) -> (String, String) {
    if let Some((_, value)) = first_json_object(raw) {
        let get = |k: &str| value.get(k).and_then(Value::as_str).unwrap_or_default().trim().to_string();
        return (get("system_utterance"), get("user_utterance"));
    }
    let mut system = String::new();
    let mut user = String::new();
    for line in raw.lines().map(str::trim) {
        let lower = line.to_lowercase();
        if lower.starts_with("user:") {
            user = line[5..].trim().to_string();
        } else if lower.starts_with("system:") {
            system = line[7..].trim().to_string();
        } else if lower.starts_with("assistant:") {
            system = line[10..].trim().to_string();
        }
    }
    (system, user)
}

/// Record id for draw `index` under `seed`.
pub fn synthetic_record_id(seed: u64, index: usize) -> String {
    format!("syn-{seed}-{index:06}")
}

/// Realize with up to [`MAX_REALIZE_ATTEMPTS`] attempts. Returns the record
/// (or the last error) and the number of attempts used.
pub fn realize_with_retries<B: GenerationBackend + ?Sized>(
    scenario: &SampledScenario,
    schema: &PreferenceSchema,
    backend: &B,
    prompts: &PromptSet,
    record_id: &str,
) -> (Result<IterChatRecord, RealizeError>, u32) {
    let mut attempt = 0;
    loop {
        attempt += 1;
        match realize_record(scenario, schema, backend, prompts, record_id) {
            Ok(r) => return (Ok(r), attempt),
            Err(RealizeError::EmptyGain) => return (Err(RealizeError::EmptyGain), attempt),
            Err(e) if attempt >= MAX_REALIZE_ATTEMPTS => return (Err(e), attempt),
            Err(_) => {}
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub requested: usize,
    pub generated: usize,
    pub failed: usize,
    pub retries: usize,
    /// Logical edits drawn, by kind, over generated records.
    pub gain_kind_counts: BTreeMap<String, usize>,
    /// ADD / REMOVE ops in the emitted gains.
    pub op_counts: BTreeMap<String, usize>,
    /// Records whose gain contains only ADD ops.
    pub add_only_gains: usize,
    /// Number of emitted gains touching each schema slot.
    pub slot_coverage: BTreeMap<String, usize>,
    pub failed_record_ids: Vec<String>,
}

impl GenerationStats {
    pub fn new(schema: &PreferenceSchema, requested: usize) -> Self {
        Self {
            requested,
            gain_kind_counts: GainKind::ALL.iter().map(|k| (k.as_str().to_string(), 0)).collect(),
            op_counts: [OpKind::Add, OpKind::Remove].iter().map(|k| (k.as_str().to_string(), 0)).collect(),
            slot_coverage: schema.slots.iter().map(|s| (s.name.clone(), 0)).collect(),
            ..Self::default()
        }
    }

    pub fn observe(&mut self, scenario: &SampledScenario, outcome: Result<&IterChatRecord, &str>, attempts: u32) {
        self.retries += attempts.saturating_sub(1) as usize;
        let record = match outcome {
            Ok(r) => r,
            Err(id) => {
                self.failed += 1;
                self.failed_record_ids.push(id.to_string());
                return;
            }
        };
        self.generated += 1;
        for k in &scenario.gain_kinds {
            *self.gain_kind_counts.entry(k.as_str().to_string()).or_default() += 1;
        }
        let gain = record.state_gain.as_ref().map(|g| g.ops.as_slice()).unwrap_or_default();
        for op in gain {
            *self.op_counts.entry(op.op.as_str().to_string()).or_default() += 1;
        }
        if !gain.is_empty() && gain.iter().all(|op| op.op == OpKind::Add) {
            self.add_only_gains += 1;
        }
        let slots: BTreeSet<&str> = gain.iter().map(|op| op.slot.as_str()).collect();
        for slot in slots {
            *self.slot_coverage.entry(slot.to_string()).or_default() += 1;
        }
    }

    /// At least 10% of the requested records failed.
    pub fn too_many_failures(&self) -> bool {
        self.failed * 10 >= self.requested && self.failed > 0
    }
}

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error(transparent)]
    Config(#[from] SamplerError),
    #[error("{} of {} records failed to realize", stats.failed, stats.requested)]
    TooManyFailures { partial: Vec<IterChatRecord>, stats: Box<GenerationStats> },
}

/// Sample and realize `config.record_count` records sequentially.
pub fn generate_dataset<B: GenerationBackend + ?Sized>(
    schema: &PreferenceSchema,
    config: &SamplerConfig,
    backend: &B,
    prompts: &PromptSet,
) -> Result<(Vec<IterChatRecord>, GenerationStats), GenerateError> {
    config.validate()?;
    let mut stats = GenerationStats::new(schema, config.record_count);
    let mut records = Vec::with_capacity(config.record_count);
    for index in 0..config.record_count {
        let scenario = sample_scenario(schema, config, index as u64)?;
        let id = synthetic_record_id(config.seed, index);
        let (outcome, attempts) = realize_with_retries(&scenario, schema, backend, prompts, &id);
        match outcome {
            Ok(record) => {
                stats.observe(&scenario, Ok(&record), attempts);
                records.push(record);
            }
            Err(_) => stats.observe(&scenario, Err(&id), attempts),
        }
    }
    if stats.too_many_failures() {
        return Err(GenerateError::TooManyFailures { partial: records, stats: Box::new(stats) });
    }
    Ok((records, stats))
}

#[derive(Debug, Error)]
pub enum DialogueSynthError {
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("turn {turn}: {source}")]
    Realize { turn: usize, source: RealizeError },
}

/// Synthesize a fully labeled dialogue of `turn_count` turns.
///
/// Turn `t` draws edits on top of the gold state of turn `t-1`, starting
/// from the empty state, and is realized like a single record. The history
/// ranges of `config` are not used.
pub fn sample_dialogue<B: GenerationBackend + ?Sized>(
    schema: &PreferenceSchema,
    config: &SamplerConfig,
    backend: &B,
    prompts: &PromptSet,
    dialogue_id: &str,
    turn_count: usize,
    rng: &mut impl Rng,
) -> Result<MultiTurnDialogue, DialogueSynthError> {
    let mut state = PreferenceState::new();
    let mut turns = Vec::with_capacity(turn_count);
    let timestamp = format!("2024-01-01 09:{:02}", rng.random_range(0..60));
    for t in 0..turn_count {
        let (target, kinds) = sample_edits(schema, config, &state, rng)?;
        let scenario = SampledScenario {
            gain: diff_states(&state, &target),
            history_state: state,
            target_state: target.clone(),
            gain_kinds: kinds,
            context_meta: ContextMeta { past_turn_count: t as u32, timestamp: timestamp.clone() },
        };
        let record = realize_record(&scenario, schema, backend, prompts, &turn_record_id(dialogue_id, t + 1))
            .map_err(|source| DialogueSynthError::Realize { turn: t + 1, source })?;
        turns.push(DialogueTurn::new(&record.system_utterance, &record.user_utterance, Some(target.clone())));
        state = target;
    }
    Ok(MultiTurnDialogue { dialogue_id: dialogue_id.to_string(), domain_name: schema.domain_name.clone(), turns })
}

/// Check a generated record: labels consistent in strict mode and every
/// (slot, value) in both states allowed by the schema.
pub fn check_generated(record: &IterChatRecord, schema: &PreferenceSchema) -> Result<(), String> {
    let gain = record.state_gain.as_ref().ok_or("missing state_gain")?;
    let extraction = record.preference_extraction.as_ref().ok_or("missing preference_extraction")?;
    let derived = apply_gain(&record.history_preference, gain, ApplyMode::Strict).map_err(|e| e.to_string())?;
    if &derived != extraction {
        return Err("history + gain != extraction".to_string());
    }
    for state in [&record.history_preference, extraction] {
        for (slot, values) in state.iter() {
            let check = schema.validate_assignment(slot, values);
            if !check.valid {
                return Err(format!("{}: {}", record.record_id, check.issues[0]));
            }
        }
    }
    Ok(())
}
