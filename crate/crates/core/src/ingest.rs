//! Adapter for external task-oriented dialogue datasets (MultiWOZ style).
//!
//! Two layouts are understood:
//!
//! * the flattened DST layout: a JSON array of
//!   `{"dialogue_idx", "dialogue": [{"system_transcript", "transcript",
//!   "belief_state": [{"slots": [["hotel-pricerange", "cheap"]]}]}]}`;
//! * the raw MultiWOZ 2.x layout: a JSON object of dialogues keyed by id, each
//!   with a `log` alternating user and system entries, where the system entry's
//!   `metadata` holds the belief state after the preceding user turn.
//!
//! External slot keys (`domain-slot`) are mapped to schema slots through a
//! [`SlotMapping`]. Belief states are cumulative, so each turn's gold state is
//! taken directly from the annotation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use crate::dataset::{DialogueTurn, MultiTurnDialogue};
use crate::normalize::normalize_value;
use crate::schema::PreferenceSchema;
use crate::state::PreferenceState;

pub const DROP: &str = "drop";

/// External slot key → schema slot name, or `"drop"`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(transparent)]
pub struct SlotMapping(pub BTreeMap<String, String>);

impl SlotMapping {
    pub fn parse(text: &str) -> Result<Self, IngestError> {
        serde_json::from_str(text).map_err(|e| IngestError::Mapping(e.to_string()))
    }

    fn target(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str).filter(|t| !t.eq_ignore_ascii_case(DROP))
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("unparseable dataset: {0}")]
    Unparseable(String),
    #[error("malformed slot mapping: {0}")]
    Mapping(String),
    #[error("mapping for {external:?} references unknown slot {internal:?}")]
    UnknownInternalSlot { external: String, internal: String },
    #[error("dialogue {id:?}: {reason}")]
    BadDialogue { id: String, reason: String },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestOutput {
    pub dialogues: Vec<MultiTurnDialogue>,
    /// Per external key, the number of dialogues in which it was dropped.
    pub dropped_keys: BTreeMap<String, usize>,
    pub warning_count: usize,
}

const EMPTY_VALUES: [&str; 3] = ["", "not mentioned", "none"];

/// Convert an external dataset into labeled multi-turn dialogues.
pub fn ingest_external(
    raw: &str,
    mapping: &SlotMapping,
    schema: &PreferenceSchema,
    domain_name: &str,
) -> Result<IngestOutput, IngestError> {
    for (external, internal) in &mapping.0 {
        if !internal.eq_ignore_ascii_case(DROP) && schema.slot(internal).is_none() {
            return Err(IngestError::UnknownInternalSlot { external: external.clone(), internal: internal.clone() });
        }
    }
    let value: Value = serde_json::from_str(raw).map_err(|e| IngestError::Unparseable(e.to_string()))?;
    let raw_dialogues = match value {
        Value::Array(items) => items.into_iter().map(flat_dialogue).collect::<Result<Vec<_>, _>>()?,
        Value::Object(map) => map.into_iter().map(|(id, d)| log_dialogue(id, d)).collect::<Result<Vec<_>, _>>()?,
        _ => return Err(IngestError::Unparseable("expected a JSON array or object".into())),
    };

    let mut out = IngestOutput::default();
    for raw in raw_dialogues {
        let mut dropped_here = BTreeSet::new();
        let mut turns = Vec::with_capacity(raw.turns.len());
        for t in raw.turns {
            let mut state = PreferenceState::new();
            for (key, value) in t.belief {
                let value = normalize_value(&value);
                if EMPTY_VALUES.contains(&value.as_str()) {
                    continue;
                }
                match mapping.target(&key) {
                    Some(slot) => {
                        let name = schema.slot(slot).map_or(slot, |s| s.name.as_str());
                        state.add_values(name, &[value]);
                    }
                    None => {
                        dropped_here.insert(key);
                    }
                }
            }
            turns.push(DialogueTurn { system_utterance: t.system, user_utterance: t.user, gold_state: Some(state) });
        }
        for key in dropped_here {
            *out.dropped_keys.entry(key).or_default() += 1;
            out.warning_count += 1;
        }
        let dialogue = MultiTurnDialogue { dialogue_id: raw.id, domain_name: domain_name.to_string(), turns };
        if dialogue.turns.is_empty() {
            continue;
        }
        dialogue
            .validate()
            .map_err(|e| IngestError::BadDialogue { id: dialogue.dialogue_id.clone(), reason: e.to_string() })?;
        out.dialogues.push(dialogue);
    }
    Ok(out)
}

struct RawTurn {
    system: String,
    user: String,
    belief: Vec<(String, String)>,
}

struct RawDialogue {
    id: String,
    turns: Vec<RawTurn>,
}

#[derive(Deserialize)]
struct FlatDialogue {
    dialogue_idx: String,
    #[serde(default)]
    dialogue: Vec<FlatTurn>,
}

#[derive(Deserialize)]
struct FlatTurn {
    #[serde(default)]
    system_transcript: String,
    #[serde(default)]
    transcript: String,
    #[serde(default)]
    belief_state: Vec<FlatBelief>,
}

#[derive(Deserialize)]
struct FlatBelief {
    #[serde(default)]
    slots: Vec<Vec<String>>,
}

fn flat_dialogue(value: Value) -> Result<RawDialogue, IngestError> {
    let d: FlatDialogue = serde_json::from_value(value).map_err(|e| IngestError::Unparseable(e.to_string()))?;
    let turns = d
        .dialogue
        .into_iter()
        .map(|t| RawTurn {
            system: t.system_transcript,
            user: t.transcript,
            belief: t
                .belief_state
                .into_iter()
                .flat_map(|b| b.slots)
                .filter_map(|pair| match pair.as_slice() {
                    [k, v] => Some((k.clone(), v.clone())),
                    _ => None,
                })
                .collect(),
        })
        .collect();
    Ok(RawDialogue { id: strip_json_suffix(d.dialogue_idx), turns })
}

fn log_dialogue(id: String, value: Value) -> Result<RawDialogue, IngestError> {
    let bad = |reason: &str| IngestError::BadDialogue { id: id.clone(), reason: reason.to_string() };
    let log = value.get("log").and_then(Value::as_array).ok_or_else(|| bad("missing log"))?;
    let mut turns = Vec::new();
    let mut previous_system = String::new();
    let mut previous_belief = Vec::new();
    for pair in log.chunks(2) {
        let user = pair[0].get("text").and_then(Value::as_str).unwrap_or_default();
        let belief = match pair.get(1) {
            Some(system) => {
                let belief = system.get("metadata").map(metadata_belief).unwrap_or_default();
                previous_belief = belief.clone();
                belief
            }
            None => previous_belief.clone(),
        };
        turns.push(RawTurn { system: core::mem::take(&mut previous_system), user: user.to_string(), belief });
        if let Some(system) = pair.get(1) {
            previous_system = system.get("text").and_then(Value::as_str).unwrap_or_default().to_string();
        }
    }
    Ok(RawDialogue { id: strip_json_suffix(id), turns })
}

/// MultiWOZ ids carry the source file name, e.g. `MUL0001.json`.
fn strip_json_suffix(id: String) -> String {
    id.strip_suffix(".json").map(str::to_string).unwrap_or(id)
}

/// Flatten `{"hotel": {"semi": {"pricerange": "cheap"}, "book": {...}}}`.
fn metadata_belief(metadata: &Value) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let Some(domains) = metadata.as_object() else {
        return out;
    };
    for (domain, parts) in domains {
        if let Some(semi) = parts.get("semi").and_then(Value::as_object) {
            for (slot, v) in semi {
                if let Some(v) = v.as_str() {
                    out.push((format!("{domain}-{slot}"), v.to_string()));
                }
            }
        }
        if let Some(book) = parts.get("book").and_then(Value::as_object) {
            for (slot, v) in book {
                if let Some(v) = v.as_str() {
                    out.push((format!("{domain}-book {slot}"), v.to_string()));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{parse_schema, SlotDefinition};
    use alloc::vec;

    fn hotel_schema() -> PreferenceSchema {
        PreferenceSchema::new(
            "hotel",
            "1",
            vec![
                SlotDefinition::closed("price", "budget", false, &["cheap", "moderate", "expensive"]),
                SlotDefinition::closed("area", "part of town", false, &["north", "south", "centre"]),
            ],
        )
        .unwrap()
    }

    const FLAT: &str = r#"[{"dialogue_idx": "MUL0001.json", "domains": ["hotel"], "dialogue": [
        {"turn_idx": 0, "system_transcript": "", "transcript": "I need a cheap hotel.",
         "belief_state": [{"slots": [["hotel-pricerange", "cheap"]], "act": "inform"}]},
        {"turn_idx": 1, "system_transcript": "Which area?", "transcript": "The north, with parking please.",
         "belief_state": [{"slots": [["hotel-pricerange", "cheap"]], "act": "inform"},
                          {"slots": [["hotel-area", "north"]], "act": "inform"},
                          {"slots": [["hotel-parking", "yes"]], "act": "inform"}]}]}]"#;

    fn mapping() -> SlotMapping {
        SlotMapping::parse(r#"{"hotel-pricerange": "price", "hotel-area": "area", "hotel-parking": "drop"}"#).unwrap()
    }

    #[test]
    fn flat_layout_builds_cumulative_states() {
        let out = ingest_external(FLAT, &mapping(), &hotel_schema(), "hotel").unwrap();
        assert_eq!(out.dialogues.len(), 1);
        let d = &out.dialogues[0];
        assert_eq!(d.turns.len(), 2);
        assert_eq!(d.turns[0].gold_state, Some(PreferenceState::new().with("price", &["cheap"])));
        assert_eq!(
            d.turns[1].gold_state,
            Some(PreferenceState::new().with("price", &["cheap"]).with("area", &["north"]))
        );
        assert_eq!(d.turns[1].system_utterance, "Which area?");
        // parking was dropped once
        assert_eq!(out.warning_count, 1);
        assert_eq!(out.dropped_keys.get("hotel-parking"), Some(&1));
    }

    #[test]
    fn empty_list_gives_no_dialogues() {
        let out = ingest_external("[]", &mapping(), &hotel_schema(), "hotel").unwrap();
        assert!(out.dialogues.is_empty());
        assert_eq!(out.warning_count, 0);
    }

    #[test]
    fn rejects_unknown_internal_slot_and_garbage() {
        let bad = SlotMapping::parse(r#"{"hotel-stars": "rating"}"#).unwrap();
        assert!(matches!(
            ingest_external("[]", &bad, &hotel_schema(), "hotel"),
            Err(IngestError::UnknownInternalSlot { .. })
        ));
        assert!(matches!(
            ingest_external("not json", &mapping(), &hotel_schema(), "hotel"),
            Err(IngestError::Unparseable(_))
        ));
    }

    #[test]
    fn raw_log_layout() {
        let raw = r#"{"PMUL1.json": {"goal": {}, "log": [
            {"text": "Find me a Cheap hotel", "metadata": {}},
            {"text": "Sure, what area?", "metadata": {"hotel": {"book": {"booked": [], "people": ""},
                "semi": {"pricerange": "cheap", "area": "not mentioned", "parking": ""}}}},
            {"text": "Centre please", "metadata": {}},
            {"text": "Booked.", "metadata": {"hotel": {"book": {"booked": [], "people": "2"},
                "semi": {"pricerange": "cheap", "area": "centre", "parking": ""}}}}]}}"#;
        let schema = parse_schema(&hotel_schema().to_json()).unwrap();
        let out = ingest_external(raw, &mapping(), &schema, "hotel").unwrap();
        let d = &out.dialogues[0];
        assert_eq!(d.dialogue_id, "PMUL1");
        assert_eq!(d.turns[0].system_utterance, "");
        assert_eq!(d.turns[1].system_utterance, "Sure, what area?");
        assert_eq!(
            d.turns[1].gold_state,
            Some(PreferenceState::new().with("price", &["cheap"]).with("area", &["centre"]))
        );
        // "hotel-book people" is unmapped
        assert_eq!(out.dropped_keys.get("hotel-book people"), Some(&1));
    }
}
