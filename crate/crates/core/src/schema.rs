//! Preference schemas: the slot universe and legal values for a domain.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{attach_directive, BackendError, ChatMessage, Directive, GenerationBackend};
use crate::json::first_json_object;
use crate::normalize::normalize_value;
use crate::prompts::PromptSet;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotDefinition {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub multi_valued: bool,
    #[serde(default)]
    pub allow_free_values: bool,
    #[serde(default)]
    pub schema_values: Vec<String>,
}

impl SlotDefinition {
    pub fn closed(name: &str, description: &str, multi_valued: bool, values: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            description: description.to_string(),
            multi_valued,
            allow_free_values: false,
            schema_values: values.iter().map(|v| v.to_string()).collect(),
        }
    }

    /// Whether `value` is a legal value for this slot.
    pub fn accepts(&self, value: &str) -> bool {
        self.allow_free_values || self.schema_value(value).is_some()
    }

    /// The schema spelling of `value`, if it is a schema value.
    pub fn schema_value(&self, value: &str) -> Option<&str> {
        let key = normalize_value(value);
        self.schema_values.iter().find(|v| normalize_value(v) == key).map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceSchema {
    pub domain_name: String,
    pub version: String,
    pub slots: Vec<SlotDefinition>,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("empty slot list")]
    EmptySlotList,
    #[error("slot {index} has an empty name")]
    EmptySlotName { index: usize },
    #[error("duplicate slot name {0:?}")]
    DuplicateSlot(String),
    #[error("closed slot {0:?} has no schema_values")]
    ClosedSlotWithoutValues(String),
    #[error("slot {slot:?} lists value {value:?} more than once")]
    DuplicateValue { slot: String, value: String },
    #[error("malformed schema document: {0}")]
    Malformed(String),
}

/// Parse and validate a schema document.
pub fn parse_schema(document: &str) -> Result<PreferenceSchema, SchemaError> {
    let schema: PreferenceSchema = serde_json::from_str(document).map_err(|e| SchemaError::Malformed(e.to_string()))?;
    schema.validate()?;
    Ok(schema)
}

impl PreferenceSchema {
    /// Build a validated schema.
    pub fn new(domain_name: &str, version: &str, slots: Vec<SlotDefinition>) -> Result<Self, SchemaError> {
        let schema = Self { domain_name: domain_name.to_string(), version: version.to_string(), slots };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.slots.is_empty() {
            return Err(SchemaError::EmptySlotList);
        }
        let mut names = BTreeSet::new();
        for (index, slot) in self.slots.iter().enumerate() {
            if slot.name.trim().is_empty() {
                return Err(SchemaError::EmptySlotName { index });
            }
            if !names.insert(normalize_value(&slot.name)) {
                return Err(SchemaError::DuplicateSlot(slot.name.clone()));
            }
            if !slot.allow_free_values && slot.schema_values.is_empty() {
                return Err(SchemaError::ClosedSlotWithoutValues(slot.name.clone()));
            }
            let mut seen = BTreeSet::new();
            for v in &slot.schema_values {
                if !seen.insert(normalize_value(v)) {
                    return Err(SchemaError::DuplicateValue { slot: slot.name.clone(), value: v.clone() });
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        // Serializing plain strings, bools and vectors cannot fail.
        serde_json::to_string_pretty(self).expect("schema serialization")
    }

    pub fn slot(&self, name: &str) -> Option<&SlotDefinition> {
        let key = normalize_value(name);
        self.slots.iter().find(|s| normalize_value(&s.name) == key)
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// Check a proposed assignment of `values` to `slot`.
    ///
    /// An empty list is valid (the slot is untouched).
    pub fn validate_assignment<S: AsRef<str>>(&self, slot: &str, values: &[S]) -> AssignmentCheck {
        let mut issues = Vec::new();
        match self.slot(slot) {
            None => issues.push(AssignmentIssue::UnknownSlot { slot: slot.to_string() }),
            Some(def) => {
                for v in values {
                    if !def.accepts(v.as_ref()) {
                        issues.push(AssignmentIssue::ValueOutsideSchema {
                            slot: def.name.clone(),
                            value: v.as_ref().to_string(),
                        });
                    }
                }
                if !def.multi_valued && values.len() > 1 {
                    issues.push(AssignmentIssue::TooManyValues { slot: def.name.clone(), count: values.len() });
                }
            }
        }
        AssignmentCheck { valid: issues.is_empty(), issues }
    }
}

/// Result of [`PreferenceSchema::validate_assignment`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssignmentCheck {
    pub valid: bool,
    pub issues: Vec<AssignmentIssue>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AssignmentIssue {
    UnknownSlot { slot: String },
    ValueOutsideSchema { slot: String, value: String },
    TooManyValues { slot: String, count: usize },
}

impl fmt::Display for AssignmentIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AssignmentIssue::UnknownSlot { slot } => write!(f, "unknown slot: {slot}"),
            AssignmentIssue::ValueOutsideSchema { slot, value } => {
                write!(f, "value outside schema: {slot}={value}")
            }
            AssignmentIssue::TooManyValues { slot, count } => {
                write!(f, "single-valued slot {slot} given {count} values")
            }
        }
    }
}

impl AssignmentIssue {
    /// Short reason label.
    pub fn reason(&self) -> &'static str {
        match self {
            AssignmentIssue::UnknownSlot { .. } => "unknown slot",
            AssignmentIssue::ValueOutsideSchema { .. } => "value outside schema",
            AssignmentIssue::TooManyValues { .. } => "too many values",
        }
    }
}

#[derive(Debug, Error)]
pub enum DraftError {
    #[error("max_slots must be at least 1")]
    InvalidMaxSlots,
    #[error("backend failed while drafting schema: {0}")]
    Backend(#[from] BackendError),
    #[error("backend reply is not a schema ({reason}); raw reply: {raw}")]
    Unparseable { reason: String, raw: String },
    #[error("drafted schema is invalid ({source}); raw reply: {raw}")]
    Invalid { source: SchemaError, raw: String },
}

/// Loose shape accepted from a drafting backend before re-validation.
#[derive(Deserialize)]
struct DraftDocument {
    #[serde(default)]
    domain_name: Option<String>,
    #[serde(default)]
    version: Option<String>,
    slots: Vec<SlotDefinition>,
}

/// Ask a generation backend to draft a schema for a domain.
///
/// The reply is parsed tolerantly (first JSON object in the text), truncated
/// to `max_slots`, and re-validated through [`parse_schema`]. Closed slots the
/// backend left without values get a second call asking only for values.
pub fn draft_schema<B: GenerationBackend + ?Sized>(
    domain_description: &str,
    backend: &B,
    max_slots: usize,
    prompts: &PromptSet,
) -> Result<PreferenceSchema, DraftError> {
    if max_slots == 0 {
        return Err(DraftError::InvalidMaxSlots);
    }
    let max_text = format!("{max_slots}");
    let mut messages = alloc::vec![
        ChatMessage::system(prompts.render(&prompts.draft_system, &[])),
        ChatMessage::user(
            prompts.render(&prompts.draft_user, &[("domain", domain_description), ("max_slots", &max_text)],)
        ),
    ];
    if backend.wants_directives() {
        attach_directive(&mut messages, &Directive::Draft { domain: domain_description.to_string() });
    }
    let raw = backend.complete(&messages)?;
    let Some((_, value)) = first_json_object(&raw) else {
        return Err(DraftError::Unparseable { reason: "no JSON object found".to_string(), raw });
    };
    let doc: DraftDocument = serde_json::from_value(value)
        .map_err(|e| DraftError::Unparseable { reason: e.to_string(), raw: raw.clone() })?;

    let mut slots = doc.slots;
    slots.truncate(max_slots);
    for slot in &mut slots {
        slot.name = slot.name.trim().to_string();
        dedupe_values(&mut slot.schema_values);
    }

    let missing: Vec<String> =
        slots.iter().filter(|s| !s.allow_free_values && s.schema_values.is_empty()).map(|s| s.name.clone()).collect();
    let mut raw_all = raw;
    if !missing.is_empty() {
        let names = missing.join(", ");
        let mut messages = alloc::vec![
            ChatMessage::system(prompts.render(&prompts.draft_system, &[])),
            ChatMessage::user(
                prompts.render(&prompts.draft_values_user, &[("domain", domain_description), ("slots", &names)],)
            ),
        ];
        if backend.wants_directives() {
            attach_directive(&mut messages, &Directive::DraftValues { slots: missing.clone() });
        }
        let reply = backend.complete(&messages)?;
        if let Some((_, Value::Object(map))) = first_json_object(&reply) {
            for slot in &mut slots {
                if let Some(Value::Array(vs)) = map.get(&slot.name) {
                    if slot.schema_values.is_empty() {
                        slot.schema_values = vs.iter().filter_map(|v| v.as_str().map(str::to_string)).collect();
                        dedupe_values(&mut slot.schema_values);
                    }
                }
            }
        }
        raw_all.push_str("\n\n");
        raw_all.push_str(&reply);
    }

    let drafted = PreferenceSchema {
        domain_name: doc.domain_name.filter(|d| !d.trim().is_empty()).unwrap_or_else(|| domain_description.to_string()),
        version: doc.version.unwrap_or_else(|| "draft-1".to_string()),
        slots,
    };
    parse_schema(&drafted.to_json()).map_err(|source| DraftError::Invalid { source, raw: raw_all })
}

fn dedupe_values(values: &mut Vec<String>) {
    let mut seen = BTreeSet::new();
    values.retain(|v| !v.trim().is_empty() && seen.insert(normalize_value(v)));
}
