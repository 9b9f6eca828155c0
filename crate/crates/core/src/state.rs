//! Preference states, state gains, and the apply/diff algebra between them.
//!
//! A [`PreferenceState`] is the cumulative slot → values assignment after a
//! dialogue turn. A [`StateGain`] is an ordered list of [`GainOp`] edits.
//! Applying the gain extracted from the latest turn to the previous state
//! yields the next state; [`diff_states`] recovers the canonical gain between
//! two consecutive states.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::normalize::normalize_value;
use crate::schema::{AssignmentIssue, PreferenceSchema};

#[derive(Clone, Debug)]
struct SlotEntry {
    name: String,
    values: Vec<String>,
}

impl SlotEntry {
    fn position(&self, value: &str) -> Option<usize> {
        let key = normalize_value(value);
        self.values.iter().position(|v| normalize_value(v) == key)
    }

    fn normalized_set(&self) -> BTreeSet<String> {
        self.values.iter().map(|v| normalize_value(v)).collect()
    }
}

/// Cumulative slot → values assignment.
///
/// Slots are keyed by their normalized name, so iteration order is the sorted
/// normalized order. Within a slot, values keep insertion order and are unique
/// under normalization. A slot never maps to an empty set.
///
/// Equality is canonical: two states are equal when they hold the same
/// normalized (slot, value) pairs.
#[derive(Clone, Debug, Default)]
pub struct PreferenceState {
    slots: BTreeMap<String, SlotEntry>,
}

impl PreferenceState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Number of slots with at least one value.
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn get(&self, slot: &str) -> Option<&[String]> {
        self.slots.get(&normalize_value(slot)).map(|e| e.values.as_slice())
    }

    pub fn contains_slot(&self, slot: &str) -> bool {
        self.slots.contains_key(&normalize_value(slot))
    }

    pub fn contains(&self, slot: &str, value: &str) -> bool {
        self.slots.get(&normalize_value(slot)).is_some_and(|e| e.position(value).is_some())
    }

    /// Iterate `(slot name, values)` in canonical slot order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.slots.values().map(|e| (e.name.as_str(), e.values.as_slice()))
    }

    /// Slot names in canonical order.
    pub fn slot_names(&self) -> impl Iterator<Item = &str> {
        self.slots.values().map(|e| e.name.as_str())
    }

    /// All normalized `(slot, value)` pairs.
    pub fn pairs(&self) -> BTreeSet<(String, String)> {
        self.slots.iter().flat_map(|(key, e)| e.values.iter().map(move |v| (key.clone(), normalize_value(v)))).collect()
    }

    /// Union `values` into `slot`. Duplicates (after normalization) are ignored.
    pub fn add_values<S: AsRef<str>>(&mut self, slot: &str, values: &[S]) {
        if values.is_empty() {
            return;
        }
        let entry = self
            .slots
            .entry(normalize_value(slot))
            .or_insert_with(|| SlotEntry { name: slot.trim().to_string(), values: Vec::new() });
        for v in values {
            let v = v.as_ref();
            if entry.position(v).is_none() {
                entry.values.push(v.trim().to_string());
            }
        }
        if entry.values.is_empty() {
            self.slots.remove(&normalize_value(slot));
        }
    }

    /// Remove one value; returns whether it was present. Drops the slot when
    /// it becomes empty.
    pub fn remove_value(&mut self, slot: &str, value: &str) -> bool {
        let key = normalize_value(slot);
        let Some(entry) = self.slots.get_mut(&key) else {
            return false;
        };
        let Some(pos) = entry.position(value) else {
            return false;
        };
        entry.values.remove(pos);
        if entry.values.is_empty() {
            self.slots.remove(&key);
        }
        true
    }

    /// Replace the slot's values. An empty list clears the slot.
    pub fn set_values<S: AsRef<str>>(&mut self, slot: &str, values: &[S]) {
        self.slots.remove(&normalize_value(slot));
        self.add_values(slot, values);
    }

    /// Remove a slot; returns whether it was present.
    pub fn clear_slot(&mut self, slot: &str) -> bool {
        self.slots.remove(&normalize_value(slot)).is_some()
    }

    /// Builder-style helper used heavily in tests and fixtures.
    pub fn with<S: AsRef<str>>(mut self, slot: &str, values: &[S]) -> Self {
        self.add_values(slot, values);
        self
    }

    /// Deterministic text form used for exact match and edit-distance metrics.
    ///
    /// Slots are sorted by normalized name and values sorted within each slot,
    /// giving `slot=[v1,v2]; slot2=[v3]`. Normalized forms are written, and the
    /// structure characters `\ = ; , [ ]` are backslash-escaped inside names and
    /// values so distinct states never share a text.
    pub fn canonicalize(&self) -> String {
        let mut out = String::new();
        for (i, (key, entry)) in self.slots.iter().enumerate() {
            if i > 0 {
                out.push_str("; ");
            }
            push_escaped(&mut out, key);
            out.push_str("=[");
            for (j, v) in entry.normalized_set().iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                push_escaped(&mut out, v);
            }
            out.push(']');
        }
        out
    }
}

fn push_escaped(out: &mut String, s: &str) {
    for c in s.chars() {
        if matches!(c, '\\' | '=' | ';' | ',' | '[' | ']') {
            out.push('\\');
        }
        out.push(c);
    }
}

/// See [`PreferenceState::canonicalize`].
pub fn canonicalize(state: &PreferenceState) -> String {
    state.canonicalize()
}

/// Canonical equality of two states.
pub fn states_equal(a: &PreferenceState, b: &PreferenceState) -> bool {
    a == b
}

impl PartialEq for PreferenceState {
    fn eq(&self, other: &Self) -> bool {
        self.slots.len() == other.slots.len()
            && self
                .slots
                .iter()
                .all(|(key, e)| other.slots.get(key).is_some_and(|o| o.normalized_set() == e.normalized_set()))
    }
}

impl Eq for PreferenceState {}

impl<S: AsRef<str>> FromIterator<(S, Vec<S>)> for PreferenceState {
    fn from_iter<I: IntoIterator<Item = (S, Vec<S>)>>(iter: I) -> Self {
        let mut state = PreferenceState::new();
        for (slot, values) in iter {
            state.add_values(slot.as_ref(), &values);
        }
        state
    }
}

impl Serialize for PreferenceState {
    fn serialize<Ser: Serializer>(&self, serializer: Ser) -> Result<Ser::Ok, Ser::Error> {
        let mut map = serializer.serialize_map(Some(self.slots.len()))?;
        for entry in self.slots.values() {
            map.serialize_entry(&entry.name, &entry.values)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for PreferenceState {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct StateVisitor;

        impl<'de> Visitor<'de> for StateVisitor {
            type Value = PreferenceState;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from slot name to a list of values")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
                let mut state = PreferenceState::new();
                while let Some((slot, values)) = access.next_entry::<String, SlotValues>()? {
                    state.add_values(&slot, &values.0);
                }
                Ok(state)
            }
        }

        deserializer.deserialize_map(StateVisitor)
    }
}

/// Accepts either a single string or a list of strings for a slot.
struct SlotValues(Vec<String>);

impl<'de> Deserialize<'de> for SlotValues {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            One(String),
            Many(Vec<String>),
        }
        Ok(match Raw::deserialize(deserializer)? {
            Raw::One(v) => SlotValues(alloc::vec![v]),
            Raw::Many(vs) => SlotValues(vs),
        })
    }
}

/// Edit operation kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    #[serde(alias = "ADD", alias = "Add")]
    Add,
    #[serde(alias = "REMOVE", alias = "Remove")]
    Remove,
    #[serde(alias = "SET", alias = "Set", alias = "update", alias = "UPDATE")]
    Set,
    #[serde(alias = "CLEAR", alias = "Clear")]
    Clear,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Remove => "remove",
            OpKind::Set => "set",
            OpKind::Clear => "clear",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One edit on a preference state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GainOp {
    pub op: OpKind,
    pub slot: String,
    #[serde(default)]
    pub values: Vec<String>,
}

impl GainOp {
    pub fn new<S: Into<String>>(op: OpKind, slot: impl Into<String>, values: impl IntoIterator<Item = S>) -> Self {
        Self { op, slot: slot.into(), values: values.into_iter().map(Into::into).collect() }
    }

    pub fn add<S: Into<String>>(slot: impl Into<String>, values: impl IntoIterator<Item = S>) -> Self {
        Self::new(OpKind::Add, slot, values)
    }

    pub fn remove<S: Into<String>>(slot: impl Into<String>, values: impl IntoIterator<Item = S>) -> Self {
        Self::new(OpKind::Remove, slot, values)
    }

    pub fn set<S: Into<String>>(slot: impl Into<String>, values: impl IntoIterator<Item = S>) -> Self {
        Self::new(OpKind::Set, slot, values)
    }

    pub fn clear(slot: impl Into<String>) -> Self {
        Self::new::<String>(OpKind::Clear, slot, [])
    }

    /// ADD/REMOVE/SET carry at least one value, CLEAR carries none.
    pub fn is_well_formed(&self) -> bool {
        match self.op {
            OpKind::Clear => self.values.is_empty(),
            _ => !self.values.is_empty(),
        }
    }
}

/// Ordered list of edits turning one state into the next.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateGain {
    pub ops: Vec<GainOp>,
}

impl StateGain {
    pub fn new(ops: Vec<GainOp>) -> Self {
        Self { ops }
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    /// Canonical form: only ADD/REMOVE, at most one of each per slot, ADD
    /// before REMOVE, slots in sorted normalized order, all ops well formed.
    pub fn is_canonical(&self) -> bool {
        let mut last: Option<(String, OpKind)> = None;
        for op in &self.ops {
            if !matches!(op.op, OpKind::Add | OpKind::Remove) || !op.is_well_formed() {
                return false;
            }
            let key = (normalize_value(&op.slot), op.op);
            if let Some(prev) = &last {
                if *prev >= key {
                    return false;
                }
            }
            last = Some(key);
        }
        true
    }
}

impl From<Vec<GainOp>> for StateGain {
    fn from(ops: Vec<GainOp>) -> Self {
        Self { ops }
    }
}

/// How [`apply_gain`] treats operations that do not fit the state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApplyMode {
    /// Inconsistent operations are errors.
    Strict,
    /// Inconsistent operations are skipped.
    Lenient,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum ApplyError {
    #[error("op {index}: remove of absent value {value:?} from slot {slot:?}")]
    RemoveAbsentValue { index: usize, slot: String, value: String },
    #[error("op {index}: {op} on absent slot {slot:?}")]
    AbsentSlot { index: usize, op: OpKind, slot: String },
    #[error("op {index}: {op} on slot {slot:?} carries no values")]
    MissingValues { index: usize, op: OpKind, slot: String },
    #[error("op {index}: clear on slot {slot:?} carries values")]
    UnexpectedValues { index: usize, slot: String },
}

/// Apply `gain` to `state`, returning the new state. The input is untouched.
///
/// ADD unions values, REMOVE deletes them, SET replaces the slot and CLEAR
/// drops it. Slots left empty are dropped.
pub fn apply_gain(state: &PreferenceState, gain: &StateGain, mode: ApplyMode) -> Result<PreferenceState, ApplyError> {
    let mut next = state.clone();
    for (index, op) in gain.ops.iter().enumerate() {
        if let Err(e) = apply_op(&mut next, index, op, mode) {
            if mode == ApplyMode::Strict {
                return Err(e);
            }
        }
    }
    Ok(next)
}

fn apply_op(state: &mut PreferenceState, index: usize, op: &GainOp, mode: ApplyMode) -> Result<(), ApplyError> {
    let slot = op.slot.as_str();
    match op.op {
        OpKind::Add | OpKind::Remove | OpKind::Set if op.values.is_empty() => {
            // Lenient SET with no values behaves like CLEAR.
            if op.op == OpKind::Set && mode == ApplyMode::Lenient {
                state.clear_slot(slot);
            }
            Err(ApplyError::MissingValues { index, op: op.op, slot: op.slot.clone() })
        }
        OpKind::Add => {
            state.add_values(slot, &op.values);
            Ok(())
        }
        OpKind::Remove => {
            if !state.contains_slot(slot) {
                return Err(ApplyError::AbsentSlot { index, op: op.op, slot: op.slot.clone() });
            }
            if mode == ApplyMode::Strict {
                if let Some(missing) = op.values.iter().find(|v| !state.contains(slot, v)) {
                    return Err(ApplyError::RemoveAbsentValue { index, slot: op.slot.clone(), value: missing.clone() });
                }
            }
            for v in &op.values {
                state.remove_value(slot, v);
            }
            Ok(())
        }
        OpKind::Set => {
            state.set_values(slot, &op.values);
            Ok(())
        }
        OpKind::Clear => {
            if mode == ApplyMode::Strict && !op.values.is_empty() {
                return Err(ApplyError::UnexpectedValues { index, slot: op.slot.clone() });
            }
            if state.clear_slot(slot) {
                Ok(())
            } else {
                Err(ApplyError::AbsentSlot { index, op: op.op, slot: op.slot.clone() })
            }
        }
    }
}

/// Canonical gain from `old` to `new`.
///
/// Per slot (sorted by normalized name): one ADD with the values only in
/// `new` (in `new`'s order), then one REMOVE with the values only in `old`.
pub fn diff_states(old: &PreferenceState, new: &PreferenceState) -> StateGain {
    let keys: BTreeSet<&String> = old.slots.keys().chain(new.slots.keys()).collect();
    let mut ops = Vec::new();
    for key in keys {
        let before = old.slots.get(key);
        let after = new.slots.get(key);
        if let Some(after) = after {
            let added: Vec<String> =
                after.values.iter().filter(|v| before.is_none_or(|b| b.position(v).is_none())).cloned().collect();
            if !added.is_empty() {
                ops.push(GainOp::add(after.name.clone(), added));
            }
        }
        if let Some(before) = before {
            let removed: Vec<String> =
                before.values.iter().filter(|v| after.is_none_or(|a| a.position(v).is_none())).cloned().collect();
            if !removed.is_empty() {
                ops.push(GainOp::remove(before.name.clone(), removed));
            }
        }
    }
    StateGain { ops }
}

/// Why a gain was rejected by [`validate_gain`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    #[serde(rename = "unknown slot")]
    UnknownSlot,
    #[serde(rename = "value outside schema")]
    ValueOutsideSchema,
    #[serde(rename = "remove of absent value")]
    RemoveOfAbsentValue,
    #[serde(rename = "operation on absent slot")]
    OperationOnAbsentSlot,
    #[serde(rename = "missing values")]
    MissingValues,
    #[serde(rename = "unexpected values")]
    UnexpectedValues,
    #[serde(rename = "too many values for single-valued slot")]
    TooManyValues,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::UnknownSlot => "unknown slot",
            ViolationKind::ValueOutsideSchema => "value outside schema",
            ViolationKind::RemoveOfAbsentValue => "remove of absent value",
            ViolationKind::OperationOnAbsentSlot => "operation on absent slot",
            ViolationKind::MissingValues => "missing values",
            ViolationKind::UnexpectedValues => "unexpected values",
            ViolationKind::TooManyValues => "too many values for single-valued slot",
        }
    }
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Index of the offending op; `None` for violations of the resulting state.
    pub op_index: Option<usize>,
    pub slot: String,
    pub value: Option<String>,
    pub reason: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(i) = self.op_index {
            write!(f, "op {i}: ")?;
        }
        write!(f, "{} (slot {:?}", self.reason, self.slot)?;
        if let Some(v) = &self.value {
            write!(f, ", value {v:?}")?;
        }
        f.write_str(")")
    }
}

/// Strict check of a gain against a history state and a schema.
///
/// Every op must name a schema slot, carry schema-valid values, and apply
/// strictly. The resulting state must respect single-valued slots. All
/// violations are collected; on success the derived state is returned.
pub fn validate_gain(
    schema: &PreferenceSchema,
    history: &PreferenceState,
    gain: &StateGain,
) -> Result<PreferenceState, Vec<Violation>> {
    let mut state = history.clone();
    let mut violations = Vec::new();
    for (index, op) in gain.ops.iter().enumerate() {
        let violation = |reason, value: Option<&String>| Violation {
            op_index: Some(index),
            slot: op.slot.clone(),
            value: value.cloned(),
            reason,
        };
        let Some(def) = schema.slot(&op.slot) else {
            violations.push(violation(ViolationKind::UnknownSlot, None));
            continue;
        };
        if matches!(op.op, OpKind::Add | OpKind::Set) {
            let before = violations.len();
            for v in &op.values {
                if !def.accepts(v) {
                    violations.push(violation(ViolationKind::ValueOutsideSchema, Some(v)));
                }
            }
            if violations.len() > before {
                continue;
            }
        }
        match apply_op(&mut state, index, op, ApplyMode::Strict) {
            Ok(()) => {}
            Err(ApplyError::RemoveAbsentValue { value, .. }) => {
                violations.push(violation(ViolationKind::RemoveOfAbsentValue, Some(&value)));
            }
            Err(ApplyError::AbsentSlot { op: OpKind::Remove, .. }) => {
                // Removing from an absent slot necessarily removes absent values.
                violations.push(violation(ViolationKind::RemoveOfAbsentValue, op.values.first()));
            }
            Err(ApplyError::AbsentSlot { .. }) => {
                violations.push(violation(ViolationKind::OperationOnAbsentSlot, None));
            }
            Err(ApplyError::MissingValues { .. }) => {
                violations.push(violation(ViolationKind::MissingValues, None));
            }
            Err(ApplyError::UnexpectedValues { .. }) => {
                violations.push(violation(ViolationKind::UnexpectedValues, op.values.first()));
            }
        }
    }
    for (slot, values) in state.iter() {
        let check = schema.validate_assignment(slot, values);
        if check.issues.iter().any(|i| matches!(i, AssignmentIssue::TooManyValues { .. })) {
            violations.push(Violation {
                op_index: None,
                slot: slot.to_string(),
                value: None,
                reason: ViolationKind::TooManyValues,
            });
        }
    }
    if violations.is_empty() {
        Ok(state)
    } else {
        Err(violations)
    }
}
