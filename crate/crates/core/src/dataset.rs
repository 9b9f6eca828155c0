//! The two dialogue data formats and conversions between them.
//!
//! A [`MultiTurnDialogue`] carries every turn with an optional cumulative gold
//! state. An [`IterChatRecord`] carries only the accumulated history state
//! plus the latest (system, user) exchange, optionally labeled with the gain
//! and the resulting state.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::{apply_gain, diff_states, ApplyError, ApplyMode, PreferenceState, StateGain};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    #[serde(default)]
    pub system_utterance: String,
    pub user_utterance: String,
    /// Cumulative state after this turn.
    #[serde(default)]
    pub gold_state: Option<PreferenceState>,
}

impl DialogueTurn {
    pub fn new(system: &str, user: &str, gold: Option<PreferenceState>) -> Self {
        Self { system_utterance: system.into(), user_utterance: user.into(), gold_state: gold }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiTurnDialogue {
    pub dialogue_id: String,
    #[serde(default)]
    pub domain_name: String,
    pub turns: Vec<DialogueTurn>,
}

impl MultiTurnDialogue {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.turns.is_empty() {
            return Err(DatasetError::EmptyDialogue(self.dialogue_id.clone()));
        }
        if let Some(i) = self.turns.iter().position(|t| t.user_utterance.trim().is_empty()) {
            return Err(DatasetError::EmptyUserUtterance { id: self.dialogue_id.clone(), turn: i + 1 });
        }
        let labeled = self.turns.iter().filter(|t| t.gold_state.is_some()).count();
        if labeled != 0 && labeled != self.turns.len() {
            return Err(DatasetError::PartiallyLabeled(self.dialogue_id.clone()));
        }
        Ok(())
    }

    pub fn is_labeled(&self) -> bool {
        !self.turns.is_empty() && self.turns.iter().all(|t| t.gold_state.is_some())
    }

    /// Gold state after the last turn, if labeled.
    pub fn final_state(&self) -> Option<&PreferenceState> {
        self.turns.last().and_then(|t| t.gold_state.as_ref())
    }

    /// Gold gains per turn (from the empty state), if labeled.
    pub fn gold_gains(&self) -> Option<Vec<StateGain>> {
        let mut prev = PreferenceState::new();
        let mut gains = Vec::with_capacity(self.turns.len());
        for t in &self.turns {
            let gold = t.gold_state.as_ref()?;
            gains.push(diff_states(&prev, gold));
            prev = gold.clone();
        }
        Some(gains)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterChatRecord {
    pub record_id: String,
    pub source_dialogue_id: Option<String>,
    /// 1-based index of the turn this record represents.
    pub turn_index: Option<u32>,
    #[serde(default)]
    pub history_preference: PreferenceState,
    #[serde(default)]
    pub system_utterance: String,
    pub user_utterance: String,
    pub state_gain: Option<StateGain>,
    pub preference_extraction: Option<PreferenceState>,
}

impl IterChatRecord {
    pub fn is_labeled(&self) -> bool {
        self.state_gain.is_some() && self.preference_extraction.is_some()
    }

    /// Copy with labels removed.
    pub fn unlabeled(&self) -> Self {
        Self { state_gain: None, preference_extraction: None, ..self.clone() }
    }

    /// When both labels are present, history + gain must equal extraction.
    pub fn check_labels(&self, mode: ApplyMode) -> Result<(), DatasetError> {
        let (Some(gain), Some(extraction)) = (&self.state_gain, &self.preference_extraction) else {
            return Ok(());
        };
        let derived = apply_gain(&self.history_preference, gain, mode)
            .map_err(|source| DatasetError::Apply { record_id: self.record_id.clone(), source })?;
        if &derived != extraction {
            return Err(DatasetError::InconsistentLabels(self.record_id.clone()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum DatasetError {
    #[error("cannot explode unlabeled dialogue")]
    Unlabeled,
    #[error("dialogue {0:?} has no turns")]
    EmptyDialogue(String),
    #[error("dialogue {id:?} turn {turn} has an empty user utterance")]
    EmptyUserUtterance { id: String, turn: usize },
    #[error("dialogue {0:?} is only partially labeled")]
    PartiallyLabeled(String),
    #[error("record {0:?}: history + state_gain does not equal preference_extraction")]
    InconsistentLabels(String),
    #[error("record {record_id:?}: {source}")]
    Apply { record_id: String, source: ApplyError },
    #[error("gap at turn {0}")]
    Gap(u32),
    #[error("record {0:?} has no turn_index")]
    MissingTurnIndex(String),
    #[error("turn {0} belongs to a different dialogue")]
    MixedDialogues(u32),
    #[error("turn {0} has no state_gain")]
    MissingGain(u32),
    #[error("history of turn {0} does not match the replayed state")]
    HistoryMismatch(u32),
    #[error("preference_extraction of turn {0} does not match the replayed state")]
    ExtractionMismatch(u32),
}

/// Record id used for turn `turn` (1-based) of a dialogue.
pub fn turn_record_id(dialogue_id: &str, turn: usize) -> String {
    format!("{dialogue_id}-t{turn}")
}

/// Split a labeled dialogue into one labeled record per turn.
///
/// Record `t` has history `gold_{t-1}` (empty for the first turn), gain
/// `diff_states(gold_{t-1}, gold_t)` and extraction `gold_t`.
pub fn explode(dialogue: &MultiTurnDialogue) -> Result<Vec<IterChatRecord>, DatasetError> {
    if !dialogue.is_labeled() {
        return Err(DatasetError::Unlabeled);
    }
    dialogue.validate()?;
    let mut history = PreferenceState::new();
    let mut records = Vec::with_capacity(dialogue.turns.len());
    for (i, turn) in dialogue.turns.iter().enumerate() {
        let gold = turn.gold_state.clone().ok_or(DatasetError::Unlabeled)?;
        records.push(IterChatRecord {
            record_id: turn_record_id(&dialogue.dialogue_id, i + 1),
            source_dialogue_id: Some(dialogue.dialogue_id.clone()),
            turn_index: Some(i as u32 + 1),
            history_preference: history.clone(),
            system_utterance: turn.system_utterance.clone(),
            user_utterance: turn.user_utterance.clone(),
            state_gain: Some(diff_states(&history, &gold)),
            preference_extraction: Some(gold.clone()),
        });
        history = gold;
    }
    Ok(records)
}

/// Fold the gains of one dialogue's records over the empty state.
///
/// Records must share a source dialogue, have consecutive turn indices from
/// 1, and carry gains. Each record's history must equal the fold so far, and
/// its extraction (when present) the fold after its gain.
pub fn replay(records: &[IterChatRecord]) -> Result<PreferenceState, DatasetError> {
    let mut state = PreferenceState::new();
    let Some(first) = records.first() else {
        return Ok(state);
    };
    let dialogue = &first.source_dialogue_id;
    for (i, record) in records.iter().enumerate() {
        let expected = i as u32 + 1;
        let turn = record.turn_index.ok_or_else(|| DatasetError::MissingTurnIndex(record.record_id.clone()))?;
        if turn != expected {
            return Err(DatasetError::Gap(expected));
        }
        if &record.source_dialogue_id != dialogue {
            return Err(DatasetError::MixedDialogues(turn));
        }
        if record.history_preference != state {
            return Err(DatasetError::HistoryMismatch(turn));
        }
        let gain = record.state_gain.as_ref().ok_or(DatasetError::MissingGain(turn))?;
        state = apply_gain(&state, gain, ApplyMode::Lenient)
            .map_err(|source| DatasetError::Apply { record_id: record.record_id.clone(), source })?;
        if let Some(extraction) = &record.preference_extraction {
            if extraction != &state {
                return Err(DatasetError::ExtractionMismatch(turn));
            }
        }
    }
    Ok(state)
}
