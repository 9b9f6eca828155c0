//! Few-shot preference extraction.
//!
//! Two prompt formats are supported. In `iterchat` mode the model sees the
//! accumulated history state and only the latest turn, and answers with the
//! gain and the updated state. In `multi_turn` mode it sees the whole dialogue
//! and answers with the final state. [`extract_dialogue_iterative`] runs the
//! one-turn extractor turn by turn, carrying its own predictions forward.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backend::{attach_directive, BackendError, ChatMessage, Directive, GenerationBackend};
use crate::dataset::{turn_record_id, IterChatRecord, MultiTurnDialogue};
use crate::json::first_json_object;
use crate::prompts::PromptSet;
use crate::schema::PreferenceSchema;
use crate::state::{apply_gain, diff_states, ApplyMode, PreferenceState, StateGain};

/// Heading that starts the example block `k` (1-based) in the user message.
pub const EXAMPLE_HEADING: &str = "### Example";
/// Heading that starts the input to extract from.
pub const INPUT_HEADING: &str = "### Input";
/// Prefix of a rendered assistant line.
pub const SYSTEM_LINE: &str = "system: ";
/// Prefix of a rendered user line.
pub const USER_LINE: &str = "user: ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    #[serde(alias = "iterchat")]
    IterChat,
    #[serde(alias = "multi-turn")]
    MultiTurn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    #[default]
    Ok,
    Repaired,
    Failed,
}

impl ParseStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ParseStatus::Ok => "ok",
            ParseStatus::Repaired => "repaired",
            ParseStatus::Failed => "failed",
        }
    }
}

/// One rendered demonstration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DemoExample {
    pub input: String,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub state_gain: StateGain,
    pub preference_extraction: PreferenceState,
    pub raw_output: String,
    pub parse_status: ParseStatus,
    /// Predicted (slot, value) assignments the schema does not allow. They are
    /// kept in the prediction.
    #[serde(default)]
    pub schema_violations: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("{mode:?} mode cannot render this input")]
    ModeMismatch { mode: ExtractionMode },
    #[error("demonstration {0:?} is not labeled")]
    UnlabeledDemo(String),
    #[error("record {record_id:?}: {source}")]
    Backend { record_id: String, source: BackendError },
    #[error("dialogue {dialogue_id:?} has no turns")]
    EmptyDialogue { dialogue_id: String },
}

/// Backend failure in the middle of an iterative run, with the turns that
/// completed before it.
#[derive(Debug, Error)]
#[error("turn {turn}: {source}")]
pub struct IterativeError {
    pub turn: usize,
    pub partial: Vec<ExtractionResult>,
    #[source]
    pub source: ExtractError,
}

/// Input to [`build_prompt`].
#[derive(Clone, Copy, Debug)]
pub enum PromptInput<'a> {
    Record(&'a IterChatRecord),
    Dialogue(&'a MultiTurnDialogue),
}

fn state_json(state: &PreferenceState) -> String {
    serde_json::to_string(state).expect("state serialization")
}

fn push_turn(out: &mut String, system: &str, user: &str) {
    let system = if system.trim().is_empty() { "(none)" } else { system.trim() };
    let _ = writeln!(out, "{SYSTEM_LINE}{system}");
    let _ = writeln!(out, "{USER_LINE}{}", user.trim());
}

/// History state plus the single latest turn.
pub fn render_record_input(record: &IterChatRecord) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "History Preference: {}", state_json(&record.history_preference));
    out.push_str("Most Recent One-Turn Dialogue:\n");
    push_turn(&mut out, &record.system_utterance, &record.user_utterance);
    out
}

/// Every turn of the dialogue, in order.
pub fn render_dialogue_input(dialogue: &MultiTurnDialogue) -> String {
    let mut out = String::from("Dialogue:\n");
    for (i, t) in dialogue.turns.iter().enumerate() {
        let _ = writeln!(out, "[Turn {}]", i + 1);
        push_turn(&mut out, &t.system_utterance, &t.user_utterance);
    }
    out
}

fn iterchat_output(gain: &StateGain, extraction: &PreferenceState) -> String {
    json!({ "state_gain": gain, "preference_extraction": extraction }).to_string()
}

fn multi_turn_output(state: &PreferenceState) -> String {
    json!({ "preference_extraction": state }).to_string()
}

impl DemoExample {
    /// Demonstration from a labeled record (iterchat mode).
    pub fn from_record(record: &IterChatRecord) -> Result<Self, ExtractError> {
        let (Some(gain), Some(extraction)) = (&record.state_gain, &record.preference_extraction) else {
            return Err(ExtractError::UnlabeledDemo(record.record_id.clone()));
        };
        Ok(Self { input: render_record_input(record), output: iterchat_output(gain, extraction) })
    }

    /// Demonstration from a labeled dialogue (multi-turn mode).
    pub fn from_dialogue(dialogue: &MultiTurnDialogue) -> Result<Self, ExtractError> {
        let final_state = dialogue
            .final_state()
            .filter(|_| dialogue.is_labeled())
            .ok_or_else(|| ExtractError::UnlabeledDemo(dialogue.dialogue_id.clone()))?;
        Ok(Self { input: render_dialogue_input(dialogue), output: multi_turn_output(final_state) })
    }
}

/// Slot list with descriptions and candidate values, one slot per line.
pub fn render_schema(schema: &PreferenceSchema) -> String {
    let mut out = String::new();
    for slot in &schema.slots {
        let _ = write!(out, "- {}", slot.name);
        if !slot.description.is_empty() {
            let _ = write!(out, ": {}", slot.description);
        }
        let arity = if slot.multi_valued { "one or more values" } else { "a single value" };
        let _ = write!(out, " ({arity})");
        if !slot.schema_values.is_empty() {
            let _ = write!(out, "; values: {}", slot.schema_values.join(" | "));
        }
        if slot.allow_free_values {
            out.push_str("; other values allowed");
        }
        out.push('\n');
    }
    out
}

/// Build the chat messages for one extraction.
///
/// The system message states the task, the schema and the output contract.
/// The user message renders each demonstration under an `### Example k`
/// heading and the input under `### Input`. Labels on the input are never
/// rendered.
pub fn build_prompt(
    mode: ExtractionMode,
    schema: &PreferenceSchema,
    demos: &[DemoExample],
    input: PromptInput<'_>,
    prompts: &PromptSet,
) -> Result<Vec<ChatMessage>, ExtractError> {
    let rendered = match (mode, input) {
        (ExtractionMode::IterChat, PromptInput::Record(r)) => render_record_input(r),
        (ExtractionMode::MultiTurn, PromptInput::Dialogue(d)) => render_dialogue_input(d),
        _ => return Err(ExtractError::ModeMismatch { mode }),
    };
    let template = match mode {
        ExtractionMode::IterChat => &prompts.extract_iterchat_system,
        ExtractionMode::MultiTurn => &prompts.extract_multi_turn_system,
    };
    let schema_text = render_schema(schema);
    let system = prompts.render(template, &[("domain", &schema.domain_name), ("schema", schema_text.trim_end())]);

    let mut user = String::new();
    for (i, demo) in demos.iter().enumerate() {
        let _ = write!(user, "{EXAMPLE_HEADING} {}\n{}Output: {}\n\n", i + 1, demo.input, demo.output);
    }
    let _ = write!(user, "{INPUT_HEADING}\n{rendered}Output:");
    Ok(alloc::vec![ChatMessage::system(system), ChatMessage::user(user)])
}

fn parse_gain(value: &Value) -> Option<StateGain> {
    serde_json::from_value(value.clone()).ok()
}

fn parse_state(value: &Value) -> Option<PreferenceState> {
    serde_json::from_value(value.clone()).ok()
}

fn schema_violations(schema: &PreferenceSchema, state: &PreferenceState) -> Vec<String> {
    state
        .iter()
        .flat_map(|(slot, values)| {
            schema.validate_assignment(slot, values).issues.into_iter().map(|issue| issue.to_string())
        })
        .collect()
}

/// Interpret raw iterchat-mode model output. Never fails.
///
/// The gain is authoritative: the extraction is always
/// `apply_gain(history, gain, lenient)`. A missing gain is derived from the
/// reported extraction. Anything that had to be derived or overridden is
/// `repaired`; output without a usable JSON object is `failed` and predicts
/// the history unchanged.
pub fn parse_extraction_output(raw: &str, schema: &PreferenceSchema, history: &PreferenceState) -> ExtractionResult {
    let failed = || ExtractionResult {
        state_gain: StateGain::default(),
        preference_extraction: history.clone(),
        raw_output: raw.to_string(),
        parse_status: ParseStatus::Failed,
        schema_violations: Vec::new(),
    };
    let Some((_, value)) = first_json_object(raw) else {
        return failed();
    };
    let gain = value.get("state_gain").and_then(parse_gain);
    let reported = value.get("preference_extraction").and_then(parse_state);

    let (state_gain, preference_extraction, parse_status) = match (gain, reported) {
        (Some(gain), reported) => {
            let derived = apply_gain(history, &gain, ApplyMode::Lenient).unwrap_or_else(|_| history.clone());
            let status = match reported {
                Some(r) if r == derived => ParseStatus::Ok,
                _ => ParseStatus::Repaired,
            };
            (gain, derived, status)
        }
        (None, Some(reported)) => (diff_states(history, &reported), reported, ParseStatus::Repaired),
        (None, None) => return failed(),
    };
    ExtractionResult {
        schema_violations: schema_violations(schema, &preference_extraction),
        state_gain,
        preference_extraction,
        raw_output: raw.to_string(),
        parse_status,
    }
}

/// Interpret raw multi-turn-mode output (a final state). Never fails.
pub fn parse_final_state_output(raw: &str, schema: &PreferenceSchema) -> ExtractionResult {
    let empty = PreferenceState::new();
    let reported = first_json_object(raw).and_then(|(_, v)| v.get("preference_extraction").and_then(parse_state));
    match reported {
        Some(state) => ExtractionResult {
            state_gain: diff_states(&empty, &state),
            schema_violations: schema_violations(schema, &state),
            preference_extraction: state,
            raw_output: raw.to_string(),
            parse_status: ParseStatus::Ok,
        },
        None => ExtractionResult {
            state_gain: StateGain::default(),
            preference_extraction: empty,
            raw_output: raw.to_string(),
            parse_status: ParseStatus::Failed,
            schema_violations: Vec::new(),
        },
    }
}

/// Echo directive for a record: its gold gain (or the gain implied by its
/// gold extraction), applied to its history.
fn echo_directive(record: &IterChatRecord) -> Directive {
    let gain = match (&record.state_gain, &record.preference_extraction) {
        (Some(g), _) => g.clone(),
        (None, Some(e)) => diff_states(&record.history_preference, e),
        (None, None) => StateGain::default(),
    };
    let extraction = apply_gain(&record.history_preference, &gain, ApplyMode::Lenient).ok();
    Directive::Extract { state_gain: gain, preference_extraction: extraction }
}

/// Extract the gain of one record's latest turn.
///
/// Labels on `record` are not shown to the model. When the backend takes
/// directives they feed the echo directive.
pub fn extract_turn<B: GenerationBackend + ?Sized>(
    record: &IterChatRecord,
    schema: &PreferenceSchema,
    demos: &[DemoExample],
    backend: &B,
    prompts: &PromptSet,
) -> Result<ExtractionResult, ExtractError> {
    let unlabeled = record.unlabeled();
    let mut messages = build_prompt(ExtractionMode::IterChat, schema, demos, PromptInput::Record(&unlabeled), prompts)?;
    if backend.wants_directives() {
        attach_directive(&mut messages, &echo_directive(record));
    }
    let raw = backend
        .complete(&messages)
        .map_err(|source| ExtractError::Backend { record_id: record.record_id.clone(), source })?;
    Ok(parse_extraction_output(&raw, schema, &record.history_preference))
}

/// Extract the final state of a whole dialogue in one call.
pub fn extract_multi_turn<B: GenerationBackend + ?Sized>(
    dialogue: &MultiTurnDialogue,
    schema: &PreferenceSchema,
    demos: &[DemoExample],
    backend: &B,
    prompts: &PromptSet,
) -> Result<ExtractionResult, ExtractError> {
    let mut unlabeled = dialogue.clone();
    for t in &mut unlabeled.turns {
        t.gold_state = None;
    }
    let mut messages =
        build_prompt(ExtractionMode::MultiTurn, schema, demos, PromptInput::Dialogue(&unlabeled), prompts)?;
    if backend.wants_directives() {
        let state = dialogue.final_state().cloned().unwrap_or_default();
        attach_directive(&mut messages, &Directive::ExtractFinal { preference_extraction: state });
    }
    let raw = backend
        .complete(&messages)
        .map_err(|source| ExtractError::Backend { record_id: dialogue.dialogue_id.clone(), source })?;
    Ok(parse_final_state_output(&raw, schema))
}

/// Run one-turn extraction over every turn of a dialogue.
///
/// Turn `t` is presented as a record whose history is the prediction after
/// turn `t-1` (empty for the first turn). A failed parse carries the previous
/// state forward. Gold states on the dialogue, when present, only feed echo
/// directives.
pub fn extract_dialogue_iterative<B: GenerationBackend + ?Sized>(
    dialogue: &MultiTurnDialogue,
    schema: &PreferenceSchema,
    demos: &[DemoExample],
    backend: &B,
    prompts: &PromptSet,
) -> Result<Vec<ExtractionResult>, IterativeError> {
    if dialogue.turns.is_empty() {
        return Err(IterativeError {
            turn: 0,
            partial: Vec::new(),
            source: ExtractError::EmptyDialogue { dialogue_id: dialogue.dialogue_id.clone() },
        });
    }
    let mut carried = PreferenceState::new();
    let mut previous_gold = PreferenceState::new();
    let mut results: Vec<ExtractionResult> = Vec::with_capacity(dialogue.turns.len());
    for (i, turn) in dialogue.turns.iter().enumerate() {
        let gold_gain = turn.gold_state.as_ref().map(|gold| {
            let gain = diff_states(&previous_gold, gold);
            previous_gold = gold.clone();
            gain
        });
        let record = IterChatRecord {
            record_id: turn_record_id(&dialogue.dialogue_id, i + 1),
            source_dialogue_id: Some(dialogue.dialogue_id.clone()),
            turn_index: Some(i as u32 + 1),
            history_preference: carried.clone(),
            system_utterance: turn.system_utterance.clone(),
            user_utterance: turn.user_utterance.clone(),
            state_gain: gold_gain,
            preference_extraction: None,
        };
        match extract_turn(&record, schema, demos, backend, prompts) {
            Ok(result) => {
                carried = result.preference_extraction.clone();
                results.push(result);
            }
            Err(source) => {
                return Err(IterativeError { turn: i + 1, partial: results, source });
            }
        }
    }
    Ok(results)
}

/// The states of an iterative trajectory.
pub fn trajectory_states(results: &[ExtractionResult]) -> Vec<PreferenceState> {
    results.iter().map(|r| r.preference_extraction.clone()).collect()
}

/// Part of the user message after the input heading.
pub fn input_section(user_message: &str) -> &str {
    user_message.rfind(INPUT_HEADING).map_or(user_message, |i| &user_message[i..])
}

/// Number of rendered user lines in `text`.
pub fn count_user_lines(text: &str) -> usize {
    text.lines().filter(|l| l.starts_with(USER_LINE)).count()
}

/// Convenience: the report label for a mode.
pub fn mode_label(mode: ExtractionMode) -> String {
    match mode {
        ExtractionMode::IterChat => "iterchat".to_string(),
        ExtractionMode::MultiTurn => "multi_turn".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FnBackend, TemplateBackend};
    use crate::dataset::{explode, DialogueTurn};
    use crate::schema::SlotDefinition;
    use crate::state::GainOp;
    use alloc::vec;
    use core::cell::Cell;

    fn shop() -> PreferenceSchema {
        PreferenceSchema::new(
            "shop",
            "1",
            vec![
                SlotDefinition::closed("price", "budget", false, &["less than $50", "between $100 and $200"]),
                SlotDefinition::closed("color", "colour", true, &["red", "blue"]),
                SlotDefinition::closed("brand", "maker", true, &["acme"]),
            ],
        )
        .unwrap()
    }

    fn price() -> PreferenceState {
        PreferenceState::new().with("price", &["less than $50"])
    }

    fn red_record() -> IterChatRecord {
        IterChatRecord {
            record_id: "r1".into(),
            source_dialogue_id: None,
            turn_index: Some(2),
            history_preference: price(),
            system_utterance: "Any color?".into(),
            user_utterance: "I like red.".into(),
            state_gain: Some(StateGain::new(vec![GainOp::add("color", ["red"])])),
            preference_extraction: Some(price().with("color", &["red"])),
        }
    }

    fn three_turns() -> MultiTurnDialogue {
        MultiTurnDialogue {
            dialogue_id: "d".into(),
            domain_name: "shop".into(),
            turns: vec![
                DialogueTurn::new("", "Cheap please.", Some(price())),
                DialogueTurn::new("Color?", "I like red.", Some(price().with("color", &["red"]))),
                DialogueTurn::new(
                    "Brand?",
                    "Actually, drop price.",
                    Some(PreferenceState::new().with("color", &["red"])),
                ),
            ],
        }
    }

    #[test]
    fn iterchat_prompt_has_history_and_one_turn() {
        let demos: Vec<DemoExample> =
            explode(&three_turns()).unwrap().iter().take(2).map(|r| DemoExample::from_record(r).unwrap()).collect();
        let messages = build_prompt(
            ExtractionMode::IterChat,
            &shop(),
            &demos,
            PromptInput::Record(&red_record().unlabeled()),
            &PromptSet::default(),
        )
        .unwrap();
        assert_eq!(messages.len(), 2);
        assert!(messages[0].content.contains("less than $50 | between $100 and $200"));
        let input = input_section(&messages[1].content);
        assert!(input.contains(r#"History Preference: {"price":["less than $50"]}"#));
        assert_eq!(count_user_lines(input), 1);
        assert!(input.contains("user: I like red."));
        assert_eq!(messages[1].content.matches(EXAMPLE_HEADING).count(), 2);
    }

    #[test]
    fn zero_shot_prompt() {
        let messages = build_prompt(
            ExtractionMode::IterChat,
            &shop(),
            &[],
            PromptInput::Record(&red_record()),
            &PromptSet::default(),
        )
        .unwrap();
        assert!(!messages[1].content.contains(EXAMPLE_HEADING));
        assert!(messages[1].content.starts_with(INPUT_HEADING));
        // labels never leak into the prompt
        assert!(!messages[1].content.contains("state_gain"));
    }

    #[test]
    fn multi_turn_prompt_renders_every_turn() {
        let d = three_turns();
        let messages =
            build_prompt(ExtractionMode::MultiTurn, &shop(), &[], PromptInput::Dialogue(&d), &PromptSet::default())
                .unwrap();
        let input = input_section(&messages[1].content);
        assert_eq!(count_user_lines(input), 3);
        let first = input.find("Cheap please.").unwrap();
        let last = input.find("Actually, drop price.").unwrap();
        assert!(first < last);
    }

    #[test]
    fn mode_mismatch() {
        let err = build_prompt(
            ExtractionMode::MultiTurn,
            &shop(),
            &[],
            PromptInput::Record(&red_record()),
            &PromptSet::default(),
        );
        assert!(matches!(err, Err(ExtractError::ModeMismatch { .. })));
    }

    #[test]
    fn parse_consistent_output() {
        let raw = r#"{"state_gain":[{"op":"add","slot":"color","values":["red"]}],"preference_extraction":{"price":["less than $50"],"color":["red"]}}"#;
        let r = parse_extraction_output(raw, &shop(), &price());
        assert_eq!(r.parse_status, ParseStatus::Ok);
        assert_eq!(r.preference_extraction, price().with("color", &["red"]));
    }

    #[test]
    fn parse_derives_missing_extraction() {
        let raw = r#"Here: {"state_gain":[{"op":"add","slot":"color","values":["red"]}]}"#;
        let r = parse_extraction_output(raw, &shop(), &price());
        assert_eq!(r.parse_status, ParseStatus::Repaired);
        assert_eq!(r.preference_extraction, price().with("color", &["red"]));
    }

    #[test]
    fn parse_derives_missing_gain_and_prefers_gain_on_conflict() {
        let only_state = r#"{"preference_extraction":{"color":["red"]}}"#;
        let r = parse_extraction_output(only_state, &shop(), &price());
        assert_eq!(r.parse_status, ParseStatus::Repaired);
        assert_eq!(apply_gain(&price(), &r.state_gain, ApplyMode::Strict).unwrap(), r.preference_extraction);

        let conflict = r#"{"state_gain":[{"op":"add","slot":"color","values":["red"]}],"preference_extraction":{"color":["blue"]}}"#;
        let r = parse_extraction_output(conflict, &shop(), &price());
        assert_eq!(r.parse_status, ParseStatus::Repaired);
        assert_eq!(r.preference_extraction, price().with("color", &["red"]));
    }

    #[test]
    fn parse_failure_keeps_history() {
        let r = parse_extraction_output("Sorry, I cannot help", &shop(), &price());
        assert_eq!(r.parse_status, ParseStatus::Failed);
        assert_eq!(r.preference_extraction, price());
        assert!(r.state_gain.is_empty());
    }

    #[test]
    fn parse_flags_schema_violations() {
        let raw = r#"{"state_gain":[{"op":"add","slot":"size","values":["XL"]}]}"#;
        let r = parse_extraction_output(raw, &shop(), &price());
        assert_eq!(r.preference_extraction.get("size").unwrap(), &["XL".to_string()]);
        assert_eq!(r.schema_violations.len(), 1);
    }

    #[test]
    fn echo_backend_reproduces_labels() {
        let record = red_record();
        let r = extract_turn(&record, &shop(), &[], &TemplateBackend, &PromptSet::default()).unwrap();
        assert_eq!(r.parse_status, ParseStatus::Ok);
        assert_eq!(Some(r.state_gain), record.state_gain);
        assert_eq!(Some(r.preference_extraction), record.preference_extraction);
    }

    #[test]
    fn echo_with_empty_gain_keeps_history() {
        let mut record = red_record();
        record.state_gain = Some(StateGain::default());
        record.preference_extraction = None;
        let r = extract_turn(&record, &shop(), &[], &TemplateBackend, &PromptSet::default()).unwrap();
        assert!(r.state_gain.is_empty());
        assert_eq!(r.preference_extraction, price());
    }

    #[test]
    fn echo_from_empty_history() {
        let mut record = red_record();
        record.history_preference = PreferenceState::new();
        record.preference_extraction = None;
        let r = extract_turn(&record, &shop(), &[], &TemplateBackend, &PromptSet::default()).unwrap();
        assert_eq!(r.preference_extraction, PreferenceState::new().with("color", &["red"]));
    }

    #[test]
    fn iterative_matches_gold_with_echo() {
        let d = three_turns();
        let results = extract_dialogue_iterative(&d, &shop(), &[], &TemplateBackend, &PromptSet::default()).unwrap();
        let gold: Vec<_> = d.turns.iter().map(|t| t.gold_state.clone().unwrap()).collect();
        assert_eq!(trajectory_states(&results), gold);
    }

    #[test]
    fn iterative_single_turn_equals_extract_turn() {
        let mut d = three_turns();
        d.turns.truncate(1);
        let results = extract_dialogue_iterative(&d, &shop(), &[], &TemplateBackend, &PromptSet::default()).unwrap();
        let record = &explode(&d).unwrap()[0];
        let single = extract_turn(record, &shop(), &[], &TemplateBackend, &PromptSet::default()).unwrap();
        assert_eq!(results.len(), 1);
        assert_eq!(results[0].preference_extraction, single.preference_extraction);
    }

    #[test]
    fn iterative_carries_forward_on_failed_parse() {
        let calls = Cell::new(0);
        let backend = FnBackend(|m: &[ChatMessage]| {
            calls.set(calls.get() + 1);
            if calls.get() == 2 {
                Ok("no idea".to_string())
            } else {
                crate::backend::template_complete(m)
            }
        });
        struct Directed<'a, B>(&'a B);
        impl<B: GenerationBackend> GenerationBackend for Directed<'_, B> {
            fn complete(&self, m: &[ChatMessage]) -> Result<String, BackendError> {
                self.0.complete(m)
            }
            fn wants_directives(&self) -> bool {
                true
            }
        }
        let d = three_turns();
        let results = extract_dialogue_iterative(&d, &shop(), &[], &Directed(&backend), &PromptSet::default()).unwrap();
        assert_eq!(results.len(), 3);
        assert_eq!(results[1].parse_status, ParseStatus::Failed);
        assert_eq!(results[1].preference_extraction, results[0].preference_extraction);
    }

    #[test]
    fn iterative_reports_partial_on_backend_error() {
        let calls = Cell::new(0);
        let backend = FnBackend(|_: &[ChatMessage]| {
            calls.set(calls.get() + 1);
            if calls.get() == 3 {
                Err(BackendError::Transport("down".into()))
            } else {
                Ok(r#"{"state_gain":[]}"#.to_string())
            }
        });
        let err =
            extract_dialogue_iterative(&three_turns(), &shop(), &[], &backend, &PromptSet::default()).unwrap_err();
        assert_eq!(err.turn, 3);
        assert_eq!(err.partial.len(), 2);
    }

    #[test]
    fn multi_turn_echo() {
        let d = three_turns();
        let r = extract_multi_turn(&d, &shop(), &[], &TemplateBackend, &PromptSet::default()).unwrap();
        assert_eq!(r.parse_status, ParseStatus::Ok);
        assert_eq!(Some(&r.preference_extraction), d.final_state());
        let failed = parse_final_state_output("nope", &shop());
        assert_eq!(failed.parse_status, ParseStatus::Failed);
        assert_eq!(mode_label(ExtractionMode::MultiTurn), "multi_turn");
    }
}
