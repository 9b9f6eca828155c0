//! Text-generation backend abstraction and the deterministic template backend.
//!
//! Real backends (see the `iterchat` crate's HTTP client) send chat messages
//! to a model. The [`TemplateBackend`] instead reads a directive line that the
//! caller appended to the final message and answers from it, so pipelines can
//! run offline and reproducibly.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::state::{OpKind, PreferenceState, StateGain};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("no messages to send")]
    EmptyMessages,
    #[error("{role:?} message {index} has empty content")]
    EmptyContent { index: usize, role: Role },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed completion response ({reason}): {body}")]
    Protocol { reason: String, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("no directive")]
    NoDirective,
    #[error("{0}")]
    Other(String),
}

/// A chat-completion style text generator.
pub trait GenerationBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError>;

    /// Whether callers should append a [`Directive`] line to their prompts.
    fn wants_directives(&self) -> bool {
        false
    }
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for alloc::boxed::Box<B> {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        (**self).complete(messages)
    }

    fn wants_directives(&self) -> bool {
        (**self).wants_directives()
    }
}

/// Adapts a closure into a backend. Handy for scripted test doubles.
pub struct FnBackend<F>(pub F);

impl<F> GenerationBackend for FnBackend<F>
where
    F: Fn(&[ChatMessage]) -> Result<String, BackendError>,
{
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        (self.0)(messages)
    }
}

/// Reject message lists a chat endpoint would refuse.
pub fn check_messages(messages: &[ChatMessage]) -> Result<(), BackendError> {
    if messages.is_empty() {
        return Err(BackendError::EmptyMessages);
    }
    for (index, m) in messages.iter().enumerate() {
        if m.role != Role::Assistant && m.content.trim().is_empty() {
            return Err(BackendError::EmptyContent { index, role: m.role });
        }
    }
    Ok(())
}

pub const DIRECTIVE_PREFIX: &str = "@@DIRECTIVE ";
pub const DIRECTIVE_SUFFIX: &str = "@@";

/// Machine-readable instruction for the template backend.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Directive {
    /// Produce a one-turn dialogue expressing `gain` on top of `history`.
    Realize { history: PreferenceState, gain: StateGain },
    /// Echo a gain (and optionally the resulting state) as extraction output.
    Extract {
        state_gain: StateGain,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        preference_extraction: Option<PreferenceState>,
    },
    /// Echo a final state, as a multi-turn extractor would answer.
    ExtractFinal { preference_extraction: PreferenceState },
    /// Return the fixture schema for a domain.
    Draft { domain: String },
    /// Return fixture candidate values for the listed slots.
    DraftValues { slots: Vec<String> },
    /// Return `text` verbatim.
    Reply { text: String },
}

impl Directive {
    pub fn to_line(&self) -> String {
        // Directive payloads are plain data; serialization cannot fail.
        let json = serde_json::to_string(self).expect("directive serialization");
        format!("{DIRECTIVE_PREFIX}{json}{DIRECTIVE_SUFFIX}")
    }

    /// Parse the directive from the last non-empty line of `text`.
    pub fn from_text(text: &str) -> Option<Self> {
        let line = text.lines().rev().map(str::trim).find(|l| !l.is_empty())?;
        let body = line.strip_prefix(DIRECTIVE_PREFIX)?.strip_suffix(DIRECTIVE_SUFFIX)?;
        serde_json::from_str(body).ok()
    }
}

/// Append `directive` as the final line of the last message.
pub fn attach_directive(messages: &mut [ChatMessage], directive: &Directive) {
    if let Some(last) = messages.last_mut() {
        if !last.content.is_empty() && !last.content.ends_with('\n') {
            last.content.push('\n');
        }
        last.content.push_str(&directive.to_line());
    }
}

/// Deterministic offline backend driven by directive lines.
#[derive(Clone, Copy, Debug, Default)]
pub struct TemplateBackend;

impl GenerationBackend for TemplateBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        template_complete(messages)
    }

    fn wants_directives(&self) -> bool {
        true
    }
}

/// Answer from the directive on the final line of the last message.
pub fn template_complete(messages: &[ChatMessage]) -> Result<String, BackendError> {
    let last = messages.last().ok_or(BackendError::NoDirective)?;
    let directive = Directive::from_text(&last.content).ok_or(BackendError::NoDirective)?;
    let reply = match directive {
        Directive::Realize { history, gain } => json!({
            "system_utterance": template_system_utterance(&history),
            "user_utterance": template_user_utterance(&gain),
        })
        .to_string(),
        Directive::Extract { state_gain, preference_extraction } => match preference_extraction {
            Some(state) => json!({ "state_gain": state_gain, "preference_extraction": state }),
            None => json!({ "state_gain": state_gain }),
        }
        .to_string(),
        Directive::ExtractFinal { preference_extraction } => {
            json!({ "preference_extraction": preference_extraction }).to_string()
        }
        Directive::Draft { domain } => fixture_schema_json(&domain),
        Directive::DraftValues { slots } => {
            let mut map = serde_json::Map::new();
            for slot in slots {
                let values = fixture_values(&slot).unwrap_or(&[]);
                map.insert(slot, json!(values));
            }
            serde_json::Value::Object(map).to_string()
        }
        Directive::Reply { text } => text,
    };
    Ok(reply)
}

fn template_system_utterance(history: &PreferenceState) -> &'static str {
    if history.is_empty() {
        "Hi! What are you looking for today?"
    } else {
        "Got it. Is there anything else you would like?"
    }
}

/// One sentence per op: "I like {value}." for ADD, "Actually, drop {slot}."
/// for REMOVE.
pub fn template_user_utterance(gain: &StateGain) -> String {
    let sentences: Vec<String> = gain
        .ops
        .iter()
        .map(|op| match op.op {
            OpKind::Add => format!("I like {}.", join_values(&op.values)),
            OpKind::Remove => format!("Actually, drop {}.", op.slot),
            OpKind::Set => format!("Make the {} {}.", op.slot, join_values(&op.values)),
            OpKind::Clear => format!("Forget about the {}.", op.slot),
        })
        .collect();
    sentences.join(" ")
}

fn join_values(values: &[String]) -> String {
    match values {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {}", init.join(", "), last),
    }
}

const FIXTURE_SLOTS: &[(&str, &str, bool, &[&str])] = &[
    (
        "price",
        "How much the user is willing to spend",
        false,
        &["less than $50", "between $50 and $100", "between $100 and $200", "more than $200", "None"],
    ),
    ("brand", "Preferred manufacturer", true, &["acme", "globex", "initech", "umbrella"]),
    ("color", "Preferred product color", true, &["red", "blue", "black", "white", "green"]),
];

fn fixture_values(slot: &str) -> Option<&'static [&'static str]> {
    FIXTURE_SLOTS.iter().find(|(name, ..)| *name == slot).map(|(_, _, _, values)| *values)
}

fn fixture_schema_json(domain: &str) -> String {
    let slots: Vec<serde_json::Value> = FIXTURE_SLOTS
        .iter()
        .map(|(name, description, multi, values)| {
            json!({
                "name": name,
                "description": description,
                "multi_valued": multi,
                "allow_free_values": false,
                "schema_values": values,
            })
        })
        .collect();
    json!({ "domain_name": domain, "version": "template-1", "slots": slots }).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::GainOp;
    use alloc::vec;

    fn with_directive(d: &Directive) -> Vec<ChatMessage> {
        let mut messages = vec![ChatMessage::system("sys"), ChatMessage::user("please")];
        attach_directive(&mut messages, d);
        messages
    }

    #[test]
    fn realize_add_says_i_like() {
        let d = Directive::Realize {
            history: PreferenceState::new().with("price", &["less than $50"]),
            gain: StateGain::new(vec![GainOp::add("color", ["red"])]),
        };
        let reply = template_complete(&with_directive(&d)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&reply).unwrap();
        assert_eq!(v["user_utterance"], "I like red.");
    }

    #[test]
    fn realize_remove_mentions_slot() {
        let gain = StateGain::new(vec![GainOp::remove("price", ["less than $50"])]);
        assert_eq!(template_user_utterance(&gain), "Actually, drop price.");
    }

    #[test]
    fn extract_echoes_gain() {
        let gain = StateGain::new(vec![GainOp::add("color", ["red"]), GainOp::remove("price", ["None"])]);
        let d = Directive::Extract { state_gain: gain.clone(), preference_extraction: None };
        let reply = template_complete(&with_directive(&d)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&reply).unwrap();
        let echoed: StateGain = serde_json::from_value(v["state_gain"].clone()).unwrap();
        assert_eq!(echoed, gain);
    }

    #[test]
    fn deterministic_and_requires_directive() {
        let d = Directive::Reply { text: "ok".into() };
        let m = with_directive(&d);
        assert_eq!(template_complete(&m).unwrap(), template_complete(&m).unwrap());
        let plain = vec![ChatMessage::user("hello")];
        assert_eq!(template_complete(&plain), Err(BackendError::NoDirective));
        assert_eq!(template_complete(&[]), Err(BackendError::NoDirective));
        let garbled = vec![ChatMessage::user("@@DIRECTIVE {not json@@")];
        assert_eq!(template_complete(&garbled), Err(BackendError::NoDirective));
        assert_eq!(BackendError::NoDirective.to_string(), "no directive");
    }

    #[test]
    fn message_checks() {
        assert_eq!(check_messages(&[]), Err(BackendError::EmptyMessages));
        assert!(check_messages(&[ChatMessage::user(" ")]).is_err());
        assert!(check_messages(&[ChatMessage::user("hi"), ChatMessage::assistant("")]).is_ok());
    }
}
