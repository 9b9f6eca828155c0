//! File-level workflow steps: loading inputs, parallel generation and
//! extraction, and evaluation of prediction files.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use iterchat_core::dataset::turn_record_id;
use iterchat_core::extractor::{
    extract_dialogue_iterative, extract_multi_turn, extract_turn, DemoExample, ExtractionResult,
};
use iterchat_core::metrics::{evaluate_corpus, EvalReport, Gold, Prediction};
use iterchat_core::prompts::PromptSet;
use iterchat_core::sampler::{
    realize_with_retries, sample_scenario, synthetic_record_id, GenerateError, GenerationStats, SamplerConfig,
};
use iterchat_core::{
    parse_schema, ExtractionMode, GenerationBackend, IterChatRecord, MultiTurnDialogue, ParseStatus, PreferenceSchema,
    PreferenceState, StateGain, TemplateBackend,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::http_backend::{BackendConfig, HttpBackend};
use crate::jsonl::{first_value, read_jsonl};

pub type SharedBackend = Box<dyn GenerationBackend + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendKind {
    /// Deterministic offline backend driven by directives.
    Template,
    Http,
}

pub fn make_backend(kind: BackendKind, config: Option<BackendConfig>) -> Result<SharedBackend> {
    Ok(match kind {
        BackendKind::Template => Box::new(TemplateBackend),
        BackendKind::Http => {
            let config = config.unwrap_or_else(BackendConfig::from_env);
            Box::new(HttpBackend::new(config).context("configuring HTTP backend")?)
        }
    })
}

/// Backend settings from the environment, overlaid with a JSON file.
pub fn load_backend_config(path: Option<&Path>) -> Result<BackendConfig> {
    let mut config = serde_json::to_value(BackendConfig::from_env())?;
    if let Some(path) = path {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let overlay: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let (Some(base), Some(over)) = (config.as_object_mut(), overlay.as_object()) else {
            bail!("{}: backend config must be a JSON object", path.display());
        };
        for (k, v) in over {
            base.insert(k.clone(), v.clone());
        }
    }
    Ok(serde_json::from_value(config)?)
}

pub fn load_schema(path: &Path) -> Result<PreferenceSchema> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_schema(&text).with_context(|| format!("invalid schema {}", path.display()))
}

/// Prompt templates from `dir`, falling back to the built-in set per file.
pub fn load_prompts(dir: Option<&Path>) -> Result<PromptSet> {
    let Some(dir) = dir else {
        return Ok(PromptSet::default());
    };
    if !dir.is_dir() {
        bail!("prompt directory {} does not exist", dir.display());
    }
    Ok(PromptSet::from_lookup(|name| fs::read_to_string(dir.join(name)).ok()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    Records,
    Dialogues,
}

/// Records and dialogues are told apart by the `turns` key of the first line.
pub fn detect_kind(path: &Path) -> Result<InputKind> {
    let first = first_value(path)?;
    Ok(match first {
        Some(v) if v.get("turns").is_some() => InputKind::Dialogues,
        _ => InputKind::Records,
    })
}

pub fn run_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    Ok(pool.install(f))
}

/// Sample every scenario in draw order, realize them on `jobs` threads and
/// return the records in draw order.
pub fn generate(
    schema: &PreferenceSchema,
    config: &SamplerConfig,
    backend: &(dyn GenerationBackend + Send + Sync),
    prompts: &PromptSet,
    jobs: usize,
) -> std::result::Result<(Vec<IterChatRecord>, GenerationStats), GenerateError> {
    config.validate()?;
    let scenarios = (0..config.record_count)
        .map(|i| sample_scenario(schema, config, i as u64))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let realize = || {
        scenarios
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let id = synthetic_record_id(config.seed, i);
                let (outcome, attempts) = realize_with_retries(s, schema, backend, prompts, &id);
                if let Err(e) = &outcome {
                    log::warn!("{id}: {e}");
                }
                (id, outcome.ok(), attempts)
            })
            .collect::<Vec<_>>()
    };
    let outcomes = run_pool(jobs, realize).expect("thread pool");
    let mut stats = GenerationStats::new(schema, config.record_count);
    let mut records = Vec::with_capacity(outcomes.len());
    for (scenario, (id, record, attempts)) in scenarios.iter().zip(outcomes) {
        match record {
            Some(r) => {
                stats.observe(scenario, Ok(&r), attempts);
                records.push(r);
            }
            None => stats.observe(scenario, Err(&id), attempts),
        }
    }
    if stats.too_many_failures() {
        return Err(GenerateError::TooManyFailures { partial: records, stats: Box::new(stats) });
    }
    Ok((records, stats))
}

/// One line of an extraction output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub record_id: String,
    #[serde(default)]
    pub state_gain: Option<StateGain>,
    pub preference_extraction: Option<PreferenceState>,
    #[serde(default = "default_status")]
    pub parse_status: ParseStatus,
    #[serde(default)]
    pub raw_output: String,
    #[serde(default)]
    pub schema_violations: Vec<String>,
    /// Backend error that prevented extraction, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn default_status() -> ParseStatus {
    ParseStatus::Ok
}

impl PredictionLine {
    pub fn from_result(record_id: String, r: ExtractionResult) -> Self {
        Self {
            record_id,
            state_gain: Some(r.state_gain),
            preference_extraction: Some(r.preference_extraction),
            parse_status: r.parse_status,
            raw_output: r.raw_output,
            schema_violations: r.schema_violations,
            error: None,
        }
    }

    /// A failed line predicting `fallback`.
    pub fn failed(record_id: String, fallback: PreferenceState, error: String) -> Self {
        Self {
            record_id,
            state_gain: Some(StateGain::default()),
            preference_extraction: Some(fallback),
            parse_status: ParseStatus::Failed,
            raw_output: String::new(),
            schema_violations: Vec::new(),
            error: Some(error),
        }
    }

    fn prediction(&self) -> Prediction {
        Prediction {
            record_id: self.record_id.clone(),
            state: self.preference_extraction.clone().unwrap_or_default(),
            parse_status: if self.preference_extraction.is_some() { self.parse_status } else { ParseStatus::Failed },
        }
    }
}

/// Demonstrations: the first `k` labeled items of a demo file.
pub fn load_demos(path: Option<&Path>, mode: ExtractionMode, k: usize) -> Result<Vec<DemoExample>> {
    let Some(path) = path else {
        return Ok(Vec::new());
    };
    let demos = match mode {
        ExtractionMode::IterChat => read_jsonl::<IterChatRecord>(path)?
            .iter()
            .take(k)
            .map(DemoExample::from_record)
            .collect::<std::result::Result<Vec<_>, _>>()?,
        ExtractionMode::MultiTurn => read_jsonl::<MultiTurnDialogue>(path)?
            .iter()
            .take(k)
            .map(DemoExample::from_dialogue)
            .collect::<std::result::Result<Vec<_>, _>>()?,
    };
    if demos.len() < k {
        log::warn!("demo file {} has only {} of {k} requested demos", path.display(), demos.len());
    }
    Ok(demos)
}

pub struct ExtractRun<'a> {
    pub schema: &'a PreferenceSchema,
    pub demos: &'a [DemoExample],
    pub backend: &'a (dyn GenerationBackend + Send + Sync),
    pub prompts: &'a PromptSet,
    pub jobs: usize,
}

impl ExtractRun<'_> {
    /// One line per record; backend failures become failed lines.
    pub fn records(&self, records: &[IterChatRecord]) -> Vec<PredictionLine> {
        let work = || {
            records
                .par_iter()
                .map(|r| match extract_turn(r, self.schema, self.demos, self.backend, self.prompts) {
                    Ok(result) => PredictionLine::from_result(r.record_id.clone(), result),
                    Err(e) => PredictionLine::failed(r.record_id.clone(), r.history_preference.clone(), e.to_string()),
                })
                .collect()
        };
        run_pool(self.jobs, work).expect("thread pool")
    }

    /// Iterative one-turn extraction: one line per turn, ids `{dialogue}-t{k}`.
    /// Turns after a backend failure carry the last state forward.
    pub fn dialogues_iterative(&self, dialogues: &[MultiTurnDialogue]) -> Vec<PredictionLine> {
        let work = || {
            dialogues
                .par_iter()
                .map(|d| {
                    let ids = (1..=d.turns.len()).map(|t| turn_record_id(&d.dialogue_id, t));
                    match extract_dialogue_iterative(d, self.schema, self.demos, self.backend, self.prompts) {
                        Ok(results) => ids.zip(results).map(|(id, r)| PredictionLine::from_result(id, r)).collect(),
                        Err(e) => {
                            let message = e.to_string();
                            let done = e.partial.len();
                            let last = e.partial.last().map(|r| r.preference_extraction.clone()).unwrap_or_default();
                            let mut lines: Vec<PredictionLine> =
                                ids.clone().zip(e.partial).map(|(id, r)| PredictionLine::from_result(id, r)).collect();
                            lines.extend(
                                ids.skip(done).map(|id| PredictionLine::failed(id, last.clone(), message.clone())),
                            );
                            lines
                        }
                    }
                })
                .collect::<Vec<Vec<_>>>()
        };
        run_pool(self.jobs, work).expect("thread pool").into_iter().flatten().collect()
    }

    /// Whole-dialogue extraction: one line per dialogue, id = dialogue id.
    pub fn dialogues_multi_turn(&self, dialogues: &[MultiTurnDialogue]) -> Vec<PredictionLine> {
        let work = || {
            dialogues
                .par_iter()
                .map(|d| match extract_multi_turn(d, self.schema, self.demos, self.backend, self.prompts) {
                    Ok(result) => PredictionLine::from_result(d.dialogue_id.clone(), result),
                    Err(e) => PredictionLine::failed(d.dialogue_id.clone(), PreferenceState::new(), e.to_string()),
                })
                .collect()
        };
        run_pool(self.jobs, work).expect("thread pool")
    }
}

/// Report for record golds, or per-turn and final-state reports for
/// dialogue golds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EvalOutput {
    Records(EvalReport),
    Dialogues {
        /// Absent when no prediction is keyed by turn (whole-dialogue mode).
        #[serde(skip_serializing_if = "Option::is_none")]
        per_turn: Option<EvalReport>,
        dialogue_final: EvalReport,
    },
}

impl EvalOutput {
    pub fn to_table(&self) -> String {
        match self {
            EvalOutput::Records(r) => r.to_table(),
            EvalOutput::Dialogues { per_turn, dialogue_final } => {
                let mut out = String::new();
                if let Some(per_turn) = per_turn {
                    out.push_str(&format!("[per_turn]\n{}\n", per_turn.to_table().trim_end()));
                }
                out.push_str(&format!("[dialogue_final]\n{}", dialogue_final.to_table()));
                out
            }
        }
    }

    /// The report whose corpus line summarizes the run.
    pub fn headline(&self) -> &EvalReport {
        match self {
            EvalOutput::Records(r) => r,
            EvalOutput::Dialogues { dialogue_final, .. } => dialogue_final,
        }
    }
}

/// Prediction lines from a prediction, record or dialogue file. Dialogue
/// files contribute one line per turn and one per dialogue.
pub fn load_predictions(path: &Path) -> Result<Vec<PredictionLine>> {
    Ok(match detect_kind(path)? {
        InputKind::Records => read_jsonl(path)?,
        InputKind::Dialogues => read_jsonl::<MultiTurnDialogue>(path)?.iter().flat_map(dialogue_lines).collect(),
    })
}

fn dialogue_lines(d: &MultiTurnDialogue) -> Vec<PredictionLine> {
    let line = |id: String, state: Option<&PreferenceState>| PredictionLine {
        record_id: id,
        state_gain: None,
        preference_extraction: state.cloned(),
        parse_status: ParseStatus::Ok,
        raw_output: String::new(),
        schema_violations: Vec::new(),
        error: None,
    };
    let mut lines: Vec<PredictionLine> = d
        .turns
        .iter()
        .enumerate()
        .map(|(i, t)| line(turn_record_id(&d.dialogue_id, i + 1), t.gold_state.as_ref()))
        .collect();
    lines.push(line(d.dialogue_id.clone(), d.final_state()));
    lines
}

pub fn evaluate_files(pred_path: &Path, gold_path: &Path) -> Result<EvalOutput> {
    let preds = load_predictions(pred_path)?;
    let predictions: Vec<Prediction> = preds.iter().map(PredictionLine::prediction).collect();
    match detect_kind(gold_path)? {
        InputKind::Records => {
            let golds = read_jsonl::<IterChatRecord>(gold_path)?
                .into_iter()
                .map(|r| {
                    let state = r
                        .preference_extraction
                        .with_context(|| format!("gold record {:?} has no preference_extraction", r.record_id))?;
                    Ok(Gold { record_id: r.record_id, state })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalOutput::Records(evaluate_corpus(&predictions, &golds)?))
        }
        InputKind::Dialogues => {
            let dialogues = read_jsonl::<MultiTurnDialogue>(gold_path)?;
            let mut per_turn_gold = Vec::new();
            let mut final_gold = Vec::new();
            for d in &dialogues {
                if !d.is_labeled() {
                    bail!("gold dialogue {:?} is not labeled", d.dialogue_id);
                }
                for (i, t) in d.turns.iter().enumerate() {
                    per_turn_gold.push(Gold {
                        record_id: turn_record_id(&d.dialogue_id, i + 1),
                        state: t.gold_state.clone().unwrap_or_default(),
                    });
                }
                final_gold.push(Gold {
                    record_id: d.dialogue_id.clone(),
                    state: d.final_state().cloned().unwrap_or_default(),
                });
            }
            // A dialogue's final prediction is its own line when present,
            // otherwise the line of its last turn.
            let by_id: std::collections::HashMap<&str, &Prediction> =
                predictions.iter().map(|p| (p.record_id.as_str(), p)).collect();
            let final_preds: Vec<Prediction> = dialogues
                .iter()
                .filter_map(|d| {
                    let own = by_id.get(d.dialogue_id.as_str());
                    let last = by_id.get(turn_record_id(&d.dialogue_id, d.turns.len()).as_str());
                    own.or(last).map(|p| Prediction { record_id: d.dialogue_id.clone(), ..(*p).clone() })
                })
                .collect();
            let turn_ids: std::collections::HashSet<&str> =
                per_turn_gold.iter().map(|g| g.record_id.as_str()).collect();
            let turn_preds: Vec<Prediction> =
                predictions.iter().filter(|p| turn_ids.contains(p.record_id.as_str())).cloned().collect();
            Ok(EvalOutput::Dialogues {
                per_turn: if turn_preds.is_empty() {
                    None
                } else {
                    Some(evaluate_corpus(&turn_preds, &per_turn_gold)?)
                },
                dialogue_final: evaluate_corpus(&final_preds, &final_gold)?,
            })
        }
    }
}

/// Final states of replayed record groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayLine {
    pub dialogue_id: Option<String>,
    pub turn_count: usize,
    pub final_state: PreferenceState,
}

/// Group records by source dialogue (first appearance order), sort each
/// group by turn index and replay it.
pub fn replay_groups(records: Vec<IterChatRecord>) -> Result<Vec<ReplayLine>> {
    let mut order: Vec<Option<String>> = Vec::new();
    let mut groups: std::collections::HashMap<Option<String>, Vec<IterChatRecord>> = Default::default();
    for r in records {
        let key = r.source_dialogue_id.clone();
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let mut group = groups.remove(&key).unwrap_or_default();
            group.sort_by_key(|r| r.turn_index);
            let state = iterchat_core::replay(&group)
                .with_context(|| format!("replaying dialogue {}", key.as_deref().unwrap_or("<none>")))?;
            Ok(ReplayLine { dialogue_id: key, turn_count: group.len(), final_state: state })
        })
        .collect()
}
