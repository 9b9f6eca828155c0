//! Extraction metrics: exact match, slot-value F1, filtered edit distance
//! (FED) and unigram BLEU, plus the corpus evaluation runner.
//!
//! F1 is computed over normalized (slot, value) pairs and micro-averaged over
//! a corpus. FED and BLEU-1 operate on the token sequences of canonical state
//! serializations after [`filter_tokens`].

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extractor::ParseStatus;
use crate::state::PreferenceState;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("empty reference")]
    EmptyReference,
    #[error("duplicate record id {0:?}")]
    DuplicateRecordId(String),
}

/// 1 when the states are canonically equal, else 0.
pub fn exact_match(pred: &PreferenceState, gold: &PreferenceState) -> u8 {
    u8::from(pred == gold)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotF1 {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SlotF1 {
    /// Precision is 1 when nothing was predicted and nothing was expected,
    /// 0 when nothing was predicted but something was; recall mirrors this.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp, fn_ == 0);
        let recall = ratio(tp, tp + fn_, true);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { tp, fp, fn_, precision, recall, f1 }
    }
}

fn ratio(num: usize, den: usize, vacuous: bool) -> f64 {
    if den == 0 {
        if vacuous {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

/// Precision/recall/F1 over normalized (slot, value) pairs.
pub fn slot_f1(pred: &PreferenceState, gold: &PreferenceState) -> SlotF1 {
    let p = pred.pairs();
    let g = gold.pairs();
    let tp = p.intersection(&g).count();
    SlotF1::from_counts(tp, p.len() - tp, g.len() - tp)
}

/// Tokenize text for FED and BLEU.
///
/// Case-folds, strips punctuation other than the structure characters
/// `= ; , [ ]`, and splits on whitespace and structure characters. `=`, `;`
/// and `,` become tokens of their own; brackets only delimit.
pub fn filter_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let flush = |current: &mut String, tokens: &mut Vec<String>| {
        if !current.is_empty() {
            tokens.push(core::mem::take(current));
        }
    };
    for c in text.chars() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if c.is_whitespace() || c == '[' || c == ']' {
            flush(&mut current, &mut tokens);
        } else if matches!(c, '=' | ';' | ',') {
            flush(&mut current, &mut tokens);
            tokens.push(c.to_string());
        }
        // other punctuation is dropped without splitting
    }
    flush(&mut current, &mut tokens);
    tokens
}

/// Unit-cost Levenshtein distance between two sequences.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let substitute = prev[j] + usize::from(x != y);
            curr[j + 1] = substitute.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        core::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Filtered edit distance between two canonical serializations.
pub fn fed(pred_text: &str, gold_text: &str) -> usize {
    edit_distance(&filter_tokens(pred_text), &filter_tokens(gold_text))
}

/// Unigram BLEU: clipped unigram precision times the brevity penalty.
pub fn bleu1<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut remaining: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let mut clipped = 0usize;
    for w in candidate {
        if let Some(pos) = remaining.iter().position(|r| *r == w.as_ref()) {
            remaining.swap_remove(pos);
            clipped += 1;
        }
    }
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let precision = clipped as f64 / c;
    let bp = if c >= r { 1.0 } else { libm::exp(1.0 - r / c) };
    Ok(precision * bp)
}

/// BLEU-1 between canonical serializations. An empty gold state only scores
/// 1 against an empty prediction.
fn state_bleu1(pred_tokens: &[String], gold_tokens: &[String]) -> f64 {
    if gold_tokens.is_empty() {
        return if pred_tokens.is_empty() { 1.0 } else { 0.0 };
    }
    bleu1(pred_tokens, gold_tokens).unwrap_or(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub record_id: String,
    pub state: PreferenceState,
    pub parse_status: ParseStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gold {
    pub record_id: String,
    pub state: PreferenceState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub record_id: String,
    pub em: u8,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fed: usize,
    pub bleu1: f64,
    pub parse_status: ParseStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub record_count: usize,
    pub em_rate: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub mean_fed: f64,
    pub mean_bleu1: f64,
    pub failed_parse_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_record: Vec<RecordScore>,
    pub corpus: CorpusScore,
}

/// Score predictions against gold states.
///
/// Every gold id is scored; a gold id without a prediction counts as a failed
/// parse predicting the empty state. Predictions without a gold are ignored.
pub fn evaluate_corpus(preds: &[Prediction], golds: &[Gold]) -> Result<EvalReport, MetricError> {
    let mut seen = BTreeSet::new();
    for p in preds {
        if !seen.insert(p.record_id.as_str()) {
            return Err(MetricError::DuplicateRecordId(p.record_id.clone()));
        }
    }
    let by_id: alloc::collections::BTreeMap<&str, &Prediction> =
        preds.iter().map(|p| (p.record_id.as_str(), p)).collect();
    let mut gold_ids = BTreeSet::new();
    let empty = PreferenceState::new();

    let mut per_record = Vec::with_capacity(golds.len());
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for gold in golds {
        if !gold_ids.insert(gold.record_id.as_str()) {
            return Err(MetricError::DuplicateRecordId(gold.record_id.clone()));
        }
        let (state, status) = match by_id.get(gold.record_id.as_str()) {
            Some(p) => (&p.state, p.parse_status),
            None => (&empty, ParseStatus::Failed),
        };
        let f = slot_f1(state, &gold.state);
        tp += f.tp;
        fp += f.fp;
        fn_ += f.fn_;
        let pred_tokens = filter_tokens(&state.canonicalize());
        let gold_tokens = filter_tokens(&gold.state.canonicalize());
        per_record.push(RecordScore {
            record_id: gold.record_id.clone(),
            em: exact_match(state, &gold.state),
            precision: f.precision,
            recall: f.recall,
            f1: f.f1,
            fed: edit_distance(&pred_tokens, &gold_tokens),
            bleu1: state_bleu1(&pred_tokens, &gold_tokens),
            parse_status: status,
        });
    }

    let n = per_record.len();
    let mean = |f: &dyn Fn(&RecordScore) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_record.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let micro = SlotF1::from_counts(tp, fp, fn_);
    let corpus = CorpusScore {
        record_count: n,
        em_rate: mean(&|r| f64::from(r.em)),
        micro_precision: micro.precision,
        micro_recall: micro.recall,
        micro_f1: micro.f1,
        mean_fed: mean(&|r| r.fed as f64),
        mean_bleu1: mean(&|r| r.bleu1),
        failed_parse_count: per_record.iter().filter(|r| r.parse_status == ParseStatus::Failed).count(),
    };
    Ok(EvalReport { per_record, corpus })
}

impl EvalReport {
    /// Aligned plain-text table: one row per record plus a corpus row.
    pub fn to_table(&self) -> String {
        let id_width = self.per_record.iter().map(|r| r.record_id.chars().count()).chain([9]).max().unwrap_or(9);
        let mut out = format!(
            "{:<id_width$}  {:>3}  {:>6}  {:>6}  {:>6}  {:>4}  {:>6}  {}\n",
            "record_id", "EM", "P", "R", "F1", "FED", "BLEU1", "parse"
        );
        for r in &self.per_record {
            out.push_str(&format!(
                "{:<id_width$}  {:>3}  {:>6.4}  {:>6.4}  {:>6.4}  {:>4}  {:>6.4}  {}\n",
                r.record_id,
                r.em,
                r.precision,
                r.recall,
                r.f1,
                r.fed,
                r.bleu1,
                r.parse_status.as_str()
            ));
        }
        let c = &self.corpus;
        out.push_str(&format!(
            "\ncorpus: n={}  EM={:.4}  micro-F1={:.4} (P={:.4} R={:.4})  FED={:.4}  BLEU1={:.4}  failed_parses={}\n",
            c.record_count,
            c.em_rate,
            c.micro_f1,
            c.micro_precision,
            c.micro_recall,
            c.mean_fed,
            c.mean_bleu1,
            c.failed_parse_count
        ));
        out
    }
}
