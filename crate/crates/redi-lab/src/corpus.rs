//! Trace verification, dataset curation, and JSONL persistence.
//!
//! Correctness of a trace is the conjunction of two independent verdicts:
//!
//! * `verdict_a`: the (leniently decoded) final answer equals the oracle
//!   answer for the problem;
//! * `verdict_b`: the trace is a well-formed step list,
//!   `<think> digit (';' digit)* '=' digit <end>`.
//!
//! Curation turns raw per-attempt records into two datasets:
//!
//! * every problem whose attempts contain a correct trace contributes one
//!   `SftExample` built from the *first* correct trace;
//! * a problem additionally contributes one `PreferencePair` iff at least
//!   one incorrect attempt preceded that first correct trace; the rejected
//!   side is the *earliest* incorrect attempt. Pairs whose prompt or either
//!   response violates the length caps are dropped (the `SftExample` is
//!   kept).
//!
//! Problems whose budget was exhausted without a correct trace contribute
//! nothing. Curation output is sorted by problem id and is insensitive to
//! the order of the input records.
//!
//! # JSONL schemas
//!
//! One JSON object per line; token sequences are arrays of integer ids.
//!
//! * raw records: `problem_id`, `prompt`, `trace`, `verdict_a`,
//!   `verdict_b`, `attempt_index`
//! * SFT examples: `problem_id`, `prompt`, `chosen`
//! * preference pairs: `problem_id`, `prompt`, `chosen`, `rejected`
//! * problems: `problem_id`, `prompt`, `ground_truth`, `difficulty`

use crate::task::{self, Problem, TeacherConfig, Trace};
use crate::vocab::{self, Token};
use crate::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

/// One teacher attempt with its verdicts, as stored in raw JSONL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub problem_id: u64,
    pub prompt: Vec<Token>,
    pub trace: Vec<Token>,
    pub verdict_a: bool,
    pub verdict_b: bool,
    pub attempt_index: u32,
}

impl TraceRecord {
    /// A trace counts as correct only when both verdicts hold.
    pub fn is_correct(&self) -> bool {
        self.verdict_a && self.verdict_b
    }
}

/// Positive training example for the first stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftExample {
    pub problem_id: u64,
    pub prompt: Vec<Token>,
    pub chosen: Vec<Token>,
}

/// Chosen/rejected pair for the second stage. Both responses answer the
/// same prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub problem_id: u64,
    pub prompt: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
}

/// Length caps applied to preference pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub max_prompt_len: usize,
    pub max_response_len: usize,
}

/// Desk-scale defaults; generated prompts and traces fit comfortably.
impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            max_prompt_len: 64,
            max_response_len: 256,
        }
    }
}

/// The two independent verdicts on one trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdicts {
    pub answer_correct: bool,
    pub well_formed: bool,
}

impl Verdicts {
    pub fn is_correct(&self) -> bool {
        self.answer_correct && self.well_formed
    }
}

/// Checks the step-list grammar `<think> digit (';' digit)* '=' digit <end>`.
fn well_formed(tokens: &[Token]) -> bool {
    let digit_at = |i: usize| tokens.get(i).copied().and_then(vocab::digit_value).is_some();
    if tokens.first() != Some(&vocab::THINK) || !digit_at(1) {
        return false;
    }
    let mut i = 2;
    while tokens.get(i) == Some(&vocab::SEP) {
        if !digit_at(i + 1) {
            return false;
        }
        i += 2;
    }
    tokens.get(i) == Some(&vocab::EQUALS) && digit_at(i + 1) && tokens.get(i + 2) == Some(&vocab::END) && i + 3 == tokens.len()
}

/// Scores one trace against its problem.
pub fn verify(trace: &Trace, problem: &Problem) -> Result<Verdicts> {
    let oracle = task::oracle_answer(problem)?;
    Ok(Verdicts {
        answer_correct: task::decode_final_answer(&trace.tokens) == Some(oracle),
        well_formed: well_formed(&trace.tokens),
    })
}

/// Runs the teacher over a task set and verifies every attempt, producing
/// the raw record stream that curation consumes.
pub fn records_from_teacher(problems: &[Problem], cfg: &TeacherConfig) -> Result<Vec<TraceRecord>> {
    let mut records = Vec::new();
    for problem in problems {
        let outcome = task::teacher_sample(problem, cfg)?;
        for trace in outcome.into_traces() {
            let verdicts = verify(&trace, problem)?;
            records.push(TraceRecord {
                problem_id: problem.id,
                prompt: problem.prompt.clone(),
                trace: trace.tokens,
                verdict_a: verdicts.answer_correct,
                verdict_b: verdicts.well_formed,
                attempt_index: trace.attempt_index,
            });
        }
    }
    Ok(records)
}

/// Curation output.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Curated {
    pub d_sft: Vec<SftExample>,
    pub d_pref: Vec<PreferencePair>,
}

/// Curates raw records into the SFT and preference datasets. See the
/// module docs for the exact rules.
pub fn curate(records: &[TraceRecord], cfg: &CurationConfig) -> Result<Curated> {
    if cfg.max_prompt_len == 0 || cfg.max_response_len == 0 {
        return Err(Error::Config("length caps must be >= 1".into()));
    }

    let mut by_problem: BTreeMap<u64, Vec<&TraceRecord>> = BTreeMap::new();
    for record in records {
        by_problem.entry(record.problem_id).or_default().push(record);
    }

    let mut out = Curated::default();
    for (problem_id, mut attempts) in by_problem {
        attempts.sort_by_key(|r| r.attempt_index);
        for pair in attempts.windows(2) {
            if pair[0].attempt_index == pair[1].attempt_index {
                return Err(Error::DataIntegrity(format!(
                    "problem {problem_id}: duplicate attempt_index {}",
                    pair[0].attempt_index
                )));
            }
        }
        if attempts.iter().any(|r| r.prompt != attempts[0].prompt) {
            return Err(Error::DataIntegrity(format!(
                "problem {problem_id}: records disagree on the prompt"
            )));
        }

        let Some(chosen) = attempts.iter().find(|r| r.is_correct()) else {
            continue; // exhausted problem: nothing correct to learn from
        };
        out.d_sft.push(SftExample {
            problem_id,
            prompt: chosen.prompt.clone(),
            chosen: chosen.trace.clone(),
        });

        let rejected = attempts
            .iter()
            .find(|r| !r.is_correct() && r.attempt_index < chosen.attempt_index);
        if let Some(rejected) = rejected {
            let fits = chosen.prompt.len() <= cfg.max_prompt_len
                && chosen.trace.len() <= cfg.max_response_len
                && rejected.trace.len() <= cfg.max_response_len;
            if fits {
                out.d_pref.push(PreferencePair {
                    problem_id,
                    prompt: chosen.prompt.clone(),
                    chosen: chosen.trace.clone(),
                    rejected: rejected.trace.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Fraction of `chosen` shared as a common prefix with `rejected`.
pub fn prefix_overlap(chosen: &[Token], rejected: &[Token]) -> f64 {
    let lcp = chosen.iter().zip(rejected).take_while(|(a, b)| a == b).count();
    lcp as f64 / chosen.len().max(1) as f64
}

/// Keeps only pairs whose rejected trace shares at least `min_overlap` of
/// the chosen trace as a prefix. Used to build the high-overlap corpora
/// that make two-sided objectives unstable.
pub fn filter_by_overlap(pairs: Vec<PreferencePair>, min_overlap: f64) -> Vec<PreferencePair> {
    pairs
        .into_iter()
        .filter(|p| prefix_overlap(&p.chosen, &p.rejected) >= min_overlap)
        .collect()
}

/// Drops records whose problem id appears in `denylist`.
pub fn apply_denylist(records: Vec<TraceRecord>, denylist: &[u64]) -> Vec<TraceRecord> {
    records
        .into_iter()
        .filter(|r| !denylist.contains(&r.problem_id))
        .collect()
}

// JSONL persistence for the four record shapes.

/// Per-record validation applied on load and before save.
trait JsonlRecord: Serialize + DeserializeOwned {
    fn check(&self) -> std::result::Result<(), String>;
}

fn check_tokens(name: &str, tokens: &[Token], allow_empty: bool) -> std::result::Result<(), String> {
    if !allow_empty && tokens.is_empty() {
        return Err(format!("{name} must not be empty"));
    }
    if !vocab::all_in_vocab(tokens) {
        return Err(format!("{name} contains a token outside the vocabulary"));
    }
    Ok(())
}

impl JsonlRecord for TraceRecord {
    fn check(&self) -> std::result::Result<(), String> {
        check_tokens("prompt", &self.prompt, false)?;
        check_tokens("trace", &self.trace, false)
    }
}

impl JsonlRecord for SftExample {
    fn check(&self) -> std::result::Result<(), String> {
        check_tokens("prompt", &self.prompt, false)?;
        check_tokens("chosen", &self.chosen, false)
    }
}

impl JsonlRecord for PreferencePair {
    fn check(&self) -> std::result::Result<(), String> {
        check_tokens("prompt", &self.prompt, false)?;
        check_tokens("chosen", &self.chosen, false)?;
        check_tokens("rejected", &self.rejected, false)
    }
}

impl JsonlRecord for Problem {
    fn check(&self) -> std::result::Result<(), String> {
        check_tokens("prompt", &self.prompt, false)
    }
}

fn save_jsonl<T: JsonlRecord>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = String::new();
    for (i, item) in items.iter().enumerate() {
        item.check().map_err(|msg| {
            Error::DataIntegrity(format!("{} record {}: {msg}", path.display(), i + 1))
        })?;
        buf.push_str(&serde_json::to_string(item).expect("records serialize infallibly"));
        buf.push('\n');
    }
    crate::fsio::write_atomic(path, buf.as_bytes())
}

fn load_jsonl<T: JsonlRecord>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let item: T = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        item.check().map_err(parse_err)?;
        items.push(item);
    }
    Ok(items)
}

pub fn save_records_jsonl(path: &Path, records: &[TraceRecord]) -> Result<()> {
    save_jsonl(path, records)
}

pub fn load_records_jsonl(path: &Path) -> Result<Vec<TraceRecord>> {
    load_jsonl(path)
}

pub fn save_sft_jsonl(path: &Path, examples: &[SftExample]) -> Result<()> {
    save_jsonl(path, examples)
}

pub fn load_sft_jsonl(path: &Path) -> Result<Vec<SftExample>> {
    load_jsonl(path)
}

pub fn save_pref_jsonl(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    save_jsonl(path, pairs)
}

pub fn load_pref_jsonl(path: &Path) -> Result<Vec<PreferencePair>> {
    load_jsonl(path)
}

pub fn save_problems_jsonl(path: &Path, problems: &[Problem]) -> Result<()> {
    save_jsonl(path, problems)
}

pub fn load_problems_jsonl(path: &Path) -> Result<Vec<Problem>> {
    load_jsonl(path)
}
