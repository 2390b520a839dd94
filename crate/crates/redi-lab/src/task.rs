//! Problem generation, the answer oracle, and the simulated noisy teacher.
//!
//! A problem is a left-associative modular arithmetic chain rendered as
//! tokens, e.g. difficulty 2:
//!
//! ```text
//! ( ( 3 + 4 ) * 2 ) mod 5
//! ```
//!
//! Evaluation is left-to-right with the running value reduced into
//! `[0, modulus)` after every operation; because reduction commutes with
//! `+`, `-`, `*`, the result equals reducing once at the end over the
//! integers. Intermediate values are therefore always single digits, which
//! keeps traces inside the digit vocabulary for any modulus up to 10.
//!
//! A solution trace lists the running value after each operation and closes
//! with the answer:
//!
//! ```text
//! <think> 2 ; 4 = 4 <end>
//! ```
//!
//! The teacher replays the chain and, independently at each step with
//! probability `per_step_error_prob`, writes down a uniformly random digit
//! other than the true value for that step. The corrupted value becomes the
//! running value for later steps, so one slip propagates. Because a
//! corrupted step never equals the true chain value at that position, a
//! fully corrupted attempt is guaranteed to end with a wrong answer.

use crate::seeding::derive_seed;
use crate::vocab::{self, Token};
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One arithmetic chain task. `ground_truth` is always reproducible from
/// `prompt` via [`oracle_answer`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    #[serde(rename = "problem_id")]
    pub id: u64,
    pub prompt: Vec<Token>,
    pub ground_truth: i64,
    pub difficulty: u32,
}

/// One solution attempt. `final_answer` is the lenient decode of the last
/// digit token, `None` when the trace contains no digit at all.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub tokens: Vec<Token>,
    pub final_answer: Option<i64>,
    pub attempt_index: u32,
}

impl Trace {
    /// Builds a trace from raw tokens, decoding the final answer.
    pub fn from_tokens(tokens: Vec<Token>, attempt_index: u32) -> Self {
        let final_answer = decode_final_answer(&tokens);
        Trace {
            tokens,
            final_answer,
            attempt_index,
        }
    }
}

/// Last digit token in the sequence, read as the attempted answer. This is
/// deliberately lenient: correctness of the *format* is judged separately,
/// so a trace that forgot its `=` can still be scored on its answer.
pub fn decode_final_answer(tokens: &[Token]) -> Option<i64> {
    tokens.iter().rev().find_map(|&t| vocab::digit_value(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    fn token(self) -> Token {
        match self {
            Op::Add => vocab::PLUS,
            Op::Sub => vocab::MINUS,
            Op::Mul => vocab::TIMES,
        }
    }

    fn from_token(t: Token) -> Option<Op> {
        match t {
            vocab::PLUS => Some(Op::Add),
            vocab::MINUS => Some(Op::Sub),
            vocab::TIMES => Some(Op::Mul),
            _ => None,
        }
    }

    fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
        }
    }
}

/// Parsed form of a prompt.
pub(crate) struct Expression {
    pub first: i64,
    pub steps: Vec<(Op, i64)>,
    pub modulus: i64,
}

impl Expression {
    /// Running value after each operation, each reduced into `[0, modulus)`.
    pub fn step_values(&self) -> Vec<i64> {
        let mut values = Vec::with_capacity(self.steps.len());
        let mut running = self.first;
        for &(op, operand) in &self.steps {
            running = op.apply(running, operand).rem_euclid(self.modulus);
            values.push(running);
        }
        values
    }

    pub fn answer(&self) -> i64 {
        self.step_values().last().copied().unwrap_or(self.first.rem_euclid(self.modulus))
    }
}

fn malformed(msg: &str, tokens: &[Token]) -> Error {
    Error::Input(format!("malformed prompt ({msg}): {}", vocab::render(tokens)))
}

/// Parses a prompt of the grammar
/// `'('^d digit (op digit ')')^d 'mod' digit+` with `d >= 1`.
pub(crate) fn parse_prompt(tokens: &[Token]) -> Result<Expression> {
    let mut pos = 0;
    let mut depth = 0usize;
    while pos < tokens.len() && tokens[pos] == vocab::LPAREN {
        depth += 1;
        pos += 1;
    }
    if depth == 0 {
        return Err(malformed("expected '('", tokens));
    }
    let first = tokens
        .get(pos)
        .and_then(|&t| vocab::digit_value(t))
        .ok_or_else(|| malformed("expected first operand", tokens))?;
    pos += 1;
    let mut steps = Vec::with_capacity(depth);
    for _ in 0..depth {
        let op = tokens
            .get(pos)
            .and_then(|&t| Op::from_token(t))
            .ok_or_else(|| malformed("expected operator", tokens))?;
        let operand = tokens
            .get(pos + 1)
            .and_then(|&t| vocab::digit_value(t))
            .ok_or_else(|| malformed("expected operand", tokens))?;
        if tokens.get(pos + 2) != Some(&vocab::RPAREN) {
            return Err(malformed("expected ')'", tokens));
        }
        steps.push((op, operand));
        pos += 3;
    }
    if tokens.get(pos) != Some(&vocab::MOD) {
        return Err(malformed("expected 'mod'", tokens));
    }
    pos += 1;
    let digits = &tokens[pos.min(tokens.len())..];
    if digits.is_empty() {
        return Err(malformed("expected modulus", tokens));
    }
    let mut modulus = 0i64;
    for &t in digits {
        let d = vocab::digit_value(t).ok_or_else(|| malformed("expected modulus digit", tokens))?;
        modulus = modulus * 10 + d;
    }
    if modulus < 1 || modulus > vocab::DIGIT_RANGE {
        return Err(malformed("modulus out of range", tokens));
    }
    Ok(Expression {
        first,
        steps,
        modulus,
    })
}

/// Evaluates a problem's prompt from scratch. The answer always lies in
/// `[0, modulus)`.
pub fn oracle_answer(problem: &Problem) -> Result<i64> {
    Ok(parse_prompt(&problem.prompt)?.answer())
}

fn validate_task_params(difficulty: u32, modulus: i64) -> Result<()> {
    if difficulty < 1 {
        return Err(Error::Config("difficulty must be >= 1".into()));
    }
    if modulus < 1 || modulus > vocab::DIGIT_RANGE {
        return Err(Error::Config(format!(
            "modulus must be in 1..={}, got {modulus}",
            vocab::DIGIT_RANGE
        )));
    }
    Ok(())
}

/// Generates one problem. The same `(rng_seed, difficulty, modulus)` always
/// yields the same problem bit for bit; the seed doubles as the problem id,
/// so ids from distinct seeds never collide.
pub fn generate_problem(rng_seed: u64, difficulty: u32, modulus: i64) -> Result<Problem> {
    validate_task_params(difficulty, modulus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let first = rng.gen_range(0..modulus);
    let steps: Vec<(Op, i64)> = (0..difficulty)
        .map(|_| {
            let op = match rng.gen_range(0..3) {
                0 => Op::Add,
                1 => Op::Sub,
                _ => Op::Mul,
            };
            (op, rng.gen_range(0..modulus))
        })
        .collect();

    let mut prompt = Vec::with_capacity(4 * difficulty as usize + 4);
    for _ in 0..difficulty {
        prompt.push(vocab::LPAREN);
    }
    prompt.push(vocab::digit(first)?);
    for &(op, operand) in &steps {
        prompt.push(op.token());
        prompt.push(vocab::digit(operand)?);
        prompt.push(vocab::RPAREN);
    }
    prompt.push(vocab::MOD);
    vocab::encode_number(modulus, &mut prompt);

    let expr = Expression {
        first,
        steps,
        modulus,
    };
    Ok(Problem {
        id: rng_seed,
        prompt,
        ground_truth: expr.answer(),
        difficulty,
    })
}

/// Generates `count` problems with ids (and content) derived from `seed`.
pub fn generate_task_set(seed: u64, count: usize, difficulty: u32, modulus: i64) -> Result<Vec<Problem>> {
    (0..count)
        .map(|i| generate_problem(derive_seed(seed, i as u64), difficulty, modulus))
        .collect()
}

/// Simulated teacher settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    /// Probability of corrupting each step's written value.
    pub per_step_error_prob: f64,
    /// Attempt budget per problem; must be at least 1.
    pub max_attempts: u32,
    /// Base seed; the per-problem stream is derived from this and the
    /// problem id, so problems can be sampled in any order.
    pub seed: u64,
}

/// All attempts the teacher made on one problem, in attempt order.
#[derive(Debug, Clone, PartialEq)]
pub enum TeacherOutcome {
    /// The last trace is correct; all earlier ones are incorrect.
    Solved(Vec<Trace>),
    /// The attempt budget ran out; every trace is incorrect.
    Exhausted(Vec<Trace>),
}

impl TeacherOutcome {
    pub fn traces(&self) -> &[Trace] {
        match self {
            TeacherOutcome::Solved(t) | TeacherOutcome::Exhausted(t) => t,
        }
    }

    pub fn into_traces(self) -> Vec<Trace> {
        match self {
            TeacherOutcome::Solved(t) | TeacherOutcome::Exhausted(t) => t,
        }
    }

    pub fn is_exhausted(&self) -> bool {
        matches!(self, TeacherOutcome::Exhausted(_))
    }
}

/// Samples teacher attempts on `problem` until one ends with the correct
/// answer or the budget is exhausted.
pub fn teacher_sample(problem: &Problem, cfg: &TeacherConfig) -> Result<TeacherOutcome> {
    if !(0.0..=1.0).contains(&cfg.per_step_error_prob) {
        return Err(Error::Config(format!(
            "per_step_error_prob must be in [0, 1], got {}",
            cfg.per_step_error_prob
        )));
    }
    if cfg.max_attempts < 1 {
        return Err(Error::Config("max_attempts must be >= 1".into()));
    }
    let expr = parse_prompt(&problem.prompt)?;
    let true_values = expr.step_values();
    let answer = problem.ground_truth;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, problem.id));

    let mut traces = Vec::new();
    for attempt in 0..cfg.max_attempts {
        let trace = emit_attempt(&expr, &true_values, cfg.per_step_error_prob, attempt, &mut rng);
        let correct = trace.final_answer == Some(answer);
        traces.push(trace);
        if correct {
            return Ok(TeacherOutcome::Solved(traces));
        }
    }
    Ok(TeacherOutcome::Exhausted(traces))
}

fn emit_attempt(
    expr: &Expression,
    true_values: &[i64],
    error_prob: f64,
    attempt_index: u32,
    rng: &mut ChaCha8Rng,
) -> Trace {
    let mut tokens = Vec::with_capacity(2 * expr.steps.len() + 3);
    tokens.push(vocab::THINK);
    let mut running = expr.first;
    for (i, &(op, operand)) in expr.steps.iter().enumerate() {
        let mut value = op.apply(running, operand).rem_euclid(expr.modulus);
        if rng.gen_bool(error_prob) {
            value = wrong_digit(true_values[i], rng);
        }
        running = value;
        if i > 0 {
            tokens.push(vocab::SEP);
        }
        tokens.push(vocab::digit(value).expect("step values are single digits"));
    }
    tokens.push(vocab::EQUALS);
    tokens.push(vocab::digit(running).expect("answers are single digits"));
    tokens.push(vocab::END);
    Trace {
        tokens,
        final_answer: Some(running),
        attempt_index,
    }
}

/// Uniform draw over the nine digits other than `exclude`.
fn wrong_digit(exclude: i64, rng: &mut ChaCha8Rng) -> i64 {
    let d = rng.gen_range(0..vocab::DIGIT_RANGE - 1);
    if d >= exclude {
        d + 1
    } else {
        d
    }
}
