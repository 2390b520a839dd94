//! The trainable policy: a fixed-window autoregressive token model.
//!
//! Architecture, per position:
//!
//! ```text
//! x      = concat(embedding[c_1], ..., embedding[c_W])   the last W tokens,
//!                                                        left-padded with PAD
//! h      = tanh(W1 x + b1)
//! logits = W2 h + b2
//! log pi = log_softmax(logits)
//! ```
//!
//! Position `t` of a response conditions on the last `W` tokens of
//! `prompt ++ response[..t]`, so the forward pass is invariant to prompt
//! content that falls outside the window.
//!
//! All math is `f64`. Gradients are exact analytic backprop through the
//! per-token weight interface: `grad_accumulate` adds
//! `sum_t w_t * d(log pi(response[t] | context_t))/d(theta)` into a flat
//! gradient buffer, which is everything the training objectives need.
//!
//! # Checkpoint format
//!
//! Little-endian binary, written atomically:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "RLPOLICY"
//! 8       4     format version (u32, currently 1)
//! 12      4     vocab_size (u32)
//! 16      4     d_emb (u32)
//! 20      4     d_hid (u32)
//! 24      4     window (u32)
//! 28      8     parameter count (u64)
//! 36      8*n   parameters (f64), in layout order
//! ```
//!
//! Parameter layout: `[embedding | W1 | b1 | W2 | b2]` with `embedding`
//! stored row-major by token id, `W1` row-major `d_hid x (W*d_emb)`, and
//! `W2` row-major `vocab_size x d_hid`.

use crate::fsio::write_atomic;
use crate::task::Trace;
use crate::vocab::{Token, END, PAD};
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

const CHECKPOINT_MAGIC: &[u8; 8] = b"RLPOLICY";
const CHECKPOINT_VERSION: u32 = 1;

/// Model shape. Defaults are the desk-scale reference configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub d_emb: usize,
    pub d_hid: usize,
    pub window: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            vocab_size: crate::vocab::SIZE,
            d_emb: 16,
            d_hid: 64,
            window: 8,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if self.d_emb < 1 || self.d_hid < 1 || self.window < 1 {
            return Err(Error::Config("d_emb, d_hid, window must all be >= 1".into()));
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.window * self.d_emb
    }

    pub fn param_count(&self) -> usize {
        self.vocab_size * self.d_emb
            + self.d_hid * self.in_dim()
            + self.d_hid
            + self.vocab_size * self.d_hid
            + self.vocab_size
    }

    fn emb_off(&self) -> usize {
        0
    }

    fn w1_off(&self) -> usize {
        self.vocab_size * self.d_emb
    }

    fn b1_off(&self) -> usize {
        self.w1_off() + self.d_hid * self.in_dim()
    }

    fn w2_off(&self) -> usize {
        self.b1_off() + self.d_hid
    }

    fn b2_off(&self) -> usize {
        self.w2_off() + self.vocab_size * self.d_hid
    }
}

/// Flat parameter vector plus its shape. The flat layout keeps the
/// optimizer, finite differencing, and checkpoint IO trivial.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub cfg: PolicyConfig,
    pub data: Vec<f64>,
}

impl PolicyParams {
    /// Zero parameters: every next-token distribution is exactly uniform.
    pub fn zeros(cfg: PolicyConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(PolicyParams {
            data: vec![0.0; cfg.param_count()],
            cfg,
        })
    }

    /// Seeded init: embeddings and weight matrices uniform in
    /// (-0.05, 0.05), biases exactly zero.
    pub fn init(cfg: PolicyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; cfg.param_count()];
        let ranges = [
            (cfg.emb_off(), cfg.vocab_size * cfg.d_emb),
            (cfg.w1_off(), cfg.d_hid * cfg.in_dim()),
            (cfg.w2_off(), cfg.vocab_size * cfg.d_hid),
        ];
        for (off, len) in ranges {
            for v in &mut data[off..off + len] {
                *v = rng.gen_range(-0.05..0.05);
            }
        }
        Ok(PolicyParams { cfg, data })
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            Some(&t) => Err(Error::Input(format!(
                "token {t} outside vocabulary of size {}",
                self.cfg.vocab_size
            ))),
            None => Ok(()),
        }
    }
}

/// Log-probability of one response under the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqLogProb {
    /// `log pi(response[t] | context_t)` per position; each entry <= 0.
    pub per_token: Vec<f64>,
    /// Sum of `per_token`.
    pub total: f64,
    /// Response length in tokens.
    pub length: usize,
    /// `total / length`.
    pub normalized: f64,
}

/// `[PAD; W] ++ prompt ++ response`, so the window for response position
/// `t` is the slice of width `W` ending right before that token.
fn padded_sequence(window: usize, prompt: &[Token], response: &[Token]) -> Vec<Token> {
    let mut seq = Vec::with_capacity(window + prompt.len() + response.len());
    seq.resize(window, PAD);
    seq.extend_from_slice(prompt);
    seq.extend_from_slice(response);
    seq
}

/// Hidden activation and log-softmax over the next token for one window.
fn window_forward(params: &PolicyParams, window: &[Token], h: &mut [f64], log_probs: &mut [f64]) {
    let cfg = &params.cfg;
    let data = &params.data;
    let in_dim = cfg.in_dim();
    debug_assert_eq!(window.len(), cfg.window);

    for (j, hj) in h.iter_mut().enumerate() {
        let row = &data[cfg.w1_off() + j * in_dim..cfg.w1_off() + (j + 1) * in_dim];
        let mut acc = data[cfg.b1_off() + j];
        for (k, &tok) in window.iter().enumerate() {
            let emb = &data[cfg.emb_off() + tok as usize * cfg.d_emb..][..cfg.d_emb];
            let w = &row[k * cfg.d_emb..(k + 1) * cfg.d_emb];
            for (we, xe) in w.iter().zip(emb) {
                acc += we * xe;
            }
        }
        *hj = acc.tanh();
    }

    for (v, lp) in log_probs.iter_mut().enumerate() {
        let row = &data[cfg.w2_off() + v * cfg.d_hid..cfg.w2_off() + (v + 1) * cfg.d_hid];
        let mut acc = data[cfg.b2_off() + v];
        for (we, he) in row.iter().zip(h.iter()) {
            acc += we * he;
        }
        *lp = acc;
    }

    // stable log-softmax in place
    let max = log_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + log_probs.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    for lp in log_probs.iter_mut() {
        *lp -= lse;
    }
}

/// Scores `response` given `prompt`.
pub fn forward(params: &PolicyParams, prompt: &[Token], response: &[Token]) -> Result<SeqLogProb> {
    if response.is_empty() {
        return Err(Error::Input("cannot score an empty response".into()));
    }
    params.check_tokens(prompt)?;
    params.check_tokens(response)?;
    let cfg = &params.cfg;
    let seq = padded_sequence(cfg.window, prompt, response);
    let mut h = vec![0.0; cfg.d_hid];
    let mut log_probs = vec![0.0; cfg.vocab_size];
    let mut per_token = Vec::with_capacity(response.len());
    let base = cfg.window + prompt.len();
    for (t, &target) in response.iter().enumerate() {
        let window = &seq[base + t - cfg.window..base + t];
        window_forward(params, window, &mut h, &mut log_probs);
        per_token.push(log_probs[target as usize]);
    }
    let total: f64 = per_token.iter().sum();
    let length = per_token.len();
    Ok(SeqLogProb {
        total,
        length,
        normalized: total / length as f64,
        per_token,
    })
}

/// Next-token distribution after `prefix` (prompt and any already-emitted
/// response tokens concatenated). Sums to 1 up to rounding.
pub fn next_distribution(params: &PolicyParams, prefix: &[Token]) -> Result<Vec<f64>> {
    params.check_tokens(prefix)?;
    let cfg = &params.cfg;
    let seq = padded_sequence(cfg.window, prefix, &[]);
    let window = &seq[seq.len() - cfg.window..];
    let mut h = vec![0.0; cfg.d_hid];
    let mut log_probs = vec![0.0; cfg.vocab_size];
    window_forward(params, window, &mut h, &mut log_probs);
    Ok(log_probs.into_iter().map(f64::exp).collect())
}

/// Mean Shannon entropy (nats) of the policy's next-token distribution over
/// every position of `response`.
pub fn mean_token_entropy(params: &PolicyParams, prompt: &[Token], response: &[Token]) -> Result<f64> {
    if response.is_empty() {
        return Err(Error::Input("cannot take entropy over an empty response".into()));
    }
    params.check_tokens(prompt)?;
    params.check_tokens(response)?;
    let cfg = &params.cfg;
    let seq = padded_sequence(cfg.window, prompt, response);
    let mut h = vec![0.0; cfg.d_hid];
    let mut log_probs = vec![0.0; cfg.vocab_size];
    let base = cfg.window + prompt.len();
    let mut sum = 0.0;
    for t in 0..response.len() {
        let window = &seq[base + t - cfg.window..base + t];
        window_forward(params, window, &mut h, &mut log_probs);
        sum -= log_probs.iter().map(|&lp| lp.exp() * lp).sum::<f64>();
    }
    Ok(sum / response.len() as f64)
}

/// Adds `sum_t token_weights[t] * grad(log pi(response[t] | context_t))`
/// into `grad_out` (flat, same layout as `params.data`).
///
/// Positions with weight exactly 0.0 are skipped; they contribute nothing.
pub fn grad_accumulate(
    params: &PolicyParams,
    prompt: &[Token],
    response: &[Token],
    token_weights: &[f64],
    grad_out: &mut [f64],
) -> Result<()> {
    if response.is_empty() {
        return Err(Error::Input("cannot differentiate an empty response".into()));
    }
    if token_weights.len() != response.len() {
        return Err(Error::Input(format!(
            "token_weights length {} != response length {}",
            token_weights.len(),
            response.len()
        )));
    }
    if grad_out.len() != params.data.len() {
        return Err(Error::Input(format!(
            "gradient buffer length {} != parameter count {}",
            grad_out.len(),
            params.data.len()
        )));
    }
    params.check_tokens(prompt)?;
    params.check_tokens(response)?;

    let cfg = &params.cfg;
    let data = &params.data;
    let in_dim = cfg.in_dim();
    let seq = padded_sequence(cfg.window, prompt, response);
    let base = cfg.window + prompt.len();

    let mut h = vec![0.0; cfg.d_hid];
    let mut log_probs = vec![0.0; cfg.vocab_size];
    let mut dlogits = vec![0.0; cfg.vocab_size];
    let mut dh = vec![0.0; cfg.d_hid];

    for (t, &target) in response.iter().enumerate() {
        let w = token_weights[t];
        if w == 0.0 {
            continue;
        }
        let window = &seq[base + t - cfg.window..base + t];
        window_forward(params, window, &mut h, &mut log_probs);

        // d logits = w * (onehot(target) - softmax(logits))
        for (v, d) in dlogits.iter_mut().enumerate() {
            let p = log_probs[v].exp();
            *d = w * (if v == target as usize { 1.0 - p } else { -p });
        }

        // output layer
        for (v, &dl) in dlogits.iter().enumerate() {
            grad_out[cfg.b2_off() + v] += dl;
            let row = cfg.w2_off() + v * cfg.d_hid;
            for (j, &hj) in h.iter().enumerate() {
                grad_out[row + j] += dl * hj;
            }
        }

        // back through W2 and tanh
        for (j, dhj) in dh.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (v, &dl) in dlogits.iter().enumerate() {
                acc += data[cfg.w2_off() + v * cfg.d_hid + j] * dl;
            }
            *dhj = acc * (1.0 - h[j] * h[j]);
        }

        // hidden layer and embeddings
        for (j, &dj) in dh.iter().enumerate() {
            grad_out[cfg.b1_off() + j] += dj;
            let row = cfg.w1_off() + j * in_dim;
            for (k, &tok) in window.iter().enumerate() {
                let emb = cfg.emb_off() + tok as usize * cfg.d_emb;
                let wrow = row + k * cfg.d_emb;
                for e in 0..cfg.d_emb {
                    grad_out[wrow + e] += dj * data[emb + e];
                    grad_out[emb + e] += dj * data[wrow + e];
                }
            }
        }
    }
    Ok(())
}

/// Decoding settings for [`sample`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Softmax temperature; must be positive. Values below 1e-6 decode
    /// greedily.
    pub temperature: f64,
    /// Nucleus mass in (0, 1]: the smallest prefix of probability-sorted
    /// tokens whose cumulative mass reaches this is kept and renormalized.
    pub top_p: f64,
    /// Hard cap on emitted tokens (end token included when it fits).
    pub max_len: usize,
}

impl Default for SampleConfig {
    /// The decoding settings evaluation uses unless told otherwise:
    /// mildly sharpened sampling with a wide nucleus and room for the
    /// longest trace any supported difficulty produces.
    fn default() -> Self {
        SampleConfig {
            temperature: 0.6,
            top_p: 0.95,
            max_len: 64,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Autoregressively samples a trace. Deterministic in `rng_seed`.
pub fn sample(
    params: &PolicyParams,
    prompt: &[Token],
    cfg: &SampleConfig,
    rng_seed: u64,
) -> Result<Trace> {
    sample_with_prefix(params, prompt, &[], cfg, rng_seed)
}

/// Like [`sample`] but with `forced` tokens fixed as the start of the
/// response; sampling continues after them and they count toward `max_len`.
pub fn sample_with_prefix(
    params: &PolicyParams,
    prompt: &[Token],
    forced: &[Token],
    cfg: &SampleConfig,
    rng_seed: u64,
) -> Result<Trace> {
    cfg.validate()?;
    params.check_tokens(prompt)?;
    params.check_tokens(forced)?;
    if forced.len() > cfg.max_len {
        return Err(Error::Config(format!(
            "forced prefix of {} tokens exceeds max_len {}",
            forced.len(),
            cfg.max_len
        )));
    }
    let pcfg = &params.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut seq = padded_sequence(pcfg.window, prompt, forced);
    let mut generated = forced.to_vec();
    let mut h = vec![0.0; pcfg.d_hid];
    let mut log_probs = vec![0.0; pcfg.vocab_size];

    while generated.len() < cfg.max_len && generated.last() != Some(&END) {
        let window = &seq[seq.len() - pcfg.window..];
        window_forward_scaled(params, window, cfg.temperature, &mut h, &mut log_probs);
        let tok = if cfg.temperature < 1e-6 {
            argmax_token(&log_probs)
        } else {
            nucleus_draw(&log_probs, cfg.top_p, &mut rng)
        };
        generated.push(tok);
        seq.push(tok);
    }
    Ok(Trace::from_tokens(generated, 0))
}

/// Forward pass with logits divided by `temperature` before log-softmax.
fn window_forward_scaled(
    params: &PolicyParams,
    window: &[Token],
    temperature: f64,
    h: &mut [f64],
    log_probs: &mut [f64],
) {
    window_forward(params, window, h, log_probs);
    if temperature != 1.0 && temperature >= 1e-6 {
        // rescaling log-softmax output by 1/T then renormalizing equals
        // dividing the logits by T
        let max = log_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max / temperature
            + log_probs
                .iter()
                .map(|&l| ((l - max) / temperature).exp())
                .sum::<f64>()
                .ln();
        for lp in log_probs.iter_mut() {
            *lp = *lp / temperature - lse;
        }
    }
}

/// Highest-probability token; ties break toward the lowest token id.
fn argmax_token(log_probs: &[f64]) -> Token {
    let mut best = 0usize;
    for (v, &lp) in log_probs.iter().enumerate() {
        if lp > log_probs[best] {
            best = v;
        }
    }
    best as Token
}

/// Nucleus (top-p) draw over a log-probability vector. Tokens are sorted by
/// descending probability with ascending-id tie-break; the kept prefix is
/// the smallest one whose cumulative mass reaches `top_p`.
fn nucleus_draw(log_probs: &[f64], top_p: f64, rng: &mut ChaCha8Rng) -> Token {
    let mut order: Vec<usize> = (0..log_probs.len()).collect();
    order.sort_by(|&a, &b| {
        log_probs[b]
            .partial_cmp(&log_probs[a])
            .expect("log-probs are finite")
            .then(a.cmp(&b))
    });
    let mut kept = order.len();
    let mut cum = 0.0;
    for (i, &v) in order.iter().enumerate() {
        cum += log_probs[v].exp();
        if cum >= top_p {
            kept = i + 1;
            break;
        }
    }
    let nucleus = &order[..kept];
    let mass: f64 = nucleus.iter().map(|&v| log_probs[v].exp()).sum();
    let mut u = rng.gen::<f64>() * mass;
    for &v in nucleus {
        u -= log_probs[v].exp();
        if u <= 0.0 {
            return v as Token;
        }
    }
    nucleus[nucleus.len() - 1] as Token
}

/// Writes a checkpoint in the documented binary format.
pub fn save_checkpoint(path: &Path, params: &PolicyParams) -> Result<()> {
    let cfg = &params.cfg;
    let mut bytes = Vec::with_capacity(36 + 8 * params.data.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for dim in [cfg.vocab_size, cfg.d_emb, cfg.d_hid, cfg.window] {
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&(params.data.len() as u64).to_le_bytes());
    for v in &params.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

fn checkpoint_err(path: &Path, msg: &str) -> Error {
    Error::DataIntegrity(format!("checkpoint {}: {msg}", path.display()))
}

/// Reads a checkpoint, validating magic, version, and shape consistency.
pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 36 {
        return Err(checkpoint_err(path, "truncated header"));
    }
    if &bytes[0..8] != CHECKPOINT_MAGIC {
        return Err(checkpoint_err(path, "bad magic"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != CHECKPOINT_VERSION {
        return Err(checkpoint_err(path, &format!("unsupported version {version}")));
    }
    let cfg = PolicyConfig {
        vocab_size: u32_at(12) as usize,
        d_emb: u32_at(16) as usize,
        d_hid: u32_at(20) as usize,
        window: u32_at(24) as usize,
    };
    cfg.validate()
        .map_err(|e| checkpoint_err(path, &format!("invalid shape: {e}")))?;
    let count = u64::from_le_bytes(bytes[28..36].try_into().unwrap()) as usize;
    if count != cfg.param_count() {
        return Err(checkpoint_err(
            path,
            &format!("parameter count {count} does not match shape ({})", cfg.param_count()),
        ));
    }
    if bytes.len() != 36 + 8 * count {
        return Err(checkpoint_err(path, "truncated parameter data"));
    }
    let data: Vec<f64> = bytes[36..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(checkpoint_err(path, "non-finite parameter"));
    }
    Ok(PolicyParams { cfg, data })
}
