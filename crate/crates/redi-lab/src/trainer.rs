//! Two-stage training orchestration with full per-step telemetry.
//!
//! Stage 1 fits the policy to curated correct traces with (optionally
//! length-normalized) SFT. Stage 2 starts from a stage-1 checkpoint and
//! refines it on preference pairs under any pairwise objective, logging
//! the mean normalized chosen/rejected log-probs every step and watching
//! for training collapse online.
//!
//! Every run writes the same artifact set into its output directory:
//!
//! * `config.txt` - flat key-value snapshot of the full run config plus
//!   the derived step counts;
//! * `telemetry.csv` - one row per optimizer step, fixed column order;
//! * `checkpoint_epoch_N.bin` - parameters at each epoch boundary;
//! * `checkpoint_final.bin` and `checkpoint_best.bin` - final parameters
//!   and the best intermediate-eval parameters (identical when no eval
//!   ran);
//! * `eval_final.json` and `eval_best.json` - full pass@k reports for the
//!   final and best checkpoints (only when eval problems are configured);
//! * `collapse.json` - present only if the collapse detector fired;
//! * `run.complete` - summary marker; reruns with `resume` set return it
//!   without retraining.
//!
//! Runs are bitwise deterministic in the seed: data shuffling, evaluation
//! sampling, and initialization all use seeds derived from the run seed
//! with fixed stream tags, and the training loop is sequential.

use crate::corpus::{self, PreferencePair, SftExample};
use crate::evalkit::{self, EvalConfig};
use crate::fsio;
use crate::objectives::{self, Objective, PairLogProbs};
use crate::optim::{l2_norm, OptimizerConfig, OptimizerState, Schedule};
use crate::policy::{self, PolicyConfig, PolicyParams, SampleConfig};
use crate::seeding::derive_seed;
use crate::task::Problem;
use crate::vocab::Token;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Seed stream tags, one per independent random decision a run makes.
const STREAM_INIT: u64 = 0x1317;
const STREAM_SHUFFLE: u64 = 0x5AFF;
const STREAM_EVAL: u64 = 0xEA1;

/// Collapse detector thresholds. Either condition can be disabled by
/// setting it to `None`; enabled conditions are combined with AND.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseConfig {
    /// Frames the drop is measured across.
    pub window: usize,
    /// Nats the mean chosen log-prob must fall within the window.
    pub logps_drop: Option<f64>,
    /// Multiple of the trailing median the update norm must exceed.
    pub surge_factor: Option<f64>,
    /// Frames the trailing update-norm median is taken over.
    pub median_window: usize,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        CollapseConfig {
            window: 50,
            logps_drop: Some(1.0),
            surge_factor: Some(5.0),
            median_window: 200,
        }
    }
}

impl CollapseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config("collapse window must be >= 2".into()));
        }
        if self.median_window == 0 {
            return Err(Error::Config("collapse median_window must be >= 1".into()));
        }
        if self.logps_drop.is_none() && self.surge_factor.is_none() {
            return Err(Error::Config(
                "collapse detection needs at least one enabled threshold".into(),
            ));
        }
        if let Some(d) = self.logps_drop {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::Config(format!("logps_drop must be > 0, got {d}")));
            }
        }
        if let Some(s) = self.surge_factor {
            if !(s.is_finite() && s > 1.0) {
                return Err(Error::Config(format!("surge_factor must be > 1, got {s}")));
            }
        }
        Ok(())
    }
}

/// Everything a run needs, and everything `config.txt` records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// 1 = SFT on curated correct traces, 2 = preference refinement.
    pub stage: u8,
    pub objective: Objective,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate every this many steps (0 disables periodic evaluation).
    /// When enabled the final step always evaluates as well, so the
    /// final checkpoint's accuracy is on record.
    pub eval_every: usize,
    /// Samples per problem for intermediate evaluation.
    pub eval_samples: usize,
    pub eta_max: f64,
    pub eta_min: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub policy: PolicyConfig,
    pub optimizer: OptimizerConfig,
    pub decode: SampleConfig,
    /// Force the reasoning-start token when sampling during evaluation.
    pub think_first: bool,
    pub collapse: CollapseConfig,
    /// Stage 1: curated SFT examples; stage 2: preference pairs.
    pub train_data: PathBuf,
    /// Held-out problems for intermediate evaluation.
    pub eval_problems: Option<PathBuf>,
    /// Required for stage 2; optional warm start for stage 1.
    pub init_checkpoint: Option<PathBuf>,
    /// DPO reference; defaults to `init_checkpoint` when absent.
    pub reference_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Return the recorded summary instead of retraining when the output
    /// directory already holds a completed run.
    pub resume: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stage == 1 || self.stage == 2) {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        self.objective.validate()?;
        if self.stage == 1 && self.objective.is_pairwise() {
            return Err(Error::Config(format!(
                "stage 1 trains with sft, got objective '{}'",
                self.objective.kind_name()
            )));
        }
        if self.stage == 2 {
            if !self.objective.is_pairwise() {
                return Err(Error::Config(
                    "stage 2 requires a pairwise objective (dpo, simpo, symmetric, redi)".into(),
                ));
            }
            if self.init_checkpoint.is_none() {
                return Err(Error::Config(
                    "stage 2 must initialize from a stage-1 checkpoint; pass init_checkpoint"
                        .into(),
                ));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be >= 1".into()));
        }
        if !(self.eta_max.is_finite() && self.eta_max >= 0.0) {
            return Err(Error::Config(format!("eta_max must be >= 0, got {}", self.eta_max)));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup_frac must be in [0, 1], got {}",
                self.warmup_frac
            )));
        }
        if self.eval_every > 0 && self.eval_problems.is_none() {
            return Err(Error::Config(
                "eval_every > 0 requires eval_problems".into(),
            ));
        }
        self.policy.validate()?;
        self.optimizer.validate()?;
        self.decode.validate()?;
        self.collapse.validate()?;
        Ok(())
    }

    /// Flat key-value view, in the order `config.txt` lists them.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        fn opt_path(p: &Option<PathBuf>) -> String {
            p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        }
        fn opt_f64(v: Option<f64>) -> String {
            v.map(|v| v.to_string()).unwrap_or_default()
        }
        let (beta, gamma, alpha, length_normalized) = match self.objective {
            Objective::Sft { length_normalized } => (None, None, None, length_normalized),
            Objective::Dpo { beta } => (Some(beta), None, None, false),
            Objective::Simpo { beta, gamma } => (Some(beta), Some(gamma), None, false),
            Objective::Symmetric => (None, None, None, false),
            Objective::Redi { alpha } => (None, None, Some(alpha), false),
        };
        vec![
            ("stage".into(), self.stage.to_string()),
            ("objective".into(), self.objective.kind_name().into()),
            ("beta".into(), opt_f64(beta)),
            ("gamma".into(), opt_f64(gamma)),
            ("alpha".into(), opt_f64(alpha)),
            ("length_normalized".into(), length_normalized.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("eval_every".into(), self.eval_every.to_string()),
            ("eval_samples".into(), self.eval_samples.to_string()),
            ("eta_max".into(), self.eta_max.to_string()),
            ("eta_min".into(), self.eta_min.to_string()),
            ("warmup_frac".into(), self.warmup_frac.to_string()),
            ("vocab_size".into(), self.policy.vocab_size.to_string()),
            ("d_emb".into(), self.policy.d_emb.to_string()),
            ("d_hid".into(), self.policy.d_hid.to_string()),
            ("window".into(), self.policy.window.to_string()),
            ("optimizer".into(), self.optimizer.kind.kind_name().into()),
            ("beta1".into(), self.optimizer.beta1.to_string()),
            ("beta2".into(), self.optimizer.beta2.to_string()),
            ("epsilon".into(), self.optimizer.epsilon.to_string()),
            ("weight_decay".into(), self.optimizer.weight_decay.to_string()),
            ("temperature".into(), self.decode.temperature.to_string()),
            ("top_p".into(), self.decode.top_p.to_string()),
            ("max_len".into(), self.decode.max_len.to_string()),
            ("think_first".into(), self.think_first.to_string()),
            ("collapse_window".into(), self.collapse.window.to_string()),
            ("collapse_logps_drop".into(), opt_f64(self.collapse.logps_drop)),
            ("collapse_surge_factor".into(), opt_f64(self.collapse.surge_factor)),
            ("collapse_median_window".into(), self.collapse.median_window.to_string()),
            ("train_data".into(), self.train_data.display().to_string()),
            ("eval_problems".into(), opt_path(&self.eval_problems)),
            ("init_checkpoint".into(), opt_path(&self.init_checkpoint)),
            ("reference_checkpoint".into(), opt_path(&self.reference_checkpoint)),
            ("out_dir".into(), self.out_dir.display().to_string()),
            ("resume".into(), self.resume.to_string()),
        ]
    }
}

/// One row of `telemetry.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    /// 1-based optimizer step.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Batch-mean length-normalized chosen log-prob; stage 2 only.
    pub chosen_logps: Option<f64>,
    /// Batch-mean length-normalized rejected log-prob; stage 2 only.
    pub rejected_logps: Option<f64>,
    pub grad_norm: f64,
    pub update_norm: f64,
    /// Held-out single-sample accuracy; present at evaluation steps.
    pub eval_accuracy: Option<f64>,
    /// Mean next-token entropy over a fixed probe of training sequences;
    /// present at evaluation steps.
    pub mean_token_entropy: Option<f64>,
}

pub const TELEMETRY_COLUMNS: &str =
    "step,lr,loss,chosen_logps,rejected_logps,grad_norm,update_norm,eval_accuracy,mean_token_entropy";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders frames in the fixed column order. The same frames always
/// render to the same bytes, so equal-seed reruns produce identical
/// files.
pub fn telemetry_csv(frames: &[TelemetryFrame]) -> String {
    let mut out = String::with_capacity(64 * (frames.len() + 1));
    out.push_str(TELEMETRY_COLUMNS);
    out.push('\n');
    for f in frames {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            f.step,
            f.lr,
            f.loss,
            fmt_opt(f.chosen_logps),
            fmt_opt(f.rejected_logps),
            f.grad_norm,
            f.update_norm,
            fmt_opt(f.eval_accuracy),
            fmt_opt(f.mean_token_entropy),
        ));
    }
    out
}

pub fn save_telemetry(path: &Path, frames: &[TelemetryFrame]) -> Result<()> {
    fsio::write_atomic(path, telemetry_csv(frames).as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollapseTrigger {
    LogpsDrop,
    GradnormSurge,
    Both,
}

/// Emitted at most once per run, the first time the detector fires.
/// Detection is diagnostic only; training continues.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseEvent {
    pub step: usize,
    pub trigger: CollapseTrigger,
    /// Chosen log-prob fall across the detection window, in nats.
    pub drop: f64,
    pub update_norm: f64,
    pub median_update_norm: f64,
    pub window: usize,
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Tests the newest frame of `history` against the collapse thresholds.
///
/// Needs at least `cfg.window` frames, all of which must carry
/// `chosen_logps` (so the detector is inert during stage 1). The drop is
/// measured from the first to the last frame of the window; the surge
/// compares the newest update norm against the median over up to
/// `cfg.median_window` frames immediately before it.
pub fn detect_collapse(history: &[TelemetryFrame], cfg: &CollapseConfig) -> Option<CollapseEvent> {
    cfg.validate().ok()?;
    if history.len() < cfg.window {
        return None;
    }
    let window = &history[history.len() - cfg.window..];
    let first = window.first()?.chosen_logps?;
    let last_frame = window.last()?;
    let last = last_frame.chosen_logps?;
    if window.iter().any(|f| f.chosen_logps.is_none()) {
        return None;
    }
    let drop = first - last;
    let before_last = &history[..history.len() - 1];
    let tail_start = before_last.len().saturating_sub(cfg.median_window);
    let med = median(before_last[tail_start..].iter().map(|f| f.update_norm).collect());
    let drop_fired = cfg.logps_drop.map(|t| drop > t);
    let surge_fired = cfg.surge_factor.map(|t| last_frame.update_norm > t * med);
    let (fired, trigger) = match (drop_fired, surge_fired) {
        (Some(d), Some(s)) => (d && s, CollapseTrigger::Both),
        (Some(d), None) => (d, CollapseTrigger::LogpsDrop),
        (None, Some(s)) => (s, CollapseTrigger::GradnormSurge),
        (None, None) => (false, CollapseTrigger::Both),
    };
    if !fired {
        return None;
    }
    Some(CollapseEvent {
        step: last_frame.step,
        trigger,
        drop,
        update_norm: last_frame.update_norm,
        median_update_norm: med,
        window: cfg.window,
    })
}

/// What a finished run reports, and what `run.complete` records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub stage: u8,
    pub objective: String,
    pub steps: usize,
    pub final_loss: f64,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    /// Best intermediate-eval accuracy, if any evaluation ran.
    pub best_eval: Option<f64>,
    /// Accuracy recorded at the final step, if any evaluation ran.
    pub final_eval: Option<f64>,
    pub collapse: Option<CollapseEvent>,
}

fn save_summary(path: &Path, summary: &RunSummary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::Contract(format!("summary serialization failed: {e}")))?;
    text.push('\n');
    fsio::write_atomic(path, text.as_bytes())
}

pub fn load_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

fn save_run_config(path: &Path, cfg: &RunConfig, total_steps: u64, warmup_steps: u64) -> Result<()> {
    let mut text = String::new();
    for (k, v) in cfg.to_kv() {
        text.push_str(&format!("{k} = {v}\n"));
    }
    text.push_str(&format!("total_steps = {total_steps}\n"));
    text.push_str(&format!("warmup_steps = {warmup_steps}\n"));
    fsio::write_atomic(path, text.as_bytes())
}

/// The training items a step scores: the chosen side, and for stage 2 the
/// rejected side plus frozen DPO reference totals.
enum TrainSet {
    Sft(Vec<SftExample>),
    Pref {
        pairs: Vec<PreferencePair>,
        refs: Option<Vec<(f64, f64)>>,
    },
}

impl TrainSet {
    fn len(&self) -> usize {
        match self {
            TrainSet::Sft(v) => v.len(),
            TrainSet::Pref { pairs, .. } => pairs.len(),
        }
    }
}

struct StepStats {
    loss: f64,
    chosen_logps: Option<f64>,
    rejected_logps: Option<f64>,
}

/// Scores one mini-batch and accumulates its mean-loss gradient.
fn batch_step(
    params: &PolicyParams,
    data: &TrainSet,
    objective: &Objective,
    batch: &[usize],
    grad: &mut [f64],
) -> Result<StepStats> {
    let scale = 1.0 / batch.len() as f64;
    match data {
        TrainSet::Sft(examples) => {
            let length_normalized = matches!(
                objective,
                Objective::Sft {
                    length_normalized: true
                }
            );
            let mut loss = 0.0;
            for &i in batch {
                let ex = &examples[i];
                let scored = policy::forward(params, &ex.prompt, &ex.chosen)?;
                let sl = if length_normalized {
                    objectives::sft_norm_loss(&scored)
                } else {
                    objectives::sft_loss(&scored)
                };
                loss += sl.loss;
                let weights = vec![sl.chosen_weight * scale; ex.chosen.len()];
                policy::grad_accumulate(params, &ex.prompt, &ex.chosen, &weights, grad)?;
            }
            Ok(StepStats {
                loss: loss * scale,
                chosen_logps: None,
                rejected_logps: None,
            })
        }
        TrainSet::Pref { pairs, refs } => {
            let mut loss = 0.0;
            let mut chosen_sum = 0.0;
            let mut rejected_sum = 0.0;
            for &i in batch {
                let pair = &pairs[i];
                let chosen = policy::forward(params, &pair.prompt, &pair.chosen)?;
                let rejected = policy::forward(params, &pair.prompt, &pair.rejected)?;
                chosen_sum += chosen.normalized;
                rejected_sum += rejected.normalized;
                let (chosen_ref, rejected_ref) = match refs {
                    Some(r) => (Some(r[i].0), Some(r[i].1)),
                    None => (None, None),
                };
                let logps = PairLogProbs {
                    chosen,
                    rejected,
                    chosen_ref,
                    rejected_ref,
                };
                let pl = objectives::pair_loss(objective, &logps)?;
                loss += pl.loss;
                let chosen_weights = vec![pl.chosen_weight * scale; pair.chosen.len()];
                policy::grad_accumulate(params, &pair.prompt, &pair.chosen, &chosen_weights, grad)?;
                let rejected_weights = vec![pl.rejected_weight * scale; pair.rejected.len()];
                policy::grad_accumulate(
                    params,
                    &pair.prompt,
                    &pair.rejected,
                    &rejected_weights,
                    grad,
                )?;
            }
            Ok(StepStats {
                loss: loss * scale,
                chosen_logps: Some(chosen_sum * scale),
                rejected_logps: Some(rejected_sum * scale),
            })
        }
    }
}

/// Length-weighted mean next-token entropy over a small fixed probe of
/// training sequences.
fn probe_entropy(params: &PolicyParams, data: &TrainSet) -> Result<f64> {
    let probe_count = data.len().min(8);
    let mut weighted = 0.0;
    let mut tokens = 0usize;
    for i in 0..probe_count {
        let (prompt, response): (&[Token], &[Token]) = match data {
            TrainSet::Sft(v) => (&v[i].prompt, &v[i].chosen),
            TrainSet::Pref { pairs, .. } => (&pairs[i].prompt, &pairs[i].chosen),
        };
        let h = policy::mean_token_entropy(params, prompt, response)?;
        weighted += h * response.len() as f64;
        tokens += response.len();
    }
    Ok(weighted / tokens as f64)
}

fn eval_accuracy(
    params: &PolicyParams,
    problems: &[Problem],
    cfg: &RunConfig,
    step: usize,
) -> Result<f64> {
    let eval_cfg = EvalConfig {
        samples: cfg.eval_samples,
        ks: vec![1],
        decode: cfg.decode,
        seed: derive_seed(derive_seed(cfg.seed, STREAM_EVAL), step as u64),
        think_first: cfg.think_first,
    };
    let (_, report) = evalkit::evaluate(params, problems, &eval_cfg)?;
    Ok(report.pass1.mean)
}

/// Runs a configured training stage end to end and writes all artifacts.
pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let marker = cfg.out_dir.join("run.complete");
    if cfg.resume && marker.exists() {
        return load_summary(&marker);
    }

    let data = match cfg.stage {
        1 => TrainSet::Sft(corpus::load_sft_jsonl(&cfg.train_data)?),
        _ => {
            let pairs = corpus::load_pref_jsonl(&cfg.train_data)?;
            TrainSet::Pref { pairs, refs: None }
        }
    };
    if data.len() == 0 {
        return Err(Error::Input(format!(
            "training set {} is empty",
            cfg.train_data.display()
        )));
    }

    let mut params = match &cfg.init_checkpoint {
        Some(path) => {
            let loaded = policy::load_checkpoint(path)?;
            if loaded.cfg != cfg.policy {
                return Err(Error::Config(format!(
                    "init checkpoint shape {:?} does not match configured policy {:?}",
                    loaded.cfg, cfg.policy
                )));
            }
            loaded
        }
        None => PolicyParams::init(cfg.policy, derive_seed(cfg.seed, STREAM_INIT))?,
    };

    // DPO scores both sides against a frozen reference once, up front.
    let data = match (&cfg.objective, data) {
        (Objective::Dpo { .. }, TrainSet::Pref { pairs, .. }) => {
            let ref_path = cfg
                .reference_checkpoint
                .as_ref()
                .or(cfg.init_checkpoint.as_ref())
                .ok_or_else(|| {
                    Error::Config("dpo needs a reference or init checkpoint".into())
                })?;
            let reference = policy::load_checkpoint(ref_path)?;
            let refs = pairs
                .iter()
                .map(|p| {
                    Ok((
                        policy::forward(&reference, &p.prompt, &p.chosen)?.total,
                        policy::forward(&reference, &p.prompt, &p.rejected)?.total,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            TrainSet::Pref {
                pairs,
                refs: Some(refs),
            }
        }
        (_, data) => data,
    };

    let eval_problems = match &cfg.eval_problems {
        Some(path) => Some(corpus::load_problems_jsonl(path)?),
        None => None,
    };

    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as u64;
    let warmup_steps = (total_steps as f64 * cfg.warmup_frac) as u64;
    let schedule = Schedule {
        total_steps,
        warmup_steps,
        eta_max: cfg.eta_max,
        eta_min: cfg.eta_min,
    };
    schedule.validate()?;
    save_run_config(&cfg.out_dir.join("config.txt"), cfg, total_steps, warmup_steps)?;

    let mut optimizer = OptimizerState::new(cfg.optimizer, params.cfg.param_count())?;
    let mut frames: Vec<TelemetryFrame> = Vec::with_capacity(total_steps as usize);
    let mut collapse: Option<CollapseEvent> = None;
    let mut best_eval: Option<f64> = None;
    let mut final_eval: Option<f64> = None;
    let best_path = cfg.out_dir.join("checkpoint_best.bin");
    let final_path = cfg.out_dir.join("checkpoint_final.bin");
    let telemetry_path = cfg.out_dir.join("telemetry.csv");

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, STREAM_SHUFFLE), epoch as u64));
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let lr = schedule.lr_at(step as u64)?;
            let mut grad = vec![0.0; params.cfg.param_count()];
            let stats = batch_step(&params, &data, &cfg.objective, batch, &mut grad)?;
            let grad_norm = l2_norm(&grad);
            if !stats.loss.is_finite() {
                frames.push(TelemetryFrame {
                    step: step + 1,
                    lr,
                    loss: stats.loss,
                    chosen_logps: stats.chosen_logps,
                    rejected_logps: stats.rejected_logps,
                    grad_norm,
                    update_norm: 0.0,
                    eval_accuracy: None,
                    mean_token_entropy: None,
                });
                save_telemetry(&telemetry_path, &frames)?;
                return Err(Error::NonFinite(format!(
                    "loss became {} at step {}; diagnostic frame written",
                    stats.loss,
                    step + 1
                )));
            }
            let update_norm = match optimizer.step(&mut params.data, &grad, lr) {
                Ok(norm) => norm,
                Err(e) => {
                    save_telemetry(&telemetry_path, &frames)?;
                    return Err(e);
                }
            };
            step += 1;
            let is_eval_step = cfg.eval_every > 0
                && (step % cfg.eval_every == 0 || step == total_steps as usize);
            let (acc, entropy) = if is_eval_step {
                let problems = eval_problems.as_ref().expect("validated with eval_every");
                let acc = eval_accuracy(&params, problems, cfg, step)?;
                (Some(acc), Some(probe_entropy(&params, &data)?))
            } else {
                (None, None)
            };
            frames.push(TelemetryFrame {
                step,
                lr,
                loss: stats.loss,
                chosen_logps: stats.chosen_logps,
                rejected_logps: stats.rejected_logps,
                grad_norm,
                update_norm,
                eval_accuracy: acc,
                mean_token_entropy: entropy,
            });
            if let Some(acc) = acc {
                final_eval = Some(acc);
                if best_eval.map_or(true, |b| acc > b) {
                    best_eval = Some(acc);
                    policy::save_checkpoint(&best_path, &params)?;
                }
            }
            if collapse.is_none() {
                if let Some(event) = detect_collapse(&frames, &cfg.collapse) {
                    let mut text = serde_json::to_string_pretty(&event)
                        .map_err(|e| Error::Contract(format!("collapse serialization: {e}")))?;
                    text.push('\n');
                    fsio::write_atomic(&cfg.out_dir.join("collapse.json"), text.as_bytes())?;
                    collapse = Some(event);
                }
            }
        }
        policy::save_checkpoint(
            &cfg.out_dir.join(format!("checkpoint_epoch_{}.bin", epoch + 1)),
            &params,
        )?;
    }

    policy::save_checkpoint(&final_path, &params)?;
    if best_eval.is_none() {
        policy::save_checkpoint(&best_path, &params)?;
    }
    save_telemetry(&telemetry_path, &frames)?;
    if let Some(problems) = &eval_problems {
        let full_eval = |p: &PolicyParams, stream: u64| {
            let eval_cfg = EvalConfig {
                samples: cfg.eval_samples,
                ks: EvalConfig::default_ks(),
                decode: cfg.decode,
                seed: derive_seed(derive_seed(cfg.seed, STREAM_EVAL), stream),
                think_first: cfg.think_first,
            };
            evalkit::evaluate(p, problems, &eval_cfg).map(|(_, report)| report)
        };
        evalkit::save_report(&cfg.out_dir.join("eval_final.json"), &full_eval(&params, u64::MAX)?)?;
        let best_params = policy::load_checkpoint(&best_path)?;
        evalkit::save_report(
            &cfg.out_dir.join("eval_best.json"),
            &full_eval(&best_params, u64::MAX - 1)?,
        )?;
    }
    let summary = RunSummary {
        stage: cfg.stage,
        objective: cfg.objective.kind_name().into(),
        steps: step,
        final_loss: frames.last().map(|f| f.loss).unwrap_or(f64::NAN),
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        best_eval,
        final_eval,
        collapse,
    };
    save_summary(&marker, &summary)?;
    Ok(summary)
}

/// Stage 1: supervised fitting of curated correct traces.
pub fn run_stage1(cfg: &RunConfig) -> Result<RunSummary> {
    if cfg.stage != 1 {
        return Err(Error::Config(format!("run_stage1 got a stage-{} config", cfg.stage)));
    }
    run(cfg)
}

/// Stage 2: preference refinement from a stage-1 checkpoint.
pub fn run_stage2(cfg: &RunConfig) -> Result<RunSummary> {
    if cfg.stage != 2 {
        return Err(Error::Config(format!("run_stage2 got a stage-{} config", cfg.stage)));
    }
    run(cfg)
}

/// Pearson correlation; `None` when undefined (fewer than two points or
/// zero variance on either side).
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Sequences the token-statistics report probes a checkpoint with.
#[derive(Debug, Clone, Default)]
pub struct ProbeSet {
    /// (prompt, response) pairs the policy was trained toward.
    pub train_chosen: Vec<(Vec<Token>, Vec<Token>)>,
    /// (prompt, response) pairs the policy was trained away from.
    pub train_rejected: Vec<(Vec<Token>, Vec<Token>)>,
    /// Problems whose prompts seed fresh generations per checkpoint.
    pub generate_from: Vec<Problem>,
    pub decode: Option<SampleConfig>,
    pub seed: u64,
}

impl ProbeSet {
    /// Probe set straight from a preference corpus: chosen and rejected
    /// responses verbatim, generation prompts from `problems`.
    pub fn from_pref(pairs: &[PreferencePair], problems: &[Problem], seed: u64) -> Self {
        ProbeSet {
            train_chosen: pairs
                .iter()
                .map(|p| (p.prompt.clone(), p.chosen.clone()))
                .collect(),
            train_rejected: pairs
                .iter()
                .map(|p| (p.prompt.clone(), p.rejected.clone()))
                .collect(),
            generate_from: problems.to_vec(),
            decode: Some(SampleConfig::default()),
            seed,
        }
    }
}

/// Mean per-position next-token entropy for each probe class; a class
/// with no sequences is reported as absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyByClass {
    pub train_chosen: Option<f64>,
    pub train_rejected: Option<f64>,
    pub test_generated: Option<f64>,
}

/// Correlation between per-token-type log-prob change and initial
/// log-prob, at two minimum-occurrence thresholds. Absent when undefined
/// (for example at the initial checkpoint, where every change is zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaCorrelation {
    pub min_freq_1: Option<f64>,
    pub min_freq_10: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointStats {
    pub label: String,
    pub entropy: EntropyByClass,
    pub delta_correlation: DeltaCorrelation,
}

fn class_entropy(params: &PolicyParams, class: &[(Vec<Token>, Vec<Token>)]) -> Result<Option<f64>> {
    if class.is_empty() {
        return Ok(None);
    }
    let mut weighted = 0.0;
    let mut tokens = 0usize;
    for (prompt, response) in class {
        let h = policy::mean_token_entropy(params, prompt, response)?;
        weighted += h * response.len() as f64;
        tokens += response.len();
    }
    Ok(Some(weighted / tokens as f64))
}

/// Per-token-type mean log-prob over all response positions of the fixed
/// probe classes.
fn type_mean_logps(
    params: &PolicyParams,
    probes: &ProbeSet,
) -> Result<std::collections::BTreeMap<Token, (f64, usize)>> {
    let mut acc: std::collections::BTreeMap<Token, (f64, usize)> = Default::default();
    for (prompt, response) in probes.train_chosen.iter().chain(&probes.train_rejected) {
        let scored = policy::forward(params, prompt, response)?;
        for (t, lp) in response.iter().zip(&scored.per_token) {
            let entry = acc.entry(*t).or_insert((0.0, 0));
            entry.0 += lp;
            entry.1 += 1;
        }
    }
    Ok(acc)
}

fn delta_correlation_at(
    initial: &std::collections::BTreeMap<Token, (f64, usize)>,
    current: &std::collections::BTreeMap<Token, (f64, usize)>,
    min_freq: usize,
) -> Option<f64> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (token, (sum_init, count)) in initial {
        if *count < min_freq {
            continue;
        }
        let (sum_cur, count_cur) = current.get(token)?;
        debug_assert_eq!(count, count_cur);
        let init_mean = sum_init / *count as f64;
        let cur_mean = sum_cur / *count_cur as f64;
        xs.push(init_mean);
        ys.push(cur_mean - init_mean);
    }
    pearson(&xs, &ys)
}

/// Entropy and log-prob-shift statistics for each checkpoint, all
/// measured against the same probe set and the same initial parameters.
pub fn analyze_token_stats(
    initial: &PolicyParams,
    checkpoints: &[(String, PolicyParams)],
    probes: &ProbeSet,
) -> Result<Vec<CheckpointStats>> {
    let initial_types = type_mean_logps(initial, probes)?;
    let mut out = Vec::with_capacity(checkpoints.len());
    for (label, params) in checkpoints {
        if params.cfg != initial.cfg {
            return Err(Error::Config(format!(
                "checkpoint '{label}' shape differs from the initial model"
            )));
        }
        let generated: Vec<(Vec<Token>, Vec<Token>)> = if probes.generate_from.is_empty() {
            Vec::new()
        } else {
            let decode = probes.decode.unwrap_or_default();
            probes
                .generate_from
                .iter()
                .map(|problem| {
                    let trace = policy::sample(
                        params,
                        &problem.prompt,
                        &decode,
                        derive_seed(probes.seed, problem.id),
                    )?;
                    Ok((problem.prompt.clone(), trace.tokens))
                })
                .collect::<Result<Vec<_>>>()?
        };
        let entropy = EntropyByClass {
            train_chosen: class_entropy(params, &probes.train_chosen)?,
            train_rejected: class_entropy(params, &probes.train_rejected)?,
            test_generated: class_entropy(params, &generated)?,
        };
        let current_types = type_mean_logps(params, probes)?;
        let delta_correlation = DeltaCorrelation {
            min_freq_1: delta_correlation_at(&initial_types, &current_types, 1),
            min_freq_10: delta_correlation_at(&initial_types, &current_types, 10),
        };
        out.push(CheckpointStats {
            label: label.clone(),
            entropy,
            delta_correlation,
        });
    }
    Ok(out)
}

pub fn save_token_stats(path: &Path, stats: &[CheckpointStats]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(stats)
        .map_err(|e| Error::Contract(format!("token stats serialization failed: {e}")))?;
    text.push('\n');
    fsio::write_atomic(path, text.as_bytes())
}
