//! Central finite-difference certification of the analytic gradients.
//!
//! For every objective the trainer can optimize, this battery draws random
//! tiny policies and random token pairs, computes the analytic gradient by
//! pairing the objective's per-sequence weights with the policy's exact
//! backward pass, and compares each coordinate against a central finite
//! difference of the loss evaluated through the forward pass alone. The
//! two paths share no differentiation code, so agreement certifies both.
//!
//! Errors are relative with a unit floor, `|a - n| / max(1, |a|, |n|)`,
//! which behaves like absolute error for small gradients and relative
//! error for large ones.

use crate::objectives::{self, Objective, PairLogProbs};
use crate::policy::{self, PolicyConfig, PolicyParams};
use crate::seeding::derive_seed;
use crate::vocab::Token;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Random (policy, pair, hyperparameter) draws per objective.
    pub instances: usize,
    pub seed: u64,
    /// Central-difference step size.
    pub step: f64,
    /// Shape of the throwaway policies. Small dimensions keep the battery
    /// fast without changing what it certifies.
    pub policy: PolicyConfig,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            instances: 100,
            seed: 7,
            step: 1e-5,
            policy: PolicyConfig {
                vocab_size: 9,
                d_emb: 2,
                d_hid: 3,
                window: 4,
            },
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::Config("instances must be > 0".into()));
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::Config(format!("step must be > 0, got {}", self.step)));
        }
        if self.policy.vocab_size < 2 {
            return Err(Error::Config("gradcheck needs a vocab of at least 2".into()));
        }
        self.policy.validate()
    }
}

/// Error statistics for one objective across all instances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub objective: String,
    pub instances: usize,
    /// Coordinates compared (parameters times instances).
    pub comparisons: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub objectives: Vec<ObjectiveReport>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error with a unit floor in the denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

/// One random scoring problem: a prompt, a chosen and a rejected response,
/// and reference totals for the objectives that need them.
struct Instance {
    objective: Objective,
    prompt: Vec<Token>,
    chosen: Vec<Token>,
    rejected: Vec<Token>,
    chosen_ref: Option<f64>,
    rejected_ref: Option<f64>,
}

fn random_tokens(rng: &mut ChaCha8Rng, vocab: u32, len: usize) -> Vec<Token> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

fn draw_instance(
    kind: usize,
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
    reference: &PolicyParams,
) -> Result<Instance> {
    let vocab = cfg.policy.vocab_size as u32;
    let prompt_len = rng.gen_range(2..=5);
    let prompt = random_tokens(rng, vocab, prompt_len);
    let chosen_len = rng.gen_range(2..=6);
    let chosen = random_tokens(rng, vocab, chosen_len);
    let rejected_len = rng.gen_range(2..=6);
    let rejected = random_tokens(rng, vocab, rejected_len);
    let objective = match kind {
        0 => Objective::Sft {
            length_normalized: rng.gen_bool(0.5),
        },
        1 => Objective::Dpo {
            beta: rng.gen_range(0.05..1.0),
        },
        2 => Objective::Simpo {
            beta: rng.gen_range(0.5..4.0),
            gamma: rng.gen_range(0.0..2.0),
        },
        3 => Objective::Symmetric,
        _ => Objective::Redi {
            alpha: rng.gen_range(0.0..=1.0),
        },
    };
    let (chosen_ref, rejected_ref) = if matches!(objective, Objective::Dpo { .. }) {
        (
            Some(policy::forward(reference, &prompt, &chosen)?.total),
            Some(policy::forward(reference, &prompt, &rejected)?.total),
        )
    } else {
        (None, None)
    };
    Ok(Instance {
        objective,
        prompt,
        chosen,
        rejected,
        chosen_ref,
        rejected_ref,
    })
}

/// Loss of `instance` under `params`, via forward passes only.
fn loss_of(params: &PolicyParams, instance: &Instance) -> Result<f64> {
    let chosen = policy::forward(params, &instance.prompt, &instance.chosen)?;
    if let Objective::Sft { length_normalized } = instance.objective {
        let sl = if length_normalized {
            objectives::sft_norm_loss(&chosen)
        } else {
            objectives::sft_loss(&chosen)
        };
        return Ok(sl.loss);
    }
    let pair = PairLogProbs {
        chosen,
        rejected: policy::forward(params, &instance.prompt, &instance.rejected)?,
        chosen_ref: instance.chosen_ref,
        rejected_ref: instance.rejected_ref,
    };
    Ok(objectives::pair_loss(&instance.objective, &pair)?.loss)
}

/// Analytic gradient of `instance`'s loss: objective weights folded through
/// the policy backward pass.
fn analytic_grad(params: &PolicyParams, instance: &Instance) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.cfg.param_count()];
    if let Objective::Sft { length_normalized } = instance.objective {
        let chosen = policy::forward(params, &instance.prompt, &instance.chosen)?;
        let sl = if length_normalized {
            objectives::sft_norm_loss(&chosen)
        } else {
            objectives::sft_loss(&chosen)
        };
        let weights = vec![sl.chosen_weight; instance.chosen.len()];
        policy::grad_accumulate(params, &instance.prompt, &instance.chosen, &weights, &mut grad)?;
        return Ok(grad);
    }
    let pair = PairLogProbs {
        chosen: policy::forward(params, &instance.prompt, &instance.chosen)?,
        rejected: policy::forward(params, &instance.prompt, &instance.rejected)?,
        chosen_ref: instance.chosen_ref,
        rejected_ref: instance.rejected_ref,
    };
    let pl = objectives::pair_loss(&instance.objective, &pair)?;
    let chosen_weights = vec![pl.chosen_weight; instance.chosen.len()];
    policy::grad_accumulate(
        params,
        &instance.prompt,
        &instance.chosen,
        &chosen_weights,
        &mut grad,
    )?;
    let rejected_weights = vec![pl.rejected_weight; instance.rejected.len()];
    policy::grad_accumulate(
        params,
        &instance.prompt,
        &instance.rejected,
        &rejected_weights,
        &mut grad,
    )?;
    Ok(grad)
}

/// Runs the full battery and reports the worst error per objective.
pub fn run(cfg: &GradCheckConfig, tolerance: f64) -> Result<GradCheckReport> {
    cfg.validate()?;
    if !(tolerance.is_finite() && tolerance > 0.0) {
        return Err(Error::Config(format!("tolerance must be > 0, got {tolerance}")));
    }
    let kinds = ["sft", "dpo", "simpo", "symmetric", "redi"];
    let mut objectives_out = Vec::with_capacity(kinds.len());
    let mut overall_max: f64 = 0.0;
    for (kind, name) in kinds.iter().enumerate() {
        let mut max_err: f64 = 0.0;
        let mut err_sum = 0.0;
        let mut comparisons = 0usize;
        for i in 0..cfg.instances {
            let stream = (kind * cfg.instances + i) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream));
            let params = PolicyParams::init(cfg.policy, rng.gen())?;
            let reference = PolicyParams::init(cfg.policy, rng.gen())?;
            let instance = draw_instance(kind, cfg, &mut rng, &reference)?;
            let analytic = analytic_grad(&params, &instance)?;
            let mut perturbed = params.clone();
            for j in 0..analytic.len() {
                let original = perturbed.data[j];
                perturbed.data[j] = original + cfg.step;
                let plus = loss_of(&perturbed, &instance)?;
                perturbed.data[j] = original - cfg.step;
                let minus = loss_of(&perturbed, &instance)?;
                perturbed.data[j] = original;
                let numeric = (plus - minus) / (2.0 * cfg.step);
                let err = rel_err(analytic[j], numeric);
                max_err = max_err.max(err);
                err_sum += err;
                comparisons += 1;
            }
        }
        overall_max = overall_max.max(max_err);
        objectives_out.push(ObjectiveReport {
            objective: name.to_string(),
            instances: cfg.instances,
            comparisons,
            max_rel_err: max_err,
            mean_rel_err: err_sum / comparisons as f64,
        });
    }
    Ok(GradCheckReport {
        objectives: objectives_out,
        max_rel_err: overall_max,
        tolerance,
        passed: overall_max < tolerance,
    })
}
