//! Training objectives as pure functions of sequence log-probabilities.
//!
//! Every objective reports its loss together with *per-sequence gradient
//! weights*: scalars `w` such that the loss gradient is
//! `sum_over_sequences w * grad(total log-prob contribution per token)`.
//! Concretely, a weight `w` on a sequence means every token position of
//! that sequence is backpropagated with weight `w` through
//! [`crate::policy::grad_accumulate`]. This factors each objective's
//! calculus out of the network entirely; the pairing of weights with exact
//! policy backprop is what the finite-difference battery certifies.
//!
//! With `c = chosen`, `r = rejected`, `|c|`, `|r|` their lengths, and
//! `hat(l)` a length-normalized total log-prob:
//!
//! ```text
//! sft        L = -log pi(c)                           w_c = -1
//! sft (norm) L = -log pi(c) / |c|                     w_c = -1/|c|
//! dpo        z = (l_c - l_c_ref) - (l_r - l_r_ref)
//!            L = -log sigmoid(beta * z)
//!            s = sigmoid(-beta * z)
//!            w_c = -beta*s            w_r = +beta*s
//! simpo      R = hat(l_c) - hat(l_r)
//!            L = -log sigmoid(beta*R - gamma)
//!            s = sigmoid(gamma - beta*R)
//!            w_c = -beta*s/|c|        w_r = +beta*s/|r|
//! symmetric  L = -hat(l_c) + hat(l_r)
//!            w_c = -1/|c|             w_r = +1/|r|
//! redi       L = -hat(l_c) + alpha * hat(l_r),  alpha in [0, 1]
//!            w_c = -1/|c|             w_r = +alpha/|r|
//! ```
//!
//! `redi` at `alpha = 1` is bit-for-bit the symmetric loss; at `alpha = 0`
//! it is bit-for-bit the length-normalized SFT loss on the chosen side.
//!
//! Batch reduction is the arithmetic mean over pairs, accumulated in input
//! order.

use crate::policy::SeqLogProb;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Numerically stable `log(sigmoid(x))`, branching on the sign so neither
/// branch exponentiates a positive argument.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Current-policy log-probs for one preference pair, with the frozen
/// reference totals required by DPO.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLogProbs {
    pub chosen: SeqLogProb,
    pub rejected: SeqLogProb,
    /// Total log-prob of the chosen response under the reference policy.
    pub chosen_ref: Option<f64>,
    /// Total log-prob of the rejected response under the reference policy.
    pub rejected_ref: Option<f64>,
}

/// Which loss to train with, including its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    Sft { length_normalized: bool },
    Dpo { beta: f64 },
    Simpo { beta: f64, gamma: f64 },
    Symmetric,
    Redi { alpha: f64 },
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Objective::Sft { .. } | Objective::Symmetric => Ok(()),
            Objective::Dpo { beta } => {
                if beta.is_finite() && beta > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("dpo beta must be > 0, got {beta}")))
                }
            }
            Objective::Simpo { beta, gamma } => {
                if !(beta.is_finite() && beta > 0.0) {
                    return Err(Error::Config(format!("simpo beta must be > 0, got {beta}")));
                }
                if !(gamma.is_finite() && gamma >= 0.0) {
                    return Err(Error::Config(format!("simpo gamma must be >= 0, got {gamma}")));
                }
                Ok(())
            }
            Objective::Redi { alpha } => {
                if alpha.is_finite() && (0.0..=1.0).contains(&alpha) {
                    Ok(())
                } else {
                    Err(Error::Config(format!("redi alpha must be in [0, 1], got {alpha}")))
                }
            }
        }
    }

    /// True for objectives that consume chosen/rejected pairs.
    pub fn is_pairwise(&self) -> bool {
        !matches!(self, Objective::Sft { .. })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Objective::Sft { .. } => "sft",
            Objective::Dpo { .. } => "dpo",
            Objective::Simpo { .. } => "simpo",
            Objective::Symmetric => "symmetric",
            Objective::Redi { .. } => "redi",
        }
    }

    /// Builds an objective from flat config parts, enforcing that exactly
    /// the hyperparameters the kind needs are present.
    pub fn from_parts(
        kind: &str,
        beta: Option<f64>,
        gamma: Option<f64>,
        alpha: Option<f64>,
    ) -> Result<Objective> {
        let require = |name: &str, v: Option<f64>| {
            v.ok_or_else(|| Error::Config(format!("objective '{kind}' requires --{name}")))
        };
        let forbid = |name: &str, v: Option<f64>| match v {
            Some(_) => Err(Error::Config(format!("objective '{kind}' does not take --{name}"))),
            None => Ok(()),
        };
        let objective = match kind {
            "sft" => {
                forbid("beta", beta)?;
                forbid("gamma", gamma)?;
                forbid("alpha", alpha)?;
                Objective::Sft {
                    length_normalized: false,
                }
            }
            "dpo" => {
                forbid("gamma", gamma)?;
                forbid("alpha", alpha)?;
                Objective::Dpo {
                    beta: require("beta", beta)?,
                }
            }
            "simpo" => {
                forbid("alpha", alpha)?;
                Objective::Simpo {
                    beta: require("beta", beta)?,
                    gamma: require("gamma", gamma)?,
                }
            }
            "symmetric" => {
                forbid("beta", beta)?;
                forbid("gamma", gamma)?;
                forbid("alpha", alpha)?;
                Objective::Symmetric
            }
            "redi" => {
                forbid("beta", beta)?;
                forbid("gamma", gamma)?;
                Objective::Redi {
                    alpha: require("alpha", alpha)?,
                }
            }
            other => return Err(Error::Config(format!("unknown objective kind '{other}'"))),
        };
        objective.validate()?;
        Ok(objective)
    }
}

/// Loss and gradient weight for a single-sequence objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqLoss {
    pub loss: f64,
    pub chosen_weight: f64,
}

/// Loss and per-sequence gradient weights for a pairwise objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    pub chosen_weight: f64,
    pub rejected_weight: f64,
}

/// Plain SFT: negative total log-prob of the chosen response.
pub fn sft_loss(chosen: &SeqLogProb) -> SeqLoss {
    SeqLoss {
        loss: -chosen.total,
        chosen_weight: -1.0,
    }
}

/// Length-normalized SFT variant; the positive term of `redi` on its own.
pub fn sft_norm_loss(chosen: &SeqLogProb) -> SeqLoss {
    SeqLoss {
        loss: -chosen.normalized,
        chosen_weight: -1.0 / chosen.length as f64,
    }
}

fn ref_totals(pair: &PairLogProbs) -> Result<(f64, f64)> {
    match (pair.chosen_ref, pair.rejected_ref) {
        (Some(c), Some(r)) => Ok((c, r)),
        _ => Err(Error::Input(
            "dpo requires reference log-probs on both sides of the pair".into(),
        )),
    }
}

/// Direct preference optimization against a frozen reference policy.
pub fn dpo_loss(pair: &PairLogProbs, beta: f64) -> Result<PairLoss> {
    Objective::Dpo { beta }.validate()?;
    let (chosen_ref, rejected_ref) = ref_totals(pair)?;
    let z = (pair.chosen.total - chosen_ref) - (pair.rejected.total - rejected_ref);
    let s = sigmoid(-beta * z);
    Ok(PairLoss {
        loss: -log_sigmoid(beta * z),
        chosen_weight: -beta * s,
        rejected_weight: beta * s,
    })
}

/// Reference-free preference loss on length-normalized log-probs with a
/// margin.
pub fn simpo_loss(pair: &PairLogProbs, beta: f64, gamma: f64) -> Result<PairLoss> {
    Objective::Simpo { beta, gamma }.validate()?;
    let reward_gap = pair.chosen.normalized - pair.rejected.normalized;
    let s = sigmoid(gamma - beta * reward_gap);
    Ok(PairLoss {
        loss: -log_sigmoid(beta * reward_gap - gamma),
        chosen_weight: -beta * s / pair.chosen.length as f64,
        rejected_weight: beta * s / pair.rejected.length as f64,
    })
}

/// Two-sided loss that raises the chosen and suppresses the rejected
/// response with equal strength.
pub fn symm_loss(pair: &PairLogProbs) -> PairLoss {
    PairLoss {
        loss: -pair.chosen.normalized + pair.rejected.normalized,
        chosen_weight: -1.0 / pair.chosen.length as f64,
        rejected_weight: 1.0 / pair.rejected.length as f64,
    }
}

/// Asymmetric generalization of [`symm_loss`]: the rejected side is scaled
/// by `alpha`. `alpha = 1` recovers the symmetric loss exactly; `alpha = 0`
/// is length-normalized SFT on the chosen side.
pub fn redi_loss(pair: &PairLogProbs, alpha: f64) -> Result<PairLoss> {
    Objective::Redi { alpha }.validate()?;
    Ok(PairLoss {
        loss: -pair.chosen.normalized + alpha * pair.rejected.normalized,
        chosen_weight: -1.0 / pair.chosen.length as f64,
        rejected_weight: alpha / pair.rejected.length as f64,
    })
}

/// Dispatch over the pairwise objectives.
pub fn pair_loss(objective: &Objective, pair: &PairLogProbs) -> Result<PairLoss> {
    match *objective {
        Objective::Sft { .. } => Err(Error::Contract(
            "sft is not a pairwise objective; score the chosen sequence directly".into(),
        )),
        Objective::Dpo { beta } => dpo_loss(pair, beta),
        Objective::Simpo { beta, gamma } => simpo_loss(pair, beta, gamma),
        Objective::Symmetric => Ok(symm_loss(pair)),
        Objective::Redi { alpha } => redi_loss(pair, alpha),
    }
}

/// Mean loss over a batch, with each pair's weights pre-divided by the
/// batch size so that accumulating them reproduces the mean-loss gradient.
pub struct BatchLoss {
    pub loss: f64,
    /// `(chosen_weight, rejected_weight)` per pair, scaled by `1/batch`.
    pub pair_weights: Vec<(f64, f64)>,
}

pub fn batch_pair_loss(objective: &Objective, pairs: &[PairLogProbs]) -> Result<BatchLoss> {
    if pairs.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    let mut pair_weights = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let pl = pair_loss(objective, pair)?;
        loss += pl.loss;
        pair_weights.push((pl.chosen_weight * scale, pl.rejected_weight * scale));
    }
    Ok(BatchLoss {
        loss: loss * scale,
        pair_weights,
    })
}

/// Norm of the difference between SimPO's gradient weights scaled by its
/// matched step size `c1/beta` and the symmetric loss's weights scaled by
/// `c1 * sigmoid(gamma)`, measured over the full per-token weight vector.
///
/// As `beta` shrinks toward zero this gap vanishes linearly in `beta`,
/// which is the precise sense in which small-`beta` SimPO collapses into
/// the symmetric loss.
pub fn beta_limit_gap(pair: &PairLogProbs, beta: f64, gamma: f64, c1: f64) -> Result<f64> {
    if !(c1.is_finite() && c1 > 0.0) {
        return Err(Error::Config(format!("c1 must be > 0, got {c1}")));
    }
    let simpo = simpo_loss(pair, beta, gamma)?;
    let symm = symm_loss(pair);
    let eta_simpo = c1 / beta;
    let eta_symm = c1 * sigmoid(gamma);
    let d_chosen = eta_simpo * simpo.chosen_weight - eta_symm * symm.chosen_weight;
    let d_rejected = eta_simpo * simpo.rejected_weight - eta_symm * symm.rejected_weight;
    let n_c = pair.chosen.length as f64;
    let n_r = pair.rejected.length as f64;
    Ok((n_c * d_chosen * d_chosen + n_r * d_rejected * d_rejected).sqrt())
}
