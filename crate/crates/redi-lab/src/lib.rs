//! A desk-scale training laboratory for studying preference-refinement
//! objectives on a tiny autoregressive policy.
//!
//! The crate covers the full experimental loop:
//!
//! 1. [`task`] generates modular-arithmetic chain problems and simulates a
//!    noisy teacher that produces correct and incorrect solution traces.
//! 2. [`corpus`] verifies traces, curates them into an SFT dataset and a
//!    preference dataset (chosen/rejected pairs), and persists both as JSONL.
//! 3. [`policy`] is a small windowed neural language model over the task
//!    vocabulary with exact analytic gradients.
//! 4. [`objectives`] implements the training losses (SFT, DPO, SimPO, a
//!    symmetric two-sided loss, and its asymmetric REDI generalization) as
//!    pure functions of sequence log-probabilities.
//! 5. [`optim`] provides AdamW, a trapezoidal learning-rate schedule, and a
//!    convergence probe over gradient-norm history.
//! 6. [`trainer`] runs the two training stages, streams telemetry, and
//!    detects training collapse.
//! 7. [`evalkit`] samples the policy on held-out problems and scores pass@k.
//! 8. [`cli`] exposes everything as a command-line pipeline with canned
//!    experiment presets.
//!
//! Everything is deterministic: every source of randomness is a ChaCha
//! stream derived from an explicit `u64` seed, and all training math is
//! `f64`, so reruns of the same configuration are byte-identical.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod objectives;
pub mod optim;
pub mod policy;
pub mod task;
pub mod trainer;
pub mod vocab;

mod fsio;
mod seeding;

pub use error::{Error, Result};
pub use vocab::Token;
