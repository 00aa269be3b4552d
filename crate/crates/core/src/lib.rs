//! Desk-scale testbed for aligning autoregressive sequence models from
//! demonstration data alone.
//!
//! Everything operates on small, fully enumerable instances: a vocabulary of
//! `V` tokens, completions of fixed horizon `H`, and policies stored as exact
//! sequence-level probability tables over all `V^H` completions. At this scale
//! every expectation, partition function, KL divergence, and optimal policy is
//! computed exactly, which turns the usual large-model training claims into
//! checkable identities.
//!
//! Module map:
//! - [`seqcore`]: token sequences, prompt sets, exact sequence policies,
//!   bounded reward models, and the synthetic instances tying them together.
//! - [`objectives`]: SFT / Bradley-Terry / DPO / KL-regularized losses, the
//!   closed-form Gibbs policy, the single-level likelihood surrogate, and its
//!   exact gradient.
//! - [`irl`]: the alternating policy-alignment / reward-alignment loop that
//!   learns a reward model and a policy jointly from demonstrations.
//! - [`baselines`]: SFT (behavior cloning) and SPIN (iterative DPO on
//!   synthetic demo-vs-generation pairs).
//! - [`evalx`]: reward accuracy, ground-truth reward score, win rate,
//!   KL-to-expert, and the empirical concentration experiment.
//! - [`workbench`]: instance generation, dataset persistence, experiment
//!   configuration, metrics export, and verification runners.
//!
//! With the default `parallel` feature, data-parallel inner loops run on
//! rayon; without it they fall back to sequential iteration. Both paths
//! reduce in the same fixed order, so results are bit-identical across
//! feature choice and thread count.

// `!(x > 0.0)` validation guards are deliberate: they reject NaN along with
// the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod diagnostics;
mod error;
pub mod evalx;
pub mod irl;
pub mod objectives;
pub mod par;
pub mod seeding;
pub mod seqcore;
pub mod workbench;

pub use error::{CoreError, Result};
