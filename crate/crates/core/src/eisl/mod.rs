//! Edit-invariant sequence loss.
//!
//! For every reference n-gram the loss scores all candidate positions at once:
//! `G[i][i'] = Σ_j log P[ref[i+j]][i'+j]` is the log-probability that the
//! candidate emits reference gram `i` starting at position `i'`. A softmax over
//! each row (optionally perturbed with Gumbel noise) picks which positions the
//! gram is matched against, and the per-order losses are averaged over grams
//! and mixed with fixed weights. With a single order equal to the reference
//! length the loss reduces to teacher-forced cross-entropy.

mod conv;
mod exact;

pub use conv::{
    ce_loss, conv_ngram_logprob, count_occurrences, eisl_gram_loss, eisl_loss, eisl_loss_with_weights, eisl_weights,
    gumbel, position_select, position_weights,
};
pub use exact::{
    eisl_exact_ar, exact_and_approx_ar, exact_bound_term, expected_count_enumerated, expected_count_factorized,
    expected_ngram_count, Aggregation, ExactApprox,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::ModelError;
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::Token;

/// Probabilities below this are clipped before taking logs in
/// [`LogProbMatrix::from_probs`], so one-hot inputs stay finite.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EislError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("gram order {n} exceeds the candidate length {candidate_len} or reference length {reference_len}")]
    OrderTooLarge {
        n: usize,
        candidate_len: usize,
        reference_len: usize,
    },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { token: Token, vocab: usize },
    #[error("row {position} is not a log-distribution: {reason}")]
    NotNormalized { position: usize, reason: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How the candidate distributions are produced for the loss.
///
/// Non-autoregressive models ignore this and always use their parallel
/// forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rollout {
    NonAutoregressive,
    #[default]
    ArGreedy,
    ArSample,
    ArTeacherForced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EislConfig {
    pub gram_orders: Vec<usize>,
    pub gram_weights: Vec<f64>,
    pub gumbel_temperature: f64,
    /// Drop the Gumbel noise: position weights become a plain tempered softmax.
    pub deterministic_mode: bool,
    /// Let gradients flow through the position weights.
    pub gradient_through_q: bool,
    /// Weight of the EISL term in `λ·EISL + (1−λ)·CE` during training.
    pub ce_mix: f64,
    pub rollout: Rollout,
}

impl Default for EislConfig {
    fn default() -> Self {
        Self {
            gram_orders: vec![2, 3, 4],
            gram_weights: vec![1.0 / 3.0; 3],
            gumbel_temperature: 1.0,
            deterministic_mode: false,
            gradient_through_q: true,
            ce_mix: 1.0,
            rollout: Rollout::ArGreedy,
        }
    }
}

impl EislConfig {
    /// Unigram and bigram orders weighted 0.8/0.2, for noisy targets.
    pub fn noisy_target() -> Self {
        Self {
            gram_orders: vec![1, 2],
            gram_weights: vec![0.8, 0.2],
            ..Self::default()
        }
    }

    /// A single order with weight 1.
    pub fn single(n: usize) -> Self {
        Self {
            gram_orders: vec![n],
            gram_weights: vec![1.0],
            ..Self::default()
        }
    }

    pub fn deterministic(mut self) -> Self {
        self.deterministic_mode = true;
        self
    }

    pub fn validate(&self) -> Result<(), EislError> {
        let bad = |msg: String| Err(EislError::InvalidConfig(msg));
        if self.gram_orders.is_empty() {
            return bad("at least one gram order is required".into());
        }
        if self.gram_orders.len() != self.gram_weights.len() {
            return bad(format!(
                "{} gram orders but {} weights",
                self.gram_orders.len(),
                self.gram_weights.len()
            ));
        }
        if self.gram_orders.contains(&0) {
            return bad("gram orders must be at least 1".into());
        }
        if self.gram_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("gram weights must be finite and nonnegative".into());
        }
        let total: f64 = self.gram_weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("gram weights sum to {total}, expected 1"));
        }
        if !(self.gumbel_temperature > 0.0 && self.gumbel_temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.gumbel_temperature));
        }
        if !(0.0..=1.0).contains(&self.ce_mix) {
            return bad(format!("ce_mix must lie in [0, 1], got {}", self.ce_mix));
        }
        Ok(())
    }
}

/// Per-position log-distributions over the vocabulary.
///
/// Stored position-major: row `t` of the underlying `T × V` tape node is the
/// log-distribution at output position `t`.
#[derive(Clone, Copy, Debug)]
pub struct LogProbMatrix {
    node: Var,
    vocab: usize,
    len: usize,
}

impl LogProbMatrix {
    /// Row-wise log-softmax of a `T × V` logit node.
    pub fn from_logits(tape: &mut Tape, logits: Var) -> Result<Self, NumericsError> {
        let (len, vocab) = tape.shape(logits);
        let node = tape.log_softmax(logits)?;
        Ok(Self { node, vocab, len })
    }

    /// Wraps a node already known to hold normalised rows.
    pub(crate) fn from_normalized(node: Var, vocab: usize, len: usize) -> Self {
        Self { node, vocab, len }
    }

    /// Records `values` (`T × V`) as a differentiable leaf after checking
    /// that every row is a log-distribution.
    pub fn from_log_probs(tape: &mut Tape, values: Tensor) -> Result<Self, EislError> {
        let (len, vocab) = values.shape();
        for t in 0..len {
            let row = values.row_slice(t);
            if let Some(&v) = row.iter().find(|v| !(**v <= 1e-12)) {
                return Err(EislError::NotNormalized {
                    position: t,
                    reason: format!("entry {v} is not a log-probability"),
                });
            }
            let mass: f64 = row.iter().map(|v| v.exp()).sum();
            if (mass - 1.0).abs() > 1e-9 {
                return Err(EislError::NotNormalized {
                    position: t,
                    reason: format!("probabilities sum to {mass}"),
                });
            }
        }
        let node = tape.var(values);
        Ok(Self { node, vocab, len })
    }

    /// Builds from per-position probability rows, clipping at [`PROB_FLOOR`].
    pub fn from_probs(tape: &mut Tape, rows: &[Vec<f64>]) -> Result<Self, EislError> {
        let logs: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|p| p.max(PROB_FLOOR).ln()).collect())
            .collect();
        Self::from_log_probs(tape, Tensor::from_rows(&logs)?)
    }

    /// Logits are all equal at every position.
    pub fn uniform(tape: &mut Tape, len: usize, vocab: usize) -> Result<Self, EislError> {
        Self::from_log_probs(tape, Tensor::filled(len, vocab, -(vocab as f64).ln()))
    }

    /// Probability 1 on `seq[t]` at every position `t` (clipped).
    pub fn one_hot(tape: &mut Tape, seq: &[Token], vocab: usize) -> Result<Self, EislError> {
        check_tokens(seq, vocab)?;
        let rows: Vec<Vec<f64>> = seq
            .iter()
            .map(|&tok| (0..vocab).map(|v| if v == tok { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::from_probs(tape, &rows)
    }

    pub fn node(&self) -> Var {
        self.node
    }

    /// Number of positions `T`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn position<'t>(&self, tape: &'t Tape, t: usize) -> &'t [f64] {
        tape.value(self.node).row_slice(t)
    }

    pub fn log_prob(&self, tape: &Tape, token: Token, t: usize) -> f64 {
        tape.value(self.node).get(t, token)
    }
}

pub(crate) fn check_tokens(seq: &[Token], vocab: usize) -> Result<(), EislError> {
    match seq.iter().find(|&&t| t >= vocab) {
        Some(&token) => Err(EislError::TokenOutOfRange { token, vocab }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_and_preset_validate() {
        EislConfig::default().validate().unwrap();
        EislConfig::noisy_target().validate().unwrap();
        EislConfig::single(5).validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cases = [
            EislConfig {
                gram_weights: vec![0.5, 0.5, 0.5],
                ..EislConfig::default()
            },
            EislConfig {
                gram_weights: vec![0.5, 0.5],
                ..EislConfig::default()
            },
            EislConfig {
                gumbel_temperature: 0.0,
                ..EislConfig::default()
            },
            EislConfig {
                ce_mix: 1.5,
                ..EislConfig::default()
            },
            EislConfig {
                gram_orders: vec![0],
                gram_weights: vec![1.0],
                ..EislConfig::default()
            },
            EislConfig {
                gram_orders: vec![1, 2],
                gram_weights: vec![1.2, -0.2],
                ..EislConfig::default()
            },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(EislError::InvalidConfig(_))), "{c:?}");
        }
    }

    #[test]
    fn config_json_defaults_missing_fields() {
        let c: EislConfig = serde_json::from_str(r#"{"gram_orders":[1,2],"gram_weights":[0.8,0.2]}"#).unwrap();
        assert_eq!(c, EislConfig::noisy_target());
        let c: EislConfig = serde_json::from_str(r#"{"rollout":"ar_sample"}"#).unwrap();
        assert_eq!(c.rollout, Rollout::ArSample);
    }

    #[test]
    fn log_prob_validation() {
        let mut tape = Tape::new();
        assert!(LogProbMatrix::from_probs(&mut tape, &[vec![0.5, 0.5], vec![0.9, 0.2]]).is_err());
        assert!(LogProbMatrix::from_log_probs(&mut tape, Tensor::row(vec![0.1, -3.0]).unwrap()).is_err());
        let lp = LogProbMatrix::from_probs(&mut tape, &[vec![0.25, 0.75]]).unwrap();
        assert_eq!((lp.len(), lp.vocab_size()), (1, 2));
        assert!((lp.log_prob(&tape, 1, 0) - 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn one_hot_is_finite() {
        let mut tape = Tape::new();
        let lp = LogProbMatrix::one_hot(&mut tape, &[0, 2, 1], 3).unwrap();
        assert_eq!(lp.log_prob(&tape, 2, 1), 0.0);
        assert_eq!(lp.log_prob(&tape, 0, 1), PROB_FLOOR.ln());
        assert!(LogProbMatrix::one_hot(&mut tape, &[3], 3).is_err());
    }
}
