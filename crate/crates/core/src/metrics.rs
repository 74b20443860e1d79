//! BLEU and the loss-sensitivity probe.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eisl::{ce_loss, eisl_loss, EislConfig, EislError, LogProbMatrix};
use crate::models::Vocab;
use crate::noise::{NoiseError, NoiseKind, NoiseSpec};
use crate::numerics::{Tape, Tensor};
use crate::Token;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("corpus BLEU needs at least one pair")]
    EmptyCorpus,
    #[error("invalid BLEU configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Eisl(#[from] EislError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_order: usize,
    pub weights: Vec<f64>,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self::uniform(4)
    }
}

impl BleuConfig {
    /// Orders `1..=max_order` with equal weights.
    pub fn uniform(max_order: usize) -> Self {
        Self {
            max_order,
            weights: vec![1.0 / max_order as f64; max_order],
        }
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |m: String| Err(MetricsError::InvalidConfig(m));
        if self.max_order == 0 {
            return bad("max_order must be at least 1".into());
        }
        if self.weights.len() != self.max_order {
            return bad(format!("{} weights for max_order {}", self.weights.len(), self.max_order));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("weights must be nonnegative".into());
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("weights sum to {total}"));
        }
        Ok(())
    }
}

fn ngram_counts(seq: &[Token], n: usize) -> HashMap<&[Token], usize> {
    let mut counts = HashMap::new();
    if n >= 1 && n <= seq.len() {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and the candidate n-gram total.
pub fn modified_precision(candidate: &[Token], reference: &[Token], n: usize) -> (usize, usize) {
    if n == 0 || candidate.len() < n {
        return (0, 0);
    }
    let reference_counts = ngram_counts(reference, n);
    let matched = ngram_counts(candidate, n)
        .into_iter()
        .map(|(gram, c)| c.min(reference_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len() - n + 1)
}

/// Sufficient statistics for BLEU; corpus BLEU sums them across pairs.
#[derive(Clone, Debug, Default, PartialEq)]
struct BleuStats {
    matched: Vec<usize>,
    total: Vec<usize>,
    candidate_len: usize,
    reference_len: usize,
}

impl BleuStats {
    fn new(max_order: usize) -> Self {
        Self {
            matched: vec![0; max_order],
            total: vec![0; max_order],
            ..Self::default()
        }
    }

    fn add(&mut self, candidate: &[Token], reference: &[Token]) {
        for n in 1..=self.matched.len() {
            let (m, t) = modified_precision(candidate, reference, n);
            self.matched[n - 1] += m;
            self.total[n - 1] += t;
        }
        self.candidate_len += candidate.len();
        self.reference_len += reference.len();
    }

    /// Orders with no candidate n-grams are left out and the remaining
    /// weights renormalised.
    fn score(&self, weights: &[f64]) -> f64 {
        if self.candidate_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut weight_sum = 0.0;
        for ((&m, &t), &w) in self.matched.iter().zip(&self.total).zip(weights) {
            if t == 0 || w == 0.0 {
                continue;
            }
            if m == 0 {
                return 0.0;
            }
            log_sum += w * (m as f64 / t as f64).ln();
            weight_sum += w;
        }
        if weight_sum == 0.0 {
            return 0.0;
        }
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
        bp * (log_sum / weight_sum).exp()
    }
}

/// Sentence BLEU on the 0–1 scale, without smoothing.
pub fn bleu(candidate: &[Token], reference: &[Token], config: &BleuConfig) -> f64 {
    let mut stats = BleuStats::new(config.max_order);
    stats.add(candidate, reference);
    stats.score(&config.weights)
}

/// Corpus BLEU: n-gram matches, totals and lengths are pooled before scoring.
pub fn corpus_bleu<'a, I>(pairs: I, config: &BleuConfig) -> Result<f64, MetricsError>
where
    I: IntoIterator<Item = (&'a [Token], &'a [Token])>,
{
    let mut stats = BleuStats::new(config.max_order);
    let mut any = false;
    for (candidate, reference) in pairs {
        stats.add(candidate, reference);
        any = true;
    }
    if !any {
        return Err(MetricsError::EmptyCorpus);
    }
    Ok(stats.score(&config.weights))
}

/// A loss evaluated by [`sensitivity_probe`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeLoss {
    pub name: String,
    pub loss: ProbeLossKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeLossKind {
    Ce,
    Eisl(EislConfig),
}

impl ProbeLoss {
    pub fn ce() -> Self {
        Self {
            name: "CE".into(),
            loss: ProbeLossKind::Ce,
        }
    }

    pub fn eisl(name: impl Into<String>, config: EislConfig) -> Self {
        Self {
            name: name.into(),
            loss: ProbeLossKind::Eisl(config),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub noise_kind: NoiseKind,
    pub level: f64,
    pub seed: u64,
    pub loss: String,
    pub value: f64,
}

/// Evaluates each loss on a fixed `T × V` log-probability matrix against
/// noisy copies of `clean_reference`.
///
/// Each noise point corrupts the reference with its own seed. The blank
/// token is [`Vocab::BLANK`]. Cross-entropy is undefined when noise changes
/// the reference length and is reported as NaN.
pub fn sensitivity_probe<R: Rng + ?Sized>(
    logp: &Tensor,
    clean_reference: &[Token],
    noise_grid: &[NoiseSpec],
    losses: &[ProbeLoss],
    rng: &mut R,
) -> Result<Vec<ProbeRow>, MetricsError> {
    let mut rows = Vec::with_capacity(noise_grid.len() * losses.len());
    for spec in noise_grid {
        let reference = spec.apply(clean_reference, Vocab::BLANK)?;
        for loss in losses {
            let mut tape = Tape::new();
            let lp = LogProbMatrix::from_log_probs(&mut tape, logp.clone())?;
            let value = match &loss.loss {
                ProbeLossKind::Ce if reference.len() != lp.len() => f64::NAN,
                ProbeLossKind::Ce => {
                    let v = ce_loss(&mut tape, &lp, &reference)?;
                    tape.scalar(v)
                }
                ProbeLossKind::Eisl(config) => {
                    let v = eisl_loss(&mut tape, &lp, &reference, config, rng)?;
                    tape.scalar(v)
                }
            };
            rows.push(ProbeRow {
                noise_kind: spec.kind,
                level: spec.intensity,
                seed: spec.seed,
                loss: loss.name.clone(),
                value,
            });
        }
    }
    Ok(rows)
}
