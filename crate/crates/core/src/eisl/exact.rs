//! Exact-expectation quantities for tiny models: expected n-gram counts, the
//! Jensen upper-bound term, and the exact autoregressive gram probabilities
//! that the convolution approximates.

use rand::Rng;

use super::{check_tokens, conv_ngram_logprob, count_occurrences, EislError};
use crate::models::{enumerate_sequence_probs, ArModel, ArVars, Decode, Model, ModelError, Vocab, ENUMERATION_LIMIT};
use crate::numerics::{logsumexp, Tape, Tensor, Var};
use crate::Token;

/// `Σ_{i'} Π_j p_{i'+j}(gram[j])` for independent positions; `log_probs` is `T × V`.
pub fn expected_count_factorized(log_probs: &Tensor, gram: &[Token]) -> f64 {
    let len = log_probs.rows();
    let n = gram.len();
    if n == 0 || n > len {
        return 0.0;
    }
    (0..=len - n)
        .map(|ip| gram.iter().enumerate().map(|(j, &tok)| log_probs.get(ip + j, tok)).sum::<f64>().exp())
        .sum()
}

/// `Σ_y p(y)·C(gram, y)` over an explicit distribution.
pub fn expected_count_enumerated(dist: &[(Vec<Token>, f64)], gram: &[Token]) -> f64 {
    dist.iter().map(|(y, p)| p * count_occurrences(gram, y) as f64).sum()
}

/// Expected number of occurrences of `gram` in a length-`len` output.
///
/// Closed form for the non-autoregressive model, full enumeration for the
/// autoregressive one.
pub fn expected_ngram_count(model: &Model, source: &[Token], gram: &[Token], len: usize) -> Result<f64, EislError> {
    check_tokens(gram, model.dims().vocab)?;
    match model {
        Model::Na(m) => {
            let mut tape = Tape::new();
            let lp = m.forward(&mut tape, source, len)?;
            Ok(expected_count_factorized(tape.value(lp.node()), gram))
        }
        Model::Ar(m) => {
            let dist = enumerate_sequence_probs(m, source, len)?;
            Ok(expected_count_enumerated(&dist, gram))
        }
    }
}

/// The exact-expectation EISL term for one reference gram:
/// `(1/(T−n+1)) Σ_{i'} E_{y<i'}[−log p(y_{i':i'+n} = gram | y<i')]`.
///
/// By Jensen's inequality it is at least `−log` of the expected count.
pub fn exact_bound_term(model: &Model, source: &[Token], gram: &[Token], len: usize) -> Result<f64, EislError> {
    let n = gram.len();
    if n == 0 || n > len {
        return Err(EislError::OrderTooLarge {
            n,
            candidate_len: len,
            reference_len: n,
        });
    }
    check_tokens(gram, model.dims().vocab)?;
    let positions = len - n + 1;
    let total = match model {
        Model::Na(m) => {
            let mut tape = Tape::new();
            let lp = m.forward(&mut tape, source, len)?;
            (0..positions)
                .map(|ip| -gram.iter().enumerate().map(|(j, &tok)| lp.log_prob(&tape, tok, ip + j)).sum::<f64>())
                .sum::<f64>()
        }
        Model::Ar(m) => {
            let vocab = m.dims.vocab;
            let fits = u32::try_from(len)
                .ok()
                .and_then(|l| vocab.checked_pow(l))
                .is_some_and(|c| c <= ENUMERATION_LIMIT);
            if !fits {
                return Err(ModelError::EnumerationTooLarge { vocab, len }.into());
            }
            let mut tape = Tape::new();
            let vars = m.bind(&mut tape);
            let context = vars.context(&mut tape, source, len)?;
            let h0 = vars.initial_hidden(&mut tape);
            let mut walk = PrefixWalk {
                vars: &vars,
                tape: &mut tape,
                context,
                gram,
                positions,
                total: 0.0,
            };
            walk.visit(0, 0.0, h0, Vocab::BOS)?;
            walk.total
        }
    };
    Ok(total / positions as f64)
}

struct PrefixWalk<'a> {
    vars: &'a ArVars,
    tape: &'a mut Tape,
    context: Var,
    gram: &'a [Token],
    positions: usize,
    total: f64,
}

impl PrefixWalk<'_> {
    /// `depth` tokens have been fed; `hidden` is the state after them.
    fn visit(&mut self, depth: usize, log_prefix: f64, hidden: Var, input: Token) -> Result<(), EislError> {
        let p_prefix = log_prefix.exp();
        if p_prefix > 0.0 {
            let mut h = hidden;
            let mut inp = input;
            let mut log_gram = 0.0;
            for (j, &tok) in self.gram.iter().enumerate() {
                let (h_next, lp) = self.vars.step(self.tape, self.context, depth + j, h, inp)?;
                log_gram += self.tape.value(lp).data()[tok];
                h = h_next;
                inp = tok;
            }
            self.total += p_prefix * -log_gram;
        }
        if depth + 1 < self.positions {
            let (h, lp) = self.vars.step(self.tape, self.context, depth, hidden, input)?;
            let row = self.tape.value(lp).data().to_vec();
            for (tok, l) in row.into_iter().enumerate() {
                self.visit(depth + 1, log_prefix + l, h, tok)?;
            }
        }
        Ok(())
    }
}

/// How per-position gram log-probabilities are reduced to one gram loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Aggregation {
    /// Plain average over candidate positions.
    Uniform,
    /// Weights `softmax(G_row / τ)` with no noise.
    PositionSelect { temperature: f64 },
}

impl Aggregation {
    fn reduce(self, row: &[f64]) -> f64 {
        match self {
            Aggregation::Uniform => -row.iter().sum::<f64>() / row.len() as f64,
            Aggregation::PositionSelect { temperature } => {
                let scaled: Vec<f64> = row.iter().map(|g| g / temperature).collect();
                let lse = logsumexp(&scaled);
                -row.iter().zip(&scaled).map(|(g, s)| (s - lse).exp() * g).sum::<f64>()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExactApprox {
    pub exact: f64,
    pub approx: f64,
}

/// Order-`n` EISL of an autoregressive model, computed both exactly and with
/// the convolution approximation, from one shared rollout of length
/// `reference.len()`.
///
/// The approximation reads `p(y*_{i+j} | y_{<i'+j})` off the rollout. The
/// exact value instead conditions on `y_{<i'}` followed by the reference gram
/// prefix `y*_{i:i+j}`, running the recurrence forward from the rollout state
/// at `i'`. Both are averaged over reference grams.
pub fn exact_and_approx_ar<R: Rng + ?Sized>(
    model: &ArModel,
    source: &[Token],
    reference: &[Token],
    n: usize,
    decode: Decode<'_>,
    aggregation: Aggregation,
    rng: &mut R,
) -> Result<ExactApprox, EislError> {
    let len = reference.len();
    if n == 0 || n > len {
        return Err(EislError::OrderTooLarge {
            n,
            candidate_len: len,
            reference_len: len,
        });
    }
    check_tokens(reference, model.dims.vocab)?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let rollout = vars.rollout(&mut tape, source, len, decode, rng)?;
    let g = conv_ngram_logprob(&mut tape, &rollout.logp, reference, n)?;
    let approx_g = tape.value(g).clone();
    let (rows, cols) = approx_g.shape();

    let mut exact_sum = 0.0;
    let mut approx_sum = 0.0;
    let mut exact_row = vec![0.0; cols];
    for i in 0..rows {
        for (ip, slot) in exact_row.iter_mut().enumerate() {
            let mut lg = rollout.logp.log_prob(&tape, reference[i], ip);
            let mut h = rollout.hidden[ip];
            let mut inp = reference[i];
            for j in 1..n {
                let (h_next, lp) = vars.step(&mut tape, rollout.context, ip + j, h, inp)?;
                lg += tape.value(lp).data()[reference[i + j]];
                h = h_next;
                inp = reference[i + j];
            }
            *slot = lg;
        }
        exact_sum += aggregation.reduce(&exact_row);
        approx_sum += aggregation.reduce(approx_g.row_slice(i));
    }
    Ok(ExactApprox {
        exact: exact_sum / rows as f64,
        approx: approx_sum / rows as f64,
    })
}

/// Exact order-`n` EISL with uniform position weights.
pub fn eisl_exact_ar<R: Rng + ?Sized>(
    model: &ArModel,
    source: &[Token],
    reference: &[Token],
    n: usize,
    decode: Decode<'_>,
    rng: &mut R,
) -> Result<f64, EislError> {
    Ok(exact_and_approx_ar(model, source, reference, n, decode, Aggregation::Uniform, rng)?.exact)
}
