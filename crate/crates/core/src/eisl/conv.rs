use rand::Rng;

use super::{check_tokens, EislConfig, EislError, LogProbMatrix};
use crate::numerics::{Tape, Tensor, Var};
use crate::Token;

/// Uniform draws are clipped to `(U_CLIP, 1 − U_CLIP)` so the noise is finite.
const U_CLIP: f64 = 1e-12;

/// Number of (possibly overlapping) occurrences of `gram` in `seq`.
pub fn count_occurrences(gram: &[Token], seq: &[Token]) -> usize {
    if gram.is_empty() || gram.len() > seq.len() {
        return 0;
    }
    seq.windows(gram.len()).filter(|w| *w == gram).count()
}

/// The `(T*−n+1) × (T−n+1)` matrix of gram log-probabilities:
/// `G[i][i'] = Σ_{j<n} log P[reference[i+j]][i'+j]`.
pub fn conv_ngram_logprob(
    tape: &mut Tape,
    logp: &LogProbMatrix,
    reference: &[Token],
    n: usize,
) -> Result<Var, EislError> {
    let (t_len, r_len, vocab) = (logp.len(), reference.len(), logp.vocab_size());
    if n == 0 || n > t_len || n > r_len {
        return Err(EislError::OrderTooLarge {
            n,
            candidate_len: t_len,
            reference_len: r_len,
        });
    }
    check_tokens(reference, vocab)?;
    let rows = r_len - n + 1;
    let cols = t_len - n + 1;
    let flat = tape.reshape(logp.node(), t_len * vocab, 1)?;
    let mut acc: Option<Var> = None;
    for j in 0..n {
        let mut idx = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let tok = reference[i + j];
            for ip in 0..cols {
                idx.push((ip + j) * vocab + tok);
            }
        }
        let part = tape.gather_rows(flat, idx)?;
        acc = Some(match acc {
            None => part,
            Some(a) => tape.add(a, part)?,
        });
    }
    let g = acc.expect("n >= 1");
    Ok(tape.reshape(g, rows, cols)?)
}

/// A standard Gumbel(0, 1) draw.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen::<f64>().clamp(U_CLIP, 1.0 - U_CLIP);
    -(-u.ln()).ln()
}

/// Row-wise position weights `softmax((G + noise) / τ)` on the tape.
///
/// Noise is drawn row-major, one value per entry, unless the config is in
/// deterministic mode. With `gradient_through_q` off the weights are
/// computed from a detached copy of `g`.
pub fn position_weights<R: Rng + ?Sized>(
    tape: &mut Tape,
    g: Var,
    config: &EislConfig,
    rng: &mut R,
) -> Result<Var, EislError> {
    let (rows, cols) = tape.shape(g);
    let mut scores = if config.gradient_through_q { g } else { tape.detach(g) };
    if !config.deterministic_mode {
        let noise: Vec<f64> = (0..rows * cols).map(|_| gumbel(rng)).collect();
        let noise = tape.constant(Tensor::new(rows, cols, noise)?);
        scores = tape.add(scores, noise)?;
    }
    let scaled = tape.scale(scores, 1.0 / config.gumbel_temperature);
    let log_q = tape.log_softmax(scaled)?;
    Ok(tape.exp(log_q))
}

/// Position weights for a single gram row, without recording gradients.
pub fn position_select<R: Rng + ?Sized>(
    log_g_row: &[f64],
    config: &EislConfig,
    rng: &mut R,
) -> Result<Vec<f64>, EislError> {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::row(log_g_row.to_vec())?);
    let q = position_weights(&mut tape, g, config, rng)?;
    Ok(tape.value(q).data().to_vec())
}

/// `−Σ q[i']·G_row[i']`.
pub fn eisl_gram_loss(g_row: &[f64], q: &[f64]) -> Result<f64, EislError> {
    if g_row.len() != q.len() {
        return Err(EislError::LengthMismatch {
            expected: g_row.len(),
            got: q.len(),
        });
    }
    Ok(-g_row.iter().zip(q).map(|(g, w)| g * w).sum::<f64>())
}

/// Weighted sum over configured orders of the gram-averaged, position-weighted
/// n-gram loss.
pub fn eisl_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    logp: &LogProbMatrix,
    reference: &[Token],
    config: &EislConfig,
    rng: &mut R,
) -> Result<Var, EislError> {
    combine_orders(tape, logp, reference, config, |tape, _, g| position_weights(tape, g, config, rng))
}

/// The position weights [`eisl_loss`] would use, one `(T*−n+1) × (T−n+1)`
/// matrix per configured order.
pub fn eisl_weights<R: Rng + ?Sized>(
    tape: &mut Tape,
    logp: &LogProbMatrix,
    reference: &[Token],
    config: &EislConfig,
    rng: &mut R,
) -> Result<Vec<Tensor>, EislError> {
    check_orders(logp, reference, config)?;
    let mut out = Vec::with_capacity(config.gram_orders.len());
    for &n in &config.gram_orders {
        let g = conv_ngram_logprob(tape, logp, reference, n)?;
        let q = position_weights(tape, g, config, rng)?;
        out.push(tape.value(q).clone());
    }
    Ok(out)
}

/// [`eisl_loss`] with the position weights supplied as constants.
pub fn eisl_loss_with_weights(
    tape: &mut Tape,
    logp: &LogProbMatrix,
    reference: &[Token],
    config: &EislConfig,
    weights: &[Tensor],
) -> Result<Var, EislError> {
    if weights.len() != config.gram_orders.len() {
        return Err(EislError::LengthMismatch {
            expected: config.gram_orders.len(),
            got: weights.len(),
        });
    }
    combine_orders(tape, logp, reference, config, |tape, k, _| Ok(tape.constant(weights[k].clone())))
}

fn check_orders(logp: &LogProbMatrix, reference: &[Token], config: &EislConfig) -> Result<(), EislError> {
    config.validate()?;
    for &n in &config.gram_orders {
        if n > logp.len() || n > reference.len() {
            return Err(EislError::OrderTooLarge {
                n,
                candidate_len: logp.len(),
                reference_len: reference.len(),
            });
        }
    }
    Ok(())
}

fn combine_orders<W>(
    tape: &mut Tape,
    logp: &LogProbMatrix,
    reference: &[Token],
    config: &EislConfig,
    mut weights: W,
) -> Result<Var, EislError>
where
    W: FnMut(&mut Tape, usize, Var) -> Result<Var, EislError>,
{
    check_orders(logp, reference, config)?;
    let mut total: Option<Var> = None;
    for (k, (&n, &w)) in config.gram_orders.iter().zip(&config.gram_weights).enumerate() {
        let g = conv_ngram_logprob(tape, logp, reference, n)?;
        let q = weights(tape, k, g)?;
        let weighted = tape.mul(q, g)?;
        let s = tape.sum(weighted);
        let grams = (reference.len() - n + 1) as f64;
        let term = tape.scale(s, -w / grams);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.expect("validated config has at least one order"))
}

/// Teacher-forced cross-entropy `−Σ_t log P[reference[t]][t]`.
pub fn ce_loss(tape: &mut Tape, logp: &LogProbMatrix, reference: &[Token]) -> Result<Var, EislError> {
    if logp.len() != reference.len() {
        return Err(EislError::LengthMismatch {
            expected: logp.len(),
            got: reference.len(),
        });
    }
    let vocab = logp.vocab_size();
    check_tokens(reference, vocab)?;
    let flat = tape.reshape(logp.node(), logp.len() * vocab, 1)?;
    let idx = reference.iter().enumerate().map(|(t, &tok)| t * vocab + tok).collect();
    let picked = tape.gather_rows(flat, idx)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, finite_diff_check_against};
    use proptest::prelude::{any, prop, prop_assert, prop_assume, proptest, ProptestConfig};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN4: f64 = std::f64::consts::LN_2 * 2.0;

    fn random_logp(tape: &mut Tape, len: usize, vocab: usize, rng: &mut ChaCha8Rng) -> LogProbMatrix {
        let logits = tape.var(Tensor::uniform(len, vocab, -2.0, 2.0, rng));
        LogProbMatrix::from_logits(tape, logits).unwrap()
    }

    /// Naive double loop over (gram, position).
    fn naive_conv(tape: &Tape, logp: &LogProbMatrix, reference: &[Token], n: usize) -> Vec<Vec<f64>> {
        (0..=reference.len() - n)
            .map(|i| {
                (0..=logp.len() - n)
                    .map(|ip| (0..n).map(|j| logp.log_prob(tape, reference[i + j], ip + j)).sum())
                    .collect()
            })
            .collect()
    }

    fn three_column_example(tape: &mut Tape) -> LogProbMatrix {
        LogProbMatrix::from_probs(tape, &[vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.2, 0.2, 0.6]]).unwrap()
    }

    #[test]
    fn occurrence_counts() {
        assert_eq!(count_occurrences(&[0, 1], &[0, 1, 0, 1, 0]), 2);
        assert_eq!(count_occurrences(&[0, 0], &[0, 0, 0]), 2);
        assert_eq!(count_occurrences(&[0, 0, 0], &[0, 0]), 0);
    }

    #[test]
    fn conv_uniform_entries() {
        let mut tape = Tape::new();
        let lp = LogProbMatrix::uniform(&mut tape, 5, 4).unwrap();
        let g = conv_ngram_logprob(&mut tape, &lp, &[0, 3, 2, 1, 1], 2).unwrap();
        assert_eq!(tape.shape(g), (4, 4));
        for &v in tape.value(g).data() {
            assert!((v + 2.0 * LN4).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_hand_example() {
        let mut tape = Tape::new();
        let lp = three_column_example(&mut tape);
        let g = conv_ngram_logprob(&mut tape, &lp, &[0, 1], 2).unwrap();
        let row = tape.value(g).data();
        assert!((row[0] - 0.56f64.ln()).abs() < 1e-12);
        assert!((row[1] - 0.02f64.ln()).abs() < 1e-12);
        assert!((row[0] + 0.579818).abs() < 1e-6 && (row[1] + 3.912023).abs() < 1e-6);
    }

    #[test]
    fn conv_perfect_match_diagonal() {
        let mut tape = Tape::new();
        let reference = [2, 0, 1, 3];
        let lp = LogProbMatrix::one_hot(&mut tape, &reference, 4).unwrap();
        let g = conv_ngram_logprob(&mut tape, &lp, &reference, 2).unwrap();
        for i in 0..3 {
            assert!(tape.value(g).get(i, i).abs() < 1e-11);
        }
    }

    #[test]
    fn conv_rectangular_and_errors() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lp = random_logp(&mut tape, 4, 5, &mut rng);
        let reference = [1, 2, 3, 4, 0, 1];
        let g = conv_ngram_logprob(&mut tape, &lp, &reference, 3).unwrap();
        assert_eq!(tape.shape(g), (4, 2));
        let naive = naive_conv(&tape, &lp, &reference, 3);
        for (i, row) in naive.iter().enumerate() {
            for (ip, v) in row.iter().enumerate() {
                assert!((tape.value(g).get(i, ip) - v).abs() <= 1e-12);
            }
        }
        assert!(matches!(
            conv_ngram_logprob(&mut tape, &lp, &reference, 5),
            Err(EislError::OrderTooLarge {
                n: 5,
                candidate_len: 4,
                reference_len: 6
            })
        ));
        assert!(matches!(
            conv_ngram_logprob(&mut tape, &lp, &[0, 9], 1),
            Err(EislError::TokenOutOfRange { token: 9, .. })
        ));
    }

    #[test]
    fn position_select_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noisy = EislConfig::default();
        assert_eq!(position_select(&[-3.0], &noisy, &mut rng).unwrap(), vec![1.0]);
        let det = EislConfig::default().deterministic();
        let q = position_select(&[0.5f64.ln(), 0.5f64.ln()], &det, &mut rng).unwrap();
        assert!((q[0] - 0.5).abs() < 1e-15 && (q[1] - 0.5).abs() < 1e-15);
        let q = position_select(&[0.56f64.ln(), 0.02f64.ln()], &det, &mut rng).unwrap();
        assert!((q[0] - 0.56 / 0.58).abs() < 1e-12);
        assert!((q[0] - 0.965517).abs() < 1e-6 && (q[1] - 0.034483).abs() < 1e-6);
    }

    #[test]
    fn gram_loss_examples() {
        let uniform = [-2.0 * LN4; 4];
        assert!((eisl_gram_loss(&uniform, &[0.25; 4]).unwrap() - 2.772589).abs() < 1e-6);
        assert_eq!(eisl_gram_loss(&[0.0, -7.0], &[1.0, 0.0]).unwrap(), 0.0);
        // q = [28, 1] / 29 exactly, so the loss is (28·ln(1/0.56) + ln(1/0.02)) / 29.
        let v = eisl_gram_loss(&[0.56f64.ln(), 0.02f64.ln()], &[28.0 / 29.0, 1.0 / 29.0]).unwrap();
        let hand = (28.0 * 0.579818 + 3.912023) / 29.0;
        assert!((v - hand).abs() < 1e-6);
        assert!((v - 0.694722).abs() < 1e-6);
        assert!(eisl_gram_loss(&[0.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn uniform_noisy_target_value() {
        let mut tape = Tape::new();
        let lp = LogProbMatrix::uniform(&mut tape, 6, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let loss = eisl_loss(&mut tape, &lp, &[0, 1, 2, 3, 0, 1], &EislConfig::noisy_target(), &mut rng).unwrap();
        assert!((tape.scalar(loss) - 1.2 * LN4).abs() < 1e-12);
        assert!((tape.scalar(loss) - 1.663553).abs() < 1e-6);
    }

    #[test]
    fn full_order_is_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let lp = random_logp(&mut tape, 5, 7, &mut rng);
        let reference = [3, 1, 6, 0, 3];
        let e = eisl_loss(&mut tape, &lp, &reference, &EislConfig::single(5), &mut rng).unwrap();
        let c = ce_loss(&mut tape, &lp, &reference).unwrap();
        assert!((tape.scalar(e) - tape.scalar(c)).abs() <= 1e-12);
    }

    #[test]
    fn ce_examples() {
        let mut tape = Tape::new();
        let reference = [1, 0, 3, 3, 2];
        let lp = LogProbMatrix::one_hot(&mut tape, &reference, 4).unwrap();
        let c = ce_loss(&mut tape, &lp, &reference).unwrap();
        assert!(tape.scalar(c).abs() < 1e-10);
        let lp = LogProbMatrix::uniform(&mut tape, 5, 4).unwrap();
        let c = ce_loss(&mut tape, &lp, &reference).unwrap();
        assert!((tape.scalar(c) - 5.0 * LN4).abs() < 1e-12);
        assert!(matches!(
            ce_loss(&mut tape, &lp, &[1, 2]),
            Err(EislError::LengthMismatch { expected: 5, got: 2 })
        ));
    }

    #[test]
    fn order_errors_name_the_order() {
        let mut tape = Tape::new();
        let lp = LogProbMatrix::uniform(&mut tape, 3, 4).unwrap();
        let err = eisl_loss(&mut tape, &lp, &[0, 1, 2], &EislConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(EislError::OrderTooLarge { n: 4, .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Tensor::uniform(4, 5, -1.5, 1.5, &mut rng);
        let reference = [0, 4, 2, 2];
        for through_q in [true, false] {
            let config = EislConfig {
                gram_orders: vec![1, 2, 3],
                gram_weights: vec![0.5, 0.3, 0.2],
                gradient_through_q: through_q,
                ..EislConfig::default()
            }
            .deterministic();
            let loss = |tape: &mut Tape, x: Var| -> Result<Var, EislError> {
                let lp = LogProbMatrix::from_logits(tape, x)?;
                eisl_loss(tape, &lp, &reference, &config, &mut ChaCha8Rng::seed_from_u64(0))
            };
            let err = if through_q {
                finite_diff_check(loss, &logits, 1e-5).unwrap()
            } else {
                // Backward treats q as a constant, so differentiate numerically with q frozen.
                let mut tape = Tape::new();
                let x = tape.var(logits.clone());
                let lp = LogProbMatrix::from_logits(&mut tape, x).unwrap();
                let frozen = eisl_weights(&mut tape, &lp, &reference, &config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
                let surrogate = |tape: &mut Tape, x: Var| -> Result<Var, EislError> {
                    let lp = LogProbMatrix::from_logits(tape, x)?;
                    eisl_loss_with_weights(tape, &lp, &reference, &config, &frozen)
                };
                finite_diff_check_against(loss, surrogate, &logits, 1e-5).unwrap()
            };
            assert!(err <= 1e-4, "through_q={through_q}: {err}");
        }
    }

    #[test]
    fn detached_weights_change_gradient_not_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::uniform(5, 4, -1.0, 1.0, &mut rng);
        let reference = [0, 1, 2, 3, 0];
        let run = |through_q: bool| {
            let mut tape = Tape::new();
            let x = tape.var(logits.clone());
            let lp = LogProbMatrix::from_logits(&mut tape, x).unwrap();
            let config = EislConfig {
                gradient_through_q: through_q,
                ..EislConfig::single(2)
            };
            let loss = eisl_loss(&mut tape, &lp, &reference, &config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let g = tape.backward(loss).unwrap().get(x).unwrap().clone();
            (tape.scalar(loss), g)
        };
        let (a, ga) = run(true);
        let (b, gb) = run(false);
        assert_eq!(a, b);
        assert_ne!(ga, gb);
    }

    #[test]
    fn temperature_limit_picks_max() {
        let row = [-1.2, -0.4, -2.5, -0.9];
        let config = EislConfig {
            gumbel_temperature: 1e-4,
            ..EislConfig::single(1)
        }
        .deterministic();
        let q = position_select(&row, &config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((q[1] - 1.0).abs() < 1e-3);
        assert!((eisl_gram_loss(&row, &q).unwrap() - 0.4).abs() < 1e-3);
    }

    #[test]
    fn gumbel_noise_is_finite_and_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(6);
        let mut b = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let x = gumbel(&mut a);
            assert!(x.is_finite());
            assert_eq!(x, gumbel(&mut b));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn conv_matches_naive(seed in any::<u64>(), len in 1usize..8, rlen in 1usize..8, vocab in 2usize..6, n in 1usize..5) {
            prop_assume!(n <= len && n <= rlen);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let lp = random_logp(&mut tape, len, vocab, &mut rng);
            let reference: Vec<Token> = (0..rlen).map(|_| rng.gen_range(0..vocab)).collect();
            let g = conv_ngram_logprob(&mut tape, &lp, &reference, n).unwrap();
            let naive = naive_conv(&tape, &lp, &reference, n);
            for (i, row) in naive.iter().enumerate() {
                for (ip, v) in row.iter().enumerate() {
                    prop_assert!((tape.value(g).get(i, ip) - v).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn loss_is_nonnegative(seed in any::<u64>(), len in 4usize..9, vocab in 2usize..7, deterministic in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let lp = random_logp(&mut tape, len, vocab, &mut rng);
            let reference: Vec<Token> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
            let config = EislConfig {
                deterministic_mode: deterministic,
                ..EislConfig::default()
            };
            let loss = eisl_loss(&mut tape, &lp, &reference, &config, &mut rng).unwrap();
            prop_assert!(tape.scalar(loss) >= 0.0);
        }

        #[test]
        fn unigram_loss_ignores_reference_order(seed in any::<u64>(), len in 1usize..10, vocab in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let lp = random_logp(&mut tape, len, vocab, &mut rng);
            let mut reference: Vec<Token> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
            let config = EislConfig::single(1).deterministic();
            let base = eisl_loss(&mut tape, &lp, &reference, &config, &mut rng).unwrap();
            let base = tape.scalar(base);
            reference.shuffle(&mut rng);
            let shuffled = eisl_loss(&mut tape, &lp, &reference, &config, &mut rng).unwrap();
            prop_assert!((tape.scalar(shuffled) - base).abs() <= 1e-12);
        }

        #[test]
        fn position_weights_are_a_distribution(seed in any::<u64>(), row in prop::collection::vec(-30.0f64..0.0, 1..12), tau in 0.05f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let config = EislConfig { gumbel_temperature: tau, ..EislConfig::default() };
            let q = position_select(&row, &config, &mut rng).unwrap();
            prop_assert!(q.iter().all(|&w| w >= 0.0));
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
