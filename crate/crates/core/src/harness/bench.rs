use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::eisl::{ce_loss, eisl_loss, EislConfig, LogProbMatrix};
use crate::numerics::{Tape, Tensor};
use crate::Token;

/// Vocabulary used for the random matrices.
pub const BENCH_VOCAB: usize = 16;

/// Each timed sample runs the loss this many times at least, so samples at
/// short lengths are not dominated by timer resolution.
const MIN_SAMPLE_SECS: f64 = 2e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub len: usize,
    pub eisl_mean_s: f64,
    pub eisl_median_s: f64,
    pub ce_mean_s: f64,
    pub ce_median_s: f64,
}

fn random_log_probs(len: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(len, BENCH_VOCAB, -3.0, 3.0, rng);
    for r in 0..len {
        let row = &mut t.data_mut()[r * BENCH_VOCAB..(r + 1) * BENCH_VOCAB];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    t
}

/// One forward and backward pass of the loss on a fresh tape.
fn run_once(values: &Tensor, reference: &[Token], eisl: Option<(&EislConfig, &mut ChaCha8Rng)>) -> f64 {
    let mut tape = Tape::new();
    let node = tape.var(values.clone());
    let logp = LogProbMatrix::from_normalized(node, BENCH_VOCAB, reference.len());
    let loss = match eisl {
        Some((cfg, rng)) => eisl_loss(&mut tape, &logp, reference, cfg, rng),
        None => ce_loss(&mut tape, &logp, reference),
    }
    .expect("valid benchmark inputs");
    let grads = tape.backward(loss).expect("finite benchmark loss");
    grads.get(node).map_or(0.0, |g| g.data()[0])
}

/// Seconds per call, timed over enough back-to-back calls to fill
/// `MIN_SAMPLE_SECS`. `calls` is calibrated on first use.
fn sample(calls: &mut usize, mut f: impl FnMut() -> f64) -> f64 {
    let mut sink = 0.0;
    loop {
        let start = Instant::now();
        for _ in 0..*calls {
            sink += f();
        }
        let secs = start.elapsed().as_secs_f64();
        std::hint::black_box(sink);
        if secs >= MIN_SAMPLE_SECS {
            return secs / *calls as f64;
        }
        *calls *= 2;
    }
}

fn mean_median(mut xs: Vec<f64>) -> (f64, f64) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.sort_by(f64::total_cmp);
    let k = xs.len() / 2;
    let median = if xs.len() % 2 == 1 { xs[k] } else { 0.5 * (xs[k - 1] + xs[k]) };
    (mean, median)
}

/// Wall time per forward-plus-backward call of single-order `n` EISL and
/// of CE on random `T × 16` log-probability matrices, for each `T` in
/// `t_grid`. Each row aggregates `repeats` timed samples; zero repeats
/// gives an empty table.
pub fn bench_loss(t_grid: &[usize], n: usize, repeats: usize, seed: u64) -> Result<Vec<BenchRow>, HarnessError> {
    if repeats == 0 {
        return Ok(Vec::new());
    }
    if n == 0 {
        return Err(HarnessError::InvalidSpec("gram order must be positive".into()));
    }
    if let Some(&t) = t_grid.iter().find(|&&t| t < n) {
        return Err(HarnessError::InvalidSpec(format!("length {t} is shorter than gram order {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EislConfig::single(n);
    let mut rows = Vec::with_capacity(t_grid.len());
    for &len in t_grid {
        let values = random_log_probs(len, &mut rng);
        let reference: Vec<Token> = (0..len).map(|_| rng.gen_range(0..BENCH_VOCAB)).collect();
        let mut gumbel_rng = ChaCha8Rng::seed_from_u64(seed ^ len as u64);
        let (mut eisl_calls, mut ce_calls) = (1, 1);
        let mut eisl_times = Vec::with_capacity(repeats);
        let mut ce_times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            eisl_times.push(sample(&mut eisl_calls, || {
                run_once(&values, &reference, Some((&cfg, &mut gumbel_rng)))
            }));
            ce_times.push(sample(&mut ce_calls, || run_once(&values, &reference, None)));
        }
        let (eisl_mean_s, eisl_median_s) = mean_median(eisl_times);
        let (ce_mean_s, ce_median_s) = mean_median(ce_times);
        rows.push(BenchRow {
            len,
            eisl_mean_s,
            eisl_median_s,
            ce_mean_s,
            ce_median_s,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_repeats_is_empty() {
        assert!(bench_loss(&[8, 16], 2, 0, 0).unwrap().is_empty());
    }

    #[test]
    fn rejects_short_lengths() {
        assert!(bench_loss(&[3, 8], 4, 1, 0).is_err());
    }

    #[test]
    fn one_row_per_length() {
        let rows = bench_loss(&[4, 8], 2, 3, 0).unwrap();
        assert_eq!(rows.iter().map(|r| r.len).collect::<Vec<_>>(), vec![4, 8]);
        assert!(rows.iter().all(|r| r.eisl_median_s > 0.0 && r.ce_median_s > 0.0));
    }

    #[test]
    fn random_rows_are_normalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_log_probs(5, &mut rng);
        for r in 0..5 {
            let mass: f64 = t.row_slice(r).iter().map(|v| v.exp()).sum();
            assert!((mass - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn median_of_even_count() {
        assert_eq!(mean_median(vec![4.0, 1.0, 3.0, 2.0]), (2.5, 2.5));
    }
}
