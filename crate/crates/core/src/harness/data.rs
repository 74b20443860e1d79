use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::models::Vocab;
use crate::noise::NoiseSpec;
use crate::train::Example;
use crate::Token;

/// Mixed into the run seed for the noise generator, so clean data and noise
/// draws come from unrelated streams.
const NOISE_STREAM: u64 = 0x6e_6f_69_73_65;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            min_len: 5,
            max_len: 12,
            train_size: 2000,
            val_size: 200,
            test_size: 200,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidSpec(m));
        let vocab = Vocab::new(self.vocab_size).map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
        if vocab.content().len() < 8 {
            return bad(format!("need at least 8 content tokens, vocabulary {} has {}", self.vocab_size, vocab.content().len()));
        }
        if self.min_len < 3 || self.max_len > 32 || self.min_len > self.max_len {
            return bad(format!("lengths {}..={} must lie within 3..=32", self.min_len, self.max_len));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return bad("train and test sets must be nonempty".into());
        }
        Ok(())
    }
}

/// Position-wise bijective substitution of content tokens followed by
/// sequence reversal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubstitutionReversal {
    forward: Vec<Token>,
    inverse: Vec<Token>,
}

impl SubstitutionReversal {
    pub fn random<R: Rng + ?Sized>(vocab: Vocab, rng: &mut R) -> Self {
        let content: Vec<Token> = vocab.content().collect();
        let mut image = content.clone();
        image.shuffle(rng);
        let mut forward: Vec<Token> = (0..vocab.size()).collect();
        for (&from, &to) in content.iter().zip(&image) {
            forward[from] = to;
        }
        let mut inverse = forward.clone();
        for (from, &to) in forward.iter().enumerate() {
            inverse[to] = from;
        }
        Self { forward, inverse }
    }

    pub fn apply(&self, source: &[Token]) -> Vec<Token> {
        source.iter().rev().map(|&t| self.forward[t]).collect()
    }

    pub fn invert(&self, target: &[Token]) -> Vec<Token> {
        target.iter().rev().map(|&t| self.inverse[t]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    /// Training pairs with noisy targets.
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub task: SubstitutionReversal,
}

/// Samples the task and all three splits from `seed`, then corrupts the
/// training targets with `noise` using a separate generator.
///
/// Validation and test targets are always clean.
pub fn synth_dataset(spec: &TaskSpec, noise: &NoiseSpec, seed: u64) -> Result<Splits, HarnessError> {
    spec.validate()?;
    noise.validate()?;
    let vocab = Vocab::new(spec.vocab_size).expect("validated");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = SubstitutionReversal::random(vocab, &mut rng);
    let mut sample = |n: usize| -> Vec<Example> {
        (0..n)
            .map(|_| {
                let len = rng.gen_range(spec.min_len..=spec.max_len);
                let source: Vec<Token> = (0..len).map(|_| rng.gen_range(vocab.content())).collect();
                let target = task.apply(&source);
                Example { source, target }
            })
            .collect()
    };
    let mut train = sample(spec.train_size);
    let val = sample(spec.val_size);
    let test = sample(spec.test_size);

    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ NOISE_STREAM ^ noise.seed.rotate_left(32));
    for ex in &mut train {
        ex.target = noise.apply_with(&ex.target, Vocab::BLANK, &mut noise_rng)?;
    }
    assert!(
        val.iter().chain(&test).all(|ex| ex.target == task.apply(&ex.source)),
        "evaluation references must be clean"
    );
    Ok(Splits { train, val, test, task })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseKind;

    fn clean() -> NoiseSpec {
        NoiseSpec::new(NoiseKind::Synthetic, 0.0, 0)
    }

    #[test]
    fn level_zero_targets_are_clean() {
        let s = synth_dataset(&TaskSpec::default(), &clean(), 4).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2000, 200, 200));
        for ex in &s.train {
            assert_eq!(ex.target, s.task.apply(&ex.source));
            assert!((5..=12).contains(&ex.source.len()));
            assert!(ex.source.iter().all(|&t| (3..32).contains(&t)));
        }
    }

    #[test]
    fn same_seed_same_data() {
        let noise = NoiseSpec::new(NoiseKind::Synthetic, 6.0, 0);
        assert_eq!(
            synth_dataset(&TaskSpec::default(), &noise, 9).unwrap(),
            synth_dataset(&TaskSpec::default(), &noise, 9).unwrap()
        );
    }

    #[test]
    fn noise_only_touches_training_targets() {
        let spec = TaskSpec::default();
        let a = synth_dataset(&spec, &clean(), 2).unwrap();
        let b = synth_dataset(&spec, &NoiseSpec::new(NoiseKind::Synthetic, 10.0, 0), 2).unwrap();
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
        assert!(a.train.iter().zip(&b.train).all(|(x, y)| x.source == y.source));
        let changed = a.train.iter().zip(&b.train).filter(|(x, y)| x.target != y.target).count();
        assert!(changed > 1900);
    }

    #[test]
    fn mapping_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let task = SubstitutionReversal::random(Vocab::new(20).unwrap(), &mut rng);
        let s = synth_dataset(&TaskSpec::default(), &clean(), 1).unwrap();
        for ex in s.test.iter().chain(&s.train) {
            assert_eq!(s.task.invert(&ex.target), ex.source);
        }
        let src = vec![3, 19, 7, 7];
        assert_eq!(task.invert(&task.apply(&src)), src);
        // Distinct sources map to distinct targets.
        assert_ne!(task.apply(&[3, 4]), task.apply(&[4, 3]));
    }

    #[test]
    fn invalid_sizes() {
        for spec in [
            TaskSpec {
                vocab_size: 10,
                ..TaskSpec::default()
            },
            TaskSpec {
                min_len: 2,
                ..TaskSpec::default()
            },
            TaskSpec {
                max_len: 33,
                ..TaskSpec::default()
            },
            TaskSpec {
                train_size: 0,
                ..TaskSpec::default()
            },
        ] {
            assert!(synth_dataset(&spec, &clean(), 0).is_err());
        }
    }
}
