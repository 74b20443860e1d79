//! Seeded target corruption: shuffle, repetition, blank and their combination.

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Token;

/// Highest synthetic noise level; level `nl` mixes `5·nl`% of each noise.
pub const MAX_SYNTHETIC_LEVEL: u32 = 20;

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("{kind} intensity {value} is out of range ({expected})")]
    Intensity {
        kind: NoiseKind,
        value: f64,
        expected: &'static str,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Shuffle,
    Repetition,
    Blank,
    Synthetic,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Shuffle => "shuffle",
            NoiseKind::Repetition => "repetition",
            NoiseKind::Blank => "blank",
            NoiseKind::Synthetic => "synthetic",
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shuffle" => Ok(NoiseKind::Shuffle),
            "repetition" => Ok(NoiseKind::Repetition),
            "blank" => Ok(NoiseKind::Blank),
            "synthetic" => Ok(NoiseKind::Synthetic),
            other => Err(format!("unknown noise kind '{other}'")),
        }
    }
}

/// One noise setting.
///
/// `intensity` is the shuffle count for shuffle, a probability for
/// repetition and blank, and the level (0 to 20) for synthetic noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub intensity: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, intensity: f64, seed: u64) -> Self {
        Self { kind, intensity, seed }
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        let v = self.intensity;
        let err = |expected| {
            Err(NoiseError::Intensity {
                kind: self.kind,
                value: v,
                expected,
            })
        };
        match self.kind {
            NoiseKind::Shuffle if !(v >= 0.0 && v.fract() == 0.0 && v.is_finite()) => {
                err("a nonnegative integer")
            }
            NoiseKind::Repetition | NoiseKind::Blank if !(0.0..=1.0).contains(&v) => err("a probability"),
            NoiseKind::Synthetic if !(v.fract() == 0.0 && (0.0..=MAX_SYNTHETIC_LEVEL as f64).contains(&v)) => {
                err("an integer level from 0 to 20")
            }
            _ => Ok(()),
        }
    }

    /// True when the spec can never change a sequence.
    pub fn is_identity(&self) -> bool {
        self.intensity == 0.0
    }

    /// Corrupts one sequence with a generator seeded from `self.seed`.
    pub fn apply(&self, seq: &[Token], blank: Token) -> Result<Vec<Token>, NoiseError> {
        self.apply_with(seq, blank, &mut ChaCha8Rng::seed_from_u64(self.seed))
    }

    /// Corrupts every sequence in order, drawing from one generator seeded
    /// from `self.seed`.
    pub fn apply_all(&self, seqs: &[Vec<Token>], blank: Token) -> Result<Vec<Vec<Token>>, NoiseError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        seqs.iter().map(|s| self.apply_with(s, blank, &mut rng)).collect()
    }

    pub fn apply_with<R: Rng + ?Sized>(&self, seq: &[Token], blank: Token, rng: &mut R) -> Result<Vec<Token>, NoiseError> {
        self.validate()?;
        let v = self.intensity;
        Ok(match self.kind {
            NoiseKind::Shuffle => shuffle_noise(seq, v as usize, rng),
            NoiseKind::Repetition => repetition_noise(seq, v, rng),
            NoiseKind::Blank => blank_noise(seq, v, blank, rng),
            NoiseKind::Synthetic => synthetic_noise(seq, v as u32, blank, rng)?,
        })
    }
}

/// Moves `min(sc, T)` uniformly chosen positions so that every chosen token
/// leaves its slot (a uniform random derangement of the chosen positions).
///
/// One chosen position cannot move, so `sc = 1` is the identity.
pub fn shuffle_noise<R: Rng + ?Sized>(seq: &[Token], sc: usize, rng: &mut R) -> Vec<Token> {
    let k = sc.min(seq.len());
    let mut out = seq.to_vec();
    if k < 2 {
        return out;
    }
    let mut positions = index::sample(rng, seq.len(), k).into_vec();
    positions.sort_unstable();
    let perm = derangement(k, rng);
    for (dst, &src) in positions.iter().zip(&perm) {
        out[*dst] = seq[positions[src]];
    }
    out
}

/// Uniform derangement of `0..k` (k ≥ 2) by rejection; about e draws on average.
fn derangement<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..k).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Duplicates each token in place with probability `rr`.
pub fn repetition_noise<R: Rng + ?Sized>(seq: &[Token], rr: f64, rng: &mut R) -> Vec<Token> {
    let mut out = Vec::with_capacity(seq.len() * 2);
    for &t in seq {
        out.push(t);
        if rng.gen::<f64>() < rr {
            out.push(t);
        }
    }
    out
}

/// Replaces each token with `blank` with probability `br`.
pub fn blank_noise<R: Rng + ?Sized>(seq: &[Token], br: f64, blank: Token, rng: &mut R) -> Vec<Token> {
    seq.iter()
        .map(|&t| if rng.gen::<f64>() < br { blank } else { t })
        .collect()
}

/// Shuffle with `sc = round(0.05·nl·T)`, then repetition and blank noise
/// each with probability `0.05·nl`.
pub fn synthetic_noise<R: Rng + ?Sized>(seq: &[Token], nl: u32, blank: Token, rng: &mut R) -> Result<Vec<Token>, NoiseError> {
    if nl > MAX_SYNTHETIC_LEVEL {
        return Err(NoiseError::Intensity {
            kind: NoiseKind::Synthetic,
            value: nl as f64,
            expected: "an integer level from 0 to 20",
        });
    }
    let ratio = 0.05 * nl as f64;
    let sc = (ratio * seq.len() as f64).round() as usize;
    let shuffled = shuffle_noise(seq, sc, rng);
    let repeated = repetition_noise(&shuffled, ratio, rng);
    Ok(blank_noise(&repeated, ratio, blank, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};

    const BLANK: Token = 1;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn seq10() -> Vec<Token> {
        (3..13).collect()
    }

    #[test]
    fn zero_intensity_is_identity() {
        let s = seq10();
        let mut r = rng(0);
        assert_eq!(shuffle_noise(&s, 0, &mut r), s);
        assert_eq!(shuffle_noise(&s, 1, &mut r), s);
        assert_eq!(repetition_noise(&s, 0.0, &mut r), s);
        assert_eq!(blank_noise(&s, 0.0, BLANK, &mut r), s);
        assert_eq!(synthetic_noise(&s, 0, BLANK, &mut r).unwrap(), s);
    }

    #[test]
    fn full_intensity() {
        let s = seq10();
        let mut r = rng(1);
        let doubled = repetition_noise(&s, 1.0, &mut r);
        assert_eq!(doubled.len(), 20);
        assert!(doubled.chunks(2).zip(&s).all(|(pair, &t)| pair == [t, t]));
        assert!(blank_noise(&s, 1.0, BLANK, &mut r).iter().all(|&t| t == BLANK));
        let max = synthetic_noise(&s, 20, BLANK, &mut r).unwrap();
        assert_eq!(max, vec![BLANK; 20]);
        assert!(synthetic_noise(&s, 21, BLANK, &mut r).is_err());
    }

    #[test]
    fn shuffle_moves_exactly_the_chosen_count() {
        let s = seq10();
        let mut r = rng(2);
        for sc in 2..=12 {
            let out = shuffle_noise(&s, sc, &mut r);
            let moved = out.iter().zip(&s).filter(|(a, b)| a != b).count();
            assert_eq!(moved, sc.min(10));
        }
    }

    #[test]
    fn repetition_mean_length() {
        let s = seq10();
        let mut r = rng(3);
        let trials = 100_000;
        let total: usize = (0..trials).map(|_| repetition_noise(&s, 0.5, &mut r).len()).sum();
        let mean = total as f64 / trials as f64;
        // Each trial adds Binomial(10, 0.5) tokens: sd of the mean is sqrt(2.5 / trials).
        let sd = (2.5 / trials as f64).sqrt();
        assert!((mean - 15.0).abs() <= 3.0 * sd, "{mean}");
    }

    #[test]
    fn blank_fraction() {
        let s = seq10();
        let mut r = rng(4);
        let trials = 20_000;
        let blanks: usize = (0..trials)
            .map(|_| blank_noise(&s, 0.35, BLANK, &mut r).iter().filter(|&&t| t == BLANK).count())
            .sum();
        let n = (trials * 10) as f64;
        let frac = blanks as f64 / n;
        let sd = (0.35 * 0.65 / n).sqrt();
        assert!((frac - 0.35).abs() <= 3.0 * sd, "{frac}");
    }

    #[test]
    fn synthetic_level_four_parameters_and_replay() {
        let s = seq10();
        let spec = NoiseSpec::new(NoiseKind::Synthetic, 4.0, 77);
        let a = spec.apply(&s, BLANK).unwrap();
        assert_eq!(a, spec.apply(&s, BLANK).unwrap());
        // Same draws as calling the stages by hand with sc = 2, rr = br = 0.2.
        let mut r = rng(77);
        let manual = blank_noise(&repetition_noise(&shuffle_noise(&s, 2, &mut r), 0.2, &mut r), 0.2, BLANK, &mut r);
        assert_eq!(a, manual);
    }

    #[test]
    fn spec_validation() {
        assert!(NoiseSpec::new(NoiseKind::Shuffle, 2.5, 0).validate().is_err());
        assert!(NoiseSpec::new(NoiseKind::Blank, 1.5, 0).validate().is_err());
        assert!(NoiseSpec::new(NoiseKind::Repetition, -0.1, 0).validate().is_err());
        assert!(NoiseSpec::new(NoiseKind::Synthetic, 3.5, 0).validate().is_err());
        assert!(NoiseSpec::new(NoiseKind::Synthetic, 20.0, 0).validate().is_ok());
        assert!(NoiseSpec::new(NoiseKind::Shuffle, 100.0, 0).validate().is_ok());
    }

    #[test]
    fn spec_json() {
        let spec: NoiseSpec = serde_json::from_str(r#"{"kind":"synthetic","intensity":6}"#).unwrap();
        assert_eq!(spec, NoiseSpec::new(NoiseKind::Synthetic, 6.0, 0));
        assert_eq!("blank".parse::<NoiseKind>().unwrap(), NoiseKind::Blank);
    }

    proptest! {
        #[test]
        fn shuffle_preserves_multiset(seed in any::<u64>(), s in prop::collection::vec(0usize..6, 0..16), sc in 0usize..20) {
            let out = shuffle_noise(&s, sc, &mut rng(seed));
            prop_assert_eq!(out.len(), s.len());
            let (mut a, mut b) = (out, s.clone());
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn length_bounds(seed in any::<u64>(), s in prop::collection::vec(3usize..9, 0..16), p in 0.0f64..=1.0, nl in 0u32..=20) {
            let mut r = rng(seed);
            prop_assert_eq!(blank_noise(&s, p, BLANK, &mut r).len(), s.len());
            let rep = repetition_noise(&s, p, &mut r);
            prop_assert!(rep.len() >= s.len() && rep.len() <= 2 * s.len());
            let syn = synthetic_noise(&s, nl, BLANK, &mut r).unwrap();
            prop_assert!(syn.len() >= s.len() && syn.len() <= 2 * s.len());
        }

        #[test]
        fn seeded_replay(seed in any::<u64>(), s in prop::collection::vec(3usize..9, 1..16), nl in 0u32..=20) {
            let spec = NoiseSpec::new(NoiseKind::Synthetic, nl as f64, seed);
            prop_assert_eq!(spec.apply(&s, BLANK).unwrap(), spec.apply(&s, BLANK).unwrap());
        }
    }
}
