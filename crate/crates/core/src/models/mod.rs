//! Toy conditional sequence models.
//!
//! Both models share a source encoder: token embeddings mixed across source
//! positions by a learned position-to-position table, indexed from the start
//! and from the end of the source, plus the plain mean of the source
//! embeddings. The non-autoregressive model maps each output position's
//! context through one tanh layer and a per-position projection. The
//! autoregressive model runs a single-layer tanh recurrence over
//! `[previous token embedding, position context, previous hidden]`.

mod ar;
mod checkpoint;
mod na;

pub use ar::{enumerate_sequence_probs, ArModel, ENUMERATION_LIMIT, ArRollout, ArVars, Decode};
pub use na::{NaModel, NaVars};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eisl::LogProbMatrix;
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::Token;

/// Half-width of the uniform initialisation interval.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("vocabulary of size {0} is too small (need at least 4 ids)")]
    VocabTooSmall(usize),
    #[error("source sequence is empty")]
    EmptySource,
    #[error("output length must be at least 1")]
    EmptyOutput,
    #[error("{what} length {len} exceeds the model limit {max}")]
    LengthExceeded { what: &'static str, len: usize, max: usize },
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { token: Token, vocab: usize },
    #[error("teacher-forced reference has length {got}, expected {expected}")]
    TeacherLength { expected: usize, got: usize },
    #[error("enumerating {vocab}^{len} sequences exceeds the 2^20 guard")]
    EnumerationTooLarge { vocab: usize, len: usize },
    #[error("operation requires a {0} model")]
    WrongKind(&'static str),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Token-id layout shared by every model: three reserved ids followed by
/// content tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub const PAD: Token = 0;
    pub const BLANK: Token = 1;
    pub const BOS: Token = 2;
    const RESERVED: usize = 3;

    pub fn new(size: usize) -> Result<Self, ModelError> {
        if size < 4 {
            return Err(ModelError::VocabTooSmall(size));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pad(&self) -> Token {
        Self::PAD
    }

    pub fn blank(&self) -> Token {
        Self::BLANK
    }

    pub fn bos(&self) -> Token {
        Self::BOS
    }

    pub fn is_reserved(&self, t: Token) -> bool {
        t < Self::RESERVED
    }

    /// Ids usable as ordinary content.
    pub fn content(&self) -> std::ops::Range<Token> {
        Self::RESERVED..self.size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    NonAutoregressive,
    Autoregressive,
}

impl ModelKind {
    fn code(self) -> u32 {
        match self {
            ModelKind::NonAutoregressive => 0,
            ModelKind::Autoregressive => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(ModelKind::NonAutoregressive),
            1 => Some(ModelKind::Autoregressive),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub hidden: usize,
    /// Longest source sequence.
    pub max_len: usize,
}

impl ModelDims {
    /// Longest output sequence. Targets may be up to twice the source length
    /// once repetition noise has been applied.
    pub fn max_out(&self) -> usize {
        2 * self.max_len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Na(NaModel),
    Ar(ArModel),
}

/// A model whose parameters have been recorded as leaves on a tape.
#[derive(Clone, Debug)]
pub enum BoundModel {
    Na(NaVars),
    Ar(ArVars),
}

impl Model {
    pub fn new<R: Rng + ?Sized>(kind: ModelKind, dims: ModelDims, rng: &mut R) -> Result<Self, ModelError> {
        Vocab::new(dims.vocab)?;
        Ok(match kind {
            ModelKind::NonAutoregressive => Model::Na(NaModel::new(dims, rng)),
            ModelKind::Autoregressive => Model::Ar(ArModel::new(dims, rng)),
        })
    }

    pub fn zeros(kind: ModelKind, dims: ModelDims) -> Self {
        match kind {
            ModelKind::NonAutoregressive => Model::Na(NaModel::zeros(dims)),
            ModelKind::Autoregressive => Model::Ar(ArModel::zeros(dims)),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Na(_) => ModelKind::NonAutoregressive,
            Model::Ar(_) => ModelKind::Autoregressive,
        }
    }

    pub fn dims(&self) -> ModelDims {
        match self {
            Model::Na(m) => m.dims,
            Model::Ar(m) => m.dims,
        }
    }

    /// Parameters in declared (serialisation) order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Model::Na(m) => m.params(),
            Model::Ar(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::Na(m) => m.params_mut(),
            Model::Ar(m) => m.params_mut(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        match self {
            Model::Na(m) => BoundModel::Na(m.bind(tape)),
            Model::Ar(m) => BoundModel::Ar(m.bind(tape)),
        }
    }

    pub fn as_ar(&self) -> Result<&ArModel, ModelError> {
        match self {
            Model::Ar(m) => Ok(m),
            Model::Na(_) => Err(ModelError::WrongKind("autoregressive")),
        }
    }

    /// Greedy decoding of `len` tokens.
    pub fn greedy_decode(&self, source: &[Token], len: usize) -> Result<Vec<Token>, ModelError> {
        let mut tape = Tape::new();
        self.bind(&mut tape).greedy_decode(&mut tape, source, len)
    }
}

impl BoundModel {
    pub fn param_vars(&self) -> Vec<Var> {
        match self {
            BoundModel::Na(v) => v.param_vars(),
            BoundModel::Ar(v) => v.param_vars(),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            BoundModel::Na(_) => ModelKind::NonAutoregressive,
            BoundModel::Ar(_) => ModelKind::Autoregressive,
        }
    }

    /// Output distributions with the reference fed as the prefix (for the
    /// non-autoregressive model the reference only fixes the length).
    pub fn teacher_forced(
        &self,
        tape: &mut Tape,
        source: &[Token],
        reference: &[Token],
    ) -> Result<LogProbMatrix, ModelError> {
        match self {
            BoundModel::Na(v) => v.forward(tape, source, reference.len()),
            BoundModel::Ar(v) => {
                let mut rng = NoRng;
                Ok(v
                    .rollout(tape, source, reference.len(), Decode::TeacherForced(reference), &mut rng)?
                    .logp)
            }
        }
    }

    pub fn greedy_decode(&self, tape: &mut Tape, source: &[Token], len: usize) -> Result<Vec<Token>, ModelError> {
        match self {
            BoundModel::Na(v) => {
                let logp = v.forward(tape, source, len)?;
                Ok((0..len).map(|t| argmax(logp.position(tape, t))).collect())
            }
            BoundModel::Ar(v) => {
                let mut rng = NoRng;
                Ok(v.rollout(tape, source, len, Decode::Greedy, &mut rng)?.tokens)
            }
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Token {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from a log-distribution by inverse-CDF sampling.
pub fn sample_categorical<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> Token {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

/// An rng for code paths that never sample.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("deterministic decoding drew a random number")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("deterministic decoding drew a random number")
    }
    fn fill_bytes(&mut self, _dest: &mut [u8]) {
        unreachable!("deterministic decoding drew a random number")
    }
    fn try_fill_bytes(&mut self, _dest: &mut [u8]) -> Result<(), rand::Error> {
        unreachable!("deterministic decoding drew a random number")
    }
}

/// Parameters of the positional source encoder shared by both models.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Encoder {
    /// `V × d` token embeddings.
    pub embedding: Tensor,
    /// `max_out × max_len` weights indexed by (output position, source position from the start).
    pub pos_start: Tensor,
    /// `max_out × max_len` weights indexed by (output position, source position from the end).
    pub pos_end: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncoderVars {
    pub embedding: Var,
    pub pos_start: Var,
    pub pos_end: Var,
}

impl Encoder {
    fn new<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        Self {
            embedding: Tensor::uniform(dims.vocab, dims.hidden, -INIT_SCALE, INIT_SCALE, rng),
            pos_start: Tensor::uniform(dims.max_out(), dims.max_len, -INIT_SCALE, INIT_SCALE, rng),
            pos_end: Tensor::uniform(dims.max_out(), dims.max_len, -INIT_SCALE, INIT_SCALE, rng),
        }
    }

    fn zeros(dims: ModelDims) -> Self {
        Self {
            embedding: Tensor::zeros(dims.vocab, dims.hidden),
            pos_start: Tensor::zeros(dims.max_out(), dims.max_len),
            pos_end: Tensor::zeros(dims.max_out(), dims.max_len),
        }
    }

    fn bind(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            embedding: tape.var(self.embedding.clone()),
            pos_start: tape.var(self.pos_start.clone()),
            pos_end: tape.var(self.pos_end.clone()),
        }
    }
}

impl EncoderVars {
    /// Per-output-position source context, shape `len × d`.
    pub fn context(
        &self,
        tape: &mut Tape,
        dims: &ModelDims,
        source: &[Token],
        len: usize,
    ) -> Result<Var, ModelError> {
        let src_len = source.len();
        if src_len == 0 {
            return Err(ModelError::EmptySource);
        }
        if len == 0 {
            return Err(ModelError::EmptyOutput);
        }
        if src_len > dims.max_len {
            return Err(ModelError::LengthExceeded {
                what: "source",
                len: src_len,
                max: dims.max_len,
            });
        }
        if len > dims.max_out() {
            return Err(ModelError::LengthExceeded {
                what: "output",
                len,
                max: dims.max_out(),
            });
        }
        check_tokens(source, dims.vocab)?;

        let x = tape.gather_rows(self.embedding, source.to_vec())?;
        let cells = dims.max_out() * dims.max_len;
        let flat_start = tape.reshape(self.pos_start, cells, 1)?;
        let flat_end = tape.reshape(self.pos_end, cells, 1)?;
        let mut from_start = Vec::with_capacity(len * src_len);
        let mut from_end = Vec::with_capacity(len * src_len);
        for t in 0..len {
            for s in 0..src_len {
                from_start.push(t * dims.max_len + s);
                from_end.push(t * dims.max_len + (src_len - 1 - s));
            }
        }
        let a = tape.gather_rows(flat_start, from_start)?;
        let a = tape.reshape(a, len, src_len)?;
        let b = tape.gather_rows(flat_end, from_end)?;
        let b = tape.reshape(b, len, src_len)?;
        let mix = tape.add(a, b)?;
        let pool = tape.constant(Tensor::filled(len, src_len, 1.0 / src_len as f64));
        let mix = tape.add(mix, pool)?;
        Ok(tape.matmul(mix, x)?)
    }
}

pub(crate) fn check_tokens(seq: &[Token], vocab: usize) -> Result<(), ModelError> {
    match seq.iter().find(|&&t| t >= vocab) {
        Some(&token) => Err(ModelError::TokenOutOfRange { token, vocab }),
        None => Ok(()),
    }
}

/// Repeats the single row of `bias` `n` times.
pub(crate) fn tile_rows(tape: &mut Tape, bias: Var, n: usize) -> Result<Var, NumericsError> {
    tape.gather_rows(bias, vec![0; n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vocab_layout() {
        assert!(Vocab::new(3).is_err());
        let v = Vocab::new(8).unwrap();
        assert_eq!(v.content(), 3..8);
        assert!(v.is_reserved(v.blank()) && v.is_reserved(v.bos()) && v.is_reserved(v.pad()));
        assert_ne!(v.blank(), v.bos());
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[0.5, 1.0, 1.0, 0.2]), 1);
        assert_eq!(argmax(&[3.0, 3.0]), 0);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let dims = ModelDims {
            vocab: 8,
            hidden: 4,
            max_len: 5,
        };
        let a = Model::new(ModelKind::Autoregressive, dims, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = Model::new(ModelKind::Autoregressive, dims, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        for p in a.params() {
            assert!(p.data().iter().all(|v| v.abs() <= INIT_SCALE));
        }
    }

    #[test]
    fn context_validates_lengths() {
        let dims = ModelDims {
            vocab: 6,
            hidden: 3,
            max_len: 4,
        };
        let m = NaModel::zeros(dims);
        let mut tape = Tape::new();
        let v = m.bind(&mut tape);
        assert!(matches!(
            v.forward(&mut tape, &[3, 4, 5, 3, 4], 3),
            Err(ModelError::LengthExceeded { what: "source", .. })
        ));
        assert!(matches!(
            v.forward(&mut tape, &[3], 9),
            Err(ModelError::LengthExceeded { what: "output", .. })
        ));
        assert!(matches!(
            v.forward(&mut tape, &[3, 9], 2),
            Err(ModelError::TokenOutOfRange { .. })
        ));
        assert!(matches!(v.forward(&mut tape, &[], 2), Err(ModelError::EmptySource)));
    }
}
