use rand::Rng;

use super::{
    argmax, check_tokens, sample_categorical, Encoder, EncoderVars, ModelDims, ModelError, Vocab, INIT_SCALE,
};
use crate::eisl::LogProbMatrix;
use crate::numerics::{Axis, Tape, Tensor, Var};
use crate::Token;

/// Largest number of sequences [`enumerate_sequence_probs`] will visit.
pub const ENUMERATION_LIMIT: usize = 1 << 20;

/// Autoregressive model with a single tanh recurrence.
#[derive(Clone, Debug, PartialEq)]
pub struct ArModel {
    pub dims: ModelDims,
    pub(crate) encoder: Encoder,
    /// `3d × d`, applied to `[embedding(prev), context(t), h(t-1)]`.
    pub cell: Tensor,
    /// `1 × d`
    pub cell_bias: Tensor,
    /// `d × V`
    pub out_proj: Tensor,
    /// `1 × V`
    pub out_bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct ArVars {
    dims: ModelDims,
    encoder: EncoderVars,
    cell: Var,
    cell_bias: Var,
    out_proj: Var,
    out_bias: Var,
}

/// How the prefix fed back into the recurrence is chosen.
#[derive(Clone, Copy, Debug)]
pub enum Decode<'a> {
    /// Argmax of each conditional, ties to the lowest id.
    Greedy,
    /// Ancestral sampling.
    Sample,
    /// Feed the given reference (its length must equal the rollout length).
    TeacherForced(&'a [Token]),
}

#[derive(Clone, Debug)]
pub struct ArRollout {
    /// Tokens fed as the prefix (the reference under teacher forcing).
    pub tokens: Vec<Token>,
    /// Row `t` is the conditional distribution at step `t` given the prefix.
    pub logp: LogProbMatrix,
    /// `hidden[t]` is the recurrent state after step `t`.
    pub hidden: Vec<Var>,
    /// Per-step source context, `len × d`.
    pub context: Var,
}

impl ArModel {
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        let (d, v) = (dims.hidden, dims.vocab);
        let encoder = Encoder::new(dims, rng);
        let mut u = |r, c| Tensor::uniform(r, c, -INIT_SCALE, INIT_SCALE, rng);
        let cell = u(3 * d, d);
        let cell_bias = u(1, d);
        let out_proj = u(d, v);
        let out_bias = u(1, v);
        Self {
            dims,
            encoder,
            cell,
            cell_bias,
            out_proj,
            out_bias,
        }
    }

    pub fn zeros(dims: ModelDims) -> Self {
        let (d, v) = (dims.hidden, dims.vocab);
        Self {
            dims,
            encoder: Encoder::zeros(dims),
            cell: Tensor::zeros(3 * d, d),
            cell_bias: Tensor::zeros(1, d),
            out_proj: Tensor::zeros(d, v),
            out_bias: Tensor::zeros(1, v),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.encoder.embedding,
            &self.encoder.pos_start,
            &self.encoder.pos_end,
            &self.cell,
            &self.cell_bias,
            &self.out_proj,
            &self.out_bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.encoder.embedding,
            &mut self.encoder.pos_start,
            &mut self.encoder.pos_end,
            &mut self.cell,
            &mut self.cell_bias,
            &mut self.out_proj,
            &mut self.out_bias,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> ArVars {
        ArVars {
            dims: self.dims,
            encoder: self.encoder.bind(tape),
            cell: tape.var(self.cell.clone()),
            cell_bias: tape.var(self.cell_bias.clone()),
            out_proj: tape.var(self.out_proj.clone()),
            out_bias: tape.var(self.out_bias.clone()),
        }
    }

    pub fn rollout<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        source: &[Token],
        len: usize,
        decode: Decode<'_>,
        rng: &mut R,
    ) -> Result<ArRollout, ModelError> {
        self.bind(tape).rollout(tape, source, len, decode, rng)
    }
}

impl ArVars {
    pub fn param_vars(&self) -> Vec<Var> {
        vec![
            self.encoder.embedding,
            self.encoder.pos_start,
            self.encoder.pos_end,
            self.cell,
            self.cell_bias,
            self.out_proj,
            self.out_bias,
        ]
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn context(&self, tape: &mut Tape, source: &[Token], len: usize) -> Result<Var, ModelError> {
        self.encoder.context(tape, &self.dims, source, len)
    }

    pub fn initial_hidden(&self, tape: &mut Tape) -> Var {
        tape.constant(Tensor::zeros(1, self.dims.hidden))
    }

    /// One recurrence step at output position `pos`.
    ///
    /// `input` is the token at `pos - 1` (begin-of-sequence at `pos == 0`).
    /// Returns the new hidden state and the `1 × V` log-distribution for `pos`.
    pub fn step(
        &self,
        tape: &mut Tape,
        context: Var,
        pos: usize,
        hidden: Var,
        input: Token,
    ) -> Result<(Var, Var), ModelError> {
        check_tokens(&[input], self.dims.vocab)?;
        let e = tape.gather_rows(self.encoder.embedding, vec![input])?;
        let c = tape.gather_rows(context, vec![pos])?;
        let z = tape.concat(&[e, c, hidden], Axis::Cols)?;
        let pre = tape.matmul(z, self.cell)?;
        let pre = tape.add(pre, self.cell_bias)?;
        let h = tape.tanh(pre);
        let logits = tape.matmul(h, self.out_proj)?;
        let logits = tape.add(logits, self.out_bias)?;
        let lp = tape.log_softmax(logits)?;
        Ok((h, lp))
    }

    pub fn rollout<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        source: &[Token],
        len: usize,
        decode: Decode<'_>,
        rng: &mut R,
    ) -> Result<ArRollout, ModelError> {
        if let Decode::TeacherForced(reference) = decode {
            if reference.len() != len {
                return Err(ModelError::TeacherLength {
                    expected: len,
                    got: reference.len(),
                });
            }
            check_tokens(reference, self.dims.vocab)?;
        }
        let context = self.context(tape, source, len)?;
        let mut h = self.initial_hidden(tape);
        let mut input = Vocab::BOS;
        let mut tokens = Vec::with_capacity(len);
        let mut rows = Vec::with_capacity(len);
        let mut hidden = Vec::with_capacity(len);
        for pos in 0..len {
            let (h_next, lp) = self.step(tape, context, pos, h, input)?;
            let row = tape.value(lp).data();
            let token = match decode {
                Decode::Greedy => argmax(row),
                Decode::Sample => sample_categorical(row, rng),
                Decode::TeacherForced(reference) => reference[pos],
            };
            tokens.push(token);
            rows.push(lp);
            hidden.push(h_next);
            h = h_next;
            input = token;
        }
        let logp = tape.concat(&rows, Axis::Rows)?;
        Ok(ArRollout {
            tokens,
            logp: LogProbMatrix::from_normalized(logp, self.dims.vocab, len),
            hidden,
            context,
        })
    }
}

/// Probability of every length-`len` output sequence, in lexicographic order.
///
/// Refuses when `V^len` exceeds [`ENUMERATION_LIMIT`].
pub fn enumerate_sequence_probs(
    model: &ArModel,
    source: &[Token],
    len: usize,
) -> Result<Vec<(Vec<Token>, f64)>, ModelError> {
    let vocab = model.dims.vocab;
    let too_large = ModelError::EnumerationTooLarge { vocab, len };
    let count = u32::try_from(len)
        .ok()
        .and_then(|l| vocab.checked_pow(l))
        .ok_or(too_large)?;
    if count > ENUMERATION_LIMIT {
        return Err(ModelError::EnumerationTooLarge { vocab, len });
    }
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let context = vars.context(&mut tape, source, len)?;
    let h0 = vars.initial_hidden(&mut tape);
    let mut out = Vec::with_capacity(count);
    let mut prefix = Vec::with_capacity(len);
    visit(&vars, &mut tape, context, h0, &mut prefix, 0.0, len, &mut out)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn visit(
    vars: &ArVars,
    tape: &mut Tape,
    context: Var,
    hidden: Var,
    prefix: &mut Vec<Token>,
    log_p: f64,
    len: usize,
    out: &mut Vec<(Vec<Token>, f64)>,
) -> Result<(), ModelError> {
    let pos = prefix.len();
    if pos == len {
        out.push((prefix.clone(), log_p.exp()));
        return Ok(());
    }
    let input = prefix.last().copied().unwrap_or(Vocab::BOS);
    let (h, lp) = vars.step(tape, context, pos, hidden, input)?;
    let row = tape.value(lp).data().to_vec();
    for (token, &l) in row.iter().enumerate() {
        prefix.push(token);
        visit(vars, tape, context, h, prefix, log_p + l, len, out)?;
        prefix.pop();
    }
    Ok(())
}
