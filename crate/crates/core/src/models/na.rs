use rand::Rng;

use super::{tile_rows, Encoder, EncoderVars, ModelDims, ModelError, INIT_SCALE};
use crate::eisl::LogProbMatrix;
use crate::numerics::{Axis, Tape, Tensor, Var};
use crate::Token;

/// Non-autoregressive model: every output position is predicted
/// independently from the source.
#[derive(Clone, Debug, PartialEq)]
pub struct NaModel {
    pub dims: ModelDims,
    pub(crate) encoder: Encoder,
    /// `d × d`
    pub mixer: Tensor,
    /// `1 × d`
    pub mixer_bias: Tensor,
    /// One `d × V` projection per output position.
    pub out_proj: Vec<Tensor>,
    /// `1 × V`
    pub out_bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct NaVars {
    dims: ModelDims,
    encoder: EncoderVars,
    mixer: Var,
    mixer_bias: Var,
    out_proj: Vec<Var>,
    out_bias: Var,
}

impl NaModel {
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        let (d, v) = (dims.hidden, dims.vocab);
        let encoder = Encoder::new(dims, rng);
        let mut u = |r, c| Tensor::uniform(r, c, -INIT_SCALE, INIT_SCALE, rng);
        let mixer = u(d, d);
        let mixer_bias = u(1, d);
        let out_proj = (0..dims.max_out()).map(|_| u(d, v)).collect();
        let out_bias = u(1, v);
        Self {
            dims,
            encoder,
            mixer,
            mixer_bias,
            out_proj,
            out_bias,
        }
    }

    pub fn zeros(dims: ModelDims) -> Self {
        let (d, v) = (dims.hidden, dims.vocab);
        Self {
            dims,
            encoder: Encoder::zeros(dims),
            mixer: Tensor::zeros(d, d),
            mixer_bias: Tensor::zeros(1, d),
            out_proj: (0..dims.max_out()).map(|_| Tensor::zeros(d, v)).collect(),
            out_bias: Tensor::zeros(1, v),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![
            &self.encoder.embedding,
            &self.encoder.pos_start,
            &self.encoder.pos_end,
            &self.mixer,
            &self.mixer_bias,
        ];
        p.extend(self.out_proj.iter());
        p.push(&self.out_bias);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![
            &mut self.encoder.embedding,
            &mut self.encoder.pos_start,
            &mut self.encoder.pos_end,
            &mut self.mixer,
            &mut self.mixer_bias,
        ];
        p.extend(self.out_proj.iter_mut());
        p.push(&mut self.out_bias);
        p
    }

    pub fn bind(&self, tape: &mut Tape) -> NaVars {
        NaVars {
            dims: self.dims,
            encoder: self.encoder.bind(tape),
            mixer: tape.var(self.mixer.clone()),
            mixer_bias: tape.var(self.mixer_bias.clone()),
            out_proj: self.out_proj.iter().map(|t| tape.var(t.clone())).collect(),
            out_bias: tape.var(self.out_bias.clone()),
        }
    }

    /// Output distributions for `len` positions.
    pub fn forward(&self, tape: &mut Tape, source: &[Token], len: usize) -> Result<LogProbMatrix, ModelError> {
        self.bind(tape).forward(tape, source, len)
    }
}

impl NaVars {
    pub fn param_vars(&self) -> Vec<Var> {
        let mut p = vec![
            self.encoder.embedding,
            self.encoder.pos_start,
            self.encoder.pos_end,
            self.mixer,
            self.mixer_bias,
        ];
        p.extend(self.out_proj.iter().copied());
        p.push(self.out_bias);
        p
    }

    pub fn forward(&self, tape: &mut Tape, source: &[Token], len: usize) -> Result<LogProbMatrix, ModelError> {
        let ctx = self.encoder.context(tape, &self.dims, source, len)?;
        let pre = tape.matmul(ctx, self.mixer)?;
        let bias = tile_rows(tape, self.mixer_bias, len)?;
        let pre = tape.add(pre, bias)?;
        let hidden = tape.tanh(pre);
        let mut rows = Vec::with_capacity(len);
        for t in 0..len {
            let h = tape.gather_rows(hidden, vec![t])?;
            rows.push(tape.matmul(h, self.out_proj[t])?);
        }
        let logits = tape.concat(&rows, Axis::Rows)?;
        let bias = tile_rows(tape, self.out_bias, len)?;
        let logits = tape.add(logits, bias)?;
        Ok(LogProbMatrix::from_logits(tape, logits)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims {
            vocab: 7,
            hidden: 4,
            max_len: 5,
        }
    }

    #[test]
    fn zero_parameters_give_uniform_columns() {
        let m = NaModel::zeros(dims());
        let mut tape = Tape::new();
        let lp = m.forward(&mut tape, &[3, 4, 5], 4).unwrap();
        assert_eq!((lp.len(), lp.vocab_size()), (4, 7));
        for &v in tape.value(lp.node()).data() {
            assert!((v - (1.0f64 / 7.0).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn columns_are_normalised() {
        let m = NaModel::new(dims(), &mut ChaCha8Rng::seed_from_u64(5));
        let mut tape = Tape::new();
        let lp = m.forward(&mut tape, &[6, 3, 4, 4], 8).unwrap();
        for t in 0..lp.len() {
            let lse = crate::numerics::logsumexp(lp.position(&tape, t));
            assert!(lse.abs() < 1e-12);
        }
    }

    /// CE gradient w.r.t. several parameter blocks against central differences.
    #[test]
    fn ce_gradient_matches_finite_differences() {
        let m = NaModel::new(dims(), &mut ChaCha8Rng::seed_from_u64(11));
        let source = [3, 5, 6];
        let reference = [4, 4, 6, 3];
        for which in [0usize, 3, 5] {
            let base = m.params()[which].clone();
            let err = finite_diff_check(
                |tape: &mut Tape, x: Var| -> Result<Var, crate::eisl::EislError> {
                    let mut vars = m.bind(tape);
                    match which {
                        0 => vars.encoder.embedding = x,
                        3 => vars.mixer = x,
                        _ => vars.out_proj[0] = x,
                    }
                    let lp = vars.forward(tape, &source, reference.len())?;
                    crate::eisl::ce_loss(tape, &lp, &reference)
                },
                &base,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-6, "param {which}: {err}");
        }
    }
}
