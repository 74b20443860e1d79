//! Adam, the CE-pretrain then finetune schedule, and the policy-gradient and
//! loss-truncation baselines.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eisl::{ce_loss, eisl_loss, EislConfig, EislError, LogProbMatrix, Rollout};
use crate::metrics::{bleu, corpus_bleu, BleuConfig, MetricsError};
use crate::models::{BoundModel, Decode, Model, ModelDims, ModelError, ModelKind};
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::Token;

/// Stream ids mixed into the seed so batch order and loss randomness never
/// share a generator.
const ORDER_STREAM: u64 = 0x6f_72_64_65_72;
const SAMPLE_STREAM: u64 = 0x7361_6d70_6c65;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("parameter {index}: gradient shape {grad:?} does not match {param:?}")]
    ShapeMismatch {
        index: usize,
        param: (usize, usize),
        grad: (usize, usize),
    },
    #[error("{what} became non-finite")]
    NonFinite { what: &'static str },
    #[error(transparent)]
    Eisl(#[from] EislError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub source: Vec<Token>,
    pub target: Vec<Token>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Eisl,
    Pg,
    Lt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgConfig {
    /// Running-mean baseline update `b ← decay·b + (1−decay)·mean reward`.
    pub baseline_decay: f64,
    /// Highest n-gram order of the sentence-BLEU reward.
    pub reward_max_order: usize,
}

impl Default for PgConfig {
    fn default() -> Self {
        Self {
            baseline_decay: 0.95,
            reward_max_order: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LtConfig {
    /// Fraction of each batch, by highest CE, left out of the update.
    pub drop_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::NonAutoregressive,
            hidden: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Finetuning epochs after CE pretraining.
    pub epochs: usize,
    pub batch_size: usize,
    pub ce_pretrain_epochs: usize,
    pub finetune: LossKind,
    pub eisl: EislConfig,
    pub pg: PgConfig,
    pub lt: LtConfig,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 30,
            batch_size: 32,
            ce_pretrain_epochs: 30,
            finetune: LossKind::Ce,
            eisl: EislConfig::default(),
            pg: PgConfig::default(),
            lt: LtConfig::default(),
            clip_norm: 5.0,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be nonnegative, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.lt.drop_fraction) {
            return bad(format!("drop fraction must lie in [0, 1), got {}", self.lt.drop_fraction));
        }
        if !(0.0..=1.0).contains(&self.pg.baseline_decay) {
            return bad("baseline decay must lie in [0, 1]".into());
        }
        if self.pg.reward_max_order == 0 {
            return bad("reward max order must be positive".into());
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip norm must be nonnegative".into());
        }
        if self.model.hidden == 0 {
            return bad("hidden width must be positive".into());
        }
        self.eisl.validate()?;
        Ok(())
    }

    /// The subset of settings that determines the CE-pretrained model.
    /// Runs with equal keys can share one pretraining pass.
    pub fn pretrain_key(&self) -> String {
        let key = (
            self.learning_rate.to_bits(),
            self.beta1.to_bits(),
            self.beta2.to_bits(),
            self.epsilon.to_bits(),
            self.batch_size,
            self.ce_pretrain_epochs,
            self.clip_norm.to_bits(),
            self.seed,
            self.model.kind,
            self.model.hidden,
        );
        format!("{key:?}")
    }
}

/// Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros = |t: &&Tensor| Tensor::zeros(t.rows(), t.cols());
        Self {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamParams {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamParams,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::InvalidConfig(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (index, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[index].shape() != p.shape() {
            return Err(TrainError::ShapeMismatch {
                index,
                param: p.shape(),
                grad: g.shape(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let f = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(f);
        }
    }
    norm
}

/// A model with its optimiser state and private generators.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    adam: AdamState,
    order_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    baseline: Option<f64>,
}

impl Trainer {
    /// Initialises a fresh model from `config.seed`.
    pub fn new(config: TrainConfig, vocab: usize, max_len: usize) -> Result<Self, TrainError> {
        config.validate()?;
        let dims = ModelDims {
            vocab,
            hidden: config.model.hidden,
            max_len,
        };
        let model = Model::new(config.model.kind, dims, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        Self::from_model(model, config)
    }

    pub fn from_model(model: Model, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let adam = AdamState::new(&model.params());
        Ok(Self {
            order_rng: ChaCha8Rng::seed_from_u64(config.seed ^ ORDER_STREAM),
            sample_rng: ChaCha8Rng::seed_from_u64(config.seed ^ SAMPLE_STREAM),
            model,
            config,
            adam,
            baseline: None,
        })
    }

    /// Replaces the finetuning settings, keeping model, optimiser and
    /// generator state. Used to branch several finetuning runs off one
    /// pretrained trainer.
    pub fn with_finetune(mut self, config: &TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        self.config = config.clone();
        Ok(self)
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    /// One seeded-shuffled pass; returns the example-weighted mean loss.
    pub fn train_epoch(&mut self, data: &[Example], loss: LossKind) -> Result<f64, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            total += self.step(&batch, loss)? * batch.len() as f64;
        }
        Ok(total / data.len() as f64)
    }

    /// One optimiser step on `batch`; returns the batch-mean loss.
    pub fn step(&mut self, batch: &[&Example], loss: LossKind) -> Result<f64, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let root = match loss {
            LossKind::Ce => self.mean_loss(&mut tape, &bound, batch, |_, tape, b, ex| ce_term(tape, b, ex))?,
            LossKind::Eisl => {
                let eisl = self.config.eisl.clone();
                self.mean_loss(&mut tape, &bound, batch, |rng, tape, b, ex| eisl_term(tape, b, ex, &eisl, rng))?
            }
            LossKind::Lt => self.truncated_loss(&mut tape, &bound, batch)?,
            LossKind::Pg => self.pg_surrogate(&mut tape, &bound, batch)?,
        };
        let value = tape.scalar(root);
        if !value.is_finite() {
            return Err(TrainError::NonFinite { what: "training loss" });
        }
        self.apply_gradients(&tape, &bound, root)?;
        Ok(value)
    }

    fn mean_loss<F>(&mut self, tape: &mut Tape, bound: &BoundModel, batch: &[&Example], mut per: F) -> Result<Var, TrainError>
    where
        F: FnMut(&mut ChaCha8Rng, &mut Tape, &BoundModel, &Example) -> Result<Var, TrainError>,
    {
        let mut terms = Vec::with_capacity(batch.len());
        for ex in batch {
            terms.push(per(&mut self.sample_rng, tape, bound, ex)?);
        }
        mean_of(tape, &terms)
    }

    fn truncated_loss(&mut self, tape: &mut Tape, bound: &BoundModel, batch: &[&Example]) -> Result<Var, TrainError> {
        let terms = batch
            .iter()
            .map(|ex| ce_term(tape, bound, ex))
            .collect::<Result<Vec<_>, _>>()?;
        let drop = (self.config.lt.drop_fraction * batch.len() as f64).ceil() as usize;
        let mut ranked: Vec<usize> = (0..terms.len()).collect();
        // Highest CE first; ties keep batch order.
        ranked.sort_by(|&a, &b| tape.scalar(terms[b]).total_cmp(&tape.scalar(terms[a])));
        let mut kept: Vec<usize> = ranked[drop.min(terms.len() - 1)..].to_vec();
        kept.sort_unstable();
        let kept: Vec<Var> = kept.into_iter().map(|i| terms[i]).collect();
        mean_of(tape, &kept)
    }

    fn pg_surrogate(&mut self, tape: &mut Tape, bound: &BoundModel, batch: &[&Example]) -> Result<Var, TrainError> {
        let BoundModel::Ar(vars) = bound else {
            return Err(ModelError::WrongKind("autoregressive").into());
        };
        let reward_cfg = BleuConfig::uniform(self.config.pg.reward_max_order);
        let mut log_probs = Vec::with_capacity(batch.len());
        let mut rewards = Vec::with_capacity(batch.len());
        for ex in batch {
            let r = vars.rollout(tape, &ex.source, ex.target.len(), Decode::Sample, &mut self.sample_rng)?;
            rewards.push(bleu(&r.tokens, &ex.target, &reward_cfg));
            let nll = ce_loss(tape, &r.logp, &r.tokens)?;
            log_probs.push(nll);
        }
        let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let b = *self.baseline.get_or_insert(mean_reward);
        let terms: Vec<Var> = log_probs
            .iter()
            .zip(&rewards)
            .map(|(&nll, &r)| tape.scale(nll, r - b))
            .collect();
        let decay = self.config.pg.baseline_decay;
        self.baseline = Some(decay * b + (1.0 - decay) * mean_reward);
        mean_of(tape, &terms)
    }

    fn apply_gradients(&mut self, tape: &Tape, bound: &BoundModel, root: Var) -> Result<(), TrainError> {
        let mut grads_by_var = tape.backward(root)?;
        let vars = bound.param_vars();
        let params = self.model.params();
        let mut grads: Vec<Tensor> = vars
            .iter()
            .zip(&params)
            .map(|(&v, p)| grads_by_var.take_or_zeros(v, p.shape()))
            .collect();
        let norm = clip_global_norm(&mut grads, self.config.clip_norm);
        if !norm.is_finite() {
            return Err(TrainError::NonFinite { what: "gradient" });
        }
        let cfg = AdamParams::from(&self.config);
        let mut params = self.model.params_mut();
        adam_step(&mut params, &grads, &mut self.adam, &cfg)
    }

    /// Mean per-example loss over `data` without updating anything.
    /// Loss randomness is drawn from a fresh generator seeded with `seed`.
    pub fn eval_loss(&self, data: &[Example], loss: LossKind, seed: u64) -> Result<f64, TrainError> {
        let mut probe = self.clone();
        probe.sample_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let bound = probe.model.bind(&mut tape);
        let batch: Vec<&Example> = data.iter().collect();
        let root = match loss {
            LossKind::Ce => probe.mean_loss(&mut tape, &bound, &batch, |_, tape, b, ex| ce_term(tape, b, ex))?,
            LossKind::Eisl => {
                let eisl = probe.config.eisl.clone();
                probe.mean_loss(&mut tape, &bound, &batch, |rng, tape, b, ex| eisl_term(tape, b, ex, &eisl, rng))?
            }
            LossKind::Lt => probe.truncated_loss(&mut tape, &bound, &batch)?,
            LossKind::Pg => probe.pg_surrogate(&mut tape, &bound, &batch)?,
        };
        Ok(tape.scalar(root))
    }
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var, TrainError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

fn ce_term(tape: &mut Tape, bound: &BoundModel, ex: &Example) -> Result<Var, TrainError> {
    let lp = bound.teacher_forced(tape, &ex.source, &ex.target)?;
    Ok(ce_loss(tape, &lp, &ex.target)?)
}

/// `λ·EISL + (1−λ)·CE`; a zero-weight term is not computed at all.
fn eisl_term<R: Rng + ?Sized>(
    tape: &mut Tape,
    bound: &BoundModel,
    ex: &Example,
    config: &EislConfig,
    rng: &mut R,
) -> Result<Var, TrainError> {
    let lambda = config.ce_mix;
    if lambda == 0.0 {
        return ce_term(tape, bound, ex);
    }
    let lp = candidate_logp(tape, bound, ex, config.rollout, rng)?;
    let e = eisl_loss(tape, &lp, &ex.target, config, rng)?;
    if lambda == 1.0 {
        return Ok(e);
    }
    let c = ce_term(tape, bound, ex)?;
    let e = tape.scale(e, lambda);
    let c = tape.scale(c, 1.0 - lambda);
    Ok(tape.add(e, c)?)
}

/// Distributions the EISL term is computed on, with `T = T*`.
fn candidate_logp<R: Rng + ?Sized>(
    tape: &mut Tape,
    bound: &BoundModel,
    ex: &Example,
    rollout: Rollout,
    rng: &mut R,
) -> Result<LogProbMatrix, TrainError> {
    let len = ex.target.len();
    Ok(match bound {
        BoundModel::Na(v) => v.forward(tape, &ex.source, len)?,
        BoundModel::Ar(v) => {
            let decode = match rollout {
                Rollout::ArGreedy => Decode::Greedy,
                Rollout::ArSample => Decode::Sample,
                Rollout::ArTeacherForced => Decode::TeacherForced(&ex.target),
                Rollout::NonAutoregressive => {
                    return Err(TrainError::InvalidConfig(
                        "an autoregressive model needs an ar_* rollout".into(),
                    ))
                }
            };
            v.rollout(tape, &ex.source, len, decode, rng)?.logp
        }
    })
}

/// Corpus BLEU of greedy decodes against clean references, decoding as many
/// tokens as the source has.
pub fn evaluate(model: &Model, data: &[Example]) -> Result<f64, TrainError> {
    let hyps = decode_all(model, data)?;
    let pairs = hyps.iter().zip(data).map(|(h, ex)| (h.as_slice(), ex.target.as_slice()));
    Ok(corpus_bleu(pairs, &BleuConfig::default())?)
}

pub fn decode_all(model: &Model, data: &[Example]) -> Result<Vec<Vec<Token>>, TrainError> {
    data.iter()
        .map(|ex| Ok(model.greedy_decode(&ex.source, ex.source.len())?))
        .collect()
}
