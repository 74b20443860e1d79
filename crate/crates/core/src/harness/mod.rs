//! Synthetic data, experiment sweeps, CSV/SVG output and the loss-cost
//! micro-benchmark.

mod bench;
mod data;
mod plot;
mod results;

pub use bench::{bench_loss, BenchRow, BENCH_VOCAB};
pub use data::{synth_dataset, Splits, SubstitutionReversal, TaskSpec};
pub use plot::{emit_plot, render_plot, PlotMetric};
pub use results::{emit_csv, probe_results, read_csv, write_csv, RunResult, CSV_HEADER};

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eisl::EislConfig;
use crate::models::{Model, ModelKind};
use crate::noise::{NoiseError, NoiseKind, NoiseSpec};
use crate::train::{evaluate, LossKind, ModelConfig, TrainConfig, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {message}")]
    Csv { path: PathBuf, line: u64, message: String },
    #[error("could not build worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedLoss {
    pub name: String,
    pub config: TrainConfig,
}

/// A declarative sweep: every (noise point, seed) cell trains every loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Written to the `experiment` column.
    pub experiment: String,
    pub task: TaskSpec,
    pub noise: Vec<NoiseSpec>,
    pub losses: Vec<NamedLoss>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self::noise_sweep()
    }
}

impl ExperimentSpec {
    /// CE against unigram+bigram EISL over synthetic noise levels 0–10 and
    /// three seeds, at the default task size, on the non-autoregressive model.
    ///
    /// Both losses train with batch size 8 and learning rate 1e-2: at the
    /// library defaults neither CE pretraining nor finetuning gets near
    /// convergence within 30 epochs.
    pub fn noise_sweep() -> Self {
        let ce = TrainConfig {
            batch_size: 8,
            learning_rate: 1e-2,
            model: ModelConfig {
                kind: ModelKind::NonAutoregressive,
                hidden: 32,
            },
            ..TrainConfig::default()
        };
        let eisl = TrainConfig {
            finetune: LossKind::Eisl,
            eisl: EislConfig::noisy_target(),
            ..ce.clone()
        };
        Self {
            experiment: "noise_sweep".into(),
            task: TaskSpec::default(),
            noise: (0..=5)
                .map(|i| NoiseSpec::new(NoiseKind::Synthetic, 2.0 * i as f64, 0))
                .collect(),
            losses: vec![
                NamedLoss {
                    name: "CE".into(),
                    config: ce,
                },
                NamedLoss {
                    name: "EISL".into(),
                    config: eisl,
                },
            ],
            seeds: vec![0, 1, 2],
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidSpec(m));
        self.task.validate()?;
        if self.noise.is_empty() || self.losses.is_empty() || self.seeds.is_empty() {
            return bad("noise grid, losses and seeds must be nonempty".into());
        }
        for n in &self.noise {
            n.validate()?;
        }
        let mut names = std::collections::HashSet::new();
        for l in &self.losses {
            if !names.insert(l.name.as_str()) {
                return bad(format!("duplicate loss name '{}'", l.name));
            }
            l.config.validate()?;
        }
        if self.losses.len() > 1 && !names.contains("CE") {
            return bad("comparisons need a loss named \"CE\"".into());
        }
        Ok(())
    }
}

/// Runs every cell of the sweep on a pool of `jobs` workers.
///
/// Rows come back grouped by noise point, then seed, then loss, regardless
/// of how the work was scheduled. A failing run contributes an error row
/// (NaN train loss, no BLEU) and the sweep continues.
pub fn run_experiment(spec: &ExperimentSpec, jobs: usize) -> Result<Vec<RunResult>, HarnessError> {
    spec.validate()?;
    let cells: Vec<(&NoiseSpec, u64)> = spec
        .noise
        .iter()
        .flat_map(|n| spec.seeds.iter().map(move |&s| (n, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let groups: Vec<Vec<RunResult>> =
        pool.install(|| cells.par_iter().map(|&(noise, seed)| run_cell(spec, noise, seed)).collect());
    Ok(groups.into_iter().flatten().collect())
}

type PretrainCache = HashMap<String, (Trainer, f64, f64)>;

fn result_row(spec: &ExperimentSpec, loss: &str, noise: &NoiseSpec, seed: u64) -> impl Fn(usize, f64, Option<f64>, f64) -> RunResult {
    let (experiment, loss, kind, level) = (spec.experiment.clone(), loss.to_string(), noise.kind, noise.intensity);
    move |epoch, train_loss, test_bleu, wall_s| RunResult {
        experiment: experiment.clone(),
        loss: loss.clone(),
        noise_kind: kind,
        noise_level: level,
        seed,
        epoch,
        train_loss,
        test_bleu,
        wall_s,
    }
}

/// CE-pretrains (or reuses a cached pretraining), then finetunes one loss,
/// pushing a row for the pretrained model and one per finetuning epoch.
/// `epoch` tracks the epoch in progress for error reporting.
#[allow(clippy::too_many_arguments)]
fn train_one(
    spec: &ExperimentSpec,
    named: &NamedLoss,
    noise: &NoiseSpec,
    seed: u64,
    splits: &Splits,
    cache: &mut PretrainCache,
    rows: &mut Vec<RunResult>,
    epoch: &mut usize,
) -> Result<Trainer, HarnessError> {
    let row = result_row(spec, &named.name, noise, seed);
    let mut config = named.config.clone();
    config.seed = seed;
    let key = config.pretrain_key();
    if !cache.contains_key(&key) {
        let t0 = Instant::now();
        let mut t = Trainer::new(config.clone(), spec.task.vocab_size, spec.task.max_len)?;
        let mut last = None;
        for _ in 0..config.ce_pretrain_epochs {
            last = Some(t.train_epoch(&splits.train, LossKind::Ce)?);
        }
        let last = match last {
            Some(l) => l,
            None => t.eval_loss(&splits.train, LossKind::Ce, seed)?,
        };
        cache.insert(key.clone(), (t, last, t0.elapsed().as_secs_f64()));
    }
    let (base, pre_loss, pre_wall) = &cache[&key];
    let mut trainer = base.clone().with_finetune(&config)?;
    // Wall time counts the (possibly shared) pretraining plus this run's finetuning.
    let finetune_start = Instant::now();
    let wall = || pre_wall + finetune_start.elapsed().as_secs_f64();
    rows.push(row(0, *pre_loss, Some(evaluate(&trainer.model, &splits.test)?), wall()));
    for e in 1..=config.epochs {
        *epoch = e;
        let loss = trainer.train_epoch(&splits.train, config.finetune)?;
        let score = evaluate(&trainer.model, &splits.test)?;
        rows.push(row(e, loss, Some(score), wall()));
    }
    Ok(trainer)
}

/// All losses for one (noise point, seed). CE pretraining is shared between
/// losses whose pretraining settings agree.
fn run_cell(spec: &ExperimentSpec, noise: &NoiseSpec, seed: u64) -> Vec<RunResult> {
    let splits = match synth_dataset(&spec.task, noise, seed) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("noise {} level {} seed {seed}: {e}", noise.kind, noise.intensity);
            return spec
                .losses
                .iter()
                .map(|l| result_row(spec, &l.name, noise, seed)(0, f64::NAN, None, 0.0))
                .collect();
        }
    };
    let mut cache = PretrainCache::new();
    let mut rows = Vec::new();
    for named in &spec.losses {
        let start = Instant::now();
        let mut epoch = 0;
        if let Err(e) = train_one(spec, named, noise, seed, &splits, &mut cache, &mut rows, &mut epoch) {
            eprintln!(
                "{} noise {} level {} seed {seed} epoch {epoch}: {e}",
                named.name, noise.kind, noise.intensity
            );
            let row = result_row(spec, &named.name, noise, seed);
            rows.push(row(epoch, f64::NAN, None, start.elapsed().as_secs_f64()));
        }
    }
    rows
}

/// Trains a single loss of `spec` on one noise point and seed, returning
/// its rows and the trained model. Failures are returned, not recorded.
pub fn run_single(
    spec: &ExperimentSpec,
    loss: &str,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<(Vec<RunResult>, Model), HarnessError> {
    spec.validate()?;
    noise.validate()?;
    let named = spec
        .losses
        .iter()
        .find(|l| l.name == loss)
        .ok_or_else(|| HarnessError::InvalidSpec(format!("no loss named '{loss}'")))?;
    let splits = synth_dataset(&spec.task, noise, seed)?;
    let mut rows = Vec::new();
    let trainer = train_one(spec, named, noise, seed, &splits, &mut PretrainCache::new(), &mut rows, &mut 0)?;
    Ok((rows, trainer.model))
}
