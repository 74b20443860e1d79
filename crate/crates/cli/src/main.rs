use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use eisl_core::eisl::{ce_loss, eisl_loss, EislConfig, LogProbMatrix};
use eisl_core::harness::{
    bench_loss, emit_csv, emit_plot, probe_results, run_experiment, run_single, ExperimentSpec, PlotMetric, RunResult,
};
use eisl_core::metrics::{bleu, sensitivity_probe, BleuConfig, ProbeLoss};
use eisl_core::models::Vocab;
use eisl_core::noise::{NoiseKind, NoiseSpec};
use eisl_core::numerics::{Tape, Tensor};
use eisl_core::Token;

#[derive(Parser, Debug)]
#[command(name = "eisl", version, about = "Edit-invariant sequence loss experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON experiment description (defaults to the built-in noise sweep).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed list of the experiment with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Replace Gumbel noise in position selection by zeros.
    #[arg(long, global = true)]
    deterministic_gumbel: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// EISL, CE and BLEU of a candidate against a reference.
    Score(ScoreArgs),
    /// Loss sensitivity to reference noise for a model that is certain of
    /// the clean reference.
    Probe(ProbeArgs),
    /// One loss, one noise point, one seed; saves the trained model.
    Train(TrainArgs),
    /// The full grid of the experiment.
    Sweep,
    /// Loss wall time against sequence length.
    Bench(BenchArgs),
    /// Renders a results CSV as SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Candidate tokens, e.g. "3 4 5". Scored as a one-hot model output.
    #[arg(long, conflicts_with = "logp")]
    candidate: Option<String>,
    /// JSON array of rows of log-probabilities (T x V) instead of a candidate.
    #[arg(long)]
    logp: Option<PathBuf>,
    #[arg(long)]
    reference: String,
    /// Defaults to one more than the largest token seen.
    #[arg(long)]
    vocab: Option<usize>,
    /// Comma-separated gram orders.
    #[arg(long, default_value = "1,2")]
    orders: String,
    /// Comma-separated weights, one per order.
    #[arg(long, default_value = "0.8,0.2")]
    weights: String,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long, value_enum, default_value_t = Kind::Shuffle)]
    noise: Kind,
    /// Comma-separated noise intensities.
    #[arg(long, default_value = "0,1,2,3,4,5,6,7,8,9,10")]
    levels: String,
    #[arg(long, default_value_t = 10)]
    len: usize,
    #[arg(long, default_value_t = 32)]
    vocab: usize,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value = "EISL")]
    loss: String,
    /// Index into the experiment's noise grid.
    #[arg(long, default_value_t = 0)]
    noise_index: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated sequence lengths.
    #[arg(long, default_value = "64,128,256")]
    lengths: String,
    #[arg(long, default_value_t = 2)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
}

#[derive(Args, Debug)]
struct PlotArgs {
    input: PathBuf,
    /// Defaults to the input path with an .svg extension.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Metric::TestBleu)]
    metric: Metric,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Shuffle,
    Repetition,
    Blank,
    Synthetic,
}

impl From<Kind> for NoiseKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Shuffle => NoiseKind::Shuffle,
            Kind::Repetition => NoiseKind::Repetition,
            Kind::Blank => NoiseKind::Blank,
            Kind::Synthetic => NoiseKind::Synthetic,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Metric {
    TestBleu,
    TrainLoss,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split([',', ' '])
        .filter(|p| !p.is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|e| anyhow::anyhow!("bad {what} '{p}': {e}")))
        .collect()
}

impl Global {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => ExperimentSpec::default(),
        };
        if let Some(seed) = self.seed {
            spec.seeds = vec![seed];
        }
        if self.deterministic_gumbel {
            for l in &mut spec.losses {
                l.config.eisl.deterministic_mode = true;
            }
        }
        if let Some(dir) = &self.out_dir {
            spec.output_dir = Some(dir.clone());
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Output directory, created if missing.
    fn out_dir(&self, spec_dir: Option<&Path>) -> Result<PathBuf> {
        let dir = self
            .out_dir
            .clone()
            .or_else(|| spec_dir.map(Path::to_path_buf))
            .unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

fn score(g: &Global, a: &ScoreArgs) -> Result<()> {
    let reference: Vec<Token> = parse_list(&a.reference, "token")?;
    let orders: Vec<usize> = parse_list(&a.orders, "order")?;
    let weights: Vec<f64> = parse_list(&a.weights, "weight")?;
    let eisl_cfg = EislConfig {
        gram_orders: orders,
        gram_weights: weights,
        deterministic_mode: g.deterministic_gumbel,
        ..EislConfig::default()
    };
    eisl_cfg.validate()?;

    let mut tape = Tape::new();
    let (logp, candidate) = match (&a.candidate, &a.logp) {
        (Some(c), _) => {
            let cand: Vec<Token> = parse_list(c, "token")?;
            let max = cand.iter().chain(&reference).max().copied().unwrap_or(0);
            let vocab = a.vocab.unwrap_or(max + 1);
            (LogProbMatrix::one_hot(&mut tape, &cand, vocab)?, cand)
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let rows: Vec<Vec<f64>> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let values = Tensor::from_rows(&rows)?;
            let cand: Vec<Token> = (0..values.rows()).map(|t| eisl_core::models::argmax(values.row_slice(t))).collect();
            (LogProbMatrix::from_log_probs(&mut tape, values)?, cand)
        }
        (None, None) => bail!("give --candidate or --logp"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed.unwrap_or(0));
    let eisl = eisl_loss(&mut tape, &logp, &reference, &eisl_cfg, &mut rng)?;
    println!("eisl\t{:.6}", tape.scalar(eisl));
    match ce_loss(&mut tape, &logp, &reference) {
        Ok(ce) => println!("ce\t{:.6}", tape.scalar(ce)),
        Err(_) => println!("ce\tundefined (length mismatch)"),
    }
    println!("bleu\t{:.2}", 100.0 * bleu(&candidate, &reference, &BleuConfig::default()));
    Ok(())
}

fn probe(g: &Global, a: &ProbeArgs) -> Result<()> {
    let levels: Vec<f64> = parse_list(&a.levels, "level")?;
    let vocab = Vocab::new(a.vocab)?;
    let base = g.seed.unwrap_or(0);
    let losses = vec![
        ProbeLoss::ce(),
        ProbeLoss::eisl(
            "EISL",
            EislConfig {
                deterministic_mode: g.deterministic_gumbel,
                ..EislConfig::noisy_target()
            },
        ),
    ];
    let mut rows = Vec::new();
    for seed in base..base + a.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference: Vec<Token> = {
            use rand::Rng;
            (0..a.len).map(|_| rng.gen_range(vocab.content())).collect()
        };
        let mut tape = Tape::new();
        let lp = LogProbMatrix::one_hot(&mut tape, &reference, a.vocab)?;
        let logp = tape.value(lp.node()).clone();
        let grid: Vec<NoiseSpec> = levels.iter().map(|&l| NoiseSpec::new(a.noise.into(), l, seed)).collect();
        rows.extend(sensitivity_probe(&logp, &reference, &grid, &losses, &mut rng)?);
    }
    let results = probe_results(&rows, "probe");
    println!("loss\tlevel\tmean over seeds");
    for loss in ["CE", "EISL"] {
        for &level in &levels {
            let vals: Vec<f64> = results
                .iter()
                .filter(|r| r.loss == loss && r.noise_level == level)
                .map(|r| r.train_loss)
                .collect();
            // Adding zero turns a negative zero into a plain zero.
            println!("{loss}\t{level}\t{:.4}", vals.iter().sum::<f64>() / vals.len() as f64 + 0.0);
        }
    }
    let path = g.out_dir(None)?.join("probe.csv");
    emit_csv(&results, &path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn print_rows(rows: &[RunResult]) {
    for r in rows {
        let bleu = r.test_bleu.map_or("-".to_string(), |b| format!("{:.2}", 100.0 * b));
        println!(
            "{}\t{} {}\tseed {}\tepoch {}\tloss {:.4}\tbleu {}\t{:.1}s",
            r.loss, r.noise_kind, r.noise_level, r.seed, r.epoch, r.train_loss, bleu, r.wall_s
        );
    }
}

fn train(g: &Global, a: &TrainArgs) -> Result<()> {
    let spec = g.spec()?;
    let noise = spec
        .noise
        .get(a.noise_index)
        .with_context(|| format!("noise index {} out of range ({} points)", a.noise_index, spec.noise.len()))?;
    let seed = spec.seeds[0];
    let (rows, model) = run_single(&spec, &a.loss, noise, seed)?;
    print_rows(&rows);
    let dir = g.out_dir(spec.output_dir.as_deref())?;
    let csv = dir.join(format!("train_{}_{}_{}_s{seed}.csv", a.loss, noise.kind, noise.intensity));
    let ckpt = csv.with_extension("bin");
    emit_csv(&rows, &csv)?;
    model.save(&ckpt)?;
    eprintln!("wrote {} and {}", csv.display(), ckpt.display());
    Ok(())
}

fn sweep(g: &Global) -> Result<()> {
    let spec = g.spec()?;
    let rows = run_experiment(&spec, g.jobs)?;
    let finals: Vec<RunResult> = rows
        .iter()
        .filter(|r| r.epoch == spec.losses.iter().find(|l| l.name == r.loss).map_or(0, |l| l.config.epochs) || r.is_error())
        .cloned()
        .collect();
    print_rows(&finals);
    let dir = g.out_dir(spec.output_dir.as_deref())?;
    let csv = dir.join(format!("{}.csv", spec.experiment));
    emit_csv(&rows, &csv)?;
    let svg = csv.with_extension("svg");
    emit_plot(&csv, &svg, PlotMetric::TestBleu)?;
    eprintln!("wrote {} and {}", csv.display(), svg.display());
    if rows.iter().any(RunResult::is_error) {
        bail!("some runs failed; see error rows in {}", csv.display());
    }
    Ok(())
}

fn bench(g: &Global, a: &BenchArgs) -> Result<()> {
    let lengths: Vec<usize> = parse_list(&a.lengths, "length")?;
    let rows = bench_loss(&lengths, a.n, a.repeats, g.seed.unwrap_or(0))?;
    println!("T\teisl_median_s\teisl_mean_s\tce_median_s\tce_mean_s");
    for r in &rows {
        println!(
            "{}\t{:.3e}\t{:.3e}\t{:.3e}\t{:.3e}",
            r.len, r.eisl_median_s, r.eisl_mean_s, r.ce_median_s, r.ce_mean_s
        );
    }
    for w in rows.windows(2) {
        println!(
            "T {} -> {}: eisl x{:.2}, ce x{:.2}",
            w[0].len,
            w[1].len,
            w[1].eisl_median_s / w[0].eisl_median_s,
            w[1].ce_median_s / w[0].ce_median_s
        );
    }
    Ok(())
}

fn plot(a: &PlotArgs) -> Result<()> {
    let out = a.output.clone().unwrap_or_else(|| a.input.with_extension("svg"));
    let metric = match a.metric {
        Metric::TestBleu => PlotMetric::TestBleu,
        Metric::TrainLoss => PlotMetric::TrainLoss,
    };
    emit_plot(&a.input, &out, metric)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let g = &cli.global;
    match &cli.command {
        Command::Score(a) => score(g, a),
        Command::Probe(a) => probe(g, a),
        Command::Train(a) => train(g, a),
        Command::Sweep => sweep(g),
        Command::Bench(a) => bench(g, a),
        Command::Plot(a) => plot(a),
    }
}
