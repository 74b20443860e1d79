use eisl_core::eisl::EislConfig;
use eisl_core::harness::{
    emit_csv, emit_plot, read_csv, run_experiment, run_single, synth_dataset, ExperimentSpec, NamedLoss, PlotMetric,
    RunResult, TaskSpec,
};
use eisl_core::models::{Model, ModelKind};
use eisl_core::noise::{NoiseKind, NoiseSpec};
use eisl_core::train::{evaluate, LossKind, ModelConfig, TrainConfig};

fn spec() -> ExperimentSpec {
    let base = TrainConfig {
        epochs: 2,
        ce_pretrain_epochs: 2,
        batch_size: 8,
        learning_rate: 0.01,
        model: ModelConfig {
            kind: ModelKind::NonAutoregressive,
            hidden: 8,
        },
        ..TrainConfig::default()
    };
    ExperimentSpec {
        experiment: "e2e".into(),
        task: TaskSpec {
            vocab_size: 12,
            min_len: 3,
            max_len: 6,
            train_size: 48,
            val_size: 6,
            test_size: 12,
        },
        noise: vec![NoiseSpec::new(NoiseKind::Synthetic, 0.0, 0), NoiseSpec::new(NoiseKind::Synthetic, 4.0, 0)],
        losses: vec![
            NamedLoss {
                name: "CE".into(),
                config: base.clone(),
            },
            NamedLoss {
                name: "EISL".into(),
                config: TrainConfig {
                    finetune: LossKind::Eisl,
                    eisl: EislConfig::noisy_target(),
                    ..base
                },
            },
        ],
        seeds: vec![3],
        output_dir: None,
    }
}

fn without_timing(rows: Vec<RunResult>) -> Vec<RunResult> {
    rows.into_iter().map(|r| RunResult { wall_s: 0.0, ..r }).collect()
}

#[test]
fn csv_files_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = spec();
    let mut files = Vec::new();
    for (i, jobs) in [1, 2].into_iter().enumerate() {
        let rows = without_timing(run_experiment(&spec, jobs).unwrap());
        assert_eq!(rows.len(), 2 * 2 * 3);
        assert!(rows.iter().all(|r| !r.is_error()));
        let path = dir.path().join(format!("run{i}.csv"));
        emit_csv(&rows, &path).unwrap();
        assert_eq!(read_csv(&path).unwrap(), rows);
        files.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(files[0], files[1]);

    let svg = dir.path().join("run0.svg");
    emit_plot(&dir.path().join("run0.csv"), &svg, PlotMetric::TestBleu).unwrap();
    let svg = std::fs::read_to_string(svg).unwrap();
    assert_eq!(svg.matches("class=\"series\"").count(), 2);
}

#[test]
fn checkpoint_reproduces_reported_bleu() {
    let spec = spec();
    let noise = spec.noise[1];
    let (rows, model) = run_single(&spec, "EISL", &noise, 3).unwrap();
    let last = rows.last().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    let test = synth_dataset(&spec.task, &noise, 3).unwrap().test;
    assert_eq!(evaluate(&loaded, &test).unwrap(), last.test_bleu.unwrap());
}
