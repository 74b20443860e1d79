use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::metrics::ProbeRow;
use crate::noise::NoiseKind;

pub const CSV_HEADER: &str = "experiment,loss,noise_kind,noise_level,seed,epoch,train_loss,test_bleu,wall_s";

/// One measured point of a training curve.
///
/// `test_bleu` is empty for rows that carry no evaluation (failed runs and
/// probe rows). A failed run also has a NaN `train_loss`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub experiment: String,
    pub loss: String,
    pub noise_kind: NoiseKind,
    pub noise_level: f64,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub test_bleu: Option<f64>,
    pub wall_s: f64,
}

impl RunResult {
    pub fn is_error(&self) -> bool {
        self.train_loss.is_nan() && self.test_bleu.is_none()
    }
}

/// Probe values as result rows: the loss value goes to `train_loss`.
pub fn probe_results(rows: &[ProbeRow], experiment: &str) -> Vec<RunResult> {
    rows.iter()
        .map(|r| RunResult {
            experiment: experiment.to_string(),
            loss: r.loss.clone(),
            noise_kind: r.noise_kind,
            noise_level: r.level,
            seed: r.seed,
            epoch: 0,
            train_loss: r.value,
            test_bleu: None,
            wall_s: 0.0,
        })
        .collect()
}

pub fn write_csv<W: Write>(rows: &[RunResult], out: W) -> Result<(), csv::Error> {
    let mut out = out;
    writeln!(out, "{CSV_HEADER}")?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(rows: &[RunResult], path: &Path) -> Result<(), HarnessError> {
    let io = |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    write_csv(rows, BufWriter::new(file)).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(e) => io(e),
        other => HarnessError::Csv {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{other:?}"),
        },
    })
}

/// Parses a results file. Errors carry the 1-based line number.
pub fn read_csv(path: &Path) -> Result<Vec<RunResult>, HarnessError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let err = |line: u64, message: String| HarnessError::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };
    match text.lines().next() {
        Some(h) if h == CSV_HEADER => {}
        Some(h) => return Err(err(1, format!("unexpected header '{h}'"))),
        None => return Err(err(1, "empty file".into())),
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.deserialize::<RunResult>() {
        match rec {
            Ok(r) => rows.push(r),
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return Err(err(line, e.to_string()));
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, proptest, ProptestConfig};

    fn sample(seed: u64, bleu: Option<f64>) -> RunResult {
        RunResult {
            experiment: "sweep".into(),
            loss: "EISL".into(),
            noise_kind: NoiseKind::Synthetic,
            noise_level: 6.0,
            seed,
            epoch: 3,
            train_loss: 1.0 / 3.0,
            test_bleu: bleu,
            wall_s: 12.5,
        }
    }

    fn to_string(rows: &[RunResult]) -> String {
        let mut buf = Vec::new();
        write_csv(rows, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn empty_rows_give_header_only() {
        assert_eq!(to_string(&[]), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn one_row_two_lines() {
        let s = to_string(&[sample(1, Some(0.25))]);
        let lines: Vec<_> = s.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], "sweep,EISL,synthetic,6.0,1,3,0.3333333333333333,0.25,12.5");
        assert!(s.ends_with('\n'));
    }

    #[test]
    fn file_round_trip_with_error_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let mut failed = sample(2, None);
        failed.train_loss = f64::NAN;
        let rows = vec![sample(0, Some(0.5)), failed];
        emit_csv(&rows, &path).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].is_error());
        assert_eq!(back[1].seed, 2);
    }

    #[test]
    fn malformed_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let good = to_string(&[sample(0, Some(0.5)), sample(1, Some(0.5))]);
        std::fs::write(&path, format!("{good}sweep,CE,synthetic,oops,0,0,1.0,,0\n")).unwrap();
        match read_csv(&path) {
            Err(HarnessError::Csv { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "a,b\n").unwrap();
        assert!(matches!(read_csv(&path), Err(HarnessError::Csv { line: 1, .. })));
    }

    #[test]
    fn unwritable_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("r.csv");
        assert!(matches!(emit_csv(&[], &path), Err(HarnessError::Io { .. })));
    }

    #[test]
    fn probe_rows_convert() {
        let rows = probe_results(
            &[ProbeRow {
                noise_kind: NoiseKind::Shuffle,
                level: 2.0,
                seed: 7,
                loss: "CE".into(),
                value: 55.2,
            }],
            "probe",
        );
        assert_eq!(rows[0].noise_level, 2.0);
        assert_eq!(rows[0].train_loss, 55.2);
        assert_eq!(rows[0].test_bleu, None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn parse_back_is_exact(
            vals in prop::collection::vec((any::<u64>(), 0usize..100, -1e6f64..1e6, prop::option::of(0.0f64..=1.0), 0.0f64..1e4), 0..8)
        ) {
            let rows: Vec<RunResult> = vals
                .iter()
                .map(|&(seed, epoch, loss, bleu, wall)| RunResult {
                    seed,
                    epoch,
                    train_loss: loss,
                    test_bleu: bleu,
                    wall_s: wall,
                    ..sample(0, None)
                })
                .collect();
            let s = to_string(&rows);
            let mut reader = csv::Reader::from_reader(s.as_bytes());
            let back: Vec<RunResult> = reader.deserialize().collect::<Result<_, _>>().unwrap();
            assert_eq!(back, rows);
        }
    }
}
