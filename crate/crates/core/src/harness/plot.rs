use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_csv, HarnessError, RunResult};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const TICKS: usize = 5;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotMetric {
    #[default]
    TestBleu,
    TrainLoss,
}

impl PlotMetric {
    fn label(self) -> &'static str {
        match self {
            PlotMetric::TestBleu => "clean-test BLEU",
            PlotMetric::TrainLoss => "loss",
        }
    }

    fn value(self, r: &RunResult) -> Option<f64> {
        let v = match self {
            PlotMetric::TestBleu => r.test_bleu?,
            PlotMetric::TrainLoss => r.train_loss,
        };
        v.is_finite().then_some(v)
    }
}

type Series = BTreeMap<String, Vec<(f64, f64)>>;

/// Mean over seeds of each run's last epoch, one series per loss (split by
/// noise kind when the rows mix kinds), x = noise level.
fn series(rows: &[RunResult], metric: PlotMetric) -> Series {
    let mixed_kinds = rows.windows(2).any(|w| w[0].noise_kind != w[1].noise_kind);
    // (series, level bits, seed) -> (epoch, value) of the latest row
    let mut last: BTreeMap<(String, u64, u64), (usize, Option<f64>)> = BTreeMap::new();
    for r in rows {
        let name = if mixed_kinds {
            format!("{} ({})", r.loss, r.noise_kind)
        } else {
            r.loss.clone()
        };
        let key = (name, r.noise_level.to_bits(), r.seed);
        let v = metric.value(r);
        match last.get(&key) {
            Some(&(e, _)) if e > r.epoch => {}
            _ => {
                last.insert(key, (r.epoch, v));
            }
        }
    }
    let mut sums: BTreeMap<String, BTreeMap<u64, (f64, usize)>> = BTreeMap::new();
    for ((name, level, _), (_, v)) in last {
        if let Some(v) = v {
            let cell = sums.entry(name).or_default().entry(level).or_insert((0.0, 0));
            cell.0 += v;
            cell.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(name, cells)| {
            let mut pts: Vec<(f64, f64)> = cells
                .into_iter()
                .map(|(level, (s, n))| (f64::from_bits(level), s / n as f64))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (name, pts)
        })
        .collect()
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        (lo - pad, hi + pad)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders rows as an SVG 1.1 line chart. Output depends only on the rows.
pub fn render_plot(rows: &[RunResult], metric: PlotMetric) -> String {
    let data = series(rows, metric);
    let (x0, x1) = range(data.values().flatten().map(|p| p.0));
    let (y0, y1) = range(data.values().flatten().map(|p| p.1));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black"><line x1="{LEFT}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.2}"/></g>"#,
        TOP + ph,
        LEFT + pw,
        TOP + ph,
        TOP + ph
    );
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{xv:.3}</text>"#,
            TOP + ph,
            TOP + ph + 5.0,
            TOP + ph + 18.0
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.3}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">noise level</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.2}" text-anchor="middle" transform="rotate(-90 15 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        metric.label()
    );
    for (i, (name, pts)) in data.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            s,
            r#"<g class="legend"><line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text></g>"#,
            lx + 20.0,
            lx + 25.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn emit_plot(csv_path: &Path, out_path: &Path, metric: PlotMetric) -> Result<(), HarnessError> {
    let rows = read_csv(csv_path)?;
    std::fs::write(out_path, render_plot(&rows, metric)).map_err(|source| HarnessError::Io {
        path: out_path.to_path_buf(),
        source,
    })
}
