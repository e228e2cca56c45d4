//! Curve CSVs, the summary JSON and SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use diff2_core::framework::RoundRecord;
use serde::{Deserialize, Serialize};

use crate::experiment::{AlgoResult, Comparison, ExperimentConfig, HarnessError};

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct CurveRow {
    round: u64,
    train_loss: f64,
    train_sq_grad_norm: f64,
    test_loss: Option<f64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> HarnessError + '_ {
    move |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_curve_csv(path: &Path, records: &[RoundRecord]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in records {
        w.serialize(CurveRow {
            round: r.round,
            train_loss: r.train_loss,
            train_sq_grad_norm: r.train_sq_grad_norm,
            test_loss: r.test_loss,
        })
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<RoundRecord>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize::<CurveRow>()
        .map(|row| {
            let row = row.map_err(csv_err(path))?;
            Ok(RoundRecord {
                round: row.round,
                train_loss: row.train_loss,
                train_sq_grad_norm: row.train_sq_grad_norm,
                test_loss: row.test_loss,
            })
        })
        .collect()
}

/// Top-level summary document.
#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub config: ExperimentConfig,
    pub algos: Vec<AlgoResult>,
    pub comparisons: Vec<Comparison>,
    pub curves: Vec<String>,
}

pub const SUMMARY_SCHEMA: &str = "diff2-summary/1";

pub fn curve_file_name(algo: &str, seed: u64, criterion: &str) -> String {
    format!("{algo}_seed{seed}_{criterion}.csv")
}

/// Which per-seed winner supplies each plotted criterion.
const PLOTS: [(&str, &str, bool); 3] = [
    ("train_loss", "train loss", false),
    ("train_sq_grad_norm", "squared train gradient norm", true),
    ("test_loss", "test loss", false),
];

fn series(r: &AlgoResult, criterion: &str) -> Vec<Vec<(u64, f64)>> {
    r.seeds
        .iter()
        .map(|s| {
            let recs = if criterion == "train_sq_grad_norm" { &s.grad.records } else { &s.train.records };
            recs.iter()
                .filter_map(|rec| {
                    let v = match criterion {
                        "train_loss" => Some(rec.train_loss),
                        "train_sq_grad_norm" => Some(rec.train_sq_grad_norm),
                        _ => rec.test_loss,
                    };
                    v.map(|v| (rec.round, v))
                })
                .collect()
        })
        .collect()
}

/// Write every output for one experiment and return the created paths.
pub fn emit_outputs(
    out_dir: &Path,
    config: &ExperimentConfig,
    results: &[AlgoResult],
    comparisons: &[Comparison],
) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    let mut curves = Vec::new();
    for r in results {
        for s in &r.seeds {
            for (criterion, records) in [("train_loss", &s.train.records), ("train_sq_grad_norm", &s.grad.records)] {
                let name = curve_file_name(r.algo.name(), s.seed, criterion);
                let path = out_dir.join(&name);
                write_curve_csv(&path, records)?;
                curves.push(name);
                written.push(path);
            }
        }
    }
    for (criterion, label, _) in PLOTS {
        let lines: Vec<(String, Vec<Vec<(u64, f64)>>)> =
            results.iter().map(|r| (r.algo.name().to_string(), series(r, criterion))).collect();
        let path = out_dir.join(format!("{criterion}.svg"));
        fs::write(&path, svg_plot(label, &lines)).map_err(io_err(&path))?;
        written.push(path);
    }
    let summary = Summary {
        schema: SUMMARY_SCHEMA.to_string(),
        config: config.clone(),
        algos: results.to_vec(),
        comparisons: comparisons.to_vec(),
        curves,
    };
    let path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|source| HarnessError::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    written.push(path);
    Ok(written)
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Per-round mean and sample std across seeds, over rounds present in every seed.
pub fn band(seeds: &[Vec<(u64, f64)>]) -> Vec<(u64, f64, f64)> {
    let Some(first) = seeds.first() else { return Vec::new() };
    let len = seeds.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let vals: Vec<f64> = seeds.iter().map(|s| s[i].1).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (first[i].0, mean, sd)
        })
        .collect()
}

/// Line plot with log-scaled y, one mean line and ±std band per series.
pub fn svg_plot(ylabel: &str, lines: &[(String, Vec<Vec<(u64, f64)>>)]) -> String {
    let (w, h, ml, mr, mt, mb) = (720.0, 440.0, 70.0, 150.0, 20.0, 50.0);
    let bands: Vec<(&str, Vec<(u64, f64, f64)>)> = lines.iter().map(|(n, s)| (n.as_str(), band(s))).collect();
    let floor = 1e-12;
    let mut ys = bands
        .iter()
        .flat_map(|(_, b)| b.iter().flat_map(|&(_, m, s)| [(m - s).max(floor), m + s]))
        .filter(|v| v.is_finite() && *v > 0.0);
    let (mut lo, mut hi) = match ys.next() {
        Some(v) => ys.fold((v, v), |(a, b), v| (a.min(v), b.max(v))),
        None => (1.0, 10.0),
    };
    if hi / lo < 10.0 {
        lo /= 3.0;
        hi *= 3.0;
    }
    let (llo, lhi) = (lo.log10(), hi.log10());
    let xmax = bands.iter().flat_map(|(_, b)| b.last().map(|p| p.0)).max().unwrap_or(1).max(1) as f64;
    let px = |r: u64| ml + (r as f64 / xmax) * (w - ml - mr);
    let py = |v: f64| {
        let v = v.max(lo).min(hi);
        mt + (lhi - v.log10()) / (lhi - llo) * (h - mt - mb)
    };

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (ml, w - mr, mt, h - mb);
    let _ = writeln!(s, r#"<path d="M{x0},{y0} L{x0},{y1} L{x1},{y1}" fill="none" stroke="black"/>"#);
    for e in (llo.floor() as i32)..=(lhi.ceil() as i32) {
        let v = 10f64.powi(e);
        if v < lo || v > hi {
            continue;
        }
        let y = py(v);
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="#ddd"/>"##);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">1e{e}</text>"#, x0 - 6.0, y + 4.0);
    }
    for i in 0..=4 {
        let r = (xmax * i as f64 / 4.0).round() as u64;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{r}</text>"#, px(r), y1 + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">round</text>"#, (x0 + x1) / 2.0, h - 8.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" transform="rotate(-90 16 {:.2})" text-anchor="middle">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
    for (i, (name, b)) in bands.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if !b.is_empty() {
            let mut area = String::new();
            for (j, &(r, m, sd)) in b.iter().enumerate() {
                let _ = write!(area, "{}{:.2},{:.2} ", if j == 0 { "M" } else { "L" }, px(r), py(m + sd));
            }
            for &(r, m, sd) in b.iter().rev() {
                let _ = write!(area, "L{:.2},{:.2} ", px(r), py((m - sd).max(floor)));
            }
            let _ = writeln!(s, r#"<path d="{}Z" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, area.trim_end());
            let pts: Vec<String> = b.iter().map(|&(r, m, _)| format!("{:.2},{:.2}", px(r), py(m))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
        }
        let ly = mt + 16.0 * (i as f64 + 1.0);
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#, x1 + 10.0, x1 + 30.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x1 + 36.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
