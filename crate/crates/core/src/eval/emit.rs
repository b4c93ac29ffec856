//! CSV tables and SVG plots. Numbers are written with fixed precision and
//! rows in a fixed order so identical reports give identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AblationCurve, EvalReport, RankerResult, HISTOGRAM_BINS};
use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Config and upstream artifact hashes the numbers were produced from.
    pub provenance: BTreeMap<String, String>,
    pub generation: Vec<EvalReport>,
    pub ranker: Vec<RankerResult>,
    pub ablations: Vec<AblationCurve>,
}

fn num(x: f64) -> String {
    format!("{x:.6}")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e.to_string()) }
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().at(path)
}

/// Writes every table and plot the report has data for into `dir`:
/// `generation.csv`, `histogram.csv/.svg`, `topk.csv/.svg`, `ranker.csv`,
/// `ablation_<name>.csv/.svg`, plus the full report as `report.json`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    if !report.generation.is_empty() {
        let rows = report
            .generation
            .iter()
            .map(|r| {
                vec![
                    r.method.clone(),
                    r.seed.to_string(),
                    num(r.fraction),
                    r.contexts.to_string(),
                    num(r.click),
                    num(r.similarity),
                    num(r.token_f1),
                    num(r.bleu),
                    r.perplexity.map(num).unwrap_or_default(),
                ]
            })
            .collect();
        write_csv(
            &dir.join("generation.csv"),
            &["method", "seed", "fraction", "contexts", "click", "similarity", "token_f1", "bleu", "ref_perplexity"],
            rows,
        )?;

        let mut rows = Vec::new();
        for r in &report.generation {
            for (b, m) in r.histogram.iter().enumerate() {
                let lo = b as f64 / HISTOGRAM_BINS as f64;
                rows.push(vec![r.method.clone(), num(lo), num(lo + 1.0 / HISTOGRAM_BINS as f64), num(*m)]);
            }
        }
        write_csv(&dir.join("histogram.csv"), &["method", "bin_lo", "bin_hi", "mass"], rows)?;
        let series: Vec<Series> = report
            .generation
            .iter()
            .map(|r| Series { name: r.method.clone(), points: r.histogram.iter().enumerate().map(|(b, &m)| (b as f64, m)).collect() })
            .collect();
        let labels: Vec<String> = (0..HISTOGRAM_BINS).map(|b| format!("{:.1}", b as f64 / HISTOGRAM_BINS as f64)).collect();
        write_svg(&dir.join("histogram.svg"), &svg_bar_chart("Greedy response similarity", "similarity bin", "share of responses", &labels, &series))?;

        if report.generation.iter().any(|r| !r.top_k.is_empty()) {
            let mut rows = Vec::new();
            for r in &report.generation {
                for (k, v) in r.top_k.iter().enumerate() {
                    rows.push(vec![r.method.clone(), (k + 1).to_string(), num(*v)]);
                }
            }
            write_csv(&dir.join("topk.csv"), &["method", "k", "best_of_k_reward"], rows)?;
            let series: Vec<Series> = report
                .generation
                .iter()
                .filter(|r| !r.top_k.is_empty())
                .map(|r| Series { name: r.method.clone(), points: r.top_k.iter().enumerate().map(|(k, &v)| ((k + 1) as f64, v)).collect() })
                .collect();
            write_svg(&dir.join("topk.svg"), &svg_line_chart("Best of k sampled responses", "k", "mean reward", &series))?;
        }
    }
    if !report.ranker.is_empty() {
        let rows = report
            .ranker
            .iter()
            .map(|r| vec![r.method.clone(), r.seed.to_string(), r.sets.to_string(), num(r.mean_reward), r.candidates_hash.clone()])
            .collect();
        write_csv(&dir.join("ranker.csv"), &["method", "seed", "sets", "mean_reward", "candidates_sha256"], rows)?;
    }
    for curve in &report.ablations {
        let rows = curve
            .points
            .iter()
            .map(|p| vec![num(p.x), p.method.clone(), p.records.to_string(), num(p.click), num(p.similarity), num(p.token_f1), num(p.bleu)])
            .collect();
        let stem = format!("ablation_{}", curve.name);
        write_csv(&dir.join(format!("{stem}.csv")), &["x", "method", "records", "click", "similarity", "token_f1", "bleu"], rows)?;
        let mut methods: Vec<&str> = curve.points.iter().map(|p| p.method.as_str()).collect();
        methods.dedup();
        let series: Vec<Series> =
            methods.iter().map(|m| Series { name: m.to_string(), points: curve.series(m).iter().map(|p| (p.x, p.similarity)).collect() }).collect();
        write_svg(&dir.join(format!("{stem}.svg")), &svg_line_chart(&format!("Ablation: {}", curve.param), &curve.param, "mean similarity", &series))?;
    }
    let json = serde_json::to_string_pretty(report)?;
    let path = dir.join("report.json");
    std::fs::write(&path, json + "\n").at(&path)
}

fn write_svg(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg).at(path)
}

/// One named line or bar group.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(title: &str, x_label: &str, y_label: &str, y_max: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let (x0, y0, x1) = (LEFT, H - BOTTOM, W - RIGHT);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{TOP}" stroke="black"/>"#);
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y0 - (y0 - TOP) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, x0 - 6.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (y0 + TOP) / 2.0,
        (y0 + TOP) / 2.0,
        escape(y_label)
    );
    s
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 18.0 * i as f64;
        let x = W - RIGHT + 16.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="12" height="12" fill="{}"/>"#, COLORS[i % COLORS.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x + 18.0, y + 10.0, escape(name));
    }
}

fn y_scale(series: &[Series]) -> f64 {
    let m = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).fold(0.0, f64::max);
    if m <= 0.0 {
        1.0
    } else {
        m * 1.1
    }
}

pub fn svg_line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let y_max = y_scale(series);
    let mut s = frame(title, x_label, y_label, y_max);
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |x: f64| LEFT + 10.0 + (W - RIGHT - LEFT - 20.0) * (x - lo) / span;
    let py = |y: f64| H - BOTTOM - (H - BOTTOM - TOP) * y / y_max;
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for x in ticks {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, px(x), H - BOTTOM + 16.0, format_tick(x));
    }
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for &(x, y) in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
    }
    legend(&mut s, &series.iter().map(|s| s.name.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

fn format_tick(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e6 {
        format!("{x:.0}")
    } else {
        let t = format!("{x:.3}");
        t.trim_end_matches('0').to_string()
    }
}

/// Grouped bars: point `i` of every series is drawn in category `i`.
pub fn svg_bar_chart(title: &str, x_label: &str, y_label: &str, categories: &[String], series: &[Series]) -> String {
    let y_max = y_scale(series);
    let mut s = frame(title, x_label, y_label, y_max);
    let slot = (W - RIGHT - LEFT) / categories.len().max(1) as f64;
    let bar = slot * 0.8 / series.len().max(1) as f64;
    for (c, label) in categories.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, LEFT + slot * (c as f64 + 0.5), H - BOTTOM + 16.0, escape(label));
    }
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        for (c, &(_, y)) in ser.points.iter().enumerate() {
            let h = (H - BOTTOM - TOP) * y / y_max;
            let x = LEFT + slot * c as f64 + slot * 0.1 + bar * i as f64;
            let _ = writeln!(s, r#"<rect x="{x:.1}" y="{:.1}" width="{bar:.1}" height="{h:.1}" fill="{color}"/>"#, H - BOTTOM - h);
        }
    }
    legend(&mut s, &series.iter().map(|s| s.name.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}
