//! Figures and tables regenerated from the CSVs of a results directory.
//! Output is a pure function of those CSVs, so rerunning on unchanged
//! inputs rewrites identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use tosc_core::metrics::{MetricsRecord, TimingRecord};
use tosc_core::Error;

use crate::error::Result;
use crate::runner::{read_metrics, read_timing, METRICS, TIMING};

pub const REPORT_DIR: &str = "report";

/// Every `metrics.csv` (and `timing.csv`, when present) under
/// `<dir>/<label>/<seed>/`, in path order.
pub fn collect(dir: &Path) -> Result<(Vec<MetricsRecord>, Vec<TimingRecord>)> {
    let mut metrics = Vec::new();
    let mut timing = Vec::new();
    if !dir.is_dir() {
        return Err(Error::NotFound(format!("results directory {}", dir.display())).into());
    }
    let mut runs: Vec<PathBuf> = Vec::new();
    for label in sorted_dirs(dir)? {
        for seed in sorted_dirs(&label)? {
            if seed.join(METRICS).is_file() {
                runs.push(seed);
            }
        }
    }
    for run in runs {
        metrics.extend(read_metrics(&run.join(METRICS))?);
        if run.join(TIMING).is_file() {
            timing.extend(read_timing(&run.join(TIMING))?);
        }
    }
    Ok((metrics, timing))
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    v.sort();
    Ok(v)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; 0 for a single value.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' }).collect()
}

/// One plotted line: `(snr, mean over seeds)` points.
struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

fn series(rows: &[&MetricsRecord], value: impl Fn(&MetricsRecord) -> Option<f64>) -> Vec<Series> {
    let mut by: BTreeMap<&str, BTreeMap<u64, (f64, Vec<f64>)>> = BTreeMap::new();
    for r in rows {
        if let Some(v) = value(r).filter(|v| v.is_finite()) {
            let key = r.snr_db.to_bits() ^ (1 << 63);
            by.entry(&r.scheme).or_default().entry(key).or_insert((r.snr_db, Vec::new())).1.push(v);
        }
    }
    by.into_iter()
        .map(|(name, pts)| {
            let mut points: Vec<(f64, f64)> = pts.into_values().map(|(s, v)| (s, mean(&v))).collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { name: name.to_string(), points }
        })
        .filter(|s| !s.points.is_empty())
        .collect()
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn line_plot(title: &str, y_label: &str, series: &[Series], y_min: Option<f64>, provenance: &str) -> String {
    let (w, h) = (640.0, 420.0);
    let (l, r, t, b) = (64.0, 170.0, 36.0, 48.0);
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    let (mut x0, mut x1) = (xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    if x0 == x1 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    let mut y0 = y_min.unwrap_or_else(|| ys.iter().copied().fold(f64::INFINITY, f64::min).min(0.0));
    let mut y1 = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(y1 > y0) {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    if y_min.is_none() {
        y0 -= pad;
    }
    y1 += pad;
    let px = |x: f64| l + (x - x0) / (x1 - x0) * (w - l - r);
    let py = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, "<!-- {provenance} -->");
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, (w - r + l) / 2.0, esc(title));
    let _ = writeln!(s, r#"<line x1="{l}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#, h - b, w - r, h - b);
    let _ = writeln!(s, r#"<line x1="{l}" y1="{t}" x2="{l}" y2="{:.1}" stroke="black"/>"#, h - b);
    let ticks: BTreeSet<u64> = xs.iter().map(|x| x.to_bits()).collect();
    for bits in ticks {
        let x = f64::from_bits(bits);
        let _ = writeln!(s, r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="black"/><text x="{0:.1}" y="{3:.1}" text-anchor="middle">{x}</text>"#, px(x), h - b, h - b + 4.0, h - b + 18.0);
    }
    for i in 0..=5 {
        let y = y0 + (y1 - y0) * i as f64 / 5.0;
        let _ = writeln!(s, r#"<line x1="{0:.1}" y1="{1:.1}" x2="{2:.1}" y2="{1:.1}" stroke="lightgray"/><text x="{3:.1}" y="{4:.1}" text-anchor="end">{y:.2}</text>"#, l, py(y), w - r, l - 6.0, py(y) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">SNR (dB)</text>"#, (w - r + l) / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="16" y="{0:.1}" text-anchor="middle" transform="rotate(-90 16 {0:.1})">{1}</text>"#, (h - b + t) / 2.0, esc(y_label));
    for (i, se) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = se.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for &(x, y) in &se.points {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = t + 14.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{0:.1}" y1="{1:.1}" x2="{2:.1}" y2="{1:.1}" stroke="{color}" stroke-width="2"/><text x="{3:.1}" y="{4:.1}">{5}</text>"#, w - r + 12.0, ly, w - r + 32.0, w - r + 38.0, ly + 4.0, esc(&se.name));
    }
    s.push_str("</svg>\n");
    s
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn provenance(rows: &[&MetricsRecord]) -> String {
    let hashes: BTreeSet<&str> = rows.iter().map(|r| r.config_hash.as_str()).collect();
    let seeds: BTreeSet<u64> = rows.iter().map(|r| r.seed).collect();
    format!(
        "config_hash: {} seeds: {}",
        hashes.into_iter().collect::<Vec<_>>().join(","),
        seeds.into_iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
    )
}

fn giga(x: u64) -> String {
    format!("{:.4} G", x as f64 / 1e9)
}

fn mega(x: u64) -> String {
    format!("{:.3} M", x as f64 / 1e6)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Complexity table: cost and timing per scheme.
pub fn complexity_table(metrics: &[MetricsRecord], timing: &[TimingRecord]) -> String {
    let mut cost: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for r in metrics {
        cost.entry(&r.scheme).or_insert((r.flops, r.params));
    }
    let mut s = String::new();
    let hashes: BTreeSet<&str> = metrics.iter().map(|r| r.config_hash.as_str()).collect();
    let _ = writeln!(s, "<!-- config_hash: {} -->", hashes.into_iter().collect::<Vec<_>>().join(","));
    s.push_str("| Scheme | FLOPs | Params | Train Time for 1 Epoch | Test Time for 1 Instance |\n");
    s.push_str("|---|---|---|---|---|\n");
    for (scheme, (flops, params)) in &cost {
        let t: Vec<&TimingRecord> = timing.iter().filter(|t| t.scheme == *scheme).collect();
        let epoch = median(t.iter().map(|t| t.epoch_seconds).collect()).map_or("n/a".into(), |v| format!("{v:.2} s"));
        let inf = median(t.iter().map(|t| t.inference_seconds).collect()).map_or("n/a".into(), |v| format!("{v:.4} s"));
        let _ = writeln!(s, "| {scheme} | {} | {} | {epoch} | {inf} |", giga(*flops), mega(*params));
    }
    let hw: BTreeSet<&str> = timing.iter().map(|t| t.hardware.as_str()).collect();
    if !hw.is_empty() {
        let _ = writeln!(s, "\nTimes are medians over seeds, measured on: {}", hw.into_iter().collect::<Vec<_>>().join("; "));
    }
    s
}

/// Top-1 accuracy at the training SNR with the spread over seeds.
pub fn attribute_table(metrics: &[MetricsRecord]) -> String {
    let mut by: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for r in metrics.iter().filter(|r| r.snr_db == r.snr_train_db) {
        by.entry((&r.dataset, &r.scheme)).or_default().push(r.accuracy);
    }
    let mut s = String::new();
    let hashes: BTreeSet<&str> = metrics.iter().map(|r| r.config_hash.as_str()).collect();
    let _ = writeln!(s, "<!-- config_hash: {} -->", hashes.into_iter().collect::<Vec<_>>().join(","));
    s.push_str("| Dataset | Scheme | Top-1 accuracy | Std over seeds | Seeds |\n");
    s.push_str("|---|---|---|---|---|\n");
    for ((dataset, scheme), acc) in &by {
        let _ = writeln!(s, "| {dataset} | {scheme} | {:.2}% | {:.2} | {} |", 100.0 * mean(acc), 100.0 * std_dev(acc), acc.len());
    }
    s
}

/// Writes `<dir>/report/`: accuracy and MI leakage versus SNR per dataset,
/// the complexity table and the attribute table. Returns the files written.
pub fn emit_report(dir: &Path) -> Result<Vec<PathBuf>> {
    let (metrics, timing) = collect(dir)?;
    if metrics.is_empty() {
        return Err(Error::Validation(format!("no metrics.csv under {}", dir.display())).into());
    }
    let out = dir.join(REPORT_DIR);
    fs::create_dir_all(&out)?;
    let mut written = Vec::new();
    let datasets: BTreeSet<&str> = metrics.iter().map(|r| r.dataset.as_str()).collect();
    for ds in datasets {
        let rows: Vec<&MetricsRecord> = metrics.iter().filter(|r| r.dataset == ds).collect();
        let prov = provenance(&rows);
        let acc = line_plot(&format!("Accuracy vs SNR ({ds})"), "accuracy", &series(&rows, |r| Some(r.accuracy)), Some(0.0), &prov);
        let p = out.join(format!("accuracy_vs_snr_{}.svg", slug(ds)));
        fs::write(&p, acc)?;
        written.push(p);
        let mi_series = series(&rows, |r| r.mi_leakage);
        if !mi_series.is_empty() {
            let mi = line_plot(&format!("MI leakage vs SNR ({ds})"), "MI leakage (nats)", &mi_series, None, &prov);
            let p = out.join(format!("mi_vs_snr_{}.svg", slug(ds)));
            fs::write(&p, mi)?;
            written.push(p);
        }
    }
    let p = out.join("complexity.md");
    fs::write(&p, complexity_table(&metrics, &timing))?;
    written.push(p);
    let p = out.join("attributes.md");
    fs::write(&p, attribute_table(&metrics))?;
    written.push(p);
    Ok(written)
}
