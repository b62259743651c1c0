//! `fgl export`: render training traces and probe reports into CSV tables
//! and SVG plots. All inputs are parsed and validated before anything is
//! written, so a bad input never leaves partial files behind.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use fgl_core::training::{read_trace, TraceRow};

use crate::config::{Overrides, RunConfig};
use crate::probe::ProbeDocument;
use crate::usage;
use crate::workspace::{labels_for, LockGuard};

pub const EXPORT_DIR: &str = "export";

pub fn run(overrides: &Overrides, traces: &[PathBuf], reports: &[PathBuf]) -> Result<()> {
    if traces.is_empty() && reports.is_empty() {
        usage!("nothing to export; pass --trace and/or --report");
    }
    let cfg = RunConfig::resolve(overrides)?;
    let _lock = LockGuard::acquire(cfg.out_dir())?;

    // Parse everything first: an unreadable or empty input aborts the
    // command before any output file exists.
    let mut parsed_traces: Vec<(String, Vec<TraceRow>)> = Vec::new();
    for (path, label) in traces.iter().zip(labels_for(traces)) {
        let rows = read_trace(path)?;
        if rows.is_empty() {
            bail!("trace {} is empty", path.display());
        }
        if rows.iter().all(|row| row.splits.is_empty()) {
            bail!("trace {} has no evaluation splits", path.display());
        }
        parsed_traces.push((label, rows));
    }
    let mut parsed_reports: Vec<(String, ProbeDocument)> = Vec::new();
    for (path, label) in reports.iter().zip(labels_for(reports)) {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        let doc: ProbeDocument = serde_json::from_str(&text)
            .with_context(|| format!("cannot parse probe report {}", path.display()))?;
        parsed_reports.push((label, doc));
    }

    let dir = cfg.out_dir().join(EXPORT_DIR);
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut written = 0usize;
    for (label, rows) in &parsed_traces {
        write_file(&dir.join(format!("{label}-nll.svg")), &nll_curves_svg(label, rows))?;
        write_file(&dir.join(format!("{label}-ppl.csv")), &trace_csv(rows))?;
        written += 2;
    }
    if !parsed_reports.is_empty() {
        write_file(&dir.join("probes.csv"), &reports_csv(&parsed_reports))?;
        written += 1;
    }
    cfg.persist(&dir)?;
    println!("wrote {written} file(s) to {}", dir.display());
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn split_names(rows: &[TraceRow]) -> Vec<String> {
    let names: BTreeSet<&String> = rows.iter().flat_map(|row| row.splits.keys()).collect();
    names.into_iter().cloned().collect()
}

/// Per-epoch perplexity table: epoch, learning rate, one column per split.
fn trace_csv(rows: &[TraceRow]) -> String {
    let splits = split_names(rows);
    let mut out = String::from("epoch,lr");
    for name in &splits {
        let _ = write!(out, ",{}", csv_cell(name));
    }
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{},{}", row.epoch, row.lr);
        for name in &splits {
            match row.splits.get(name) {
                Some(ppl) => {
                    let _ = write!(out, ",{ppl}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// One row per probe report: perplexities, the sensitivity cell in
/// `+N%/+N%` form, BLEU scores, and response-frequency percentages.
fn reports_csv(reports: &[(String, ProbeDocument)]) -> String {
    let splits: BTreeSet<String> = reports
        .iter()
        .flat_map(|(_, doc)| doc.report.perplexity.keys().cloned())
        .collect();
    let mut out = String::from("report,checkpoint");
    for name in &splits {
        let _ = write!(out, ",ppl:{}", csv_cell(name));
    }
    out.push_str(",sensitivity,bleu2,bleu3,top_responses,bigram_entropy,trigram_entropy\n");
    for (label, doc) in reports {
        let r = &doc.report;
        let _ = write!(out, "{},{}", csv_cell(label), csv_cell(&r.provenance.checkpoint));
        for name in &splits {
            match r.perplexity.get(name) {
                Some(ppl) => {
                    let _ = write!(out, ",{ppl:.4}");
                }
                None => out.push(','),
            }
        }
        match &r.sensitivity {
            Some(s) => {
                let _ = write!(out, ",{}", csv_cell(&s.table_cell()));
            }
            None => out.push(','),
        }
        match &r.knowledge {
            Some(k) => {
                let _ = write!(out, ",{:.4},{:.4}", k.bleu2, k.bleu3);
            }
            None => out.push_str(",,"),
        }
        match &r.diversity {
            Some(d) => {
                let _ = write!(
                    out,
                    ",{},{:.3},{:.3}",
                    csv_cell(&d.frequency_cell()),
                    d.bigram_entropy,
                    d.trigram_entropy
                );
            }
            None => out.push_str(",,,"),
        }
        out.push('\n');
    }
    out
}

fn csv_cell(value: &str) -> String {
    if value.contains([',', '"', '\n']) {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}

const PLOT_COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Validation NLL (natural log of perplexity) against epochs, one polyline
/// per split, with a legend on the right.
fn nll_curves_svg(title: &str, rows: &[TraceRow]) -> String {
    let splits = split_names(rows);
    let (left, top, plot_w, plot_h) = (60.0, 24.0, 420.0, 330.0);
    let (width, height) = (640.0, 400.0);

    let epochs: Vec<f64> = rows.iter().map(|row| row.epoch as f64).collect();
    let (x_min, x_max) = bounds(&epochs);
    let nlls: Vec<f64> = rows
        .iter()
        .flat_map(|row| row.splits.values().map(|ppl| ppl.ln()))
        .filter(|v| v.is_finite())
        .collect();
    let (y_min, y_max) = bounds(&nlls);

    let x_of = |epoch: f64| left + (epoch - x_min) / (x_max - x_min) * plot_w;
    let y_of = |nll: f64| top + (y_max - nll) / (y_max - y_min) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width} {height}\" \
         font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(
        svg,
        "  <text x=\"{left}\" y=\"14\" font-size=\"13\">{} — NLL per evaluation split</text>",
        xml_escape(title)
    );
    // Axes.
    let (x0, y0) = (left, top + plot_h);
    let _ = write!(
        svg,
        "  <line x1=\"{x0}\" y1=\"{top}\" x2=\"{x0}\" y2=\"{y0}\" stroke=\"#333\"/>\n\
         \x20 <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"#333\"/>\n",
        left + plot_w
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let epoch = x_min + f * (x_max - x_min);
        let nll = y_min + f * (y_max - y_min);
        let (x, y) = (x_of(epoch), y_of(nll));
        let _ = write!(
            svg,
            "  <line x1=\"{x:.1}\" y1=\"{y0}\" x2=\"{x:.1}\" y2=\"{}\" stroke=\"#333\"/>\n\
             \x20 <text x=\"{x:.1}\" y=\"{}\" text-anchor=\"middle\">{epoch:.0}</text>\n\
             \x20 <line x1=\"{}\" y1=\"{y:.1}\" x2=\"{x0}\" y2=\"{y:.1}\" stroke=\"#333\"/>\n\
             \x20 <text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{nll:.2}</text>\n",
            y0 + 4.0,
            y0 + 16.0,
            x0 - 4.0,
            x0 - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">epoch</text>",
        left + plot_w / 2.0,
        y0 + 32.0
    );

    for (i, name) in splits.iter().enumerate() {
        let color = PLOT_COLORS[i % PLOT_COLORS.len()];
        let mut points = String::new();
        for row in rows {
            if let Some(ppl) = row.splits.get(name) {
                let nll = ppl.ln();
                if nll.is_finite() {
                    let _ = write!(points, "{:.1},{:.1} ", x_of(row.epoch as f64), y_of(nll));
                }
            }
        }
        let _ = writeln!(
            svg,
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" \
             points=\"{}\"/>",
            points.trim_end()
        );
        let ly = top + 16.0 * i as f64;
        let _ = write!(
            svg,
            "  <line x1=\"{}\" y1=\"{ly:.1}\" x2=\"{}\" y2=\"{ly:.1}\" \
             stroke=\"{color}\" stroke-width=\"2\"/>\n\
             \x20 <text x=\"{}\" y=\"{:.1}\">{}</text>\n",
            left + plot_w + 12.0,
            left + plot_w + 34.0,
            left + plot_w + 40.0,
            ly + 4.0,
            xml_escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Finite min/max padded so a flat or single-point series still spans a
/// nonzero range.
fn bounds(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
