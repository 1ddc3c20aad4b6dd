use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{success_threshold, MetricReport, Protocol, SequenceMetrics};
use crate::dataio::write_file;
use crate::error::{Error, Result};

pub const REPORT_HEADER: &str = "sequence,pre20,auc,accuracy,robustness,eao_lite";
pub const SEQUENCE_FILE: &str = "sequences.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

fn preamble(protocol: Protocol) -> String {
    let mut s = format!("# protocol: {protocol}\n");
    match protocol {
        Protocol::Ptb => {
            s.push_str("# one-pass: precision at 20 px; success AUC = mean over 21 IoU thresholds, IoU > t\n")
        }
        Protocol::VotLite => s.push_str(
            "# reset-based: accuracy, robustness (failure count), eao_lite\n\
             # eao_lite is the single-sequence mean overlap with zeros until re-initialization, \
             not the official sequence-length-weighted EAO\n",
        ),
    }
    s
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

fn row(m: &SequenceMetrics) -> String {
    let vals: Vec<String> = m.values().iter().map(|&v| cell(v)).collect();
    format!("{},{}\n", m.name, vals.join(","))
}

fn safe_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn curve_csv(curve: &[f64], tau: impl Fn(usize) -> f64) -> String {
    let mut s = String::from("tau,value\n");
    for (k, v) in curve.iter().enumerate() {
        let _ = writeln!(s, "{:?},{v:?}", tau(k));
    }
    s
}

/// Line plot of one curve per series as plain SVG paths.
fn svg_plot(title: &str, x_max: f64, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 400.0;
    const H: f64 = 300.0;
    const M: f64 = 40.0;
    let px = |x: f64| M + x / x_max * (W - 2.0 * M);
    let py = |y: f64| H - M - y * (H - 2.0 * M);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <title>{}</title>\n\
         <path d=\"M{M} {M} L{M} {} L{} {}\" fill=\"none\" stroke=\"black\"/>\n",
        escape(title),
        H - M,
        W - M,
        H - M
    );
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    for (i, (name, pts)) in series.iter().enumerate() {
        let d: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(k, &(x, y))| format!("{}{:.2} {:.2}", if k == 0 { 'M' } else { 'L' }, px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            "<path d=\"{}\" fill=\"none\" stroke=\"{}\"><title>{}</title></path>",
            d.join(" "),
            colors[i % colors.len()],
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes `sequences.csv`, `aggregate.csv`, per-sequence curve CSVs and,
/// for one-pass reports, SVG plots of both curves.
pub fn write_report(report: &MetricReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let head = format!("{}{REPORT_HEADER}\n", preamble(report.protocol));
    let mut seq_csv = head.clone();
    for m in &report.sequences {
        seq_csv.push_str(&row(m));
    }
    write_file(&out_dir.join(SEQUENCE_FILE), seq_csv.as_bytes())?;
    let agg = report.aggregate();
    write_file(&out_dir.join(AGGREGATE_FILE), format!("{head}{}", row(&agg)).as_bytes())?;

    let curves = out_dir.join("curves");
    fs::create_dir_all(&curves).map_err(|e| Error::io(&curves, e))?;
    for m in report.sequences.iter().chain(std::iter::once(&agg)) {
        let stem = safe_name(&m.name);
        if !m.precision.is_empty() {
            let p = curves.join(format!("{stem}_precision.csv"));
            write_file(&p, curve_csv(&m.precision, |k| k as f64).as_bytes())?;
        }
        if !m.success.is_empty() {
            let p = curves.join(format!("{stem}_success.csv"));
            write_file(&p, curve_csv(&m.success, success_threshold).as_bytes())?;
        }
    }
    let with_curves: Vec<&SequenceMetrics> = report.sequences.iter().filter(|m| !m.precision.is_empty()).collect();
    if !with_curves.is_empty() {
        let prec: Vec<(&str, Vec<(f64, f64)>)> = with_curves
            .iter()
            .map(|m| {
                let pts = m.precision.iter().enumerate().map(|(k, &v)| (k as f64, v)).collect();
                (m.name.as_str(), pts)
            })
            .collect();
        let succ: Vec<(&str, Vec<(f64, f64)>)> = with_curves
            .iter()
            .map(|m| {
                let pts = m.success.iter().enumerate().map(|(k, &v)| (success_threshold(k), v)).collect();
                (m.name.as_str(), pts)
            })
            .collect();
        write_file(&out_dir.join("precision.svg"), svg_plot("precision vs CLE threshold (px)", 50.0, &prec).as_bytes())?;
        write_file(&out_dir.join("success.svg"), svg_plot("success vs IoU threshold", 1.0, &succ).as_bytes())?;
    }
    Ok(())
}

/// Parses a `sequences.csv` or `aggregate.csv` back into metric rows
/// (curves are not part of these files).
pub fn read_sequence_csv(path: &Path) -> Result<Vec<SequenceMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::format(path, format!("missing header {REPORT_HEADER:?}")));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(Error::format(path, format!("row {l:?} has {} fields", f.len())));
            }
            let num = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse()
                        .map(Some)
                        .map_err(|_| Error::format(path, format!("bad number {s:?}")))
                }
            };
            Ok(SequenceMetrics {
                name: f[0].to_string(),
                pre20: num(f[1])?,
                auc: num(f[2])?,
                accuracy: num(f[3])?,
                robustness: num(f[4])?,
                eao_lite: num(f[5])?,
                ..Default::default()
            })
        })
        .collect()
}
