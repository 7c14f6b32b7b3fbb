//! Post-hoc reports over finished (or still running) run directories: SVG
//! curves of mean reward and gradient norm, and a best-vs-latest table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::CliError;
use crate::runfiles::{self, LogRow, Summary};

/// Reward chart file name.
pub const REWARD_CHART: &str = "reward.svg";
/// Gradient-norm chart file name.
pub const GRAD_NORM_CHART: &str = "grad_norm.svg";
/// Table as CSV.
pub const TABLE_CSV: &str = "table.csv";
/// Table as aligned text.
pub const TABLE_TXT: &str = "table.txt";

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// One run directory that could be read.
#[derive(Debug, Clone)]
pub struct RunData {
    /// Where it came from.
    pub dir: PathBuf,
    /// `summary.json`.
    pub summary: Summary,
    /// Complete rows of `log.csv`.
    pub log: Vec<LogRow>,
}

/// Reads every directory, skipping (with a warning) those lacking a log or
/// summary.
pub fn load_runs(dirs: &[PathBuf]) -> (Vec<RunData>, Vec<String>) {
    let mut runs = Vec::new();
    let mut warnings = Vec::new();
    for dir in dirs {
        match runfiles::read_summary(dir).and_then(|s| Ok((s, runfiles::read_log(dir)?))) {
            Ok((summary, log)) => runs.push(RunData {
                dir: dir.clone(),
                summary,
                log,
            }),
            Err(e) => warnings.push(format!("skipping {}: {e}", dir.display())),
        }
    }
    (runs, warnings)
}

/// A named polyline.
#[derive(Debug, Clone)]
pub struct Series {
    /// Legend entry.
    pub name: String,
    /// `(x, y)` points; non-finite ones are dropped.
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// About five round tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Line chart with axes, ticks and a legend, as a standalone SVG document.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    const W: f64 = 760.0;
    const H: f64 = 420.0;
    const L: f64 = 70.0;
    const R: f64 = 190.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| &s.points)
        .copied()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let lo = finite.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = finite.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        match (lo.is_finite(), hi > lo) {
            (false, _) => (0.0, 1.0),
            (true, true) => (lo, hi),
            (true, false) => (lo - 0.5, lo + 0.5),
        }
    };
    let (x0, x1) = bounds(|p| p.0);
    let (y0, y1) = bounds(|p| p.1);
    let (pw, ph) = (W - L - R, H - T - B);
    let sx = |x: f64| L + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| T + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        L + pw / 2.0,
        escape(title)
    );
    for t in ticks(x0, x1) {
        let x = sx(t);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{T}" x2="{x:.2}" y2="{:.2}" stroke="#eee"/>"##,
            T + ph
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            T + ph + 16.0,
            fmt_tick(t)
        );
    }
    for t in ticks(y0, y1) {
        let y = sy(t);
        let _ = writeln!(
            s,
            r##"<line x1="{L}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#eee"/>"##,
            L + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            L - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        L + pw / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        T + ph / 2.0,
        T + ph / 2.0,
        escape(y_label)
    );
    for (i, series) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = series
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = T + 10.0 + 18.0 * i as f64;
        let lx = L + pw + 14.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="3"/>"#,
            lx + 22.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 28.0,
            ly + 4.0,
            escape(&series.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Legend names: the run label, disambiguated by seed and then by position
/// when labels repeat.
fn legend_names(runs: &[RunData]) -> Vec<String> {
    let mut counts = BTreeMap::new();
    for r in runs {
        *counts.entry(r.summary.label.clone()).or_insert(0) += 1;
    }
    let mut names: Vec<String> = runs
        .iter()
        .map(|r| {
            if counts[&r.summary.label] > 1 {
                format!("{} (seed {})", r.summary.label, r.summary.seed)
            } else {
                r.summary.label.clone()
            }
        })
        .collect();
    let mut seen = BTreeMap::new();
    for n in names.iter_mut() {
        let k = seen.entry(n.clone()).or_insert(0);
        *k += 1;
        if *k > 1 {
            *n = format!("{n} #{k}");
        }
    }
    names
}

/// The reward and gradient-norm charts.
pub fn charts(runs: &[RunData]) -> (String, String) {
    let names = legend_names(runs);
    let series = |f: fn(&LogRow) -> f64| -> Vec<Series> {
        runs.iter()
            .zip(&names)
            .map(|(r, n)| Series {
                name: n.clone(),
                points: r.log.iter().map(|row| (row.step as f64, f(row))).collect(),
            })
            .collect()
    };
    (
        line_chart(
            "Mean training reward",
            "step",
            "mean reward",
            &series(|r| r.mean_reward),
        ),
        line_chart(
            "Gradient norm",
            "step",
            "gradient norm",
            &series(|r| r.grad_norm),
        ),
    )
}

/// One table row per run.
pub fn table_csv(runs: &[RunData]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "label",
        "method",
        "seed",
        "best_step",
        "best_eval",
        "latest_step",
        "latest_eval",
        "delta",
        "incidents",
    ])?;
    for r in runs {
        let s = &r.summary;
        w.write_record([
            s.label.clone(),
            s.method.clone(),
            s.seed.to_string(),
            s.best.step.to_string(),
            runfiles::num(s.best.eval_success),
            s.latest.step.to_string(),
            runfiles::num(s.latest.eval_success),
            runfiles::num(s.delta),
            s.incidents.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

/// Mean Δ per label, in first-appearance order.
pub fn mean_delta_by_label(runs: &[RunData]) -> Vec<(String, usize, f64)> {
    let mut out: Vec<(String, usize, f64)> = Vec::new();
    for r in runs {
        match out.iter_mut().find(|e| e.0 == r.summary.label) {
            Some(e) => {
                e.1 += 1;
                e.2 += r.summary.delta;
            }
            None => out.push((r.summary.label.clone(), 1, r.summary.delta)),
        }
    }
    out.into_iter()
        .map(|(l, n, s)| (l, n, s / n as f64))
        .collect()
}

/// Aligned text table, followed by mean Δ per label when a label has
/// several runs.
pub fn table_text(runs: &[RunData]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<24} {:<10} {:>6} {:>10} {:>9} {:>11} {:>11} {:>9} {:>9}",
        "label",
        "method",
        "seed",
        "best_step",
        "best",
        "latest_step",
        "latest",
        "delta",
        "incidents"
    );
    for r in runs {
        let m = &r.summary;
        let _ = writeln!(
            s,
            "{:<24} {:<10} {:>6} {:>10} {:>9.4} {:>11} {:>11.4} {:>+9.4} {:>9}",
            m.label,
            m.method,
            m.seed,
            m.best.step,
            m.best.eval_success,
            m.latest.step,
            m.latest.eval_success,
            m.delta,
            m.incidents
        );
    }
    let means = mean_delta_by_label(runs);
    if means.iter().any(|m| m.1 > 1) {
        let _ = writeln!(s, "\n{:<24} {:>6} {:>10}", "label", "runs", "mean_delta");
        for (label, n, d) in means {
            let _ = writeln!(s, "{label:<24} {n:>6} {d:>+10.4}");
        }
    }
    s
}

/// Writes both charts and both tables into `out_dir`, returning the paths.
pub fn write_report(runs: &[RunData], out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let (reward, grad) = charts(runs);
    let files = [
        (REWARD_CHART, reward.into_bytes()),
        (GRAD_NORM_CHART, grad.into_bytes()),
        (TABLE_CSV, table_csv(runs)?),
        (TABLE_TXT, table_text(runs).into_bytes()),
    ];
    let mut paths = Vec::new();
    for (name, bytes) in files {
        runfiles::write(out_dir, name, bytes)?;
        paths.push(out_dir.join(name));
    }
    Ok(paths)
}
