//! SVG line plots and the markdown summary of a result file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::record::{format_sig6, CellKey, ExperimentRecord};
use crate::backbones::BackboneKind;
use crate::corpus::Genre;
use crate::error::Result;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Metric {
    Fad,
    Fd,
}

impl Metric {
    fn name(self) -> &'static str {
        match self {
            Metric::Fad => "FAD",
            Metric::Fd => "FD",
        }
    }

    fn of(self, r: &ExperimentRecord) -> f64 {
        match self {
            Metric::Fad => r.fad,
            Metric::Fd => r.fd,
        }
    }
}

/// Mean and sample standard deviation.
fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

fn series_name(k: &CellKey) -> String {
    let arch = k.arch.map_or("none", |a| a.name());
    match k.placement {
        Some(p) => format!("{arch} @ {p}"),
        None => arch.to_string(),
    }
}

/// Per (backbone, genre): series -> budget -> metric values over seeds,
/// and the baseline values.
type Panel = (BTreeMap<String, BTreeMap<usize, Vec<f64>>>, Vec<f64>);

fn panels(records: &[ExperimentRecord], metric: Metric) -> BTreeMap<(BackboneKind, Genre), Panel> {
    let mut out: BTreeMap<(BackboneKind, Genre), Panel> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_ok()) {
        let panel = out.entry((r.key.backbone, r.key.genre)).or_default();
        let v = metric.of(r);
        if r.key.is_baseline() {
            panel.1.push(v);
        } else {
            panel.0.entry(series_name(&r.key)).or_default().entry(r.key.budget).or_default().push(v);
        }
    }
    out
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot of a metric against budget (log axis), one polyline per series
/// and a dashed line for the baseline when present.
pub fn plot_svg(title: &str, y_label: &str, series: &BTreeMap<String, Vec<(usize, f64)>>, baseline: Option<f64>) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 50.0);
    let points: Vec<(usize, f64)> = series.values().flatten().copied().filter(|p| p.1.is_finite()).collect();
    let budgets: Vec<usize> = {
        let mut b: Vec<usize> = points.iter().map(|p| p.0).collect();
        b.sort_unstable();
        b.dedup();
        b
    };
    let ys = points.iter().map(|p| p.1).chain(baseline.filter(|b| b.is_finite()));
    let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    let pad = ((y1 - y0) * 0.1).max(1e-9 + y1.abs() * 0.05);
    let (y0, y1) = ((y0 - pad).max(0.0), y1 + pad);
    let lx = |b: usize| (b.max(1) as f64).log10();
    let (x0, x1) = match (budgets.first(), budgets.last()) {
        (Some(&a), Some(&b)) if a != b => (lx(a), lx(b)),
        (Some(&a), _) => (lx(a) - 0.5, lx(a) + 0.5),
        _ => (0.0, 1.0),
    };
    let px = |b: usize| left + (lx(b) - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, (w - right + left) / 2.0, esc(title));
    let (ax0, ax1, ay0, ay1) = (left, w - right, top, h - bottom);
    let _ = writeln!(s, r#"<path d="M{ax0},{ay0} L{ax0},{ay1} L{ax1},{ay1}" stroke="black" fill="none"/>"#);
    for &b in &budgets {
        let x = px(b);
        let _ = writeln!(s, r#"<line x1="{x:.1}" y1="{ay1}" x2="{x:.1}" y2="{}" stroke="black"/>"#, ay1 + 4.0);
        let label = if b >= 1000 { format!("{}k", b / 1000) } else { b.to_string() };
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{label}</text>"#, ay1 + 16.0);
    }
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(s, r##"<line x1="{ax0}" y1="{y:.1}" x2="{ax1}" y2="{y:.1}" stroke="#ddd"/>"##);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, ax0 - 6.0, y + 4.0, format_sig6(v));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">adapter parameters</text>"#, (ax0 + ax1) / 2.0, h - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (ay0 + ay1) / 2.0,
        esc(y_label)
    );
    if let Some(b) = baseline.filter(|b| b.is_finite()) {
        let y = py(b);
        let _ = writeln!(s, r#"<line x1="{ax0}" y1="{y:.1}" x2="{ax1}" y2="{y:.1}" stroke="gray" stroke-dasharray="6 4"/>"#);
    }
    let mut legend_y = top + 10.0;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(b, v)| format!("{:.1},{:.1}", px(b), py(v)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, coords.join(" "));
        for c in &coords {
            let (x, y) = c.split_once(',').unwrap_or(("0", "0"));
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let lx0 = ax1 + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx0}" y1="{legend_y}" x2="{}" y2="{legend_y}" stroke="{color}" stroke-width="2"/>"#, lx0 + 18.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx0 + 22.0, legend_y + 4.0, esc(name));
        legend_y += 16.0;
    }
    if baseline.is_some_and(f64::is_finite) {
        let lx0 = ax1 + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx0}" y1="{legend_y}" x2="{}" y2="{legend_y}" stroke="gray" stroke-dasharray="6 4"/>"#, lx0 + 18.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">no adapters</text>"#, lx0 + 22.0, legend_y + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Markdown table, one line per series: mean metric per budget (± sample
/// spread over seeds when there are several), with the minimum-FAD budget
/// of each series starred.
pub fn summary_table(records: &[ExperimentRecord]) -> String {
    let fad = panels(records, Metric::Fad);
    let fd = panels(records, Metric::Fd);
    let mut s = String::from("| backbone | genre | series | budget | FAD | FD | best |\n|---|---|---|---|---|---|---|\n");
    let cell = |v: &[f64]| {
        let (m, sd) = mean_sd(v);
        if v.len() > 1 {
            format!("{} ± {}", format_sig6(m), format_sig6(sd))
        } else {
            format_sig6(m)
        }
    };
    for ((backbone, genre), (series, base)) in &fad {
        let fd_panel = &fd[&(*backbone, *genre)];
        if !base.is_empty() {
            let _ = writeln!(
                s,
                "| {backbone} | {} | no adapters | 0 | {} | {} | |",
                genre.name(),
                cell(base),
                cell(&fd_panel.1)
            );
        }
        for (name, by_budget) in series {
            let best = by_budget
                .iter()
                .map(|(b, v)| (*b, mean_sd(v).0))
                .filter(|(_, m)| m.is_finite())
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(b, _)| b);
            for (budget, v) in by_budget {
                let fd_v = fd_panel.0.get(name).and_then(|m| m.get(budget)).map(Vec::as_slice).unwrap_or(&[]);
                let star = if Some(*budget) == best { "*" } else { "" };
                let _ = writeln!(
                    s,
                    "| {backbone} | {} | {name} | {budget} | {} | {} | {star} |",
                    genre.name(),
                    cell(v),
                    if fd_v.is_empty() { "".into() } else { cell(fd_v) }
                );
            }
        }
    }
    let failed = records.iter().filter(|r| !r.is_ok()).count();
    let _ = writeln!(s, "\n{} rows, {failed} failed.", records.len());
    s
}

/// `fad_<backbone>_<genre>.svg`, `fd_<backbone>_<genre>.svg` and
/// `summary.md`. Returns the written paths.
pub fn write_reports(out_dir: &Path, records: &[ExperimentRecord]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for metric in [Metric::Fad, Metric::Fd] {
        for ((backbone, genre), (series, base)) in panels(records, metric) {
            let lines: BTreeMap<String, Vec<(usize, f64)>> = series
                .into_iter()
                .map(|(name, by_budget)| (name, by_budget.into_iter().map(|(b, v)| (b, mean_sd(&v).0)).collect()))
                .collect();
            if lines.is_empty() {
                continue;
            }
            let baseline = (!base.is_empty()).then(|| mean_sd(&base).0);
            let title = format!("{} vs adapter size: {backbone}, {}", metric.name(), genre.name());
            let svg = plot_svg(&title, metric.name(), &lines, baseline);
            let path = out_dir.join(format!(
                "{}_{}_{}.svg",
                metric.name().to_ascii_lowercase(),
                backbone.name().to_ascii_lowercase(),
                genre.name()
            ));
            fs::write(&path, svg)?;
            written.push(path);
        }
    }
    let path = out_dir.join("summary.md");
    fs::write(&path, summary_table(records))?;
    written.push(path);
    Ok(written)
}
