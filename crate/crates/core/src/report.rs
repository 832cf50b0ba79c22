//! Plain-text tables and SVG plots from metrics and ablation CSVs.
//!
//! Rendering is a pure function of the input files: numbers are printed
//! with fixed precision and series keep input order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::METRICS_HEADER;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Per-epoch training loss, one polyline per metrics file.
    LossCurve,
    /// Probe accuracy against mask ratio from a mask-ratio ablation.
    RatioSweep,
    /// Probe accuracy against pre-training epochs from a schedule ablation.
    ScheduleSweep,
    /// Probe accuracy per setting of any ablation, as bars.
    Table,
}

impl PlotKind {
    pub const ALL: [PlotKind; 4] = [PlotKind::LossCurve, PlotKind::RatioSweep, PlotKind::ScheduleSweep, PlotKind::Table];

    pub fn as_str(self) -> &'static str {
        match self {
            PlotKind::LossCurve => "loss-curve",
            PlotKind::RatioSweep => "ratio-sweep",
            PlotKind::ScheduleSweep => "schedule-sweep",
            PlotKind::Table => "table",
        }
    }
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|k| k.as_str()).collect();
            Error::Config(format!("unknown report kind {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSpec {
    pub inputs: Vec<PathBuf>,
    pub kind: PlotKind,
    /// SVG destination; the text table goes beside it with a `.txt`
    /// extension.
    pub output: PathBuf,
    pub x_label: Option<String>,
    pub y_label: Option<String>,
}

/// Rendered artifacts, also written to disk by [`render_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub svg: String,
    pub table: String,
    pub svg_path: PathBuf,
    pub table_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
struct AblationLine {
    axis: String,
    setting: String,
    config_hash: String,
    accuracy_mean: f64,
    accuracy_std: f64,
    loss_mean: f64,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes())
}

fn record_line(r: &csv::StringRecord) -> usize {
    r.position().map_or(0, |p| p.line() as usize)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::parse(path, line, e.to_string())
}

fn field<T: FromStr>(path: &Path, r: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    let raw = r.get(i).unwrap_or("");
    raw.parse()
        .map_err(|_| Error::parse(path, record_line(r), format!("bad {name} {raw:?} in row {:?}", r.iter().collect::<Vec<_>>().join(","))))
}

fn parse_loss_series(path: &Path, text: &str) -> Result<Series> {
    let mut rdr = reader(text);
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.iter().collect::<Vec<_>>().join(",");
    if header != METRICS_HEADER {
        return Err(Error::parse(path, 1, format!("expected header {METRICS_HEADER:?}, got {header:?}")));
    }
    let mut points = Vec::new();
    for r in rdr.records() {
        let r = r.map_err(|e| csv_error(path, e))?;
        let epoch: usize = field(path, &r, 0, "epoch")?;
        let value: f64 = field(path, &r, 3, "value")?;
        if &r[1] == "train" && &r[2] == "loss" {
            points.push((epoch as f64, value));
        }
    }
    let label = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
    Ok(Series { label, points })
}

fn parse_ablation(path: &Path, text: &str) -> Result<Vec<AblationLine>> {
    let mut rdr = reader(text);
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse(path, 1, format!("missing column {name:?}")))
    };
    let cols = [
        col("axis")?,
        col("setting")?,
        col("config_hash")?,
        col("probe_accuracy_mean")?,
        col("probe_accuracy_std")?,
        col("final_loss_mean")?,
    ];
    let mut out = Vec::new();
    for r in rdr.records() {
        let r = r.map_err(|e| csv_error(path, e))?;
        out.push(AblationLine {
            axis: r[cols[0]].to_string(),
            setting: r[cols[1]].to_string(),
            config_hash: r[cols[2]].to_string(),
            accuracy_mean: field(path, &r, cols[3], "probe_accuracy_mean")?,
            accuracy_std: field(path, &r, cols[4], "probe_accuracy_std")?,
            loss_mean: field(path, &r, cols[5], "final_loss_mean")?,
        });
    }
    Ok(out)
}

/// Columns padded to a common width; the first column is left-aligned.
fn aligned_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.zip(&widths).enumerate() {
            if i == 0 {
                write!(s, "{cell:<w$}").unwrap();
            } else {
                write!(s, "  {cell:>w$}").unwrap();
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&mut header.iter().copied());
    out += &(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ") + "\n");
    for row in rows {
        out += &line(&mut row.iter().map(String::as_str));
    }
    out
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(points: impl Iterator<Item = (f64, f64)> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        Self {
            x: span(&mut points.clone().map(|p| p.0)),
            y: span(&mut points.map(|p| p.1)),
        }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn svg_open(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + (WIDTH - LEFT - RIGHT) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + (HEIGHT - TOP - BOTTOM) / 2.0,
        TOP + (HEIGHT - TOP - BOTTOM) / 2.0,
        escape(y_label)
    )
    .unwrap();
    s
}

fn axes(s: &mut String, f: &Frame, x_ticks: &[(f64, String)]) {
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP);
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#).unwrap();
    for (x, label) in x_ticks {
        let px = f.px(*x);
        writeln!(s, r#"<line x1="{px:.2}" y1="{y0}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#, y0 + 4.0).unwrap();
        writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, y0 + 16.0, escape(label)).unwrap();
    }
    for i in 0..=4 {
        let y = f.y.0 + (f.y.1 - f.y.0) * i as f64 / 4.0;
        let py = f.py(y);
        writeln!(s, r#"<line x1="{:.2}" y1="{py:.2}" x2="{x0}" y2="{py:.2}" stroke="black"/>"#, x0 - 4.0).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{y:.4}</text>"#, x0 - 6.0, py + 4.0).unwrap();
    }
}

fn even_ticks(f: &Frame) -> Vec<(f64, String)> {
    (0..=4)
        .map(|i| {
            let x = f.x.0 + (f.x.1 - f.x.0) * i as f64 / 4.0;
            (x, format!("{x:.4}").trim_end_matches('0').trim_end_matches('.').to_string())
        })
        .collect()
}

fn line_plot(series: &[Series], title: &str, x_label: &str, y_label: &str, markers: bool, ticks: Option<Vec<(f64, String)>>) -> String {
    let f = Frame::new(series.iter().flat_map(|s| s.points.iter().copied()));
    let mut s = svg_open(title, x_label, y_label);
    axes(&mut s, &f, &ticks.unwrap_or_else(|| even_ticks(&f)));
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" ")).unwrap();
        if markers {
            for &(x, y) in &ser.points {
                writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, f.px(x), f.py(y)).unwrap();
            }
        }
        let ly = TOP + 14.0 * i as f64 + 6.0;
        let lx = WIDTH - RIGHT + 10.0;
        writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 16.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 20.0, ly + 4.0, escape(&ser.label)).unwrap();
    }
    s + "</svg>\n"
}

fn bar_plot(lines: &[AblationLine], title: &str, x_label: &str, y_label: &str) -> String {
    let top = lines.iter().map(|l| l.accuracy_mean + l.accuracy_std).fold(0.0, f64::max).max(1e-9);
    let f = Frame {
        x: (0.0, lines.len() as f64),
        y: (0.0, top),
    };
    let ticks: Vec<(f64, String)> = lines.iter().enumerate().map(|(i, l)| (i as f64 + 0.5, l.setting.clone())).collect();
    let mut s = svg_open(title, x_label, y_label);
    axes(&mut s, &f, &ticks);
    let slot = (WIDTH - LEFT - RIGHT) / lines.len() as f64;
    for (i, l) in lines.iter().enumerate() {
        let x = f.px(i as f64) + slot * 0.2;
        let y = f.py(l.accuracy_mean);
        writeln!(
            s,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            slot * 0.6,
            f.py(0.0) - y,
            PALETTE[0]
        )
        .unwrap();
        let cx = x + slot * 0.3;
        writeln!(
            s,
            r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
            f.py((l.accuracy_mean - l.accuracy_std).max(0.0)),
            f.py(l.accuracy_mean + l.accuracy_std)
        )
        .unwrap();
    }
    s + "</svg>\n"
}

fn ablation_table(lines: &[AblationLine]) -> String {
    let rows: Vec<Vec<String>> = lines
        .iter()
        .map(|l| {
            vec![
                l.axis.clone(),
                l.setting.clone(),
                format!("{:.4}", l.accuracy_mean),
                format!("{:.4}", l.accuracy_std),
                format!("{:.4}", l.loss_mean),
                l.config_hash.clone(),
            ]
        })
        .collect();
    aligned_table(&["axis", "setting", "probe_acc_mean", "probe_acc_std", "final_loss_mean", "config_hash"], &rows)
}

fn sweep(spec: &ReportSpec, lines: Vec<AblationLine>, default_x: &str) -> Result<(String, String)> {
    let mut points = Vec::with_capacity(lines.len());
    for l in &lines {
        let x: f64 = l
            .setting
            .parse()
            .map_err(|_| Error::Data(format!("setting {:?} of axis {} is not numeric", l.setting, l.axis)))?;
        points.push((x, l.accuracy_mean, l));
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let ticks = points.iter().map(|p| (p.0, p.2.setting.clone())).collect();
    let sorted: Vec<AblationLine> = points.iter().map(|p| p.2.clone()).collect();
    let series = [Series {
        label: "probe accuracy".into(),
        points: points.iter().map(|p| (p.0, p.1)).collect(),
    }];
    let x_label = spec.x_label.as_deref().unwrap_or(default_x);
    let y_label = spec.y_label.as_deref().unwrap_or("linear probe accuracy");
    let svg = line_plot(&series, &format!("probe accuracy vs {x_label}"), x_label, y_label, true, Some(ticks));
    Ok((svg, ablation_table(&sorted)))
}

fn no_data(spec: &ReportSpec) -> Error {
    let names: Vec<String> = spec.inputs.iter().map(|p| p.display().to_string()).collect();
    Error::Data(format!("no data in {}", names.join(", ")))
}

/// Renders the SVG and text table for `spec` without touching the disk
/// beyond reading inputs.
pub fn render(spec: &ReportSpec) -> Result<(String, String)> {
    if spec.inputs.is_empty() {
        return Err(no_data(spec));
    }
    let texts = spec
        .inputs
        .iter()
        .map(|p| read(p).map(|t| (p.as_path(), t)))
        .collect::<Result<Vec<_>>>()?;
    match spec.kind {
        PlotKind::LossCurve => {
            let series = texts
                .iter()
                .map(|(p, t)| parse_loss_series(p, t))
                .collect::<Result<Vec<_>>>()?;
            if series.iter().all(|s| s.points.is_empty()) {
                return Err(no_data(spec));
            }
            let x_label = spec.x_label.as_deref().unwrap_or("epoch");
            let y_label = spec.y_label.as_deref().unwrap_or("training loss");
            let svg = line_plot(&series, "pre-training loss", x_label, y_label, false, None);
            let mut epochs: Vec<u64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0 as u64)).collect();
            epochs.sort_unstable();
            epochs.dedup();
            let rows = epochs
                .iter()
                .map(|&e| {
                    let mut row = vec![e.to_string()];
                    for s in &series {
                        let v = s.points.iter().find(|p| p.0 as u64 == e);
                        row.push(v.map_or_else(|| "-".into(), |p| format!("{:.6}", p.1)));
                    }
                    row
                })
                .collect::<Vec<_>>();
            let mut header = vec!["epoch"];
            header.extend(series.iter().map(|s| s.label.as_str()));
            Ok((svg, aligned_table(&header, &rows)))
        }
        kind => {
            let mut lines = Vec::new();
            for (p, t) in &texts {
                lines.extend(parse_ablation(p, t)?);
            }
            if lines.is_empty() {
                return Err(no_data(spec));
            }
            match kind {
                PlotKind::RatioSweep => sweep(spec, lines, "mask ratio"),
                PlotKind::ScheduleSweep => sweep(spec, lines, "pre-training epochs"),
                _ => {
                    let x_label = spec.x_label.as_deref().unwrap_or("setting");
                    let y_label = spec.y_label.as_deref().unwrap_or("linear probe accuracy");
                    let svg = bar_plot(&lines, "ablation", x_label, y_label);
                    Ok((svg, ablation_table(&lines)))
                }
            }
        }
    }
}

/// Renders and writes the SVG to `spec.output` and the table beside it.
pub fn render_report(spec: &ReportSpec) -> Result<Report> {
    let (svg, table) = render(spec)?;
    let table_path = spec.output.with_extension("txt");
    if table_path == spec.output {
        return Err(Error::Config(format!("output {} must not end in .txt", spec.output.display())));
    }
    fs::write(&spec.output, &svg).map_err(|e| Error::io(&spec.output, e))?;
    fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    Ok(Report {
        svg,
        table,
        svg_path: spec.output.clone(),
        table_path,
    })
}
