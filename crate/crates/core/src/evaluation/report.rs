use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::matrix::{Arm, Domain, ExperimentMatrix, RowOutcome};
use crate::data::SubsetLevel;
use crate::error::{Error, Result};
use crate::masking::{preview_strip, MaskSchedule};
use crate::pngio::{self, PixelLayout};

const ROAD: u8 = 1;
const BUILDING: u8 = 2;

const HEADER: [&str; 13] = [
    "level",
    "domain",
    "arm",
    "train_size",
    "status",
    "seeds",
    "road_iou",
    "road_iou_std",
    "road_iou_per_image",
    "road_iou_per_seed",
    "building_iou",
    "building_iou_std",
    "note",
];

/// One table row: IoU values are in points (×100) with three decimals.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub level: SubsetLevel,
    pub domain: Domain,
    pub arm: Arm,
    pub train_size: usize,
    pub failed: bool,
    pub seeds: usize,
    pub road_iou: Option<f64>,
    pub road_iou_std: Option<f64>,
    pub road_iou_per_image: Option<f64>,
    pub road_iou_per_seed: Vec<f64>,
    pub building_iou: Option<f64>,
    pub building_iou_std: Option<f64>,
    pub note: String,
}

fn points(v: Option<f64>) -> Option<f64> {
    // round through the printed form so table and plot agree exactly
    v.map(|v| fmt_points(v * 100.0).parse().expect("formatted float"))
}

fn fmt_points(v: f64) -> String {
    format!("{v:.3}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), fmt_points)
}

pub fn summarize(matrix: &ExperimentMatrix) -> Vec<SummaryRow> {
    matrix
        .rows()
        .iter()
        .map(|r| SummaryRow {
            level: r.variant.level,
            domain: r.variant.domain,
            arm: r.arm,
            train_size: r.train_size,
            failed: r.is_failed(),
            seeds: match &r.outcome {
                RowOutcome::Evaluated(v) => v.len(),
                RowOutcome::Failed(_) => 0,
            },
            road_iou: points(r.mean_iou(ROAD)),
            road_iou_std: points(r.std_iou(ROAD)),
            road_iou_per_image: points(r.mean_per_image_iou(ROAD)),
            road_iou_per_seed: r.per_seed(ROAD).into_iter().filter_map(|v| points(Some(v))).collect(),
            building_iou: points(r.mean_iou(BUILDING)),
            building_iou_std: points(r.std_iou(BUILDING)),
            note: match &r.outcome {
                RowOutcome::Failed(why) => why.replace(['\t', '\n'], " "),
                RowOutcome::Evaluated(_) => String::new(),
            },
        })
        .collect()
}

pub fn matrix_tsv(rows: &[SummaryRow]) -> String {
    let mut out = HEADER.join("\t");
    out.push('\n');
    for r in rows {
        let per_seed = if r.road_iou_per_seed.is_empty() {
            "-".to_string()
        } else {
            r.road_iou_per_seed.iter().map(|v| fmt_points(*v)).collect::<Vec<_>>().join(",")
        };
        let fields = [
            r.level.to_string(),
            r.domain.to_string(),
            r.arm.to_string(),
            r.train_size.to_string(),
            if r.failed { "failed" } else { "ok" }.to_string(),
            r.seeds.to_string(),
            fmt_opt(r.road_iou),
            fmt_opt(r.road_iou_std),
            fmt_opt(r.road_iou_per_image),
            per_seed,
            fmt_opt(r.building_iou),
            fmt_opt(r.building_iou_std),
            if r.note.is_empty() { "-".into() } else { r.note.clone() },
        ];
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    out
}

pub fn parse_matrix_tsv(text: &str, path: &Path) -> Result<Vec<SummaryRow>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split('\t').collect();
    if header != HEADER {
        return Err(Error::format(path, "unexpected matrix table header"));
    }
    let opt = |s: &str| -> Result<Option<f64>> {
        if s == "-" {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::format(path, format!("bad number `{s}`")))
        }
    };
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != HEADER.len() {
            return Err(Error::format(path, format!("row {}: expected {} fields", i + 1, HEADER.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad integer `{s}`")));
        rows.push(SummaryRow {
            level: f[0].parse()?,
            domain: f[1].parse()?,
            arm: f[2].parse()?,
            train_size: int(f[3])?,
            failed: f[4] == "failed",
            seeds: int(f[5])?,
            road_iou: opt(f[6])?,
            road_iou_std: opt(f[7])?,
            road_iou_per_image: opt(f[8])?,
            road_iou_per_seed: if f[9] == "-" {
                Vec::new()
            } else {
                f[9].split(',').map(|v| opt(v).map(|o| o.unwrap_or(f64::NAN))).collect::<Result<_>>()?
            },
            building_iou: opt(f[10])?,
            building_iou_std: opt(f[11])?,
            note: if f[12] == "-" { String::new() } else { f[12].to_string() },
        });
    }
    Ok(rows)
}

/// A series per `(arm, domain)`: `(train_size, road IoU)` sorted by size.
pub fn plot_series(rows: &[SummaryRow]) -> Vec<(String, Vec<(usize, f64)>)> {
    let mut series: Vec<(String, Vec<(usize, f64)>)> = Vec::new();
    for r in rows {
        let Some(y) = r.road_iou else { continue };
        let name = match r.domain {
            Domain::InDomain => r.arm.to_string(),
            Domain::Holdout => format!("{} ({})", r.arm, r.domain),
        };
        match series.iter_mut().find(|(n, _)| *n == name) {
            Some((_, pts)) => pts.push((r.train_size, y)),
            None => series.push((name, vec![(r.train_size, y)])),
        }
    }
    for (_, pts) in &mut series {
        pts.sort_by_key(|p| p.0);
    }
    series
}

const COLORS: [&str; 6] = ["#1b6ca8", "#d1495b", "#2e933c", "#edae49", "#6c4f9c", "#555555"];

/// Line plot of road IoU against training-set size, one polyline per series.
pub fn iou_plot_svg(rows: &[SummaryRow]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 180.0, 20.0, 50.0);
    let series = plot_series(rows);
    let xs: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0 as f64)).collect();
    let (xmin, xmax) = xs.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    let (xmin, xmax) = if xs.is_empty() { (0.0, 1.0) } else if xmin == xmax { (xmin - 1.0, xmax + 1.0) } else { (xmin, xmax) };
    let px = |x: f64| left + (x - xmin) / (xmax - xmin) * (w - left - right);
    let py = |y: f64| top + (1.0 - y / 100.0) * (h - top - bottom);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, x1, y0, y1) = (left, w - right, py(0.0), py(100.0));
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for t in (0..=100).step_by(20) {
        let y = py(t as f64);
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{t}</text>"#, x0 - 6.0, y + 4.0);
        let _ = writeln!(svg, r##"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#ddd"/>"##);
    }
    let mut ticks: Vec<usize> = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).collect();
    ticks.sort_unstable();
    ticks.dedup();
    for t in ticks {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{t}</text>"#, px(t as f64), y0 + 18.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">labelled training samples</text>"#, (x0 + x1) / 2.0, h - 8.0);
    let _ = writeln!(svg, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">road IoU</text>"#, (y0 + y1) / 2.0, (y0 + y1) / 2.0);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x as f64), py(y))).collect();
        let _ = writeln!(svg, r#"<polyline class="series" data-series="{name}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for &(x, y) in pts {
            let _ = writeln!(
                svg,
                r#"<circle data-series="{name}" data-x="{x}" data-y="{}" cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#,
                fmt_points(y),
                px(x as f64),
                py(y)
            );
        }
        let ly = top + 16.0 * i as f64 + 10.0;
        let _ = writeln!(svg, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, x1 + 12.0, x1 + 32.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{name}</text>"#, x1 + 38.0, ly + 4.0);
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub schedule: MaskSchedule,
    pub mask_epochs: Vec<usize>,
    pub mask_canvas: usize,
    pub seed: u64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            schedule: MaskSchedule::table(),
            mask_epochs: vec![10, 30, 50],
            mask_canvas: 512,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub plot: PathBuf,
    pub mask_figure: PathBuf,
}

/// Writes `matrix.tsv`, `iou_vs_size.svg` and `mask_evolution.png` into `out_dir`.
pub fn emit_report(rows: &[SummaryRow], options: &ReportOptions, out_dir: &Path) -> Result<ReportFiles> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("matrix has no rows".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = ReportFiles {
        table: out_dir.join("matrix.tsv"),
        plot: out_dir.join("iou_vs_size.svg"),
        mask_figure: out_dir.join("mask_evolution.png"),
    };
    std::fs::write(&files.table, matrix_tsv(rows)).map_err(|e| Error::io(&files.table, e))?;
    std::fs::write(&files.plot, iou_plot_svg(rows)).map_err(|e| Error::io(&files.plot, e))?;
    let (w, h, px) = preview_strip(&options.schedule, &options.mask_epochs, options.mask_canvas, options.seed)?;
    pngio::write(&files.mask_figure, w, h, PixelLayout::Gray, &px)?;
    Ok(files)
}
