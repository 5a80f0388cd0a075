//! CSV, JSON and SVG artifacts.

use std::fmt::Write as _;
use std::path::Path;

use enm_core::inversion::Method;

use crate::error::{BenchError, Result};
use crate::run::{format_metric, BenchReport, Row};

pub const CSV_COLUMNS: [&str; 18] = [
    "method",
    "task_id",
    "seed",
    "lambda",
    "K",
    "tau",
    "T",
    "guidance_edit",
    "recon_mse",
    "psnr",
    "ssim",
    "edit_nll",
    "preservation_mse",
    "gap_mean",
    "gap_at_fixed_step",
    "refine_iters_total",
    "wall_time_ms",
    "error",
];

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| BenchError::io(path, e))
}

fn row_record(r: &Row) -> Vec<String> {
    let f = |v: Option<f64>| v.map(format_metric).unwrap_or_default();
    let u = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    vec![
        r.method.to_string(),
        r.task_id.to_string(),
        r.seed.to_string(),
        f(r.lambda),
        u(r.k),
        f(r.tau),
        r.steps.to_string(),
        format_metric(r.guidance_edit),
        f(r.recon_mse),
        f(r.psnr),
        f(r.ssim),
        f(r.edit_nll),
        f(r.preservation_mse),
        f(r.gap_mean),
        f(r.gap_at_fixed_step),
        u(r.refine_iters_total),
        f(r.wall_time_ms),
        r.error.clone().unwrap_or_default(),
    ]
}

pub fn csv_string(rows: &[Row]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.write_record(row_record(r))?;
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn emit_csv(report: &BenchReport, path: &Path) -> Result<()> {
    write_file(path, csv_string(&report.rows)?.as_bytes())
}

pub fn json_string(report: &BenchReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|source| BenchError::Json {
        path: "<report>".into(),
        source,
    })
}

pub fn emit_json(report: &BenchReport, path: &Path) -> Result<()> {
    write_file(path, json_string(report)?.as_bytes())
}

pub fn read_json(path: &Path) -> Result<BenchReport> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| BenchError::Json {
        path: path.to_path_buf(),
        source,
    })
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;

fn colour(m: Method) -> &'static str {
    match m {
        Method::Ddim => "#1f77b4",
        Method::FixedPoint => "#ff7f0e",
        Method::NullOpt => "#2ca02c",
        Method::Residual => "#9467bd",
        Method::Enm => "#d62728",
    }
}

fn glyph(out: &mut String, m: Method, x: f64, y: f64, extra: &str) {
    let c = colour(m);
    let r = 4.0;
    let _ = match m {
        Method::Ddim => writeln!(
            out,
            r#"<circle class="point" {extra} cx="{x:.2}" cy="{y:.2}" r="{r}" fill="none" stroke="{c}"/>"#
        ),
        Method::FixedPoint => writeln!(
            out,
            r#"<rect class="point" {extra} x="{:.2}" y="{:.2}" width="{}" height="{}" fill="none" stroke="{c}"/>"#,
            x - r,
            y - r,
            2.0 * r,
            2.0 * r
        ),
        Method::NullOpt => writeln!(
            out,
            r#"<polygon class="point" {extra} points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="none" stroke="{c}"/>"#,
            x,
            y - r,
            x - r,
            y + r,
            x + r,
            y + r
        ),
        Method::Residual => writeln!(
            out,
            r#"<polygon class="point" {extra} points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="none" stroke="{c}"/>"#,
            x,
            y - r,
            x + r,
            y,
            x,
            y + r,
            x - r,
            y
        ),
        Method::Enm => writeln!(
            out,
            r#"<path class="point" {extra} d="M{:.2},{:.2}L{:.2},{:.2}M{:.2},{:.2}L{:.2},{:.2}" stroke="{c}"/>"#,
            x - r,
            y - r,
            x + r,
            y + r,
            x - r,
            y + r,
            x + r,
            y - r
        ),
    };
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Scatter of `(gap_at_fixed_step, edit_nll)`, one glyph shape per method.
/// Rows without both values are left out.
pub fn svg_scatter(rows: &[Row]) -> String {
    let pts: Vec<(Method, usize, f64, f64)> = rows
        .iter()
        .filter_map(|r| match (r.gap_at_fixed_step, r.edit_nll) {
            (Some(g), Some(n)) if g.is_finite() && n.is_finite() => Some((r.method, r.task_id, g, n)),
            _ => None,
        })
        .collect();
    let (x0, x1) = span(pts.iter().map(|p| p.2));
    let (y0, y1) = span(pts.iter().map(|p| p.3));
    let sx = |v: f64| MARGIN + (v - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |v: f64| HEIGHT - MARGIN - (v - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        out,
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(out, r#"<g class="axes" stroke="black">"#);
    let _ = writeln!(out, r#"<line x1="{l}" y1="{b}" x2="{r}" y2="{b}"/>"#);
    let _ = writeln!(out, r#"<line x1="{l}" y1="{b}" x2="{l}" y2="{t}"/>"#);
    let _ = writeln!(out, "</g>");
    let _ = writeln!(out, r#"<g class="labels" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">gap at fixed step</text>"#,
        WIDTH / 2.0,
        HEIGHT - 20.0
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">edit NLL</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="{anchor}">{}</text>"#,
            sx(v),
            b + 16.0,
            short(v)
        );
    }
    for v in [y0, y1] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            l - 6.0,
            sy(v) + 4.0,
            short(v)
        );
    }
    let _ = writeln!(out, "</g>");

    let mut present: Vec<Method> = pts.iter().map(|p| p.0).collect();
    present.sort();
    present.dedup();
    let _ = writeln!(out, r#"<g class="legend" font-family="sans-serif" font-size="12">"#);
    for (i, m) in present.iter().enumerate() {
        let y = MARGIN + 16.0 * i as f64;
        let mut g = String::new();
        glyph(&mut g, *m, WIDTH - MARGIN - 90.0, y, "");
        out.push_str(&g.replace(r#"class="point" "#, r#"class="legend-glyph" "#));
        let _ = writeln!(out, r#"<text x="{}" y="{}">{m}</text>"#, WIDTH - MARGIN - 80.0, y + 4.0);
    }
    let _ = writeln!(out, "</g>");

    let _ = writeln!(out, r#"<g class="points">"#);
    for (m, task, g, n) in &pts {
        glyph(
            &mut out,
            *m,
            sx(*g),
            sy(*n),
            &format!(r#"data-method="{m}" data-task="{task}""#),
        );
    }
    let _ = writeln!(out, "</g>");
    out.push_str("</svg>\n");
    out
}

fn short(v: f64) -> String {
    format!("{v:.3}")
}

pub fn emit_svg_scatter(rows: &[Row], path: &Path) -> Result<()> {
    write_file(path, svg_scatter(rows).as_bytes())
}

/// Number of elements carrying `class="point"` in an SVG document.
pub fn count_svg_points(svg: &str) -> usize {
    svg.split('<')
        .skip(1)
        .filter(|tag| !tag.starts_with('/') && !tag.starts_with('!') && !tag.starts_with('?'))
        .filter(|tag| {
            let head = tag.split('>').next().unwrap_or("");
            head.split_whitespace()
                .any(|attr| attr == r#"class="point""# || attr == "class='point'")
        })
        .count()
}
