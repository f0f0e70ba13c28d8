//! SVG line charts of metrics CSV columns.

use std::fmt::Write as _;
use std::path::Path;

use crate::{CliError, CliResult, PlotArgs};

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const WIDTH: f64 = 640.0;
const PANEL_HEIGHT: f64 = 260.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_Y: f64 = 30.0;

/// Points of one column of one file; `x` is the `epoch` column when present,
/// otherwise the 1-based row number.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<(u64, Vec<String>)>,
}

pub fn read_table(path: &Path) -> CliResult<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| malformed(path, &e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| malformed(path, &e))?;
        let line = record.position().map_or(0, |p| p.line());
        rows.push((line, record.iter().map(str::to_string).collect()));
    }
    Ok(Table { headers, rows })
}

fn malformed(path: &Path, e: &csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line());
    CliError::validation(format!("{}: malformed CSV at line {line}: {e}", path.display()))
}

/// Extracts `(x, column)` pairs, skipping empty cells.
pub fn column(table: &Table, path: &Path, name: &str) -> CliResult<Vec<(f64, f64)>> {
    let Some(col) = table.headers.iter().position(|h| h == name) else {
        return Ok(Vec::new());
    };
    let epoch = table.headers.iter().position(|h| h == "epoch");
    let parse = |cell: &str, line: u64| -> CliResult<f64> {
        cell.trim().parse::<f64>().map_err(|_| {
            CliError::validation(format!(
                "{}: malformed CSV at line {line}: `{cell}` is not a number",
                path.display()
            ))
        })
    };
    let mut points = Vec::new();
    for (i, (line, cells)) in table.rows.iter().enumerate() {
        let cell = cells.get(col).map(String::as_str).unwrap_or("");
        if cell.trim().is_empty() {
            continue;
        }
        let x = match epoch {
            Some(e) => parse(cells.get(e).map(String::as_str).unwrap_or(""), *line)?,
            None => (i + 1) as f64,
        };
        points.push((x, parse(cell, *line)?));
    }
    Ok(points)
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let mut x = (f64::INFINITY, f64::NEG_INFINITY);
    let mut y = (f64::INFINITY, f64::NEG_INFINITY);
    for &(px, py) in series.iter().flat_map(|s| &s.points) {
        x = (x.0.min(px), x.1.max(px));
        y = (y.0.min(py), y.1.max(py));
    }
    let widen = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    (widen(x), widen(y))
}

fn panel(svg: &mut String, top: f64, title: &str, series: &[Series]) {
    let (x0, x1) = (MARGIN_LEFT, WIDTH - MARGIN_RIGHT);
    let (y0, y1) = (top + MARGIN_Y, top + PANEL_HEIGHT - MARGIN_Y);
    writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{title}</text>"#,
        (x0 + x1) / 2.0,
        top + 18.0
    )
    .unwrap();
    writeln!(
        svg,
        r##"<rect x="{x0:.1}" y="{y0:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
        x1 - x0,
        y1 - y0
    )
    .unwrap();
    if series.is_empty() {
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">no data</text>"#,
            (x0 + x1) / 2.0,
            (y0 + y1) / 2.0
        )
        .unwrap();
        return;
    }
    let ((xa, xb), (ya, yb)) = bounds(series);
    let sx = |v: f64| x0 + (v - xa) / (xb - xa) * (x1 - x0);
    let sy = |v: f64| y1 - (v - ya) / (yb - ya) * (y1 - y0);
    for (v, anchor, x) in [(xa, "start", x0), (xb, "end", x1)] {
        writeln!(
            svg,
            r#"<text x="{x:.1}" y="{:.1}" font-size="10" text-anchor="{anchor}">{}</text>"#,
            y1 + 14.0,
            trim(v)
        )
        .unwrap();
    }
    for (v, y) in [(ya, y1), (yb, y0)] {
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"#,
            x0 - 4.0,
            y + 4.0,
            trim(v)
        )
        .unwrap();
    }
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        )
        .unwrap();
        let ly = y0 + 14.0 * i as f64 + 8.0;
        writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            x1 + 10.0,
            x1 + 28.0
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
            x1 + 32.0,
            ly + 4.0,
            escape(&s.label)
        )
        .unwrap();
    }
}

fn trim(v: f64) -> String {
    let s = format!("{v:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Two stacked panels: mIoU and loss against epoch.
pub fn render(miou: &[Series], loss: &[Series]) -> String {
    let height = 2.0 * PANEL_HEIGHT;
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">"#
    );
    svg.push('\n');
    panel(&mut svg, 0.0, "validation mIoU vs epoch", miou);
    panel(&mut svg, PANEL_HEIGHT, "loss vs epoch", loss);
    svg.push_str("</svg>\n");
    svg
}

pub fn run(a: &PlotArgs) -> CliResult {
    let mut miou = Vec::new();
    let mut loss = Vec::new();
    for path in &a.csv {
        let table = read_table(path)?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for (name, out) in [("miou", &mut miou), ("loss", &mut loss)] {
            let points = column(&table, path, name)?;
            if points.is_empty() {
                eprintln!("warning: {}: column `{name}` is empty, series omitted", path.display());
            } else {
                out.push(Series {
                    label: label.clone(),
                    points,
                });
            }
        }
    }
    std::fs::write(&a.out, render(&miou, &loss))
        .map_err(|e| CliError::validation(format!("{}: {e}", a.out.display())))?;
    println!("wrote {}", a.out.display());
    Ok(())
}
