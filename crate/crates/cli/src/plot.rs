//! Static SVG line charts from metrics CSVs.

use std::fmt::Write;
use std::path::Path;

use crate::error::CliError;
use crate::metrics::{HEADER, METRIC_COLUMNS};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    /// `(epoch position, value)` pairs; a row at the end of epoch `e`
    /// sits at `e + 1`.
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn metric_column(metric: &str) -> Result<usize, CliError> {
    METRIC_COLUMNS
        .iter()
        .position(|&m| m == metric)
        .map(|i| i + 2)
        .ok_or_else(|| {
            CliError::Config(format!(
                "unknown metric `{metric}` (one of {})",
                METRIC_COLUMNS.join(", ")
            ))
        })
}

/// Parses the named metric from CSV text.
pub fn parse_series(text: &str, metric: &str, label: &str) -> Result<Series, CliError> {
    let col = metric_column(metric)?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(CliError::Config(format!(
            "{label}: not a metrics CSV (header mismatch)"
        )));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let bad = || CliError::Config(format!("{label}: malformed row {}", n + 2));
        if fields.len() != 10 {
            return Err(bad());
        }
        let round: usize = fields[0].parse().map_err(|_| bad())?;
        let epoch: usize = fields[1].parse().map_err(|_| bad())?;
        let value: Option<f64> = match fields[col] {
            "" => None,
            s => Some(s.parse().map_err(|_| bad())?),
        };
        rows.push((round, epoch, value));
    }
    if rows.is_empty() {
        return Err(CliError::Config(format!("{label}: no data rows")));
    }
    let rpe = rows
        .iter()
        .filter(|r| r.1 == 0)
        .map(|r| r.0 + 1)
        .max()
        .ok_or_else(|| CliError::Config(format!("{label}: no rows for epoch 0")))?;
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|&(round, _, v)| v.map(|v| ((round + 1) as f64 / rpe as f64, v)))
        .collect();
    if points.is_empty() {
        return Err(CliError::Config(format!(
            "{label}: no values for `{metric}`"
        )));
    }
    Ok(Series {
        label: label.to_string(),
        points,
    })
}

pub fn read_series(path: &Path, metric: &str) -> Result<Series, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    parse_series(&text, metric, &label)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// Renders the series as one polyline each, with axes, ticks and a legend.
pub fn render_svg(series: &[Series], metric: &str) -> String {
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x_max, mut y_min, mut y_max) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    if y_max - y_min < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + x / x_max * plot_w;
    let py = |y: f64| TOP + (y_max - y) / (y_max - y_min) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let (x0, y0, x1, y1) = (LEFT, TOP + plot_h, LEFT + plot_w, TOP);
    let _ = writeln!(
        s,
        r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let fx = x_max * i as f64 / 4.0;
        let fy = y_min + (y_max - y_min) * i as f64 / 4.0;
        let (tx, ty) = (px(fx), py(fy));
        let _ = writeln!(
            s,
            r#"<line x1="{tx:.2}" y1="{y0}" x2="{tx:.2}" y2="{:.2}" stroke="black"/><text x="{tx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            y0 + 4.0,
            y0 + 16.0,
            tick_label(fx)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ty:.2}" x2="{x0}" y2="{ty:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 - 4.0,
            x0 - 6.0,
            ty + 4.0,
            tick_label(fy)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">epoch</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(metric)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 10.0 + 16.0 * i as f64;
        let lx = LEFT + plot_w + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 22.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}
