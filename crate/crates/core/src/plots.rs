//! File-emitting figure helpers: multi-series line charts and cumulative
//! histograms as SVG, metric grids as PNG heatmaps. Nothing interactive.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const VIRIDIS: [(u8, u8, u8); 5] =
    [(68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37)];
const MISSING: (u8, u8, u8) = (180, 180, 180);
pub const HEATMAP_CELL: u32 = 40;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Piecewise-linear viridis lookup, t clamped to [0, 1].
pub fn colormap(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(0.0, 1.0);
    let scaled = t * (VIRIDIS.len() - 1) as f64;
    let i = (scaled.floor() as usize).min(VIRIDIS.len() - 2);
    let f = scaled - i as f64;
    let (r0, g0, b0) = VIRIDIS[i];
    let (r1, g1, b1) = VIRIDIS[i + 1];
    let mix = |a: u8, b: u8| (a as f64 + f * (b as f64 - a as f64)).round() as u8;
    (mix(r0, r1), mix(g0, g1), mix(b0, b1))
}

/// Renders a value grid as one colored square per cell. NaN cells come
/// out gray. With `lower_is_better` the color scale is flipped so the
/// brightest cell is always the best one.
pub fn heatmap_png(path: &Path, grid: &Array2<f64>, lower_is_better: bool) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Argument("empty heatmap grid".into()));
    }
    let finite: Vec<f64> = grid.iter().copied().filter(|v| v.is_finite()).collect();
    let (lo, hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (rows, cols) = grid.dim();
    let mut img = image::RgbImage::new(cols as u32 * HEATMAP_CELL, rows as u32 * HEATMAP_CELL);
    for ((r, c), &v) in grid.indexed_iter() {
        let color = if !v.is_finite() {
            MISSING
        } else {
            let mut t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            if lower_is_better {
                t = 1.0 - t;
            }
            colormap(t)
        };
        for dy in 0..HEATMAP_CELL {
            for dx in 0..HEATMAP_CELL {
                img.put_pixel(
                    c as u32 * HEATMAP_CELL + dx,
                    r as u32 * HEATMAP_CELL + dy,
                    image::Rgb([color.0, color.1, color.2]),
                );
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::Parse(format!("could not write {}: {e}", path.display())))
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 62.0;
const MR: f64 = 20.0;
const MT: f64 = 34.0;
const MB: f64 = 48.0;

fn svg_head(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        W / 2.0
    )
}

fn axes(x_label: &str, y_label: &str) -> String {
    format!(
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{y_label}</text>\n",
        W - ML - MR,
        H - MT - MB,
        ML + (W - ML - MR) / 2.0,
        H - 10.0,
        MT + (H - MT - MB) / 2.0,
        MT + (H - MT - MB) / 2.0,
    )
}

fn pad_range(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Multi-series line chart. With `log_x` the x axis is logarithmic and
/// every x must be positive; tick labels show the raw x values of the
/// first series.
pub fn line_chart_svg(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    log_x: bool,
) -> Result<()> {
    let cleaned: Vec<(&str, Vec<(f64, f64)>)> = series
        .iter()
        .map(|s| {
            (
                s.name.as_str(),
                s.points
                    .iter()
                    .copied()
                    .filter(|(x, y)| x.is_finite() && y.is_finite())
                    .collect(),
            )
        })
        .collect();
    let all: Vec<(f64, f64)> = cleaned.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::Argument("no finite points to plot".into()));
    }
    if log_x && all.iter().any(|&(x, _)| x <= 0.0) {
        return Err(Error::Argument("logarithmic x axis requires positive x".into()));
    }
    let tx = |x: f64| if log_x { x.ln() } else { x };
    let (xlo, xhi) = pad_range(
        all.iter().map(|&(x, _)| tx(x)).fold(f64::INFINITY, f64::min),
        all.iter().map(|&(x, _)| tx(x)).fold(f64::NEG_INFINITY, f64::max),
    );
    let (ylo, yhi) = pad_range(
        all.iter().map(|&(_, y)| y).fold(f64::INFINITY, f64::min),
        all.iter().map(|&(_, y)| y).fold(f64::NEG_INFINITY, f64::max),
    );
    let px = |x: f64| ML + (tx(x) - xlo) / (xhi - xlo) * (W - ML - MR);
    let py = |y: f64| H - MB - (y - ylo) / (yhi - ylo) * (H - MT - MB);

    let mut svg = svg_head(title);
    svg.push_str(&axes(x_label, y_label));
    for &(x, _) in cleaned.first().map(|(_, p)| p.as_slice()).unwrap_or(&[]) {
        svg.push_str(&format!(
            "<line x1=\"{0:.1}\" y1=\"{1}\" x2=\"{0:.1}\" y2=\"{2}\" stroke=\"#ccc\"/>\n\
             <text x=\"{0:.1}\" y=\"{3}\" text-anchor=\"middle\">{x}</text>\n",
            px(x),
            MT,
            H - MB,
            H - MB + 16.0,
        ));
    }
    for i in 0..5 {
        let y = ylo + (yhi - ylo) * i as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{y:.3}</text>\n",
            ML - 6.0,
            py(y) + 4.0
        ));
    }
    for (i, (name, pts)) in cleaned.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> =
            pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            coords.join(" ")
        ));
        for &(x, y) in pts {
            svg.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{color}\"/>\n",
                px(x),
                py(y)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>\n",
            W - MR - 150.0,
            MT + 16.0 + 14.0 * i as f64
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// For each threshold, how many values sit at or above it.
pub fn cumulative_counts(values: &[f64], thresholds: &[f64]) -> Vec<usize> {
    thresholds
        .iter()
        .map(|&t| values.iter().filter(|&&v| v >= t).count())
        .collect()
}

/// Cumulative histogram over [0, 1]: bar at threshold i/bins has height
/// = count of values at or above that threshold. Counts are
/// nonincreasing left to right by construction.
pub fn cumulative_histogram_svg(path: &Path, title: &str, values: &[f64], bins: usize) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Argument("no per-image values to plot".into()));
    }
    if bins == 0 {
        return Err(Error::Argument("bins must be positive".into()));
    }
    let thresholds: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let counts = cumulative_counts(values, &thresholds);
    let n = values.len() as f64;

    let mut svg = svg_head(title);
    svg.push_str(&axes("threshold", "count at or above"));
    let bar_w = (W - ML - MR) / thresholds.len() as f64;
    let py = |c: f64| H - MB - c / n * (H - MT - MB);
    for (i, &c) in counts.iter().enumerate() {
        let x = ML + i as f64 * bar_w;
        svg.push_str(&format!(
            "<rect class=\"bar\" x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" \
             fill=\"#4878a8\" stroke=\"white\"/>\n",
            x,
            py(c as f64),
            bar_w,
            (H - MB) - py(c as f64),
        ));
    }
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{t:.2}</text>\n",
            ML + t * (W - ML - MR),
            H - MB + 16.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{:.0}</text>\n",
            ML - 6.0,
            py(t * n) + 4.0,
            t * n
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
