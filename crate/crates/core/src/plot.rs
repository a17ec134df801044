//! Minimal SVG writers: annotated heatmaps, line charts, and 2-D decision
//! regions with overlaid samples.

use std::fmt::Write;

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1", "#9c755f",
];
const REGION_PALETTE: [&str; 8] = [
    "#c6d5e6", "#fbd6b3", "#c9e2c5", "#f5c4c5", "#d3ebe9", "#f8edc0", "#e3d1df", "#dccbbf",
];

pub fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn header(width: f64, height: f64) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// Blue ramp from white (0) to dark (1); values are clamped to [lo, hi].
fn ramp(v: f64, lo: f64, hi: f64) -> String {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let mix = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(247.0, 8.0), mix(251.0, 48.0), mix(255.0, 107.0))
}

pub fn heatmap(values: &[Vec<f64>], row_labels: &[String], col_labels: &[String], title: &str) -> String {
    let cell = 56.0;
    let (left, top) = (110.0, 60.0);
    let rows = values.len();
    let cols = values.first().map_or(0, Vec::len);
    let width = left + cell * cols as f64 + 20.0;
    let height = top + cell * rows as f64 + 30.0;
    let (lo, hi) = values
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let mut s = header(width, height);
    let _ = writeln!(s, "<text x=\"{}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">{}</text>", width / 2.0, escape(title));
    for (j, label) in col_labels.iter().enumerate().take(cols) {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            left + cell * (j as f64 + 0.5),
            top - 8.0,
            escape(label)
        );
    }
    for (i, row) in values.iter().enumerate() {
        let y = top + cell * i as f64;
        if let Some(label) = row_labels.get(i) {
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{}</text>",
                left - 8.0,
                y + cell / 2.0 + 4.0,
                escape(label)
            );
        }
        for (j, v) in row.iter().enumerate() {
            let x = left + cell * j as f64;
            let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            let ink = if t > 0.55 { "white" } else { "black" };
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{}\" stroke=\"white\"/><text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\" fill=\"{ink}\">{}</text>",
                ramp(*v, lo, hi),
                x + cell / 2.0,
                y + cell / 2.0 + 4.0,
                format_cell(*v)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn format_cell(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e9 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub fn line_chart(series: &[Series], title: &str, x_label: &str, y_label: &str) -> String {
    let (width, height) = (640.0, 400.0);
    let (left, right, top, bottom) = (64.0, 150.0, 40.0, 50.0);
    let all = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in all {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pw = width - left - right;
    let ph = height - top - bottom;
    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;
    let mut s = header(width, height);
    let _ = writeln!(s, "<text x=\"{}\" y=\"22\" font-size=\"15\" text-anchor=\"middle\">{}</text>", left + pw / 2.0, escape(title));
    let _ = writeln!(s, "<rect x=\"{left}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#888\"/>");
    for k in 0..=4 {
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{:.3}</text>", left - 6.0, py(fy) + 3.0, fy);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{:.0}</text>", px(fx), top + ph + 14.0, fx);
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>", left + pw / 2.0, height - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", pts.join(" "));
        }
        let ly = top + 14.0 + 18.0 * k as f64;
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\" font-size=\"11\">{}</text>",
            width - right + 10.0,
            width - right + 30.0,
            width - right + 36.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub class: usize,
    /// Drawn as a hollow marker when true.
    pub hollow: bool,
}

/// Argmax regions of a `grid x grid` evaluation over `[-extent, extent]^2`
/// (`regions[row][col]`, row 0 at the top), region boundaries, and samples.
pub fn decision_regions(regions: &[Vec<usize>], extent: f64, points: &[ScatterPoint], title: &str) -> String {
    let size = 480.0;
    let (left, top) = (40.0, 40.0);
    let n = regions.len().max(1);
    let cell = size / n as f64;
    let mut s = header(left + size + 20.0, top + size + 40.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">{}</text>", left + size / 2.0, escape(title));
    for (i, row) in regions.iter().enumerate() {
        let mut j = 0;
        while j < row.len() {
            let class = row[j];
            let start = j;
            while j < row.len() && row[j] == class {
                j += 1;
            }
            let _ = writeln!(
                s,
                "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"{}\"/>",
                left + cell * start as f64,
                top + cell * i as f64,
                cell * (j - start) as f64,
                cell,
                REGION_PALETTE[class % REGION_PALETTE.len()]
            );
        }
    }
    let mut path = String::new();
    for i in 0..regions.len() {
        for j in 0..regions[i].len() {
            let (x, y) = (left + cell * j as f64, top + cell * i as f64);
            if j + 1 < regions[i].len() && regions[i][j] != regions[i][j + 1] {
                let _ = write!(path, "M{:.2} {:.2}v{:.2}", x + cell, y, cell);
            }
            if i + 1 < regions.len() && regions[i][j] != regions[i + 1][j] {
                let _ = write!(path, "M{:.2} {:.2}h{:.2}", x, y + cell, cell);
            }
        }
    }
    if !path.is_empty() {
        let _ = writeln!(s, "<path d=\"{path}\" stroke=\"black\" stroke-width=\"1.2\" fill=\"none\"/>");
    }
    let to_px = |v: f64| (v + extent) / (2.0 * extent) * size;
    for p in points {
        if p.x.abs() > extent || p.y.abs() > extent {
            continue;
        }
        let color = PALETTE[p.class % PALETTE.len()];
        let fill = if p.hollow { "none" } else { color };
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{fill}\" stroke=\"{color}\"/>",
            left + to_px(p.x),
            top + size - to_px(p.y)
        );
    }
    let _ = writeln!(s, "<rect x=\"{left}\" y=\"{top}\" width=\"{size}\" height=\"{size}\" fill=\"none\" stroke=\"#444\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{left}\" y=\"{}\" font-size=\"11\">[-{extent}, {extent}]^2; filled = source, hollow = target</text>",
        top + size + 20.0
    );
    s.push_str("</svg>\n");
    s
}
