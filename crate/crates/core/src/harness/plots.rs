//! Static plot files: SVG line charts and PNG heatmaps.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const COLOURS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Line chart of one or more series over shared x values, with the y axis
/// fixed to `y_range`.
pub fn line_chart_svg(
    title: &str,
    x: &[f64],
    series: &[(&str, Vec<f64>)],
    y_range: (f64, f64),
) -> Result<String> {
    if x.is_empty() {
        return Err(Error::invalid("line chart needs at least one point"));
    }
    if let Some((name, _)) = series.iter().find(|(_, ys)| ys.len() != x.len()) {
        return Err(Error::invalid(format!(
            "series `{name}` length differs from x"
        )));
    }
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 160.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let (x0, x1) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let xspan = if x1 > x0 { x1 - x0 } else { 1.0 };
    let (y0, y1) = y_range;
    let px = |v: f64| left + (v - x0) / xspan * pw;
    let py = |v: f64| top + ph - (v.clamp(y0, y1) - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    for i in 0..=5 {
        let v = y0 + (y1 - y0) * i as f64 / 5.0;
        let y = py(v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.0}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    for &v in x {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v}</text>"#,
            px(v),
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for (k, (name, ys)) in series.iter().enumerate() {
        let colour = COLOURS[k % COLOURS.len()];
        let points: Vec<String> = x
            .iter()
            .zip(ys)
            .map(|(&a, &b)| format!("{:.1},{:.1}", px(a), py(b)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        for p in &points {
            let (cx, cy) = p.split_once(',').expect("formatted above");
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{colour}"/>"#);
        }
        let ly = top + 16.0 + 20.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Maps `[-1, 1]` to blue, white and red.
pub fn diverging_colour(v: f64) -> Rgb<u8> {
    let t = v.clamp(-1.0, 1.0);
    let mix = |a: f64, b: f64, f: f64| (a + (b - a) * f).round() as u8;
    if t >= 0.0 {
        Rgb([255, mix(255.0, 40.0, t), mix(255.0, 40.0, t)])
    } else {
        let f = -t;
        Rgb([mix(255.0, 40.0, f), mix(255.0, 90.0, f), 255])
    }
}

/// Renders a square block per matrix cell.
pub fn heatmap_image(values: &[Vec<f64>], cell: u32) -> Result<RgbImage> {
    let rows = values.len();
    let cols = values.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || values.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid(
            "heatmap needs a non-empty rectangular matrix",
        ));
    }
    let cell = cell.max(1);
    let mut img = RgbImage::new(cols as u32 * cell, rows as u32 * cell);
    for (x, y, px) in img.enumerate_pixels_mut() {
        *px = diverging_colour(values[(y / cell) as usize][(x / cell) as usize]);
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
