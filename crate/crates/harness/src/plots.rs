//! Figures regenerated from the files of a finished run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use matchcut_core::io::{encode_frame_png, frame_strip, read_apng};
use matchcut_core::{Result, Video, VideoShape};

use crate::assemble::assemble_matchcut;
use crate::experiment::{unit_dir, ExperimentReport, EXTRA_COLUMNS, METRIC_COLUMNS};

const W: f64 = 520.0;
const H: f64 = 320.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 56.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A line plot of `values` (one per x label); `None` values are left out.
pub fn line_plot_svg(title: &str, labels: &[String], values: &[Option<f64>]) -> String {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    let (mut lo, mut hi) = present.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.08 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let n = labels.len().max(1);
    let x_at = |i: usize| if n == 1 { LEFT + (W - LEFT - RIGHT) / 2.0 } else { LEFT + i as f64 * (W - LEFT - RIGHT) / (n - 1) as f64 };
    let y_at = |v: f64| TOP + (hi - v) / (hi - lo) * (H - TOP - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(s, r#"<path d="M{x0} {y0} L{x0} {y1} L{x1} {y1}" stroke="black" fill="none"/>"#);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_at(v);
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{y:.1}" x2="{x1}" y2="{y:.1}" stroke="#ddd"/>"##);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, x0 - 6.0, y + 4.0);
    }
    for (i, l) in labels.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, x_at(i), y1 + 18.0, escape(l));
    }
    let pts: Vec<String> = values.iter().enumerate().filter_map(|(i, v)| v.map(|v| format!("{:.1},{:.1}", x_at(i), y_at(v)))).collect();
    if pts.len() > 1 {
        let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##, pts.join(" "));
    }
    for (i, v) in values.iter().enumerate() {
        if let Some(v) = v {
            let _ = writeln!(s, r##"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="#1f77b4"><title>{}: {v}</title></circle>"##, x_at(i), y_at(*v), escape(&labels[i]));
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `plots/<metric>.svg` for every metric with at least one value.
pub fn render_plots(out_dir: &Path) -> Result<Vec<PathBuf>> {
    let report = ExperimentReport::read(out_dir)?;
    let dir = out_dir.join("plots");
    std::fs::create_dir_all(&dir)?;
    let labels: Vec<String> = report.points.iter().map(|p| p.label.clone()).collect();
    let kind = report.spec.sweep.kind();
    let mut written = Vec::new();
    for metric in METRIC_COLUMNS.iter().chain(&EXTRA_COLUMNS) {
        let values = report.means(metric);
        if values.iter().all(Option::is_none) {
            continue;
        }
        let path = dir.join(format!("{metric}.svg"));
        std::fs::write(&path, line_plot_svg(&format!("{metric} ({kind})"), &labels, &values))?;
        written.push(path);
    }
    Ok(written)
}

fn stack_rows(rows: &[Video]) -> Result<Video> {
    let s = rows[0].shape();
    let mut out = Video::zeros(VideoShape::new(1, s.channels, s.height * rows.len(), s.width));
    for (r, v) in rows.iter().enumerate() {
        v.ensure_same_shape(&rows[0])?;
        for c in 0..s.channels {
            for y in 0..s.height {
                for x in 0..s.width {
                    out.set(0, c, r * s.height + y, x, v.at(0, c, y, x));
                }
            }
        }
    }
    Ok(out)
}

fn file_label(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

/// Writes one PNG per grid point: rows x_a, match cut, x_b of its first pair.
pub fn render_contact_sheets(out_dir: &Path) -> Result<Vec<PathBuf>> {
    let report = ExperimentReport::read(out_dir)?;
    let dir = out_dir.join("contact_sheets");
    std::fs::create_dir_all(&dir)?;
    let cut = report.spec.cut();
    let mut written = Vec::new();
    for (i, p) in report.points.iter().enumerate() {
        let Some(hash) = p.units.first() else { continue };
        let unit = unit_dir(out_dir, hash);
        let x_a = read_apng(&unit.join("x_a.png"))?;
        let x_b = read_apng(&unit.join("x_b.png"))?;
        let cut_video = assemble_matchcut(&x_a, &x_b, cut)?;
        let sheet = stack_rows(&[frame_strip(&x_a), frame_strip(&cut_video), frame_strip(&x_b)])?;
        let path = dir.join(format!("{i:02}_{}.png", file_label(&p.label)));
        std::fs::write(&path, encode_frame_png(&sheet, 0)?)?;
        written.push(path);
    }
    Ok(written)
}
