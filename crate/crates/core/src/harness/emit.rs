//! Rendered views of stored results. Every function here is a pure function
//! of values that also live in tensor containers.

use std::fmt::Write as _;

use crate::error::{check_len, Result};
use crate::flow::TrainHistory;
use crate::metrics::CalibrationReport;

/// Binary 16-bit PGM of a `rows × cols` field stored row-major.
///
/// Values are mapped linearly from `[lo, hi]` (the field's own minimum and
/// maximum) onto `0..=65535`, so `value = lo + (hi − lo) · p / 65535`. The
/// header carries `lo` and `hi` in a comment line. A constant field encodes
/// as all zeros. Samples are big-endian as the format requires.
pub fn pgm16(values: &[f64], rows: usize, cols: usize) -> Result<Vec<u8>> {
    check_len("pgm16 values", rows * cols, values.len())?;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if values.is_empty() { (0.0, 0.0) } else { (lo, hi) };
    let mut out = format!("P5\n# scale lo={lo:e} hi={hi:e}\n{cols} {rows}\n65535\n").into_bytes();
    let span = hi - lo;
    for &v in values {
        let p = if span > 0.0 { ((v - lo) / span * 65535.0).round().clamp(0.0, 65535.0) as u16 } else { 0 };
        out.extend_from_slice(&p.to_be_bytes());
    }
    Ok(out)
}

/// Decodes the pixel values and the `(lo, hi)` scale of [`pgm16`] output.
pub fn read_pgm16(bytes: &[u8]) -> Option<((f64, f64), usize, usize, Vec<u16>)> {
    let mut lines = 0;
    let mut end = 0;
    while lines < 4 {
        end += bytes[end..].iter().position(|&b| b == b'\n')? + 1;
        lines += 1;
    }
    let header = std::str::from_utf8(&bytes[..end]).ok()?;
    let mut it = header.lines();
    if it.next()? != "P5" {
        return None;
    }
    let scale = it.next()?.strip_prefix("# scale ")?;
    let mut parts = scale.split(' ');
    let lo: f64 = parts.next()?.strip_prefix("lo=")?.parse().ok()?;
    let hi: f64 = parts.next()?.strip_prefix("hi=")?.parse().ok()?;
    let mut dims = it.next()?.split(' ');
    let cols: usize = dims.next()?.parse().ok()?;
    let rows: usize = dims.next()?.parse().ok()?;
    let px = bytes[end..].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Some(((lo, hi), rows, cols, px))
}

/// A `rows × cols` field as CSV, one grid row per line, shortest
/// round-trip decimal representation.
pub fn csv_grid(values: &[f64], rows: usize, cols: usize) -> Result<String> {
    check_len("csv_grid values", rows * cols, values.len())?;
    let mut s = String::new();
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols].iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    Ok(s)
}

pub fn history_csv(h: &TrainHistory) -> String {
    let mut s = String::from("epoch,train_objective,validation_objective,wall_seconds\n");
    for e in &h.epochs {
        writeln!(s, "{},{},{},{}", e.epoch, e.train_objective, e.validation_objective, e.wall_seconds).unwrap();
    }
    s
}

/// Rows `iteration,bin,lower,upper,count,uq,error` for a set of reports.
pub fn calibration_csv(reports: &[CalibrationReport]) -> String {
    let mut s = String::from("iteration,bin,lower,upper,count,uq,error\n");
    for (j, r) in reports.iter().enumerate() {
        for k in 0..r.counts.len() {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                j + 1,
                k,
                r.bin_edges[k],
                r.bin_edges[k + 1],
                r.counts[k],
                r.uq_per_bin[k],
                r.err_per_bin[k]
            )
            .unwrap();
        }
    }
    s
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

/// Five-number summary `(min, q1, median, q3, max)`.
pub fn five_numbers(values: &[f64]) -> Option<[f64; 5]> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some([v[0], quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75), v[v.len() - 1]])
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD / 2.0
    )
    .unwrap();
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axis_range(lo: f64, hi: f64) -> (f64, f64) {
    if !(hi > lo) {
        (lo - 0.5, lo + 0.5)
    } else {
        let m = 0.05 * (hi - lo);
        (lo - m, hi + m)
    }
}

/// Box plot of one distribution per group (whiskers at min and max).
pub fn boxplot_svg(title: &str, labels: &[String], groups: &[Vec<f64>]) -> String {
    let stats: Vec<Option<[f64; 5]>> = groups.iter().map(|g| five_numbers(g)).collect();
    let lo = stats.iter().flatten().map(|s| s[0]).fold(f64::INFINITY, f64::min);
    let hi = stats.iter().flatten().map(|s| s[4]).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { axis_range(lo, hi) } else { (0.0, 1.0) };
    let y = |v: f64| (H - PAD) - (v - lo) / (hi - lo) * (H - 2.0 * PAD);
    let mut s = svg_open(title);
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{lo:.4}</text>"#, PAD - 4.0, y(lo)).unwrap();
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{hi:.4}</text>"#, PAD - 4.0, y(hi) + 8.0).unwrap();
    let slot = (W - 1.5 * PAD) / groups.len().max(1) as f64;
    for (k, st) in stats.iter().enumerate() {
        let cx = PAD + slot * (k as f64 + 0.5);
        let label = labels.get(k).map(String::as_str).unwrap_or("");
        writeln!(s, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, H - PAD + 16.0, escape(label)).unwrap();
        let Some([mn, q1, md, q3, mx]) = *st else { continue };
        let half = slot * 0.25;
        writeln!(s, r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#, y(mn), y(mx)).unwrap();
        writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#9ecae1" stroke="black"/>"##,
            cx - half,
            y(q3),
            2.0 * half,
            y(q1) - y(q3)
        )
        .unwrap();
        writeln!(s, r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-width="2"/>"#, cx - half, y(md), cx + half, y(md)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Calibration curves: mean predicted std (x) against realized error (y) per
/// populated bin, one polyline per report, with the identity line.
pub fn calibration_svg(title: &str, reports: &[CalibrationReport]) -> String {
    const COLORS: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];
    let pts: Vec<Vec<(f64, f64)>> = reports
        .iter()
        .map(|r| {
            r.uq_per_bin
                .iter()
                .zip(&r.err_per_bin)
                .filter(|(u, e)| u.is_finite() && e.is_finite())
                .map(|(&u, &e)| (u, e))
                .collect()
        })
        .collect();
    let top = pts.iter().flatten().map(|&(u, e)| u.max(e)).fold(0.0, f64::max);
    let top = if top > 0.0 { top * 1.05 } else { 1.0 };
    let x = |v: f64| PAD + v / top * (W - 1.5 * PAD);
    let y = |v: f64| (H - PAD) - v / top * (H - 2.0 * PAD);
    let mut s = svg_open(title);
    writeln!(s, r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4 3"/>"#, x(0.0), y(0.0), x(top), y(top)).unwrap();
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">predicted std</text>"#, W / 2.0, H - 12.0).unwrap();
    writeln!(s, r#"<text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})" text-anchor="middle">error</text>"#, H / 2.0, H / 2.0).unwrap();
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{top:.4}</text>"#, x(top), H - PAD + 16.0).unwrap();
    for (j, line) in pts.iter().enumerate() {
        let color = COLORS[j % COLORS.len()];
        let path: Vec<String> = line.iter().map(|&(u, e)| format!("{:.2},{:.2}", x(u), y(e))).collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, path.join(" ")).unwrap();
        for &(u, e) in line {
            writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, x(u), y(e)).unwrap();
        }
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" fill="{color}">iteration {}</text>"#, PAD + 8.0, PAD + 14.0 * j as f64, j + 1).unwrap();
    }
    s.push_str("</svg>\n");
    s
}
