//! Minimal deterministic SVG charts with matching CSV tables.

use std::fmt::Write;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const M: f64 = 60.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

pub fn line_plot_svg(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let pts = || series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (x0, x1) = range(pts().map(|p| p.0));
    let (y0, y1) = range(pts().map(|p| p.1));
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, W / 2.0, esc(title));
    let _ = writeln!(s, r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - M, W - M, H - M);
    let _ = writeln!(s, r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#, H - M);
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="{anchor}" font-size="11">{v:.4}</text>"#, sx(v), H - M + 16.0);
    }
    for v in [y0, y1] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="11">{v:.4}</text>"#, M - 4.0, sy(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, H - 16.0, esc(xlabel));
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">{}</text>"#, H / 2.0, H / 2.0, esc(ylabel));
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let ly = M + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" font-size="11" fill="{color}">{}</text>"#, W - M - 120.0, esc(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

pub fn series_csv(series: &[Series]) -> String {
    let mut s = String::from("series,x,y\n");
    for ser in series {
        for (x, y) in &ser.points {
            let _ = writeln!(s, "{},{x},{y}", csv_field(&ser.name));
        }
    }
    s
}

/// Heatmap of `values[row][col]`; `None` cells are drawn grey.
pub fn heatmap_svg(title: &str, rows: &[String], cols: &[String], values: &[Vec<Option<f64>>]) -> String {
    let (lo, hi) = range(values.iter().flatten().flatten().copied());
    let nr = rows.len().max(1) as f64;
    let nc = cols.len().max(1) as f64;
    let cw = (W - 2.0 * M) / nc;
    let ch = (H - 2.0 * M) / nr;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, W / 2.0, esc(title));
    for (i, row) in values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let fill = match v {
                Some(v) => {
                    let t = (v - lo) / (hi - lo);
                    let c = (255.0 * (1.0 - t)).round() as u8;
                    format!("rgb(255,{c},{c})")
                }
                None => "#cccccc".to_string(),
            };
            let (x, y) = (M + j as f64 * cw, M + i as f64 * ch);
            let _ = writeln!(s, r#"<rect x="{x:.1}" y="{y:.1}" width="{cw:.1}" height="{ch:.1}" fill="{fill}" stroke="white"/>"#);
            if let Some(v) = v {
                let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{v:.3}</text>"#, x + cw / 2.0, y + ch / 2.0 + 4.0);
            }
        }
    }
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"#, M - 4.0, M + (i as f64 + 0.5) * ch + 4.0, esc(r));
    }
    for (j, c) in cols.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="11">{}</text>"#, M + (j as f64 + 0.5) * cw, H - M + 16.0, esc(c));
    }
    s.push_str("</svg>\n");
    s
}

pub fn matrix_csv(rows: &[String], cols: &[String], values: &[Vec<Option<f64>>]) -> String {
    let mut s = String::from("row");
    for c in cols {
        let _ = write!(s, ",{}", csv_field(c));
    }
    s.push('\n');
    for (r, vals) in rows.iter().zip(values) {
        s.push_str(&csv_field(r));
        for v in vals {
            match v {
                Some(v) => {
                    let _ = write!(s, ",{v}");
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outputs_are_deterministic_and_escaped() {
        let ser = vec![Series { name: "a<b".into(), points: vec![(0.0, 1.0), (1.0, 2.0)] }];
        let a = line_plot_svg("t", "x", "y", &ser);
        assert_eq!(a, line_plot_svg("t", "x", "y", &ser));
        assert!(a.contains("a&lt;b") && a.starts_with("<svg"));
        assert_eq!(series_csv(&ser), "series,x,y\na<b,0,1\na<b,1,2\n");
        let rows = vec!["r0".to_string()];
        let cols = vec!["c0".to_string(), "c,1".to_string()];
        let vals = vec![vec![Some(0.5), None]];
        assert_eq!(matrix_csv(&rows, &cols, &vals), "row,c0,\"c,1\"\nr0,0.5,\n");
        assert!(heatmap_svg("h", &rows, &cols, &vals).contains("#cccccc"));
    }
}
