//! Minimal SVG line and step charts.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

/// Drawn as a step chart when `x_lo` and `x_hi` differ (binned data) and as a
/// polyline otherwise.
pub struct Series<'a> {
    pub x_lo: &'a [f64],
    pub x_hi: &'a [f64],
    pub y: &'a [f64],
}

impl Series<'_> {
    fn is_binned(&self) -> bool {
        self.x_lo.iter().zip(self.x_hi).any(|(a, b)| a != b)
    }

    fn vertices(&self) -> Vec<(f64, f64)> {
        if self.is_binned() {
            let mut v = Vec::with_capacity(2 * self.y.len());
            for i in 0..self.y.len() {
                v.push((self.x_lo[i], self.y[i]));
                v.push((self.x_hi[i], self.y[i]));
            }
            v
        } else {
            self.x_lo.iter().copied().zip(self.y.iter().copied()).collect()
        }
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo <= f64::EPSILON * lo.abs().max(1.0) {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

pub fn chart(title: &str, x_label: &str, series: &Series<'_>) -> String {
    let pts = series.vertices();
    let (x0, x1) = range(pts.iter().map(|p| p.0));
    let (y0, y1) = range(pts.iter().map(|p| p.1).chain([0.0]));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (bx0, bx1, by0, by1) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<rect x="{bx0}" y="{by0}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        bx1 - bx0,
        by1 - by0
    );
    if y0 < 0.0 && y1 > 0.0 {
        let z = sy(0.0);
        let _ = writeln!(s, r##"<line x1="{bx0}" y1="{z:.2}" x2="{bx1}" y2="{z:.2}" stroke="#bbb"/>"##);
    }
    let _ = writeln!(s, r#"<text x="{bx0}" y="{}">{}</text>"#, by1 + 16.0, fmt(x0));
    let _ = writeln!(s, r#"<text x="{bx1}" y="{}" text-anchor="end">{}</text>"#, by1 + 16.0, fmt(x1));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, bx0 - 4.0, by1, fmt(y0));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, bx0 - 4.0, by0 + 10.0, fmt(y1));
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );

    let mut path = String::new();
    for (i, (x, y)) in pts.iter().filter(|p| p.1.is_finite()).enumerate() {
        let _ = write!(path, "{}{:.2},{:.2} ", if i == 0 { 'M' } else { 'L' }, sx(*x), sy(*y));
    }
    let _ = writeln!(
        s,
        r##"<path d="{}" fill="none" stroke="#1f5fa8" stroke-width="1.5"/>"##,
        path.trim_end()
    );
    s.push_str("</svg>\n");
    s
}

fn fmt(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{}", (v * 1000.0).round() / 1000.0)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_chart_has_two_vertices_per_bin() {
        let s = Series {
            x_lo: &[0.0, 1.0],
            x_hi: &[1.0, 2.0],
            y: &[1.0, 3.0],
        };
        assert_eq!(s.vertices().len(), 4);
        let svg = chart("t<1>", "x", &s);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("t&lt;1&gt;"));
    }

    #[test]
    fn flat_data_does_not_divide_by_zero() {
        let s = Series {
            x_lo: &[1.0],
            x_hi: &[1.0],
            y: &[0.0],
        };
        assert!(!chart("flat", "x", &s).contains("NaN"));
    }
}
