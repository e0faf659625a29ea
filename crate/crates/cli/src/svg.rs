//! Minimal SVG charts: multi-series line plots and box plots.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 52.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Draw markers only, no connecting line.
    pub scatter: bool,
}

pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub series: Vec<Series>,
    /// Horizontal reference lines.
    pub hlines: Vec<(String, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if v.abs() < 1e-3 || v.abs() >= 1e4 {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Padded `[lo, hi]`, never degenerate.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn linear_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 6.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
    log_x: bool,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let (x, lo, hi) =
            if self.log_x { (x.log10(), self.x.0.log10(), self.x.1.log10()) } else { (x, self.x.0, self.x.1) };
        LEFT + (x - lo) / (hi - lo) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }
}

fn header(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        esc(title)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        H - 12.0,
        esc(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (TOP + H - BOTTOM) / 2.0,
        esc(y_label)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="#333"/>"##,
        W - LEFT - RIGHT,
        H - TOP - BOTTOM
    );
}

fn y_axis(out: &mut String, f: &Frame) {
    for t in linear_ticks(f.y.0, f.y.1) {
        let y = f.py(t);
        let _ = writeln!(out, r##"<line x1="{LEFT}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/>"##, W - RIGHT);
        let _ =
            writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, LEFT - 4.0, y + 4.0, fmt_tick(t));
    }
}

fn legend(out: &mut String, row: usize, color: &str, label: &str, dashed: bool) {
    let y = TOP + 8.0 + 16.0 * row as f64;
    let x = W - RIGHT + 10.0;
    let dash = if dashed { r#" stroke-dasharray="5,3""# } else { "" };
    let _ = writeln!(
        out,
        r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/>"#,
        x + 18.0
    );
    let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, x + 22.0, y + 4.0, esc(label));
}

impl LineChart {
    pub fn render(&self) -> String {
        let log_x = self.log_x && self.series.iter().flat_map(|s| &s.points).all(|p| p.0 > 0.0);
        let xs = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
        let x = if log_x {
            let (lo, hi) = range(xs.map(f64::log10));
            (10f64.powf(lo), 10f64.powf(hi))
        } else {
            range(xs)
        };
        let ys = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).chain(self.hlines.iter().map(|h| h.1));
        let f = Frame { x, y: range(ys), log_x };

        let mut out = String::new();
        header(&mut out, &self.title, &self.x_label, &self.y_label);
        y_axis(&mut out, &f);
        let x_ticks: Vec<f64> = if log_x {
            (f.x.0.log10().ceil() as i32..=f.x.1.log10().floor() as i32).map(|e| 10f64.powi(e)).collect()
        } else {
            linear_ticks(f.x.0, f.x.1)
        };
        for t in x_ticks {
            let px = f.px(t);
            let _ =
                writeln!(out, r##"<line x1="{px:.1}" y1="{TOP}" x2="{px:.1}" y2="{}" stroke="#ddd"/>"##, H - BOTTOM);
            let _ = writeln!(
                out,
                r#"<text x="{px:.1}" y="{}" text-anchor="middle">{}</text>"#,
                H - BOTTOM + 14.0,
                fmt_tick(t)
            );
        }

        let mut row = 0;
        for (label, y) in &self.hlines {
            let py = f.py(*y);
            let _ = writeln!(
                out,
                r##"<line x1="{LEFT}" y1="{py:.1}" x2="{}" y2="{py:.1}" stroke="#000" stroke-dasharray="5,3"/>"##,
                W - RIGHT
            );
            legend(&mut out, row, "#000", label, true);
            row += 1;
        }
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<(f64, f64)> = s.points.iter().map(|&(x, y)| (f.px(x), f.py(y))).collect();
            if !s.scatter && pts.len() > 1 {
                let d: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
                let _ = writeln!(
                    out,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                    d.join(" ")
                );
            }
            for (x, y) in &pts {
                let _ = writeln!(out, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{color}"/>"#);
            }
            legend(&mut out, row, color, &s.label, false);
            row += 1;
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Quartiles by linear interpolation between order statistics.
pub fn quartiles(values: &[f64]) -> [f64; 5] {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (i, frac) = (pos.floor() as usize, pos.fract());
        if i + 1 < v.len() {
            v[i] + frac * (v[i + 1] - v[i])
        } else {
            v[i]
        }
    };
    [v[0], q(0.25), q(0.5), q(0.75), v[v.len() - 1]]
}

/// One box (min, quartiles, max) per non-empty group, with the group mean as
/// a marker.
pub fn box_plot(title: &str, y_label: &str, groups: &[(String, Vec<f64>)]) -> String {
    let groups: Vec<&(String, Vec<f64>)> = groups.iter().filter(|g| !g.1.is_empty()).collect();
    let f = Frame {
        x: (0.0, groups.len().max(1) as f64),
        y: range(groups.iter().flat_map(|g| g.1.iter().copied())),
        log_x: false,
    };
    let mut out = String::new();
    header(&mut out, title, "", y_label);
    y_axis(&mut out, &f);
    let slot = (W - LEFT - RIGHT) / groups.len().max(1) as f64;
    for (i, (label, values)) in groups.iter().map(|g| (&g.0, &g.1)).enumerate() {
        let cx = f.px(i as f64 + 0.5);
        let half = (slot * 0.3).min(24.0);
        let [lo, q1, med, q3, hi] = quartiles(values);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="{color}"/>"#,
            f.py(lo),
            f.py(hi)
        );
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{color}" fill-opacity="0.25" stroke="{color}"/>"#,
            cx - half,
            f.py(q3),
            2.0 * half,
            (f.py(q1) - f.py(q3)).max(1.0)
        );
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{2:.1}" x2="{:.1}" y2="{2:.1}" stroke="{color}" stroke-width="2"/>"#,
            cx - half,
            cx + half,
            f.py(med)
        );
        let _ = writeln!(out, r##"<circle cx="{cx:.1}" cy="{:.1}" r="3" fill="#000"/>"##, f.py(mean));
        let _ = writeln!(
            out,
            r#"<text x="{cx:.1}" y="{0}" text-anchor="end" transform="rotate(-35 {cx:.1} {0})">{1}</text>"#,
            H - BOTTOM + 14.0,
            esc(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_interpolate() {
        assert_eq!(quartiles(&[4.0, 1.0, 3.0, 2.0, 5.0]), [1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(quartiles(&[1.0, 2.0]), [1.0, 1.25, 1.5, 1.75, 2.0]);
        assert_eq!(quartiles(&[7.0]), [7.0; 5]);
    }

    #[test]
    fn ticks_cover_the_range() {
        let t = linear_ticks(0.0, 1.0);
        assert_eq!(t.first(), Some(&0.0));
        assert!((t.last().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn labels_are_escaped() {
        let chart = LineChart {
            title: "a < b & c".into(),
            x_label: String::new(),
            y_label: String::new(),
            log_x: true,
            series: vec![Series { label: "s".into(), points: vec![(0.01, 0.5), (1.0, 0.9)], scatter: false }],
            hlines: vec![],
        };
        let svg = chart.render();
        assert!(svg.contains("a &lt; b &amp; c"));
        assert!(svg.contains("<polyline"));
    }
}
