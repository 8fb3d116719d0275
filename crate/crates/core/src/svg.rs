//! Minimal deterministic SVG line charts.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            name: name.into(),
            points,
            dashed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Vertical dashed markers at an x position, with a label.
    pub markers: Vec<(f64, String)>,
    /// Draw points as dots instead of connected lines.
    pub scatter: bool,
}

/// Data ranges of a chart, padded when degenerate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s == "-0" {
            "0".into()
        } else {
            s.into()
        }
    }
}

impl LineChart {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        LineChart {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            ..LineChart::default()
        }
    }

    pub fn with_series(mut self, series: Series) -> Self {
        self.series.push(series);
        self
    }

    /// Extremes over every finite point and marker.
    pub fn bounds(&self) -> Bounds {
        let pts = self
            .series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite());
        let mut b = Bounds {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for &(x, y) in pts {
            b.x_min = b.x_min.min(x);
            b.x_max = b.x_max.max(x);
            b.y_min = b.y_min.min(y);
            b.y_max = b.y_max.max(y);
        }
        for &(x, _) in &self.markers {
            b.x_min = b.x_min.min(x);
            b.x_max = b.x_max.max(x);
        }
        if !b.x_min.is_finite() {
            b.x_min = 0.0;
            b.x_max = 1.0;
        }
        if !b.y_min.is_finite() {
            b.y_min = 0.0;
            b.y_max = 1.0;
        }
        if b.x_max - b.x_min < 1e-12 {
            b.x_min -= 0.5;
            b.x_max += 0.5;
        }
        if b.y_max - b.y_min < 1e-12 * b.y_max.abs().max(1.0) {
            b.y_min -= 0.5;
            b.y_max += 0.5;
        }
        b
    }

    pub fn render(&self) -> String {
        let b = self.bounds();
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - b.x_min) / (b.x_max - b.x_min) * pw;
        let sy = |y: f64| TOP + (b.y_max - y) / (b.y_max - b.y_min) * ph;

        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" data-x-min="{}" data-x-max="{}" data-y-min="{}" data-y-max="{}">"#,
            b.x_min, b.x_max, b.y_min, b.y_max
        );
        let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
            num(LEFT + pw / 2.0),
            escape(&self.title)
        );
        let _ = writeln!(
            out,
            r##"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
            num(pw),
            num(ph)
        );
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let xv = b.x_min + t * (b.x_max - b.x_min);
            let yv = b.y_min + t * (b.y_max - b.y_min);
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
                num(sx(xv)),
                num(TOP + ph + 16.0),
                tick_label(xv)
            );
            let _ = writeln!(
                out,
                r##"<line x1="{LEFT}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##,
                num(LEFT + pw),
                y = num(sy(yv))
            );
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
                num(LEFT - 6.0),
                num(sy(yv) + 4.0),
                tick_label(yv)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
            num(LEFT + pw / 2.0),
            num(HEIGHT - 12.0),
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{y}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
            escape(&self.y_label),
            y = num(TOP + ph / 2.0)
        );

        for (x, label) in &self.markers {
            let _ = writeln!(
                out,
                r##"<line x1="{x}" y1="{TOP}" x2="{x}" y2="{}" stroke="#1f3fbf" stroke-dasharray="6 4"/>"##,
                num(TOP + ph),
                x = num(sx(*x))
            );
            let _ = writeln!(
                out,
                r##"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="#1f3fbf">{}</text>"##,
                num(sx(*x) + 4.0),
                num(TOP + 12.0),
                escape(label)
            );
        }

        for (k, s) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let finite: Vec<(f64, f64)> = s
                .points
                .iter()
                .copied()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .collect();
            if self.scatter {
                for (x, y) in &finite {
                    let _ = writeln!(
                        out,
                        r#"<circle cx="{}" cy="{}" r="2.5" fill="{color}"/>"#,
                        num(sx(*x)),
                        num(sy(*y))
                    );
                }
            } else if !finite.is_empty() {
                let pts: Vec<String> = finite
                    .iter()
                    .map(|(x, y)| format!("{},{}", num(sx(*x)), num(sy(*y))))
                    .collect();
                let dash = if s.dashed { r#" stroke-dasharray="5 3""# } else { "" };
                let _ = writeln!(
                    out,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.8"{dash} points="{}"/>"#,
                    pts.join(" ")
                );
            }
            let ly = TOP + 14.0 + 18.0 * k as f64;
            let lx = LEFT + pw + 12.0;
            let _ = writeln!(
                out,
                r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-width="3"/>"#,
                num(lx),
                num(ly - 4.0),
                num(lx + 18.0),
                num(ly - 4.0)
            );
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
                num(lx + 24.0),
                num(ly),
                escape(&s.name)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Reads the data range attributes back from a rendered chart.
pub fn parse_bounds(svg: &str) -> Option<Bounds> {
    let attr = |name: &str| -> Option<f64> {
        let key = format!("{name}=\"");
        let start = svg.find(&key)? + key.len();
        let end = start + svg[start..].find('"')?;
        svg[start..end].parse().ok()
    };
    Some(Bounds {
        x_min: attr("data-x-min")?,
        x_max: attr("data-x-max")?,
        y_min: attr("data-y-min")?,
        y_max: attr("data-y-max")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chart() -> LineChart {
        LineChart::new("loss", "epoch", "value")
            .with_series(Series::new("a", vec![(1.0, 3.0), (2.0, -1.5), (3.0, f64::INFINITY)]))
            .with_series(Series::new("b <&>", vec![(0.5, 0.0), (4.0, 2.0)]))
    }

    #[test]
    fn bounds_cover_finite_extrema() {
        let svg = chart().render();
        let b = parse_bounds(&svg).unwrap();
        assert_eq!((b.x_min, b.x_max, b.y_min, b.y_max), (0.5, 4.0, -1.5, 3.0));
    }

    #[test]
    fn rendering_is_deterministic_and_escaped() {
        let a = chart().render();
        assert_eq!(a, chart().render());
        assert!(a.contains("b &lt;&amp;&gt;"));
        assert_eq!(a.matches("<polyline").count(), 2);
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
    }

    #[test]
    fn degenerate_ranges_are_padded() {
        let c = LineChart::new("t", "x", "y").with_series(Series::new("flat", vec![(1.0, 2.0), (1.0, 2.0)]));
        let b = c.bounds();
        assert!(b.x_max > b.x_min && b.y_max > b.y_min);
        let empty = LineChart::new("t", "x", "y").bounds();
        assert_eq!((empty.x_min, empty.x_max), (0.0, 1.0));
    }

    #[test]
    fn markers_extend_the_range() {
        let mut c = chart();
        c.markers.push((10.0, "b_s - 1".into()));
        let svg = c.render();
        assert_eq!(parse_bounds(&svg).unwrap().x_max, 10.0);
        assert!(svg.contains("stroke-dasharray=\"6 4\""));
    }
}
