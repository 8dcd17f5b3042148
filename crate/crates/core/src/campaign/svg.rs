//! Minimal deterministic SVG line plots and histograms.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct HLine {
    pub y: f64,
    pub label: String,
    pub dashed: bool,
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let pad = |(lo, hi): (f64, f64)| {
            if !(lo.is_finite() && hi.is_finite()) {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        Self { x: pad(x), y: pad(y) }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn ticks((lo, hi): (f64, f64)) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn header(out: &mut String, title: &str, xlabel: &str, ylabel: &str, f: &Frame) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    );
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(
        out,
        "<rect x=\"{x0}\" y=\"{y0}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        x1 - x0,
        y1 - y0
    );
    for t in ticks(f.x) {
        let x = f.px(t);
        let _ = writeln!(
            out,
            "<line x1=\"{x:.1}\" y1=\"{y1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\
             <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            y1 + 5.0,
            y1 + 18.0,
            fmt_tick(t)
        );
    }
    for t in ticks(f.y) {
        let y = f.py(t);
        let _ = writeln!(
            out,
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{x0}\" y2=\"{y:.1}\" stroke=\"black\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>",
        (x0 + x1) / 2.0,
        H - 12.0,
        escape(xlabel),
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
}

fn fmt_tick(t: f64) -> String {
    let s = format!("{t:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Polylines over a shared frame, plus horizontal reference lines.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series], hlines: &[HLine]) -> String {
    let x = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let y = bounds(
        series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.1))
            .chain(hlines.iter().map(|h| h.y)),
    );
    let f = Frame::new(x, y);
    let mut out = String::new();
    header(&mut out, title, xlabel, ylabel, &f);
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(a, b)| format!("{:.1},{:.1}", f.px(a), f.py(b)))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.2\" points=\"{}\"><title>{}</title></polyline>",
            PALETTE[i % PALETTE.len()],
            pts.join(" "),
            escape(&s.label)
        );
    }
    for (i, h) in hlines.iter().enumerate() {
        let y = f.py(h.y);
        let dash = if h.dashed { " stroke-dasharray=\"6 4\"" } else { "" };
        let _ = writeln!(
            out,
            "<line class=\"hline\" x1=\"{LEFT}\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" stroke=\"black\"{dash}/>\
             <text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            W - RIGHT,
            W - RIGHT - 4.0,
            y - 4.0 - 12.0 * (i % 2) as f64,
            escape(&h.label)
        );
    }
    if series.len() > 1 && series.len() <= PALETTE.len() {
        for (i, s) in series.iter().enumerate() {
            let y = TOP + 14.0 + 14.0 * i as f64;
            let _ = writeln!(
                out,
                "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{}\" stroke-width=\"2\"/>\
                 <text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
                LEFT + 10.0,
                LEFT + 30.0,
                PALETTE[i % PALETTE.len()],
                LEFT + 35.0,
                y + 4.0,
                escape(&s.label)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Histogram of the finite values; the count of non-finite ones goes into
/// the title.
pub fn histogram(title: &str, xlabel: &str, values: &[f64], bins: usize) -> String {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let skipped = values.len() - finite.len();
    let title = if skipped > 0 {
        format!("{title} ({skipped} non-finite omitted)")
    } else {
        title.to_string()
    };
    let bins = bins.max(1);
    let (lo, hi) = bounds(finite.iter().copied());
    let (lo, hi) = if finite.is_empty() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in &finite {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let f = Frame::new((lo, hi), (0.0, top));
    let mut out = String::new();
    header(&mut out, &title, xlabel, "count", &f);
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let x0 = f.px(lo + i as f64 * width);
        let x1 = f.px(lo + (i + 1) as f64 * width);
        let y = f.py(c as f64);
        let _ = writeln!(
            out,
            "<rect class=\"bar\" x=\"{x0:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\" stroke=\"white\"/>",
            x1 - x0,
            f.py(0.0) - y,
            PALETTE[0]
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_are_round_and_cover_range() {
        assert_eq!(ticks((0.0, 10.0)), vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
        let t = ticks((95.3, 131.0));
        assert!(t.first().unwrap() >= &95.3 && t.last().unwrap() <= &131.0);
        assert!(t.len() >= 3);
    }

    #[test]
    fn line_plot_contains_series_and_reference_lines() {
        let s = Series {
            label: "a<b".into(),
            points: vec![(0.0, 1.0), (1.0, 2.0), (2.0, f64::NAN)],
        };
        let svg = line_plot(
            "t",
            "x",
            "y",
            &[s],
            &[
                HLine { y: 1.5, label: "lo".into(), dashed: false },
                HLine { y: 1.8, label: "hi".into(), dashed: true },
            ],
        );
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert_eq!(svg.matches("class=\"hline\"").count(), 2);
        assert!(svg.contains("a&lt;b"));
    }

    #[test]
    fn histogram_counts_every_finite_value() {
        let v = [0.0, 0.1, 0.2, 1.0, f64::INFINITY];
        let svg = histogram("h", "v", &v, 2);
        assert!(svg.contains("1 non-finite omitted"));
        assert_eq!(svg.matches("class=\"bar\"").count(), 2);
        // constant input must not divide by zero
        let svg = histogram("h", "v", &[3.0; 4], 5);
        assert!(!svg.contains("NaN"));
    }
}
