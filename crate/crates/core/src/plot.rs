//! Static SVG chart of history, mean forecast and the outer quantile band.

use std::fmt::Write;

use crate::forecast::ForecastResult;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 40.0;

struct Frame {
    n: usize,
    lo: f64,
    hi: f64,
}

impl Frame {
    fn x(&self, i: usize) -> f64 {
        let span = (self.n.max(2) - 1) as f64;
        MARGIN + (WIDTH - 2.0 * MARGIN) * i as f64 / span
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v - self.lo) / (self.hi - self.lo)
    }

    fn points(&self, offset: usize, values: &[f64]) -> String {
        let mut s = String::new();
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            write!(s, "{:.2},{:.2}", self.x(offset + i), self.y(*v)).unwrap();
        }
        s
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// `history` precedes the forecast on the time axis; `actual`, when given,
/// overlays observed values of the forecast span.
pub fn forecast_svg(title: &str, history: &[f64], forecast: &ForecastResult, actual: Option<&[f64]>) -> String {
    let band = (forecast.quantiles.first(), forecast.quantiles.last());
    let mut all: Vec<f64> = history.iter().chain(&forecast.mean).copied().collect();
    if let (Some(lo), Some(hi)) = band {
        all.extend(lo.iter().chain(hi.iter()));
    }
    if let Some(a) = actual {
        all.extend_from_slice(a);
    }
    let mut lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        lo -= 1.0;
        hi += 1.0;
    }
    let f = Frame {
        n: history.len() + forecast.horizon,
        lo,
        hi,
    };
    let start = history.len();

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(svg, r#"<text x="{MARGIN}" y="24" font-family="sans-serif" font-size="14">{}</text>"#, escape(title))
        .unwrap();
    writeln!(
        svg,
        r##"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="#444"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="#444"/>"##,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="4" y="{:.2}" font-family="sans-serif" font-size="10">{hi:.3}</text><text x="4" y="{:.2}" font-family="sans-serif" font-size="10">{lo:.3}</text>"#,
        f.y(hi) + 4.0,
        f.y(lo)
    )
    .unwrap();

    if let (Some(lower), Some(upper)) = band {
        if forecast.quantiles.len() >= 2 {
            let mut upper_rev = upper.clone();
            upper_rev.reverse();
            let back: Vec<String> = upper_rev
                .iter()
                .enumerate()
                .map(|(k, v)| format!("{:.2},{:.2}", f.x(start + forecast.horizon - 1 - k), f.y(*v)))
                .collect();
            writeln!(
                svg,
                r##"<polygon class="band" points="{} {}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>"##,
                f.points(start, lower),
                back.join(" ")
            )
            .unwrap();
        }
    }
    if !history.is_empty() {
        writeln!(
            svg,
            r##"<polyline class="history" points="{}" fill="none" stroke="#222" stroke-width="1.5"/>"##,
            f.points(0, history)
        )
        .unwrap();
    }
    if let Some(a) = actual {
        writeln!(
            svg,
            r##"<polyline class="actual" points="{}" fill="none" stroke="#222" stroke-dasharray="4 3" stroke-width="1.5"/>"##,
            f.points(start, a)
        )
        .unwrap();
    }
    writeln!(
        svg,
        r##"<polyline class="mean" points="{}" fill="none" stroke="#d62728" stroke-width="2"/>"##,
        f.points(start, &forecast.mean)
    )
    .unwrap();
    svg.push_str("</svg>\n");
    svg
}
