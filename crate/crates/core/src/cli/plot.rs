//! Static SVG line charts of metric logs.

use std::fmt::Write as _;

use crate::trainer::EpochMetrics;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f"];

pub struct Series<'a> {
    pub label: &'a str,
    pub values: Vec<f64>,
}

/// Line chart of each series against epoch index. Non-finite points are
/// skipped.
pub fn line_chart(title: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let finite = || series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0).max(2);
    let x = |i: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * i as f64 / (n - 1) as f64;
    let y = |v: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v - lo) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="25" text-anchor="middle" font-size="16">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<path d="M{m} {t} L{m} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="11">{:.3}</text>"#, 4.0, y(hi) + 4.0, hi);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="11">{:.3}</text>"#, 4.0, y(lo) + 4.0, lo);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">epoch</text>"#, WIDTH / 2.0, HEIGHT - 15.0);
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 15 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
            .collect();
        let _ = writeln!(svg, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="2"/>"#, points.join(" "));
        let ly = MARGIN + 16.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{ly}" font-size="12" fill="{color}">{}</text>"#,
            WIDTH - MARGIN - 90.0,
            escape(s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Weighted loss terms and total per epoch.
pub fn loss_chart(title: &str, m: &[EpochMetrics]) -> String {
    let col = |f: fn(&EpochMetrics) -> f64| m.iter().map(f).collect::<Vec<_>>();
    let series = [
        Series { label: "l1", values: col(|r| r.l1) },
        Series { label: "l2", values: col(|r| r.l2) },
        Series { label: "l3", values: col(|r| r.l3) },
        Series { label: "l4", values: col(|r| r.l4) },
        Series { label: "l5", values: col(|r| r.l5) },
        Series { label: "total", values: col(|r| r.total) },
    ];
    line_chart(title, "loss", &series)
}

pub fn accuracy_chart(title: &str, m: &[EpochMetrics]) -> String {
    let series = [Series {
        label: "target",
        values: m.iter().map(|r| r.acc_target).collect(),
    }];
    line_chart(title, "accuracy", &series)
}
