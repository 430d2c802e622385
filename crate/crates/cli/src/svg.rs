//! Minimal SVG boxplots: whiskers at min/max, box from p25 to p75,
//! median line and a p95 tick.

use std::fmt::Write;

use impest_core::validation::Quantiles;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

pub fn boxplot(title: &str, series: &[(&str, Option<Quantiles>)]) -> String {
    let shown: Vec<(&str, Quantiles)> = series.iter().filter_map(|(n, q)| q.map(|q| (*n, q))).collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    if shown.is_empty() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">no data</text>"#, WIDTH / 2.0, HEIGHT / 2.0);
        s.push_str("</svg>\n");
        return s;
    }
    let mut lo = shown.iter().map(|(_, q)| q.min).fold(f64::INFINITY, f64::min);
    let mut hi = shown.iter().map(|(_, q)| q.max).fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-300 {
        lo -= 0.5;
        hi += 0.5;
    }
    let plot_h = HEIGHT - TOP - BOTTOM;
    let y = |v: f64| TOP + plot_h * (hi - v) / (hi - lo);

    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#, HEIGHT - BOTTOM);
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(s, r#"<line x1="{}" y1="{yy:.2}" x2="{LEFT}" y2="{yy:.2}" stroke="black"/>"#, LEFT - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.3e}</text>"#, LEFT - 6.0, yy + 4.0);
    }

    let slot = (WIDTH - LEFT - RIGHT) / shown.len() as f64;
    let half = (slot * 0.3).min(40.0);
    for (i, (name, q)) in shown.iter().enumerate() {
        let cx = LEFT + slot * (i as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
            y(q.max),
            y(q.min)
        );
        for v in [q.min, q.max] {
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
                cx - half / 2.0,
                y(v),
                cx + half / 2.0,
                y(v)
            );
        }
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#9ecae1" stroke="black"/>"##,
            cx - half,
            y(q.p75),
            2.0 * half,
            (y(q.p25) - y(q.p75)).max(0.5)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#d62728" stroke-width="2"/>"##,
            cx - half,
            y(q.median),
            cx + half,
            y(q.median)
        );
        let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{:.2}" r="2.5" fill="black"/>"#, y(q.p95));
        let _ = writeln!(
            s,
            r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{} (n={})</text>"#,
            HEIGHT - BOTTOM + 20.0,
            escape(name),
            q.count
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_one_box_per_series() {
        let q = Quantiles::of(&[0.0, 1.0, 2.0]);
        let out = boxplot("t", &[("a", q), ("b", q), ("none", None)]);
        assert_eq!(out.matches("<rect x=").count(), 2);
        assert!(out.ends_with("</svg>\n"));
        assert!(boxplot("t", &[]).contains("no data"));
    }
}
