//! Minimal static SVG charts. Output depends only on the inputs, so plots
//! are as reproducible as the JSON next to them.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 64.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str, width: f64, height: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    s
}

fn axes(s: &mut String, x_label: &str, y_label: &str, y_max: f64) {
    let (x0, y0, x1, y1) = (LEFT, H - BOTTOM, W - RIGHT, TOP);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{y:.1}" x2="{x1}" y2="{y:.1}" stroke="#ddd"/>"##);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, x0 - 6.0, y + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn nice_max(values: impl Iterator<Item = f64>) -> f64 {
    let m = values.filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    if m <= 0.0 {
        1.0
    } else if m <= 1.0 {
        (m * 10.0).ceil() / 10.0
    } else {
        m * 1.1
    }
}

/// Vertical bars; `None` values are drawn as an "n/a" label.
pub fn bar_chart(title: &str, y_label: &str, labels: &[String], values: &[Option<f64>]) -> String {
    let mut s = header(title, W, H);
    let y_max = nice_max(values.iter().flatten().copied());
    axes(&mut s, "", y_label, y_max);
    let n = labels.len().max(1) as f64;
    let slot = (W - LEFT - RIGHT) / n;
    let plot_h = H - BOTTOM - TOP;
    for (i, (label, v)) in labels.iter().zip(values).enumerate() {
        let x = LEFT + slot * i as f64 + slot * 0.15;
        let cx = LEFT + slot * (i as f64 + 0.5);
        match v {
            Some(v) => {
                let h = plot_h * (v / y_max).clamp(0.0, 1.0);
                let _ = writeln!(
                    s,
                    r##"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="#4878a8"/>"##,
                    H - BOTTOM - h,
                    slot * 0.7
                );
                let _ = writeln!(
                    s,
                    r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" font-size="10">{v:.3}</text>"#,
                    H - BOTTOM - h - 4.0
                );
            }
            None => {
                let _ = writeln!(
                    s,
                    r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" font-size="10">n/a</text>"#,
                    H - BOTTOM - 4.0
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 16.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Square heatmap on a blue-white-red scale symmetric around zero.
pub fn heatmap(title: &str, labels: &[String], matrix: &[Vec<Option<f64>>]) -> String {
    let n = labels.len().max(1);
    let cell = 52.0;
    let (x0, y0) = (70.0, 50.0);
    let width = x0 + cell * n as f64 + 20.0;
    let height = y0 + cell * n as f64 + 30.0;
    let mut s = header(title, width, height);
    let scale = matrix
        .iter()
        .flatten()
        .flatten()
        .map(|v| v.abs())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    for (i, row) in matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let (x, y) = (x0 + cell * j as f64, y0 + cell * i as f64);
            let (fill, text) = match v {
                Some(v) => {
                    let t = (v / scale).clamp(-1.0, 1.0);
                    let fade = (255.0 * (1.0 - t.abs())).round() as u8;
                    let fill = if t >= 0.0 {
                        format!("rgb(255,{fade},{fade})")
                    } else {
                        format!("rgb({fade},{fade},255)")
                    };
                    (fill, format!("{v:.2}"))
                }
                None => ("rgb(230,230,230)".to_string(), "n/a".to_string()),
            };
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{cell}" height="{cell}" fill="{fill}" stroke="white"/>"#
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{text}</text>"#,
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
    }
    for (k, label) in labels.iter().enumerate() {
        let c = cell * k as f64 + cell / 2.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + c,
            y0 - 8.0,
            escape(label)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 8.0,
            y0 + c + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Polyline over `[0, 1] x [0, 1]`.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let mut s = header(title, W, H);
    axes(&mut s, x_label, y_label, 1.0);
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let mut path = String::new();
    for (x, y) in points {
        let _ = write!(path, "{:.1},{:.1} ", LEFT + pw * x.clamp(0.0, 1.0), H - BOTTOM - ph * y.clamp(0.0, 1.0));
    }
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#c0392b" stroke-width="2"/>"##,
        path.trim_end()
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.2}</text>"#,
            LEFT + pw * v,
            H - BOTTOM + 16.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Two overlaid density histograms sharing bin edges.
pub fn histogram_pair(title: &str, lo: f64, bin_width: f64, a: (&str, &[f64]), b: (&str, &[f64])) -> String {
    let mut s = header(title, W, H);
    let y_max = nice_max(a.1.iter().chain(b.1).copied());
    axes(&mut s, "score", "density", y_max);
    let bins = a.1.len().max(b.1.len()).max(1);
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let slot = pw / bins as f64;
    for ((name, dens), color) in [(a, "#4878a8"), (b, "#e07b39")] {
        for (i, d) in dens.iter().enumerate() {
            let h = ph * (d / y_max).clamp(0.0, 1.0);
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{slot:.1}" height="{h:.1}" fill="{color}" fill-opacity="0.5"/>"#,
                LEFT + slot * i as f64,
                H - BOTTOM - h
            );
        }
        let ly = if color == "#4878a8" { TOP + 10.0 } else { TOP + 26.0 };
        let _ = writeln!(s, r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/>"#, W - 200.0, ly - 9.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, W - 185.0, escape(name));
    }
    for i in [0, bins / 2, bins] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#,
            LEFT + slot * i as f64,
            H - BOTTOM + 16.0,
            lo + bin_width * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed_and_escaped() {
        let bar = bar_chart("a < b", "p", &["x".into(), "y".into()], &[Some(0.4), None]);
        assert!(bar.starts_with("<svg") && bar.ends_with("</svg>\n"));
        assert!(bar.contains("a &lt; b") && bar.contains("n/a"));
        let hm = heatmap("m", &["A".into(), "B".into()], &[vec![None, Some(-0.5)], vec![Some(0.5), None]]);
        assert!(hm.contains("rgb(0,0,255)") && hm.contains("rgb(255,0,0)"));
        let lc = line_chart("pr", "recall", "precision", &[(0.0, 1.0), (1.0, 0.5)]);
        assert!(lc.contains("<polyline"));
        let hp = histogram_pair("h", 0.0, 0.5, ("a", &[1.0, 1.0]), ("b", &[0.0, 2.0]));
        assert_eq!(hp.matches("fill-opacity").count(), 4);
    }
}
