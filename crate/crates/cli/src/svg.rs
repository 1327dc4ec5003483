//! Minimal SVG writers: scatter, line chart and heatmap. Coordinates are
//! printed with fixed precision so output is byte-stable.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn legend(s: &mut String, names: &[String]) {
    for (i, n) in names.iter().enumerate() {
        let y = 40.0 + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            W - 120.0,
            y,
            PALETTE[i % PALETTE.len()],
            W - 105.0,
            y + 9.0,
            escape(n)
        );
    }
}

fn frame(s: &mut String, x_label: &str, y_label: &str, xr: (f64, f64), yr: (f64, f64)) {
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        W - 2.0 * MARGIN - 80.0,
        H - 2.0 * MARGIN
    );
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (W - 80.0) / 2.0, H - 15.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.1}" text-anchor="middle" transform="rotate(-90 15 {:.1})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="{:.1}">{:.3}</text>"#, H - MARGIN + 14.0, xr.0);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#, W - MARGIN - 80.0, H - MARGIN + 14.0, xr.1);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#, MARGIN - 4.0, H - MARGIN, yr.0);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#, MARGIN - 4.0, MARGIN + 8.0, yr.1);
}

fn project(v: f64, r: (f64, f64), lo: f64, hi: f64) -> f64 {
    lo + (v - r.0) / (r.1 - r.0) * (hi - lo)
}

/// Points `(x, y, group)` colored by group index into `groups`.
pub fn scatter(title: &str, points: &[(f64, f64, usize)], groups: &[String]) -> String {
    let mut s = header(title);
    let xr = range(points.iter().map(|p| p.0));
    let yr = range(points.iter().map(|p| p.1));
    frame(&mut s, "t-SNE 1", "t-SNE 2", xr, yr);
    let plot_right = W - MARGIN - 80.0;
    for &(x, y, g) in points {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="0.7"/>"#,
            project(x, xr, MARGIN, plot_right),
            project(y, yr, H - MARGIN, MARGIN),
            PALETTE[g % PALETTE.len()]
        );
    }
    legend(&mut s, groups);
    s.push_str("</svg>\n");
    s
}

/// One polyline per named series over x = 1..=len.
pub fn lines(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<f64>)]) -> String {
    let mut s = header(title);
    let len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let xr = (1.0, len as f64);
    let yr = range(series.iter().flat_map(|(_, v)| v.iter().copied()));
    frame(&mut s, x_label, y_label, xr, yr);
    let plot_right = W - MARGIN - 80.0;
    for (i, (_, v)) in series.iter().enumerate() {
        let pts: Vec<String> = v
            .iter()
            .enumerate()
            .map(|(k, &y)| format!("{:.2},{:.2}", project((k + 1) as f64, xr, MARGIN, plot_right), project(y, yr, H - MARGIN, MARGIN)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            pts.join(" "),
            PALETTE[i % PALETTE.len()]
        );
    }
    let names: Vec<String> = series.iter().map(|(n, _)| n.clone()).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

/// Row-major `rows × cols` matrix as grey-scale cells (darker = larger).
pub fn heatmap(title: &str, x_label: &str, y_label: &str, rows: usize, cols: usize, values: &[f64]) -> String {
    let mut s = header(title);
    let vr = range(values.iter().copied());
    frame(&mut s, x_label, y_label, (0.0, cols as f64), (0.0, rows as f64));
    let cw = (W - 2.0 * MARGIN - 80.0) / cols.max(1) as f64;
    let ch = (H - 2.0 * MARGIN) / rows.max(1) as f64;
    for r in 0..rows {
        for c in 0..cols {
            let v = (values[r * cols + c] - vr.0) / (vr.1 - vr.0);
            let g = (255.0 * (1.0 - v)).round().clamp(0.0, 255.0) as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({g},{g},{g})"/>"#,
                MARGIN + c as f64 * cw,
                MARGIN + r as f64 * ch,
                cw,
                ch
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outputs_are_well_formed_and_stable() {
        let sc = scatter("a<b", &[(0.0, 1.0, 0), (2.0, -1.0, 1)], &["x".into(), "y".into()]);
        assert!(sc.starts_with("<svg") && sc.ends_with("</svg>\n"));
        assert!(sc.contains("a&lt;b"));
        assert_eq!(sc.matches("<circle").count(), 2);
        assert_eq!(sc, scatter("a<b", &[(0.0, 1.0, 0), (2.0, -1.0, 1)], &["x".into(), "y".into()]));
        let l = lines("t", "bin", "diff", &[("vowel".into(), vec![0.1, 0.2, 0.3])]);
        assert_eq!(l.matches("<polyline").count(), 1);
        let h = heatmap("t", "key", "query", 2, 3, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(h.matches("rgb(").count(), 6);
        // Constant data must not divide by zero.
        assert!(!heatmap("t", "k", "q", 1, 2, &[1.0, 1.0]).contains("NaN"));
    }
}
