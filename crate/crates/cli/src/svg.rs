//! Minimal grouped bar charts as standalone SVG.

use std::fmt::Write;

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f",
];

pub struct Series {
    pub label: String,
    /// One value per group; `None` leaves a gap.
    pub values: Vec<Option<f64>>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Bars grouped by `groups` (x axis), one colour per series, y axis in [0, 1].
pub fn grouped_bars(title: &str, groups: &[String], series: &[Series]) -> String {
    let (left, right, top, bottom) = (50.0, 20.0, 40.0, 70.0);
    let bar_w = 14.0;
    let gap = 18.0;
    let group_w = bar_w * series.len().max(1) as f64 + gap;
    let plot_w = group_w * groups.len().max(1) as f64;
    let plot_h = 220.0;
    let width = left + plot_w + right;
    let legend_h = 16.0 * series.len() as f64;
    let height = top + plot_h + bottom + legend_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" font-size="14" text-anchor="middle">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    let y_of = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            left + plot_w,
            left - 6.0,
            y + 4.0
        );
    }
    for (gi, g) in groups.iter().enumerate() {
        let x0 = left + gi as f64 * group_w + gap / 2.0;
        for (si, ser) in series.iter().enumerate() {
            let Some(v) = ser.values.get(gi).copied().flatten() else {
                continue;
            };
            let x = x0 + si as f64 * bar_w;
            let y = y_of(v);
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{} {}: {v:.3}</title></rect>"#,
                bar_w - 2.0,
                top + plot_h - y,
                PALETTE[si % PALETTE.len()],
                escape(&ser.label),
                escape(g)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + bar_w * series.len() as f64 / 2.0,
            top + plot_h + 16.0,
            escape(g)
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        top + plot_h,
        left + plot_w,
        top + plot_h
    );
    for (si, ser) in series.iter().enumerate() {
        let y = top + plot_h + 40.0 + 16.0 * si as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{y:.1}">{}</text>"#,
            y - 9.0,
            PALETTE[si % PALETTE.len()],
            left + 16.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}
