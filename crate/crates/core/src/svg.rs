//! Standalone SVG plotting with no external renderer: time-series line plots
//! with criteria reference lines, and per-contingency violation bar charts.
//! Output is deterministic text, diffable in tests.

use std::fmt::Write as _;

use crate::criteria::{Category, ViolationProfile};

const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f",
];

#[derive(Debug, Clone)]
pub struct SeriesStyle {
    pub title: String,
    pub y_label: String,
    pub width: f64,
    pub height: f64,
    /// Horizontal reference lines: (value, label).
    pub ref_lines: Vec<(f64, String)>,
}

impl Default for SeriesStyle {
    fn default() -> Self {
        Self {
            title: String::new(),
            y_label: String::new(),
            width: 900.0,
            height: 420.0,
            ref_lines: Vec::new(),
        }
    }
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a >= 1000.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.4}")
    }
}

/// Affine axis map used by the plots; exposed so tests can invert it.
#[derive(Debug, Clone, Copy)]
pub struct AxisMap {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub plot_w: f64,
    pub plot_h: f64,
}

impl AxisMap {
    pub fn x_px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x_min) / (self.x_max - self.x_min) * self.plot_w
    }
    pub fn y_px(&self, y: f64) -> f64 {
        MARGIN_T + (self.y_max - y) / (self.y_max - self.y_min) * self.plot_h
    }
    pub fn y_from_px(&self, py: f64) -> f64 {
        self.y_max - (py - MARGIN_T) / self.plot_h * (self.y_max - self.y_min)
    }
}

pub fn axis_map(style: &SeriesStyle, x_range: (f64, f64), y_range: (f64, f64)) -> AxisMap {
    let pad = |lo: f64, hi: f64| {
        let span = (hi - lo).abs().max(1e-9);
        (lo - 0.05 * span, hi + 0.05 * span)
    };
    let (y_min, y_max) = pad(y_range.0, y_range.1);
    AxisMap {
        x_min: x_range.0,
        x_max: (x_range.1 - x_range.0).abs().max(1e-12) + x_range.0,
        y_min,
        y_max,
        plot_w: style.width - MARGIN_L - MARGIN_R,
        plot_h: style.height - MARGIN_T - MARGIN_B,
    }
}

/// Render one or more named series against a shared time axis. Reference
/// lines are drawn as dashed horizontals with their labels.
pub fn emit_svg_timeseries(series: &[(String, &[f64], &[f64])], style: &SeriesStyle) -> String {
    assert!(!series.is_empty(), "nothing to plot");
    let x_min = series
        .iter()
        .flat_map(|(_, x, _)| x.first().copied())
        .fold(f64::INFINITY, f64::min);
    let x_max = series
        .iter()
        .flat_map(|(_, x, _)| x.last().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for (_, _, ys) in series {
        for &y in *ys {
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    for (v, _) in &style.ref_lines {
        y_min = y_min.min(*v);
        y_max = y_max.max(*v);
    }
    let map = axis_map(style, (x_min, x_max), (y_min, y_max));

    let mut svg = String::new();
    let _ = write!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"##,
        style.width, style.height, style.width, style.height
    );
    svg.push('\n');
    let _ = writeln!(
        svg,
        r##"<rect width="{}" height="{}" fill="white"/>"##,
        style.width, style.height
    );
    let _ = writeln!(
        svg,
        r##"<text x="{}" y="22" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"##,
        MARGIN_L + map.plot_w / 2.0,
        style.title
    );

    // Frame and ticks.
    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{}" height="{}" fill="none" stroke="black" stroke-width="1"/>"##,
        map.plot_w, map.plot_h
    );
    for k in 0..=5 {
        let xv = map.x_min + (map.x_max - map.x_min) * k as f64 / 5.0;
        let px = map.x_px(xv);
        let _ = writeln!(
            svg,
            r##"<line x1="{px:.4}" y1="{}" x2="{px:.4}" y2="{}" stroke="#cccccc" stroke-width="0.5"/>"##,
            MARGIN_T,
            MARGIN_T + map.plot_h
        );
        let _ = writeln!(
            svg,
            r##"<text x="{px:.4}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"##,
            MARGIN_T + map.plot_h + 18.0,
            fmt_num(xv)
        );
        let yv = map.y_min + (map.y_max - map.y_min) * k as f64 / 5.0;
        let py = map.y_px(yv);
        let _ = writeln!(
            svg,
            r##"<line x1="{MARGIN_L}" y1="{py:.4}" x2="{}" y2="{py:.4}" stroke="#cccccc" stroke-width="0.5"/>"##,
            MARGIN_L + map.plot_w
        );
        let _ = writeln!(
            svg,
            r##"<text x="{}" y="{py:.4}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"##,
            MARGIN_L - 6.0,
            fmt_num(yv)
        );
    }
    let _ = writeln!(
        svg,
        r##"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">time (s)</text>"##,
        MARGIN_L + map.plot_w / 2.0,
        MARGIN_T + map.plot_h + 38.0
    );
    let _ = writeln!(
        svg,
        r##"<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"##,
        MARGIN_T + map.plot_h / 2.0,
        MARGIN_T + map.plot_h / 2.0,
        style.y_label
    );

    // Reference lines.
    for (v, label) in &style.ref_lines {
        let py = map.y_px(*v);
        let _ = writeln!(
            svg,
            r##"<line x1="{MARGIN_L}" y1="{py:.4}" x2="{}" y2="{py:.4}" stroke="#777777" stroke-width="1" stroke-dasharray="6 4"/>"##,
            MARGIN_L + map.plot_w
        );
        let _ = writeln!(
            svg,
            r##"<text x="{}" y="{:.4}" font-family="sans-serif" font-size="10" fill="#555555">{}</text>"##,
            MARGIN_L + map.plot_w + 4.0,
            py + 3.0,
            label
        );
    }

    // Series polylines and legend.
    for (s, (name, xs, ys)) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let mut pts = String::new();
        for (x, y) in xs.iter().zip(*ys) {
            let _ = write!(pts, "{:.4},{:.4} ", map.x_px(*x), map.y_px(*y));
        }
        let _ = writeln!(
            svg,
            r##"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"##,
            pts.trim_end()
        );
        let ly = MARGIN_T + 14.0 * s as f64;
        let lx = MARGIN_L + map.plot_w + 60.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{lx}" y1="{ly:.4}" x2="{}" y2="{ly:.4}" stroke="{color}" stroke-width="2"/>"##,
            lx + 18.0
        );
        let _ = writeln!(
            svg,
            r##"<text x="{}" y="{:.4}" font-family="sans-serif" font-size="11">{}</text>"##,
            lx + 22.0,
            ly + 3.5,
            name
        );
    }

    svg.push_str("</svg>\n");
    svg
}

/// Two-panel scan chart: stacked violation counts per contingency on top,
/// peak interface overflow per contingency below.
pub fn emit_svg_scan_chart(profile: &ViolationProfile) -> String {
    let width = 960.0_f64;
    let height = 640.0_f64;
    let cids = &profile.contingencies;
    let ncol = cids.len().max(1);
    let cats = Category::all();

    let max_count = cids
        .iter()
        .map(|c| cats.iter().map(|&k| profile.count(c, k)).sum::<u32>())
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let max_overflow = cids
        .iter()
        .map(|c| {
            profile
                .overflow
                .get(c)
                .map(|m| m.values().cloned().fold(0.0, f64::max))
                .unwrap_or(0.0)
        })
        .fold(0.0, f64::max)
        .max(1.0);

    let panel_h = 230.0;
    let top_y = 50.0;
    let bot_y = top_y + panel_h + 90.0;
    let plot_w = width - MARGIN_L - MARGIN_R;
    let slot = plot_w / ncol as f64;
    let bar_w = (slot * 0.6).min(60.0);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"##
    );
    let _ = writeln!(svg, r##"<rect width="{width}" height="{height}" fill="white"/>"##);
    let _ = writeln!(
        svg,
        r##"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">Dynamic contingency analysis ({})</text>"##,
        width / 2.0,
        profile.flags.label()
    );

    for (title, y0, ymax_label) in [
        ("violations per contingency", top_y, format!("{max_count:.0}")),
        ("peak interface overflow (MVA)", bot_y, format!("{max_overflow:.1}")),
    ] {
        let _ = writeln!(
            svg,
            r##"<text x="{MARGIN_L}" y="{}" font-family="sans-serif" font-size="12">{title}</text>"##,
            y0 - 8.0
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{MARGIN_L}" y="{y0}" width="{plot_w}" height="{panel_h}" fill="none" stroke="black" stroke-width="1"/>"##
        );
        let _ = writeln!(
            svg,
            r##"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"##,
            MARGIN_L - 4.0,
            y0 + 10.0,
            ymax_label
        );
        let _ = writeln!(
            svg,
            r##"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">0</text>"##,
            MARGIN_L - 4.0,
            y0 + panel_h
        );
    }

    for (k, cid) in cids.iter().enumerate() {
        let x0 = MARGIN_L + slot * k as f64 + (slot - bar_w) / 2.0;
        // Stacked counts.
        let mut y_cursor = top_y + panel_h;
        for (ci, cat) in cats.iter().enumerate() {
            let c = profile.count(cid, *cat) as f64;
            if c == 0.0 {
                continue;
            }
            let h = c / max_count * panel_h;
            y_cursor -= h;
            let _ = writeln!(
                svg,
                r##"<rect x="{x0:.4}" y="{y_cursor:.4}" width="{bar_w:.4}" height="{h:.4}" fill="{}"/>"##,
                PALETTE[ci % PALETTE.len()]
            );
        }
        // Overflow bar.
        let of = profile
            .overflow
            .get(cid)
            .map(|m| m.values().cloned().fold(0.0, f64::max))
            .unwrap_or(0.0);
        if of > 0.0 {
            let h = of / max_overflow * panel_h;
            let _ = writeln!(
                svg,
                r##"<rect x="{x0:.4}" y="{:.4}" width="{bar_w:.4}" height="{h:.4}" fill="{}"/>"##,
                bot_y + panel_h - h,
                PALETTE[1]
            );
        }
        let _ = writeln!(
            svg,
            r##"<text x="{:.4}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"##,
            x0 + bar_w / 2.0,
            bot_y + panel_h + 16.0,
            cid
        );
    }

    // Category legend.
    for (ci, cat) in cats.iter().enumerate() {
        let ly = top_y + 16.0 * ci as f64;
        let lx = MARGIN_L + plot_w + 10.0;
        let _ = writeln!(
            svg,
            r##"<rect x="{lx}" y="{:.4}" width="12" height="12" fill="{}"/>"##,
            ly,
            PALETTE[ci % PALETTE.len()]
        );
        let _ = writeln!(
            svg,
            r##"<text x="{}" y="{:.4}" font-family="sans-serif" font-size="11">{}</text>"##,
            lx + 16.0,
            ly + 10.0,
            cat.as_str()
        );
    }
    if !profile.divergences.is_empty() {
        let _ = writeln!(
            svg,
            r##"<text x="{MARGIN_L}" y="{}" font-family="sans-serif" font-size="11" fill="#d62728">diverged: {}</text>"##,
            height - 12.0,
            profile
                .divergences
                .iter()
                .map(|d| d.contingency.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_series_is_horizontal() {
        let t: Vec<f64> = (0..50).map(|k| k as f64 * 0.1).collect();
        let y = vec![1.0; 50];
        let style = SeriesStyle {
            title: "flat".into(),
            y_label: "pu".into(),
            ..SeriesStyle::default()
        };
        let svg = emit_svg_timeseries(&[("b1".to_string(), &t, &y)], &style);
        assert_eq!(svg.matches("<polyline").count(), 1);
        // All polyline y coordinates identical.
        let line = svg
            .lines()
            .find(|l| l.contains("<polyline"))
            .unwrap()
            .to_string();
        let ys: Vec<&str> = line
            .split("points=\"")
            .nth(1)
            .unwrap()
            .trim_end_matches("\"/>")
            .split_whitespace()
            .map(|p| p.split(',').nth(1).unwrap())
            .collect();
        assert!(ys.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn two_channel_legend() {
        let t: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let a = vec![1.0; 10];
        let b: Vec<f64> = (0..10).map(|k| k as f64 * 0.1).collect();
        let svg = emit_svg_timeseries(
            &[("chan_a".to_string(), &t, &a), ("chan_b".to_string(), &t, &b)],
            &SeriesStyle::default(),
        );
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("chan_a"));
        assert!(svg.contains("chan_b"));
    }

    #[test]
    fn polyline_minimum_inverts_to_series_minimum() {
        let t: Vec<f64> = (0..200).map(|k| k as f64 * 0.05).collect();
        let y: Vec<f64> = t.iter().map(|&x| 1.0 - 0.4 * (-x).exp() * (3.0 * x).cos()).collect();
        let style = SeriesStyle {
            ref_lines: vec![(0.8, "80%".into())],
            ..SeriesStyle::default()
        };
        let svg = emit_svg_timeseries(&[("v".to_string(), &t, &y)], &style);
        let y_min_series = y.iter().cloned().fold(f64::INFINITY, f64::min);
        let y_span_min = y_min_series.min(0.8);
        let y_span_max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.8);
        let map = axis_map(&style, (0.0, t[199]), (y_span_min, y_span_max));
        let line = svg.lines().find(|l| l.contains("<polyline")).unwrap();
        let py_max = line
            .split("points=\"")
            .nth(1)
            .unwrap()
            .trim_end_matches("\"/>")
            .split_whitespace()
            .map(|p| p.split(',').nth(1).unwrap().parse::<f64>().unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        // Largest pixel y is the smallest value; invert and compare.
        let recovered = map.y_from_px(py_max);
        assert!(
            (recovered - y_min_series).abs() < 1e-3,
            "{recovered} vs {y_min_series}"
        );
    }
}
