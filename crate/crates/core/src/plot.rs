//! Self-contained SVG plots of test accuracy against sparsity.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::analysis::{SddVerdict, SparsityCurve};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum XAxis {
    /// Percent of weights remaining, log scale, dense on the left.
    #[default]
    LogRemaining,
    /// Sparsity in percent, linear.
    LinearSparsity,
}

#[derive(Clone, Debug)]
pub struct PlotOptions {
    pub x_axis: XAxis,
    pub width: f64,
    pub height: f64,
    pub title: Option<String>,
}

impl Default for PlotOptions {
    fn default() -> Self {
        Self {
            x_axis: XAxis::LogRemaining,
            width: 720.0,
            height: 440.0,
            title: None,
        }
    }
}

pub struct Series<'a> {
    pub label: &'a str,
    pub curve: &'a SparsityCurve,
    /// Phase ranges of this verdict are shaded behind the curves.
    pub verdict: Option<&'a SddVerdict>,
}

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const PHASE_FILLS: [&str; 4] = ["#e8f0fe", "#fde8e8", "#e6f4ea", "#f1f3f4"];
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 52.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    x_axis: XAxis,
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
    w: f64,
    h: f64,
}

impl Frame {
    fn x_value(&self, sparsity: f64) -> f64 {
        match self.x_axis {
            // floor at 1e-4 percent so a fully pruned point stays finite
            XAxis::LogRemaining => (100.0 * (1.0 - sparsity)).max(1e-4).log10(),
            XAxis::LinearSparsity => 100.0 * sparsity,
        }
    }

    fn px(&self, sparsity: f64) -> f64 {
        let t = (self.x_value(sparsity) - self.x_lo) / (self.x_hi - self.x_lo);
        let t = match self.x_axis {
            XAxis::LogRemaining => 1.0 - t,
            XAxis::LinearSparsity => t,
        };
        MARGIN_L + t * (self.w - MARGIN_L - MARGIN_R)
    }

    fn py(&self, acc: f64) -> f64 {
        let t = (acc - self.y_lo) / (self.y_hi - self.y_lo);
        self.h - MARGIN_B - t * (self.h - MARGIN_T - MARGIN_B)
    }
}

pub fn render_svg(series: &[Series<'_>], opts: &PlotOptions) -> Result<String> {
    if series.is_empty() {
        return Err(Error::input("nothing to plot"));
    }
    let all = || series.iter().flat_map(|s| s.curve.points());
    let mut frame = Frame {
        x_axis: opts.x_axis,
        x_lo: f64::INFINITY,
        x_hi: f64::NEG_INFINITY,
        y_lo: f64::INFINITY,
        y_hi: f64::NEG_INFINITY,
        w: opts.width,
        h: opts.height,
    };
    for p in all() {
        let x = frame.x_value(p.sparsity);
        frame.x_lo = frame.x_lo.min(x);
        frame.x_hi = frame.x_hi.max(x);
        frame.y_lo = frame.y_lo.min(100.0 * p.test_acc);
        frame.y_hi = frame.y_hi.max(100.0 * p.test_acc);
    }
    if opts.x_axis == XAxis::LogRemaining {
        frame.x_lo = frame.x_lo.floor();
        frame.x_hi = frame.x_hi.ceil().max(frame.x_lo + 1.0);
    } else if frame.x_hi - frame.x_lo < 1e-9 {
        frame.x_hi = frame.x_lo + 1.0;
    }
    frame.y_lo = ((frame.y_lo - 1.0) / 5.0).floor() * 5.0;
    frame.y_hi = ((frame.y_hi + 1.0) / 5.0).ceil() * 5.0;
    // work in percent from here on
    let py = |acc: f64| frame.py(100.0 * acc);
    let plot_r = frame.w - MARGIN_R;
    let plot_b = frame.h - MARGIN_B;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
        w = frame.w,
        h = frame.h
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if let Some(t) = &opts.title {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            (MARGIN_L + plot_r) / 2.0,
            escape(t)
        );
    }

    for s in series {
        let Some(v) = s.verdict else { continue };
        let pts = s.curve.points();
        for (i, &(a, b)) in v.phases.iter().enumerate() {
            let lo = if a == 0 { frame.px(pts[0].sparsity) } else { (frame.px(pts[a - 1].sparsity) + frame.px(pts[a].sparsity)) / 2.0 };
            let hi = if b + 1 >= pts.len() { frame.px(pts[b].sparsity) } else { (frame.px(pts[b].sparsity) + frame.px(pts[b + 1].sparsity)) / 2.0 };
            let _ = writeln!(
                svg,
                r#"<rect class="phase" x="{:.2}" y="{MARGIN_T}" width="{:.2}" height="{:.2}" fill="{}" opacity="0.7"/>"#,
                lo.min(hi),
                (hi - lo).abs(),
                plot_b - MARGIN_T,
                PHASE_FILLS[i % PHASE_FILLS.len()]
            );
        }
    }

    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{:.2}" height="{:.2}" fill="none" stroke="#333"/>"##,
        plot_r - MARGIN_L,
        plot_b - MARGIN_T
    );
    let mut y = frame.y_lo;
    while y <= frame.y_hi + 1e-9 {
        let yy = frame.py(y);
        let _ = writeln!(
            svg,
            r##"<line x1="{MARGIN_L}" y1="{yy:.2}" x2="{plot_r:.2}" y2="{yy:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{y:.0}</text>"##,
            MARGIN_L - 6.0,
            yy + 4.0
        );
        y += 5.0;
    }
    let x_ticks: Vec<(f64, String)> = match opts.x_axis {
        XAxis::LogRemaining => {
            let mut t = Vec::new();
            let mut e = frame.x_lo;
            while e <= frame.x_hi + 1e-9 {
                let pct = 10f64.powf(e);
                t.push((1.0 - pct / 100.0, format!("{}", pct)));
                e += 1.0;
            }
            t
        }
        XAxis::LinearSparsity => (0..=5)
            .map(|i| {
                let v = frame.x_lo + (frame.x_hi - frame.x_lo) * i as f64 / 5.0;
                (v / 100.0, format!("{v:.0}"))
            })
            .collect(),
    };
    for (s, label) in &x_ticks {
        let xx = frame.px(*s);
        let _ = writeln!(
            svg,
            r##"<line x1="{xx:.2}" y1="{plot_b:.2}" x2="{xx:.2}" y2="{:.2}" stroke="#333"/><text x="{xx:.2}" y="{:.2}" text-anchor="middle">{label}</text>"##,
            plot_b + 5.0,
            plot_b + 18.0
        );
    }
    let x_label = match opts.x_axis {
        XAxis::LogRemaining => "Remaining weights [%] (log scale)",
        XAxis::LinearSparsity => "Sparsity [%]",
    };
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{x_label}</text>"#,
        (MARGIN_L + plot_r) / 2.0,
        frame.h - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">Test accuracy [%]</text>"#,
        (MARGIN_T + plot_b) / 2.0
    );

    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .curve
            .points()
            .iter()
            .map(|p| format!("{:.2},{:.2}", frame.px(p.sparsity), py(p.test_acc)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = MARGIN_T + 12.0 + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<g class="legend"><line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text></g>"#,
            plot_r + 10.0,
            plot_r + 30.0,
            plot_r + 36.0,
            ly + 4.0,
            escape(s.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn emit_plot(series: &[Series<'_>], opts: &PlotOptions, path: &Path) -> Result<()> {
    let svg = render_svg(series, opts)?;
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}
