//! Self-contained SVG rendering of training curves and quality/variance
//! tables.
//!
//! Metrics streams render as one series per input file with a thick smoothed
//! (EMA) line over a thin raw line, labeled axes and a legend. Quality /
//! variance tables render the effective-signal curve against checkpoint
//! distance with a marker at its argmax.

use std::fmt::Write as _;

use crate::error::Result;
use crate::metrics::MetricsRecord;
use crate::sources::QvRow;

const WIDTH: f64 = 840.0;
const HEIGHT: f64 = 520.0;
const MARGIN_L: f64 = 72.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 56.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// One plotted series: raw points plus an optional pre-smoothed companion.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub raw: Vec<(f64, f64)>,
    pub smooth: Vec<(f64, f64)>,
}

impl Series {
    /// Build from a metrics stream: raw values of the chosen field plus the
    /// EMA-smoothed companion (alpha 0.1, or the logged EMA for the reward).
    pub fn from_metrics(label: &str, records: &[MetricsRecord], field: &str) -> Series {
        let mut raw = Vec::new();
        let mut smooth = Vec::new();
        let mut ema: Option<f64> = None;
        for r in records {
            let Some(s) = r.as_step() else { continue };
            let value = match field {
                "reward_mean" => s.reward_mean,
                "entropy_mean" => s.entropy_mean,
                "gradient_norm" => s.gradient_norm,
                "groups_replaced" => f64::from(s.groups_replaced),
                "pool_size" => s.pool_size as f64,
                _ => s.reward_mean,
            };
            let x = s.step as f64;
            raw.push((x, value));
            let smoothed = if field == "reward_mean" {
                s.reward_ema
            } else {
                let e = match ema {
                    None => value,
                    Some(e) => 0.9 * e + 0.1 * value,
                };
                ema = Some(e);
                e
            };
            smooth.push((x, smoothed));
        }
        Series {
            label: label.to_string(),
            raw,
            smooth,
        }
    }
}

fn axis_bounds(all: &[&[(f64, f64)]]) -> ((f64, f64), (f64, f64)) {
    let mut xs = (f64::INFINITY, f64::NEG_INFINITY);
    let mut ys = (f64::INFINITY, f64::NEG_INFINITY);
    for series in all {
        for &(x, y) in *series {
            if x.is_finite() {
                xs.0 = xs.0.min(x);
                xs.1 = xs.1.max(x);
            }
            if y.is_finite() {
                ys.0 = ys.0.min(y);
                ys.1 = ys.1.max(y);
            }
        }
    }
    if !xs.0.is_finite() {
        xs = (0.0, 1.0);
    }
    if !ys.0.is_finite() {
        ys = (0.0, 1.0);
    }
    if xs.0 == xs.1 {
        xs.1 = xs.0 + 1.0;
    }
    if ys.0 == ys.1 {
        ys.1 = ys.0 + 1.0;
    }
    // A little headroom on the value axis.
    let pad = (ys.1 - ys.0) * 0.05;
    (xs, (ys.0 - pad, ys.1 + pad))
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_B - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn polyline(out: &mut String, frame: &Frame, pts: &[(f64, f64)], color: &str, width: f64, opacity: f64) {
    if pts.is_empty() {
        return;
    }
    let mut d = String::new();
    for (i, &(x, y)) in pts.iter().enumerate() {
        let _ = write!(
            d,
            "{}{:.2},{:.2}",
            if i == 0 { "" } else { " " },
            frame.px(x),
            frame.py(y)
        );
    }
    let _ = writeln!(
        out,
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\" stroke-opacity=\"{opacity}\" points=\"{d}\"/>"
    );
}

fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = hi - lo;
    let raw_step = span / target as f64;
    let mag = 10f64.powf(raw_step.abs().log10().floor());
    let norm = raw_step / mag;
    let step = if norm < 1.5 {
        1.0
    } else if norm < 3.0 {
        2.0
    } else if norm < 7.0 {
        5.0
    } else {
        10.0
    } * mag;
    let mut t = (lo / step).ceil() * step;
    let mut ticks = Vec::new();
    while t <= hi + step * 1e-9 {
        ticks.push(t);
        t += step;
    }
    ticks
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 1000.0 || a < 0.001 {
        format!("{v:.1e}")
    } else if a >= 10.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

fn render_frame(out: &mut String, frame: &Frame, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#444\" stroke-width=\"1\"/>",
        WIDTH - MARGIN_L - MARGIN_R,
        HEIGHT - MARGIN_T - MARGIN_B
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>",
        WIDTH / 2.0,
        xml_escape(title)
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 14.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"18\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\" transform=\"rotate(-90 18 {:.1})\">{}</text>",
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        xml_escape(y_label)
    );
    for t in nice_ticks(frame.x0, frame.x1, 8) {
        let px = frame.px(t);
        let _ = writeln!(
            out,
            "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"#ccc\" stroke-width=\"0.5\"/>",
            MARGIN_T,
            HEIGHT - MARGIN_B
        );
        let _ = writeln!(
            out,
            "<text x=\"{px:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>",
            HEIGHT - MARGIN_B + 16.0,
            fmt_tick(t)
        );
    }
    for t in nice_ticks(frame.y0, frame.y1, 6) {
        let py = frame.py(t);
        let _ = writeln!(
            out,
            "<line x1=\"{MARGIN_L}\" y1=\"{py:.1}\" x2=\"{:.1}\" y2=\"{py:.1}\" stroke=\"#ccc\" stroke-width=\"0.5\"/>",
            WIDTH - MARGIN_R
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{py:.1}\" font-size=\"10\" text-anchor=\"end\" font-family=\"sans-serif\" dy=\"3\">{}</text>",
            MARGIN_L - 6.0,
            fmt_tick(t)
        );
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn legend(out: &mut String, labels: &[(String, &str)]) {
    let x = WIDTH - MARGIN_R - 200.0;
    let mut y = MARGIN_T + 14.0;
    for (label, color) in labels {
        let _ = writeln!(
            out,
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{color}\" stroke-width=\"2.4\"/>",
            y - 4.0,
            x + 26.0,
            y - 4.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{y:.1}\" font-size=\"11\" font-family=\"sans-serif\">{}</text>",
            x + 32.0,
            xml_escape(label)
        );
        y += 16.0;
    }
}

/// Render metric series (thick smoothed lines over thin raw lines) into a
/// complete SVG document.
pub fn render_series(title: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let all: Vec<&[(f64, f64)]> = series
        .iter()
        .flat_map(|s| [s.raw.as_slice(), s.smooth.as_slice()])
        .collect();
    let ((x0, x1), (y0, y1)) = axis_bounds(&all);
    let frame = Frame { x0, x1, y0, y1 };
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(out, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    render_frame(&mut out, &frame, title, "step", y_label);
    let mut labels = Vec::new();
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        polyline(&mut out, &frame, &s.raw, color, 0.8, 0.35);
        polyline(&mut out, &frame, &s.smooth, color, 2.4, 1.0);
        labels.push((s.label.clone(), color));
    }
    legend(&mut out, &labels);
    let _ = writeln!(out, "</svg>");
    Ok(out)
}

/// Render a quality/variance table: the effective-signal curve with its
/// argmax marked, plus the quality curve for context.
pub fn render_qv(title: &str, rows: &[QvRow]) -> Result<String> {
    let s_curve: Vec<(f64, f64)> = rows.iter().map(|r| (r.delta as f64, r.s)).collect();
    let q_curve: Vec<(f64, f64)> = rows.iter().map(|r| (r.delta as f64, r.q)).collect();
    let ((x0, x1), (y0, y1)) = axis_bounds(&[&s_curve, &q_curve]);
    let frame = Frame { x0, x1, y0, y1 };
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(out, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    render_frame(&mut out, &frame, title, "checkpoint distance (steps)", "effective signal");
    polyline(&mut out, &frame, &q_curve, PALETTE[2], 1.2, 0.6);
    polyline(&mut out, &frame, &s_curve, PALETTE[0], 2.4, 1.0);
    if let Some(best) = rows
        .iter()
        .max_by(|a, b| a.s.partial_cmp(&b.s).unwrap_or(std::cmp::Ordering::Equal))
    {
        let _ = writeln!(
            out,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"5\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>",
            frame.px(best.delta as f64),
            frame.py(best.s),
            PALETTE[1]
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" font-family=\"sans-serif\">argmax at {}</text>",
            frame.px(best.delta as f64) + 8.0,
            frame.py(best.s) - 8.0,
            best.delta
        );
    }
    legend(
        &mut out,
        &[
            ("effective signal".to_string(), PALETTE[0]),
            ("quality".to_string(), PALETTE[2]),
        ],
    );
    let _ = writeln!(out, "</svg>");
    Ok(out)
}
