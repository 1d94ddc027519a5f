//! Static SVG plots written by hand.

use std::fmt::Write;

use crate::pipeline::CoeffRow;
use crate::solver::Trajectory;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD_L: f64 = 64.0;
const PAD_R: f64 = 140.0;
const PAD_T: f64 = 36.0;
const PAD_B: f64 = 48.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

/// Species shown together in one overlay plot.
pub const GROUP_SIZE: usize = 6;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let (x0, x1) = if x1 > x0 {
            (x0, x1)
        } else {
            (x0 - 0.5, x0 + 0.5)
        };
        let (y0, y1) = if y1 > y0 {
            (y0, y1)
        } else {
            (y0 - 0.5, y0 + 0.5)
        };
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        PAD_L + (x - self.x0) / (self.x1 - self.x0) * (W - PAD_L - PAD_R)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD_B - (y - self.y0) / (self.y1 - self.y0) * (H - PAD_T - PAD_B)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn open(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (l, r, t, b) = (PAD_L, W - PAD_R, PAD_T, H - PAD_B);
    let _ = writeln!(
        out,
        r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        r - l,
        b - t
    );
    for i in 0..=4 {
        let fx = f.x0 + (f.x1 - f.x0) * i as f64 / 4.0;
        let fy = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let (px, py) = (f.px(fx), f.py(fy));
        let _ = writeln!(
            out,
            r#"<line x1="{px:.1}" y1="{b}" x2="{px:.1}" y2="{}" stroke="black"/>"#,
            b + 4.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{px:.1}" y="{}" text-anchor="middle">{}</text>"#,
            b + 16.0,
            tick(fx)
        );
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{py:.1}" x2="{l}" y2="{py:.1}" stroke="black"/>"#,
            l - 4.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            l - 6.0,
            py + 4.0,
            tick(fy)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (l + r) / 2.0,
        H - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (t + b) / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 1e-2 && v.abs() < 1e4) {
        format!("{:.3}", v)
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    } else {
        format!("{v:.1e}")
    }
}

/// Observed points and predicted lines for the species in `group`, each
/// min-max scaled by its observed range. `log_time` plots against log10 t.
pub fn trajectory_overlay_svg(
    obs: &Trajectory,
    pred: &Trajectory,
    names: &[String],
    group: &[usize],
    log_time: bool,
    title: &str,
) -> String {
    let x = |t: f64| {
        if log_time {
            t.max(f64::MIN_POSITIVE).log10()
        } else {
            t
        }
    };
    let xs: Vec<f64> = obs.times.iter().map(|&t| x(t)).collect();
    let f = Frame::new(xs[0], *xs.last().unwrap(), -0.05, 1.05);
    let mut out = String::new();
    open(&mut out, title);
    axes(
        &mut out,
        &f,
        if log_time { "log10 t" } else { "t" },
        "scaled concentration",
    );
    for (slot, &j) in group.iter().enumerate() {
        let color = PALETTE[slot % PALETTE.len()];
        let (lo, hi) = obs
            .states
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| {
                (a.min(s[j]), b.max(s[j]))
            });
        let range = if hi > lo { hi - lo } else { 1.0 };
        let scale = |v: f64| ((v - lo) / range).clamp(-0.05, 1.05);
        let pts: Vec<String> = pred
            .times
            .iter()
            .zip(&pred.states)
            .map(|(&t, s)| format!("{:.2},{:.2}", f.px(x(t)), f.py(scale(s[j]))))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="pred" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        for (xv, s) in xs.iter().zip(&obs.states) {
            let _ = writeln!(
                out,
                r#"<circle class="obs" cx="{:.2}" cy="{:.2}" r="2.5" fill="none" stroke="{color}"/>"#,
                f.px(*xv),
                f.py(scale(s[j]))
            );
        }
        let ly = PAD_T + 14.0 + 16.0 * slot as f64;
        let lx = W - PAD_R + 12.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="1.5"/>"#,
            lx + 18.0
        );
        let name = names.get(j).map(String::as_str).unwrap_or("?");
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 24.0,
            ly + 4.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// log10 k of truth (circle) and estimate (cross) per reaction.
pub fn coeff_scatter_svg(rows: &[CoeffRow], title: &str) -> String {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for r in rows {
        for v in [r.truth.log10(), r.estimate.log10()] {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let f = Frame::new(0.5, rows.len().max(1) as f64 + 0.5, lo - 0.5, hi + 0.5);
    let mut out = String::new();
    open(&mut out, title);
    axes(&mut out, &f, "reaction", "log10 k");
    for (i, r) in rows.iter().enumerate() {
        let px = f.px(i as f64 + 1.0);
        let yt = f.py(r.truth.log10());
        let ye = f.py(r.estimate.log10().clamp(f.y0, f.y1));
        let _ = writeln!(out, r#"<g class="reaction" data-id="R{}">"#, r.id);
        let _ = writeln!(
            out,
            r#"<circle class="truth" cx="{px:.2}" cy="{yt:.2}" r="4" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            out,
            r##"<path class="estimate" d="M{:.2},{:.2} l8,8 m0,-8 l-8,8" stroke="#d62728" stroke-width="1.5"/>"##,
            px - 4.0,
            ye - 4.0
        );
        let _ = writeln!(out, "</g>");
    }
    let lx = W - PAD_R + 12.0;
    let _ = writeln!(
        out,
        r#"<circle cx="{}" cy="{}" r="4" fill="none" stroke="black"/>"#,
        lx + 4.0,
        PAD_T + 14.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}">truth</text>"#,
        lx + 16.0,
        PAD_T + 18.0
    );
    let _ = writeln!(
        out,
        r##"<path d="M{lx},{} l8,8 m0,-8 l-8,8" stroke="#d62728" stroke-width="1.5"/>"##,
        PAD_T + 26.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}">estimate</text>"#,
        lx + 16.0,
        PAD_T + 34.0
    );
    out.push_str("</svg>\n");
    out
}

/// Loss curves of several stages on a log10 axis, one polyline per stage.
pub fn loss_curves_svg(curves: &[(String, Vec<f64>)], title: &str) -> String {
    let logs: Vec<Vec<f64>> = curves
        .iter()
        .map(|(_, c)| c.iter().map(|v| v.max(1e-300).log10()).collect())
        .collect();
    let n = curves
        .iter()
        .map(|(_, c)| c.len())
        .max()
        .unwrap_or(0)
        .max(2);
    let (lo, hi) = logs
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let f = Frame::new(0.0, (n - 1) as f64, lo, hi);
    let mut out = String::new();
    open(&mut out, title);
    axes(&mut out, &f, "epoch", "log10 loss");
    for (slot, ((name, _), ys)) in curves.iter().zip(&logs).enumerate() {
        let color = PALETTE[slot % PALETTE.len()];
        let pts: Vec<String> = ys
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| format!("{:.2},{:.2}", f.px(i as f64), f.py(*v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = PAD_T + 14.0 + 16.0 * slot as f64;
        let lx = W - PAD_R + 12.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}"/>"#,
            lx + 18.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 24.0,
            ly + 4.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}
