//! Standalone SVG line charts: speed, acceleration, time gap and distance gap
//! per vehicle, stacked in four panels sharing the time axis.

use std::fmt::Write as _;

use super::lane_pairs;
use super::trace::VehicleTrace;

const WIDTH: f64 = 900.0;
const PANEL_H: f64 = 200.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 110.0;
const MARGIN_T: f64 = 30.0;
const PANEL_GAP: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
/// Time gaps above this are clipped out of the plot (free road ahead).
const MAX_TIME_GAP: f64 = 5.0;

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-9 {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn panel(
    out: &mut String,
    index: usize,
    title: &str,
    unit: &str,
    series: &[Series],
    t_range: (f64, f64),
) {
    let top = MARGIN_T + index as f64 * (PANEL_H + PANEL_GAP);
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let (lo, hi) = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .filter(|y| y.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| {
            (lo.min(y), hi.max(y))
        });
    let (ylo, yhi) = nice_range(lo, hi);
    let (t0, t1) = t_range;
    let tspan = if t1 > t0 { t1 - t0 } else { 1.0 };
    let x = |t: f64| MARGIN_L + (t - t0) / tspan * plot_w;
    let y = |v: f64| top + PANEL_H - (v - ylo) / (yhi - ylo) * PANEL_H;

    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN_L}" y="{top}" width="{plot_w}" height="{PANEL_H}" fill="none" stroke="#444"/>"##
    );
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN_L}" y="{:.1}" font-size="13">{title} [{unit}]</text>"#,
        top - 6.0
    );
    for k in 0..=4 {
        let v = ylo + (yhi - ylo) * k as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(
            out,
            r##"<line x1="{MARGIN_L}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{v:.2}</text>"##,
            MARGIN_L + plot_w,
            MARGIN_L - 4.0,
            yy + 3.0
        );
        let t = t0 + tspan * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{t:.0}</text>"#,
            x(t),
            top + PANEL_H + 13.0
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        // non-finite samples split the line
        let mut runs: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
        for &(t, v) in &s.points {
            if v.is_finite() {
                runs.last_mut().expect("non-empty").push((x(t), y(v)));
            } else if !runs.last().expect("non-empty").is_empty() {
                runs.push(Vec::new());
            }
        }
        for run in runs.iter().filter(|r| r.len() > 1) {
            let pts: Vec<String> = run.iter().map(|(a, b)| format!("{a:.1},{b:.1}")).collect();
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
                pts.join(" ")
            );
        }
        let ly = top + 14.0 + 16.0 * i as f64;
        let lx = WIDTH - MARGIN_R + 10.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
            lx + 18.0,
            lx + 22.0,
            ly + 4.0,
            s.label
        );
    }
}

/// Renders the four-panel chart for `plotted` vehicles. Gaps are measured to
/// whichever vehicle in `all` is directly ahead in the same lane.
pub fn render_svg(title: &str, all: &[VehicleTrace], plotted: &[&VehicleTrace], dt: f64) -> String {
    let t_of = |step: u64| step as f64 * dt;
    let (s0, s1) = all
        .iter()
        .flat_map(|t| t.records.first().zip(t.records.last()))
        .fold((u64::MAX, 0), |(a, b), (f, l)| {
            (a.min(f.step), b.max(l.step))
        });
    let t_range = if s0 <= s1 {
        (t_of(s0), t_of(s1))
    } else {
        (0.0, 1.0)
    };

    let mut speed = Vec::new();
    let mut accel = Vec::new();
    let mut time_gap = Vec::new();
    let mut dist_gap = Vec::new();
    for tr in plotted {
        let label = format!("veh {}", tr.id);
        speed.push(Series {
            label: label.clone(),
            points: tr.records.iter().map(|r| (t_of(r.step), r.speed)).collect(),
        });
        accel.push(Series {
            label: label.clone(),
            points: tr.records.iter().map(|r| (t_of(r.step), r.accel)).collect(),
        });
        let pairs = lane_pairs(all, tr);
        time_gap.push(Series {
            label: label.clone(),
            points: pairs
                .iter()
                .map(|p| {
                    let g = if p.speed > 0.0 {
                        p.gap / p.speed
                    } else {
                        f64::NAN
                    };
                    (t_of(p.step), if g <= MAX_TIME_GAP { g } else { f64::NAN })
                })
                .collect(),
        });
        dist_gap.push(Series {
            label,
            points: pairs.iter().map(|p| (t_of(p.step), p.gap)).collect(),
        });
    }

    let height = MARGIN_T + 4.0 * PANEL_H + 3.0 * PANEL_GAP + 40.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN_L}" y="16" font-size="15">{}</text>"#,
        escape(title)
    );
    panel(&mut out, 0, "speed", "m/s", &speed, t_range);
    panel(&mut out, 1, "acceleration", "m/s^2", &accel, t_range);
    panel(&mut out, 2, "time gap", "s", &time_gap, t_range);
    panel(&mut out, 3, "distance gap", "m", &dist_gap, t_range);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">time [s]</text>"#,
        MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) / 2.0,
        height - 8.0
    );
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
