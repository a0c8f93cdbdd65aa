//! Hand-written SVG line charts with log axes and rolling-std bands.
//!
//! Output is a pure function of the input, so identical CSVs give
//! identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::metrics::{parse_reports_csv, rolling, VarianceRow, REPORT_HEADER};

use super::sweep::SWEEP_HEADER;

pub const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Window of the rolling mean/std drawn over variance-vs-step series.
pub const ROLLING_WINDOW: usize = 5;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Optional `(lower, upper)` band per point.
    pub band: Option<Vec<(f64, f64)>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Option<Axis> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite() && (!log || *v > 0.0)) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo > hi {
            return None;
        }
        if log {
            lo = 10f64.powf(lo.log10().floor());
            hi = 10f64.powf(hi.log10().ceil());
            if lo == hi {
                hi = lo * 10.0;
            }
        } else if lo == hi {
            lo -= 0.5;
            hi += 0.5;
        }
        Some(Axis { lo, hi, log })
    }

    /// Position in `[0, 1]`.
    fn unit(&self, v: f64) -> f64 {
        if self.log {
            (v.log10() - self.lo.log10()) / (self.hi.log10() - self.lo.log10())
        } else {
            (v - self.lo) / (self.hi - self.lo)
        }
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.lo.log10().round() as i32, self.hi.log10().round() as i32);
            (a..=b).map(|e| 10f64.powi(e)).collect()
        } else {
            (0..=4).map(|j| self.lo + (self.hi - self.lo) * j as f64 / 4.0).collect()
        }
    }

    fn label(&self, v: f64) -> String {
        if self.log {
            format!("1e{}", v.log10().round() as i32)
        } else {
            format!("{v:.3}")
        }
    }

    fn usable(&self, v: f64) -> bool {
        v.is_finite() && (!self.log || v > 0.0)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart of the given series. Series without a plottable point are
/// dropped with a warning; `None` when nothing is left.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], log_x: bool) -> Option<String> {
    let kept: Vec<&Series> = series
        .iter()
        .filter(|s| {
            let ok = s.points.iter().any(|&(x, y)| x.is_finite() && (!log_x || x > 0.0) && y.is_finite() && y > 0.0);
            if !ok {
                log::warn!("{title}: series `{}` has no plottable points, omitted", s.name);
            }
            ok
        })
        .collect();
    if kept.is_empty() {
        log::warn!("{title}: no series to plot, panel omitted");
        return None;
    }
    let xs = kept.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let x = Axis::fit(xs, log_x)?;
    let ys = kept.iter().flat_map(|s| {
        s.points
            .iter()
            .map(|p| p.1)
            .chain(s.band.iter().flatten().flat_map(|b| [b.0, b.1]))
    });
    let y = Axis::fit(ys, true)?;
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |v: f64| LEFT + pw * x.unit(v);
    let py = |v: f64| TOP + ph * (1.0 - y.unit(v));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    for t in y.ticks() {
        let yy = py(t);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT:.2}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#dddddd"/>"##,
            LEFT + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            yy + 4.0,
            y.label(t)
        );
    }
    for t in x.ticks() {
        let xx = px(t);
        let _ = writeln!(
            s,
            r##"<line x1="{xx:.2}" y1="{TOP:.2}" x2="{xx:.2}" y2="{:.2}" stroke="#eeeeee"/>"##,
            TOP + ph
        );
        let _ = writeln!(
            s,
            r#"<text x="{xx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + ph + 16.0,
            x.label(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );

    for (j, ser) in kept.iter().enumerate() {
        let color = PALETTE[j % PALETTE.len()];
        if let Some(band) = &ser.band {
            let pts: Vec<(f64, (f64, f64))> = ser
                .points
                .iter()
                .zip(band)
                .filter(|((xv, _), (lo, hi))| x.usable(*xv) && y.usable(*lo) && y.usable(*hi))
                .map(|((xv, _), b)| (*xv, *b))
                .collect();
            if pts.len() >= 2 {
                let mut d = String::new();
                for (xv, (_, hi)) in &pts {
                    let _ = write!(d, "{:.2},{:.2} ", px(*xv), py(*hi));
                }
                for (xv, (lo, _)) in pts.iter().rev() {
                    let _ = write!(d, "{:.2},{:.2} ", px(*xv), py(*lo));
                }
                let _ = writeln!(
                    s,
                    r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
                    d.trim_end()
                );
            }
        }
        let mut d = String::new();
        for &(xv, yv) in ser.points.iter().filter(|(xv, yv)| x.usable(*xv) && y.usable(*yv)) {
            let _ = write!(d, "{:.2},{:.2} ", px(xv), py(yv));
        }
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            d.trim_end()
        );
        let ly = TOP + 14.0 + 16.0 * j as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 24.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    Some(s)
}

fn smoothed(name: &str, steps: &[f64], values: &[f64]) -> Series {
    let sm = rolling(values, ROLLING_WINDOW).expect("window >= 1");
    Series {
        name: name.to_string(),
        points: steps.iter().copied().zip(sm.mean.iter().copied()).collect(),
        band: Some(sm.mean.iter().zip(&sm.std).map(|(m, s)| (m - s, m + s)).collect()),
    }
}

/// Variance and normalized variance against step, one series per
/// estimator (first-appearance order).
pub fn report_plots(rows: &[VarianceRow]) -> Result<Vec<(String, String)>> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.estimator.as_str()) {
            order.push(&r.estimator);
        }
    }
    let mut out = Vec::new();
    type Pick = fn(&VarianceRow) -> f64;
    let panels: [(&str, &str, Pick); 2] = [
        ("avg_var.svg", "average variance", |r| r.avg_var),
        ("norm_var.svg", "normalized variance", |r| r.norm_var),
    ];
    for (file, label, pick) in panels {
        let series: Vec<Series> = order
            .iter()
            .map(|name| {
                let sel: Vec<&VarianceRow> = rows.iter().filter(|r| r.estimator == *name).collect();
                let steps: Vec<f64> = sel.iter().map(|r| r.step as f64).collect();
                let vals: Vec<f64> = sel.iter().map(|r| pick(r)).collect();
                smoothed(name, &steps, &vals)
            })
            .collect();
        if let Some(svg) = line_chart(&format!("{label} (rolling window {ROLLING_WINDOW})"), "step", label, &series, false) {
            out.push((file.to_string(), svg));
        }
    }
    Ok(out)
}

/// Estimator name to (x, mean, std) points.
type Panel = BTreeMap<String, Vec<(f64, f64, f64)>>;

/// Variance against overparametrization from a sweep CSV, one panel per
/// (learning rate, duplicate fraction), mean statistic with std error bands.
pub fn sweep_plots(csv: &str) -> Result<Vec<(String, String)>> {
    let mut lines = csv.lines().enumerate();
    if lines.next().map(|(_, h)| h.trim()) != Some(SWEEP_HEADER) {
        return Err(Error::Format("line 1: not a sweep CSV header".into()));
    }
    // (lr, dup) -> estimator -> points
    let mut panels: BTreeMap<(String, String), Panel> = BTreeMap::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(Error::Format(format!("line {}: expected 11 fields", idx + 1)));
        }
        if f[4] != "mean" || f[0].is_empty() {
            continue;
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("line {}: invalid number `{s}`", idx + 1)))
        };
        let (op, av, sd) = (num(f[0])?, num(f[5])?, num(f[6])?);
        panels
            .entry((f[1].to_string(), f[2].to_string()))
            .or_default()
            .entry(f[3].to_string())
            .or_default()
            .push((op, av, sd));
    }
    let mut out = Vec::new();
    for (j, ((lr, dup), by_est)) in panels.iter().enumerate() {
        let series: Vec<Series> = by_est
            .iter()
            .map(|(name, pts)| {
                let mut pts = pts.clone();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series {
                    name: name.clone(),
                    points: pts.iter().map(|p| (p.0, p.1)).collect(),
                    band: Some(pts.iter().map(|p| (p.1 - p.2, p.1 + p.2)).collect()),
                }
            })
            .collect();
        let lr_v: f64 = lr.parse().unwrap_or(f64::NAN);
        let mut title = format!("mean variance, lr {lr_v}");
        if !dup.is_empty() {
            let d: f64 = dup.parse().unwrap_or(f64::NAN);
            title.push_str(&format!(", duplicates {d}"));
        }
        if let Some(svg) = line_chart(&title, "overparametrization (h_s / N)", "average variance", &series, true) {
            out.push((format!("sweep_{j:02}.svg"), svg));
        }
    }
    Ok(out)
}

/// Plots a reports or sweep CSV, dispatching on the header.
pub fn plot_csv(text: &str) -> Result<Vec<(String, String)>> {
    match text.lines().next().map(str::trim) {
        Some(REPORT_HEADER) => report_plots(&parse_reports_csv(text)?),
        Some(SWEEP_HEADER) => sweep_plots(text),
        _ => Err(Error::Format("line 1: unrecognised CSV header".into())),
    }
}
