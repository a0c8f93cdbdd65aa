//! Gradient clustering on a 2-D two-blob problem, drawn step by step.
//!
//! Each frame shows the points colored by cluster, the current decision
//! boundary of a bias-free linear classifier, and for every cluster the
//! boundary one gradient step would give using only that cluster's
//! size-weighted mean gradient, `theta - lr (N_k / N) C_k`.

use std::fmt::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::{exact_update, gc_fit, CenterUpdate, GcConfig, UpdateRule};
use crate::data_gen::gen_two_blobs;
use crate::dataset::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::estimators::Snapshot;
use crate::io_util::write_atomic;
use crate::model::{dataset_factors, Activation, LayerSpec, LossSpec, ModelSnapshot, Sgd, SgdConfig};
use crate::numerics::RngStream;

use super::plot::PALETTE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_n")]
    pub n_per_class: usize,
    #[serde(default = "d_sep")]
    pub separation: f64,
    #[serde(default = "d_overlap")]
    pub overlap_count: usize,
    #[serde(default = "d_k")]
    pub clusters: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_theta")]
    pub init_theta: [f64; 2],
    #[serde(default = "d_iters")]
    pub gc_iters: usize,
}

fn d_n() -> usize {
    30
}
fn d_sep() -> f64 {
    6.0
}
fn d_overlap() -> usize {
    4
}
fn d_k() -> usize {
    4
}
fn d_lr() -> f64 {
    1.0
}
fn d_steps() -> usize {
    5
}
fn d_theta() -> [f64; 2] {
    [0.3, 1.0]
}
fn d_iters() -> usize {
    10
}

impl Default for DemoConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl DemoConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("demo config: {e}")))
    }
}

#[derive(Clone, Debug)]
pub struct DemoFrame {
    pub step: usize,
    pub theta: [f64; 2],
    pub assignments: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Parameters after a step with each cluster's weighted center alone.
    pub predicted: Vec<[f64; 2]>,
    pub svg: String,
}

#[derive(Clone, Debug)]
pub struct DemoResult {
    pub dataset: Dataset,
    pub frames: Vec<DemoFrame>,
}

impl DemoResult {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut trace = Vec::new();
        for f in &self.frames {
            write_atomic(&dir.join(format!("step_{:03}.svg", f.step)), f.svg.as_bytes())?;
            trace.push(serde_json::json!({
                "step": f.step,
                "theta": f.theta,
                "assignments": f.assignments,
                "sizes": f.sizes,
                "predicted": f.predicted,
            }));
        }
        write_atomic(&dir.join("assignments.json"), serde_json::to_string_pretty(&trace)?.as_bytes())
    }
}

pub fn demo_fig1(config: &DemoConfig) -> Result<DemoResult> {
    if config.clusters == 0 {
        return Err(Error::Config("demo needs at least one cluster".into()));
    }
    let root = RngStream::new(config.seed, 0).derive("demo");
    let data = gen_two_blobs(config.n_per_class, config.separation, config.overlap_count, &mut root.derive("blobs"))?;
    let layers = vec![LayerSpec::fully_connected(2, 1, Activation::Identity, false)];
    let mut model = ModelSnapshot::new(layers, config.init_theta.to_vec(), vec![], 0)?;
    let loss = LossSpec::logistic();
    let mut gd = Sgd::new(
        SgdConfig {
            lr: config.lr,
            momentum: 0.0,
            weight_decay: 0.0,
        },
        2,
    )?;
    // With a single output every cluster mean is rank 1, so the truncated
    // SVD update makes the clustering exact.
    let gc = GcConfig {
        iters: config.gc_iters,
        center_update: CenterUpdate::all(UpdateRule::TruncatedSvd),
        ..GcConfig::default()
    };
    let bounds = Bounds::around(&data);
    let n = data.len() as f64;
    let mut frames = Vec::new();
    for step in 0..=config.steps {
        let snap = Snapshot::new(&model, &loss, &data)?;
        let factors = dataset_factors(&model, &loss, &data)?;
        let fit = gc_fit(&factors, config.clusters, &mut root.derive("gc").derive_index(step as u64), &gc)?;
        let (centers, sizes) = exact_update(&snap.table, &fit.state.assignments, config.clusters)?;
        let theta = [model.theta()[0], model.theta()[1]];
        let predicted: Vec<[f64; 2]> = centers
            .centers
            .iter()
            .zip(&sizes)
            .map(|(c, &s)| {
                let w = config.lr * s as f64 / n;
                [theta[0] - w * c[0], theta[1] - w * c[1]]
            })
            .collect();
        let svg = render(&data, &bounds, theta, &fit.state.assignments, &predicted, step, config.lr);
        frames.push(DemoFrame {
            step,
            theta,
            assignments: fit.state.assignments,
            sizes,
            predicted,
            svg,
        });
        if step < config.steps {
            model = gd.apply(&model, &snap.full)?;
        }
    }
    Ok(DemoResult { dataset: data, frames })
}

struct Bounds {
    x: (f64, f64),
    y: (f64, f64),
}

impl Bounds {
    /// Data extent padded by 10%, always containing the origin.
    fn around(d: &Dataset) -> Self {
        let mut x = (0.0f64, 0.0f64);
        let mut y = (0.0f64, 0.0f64);
        for i in 0..d.len() {
            let p = d.example(i);
            x = (x.0.min(p[0]), x.1.max(p[0]));
            y = (y.0.min(p[1]), y.1.max(p[1]));
        }
        let pad = |r: (f64, f64)| {
            let w = (r.1 - r.0).max(1e-9) * 0.1;
            (r.0 - w, r.1 + w)
        };
        Bounds { x: pad(x), y: pad(y) }
    }

    /// Segment of the line `theta . p = 0` inside the box.
    fn clip(&self, theta: [f64; 2]) -> Option<[(f64, f64); 2]> {
        let dir = [-theta[1], theta[0]];
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for (d, (a, b)) in dir.iter().zip([self.x, self.y]) {
            if *d == 0.0 {
                continue;
            }
            let (s0, s1) = (a / d, b / d);
            lo = lo.max(s0.min(s1));
            hi = hi.min(s0.max(s1));
        }
        if dir == [0.0, 0.0] || lo > hi {
            return None;
        }
        Some([(lo * dir[0], lo * dir[1]), (hi * dir[0], hi * dir[1])])
    }
}

const SIZE: f64 = 480.0;

fn render(
    data: &Dataset,
    b: &Bounds,
    theta: [f64; 2],
    assignments: &[usize],
    predicted: &[[f64; 2]],
    step: usize,
    lr: f64,
) -> String {
    let sx = |v: f64| SIZE * (v - b.x.0) / (b.x.1 - b.x.0);
    let sy = |v: f64| SIZE * (1.0 - (v - b.y.0) / (b.y.1 - b.y.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(
        s,
        r#"<metadata>{{"step": {step}, "lr": {lr}, "clusters": {}}}</metadata>"#,
        predicted.len()
    );
    let _ = writeln!(s, r#"<rect width="{SIZE}" height="{SIZE}" fill="white" stroke="black"/>"#);
    for i in 0..data.len() {
        let p = data.example(i);
        let color = PALETTE[assignments[i] % PALETTE.len()];
        let stroke = if data.provenance()[i] == Provenance::Margin { "black" } else { "none" };
        let (x, y) = (sx(p[0]), sy(p[1]));
        if data.label(i) > 0 {
            let _ = writeln!(
                s,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{color}" stroke="{stroke}"/>"#
            );
        } else {
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="8" height="8" fill="{color}" stroke="{stroke}"/>"#,
                x - 4.0,
                y - 4.0
            );
        }
    }
    let mut line = |theta: [f64; 2], style: &str| match b.clip(theta) {
        Some([(x0, y0), (x1, y1)]) => {
            let _ = writeln!(
                s,
                r#"<polyline points="{:.2},{:.2} {:.2},{:.2}" fill="none" {style}/>"#,
                sx(x0),
                sy(y0),
                sx(x1),
                sy(y1)
            );
        }
        None => log::warn!("step {step}: boundary with zero weights cannot be drawn"),
    };
    line(theta, r#"stroke="black" stroke-width="2""#);
    for (k, p) in predicted.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        line(*p, &format!(r#"stroke="{color}" stroke-width="1.5" stroke-dasharray="6 4""#));
    }
    s.push_str("</svg>\n");
    s
}
