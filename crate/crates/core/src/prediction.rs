//! Most-likely image synthesis from the map belief and the edge costs used to
//! score pairs of future observations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::belief::{BeliefGrid, FeatureMap};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{CameraIntrinsics, ExtendedState, GroundView};
use crate::image::GrayImage;
use crate::vision::{self, detect_features, Features, VisionParams};
use crate::world::true_displacement;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub img: GrayImage,
    /// Fraction of pixels that back-project onto observed cells.
    pub valid_fraction: f64,
}

/// Renders the expected image at `state`: each pixel takes the bilinearly
/// interpolated belief mean at its ground point. Pixels touching unobserved
/// cells are invalid.
pub fn render_synthetic(grid: &BeliefGrid, state: &ExtendedState, intr: &CameraIntrinsics) -> Result<SyntheticImage> {
    render_synthetic_with(grid.exec, grid, state, intr)
}

pub fn render_synthetic_with(
    exec: Exec,
    grid: &BeliefGrid,
    state: &ExtendedState,
    intr: &CameraIntrinsics,
) -> Result<SyntheticImage> {
    let view = GroundView::new(intr, state)?;
    let (w, h) = (intr.width, intr.height);
    let mut px: Vec<(f32, bool)> = vec![(0.0, false); w * h];
    exec.for_each_chunk(&mut px, w, |row, out| {
        for (u, o) in out.iter_mut().enumerate() {
            if let Some(m) = view.ground_of(u as f64, row as f64).and_then(|g| grid.mean_at(g)) {
                *o = (m.clamp(0.0, 1.0) as f32, true);
            }
        }
    });
    let valid = px.iter().filter(|p| p.1).count();
    let (data, mask): (Vec<f32>, Vec<bool>) = px.into_iter().unzip();
    Ok(SyntheticImage {
        img: GrayImage::from_parts(w, h, data, Some(mask)),
        valid_fraction: valid as f64 / (w * h) as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    /// VO displacement error on a synthetic image pair.
    #[serde(rename = "displacement")]
    Displacement,
    /// Corner count in synthetic images.
    #[serde(rename = "synthetic-features")]
    SyntheticFeatureCount,
    /// Landmarks of the feature map visible from each viewpoint.
    #[serde(rename = "visible-features")]
    VisibleFeatureCount,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] =
        [MetricKind::Displacement, MetricKind::SyntheticFeatureCount, MetricKind::VisibleFeatureCount];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Displacement => "displacement",
            MetricKind::SyntheticFeatureCount => "synthetic-features",
            MetricKind::VisibleFeatureCount => "visible-features",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            MetricKind::Displacement => "J_D",
            MetricKind::SyntheticFeatureCount => "J_F",
            MetricKind::VisibleFeatureCount => "J_V",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        MetricKind::ALL
            .into_iter()
            .find(|m| {
                let short = m.short().to_ascii_lowercase();
                m.name() == lower || short == lower || short.replace('_', "") == lower
            })
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeCostParams {
    pub gamma: f64,
    pub failure_penalty: f64,
    pub feature_scale: f64,
    /// Renders with a smaller valid fraction price the pair as a failure.
    pub min_valid: f64,
}

impl Default for EdgeCostParams {
    fn default() -> Self {
        Self { gamma: 0.9, failure_penalty: 10.0, feature_scale: 1.0, min_valid: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionParams {
    pub edge: EdgeCostParams,
    /// Synthetic images are rendered at this fraction of the camera resolution.
    pub synth_scale: f64,
    pub vision: VisionParams,
}

impl Default for PredictionParams {
    fn default() -> Self {
        Self { edge: EdgeCostParams::default(), synth_scale: 0.5, vision: VisionParams::default() }
    }
}

/// Everything an edge cost needs about one endpoint, computed once per state.
#[derive(Debug, Clone)]
pub struct NodeView {
    pub state: ExtendedState,
    pub synth: Option<SyntheticImage>,
    pub features: Option<Features>,
    pub count: usize,
}

impl NodeView {
    /// Prepares the per-state data required by `metric`.
    pub fn prepare(
        metric: MetricKind,
        grid: &BeliefGrid,
        fm: &FeatureMap,
        state: &ExtendedState,
        intr: &CameraIntrinsics,
        params: &PredictionParams,
    ) -> Self {
        let mut node = NodeView { state: *state, synth: None, features: None, count: 0 };
        match metric {
            MetricKind::VisibleFeatureCount => {
                if let Ok(view) = GroundView::new(intr, state) {
                    node.count = fm.count_visible(&view, grid.params.max_range);
                }
            }
            MetricKind::SyntheticFeatureCount | MetricKind::Displacement => {
                let k = intr.scaled(params.synth_scale);
                let Ok(synth) = render_synthetic(grid, state, &k) else { return node };
                if synth.valid_fraction >= params.edge.min_valid {
                    if metric == MetricKind::Displacement {
                        let f = match GroundView::new(&k, state) {
                            Ok(view) => Features::extract_for(&synth.img, &params.vision, &view),
                            Err(_) => Features::extract(&synth.img, &params.vision.detector),
                        };
                        node.count = f.len();
                        node.features = Some(f);
                    } else {
                        node.count = detect_features(&synth.img, &params.vision.detector).len();
                    }
                }
                node.synth = Some(synth);
            }
        }
        node
    }

    fn renders_ok(&self, min_valid: f64) -> bool {
        self.synth.as_ref().is_some_and(|s| s.valid_fraction >= min_valid)
    }
}

/// A priced edge. `failed` marks pairs that could not support VO; they still
/// carry a finite cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeEval {
    pub cost: f64,
    pub failed: bool,
}

/// Prices the observation pair `(a, b)`. `ransac_seed` seeds the synthetic VO.
pub fn edge_cost_nodes(
    metric: MetricKind,
    a: &NodeView,
    b: &NodeView,
    intr: &CameraIntrinsics,
    params: &PredictionParams,
    ransac_seed: u64,
) -> EdgeEval {
    let e = &params.edge;
    let fail = EdgeEval { cost: e.failure_penalty, failed: true };
    match metric {
        MetricKind::Displacement => {
            if !(a.renders_ok(e.min_valid) && b.renders_ok(e.min_valid)) {
                return fail;
            }
            let (Some(fa), Some(fb)) = (&a.features, &b.features) else { return fail };
            let mut vp = params.vision;
            vp.ransac.seed = ransac_seed;
            let k = intr.scaled(params.synth_scale);
            let vo = vision::visual_odometry_features(fa, fb, &k, &a.state, &vp);
            if !vo.ok {
                return fail;
            }
            EdgeEval { cost: (vo.displacement - true_displacement(&a.state, &b.state)).abs(), failed: false }
        }
        MetricKind::SyntheticFeatureCount => {
            if !(a.renders_ok(e.min_valid) && b.renders_ok(e.min_valid)) {
                return fail;
            }
            let n = a.count.min(b.count);
            EdgeEval { cost: e.feature_scale / (1.0 + n as f64), failed: n == 0 }
        }
        MetricKind::VisibleFeatureCount => {
            let n = a.count.min(b.count);
            EdgeEval { cost: e.feature_scale / (1.0 + n as f64), failed: n == 0 }
        }
    }
}

pub fn edge_cost(
    metric: MetricKind,
    grid: &BeliefGrid,
    fm: &FeatureMap,
    a: &ExtendedState,
    b: &ExtendedState,
    intr: &CameraIntrinsics,
    params: &PredictionParams,
) -> f64 {
    let na = NodeView::prepare(metric, grid, fm, a, intr, params);
    let nb = NodeView::prepare(metric, grid, fm, b, intr, params);
    edge_cost_nodes(metric, &na, &nb, intr, params, params.vision.ransac.seed).cost
}

/// Discount weight of the `i`-th edge, with `0⁰ = 1`.
pub fn discount(gamma: f64, i: usize) -> f64 {
    if i == 0 {
        1.0
    } else {
        gamma.powi(i as i32)
    }
}

/// Discounted sum of edge costs along a schedule of observations.
pub fn trajectory_cost(
    metric: MetricKind,
    grid: &BeliefGrid,
    fm: &FeatureMap,
    schedule: &[ExtendedState],
    intr: &CameraIntrinsics,
    params: &PredictionParams,
) -> Result<f64> {
    if schedule.len() < 2 {
        return Err(Error::ScheduleTooShort(schedule.len()));
    }
    let nodes: Vec<NodeView> =
        schedule.iter().map(|s| NodeView::prepare(metric, grid, fm, s, intr, params)).collect();
    Ok(nodes
        .windows(2)
        .enumerate()
        .map(|(i, w)| discount(params.edge.gamma, i) * edge_cost_nodes(metric, &w[0], &w[1], intr, params, params.vision.ransac.seed).cost)
        .sum())
}
