//! Procedural ground-truth terrain and the simulated mast camera.
//!
//! Terrain is a 1 cm intensity lattice. Sand is smooth low-contrast value
//! noise; rocks are jittered polygons with a short anti-aliased rim, strongly
//! darker (or brighter) than the sand so their vertices make clean corners.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{ExtendedState, GroundPoint, GroundView};
use crate::image::GrayImage;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "uniform-rock")]
    UniformRock,
    #[serde(rename = "uniform-sand")]
    UniformSand,
    #[serde(rename = "split")]
    Split,
    #[serde(rename = "scattered")]
    Scattered,
    #[serde(rename = "sparse")]
    Sparse,
}

impl Scenario {
    pub const ALL: [Scenario; 5] =
        [Scenario::UniformRock, Scenario::UniformSand, Scenario::Split, Scenario::Scattered, Scenario::Sparse];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::UniformRock => "uniform-rock",
            Scenario::UniformSand => "uniform-sand",
            Scenario::Split => "split",
            Scenario::Scattered => "scattered",
            Scenario::Sparse => "sparse",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Sand,
    Rock,
}

/// Axis-aligned world rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Extent {
    pub fn centered(width: f64, height: f64) -> Self {
        Self { x_min: -width / 2.0, y_min: -height / 2.0, x_max: width / 2.0, y_max: height / 2.0 }
    }

    pub fn contains(&self, p: GroundPoint) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
}

/// Terrain generation parameters. Densities are per square meter of rock
/// region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainParams {
    pub width_m: f64,
    pub height_m: f64,
    pub texel_m: f64,
    pub sand_level: f64,
    /// Peak-to-peak sand contrast.
    pub sand_contrast: f64,
    pub rock_density: f64,
    pub rock_radius_min: f64,
    pub rock_radius_max: f64,
    pub pebble_density: f64,
    pub rim_m: f64,
    /// Lateral position of the rock/sand boundary in `split`; rock lies at
    /// larger y (left of a rover heading +x).
    pub split_boundary_y: f64,
    pub scattered_density: f64,
    pub sparse_cluster_density: f64,
    pub sparse_cluster_radius: f64,
    pub sparse_rocks_per_cluster: usize,
}

impl Default for TerrainParams {
    fn default() -> Self {
        Self {
            width_m: 22.0,
            height_m: 21.0,
            texel_m: 0.01,
            sand_level: 0.55,
            sand_contrast: 0.05,
            rock_density: 4.0,
            rock_radius_min: 0.05,
            rock_radius_max: 0.22,
            pebble_density: 12.0,
            rim_m: 0.012,
            split_boundary_y: 1.0,
            scattered_density: 0.5,
            sparse_cluster_density: 0.04,
            sparse_cluster_radius: 0.6,
            sparse_rocks_per_cluster: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Rock {
    center: GroundPoint,
    vertices: Vec<GroundPoint>,
    radius: f64,
    level: f64,
    shade_dir: (f64, f64),
    shade: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum Layout {
    Uniform(Region),
    HalfPlane { boundary_y: f64 },
    // Region labels on a coarse lattice.
    Labels { cell: f64, cols: usize, rows: usize, rock: Vec<bool> },
}

/// Stationary ground truth: an intensity lattice over the extent.
#[derive(Debug, Clone, PartialEq)]
pub struct TerrainWorld {
    pub seed: u64,
    pub scenario: Scenario,
    pub extent: Extent,
    texel: f64,
    cols: usize,
    rows: usize,
    texels: Vec<f32>,
    layout: Layout,
}

const LABEL_CELL: f64 = 0.1;

pub fn generate_terrain(seed: u64, scenario: &str, params: &TerrainParams) -> Result<TerrainWorld> {
    let scenario: Scenario = scenario.parse()?;
    Ok(TerrainWorld::generate(seed, scenario, params))
}

impl TerrainWorld {
    pub fn generate(seed: u64, scenario: Scenario, params: &TerrainParams) -> TerrainWorld {
        let extent = Extent::centered(params.width_m, params.height_m);
        let texel = params.texel_m;
        let cols = (extent.width() / texel).round() as usize;
        let rows = (extent.height() / texel).round() as usize;
        let sand_seed = seed::derive_label(seed, "sand");
        let amp = params.sand_contrast / 2.0;

        let mut texels = vec![0f32; cols * rows];
        for (j, row) in texels.chunks_mut(cols).enumerate() {
            let y = extent.y_min + (j as f64 + 0.5) * texel;
            for (i, t) in row.iter_mut().enumerate() {
                let x = extent.x_min + (i as f64 + 0.5) * texel;
                let n = 0.6 * value_noise(sand_seed, x / 0.3, y / 0.3) + 0.4 * value_noise(sand_seed ^ 1, x / 0.07, y / 0.07);
                *t = (params.sand_level + amp * n) as f32;
            }
        }

        let mut rng = seed::rng(seed::derive_label(seed, "rocks"));
        let area = extent.width() * extent.height();
        let mut rocks = Vec::new();
        let layout = match scenario {
            Scenario::UniformSand => Layout::Uniform(Region::Sand),
            Scenario::UniformRock => {
                scatter_field(&mut rng, params, &extent, &mut rocks, |_| true);
                Layout::Uniform(Region::Rock)
            }
            Scenario::Split => {
                let b = params.split_boundary_y;
                scatter_field(&mut rng, params, &extent, &mut rocks, |p| p.y > b);
                Layout::HalfPlane { boundary_y: b }
            }
            Scenario::Scattered => {
                let n = poisson_count(&mut rng, params.scattered_density * area);
                for _ in 0..n {
                    let c = uniform_point(&mut rng, &extent);
                    let r = rng.random_range(0.08..0.3);
                    rocks.push(make_rock(&mut rng, c, r));
                }
                Layout::Uniform(Region::Sand)
            }
            Scenario::Sparse => {
                let n = poisson_count(&mut rng, params.sparse_cluster_density * area);
                for _ in 0..n {
                    let c = uniform_point(&mut rng, &extent);
                    for _ in 0..params.sparse_rocks_per_cluster {
                        let rr = params.sparse_cluster_radius * rng.random::<f64>().sqrt();
                        let a = rng.random_range(0.0..2.0 * PI);
                        let p = GroundPoint::new(c.x + rr * a.cos(), c.y + rr * a.sin());
                        let r = rng.random_range(params.rock_radius_min..params.rock_radius_max);
                        rocks.push(make_rock(&mut rng, p, r));
                    }
                }
                Layout::Uniform(Region::Sand)
            }
        };

        let mut world = TerrainWorld { seed, scenario, extent, texel, cols, rows, texels, layout };
        for rock in &rocks {
            world.paint_rock(rock, params.rim_m);
        }
        if matches!(scenario, Scenario::Scattered | Scenario::Sparse) {
            world.layout = world.label_rocks(&rocks);
        }
        world
    }

    fn paint_rock(&mut self, rock: &Rock, rim: f64) {
        let e = self.extent;
        let reach = rock.radius * 1.3 + rim;
        let i0 = (((rock.center.x - reach - e.x_min) / self.texel).floor().max(0.0)) as usize;
        let j0 = (((rock.center.y - reach - e.y_min) / self.texel).floor().max(0.0)) as usize;
        let i1 = ((((rock.center.x + reach - e.x_min) / self.texel).ceil()) as usize).min(self.cols);
        let j1 = ((((rock.center.y + reach - e.y_min) / self.texel).ceil()) as usize).min(self.rows);
        for j in j0..j1 {
            let y = e.y_min + (j as f64 + 0.5) * self.texel;
            for i in i0..i1 {
                let x = e.x_min + (i as f64 + 0.5) * self.texel;
                let d = signed_distance(&rock.vertices, x, y);
                let alpha = (0.5 - d / rim).clamp(0.0, 1.0);
                if alpha <= 0.0 {
                    continue;
                }
                let s = ((x - rock.center.x) * rock.shade_dir.0 + (y - rock.center.y) * rock.shade_dir.1) / rock.radius;
                let level = (rock.level + rock.shade * s.clamp(-1.0, 1.0)).clamp(0.0, 1.0);
                let t = &mut self.texels[j * self.cols + i];
                *t = (*t as f64 * (1.0 - alpha) + level * alpha) as f32;
            }
        }
    }

    fn label_rocks(&self, rocks: &[Rock]) -> Layout {
        let e = self.extent;
        let cols = (e.width() / LABEL_CELL).ceil() as usize;
        let rows = (e.height() / LABEL_CELL).ceil() as usize;
        let mut rock = vec![false; cols * rows];
        for r in rocks {
            let i0 = ((r.center.x - r.radius - e.x_min) / LABEL_CELL).floor().max(0.0) as usize;
            let j0 = ((r.center.y - r.radius - e.y_min) / LABEL_CELL).floor().max(0.0) as usize;
            let i1 = (((r.center.x + r.radius - e.x_min) / LABEL_CELL).ceil() as usize).min(cols);
            let j1 = (((r.center.y + r.radius - e.y_min) / LABEL_CELL).ceil() as usize).min(rows);
            for j in j0..j1 {
                for i in i0..i1 {
                    rock[j * cols + i] = true;
                }
            }
        }
        Layout::Labels { cell: LABEL_CELL, cols, rows, rock }
    }

    pub fn texel_size(&self) -> f64 {
        self.texel
    }

    pub fn lattice_dims(&self) -> (usize, usize) {
        (self.cols, self.rows)
    }

    /// Bilinear texture lookup; `None` outside the extent.
    #[inline]
    pub fn intensity_at(&self, p: GroundPoint) -> Option<f32> {
        if !self.extent.contains(p) {
            return None;
        }
        let fx = ((p.x - self.extent.x_min) / self.texel - 0.5).clamp(0.0, (self.cols - 1) as f64);
        let fy = ((p.y - self.extent.y_min) / self.texel - 0.5).clamp(0.0, (self.rows - 1) as f64);
        let i0 = (fx as usize).min(self.cols - 2);
        let j0 = (fy as usize).min(self.rows - 2);
        let ax = (fx - i0 as f64) as f32;
        let ay = (fy - j0 as f64) as f32;
        let k = j0 * self.cols + i0;
        let t = &self.texels;
        let top = t[k] + (t[k + 1] - t[k]) * ax;
        let bot = t[k + self.cols] + (t[k + self.cols + 1] - t[k + self.cols]) * ax;
        Some(top + (bot - top) * ay)
    }

    pub fn region_at(&self, p: GroundPoint) -> Region {
        match &self.layout {
            Layout::Uniform(r) => *r,
            Layout::HalfPlane { boundary_y } => {
                if p.y > *boundary_y {
                    Region::Rock
                } else {
                    Region::Sand
                }
            }
            Layout::Labels { cell, cols, rows, rock } => {
                let i = ((p.x - self.extent.x_min) / cell).floor();
                let j = ((p.y - self.extent.y_min) / cell).floor();
                if i < 0.0 || j < 0.0 || i as usize >= *cols || j as usize >= *rows {
                    return Region::Sand;
                }
                if rock[j as usize * cols + i as usize] {
                    Region::Rock
                } else {
                    Region::Sand
                }
            }
        }
    }

    /// Boundary of the textured half in `split`, if any.
    pub fn split_boundary(&self) -> Option<f64> {
        match self.layout {
            Layout::HalfPlane { boundary_y } => Some(boundary_y),
            _ => None,
        }
    }

    /// Downsampled top view for inspection.
    pub fn to_image(&self, stride: usize) -> GrayImage {
        let stride = stride.max(1);
        let w = self.cols / stride;
        let h = self.rows / stride;
        // Flip vertically so +y points up in the picture.
        GrayImage::from_fn(w, h, |i, j| self.texels[(self.rows - 1 - j * stride) * self.cols + i * stride])
    }
}

fn scatter_field(
    rng: &mut seed::SimRng,
    params: &TerrainParams,
    extent: &Extent,
    rocks: &mut Vec<Rock>,
    inside: impl Fn(GroundPoint) -> bool,
) {
    let area = extent.width() * extent.height();
    let n = poisson_count(rng, params.rock_density * area);
    for _ in 0..n {
        let c = uniform_point(rng, extent);
        let r = rng.random_range(params.rock_radius_min..params.rock_radius_max);
        let rock = make_rock(rng, c, r);
        if inside(c) {
            rocks.push(rock);
        }
    }
    let n = poisson_count(rng, params.pebble_density * area);
    for _ in 0..n {
        let c = uniform_point(rng, extent);
        let r = rng.random_range(0.015..0.045);
        let rock = make_rock(rng, c, r);
        if inside(c) {
            rocks.push(rock);
        }
    }
}

fn make_rock(rng: &mut seed::SimRng, center: GroundPoint, radius: f64) -> Rock {
    let n = rng.random_range(5..=8);
    let phase = rng.random_range(0.0..2.0 * PI);
    let vertices = (0..n)
        .map(|k| {
            let a = phase + 2.0 * PI * (k as f64 + rng.random_range(-0.3..0.3)) / n as f64;
            let r = radius * rng.random_range(0.65..1.25);
            GroundPoint::new(center.x + r * a.cos(), center.y + r * a.sin())
        })
        .collect();
    // Mostly dark basalt, some bright fragments; both at least 0.4 away from sand.
    let level = if rng.random::<f64>() < 0.75 { rng.random_range(0.04..0.13) } else { rng.random_range(0.96..1.0) };
    let a = rng.random_range(0.0..2.0 * PI);
    Rock { center, vertices, radius, level, shade_dir: (a.cos(), a.sin()), shade: rng.random_range(0.0..0.03) }
}

fn uniform_point(rng: &mut seed::SimRng, e: &Extent) -> GroundPoint {
    GroundPoint::new(rng.random_range(e.x_min..e.x_max), rng.random_range(e.y_min..e.y_max))
}

fn poisson_count(rng: &mut seed::SimRng, mean: f64) -> usize {
    // Normal approximation is plenty for the counts involved here.
    if mean <= 0.0 {
        return 0;
    }
    let z: f64 = StandardNormal.sample(rng);
    (mean + z * mean.sqrt()).round().max(0.0) as usize
}

/// Signed distance to a simple polygon: negative inside.
fn signed_distance(poly: &[GroundPoint], x: f64, y: f64) -> f64 {
    let mut best = f64::INFINITY;
    let mut inside = false;
    let n = poly.len();
    for k in 0..n {
        let a = poly[k];
        let b = poly[(k + 1) % n];
        let (ex, ey) = (b.x - a.x, b.y - a.y);
        let (px, py) = (x - a.x, y - a.y);
        let t = ((px * ex + py * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
        let d = (px - t * ex).hypot(py - t * ey);
        best = best.min(d);
        if (a.y > y) != (b.y > y) && x < a.x + (y - a.y) / (b.y - a.y) * ex {
            inside = !inside;
        }
    }
    if inside {
        -best
    } else {
        best
    }
}

fn lattice_hash(seed: u64, i: i64, j: i64) -> f64 {
    let h = seed::derive(seed, &[i as u64, j as u64]);
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Smooth value noise in [−1, 1].
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (xi, yi) = (x.floor(), y.floor());
    let (fx, fy) = (x - xi, y - yi);
    let (i, j) = (xi as i64, yi as i64);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (s(fx), s(fy));
    let a = lattice_hash(seed, i, j);
    let b = lattice_hash(seed, i + 1, j);
    let c = lattice_hash(seed, i, j + 1);
    let d = lattice_hash(seed, i + 1, j + 1);
    let top = a + (b - a) * sx;
    let bot = c + (d - c) * sx;
    top + (bot - top) * sy
}

/// Per-pixel Gaussian intensity noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorNoise {
    pub sigma_r: f64,
    pub seed: u64,
}

impl SensorNoise {
    pub fn noiseless() -> Self {
        Self { sigma_r: 0.0, seed: 0 }
    }
}

/// Hands out capture indices so that every capture draws an independent,
/// reproducible noise field.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    pub noise: SensorNoise,
    next: u64,
}

impl NoiseStream {
    pub fn new(noise: SensorNoise) -> Self {
        Self { noise, next: 0 }
    }

    pub fn next_capture(&mut self) -> u64 {
        let id = self.next;
        self.next += 1;
        id
    }
}

/// Renders the camera image at `state`. Pixels at or above the horizon, or
/// landing outside the terrain, are masked invalid.
pub fn capture_image(
    world: &TerrainWorld,
    state: &ExtendedState,
    intr: &crate::geometry::CameraIntrinsics,
    noise: &SensorNoise,
    capture_id: u64,
) -> Result<GrayImage> {
    capture_image_with(Exec::default(), world, state, intr, noise, capture_id)
}

pub fn capture_image_with(
    exec: Exec,
    world: &TerrainWorld,
    state: &ExtendedState,
    intr: &crate::geometry::CameraIntrinsics,
    noise: &SensorNoise,
    capture_id: u64,
) -> Result<GrayImage> {
    let view = GroundView::new(intr, state)?;
    let (w, h) = (intr.width, intr.height);
    let mut px: Vec<(f32, bool)> = vec![(0.0, false); w * h];
    exec.for_each_chunk(&mut px, w, |row, out| {
        let mut rng = (noise.sigma_r > 0.0).then(|| seed::rng(seed::derive(noise.seed, &[capture_id, row as u64])));
        let v = row as f64;
        for (u, o) in out.iter_mut().enumerate() {
            let n: f64 = match rng.as_mut() {
                Some(r) => StandardNormal.sample(r),
                None => 0.0,
            };
            let Some(g) = view.ground_of(u as f64, v) else { continue };
            let Some(t) = world.intensity_at(g) else { continue };
            *o = ((t as f64 + noise.sigma_r * n).clamp(0.0, 1.0) as f32, true);
        }
    });
    let (data, mask): (Vec<f32>, Vec<bool>) = px.into_iter().unzip();
    Ok(GrayImage::from_parts(w, h, data, Some(mask)))
}

/// Straight-line distance between the body positions of two states.
pub fn true_displacement(a: &ExtendedState, b: &ExtendedState) -> f64 {
    a.body.position().distance(&b.body.position())
}
