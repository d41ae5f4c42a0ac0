//! Ground-plane map belief: per-cell intensity estimates fused with a scalar
//! Kalman filter, plus a sparse landmark map of detected corners.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{CameraIntrinsics, ExtendedState, GroundPoint, GroundView, Homography};
use crate::image::{write_pgm, GrayImage};
use crate::vision::{Corner, Features};
use crate::world::Extent;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    /// Observation variance.
    pub r: f64,
    /// Process variance added before each update.
    pub q: f64,
    pub var_init: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self { r: 0.02 * 0.02, q: 1e-6, var_init: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapParams {
    pub resolution: f64,
    /// Ground points farther than this from the camera are not registered.
    pub max_range: f64,
    /// Footprint radius used by the coverage check.
    pub coverage_range: f64,
    pub noise: NoiseParams,
}

impl Default for MapParams {
    fn default() -> Self {
        Self { resolution: 0.02, max_range: 6.0, coverage_range: 3.5, noise: NoiseParams::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeliefCell {
    pub mean: f64,
    pub var: f64,
    pub observed: bool,
}

impl BeliefCell {
    pub fn prior(params: &NoiseParams) -> Self {
        Self { mean: 0.5, var: params.var_init, observed: false }
    }
}

/// Scalar Kalman update of one cell with measurement `z`.
pub fn kalman_cell_update(cell: BeliefCell, z: f64, params: &NoiseParams) -> BeliefCell {
    let prior = cell.var + params.q;
    if params.r == 0.0 {
        return BeliefCell { mean: z, var: 0.0, observed: true };
    }
    if prior == 0.0 {
        return BeliefCell { observed: true, ..cell };
    }
    let var = 1.0 / (1.0 / prior + 1.0 / params.r);
    let mean = var * (cell.mean / prior + z / params.r);
    BeliefCell { mean, var, observed: true }
}

/// How an image is placed on the map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Alignment {
    /// Use the ground homography of the supplied state.
    StateDerived,
    /// Pixel-to-ground homography from feature-based alignment.
    Homography(Homography),
}

/// The most recently registered image, kept as the next alignment reference.
#[derive(Debug, Clone)]
pub struct Registration {
    pub image: GrayImage,
    /// Detected lazily by the aligner when not supplied.
    pub features: Option<Features>,
    /// Pixel-to-ground homography of `image`.
    pub map_from_cam: Homography,
    pub state: ExtendedState,
}

#[derive(Debug, Clone)]
pub struct BeliefGrid {
    pub origin: GroundPoint,
    pub resolution: f64,
    pub cols: usize,
    pub rows: usize,
    cells: Vec<BeliefCell>,
    // Cell means as f32, NaN where unobserved; the compact layer rendering reads.
    means: Vec<f32>,
    pub params: MapParams,
    /// Pixel-to-ground homography of the first registered image.
    pub anchor: Option<Homography>,
    pub last: Option<Registration>,
    /// Set when alignment failed and the map should be re-initialized.
    pub needs_reinit: bool,
    pub exec: Exec,
}

impl BeliefGrid {
    pub fn new(extent: &Extent, params: &MapParams) -> Self {
        let cols = (extent.width() / params.resolution).ceil() as usize;
        let rows = (extent.height() / params.resolution).ceil() as usize;
        Self {
            origin: GroundPoint::new(extent.x_min, extent.y_min),
            resolution: params.resolution,
            cols,
            rows,
            cells: vec![BeliefCell::prior(&params.noise); cols * rows],
            means: vec![f32::NAN; cols * rows],
            params: *params,
            anchor: None,
            last: None,
            needs_reinit: false,
            exec: Exec::default(),
        }
    }

    pub fn cells(&self) -> &[BeliefCell] {
        &self.cells
    }

    pub fn cell(&self, i: usize, j: usize) -> &BeliefCell {
        &self.cells[j * self.cols + i]
    }

    pub fn cell_center(&self, i: usize, j: usize) -> GroundPoint {
        GroundPoint::new(
            self.origin.x + (i as f64 + 0.5) * self.resolution,
            self.origin.y + (j as f64 + 0.5) * self.resolution,
        )
    }

    /// Index of the cell containing `p`.
    pub fn cell_of(&self, p: GroundPoint) -> Option<(usize, usize)> {
        let fi = ((p.x - self.origin.x) / self.resolution).floor();
        let fj = ((p.y - self.origin.y) / self.resolution).floor();
        (fi >= 0.0 && fj >= 0.0 && (fi as usize) < self.cols && (fj as usize) < self.rows)
            .then(|| (fi as usize, fj as usize))
    }

    pub fn observed_count(&self) -> usize {
        self.cells.iter().filter(|c| c.observed).count()
    }

    /// Bilinear interpolation of means over cell centres; `None` if any of the
    /// four cells is unobserved.
    #[inline]
    pub fn mean_at(&self, p: GroundPoint) -> Option<f64> {
        let fx = (p.x - self.origin.x) / self.resolution - 0.5;
        let fy = (p.y - self.origin.y) / self.resolution - 0.5;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (i0, j0) = (fx as usize, fy as usize);
        if i0 + 1 >= self.cols || j0 + 1 >= self.rows {
            return None;
        }
        let k = j0 * self.cols + i0;
        let m = &self.means;
        let (a, b, c, d) = (m[k] as f64, m[k + 1] as f64, m[k + self.cols] as f64, m[k + self.cols + 1] as f64);
        if (a + b + c + d).is_nan() {
            return None;
        }
        let (ax, ay) = (fx - i0 as f64, fy - j0 as f64);
        let top = a + (b - a) * ax;
        let bot = c + (d - c) * ax;
        Some(top + (bot - top) * ay)
    }

    /// Cell-index rectangle (exclusive upper bounds) covering the disc of the
    /// registration range around `c`.
    fn range_box(&self, c: GroundPoint, r: f64) -> (usize, usize, usize, usize) {
        let res = self.resolution;
        let lo = |v: f64, o: f64| (((v - r - o) / res).floor().max(0.0)) as usize;
        let hi = |v: f64, o: f64, n: usize| ((((v + r - o) / res).ceil()).max(0.0) as usize).min(n);
        (lo(c.x, self.origin.x), lo(c.y, self.origin.y), hi(c.x, self.origin.x, self.cols), hi(c.y, self.origin.y, self.rows))
    }

    /// Visits every cell inside `view`'s registrable footprint with its pixel
    /// coordinates under `cam_from_map`.
    fn footprint_cells(
        &self,
        view: &GroundView,
        cam_from_map: &Homography,
        range: f64,
        mut f: impl FnMut(usize, usize, f64, f64),
    ) {
        let c = view.center_xy();
        let (i0, j0, i1, j1) = self.range_box(c, range);
        let r2 = range * range;
        for j in j0..j1 {
            for i in i0..i1 {
                let p = self.cell_center(i, j);
                if (p.x - c.x).powi(2) + (p.y - c.y).powi(2) > r2 || view.depth_of(p.x, p.y) <= 1e-6 {
                    continue;
                }
                if let Some((u, v)) = cam_from_map.apply(p.x, p.y) {
                    if view.intr.contains(u, v) {
                        f(i, j, u, v);
                    }
                }
            }
        }
    }

    /// Number of cells changed.
    fn fuse(&mut self, image: &GrayImage, view: &GroundView, cam_from_map: &Homography) -> usize {
        let c = view.center_xy();
        let (i0, j0, i1, j1) = self.range_box(c, self.params.max_range);
        if i0 >= i1 || j0 >= j1 {
            return 0;
        }
        let r2 = self.params.max_range * self.params.max_range;
        let (cols, res, origin, noise) = (self.cols, self.resolution, self.origin, self.params.noise);
        let changed = AtomicUsize::new(0);
        let band = &mut self.cells[j0 * cols..j1 * cols];
        self.exec.for_each_chunk(band, cols, |dj, row| {
            let y = origin.y + ((j0 + dj) as f64 + 0.5) * res;
            let mut n = 0;
            for (i, cell) in row.iter_mut().enumerate().take(i1).skip(i0) {
                let x = origin.x + (i as f64 + 0.5) * res;
                if (x - c.x).powi(2) + (y - c.y).powi(2) > r2 || view.depth_of(x, y) <= 1e-6 {
                    continue;
                }
                let Some((u, v)) = cam_from_map.apply(x, y) else { continue };
                if let Some(z) = image.sample_bilinear(u, v) {
                    *cell = kalman_cell_update(*cell, z as f64, &noise);
                    n += 1;
                }
            }
            changed.fetch_add(n, Ordering::Relaxed);
        });
        for j in j0..j1 {
            for i in i0..i1 {
                let k = j * cols + i;
                let cell = &self.cells[k];
                self.means[k] = if cell.observed { cell.mean as f32 } else { f32::NAN };
            }
        }
        changed.into_inner()
    }

    /// Registers a sequence of images at trusted states and restarts the
    /// alignment chain from the last of them. Existing cells keep their data.
    pub fn reinitialize(
        &mut self,
        images: &[GrayImage],
        states: &[ExtendedState],
        intr: &CameraIntrinsics,
        features: &[Features],
    ) -> Result<usize> {
        assert_eq!(images.len(), states.len());
        let mut registered = 0;
        for (k, (img, st)) in images.iter().zip(states).enumerate() {
            let feats = features.get(k).cloned();
            match self.update_with(img, st, intr, Alignment::StateDerived, feats) {
                Ok(_) => registered += 1,
                Err(e) => warn!("skipping initialization image {k}: {e}"),
            }
        }
        if registered == 0 {
            return Err(Error::EmptyInit);
        }
        self.needs_reinit = false;
        Ok(registered)
    }

    fn update_with(
        &mut self,
        image: &GrayImage,
        state: &ExtendedState,
        intr: &CameraIntrinsics,
        alignment: Alignment,
        features: Option<Features>,
    ) -> Result<usize> {
        let view = GroundView::new(intr, state)?;
        let map_from_cam = match alignment {
            Alignment::StateDerived => *view.inverse_homography(),
            Alignment::Homography(h) => h,
        };
        let cam_from_map = map_from_cam.inverse()?;
        let n = self.fuse(image, &view, &cam_from_map);
        if self.anchor.is_none() {
            self.anchor = Some(map_from_cam);
        }
        self.last = Some(Registration { image: image.clone(), features, map_from_cam, state: *state });
        Ok(n)
    }

    /// Fuses `image` into the cells of its current footprint and makes it the
    /// new alignment reference. Returns the number of cells updated.
    pub fn update_map(
        &mut self,
        image: &GrayImage,
        state: &ExtendedState,
        intr: &CameraIntrinsics,
        alignment: Alignment,
        features: Option<Features>,
    ) -> Result<usize> {
        self.update_with(image, state, intr, alignment, features)
    }

    /// Observed fraction of the cells `state` sees within the coverage range.
    pub fn footprint_coverage(&self, state: &ExtendedState, intr: &CameraIntrinsics) -> f64 {
        let Ok(view) = GroundView::new(intr, state) else { return 0.0 };
        let (mut total, mut seen) = (0usize, 0usize);
        let cam_from_map = *view.homography();
        self.footprint_cells(&view, &cam_from_map, self.params.coverage_range, |i, j, _, _| {
            total += 1;
            seen += usize::from(self.cell(i, j).observed);
        });
        if total == 0 {
            0.0
        } else {
            seen as f64 / total as f64
        }
    }

    /// Mean layer, variance layer and a text header describing the raster.
    /// Row 0 of both rasters is the largest y.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        let flip = |k: usize| {
            let (i, j) = (k % self.cols, k / self.cols);
            &self.cells[(self.rows - 1 - j) * self.cols + i]
        };
        let n = self.cols * self.rows;
        let mean: Vec<u8> = (0..n)
            .map(|k| {
                let c = flip(k);
                if c.observed {
                    (c.mean.clamp(0.0, 1.0) * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect();
        let var_init = self.params.noise.var_init.max(f64::MIN_POSITIVE);
        let var: Vec<u8> = (0..n).map(|k| ((flip(k).var / var_init).clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        write_pgm(&dir.join(format!("{stem}_mean.pgm")), self.cols, self.rows, &mean)?;
        write_pgm(&dir.join(format!("{stem}_var.pgm")), self.cols, self.rows, &var)?;
        let header = format!(
            "origin_x = {:.6}\norigin_y = {:.6}\nresolution = {:.6}\ncols = {}\nrows = {}\nvar_scale = {:.6e}\nrow_order = y_descending\n",
            self.origin.x, self.origin.y, self.resolution, self.cols, self.rows, var_init / 255.0
        );
        std::fs::write(dir.join(format!("{stem}_header.txt")), header)?;
        Ok(())
    }
}

/// Builds a map from images taken at trusted states.
pub fn init_map(
    extent: &Extent,
    images: &[GrayImage],
    states: &[ExtendedState],
    intr: &CameraIntrinsics,
    params: &MapParams,
) -> Result<BeliefGrid> {
    if images.is_empty() {
        return Err(Error::EmptyInit);
    }
    let mut grid = BeliefGrid::new(extent, params);
    grid.reinitialize(images, states, intr, &[])?;
    Ok(grid)
}

/// True iff every state's footprint is at least `min_fraction` observed.
pub fn coverage_ok(grid: &BeliefGrid, states: &[ExtendedState], intr: &CameraIntrinsics, min_fraction: f64) -> bool {
    if min_fraction <= 0.0 {
        return true;
    }
    states.iter().all(|s| grid.footprint_coverage(s, intr) >= min_fraction)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub p: GroundPoint,
    pub strength: f64,
}

/// Sparse map of corner landmarks on the ground plane.
#[derive(Debug, Clone, Default)]
pub struct FeatureMap {
    landmarks: Vec<Landmark>,
    merge_radius: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl FeatureMap {
    pub fn new(merge_radius: f64) -> Self {
        Self { landmarks: Vec::new(), merge_radius, buckets: HashMap::new() }
    }

    pub fn landmarks(&self) -> &[Landmark] {
        &self.landmarks
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    fn bucket(&self, p: GroundPoint) -> (i64, i64) {
        ((p.x / self.merge_radius).floor() as i64, (p.y / self.merge_radius).floor() as i64)
    }

    /// Adds a landmark, merging with any existing one closer than the merge
    /// radius (the stronger of the two survives).
    pub fn insert(&mut self, lm: Landmark) {
        let (bi, bj) = self.bucket(lm.p);
        let mut nearest: Option<(usize, f64)> = None;
        for di in -1..=1 {
            for dj in -1..=1 {
                if let Some(ids) = self.buckets.get(&(bi + di, bj + dj)) {
                    for &k in ids {
                        let d = self.landmarks[k].p.distance(&lm.p);
                        if d < self.merge_radius && nearest.is_none_or(|(_, bd)| d < bd) {
                            nearest = Some((k, d));
                        }
                    }
                }
            }
        }
        match nearest {
            Some((k, _)) => {
                if lm.strength > self.landmarks[k].strength {
                    let old = self.bucket(self.landmarks[k].p);
                    if let Some(ids) = self.buckets.get_mut(&old) {
                        ids.retain(|&x| x != k);
                    }
                    self.landmarks[k] = lm;
                    self.buckets.entry((bi, bj)).or_default().push(k);
                }
            }
            None => {
                self.buckets.entry((bi, bj)).or_default().push(self.landmarks.len());
                self.landmarks.push(lm);
            }
        }
    }

    /// Number of landmarks inside the image of `view` and within `max_range`.
    pub fn count_visible(&self, view: &GroundView, max_range: f64) -> usize {
        let c = view.center_xy();
        let r2 = max_range * max_range;
        self.landmarks
            .iter()
            .filter(|lm| {
                (lm.p.x - c.x).powi(2) + (lm.p.y - c.y).powi(2) <= r2
                    && view.pixel_of(lm.p).is_some_and(|(u, v)| view.intr.contains(u, v))
            })
            .count()
    }
}

/// Back-projects detected corners through `map_from_cam` into the landmark map.
pub fn update_feature_map(
    fm: &mut FeatureMap,
    corners: &[Corner],
    map_from_cam: &Homography,
    camera_xy: GroundPoint,
    max_range: f64,
) -> usize {
    let before = fm.len();
    for c in corners {
        let Some((x, y)) = map_from_cam.apply(c.u, c.v) else { continue };
        let p = GroundPoint::new(x, y);
        if p.distance(&camera_xy) <= max_range {
            fm.insert(Landmark { p, strength: c.strength });
        }
    }
    fm.len() - before
}
