//! Corner detection, patch matching, homography estimation and
//! ground-plane visual odometry.

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::BeliefGrid;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, ExtendedState, GroundPoint, GroundView, Homography};
use crate::image::GrayImage;
use crate::prediction::render_synthetic;
use crate::seed;

/// Upper bound of the Harris response for intensities in [0, 1] with
/// Sobel/8 gradients and a unit-sum window.
const MAX_RESPONSE: f64 = 0.0625;
const PATCH: usize = 9;
const HALF: usize = PATCH / 2;
pub const DESCRIPTOR_LEN: usize = PATCH * PATCH;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub u: f64,
    pub v: f64,
    pub strength: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub score: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorParams {
    pub k: f64,
    /// Response threshold as a fraction of the maximum possible response.
    pub rel_threshold: f64,
    pub nms_radius: usize,
    pub max_corners: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self { k: 0.04, rel_threshold: 1e-4, nms_radius: 2, max_corners: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacParams {
    /// Maximum number of hypotheses.
    pub iters: usize,
    pub inlier_px: f64,
    pub min_inliers: usize,
    /// Early termination once this confidence of an outlier-free sample is reached.
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { iters: 500, inlier_px: 1.5, min_inliers: 12, confidence: 0.999, seed: 0 }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 || !(self.inlier_px > 0.0) || self.min_inliers < 4 {
            return Err(Error::Config("ransac needs iters ≥ 1, inlier_px > 0, min_inliers ≥ 4".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionParams {
    pub detector: DetectorParams,
    pub ratio: f32,
    pub ransac: RansacParams,
    /// Sample spacing in metres of ground-rectified descriptors; 0 selects
    /// plain image patches.
    pub ground_patch_m: f64,
}

impl Default for VisionParams {
    fn default() -> Self {
        Self { detector: DetectorParams::default(), ratio: 0.8, ransac: RansacParams::default(), ground_patch_m: 0.01 }
    }
}

/// Harris corners sorted by strength, strongest first.
pub fn detect_features(img: &GrayImage, params: &DetectorParams) -> Vec<Corner> {
    let (w, h) = (img.width(), img.height());
    if w < PATCH || h < PATCH {
        return Vec::new();
    }
    let d = img.data();
    let patch_ok = patch_validity(img);

    // Gradient products where the full 3×3 support is valid.
    let support = img.mask().map(|m| {
        let mut rows = vec![false; w * h];
        for y in 0..h {
            for x in 1..w - 1 {
                let i = y * w + x;
                rows[i] = m[i - 1] && m[i] && m[i + 1];
            }
        }
        let mut ok = vec![false; w * h];
        for i in w..w * (h - 1) {
            ok[i] = rows[i - w] && rows[i] && rows[i + w];
        }
        ok
    });
    let mut ixx = vec![0f32; w * h];
    let mut ixy = vec![0f32; w * h];
    let mut iyy = vec![0f32; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            if support.as_ref().is_some_and(|ok| !ok[i]) {
                continue;
            }
            let gx = ((d[i - w + 1] + 2.0 * d[i + 1] + d[i + w + 1]) - (d[i - w - 1] + 2.0 * d[i - 1] + d[i + w - 1])) / 8.0;
            let gy = ((d[i + w - 1] + 2.0 * d[i + w] + d[i + w + 1]) - (d[i - w - 1] + 2.0 * d[i - w] + d[i - w + 1])) / 8.0;
            ixx[i] = gx * gx;
            ixy[i] = gx * gy;
            iyy[i] = gy * gy;
        }
    }

    // Structure tensor under a separable 3×3 binomial window, then the
    // response. A valid 9×9 patch implies valid gradients across the window.
    let smooth_rows = |src: &[f32]| {
        let mut out = vec![0f32; w * h];
        for y in 0..h {
            for x in 1..w - 1 {
                let i = y * w + x;
                out[i] = 0.25 * src[i - 1] + 0.5 * src[i] + 0.25 * src[i + 1];
            }
        }
        out
    };
    let (sxx, sxy, syy) = (smooth_rows(&ixx), smooth_rows(&ixy), smooth_rows(&iyy));
    let col = |src: &[f32], i: usize| (0.25 * src[i - w] + 0.5 * src[i] + 0.25 * src[i + w]) as f64;
    let mut resp = vec![0f64; w * h];
    for y in 2..h - 2 {
        for x in 2..w - 2 {
            let i = y * w + x;
            if !patch_ok[i] {
                continue;
            }
            let (a, b, c) = (col(&sxx, i), col(&sxy, i), col(&syy, i));
            resp[i] = a * c - b * b - params.k * (a + c) * (a + c);
        }
    }

    let thresh = params.rel_threshold * MAX_RESPONSE;
    let r = params.nms_radius;
    let mut corners = Vec::new();
    for y in HALF..h - HALF {
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
        'px: for x in HALF..w - HALF {
            let i = y * w + x;
            let ri = resp[i];
            if ri <= thresh || !patch_ok[i] {
                continue;
            }
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            for yy in y0..=y1 {
                let row = &resp[yy * w..yy * w + w];
                for (xx, &rj) in row.iter().enumerate().take(x1 + 1).skip(x0) {
                    // Plateaus keep only their first pixel in raster order.
                    if rj > ri || (rj == ri && yy * w + xx < i) {
                        continue 'px;
                    }
                }
            }
            let off = |lo: f64, mid: f64, hi: f64| {
                let den = lo - 2.0 * mid + hi;
                if den < 0.0 {
                    (0.5 * (lo - hi) / den).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            };
            let du = off(resp[i - 1], ri, resp[i + 1]);
            let dv = off(resp[i - w], ri, resp[i + w]);
            corners.push((i, Corner { u: x as f64 + du, v: y as f64 + dv, strength: ri }));
        }
    }
    corners.sort_by(|a, b| b.1.strength.total_cmp(&a.1.strength).then(a.0.cmp(&b.0)));
    corners.truncate(params.max_corners);
    corners.into_iter().map(|(_, c)| c).collect()
}

/// True where the 9×9 patch centred on the pixel lies inside the image and is
/// fully valid.
fn patch_validity(img: &GrayImage) -> Vec<bool> {
    let (w, h) = (img.width(), img.height());
    // Integral image of invalid counts.
    let mut integral = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += u32::from(!img.is_valid(x, y));
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let mut ok = vec![false; w * h];
    for y in HALF..h.saturating_sub(HALF) {
        for x in HALF..w.saturating_sub(HALF) {
            let (x0, y0, x1, y1) = (x - HALF, y - HALF, x + HALF + 1, y + HALF + 1);
            let bad = integral[y1 * (w + 1) + x1] + integral[y0 * (w + 1) + x0]
                - integral[y0 * (w + 1) + x1]
                - integral[y1 * (w + 1) + x0];
            ok[y * w + x] = bad == 0;
        }
    }
    ok
}

/// Corners with their patch descriptors; descriptor rows are zero-mean and
/// unit-norm, or `None` for flat patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub corners: Vec<Corner>,
    descriptors: Vec<Option<[f32; DESCRIPTOR_LEN]>>,
}

impl Features {
    pub fn extract(img: &GrayImage, params: &DetectorParams) -> Self {
        let corners = detect_features(img, params);
        Self::describe(img, corners)
    }

    pub fn describe(img: &GrayImage, corners: Vec<Corner>) -> Self {
        let descriptors = corners.iter().map(|c| patch_descriptor(img, c)).collect();
        Self { corners, descriptors }
    }

    /// Detects corners and describes them as configured: plain image patches,
    /// or patches resampled on a world-aligned ground grid around each
    /// corner's ground point. Ground patches depend only on the camera
    /// orientation and height in `view`, not on its position.
    pub fn extract_for(img: &GrayImage, params: &VisionParams, view: &GroundView) -> Self {
        let corners = detect_features(img, &params.detector);
        if params.ground_patch_m <= 0.0 {
            return Self::describe(img, corners);
        }
        let descriptors = corners.iter().map(|c| ground_descriptor(img, c, view, params.ground_patch_m)).collect();
        Self { corners, descriptors }
    }

    pub fn len(&self) -> usize {
        self.corners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corners.is_empty()
    }
}

fn patch_descriptor(img: &GrayImage, c: &Corner) -> Option<[f32; DESCRIPTOR_LEN]> {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let (cx, cy) = (c.u.round() as isize, c.v.round() as isize);
    let half = HALF as isize;
    if cx < half || cy < half || cx + half >= w || cy + half >= h {
        return None;
    }
    let mut p = [0f32; DESCRIPTOR_LEN];
    for dy in 0..PATCH {
        for dx in 0..PATCH {
            let (x, y) = ((cx - half) as usize + dx, (cy - half) as usize + dy);
            if !img.is_valid(x, y) {
                return None;
            }
            p[dy * PATCH + dx] = img.get(x, y);
        }
    }
    normalize_patch(p)
}

fn ground_descriptor(img: &GrayImage, c: &Corner, view: &GroundView, spacing: f64) -> Option<[f32; DESCRIPTOR_LEN]> {
    let g = view.ground_of(c.u, c.v)?;
    let mut p = [0f32; DESCRIPTOR_LEN];
    let half = HALF as f64;
    for dy in 0..PATCH {
        for dx in 0..PATCH {
            // Rows run towards -y so that patches read like a top view.
            let q = GroundPoint::new(g.x + (dx as f64 - half) * spacing, g.y - (dy as f64 - half) * spacing);
            let (u, v) = view.pixel_of(q)?;
            p[dy * PATCH + dx] = img.sample_bilinear(u, v)?;
        }
    }
    normalize_patch(p)
}

fn normalize_patch(mut p: [f32; DESCRIPTOR_LEN]) -> Option<[f32; DESCRIPTOR_LEN]> {
    let mean = p.iter().sum::<f32>() / DESCRIPTOR_LEN as f32;
    p.iter_mut().for_each(|v| *v -= mean);
    let norm = p.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm < 1e-6 {
        return None;
    }
    p.iter_mut().for_each(|v| *v /= norm);
    Some(p)
}

/// Mutual nearest neighbours under `1 − correlation`, filtered by the ratio test.
pub fn match_features(a: &Features, b: &Features, ratio: f32) -> Vec<Match> {
    let (na, nb) = (a.len(), b.len());
    if na == 0 || nb == 0 {
        return Vec::new();
    }
    let mut dist = vec![f32::INFINITY; na * nb];
    for (i, da) in a.descriptors.iter().enumerate() {
        let Some(da) = da else { continue };
        for (j, db) in b.descriptors.iter().enumerate() {
            let Some(db) = db else { continue };
            let dot: f32 = da.iter().zip(db.iter()).map(|(x, y)| x * y).sum();
            dist[i * nb + j] = (1.0 - dot).max(0.0);
        }
    }
    let mut col_best = vec![(f32::INFINITY, usize::MAX); nb];
    for i in 0..na {
        for j in 0..nb {
            let d = dist[i * nb + j];
            if d < col_best[j].0 {
                col_best[j] = (d, i);
            }
        }
    }
    let mut out = Vec::new();
    for i in 0..na {
        let row = &dist[i * nb..(i + 1) * nb];
        let (mut best, mut second, mut arg) = (f32::INFINITY, f32::INFINITY, usize::MAX);
        for (j, &d) in row.iter().enumerate() {
            if d < best {
                second = best;
                best = d;
                arg = j;
            } else if d < second {
                second = d;
            }
        }
        if !best.is_finite() || col_best[arg].1 != i {
            continue;
        }
        if best < ratio * second || (best == 0.0 && second > 0.0) {
            out.push(Match { a: i, b: arg, score: best });
        }
    }
    out
}

pub fn describe_and_match(
    img_a: &GrayImage,
    corners_a: &[Corner],
    img_b: &GrayImage,
    corners_b: &[Corner],
    ratio: f32,
) -> Vec<Match> {
    let fa = Features::describe(img_a, corners_a.to_vec());
    let fb = Features::describe(img_b, corners_b.to_vec());
    match_features(&fa, &fb, ratio)
}

/// A source/destination point correspondence.
pub type PointPair = ((f64, f64), (f64, f64));

fn normalizer(pts: impl Iterator<Item = (f64, f64)> + Clone) -> Matrix3<f64> {
    let n = pts.clone().count() as f64;
    let (sx, sy) = pts.clone().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let mean_dist = pts.map(|(x, y)| (x - mx).hypot(y - my)).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

/// Normalized DLT: least-squares homography taking sources to destinations.
pub fn dlt_homography(pairs: &[PointPair]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(Error::TooFewMatches { needed: 4, got: pairs.len() });
    }
    let ta = normalizer(pairs.iter().map(|p| p.0));
    let tb = normalizer(pairs.iter().map(|p| p.1));
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, &((x, y), (xp, yp))) in pairs.iter().enumerate() {
        let p = ta * Vector3::new(x, y, 1.0);
        let q = tb * Vector3::new(xp, yp, 1.0);
        let (x, y) = (p.x / p.z, p.y / p.z);
        let (u, v) = (q.x / q.z, q.y / q.z);
        let r0 = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u];
        let r1 = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, -v];
        for c in 0..9 {
            a[(2 * k, c)] = r0[c];
            a[(2 * k + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.as_ref().ok_or(Error::Degenerate)?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let (largest, second_smallest) = (sv[order[0]], sv[order[7]]);
    if largest <= 0.0 || second_smallest / largest < 1e-10 {
        return Err(Error::Degenerate);
    }
    let hvec = vt.row(order[8]);
    let hn = Matrix3::from_fn(|r, c| hvec[3 * r + c]);
    let tb_inv = tb.try_inverse().ok_or(Error::Degenerate)?;
    let h = Homography::new(tb_inv * hn * ta);
    if h.is_singular() {
        return Err(Error::Degenerate);
    }
    Ok(h)
}

/// Exact homography through four correspondences with h22 fixed to 1.
fn minimal_homography(pairs: [&PointPair; 4]) -> Option<Homography> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (k, &&((x, y), (u, v))) in pairs.iter().enumerate() {
        let r0 = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y];
        let r1 = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y];
        for c in 0..8 {
            a[(2 * k, c)] = r0[c];
            a[(2 * k + 1, c)] = r1[c];
        }
        b[2 * k] = u;
        b[2 * k + 1] = v;
    }
    let sol = a.lu().solve(&b)?;
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    let h = Homography::new(Matrix3::new(sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0));
    (!h.is_singular()).then_some(h)
}

/// `sqrt(d(Hp, q)² + d(H⁻¹q, p)²)`, infinite when either side maps to infinity.
pub fn symmetric_transfer_error(h: &Homography, h_inv: &Homography, pair: &PointPair) -> f64 {
    let ((x, y), (u, v)) = *pair;
    match (h.apply(x, y), h_inv.apply(u, v)) {
        (Some((pu, pv)), Some((px, py))) => {
            let d1 = (pu - u).powi(2) + (pv - v).powi(2);
            let d2 = (px - x).powi(2) + (py - y).powi(2);
            (d1 + d2).sqrt()
        }
        _ => f64::INFINITY,
    }
}

fn inliers_of(h: &Homography, pairs: &[PointPair], thresh: f64) -> Vec<usize> {
    let Ok(h_inv) = h.inverse() else { return Vec::new() };
    (0..pairs.len()).filter(|&i| symmetric_transfer_error(h, &h_inv, &pairs[i]) < thresh).collect()
}

/// RANSAC over minimal four-point models, then a DLT refit on the consensus set.
pub fn ransac_homography(pairs: &[PointPair], params: &RansacParams) -> Result<(Homography, Vec<usize>)> {
    params.validate()?;
    let n = pairs.len();
    if n < 4 {
        return Err(Error::TooFewMatches { needed: 4, got: n });
    }
    let mut rng = seed::rng(params.seed);
    let mut best: Vec<usize> = Vec::new();
    let mut needed = params.iters;
    let mut it = 0;
    while it < needed.min(params.iters) {
        it += 1;
        let mut idx = [0usize; 4];
        let mut k = 0;
        while k < 4 {
            let c = rng.random_range(0..n);
            if !idx[..k].contains(&c) {
                idx[k] = c;
                k += 1;
            }
        }
        let Some(h) = minimal_homography([&pairs[idx[0]], &pairs[idx[1]], &pairs[idx[2]], &pairs[idx[3]]]) else {
            continue;
        };
        let inl = inliers_of(&h, pairs, params.inlier_px);
        if inl.len() > best.len() {
            best = inl;
            let w = best.len() as f64 / n as f64;
            let p_good = w.powi(4);
            needed = if p_good >= 1.0 {
                it
            } else {
                ((1.0 - params.confidence).ln() / (1.0 - p_good).ln()).ceil().max(1.0) as usize
            };
        }
    }
    if best.len() < params.min_inliers.max(4) {
        return Err(Error::NoConsensus { inliers: best.len(), needed: params.min_inliers });
    }
    // Refit on the consensus set, then once more on the refit's own inliers.
    let mut model = refit(pairs, &best)?;
    let refined = inliers_of(&model, pairs, params.inlier_px);
    if refined.len() >= best.len() && refined != best {
        if let Ok(m) = refit(pairs, &refined) {
            model = m;
            best = refined;
        }
    }
    if best.len() < params.min_inliers {
        return Err(Error::NoConsensus { inliers: best.len(), needed: params.min_inliers });
    }
    Ok((model, best))
}

fn refit(pairs: &[PointPair], idx: &[usize]) -> Result<Homography> {
    let sel: Vec<PointPair> = idx.iter().map(|&i| pairs[i]).collect();
    dlt_homography(&sel)
}

/// Outcome of visual odometry between two images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoResult {
    /// Planar distance between the two estimated camera positions.
    pub displacement: f64,
    /// Estimated planar translation from camera i to camera j, world frame.
    pub translation: (f64, f64),
    /// Pixel homography from image i to image j.
    pub h: Homography,
    pub inliers: usize,
    pub omega: usize,
    pub ok: bool,
}

impl VoResult {
    pub fn failed(inliers: usize) -> Self {
        Self { displacement: 0.0, translation: (0.0, 0.0), h: Homography::identity(), inliers, omega: inliers, ok: false }
    }
}

/// Pixel correspondences from matched features.
pub fn match_pairs(a: &Features, b: &Features, matches: &[Match]) -> Vec<PointPair> {
    matches
        .iter()
        .map(|m| {
            let (ca, cb) = (&a.corners[m.a], &b.corners[m.b]);
            ((ca.u, ca.v), (cb.u, cb.v))
        })
        .collect()
}

/// Camera position from a ground-to-pixel homography, using the known
/// ground plane to fix scale and sign.
pub fn camera_from_ground_homography(intr: &CameraIntrinsics, g: &Homography, probe: GroundPoint) -> Option<Vector3<f64>> {
    let m = intr.k_inv() * g.matrix();
    let (c0, c1, c2) = (m.column(0).into_owned(), m.column(1).into_owned(), m.column(2).into_owned());
    let mut lambda = 0.5 * (c0.norm() + c1.norm());
    if !(lambda > 1e-12) {
        return None;
    }
    // Visible ground points have positive depth.
    if (m * Vector3::new(probe.x, probe.y, 1.0)).z < 0.0 {
        lambda = -lambda;
    }
    let r1 = c0 / lambda;
    let r2 = c1 / lambda;
    let t = c2 / lambda;
    let raw = Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]);
    let svd = raw.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    Some(-(r.transpose() * t))
}

/// Visual odometry on precomputed features; `state_i` is the trusted pose of
/// the first image.
pub fn visual_odometry_features(
    fi: &Features,
    fj: &Features,
    intr: &CameraIntrinsics,
    state_i: &ExtendedState,
    params: &VisionParams,
) -> VoResult {
    let matches = match_features(fi, fj, params.ratio);
    let pairs = match_pairs(fi, fj, &matches);
    if pairs.len() < params.ransac.min_inliers.max(4) {
        return VoResult::failed(0);
    }
    let (h_ji, inliers) = match ransac_homography(&pairs, &params.ransac) {
        Ok(r) => r,
        Err(Error::NoConsensus { inliers, .. }) => return VoResult::failed(inliers),
        Err(_) => return VoResult::failed(0),
    };
    let Ok(view_i) = GroundView::new(intr, state_i) else { return VoResult::failed(inliers.len()) };
    let g_j = h_ji.compose(view_i.homography());
    // Probe with the ground point under the inlier centroid of image i.
    let (su, sv) = inliers.iter().fold((0.0, 0.0), |(a, b), &k| (a + pairs[k].0 .0, b + pairs[k].0 .1));
    let nn = inliers.len() as f64;
    let Some(probe) = view_i.ground_of(su / nn, sv / nn) else { return VoResult::failed(inliers.len()) };
    let Some(cj) = camera_from_ground_homography(intr, &g_j, probe) else { return VoResult::failed(inliers.len()) };
    let ci = view_i.center_xy();
    let translation = (cj.x - ci.x, cj.y - ci.y);
    VoResult {
        displacement: translation.0.hypot(translation.1),
        translation,
        h: h_ji,
        inliers: inliers.len(),
        omega: inliers.len(),
        ok: true,
    }
}

pub fn visual_odometry(
    img_i: &GrayImage,
    img_j: &GrayImage,
    intr: &CameraIntrinsics,
    assumed_state_i: &ExtendedState,
    params: &VisionParams,
) -> VoResult {
    // The second image is described as if taken with the same mast pose.
    let (fi, fj) = match GroundView::new(intr, assumed_state_i) {
        Ok(view) => (Features::extract_for(img_i, params, &view), Features::extract_for(img_j, params, &view)),
        Err(_) => (Features::extract(img_i, &params.detector), Features::extract(img_j, &params.detector)),
    };
    visual_odometry_features(&fi, &fj, intr, assumed_state_i, params)
}

/// Pixel homography from `a` to `b` by matching and RANSAC.
pub fn relative_homography(a: &Features, b: &Features, params: &VisionParams) -> Result<(Homography, usize)> {
    let matches = match_features(a, b, params.ratio);
    let pairs = match_pairs(a, b, &matches);
    let (h, inliers) = ransac_homography(&pairs, &params.ransac)?;
    Ok((h, inliers.len()))
}

/// Pixel-to-ground homography of a new image, found by feature alignment
/// against the last registered image and, failing that, against a belief
/// rendering at the predicted state. Results whose image centre lands more
/// than `max_offset` from the prediction are rejected.
pub fn align_to_map(
    features: &Features,
    grid: &BeliefGrid,
    predicted: &ExtendedState,
    intr: &CameraIntrinsics,
    params: &VisionParams,
    max_offset: f64,
) -> Result<Homography> {
    let view = GroundView::new(intr, predicted)?;
    let probe_px = (intr.cx, (intr.height - 1) as f64 * 0.75);
    let expected = view.ground_of(probe_px.0, probe_px.1).ok_or(Error::DegenerateView("probe above horizon"))?;
    let plausible = |m: &Homography| {
        m.apply(probe_px.0, probe_px.1)
            .is_some_and(|(x, y)| GroundPoint::new(x, y).distance(&expected) <= max_offset)
    };
    let mut reasons = Vec::new();
    if let Some(last) = &grid.last {
        let last_features = match &last.features {
            Some(f) => f.clone(),
            None => GroundView::new(intr, &last.state)
                .map(|v| Features::extract_for(&last.image, params, &v))
                .unwrap_or_else(|_| Features::extract(&last.image, &params.detector)),
        };
        match relative_homography(&last_features, features, params).and_then(|(h, _)| h.inverse()) {
            Ok(h_inv) => {
                let m = last.map_from_cam.compose(&h_inv);
                if plausible(&m) {
                    return Ok(m);
                }
                reasons.push("chain result implausible".to_string());
            }
            Err(e) => reasons.push(format!("chain: {e}")),
        }
    }
    let synth = render_synthetic(grid, predicted, intr)?;
    let reference = Features::extract_for(&synth.img, params, &view);
    match relative_homography(&reference, features, params).and_then(|(h, _)| h.inverse()) {
        Ok(h_inv) => {
            let m = view.inverse_homography().compose(&h_inv);
            if plausible(&m) {
                return Ok(m);
            }
            reasons.push("rendered result implausible".to_string());
        }
        Err(e) => reasons.push(format!("rendered: {e}")),
    }
    Err(Error::AlignmentFailed(reasons.join("; ")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_image() -> GrayImage {
        GrayImage::from_fn(64, 64, |x, y| if (20..40).contains(&x) && (20..40).contains(&y) { 1.0 } else { 0.0 })
    }

    #[test]
    fn constant_image_has_no_corners() {
        let img = GrayImage::from_fn(50, 40, |_, _| 0.4);
        assert!(detect_features(&img, &DetectorParams::default()).is_empty());
    }

    #[test]
    fn square_has_four_corners_at_vertices() {
        let img = square_image();
        let c = detect_features(&img, &DetectorParams::default());
        assert_eq!(c.len(), 4, "{c:?}");
        // The step sits between pixels 19/20 and 39/40.
        for (vx, vy) in [(19.5, 19.5), (39.5, 19.5), (19.5, 39.5), (39.5, 39.5)] {
            assert!(c.iter().any(|k| (k.u - vx).abs() <= 1.0 && (k.v - vy).abs() <= 1.0), "missing {vx},{vy}: {c:?}");
        }
    }

    #[test]
    fn masked_pixels_suppress_corners() {
        let mut img = square_image();
        let mask: Vec<bool> = (0..64 * 64).map(|i| i % 64 < 30).collect();
        img.set_mask(Some(mask));
        let c = detect_features(&img, &DetectorParams::default());
        assert!(c.iter().all(|k| k.u + 4.0 < 30.0), "{c:?}");
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn identical_features_match_themselves() {
        let img = GrayImage::from_fn(80, 80, |x, y| (((x / 7) * 31 + (y / 5) * 17) % 11) as f32 / 10.0);
        let f = Features::extract(&img, &DetectorParams::default());
        assert!(f.len() > 10);
        let m = match_features(&f, &f, 0.8);
        assert!(!m.is_empty());
        for k in &m {
            assert_eq!(k.a, k.b);
            assert_eq!(k.score, 0.0);
        }
    }

    #[test]
    fn dlt_collinear_is_degenerate() {
        let pairs: Vec<PointPair> = (0..6).map(|i| ((i as f64, 2.0 * i as f64), (i as f64 + 1.0, 2.0 * i as f64))).collect();
        assert_eq!(dlt_homography(&pairs), Err(Error::Degenerate));
    }

    #[test]
    fn dlt_identity() {
        let pairs: Vec<PointPair> = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (10.0, 10.0), (3.0, 7.0)]
            .into_iter()
            .map(|p| (p, p))
            .collect();
        let h = dlt_homography(&pairs).unwrap();
        assert!(h.max_abs_diff(&Homography::identity()) < 1e-12);
    }

    #[test]
    fn ransac_rejects_too_few() {
        let pairs: Vec<PointPair> = vec![((0.0, 0.0), (0.0, 0.0)); 3];
        assert_eq!(
            ransac_homography(&pairs, &RansacParams::default()).unwrap_err(),
            Error::TooFewMatches { needed: 4, got: 3 }
        );
    }
}
