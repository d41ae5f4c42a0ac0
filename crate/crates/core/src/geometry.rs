//! Camera model, rigid poses and the homography algebra linking the ground
//! plane, the camera frame and the image plane.
//!
//! Frames: the world has z up with the ground exactly at z = 0. The camera
//! frame is x right, y down, z along the optical axis. Pixel centres sit at
//! integer coordinates.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle to (−π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(Error::Config("principal point outside the image".into()));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Centred principal point, focal lengths from the field of view:
    /// `fx = (width / 2) / tan(fov_h / 2)`.
    pub fn from_fov(width: usize, height: usize, fov_h_deg: f64, fov_v_deg: f64) -> Result<Self> {
        let fx = (width as f64 / 2.0) / (fov_h_deg.to_radians() / 2.0).tan();
        let fy = (height as f64 / 2.0) / (fov_v_deg.to_radians() / 2.0).tan();
        Self::new(fx, fy, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height)
    }

    /// The Athena rover navigation camera: 640×480 with an 82°×66° field of view.
    pub fn athena() -> Self {
        Self::from_fov(640, 480, 82.0, 66.0).expect("valid default intrinsics")
    }

    pub fn fov_h_deg(&self) -> f64 {
        2.0 * (self.width as f64 / 2.0 / self.fx).atan().to_degrees()
    }

    pub fn fov_v_deg(&self) -> f64 {
        2.0 * (self.height as f64 / 2.0 / self.fy).atan().to_degrees()
    }

    /// Same field of view at a different resolution.
    pub fn scaled(&self, s: f64) -> Self {
        let width = ((self.width as f64 * s).round() as usize).max(2);
        let height = ((self.height as f64 * s).round() as usize).max(2);
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        }
    }

    pub fn k(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn k_inv(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    #[inline]
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundPoint {
    pub x: f64,
    pub y: f64,
}

impl GroundPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &GroundPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Planar body pose; heading is kept in (−π, π].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BodyPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl BodyPose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading: normalize_angle(heading) }
    }

    pub fn position(&self) -> GroundPoint {
        GroundPoint::new(self.x, self.y)
    }
}

/// Mast pan/tilt. Pan 0 looks along the body heading and is positive to the
/// left; tilt is measured downward from the horizontal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MastConfig {
    pub pan: f64,
    pub tilt: f64,
    pub mast_height: f64,
}

impl MastConfig {
    pub fn new(pan: f64, tilt: f64, mast_height: f64) -> Self {
        Self { pan, tilt, mast_height }
    }

    pub fn from_degrees(pan_deg: f64, tilt_deg: f64, mast_height: f64) -> Self {
        Self::new(pan_deg.to_radians(), tilt_deg.to_radians(), mast_height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtendedState {
    pub body: BodyPose,
    pub mast: MastConfig,
    pub time: f64,
}

impl ExtendedState {
    pub fn new(body: BodyPose, mast: MastConfig, time: f64) -> Self {
        Self { body, mast, time }
    }
}

/// Rigid transform taking world points into the camera frame:
/// `x_cam = rotation * x_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Optical centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Optical axis direction in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }
}

/// Camera-from-world pose of the mast camera. The optical centre sits on the
/// pan axis at `mast_height` above the body position.
pub fn camera_pose_of(state: &ExtendedState) -> RigidTransform {
    let yaw = state.body.heading + state.mast.pan;
    let (sy, cy) = yaw.sin_cos();
    let (st, ct) = state.mast.tilt.sin_cos();
    let z_axis = Vector3::new(cy * ct, sy * ct, -st);
    let x_axis = Vector3::new(sy, -cy, 0.0);
    let y_axis = z_axis.cross(&x_axis);
    // Rows of camera_from_world are the camera axes expressed in the world.
    let rotation = Matrix3::from_rows(&[x_axis.transpose(), y_axis.transpose(), z_axis.transpose()]);
    let center = Vector3::new(state.body.x, state.body.y, state.mast.mast_height);
    RigidTransform { rotation, translation: -(rotation * center) }
}

/// A 3×3 projective map, kept normalized: `h[2][2] = 1` when that entry's
/// magnitude exceeds 1e−9, otherwise unit Frobenius norm with a non-negative
/// trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

const H22_EPS: f64 = 1e-9;
const SINGULAR_EPS: f64 = 1e-12;

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Self {
        Homography(normalize(m))
    }

    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Self {
        Self::new(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn to_rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]]
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    pub fn is_singular(&self) -> bool {
        self.determinant().abs() < SINGULAR_EPS
    }

    /// Maps `(x, y)`; `None` when the point goes to infinity.
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.0;
        let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        if w.abs() < 1e-15 {
            return None;
        }
        Some(((m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / w, (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / w))
    }

    pub fn inverse(&self) -> Result<Homography> {
        let det = self.determinant();
        if det.abs() < SINGULAR_EPS {
            return Err(Error::Singular(det));
        }
        let inv = self.0.try_inverse().ok_or(Error::Singular(det))?;
        Ok(Homography::new(inv))
    }

    /// Matrix product `self · other`: if `other` maps c→b and `self` maps
    /// b→a, the result maps c→a.
    pub fn compose(&self, other: &Homography) -> Homography {
        Homography::new(self.0 * other.0)
    }

    /// Max-abs entry difference after normalization.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        (self.0 - other.0).abs().max()
    }
}

fn normalize(m: Matrix3<f64>) -> Matrix3<f64> {
    let h22 = m[(2, 2)];
    if h22.abs() > H22_EPS {
        return m / h22;
    }
    let n = m.norm();
    if n == 0.0 {
        return m;
    }
    let s = if m.trace() < 0.0 { -1.0 } else { 1.0 };
    m * (s / n)
}

/// Ground-plane geometry of one camera view: the homography from ground
/// coordinates to pixels and its inverse, plus the depth and ray tests that
/// the sign-free homography cannot express.
#[derive(Debug, Clone, Copy)]
pub struct GroundView {
    pub intr: CameraIntrinsics,
    pub pose: RigidTransform,
    ground_to_pixel: Homography,
    pixel_to_ground: Homography,
    // dz of the back-projected ray as a linear function of (u, v).
    ray_dz: [f64; 3],
    // Depth of a ground point as a linear function of (x, y).
    depth: [f64; 3],
}

impl GroundView {
    pub fn new(intr: &CameraIntrinsics, state: &ExtendedState) -> Result<Self> {
        Self::from_pose(intr, camera_pose_of(state))
    }

    pub fn from_pose(intr: &CameraIntrinsics, pose: RigidTransform) -> Result<Self> {
        let center = pose.center();
        if center.z.abs() < 1e-9 {
            return Err(Error::DegenerateView("camera centre lies on the ground plane"));
        }
        let r = &pose.rotation;
        let t = &pose.translation;
        let rt = Matrix3::from_columns(&[r.column(0).into_owned(), r.column(1).into_owned(), *t]);
        let raw = intr.k() * rt;
        let h = Homography::new(raw);
        if h.is_singular() {
            return Err(Error::DegenerateView("ground plane maps to a line"));
        }
        let h_inv = h.inverse().map_err(|_| Error::DegenerateView("ground plane maps to a line"))?;
        let dir = r.transpose() * intr.k_inv();
        Ok(Self {
            intr: *intr,
            pose,
            ground_to_pixel: h,
            pixel_to_ground: h_inv,
            ray_dz: [dir[(2, 0)], dir[(2, 1)], dir[(2, 2)]],
            depth: [r[(2, 0)], r[(2, 1)], t.z],
        })
    }

    pub fn homography(&self) -> &Homography {
        &self.ground_to_pixel
    }

    pub fn inverse_homography(&self) -> &Homography {
        &self.pixel_to_ground
    }

    /// Depth of the ground point along the optical axis.
    #[inline]
    pub fn depth_of(&self, x: f64, y: f64) -> f64 {
        self.depth[0] * x + self.depth[1] * y + self.depth[2]
    }

    /// Pixel of a ground point in front of the camera, regardless of image bounds.
    #[inline]
    pub fn pixel_of(&self, p: GroundPoint) -> Option<(f64, f64)> {
        if self.depth_of(p.x, p.y) <= 1e-9 {
            return None;
        }
        self.ground_to_pixel.apply(p.x, p.y)
    }

    /// Ground intersection of the pixel ray; `None` at or above the horizon.
    #[inline]
    pub fn ground_of(&self, u: f64, v: f64) -> Option<GroundPoint> {
        let dz = self.ray_dz[0] * u + self.ray_dz[1] * v + self.ray_dz[2];
        if dz >= -1e-9 {
            return None;
        }
        self.pixel_to_ground.apply(u, v).map(|(x, y)| GroundPoint::new(x, y))
    }

    pub fn center_xy(&self) -> GroundPoint {
        let c = self.pose.center();
        GroundPoint::new(c.x, c.y)
    }
}

/// Homography taking ground coordinates `[x, y, 1]` to pixels.
pub fn ground_homography(intr: &CameraIntrinsics, state: &ExtendedState) -> Result<Homography> {
    Ok(*GroundView::new(intr, state)?.homography())
}

pub fn invert_homography(h: &Homography) -> Result<Homography> {
    h.inverse()
}

pub fn compose(h_ab: &Homography, h_bc: &Homography) -> Homography {
    h_ab.compose(h_bc)
}

/// Intersection of the optical axis with the ground.
pub fn mast_target(state: &ExtendedState) -> Result<GroundPoint> {
    let tilt = state.mast.tilt;
    if tilt <= 0.0 || tilt >= PI {
        return Err(Error::NoIntersection);
    }
    let range = state.mast.mast_height / tilt.tan();
    let bearing = state.body.heading + state.mast.pan;
    Ok(GroundPoint::new(state.body.x + range * bearing.cos(), state.body.y + range * bearing.sin()))
}

/// Pan/tilt that puts the optical axis on `target`. Limits are not enforced.
pub fn mast_config_for_target(body: &BodyPose, target: GroundPoint, mast_height: f64) -> Result<MastConfig> {
    let dx = target.x - body.x;
    let dy = target.y - body.y;
    let range = dx.hypot(dy);
    if range < 1e-12 {
        return Err(Error::Unreachable);
    }
    let pan = normalize_angle(dy.atan2(dx) - body.heading);
    let tilt = mast_height.atan2(range);
    Ok(MastConfig::new(pan, tilt, mast_height))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;

    fn state(x: f64, y: f64, heading: f64, pan_deg: f64, tilt_deg: f64) -> ExtendedState {
        ExtendedState::new(BodyPose::new(x, y, heading), MastConfig::from_degrees(pan_deg, tilt_deg, 1.4), 0.0)
    }

    #[test]
    fn heading_is_normalized() {
        assert!((BodyPose::new(0.0, 0.0, 3.0 * PI).heading - PI).abs() < 1e-12);
        assert!((BodyPose::new(0.0, 0.0, -PI).heading - PI).abs() < 1e-12);
        assert!((normalize_angle(-0.5) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn athena_intrinsics() {
        let k = CameraIntrinsics::athena();
        assert!((k.fx - 320.0 / 41f64.to_radians().tan()).abs() < 1e-9);
        assert!((k.fov_h_deg() - 82.0).abs() < 1e-9);
        assert!((k.fov_v_deg() - 66.0).abs() < 1e-9);
        assert!(CameraIntrinsics::new(-1.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
    }

    #[test]
    fn camera_pose_forward_and_panned() {
        let p = camera_pose_of(&state(0.0, 0.0, 0.0, 0.0, 30.0));
        let c = p.center();
        assert!((c - Vector3::new(0.0, 0.0, 1.4)).norm() < 1e-12);
        let a = p.optical_axis();
        let t = 30f64.to_radians();
        assert!((a - Vector3::new(t.cos(), 0.0, -t.sin())).norm() < 1e-12);

        let a = camera_pose_of(&state(0.0, 0.0, 0.0, 90.0, 30.0)).optical_axis();
        assert!((a - Vector3::new(0.0, t.cos(), -t.sin())).norm() < 1e-12);
    }

    // Oracle: explicit 4×4 composition world←body←mast-top←pan←tilt←optical.
    fn pose_by_matrix_product(s: &ExtendedState) -> Matrix4<f64> {
        let rz = |a: f64| {
            let (sa, ca) = a.sin_cos();
            Matrix4::new(ca, -sa, 0.0, 0.0, sa, ca, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0)
        };
        let ry = |a: f64| {
            let (sa, ca) = a.sin_cos();
            Matrix4::new(ca, 0.0, sa, 0.0, 0.0, 1.0, 0.0, 0.0, -sa, 0.0, ca, 0.0, 0.0, 0.0, 0.0, 1.0)
        };
        let trans = |x: f64, y: f64, z: f64| {
            let mut m = Matrix4::identity();
            m[(0, 3)] = x;
            m[(1, 3)] = y;
            m[(2, 3)] = z;
            m
        };
        // Optical frame (x right, y down, z forward) inside a x-forward, z-up frame.
        let optical = Matrix4::new(
            0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0,
        );
        let world_from_cam = trans(s.body.x, s.body.y, 0.0)
            * rz(s.body.heading)
            * trans(0.0, 0.0, s.mast.mast_height)
            * rz(s.mast.pan)
            * ry(s.mast.tilt)
            * optical;
        world_from_cam.try_inverse().unwrap()
    }

    #[test]
    fn camera_pose_matches_elementary_composition() {
        for (x, y, h, pan, tilt) in [(1.0, -2.0, 0.3, 20.0, 35.0), (-4.0, 5.5, -2.9, -75.0, 44.0), (0.0, 0.0, 3.1, 90.0, 30.0)] {
            let s = state(x, y, h, pan, tilt);
            let p = camera_pose_of(&s);
            let m = pose_by_matrix_product(&s);
            for r in 0..3 {
                for c in 0..3 {
                    assert!((p.rotation[(r, c)] - m[(r, c)]).abs() < 1e-12);
                }
                assert!((p.translation[r] - m[(r, 3)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nadir_and_focal_line_hit_principal_point() {
        let k = CameraIntrinsics::athena();
        let h = ground_homography(&k, &state(0.0, 0.0, 0.0, 0.0, 90.0)).unwrap();
        let (u, v) = h.apply(0.0, 0.0).unwrap();
        assert!((u - k.cx).abs() < 1e-9 && (v - k.cy).abs() < 1e-9);
        for tilt in [10.0, 30.0, 45.0, 80.0] {
            let s = state(2.0, 1.0, 0.7, 15.0, tilt);
            let t = mast_target(&s).unwrap();
            let (u, v) = ground_homography(&k, &s).unwrap().apply(t.x, t.y).unwrap();
            assert!((u - k.cx).abs() < 1e-8 && (v - k.cy).abs() < 1e-8, "tilt {tilt}");
        }
    }

    #[test]
    fn degenerate_view_on_ground() {
        let k = CameraIntrinsics::athena();
        let mut s = state(0.0, 0.0, 0.0, 0.0, 30.0);
        s.mast.mast_height = 0.0;
        assert!(matches!(ground_homography(&k, &s), Err(Error::DegenerateView(_))));
    }

    #[test]
    fn homography_inverse_and_normalization() {
        assert_eq!(Homography::identity().inverse().unwrap(), Homography::identity());
        let s = Homography::from_rows([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]);
        let inv = s.inverse().unwrap();
        assert!(inv.max_abs_diff(&Homography::from_rows([[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 1.0]])) < 1e-15);
        let z = Homography::from_rows([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(z.inverse(), Err(Error::Singular(_))));
        // Small h22 falls back to Frobenius normalization.
        let f = Homography::from_rows([[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!((f.matrix().norm() - 1.0).abs() < 1e-12);
        assert!(f.matrix().trace() >= 0.0);
    }

    #[test]
    fn mast_target_cases() {
        let t = mast_target(&state(0.0, 0.0, 0.0, 0.0, 45.0)).unwrap();
        assert!((t.x - 1.4).abs() < 1e-12 && t.y.abs() < 1e-12);
        let t = mast_target(&state(0.0, 0.0, 0.0, 0.0, 30.0)).unwrap();
        assert!((t.x - 2.424871130596428).abs() < 1e-9);
        let t = mast_target(&state(0.0, 0.0, 0.4, 90.0, 30.0)).unwrap();
        let bearing = t.y.atan2(t.x);
        assert!((bearing - (0.4 + PI / 2.0)).abs() < 1e-12);
        assert_eq!(mast_target(&state(0.0, 0.0, 0.0, 0.0, 0.0)), Err(Error::NoIntersection));
        assert_eq!(mast_target(&state(0.0, 0.0, 0.0, 0.0, -5.0)), Err(Error::NoIntersection));
    }

    #[test]
    fn mast_config_inverse_cases() {
        let b = BodyPose::new(0.0, 0.0, 0.0);
        let m = mast_config_for_target(&b, GroundPoint::new(1.4, 0.0), 1.4).unwrap();
        assert!(m.pan.abs() < 1e-12 && (m.tilt - PI / 4.0).abs() < 1e-12);
        let m = mast_config_for_target(&b, GroundPoint::new(-2.0, 0.0), 1.4).unwrap();
        assert!((m.pan - PI).abs() < 1e-12);
        assert_eq!(mast_config_for_target(&b, GroundPoint::new(0.0, 0.0), 1.4), Err(Error::Unreachable));
    }

    #[test]
    fn ground_view_depth_is_positive_for_visible_points() {
        let k = CameraIntrinsics::athena();
        let s = state(6.0, -3.0, 2.5, -30.0, 35.0);
        let gv = GroundView::new(&k, &s).unwrap();
        for (u, v) in [(10.0, 470.0), (320.0, 200.0), (630.0, 300.0)] {
            let g = gv.ground_of(u, v).unwrap();
            assert!(gv.depth_of(g.x, g.y) > 0.0);
            let (u2, v2) = gv.pixel_of(g).unwrap();
            assert!((u - u2).abs() < 1e-7 && (v - v2).abs() < 1e-7);
        }
        // Above the horizon.
        let shallow = GroundView::new(&k, &state(0.0, 0.0, 0.0, 0.0, 10.0)).unwrap();
        assert!(shallow.ground_of(320.0, 0.0).is_none());
        // Behind the camera.
        assert!(gv.pixel_of(GroundPoint::new(6.0 - 5.0 * 2.5f64.cos(), -3.0 - 5.0 * 2.5f64.sin())).is_none());
    }
}
