use nalgebra::Matrix3;
use proptest::prelude::*;
use vosap_core::belief::{Alignment, BeliefGrid, MapParams};
use vosap_core::geometry::GroundView;
use vosap_core::vision::{
    align_to_map, describe_and_match, detect_features, dlt_homography, ransac_homography, visual_odometry, DetectorParams, Features,
    PointPair, RansacParams, VisionParams,
};
use vosap_core::world::{capture_image, Scenario, SensorNoise, TerrainParams, TerrainWorld};
use vosap_core::{seed, BodyPose, CameraIntrinsics, Error, ExtendedState, GrayImage, Homography, MastConfig};

fn world(scenario: Scenario) -> TerrainWorld {
    TerrainWorld::generate(11, scenario, &TerrainParams { width_m: 12.0, height_m: 12.0, ..TerrainParams::default() })
}

fn at(x: f64, y: f64, heading: f64, pan_deg: f64, tilt_deg: f64) -> ExtendedState {
    ExtendedState::new(BodyPose::new(x, y, heading), MastConfig::from_degrees(pan_deg, tilt_deg, 1.4), 0.0)
}

fn shot(w: &TerrainWorld, st: &ExtendedState) -> GrayImage {
    capture_image(w, st, &CameraIntrinsics::athena(), &SensorNoise::noiseless(), 0).unwrap()
}

fn homography_from(params: [f64; 8]) -> Homography {
    let [a, b, c, d, e, f, g, h] = params;
    Homography::new(Matrix3::new(1.0 + a, b, 40.0 * c, d, 1.0 + e, 40.0 * f, 1e-4 * g, 1e-4 * h, 1.0))
}

fn arb_homography() -> impl Strategy<Value = Homography> {
    prop::array::uniform8(-0.2..0.2f64).prop_map(|p| {
        let mut q = p;
        q[2] *= 5.0;
        q[5] *= 5.0;
        q[6] *= 5.0;
        q[7] *= 5.0;
        homography_from(q)
    })
}

fn pairs_of(h: &Homography, pts: &[(f64, f64)]) -> Vec<PointPair> {
    pts.iter().map(|&p| (p, h.apply(p.0, p.1).unwrap())).collect()
}

fn normalized_distance(a: &Homography, b: &Homography) -> f64 {
    let (ma, mb) = (a.matrix() / a.matrix().norm(), b.matrix() / b.matrix().norm());
    (ma - mb).norm().min((ma + mb).norm())
}

#[test]
fn ordering_survives_contrast_scaling() {
    let img = GrayImage::from_fn(96, 96, |x, y| {
        let a = (10..30).contains(&x) && (10..40).contains(&y);
        let b = (50..80).contains(&x) && (20..35).contains(&y);
        let c = (40..70).contains(&x) && (55..85).contains(&y);
        0.05 + 0.6 * f32::from(u8::from(a)) + 0.9 * f32::from(u8::from(b)) + 0.75 * f32::from(u8::from(c))
    });
    let half = GrayImage::from_fn(96, 96, |x, y| 0.5 * img.get(x, y));
    let p = DetectorParams::default();
    let (full, scaled) = (detect_features(&img, &p), detect_features(&half, &p));
    assert!(full.len() >= 12);
    assert_eq!(full.len(), scaled.len());
    for (a, b) in full.iter().zip(&scaled) {
        assert!((a.u - b.u).abs() < 1e-9 && (a.v - b.v).abs() < 1e-9);
    }
}

#[test]
fn translated_image_matches_with_known_shift() {
    let w = world(Scenario::UniformRock);
    let img = shot(&w, &at(0.0, 0.0, 0.0, 0.0, 40.0));
    let (wd, ht) = (img.width(), img.height());
    let data: Vec<f32> = (0..wd * ht).map(|k| if k % wd >= 10 { img.data()[k - 10] } else { 0.0 }).collect();
    let mask: Vec<bool> = (0..wd * ht).map(|k| k % wd >= 10 && img.mask().unwrap()[k - 10]).collect();
    let moved = GrayImage::from_parts(wd, ht, data, Some(mask));
    let p = DetectorParams::default();
    let (ca, cb) = (detect_features(&img, &p), detect_features(&moved, &p));
    let m = describe_and_match(&img, &ca, &moved, &cb, 0.8);
    assert!(m.len() > 50, "{} matches", m.len());
    for k in &m {
        let (a, b) = (ca[k.a], cb[k.b]);
        assert!((b.u - a.u - 10.0).abs() <= 0.5 && (b.v - a.v).abs() <= 0.5, "{a:?} -> {b:?}");
    }
}

#[test]
fn unrelated_noise_rarely_matches() {
    let mut rng = seed::rng(9);
    use rand::Rng;
    let mut noise = || {
        let v: Vec<f32> = (0..200 * 150).map(|_| rng.random_range(0.0..1.0)).collect();
        GrayImage::from_parts(200, 150, v, None)
    };
    let (a, b) = (noise(), noise());
    let p = DetectorParams::default();
    let (ca, cb) = (detect_features(&a, &p), detect_features(&b, &p));
    let m = describe_and_match(&a, &ca, &b, &cb, 0.8);
    assert!(!ca.is_empty());
    assert!((m.len() as f64) < 0.1 * ca.len().min(cb.len()) as f64, "{} of {}", m.len(), ca.len());
}

#[test]
fn four_exact_correspondences_recover_h() {
    let h = homography_from([0.1, -0.05, 0.3, 0.02, -0.1, -0.4, 0.5, -0.3]);
    let pairs = pairs_of(&h, &[(10.0, 10.0), (600.0, 20.0), (580.0, 460.0), (30.0, 440.0)]);
    assert!(normalized_distance(&dlt_homography(&pairs).unwrap(), &h) < 1e-8);
}

#[test]
fn ransac_preconditions() {
    let pairs = pairs_of(&Homography::identity(), &[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
    assert!(matches!(ransac_homography(&pairs, &RansacParams::default()), Err(Error::TooFewMatches { .. })));
    assert!(dlt_homography(&pairs).is_err());
}

#[test]
fn alignment_cases() {
    let intr = CameraIntrinsics::athena();
    let vp = VisionParams::default();
    let rock = world(Scenario::UniformRock);
    let st = at(0.0, 0.0, 0.0, 0.0, 35.0);
    let img = shot(&rock, &st);
    let view = GroundView::new(&intr, &st).unwrap();
    let feats = Features::extract_for(&img, &vp, &view);
    let mut grid = BeliefGrid::new(&rock.extent, &MapParams::default());
    grid.update_map(&img, &st, &intr, Alignment::StateDerived, Some(feats.clone())).unwrap();

    // Repeating the registered image yields its own registration.
    let m = align_to_map(&feats, &grid, &st, &intr, &vp, 0.5).unwrap();
    assert!(m.max_abs_diff(view.inverse_homography()) < 1e-6 * view.inverse_homography().matrix().abs().max());

    // A new view lands where the true state puts it, to within half a cell.
    let st2 = at(0.15, 0.02, 0.02, 8.0, 36.0);
    let img2 = shot(&rock, &st2);
    let f2 = Features::extract_for(&img2, &vp, &GroundView::new(&intr, &st2).unwrap());
    let m2 = align_to_map(&f2, &grid, &st2, &intr, &vp, 0.5).unwrap();
    let truth = GroundView::new(&intr, &st2).unwrap();
    let mut worst = 0f64;
    for &(u, v) in &[(320.0, 360.0), (100.0, 400.0), (540.0, 300.0), (320.0, 250.0)] {
        let (x, y) = m2.apply(u, v).unwrap();
        let g = truth.ground_of(u, v).unwrap();
        worst = worst.max((x - g.x).hypot(y - g.y));
    }
    assert!(worst < 0.5 * grid.resolution, "ground error {worst}");

    let sand = world(Scenario::UniformSand);
    let simg = shot(&sand, &st2);
    let sf = Features::extract_for(&simg, &vp, &GroundView::new(&intr, &st2).unwrap());
    assert!(sf.len() < 4);
    assert!(matches!(align_to_map(&sf, &grid, &st2, &intr, &vp, 0.5), Err(Error::AlignmentFailed(_))));
}

#[test]
fn vo_cases() {
    let intr = CameraIntrinsics::athena();
    let vp = VisionParams::default();
    let rock = world(Scenario::UniformRock);
    let st = at(0.3, -0.2, 0.5, -30.0, 40.0);
    let img = shot(&rock, &st);
    let same = visual_odometry(&img, &img, &intr, &st, &vp);
    assert!(same.ok && same.displacement < 1e-6);

    let next = ExtendedState::new(BodyPose::new(0.3 + 0.2 * 0.5f64.cos(), -0.2 + 0.2 * 0.5f64.sin(), 0.5), st.mast, 1.0);
    let vo = visual_odometry(&img, &shot(&rock, &next), &intr, &st, &vp);
    assert!(vo.ok && (0.18..=0.22).contains(&vo.displacement), "{vo:?}");

    let sand = world(Scenario::UniformSand);
    let vo = visual_odometry(&shot(&sand, &st), &shot(&sand, &next), &intr, &st, &vp);
    assert!(!vo.ok);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dlt_is_exact_on_clean_pairs(h in arb_homography(), pts in prop::collection::vec((0.0..640.0f64, 0.0..480.0f64), 6..40)) {
        let pairs = pairs_of(&h, &pts);
        if let Ok(est) = dlt_homography(&pairs) {
            prop_assert!(normalized_distance(&est, &h) < 1e-8);
        }
    }

    #[test]
    fn outlier_free_ransac_agrees_with_dlt(h in arb_homography(), seed in 0u64..1000) {
        let mut rng = vosap_core::seed::rng(seed);
        use rand::Rng;
        let pts: Vec<(f64, f64)> = (0..40).map(|_| (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))).collect();
        let pairs = pairs_of(&h, &pts);
        let params = RansacParams { seed, ..RansacParams::default() };
        let (est, inliers) = ransac_homography(&pairs, &params).unwrap();
        prop_assert_eq!(inliers.len(), pairs.len());
        prop_assert!(normalized_distance(&est, &dlt_homography(&pairs).unwrap()) < 1e-8);
        let again = ransac_homography(&pairs, &params).unwrap();
        prop_assert_eq!(again.1, inliers);
        prop_assert_eq!(again.0, est);
    }

    #[test]
    fn weak_consensus_never_reports_ok(k in 0usize..11) {
        // Fewer matched corners than min_inliers: VO must fail.
        let img = GrayImage::from_fn(120, 120, |x, y| {
            let n = (x / 20 + 6 * (y / 20)) % 36;
            if n < k && (x % 20) > 5 && (x % 20) < 14 && (y % 20) > 5 && (y % 20) < 14 { 1.0 } else { 0.0 }
        });
        let intr = CameraIntrinsics::new(100.0, 100.0, 60.0, 60.0, 120, 120).unwrap();
        let st = ExtendedState::new(BodyPose::new(0.0, 0.0, 0.0), MastConfig::from_degrees(0.0, 40.0, 1.4), 0.0);
        let vp = VisionParams { ransac: RansacParams { min_inliers: 4 * k + 1, ..RansacParams::default() }, ..VisionParams::default() };
        prop_assert!(!visual_odometry(&img, &img, &intr, &st, &vp).ok);
    }
}
