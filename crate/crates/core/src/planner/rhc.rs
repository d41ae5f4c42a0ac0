//! Receding-horizon executive: plan, take the first observation, update the
//! map, repeat until the goal is reached.

use std::fmt::Write as _;
use std::time::Instant;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::{build_prm, grow_tree, horizon_window, BodyPath, ObservationSchedule, PlanConstraints, PlanInputs, PlannerParams, PrmParams};
use crate::belief::{coverage_ok, update_feature_map, Alignment, BeliefGrid, FeatureMap, MapParams};
use crate::error::{Error, Result};
use crate::geometry::{mast_target, BodyPose, CameraIntrinsics, ExtendedState, GroundPoint, GroundView, MastConfig};
use crate::image::GrayImage;
use crate::prediction::{MetricKind, PredictionParams};
use crate::seed;
use crate::vision::{align_to_map, visual_odometry_features, Features};
use crate::world::{capture_image, SensorNoise, TerrainWorld};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Active,
    Passive,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "active" => Ok(Mode::Active),
            "passive" => Ok(Mode::Passive),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// How captured images are placed on the map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    /// Feature alignment, falling back to the state-derived homography and a
    /// re-initialization request when it fails.
    Features,
    State,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RhcConfig {
    pub mode: Mode,
    pub metric: MetricKind,
    pub goal_tolerance: f64,
    pub max_steps: usize,
    /// Time between captures in passive mode, and for fallback steps.
    pub passive_step_s: f64,
    pub passive_tilt_deg: f64,
    pub init_tilt_deg: f64,
    /// Pan angles of the initialization sequence; the last becomes the
    /// starting mast pose.
    pub init_pans_deg: Vec<f64>,
    pub coverage_check: bool,
    pub coverage_min: f64,
    /// Future body poses checked for coverage before each plan.
    pub coverage_lookahead: usize,
    pub alignment: AlignMode,
    pub align_max_offset: f64,
    /// Also capture a fixed-mast image at every executed pose and run VO on
    /// that sequence (paired comparison).
    pub paired_passive: bool,
    /// Record planner wall time in the log (makes logs non-reproducible).
    pub record_wall_time: bool,
    pub sigma_r: f64,
    pub constraints: PlanConstraints,
    pub planner: PlannerParams,
    pub prediction: PredictionParams,
    pub map: MapParams,
    pub prm: PrmParams,
}

impl Default for RhcConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Active,
            metric: MetricKind::Displacement,
            goal_tolerance: 0.25,
            max_steps: 200,
            passive_step_s: 12.0,
            passive_tilt_deg: 30.0,
            init_tilt_deg: 30.0,
            init_pans_deg: vec![-45.0, 45.0, 0.0],
            coverage_check: true,
            coverage_min: 0.5,
            coverage_lookahead: 3,
            alignment: AlignMode::Features,
            align_max_offset: 0.5,
            paired_passive: false,
            record_wall_time: false,
            sigma_r: 0.02,
            constraints: PlanConstraints::default(),
            planner: PlannerParams::default(),
            prediction: PredictionParams::default(),
            map: MapParams::default(),
            prm: PrmParams::default(),
        }
    }
}

impl RhcConfig {
    pub fn validate(&self) -> Result<()> {
        self.constraints.validate()?;
        self.prediction.vision.ransac.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.init_pans_deg.is_empty() {
            return bad("init_pans_deg must not be empty");
        }
        if !(self.goal_tolerance > 0.0) || !(self.passive_step_s > 0.0) || !(self.planner.horizon_m > 0.0) {
            return bad("goal_tolerance, passive_step_s and horizon_m must be positive");
        }
        if !(self.sigma_r >= 0.0) {
            return bad("sigma_r must be non-negative");
        }
        let g = self.prediction.edge.gamma;
        if !(g > 0.0 && g <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        Ok(())
    }

    fn passive_mast(&self) -> MastConfig {
        MastConfig::from_degrees(0.0, self.passive_tilt_deg, self.constraints.mast_height)
    }
}

/// One executed observation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub step: usize,
    pub time: f64,
    pub true_pos: GroundPoint,
    pub est_pos: GroundPoint,
    /// `None` when VO failed on this leg.
    pub leg_error: Option<f64>,
    pub metric: String,
    pub planner_ms: Option<f64>,
    pub vo_ok: bool,
    pub reinit: bool,
    pub mast: MastConfig,
    pub heading: f64,
    pub target: GroundPoint,
    pub inliers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Reached,
    MaxStepsExceeded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub rows: Vec<RunRow>,
    pub status: RunStatus,
}

impl RunLog {
    /// A run fails when any leg lost VO.
    pub fn failed(&self) -> bool {
        self.rows.iter().any(|r| !r.vo_ok)
    }

    /// Sum of per-leg translation errors, withheld for failed runs.
    pub fn cumulative_error(&self) -> Option<f64> {
        (!self.failed()).then(|| self.rows.iter().filter_map(|r| r.leg_error).sum())
    }

    pub fn final_drift(&self) -> Option<f64> {
        self.rows.last().map(|r| r.true_pos.distance(&r.est_pos))
    }

    pub const CSV_HEADER: &'static str = "step,time,true_x,true_y,est_x,est_y,leg_error_m,metric,planner_ms,vo_ok,reinit_flag,pan_deg,tilt_deg,target_x,target_y,inliers";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let err = r.leg_error.map(|e| format!("{e:.6}")).unwrap_or_default();
            let ms = r.planner_ms.map(|m| format!("{m:.1}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{:.3},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{:.4},{:.4},{:.6},{:.6},{}",
                r.step,
                r.time,
                r.true_pos.x,
                r.true_pos.y,
                r.est_pos.x,
                r.est_pos.y,
                err,
                r.metric,
                ms,
                u8::from(r.vo_ok),
                u8::from(r.reinit),
                r.mast.pan.to_degrees(),
                r.mast.tilt.to_degrees(),
                r.target.x,
                r.target.y,
                r.inliers
            );
        }
        s
    }
}

/// Result of one run; `passive` holds the paired fixed-mast sequence when
/// requested.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: RunLog,
    pub passive: Option<RunLog>,
    pub path: BodyPath,
    pub reinits: usize,
    /// Every complete schedule produced, in step order.
    pub plans: Vec<PlanRecord>,
}

#[derive(Debug, Clone)]
pub struct PlanRecord {
    pub step: usize,
    pub schedule: ObservationSchedule,
}

struct Capture {
    state: ExtendedState,
    features: Features,
}

/// Per-run streams and shared references.
struct Runner<'a> {
    world: &'a TerrainWorld,
    intr: &'a CameraIntrinsics,
    cfg: &'a RhcConfig,
    noise: SensorNoise,
    next_capture: u64,
}

impl Runner<'_> {
    fn capture(&mut self, state: &ExtendedState) -> Result<(GrayImage, Features)> {
        let id = self.next_capture;
        self.next_capture += 1;
        let img = capture_image(self.world, state, self.intr, &self.noise, id)?;
        let f = Features::extract_for(&img, &self.cfg.prediction.vision, &GroundView::new(self.intr, state)?);
        Ok((img, f))
    }

    /// Captures the initialization sequence at `body` and registers it by
    /// state. Returns the last capture, which becomes the VO reference.
    /// With a `current` mast pose the sequence is reordered to finish at the
    /// pan closest to it.
    fn reinit(
        &mut self,
        grid: &mut BeliefGrid,
        fm: &mut FeatureMap,
        body: BodyPose,
        time: f64,
        current: Option<MastConfig>,
    ) -> Result<Capture> {
        let h = self.cfg.constraints.mast_height;
        let mut pans = self.cfg.init_pans_deg.clone();
        if let Some(m) = current {
            let cur = m.pan.to_degrees();
            pans.sort_by(|a, b| (b - cur).abs().total_cmp(&(a - cur).abs()));
        }
        let mut images = Vec::new();
        let mut states = Vec::new();
        let mut feats = Vec::new();
        for &pan in &pans {
            let st = ExtendedState::new(body, MastConfig::from_degrees(pan, self.cfg.init_tilt_deg, h), time);
            let (img, f) = self.capture(&st)?;
            let view = GroundView::new(self.intr, &st)?;
            update_feature_map(fm, &f.corners, view.inverse_homography(), body.position(), grid.params.max_range);
            images.push(img);
            states.push(st);
            feats.push(f);
        }
        grid.reinitialize(&images, &states, self.intr, &feats)?;
        let state = *states.last().unwrap();
        Ok(Capture { state, features: feats.pop().unwrap() })
    }

    fn register(&self, grid: &mut BeliefGrid, fm: &mut FeatureMap, img: &GrayImage, f: &Features, st: &ExtendedState) -> Result<bool> {
        let vp = &self.cfg.prediction.vision;
        let (alignment, aligned) = match self.cfg.alignment {
            AlignMode::State => (Alignment::StateDerived, true),
            AlignMode::Features => match align_to_map(f, grid, st, self.intr, vp, self.cfg.align_max_offset) {
                Ok(h) => (Alignment::Homography(h), true),
                Err(e) => {
                    debug!("alignment failed: {e}");
                    (Alignment::StateDerived, false)
                }
            },
        };
        let map_from_cam = match alignment {
            Alignment::Homography(h) => h,
            Alignment::StateDerived => *GroundView::new(self.intr, st)?.inverse_homography(),
        };
        grid.update_map(img, st, self.intr, alignment, Some(f.clone()))?;
        update_feature_map(fm, &f.corners, &map_from_cam, st.body.position(), grid.params.max_range);
        if !aligned {
            grid.needs_reinit = true;
        }
        Ok(aligned)
    }
}

struct Track {
    rows: Vec<RunRow>,
    est: GroundPoint,
    reference: Capture,
}

impl Track {
    fn leg(&mut self, cfg: &RhcConfig, intr: &CameraIntrinsics, f: Features, state: ExtendedState, vo_seed: u64) -> (bool, Option<f64>, usize) {
        let mut vp = cfg.prediction.vision;
        vp.ransac.seed = vo_seed;
        let vo = visual_odometry_features(&self.reference.features, &f, intr, &self.reference.state, &vp);
        let a = self.reference.state.body.position();
        let b = state.body.position();
        let leg_error = vo.ok.then(|| (vo.translation.0 - (b.x - a.x)).hypot(vo.translation.1 - (b.y - a.y)));
        if vo.ok {
            self.est = GroundPoint::new(self.est.x + vo.translation.0, self.est.y + vo.translation.1);
        }
        self.reference = Capture { state, features: f };
        (vo.ok, leg_error, vo.inliers)
    }
}

/// Runs the receding-horizon loop from `start` to `goal`. `grid` and `fm`
/// accumulate the map; they are usually fresh.
pub fn rhc_run(
    world: &TerrainWorld,
    grid: &mut BeliefGrid,
    fm: &mut FeatureMap,
    start: BodyPose,
    goal: GroundPoint,
    intr: &CameraIntrinsics,
    cfg: &RhcConfig,
    seed: u64,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut prm = cfg.prm.clone();
    prm.seed = seed::derive_label(seed, "prm");
    let goal_pose = BodyPose::new(goal.x, goal.y, start.heading);
    let path = build_prm(&world.extent, start, goal_pose, 0.0, &prm)?;
    let mut runner = Runner {
        world,
        intr,
        cfg,
        noise: SensorNoise { sigma_r: cfg.sigma_r, seed: seed::derive_label(seed, "sensor") },
        next_capture: 0,
    };
    let plan_seed = seed::derive_label(seed, "plan");
    let vo_seed = seed::derive_label(seed, "vo");
    let metric_name = match cfg.mode {
        Mode::Active => cfg.metric.name().to_string(),
        Mode::Passive => "none".to_string(),
    };

    let body0 = path.at(0.0);
    let first = runner.reinit(grid, fm, body0, 0.0, None)?;
    let mut reinits = 1;
    let mut passive = if cfg.paired_passive || cfg.mode == Mode::Passive {
        let st = ExtendedState::new(body0, cfg.passive_mast(), 0.0);
        // The last initialization view is reused when it already is the fixed mast pose.
        let reference = if (first.state.mast.pan - st.mast.pan).abs() < 1e-12 && (first.state.mast.tilt - st.mast.tilt).abs() < 1e-12 {
            Capture { state: first.state, features: first.features.clone() }
        } else {
            let (_, f) = runner.capture(&st)?;
            Capture { state: st, features: f }
        };
        Some(Track { rows: Vec::new(), est: body0.position(), reference })
    } else {
        None
    };
    let mut active = Track { rows: Vec::new(), est: body0.position(), reference: first };
    let mut now = 0.0;
    let mut step = 0;
    let mut status = RunStatus::Reached;
    let mut plans = Vec::new();

    while path.at(now).position().distance(&goal) > cfg.goal_tolerance && now < path.end_time() {
        if step >= cfg.max_steps {
            status = RunStatus::MaxStepsExceeded;
            break;
        }
        let body = path.at(now);
        let mut reinit = false;
        let mut planner_ms = None;
        let (next_tau, mast) = match cfg.mode {
            Mode::Passive => ((now + cfg.passive_step_s).min(path.end_time()), cfg.passive_mast()),
            Mode::Active => {
                let (_, t_end) = horizon_window(&path, now, cfg.planner.horizon_m);
                if grid.needs_reinit || (cfg.coverage_check && !coverage_ahead(grid, &path, now, t_end, intr, cfg, active.reference.state.mast)) {
                    active.reference = runner.reinit(grid, fm, body, now, Some(active.reference.state.mast))?;
                    reinits += 1;
                    reinit = true;
                }
                let started = Instant::now();
                let mut choice = plan_next(grid, fm, &path, intr, cfg, &active.reference.state, seed::derive(plan_seed, &[step as u64, 0]))?;
                if choice.is_none() && !reinit {
                    info!("step {step}: plan incomplete, re-initializing");
                    active.reference = runner.reinit(grid, fm, body, now, Some(active.reference.state.mast))?;
                    reinits += 1;
                    reinit = true;
                    choice = plan_next(grid, fm, &path, intr, cfg, &active.reference.state, seed::derive(plan_seed, &[step as u64, 1]))?;
                }
                if cfg.record_wall_time {
                    planner_ms = Some(started.elapsed().as_secs_f64() * 1e3);
                }
                match choice {
                    Some(schedule) => {
                        let next = (schedule.entries[1].tau, schedule.entries[1].mast);
                        plans.push(PlanRecord { step, schedule });
                        next
                    }
                    None => {
                        info!("step {step}: no complete plan, taking a fixed step");
                        ((now + cfg.passive_step_s).min(path.end_time()), active.reference.state.mast)
                    }
                }
            }
        };

        let body_next = path.at(next_tau);
        let state = ExtendedState::new(body_next, mast, next_tau);
        let (img, f) = runner.capture(&state)?;
        let leg_seed = seed::derive(vo_seed, &[step as u64]);
        match cfg.mode {
            Mode::Active => {
                let (ok, err, inliers) = active.leg(cfg, intr, f.clone(), state, leg_seed);
                runner.register(grid, fm, &img, &f, &state)?;
                active.rows.push(row(step, &state, active.est, err, &metric_name, planner_ms, ok, reinit, inliers)?);
                if let Some(p) = passive.as_mut() {
                    let pst = ExtendedState::new(body_next, cfg.passive_mast(), next_tau);
                    let (_, pf) = runner.capture(&pst)?;
                    let (ok, err, inl) = p.leg(cfg, intr, pf, pst, seed::derive(leg_seed, &[1]));
                    p.rows.push(row(step, &pst, p.est, err, "none", None, ok, false, inl)?);
                }
            }
            Mode::Passive => {
                let p = passive.as_mut().expect("passive track exists in passive mode");
                let (ok, err, inl) = p.leg(cfg, intr, f.clone(), state, leg_seed);
                runner.register(grid, fm, &img, &f, &state)?;
                p.rows.push(row(step, &state, p.est, err, &metric_name, None, ok, false, inl)?);
            }
        }
        now = next_tau;
        step += 1;
    }

    let to_log = |t: Track| RunLog { rows: t.rows, status };
    Ok(match cfg.mode {
        Mode::Active => RunOutcome { log: to_log(active), passive: passive.map(to_log), path, reinits, plans },
        Mode::Passive => RunOutcome { log: to_log(passive.expect("passive track")), passive: None, path, reinits, plans },
    })
}

#[allow(clippy::too_many_arguments)]
fn row(
    step: usize,
    st: &ExtendedState,
    est: GroundPoint,
    leg_error: Option<f64>,
    metric: &str,
    planner_ms: Option<f64>,
    vo_ok: bool,
    reinit: bool,
    inliers: usize,
) -> Result<RunRow> {
    Ok(RunRow {
        step,
        time: st.time,
        true_pos: st.body.position(),
        est_pos: est,
        leg_error,
        metric: metric.to_string(),
        planner_ms,
        vo_ok,
        reinit,
        mast: st.mast,
        heading: st.body.heading,
        target: mast_target(st)?,
        inliers,
    })
}

/// Coverage of the views that keeping `mast` would give at evenly spaced body
/// poses within one search window ahead.
fn coverage_ahead(
    grid: &BeliefGrid,
    path: &BodyPath,
    now: f64,
    t_end: f64,
    intr: &CameraIntrinsics,
    cfg: &RhcConfig,
    mast: MastConfig,
) -> bool {
    let n = cfg.coverage_lookahead.max(1);
    let t_end = t_end.min(now + cfg.constraints.t_search);
    let states: Vec<ExtendedState> = (1..=n)
        .map(|k| {
            let t = now + (t_end - now) * k as f64 / n as f64;
            ExtendedState::new(path.at(t), mast, t)
        })
        .collect();
    coverage_ok(grid, &states, intr, cfg.coverage_min)
}

/// A fresh schedule from `current`, or `None` if the plan is incomplete.
fn plan_next(
    grid: &BeliefGrid,
    fm: &FeatureMap,
    path: &BodyPath,
    intr: &CameraIntrinsics,
    cfg: &RhcConfig,
    current: &ExtendedState,
    seed: u64,
) -> Result<Option<ObservationSchedule>> {
    let inputs = PlanInputs {
        grid,
        fm,
        path,
        intr,
        metric: cfg.metric,
        constraints: &cfg.constraints,
        prediction: &cfg.prediction,
        planner: &cfg.planner,
        seed,
    };
    let tree = grow_tree(&inputs, current)?;
    match tree.best_schedule() {
        Ok(s) if s.entries.len() >= 2 => Ok(Some(s)),
        Ok(_) | Err(Error::PlanIncomplete) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Fresh map and feature map after the initialization sequence at `start`,
/// with the state of its last capture.
pub fn initial_map(
    world: &TerrainWorld,
    start: BodyPose,
    intr: &CameraIntrinsics,
    cfg: &RhcConfig,
    seed: u64,
) -> Result<(BeliefGrid, FeatureMap, ExtendedState)> {
    cfg.validate()?;
    let mut grid = BeliefGrid::new(&world.extent, &cfg.map);
    let mut fm = FeatureMap::new(cfg.map.resolution);
    let mut runner = Runner {
        world,
        intr,
        cfg,
        noise: SensorNoise { sigma_r: cfg.sigma_r, seed: seed::derive_label(seed, "sensor") },
        next_capture: 0,
    };
    let last = runner.reinit(&mut grid, &mut fm, start, 0.0, None)?;
    Ok((grid, fm, last.state))
}

/// Like [`rhc_run`] on a fresh map, but reports exceeding the step budget as
/// an error.
pub fn rhc_execute(
    world: &TerrainWorld,
    start: BodyPose,
    goal: GroundPoint,
    intr: &CameraIntrinsics,
    cfg: &RhcConfig,
    seed: u64,
) -> Result<RunOutcome> {
    let mut grid = BeliefGrid::new(&world.extent, &cfg.map);
    let mut fm = FeatureMap::new(cfg.map.resolution);
    let out = rhc_run(world, &mut grid, &mut fm, start, goal, intr, cfg, seed)?;
    if out.log.status == RunStatus::MaxStepsExceeded {
        return Err(Error::MaxStepsExceeded(cfg.max_steps));
    }
    Ok(out)
}
