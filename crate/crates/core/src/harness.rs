//! Experiment configuration, orchestration (single runs, paired active vs
//! passive comparisons, metric timing) and report/plot emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::belief::BeliefGrid;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{BodyPose, CameraIntrinsics, GroundPoint};
use crate::image::write_pgm;
use crate::planner::{
    build_prm, initial_map, rhc_run, vosap_plan, Mode, PlanInputs, RhcConfig, RunLog, RunOutcome, RunStatus,
};
use crate::belief::FeatureMap;
use crate::prediction::MetricKind;
use crate::seed;
use crate::world::{capture_image, Scenario, SensorNoise, TerrainParams, TerrainWorld};

/// Pinhole camera description in field-of-view terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub fov_h_deg: f64,
    pub fov_v_deg: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { width: 640, height: 480, fov_h_deg: 82.0, fov_v_deg: 66.0 }
    }
}

impl CameraConfig {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::from_fov(self.width, self.height, self.fov_h_deg, self.fov_v_deg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub repeats: usize,
    pub node_counts: Vec<usize>,
    pub metrics: Vec<MetricKind>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { repeats: 5, node_counts: vec![50, 100, 250], metrics: MetricKind::ALL.to_vec() }
    }
}

/// Full description of an experiment. Every field has a default, so an empty
/// file is a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub seed: u64,
    /// Seeds used by `compare`.
    pub seeds: Vec<u64>,
    /// Start pose `[x, y, heading_deg]`.
    pub start: [f64; 3],
    pub goal: [f64; 2],
    pub output_dir: Option<PathBuf>,
    pub camera: CameraConfig,
    pub terrain: TerrainParams,
    pub run: RhcConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Split.name().to_string(),
            seed: 1,
            seeds: (1..=10).collect(),
            start: [0.0, 0.0, 0.0],
            goal: [4.0, 0.0],
            output_dir: None,
            camera: CameraConfig::default(),
            terrain: TerrainParams::default(),
            run: RhcConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Command-line overrides applied on top of a configuration file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub scenario: Option<String>,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub mode: Option<Mode>,
    pub metric: Option<MetricKind>,
    pub nodes: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = &o.scenario {
            self.scenario = s.clone();
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if let Some(m) = o.mode {
            self.run.mode = m;
        }
        if let Some(m) = o.metric {
            self.run.metric = m;
        }
        if let Some(n) = o.nodes {
            self.run.planner.n_nodes = n;
        }
        if let Some(p) = &o.out {
            self.output_dir = Some(p.clone());
        }
        self.validate()
    }

    pub fn scenario(&self) -> Result<Scenario> {
        self.scenario.parse()
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario()?;
        self.camera.intrinsics()?;
        self.run.validate()?;
        if self.bench.repeats < 5 {
            return Err(Error::Config(format!("bench.repeats must be at least 5, got {}", self.bench.repeats)));
        }
        if self.bench.node_counts.is_empty() || self.bench.metrics.is_empty() {
            return Err(Error::Config("bench needs at least one node count and one metric".into()));
        }
        Ok(())
    }

    pub fn start_pose(&self) -> BodyPose {
        BodyPose::new(self.start[0], self.start[1], self.start[2].to_radians())
    }

    pub fn goal_point(&self) -> GroundPoint {
        GroundPoint::new(self.goal[0], self.goal[1])
    }

    pub fn world_seed(seed: u64) -> u64 {
        seed::derive_label(seed, "world")
    }

    /// The effective configuration together with every sub-seed derived from
    /// the experiment seed.
    pub fn manifest(&self) -> Result<String> {
        let mut s = String::from("# effective configuration\n");
        s.push_str(&toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?);
        let _ = writeln!(s, "\n[derived_seeds]");
        let seed = self.seed;
        for (name, v) in [
            ("world", Self::world_seed(seed)),
            ("sensor", seed::derive_label(seed, "sensor")),
            ("prm", seed::derive_label(seed, "prm")),
            ("plan", seed::derive_label(seed, "plan")),
            ("vo", seed::derive_label(seed, "vo")),
        ] {
            let _ = writeln!(s, "{name} = {v}");
        }
        Ok(s)
    }

    pub fn world(&self, seed: u64) -> Result<TerrainWorld> {
        Ok(TerrainWorld::generate(Self::world_seed(seed), self.scenario()?, &self.terrain))
    }
}

/// Output directory: explicit setting, else `VOSAP_OUT`, else `./vosap-out`.
pub fn resolve_out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir
        .clone()
        .or_else(|| std::env::var_os("VOSAP_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("vosap-out"))
}

/// One run together with the map it produced.
pub struct Simulation {
    pub world: TerrainWorld,
    pub outcome: RunOutcome,
    pub grid: BeliefGrid,
}

/// Runs the configured experiment seed on a fresh map.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulation> {
    simulate_seed(cfg, cfg.seed)
}

pub fn simulate_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Simulation> {
    cfg.validate()?;
    let world = cfg.world(seed)?;
    let intr = cfg.camera.intrinsics()?;
    let mut grid = BeliefGrid::new(&world.extent, &cfg.run.map);
    grid.exec = cfg.run.planner.exec;
    let mut fm = FeatureMap::new(cfg.run.map.resolution);
    let outcome = rhc_run(&world, &mut grid, &mut fm, cfg.start_pose(), cfg.goal_point(), &intr, &cfg.run, seed)?;
    Ok(Simulation { world, outcome, grid })
}

/// Files written by [`cli_simulate`].
#[derive(Debug, Clone)]
pub struct SimArtifacts {
    pub run_csv: PathBuf,
    pub passive_csv: Option<PathBuf>,
    pub trajectory_svg: PathBuf,
    pub manifest: PathBuf,
    pub status: RunStatus,
}

/// Runs one experiment and writes the run log, belief rasters, trajectory
/// plot and manifest into `out`. Exceeding the step budget is reported after
/// the artifacts are written.
pub fn cli_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<SimArtifacts> {
    let sim = simulate(cfg)?;
    std::fs::create_dir_all(out)?;
    let run_csv = out.join("run.csv");
    std::fs::write(&run_csv, sim.outcome.log.to_csv())?;
    let passive_csv = match &sim.outcome.passive {
        Some(p) => {
            let path = out.join("passive.csv");
            std::fs::write(&path, p.to_csv())?;
            Some(path)
        }
        None => None,
    };
    sim.grid.export(out, "belief")?;
    let trajectory_svg = out.join("trajectory.svg");
    std::fs::write(&trajectory_svg, emit_map_plot(&sim.grid, &sim.outcome.log))?;
    let manifest = out.join("manifest.toml");
    std::fs::write(&manifest, cfg.manifest()?)?;
    let status = sim.outcome.log.status;
    if status == RunStatus::MaxStepsExceeded {
        return Err(Error::MaxStepsExceeded(cfg.run.max_steps));
    }
    Ok(SimArtifacts { run_csv, passive_csv, trajectory_svg, manifest, status })
}

/// Paired result for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub seed: u64,
    /// Cumulative VO error; `None` when the run failed.
    pub passive: Option<f64>,
    pub active: Option<f64>,
    pub passive_legs: Vec<Option<f64>>,
    pub active_legs: Vec<Option<f64>>,
    pub planner_ms: Vec<f64>,
    pub status: RunStatus,
    /// Scheduled mast targets after the root, and how many of them lie on rock.
    pub scheduled_targets: usize,
    pub rock_targets: usize,
    /// Fraction of scheduled mast targets on rock.
    pub rock_fraction: Option<f64>,
}

impl CompareRow {
    /// Relative improvement of active over passive, when both succeeded.
    pub fn improvement(&self) -> Option<f64> {
        match (self.passive, self.active) {
            (Some(p), Some(a)) if p > 0.0 => Some((p - a) / p),
            _ => None,
        }
    }

    /// Active beat passive: lower error, or passive failed while active did not.
    pub fn active_better(&self) -> bool {
        match (self.passive, self.active) {
            (Some(p), Some(a)) => a < p,
            (None, Some(_)) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub scenario: Scenario,
    pub rows: Vec<CompareRow>,
}

impl ExperimentReport {
    pub fn active_better_count(&self) -> usize {
        self.rows.iter().filter(|r| r.active_better()).count()
    }

    /// Median improvement over seeds where both runs succeeded.
    pub fn median_improvement(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.rows.iter().filter_map(CompareRow::improvement).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }

    pub fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
        let v: Vec<f64> = values.flatten().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "Failed".to_string(), |x| format!("{x:.6}"));
        let mut s = String::from("seed,passive_m,active_m,improvement_pct,legs,rock_fraction,status\n");
        for r in &self.rows {
            let imp = r.improvement().map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x));
            let rock = r.rock_fraction.map_or_else(String::new, |x| format!("{x:.3}"));
            let status = match r.status {
                RunStatus::Reached => "reached",
                RunStatus::MaxStepsExceeded => "max-steps",
            };
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.seed, cell(r.passive), cell(r.active), imp, r.active_legs.len(), rock, status);
        }
        s
    }
}

/// One paired experiment: the active run also captures a fixed-mast image at
/// every executed body pose, so both share world, path and start pose.
pub fn compare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<CompareRow> {
    let mut c = cfg.clone();
    c.run.mode = Mode::Active;
    c.run.paired_passive = true;
    let sim = simulate_seed(&c, seed)?;
    let out = &sim.outcome;
    let passive = out.passive.as_ref().expect("paired run records a passive log");
    let targets: Vec<GroundPoint> =
        out.plans.iter().flat_map(|p| p.schedule.entries[1..].iter().map(|e| e.target)).collect();
    let rock = targets.iter().filter(|t| sim.world.region_at(**t) == crate::world::Region::Rock).count();
    Ok(CompareRow {
        seed,
        passive: passive.cumulative_error(),
        active: out.log.cumulative_error(),
        passive_legs: passive.rows.iter().map(|r| r.leg_error).collect(),
        active_legs: out.log.rows.iter().map(|r| r.leg_error).collect(),
        planner_ms: out.log.rows.iter().filter_map(|r| r.planner_ms).collect(),
        status: out.log.status,
        scheduled_targets: targets.len(),
        rock_targets: rock,
        rock_fraction: (!targets.is_empty()).then(|| rock as f64 / targets.len() as f64),
    })
}

/// Paired active/passive runs over `seeds`, fanned out under the planner's
/// execution policy.
pub fn compare(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<ExperimentReport> {
    if seeds.is_empty() {
        return Err(Error::Config("compare needs at least one seed".into()));
    }
    cfg.validate()?;
    let rows = cfg.run.planner.exec.map(seeds, |&s| compare_seed(cfg, s)).into_iter().collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport { scenario: cfg.scenario()?, rows })
}

pub fn cli_compare(cfg: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<ExperimentReport> {
    let report = compare(cfg, seeds)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("compare.csv"), report.to_csv())?;
    std::fs::write(out.join("manifest.toml"), cfg.manifest()?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchCell {
    pub metric: MetricKind,
    pub n_nodes: usize,
    pub mean_s: f64,
    pub min_s: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub cells: Vec<BenchCell>,
    /// Node counts at which the expected ordering J_V < J_F < J_D was violated.
    pub violations: Vec<String>,
}

impl BenchReport {
    pub fn cell(&self, metric: MetricKind, n_nodes: usize) -> Option<&BenchCell> {
        self.cells.iter().find(|c| c.metric == metric && c.n_nodes == n_nodes)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,n_nodes,repeats,mean_s,min_s\n");
        for c in &self.cells {
            let _ = writeln!(s, "{},{},{},{:.6},{:.6}", c.metric.short(), c.n_nodes, c.repeats, c.mean_s, c.min_s);
        }
        s
    }

    /// Grouped bar chart of mean runtimes on a log scale.
    pub fn to_svg(&self) -> String {
        let mut sizes: Vec<usize> = self.cells.iter().map(|c| c.n_nodes).collect();
        sizes.sort_unstable();
        sizes.dedup();
        let metrics: Vec<MetricKind> = MetricKind::ALL.into_iter().filter(|m| self.cells.iter().any(|c| c.metric == *m)).collect();
        let (w, h, left, bottom, top) = (640.0, 360.0, 60.0, 40.0, 20.0);
        let lo = self.cells.iter().map(|c| c.mean_s).fold(f64::INFINITY, f64::min).max(1e-6).log10().floor();
        let hi = self.cells.iter().map(|c| c.mean_s).fold(0.0, f64::max).max(1e-6).log10().ceil().max(lo + 1.0);
        let y_of = |t: f64| top + (h - top - bottom) * (1.0 - (t.max(1e-6).log10() - lo) / (hi - lo));
        let colors = ["#1f77b4", "#ff7f0e", "#2ca02c"];
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let mut e = lo as i32;
        while e <= hi as i32 {
            let y = y_of(10f64.powi(e));
            let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/>"##, w - 10.0);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">1e{e} s</text>"#, left - 4.0, y + 3.0);
            e += 1;
        }
        let group = (w - left - 10.0) / sizes.len().max(1) as f64;
        let bar = group / (metrics.len() as f64 + 1.0);
        for (gi, n) in sizes.iter().enumerate() {
            let x0 = left + gi as f64 * group + bar / 2.0;
            for (mi, m) in metrics.iter().enumerate() {
                if let Some(c) = self.cell(*m, *n) {
                    let y = y_of(c.mean_s);
                    let _ = writeln!(
                        s,
                        r#"<rect class="bar" x="{:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                        x0 + mi as f64 * bar,
                        bar * 0.9,
                        (h - bottom - y).max(0.0),
                        colors[mi % colors.len()]
                    );
                }
            }
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{n} nodes</text>"#, x0 + bar * metrics.len() as f64 / 2.0, h - bottom + 16.0);
        }
        for (mi, m) in metrics.iter().enumerate() {
            let _ = writeln!(s, r#"<text x="{:.2}" y="14" font-size="11" fill="{}">{}</text>"#, left + 60.0 * mi as f64, colors[mi % colors.len()], m.short());
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Times full plans for every configured metric and tree size from one
/// initialization-mapped snapshot of the configured world. Plans run on a
/// single worker.
pub fn bench_metrics(cfg: &ExperimentConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let world = cfg.world(cfg.seed)?;
    let intr = cfg.camera.intrinsics()?;
    let start = cfg.start_pose();
    let (mut grid, fm, root) = initial_map(&world, start, &intr, &cfg.run, cfg.seed)?;
    grid.exec = Exec::Sequential;
    let path = build_prm(&world.extent, start, BodyPose::new(cfg.goal[0], cfg.goal[1], start.heading), 0.0, &cfg.run.prm)?;
    let mut cells = Vec::new();
    for &n in &cfg.bench.node_counts {
        for &metric in &cfg.bench.metrics {
            let mut planner = cfg.run.planner;
            planner.n_nodes = n;
            planner.exec = Exec::Sequential;
            let inputs = PlanInputs {
                grid: &grid,
                fm: &fm,
                path: &path,
                intr: &intr,
                metric,
                constraints: &cfg.run.constraints,
                prediction: &cfg.run.prediction,
                planner: &planner,
                seed: seed::derive_label(cfg.seed, "bench"),
            };
            let mut times = Vec::with_capacity(cfg.bench.repeats);
            for _ in 0..cfg.bench.repeats {
                let t = Instant::now();
                // Incomplete plans still cost the full search.
                let _ = vosap_plan(&inputs, &root);
                times.push(t.elapsed().as_secs_f64());
            }
            cells.push(BenchCell {
                metric,
                n_nodes: n,
                mean_s: times.iter().sum::<f64>() / times.len() as f64,
                min_s: times.iter().copied().fold(f64::INFINITY, f64::min),
                repeats: times.len(),
            });
        }
    }
    let mut report = BenchReport { cells, violations: Vec::new() };
    for &n in &cfg.bench.node_counts {
        let t = |m| report.cell(m, n).map(|c| c.mean_s);
        if let (Some(v), Some(f), Some(d)) =
            (t(MetricKind::VisibleFeatureCount), t(MetricKind::SyntheticFeatureCount), t(MetricKind::Displacement))
        {
            if !(v < f && f < d) {
                report.violations.push(format!("{n} nodes: J_V {v:.4} s, J_F {f:.4} s, J_D {d:.4} s"));
            }
        }
    }
    Ok(report)
}

pub fn cli_bench_metrics(cfg: &ExperimentConfig, out: &Path) -> Result<BenchReport> {
    let report = bench_metrics(cfg)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("bench.csv"), report.to_csv())?;
    std::fs::write(out.join("bench.svg"), report.to_svg())?;
    std::fs::write(out.join("manifest.toml"), cfg.manifest()?)?;
    Ok(report)
}

/// Writes the world texture (every `stride` texels) and the camera view at
/// the start pose with the initial mast configuration.
pub fn cli_render(cfg: &ExperimentConfig, out: &Path, stride: usize) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let world = cfg.world(cfg.seed)?;
    std::fs::create_dir_all(out)?;
    let stem = format!("world_{}_{}", world.scenario.name(), cfg.seed);
    let img = world.to_image(stride);
    let world_path = out.join(format!("{stem}.pgm"));
    write_pgm(&world_path, img.width(), img.height(), &img.to_u8())?;
    let intr = cfg.camera.intrinsics()?;
    let pan = *cfg.run.init_pans_deg.last().expect("validated non-empty");
    let state = crate::geometry::ExtendedState::new(
        cfg.start_pose(),
        crate::geometry::MastConfig::from_degrees(pan, cfg.run.init_tilt_deg, cfg.run.constraints.mast_height),
        0.0,
    );
    let noise = SensorNoise { sigma_r: cfg.run.sigma_r, seed: seed::derive_label(cfg.seed, "sensor") };
    let view = capture_image(&world, &state, &intr, &noise, 0)?;
    let view_path = out.join(format!("{stem}_view.pgm"));
    write_pgm(&view_path, view.width(), view.height(), &view.to_u8())?;
    Ok(vec![world_path, view_path])
}

/// Top view of the belief mean with camera positions (circles), pan
/// directions (segments) and mast targets (crosses) for every logged step.
pub fn emit_map_plot(grid: &BeliefGrid, log: &RunLog) -> String {
    const BLOCK: usize = 5;
    const SCALE: f64 = 100.0;
    // Region: logged positions and targets plus margin, else the observed cells.
    let mut pts: Vec<GroundPoint> = log.rows.iter().flat_map(|r| [r.true_pos, r.target]).collect();
    if pts.is_empty() {
        pts = (0..grid.rows)
            .flat_map(|j| (0..grid.cols).map(move |i| (i, j)))
            .filter(|&(i, j)| grid.cell(i, j).observed)
            .map(|(i, j)| grid.cell_center(i, j))
            .collect();
    }
    let (mut x0, mut y0, mut x1, mut y1) = pts.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), p| (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y)),
    );
    if !x0.is_finite() {
        (x0, y0, x1, y1) = (-1.0, -1.0, 1.0, 1.0);
    }
    let margin = 1.0;
    let (x0, y0, x1, y1) = (x0 - margin, y0 - margin, x1 + margin, y1 + margin);
    let (w, h) = ((x1 - x0) * SCALE, (y1 - y0) * SCALE);
    let sx = |x: f64| (x - x0) * SCALE;
    let sy = |y: f64| (y1 - y) * SCALE;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.2} {h:.2}">"#);
    let _ = writeln!(s, r##"<rect class="background" width="{w:.2}" height="{h:.2}" fill="#808080"/>"##);
    // Belief mean averaged over square blocks of cells.
    let block_m = BLOCK as f64 * grid.resolution;
    let to_cell = |v: f64, o: f64, n: usize| (((v - o) / grid.resolution).floor().max(0.0) as usize).min(n);
    let (i0, i1) = (to_cell(x0, grid.origin.x, grid.cols), to_cell(x1, grid.origin.x, grid.cols));
    let (j0, j1) = (to_cell(y0, grid.origin.y, grid.rows), to_cell(y1, grid.origin.y, grid.rows));
    s.push_str("<g class=\"belief\">\n");
    let mut bj = j0 - j0 % BLOCK;
    while bj < j1 {
        let mut bi = i0 - i0 % BLOCK;
        while bi < i1 {
            let (mut sum, mut n) = (0.0, 0usize);
            for j in bj..(bj + BLOCK).min(grid.rows) {
                for i in bi..(bi + BLOCK).min(grid.cols) {
                    let c = grid.cell(i, j);
                    if c.observed {
                        sum += c.mean;
                        n += 1;
                    }
                }
            }
            if n > 0 {
                let g = ((sum / n as f64).clamp(0.0, 1.0) * 255.0).round() as u8;
                let bx = grid.origin.x + bi as f64 * grid.resolution;
                let by = grid.origin.y + (bj + BLOCK) as f64 * grid.resolution;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="rgb({g},{g},{g})"/>"#,
                    sx(bx),
                    sy(by),
                    block_m * SCALE,
                    block_m * SCALE
                );
            }
            bi += BLOCK;
        }
        bj += BLOCK;
    }
    s.push_str("</g>\n");
    for r in &log.rows {
        let (cx, cy) = (sx(r.true_pos.x), sy(r.true_pos.y));
        let az = r.heading + r.mast.pan;
        let len = 0.5 * SCALE;
        let _ = writeln!(s, r#"<circle class="camera" cx="{cx:.2}" cy="{cy:.2}" r="6.00" fill="none" stroke="blue" stroke-width="2"/>"#);
        let _ = writeln!(
            s,
            r#"<line class="pan" x1="{cx:.2}" y1="{cy:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-width="2"/>"#,
            cx + len * az.cos(),
            cy - len * az.sin()
        );
        let (tx, ty) = (sx(r.target.x), sy(r.target.y));
        let d = 6.0;
        let _ = writeln!(
            s,
            r#"<path class="target" d="M{:.2} {:.2}L{:.2} {:.2}M{:.2} {:.2}L{:.2} {:.2}" stroke="yellow" stroke-width="2"/>"#,
            tx - d,
            ty - d,
            tx + d,
            ty + d,
            tx - d,
            ty + d,
            tx + d,
            ty - d
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_scenario_rejected() {
        let err = ExperimentConfig::from_toml("scenario = \"moon\"").unwrap_err();
        assert_eq!(err, Error::UnknownScenario("moon".into()));
    }

    #[test]
    fn bench_needs_five_repeats() {
        let err = ExperimentConfig::from_toml("[bench]\nrepeats = 1").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err:?}");
    }

    #[test]
    fn manifest_round_trips() {
        let cfg = ExperimentConfig { seed: 9, ..ExperimentConfig::default() };
        let text = cfg.manifest().unwrap();
        let (body, seeds) = text.split_once("[derived_seeds]").unwrap();
        assert_eq!(ExperimentConfig::from_toml(body).unwrap(), cfg);
        assert!(seeds.contains(&format!("world = {}", ExperimentConfig::world_seed(9))));
    }

    #[test]
    fn improvement_semantics() {
        let row = |p, a| CompareRow {
            seed: 0,
            passive: p,
            active: a,
            passive_legs: vec![],
            active_legs: vec![],
            planner_ms: vec![],
            status: RunStatus::Reached,
            scheduled_targets: 0,
            rock_targets: 0,
            rock_fraction: None,
        };
        assert!((row(Some(0.2), Some(0.05)).improvement().unwrap() - 0.75).abs() < 1e-12);
        assert!(row(None, Some(0.05)).improvement().is_none());
        assert!(row(None, Some(0.05)).active_better());
        assert!(!row(Some(0.1), None).active_better());
        assert!(!row(None, None).active_better());
    }
}
