//! Observation planning: spatio-temporal RRT* over (time along the body path,
//! mast target) pairs, and the receding-horizon executive that runs it.

mod prm;
mod rhc;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use prm::{build_prm, BodyPath, KeepOut, PrmParams, TimedPose};
pub use rhc::{initial_map, rhc_execute, rhc_run, AlignMode, Mode, RhcConfig, PlanRecord, RunLog, RunOutcome, RunRow, RunStatus};

use crate::belief::{BeliefGrid, FeatureMap};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{mast_config_for_target, mast_target, BodyPose, CameraIntrinsics, ExtendedState, GroundPoint, MastConfig};
use crate::prediction::{discount, edge_cost_nodes, EdgeEval, MetricKind, NodeView, PredictionParams};
use crate::seed;

const LIMIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConstraints {
    pub t_search: f64,
    pub d_near: f64,
    pub d_far: f64,
    pub d_overlap: f64,
    pub pan_min: f64,
    pub pan_max: f64,
    pub tilt_min: f64,
    pub tilt_max: f64,
    pub mast_height: f64,
}

impl Default for PlanConstraints {
    fn default() -> Self {
        Self::for_mast(1.4)
    }
}

impl PlanConstraints {
    /// Limits of a mast of height `h` with tilt in [30°, 45°] and pan within
    /// ±90°; the FOV ring follows from the tilt limits.
    pub fn for_mast(h: f64) -> Self {
        let (tilt_min, tilt_max) = (30f64.to_radians(), 45f64.to_radians());
        Self {
            t_search: 40.0,
            d_near: h / tilt_max.tan(),
            d_far: h / tilt_min.tan(),
            d_overlap: 1.5,
            pan_min: -90f64.to_radians(),
            pan_max: 90f64.to_radians(),
            tilt_min,
            tilt_max,
            mast_height: h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.d_near > 0.0
            && self.d_near < self.d_far
            && self.d_overlap > 0.0
            && self.t_search > 0.0
            && self.pan_min <= self.pan_max
            && 0.0 < self.tilt_min
            && self.tilt_min <= self.tilt_max
            && self.mast_height > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent plan constraints: {self:?}")))
        }
    }

    pub fn mast_ok(&self, m: &MastConfig) -> bool {
        m.pan >= self.pan_min - LIMIT_EPS
            && m.pan <= self.pan_max + LIMIT_EPS
            && m.tilt >= self.tilt_min - LIMIT_EPS
            && m.tilt <= self.tilt_max + LIMIT_EPS
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanNode {
    pub id: usize,
    pub tau: f64,
    pub target: GroundPoint,
    pub body: BodyPose,
    pub mast: MastConfig,
    /// Discounted cost of the chain from the root.
    pub cost: f64,
    pub parent: Option<usize>,
    /// Number of edges from the root.
    pub depth: usize,
    /// Every edge on the chain from the root was a failure.
    pub all_failed: bool,
}

impl PlanNode {
    pub fn state(&self) -> ExtendedState {
        ExtendedState::new(self.body, self.mast, self.tau)
    }
}

/// Edge feasibility between two tree nodes along `path`.
pub fn satisfies_constraints(pred: &PlanNode, new: &PlanNode, path: &BodyPath, c: &PlanConstraints) -> bool {
    if pred.tau > new.tau || new.tau - pred.tau >= c.t_search {
        return false;
    }
    if !path.contains_time(pred.tau) || !path.contains_time(new.tau) {
        return false;
    }
    if pred.target.distance(&new.target) >= c.d_overlap {
        return false;
    }
    [pred, new].into_iter().all(|n| {
        let body = path.at(n.tau);
        let r = n.target.distance(&body.position());
        r >= c.d_near - LIMIT_EPS
            && r <= c.d_far + LIMIT_EPS
            && mast_config_for_target(&body, n.target, c.mast_height).is_ok_and(|m| c.mast_ok(&m))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerParams {
    pub n_nodes: usize,
    pub horizon_m: f64,
    /// A chain is complete when its last observation is within this fraction
    /// of the horizon duration from the horizon end.
    pub end_fraction: f64,
    /// Candidate edges priced per batch; batches run under `exec`.
    pub batch: usize,
    pub exec: Exec,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self { n_nodes: 250, horizon_m: 3.0, end_fraction: 0.1, batch: 8, exec: Exec::default() }
    }
}

/// One planned observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleEntry {
    pub tau: f64,
    pub mast: MastConfig,
    pub state: ExtendedState,
    pub target: GroundPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSchedule {
    /// Starts with the root (current) observation.
    pub entries: Vec<ScheduleEntry>,
    pub total_cost: f64,
}

/// Everything the tree search reads; borrowed for the duration of one plan.
pub struct PlanInputs<'a> {
    pub grid: &'a BeliefGrid,
    pub fm: &'a FeatureMap,
    pub path: &'a BodyPath,
    pub intr: &'a CameraIntrinsics,
    pub metric: MetricKind,
    pub constraints: &'a PlanConstraints,
    pub prediction: &'a PredictionParams,
    pub planner: &'a PlannerParams,
    pub seed: u64,
}

/// The spatio-temporal tree after some number of iterations.
#[derive(Debug, Clone)]
pub struct PlanTree {
    pub nodes: Vec<PlanNode>,
    children: Vec<Vec<usize>>,
    views: Vec<NodeView>,
    edges: HashMap<(usize, usize), EdgeEval>,
    pub t_start: f64,
    pub t_end: f64,
    pub end_tol: f64,
    /// Best complete-chain cost after each iteration.
    pub history: Vec<f64>,
    gamma: f64,
}

impl PlanTree {
    pub fn is_complete(&self, n: &PlanNode) -> bool {
        n.depth > 0 && !n.all_failed && n.tau >= self.t_end - self.end_tol
    }

    /// Minimal cost over complete chains; infinite when there is none.
    pub fn best_chain_cost(&self) -> f64 {
        self.best_leaf().map_or(f64::INFINITY, |k| self.nodes[k].cost)
    }

    fn best_leaf(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter(|n| self.is_complete(n))
            .min_by(|a, b| a.cost.total_cmp(&b.cost).then(a.id.cmp(&b.id)))
            .map(|n| n.id)
    }

    /// Parent/child id pairs of every tree edge.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes.iter().filter_map(|n| n.parent.map(|p| (p, n.id)))
    }

    pub fn best_schedule(&self) -> Result<ObservationSchedule> {
        let leaf = self.best_leaf().ok_or(Error::PlanIncomplete)?;
        let mut chain = vec![leaf];
        while let Some(p) = self.nodes[*chain.last().unwrap()].parent {
            chain.push(p);
        }
        chain.reverse();
        let entries = chain
            .iter()
            .map(|&k| {
                let n = &self.nodes[k];
                ScheduleEntry { tau: n.tau, mast: n.mast, state: n.state(), target: n.target }
            })
            .collect();
        Ok(ObservationSchedule { entries, total_cost: self.nodes[leaf].cost })
    }

    /// Largest discrepancy between stored node costs and costs recomputed from
    /// freshly priced edges.
    pub fn audit(&self, inputs: &PlanInputs) -> f64 {
        let mut worst: f64 = 0.0;
        for n in &self.nodes {
            let Some(p) = n.parent else { continue };
            let e = price(inputs, &self.views[p], &self.views[n.id], p, n.id);
            let expect = self.nodes[p].cost + discount(self.gamma, self.nodes[p].depth) * e.cost;
            worst = worst.max((expect - n.cost).abs());
        }
        worst
    }

    fn is_ancestor(&self, anc: usize, mut k: usize) -> bool {
        loop {
            if k == anc {
                return true;
            }
            match self.nodes[k].parent {
                Some(p) => k = p,
                None => return false,
            }
        }
    }

    /// Costs, depths and failure flags of `root`'s subtree if `root` were
    /// re-parented onto `parent` by edge `e`.
    fn reparented(&self, root: usize, parent: usize, e: EdgeEval) -> Vec<(usize, f64, usize, bool)> {
        let p = &self.nodes[parent];
        let mut out = vec![(root, p.cost + discount(self.gamma, p.depth) * e.cost, p.depth + 1, p.all_failed && e.failed)];
        let mut i = 0;
        while i < out.len() {
            let (k, cost, depth, all_failed) = out[i];
            for &c in &self.children[k] {
                let ce = self.edges[&(k, c)];
                out.push((c, cost + discount(self.gamma, depth) * ce.cost, depth + 1, all_failed && ce.failed));
            }
            i += 1;
        }
        out
    }
}

fn price(inputs: &PlanInputs, a: &NodeView, b: &NodeView, ia: usize, ib: usize) -> EdgeEval {
    let s = seed::derive(inputs.seed, &[ia as u64, ib as u64]);
    edge_cost_nodes(inputs.metric, a, b, inputs.intr, inputs.prediction, s)
}

/// Time window `[now, end]` covered by a plan starting at `now`.
pub fn horizon_window(path: &BodyPath, now: f64, horizon_m: f64) -> (f64, f64) {
    let end = path.time_at_distance(path.distance_at(now) + horizon_m);
    (now, end.max(now))
}

/// Grows the tree for `planner.n_nodes` iterations from the current state.
pub fn grow_tree(inputs: &PlanInputs, root_state: &ExtendedState) -> Result<PlanTree> {
    let c = inputs.constraints;
    c.validate()?;
    let (t0, t_end) = horizon_window(inputs.path, root_state.time, inputs.planner.horizon_m);
    let root_target = mast_target(root_state)?;
    let root_body = inputs.path.at(t0);
    let root = PlanNode {
        id: 0,
        tau: t0,
        target: root_target,
        body: root_body,
        mast: root_state.mast,
        cost: 0.0,
        parent: None,
        depth: 0,
        all_failed: true,
    };
    let root_view = NodeView::prepare(inputs.metric, inputs.grid, inputs.fm, &root.state(), inputs.intr, inputs.prediction);
    let mut tree = PlanTree {
        nodes: vec![root],
        children: vec![Vec::new()],
        views: vec![root_view],
        edges: HashMap::new(),
        t_start: t0,
        t_end,
        end_tol: inputs.planner.end_fraction * (t_end - t0),
        history: Vec::with_capacity(inputs.planner.n_nodes),
        gamma: inputs.prediction.edge.gamma,
    };
    let mut rng = seed::rng(seed::derive_label(inputs.seed, "vosap"));
    let exec = inputs.planner.exec;
    let batch = inputs.planner.batch.max(1);

    for _ in 0..inputs.planner.n_nodes {
        // Sample a time on the horizon, the body pose there, and a mast
        // target in the FOV ring within the pan limits.
        let tau = if t_end > t0 { rng.random_range(t0..=t_end) } else { t0 };
        let body = inputs.path.at(tau);
        let r = rng.random_range(c.d_near * c.d_near..=c.d_far * c.d_far).sqrt();
        let bearing = body.heading + rng.random_range(c.pan_min..=c.pan_max);
        let target = GroundPoint::new(body.x + r * bearing.cos(), body.y + r * bearing.sin());
        let Ok(mast) = mast_config_for_target(&body, target, c.mast_height) else {
            tree.history.push(tree.best_chain_cost());
            continue;
        };
        let id = tree.nodes.len();
        let mut new = PlanNode { id, tau, target, body, mast, cost: f64::INFINITY, parent: None, depth: 0, all_failed: true };

        let mut preds: Vec<usize> =
            (0..id).filter(|&k| satisfies_constraints(&tree.nodes[k], &new, inputs.path, c)).collect();
        if preds.is_empty() {
            tree.history.push(tree.best_chain_cost());
            continue;
        }
        let view = NodeView::prepare(inputs.metric, inputs.grid, inputs.fm, &new.state(), inputs.intr, inputs.prediction);

        // Minimum-cost predecessor, cheapest prefixes first so that the rest
        // can be skipped once they cannot win.
        preds.sort_by(|&a, &b| tree.nodes[a].cost.total_cmp(&tree.nodes[b].cost).then(a.cmp(&b)));
        let mut best: Option<(f64, usize, EdgeEval)> = None;
        for chunk in preds.chunks(batch) {
            let live: Vec<usize> =
                chunk.iter().copied().filter(|&k| best.is_none_or(|(bc, _, _)| tree.nodes[k].cost <= bc)).collect();
            if live.is_empty() {
                break;
            }
            let evals = exec.map(&live, |&k| price(inputs, &tree.views[k], &view, k, id));
            for (&k, e) in live.iter().zip(evals) {
                let p = &tree.nodes[k];
                let total = p.cost + discount(tree.gamma, p.depth) * e.cost;
                let better = match best {
                    None => true,
                    Some((bc, bk, _)) => total < bc || (total == bc && k < bk),
                };
                if better {
                    best = Some((total, k, e));
                }
            }
        }
        let (cost, parent, e) = best.expect("at least one predecessor was priced");
        let p = tree.nodes[parent];
        new.cost = cost;
        new.parent = Some(parent);
        new.depth = p.depth + 1;
        new.all_failed = p.all_failed && e.failed;
        tree.nodes.push(new);
        tree.children.push(Vec::new());
        tree.children[parent].push(id);
        tree.views.push(view);
        tree.edges.insert((parent, id), e);

        // Rewire successors through the new node where that is cheaper.
        let succs: Vec<usize> = (1..id)
            .filter(|&k| {
                let s = &tree.nodes[k];
                new.cost < s.cost && !tree.is_ancestor(k, id) && satisfies_constraints(&new, s, inputs.path, c)
            })
            .collect();
        let mut priced = Vec::with_capacity(succs.len());
        for chunk in succs.chunks(batch) {
            let evals = exec.map(chunk, |&k| price(inputs, &tree.views[id], &tree.views[k], id, k));
            priced.extend(chunk.iter().copied().zip(evals));
        }
        for (k, e) in priced {
            if tree.is_ancestor(k, id) {
                continue;
            }
            let sub = tree.reparented(k, id, e);
            let improves = sub[0].1 < tree.nodes[k].cost;
            let safe = sub.iter().all(|&(j, cost, _, all_failed)| {
                let n = &tree.nodes[j];
                cost <= n.cost && (n.all_failed || !all_failed)
            });
            if !(improves && safe) {
                continue;
            }
            let old = tree.nodes[k].parent.expect("non-root node has a parent");
            tree.children[old].retain(|&x| x != k);
            tree.edges.remove(&(old, k));
            tree.children[id].push(k);
            tree.edges.insert((id, k), e);
            tree.nodes[k].parent = Some(id);
            for (j, cost, depth, all_failed) in sub {
                let n = &mut tree.nodes[j];
                n.cost = cost;
                n.depth = depth;
                n.all_failed = all_failed;
            }
        }
        tree.history.push(tree.best_chain_cost());
    }
    Ok(tree)
}

/// Plans the observation schedule over the horizon ahead of `root_state`.
pub fn vosap_plan(inputs: &PlanInputs, root_state: &ExtendedState) -> Result<ObservationSchedule> {
    grow_tree(inputs, root_state)?.best_schedule()
}
