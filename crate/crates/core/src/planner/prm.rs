//! Probabilistic roadmap over body positions and the timed body path it
//! produces.

use petgraph::algo::astar;
use petgraph::graph::{NodeIndex, UnGraph};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, BodyPose, GroundPoint};
use crate::seed;
use crate::world::Extent;

/// Circular region the body path must avoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeepOut {
    pub center: GroundPoint,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrmParams {
    pub samples: usize,
    pub k: usize,
    /// Rover speed in m/s.
    pub speed: f64,
    pub keepout: Vec<KeepOut>,
    pub seed: u64,
}

impl Default for PrmParams {
    fn default() -> Self {
        Self { samples: 200, k: 10, speed: 0.042, keepout: Vec::new(), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub t: f64,
    pub pose: BodyPose,
}

/// Piecewise-linear body trajectory at constant speed. The heading on each
/// segment is its direction of travel.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyPath {
    waypoints: Vec<TimedPose>,
    /// Cumulative arc length at each waypoint.
    arc: Vec<f64>,
    pub speed: f64,
}

impl BodyPath {
    /// Times the polyline `points` starting at `t0`; `heading0` is used only
    /// when the path has a single point.
    pub fn from_points(points: &[GroundPoint], t0: f64, speed: f64, heading0: f64) -> Self {
        assert!(!points.is_empty() && speed > 0.0);
        let mut arc = vec![0.0];
        for w in points.windows(2) {
            arc.push(arc.last().unwrap() + w[0].distance(&w[1]));
        }
        let n = points.len();
        let waypoints = (0..n)
            .map(|i| {
                let heading = if n == 1 {
                    heading0
                } else {
                    let (a, b) = if i + 1 < n { (points[i], points[i + 1]) } else { (points[i - 1], points[i]) };
                    (b.y - a.y).atan2(b.x - a.x)
                };
                TimedPose { t: t0 + arc[i] / speed, pose: BodyPose::new(points[i].x, points[i].y, heading) }
            })
            .collect();
        Self { waypoints, arc, speed }
    }

    pub fn waypoints(&self) -> &[TimedPose] {
        &self.waypoints
    }

    pub fn start_time(&self) -> f64 {
        self.waypoints[0].t
    }

    pub fn end_time(&self) -> f64 {
        self.waypoints.last().unwrap().t
    }

    pub fn length(&self) -> f64 {
        *self.arc.last().unwrap()
    }

    pub fn contains_time(&self, t: f64) -> bool {
        t >= self.start_time() - 1e-9 && t <= self.end_time() + 1e-9
    }

    /// Body pose at time `t`, clamped to the path's time domain.
    pub fn at(&self, t: f64) -> BodyPose {
        let w = &self.waypoints;
        if w.len() == 1 || t <= w[0].t {
            return w[0].pose;
        }
        if t >= self.end_time() {
            return w.last().unwrap().pose;
        }
        let k = w.partition_point(|p| p.t <= t) - 1;
        let (a, b) = (&w[k], &w[k + 1]);
        let s = (t - a.t) / (b.t - a.t);
        BodyPose::new(
            a.pose.x + s * (b.pose.x - a.pose.x),
            a.pose.y + s * (b.pose.y - a.pose.y),
            a.pose.heading,
        )
    }

    pub fn distance_at(&self, t: f64) -> f64 {
        ((t - self.start_time()) * self.speed).clamp(0.0, self.length())
    }

    pub fn time_at_distance(&self, s: f64) -> f64 {
        self.start_time() + s.clamp(0.0, self.length()) / self.speed
    }
}

fn segment_clear(a: GroundPoint, b: GroundPoint, keepout: &[KeepOut]) -> bool {
    keepout.iter().all(|k| {
        let (ex, ey) = (b.x - a.x, b.y - a.y);
        let l2 = ex * ex + ey * ey;
        let t = if l2 > 0.0 { (((k.center.x - a.x) * ex + (k.center.y - a.y) * ey) / l2).clamp(0.0, 1.0) } else { 0.0 };
        GroundPoint::new(a.x + t * ex, a.y + t * ey).distance(&k.center) > k.radius
    })
}

fn point_clear(p: GroundPoint, keepout: &[KeepOut]) -> bool {
    keepout.iter().all(|k| p.distance(&k.center) > k.radius)
}

/// Shortest roadmap path from `start` to `goal`, shortcut-smoothed and timed
/// from `t0` at the configured speed.
pub fn build_prm(bounds: &Extent, start: BodyPose, goal: BodyPose, t0: f64, params: &PrmParams) -> Result<BodyPath> {
    let (s, g) = (start.position(), goal.position());
    if !bounds.contains(s) || !bounds.contains(g) || !point_clear(s, &params.keepout) || !point_clear(g, &params.keepout) {
        return Err(Error::NoPath);
    }
    if s.distance(&g) < 1e-12 {
        return Ok(BodyPath::from_points(&[s], t0, params.speed, start.heading));
    }
    if segment_clear(s, g, &params.keepout) {
        return Ok(BodyPath::from_points(&[s, g], t0, params.speed, start.heading));
    }

    let mut rng = seed::rng(seed::derive_label(params.seed, "prm"));
    let mut pts = vec![s, g];
    while pts.len() < params.samples + 2 {
        let p = GroundPoint::new(rng.random_range(bounds.x_min..bounds.x_max), rng.random_range(bounds.y_min..bounds.y_max));
        if point_clear(p, &params.keepout) {
            pts.push(p);
        }
    }
    let mut graph = UnGraph::<GroundPoint, f64>::with_capacity(pts.len(), pts.len() * params.k);
    let ids: Vec<NodeIndex> = pts.iter().map(|p| graph.add_node(*p)).collect();
    for i in 0..pts.len() {
        let mut near: Vec<(f64, usize)> =
            (0..pts.len()).filter(|&j| j != i).map(|j| (pts[i].distance(&pts[j]), j)).collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d, j) in near.iter().take(params.k) {
            if graph.find_edge(ids[i], ids[j]).is_none() && segment_clear(pts[i], pts[j], &params.keepout) {
                graph.add_edge(ids[i], ids[j], d);
            }
        }
    }
    let (_, route) = astar(&graph, ids[0], |n| n == ids[1], |e| *e.weight(), |n| graph[n].distance(&g))
        .ok_or(Error::NoPath)?;
    let route: Vec<GroundPoint> = route.into_iter().map(|n| graph[n]).collect();

    // Greedy shortcutting: jump to the farthest visible waypoint.
    let mut smooth = vec![route[0]];
    let mut i = 0;
    while i + 1 < route.len() {
        let mut j = route.len() - 1;
        while j > i + 1 && !segment_clear(route[i], route[j], &params.keepout) {
            j -= 1;
        }
        smooth.push(route[j]);
        i = j;
    }
    Ok(BodyPath::from_points(&smooth, t0, params.speed, normalize_angle(start.heading)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_path_when_free() {
        let e = Extent::centered(22.0, 21.0);
        let p = build_prm(&e, BodyPose::new(0.0, 0.0, 0.0), BodyPose::new(10.0, 0.0, 0.0), 0.0, &PrmParams::default()).unwrap();
        assert!((p.length() - 10.0).abs() < 1e-12);
        assert!((p.end_time() - 10.0 / 0.042).abs() < 1e-9);
    }

    #[test]
    fn degenerate_path() {
        let e = Extent::centered(22.0, 21.0);
        let s = BodyPose::new(1.0, 1.0, 0.3);
        let p = build_prm(&e, s, s, 5.0, &PrmParams::default()).unwrap();
        assert_eq!(p.waypoints().len(), 1);
        assert_eq!(p.end_time(), 5.0);
        assert_eq!(p.at(100.0), s);
    }

    #[test]
    fn detours_around_keepout() {
        let e = Extent::centered(22.0, 21.0);
        let params = PrmParams { keepout: vec![KeepOut { center: GroundPoint::new(5.0, 0.0), radius: 1.0 }], ..PrmParams::default() };
        let p = build_prm(&e, BodyPose::new(0.0, 0.0, 0.0), BodyPose::new(10.0, 0.0, 0.0), 0.0, &params).unwrap();
        assert!(p.waypoints().len() > 2);
        assert!(p.length() > 10.0 && p.length() < 13.0, "{}", p.length());
        for w in p.waypoints().windows(2) {
            assert!(segment_clear(w[0].pose.position(), w[1].pose.position(), &params.keepout));
        }
    }

    #[test]
    fn outside_bounds_is_no_path() {
        let e = Extent::centered(4.0, 4.0);
        let r = build_prm(&e, BodyPose::new(0.0, 0.0, 0.0), BodyPose::new(10.0, 0.0, 0.0), 0.0, &PrmParams::default());
        assert_eq!(r.unwrap_err(), Error::NoPath);
    }
}
