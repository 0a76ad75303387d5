//! Rule-based expert: lane following with time-to-collision braking.

use serde::{Deserialize, Serialize};

use crate::collision::{collision_radius, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::scene::{BevScene, Polyline, Pose2, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub target_speed: f64,
    pub decel: f64,
    pub recover: f64,
    pub ttc_brake: f64,
    pub ttc_release: f64,
    pub epsilon: f64,
    /// Extra clearance added to the collision radius when predicting conflicts.
    pub margin: f64,
    /// How far ahead conflicts are searched, seconds.
    pub lookahead: f64,
}

impl Default for ExpertParams {
    fn default() -> Self {
        Self {
            target_speed: 8.0,
            decel: 4.5,
            recover: 1.5,
            ttc_brake: 2.0,
            ttc_release: 2.2,
            epsilon: DEFAULT_EPSILON,
            margin: 0.5,
            lookahead: 4.0,
        }
    }
}

/// Arc-length parametrized polyline.
struct Lane<'a> {
    line: &'a Polyline,
    cum: Vec<f64>,
}

impl<'a> Lane<'a> {
    fn new(line: &'a Polyline) -> Self {
        let mut cum = vec![0.0];
        for w in line.points.windows(2) {
            let d = ((w[1][0] - w[0][0]) as f64).hypot((w[1][1] - w[0][1]) as f64);
            cum.push(cum.last().unwrap() + d);
        }
        Self { line, cum }
    }

    fn project(&self, x: f64, y: f64) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for (i, w) in self.line.points.windows(2).enumerate() {
            let (ax, ay) = (w[0][0] as f64, w[0][1] as f64);
            let (dx, dy) = (w[1][0] as f64 - ax, w[1][1] as f64 - ay);
            let len2 = dx * dx + dy * dy;
            let t = if len2 > 0.0 { (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let d = (x - ax - t * dx).hypot(y - ay - t * dy);
            if d < best.0 {
                best = (d, self.cum[i] + t * len2.sqrt());
            }
        }
        best.1
    }

    /// Pose at arc length `s`, extrapolating past either end.
    fn pose(&self, s: f64) -> Pose2 {
        let n = self.cum.len();
        let i = match self.cum.iter().position(|&c| c > s) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => n - 2,
        };
        let (a, b) = (self.line.points[i], self.line.points[i + 1]);
        let (dx, dy) = ((b[0] - a[0]) as f64, (b[1] - a[1]) as f64);
        let len = dx.hypot(dy).max(1e-12);
        let u = (s - self.cum[i]) / len;
        Pose2::new(a[0] as f64 + u * dx, a[1] as f64 + u * dy, dy.atan2(dx).to_degrees())
    }
}

fn time_to_conflict(scene: &BevScene, lane: &Lane, s: f64, v: f64, k: usize, p: &ExpertParams) -> f64 {
    let dt = scene.ego.dt as f64;
    let v = v.max(1.0);
    let steps = (p.lookahead / dt).ceil() as usize;
    for j in 0..=steps {
        let e = lane.pose(s + v * j as f64 * dt);
        for o in &scene.objects {
            if e.distance(&o.trajectory.at(k + j)) < collision_radius(p.epsilon, &o.footprint) + p.margin {
                return j as f64 * dt;
            }
        }
    }
    f64::INFINITY
}

/// Expert trajectory over the scene's horizon, starting from the scene's
/// first ego pose and following the nearest lane center.
pub fn expert_policy(scene: &BevScene, params: &ExpertParams) -> Result<Trajectory> {
    let start = scene.ego.at(0);
    let lane = scene
        .map
        .lane_centers()
        .map(|l| (l.distance_to(start.x as f64, start.y as f64), l))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, l)| Lane::new(l))
        .ok_or_else(|| Error::invalid(format!("scene {} has no lane_center polyline", scene.id)))?;
    let dt = scene.ego.dt as f64;
    let mut s = lane.project(start.x as f64, start.y as f64);
    let mut v = params.target_speed;
    let mut braking = false;
    let mut poses = Vec::with_capacity(scene.horizon());
    for k in 0..scene.horizon() {
        poses.push(lane.pose(s));
        let ttc = time_to_conflict(scene, &lane, s, v, k, params);
        if ttc < params.ttc_brake {
            braking = true;
        } else if ttc >= params.ttc_release {
            braking = false;
        }
        let a = if braking {
            -params.decel
        } else if v < params.target_speed {
            params.recover
        } else {
            0.0
        };
        let v_next = (v + a * dt).clamp(0.0, params.target_speed);
        s += 0.5 * (v + v_next) * dt;
        v = v_next;
    }
    Trajectory::new(scene.ego.dt, poses)
}
