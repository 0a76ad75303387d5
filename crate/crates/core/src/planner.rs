//! The planner under correction and its evaluation metrics.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::collision::first_contact;
use crate::error::{Error, Result};
use crate::scene::{
    self, render_raster, BevScene, Dataset, ObjectClass, Pose2, SceneRaster, Trajectory, ViewConfig, ViewGeometry,
    BASE_CHANNELS, CH_DETECTION, CH_FOREGROUND, CH_PLAN, CH_PREDICTION, OVERLAY_CHANNELS,
};

pub const BANK_SCHEMA: &str = "corrloop.planner_bank";
pub const HIT_RADIUS: f64 = 1.75;
pub const DEFAULT_HORIZONS: [f64; 3] = [1.0, 2.0, 3.0];

pub trait PlannerModel {
    /// Adds the dataset to the learned state.
    fn train(&mut self, dataset: &Dataset) -> Result<()>;
    /// Plan of `t_e2e` future poses in the ego frame at the current timestep.
    fn plan(&self, raster: &SceneRaster, ego_speed: f64) -> Result<Trajectory>;
    fn fingerprint(&self) -> String;
    fn config(&self) -> &PlannerConfig;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub view: ViewConfig,
    pub frames: usize,
    pub t_e2e: usize,
    pub k: usize,
    /// Softening added to neighbor distances before inverting into weights.
    pub softening: f64,
    pub grid: usize,
    pub channel_weights: [f32; BASE_CHANNELS],
    pub speed_weight: f32,
    pub render_seed: u64,
    pub visibility_threshold: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            view: ViewConfig::default(),
            frames: 16,
            t_e2e: 6,
            k: 3,
            softening: 0.5,
            grid: 4,
            channel_weights: [1.0, 0.5, 0.5],
            speed_weight: 0.2,
            render_seed: 0,
            visibility_threshold: 0.5,
        }
    }
}

impl PlannerConfig {
    /// The raster a scene is planned from: its attached raster if generated,
    /// otherwise a deterministic render.
    pub fn raster_for(&self, scene: &BevScene) -> Result<SceneRaster> {
        match &scene.raster {
            Some(r) => Ok(r.clone()),
            None => render_raster(scene, &self.view, self.frames, self.render_seed),
        }
    }

    pub fn features(&self, raster: &SceneRaster, ego_speed: f64) -> Result<Vec<f32>> {
        let (nv, nt, nc, h, w) = raster.dims();
        if nc < BASE_CHANNELS || h % self.grid != 0 || w % self.grid != 0 {
            return Err(Error::invalid(format!(
                "raster {:?} incompatible with {}x{} pooling",
                raster.values.shape(),
                self.grid,
                self.grid
            )));
        }
        let (bh, bw) = (h / self.grid, w / self.grid);
        let norm = 1.0 / (nv * nt * bh * bw) as f32;
        let mut feat = vec![0.0f32; BASE_CHANNELS * self.grid * self.grid + 1];
        for c in 0..BASE_CHANNELS {
            for v in 0..nv {
                for t in 0..nt {
                    let p = raster.plane(v, t, c);
                    for r in 0..h {
                        for col in 0..w {
                            feat[(c * self.grid + r / bh) * self.grid + col / bw] += p[r * w + col];
                        }
                    }
                }
            }
            for x in &mut feat[c * self.grid * self.grid..(c + 1) * self.grid * self.grid] {
                *x *= norm * self.channel_weights[c];
            }
        }
        *feat.last_mut().unwrap() = ego_speed as f32 * self.speed_weight;
        Ok(feat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub scene_id: String,
    pub feature: Vec<f32>,
    /// Future poses relative to the current ego pose: `(dx, dy, dheading)`.
    pub deltas: Vec<[f32; 3]>,
}

fn feature_digest(feature: &[f32]) -> [u8; 32] {
    let mut h = Sha256::new();
    for x in feature {
        h.update(x.to_le_bytes());
    }
    h.finalize().into()
}

/// Ego-frame deltas of poses `1..=n` relative to pose 0.
pub fn relative_deltas(traj: &Trajectory, n: usize) -> Result<Vec<[f32; 3]>> {
    if traj.len() < n + 1 {
        return Err(Error::invalid(format!("trajectory of {} poses shorter than {}", traj.len(), n + 1)));
    }
    let o = traj.at(0);
    let th = (o.heading as f64).to_radians();
    Ok((1..=n)
        .map(|t| {
            let p = traj.at(t);
            let (dx, dy) = (p.x as f64 - o.x as f64, p.y as f64 - o.y as f64);
            [
                (dx * th.cos() + dy * th.sin()) as f32,
                (-dx * th.sin() + dy * th.cos()) as f32,
                scene::wrap_degrees(p.heading as f64 - o.heading as f64) as f32,
            ]
        })
        .collect())
}

/// Maps ego-frame deltas back to world poses anchored at `origin`.
pub fn apply_deltas(origin: Pose2, deltas: &[[f32; 3]], dt: f32) -> Trajectory {
    let th = (origin.heading as f64).to_radians();
    let poses = deltas
        .iter()
        .map(|d| {
            let (dx, dy) = (d[0] as f64, d[1] as f64);
            Pose2::new(
                origin.x as f64 + dx * th.cos() - dy * th.sin(),
                origin.y as f64 + dx * th.sin() + dy * th.cos(),
                origin.heading as f64 + d[2] as f64,
            )
        })
        .collect();
    Trajectory { dt, poses }
}

/// Distance-weighted k-nearest-neighbor planner over pooled raster features.
#[derive(Debug, Clone)]
pub struct KnnPlanner {
    cfg: PlannerConfig,
    dt: f32,
    bank: Vec<BankEntry>,
    seen: HashSet<[u8; 32]>,
}

impl KnnPlanner {
    pub fn new(cfg: PlannerConfig) -> Self {
        Self { cfg, dt: 0.5, bank: Vec::new(), seen: HashSet::new() }
    }

    pub fn bank(&self) -> &[BankEntry] {
        &self.bank
    }

    /// Inserts one entry unless an identical feature is already stored.
    pub fn insert(&mut self, entry: BankEntry) -> bool {
        if !self.seen.insert(feature_digest(&entry.feature)) {
            return false;
        }
        self.bank.push(entry);
        true
    }

    /// The `k` nearest entries with distances, ordered by distance then scene id.
    pub fn neighbors(&self, feature: &[f32]) -> Vec<(f64, &BankEntry)> {
        let mut d: Vec<(f64, &BankEntry)> = self
            .bank
            .iter()
            .map(|e| {
                let s: f64 = e.feature.iter().zip(feature).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
                (s.sqrt(), e)
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.scene_id.cmp(&b.1.scene_id)));
        d.truncate(self.cfg.k.max(1).min(self.bank.len()));
        d
    }

    pub fn plan_features(&self, feature: &[f32]) -> Result<Trajectory> {
        if self.bank.is_empty() {
            return Err(Error::Untrained("planner bank is empty".into()));
        }
        let nn = self.neighbors(feature);
        let mut acc = vec![[0.0f64; 3]; self.cfg.t_e2e];
        let mut total = 0.0;
        for (d, e) in &nn {
            let w = 1.0 / (d + self.cfg.softening);
            total += w;
            for (a, x) in acc.iter_mut().zip(&e.deltas) {
                for i in 0..3 {
                    a[i] += w * x[i] as f64;
                }
            }
        }
        let deltas: Vec<[f32; 3]> =
            acc.iter().map(|a| [(a[0] / total) as f32, (a[1] / total) as f32, (a[2] / total) as f32]).collect();
        Ok(apply_deltas(Pose2::new(0.0, 0.0, 0.0), &deltas, self.dt))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = json!({ "config": self.cfg, "dt": self.dt, "fingerprint": self.fingerprint() });
        scene::write_jsonl(path, BANK_SCHEMA, header, &self.bank)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, entries): (_, Vec<BankEntry>) = scene::read_jsonl(path, BANK_SCHEMA)?;
        let cfg: PlannerConfig = serde_json::from_value(header["config"].clone())?;
        let mut p = Self::new(cfg);
        p.dt = header["dt"].as_f64().unwrap_or(0.5) as f32;
        for e in entries {
            p.insert(e);
        }
        Ok(p)
    }
}

impl PlannerModel for KnnPlanner {
    fn train(&mut self, dataset: &Dataset) -> Result<()> {
        for s in &dataset.scenes {
            self.dt = s.ego.dt;
            let raster = self.cfg.raster_for(s)?;
            let feature = self.cfg.features(&raster, s.ego.speed_at(0))?;
            let deltas = relative_deltas(&s.ego, self.cfg.t_e2e)?;
            self.insert(BankEntry { scene_id: s.id.clone(), feature, deltas });
        }
        Ok(())
    }

    fn plan(&self, raster: &SceneRaster, ego_speed: f64) -> Result<Trajectory> {
        let f = self.cfg.features(raster, ego_speed)?;
        self.plan_features(&f)
    }

    /// SHA-256 over the bank, independent of insertion order.
    fn fingerprint(&self) -> String {
        let mut digests: Vec<[u8; 32]> = self
            .bank
            .iter()
            .map(|e| {
                let mut h = Sha256::new();
                h.update(feature_digest(&e.feature));
                for d in &e.deltas {
                    for x in d {
                        h.update(x.to_le_bytes());
                    }
                }
                h.finalize().into()
            })
            .collect();
        digests.sort();
        let mut h = Sha256::new();
        h.update(self.cfg.k.to_le_bytes());
        for d in digests {
            h.update(d);
        }
        hex(&h.finalize())
    }

    fn config(&self) -> &PlannerConfig {
        &self.cfg
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub instance_id: f32,
    pub class: ObjectClass,
    pub detected: bool,
    pub visibility: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: f32,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerOutput {
    /// World-frame plan; pose `i` is timestep `i + 1`.
    pub plan: Trajectory,
    pub detections: Vec<Detection>,
    pub predictions: Vec<Prediction>,
}

/// Mean foreground over an object's footprint pixels at frame 0, across the
/// views whose canvas contains part of it; 0 if no view sees it.
pub fn visibility(scene: &BevScene, raster: &SceneRaster, view: &ViewConfig, instance_id: f32) -> f32 {
    let Some(o) = scene.object(instance_id) else { return 0.0 };
    let (_, _, _, _, w) = raster.dims();
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (v, g) in ViewGeometry::for_scene(scene, view).iter().enumerate() {
        let fg = raster.plane(v, 0, CH_FOREGROUND);
        for (r, c) in g.footprint_cells(o.trajectory.at(0), o.footprint.length as f64, o.footprint.width as f64) {
            if g.pixel_in_frustum(r, c) {
                sum += fg[r * w + c] as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64) as f32
    }
}

/// Plans a scene and attaches detection and constant-velocity predictions.
pub fn run_planner(model: &dyn PlannerModel, scene: &BevScene) -> Result<PlannerOutput> {
    let cfg = model.config();
    let raster = cfg.raster_for(scene)?;
    let local = model.plan(&raster, scene.ego.speed_at(0))?;
    let deltas: Vec<[f32; 3]> = local.poses.iter().map(|p| [p.x, p.y, p.heading]).collect();
    let plan = apply_deltas(scene.ego.at(0), &deltas, scene.ego.dt);
    let mut detections = Vec::new();
    let mut predictions = Vec::new();
    for o in &scene.objects {
        let vis = visibility(scene, &raster, &cfg.view, o.instance_id);
        let detected = vis as f64 >= cfg.visibility_threshold;
        detections.push(Detection { instance_id: o.instance_id, class: o.class, detected, visibility: vis });
        if detected {
            let (a, b) = (o.trajectory.at(0), o.trajectory.at(1));
            let (vx, vy) = (b.x as f64 - a.x as f64, b.y as f64 - a.y as f64);
            let poses = (1..=cfg.t_e2e)
                .map(|t| Pose2::new(a.x as f64 + vx * t as f64, a.y as f64 + vy * t as f64, a.heading as f64))
                .collect();
            predictions.push(Prediction { instance_id: o.instance_id, trajectory: Trajectory { dt: scene.ego.dt, poses } });
        }
    }
    Ok(PlannerOutput { plan, detections, predictions })
}

/// Per-horizon values plus their average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetric {
    pub horizons: Vec<f64>,
    pub values: Vec<f64>,
    pub average: f64,
}

impl HorizonMetric {
    fn new(horizons: &[f64], values: Vec<f64>) -> Self {
        let average = if values.is_empty() { 0.0 } else { values.iter().sum::<f64>() / values.len() as f64 };
        Self { horizons: horizons.to_vec(), values, average }
    }

    /// Element-wise mean of several metrics over the same horizons.
    pub fn mean(horizons: &[f64], items: &[HorizonMetric]) -> Self {
        let mut values = vec![0.0; horizons.len()];
        for m in items {
            for (a, b) in values.iter_mut().zip(&m.values) {
                *a += b;
            }
        }
        if !items.is_empty() {
            values.iter_mut().for_each(|v| *v /= items.len() as f64);
        }
        Self::new(horizons, values)
    }
}

fn horizon_steps(h: f64, dt: f32, available: usize) -> Result<usize> {
    let steps = (h / dt as f64).round() as usize;
    if steps == 0 || steps > available {
        return Err(Error::invalid(format!("horizon {h}s needs {steps} steps, trajectory covers {available}")));
    }
    Ok(steps)
}

/// Mean Euclidean error over timesteps in `(0, h]`. Both trajectories hold
/// future poses, index `i` being timestep `i + 1`.
pub fn l2_error(plan: &Trajectory, gt: &Trajectory, horizons: &[f64]) -> Result<HorizonMetric> {
    let avail = plan.len().min(gt.len());
    let mut values = Vec::new();
    for &h in horizons {
        let n = horizon_steps(h, plan.dt, avail)?;
        values.push((0..n).map(|i| plan.poses[i].distance(&gt.poses[i])).sum::<f64>() / n as f64);
    }
    Ok(HorizonMetric::new(horizons, values))
}

/// 1 at a horizon iff the planned pose at that timestep is within the hit radius.
pub fn hit_rate(plan: &Trajectory, gt: &Trajectory, horizons: &[f64]) -> Result<HorizonMetric> {
    let avail = plan.len().min(gt.len());
    let mut values = Vec::new();
    for &h in horizons {
        let n = horizon_steps(h, plan.dt, avail)?;
        values.push((plan.poses[n - 1].distance(&gt.poses[n - 1]) <= HIT_RADIUS) as u8 as f64);
    }
    Ok(HorizonMetric::new(horizons, values))
}

/// Ground-truth future poses `1..=n` of the scene's expert trajectory.
pub fn future(traj: &Trajectory, n: usize) -> Trajectory {
    Trajectory { dt: traj.dt, poses: (1..=n).map(|t| traj.at(t)).collect() }
}

/// Earliest contact along a planned trajectory (plan pose `i` at timestep `i + 1`).
pub fn plan_contact(scene: &BevScene, plan: &Trajectory, epsilon: f64) -> Option<crate::collision::Contact> {
    first_contact(scene, epsilon, 1..=plan.len(), |t| plan.poses[t - 1])
}

pub fn collision_rate(model: &dyn PlannerModel, dataset: &Dataset, epsilon: f64, horizons: &[f64]) -> Result<HorizonMetric> {
    let mut hits = vec![0usize; horizons.len()];
    for s in &dataset.scenes {
        let out = run_planner(model, s)?;
        let contact = plan_contact(s, &out.plan, epsilon);
        for (i, &h) in horizons.iter().enumerate() {
            let n = horizon_steps(h, s.ego.dt, out.plan.len())?;
            if contact.is_some_and(|c| c.timestep <= n) {
                hits[i] += 1;
            }
        }
    }
    let denom = dataset.len().max(1) as f64;
    Ok(HorizonMetric::new(horizons, hits.into_iter().map(|h| h as f64 / denom).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningMetrics {
    pub l2: HorizonMetric,
    pub collision: HorizonMetric,
    pub hit_rate: HorizonMetric,
    pub scenes: usize,
    pub failures: usize,
}

/// L2, collision rate and hit rate over a dataset in one planning pass.
pub fn evaluate(model: &dyn PlannerModel, dataset: &Dataset, epsilon: f64, horizons: &[f64]) -> Result<PlanningMetrics> {
    let n = model.config().t_e2e;
    let (mut l2s, mut hits) = (Vec::new(), Vec::new());
    let mut coll = vec![0.0; horizons.len()];
    let mut failures = 0;
    for s in &dataset.scenes {
        let out = run_planner(model, s)?;
        let gt = future(&s.ego, n);
        l2s.push(l2_error(&out.plan, &gt, horizons)?);
        hits.push(hit_rate(&out.plan, &gt, horizons)?);
        if let Some(c) = plan_contact(s, &out.plan, epsilon) {
            failures += 1;
            for (i, &h) in horizons.iter().enumerate() {
                if c.timestep <= horizon_steps(h, s.ego.dt, n)? {
                    coll[i] += 1.0;
                }
            }
        }
    }
    let denom = dataset.len().max(1) as f64;
    Ok(PlanningMetrics {
        l2: HorizonMetric::mean(horizons, &l2s),
        collision: HorizonMetric::new(horizons, coll.into_iter().map(|c| c / denom).collect()),
        hit_rate: HorizonMetric::mean(horizons, &hits),
        scenes: dataset.len(),
        failures,
    })
}

fn draw_cells(raster: &mut SceneRaster, channel: usize, v: usize, cells: &[(usize, usize)]) {
    let (_, nt, _, _, w) = raster.dims();
    for t in 0..nt {
        let p = raster.plane_mut(v, t, channel);
        for &(r, c) in cells {
            p[r * w + c] = 1.0;
        }
    }
}

/// Adds plan, prediction and detection channels to a base raster. Overlay
/// channels are cleared first, so applying this twice equals applying it once.
pub fn overlay_outputs(raster: &SceneRaster, output: &PlannerOutput, scene: &BevScene, view: &ViewConfig) -> SceneRaster {
    let (nv, nt, _, h, w) = raster.dims();
    let mut out = raster.with_channels(OVERLAY_CHANNELS);
    let geoms = ViewGeometry::for_scene(scene, view);
    let origin = scene.ego.at(0);
    for (v, g) in geoms.iter().enumerate().take(nv) {
        let to_px = |p: &Pose2| g.world_to_pixel(p.x as f64, p.y as f64);
        if !output.plan.poses.is_empty() {
            let pts: Vec<(f64, f64)> = std::iter::once(&origin).chain(&output.plan.poses).map(to_px).collect();
            draw_cells(&mut out, CH_PLAN, v, &scene::rasterize_polyline_cells(&pts, h, w));
        }
        for pred in &output.predictions {
            let start = scene.object(pred.instance_id).map(|o| o.trajectory.at(0));
            let pts: Vec<(f64, f64)> = start.iter().chain(&pred.trajectory.poses).map(to_px).collect();
            draw_cells(&mut out, CH_PREDICTION, v, &scene::rasterize_polyline_cells(&pts, h, w));
        }
        for d in output.detections.iter().filter(|d| d.detected) {
            if let Some(o) = scene.object(d.instance_id) {
                let cells = g.footprint_cells(o.trajectory.at(0), o.footprint.length as f64, o.footprint.width as f64);
                draw_cells(&mut out, CH_DETECTION, v, &cells);
            }
        }
    }
    debug_assert_eq!(out.dims().1, nt);
    out
}
