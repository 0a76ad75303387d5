//! Scene, layout and dataset types shared by every stage of the loop.

mod io;
mod render;

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TensorND;

pub use io::{load_dataset, read_jsonl, save_dataset, to_fixed_json, write_jsonl, DATASET_SCHEMA};
pub use render::{
    concat_views, project_layout, rasterize_polyline_cells, render_raster, split_views, BoxSlot,
    ProjectedLayout, ViewGeometry, PAD_SENTINEL,
};

pub const CH_FOREGROUND: usize = 0;
pub const CH_ROAD: usize = 1;
pub const CH_AMBIENT: usize = 2;
pub const BASE_CHANNELS: usize = 3;
pub const CH_PLAN: usize = 3;
pub const CH_PREDICTION: usize = 4;
pub const CH_DETECTION: usize = 5;
pub const OVERLAY_CHANNELS: usize = 6;

/// Ego footprint used for collision inflation (length, width) in meters.
pub const EGO_FOOTPRINT: Footprint = Footprint { length: 4.6, width: 1.9 };

/// Wraps an angle in degrees into `[-180, 180)`.
pub fn wrap_degrees(h: f64) -> f64 {
    let x = (h + 180.0).rem_euclid(360.0) - 180.0;
    if x >= 180.0 {
        x - 360.0
    } else {
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f32,
    pub y: f32,
    pub heading: f32,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, heading_deg: f64) -> Self {
        Self { x: x as f32, y: y as f32, heading: wrap_degrees(heading_deg) as f32 }
    }

    pub fn xy(&self) -> (f64, f64) {
        (self.x as f64, self.y as f64)
    }

    pub fn distance(&self, other: &Pose2) -> f64 {
        let (ax, ay) = self.xy();
        let (bx, by) = other.xy();
        (ax - bx).hypot(ay - by)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f32,
    pub poses: Vec<Pose2>,
}

impl Trajectory {
    pub fn new(dt: f32, poses: Vec<Pose2>) -> Result<Self> {
        let t = Self { dt, poses };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("trajectory dt must be > 0, got {}", self.dt)));
        }
        if self.poses.is_empty() {
            return Err(Error::invalid("trajectory has no poses"));
        }
        if self.poses.iter().any(|p| !(p.x.is_finite() && p.y.is_finite() && p.heading.is_finite())) {
            return Err(Error::invalid("trajectory has non-finite pose"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Pose at timestep `t`, holding the final pose past the end.
    pub fn at(&self, t: usize) -> Pose2 {
        self.poses[t.min(self.poses.len() - 1)]
    }

    /// Finite-difference speed between `t` and `t + 1`.
    pub fn speed_at(&self, t: usize) -> f64 {
        if self.poses.len() < 2 {
            return 0.0;
        }
        let t = t.min(self.poses.len() - 2);
        self.poses[t].distance(&self.poses[t + 1]) / self.dt as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Vehicle,
    Pedestrian,
    Barrier,
}

impl ObjectClass {
    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Vehicle => "vehicle",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Barrier => "barrier",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub length: f32,
    pub width: f32,
}

impl Footprint {
    pub fn area(&self) -> f64 {
        self.length as f64 * self.width as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectBox {
    pub instance_id: f32,
    pub class: ObjectClass,
    pub footprint: Footprint,
    pub dense_caption: String,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineClass {
    LaneCenter,
    LaneEdge,
    Crossing,
}

impl LineClass {
    pub fn channel(self) -> usize {
        match self {
            LineClass::LaneCenter => 0,
            LineClass::LaneEdge => 1,
            LineClass::Crossing => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub class: LineClass,
    pub points: Vec<[f32; 2]>,
}

impl Polyline {
    /// Shortest distance from `(x, y)` to any segment.
    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        self.points
            .windows(2)
            .map(|w| segment_distance(x, y, w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    }
}

pub(crate) fn segment_distance(x: f64, y: f64, a: [f32; 2], b: [f32; 2]) -> f64 {
    let (ax, ay, bx, by) = (a[0] as f64, a[1] as f64, b[0] as f64, b[1] as f64);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (x - (ax + t * dx)).hypot(y - (ay + t * dy))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MapLayer {
    pub polylines: Vec<Polyline>,
}

impl MapLayer {
    pub fn lane_centers(&self) -> impl Iterator<Item = &Polyline> {
        self.polylines.iter().filter(|p| p.class == LineClass::LaneCenter)
    }

    /// Distance from a point to the nearest lane edge or crossing line.
    pub fn edge_clearance(&self, x: f64, y: f64) -> f64 {
        self.polylines
            .iter()
            .filter(|p| p.class != LineClass::LaneCenter)
            .map(|p| p.distance_to(x, y))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    Clear,
    Rain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeOfDay {
    Day,
    Night,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    Sparse,
    Moderate,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneTags {
    pub weather: Weather,
    pub time_of_day: TimeOfDay,
    pub density: Density,
}

impl Default for SceneTags {
    fn default() -> Self {
        Self { weather: Weather::Clear, time_of_day: TimeOfDay::Day, density: Density::Sparse }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    Nominal,
    NightLowVisibility,
    DenseCutIn,
    PedestrianCrossing,
    Rain,
}

impl Archetype {
    pub const ALL: [Archetype; 5] = [
        Archetype::Nominal,
        Archetype::NightLowVisibility,
        Archetype::DenseCutIn,
        Archetype::PedestrianCrossing,
        Archetype::Rain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::Nominal => "nominal",
            Archetype::NightLowVisibility => "night_low_visibility",
            Archetype::DenseCutIn => "dense_cut_in",
            Archetype::PedestrianCrossing => "pedestrian_crossing",
            Archetype::Rain => "rain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevScene {
    pub id: String,
    pub archetype: Archetype,
    pub ego: Trajectory,
    pub objects: Vec<ObjectBox>,
    pub map: MapLayer,
    pub caption: String,
    pub keywords: BTreeSet<String>,
    pub tags: SceneTags,
    /// Sensor raster attached to generated scenes; forged scenes are rendered on demand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raster: Option<SceneRaster>,
}

impl BevScene {
    pub fn validate(&self) -> Result<()> {
        self.ego.validate()?;
        let mut ids = HashSet::new();
        for o in &self.objects {
            o.trajectory.validate()?;
            if o.trajectory.dt != self.ego.dt || o.trajectory.len() != self.ego.len() {
                return Err(Error::invalid(format!(
                    "scene {}: object {} trajectory does not share ego timing",
                    self.id, o.instance_id
                )));
            }
            if !(o.footprint.length > 0.0 && o.footprint.width > 0.0) {
                return Err(Error::invalid(format!("scene {}: non-positive footprint", self.id)));
            }
            if !(0.0..=1.0).contains(&o.instance_id) || !ids.insert(o.instance_id.to_bits()) {
                return Err(Error::invalid(format!(
                    "scene {}: instance id {} invalid or duplicated",
                    self.id, o.instance_id
                )));
            }
        }
        if self.map.polylines.iter().any(|p| p.points.len() < 2) {
            return Err(Error::invalid(format!("scene {}: polyline with < 2 points", self.id)));
        }
        if self.keywords.is_empty() {
            return Err(Error::invalid(format!("scene {}: empty keyword set", self.id)));
        }
        Ok(())
    }

    /// Number of timesteps covered by the scene.
    pub fn horizon(&self) -> usize {
        self.ego.len()
    }

    pub fn object(&self, instance_id: f32) -> Option<&ObjectBox> {
        self.objects.iter().find(|o| o.instance_id == instance_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewConfig {
    pub yaw_offsets_deg: Vec<f32>,
    pub fov_deg: f32,
    pub height: usize,
    pub width: usize,
    pub meters_per_px: f32,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            yaw_offsets_deg: vec![0.0, 60.0, 120.0, 180.0, 240.0, 300.0],
            fov_deg: 70.0,
            height: 32,
            width: 32,
            meters_per_px: 1.0,
        }
    }
}

impl ViewConfig {
    /// Validates and sorts the yaw offsets into cyclic order starting at the
    /// smallest non-negative wrapped angle.
    pub fn new(mut yaw_offsets_deg: Vec<f32>, fov_deg: f32, height: usize, width: usize, meters_per_px: f32) -> Result<Self> {
        yaw_offsets_deg.sort_by(|a, b| {
            let ka = (*a as f64).rem_euclid(360.0);
            let kb = (*b as f64).rem_euclid(360.0);
            ka.total_cmp(&kb)
        });
        let cfg = Self { yaw_offsets_deg, fov_deg, height, width, meters_per_px };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.yaw_offsets_deg.is_empty() {
            return Err(Error::invalid("view config needs at least one view"));
        }
        let mut seen = HashSet::new();
        for y in &self.yaw_offsets_deg {
            let k = ((*y as f64).rem_euclid(360.0) * 1e4).round() as i64;
            if !seen.insert(k) {
                return Err(Error::invalid(format!("duplicate yaw offset {y}")));
            }
        }
        if !(self.fov_deg > 0.0 && self.fov_deg <= 360.0) {
            return Err(Error::invalid("fov must be in (0, 360]"));
        }
        if self.height == 0 || self.width == 0 || !(self.meters_per_px > 0.0) {
            return Err(Error::invalid("raster dims must be positive"));
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.yaw_offsets_deg.len()
    }
}

/// Multi-view raster clip of shape `(V, T, C, H, W)`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRaster {
    pub values: TensorND<f32>,
}

impl SceneRaster {
    pub fn new(values: TensorND<f32>) -> Result<Self> {
        if values.shape().len() != 5 {
            return Err(Error::invalid(format!("raster must be 5-D, got {:?}", values.shape())));
        }
        let mut values = values;
        for v in values.values_mut() {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Ok(Self { values })
    }

    pub fn zeros(views: usize, frames: usize, channels: usize, h: usize, w: usize) -> Self {
        Self { values: TensorND::zeros(vec![views, frames, channels, h, w]) }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2], s[3], s[4])
    }

    /// Flat slice of one `(view, frame, channel)` image.
    pub fn plane(&self, v: usize, t: usize, c: usize) -> &[f32] {
        let (_, tt, cc, h, w) = self.dims();
        let o = ((v * tt + t) * cc + c) * h * w;
        &self.values.values()[o..o + h * w]
    }

    pub fn plane_mut(&mut self, v: usize, t: usize, c: usize) -> &mut [f32] {
        let (_, tt, cc, h, w) = self.dims();
        let o = ((v * tt + t) * cc + c) * h * w;
        &mut self.values.values_mut()[o..o + h * w]
    }

    /// Copy restricted to the first `channels` channels.
    pub fn with_channels(&self, channels: usize) -> SceneRaster {
        let (vv, tt, cc, h, w) = self.dims();
        let mut out = SceneRaster::zeros(vv, tt, channels, h, w);
        for v in 0..vv {
            for t in 0..tt {
                for c in 0..channels.min(cc) {
                    out.plane_mut(v, t, c).copy_from_slice(self.plane(v, t, c));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Forged,
    Generated,
    Retrieved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub provenance: Provenance,
    pub scenes: Vec<BevScene>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, provenance: Provenance, scenes: Vec<BevScene>) -> Result<Self> {
        let d = Self { name: name.into(), provenance, scenes };
        d.validate()?;
        Ok(d)
    }

    pub fn empty(name: impl Into<String>, provenance: Provenance) -> Self {
        Self { name: name.into(), provenance, scenes: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for s in &self.scenes {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::invalid(format!("duplicate scene id {} in {}", s.id, self.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&BevScene> {
        self.scenes.iter().find(|s| s.id == id)
    }
}
