//! Semantic BEV rasterization and layout projection.
//!
//! Each view is an angular sector of the ego-centric top-down plane at the
//! first timestep: row 0 is the far edge, the bottom row touches the ego, and
//! columns run right-to-left in lateral offset. Frame `f` shows objects at
//! timestep `f` in that fixed frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    BevScene, LineClass, Pose2, SceneRaster, TimeOfDay, ViewConfig, Weather, BASE_CHANNELS,
    CH_AMBIENT, CH_FOREGROUND, CH_ROAD,
};
use crate::error::{Error, Result};
use crate::tensor::TensorND;

/// Value written into every field of a padded layout slot.
pub const PAD_SENTINEL: f32 = -1.0;

const SUPERSAMPLE: usize = 4;
const NIGHT_FG: f32 = 0.4;
const NIGHT_ROAD: f32 = 0.5;
const RAIN_AMBIENT: f32 = 0.8;
const RAIN_NOISE_STD: f64 = 0.08;

#[derive(Debug, Clone, Copy)]
pub struct ViewGeometry {
    ox: f64,
    oy: f64,
    cos: f64,
    sin: f64,
    half_fov: f64,
    pub height: usize,
    pub width: usize,
    pub mpp: f64,
}

impl ViewGeometry {
    pub fn new(origin: Pose2, yaw_deg: f64, cfg: &ViewConfig) -> Self {
        let phi = (origin.heading as f64 + yaw_deg).to_radians();
        Self {
            ox: origin.x as f64,
            oy: origin.y as f64,
            cos: phi.cos(),
            sin: phi.sin(),
            half_fov: (cfg.fov_deg as f64 / 2.0).to_radians(),
            height: cfg.height,
            width: cfg.width,
            mpp: cfg.meters_per_px as f64,
        }
    }

    /// One geometry per configured view, anchored at the scene's first ego pose.
    pub fn for_scene(scene: &BevScene, cfg: &ViewConfig) -> Vec<Self> {
        let origin = scene.ego.at(0);
        cfg.yaw_offsets_deg.iter().map(|&y| Self::new(origin, y as f64, cfg)).collect()
    }

    /// World point to `(forward, lateral)` meters in the view frame.
    pub fn to_view(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.ox, y - self.oy);
        (dx * self.cos + dy * self.sin, -dx * self.sin + dy * self.cos)
    }

    pub fn to_world(&self, fwd: f64, lat: f64) -> (f64, f64) {
        (self.ox + fwd * self.cos - lat * self.sin, self.oy + fwd * self.sin + lat * self.cos)
    }

    /// View-frame meters to continuous `(row, col)` pixel coordinates.
    pub fn to_pixel(&self, fwd: f64, lat: f64) -> (f64, f64) {
        (self.height as f64 - fwd / self.mpp, self.width as f64 / 2.0 - lat / self.mpp)
    }

    pub fn from_pixel(&self, row: f64, col: f64) -> (f64, f64) {
        ((self.height as f64 - row) * self.mpp, (self.width as f64 / 2.0 - col) * self.mpp)
    }

    pub fn world_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let (f, l) = self.to_view(x, y);
        self.to_pixel(f, l)
    }

    pub fn in_frustum(&self, fwd: f64, lat: f64) -> bool {
        lat.atan2(fwd).abs() <= self.half_fov
    }

    pub fn pixel_in_frustum(&self, r: usize, c: usize) -> bool {
        let (f, l) = self.from_pixel(r as f64 + 0.5, c as f64 + 0.5);
        self.in_frustum(f, l)
    }

    /// Inclusive-exclusive pixel window bounding a rotated rectangle.
    fn pixel_window(&self, pose: Pose2, length: f64, width: f64) -> Option<(usize, usize, usize, usize)> {
        let corners = rect_corners(pose, length, width);
        let (mut r0, mut r1, mut c0, mut c1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in corners {
            let (r, c) = self.world_to_pixel(x, y);
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
        }
        let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
        let (ra, rb) = (clamp(r0.floor(), self.height), clamp(r1.ceil(), self.height));
        let (ca, cb) = (clamp(c0.floor(), self.width), clamp(c1.ceil(), self.width));
        (ra < rb && ca < cb).then_some((ra, rb, ca, cb))
    }

    /// Fractional coverage of each pixel by a rotated rectangle, via a 4×4
    /// supersample. Pixels outside the frustum are skipped.
    pub fn coverage(&self, pose: Pose2, length: f64, width: f64) -> Vec<(usize, usize, f32)> {
        let mut out = Vec::new();
        let Some((ra, rb, ca, cb)) = self.pixel_window(pose, length, width) else {
            return out;
        };
        let step = 1.0 / SUPERSAMPLE as f64;
        for r in ra..rb {
            for c in ca..cb {
                if !self.pixel_in_frustum(r, c) {
                    continue;
                }
                let mut hits = 0usize;
                for i in 0..SUPERSAMPLE {
                    for j in 0..SUPERSAMPLE {
                        let (f, l) = self.from_pixel(r as f64 + (i as f64 + 0.5) * step, c as f64 + (j as f64 + 0.5) * step);
                        let (x, y) = self.to_world(f, l);
                        hits += inside_rect(pose, length, width, x, y) as usize;
                    }
                }
                if hits > 0 {
                    out.push((r, c, hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32));
                }
            }
        }
        out
    }

    /// Pixels whose centers fall inside a rotated rectangle (frustum ignored).
    pub fn footprint_cells(&self, pose: Pose2, length: f64, width: f64) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if let Some((ra, rb, ca, cb)) = self.pixel_window(pose, length, width) {
            for r in ra..rb {
                for c in ca..cb {
                    let (f, l) = self.from_pixel(r as f64 + 0.5, c as f64 + 0.5);
                    let (x, y) = self.to_world(f, l);
                    if inside_rect(pose, length, width, x, y) {
                        out.push((r, c));
                    }
                }
            }
        }
        out
    }
}

fn rect_corners(pose: Pose2, length: f64, width: f64) -> [(f64, f64); 4] {
    let th = (pose.heading as f64).to_radians();
    let (ux, uy) = (th.cos(), th.sin());
    let (hl, hw) = (length / 2.0, width / 2.0);
    let (cx, cy) = pose.xy();
    [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)]
        .map(|(a, b)| (cx + a * hl * ux - b * hw * uy, cy + a * hl * uy + b * hw * ux))
}

fn inside_rect(pose: Pose2, length: f64, width: f64, x: f64, y: f64) -> bool {
    let th = (pose.heading as f64).to_radians();
    let (dx, dy) = (x - pose.x as f64, y - pose.y as f64);
    let along = dx * th.cos() + dy * th.sin();
    let across = -dx * th.sin() + dy * th.cos();
    along.abs() <= length / 2.0 && across.abs() <= width / 2.0
}

fn check_horizon(scene: &BevScene, frames: usize) -> Result<()> {
    if frames == 0 || scene.horizon() < frames {
        return Err(Error::invalid(format!(
            "scene {} horizon {} shorter than {frames} frames",
            scene.id,
            scene.horizon()
        )));
    }
    Ok(())
}

fn road_intensity(class: LineClass) -> f32 {
    match class {
        LineClass::LaneEdge => 1.0,
        LineClass::Crossing => 0.8,
        LineClass::LaneCenter => 0.6,
    }
}

/// Per-class line masks for one view: `[class][pixel]`, frustum applied.
fn line_masks(scene: &BevScene, g: &ViewGeometry) -> [Vec<f32>; 3] {
    let (h, w) = (g.height, g.width);
    let mut out = [vec![0.0; h * w], vec![0.0; h * w], vec![0.0; h * w]];
    let half = 0.5 * g.mpp;
    for r in 0..h {
        for c in 0..w {
            if !g.pixel_in_frustum(r, c) {
                continue;
            }
            let (f, l) = g.from_pixel(r as f64 + 0.5, c as f64 + 0.5);
            let (x, y) = g.to_world(f, l);
            for p in &scene.map.polylines {
                if p.distance_to(x, y) <= half {
                    out[p.class.channel()][r * w + c] = 1.0;
                }
            }
        }
    }
    out
}

/// Renders the base channels (foreground, road, ambient) for `frames` timesteps.
pub fn render_raster(scene: &BevScene, cfg: &ViewConfig, frames: usize, noise_seed: u64) -> Result<SceneRaster> {
    cfg.validate()?;
    check_horizon(scene, frames)?;
    let geoms = ViewGeometry::for_scene(scene, cfg);
    let (h, w) = (cfg.height, cfg.width);
    let mut raster = SceneRaster::zeros(geoms.len(), frames, BASE_CHANNELS, h, w);
    let night = scene.tags.time_of_day == TimeOfDay::Night;
    let rain = scene.tags.weather == Weather::Rain;
    let fg_gain = if night { NIGHT_FG } else { 1.0 };
    let road_gain = if night { NIGHT_ROAD } else { 1.0 };
    let mut ambient = if night { 0.25 } else { 0.9 };
    if rain {
        ambient *= RAIN_AMBIENT;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Normal::new(0.0, RAIN_NOISE_STD).expect("valid std");

    for (v, g) in geoms.iter().enumerate() {
        let frustum: Vec<bool> = (0..h * w).map(|i| g.pixel_in_frustum(i / w, i % w)).collect();
        let masks = line_masks(scene, g);
        let mut road = vec![0.0f32; h * w];
        for (ci, class) in [LineClass::LaneCenter, LineClass::LaneEdge, LineClass::Crossing].into_iter().enumerate() {
            for (dst, m) in road.iter_mut().zip(&masks[ci]) {
                *dst = dst.max(m * road_intensity(class));
            }
        }
        for f in 0..frames {
            {
                let fg = raster.plane_mut(v, f, CH_FOREGROUND);
                for o in &scene.objects {
                    let pose = o.trajectory.at(f);
                    for (r, c, cov) in g.coverage(pose, o.footprint.length as f64, o.footprint.width as f64) {
                        fg[r * w + c] += cov;
                    }
                }
                for x in fg.iter_mut() {
                    *x = x.min(1.0) * fg_gain;
                }
            }
            raster.plane_mut(v, f, CH_ROAD).iter_mut().zip(&road).for_each(|(d, s)| *d = s * road_gain);
            raster
                .plane_mut(v, f, CH_AMBIENT)
                .iter_mut()
                .zip(&frustum)
                .for_each(|(d, &inside)| *d = if inside { ambient } else { 0.0 });
            if rain {
                for c in 0..BASE_CHANNELS {
                    for (x, &inside) in raster.plane_mut(v, f, c).iter_mut().zip(&frustum) {
                        if inside {
                            *x = (*x + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
    }
    Ok(raster)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSlot {
    /// Normalized `[x_min, y_min, x_max, y_max]` (x = column / W, y = row / H).
    pub bbox: [f32; 4],
    /// Heading relative to the view axis, degrees in `[-180, 180)`.
    pub heading: f32,
    pub instance_id: f32,
    pub dense_caption: String,
}

impl BoxSlot {
    pub fn padding() -> Self {
        Self { bbox: [PAD_SENTINEL; 4], heading: PAD_SENTINEL, instance_id: PAD_SENTINEL, dense_caption: String::new() }
    }
}

/// Foreground boxes per view/frame (padded to `n_box`) plus the road layout raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedLayout {
    pub n_views: usize,
    pub frames: usize,
    pub n_box: usize,
    /// `n_views * frames * n_box` slots, view-major.
    pub slots: Vec<BoxSlot>,
    pub mask: Vec<bool>,
    /// Shape `(V, T, 3, H, W)`, one channel per line class.
    pub back: TensorND<f32>,
}

impl ProjectedLayout {
    fn base(&self, v: usize, f: usize) -> usize {
        (v * self.frames + f) * self.n_box
    }

    pub fn slots_at(&self, v: usize, f: usize) -> &[BoxSlot] {
        let b = self.base(v, f);
        &self.slots[b..b + self.n_box]
    }

    pub fn mask_at(&self, v: usize, f: usize) -> &[bool] {
        let b = self.base(v, f);
        &self.mask[b..b + self.n_box]
    }

    pub fn visible_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn project_layout(scene: &BevScene, cfg: &ViewConfig, frames: usize, n_box: usize) -> Result<ProjectedLayout> {
    cfg.validate()?;
    check_horizon(scene, frames)?;
    if n_box == 0 {
        return Err(Error::invalid("n_box must be positive"));
    }
    let geoms = ViewGeometry::for_scene(scene, cfg);
    let (h, w) = (cfg.height, cfg.width);
    let nv = geoms.len();
    let mut slots = Vec::with_capacity(nv * frames * n_box);
    let mut mask = Vec::with_capacity(nv * frames * n_box);
    let mut back = TensorND::zeros(vec![nv, frames, 3, h, w]);
    let plane = h * w;

    for (v, g) in geoms.iter().enumerate() {
        let masks = line_masks(scene, g);
        for f in 0..frames {
            for (ci, m) in masks.iter().enumerate() {
                let o = ((v * frames + f) * 3 + ci) * plane;
                back.values_mut()[o..o + plane].copy_from_slice(m);
            }
            let mut visible: Vec<(f64, BoxSlot)> = Vec::new();
            for o in &scene.objects {
                let pose = o.trajectory.at(f);
                let (fw, lt) = g.to_view(pose.x as f64, pose.y as f64);
                let (rc, cc) = g.to_pixel(fw, lt);
                let on_canvas = (0.0..h as f64).contains(&rc) && (0.0..w as f64).contains(&cc);
                if !(on_canvas && g.in_frustum(fw, lt)) {
                    continue;
                }
                let corners = rect_corners(pose, o.footprint.length as f64, o.footprint.width as f64);
                let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
                for (x, y) in corners {
                    let (r, c) = g.world_to_pixel(x, y);
                    x0 = x0.min(c / w as f64);
                    x1 = x1.max(c / w as f64);
                    y0 = y0.min(r / h as f64);
                    y1 = y1.max(r / h as f64);
                }
                let clip = |v: f64| v.clamp(0.0, 1.0) as f32;
                let rel = super::wrap_degrees(o.trajectory.at(f).heading as f64 - g_yaw(scene, cfg, v));
                visible.push((
                    fw.hypot(lt),
                    BoxSlot {
                        bbox: [clip(x0), clip(y0), clip(x1), clip(y1)],
                        heading: rel as f32,
                        instance_id: o.instance_id,
                        dense_caption: o.dense_caption.clone(),
                    },
                ));
            }
            visible.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.instance_id.total_cmp(&b.1.instance_id)));
            visible.truncate(n_box);
            let k = visible.len();
            for (_, s) in visible {
                slots.push(s);
                mask.push(true);
            }
            for _ in k..n_box {
                slots.push(BoxSlot::padding());
                mask.push(false);
            }
        }
    }
    Ok(ProjectedLayout { n_views: nv, frames, n_box, slots, mask, back })
}

fn g_yaw(scene: &BevScene, cfg: &ViewConfig, v: usize) -> f64 {
    scene.ego.at(0).heading as f64 + cfg.yaw_offsets_deg[v] as f64
}

/// Tiles views left-to-right: `(V, T, C, H, W)` → `(T, C, H, V·W)`.
pub fn concat_views(raster: &SceneRaster) -> TensorND<f32> {
    let (nv, t, c, h, w) = raster.dims();
    let src = raster.values.values();
    let mut out = vec![0.0f32; src.len()];
    let vw = nv * w;
    for v in 0..nv {
        for ti in 0..t {
            for ci in 0..c {
                for r in 0..h {
                    let s = (((v * t + ti) * c + ci) * h + r) * w;
                    let d = ((ti * c + ci) * h + r) * vw + v * w;
                    out[d..d + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
    }
    TensorND::new(vec![t, c, h, vw], out).expect("shape preserved")
}

/// Inverse of [`concat_views`].
pub fn split_views(tiled: &TensorND<f32>, n_views: usize) -> Result<SceneRaster> {
    let s = tiled.shape();
    if s.len() != 4 || n_views == 0 || !s[3].is_multiple_of(n_views) {
        return Err(Error::invalid(format!("cannot split {:?} into {n_views} views", s)));
    }
    let (t, c, h, vw) = (s[0], s[1], s[2], s[3]);
    let w = vw / n_views;
    let src = tiled.values();
    let mut out = vec![0.0f32; src.len()];
    for v in 0..n_views {
        for ti in 0..t {
            for ci in 0..c {
                for r in 0..h {
                    let d = (((v * t + ti) * c + ci) * h + r) * w;
                    let o = ((ti * c + ci) * h + r) * vw + v * w;
                    out[d..d + w].copy_from_slice(&src[o..o + w]);
                }
            }
        }
    }
    Ok(SceneRaster { values: TensorND::new(vec![n_views, t, c, h, w], out)? })
}

/// Grid cells visited by a polyline given in continuous `(row, col)` pixel
/// coordinates, by exact voxel traversal. A point belongs to cell
/// `(floor(row), floor(col))`; cells outside `h × w` are dropped.
pub fn rasterize_polyline_cells(points: &[(f64, f64)], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut cells = std::collections::BTreeSet::new();
    if points.len() == 1 {
        push_cell(&mut cells, points[0].0.floor(), points[0].1.floor(), h, w);
    }
    for seg in points.windows(2) {
        traverse(seg[0], seg[1], h, w, &mut cells);
    }
    cells.into_iter().collect()
}

fn push_cell(cells: &mut std::collections::BTreeSet<(usize, usize)>, r: f64, c: f64, h: usize, w: usize) {
    if r >= 0.0 && c >= 0.0 && (r as usize) < h && (c as usize) < w {
        cells.insert((r as usize, c as usize));
    }
}

fn traverse(a: (f64, f64), b: (f64, f64), h: usize, w: usize, cells: &mut std::collections::BTreeSet<(usize, usize)>) {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let (mut iy, mut ix) = (a.0.floor(), a.1.floor());
    // Positive steps enter the next cell exactly at the boundary; negative
    // steps leave the current cell only after it.
    let axis = |p: f64, i: f64, d: f64| -> (f64, f64, f64) {
        if d > 0.0 {
            (1.0, (i + 1.0 - p) / d, 1.0 / d)
        } else if d < 0.0 {
            (-1.0, (p - i) / -d, -1.0 / d)
        } else {
            (0.0, f64::INFINITY, f64::INFINITY)
        }
    };
    let (sy, mut ty, dty) = axis(a.0, iy, dy);
    let (sx, mut tx, dtx) = axis(a.1, ix, dx);
    let within = |t: f64, s: f64| if s > 0.0 { t <= 1.0 } else { t < 1.0 };
    push_cell(cells, iy, ix, h, w);
    let limit = (dy.abs() + dx.abs()) as usize + 4;
    for _ in 0..limit {
        let step_y = within(ty, sy) && ty <= tx;
        let step_x = within(tx, sx) && tx <= ty;
        if !step_x && !step_y {
            break;
        }
        if step_y {
            iy += sy;
            ty += dty;
        }
        if step_x {
            ix += sx;
            tx += dtx;
        }
        push_cell(cells, iy, ix, h, w);
    }
}
