//! Seeded procedural scene generation.

mod expert;
pub mod lexicon;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collision::{first_contact, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::scene::{
    Archetype, BevScene, Dataset, Density, Footprint, LineClass, MapLayer, ObjectBox, ObjectClass, Polyline, Pose2,
    Provenance, SceneTags, TimeOfDay, Trajectory, Weather,
};

pub use expert::{expert_policy, ExpertParams};
pub use lexicon::Category;

pub const LANE_WIDTH: f64 = 3.5;
const MAX_ATTEMPTS: usize = 64;

const CAR: Footprint = Footprint { length: 4.5, width: 1.9 };
const PEDESTRIAN: Footprint = Footprint { length: 0.6, width: 0.6 };
const BARRIER: Footprint = Footprint { length: 2.5, width: 0.8 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub n_scenes: usize,
    pub mixture: BTreeMap<Archetype, f64>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_dt")]
    pub dt: f32,
    pub seed: u64,
}

fn default_name() -> String {
    "forged".into()
}

fn default_horizon() -> usize {
    16
}

fn default_dt() -> f32 {
    0.5
}

impl ForgeSpec {
    pub fn new(n_scenes: usize, mixture: &[(Archetype, f64)], seed: u64) -> Self {
        Self {
            name: default_name(),
            n_scenes,
            mixture: mixture.iter().copied().collect(),
            horizon: default_horizon(),
            dt: default_dt(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 {
            return Err(Error::invalid("n_scenes must be >= 1"));
        }
        if self.mixture.values().any(|&f| !(f >= 0.0 && f.is_finite())) {
            return Err(Error::invalid("mixture fractions must be finite and >= 0"));
        }
        let total: f64 = self.mixture.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture fractions sum to {total}, expected 1")));
        }
        if self.horizon < 8 {
            return Err(Error::invalid("horizon must be >= 8 timesteps"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::invalid("dt must be > 0"));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` scenes; ties in the remainder go
/// to the archetype declared first.
pub fn allocate_counts(mixture: &BTreeMap<Archetype, f64>, n: usize) -> BTreeMap<Archetype, usize> {
    let mut counts: BTreeMap<Archetype, usize> = BTreeMap::new();
    let mut rems = Vec::new();
    for (&a, &f) in mixture {
        let exact = f * n as f64;
        let base = exact.floor() as usize;
        counts.insert(a, base);
        rems.push((exact - base as f64, a));
    }
    let assigned: usize = counts.values().sum();
    rems.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    for (_, a) in rems.into_iter().take(n.saturating_sub(assigned)) {
        *counts.get_mut(&a).unwrap() += 1;
    }
    counts
}

/// Counter-based generator for scene `index` under `seed`.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

pub fn forge_dataset(spec: &ForgeSpec) -> Result<Dataset> {
    spec.validate()?;
    let counts = allocate_counts(&spec.mixture, spec.n_scenes);
    let mut plan: Vec<Archetype> = counts.iter().flat_map(|(&a, &c)| std::iter::repeat_n(a, c)).collect();
    plan.shuffle(&mut scene_rng(spec.seed, u64::MAX - 1));
    let scenes = plan
        .iter()
        .enumerate()
        .map(|(i, &a)| forge_scene(&format!("{}-{i:05}", spec.name), a, spec, &mut scene_rng(spec.seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(spec.name.clone(), Provenance::Forged, scenes)
}

/// Samples scenes of one archetype until the expert drives it without contact.
fn forge_scene(id: &str, archetype: Archetype, spec: &ForgeSpec, rng: &mut ChaCha8Rng) -> Result<BevScene> {
    for _ in 0..MAX_ATTEMPTS {
        let (mut scene, params) = sample_layout(id, archetype, spec, rng);
        scene.ego = expert_policy(&scene, &params)?;
        if first_contact(&scene, DEFAULT_EPSILON, 0..scene.horizon(), |t| scene.ego.at(t)).is_none() {
            scene.validate()?;
            return Ok(scene);
        }
    }
    Err(Error::invalid(format!("could not forge a contact-free {} scene for {id}", archetype.name())))
}

pub fn straight_road(crossing_x: Option<f64>) -> MapLayer {
    let line = |class, y: f64| Polyline { class, points: vec![[-60.0, y as f32], [260.0, y as f32]] };
    let mut polylines = vec![
        line(LineClass::LaneCenter, 0.0),
        line(LineClass::LaneCenter, LANE_WIDTH),
        line(LineClass::LaneCenter, -LANE_WIDTH),
    ];
    for k in [-1.5, -0.5, 0.5, 1.5] {
        polylines.push(line(LineClass::LaneEdge, k * LANE_WIDTH));
    }
    if let Some(x) = crossing_x {
        polylines.push(Polyline { class: LineClass::Crossing, points: vec![[x as f32, -7.0], [x as f32, 7.0]] });
    }
    MapLayer { polylines }
}

fn cruise(x0: f64, y: f64, v: f64, dt: f64, horizon: usize) -> Trajectory {
    let poses = (0..horizon).map(|t| Pose2::new(x0 + v * t as f64 * dt, y, 0.0)).collect();
    Trajectory { dt: dt as f32, poses }
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

struct Builder {
    objects: Vec<ObjectBox>,
}

impl Builder {
    fn push(&mut self, class: ObjectClass, footprint: Footprint, caption: &str, trajectory: Trajectory) {
        let id = (self.objects.len() + 1) as f32 / 32.0;
        self.objects.push(ObjectBox {
            instance_id: id,
            class,
            footprint,
            dense_caption: caption.into(),
            trajectory,
        });
    }

    /// Same-direction traffic in the given adjacent lanes, spaced apart.
    fn adjacent_traffic(&mut self, rng: &mut ChaCha8Rng, lanes: &[f64], count: usize, v0: f64, dt: f64, horizon: usize) {
        let mut slots: Vec<(f64, f64)> = lanes
            .iter()
            .flat_map(|&y| (0..7).map(move |k| (y, -12.0 + 12.0 * k as f64)))
            .collect();
        slots.shuffle(rng);
        let v = v0 + rng.gen_range(-0.5..0.5);
        for (y, x) in slots.into_iter().take(count) {
            self.push(ObjectClass::Vehicle, CAR, "vehicle", cruise(x + rng.gen_range(-2.0..2.0), y, v, dt, horizon));
        }
    }
}

fn keywords(words: &[&str]) -> BTreeSet<String> {
    words.iter().map(|w| w.to_string()).collect()
}

fn sample_layout(id: &str, archetype: Archetype, spec: &ForgeSpec, rng: &mut ChaCha8Rng) -> (BevScene, ExpertParams) {
    let dt = spec.dt as f64;
    let h = spec.horizon;
    let v0: f64 = rng.gen_range(7.0..9.0);
    let mut b = Builder { objects: Vec::new() };
    let mut crossing = None;
    let (tags, kws, caption) = match archetype {
        Archetype::Nominal => {
            let moderate = rng.gen_bool(0.5);
            let n = if moderate { rng.gen_range(3..=5) } else { rng.gen_range(0..=2) };
            b.adjacent_traffic(rng, &[LANE_WIDTH, -LANE_WIDTH], n, v0, dt, h);
            let density = if moderate { "moderate" } else { "sparse" };
            (
                SceneTags { weather: Weather::Clear, time_of_day: TimeOfDay::Day, density: if moderate { Density::Moderate } else { Density::Sparse } },
                keywords(&["day", "clear", "lane_follow", density]),
                format!("clear day, lane following in {density} traffic"),
            )
        }
        Archetype::NightLowVisibility => {
            let d = 2.4 + v0 * rng.gen_range(1.9..2.7);
            let barrier = rng.gen_bool(0.5);
            if barrier {
                let poses = (0..h).map(|_| Pose2::new(d, 0.0, 90.0)).collect();
                b.push(ObjectClass::Barrier, BARRIER, "construction barrier", Trajectory { dt: spec.dt, poses });
            } else {
                b.push(ObjectClass::Vehicle, CAR, "stopped vehicle", cruise(d, 0.0, 0.0, dt, h));
            }
            let n = rng.gen_range(0..=1);
            b.adjacent_traffic(rng, &[LANE_WIDTH, -LANE_WIDTH], n, v0, dt, h);
            let tags = SceneTags { weather: Weather::Clear, time_of_day: TimeOfDay::Night, density: Density::Sparse };
            if barrier {
                (
                    tags,
                    keywords(&["night", "low_visibility", "sparse", "barrier", "construction"]),
                    "night, low visibility, construction barrier blocking the lane in sparse traffic".to_string(),
                )
            } else {
                (
                    tags,
                    keywords(&["night", "low_visibility", "sparse", "stopped_vehicle"]),
                    "night, low visibility, stopped vehicle ahead in the ego lane".to_string(),
                )
            }
        }
        Archetype::DenseCutIn => {
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let dv: f64 = rng.gen_range(2.5..4.5);
            let vc = v0 - dv;
            let x0 = 6.0 + rng.gen_range(0.0..6.0);
            let t_start: f64 = rng.gen_range(0.0..0.8);
            let dur = 1.5;
            let poses = (0..h)
                .map(|t| {
                    let tt = t as f64 * dt;
                    let u = (tt - t_start) / dur;
                    let y = side * LANE_WIDTH * (1.0 - smoothstep(u));
                    let slope = if (0.0..1.0).contains(&u) { -side * LANE_WIDTH * 6.0 * u * (1.0 - u) / dur } else { 0.0 };
                    Pose2::new(x0 + vc * tt, y, slope.atan2(vc.max(0.1)).to_degrees())
                })
                .collect();
            b.push(ObjectClass::Vehicle, CAR, "cut-in vehicle", Trajectory { dt: spec.dt, poses });
            let n = rng.gen_range(3..=5);
            b.adjacent_traffic(rng, &[-side * LANE_WIDTH], n, v0, dt, h);
            (
                SceneTags { weather: Weather::Clear, time_of_day: TimeOfDay::Day, density: Density::Dense },
                keywords(&["dense_traffic", "cut_in", "vehicle", "lane_change"]),
                "dense traffic, vehicle cut in with a lane change ahead of ego".to_string(),
            )
        }
        Archetype::PedestrianCrossing => {
            let t_arrive: f64 = rng.gen_range(1.4..2.4);
            let xc = v0 * t_arrive;
            crossing = Some(xc);
            let walk = 1.4;
            let t_mid = t_arrive + rng.gen_range(-0.2..0.2);
            let poses = (0..h)
                .map(|t| Pose2::new(xc, walk * (t as f64 * dt - t_mid), 90.0))
                .collect();
            b.push(ObjectClass::Pedestrian, PEDESTRIAN, "crossing pedestrian", Trajectory { dt: spec.dt, poses });
            let n = rng.gen_range(0..=1);
            b.adjacent_traffic(rng, &[LANE_WIDTH], n, v0, dt, h);
            (
                SceneTags { weather: Weather::Clear, time_of_day: TimeOfDay::Day, density: Density::Sparse },
                keywords(&["pedestrian", "crossing", "sparse"]),
                "pedestrian on a crossing ahead in sparse traffic".to_string(),
            )
        }
        Archetype::Rain => {
            let vs: f64 = rng.gen_range(1.0..3.0);
            let d = 2.4 + (v0 - vs) * rng.gen_range(1.6..2.6);
            b.push(ObjectClass::Vehicle, CAR, "slow vehicle", cruise(d, 0.0, vs, dt, h));
            let n = rng.gen_range(1..=3);
            b.adjacent_traffic(rng, &[LANE_WIDTH, -LANE_WIDTH], n, v0, dt, h);
            (
                SceneTags { weather: Weather::Rain, time_of_day: TimeOfDay::Day, density: Density::Moderate },
                keywords(&["rain", "wet_road", "slow_vehicle", "moderate"]),
                "rain on a wet road, slow vehicle ahead in moderate traffic".to_string(),
            )
        }
    };
    let ego = Trajectory { dt: spec.dt, poses: vec![Pose2::new(0.0, 0.0, 0.0); h] };
    let scene = BevScene {
        id: id.to_string(),
        archetype,
        ego,
        objects: b.objects,
        map: straight_road(crossing),
        caption,
        keywords: kws,
        tags,
        raster: None,
    };
    (scene, ExpertParams { target_speed: v0, ..ExpertParams::default() })
}
