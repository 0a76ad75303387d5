#![allow(dead_code)]

use corrloop::forge::straight_road;
use corrloop::planner::{PlannerConfig, PlannerModel};
use corrloop::scene::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn view() -> ViewConfig {
    ViewConfig::new(vec![0.0, 180.0], 120.0, 16, 16, 2.0).unwrap()
}

/// Plans a straight line at the observed ego speed, or a fixed trajectory.
pub struct Scripted {
    pub cfg: PlannerConfig,
    pub fixed: Option<Trajectory>,
}

impl Scripted {
    pub fn constant_speed() -> Self {
        Self { cfg: PlannerConfig { view: view(), frames: 2, ..PlannerConfig::default() }, fixed: None }
    }
}

impl PlannerModel for Scripted {
    fn train(&mut self, _: &Dataset) -> corrloop::Result<()> {
        Ok(())
    }

    fn plan(&self, _: &SceneRaster, speed: f64) -> corrloop::Result<Trajectory> {
        if let Some(t) = &self.fixed {
            return Ok(t.clone());
        }
        let n = self.cfg.t_e2e;
        Trajectory::new(0.5, (1..=n).map(|t| Pose2::new(speed * 0.5 * t as f64, 0.0, 0.0)).collect())
    }

    fn fingerprint(&self) -> String {
        "scripted".into()
    }

    fn config(&self) -> &PlannerConfig {
        &self.cfg
    }
}

fn linear(rng: &mut ChaCha8Rng, x: (f64, f64), y: (f64, f64), v: f64, n: usize) -> Trajectory {
    let (x0, y0) = (rng.gen_range(x.0..x.1), rng.gen_range(y.0..y.1));
    let (vx, vy) = (rng.gen_range(-v..v), rng.gen_range(-v..v));
    let heading = vy.atan2(vx).to_degrees();
    Trajectory::new(0.5, (0..n).map(|t| Pose2::new(x0 + vx * 0.5 * t as f64, y0 + vy * 0.5 * t as f64, heading)).collect()).unwrap()
}

/// A scene with 1–5 objects on random straight paths around an ego cruising
/// at a random speed along +x.
pub fn random_scene(rng: &mut ChaCha8Rng, id: String) -> BevScene {
    let n = 8;
    let speed = rng.gen_range(0.0..10.0);
    let ego = Trajectory::new(0.5, (0..n).map(|t| Pose2::new(speed * 0.5 * t as f64, 0.0, 0.0)).collect()).unwrap();
    let count = rng.gen_range(1..=5);
    let objects = (0..count)
        .map(|j| {
            let class = [ObjectClass::Vehicle, ObjectClass::Pedestrian, ObjectClass::Barrier][rng.gen_range(0..3)];
            let footprint = match class {
                ObjectClass::Vehicle => Footprint { length: 4.5, width: 1.8 },
                ObjectClass::Pedestrian => Footprint { length: 0.6, width: 0.6 },
                ObjectClass::Barrier => Footprint { length: 2.5, width: 0.8 },
            };
            ObjectBox {
                instance_id: (j + 1) as f32 / 8.0,
                class,
                footprint,
                dense_caption: class.name().into(),
                trajectory: linear(rng, (-5.0, 40.0), (-6.0, 6.0), 6.0, n),
            }
        })
        .collect();
    BevScene {
        id,
        archetype: Archetype::Nominal,
        ego,
        objects,
        map: straight_road(None),
        caption: "random".into(),
        keywords: ["vehicle".to_string()].into_iter().collect(),
        tags: SceneTags::default(),
        raster: None,
    }
}

/// A run small enough for a unit-test budget: 40/20 scenes, two frames and a
/// one-epoch, two-block generator.
pub const TINY_RUN: &str = r#"
[run]
name = "tiny"
iterations = 2
early_stop = false
baseline_aide = true

[forge.train]
name = "train"
n_scenes = 40
seed = 1
[forge.train.mixture]
nominal = 0.6
pedestrian_crossing = 0.2
dense_cut_in = 0.2

[forge.val]
name = "val"
n_scenes = 20
seed = 2
[forge.val.mixture]
nominal = 0.2
pedestrian_crossing = 0.4
dense_cut_in = 0.4

[planner]
frames = 2
grid = 4

[planner.view]
yaw_offsets_deg = [0.0, 180.0]
fov_deg = 120.0
height = 16
width = 16
meters_per_px = 2.0

[generator]
epochs = 1
budget = 6

[generator.model]
dim = 16
n_blocks = 2
n_box = 4
steps = 3
batch = 8
"#;

pub fn tiny_config() -> corrloop::EngineConfig {
    corrloop::EngineConfig::from_toml(TINY_RUN).unwrap()
}
