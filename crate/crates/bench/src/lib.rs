//! Criterion benchmarks for the hot kernels: rendering, kNN planning,
//! failure mining and one generator velocity evaluation.

use std::hint::black_box;

use corrloop::forge::{forge_dataset, ForgeSpec};
use corrloop::generator::{velocity, ConditionBundle, GenConfig, GenModel};
use corrloop::planner::{KnnPlanner, PlannerConfig, PlannerModel};
use corrloop::scene::{project_layout, render_raster, Archetype, Dataset, ViewConfig};
use corrloop::taxonomy::detect_failures;
use criterion::Criterion;

fn view() -> ViewConfig {
    ViewConfig::new(vec![0.0, 180.0], 120.0, 16, 16, 2.0).expect("valid view")
}

pub fn dataset(n: usize, seed: u64) -> Dataset {
    let spec = ForgeSpec::new(
        n,
        &[
            (Archetype::Nominal, 0.4),
            (Archetype::DenseCutIn, 0.2),
            (Archetype::PedestrianCrossing, 0.2),
            (Archetype::Rain, 0.2),
        ],
        seed,
    );
    forge_dataset(&spec).expect("forge")
}

pub fn render(c: &mut Criterion) {
    let ds = dataset(8, 1);
    let cfg = view();
    c.bench_function("render_raster/2v4f16px", |b| {
        b.iter(|| {
            for s in &ds.scenes {
                black_box(render_raster(s, &cfg, 4, 0).unwrap());
            }
        })
    });
}

pub fn planner(c: &mut Criterion) {
    let train = dataset(200, 2);
    let val = dataset(50, 3);
    let cfg = PlannerConfig { view: view(), frames: 4, ..PlannerConfig::default() };
    let mut knn = KnnPlanner::new(cfg);
    knn.train(&train).unwrap();
    c.bench_function("knn/train_200", |b| {
        b.iter(|| {
            let mut p = KnnPlanner::new(knn.config().clone());
            p.train(black_box(&train)).unwrap();
            p
        })
    });
    c.bench_function("detect_failures/50", |b| b.iter(|| detect_failures(&knn, black_box(&val), 0.5, 6).unwrap()));
}

pub fn generator(c: &mut Criterion) {
    let cfg = GenConfig { view: view(), frames: 4, dim: 64, n_blocks: 4, n_box: 8, ..GenConfig::default() };
    let model = GenModel::new(cfg.clone()).unwrap();
    let scene = &dataset(1, 4).scenes[0];
    let layout = project_layout(scene, &cfg.view, cfg.frames, cfg.n_box).unwrap();
    let bundle = ConditionBundle::from_layout(&layout, &scene.caption, &cfg).unwrap();
    let n = cfg.views() * cfg.frames * 3 * cfg.view.height * cfg.view.width;
    let z = vec![0.1f32; n];
    c.bench_function("generator/velocity_128tok", |b| b.iter(|| velocity(&model, black_box(&z), 0.5, &bundle, true).unwrap()));
}
