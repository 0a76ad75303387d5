//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//! Exits non-zero on any failure only when `ACCEPTANCE_STRICT=1`.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use common::{random_scene, tiny_config, Scripted};
use corrloop::autodiff::Tape;
use corrloop::engine::*;
use corrloop::forge::{forge_dataset, ForgeSpec};
use corrloop::generator::*;
use corrloop::planner::run_planner;
use corrloop::scene::*;
use corrloop::taxonomy::*;
use corrloop::tensor::TensorND;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn failure_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let scenes: Vec<BevScene> = (0..1000).map(|i| random_scene(&mut rng, format!("r{i:04}"))).collect();
    let ds = Dataset::new("random", Provenance::Forged, scenes).unwrap();
    let m = Scripted::constant_speed();
    let got: Vec<(String, usize, f32)> =
        detect_failures(&m, &ds, 0.5, 6).unwrap().into_iter().map(|f| (f.scene_id, f.collision_time, f.collider)).collect();
    let plans: Vec<Trajectory> = ds.scenes.iter().map(|s| run_planner(&m, s).unwrap().plan).collect();
    let pairs: Vec<(&BevScene, &Trajectory)> = ds.scenes.iter().zip(&plans).collect();
    let want = brute_force_failures(&pairs, 0.5, 6);
    outcome(got == want, format!("{} failures on 1000 scenes", want.len()))
}

fn perturbed(cfg: GenConfig, seed: u64) -> GenModel {
    let mut model = GenModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in &mut model.params {
        p.value.iter_mut().for_each(|x| *x += rng.gen_range(-0.1..0.1));
    }
    model
}

/// Generator configuration the seed benchmark trains.
fn bench_model() -> GenConfig {
    EngineConfig::seed_benchmark().generator.model
}

fn zero_init() -> Outcome {
    let model = GenModel::new(bench_model()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0usize;
    for _ in 0..3 {
        let bundle = random_bundle(&model, &mut rng);
        let z: Vec<f32> = (0..model.cfg.tokens() * model.cfg.patch_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = rng.gen_range(0.0..1.0);
        let on = velocity(&model, &z, t, &bundle, true).unwrap();
        let off = velocity(&model, &z, t, &bundle, false).unwrap();
        worst = worst.max(on.iter().zip(&off).filter(|(a, b)| a.to_bits() != b.to_bits()).count());
    }
    outcome(worst == 0, format!("{worst} differing bits"))
}

fn telescoping() -> Outcome {
    let model = perturbed(bench_model(), 9);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bundle = random_bundle(&model, &mut rng);
    let trace = sample_with_trace(&model, &bundle, 1, Guidance::UNIT).unwrap();
    let worst = trace.steps.iter().map(|(g, f)| max_abs(g, f)).fold(0.0, f32::max);
    outcome(trace.steps.len() == model.cfg.steps && worst <= 1e-5, format!("max step diff {worst:.2e} over {} steps", trace.steps.len()))
}

fn mva_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f32> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let (b, t, s, c) = (2, 3, 5, 8);
    let x = noise(&mut rng, b * t * s * c);
    let w: Vec<Vec<f32>> = (0..3).map(|_| noise(&mut rng, c * c)).collect();
    let z = TensorND::new(vec![b, t * s, c], x.clone()).unwrap();
    let out = mva_tensor(&z, 1, t, &w[0], &w[1], &w[2]).unwrap();
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf(b * t * s, c, x);
    let (q, k, v) = (tape.leaf(c, c, w[0].clone()), tape.leaf(c, c, w[1].clone()), tape.leaf(c, c, w[2].clone()));
    let plain = spatial_attention(&mut tape, xv, b, 1, t, q, k, v);
    let d = max_abs(out.values(), tape.value(plain));
    let mut shapes_ok = true;
    for _ in 0..20 {
        let (b, v, t, s, c) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(2..6));
        let inner = mva_shape(b, v, t, s, c);
        let z = TensorND::new(vec![b * v, t * s, c], noise(&mut rng, b * v * t * s * c)).unwrap();
        let ws: Vec<Vec<f32>> = (0..3).map(|_| noise(&mut rng, c * c)).collect();
        let out = mva_tensor(&z, v, t, &ws[0], &ws[1], &ws[2]).unwrap();
        shapes_ok &= inner == [b * t, v * s, c] && out.shape() == z.shape();
    }
    outcome(d <= 1e-6 && shapes_ok, format!("V=1 diff {d:.2e}, 20 shape round trips {}", if shapes_ok { "ok" } else { "broken" }))
}

fn gradient_audit() -> Outcome {
    let cfg = GenConfig {
        view: ViewConfig::new(vec![0.0, 180.0], 120.0, 8, 8, 1.0).unwrap(),
        frames: 2,
        dim: 16,
        n_blocks: 2,
        n_box: 3,
        text_len: 4,
        vocab: 32,
        ..Default::default()
    };
    let model = GenModel::new(cfg).unwrap();
    let checks = gradient_check(&model, 100, 17).unwrap();
    let worst = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    outcome(checks.len() == 100 && worst < 1e-4, format!("{} params, max rel err {worst:.2e}", checks.len()))
}

fn fg_mask(r: &SceneRaster) -> Vec<bool> {
    let (v, t, _, _, _) = r.dims();
    (0..v).flat_map(|vi| (0..t).map(move |ti| (vi, ti))).flat_map(|(vi, ti)| r.plane(vi, ti, 0).iter().map(|&x| x >= 0.5).collect::<Vec<_>>()).collect()
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let uni = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    inter as f64 / uni.max(1) as f64
}

fn fidelity() -> Outcome {
    let spec = ForgeSpec::new(64, &[(Archetype::Nominal, 0.4), (Archetype::DenseCutIn, 0.3), (Archetype::PedestrianCrossing, 0.3)], 7);
    let ds = forge_dataset(&spec).unwrap();
    let cfg = GenConfig {
        view: ViewConfig::new(vec![0.0, 180.0], 120.0, 16, 16, 1.0).unwrap(),
        frames: 2,
        dim: 64,
        n_blocks: 4,
        n_box: 8,
        batch: 8,
        lr: 3e-3,
        ..Default::default()
    };
    let mut model = GenModel::new(cfg).unwrap();
    let data: Vec<TrainSample> = ds.scenes.iter().map(|s| TrainSample::from_scene(s, &model, 0).unwrap()).collect();
    train(&mut model, &data, 400, 1).unwrap();
    let off = Guidance { text: 0.0, back: 0.0, fore: 0.0 };
    let (mut cond, mut uncond, mut n) = (0.0, 0.0, 0usize);
    for (i, s) in data.iter().enumerate() {
        let truth = fg_mask(&s.raster);
        if !truth.iter().any(|&x| x) {
            continue;
        }
        cond += iou(&fg_mask(&sample(&model, &s.bundle, i as u64).unwrap()), &truth);
        uncond += iou(&fg_mask(&sample_with_trace(&model, &s.bundle, i as u64, off).unwrap().raster), &truth);
        n += 1;
    }
    let (cond, uncond) = (cond / n as f64, uncond / n as f64);
    outcome(n > 0 && cond >= 0.5 && uncond <= 0.1, format!("mean IoU {cond:.3} conditioned vs {uncond:.3} unconditional over {n} scenes"))
}

fn taxonomy() -> Outcome {
    let anns = bundled_annotations();
    let t = build_taxonomy(&anns, &MockExtractor, &MockSummarizer, &TaxonomyConfig::default()).unwrap();
    let labels: BTreeSet<&str> = t.labels.iter().map(String::as_str).collect();
    let want: BTreeSet<&str> = ["Foreground", "Background", "Weather"].into();
    outcome(anns.len() == 27 && t.clusters.len() == 3 && labels == want, format!("{} cases, K={}, labels {:?}", anns.len(), t.clusters.len(), t.labels))
}

fn ledger_consistent(m: &RunManifest) -> bool {
    let mut prev: Option<BTreeSet<String>> = None;
    for r in &m.iterations {
        let old: BTreeSet<String> = r.ledger.old.iter().cloned().collect();
        let new: BTreeSet<String> = r.ledger.new.iter().cloned().collect();
        let ok = old.len() + new.len() == r.val_failures
            && old.is_disjoint(&new)
            && match &prev {
                None => old.is_empty(),
                Some(p) => old.is_subset(p) && new.is_disjoint(p),
            };
        if !ok {
            return false;
        }
        prev = Some(old.union(&new).cloned().collect());
    }
    true
}

fn seed_loop() -> Vec<(&'static str, Outcome)> {
    let cfg = EngineConfig::seed_benchmark();
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let m = match run_loop(&cfg, &dir.path().join("seed"), &Agents::mock()) {
        Ok(m) => m,
        Err(e) => {
            let msg = format!("run failed: {e}");
            return vec![("loop efficacy", outcome(false, msg.clone())), ("D-D monotone", outcome(false, msg.clone())), ("baseline comparison", outcome(false, msg))];
        }
    };
    let elapsed = t0.elapsed();
    let recs: Vec<&IterationRecord> = m.iterations.iter().filter(|r| r.metrics.is_some()).collect();
    let coll: Vec<f64> = recs.iter().map(|r| r.metrics.as_ref().unwrap().collision.average).collect();
    let first = recs.first().unwrap();
    let last = recs.last().unwrap();
    let drop = 1.0 - coll.last().unwrap() / coll[0];
    let eff = drop >= 0.25
        && last.val_failures < first.val_failures
        && ledger_consistent(&m)
        && elapsed < Duration::from_secs(30 * 60)
        && recs.len() == cfg.run.iterations + 1;
    let dd: Vec<f64> = recs.iter().filter_map(|r| r.dd).collect();
    let dd_ok = !dd.is_empty() && dd.windows(2).all(|w| w[1] <= w[0]);
    let aide = last.aide.as_ref().map(|a| a.metrics.collision.average);
    let cmp_ok = aide.is_some_and(|a| coll.last().unwrap() <= &a);
    vec![
        (
            "loop efficacy",
            outcome(
                eff,
                format!(
                    "collision {:?}, drop {:.1}%, val failures {} -> {}, ledger {}, {:.0}s",
                    coll.iter().map(|c| format!("{c:.4}")).collect::<Vec<_>>(),
                    100.0 * drop,
                    first.val_failures,
                    last.val_failures,
                    if ledger_consistent(&m) { "consistent" } else { "inconsistent" },
                    elapsed.as_secs_f64()
                ),
            ),
        ),
        ("D-D monotone", outcome(dd_ok, format!("D-D {:?}", dd.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>()))),
        ("baseline comparison", outcome(cmp_ok, format!("corrective {:.4} vs retrieval {:?}", coll.last().unwrap(), aide))),
    ]
}

fn hellinger_checks() -> Outcome {
    let dist = |probs: Vec<f64>| KeywordDistribution { labels: (0..probs.len()).map(|i| format!("k{i}")).collect(), probs };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ok = true;
    for _ in 0..1000 {
        let n = rng.gen_range(2..10);
        let mut draw = || {
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (p, q) = (dist(draw()), dist(draw()));
        let a = hellinger(&p, &q).unwrap();
        ok &= (0.0..=1.0).contains(&a) && a == hellinger(&q, &p).unwrap() && hellinger(&p, &p).unwrap() == 0.0;
        ok &= p.probs == q.probs || a > 0.0;
    }
    let h = hellinger(&dist(vec![0.5, 0.5]), &dist(vec![0.25, 0.75])).unwrap();
    outcome(ok && (h - 0.1846).abs() <= 1e-4, format!("1000 random pairs {}, example {h:.4}", if ok { "ok" } else { "violated" }))
}

fn determinism() -> Outcome {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str| {
        let d = dir.path().join(name);
        run_loop(&cfg, &d, &Agents::mock()).unwrap();
        std::fs::read(d.join("manifest.json")).unwrap()
    };
    let (a, b) = (read("a"), read("b"));
    outcome(a == b, format!("{} vs {} bytes", a.len(), b.len()))
}

fn main() {
    type Check = fn() -> Outcome;
    let singles: [(&str, Check, u64); 7] = [
        ("failure oracle", failure_oracle, 30),
        ("zero-init neutrality", zero_init, 5),
        ("guidance telescoping", telescoping, 30),
        ("multi-view attention", mva_checks, 5),
        ("gradient audit", gradient_audit, 120),
        ("fidelity", fidelity, 900),
        ("taxonomy", taxonomy, 10),
    ];
    let mut lines: Vec<(String, Outcome)> = Vec::new();
    for (i, (name, f, limit)) in singles.into_iter().enumerate() {
        let t = Instant::now();
        let mut o = f();
        let secs = t.elapsed().as_secs_f64();
        if secs >= limit as f64 {
            o.pass = false;
        }
        o.detail = format!("{}; {secs:.1}s (limit {limit}s)", o.detail);
        lines.push((format!("{} {name}", i + 1), o));
        print_line(lines.last().unwrap());
    }
    for (i, (name, o)) in seed_loop().into_iter().enumerate() {
        lines.push((format!("{} {name}", i + 8), o));
        print_line(lines.last().unwrap());
    }
    for (n, name, f, limit) in [(11, "hellinger", hellinger_checks as Check, 5u64), (12, "deterministic manifests", determinism, 600)] {
        let t = Instant::now();
        let mut o = f();
        let secs = t.elapsed().as_secs_f64();
        if secs >= limit as f64 {
            o.pass = false;
        }
        o.detail = format!("{}; {secs:.1}s", o.detail);
        lines.push((format!("{n} {name}"), o));
        print_line(lines.last().unwrap());
    }
    let failed = lines.iter().filter(|(_, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

fn print_line((name, o): &(String, Outcome)) {
    println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}
