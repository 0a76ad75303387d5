mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{random_scene, Scripted};
use corrloop::collision::collision_radius;
use corrloop::planner::run_planner;
use corrloop::scene::*;
use corrloop::taxonomy::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn set(words: &[&str]) -> BTreeSet<String> {
    words.iter().map(|s| s.to_string()).collect()
}

fn ann(text: &[&str]) -> CauseAnnotation {
    CauseAnnotation { scene_id: "s".into(), descriptions: text.iter().map(|s| s.to_string()).collect(), category: None, context: None }
}

/// One object parked at `(x, y)` for the whole horizon, ego plan scripted.
fn parked(x: f64, y: f64, plan: Vec<(f64, f64)>) -> (Dataset, Scripted) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = random_scene(&mut rng, "p".into());
    s.objects.truncate(1);
    let o = &mut s.objects[0];
    o.class = ObjectClass::Vehicle;
    o.footprint = Footprint { length: 4.0, width: 2.0 };
    o.trajectory = Trajectory::new(0.5, vec![Pose2::new(x, y, 0.0); 8]).unwrap();
    s.ego = Trajectory::new(0.5, vec![Pose2::new(0.0, 0.0, 0.0); 8]).unwrap();
    let mut m = Scripted::constant_speed();
    m.fixed = Some(Trajectory::new(0.5, plan.into_iter().map(|(x, y)| Pose2::new(x, y, 0.0)).collect()).unwrap());
    (Dataset::new("one", Provenance::Forged, vec![s]).unwrap(), m)
}

#[test]
fn contact_at_zero_distance_is_a_failure_at_that_step() {
    let plan = vec![(-30.0, 0.0), (10.0, 0.0), (-30.0, 0.0), (-30.0, 0.0), (-30.0, 0.0), (-30.0, 0.0)];
    let (ds, m) = parked(10.0, 0.0, plan);
    let f = detect_failures(&m, &ds, 0.5, 6).unwrap();
    assert_eq!(f.len(), 1);
    assert_eq!(f[0].collision_time, 2);
    assert_eq!(f[0].context.collider_class, ObjectClass::Vehicle);
}

#[test]
fn threshold_is_strict_and_inflated_by_half_widths() {
    let r = collision_radius(0.5, &Footprint { length: 4.0, width: 2.0 });
    assert!((r - (0.5 + 0.95 + 1.0)).abs() < 1e-6);
    for (gap, hits) in [(0.1, false), (-0.1, true)] {
        let plan = vec![(10.0, r + gap); 6];
        let (ds, m) = parked(10.0, 0.0, plan);
        assert_eq!(detect_failures(&m, &ds, 0.5, 6).unwrap().len(), hits as usize, "gap {gap}");
    }
}

#[test]
fn contacts_beyond_the_horizon_are_ignored() {
    let mut plan = vec![(-30.0, 0.0); 6];
    plan[5] = (10.0, 0.0);
    let (ds, m) = parked(10.0, 0.0, plan);
    assert!(detect_failures(&m, &ds, 0.5, 5).unwrap().is_empty());
    assert_eq!(detect_failures(&m, &ds, 0.5, 6).unwrap()[0].collision_time, 6);
}

#[test]
fn failures_match_the_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let scenes: Vec<BevScene> = (0..300).map(|i| random_scene(&mut rng, format!("r{i:04}"))).collect();
    let ds = Dataset::new("random", Provenance::Forged, scenes).unwrap();
    let m = Scripted::constant_speed();
    for eps in [0.0, 0.5, 2.0] {
        let got: Vec<(String, usize, f32)> =
            detect_failures(&m, &ds, eps, 6).unwrap().into_iter().map(|f| (f.scene_id, f.collision_time, f.collider)).collect();
        let plans: Vec<Trajectory> = ds.scenes.iter().map(|s| run_planner(&m, s).unwrap().plan).collect();
        let pairs: Vec<(&BevScene, &Trajectory)> = ds.scenes.iter().zip(&plans).collect();
        let want = brute_force_failures(&pairs, eps, 6);
        assert!(!want.is_empty() && want.len() < ds.len());
        assert_eq!(got, want, "epsilon {eps}");
    }
}

#[test]
fn overlay_has_the_plan_channel() {
    let (ds, m) = parked(10.0, 0.0, vec![(10.0, 0.0); 6]);
    let f = &detect_failures(&m, &ds, 0.5, 6).unwrap()[0];
    let (_, _, c, _, _) = f.overlay.dims();
    assert!(c > 3);
}

#[test]
fn keywords_are_extracted_from_descriptions() {
    let k = extract_keywords(&ann(&["heavy rain at night reduced visibility"]), &MockExtractor).unwrap();
    assert_eq!(k.keywords, set(&["rain", "night", "low_visibility"]));
    assert!(!k.flagged);
    let k = extract_keywords(&ann(&["rain", "Rainy downpour", "rain"]), &MockExtractor).unwrap();
    assert_eq!(k.keywords, set(&["rain"]));
    let k = extract_keywords(&ann(&[""]), &MockExtractor).unwrap();
    assert!(k.keywords.is_empty() && k.flagged);
}

#[test]
fn embeddings_are_deterministic_and_unit_norm() {
    let a = embed("pedestrian");
    assert_eq!(a, embed("pedestrian"));
    assert_eq!(a.vector.len(), EMBED_DIM);
    assert!((a.vector.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
    // Category anchors pull same-category words together.
    let (rain, fog, curb) = (embed("rain").vector, embed("fog").vector, embed("curb").vector);
    assert!(euclidean(&rain, &fog) < euclidean(&rain, &curb));
}

fn vecs(pairs: &[(&str, Vec<f64>)]) -> BTreeMap<String, Vec<f64>> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn freqs(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

#[test]
fn close_keywords_merge_under_the_most_frequent() {
    let f = freqs(&[("rain", 5), ("rainy", 2), ("curb", 1)]);
    let e = vecs(&[("rain", vec![0.0, 0.0]), ("rainy", vec![0.3, 0.0]), ("curb", vec![5.0, 0.0])]);
    let m = fuzzy_merge(&f, &e, 0.8).unwrap();
    assert_eq!(m.canonical, freqs(&[("rain", 7), ("curb", 1)]));
    assert_eq!(m.aliases["rainy"], "rain");
    assert_eq!(m.aliases["rain"], "rain");
}

#[test]
fn merging_is_transitive_along_chains() {
    let f = freqs(&[("a", 1), ("b", 3), ("c", 1)]);
    let e = vecs(&[("a", vec![0.0]), ("b", vec![0.7]), ("c", vec![1.4])]);
    let m = fuzzy_merge(&f, &e, 0.8).unwrap();
    assert_eq!(m.canonical, freqs(&[("b", 5)]));
    assert_eq!(m.aliases.values().collect::<BTreeSet<_>>().len(), 1);
}

#[test]
fn frequency_ties_pick_the_smallest_keyword() {
    let f = freqs(&[("wet", 2), ("damp", 2)]);
    let e = vecs(&[("wet", vec![0.0]), ("damp", vec![0.1])]);
    assert_eq!(fuzzy_merge(&f, &e, 0.8).unwrap().canonical, freqs(&[("damp", 4)]));
}

#[test]
fn missing_embedding_is_an_error() {
    assert!(fuzzy_merge(&freqs(&[("x", 1)]), &BTreeMap::new(), 0.8).is_err());
}

proptest! {
    #[test]
    fn merging_is_idempotent(points in prop::collection::vec((-3.0f64..3.0, 1usize..5), 1..12)) {
        let f: BTreeMap<String, usize> = points.iter().enumerate().map(|(i, p)| (format!("k{i}"), p.1)).collect();
        let e: BTreeMap<String, Vec<f64>> = points.iter().enumerate().map(|(i, p)| (format!("k{i}"), vec![p.0])).collect();
        let once = fuzzy_merge(&f, &e, 0.8).unwrap();
        let again = fuzzy_merge(&once.canonical, &e, 0.8).unwrap();
        prop_assert_eq!(&again.canonical, &once.canonical);
        prop_assert_eq!(once.canonical.values().sum::<usize>(), f.values().sum::<usize>());
        prop_assert_eq!(again.canonical.values().sum::<usize>(), f.values().sum::<usize>());
        for (k, c) in &once.aliases {
            prop_assert!(once.canonical.contains_key(c), "{} -> {}", k, c);
        }
    }

    #[test]
    fn lloyd_objective_never_increases(
        points in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 4..30),
        k in 1usize..4,
        seed in 0u64..100,
    ) {
        let r = kmeans(&points, k.min(points.len()), seed).unwrap();
        for w in r.objective.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", r.objective);
        }
        prop_assert!(r.assignment.iter().all(|&a| a < k));
    }
}

fn blobs(centers: &[[f64; 2]], per: usize, spread: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    centers
        .iter()
        .flat_map(|c| (0..per).map(|_| vec![c[0] + rng.gen_range(-spread..spread), c[1] + rng.gen_range(-spread..spread)]).collect::<Vec<_>>())
        .collect()
}

#[test]
fn select_k_finds_separated_groups() {
    assert_eq!(select_k(&blobs(&[[0.0, 0.0], [20.0, 0.0], [0.0, 20.0]], 6, 0.5, 1)), 3);
    assert_eq!(select_k(&blobs(&[[0.0, 0.0], [30.0, 30.0]], 5, 0.5, 2)), 2);
    assert_eq!(select_k(&vec![vec![1.0, 1.0]; 5]), 1);
    assert_eq!(select_k(&[vec![0.0], vec![1.0]]), 2);
    assert_eq!(select_k(&[]), 0);
}

#[test]
fn linkage_heights_are_ascending() {
    let h = average_linkage_heights(&blobs(&[[0.0, 0.0], [9.0, 0.0]], 5, 1.0, 3));
    assert_eq!(h.len(), 9);
    assert!(h.windows(2).all(|w| w[0] <= w[1] + 1e-12));
}

#[test]
fn kmeans_examples() {
    let r = kmeans(&[vec![0.0], vec![10.0]], 2, 0).unwrap();
    assert_ne!(r.assignment[0], r.assignment[1]);
    assert_eq!(*r.objective.last().unwrap(), 0.0);
    let pts = blobs(&[[0.0, 0.0]], 7, 3.0, 4);
    let r = kmeans(&pts, 7, 9).unwrap();
    assert_eq!(r.assignment.iter().collect::<BTreeSet<_>>().len(), 7);
    assert!(kmeans(&pts, 0, 0).is_err());
    assert!(kmeans(&pts, 8, 0).is_err());
}

#[test]
fn kmeans_matches_exhaustive_initialization_on_small_data() {
    let pts = blobs(&[[0.0, 0.0], [6.0, 1.0], [2.0, 7.0]], 10, 1.5, 5);
    let mut best = f64::INFINITY;
    for a in 0..pts.len() {
        for b in a + 1..pts.len() {
            for c in b + 1..pts.len() {
                let r = lloyd(&pts, vec![pts[a].clone(), pts[b].clone(), pts[c].clone()]);
                best = best.min(*r.objective.last().unwrap());
            }
        }
    }
    let got = *kmeans(&pts, 3, 0).unwrap().objective.last().unwrap();
    assert!((got - best).abs() < 1e-9, "{got} vs {best}");
}

#[test]
fn mock_summarizer_names_categories() {
    let c = |w: &[&str]| Cluster { members: w.iter().map(|s| s.to_string()).collect(), centroid: vec![] };
    let labels = summarize_labels(
        &[c(&["rain", "night", "fog"]), c(&["pedestrian", "cut_in", "dense_traffic"]), c(&["curb", "construction", "road_edge"]), c(&["zzz"])],
        &MockSummarizer,
    )
    .unwrap();
    let names: Vec<&str> = labels.iter().map(|l| l.label.as_str()).collect();
    assert_eq!(names, ["Weather", "Foreground", "Background", "other"]);
    assert_eq!(labels.iter().map(|l| l.flagged).collect::<Vec<_>>(), [false, false, false, true]);
    assert!(summarize_labels(&[], &MockSummarizer).is_err());
}

#[test]
fn bundled_annotations_give_three_labelled_causes() {
    let anns = bundled_annotations();
    assert_eq!(anns.len(), 27);
    let t = build_taxonomy(&anns, &MockExtractor, &MockSummarizer, &TaxonomyConfig::default()).unwrap();
    assert_eq!(t.clusters.len(), 3);
    assert_eq!(t.labels.iter().cloned().collect::<BTreeSet<_>>(), set(&["Foreground", "Background", "Weather"]));
    assert!(t.flagged.iter().all(|f| !f));
    // Clusters partition the merged vocabulary.
    let canonical: BTreeSet<String> = t.aliases.values().cloned().collect();
    let members: Vec<&String> = t.clusters.iter().flat_map(|c| &c.members).collect();
    assert_eq!(members.len(), canonical.len());
    assert_eq!(t.vocabulary(), canonical);
    // Each annotation's reference category matches the label of its keywords.
    for a in &anns {
        let Some(cat) = a.category else { continue };
        let kws = extract_keywords(a, &MockExtractor).unwrap().keywords;
        assert!(kws.iter().any(|k| {
            let canon = &t.aliases[k];
            let i = t.clusters.iter().position(|c| c.members.contains(canon)).unwrap();
            t.labels[i] == cat.label()
        }), "{}", a.scene_id);
    }
}

#[test]
fn taxonomy_is_deterministic_and_rejects_empty_input() {
    let anns = bundled_annotations();
    let cfg = TaxonomyConfig::default();
    assert_eq!(
        build_taxonomy(&anns, &MockExtractor, &MockSummarizer, &cfg).unwrap(),
        build_taxonomy(&anns, &MockExtractor, &MockSummarizer, &cfg).unwrap()
    );
    assert!(build_taxonomy(&[ann(&["nothing here"])], &MockExtractor, &MockSummarizer, &cfg).is_err());
}
