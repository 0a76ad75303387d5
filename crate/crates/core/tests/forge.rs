use std::collections::BTreeMap;

use corrloop::collision::{first_contact, DEFAULT_EPSILON};
use corrloop::forge::{allocate_counts, expert_policy, forge_dataset, lexicon, straight_road, ExpertParams, ForgeSpec};
use corrloop::scene::*;

fn still(x: f64, y: f64, n: usize) -> Trajectory {
    Trajectory::new(0.5, (0..n).map(|_| Pose2::new(x, y, 0.0)).collect()).unwrap()
}

fn road_scene(objects: Vec<ObjectBox>) -> BevScene {
    BevScene {
        id: "e".into(),
        archetype: Archetype::Nominal,
        ego: still(0.0, 0.0, 16),
        objects,
        map: straight_road(Some(40.0)),
        caption: String::new(),
        keywords: ["clear".to_string()].into_iter().collect(),
        tags: SceneTags::default(),
        raster: None,
    }
}

#[test]
fn degenerate_mixture_is_all_clear_day() {
    let ds = forge_dataset(&ForgeSpec::new(10, &[(Archetype::Nominal, 1.0)], 4)).unwrap();
    assert_eq!(ds.len(), 10);
    for s in &ds.scenes {
        assert_eq!(s.archetype, Archetype::Nominal);
        assert_eq!(s.tags.weather, Weather::Clear);
        assert_eq!(s.tags.time_of_day, TimeOfDay::Day);
    }
}

#[test]
fn forging_is_deterministic() {
    let spec = ForgeSpec::new(30, &[(Archetype::Nominal, 0.4), (Archetype::Rain, 0.3), (Archetype::PedestrianCrossing, 0.3)], 8);
    assert_eq!(forge_dataset(&spec).unwrap(), forge_dataset(&spec).unwrap());
}

#[test]
fn largest_remainder_allocation() {
    let ds = forge_dataset(&ForgeSpec::new(100, &[(Archetype::DenseCutIn, 0.5), (Archetype::Nominal, 0.5)], 2)).unwrap();
    let n = ds.scenes.iter().filter(|s| s.archetype == Archetype::DenseCutIn).count();
    assert_eq!(n, 50);

    let m: BTreeMap<Archetype, f64> = [(Archetype::Nominal, 1.0 / 3.0), (Archetype::Rain, 1.0 / 3.0), (Archetype::DenseCutIn, 1.0 / 3.0)].into();
    let c = allocate_counts(&m, 10);
    assert_eq!(c.values().sum::<usize>(), 10);
    assert_eq!(c[&Archetype::Nominal], 4);
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(forge_dataset(&ForgeSpec::new(0, &[(Archetype::Nominal, 1.0)], 0)).is_err());
    assert!(forge_dataset(&ForgeSpec::new(5, &[(Archetype::Nominal, 0.7)], 0)).is_err());
}

#[test]
fn every_forged_scene_is_expert_safe_and_uses_the_lexicon() {
    let spec = ForgeSpec::new(
        200,
        &[
            (Archetype::Nominal, 0.2),
            (Archetype::NightLowVisibility, 0.2),
            (Archetype::DenseCutIn, 0.2),
            (Archetype::PedestrianCrossing, 0.2),
            (Archetype::Rain, 0.2),
        ],
        21,
    );
    for s in &forge_dataset(&spec).unwrap().scenes {
        assert!(first_contact(s, DEFAULT_EPSILON, 0..s.horizon(), |t| s.ego.at(t)).is_none(), "{}", s.id);
        assert!(s.keywords.iter().all(|k| lexicon::is_keyword(k)), "{:?}", s.keywords);
        assert!(!s.caption.is_empty());
    }
}

#[test]
fn expert_follows_an_empty_lane_at_constant_speed() {
    let p = ExpertParams::default();
    let traj = expert_policy(&road_scene(vec![]), &p).unwrap();
    for t in 0..traj.len() {
        assert_eq!(traj.at(t).y, 0.0);
        assert!((traj.at(t).x as f64 - p.target_speed * 0.5 * t as f64).abs() < 1e-4);
    }
}

#[test]
fn expert_stops_for_a_static_obstacle() {
    let barrier = ObjectBox {
        instance_id: 0.5,
        class: ObjectClass::Barrier,
        footprint: Footprint { length: 2.5, width: 0.8 },
        dense_caption: "barrier".into(),
        trajectory: still(10.0, 0.0, 16),
    };
    let mut s = road_scene(vec![barrier]);
    s.ego = expert_policy(&s, &ExpertParams::default()).unwrap();
    assert_eq!(s.ego.speed_at(s.horizon() - 2), 0.0);
    assert!(first_contact(&s, DEFAULT_EPSILON, 0..s.horizon(), |t| s.ego.at(t)).is_none());
}

#[test]
fn expert_does_not_brake_for_a_pedestrian_that_has_cleared() {
    let walk = Trajectory::new(0.5, (0..16).map(|t| Pose2::new(40.0, -3.0 + 1.5 * t as f64, 90.0)).collect()).unwrap();
    let ped = ObjectBox {
        instance_id: 0.5,
        class: ObjectClass::Pedestrian,
        footprint: Footprint { length: 0.6, width: 0.6 },
        dense_caption: "pedestrian".into(),
        trajectory: walk,
    };
    let p = ExpertParams::default();
    let traj = expert_policy(&road_scene(vec![ped]), &p).unwrap();
    for t in 0..traj.len() - 1 {
        assert!((traj.speed_at(t) - p.target_speed).abs() < 1e-4, "braked at {t}");
    }
}

#[test]
fn expert_needs_a_lane_center() {
    let mut s = road_scene(vec![]);
    s.map.polylines.retain(|p| p.class != LineClass::LaneCenter);
    assert!(expert_policy(&s, &ExpertParams::default()).is_err());
}
