use std::collections::BTreeSet;

use corrloop::forge::{forge_dataset, straight_road, ForgeSpec};
use corrloop::scene::*;
use corrloop::tensor::TensorND;
use proptest::prelude::*;

fn cruise(x0: f64, y: f64, v: f64, n: usize) -> Trajectory {
    Trajectory::new(0.5, (0..n).map(|t| Pose2::new(x0 + v * 0.5 * t as f64, y, 0.0)).collect()).unwrap()
}

fn scene(objects: Vec<ObjectBox>) -> BevScene {
    BevScene {
        id: "s".into(),
        archetype: Archetype::Nominal,
        ego: cruise(0.0, 0.0, 0.0, 16),
        objects,
        map: straight_road(None),
        caption: "empty road".into(),
        keywords: ["clear".to_string()].into_iter().collect(),
        tags: SceneTags::default(),
        raster: None,
    }
}

fn parked(id: f32, x: f64, y: f64, length: f32, width: f32) -> ObjectBox {
    ObjectBox {
        instance_id: id,
        class: ObjectClass::Vehicle,
        footprint: Footprint { length, width },
        dense_caption: "parked vehicle".into(),
        trajectory: cruise(x, y, 0.0, 16),
    }
}

fn front_view() -> ViewConfig {
    ViewConfig::new(vec![0.0], 120.0, 32, 32, 1.0).unwrap()
}

#[test]
fn empty_scene_has_empty_foreground() {
    let cfg = ViewConfig::new(vec![0.0, 180.0], 120.0, 16, 16, 1.0).unwrap();
    let r = render_raster(&scene(vec![]), &cfg, 4, 0).unwrap();
    for v in 0..2 {
        for t in 0..4 {
            assert!(r.plane(v, t, CH_FOREGROUND).iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn rendering_is_deterministic() {
    let mut s = scene(vec![parked(0.5, 10.0, 0.0, 4.5, 1.8)]);
    s.tags.weather = Weather::Rain;
    let cfg = front_view();
    assert_eq!(render_raster(&s, &cfg, 4, 9).unwrap(), render_raster(&s, &cfg, 4, 9).unwrap());
    assert_ne!(render_raster(&s, &cfg, 4, 9).unwrap(), render_raster(&s, &cfg, 4, 10).unwrap());
}

#[test]
fn grid_aligned_vehicle_covers_its_area() {
    let s = scene(vec![parked(0.5, 10.0, 0.0, 4.0, 2.0)]);
    let r = render_raster(&s, &front_view(), 1, 0).unwrap();
    let fg = r.plane(0, 0, CH_FOREGROUND);
    let full: Vec<usize> = (0..fg.len()).filter(|&i| fg[i] == 1.0).collect();
    assert_eq!(full.len(), 8);
    assert_eq!(fg.iter().sum::<f32>(), 8.0);
    // Forward 8..12 m maps to rows 20..24, lateral ±1 m to columns 15..17.
    for i in full {
        assert!((20..24).contains(&(i / 32)) && (15..17).contains(&(i % 32)), "pixel {i}");
    }
}

#[test]
fn vehicle_pixel_count_within_one_pixel_per_edge() {
    let (l, w, mpp) = (4.5f64, 1.8f64, 0.5f64);
    let s = scene(vec![parked(0.5, 9.3, 0.4, l as f32, w as f32)]);
    let cfg = ViewConfig::new(vec![0.0], 120.0, 48, 48, mpp as f32).unwrap();
    let r = render_raster(&s, &cfg, 1, 0).unwrap();
    let count = r.plane(0, 0, CH_FOREGROUND).iter().filter(|&&x| x >= 0.5).count() as f64;
    let (lp, wp) = (l / mpp, w / mpp);
    assert!(count >= (lp - 2.0) * (wp - 2.0) && count <= (lp + 2.0) * (wp + 2.0), "count {count}");
    let total: f32 = r.plane(0, 0, CH_FOREGROUND).iter().sum();
    assert!((total as f64 - lp * wp).abs() <= 2.0 * (lp + wp) * 0.25, "coverage {total}");
}

#[test]
fn night_attenuates_and_short_horizon_is_rejected() {
    let mut s = scene(vec![parked(0.5, 10.0, 0.0, 4.0, 2.0)]);
    let day = render_raster(&s, &front_view(), 1, 0).unwrap();
    s.tags.time_of_day = TimeOfDay::Night;
    let night = render_raster(&s, &front_view(), 1, 0).unwrap();
    let max = |r: &SceneRaster, c| r.plane(0, 0, c).iter().cloned().fold(0.0f32, f32::max);
    assert!(max(&night, CH_FOREGROUND) < max(&day, CH_FOREGROUND));
    assert!(max(&night, CH_AMBIENT) < max(&day, CH_AMBIENT));
    assert!(render_raster(&s, &front_view(), 17, 0).is_err());
}

#[test]
fn layout_box_on_axis_is_centered() {
    let s = scene(vec![parked(0.5, 12.0, 0.0, 4.5, 1.8)]);
    let l = project_layout(&s, &front_view(), 2, 4).unwrap();
    assert!(l.mask_at(0, 0)[0]);
    let b = l.slots_at(0, 0)[0].bbox;
    assert!(((b[0] + b[2]) / 2.0 - 0.5).abs() < 1e-6);
    assert!(l.slots.iter().zip(&l.mask).all(|(s, &m)| !m || s.bbox.iter().all(|x| (0.0..=1.0).contains(x))));
}

#[test]
fn layout_masks_objects_outside_every_frustum_and_pads() {
    let s = scene(vec![parked(0.25, -15.0, 0.0, 4.5, 1.8)]);
    let l = project_layout(&s, &front_view(), 2, 4).unwrap();
    assert!(l.mask.iter().all(|&m| !m));
    assert!(l.slots.iter().all(|s| s.bbox == [PAD_SENTINEL; 4]));

    let three = scene(vec![
        parked(0.25, 8.0, 0.0, 4.5, 1.8),
        parked(0.5, 16.0, 3.5, 4.5, 1.8),
        parked(0.75, 20.0, -3.5, 4.5, 1.8),
    ]);
    let l = project_layout(&three, &front_view(), 1, 8).unwrap();
    assert_eq!(l.mask_at(0, 0).iter().filter(|&&m| m).count(), 3);
    assert_eq!(l.mask_at(0, 0).iter().filter(|&&m| !m).count(), 5);
    assert!(l.back.values().iter().all(|x| (0.0..=1.0).contains(x)));
}

#[test]
fn concat_views_shapes() {
    let one = SceneRaster::new(TensorND::new(vec![1, 2, 3, 4, 5], (0..120).map(|x| x as f32 / 120.0).collect()).unwrap()).unwrap();
    let t = concat_views(&one);
    assert_eq!(t.shape(), &[2, 3, 4, 5]);
    assert_eq!(t.values(), one.values.values());
    let six = SceneRaster::zeros(6, 1, 3, 4, 64);
    assert_eq!(concat_views(&six).shape(), &[1, 3, 4, 384]);
    assert!(split_views(&concat_views(&six), 5).is_err());
}

proptest! {
    #[test]
    fn concat_split_round_trip(v in 1usize..5, t in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
        let n = v * t * c * h * w;
        let vals = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 1000.0).collect();
        let r = SceneRaster::new(TensorND::new(vec![v, t, c, h, w], vals).unwrap()).unwrap();
        prop_assert_eq!(split_views(&concat_views(&r), v).unwrap(), r);
    }
}

#[test]
fn dataset_round_trip_is_exact() {
    let ds = forge_dataset(&ForgeSpec::new(64, &[(Archetype::Nominal, 0.5), (Archetype::Rain, 0.25), (Archetype::DenseCutIn, 0.25)], 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save_dataset(&ds, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), ds);

    let empty = Dataset::empty("none", Provenance::Generated);
    save_dataset(&empty, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), empty);
}

#[test]
fn truncated_and_malformed_files_name_the_line() {
    let ds = forge_dataset(&ForgeSpec::new(4, &[(Archetype::Nominal, 1.0)], 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save_dataset(&ds, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();

    std::fs::write(&path, lines[..3].join("\n")).unwrap();
    let err = load_dataset(&path).unwrap_err().to_string();
    assert!(err.contains("line 4"), "{err}");

    let bad = lines[2].replacen("\"caption\":", "\"caption\":7,\"x\":", 1);
    std::fs::write(&path, [lines[0], lines[1], &bad, lines[3], lines[4]].join("\n")).unwrap();
    let err = load_dataset(&path).unwrap_err().to_string();
    assert!(err.contains("line 3") && err.contains("caption"), "{err}");
}

#[test]
fn duplicate_ids_and_empty_keywords_are_rejected() {
    let s = scene(vec![]);
    assert!(Dataset::new("d", Provenance::Forged, vec![s.clone(), s.clone()]).is_err());
    let mut k = s;
    k.keywords = BTreeSet::new();
    assert!(k.validate().is_err());
}
