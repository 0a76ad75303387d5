
use corrloop::autodiff::Tape;
use corrloop::generator::*;
use corrloop::scene::{SceneRaster, ViewConfig};
use corrloop::tensor::TensorND;
use corrloop::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> GenConfig {
    GenConfig {
        view: ViewConfig::new(vec![0.0, 180.0], 120.0, 8, 8, 1.0).unwrap(),
        frames: 2,
        dim: 16,
        n_blocks: 2,
        n_box: 3,
        text_len: 4,
        vocab: 32,
        bands: 3,
        time_bands: 3,
        steps: 5,
        ..Default::default()
    }
}

fn noise(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn fourier_zero_and_periodicity() {
    let e = fourier_embed::<f64>(0.0, 4);
    assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    for &x in &[0.13, -0.7, 0.5] {
        let a = fourier_embed::<f64>(x, 5);
        let b = fourier_embed::<f64>(x + 2.0, 5);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn fresh_model_control_path_is_bit_neutral() {
    let model = GenModel::new(tiny()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bundle = random_bundle(&model, &mut rng);
    let z = noise(model.cfg.tokens() * model.cfg.patch_dim(), 4);
    let on = velocity(&model, &z, 0.3, &bundle, true).unwrap();
    let off = velocity(&model, &z, 0.3, &bundle, false).unwrap();
    assert!(on.iter().zip(&off).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn control_blocks_start_as_copies_and_zero_projections_are_zero() {
    let model = GenModel::new(tiny()).unwrap();
    for p in model.params.iter().filter(|p| p.name.starts_with("ctrl")) {
        let base = model.param(&p.name.replacen("ctrl", "base", 1));
        assert_eq!(base.value, p.value);
    }
    assert!(model.params.iter().filter(|p| p.name.starts_with("zero")).all(|p| p.value.iter().all(|&x| x == 0.0)));
    assert!(GenModel::new(GenConfig { n_blocks: 3, ..tiny() }).is_err());
}

#[test]
fn unit_guidance_telescopes_at_every_step() {
    let mut model = GenModel::new(tiny()).unwrap();
    // Make every branch matter.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for p in &mut model.params {
        p.value.iter_mut().for_each(|x| *x += rng.gen_range(-0.1..0.1));
    }
    let bundle = random_bundle(&model, &mut rng);
    let trace = sample_with_trace(&model, &bundle, 1, Guidance::UNIT).unwrap();
    assert_eq!(trace.steps.len(), model.cfg.steps);
    for (g, f) in &trace.steps {
        let d = g.iter().zip(f).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(d <= 1e-5, "step diff {d}");
    }
}

#[test]
fn zero_guidance_is_unconditional() {
    let model = GenModel::new(tiny()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bundle = random_bundle(&model, &mut rng);
    let z = noise(model.cfg.tokens() * model.cfg.patch_dim(), 5);
    let zero = Guidance { text: 0.0, back: 0.0, fore: 0.0 };
    let (g, _) = guided_velocity(&model, &z, 0.5, &bundle, zero).unwrap();
    let u = velocity(&model, &z, 0.5, &bundle.with_null(NullFlags::ALL), true).unwrap();
    let d = g.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(d < 1e-5);
}

#[test]
fn single_view_mva_matches_spatial_attention() {
    let (b, t, s, c) = (2, 3, 5, 8);
    let x = noise(b * t * s * c, 1);
    let w: Vec<Vec<f32>> = (0..3).map(|i| noise(c * c, 10 + i)).collect();
    let z = TensorND::new(vec![b, t * s, c], x.clone()).unwrap();
    let out = mva_tensor(&z, 1, t, &w[0], &w[1], &w[2]).unwrap();
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf(b * t * s, c, x);
    let (q, k, v) = (tape.leaf(c, c, w[0].clone()), tape.leaf(c, c, w[1].clone()), tape.leaf(c, c, w[2].clone()));
    let plain = spatial_attention(&mut tape, xv, b, 1, t, q, k, v);
    let d = out.values().iter().zip(tape.value(plain)).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(d < 1e-6, "{d}");
}

#[test]
fn mva_shapes() {
    assert_eq!(mva_shape(2, 6, 4, 16, 32), [8, 96, 32]);
    let z = TensorND::new(vec![5, 6, 2], vec![0.0; 60]).unwrap();
    assert!(mva_tensor(&z, 2, 3, &[0.0; 4], &[0.0; 4], &[0.0; 4]).is_err());
    assert!(mva_tensor(&z, 5, 4, &[0.0; 4], &[0.0; 4], &[0.0; 4]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mva_is_view_permutation_equivariant(seed in 0u64..1000, v in 2usize..4, t in 1usize..3, s in 1usize..4) {
        let (b, c) = (1, 4);
        let x = noise(b * v * t * s * c, seed);
        let w: Vec<Vec<f32>> = (0..3).map(|i| noise(c * c, seed + 100 + i)).collect();
        let z = TensorND::new(vec![b * v, t * s, c], x.clone()).unwrap();
        let out = mva_tensor(&z, v, t, &w[0], &w[1], &w[2]).unwrap();
        // Reverse the view order.
        let row = t * s * c;
        let perm: Vec<f32> = (0..v).rev().flat_map(|vi| x[vi * row..(vi + 1) * row].to_vec()).collect();
        let zp = TensorND::new(vec![b * v, t * s, c], perm).unwrap();
        let outp = mva_tensor(&zp, v, t, &w[0], &w[1], &w[2]).unwrap();
        for vi in 0..v {
            let a = &out.values()[vi * row..(vi + 1) * row];
            let bb = &outp.values()[(v - 1 - vi) * row..(v - vi) * row];
            for (p, q) in a.iter().zip(bb) {
                prop_assert!((p - q).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn fourier_output_is_bounded_and_sized(x in -50.0f64..50.0, bands in 1usize..8) {
        let e = fourier_embed::<f64>(x, bands);
        prop_assert_eq!(e.len(), 2 * bands);
        for i in 0..bands {
            prop_assert!((e[i] * e[i] + e[bands + i] * e[bands + i] - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn encoder_nulls_and_empty_boxes() {
    let model = GenModel::new(tiny()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bundle = random_bundle(&model, &mut rng);
    let mut tape = Tape::<f32>::new();
    let lv = Leaves::new(&mut tape, &model);
    let null = bundle.with_null(NullFlags::ALL);
    let enc = encode_conditions(&mut tape, &lv, &model, &[&null]).unwrap();
    for (var, name) in [(enc.fore, "null.fore"), (enc.text, "null.text"), (enc.back, "null.back")] {
        let row = &model.param(name).value;
        assert!(tape.value(var).chunks(model.cfg.dim).all(|r| r == row.as_slice()), "{name}");
    }
    bundle.mask.iter_mut().for_each(|m| *m = false);
    let enc = encode_conditions(&mut tape, &lv, &model, &[&bundle]).unwrap();
    assert!(tape.value(enc.fore).iter().all(|&x| x == 0.0));
    assert!(enc.fore_mask.iter().all(|&m| !m));
}

#[test]
#[should_panic(expected = "sentinel")]
fn sentinel_in_valid_slot_is_a_contract_violation() {
    let model = GenModel::new(tiny()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bundle = random_bundle(&model, &mut rng);
    let i = bundle.mask.iter().position(|&m| !m).unwrap();
    bundle.mask[i] = true;
    let mut tape = Tape::<f32>::new();
    let lv = Leaves::new(&mut tape, &model);
    let _ = encode_conditions(&mut tape, &lv, &model, &[&bundle]);
}

#[test]
fn gradients_match_finite_differences() {
    let model = GenModel::new(tiny()).unwrap();
    let checks = gradient_check(&model, 30, 5).unwrap();
    assert_eq!(checks.len(), 30);
    for c in &checks {
        assert!(c.rel_error < 1e-4, "{c:?}");
    }
    assert!(checks.iter().any(|c| c.param.starts_with("zero")));
    assert!(checks.iter().any(|c| c.param.starts_with("box.")));
}

#[test]
fn null_dropout_frequency() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let draws: Vec<NullDraw> = (0..n).map(|_| draw_nulls(&mut rng, 0.05)).collect();
    for f in [|d: &NullDraw| d.fore, |d: &NullDraw| d.back, |d: &NullDraw| d.text, |d: &NullDraw| d.all] {
        let rate = draws.iter().filter(|d| f(d)).count() as f64 / n as f64;
        assert!((rate - 0.05).abs() <= 0.01, "{rate}");
    }
    assert_eq!(NullDraw { all: true, ..Default::default() }.flags(), NullFlags::ALL);
}

fn toy_sample(model: &GenModel, seed: u64) -> TrainSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bundle = random_bundle(model, &mut rng);
    let cfg = &model.cfg;
    let mut raster = SceneRaster::zeros(cfg.views(), cfg.frames, 3, cfg.view.height, cfg.view.width);
    for (i, x) in raster.values.values_mut().iter_mut().enumerate() {
        *x = if (i / 3) % 2 == 0 { 0.9 } else { 0.1 };
    }
    TrainSample { raster, bundle }
}

#[test]
fn overfits_a_single_sample() {
    let model0 = GenModel::new(GenConfig { batch: 1, dim: 64, lr: 5e-3, ..tiny() }).unwrap();
    let mut model = model0.clone();
    let data = vec![toy_sample(&model, 1)];
    let rep = train(&mut model, &data, 200, 3).unwrap();
    assert_eq!(rep.steps, 200);
    let first = rep.losses[..10].iter().sum::<f32>() / 10.0;
    assert!(rep.tail_mean(20).unwrap() < 0.5 * first, "{first} -> {:?}", rep.tail_mean(20));
    assert_ne!(fingerprint(&model), fingerprint(&model0));
}

#[test]
fn zero_epochs_is_a_no_op_and_training_is_deterministic() {
    let mut a = GenModel::new(tiny()).unwrap();
    let fp = fingerprint(&a);
    let data = vec![toy_sample(&a, 1), toy_sample(&a, 2)];
    let rep = train(&mut a, &data, 0, 3).unwrap();
    assert_eq!(rep.steps, 0);
    assert_eq!(fingerprint(&a), fp);
    let mut b = a.clone();
    train(&mut a, &data, 3, 3).unwrap();
    train(&mut b, &data, 3, 3).unwrap();
    assert_eq!(fingerprint(&a), fingerprint(&b));
    let bundle = &data[0].bundle;
    let ra = sample(&a, bundle, 4).unwrap();
    let rb = sample(&b, bundle, 4).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn divergence_guard() {
    let mut g = DivergenceGuard::default();
    g.observe(1.0).unwrap();
    for _ in 0..99 {
        g.observe(11.0).unwrap();
    }
    g.observe(2.0).unwrap();
    for _ in 0..99 {
        g.observe(11.0).unwrap();
    }
    assert!(matches!(g.observe(11.0), Err(Error::Diverged { step: 201, .. })));
    assert!(DivergenceGuard::default().observe(f32::NAN).is_err());
}

#[test]
fn non_finite_data_aborts_training() {
    let mut model = GenModel::new(tiny()).unwrap();
    let mut sample = toy_sample(&model, 1);
    sample.raster.values.values_mut()[0] = f32::NAN;
    assert!(matches!(train(&mut model, &[sample], 1, 1), Err(Error::Diverged { step: 1, .. })));
}

#[test]
fn extension_clamps_overlap_frames() {
    let cfg = GenConfig { frames: 4, ..tiny() };
    let model = GenModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bundle = random_bundle(&model, &mut rng);
    let first = sample(&model, &bundle, 1).unwrap();
    let next = extend_video(&model, &first, &bundle, 2, 2).unwrap();
    for v in 0..2 {
        for k in 0..2 {
            for c in 0..3 {
                assert_eq!(next.plane(v, k, c), first.plane(v, 2 + k, c));
            }
        }
    }
    let chain = stitch(&first, &next, 2).unwrap();
    assert_eq!(chain.dims().1, 2 * 4 - 2);
    assert!(extend_video(&model, &first, &bundle, 4, 2).is_err());
    assert_eq!(extend_video(&model, &first, &bundle, 0, 2).unwrap(), sample(&model, &bundle, 2).unwrap());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gen.ckpt");
    let model = GenModel::new(tiny()).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.cfg, model.cfg);
    assert_eq!(fingerprint(&back), fingerprint(&model));
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint(&path).is_err());
    std::fs::write(&path, b"NOTACKPT").unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn patchify_round_trip() {
    let (v, t, c, h, w, p) = (2, 3, 3, 8, 8, 4);
    let x = noise(v * t * c * h * w, 7);
    let tok = patchify::<f32>(&x, v, t, c, h, w, p);
    assert_eq!(tok.len(), x.len());
    assert_eq!(unpatchify(&tok, v, t, c, h, w, p), x);
}
