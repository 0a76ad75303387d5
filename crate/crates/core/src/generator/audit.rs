use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::{ConditionBundle, GenModel, NullFlags};
use super::net::{forward, Leaves};
use crate::autodiff::Tape;
use crate::error::Result;
use crate::tensor::TensorND;

/// Random but valid conditions for `model`'s configuration.
pub fn random_bundle(model: &GenModel, rng: &mut impl Rng) -> ConditionBundle {
    let cfg = &model.cfg;
    let slots = cfg.views() * cfg.frames * cfg.n_box;
    let mask: Vec<bool> = (0..slots).map(|_| rng.gen_bool(0.6)).collect();
    let pick = |m: bool, x: f32| if m { x } else { crate::scene::PAD_SENTINEL };
    let boxes = mask
        .iter()
        .map(|&m| {
            let (x0, y0): (f32, f32) = (rng.gen_range(0.0..0.8), rng.gen_range(0.0..0.8));
            [pick(m, x0), pick(m, y0), pick(m, x0 + 0.2), pick(m, y0 + 0.2)]
        })
        .collect();
    let headings = mask.iter().map(|&m| pick(m, rng.gen_range(-180.0..180.0))).collect();
    let ids = mask.iter().map(|&m| pick(m, rng.gen_range(0.01..1.0))).collect();
    let box_tokens = mask.iter().map(|&m| if m { rng.gen_range(1..cfg.vocab as u32) } else { 0 }).collect();
    let (h, w) = (cfg.view.height, cfg.view.width);
    let back = TensorND::new(
        vec![cfg.views(), cfg.frames, 3, h, w],
        (0..cfg.views() * cfg.frames * 3 * h * w).map(|_| if rng.gen_bool(0.2) { 1.0 } else { 0.0 }).collect(),
    )
    .expect("shape");
    let text = (0..cfg.text_len).map(|i| if i < cfg.text_len / 2 + 1 { rng.gen_range(1..cfg.vocab as u32) } else { 0 }).collect();
    ConditionBundle {
        n_views: cfg.views(),
        frames: cfg.frames,
        n_box: cfg.n_box,
        boxes,
        headings,
        ids,
        box_tokens,
        mask,
        back,
        text,
        null: NullFlags::NONE,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub param: String,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compares analytic gradients of a velocity-matching loss against fp64
/// central differences for `n` entries drawn round-robin from the encoder,
/// attention and zero-projection parameter groups. All weights are first
/// perturbed so that zero projections carry signal. Entries whose analytic
/// gradient is below 1e-6 are redrawn: unused embedding rows and
/// near-flat directions carry no information at fp64 difference precision.
pub fn gradient_check(model: &GenModel, n: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = model.to_f64();
    for p in &mut m.params {
        for x in &mut p.value {
            *x += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let bundles = [random_bundle(model, &mut rng), random_bundle(model, &mut rng)];
    let refs: Vec<&ConditionBundle> = bundles.iter().collect();
    let rows = 2 * m.cfg.tokens();
    let cols = m.cfg.patch_dim();
    let z: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    let target: Rc<Vec<f64>> = Rc::new((0..rows * cols).map(|_| rng.sample(StandardNormal)).collect());
    let times = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];

    let loss_of = |m: &GenModel<f64>, want_grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::<f64>::new();
        let lv = Leaves::new(&mut tape, m);
        let x = tape.leaf(rows, cols, z.clone());
        let out = forward(&mut tape, &lv, m, x, &times, &refs, true)?;
        let loss = tape.mse(out, target.clone());
        let value = tape.value(loss)[0];
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(loss);
        let grads = lv
            .vars
            .iter()
            .zip(&m.params)
            .map(|(&v, p)| g.get(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; p.value.len()]))
            .collect();
        Ok((value, grads))
    };
    let (_, grads) = loss_of(&m, true)?;

    let groups: [Vec<usize>; 3] = [
        indices(&m, |n| ["box.", "text.", "road.", "null."].iter().any(|p| n.starts_with(p))),
        indices(&m, |n| super::model::ATTN.iter().any(|a| n.ends_with(&format!(".{a}")))),
        indices(&m, |n| n.starts_with("zero")),
    ];
    let h = 1e-5;
    let mut out = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n && tries < 100 * n.max(1) {
        tries += 1;
        let g = &groups[out.len() % 3];
        let pi = g[rng.gen_range(0..g.len())];
        let ei = rng.gen_range(0..m.params[pi].value.len());
        let analytic = grads[pi][ei];
        if analytic.abs() < 1e-6 {
            continue;
        }
        let orig = m.params[pi].value[ei];
        m.params[pi].value[ei] = orig + h;
        let (up, _) = loss_of(&m, false)?;
        m.params[pi].value[ei] = orig - h;
        let (down, _) = loss_of(&m, false)?;
        m.params[pi].value[ei] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        out.push(GradCheck { param: m.params[pi].name.clone(), entry: ei, analytic, numeric, rel_error });
    }
    Ok(out)
}

fn indices(m: &GenModel<f64>, keep: impl Fn(&str) -> bool) -> Vec<usize> {
    m.params.iter().enumerate().filter(|(_, p)| keep(&p.name)).map(|(i, _)| i).collect()
}
