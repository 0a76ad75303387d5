use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::{ConditionBundle, GenModel, NullFlags};
use super::net::{forward, patchify, unpatchify, Leaves};
use crate::agent::MultimodalRequirement;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::scene::{project_layout, render_raster, BevScene, Dataset, Provenance, SceneRaster, BASE_CHANNELS};
use crate::tensor::TensorND;

/// One training example: target raster plus its conditions.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub raster: SceneRaster,
    pub bundle: ConditionBundle,
}

impl TrainSample {
    pub fn from_scene(scene: &BevScene, model: &GenModel, render_seed: u64) -> Result<Self> {
        let cfg = &model.cfg;
        let raster = match &scene.raster {
            Some(r) => r.with_channels(BASE_CHANNELS),
            None => render_raster(scene, &cfg.view, cfg.frames, render_seed)?,
        };
        let layout = project_layout(scene, &cfg.view, cfg.frames, cfg.n_box)?;
        let bundle = ConditionBundle::from_layout(&layout, &scene.caption, cfg)?;
        Ok(Self { raster, bundle })
    }
}

/// Raw dropout draws for one training sample: one independent draw per
/// condition plus one joint all-null draw.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NullDraw {
    pub all: bool,
    pub fore: bool,
    pub back: bool,
    pub text: bool,
}

impl NullDraw {
    pub fn flags(self) -> NullFlags {
        NullFlags { fore: self.all || self.fore, back: self.all || self.back, text: self.all || self.text }
    }
}

pub fn draw_nulls(rng: &mut impl Rng, rate: f64) -> NullDraw {
    NullDraw { fore: rng.gen_bool(rate), back: rng.gen_bool(rate), text: rng.gen_bool(rate), all: rng.gen_bool(rate) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub losses: Vec<f32>,
}

impl TrainReport {
    pub fn initial(&self) -> Option<f32> {
        self.losses.first().copied()
    }

    /// Mean of the last `n` losses.
    pub fn tail_mean(&self, n: usize) -> Option<f32> {
        let n = n.min(self.losses.len());
        (n > 0).then(|| self.losses[self.losses.len() - n..].iter().sum::<f32>() / n as f32)
    }
}

/// Aborts training on a non-finite loss, or on a loss above `factor` times
/// the first one for `patience` consecutive steps.
#[derive(Debug, Clone)]
pub struct DivergenceGuard {
    pub factor: f32,
    pub patience: usize,
    initial: Option<f32>,
    above: usize,
    step: usize,
}

impl Default for DivergenceGuard {
    fn default() -> Self {
        Self { factor: 10.0, patience: 100, initial: None, above: 0, step: 0 }
    }
}

impl DivergenceGuard {
    pub fn observe(&mut self, loss: f32) -> Result<()> {
        self.step += 1;
        let initial = *self.initial.get_or_insert(loss);
        let fail = || Error::Diverged { step: self.step, loss: loss as f64, initial: initial as f64 };
        if !loss.is_finite() {
            return Err(fail());
        }
        if loss > self.factor * initial {
            self.above += 1;
            if self.above >= self.patience {
                return Err(fail());
            }
        } else {
            self.above = 0;
        }
        Ok(())
    }
}

const CLIP_NORM: f64 = 1.0;

fn to_data(raster: &SceneRaster, model: &GenModel) -> Vec<f32> {
    let cfg = &model.cfg;
    let (v, t, c, h, w) = raster.dims();
    patchify::<f32>(raster.values.values(), v, t, c, h, w, cfg.patch).into_iter().map(|x| 2.0 * x - 1.0).collect()
}

fn to_raster(tokens: &[f32], model: &GenModel) -> SceneRaster {
    let cfg = &model.cfg;
    let (v, t, h, w) = (cfg.views(), cfg.frames, cfg.view.height, cfg.view.width);
    let values: Vec<f32> =
        unpatchify(tokens, v, t, BASE_CHANNELS, h, w, cfg.patch).into_iter().map(|x| (x + 1.0) / 2.0).collect();
    SceneRaster::new(TensorND::new(vec![v, t, BASE_CHANNELS, h, w], values).expect("shape")).expect("raster")
}

/// Rectified-flow training with Adam, cosine learning-rate decay and
/// global-norm clipping. `epochs == 0`
/// leaves the model untouched. Aborts with [`Error::Diverged`] as decided
/// by [`DivergenceGuard`].
pub fn train(model: &mut GenModel, data: &[TrainSample], epochs: usize, seed: u64) -> Result<TrainReport> {
    let cfg = model.cfg.clone();
    if epochs == 0 || data.is_empty() {
        return Ok(TrainReport { steps: 0, losses: Vec::new() });
    }
    let expect = [cfg.views(), cfg.frames, BASE_CHANNELS, cfg.view.height, cfg.view.width];
    for s in data {
        if s.raster.dims() != (expect[0], expect[1], expect[2], expect[3], expect[4]) {
            return Err(Error::invalid(format!("training raster {:?}, expected {expect:?}", s.raster.values.shape())));
        }
    }
    let targets: Vec<Vec<f32>> = data.iter().map(|s| to_data(&s.raster, model)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m: Vec<Vec<f32>> = model.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
    let mut v = m.clone();
    let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
    let total = epochs * data.len().div_ceil(cfg.batch.max(1));
    let n0 = cfg.tokens();
    let pd = cfg.patch_dim();
    let mut losses = Vec::new();
    let mut guard = DivergenceGuard::default();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut z = Vec::with_capacity(chunk.len() * n0 * pd);
            let mut target = Vec::with_capacity(z.capacity());
            let mut times = Vec::with_capacity(chunk.len());
            let mut bundles = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let t: f64 = rng.gen();
                for &x1 in &targets[i] {
                    let x0: f32 = rng.sample(StandardNormal);
                    z.push(t as f32 * x1 + (1.0 - t as f32) * x0);
                    target.push(x1 - x0);
                }
                times.push(t);
                bundles.push(data[i].bundle.with_null(draw_nulls(&mut rng, cfg.null_rate).flags()));
            }
            let refs: Vec<&ConditionBundle> = bundles.iter().collect();
            let mut tape = Tape::<f32>::new();
            let lv = Leaves::new(&mut tape, model);
            let x = tape.leaf(chunk.len() * n0, pd, z);
            let out = forward(&mut tape, &lv, model, x, &times, &refs, true)?;
            let loss_var = tape.mse(out, Rc::new(target));
            let loss = tape.value(loss_var)[0];
            step += 1;
            guard.observe(loss)?;
            losses.push(loss);
            let grads = tape.backward(loss_var);
            let gs: Vec<&[f32]> = lv.vars.iter().map(|&v| grads.get(v).unwrap_or(&[])).collect();
            let norm = gs.iter().flat_map(|g| g.iter()).map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
            let scale = if norm > CLIP_NORM { (CLIP_NORM / norm) as f32 } else { 1.0 };
            // Cosine decay to a tenth of the base rate.
            let progress = (step - 1) as f64 / total.max(1) as f64;
            let lr = (cfg.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()))) as f32;
            let c1 = 1.0 - b1.powi(step as i32);
            let c2 = 1.0 - b2.powi(step as i32);
            for (pi, g) in gs.iter().enumerate() {
                if g.is_empty() {
                    continue;
                }
                let p = &mut model.params[pi].value;
                for j in 0..p.len() {
                    let gj = g[j] * scale;
                    m[pi][j] = b1 * m[pi][j] + (1.0 - b1) * gj;
                    v[pi][j] = b2 * v[pi][j] + (1.0 - b2) * gj * gj;
                    p[j] -= lr * (m[pi][j] / c1) / ((v[pi][j] / c2).sqrt() + eps);
                }
            }
            if step.is_multiple_of(50) {
                log::debug!("generator step {step}: loss {loss:.4}");
            }
        }
    }
    Ok(TrainReport { steps: step, losses })
}

/// Guidance scales for the text, road-layout and box conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Guidance {
    pub text: f64,
    pub back: f64,
    pub fore: f64,
}

impl Guidance {
    pub fn from_model(model: &GenModel) -> Self {
        Self { text: model.cfg.lambda_text, back: model.cfg.lambda_back, fore: model.cfg.lambda_fore }
    }

    pub const UNIT: Guidance = Guidance { text: 1.0, back: 1.0, fore: 1.0 };
}

/// Single conditional pass.
pub fn velocity(model: &GenModel, z: &[f32], t: f64, bundle: &ConditionBundle, control: bool) -> Result<Vec<f32>> {
    let mut tape = Tape::<f32>::new();
    let lv = Leaves::new(&mut tape, model);
    let x = tape.leaf(model.cfg.tokens(), model.cfg.patch_dim(), z.to_vec());
    let out = forward(&mut tape, &lv, model, x, &[t], &[bundle], control)?;
    Ok(tape.value(out).to_vec())
}

/// Four passes (unconditional, text, text + road, all) combined as
/// `v_u + l_t (v_t - v_u) + l_b (v_tb - v_t) + l_f (v_all - v_tb)`.
/// Returns the guided velocity and the fully conditional one.
pub fn guided_velocity(
    model: &GenModel,
    z: &[f32],
    t: f64,
    bundle: &ConditionBundle,
    g: Guidance,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let n = z.len();
    let variants = [
        bundle.with_null(NullFlags::ALL),
        bundle.with_null(NullFlags { fore: true, back: true, text: false }),
        bundle.with_null(NullFlags { fore: true, back: false, text: false }),
        bundle.with_null(NullFlags::NONE),
    ];
    let refs: Vec<&ConditionBundle> = variants.iter().collect();
    let mut tape = Tape::<f32>::new();
    let lv = Leaves::new(&mut tape, model);
    let zz: Vec<f32> = (0..4).flat_map(|_| z.iter().copied()).collect();
    let x = tape.leaf(4 * model.cfg.tokens(), model.cfg.patch_dim(), zz);
    let out = forward(&mut tape, &lv, model, x, &[t; 4], &refs, true)?;
    let o = tape.value(out);
    let (vu, vt, vb, vf) = (&o[..n], &o[n..2 * n], &o[2 * n..3 * n], &o[3 * n..]);
    let (lt, lb, lf) = (g.text as f32, g.back as f32, g.fore as f32);
    let guided = (0..n).map(|i| vu[i] + lt * (vt[i] - vu[i]) + lb * (vb[i] - vt[i]) + lf * (vf[i] - vb[i])).collect();
    Ok((guided, vf.to_vec()))
}

#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub raster: SceneRaster,
    /// Per Euler step: guided and fully conditional velocity.
    pub steps: Vec<(Vec<f32>, Vec<f32>)>,
}

type StepPairs = Vec<(Vec<f32>, Vec<f32>)>;

fn euler(
    model: &GenModel,
    bundle: &ConditionBundle,
    seed: u64,
    g: Guidance,
    known: Option<(&[f32], usize)>,
    trace: bool,
) -> Result<(Vec<f32>, StepPairs)> {
    let cfg = &model.cfg;
    let n = cfg.tokens() * cfg.patch_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut z = noise.clone();
    // Rows of the known frames: token (v, t, s) with t < overlap.
    let per_frame = cfg.tokens_per_frame() * cfg.patch_dim();
    let is_known = |i: usize, overlap: usize| (i / per_frame) % cfg.frames < overlap;
    let mut steps = Vec::new();
    let dt = 1.0 / cfg.steps as f64;
    for k in 0..cfg.steps {
        let t = k as f64 * dt;
        if let Some((x1, overlap)) = known {
            for i in (0..n).filter(|&i| is_known(i, overlap)) {
                z[i] = t as f32 * x1[i] + (1.0 - t as f32) * noise[i];
            }
        }
        let (vg, vf) = guided_velocity(model, &z, t, bundle, g)?;
        for i in 0..n {
            z[i] += dt as f32 * vg[i];
        }
        if trace {
            steps.push((vg, vf));
        }
    }
    if let Some((x1, overlap)) = known {
        for i in (0..n).filter(|&i| is_known(i, overlap)) {
            z[i] = x1[i];
        }
    }
    Ok((z, steps))
}

/// 30-step (configurable) Euler integration of the guided flow from noise.
pub fn sample(model: &GenModel, bundle: &ConditionBundle, seed: u64) -> Result<SceneRaster> {
    let (z, _) = euler(model, bundle, seed, Guidance::from_model(model), None, false)?;
    Ok(clamp01(to_raster(&z, model)))
}

pub fn sample_with_trace(model: &GenModel, bundle: &ConditionBundle, seed: u64, g: Guidance) -> Result<SampleTrace> {
    let (z, steps) = euler(model, bundle, seed, g, None, true)?;
    Ok(SampleTrace { raster: to_raster(&z, model), steps })
}

fn clamp01(mut r: SceneRaster) -> SceneRaster {
    r.values.values_mut().iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    r
}

/// Samples the next clip with its first `overlap` frames held to the last
/// `overlap` frames of `previous`.
pub fn extend_video(
    model: &GenModel,
    previous: &SceneRaster,
    bundle: &ConditionBundle,
    overlap: usize,
    seed: u64,
) -> Result<SceneRaster> {
    let cfg = &model.cfg;
    let (v, t, c, h, w) = previous.dims();
    if (v, c, h, w) != (cfg.views(), BASE_CHANNELS, cfg.view.height, cfg.view.width) {
        return Err(Error::invalid("previous clip does not match generator config"));
    }
    if overlap >= cfg.frames || overlap > t {
        return Err(Error::invalid(format!("overlap {overlap} must be below {} frames and at most {t}", cfg.frames)));
    }
    if overlap == 0 {
        return sample(model, bundle, seed);
    }
    let mut head = SceneRaster::zeros(v, cfg.frames, c, h, w);
    for vi in 0..v {
        for k in 0..overlap {
            for ch in 0..c {
                head.plane_mut(vi, k, ch).copy_from_slice(previous.plane(vi, t - overlap + k, ch));
            }
        }
    }
    let x1 = to_data(&head, model);
    let (z, _) = euler(model, bundle, seed, Guidance::from_model(model), Some((&x1, overlap)), false)?;
    let mut out = clamp01(to_raster(&z, model));
    for vi in 0..v {
        for k in 0..overlap {
            for ch in 0..c {
                out.plane_mut(vi, k, ch).copy_from_slice(head.plane(vi, k, ch));
            }
        }
    }
    Ok(out)
}

/// Joins two clips that share `overlap` frames.
pub fn stitch(a: &SceneRaster, b: &SceneRaster, overlap: usize) -> Result<SceneRaster> {
    let (v, ta, c, h, w) = a.dims();
    let (vb, tb, cb, hb, wb) = b.dims();
    if (v, c, h, w) != (vb, cb, hb, wb) || overlap > ta.min(tb) {
        return Err(Error::invalid("clips cannot be stitched"));
    }
    let mut out = SceneRaster::zeros(v, ta + tb - overlap, c, h, w);
    for vi in 0..v {
        for ch in 0..c {
            for k in 0..ta {
                out.plane_mut(vi, k, ch).copy_from_slice(a.plane(vi, k, ch));
            }
            for k in overlap..tb {
                out.plane_mut(vi, ta + k - overlap, ch).copy_from_slice(b.plane(vi, k, ch));
            }
        }
    }
    Ok(out)
}

/// One generated scene per requirement selection (capped at `budget`):
/// the selected layout is kept as labels, the raster is sampled, and the
/// requirement keywords are attached.
pub fn generate_dataset(
    model: &GenModel,
    requirements: &[MultimodalRequirement],
    source: &Dataset,
    budget: Option<usize>,
    seed: u64,
    tag: &str,
) -> Result<Dataset> {
    let cfg = &model.cfg;
    let mut scenes = Vec::new();
    'outer: for r in requirements {
        for sel in &r.selections {
            if budget.is_some_and(|b| scenes.len() >= b) {
                break 'outer;
            }
            let src = source
                .get(&sel.scene_id)
                .ok_or_else(|| Error::MissingArtifact(format!("selected scene {} not in source dataset", sel.scene_id)))?;
            let layout = project_layout(src, &cfg.view, cfg.frames, cfg.n_box)?;
            let bundle = ConditionBundle::from_layout(&layout, &src.caption, cfg)?;
            let n = scenes.len();
            let raster = sample(model, &bundle, seed.wrapping_mul(1_000_003).wrapping_add(n as u64))?;
            let mut scene = src.clone();
            scene.id = format!("{tag}-{n:05}-{}", src.id);
            scene.keywords = r.requirement.keywords.clone();
            scene.raster = Some(raster);
            scenes.push(scene);
        }
    }
    Dataset::new(tag, Provenance::Generated, scenes)
}
