use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use super::model::{ConditionBundle, GenModel};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, TensorND};

/// Tape handles for every model parameter, in model order.
pub struct Leaves {
    pub vars: Vec<Var>,
    by_name: HashMap<String, Var>,
}

impl Leaves {
    pub fn new<F: Real>(tape: &mut Tape<F>, model: &GenModel<F>) -> Self {
        let mut vars = Vec::with_capacity(model.params.len());
        let mut by_name = HashMap::with_capacity(model.params.len());
        for p in &model.params {
            let v = tape.leaf(p.rows, p.cols, p.value.clone());
            vars.push(v);
            by_name.insert(p.name.clone(), v);
        }
        Self { vars, by_name }
    }

    pub fn get(&self, name: &str) -> Var {
        *self.by_name.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }
}

/// `[sin(2^i pi x), cos(2^i pi x)]` for `i < bands`; periodic in `x` with period 2.
pub fn fourier_embed<F: Real>(x: f64, bands: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(2 * bands);
    for i in 0..bands {
        out.push(F::of((2f64.powi(i as i32) * PI * x).sin()));
    }
    for i in 0..bands {
        out.push(F::of((2f64.powi(i as i32) * PI * x).cos()));
    }
    out
}

/// Fixed sinusoidal code over patch row, patch column and frame; no view
/// term, so the network stays equivariant to view order.
pub fn positional_encoding<F: Real>(views: usize, frames: usize, rows: usize, cols: usize, dim: usize) -> Vec<F> {
    let q = dim / 4;
    let pairs = (q / 2).max(1);
    let mut out = vec![F::zero(); views * frames * rows * cols * dim];
    let code = |pos: usize, dst: &mut [F]| {
        for k in 0..pairs.min(dst.len() / 2) {
            let w = 1.0 / 16f64.powf(k as f64 / pairs as f64);
            dst[2 * k] = F::of((pos as f64 * w).sin());
            dst[2 * k + 1] = F::of((pos as f64 * w).cos());
        }
    };
    let mut n = 0;
    for _ in 0..views {
        for t in 0..frames {
            for r in 0..rows {
                for c in 0..cols {
                    let row = &mut out[n * dim..(n + 1) * dim];
                    code(r, &mut row[..q]);
                    code(c, &mut row[q..2 * q]);
                    code(t, &mut row[2 * q..3 * q]);
                    n += 1;
                }
            }
        }
    }
    out
}

/// `(V, T, C, H, W)` values to `[V * T * S, C * p * p]` tokens.
pub fn patchify<F: Real>(values: &[f32], v: usize, t: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<F> {
    let (gh, gw) = (h / p, w / p);
    let pd = c * p * p;
    let mut out = vec![F::zero(); v * t * gh * gw * pd];
    for vt in 0..v * t {
        for ch in 0..c {
            let plane = &values[(vt * c + ch) * h * w..(vt * c + ch + 1) * h * w];
            for r in 0..h {
                for col in 0..w {
                    let s = (r / p) * gw + col / p;
                    let k = (ch * p + r % p) * p + col % p;
                    out[(vt * gh * gw + s) * pd + k] = F::of(plane[r * w + col] as f64);
                }
            }
        }
    }
    out
}

pub fn unpatchify<F: Real>(tokens: &[F], v: usize, t: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<f32> {
    let (gh, gw) = (h / p, w / p);
    let pd = c * p * p;
    let mut out = vec![0f32; v * t * c * h * w];
    for vt in 0..v * t {
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let s = (r / p) * gw + col / p;
                    let k = (ch * p + r % p) * p + col % p;
                    out[((vt * c + ch) * h + r) * w + col] = tokens[(vt * gh * gw + s) * pd + k].f64() as f32;
                }
            }
        }
    }
    out
}

/// Regrouped shape used by multi-view attention: `(B*T, V*S, C)`.
pub fn mva_shape(b: usize, v: usize, t: usize, s: usize, c: usize) -> [usize; 3] {
    [b * t, v * s, c]
}

/// Permutation from `(b, v, t, s)` token order to `(b, t, v, s)`, plus its inverse.
fn view_major_to_frame_major(b: usize, v: usize, t: usize, s: usize) -> (Rc<Vec<usize>>, Rc<Vec<usize>>) {
    let mut perm = Vec::with_capacity(b * v * t * s);
    for bi in 0..b {
        for ti in 0..t {
            for vi in 0..v {
                for si in 0..s {
                    perm.push(((bi * v + vi) * t + ti) * s + si);
                }
            }
        }
    }
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    (Rc::new(perm), Rc::new(inv))
}

fn token_major_to_time_major(b: usize, v: usize, t: usize, s: usize) -> (Rc<Vec<usize>>, Rc<Vec<usize>>) {
    let mut perm = Vec::with_capacity(b * v * t * s);
    for bv in 0..b * v {
        for si in 0..s {
            for ti in 0..t {
                perm.push((bv * t + ti) * s + si);
            }
        }
    }
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    (Rc::new(perm), Rc::new(inv))
}

/// Multi-view attention: tokens `(b, v, t, s)` are regrouped to `(b*t, v*s)`
/// so every spatial token attends across all views of its frame, using only
/// the host layer's query/key/value projections.
#[allow(clippy::too_many_arguments)]
pub fn mva<F: Real>(tape: &mut Tape<F>, x: Var, b: usize, v: usize, t: usize, s: usize, wq: Var, wk: Var, wv: Var) -> Var {
    let (perm, inv) = view_major_to_frame_major(b, v, t, s);
    let xp = tape.gather(x, perm);
    let q = tape.linear(xp, wq, None);
    let k = tape.linear(xp, wk, None);
    let vv = tape.linear(xp, wv, None);
    let a = tape.attention(q, k, vv, b * t, None);
    tape.gather(a, inv)
}

/// Per-view spatial attention over the `S` tokens of each `(b, v, t)` group.
#[allow(clippy::too_many_arguments)]
pub fn spatial_attention<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    b: usize,
    v: usize,
    t: usize,
    wq: Var,
    wk: Var,
    wv: Var,
) -> Var {
    let q = tape.linear(x, wq, None);
    let k = tape.linear(x, wk, None);
    let vv = tape.linear(x, wv, None);
    tape.attention(q, k, vv, b * v * t, None)
}

pub struct Encoded {
    /// `[B * V * T * n_box, D]`.
    pub fore: Var,
    pub fore_mask: Vec<bool>,
    /// `[B * text_len, D]`.
    pub text: Var,
    pub text_mask: Vec<bool>,
    /// `[B * tokens, D]`, aligned with the noisy tokens.
    pub back: Var,
}

pub fn encode_conditions<F: Real>(
    tape: &mut Tape<F>,
    lv: &Leaves,
    model: &GenModel<F>,
    bundles: &[&ConditionBundle],
) -> Result<Encoded> {
    let cfg = &model.cfg;
    let (vn, tn, nb, d) = (cfg.views(), cfg.frames, cfg.n_box, cfg.dim);
    let per = vn * tn * nb;
    let fb = 2 * cfg.bands;
    let bsz = bundles.len();
    for b in bundles {
        if b.n_views != vn || b.frames != tn || b.n_box != nb || b.text.len() != cfg.text_len {
            return Err(Error::invalid("condition bundle does not match generator config"));
        }
        if b.back.shape() != [vn, tn, 3, cfg.view.height, cfg.view.width] {
            return Err(Error::invalid(format!("road layout shape {:?}", b.back.shape())));
        }
    }

    // Foreground boxes.
    let rows = bsz * per;
    let mut fbox = vec![F::zero(); rows * 4 * fb];
    let mut fm = vec![F::zero(); rows * fb];
    let mut fu = vec![F::zero(); rows * fb];
    let mut tok = vec![0usize; rows];
    let mut keep = vec![F::zero(); rows * d];
    for (bi, b) in bundles.iter().enumerate() {
        for i in 0..per {
            if !b.mask[i] {
                continue;
            }
            let r = bi * per + i;
            let (bbox, heading, id) = b.slot(i);
            for (j, x) in bbox.iter().enumerate() {
                fbox[r * 4 * fb + j * fb..r * 4 * fb + (j + 1) * fb].copy_from_slice(&fourier_embed::<F>(*x as f64, cfg.bands));
            }
            fm[r * fb..(r + 1) * fb].copy_from_slice(&fourier_embed::<F>((heading as f64 + 180.0) / 360.0, cfg.bands));
            fu[r * fb..(r + 1) * fb].copy_from_slice(&fourier_embed::<F>(id as f64, cfg.bands));
            tok[r] = b.box_tokens[i] as usize;
            keep[r * d..(r + 1) * d].iter_mut().for_each(|k| *k = F::one());
        }
    }
    let fbox = tape.leaf(rows, 4 * fb, fbox);
    let fm = tape.leaf(rows, fb, fm);
    let fu = tape.leaf(rows, fb, fu);
    let h1 = tape.linear(fbox, lv.get("box.wb"), None);
    let h2 = tape.linear(fm, lv.get("box.wm"), None);
    let h3 = tape.linear(fu, lv.get("box.wu"), None);
    let et = tape.gather(lv.get("text.table"), Rc::new(tok));
    let mut h = tape.add(h1, h2);
    h = tape.add(h, h3);
    h = tape.add(h, et);
    h = tape.linear(h, lv.get("box.mlp.w1"), Some(lv.get("box.mlp.b1")));
    h = tape.silu(h);
    h = tape.linear(h, lv.get("box.mlp.w2"), Some(lv.get("box.mlp.b2")));
    h = tape.mul_const(h, Rc::new(keep));
    let (fore, fore_mask) = substitute(tape, h, lv.get("null.fore"), bundles, per, |b, i| b.mask[i], |b| b.null.fore);

    // Caption.
    let l = cfg.text_len;
    let ids: Vec<usize> = bundles.iter().flat_map(|b| b.text.iter().map(|&x| x as usize)).collect();
    if ids.iter().any(|&i| i >= cfg.vocab) {
        return Err(Error::invalid("caption token outside vocabulary"));
    }
    let te = tape.gather(lv.get("text.table"), Rc::new(ids));
    let (text, text_mask) = substitute(tape, te, lv.get("null.text"), bundles, l, |b, i| b.text[i] != 0, |b| b.null.text);

    // Road layout, token-aligned.
    let n0 = cfg.tokens();
    let pd = cfg.patch_dim();
    let mut road = Vec::with_capacity(bsz * n0 * pd);
    for b in bundles {
        road.extend(patchify::<F>(b.back.values(), vn, tn, 3, cfg.view.height, cfg.view.width, cfg.patch));
    }
    let road = tape.leaf(bsz * n0, pd, road);
    let road = tape.linear(road, lv.get("road.w"), Some(lv.get("road.b")));
    let (back, _) = substitute(tape, road, lv.get("null.back"), bundles, n0, |_, _| true, |b| b.null.back);
    Ok(Encoded { fore, fore_mask, text, text_mask, back })
}

/// Replaces every row of a null-flagged sample by the learned null row.
fn substitute<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    null_row: Var,
    bundles: &[&ConditionBundle],
    per: usize,
    valid: impl Fn(&ConditionBundle, usize) -> bool,
    is_null: impl Fn(&ConditionBundle) -> bool,
) -> (Var, Vec<bool>) {
    let rows = bundles.len() * per;
    let mut mask = Vec::with_capacity(rows);
    if !bundles.iter().any(|b| is_null(b)) {
        for b in bundles {
            mask.extend((0..per).map(|i| valid(b, i)));
        }
        return (x, mask);
    }
    let both = tape.concat(x, null_row);
    let mut idx = Vec::with_capacity(rows);
    for (bi, b) in bundles.iter().enumerate() {
        for i in 0..per {
            if is_null(b) {
                idx.push(rows);
                mask.push(true);
            } else {
                idx.push(bi * per + i);
                mask.push(valid(b, i));
            }
        }
    }
    (tape.gather(both, Rc::new(idx)), mask)
}

struct Ctx {
    b: usize,
    v: usize,
    t: usize,
    s: usize,
    temporal: (Rc<Vec<usize>>, Rc<Vec<usize>>),
    kv_src: Var,
    kv_idx: Rc<Vec<usize>>,
    kv_mask: Vec<bool>,
    /// Activated time embedding `[B, D]` and the token-to-sample map.
    time: Var,
    token_sample: Rc<Vec<usize>>,
}

/// `h + h * scale(t) + shift(t)` with per-sample scale and shift.
fn modulate<F: Real>(tape: &mut Tape<F>, lv: &Leaves, p: &str, j: usize, h: Var, cx: &Ctx) -> Var {
    let w = |n: String| lv.get(&format!("{p}.m{j}{n}"));
    let sc = tape.linear(cx.time, w("s".into()), Some(w("sb".into())));
    let sh = tape.linear(cx.time, w("h".into()), Some(w("hb".into())));
    let sc = tape.gather(sc, cx.token_sample.clone());
    let sh = tape.gather(sh, cx.token_sample.clone());
    let hs = tape.mul(h, sc);
    let h = tape.add(h, hs);
    tape.add(h, sh)
}

fn block<F: Real>(tape: &mut Tape<F>, lv: &Leaves, p: &str, x: Var, cx: &Ctx) -> Var {
    let w = |n: &str| lv.get(&format!("{p}.{n}"));
    let (b, v, t, s) = (cx.b, cx.v, cx.t, cx.s);

    let h = tape.layer_norm(x);
    let h = modulate(tape, lv, p, 0, h, cx);
    let hp = tape.gather(h, cx.temporal.0.clone());
    let q = tape.linear(hp, w("tq"), None);
    let k = tape.linear(hp, w("tk"), None);
    let vv = tape.linear(hp, w("tv"), None);
    let a = tape.attention(q, k, vv, b * v * s, None);
    let a = tape.gather(a, cx.temporal.1.clone());
    let a = tape.linear(a, w("to"), None);
    let x = tape.add(x, a);

    let h = tape.layer_norm(x);
    let h = modulate(tape, lv, p, 1, h, cx);
    let a = mva(tape, h, b, v, t, s, w("sq"), w("sk"), w("sv"));
    let a = tape.linear(a, w("so"), None);
    let x = tape.add(x, a);

    let h = tape.layer_norm(x);
    let h = modulate(tape, lv, p, 2, h, cx);
    let q = tape.linear(h, w("cq"), None);
    let ks = tape.linear(cx.kv_src, w("ck"), None);
    let vs = tape.linear(cx.kv_src, w("cv"), None);
    let k = tape.gather(ks, cx.kv_idx.clone());
    let vv = tape.gather(vs, cx.kv_idx.clone());
    let a = tape.attention(q, k, vv, b * v * t, Some(&cx.kv_mask));
    let a = tape.linear(a, w("co"), None);
    let x = tape.add(x, a);

    let h = tape.layer_norm(x);
    let h = modulate(tape, lv, p, 3, h, cx);
    let f = tape.linear(h, w("f1"), Some(w("f1b")));
    let f = tape.silu(f);
    let f = tape.linear(f, w("f2"), Some(w("f2b")));
    tape.add(x, f)
}

/// Predicted velocity for a batch of noisy token sequences
/// (`[B * tokens, patch_dim]`) at flow times `t`.
pub fn forward<F: Real>(
    tape: &mut Tape<F>,
    lv: &Leaves,
    model: &GenModel<F>,
    x: Var,
    times: &[f64],
    bundles: &[&ConditionBundle],
    control: bool,
) -> Result<Var> {
    let cfg = &model.cfg;
    let bsz = bundles.len();
    let (vn, tn, s) = (cfg.views(), cfg.frames, cfg.tokens_per_frame());
    let n0 = cfg.tokens();
    let d = cfg.dim;
    if bsz == 0 || times.len() != bsz || tape.shape(x) != (bsz * n0, cfg.patch_dim()) {
        return Err(Error::invalid(format!(
            "forward: batch {bsz}, {} times, tokens {:?}",
            times.len(),
            tape.shape(x)
        )));
    }
    let enc = encode_conditions(tape, lv, model, bundles)?;

    let pos = positional_encoding::<F>(vn, tn, cfg.view.height / cfg.patch, cfg.view.width / cfg.patch, d);
    let pos = tape.leaf(n0, d, pos);
    let per_token: Rc<Vec<usize>> = Rc::new((0..bsz * n0).map(|i| i % n0).collect());
    let pos = tape.gather(pos, per_token);
    let tf: Vec<F> = times.iter().flat_map(|&t| fourier_embed::<F>(t, cfg.time_bands)).collect();
    let tf = tape.leaf(bsz, 2 * cfg.time_bands, tf);
    let te = tape.linear(tf, lv.get("time.w1"), Some(lv.get("time.b1")));
    let te = tape.silu(te);
    let te = tape.linear(te, lv.get("time.w2"), Some(lv.get("time.b2")));
    let token_sample: Rc<Vec<usize>> = Rc::new((0..bsz * n0).map(|i| i / n0).collect());
    let time = tape.silu(te);
    let te = tape.gather(te, token_sample.clone());

    let mut h = tape.linear(x, lv.get("patch_in.w"), Some(lv.get("patch_in.b")));
    h = tape.add(h, pos);
    h = tape.add(h, te);

    let nb = cfg.n_box;
    let l = cfg.text_len;
    let fore_rows = bsz * vn * tn * nb;
    let kv_src = tape.concat(enc.fore, enc.text);
    let mut kv_idx = Vec::with_capacity(bsz * vn * tn * (nb + l));
    let mut kv_mask = Vec::with_capacity(kv_idx.capacity());
    for bi in 0..bsz {
        for vi in 0..vn {
            for ti in 0..tn {
                let g = (bi * vn + vi) * tn + ti;
                for j in 0..nb {
                    kv_idx.push(g * nb + j);
                    kv_mask.push(enc.fore_mask[g * nb + j]);
                }
                for j in 0..l {
                    kv_idx.push(fore_rows + bi * l + j);
                    kv_mask.push(enc.text_mask[bi * l + j]);
                }
            }
        }
    }
    let cx = Ctx {
        b: bsz,
        v: vn,
        t: tn,
        s,
        temporal: token_major_to_time_major(bsz, vn, tn, s),
        kv_src,
        kv_idx: Rc::new(kv_idx),
        kv_mask,
        time,
        token_sample,
    };

    let mut c = if control { Some(tape.add(h, enc.back)) } else { None };
    for i in 0..cfg.n_blocks {
        let base = block(tape, lv, &format!("base{i}"), h, &cx);
        h = match c {
            Some(ci) if i < cfg.control_blocks() => {
                let co = block(tape, lv, &format!("ctrl{i}"), ci, &cx);
                c = Some(co);
                let z = tape.linear(co, lv.get(&format!("zero{i}.w")), Some(lv.get(&format!("zero{i}.b"))));
                tape.add(base, z)
            }
            _ => base,
        };
    }
    let h = tape.layer_norm(h);
    let out = tape.linear(h, lv.get("out.w"), Some(lv.get("out.b")));
    let skip = tape.linear(x, lv.get("skip.w"), None);
    Ok(tape.add(out, skip))
}

/// Applies multi-view attention to `z` of shape `(B*V, T*S, C)`.
pub fn mva_tensor(z: &TensorND<f32>, views: usize, frames: usize, wq: &[f32], wk: &[f32], wv: &[f32]) -> Result<TensorND<f32>> {
    let sh = z.shape();
    if sh.len() != 3 || views == 0 || frames == 0 || !sh[0].is_multiple_of(views) || !sh[1].is_multiple_of(frames) {
        return Err(Error::invalid(format!("mva input shape {sh:?} with {views} views and {frames} frames")));
    }
    let c = sh[2];
    if [wq.len(), wk.len(), wv.len()].iter().any(|&n| n != c * c) {
        return Err(Error::invalid("mva projection must be C x C"));
    }
    let (b, s) = (sh[0] / views, sh[1] / frames);
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(sh[0] * sh[1], c, z.values().to_vec());
    let q = tape.leaf(c, c, wq.to_vec());
    let k = tape.leaf(c, c, wk.to_vec());
    let v = tape.leaf(c, c, wv.to_vec());
    let out = mva(&mut tape, x, b, views, frames, s, q, k, v);
    TensorND::new(sh.to_vec(), tape.value(out).to_vec())
}
