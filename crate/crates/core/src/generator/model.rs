use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forge::lexicon;
use crate::scene::{ProjectedLayout, ViewConfig, BASE_CHANNELS, PAD_SENTINEL};
use crate::tensor::{Real, TensorND};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CRLGEN01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub view: ViewConfig,
    pub frames: usize,
    pub patch: usize,
    pub dim: usize,
    pub n_blocks: usize,
    pub ffn_mult: usize,
    pub bands: usize,
    pub time_bands: usize,
    pub n_box: usize,
    pub text_len: usize,
    pub vocab: usize,
    pub lambda_text: f64,
    pub lambda_back: f64,
    pub lambda_fore: f64,
    pub steps: usize,
    pub null_rate: f64,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            view: ViewConfig::default(),
            frames: 16,
            patch: 4,
            dim: 32,
            n_blocks: 8,
            ffn_mult: 2,
            bands: 6,
            time_bands: 6,
            n_box: 16,
            text_len: 16,
            vocab: 256,
            lambda_text: 2.0,
            lambda_back: 7.0,
            lambda_fore: 2.0,
            steps: 30,
            null_rate: 0.05,
            lr: 2e-3,
            batch: 4,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.view.validate()?;
        if self.n_blocks == 0 || !self.n_blocks.is_multiple_of(2) {
            return Err(Error::Config(format!("n_blocks must be even and positive, got {}", self.n_blocks)));
        }
        if !self.view.height.is_multiple_of(self.patch) || !self.view.width.is_multiple_of(self.patch) {
            return Err(Error::Config("raster size must be a multiple of the patch size".into()));
        }
        if !self.dim.is_multiple_of(4) || self.dim < 8 {
            return Err(Error::Config("dim must be a multiple of 4 and >= 8".into()));
        }
        if [self.lambda_text, self.lambda_back, self.lambda_fore].iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("guidance scales must be >= 0".into()));
        }
        if self.frames == 0 || self.steps == 0 || self.vocab < 2 || self.text_len == 0 || self.n_box == 0 {
            return Err(Error::Config("frames, steps, text_len, n_box must be positive; vocab >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.null_rate) {
            return Err(Error::Config("null_rate must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn views(&self) -> usize {
        self.view.n_views()
    }

    /// Spatial tokens per view and frame.
    pub fn tokens_per_frame(&self) -> usize {
        (self.view.height / self.patch) * (self.view.width / self.patch)
    }

    /// Tokens per sample: `V * T * S`.
    pub fn tokens(&self) -> usize {
        self.views() * self.frames * self.tokens_per_frame()
    }

    pub fn patch_dim(&self) -> usize {
        BASE_CHANNELS * self.patch * self.patch
    }

    pub fn control_blocks(&self) -> usize {
        self.n_blocks / 2
    }

    /// Hashed token id in `1..vocab`; 0 is padding.
    pub fn token_id(&self, word: &str) -> u32 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in word.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        1 + (h % (self.vocab as u64 - 1)) as u32
    }

    pub fn tokenize_caption(&self, caption: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = lexicon::tokenize(caption).iter().map(|w| self.token_id(w)).take(self.text_len).collect();
        ids.resize(self.text_len, 0);
        ids
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NullFlags {
    pub fore: bool,
    pub back: bool,
    pub text: bool,
}

impl NullFlags {
    pub const NONE: NullFlags = NullFlags { fore: false, back: false, text: false };
    pub const ALL: NullFlags = NullFlags { fore: true, back: true, text: true };
}

/// Encoder inputs for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionBundle {
    pub n_views: usize,
    pub frames: usize,
    pub n_box: usize,
    /// `V * T * n_box` slots, view-major; padded slots hold the sentinel.
    pub boxes: Vec<[f32; 4]>,
    pub headings: Vec<f32>,
    pub ids: Vec<f32>,
    pub box_tokens: Vec<u32>,
    pub mask: Vec<bool>,
    /// Road layout `(V, T, 3, H, W)`.
    pub back: TensorND<f32>,
    /// Caption token ids, padded with 0.
    pub text: Vec<u32>,
    pub null: NullFlags,
}

impl ConditionBundle {
    pub fn from_layout(layout: &ProjectedLayout, caption: &str, cfg: &GenConfig) -> Result<Self> {
        if layout.n_views != cfg.views() || layout.frames != cfg.frames || layout.n_box != cfg.n_box {
            return Err(Error::invalid(format!(
                "layout ({} views, {} frames, {} boxes) does not match generator config",
                layout.n_views, layout.frames, layout.n_box
            )));
        }
        Ok(Self {
            n_views: layout.n_views,
            frames: layout.frames,
            n_box: layout.n_box,
            boxes: layout.slots.iter().map(|s| s.bbox).collect(),
            headings: layout.slots.iter().map(|s| s.heading).collect(),
            ids: layout.slots.iter().map(|s| s.instance_id).collect(),
            box_tokens: layout
                .slots
                .iter()
                .zip(&layout.mask)
                .map(|(s, &m)| if m { cfg.token_id(&s.dense_caption) } else { 0 })
                .collect(),
            mask: layout.mask.clone(),
            back: layout.back.clone(),
            text: cfg.tokenize_caption(caption),
            null: NullFlags::NONE,
        })
    }

    pub fn with_null(&self, null: NullFlags) -> Self {
        Self { null, ..self.clone() }
    }

    /// Reads a slot's scalar inputs; reading a padded slot is a contract
    /// violation, and a valid slot must never carry the sentinel.
    pub(crate) fn slot(&self, i: usize) -> ([f32; 4], f32, f32) {
        assert!(self.mask[i], "encoder read padded box slot {i}");
        let (b, m, u) = (self.boxes[i], self.headings[i], self.ids[i]);
        assert!(
            !(b.contains(&PAD_SENTINEL) && m == PAD_SENTINEL && u == PAD_SENTINEL),
            "padding sentinel reached the box encoder at slot {i}"
        );
        (b, m, u)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct GenModel<F: Real = f32> {
    pub cfg: GenConfig,
    pub params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

pub(crate) const ATTN: [&str; 12] = ["tq", "tk", "tv", "to", "sq", "sk", "sv", "so", "cq", "ck", "cv", "co"];

impl GenModel<f32> {
    pub fn new(cfg: GenConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.dim;
        let pd = cfg.patch_dim();
        let hd = d * cfg.ffn_mult;
        let fb = 2 * cfg.bands;
        let mut params: Vec<Param<f32>> = Vec::new();
        let xavier = |name: String, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let value = (0..rows * cols).map(|_| rng.gen_range(-a..a) as f32).collect();
            Param { name, rows, cols, value }
        };
        let zeros = |name: String, rows: usize, cols: usize| Param { name, rows, cols, value: vec![0.0; rows * cols] };
        let normal = |name: String, rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng| {
            let value = (0..rows * cols).map(|_| (rng.gen_range(-1.0..1.0) * std * 1.7) as f32).collect();
            Param { name, rows, cols, value }
        };
        params.push(xavier("patch_in.w".into(), pd, d, &mut rng));
        params.push(zeros("patch_in.b".into(), 1, d));
        params.push(xavier("time.w1".into(), 2 * cfg.time_bands, d, &mut rng));
        params.push(zeros("time.b1".into(), 1, d));
        params.push(xavier("time.w2".into(), d, d, &mut rng));
        params.push(zeros("time.b2".into(), 1, d));
        params.push(xavier("box.wb".into(), 4 * fb, d, &mut rng));
        params.push(xavier("box.wm".into(), fb, d, &mut rng));
        params.push(xavier("box.wu".into(), fb, d, &mut rng));
        params.push(xavier("box.mlp.w1".into(), d, d, &mut rng));
        params.push(zeros("box.mlp.b1".into(), 1, d));
        params.push(xavier("box.mlp.w2".into(), d, d, &mut rng));
        params.push(zeros("box.mlp.b2".into(), 1, d));
        params.push(normal("text.table".into(), cfg.vocab, d, 1.0 / (d as f64).sqrt(), &mut rng));
        params.push(xavier("road.w".into(), pd, d, &mut rng));
        params.push(zeros("road.b".into(), 1, d));
        for n in ["null.fore", "null.back", "null.text"] {
            params.push(normal(n.into(), 1, d, 0.02, &mut rng));
        }
        let mut blocks = Vec::new();
        for i in 0..cfg.n_blocks {
            let p = format!("base{i}");
            for a in ATTN {
                blocks.push(xavier(format!("{p}.{a}"), d, d, &mut rng));
            }
            // Time modulation (scale, shift) before each of the four sublayers,
            // zero-initialized so every block starts unmodulated.
            for j in 0..4 {
                for part in ["s", "h"] {
                    blocks.push(zeros(format!("{p}.m{j}{part}"), d, d));
                    blocks.push(zeros(format!("{p}.m{j}{part}b"), 1, d));
                }
            }
            blocks.push(xavier(format!("{p}.f1"), d, hd, &mut rng));
            blocks.push(zeros(format!("{p}.f1b"), 1, hd));
            blocks.push(xavier(format!("{p}.f2"), hd, d, &mut rng));
            blocks.push(zeros(format!("{p}.f2b"), 1, d));
        }
        // Control blocks start as exact copies of the first half of the base.
        for i in 0..cfg.control_blocks() {
            let copies: Vec<Param<f32>> = blocks
                .iter()
                .filter(|p| p.name.starts_with(&format!("base{i}.")))
                .map(|p| Param { name: p.name.replacen(&format!("base{i}"), &format!("ctrl{i}"), 1), ..p.clone() })
                .collect();
            blocks.extend(copies);
            blocks.push(zeros(format!("zero{i}.w"), d, d));
            blocks.push(zeros(format!("zero{i}.b"), 1, d));
        }
        params.extend(blocks);
        params.push(xavier("out.w".into(), d, pd, &mut rng));
        params.push(zeros("out.b".into(), 1, pd));
        // Linear input-to-output skip: the target velocity is affine in the
        // noisy input, which a deep path alone learns slowly.
        params.push(zeros("skip.w".into(), pd, pd));
        Ok(Self::from_params(cfg, params))
    }

    /// Double-precision copy for gradient audits.
    pub fn to_f64(&self) -> GenModel<f64> {
        let params = self
            .params
            .iter()
            .map(|p| Param { name: p.name.clone(), rows: p.rows, cols: p.cols, value: p.value.iter().map(|&x| x as f64).collect() })
            .collect();
        GenModel::from_params(self.cfg.clone(), params)
    }
}

impl<F: Real> GenModel<F> {
    pub fn from_params(cfg: GenConfig, params: Vec<Param<F>>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self { cfg, params, index }
    }

    pub fn param(&self, name: &str) -> &Param<F> {
        &self.params[self.index[name]]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Param<F> {
        let i = self.index[name];
        &mut self.params[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn n_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// SHA-256 over parameter names and little-endian `f32` values.
pub fn fingerprint(model: &GenModel<f32>) -> String {
    let mut h = Sha256::new();
    for p in &model.params {
        h.update(p.name.as_bytes());
        for x in &p.value {
            h.update(x.to_le_bytes());
        }
    }
    crate::planner::hex(&h.finalize())
}

/// Layout: magic, one JSON config line, a `u32` parameter count, then per
/// parameter a length-prefixed name, `u32` rows and cols, and `f32` values,
/// all little-endian.
pub fn save_checkpoint(model: &GenModel<f32>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    writeln!(w, "{}", serde_json::to_string(&model.cfg)?)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for p in &model.params {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.rows as u32).to_le_bytes())?;
        w.write_all(&(p.cols as u32).to_le_bytes())?;
        for x in &p.value {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<GenModel<f32>> {
    let bytes = std::fs::read(path)?;
    let bad = |m: &str| Error::invalid(format!("checkpoint {}: {m}", path.display()));
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let nl = bytes[8..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing config line"))? + 8;
    let cfg: GenConfig = serde_json::from_slice(&bytes[8..nl])?;
    let mut r = &bytes[nl + 1..];
    let u32_ = |r: &mut &[u8]| -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
        Ok(u32::from_le_bytes(b))
    };
    let n = u32_(&mut r)? as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let len = u32_(&mut r)? as usize;
        if r.len() < len {
            return Err(bad("truncated name"));
        }
        let name = String::from_utf8(r[..len].to_vec()).map_err(|_| bad("name is not UTF-8"))?;
        r = &r[len..];
        let rows = u32_(&mut r)? as usize;
        let cols = u32_(&mut r)? as usize;
        let mut value = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated values"))?;
            value.push(f32::from_le_bytes(b));
        }
        params.push(Param { name, rows, cols, value });
    }
    let model = GenModel::from_params(cfg, params);
    let fresh = GenModel::new(model.cfg.clone())?;
    for p in &fresh.params {
        match model.index_of(&p.name) {
            Some(i) if model.params[i].rows == p.rows && model.params[i].cols == p.cols => {}
            _ => return Err(bad(&format!("parameter {} missing or misshapen", p.name))),
        }
    }
    Ok(model)
}
