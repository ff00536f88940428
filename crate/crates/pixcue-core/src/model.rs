//! Encoder-decoder model: a small frozen patch transformer exposing four
//! intermediate levels, and a trainable multi-scale fusion decoder that
//! upsamples patch tokens to a pixel-resolution feature map.
//!
//! The encoder is inference-only: its parameters never enter a tape, so
//! nothing can update them. The decoder follows the multi-stage fusion
//! pattern: per-level linear re-projection, progressive 2x fusion with
//! residual convolution blocks, and a final projection to the output
//! dimensionality at the exact input image size. An import path accepts
//! externally exported per-level embeddings as `LGRD` rasters for users
//! with real backbones.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grids::{self, Grid};
use crate::incontext::matrix_to_grid;
use crate::tensor::{Tape, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("image {h}x{w} is not divisible by patch size {patch}")]
    NotDivisible { h: usize, w: usize, patch: usize },
    #[error("invalid spec: {0}")]
    BadSpec(String),
    #[error("encoder weight source does not support this call: {0}")]
    WrongSource(String),
    #[error("level {level} raster mismatch: {detail}")]
    LevelMismatch { level: usize, detail: String },
    #[error(transparent)]
    Grid(#[from] grids::GridError),
}

/// Where encoder activations come from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSource {
    /// Fixed random initialisation under a recorded seed.
    RandomSeeded { seed: u64 },
    /// Per-image level rasters `<image-id>.lvl{0..3}.lgrd` under a directory.
    ExternalRasters { dir: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderSpec {
    pub patch_size: usize,
    /// Embedding width per tapped level.
    pub level_widths: [usize; 4],
    pub block_count: usize,
    pub heads: usize,
    /// 1-based block indices whose outputs are tapped, strictly increasing.
    pub level_taps: [usize; 4],
    /// Always true during training; the trainer refuses anything else.
    pub frozen: bool,
    pub weight_source: WeightSource,
}

impl EncoderSpec {
    /// Toy transformer encoder with equal widths at every level.
    pub fn toy(patch_size: usize, width: usize, seed: u64) -> Self {
        EncoderSpec {
            patch_size,
            level_widths: [width; 4],
            block_count: 4,
            heads: 4,
            level_taps: [1, 2, 3, 4],
            frozen: true,
            weight_source: WeightSource::RandomSeeded { seed },
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.patch_size == 0 {
            return Err(ModelError::BadSpec("patch size must be positive".into()));
        }
        if !self.level_taps.windows(2).all(|w| w[0] < w[1]) {
            return Err(ModelError::BadSpec("level taps must be strictly increasing".into()));
        }
        if self.level_taps[0] == 0 || self.level_taps[3] > self.block_count {
            return Err(ModelError::BadSpec("level taps must lie in 1..=block_count".into()));
        }
        if let WeightSource::RandomSeeded { .. } = self.weight_source {
            let w = self.level_widths[0];
            if self.level_widths.iter().any(|&x| x != w) {
                return Err(ModelError::BadSpec("toy encoder levels share one width".into()));
            }
            if w % 4 != 0 || w % self.heads != 0 {
                return Err(ModelError::BadSpec(
                    "toy encoder width must be divisible by 4 and by the head count".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecoderSpec {
    /// Fusion width per stage, shallowest first.
    pub fusion_widths: [usize; 4],
    /// Output feature dimensionality `d`.
    pub output_dim: usize,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        DecoderSpec { fusion_widths: [48, 64, 96, 128], output_dim: 128 }
    }
}

impl DecoderSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.output_dim == 0 || self.fusion_widths.iter().any(|&w| w == 0) {
            return Err(ModelError::BadSpec("decoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// Four tapped token grids from one forward pass.
#[derive(Debug, Clone)]
pub struct EncoderLevels {
    /// Each `tokens x width_i`, token rows in row-major `(row, col)` order.
    pub levels: Vec<Array2<f64>>,
    pub token_h: usize,
    pub token_w: usize,
}

// ---- frozen toy transformer ----

struct Block {
    ln1_g: Vec<f64>,
    ln1_b: Vec<f64>,
    qkv_w: Array2<f64>,
    qkv_b: Vec<f64>,
    proj_w: Array2<f64>,
    proj_b: Vec<f64>,
    ln2_g: Vec<f64>,
    ln2_b: Vec<f64>,
    mlp_w1: Array2<f64>,
    mlp_b1: Vec<f64>,
    mlp_w2: Array2<f64>,
    mlp_b2: Vec<f64>,
}

struct VitParams {
    patch_w: Array2<f64>,
    patch_b: Vec<f64>,
    blocks: Vec<Block>,
}

fn randn_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| {
        // Box-Muller keeps the init independent of distr crate versions.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos() * std
    })
}

fn layer_norm(x: &Array2<f64>, g: &[f64], b: &[f64]) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * g[j] + b[j];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn add_bias(mut x: Array2<f64>, b: &[f64]) -> Array2<f64> {
    for mut row in x.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += b[j];
        }
    }
    x
}

fn attention(x: &Array2<f64>, blk: &Block, heads: usize) -> Array2<f64> {
    let (n, width) = x.dim();
    let dh = width / heads;
    let qkv = add_bias(x.dot(&blk.qkv_w), &blk.qkv_b);
    let mut out = Array2::zeros((n, width));
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..heads {
        let qo = h * dh;
        let ko = width + h * dh;
        let vo = 2 * width + h * dh;
        for i in 0..n {
            let mut scores = vec![0.0f64; n];
            let mut max = f64::NEG_INFINITY;
            for (j, slot) in scores.iter_mut().enumerate() {
                let mut s = 0.0;
                for t in 0..dh {
                    s += qkv[[i, qo + t]] * qkv[[j, ko + t]];
                }
                *slot = s * scale;
                max = max.max(*slot);
            }
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            for (j, s) in scores.iter().enumerate() {
                let w = s / z;
                for t in 0..dh {
                    out[[i, qo + t]] += w * qkv[[j, vo + t]];
                }
            }
        }
    }
    add_bias(out.dot(&blk.proj_w), &blk.proj_b)
}

/// Fixed 2D sine-cosine positional embedding; size-agnostic, no parameters.
fn sincos_pos_embed(token_h: usize, token_w: usize, width: usize) -> Array2<f64> {
    let half = width / 2;
    let quarter = half / 2;
    let mut out = Array2::zeros((token_h * token_w, width));
    for ti in 0..token_h {
        for tj in 0..token_w {
            let row = ti * token_w + tj;
            for k in 0..quarter {
                let freq = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                out[[row, 2 * k]] = (tj as f64 * freq).sin();
                out[[row, 2 * k + 1]] = (tj as f64 * freq).cos();
                out[[row, half + 2 * k]] = (ti as f64 * freq).sin();
                out[[row, half + 2 * k + 1]] = (ti as f64 * freq).cos();
            }
        }
    }
    out
}

enum EncoderBackend {
    ToyVit(VitParams),
    External { dir: PathBuf },
}

/// Frozen feature encoder.
pub struct Encoder {
    pub spec: EncoderSpec,
    backend: EncoderBackend,
}

impl Encoder {
    pub fn new(spec: EncoderSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let backend = match &spec.weight_source {
            WeightSource::RandomSeeded { seed } => {
                let width = spec.level_widths[0];
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let p3 = spec.patch_size * spec.patch_size * 3;
                let patch_w = randn_mat(&mut rng, p3, width, 0.02);
                let patch_b = vec![0.0; width];
                let blocks = (0..spec.block_count)
                    .map(|_| Block {
                        ln1_g: vec![1.0; width],
                        ln1_b: vec![0.0; width],
                        qkv_w: randn_mat(&mut rng, width, 3 * width, 0.02),
                        qkv_b: vec![0.0; 3 * width],
                        proj_w: randn_mat(&mut rng, width, width, 0.02),
                        proj_b: vec![0.0; width],
                        ln2_g: vec![1.0; width],
                        ln2_b: vec![0.0; width],
                        mlp_w1: randn_mat(&mut rng, width, 4 * width, 0.02),
                        mlp_b1: vec![0.0; 4 * width],
                        mlp_w2: randn_mat(&mut rng, 4 * width, width, 0.02),
                        mlp_b2: vec![0.0; width],
                    })
                    .collect();
                EncoderBackend::ToyVit(VitParams { patch_w, patch_b, blocks })
            }
            WeightSource::ExternalRasters { dir } => EncoderBackend::External { dir: dir.clone() },
        };
        Ok(Encoder { spec, backend })
    }

    /// Runs the frozen transformer on an image. Image dims must be divisible
    /// by the patch size; there is no silent padding.
    pub fn encode(&self, image: &Grid) -> Result<EncoderLevels, ModelError> {
        let EncoderBackend::ToyVit(params) = &self.backend else {
            return Err(ModelError::WrongSource(
                "external-raster encoders need encode_by_id".into(),
            ));
        };
        let p = self.spec.patch_size;
        let (h, w) = (image.height(), image.width());
        if h % p != 0 || w % p != 0 {
            return Err(ModelError::NotDivisible { h, w, patch: p });
        }
        if image.channels() != 3 {
            return Err(ModelError::BadSpec(format!(
                "encoder expects 3-channel images, got {}",
                image.channels()
            )));
        }
        let (th, tw) = (h / p, w / p);
        let n = th * tw;
        let width = self.spec.level_widths[0];
        let mut tokens = Array2::zeros((n, p * p * 3));
        for ti in 0..th {
            for tj in 0..tw {
                let row = ti * tw + tj;
                let mut col = 0;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..3 {
                            tokens[[row, col]] = image.get(ti * p + py, tj * p + px, ch) as f64;
                            col += 1;
                        }
                    }
                }
            }
        }
        let mut x = add_bias(tokens.dot(&params.patch_w), &params.patch_b);
        x += &sincos_pos_embed(th, tw, width);
        let mut taps = Vec::with_capacity(4);
        for (bi, blk) in params.blocks.iter().enumerate() {
            let a = attention(&layer_norm(&x, &blk.ln1_g, &blk.ln1_b), blk, self.spec.heads);
            x += &a;
            let m1 = add_bias(
                layer_norm(&x, &blk.ln2_g, &blk.ln2_b).dot(&blk.mlp_w1),
                &blk.mlp_b1,
            )
            .mapv(gelu);
            let m2 = add_bias(m1.dot(&blk.mlp_w2), &blk.mlp_b2);
            x += &m2;
            if self.spec.level_taps.contains(&(bi + 1)) {
                taps.push(x.clone());
            }
        }
        Ok(EncoderLevels { levels: taps, token_h: th, token_w: tw })
    }

    /// Loads externally exported level rasters `<id>.lvl{0..3}.lgrd`.
    pub fn encode_by_id(&self, image_id: &str) -> Result<EncoderLevels, ModelError> {
        let EncoderBackend::External { dir } = &self.backend else {
            return Err(ModelError::WrongSource("toy encoders take images, not ids".into()));
        };
        load_external_levels(dir, image_id, &self.spec.level_widths)
    }

    /// SHA-256 over every parameter byte; used by the frozen-encoder checks.
    pub fn fingerprint(&self) -> [u8; 32] {
        fn feed(hasher: &mut Sha256, m: &Array2<f64>) {
            for v in m.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        let mut hasher = Sha256::new();
        if let EncoderBackend::ToyVit(p) = &self.backend {
            feed(&mut hasher, &p.patch_w);
            for v in &p.patch_b {
                hasher.update(v.to_le_bytes());
            }
            for b in &p.blocks {
                feed(&mut hasher, &b.qkv_w);
                feed(&mut hasher, &b.proj_w);
                feed(&mut hasher, &b.mlp_w1);
                feed(&mut hasher, &b.mlp_w2);
                for vec in [
                    &b.ln1_g, &b.ln1_b, &b.qkv_b, &b.proj_b, &b.ln2_g, &b.ln2_b, &b.mlp_b1,
                    &b.mlp_b2,
                ] {
                    for v in vec.iter() {
                        hasher.update(v.to_le_bytes());
                    }
                }
            }
        }
        hasher.finalize().into()
    }
}

/// Reads four per-level token rasters for one image id.
pub fn load_external_levels(
    dir: &Path,
    image_id: &str,
    expect_widths: &[usize; 4],
) -> Result<EncoderLevels, ModelError> {
    let mut levels = Vec::with_capacity(4);
    let mut dims = None;
    for (k, expect) in expect_widths.iter().enumerate() {
        let path = dir.join(format!("{image_id}.lvl{k}.lgrd"));
        let g = grids::raster_read(&path).map_err(|e| ModelError::LevelMismatch {
            level: k,
            detail: format!("{}: {e}", path.display()),
        })?;
        if g.channels() != *expect {
            return Err(ModelError::LevelMismatch {
                level: k,
                detail: format!("expected {expect} channels, got {}", g.channels()),
            });
        }
        match dims {
            None => dims = Some((g.height(), g.width())),
            Some(d) => {
                if d != (g.height(), g.width()) {
                    return Err(ModelError::LevelMismatch {
                        level: k,
                        detail: format!(
                            "token grid {}x{} disagrees with level 0 ({}x{})",
                            g.height(),
                            g.width(),
                            d.0,
                            d.1
                        ),
                    });
                }
            }
        }
        levels.push(crate::incontext::grid_to_matrix(&g));
    }
    let (th, tw) = dims.unwrap();
    Ok(EncoderLevels { levels, token_h: th, token_w: tw })
}

// ---- trainable decoder ----

/// Flat registry of named trainable parameters.
#[derive(Debug, Clone)]
pub struct ParamSet {
    entries: Vec<(String, Array2<f64>)>,
}

impl ParamSet {
    fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    /// Empty set for callers that manage ad-hoc parameter lists (probes).
    pub fn default_empty() -> Self {
        ParamSet::new()
    }

    pub fn push_named(&mut self, name: String, value: Array2<f64>) -> usize {
        self.add(name, value)
    }

    fn add(&mut self, name: String, value: Array2<f64>) -> usize {
        self.entries.push((name, value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn value(&self, idx: usize) -> &Array2<f64> {
        &self.entries[idx].1
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Array2<f64> {
        &mut self.entries[idx].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    /// Zeroes every parameter; for linearity tests.
    pub fn zero_all(&mut self) {
        for (_, v) in &mut self.entries {
            v.fill(0.0);
        }
    }
}

struct StageIdx {
    proj_w: usize,
    proj_b: usize,
    res1_w: usize,
    res1_b: usize,
    res2_w: usize,
    res2_b: usize,
}

/// Multi-scale fusion decoder. Trainable; all forward passes run on a tape.
pub struct Decoder {
    pub spec: DecoderSpec,
    pub level_widths: [usize; 4],
    pub params: ParamSet,
    stages: Vec<StageIdx>,
    trans_w: [usize; 3],
    trans_b: [usize; 3],
    head_conv_w: usize,
    head_conv_b: usize,
    head_out_w: usize,
    head_out_b: usize,
}

impl Decoder {
    pub fn new(spec: DecoderSpec, level_widths: [usize; 4], seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let fw = spec.fusion_widths;
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let wi = fw[i];
            let proj_w = params.add(
                format!("stage{i}.proj.w"),
                randn_mat(&mut rng, level_widths[i], wi, (2.0 / level_widths[i] as f64).sqrt() * 0.5),
            );
            let proj_b = params.add(format!("stage{i}.proj.b"), randn_mat(&mut rng, 1, wi, 0.01));
            let res1_w = params.add(
                format!("stage{i}.res1.w"),
                randn_mat(&mut rng, 9 * wi, wi, (2.0 / (9 * wi) as f64).sqrt() * 0.5),
            );
            let res1_b = params.add(format!("stage{i}.res1.b"), randn_mat(&mut rng, 1, wi, 0.01));
            let res2_w = params.add(
                format!("stage{i}.res2.w"),
                randn_mat(&mut rng, 9 * wi, wi, (2.0 / (9 * wi) as f64).sqrt() * 0.5),
            );
            let res2_b = params.add(format!("stage{i}.res2.b"), randn_mat(&mut rng, 1, wi, 0.01));
            stages.push(StageIdx { proj_w, proj_b, res1_w, res1_b, res2_w, res2_b });
        }
        let mut trans_w = [0; 3];
        let mut trans_b = [0; 3];
        for i in 0..3 {
            trans_w[i] = params.add(
                format!("trans{i}.w"),
                randn_mat(&mut rng, fw[i + 1], fw[i], (2.0 / fw[i + 1] as f64).sqrt() * 0.5),
            );
            trans_b[i] = params.add(format!("trans{i}.b"), randn_mat(&mut rng, 1, fw[i], 0.01));
        }
        let head_conv_w = params.add(
            "head.conv.w".into(),
            randn_mat(&mut rng, 9 * fw[0], fw[0], (2.0 / (9 * fw[0]) as f64).sqrt() * 0.5),
        );
        let head_conv_b = params.add("head.conv.b".into(), randn_mat(&mut rng, 1, fw[0], 0.01));
        let head_out_w = params.add(
            "head.out.w".into(),
            randn_mat(&mut rng, fw[0], spec.output_dim, (2.0 / fw[0] as f64).sqrt() * 0.5),
        );
        let head_out_b = params.add("head.out.b".into(), randn_mat(&mut rng, 1, spec.output_dim, 0.01));
        Ok(Decoder {
            spec,
            level_widths,
            params,
            stages,
            trans_w,
            trans_b,
            head_conv_w,
            head_conv_b,
            head_out_w,
            head_out_b,
        })
    }

    /// Index of the final output bias (the only surviving term when all
    /// weights are zeroed).
    pub fn output_bias_index(&self) -> usize {
        self.head_out_b
    }

    /// Registers every parameter as a tape leaf; one bind per tape.
    pub fn bind(&self, tape: &Tape) -> DecoderVars {
        DecoderVars {
            vars: self.params.iter().map(|(_, v)| tape.leaf(v.clone())).collect(),
        }
    }

    fn resblock(
        &self,
        tape: &Tape,
        x: Var,
        h: usize,
        w: usize,
        vars: &DecoderVars,
        s: &StageIdx,
    ) -> Var {
        let a = tape.relu(x);
        let a = tape.conv2d(a, h, w, vars.vars[s.res1_w], vars.vars[s.res1_b], 3);
        let a = tape.relu(a);
        let a = tape.conv2d(a, h, w, vars.vars[s.res2_w], vars.vars[s.res2_b], 3);
        tape.add(x, a)
    }

    /// Decodes four token-level inputs to an `(out_h * out_w) x d` feature
    /// map. `levels[i]` is `tokens x level_widths[i]` at `(token_h, token_w)`.
    pub fn decode(
        &self,
        tape: &Tape,
        levels: &[Var],
        token_h: usize,
        token_w: usize,
        out_h: usize,
        out_w: usize,
        vars: &DecoderVars,
    ) -> Result<Var, ModelError> {
        if levels.len() != 4 {
            return Err(ModelError::BadSpec(format!("expected 4 levels, got {}", levels.len())));
        }
        for (i, lv) in levels.iter().enumerate() {
            if lv.rows != token_h * token_w || lv.cols != self.level_widths[i] {
                return Err(ModelError::LevelMismatch {
                    level: i,
                    detail: format!(
                        "got {}x{}, expected {}x{}",
                        lv.rows,
                        lv.cols,
                        token_h * token_w,
                        self.level_widths[i]
                    ),
                });
            }
        }
        // Deepest stage at token resolution, each finer stage doubles; the
        // head resamples to the exact target size.
        let sizes: Vec<(usize, usize)> = (0..4)
            .map(|i| {
                let f = 1usize << (3 - i);
                (token_h * f, token_w * f)
            })
            .collect();
        let project = |i: usize| -> Var {
            let s = &self.stages[i];
            let p = tape.matmul(levels[i], vars.vars[s.proj_w]);
            let p = tape.add_bias_row(p, vars.vars[s.proj_b]);
            tape.resize_bilinear(p, token_h, token_w, sizes[i].0, sizes[i].1)
        };
        let mut r = project(3);
        r = self.resblock(tape, r, sizes[3].0, sizes[3].1, vars, &self.stages[3]);
        for i in (0..3).rev() {
            let up = tape.resize_bilinear(r, sizes[i + 1].0, sizes[i + 1].1, sizes[i].0, sizes[i].1);
            let up = tape.matmul(up, vars.vars[self.trans_w[i]]);
            let up = tape.add_bias_row(up, vars.vars[self.trans_b[i]]);
            let skip = project(i);
            r = tape.add(up, skip);
            r = self.resblock(tape, r, sizes[i].0, sizes[i].1, vars, &self.stages[i]);
        }
        let (fh, fw) = sizes[0];
        let mut y =
            tape.conv2d(r, fh, fw, vars.vars[self.head_conv_w], vars.vars[self.head_conv_b], 3);
        y = tape.relu(y);
        y = tape.resize_bilinear(y, fh, fw, out_h, out_w);
        let y = tape.matmul(y, vars.vars[self.head_out_w]);
        Ok(tape.add_bias_row(y, vars.vars[self.head_out_b]))
    }
}

/// Bound tape variables of the decoder parameters, index-aligned with
/// `Decoder::params`.
pub struct DecoderVars {
    pub vars: Vec<Var>,
}

/// Frozen encoder plus trainable decoder.
pub struct ModelState {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl ModelState {
    pub fn new(espec: EncoderSpec, dspec: DecoderSpec, decoder_seed: u64) -> Result<Self, ModelError> {
        let encoder = Encoder::new(espec)?;
        let level_widths = encoder.spec.level_widths;
        let decoder = Decoder::new(dspec, level_widths, decoder_seed)?;
        Ok(ModelState { encoder, decoder })
    }

    /// Full forward pass on a tape: encode (frozen, off-tape), then decode.
    /// Returns the pixel-level feature map variable at the image size.
    pub fn forward_tape(
        &self,
        tape: &Tape,
        vars: &DecoderVars,
        image: &Grid,
    ) -> Result<Var, ModelError> {
        let enc = self.encoder.encode(image)?;
        let level_vars: Vec<Var> = enc.levels.iter().map(|l| tape.constant(l.clone())).collect();
        self.decoder.decode(
            tape,
            &level_vars,
            enc.token_h,
            enc.token_w,
            image.height(),
            image.width(),
            vars,
        )
    }

    /// Inference-only forward pass producing a feature grid.
    pub fn forward_infer(&self, image: &Grid) -> Result<Grid, ModelError> {
        let tape = Tape::new();
        let vars = self.decoder.bind(&tape);
        let out = self.forward_tape(&tape, &vars, image)?;
        let value = tape.value(out);
        Ok(matrix_to_grid(&value, image.height(), image.width()))
    }

    /// Decodes externally imported levels for one image id.
    pub fn forward_external(
        &self,
        image_id: &str,
        out_h: usize,
        out_w: usize,
    ) -> Result<Grid, ModelError> {
        let enc = self.encoder.encode_by_id(image_id)?;
        let tape = Tape::new();
        let vars = self.decoder.bind(&tape);
        let level_vars: Vec<Var> = enc.levels.iter().map(|l| tape.constant(l.clone())).collect();
        let out =
            self.decoder.decode(&tape, &level_vars, enc.token_h, enc.token_w, out_h, out_w, &vars)?;
        let value = tape.value(out);
        Ok(matrix_to_grid(&value, out_h, out_w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::incontext::grid_to_matrix;
    use rand::Rng;

    fn toy_state(patch: usize, width: usize, d: usize) -> ModelState {
        ModelState::new(
            EncoderSpec::toy(patch, width, 17),
            DecoderSpec { fusion_widths: [6, 7, 8, 9], output_dim: d },
            23,
        )
        .unwrap()
    }

    #[test]
    fn patch14_gives_2x2_token_grids() {
        let state = toy_state(14, 8, 4);
        let img =
            Grid::from_fn(28, 28, 3, |y, x, c| ((y + x + c) as f32 * 0.01).sin().abs()).unwrap();
        let enc = state.encoder.encode(&img).unwrap();
        assert_eq!(enc.levels.len(), 4);
        assert_eq!((enc.token_h, enc.token_w), (2, 2));
        for l in &enc.levels {
            assert_eq!(l.dim(), (4, 8));
        }
    }

    #[test]
    fn encode_is_deterministic_and_input_dependent() {
        let state = toy_state(8, 8, 4);
        let a =
            Grid::from_fn(16, 16, 3, |y, x, c| ((y * x + c) as f32 * 0.02).cos().abs()).unwrap();
        let e1 = state.encoder.encode(&a).unwrap();
        let e2 = state.encoder.encode(&a).unwrap();
        for (x, y) in e1.levels.iter().zip(&e2.levels) {
            assert_eq!(x, y);
        }
        let b = a.map(|v| 1.0 - v);
        let e3 = state.encoder.encode(&b).unwrap();
        assert_ne!(e1.levels[0], e3.levels[0]);
    }

    #[test]
    fn indivisible_dims_rejected() {
        let state = toy_state(8, 8, 4);
        let img = Grid::constant(20, 16, 3, 0.5).unwrap();
        assert!(matches!(state.encoder.encode(&img), Err(ModelError::NotDivisible { .. })));
    }

    #[test]
    fn forward_output_matches_input_size() {
        let state = toy_state(8, 8, 5);
        for (h, w) in [(16usize, 16usize), (16, 24), (32, 16)] {
            let img = Grid::from_fn(h, w, 3, |y, x, _| (((y ^ x) as f32) * 0.013).fract()).unwrap();
            let out = state.forward_infer(&img).unwrap();
            assert_eq!((out.height(), out.width(), out.channels()), (h, w, 5));
        }
    }

    #[test]
    fn zeroed_decoder_is_bias_only() {
        let mut state = toy_state(8, 8, 3);
        state.decoder.params.zero_all();
        let bias_idx = state.decoder.output_bias_index();
        *state.decoder.params.value_mut(bias_idx) =
            Array2::from_shape_vec((1, 3), vec![0.5, -1.0, 2.0]).unwrap();
        let img =
            Grid::from_fn(16, 16, 3, |y, x, _| ((y * 7 + x) as f32 * 0.03).sin().abs()).unwrap();
        let out = state.forward_infer(&img).unwrap();
        for px in out.data().chunks_exact(3) {
            assert!((px[0] - 0.5).abs() < 1e-6);
            assert!((px[1] + 1.0).abs() < 1e-6);
            assert!((px[2] - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn weight_sharing_gives_identical_outputs() {
        let state = toy_state(8, 8, 4);
        let img =
            Grid::from_fn(16, 16, 3, |y, x, _| ((y + 3 * x) as f32 * 0.021).cos().abs()).unwrap();
        let a = state.forward_infer(&img).unwrap();
        let b = state.forward_infer(&img).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn decoder_param_gradients_match_finite_differences() {
        let make = || {
            ModelState::new(
                EncoderSpec::toy(8, 4, 3),
                DecoderSpec { fusion_widths: [2, 2, 2, 2], output_dim: 2 },
                5,
            )
            .unwrap()
        };
        let state = make();
        let img =
            Grid::from_fn(16, 16, 3, |y, x, c| ((y * 5 + x * 3 + c) as f32 * 0.07).sin().abs())
                .unwrap();
        let target = grid_to_matrix(
            &Grid::from_fn(16, 16, 2, |y, x, _| ((x + y) as f32 * 0.05).cos()).unwrap(),
        );

        let tape = Tape::new();
        let vars = state.decoder.bind(&tape);
        let out = state.forward_tape(&tape, &vars, &img).unwrap();
        let diff = tape.sub(out, tape.constant(target.clone()));
        let root = tape.mean_all(tape.mul_elem(diff, diff));
        let base_grads = tape.backward(root);

        let eval = |st: &ModelState| -> f64 {
            let t = Tape::new();
            let vs = st.decoder.bind(&t);
            let o = st.forward_tape(&t, &vs, &img).unwrap();
            let d = t.sub(o, t.constant(target.clone()));
            t.scalar(t.mean_all(t.mul_elem(d, d)))
        };

        let mut checked = 0usize;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let step = 1e-5;
        for pi in 0..state.decoder.params.len() {
            let g = base_grads.get(vars.vars[pi]);
            let n = state.decoder.params.value(pi).len();
            for _ in 0..2.min(n) {
                let idx = rng.gen_range(0..n);
                let mut plus = make();
                let mut minus = make();
                plus.decoder.params.value_mut(pi).as_slice_mut().unwrap()[idx] += step;
                minus.decoder.params.value_mut(pi).as_slice_mut().unwrap()[idx] -= step;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let an = g.as_slice().unwrap()[idx];
                let denom = an.abs().max(fd.abs()).max(1e-7);
                assert!(
                    ((fd - an).abs() / denom) < 1e-4,
                    "param {} idx {idx}: fd {fd} vs analytic {an}",
                    state.decoder.params.name(pi)
                );
                checked += 1;
            }
        }
        assert!(checked >= 30);
    }

    #[test]
    fn level_input_gradients_flow() {
        let state = toy_state(8, 4, 2);
        let img = Grid::from_fn(16, 16, 3, |y, x, _| ((y + x) as f32 * 0.04).sin().abs()).unwrap();
        let enc = state.encoder.encode(&img).unwrap();
        let leaves: Vec<Array2<f64>> = enc.levels.clone();
        let err = crate::tensor::testutil::max_grad_rel_err(
            &leaves,
            |t, vs| {
                let vars = state.decoder.bind(t);
                let out =
                    state.decoder.decode(t, vs, enc.token_h, enc.token_w, 16, 16, &vars).unwrap();
                t.mean_all(t.mul_elem(out, out))
            },
            1e-6,
        );
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn external_level_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let widths = [3usize, 4, 5, 6];
        for (k, &wd) in widths.iter().enumerate() {
            let g = Grid::from_fn(2, 3, wd, |y, x, c| (y * 100 + x * 10 + c + k) as f32 * 0.1)
                .unwrap();
            grids::raster_write(&g, &dir.path().join(format!("img7.lvl{k}.lgrd"))).unwrap();
        }
        let enc = load_external_levels(dir.path(), "img7", &widths).unwrap();
        assert_eq!((enc.token_h, enc.token_w), (2, 3));
        assert_eq!(enc.levels[2].dim(), (6, 5));
        assert!(matches!(
            load_external_levels(dir.path(), "img7", &[3, 4, 5, 7]),
            Err(ModelError::LevelMismatch { level: 3, .. })
        ));
        let espec = EncoderSpec {
            patch_size: 8,
            level_widths: widths,
            block_count: 4,
            heads: 1,
            level_taps: [1, 2, 3, 4],
            frozen: true,
            weight_source: WeightSource::ExternalRasters { dir: dir.path().to_path_buf() },
        };
        let state =
            ModelState::new(espec, DecoderSpec { fusion_widths: [3, 3, 3, 3], output_dim: 2 }, 9)
                .unwrap();
        let out = state.forward_external("img7", 16, 24).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (16, 24, 2));
    }

    #[test]
    fn encoder_fingerprint_is_stable() {
        let a = Encoder::new(EncoderSpec::toy(8, 8, 123)).unwrap();
        let b = Encoder::new(EncoderSpec::toy(8, 8, 123)).unwrap();
        let c = Encoder::new(EncoderSpec::toy(8, 8, 124)).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
}
