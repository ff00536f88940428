//! Synthetic video scenes with analytic ground-truth depth and bidirectional
//! flow, estimator-noise injection, ingestion of externally produced cue
//! rasters, and assembly of context/query cue stacks.
//!
//! A scene is a textured background plus depth-ordered textured sprites,
//! all translating rigidly; a panning camera shifts everything by its own
//! velocity. Rendering samples band-limited procedural textures at exact
//! world coordinates, so frames, flows and depths are mutually consistent
//! by construction: the flow of the surface visible at a pixel is
//! `(v_surface - v_camera) * delta`, and occluded pixels carry the
//! occluder's flow (as real estimators do). No validity masks enter
//! training.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grids::{self, CropSpec, Grid, GridError};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    BadConfig(String),
    #[error("sprite {index} is fully off-canvas at frame {frame}")]
    SpriteOffCanvas { index: usize, frame: usize },
    #[error("invalid noise model: {0}")]
    BadNoise(String),
    #[error("ingestion error for `{file}`: {detail}")]
    Ingest { file: PathBuf, detail: String },
    #[error("cue assembly: {0}")]
    Assembly(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Sprite footprint shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SpriteShape {
    Disc,
    Square,
}

/// One rigid, textured sprite. Depth may vary linearly across the footprint
/// (a tilted plane), which gives nontrivial analytic surface normals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub texture_seed: u64,
    /// Depth at the sprite centre, scene units, strictly positive.
    pub depth: f64,
    /// Depth slope per world pixel `(d/dx, d/dy)`.
    pub depth_grad: (f64, f64),
    /// World velocity in pixels/frame `(vx, vy)`.
    pub velocity: (f64, f64),
    /// Footprint size (diameter / side) in pixels.
    pub size: f64,
    /// World centre position at frame 0.
    pub center: (f64, f64),
    pub shape: SpriteShape,
}

/// Full synthetic scene description. Sprites must be sorted by ascending
/// depth: the first sprite whose footprint covers a point wins occlusion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub sprites: Vec<SpriteSpec>,
    pub background_seed: u64,
    pub background_depth: f64,
    /// Camera pan velocity in pixels/frame; content shifts by its negative.
    pub camera_velocity: (f64, f64),
    /// Frame horizon over which sprites must stay at least half inside.
    pub clip_len: usize,
    pub seed: u64,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.height < 8 || self.width < 8 {
            return Err(SceneError::BadConfig("canvas must be at least 8x8".into()));
        }
        let mut prev = 0.0;
        for (i, s) in self.sprites.iter().enumerate() {
            if s.depth <= 0.0 {
                return Err(SceneError::BadConfig(format!("sprite {i} depth must be positive")));
            }
            if s.depth < prev {
                return Err(SceneError::BadConfig("sprites must be sorted by ascending depth".into()));
            }
            if s.size <= 1.0 {
                return Err(SceneError::BadConfig(format!("sprite {i} size must exceed 1 px")));
            }
            prev = s.depth;
        }
        if self.background_depth <= prev {
            return Err(SceneError::BadConfig("background must be deeper than every sprite".into()));
        }
        // Centre stays inside the canvas over the clip: at least half of the
        // (symmetric) footprint remains visible.
        for (i, s) in self.sprites.iter().enumerate() {
            for t in [0usize, self.clip_len] {
                let (cx, cy) = self.sprite_image_center(s, t as f64);
                if cx < 0.0 || cx > (self.width - 1) as f64 || cy < 0.0 || cy > (self.height - 1) as f64 {
                    return Err(SceneError::BadConfig(format!(
                        "sprite {i} drifts out of the canvas within {} frames",
                        self.clip_len
                    )));
                }
            }
        }
        Ok(())
    }

    fn camera_offset(&self, t: f64) -> (f64, f64) {
        (self.camera_velocity.0 * t, self.camera_velocity.1 * t)
    }

    fn sprite_world_center(&self, s: &SpriteSpec, t: f64) -> (f64, f64) {
        (s.center.0 + s.velocity.0 * t, s.center.1 + s.velocity.1 * t)
    }

    fn sprite_image_center(&self, s: &SpriteSpec, t: f64) -> (f64, f64) {
        let (wx, wy) = self.sprite_world_center(s, t);
        let (ox, oy) = self.camera_offset(t);
        (wx - ox, wy - oy)
    }

    /// Draws a random valid scene on a `h x w` canvas.
    pub fn sample(rng: &mut impl Rng, height: usize, width: usize, sprite_count: usize) -> SceneConfig {
        let clip_len = 16usize;
        let cam = (rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4));
        let mut depths: Vec<f64> = (0..sprite_count).map(|_| rng.gen_range(1.0..8.0)).collect();
        depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut sprites = Vec::with_capacity(sprite_count);
        for depth in depths {
            let size = rng.gen_range(width as f64 / 5.0..width as f64 / 2.5);
            let margin = size * 0.3 + 2.0;
            let cx = rng.gen_range(margin..width as f64 - margin);
            let cy = rng.gen_range(margin..height as f64 - margin);
            // Velocity small enough that the image-space centre stays inside
            // the canvas over the clip.
            let max_step_x = (cx.min(width as f64 - 1.0 - cx)) / clip_len as f64;
            let max_step_y = (cy.min(height as f64 - 1.0 - cy)) / clip_len as f64;
            let vx = cam.0 + rng.gen_range(-1.0..1.0) * max_step_x.min(1.2);
            let vy = cam.1 + rng.gen_range(-1.0..1.0) * max_step_y.min(1.2);
            let tilt = rng.gen_range(-0.02..0.02);
            let tilt2 = rng.gen_range(-0.02..0.02);
            sprites.push(SpriteSpec {
                texture_seed: rng.gen(),
                depth,
                depth_grad: (tilt, tilt2),
                velocity: (vx, vy),
                size,
                center: (cx, cy),
                shape: if rng.gen_bool(0.5) { SpriteShape::Disc } else { SpriteShape::Square },
            });
        }
        SceneConfig {
            height,
            width,
            sprites,
            background_seed: rng.gen(),
            background_depth: 10.0,
            camera_velocity: cam,
            clip_len,
            seed: rng.gen(),
        }
    }
}

/// Where a sample's cue rasters came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CueProvenance {
    Synthetic,
    External,
}

/// A context/query frame pair with its cue rasters. Flow channel 0 is the
/// horizontal displacement (columns), channel 1 vertical (rows), in pixels
/// of the raster the flow lives on.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePairSample {
    pub frame_t: Grid,
    pub frame_td: Grid,
    pub flow_fwd: Grid,
    pub flow_bwd: Grid,
    pub depth_t: Grid,
    pub depth_td: Grid,
    pub delta: usize,
    pub provenance: CueProvenance,
}

impl FramePairSample {
    pub fn height(&self) -> usize {
        self.frame_t.height()
    }

    pub fn width(&self) -> usize {
        self.frame_t.width()
    }
}

/// A rendered pair plus the analytic surface-id maps used by the oracles.
#[derive(Debug, Clone)]
pub struct RenderedPair {
    pub sample: FramePairSample,
    /// 0 = background, `i + 1` = sprite `i`; one entry per pixel, row-major.
    pub ids_t: Vec<u32>,
    pub ids_td: Vec<u32>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Band-limited procedural texture in `(0, 1)`: three seeded sinusoids with
/// wavelengths of 16..48 px, so bilinear warping error stays far below the
/// photometric tolerance.
fn texture(seed: u64, ch: usize, x: f64, y: f64) -> f32 {
    let amps = [0.20, 0.15, 0.10];
    let mut v = 0.5f64;
    for (o, amp) in amps.iter().enumerate() {
        let h1 = splitmix64(seed ^ splitmix64(((ch as u64) << 32) | (o as u64 + 1)));
        let h2 = splitmix64(h1);
        let h3 = splitmix64(h2);
        let theta = hash_unit(h1) * TAU;
        let wavelength = 16.0 + hash_unit(h2) * 32.0;
        let k = TAU / wavelength;
        v += amp * (k * (x * theta.cos() + y * theta.sin()) + hash_unit(h3) * TAU).sin();
    }
    v as f32
}

struct SurfaceHit {
    id: u32,
    color: [f32; 3],
    depth: f64,
}

fn surface_at(cfg: &SceneConfig, t: f64, world_x: f64, world_y: f64) -> SurfaceHit {
    for (i, s) in cfg.sprites.iter().enumerate() {
        let (cx, cy) = cfg.sprite_world_center(s, t);
        let (lx, ly) = (world_x - cx, world_y - cy);
        let r = s.size / 2.0;
        let inside = match s.shape {
            SpriteShape::Disc => lx * lx + ly * ly <= r * r,
            SpriteShape::Square => lx.abs() <= r && ly.abs() <= r,
        };
        if inside {
            return SurfaceHit {
                id: i as u32 + 1,
                color: [
                    texture(s.texture_seed, 0, lx, ly),
                    texture(s.texture_seed, 1, lx, ly),
                    texture(s.texture_seed, 2, lx, ly),
                ],
                depth: s.depth + s.depth_grad.0 * lx + s.depth_grad.1 * ly,
            };
        }
    }
    SurfaceHit {
        id: 0,
        color: [
            texture(cfg.background_seed, 0, world_x, world_y),
            texture(cfg.background_seed, 1, world_x, world_y),
            texture(cfg.background_seed, 2, world_x, world_y),
        ],
        depth: cfg.background_depth,
    }
}

/// Renders one frame: colour image, per-pixel surface ids, depth map.
/// A sprite whose footprint has left the canvas entirely is a configuration
/// error; a sprite merely hidden behind a nearer one is a normal occlusion.
pub fn render_frame(cfg: &SceneConfig, t: usize) -> Result<(Grid, Vec<u32>, Grid), SceneError> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let (ox, oy) = cfg.camera_offset(t as f64);
    for (i, s) in cfg.sprites.iter().enumerate() {
        let (cx, cy) = cfg.sprite_image_center(s, t as f64);
        let r = s.size / 2.0;
        if cx + r < 0.0 || cy + r < 0.0 || cx - r > (w - 1) as f64 || cy - r > (h - 1) as f64 {
            return Err(SceneError::SpriteOffCanvas { index: i, frame: t });
        }
    }
    let mut rgb = vec![0f32; h * w * 3];
    let mut depth = vec![0f32; h * w];
    let mut ids = vec![0u32; h * w];
    for i in 0..h {
        for j in 0..w {
            let hit = surface_at(cfg, t as f64, j as f64 + ox, i as f64 + oy);
            let p = i * w + j;
            rgb[p * 3..p * 3 + 3].copy_from_slice(&hit.color);
            depth[p] = hit.depth.max(1e-6) as f32;
            ids[p] = hit.id;
        }
    }
    Ok((
        Grid::from_vec(h, w, 3, rgb)?,
        ids,
        Grid::from_vec(h, w, 1, depth)?,
    ))
}

/// Analytic unit surface normals of the visible surface per pixel
/// (3 channels); flat surfaces give `(0, 0, 1)`.
pub fn render_frame_normals(cfg: &SceneConfig, t: usize) -> Result<Grid, SceneError> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let (ox, oy) = cfg.camera_offset(t as f64);
    Ok(Grid::from_fn(h, w, 3, |i, j, ch| {
        let hit = surface_at(cfg, t as f64, j as f64 + ox, i as f64 + oy);
        let (gx, gy) = if hit.id == 0 {
            (0.0, 0.0)
        } else {
            cfg.sprites[hit.id as usize - 1].depth_grad
        };
        let norm = (gx * gx + gy * gy + 1.0).sqrt();
        let n = [-gx / norm, -gy / norm, 1.0 / norm];
        n[ch] as f32
    })?)
}

/// Renders a frame pair with consistent analytic flow and depth. The
/// backward flow is the exact reverse transport of the forward flow on
/// mutually visible pixels. Deterministic given the config.
pub fn render_pair_full(cfg: &SceneConfig, t: usize, delta: usize) -> Result<RenderedPair, SceneError> {
    if delta == 0 {
        return Err(SceneError::BadConfig("delta must be >= 1".into()));
    }
    let (frame_t, ids_t, depth_t) = render_frame(cfg, t)?;
    let (frame_td, ids_td, depth_td) = render_frame(cfg, t + delta)?;
    let (h, w) = (cfg.height, cfg.width);
    let d = delta as f64;
    let flow_of = |ids: &[u32], sign: f64| -> Grid {
        Grid::from_fn(h, w, 2, |i, j, ch| {
            let id = ids[i * w + j];
            let v = if id == 0 { (0.0, 0.0) } else { cfg.sprites[id as usize - 1].velocity };
            let rel = (v.0 - cfg.camera_velocity.0, v.1 - cfg.camera_velocity.1);
            (sign * d * if ch == 0 { rel.0 } else { rel.1 }) as f32
        })
        .expect("flow raster is finite")
    };
    let flow_fwd = flow_of(&ids_t, 1.0);
    let flow_bwd = flow_of(&ids_td, -1.0);
    Ok(RenderedPair {
        sample: FramePairSample {
            frame_t,
            frame_td,
            flow_fwd,
            flow_bwd,
            depth_t,
            depth_td,
            delta,
            provenance: CueProvenance::Synthetic,
        },
        ids_t,
        ids_td,
    })
}

/// Spec-level entry point returning just the sample.
pub fn render_pair(cfg: &SceneConfig, t: usize, delta: usize) -> Result<FramePairSample, SceneError> {
    Ok(render_pair_full(cfg, t, delta)?.sample)
}

/// Strict mutual-visibility mask: pixel `p` of the context frame is visible
/// iff all four bilinear taps of `p + flow_fwd(p)` fall inside the query
/// frame and show the same surface id.
pub fn mutual_visibility(rp: &RenderedPair) -> Vec<bool> {
    let s = &rp.sample;
    let (h, w) = (s.height(), s.width());
    let mut mask = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let id = rp.ids_t[p];
            let qx = j as f64 + s.flow_fwd.get(i, j, 0) as f64;
            let qy = i as f64 + s.flow_fwd.get(i, j, 1) as f64;
            let (x0, y0) = (qx.floor(), qy.floor());
            let (x1, y1) = (x0 + 1.0, y0 + 1.0);
            if x0 < 0.0 || y0 < 0.0 || x1 > (w - 1) as f64 || y1 > (h - 1) as f64 {
                continue;
            }
            let same = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
                .iter()
                .all(|&(y, x)| rp.ids_td[(y as usize) * w + x as usize] == id);
            mask[p] = same;
        }
    }
    mask
}

/// Samples `g` bilinearly at fractional position `(y, x)` with taps clamped
/// to the grid.
pub fn sample_bilinear(g: &Grid, y: f64, x: f64, ch: usize) -> f64 {
    let xc = x.clamp(0.0, (g.width() - 1) as f64);
    let yc = y.clamp(0.0, (g.height() - 1) as f64);
    let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(g.width() - 1), (y0 + 1).min(g.height() - 1));
    let (tx, ty) = (xc - x0 as f64, yc - y0 as f64);
    let v00 = g.get(y0, x0, ch) as f64;
    let v01 = g.get(y0, x1, ch) as f64;
    let v10 = g.get(y1, x0, ch) as f64;
    let v11 = g.get(y1, x1, ch) as f64;
    let top = v00 + (v01 - v00) * tx;
    let bot = v10 + (v11 - v10) * tx;
    top + (bot - top) * ty
}

/// Backward-warps the query frame by the forward flow:
/// `out(p) = frame_td(p + flow_fwd(p))`.
pub fn warp_backward(frame_td: &Grid, flow_fwd: &Grid) -> Grid {
    let (h, w, c) = (frame_td.height(), frame_td.width(), frame_td.channels());
    Grid::from_fn(h, w, c, |i, j, ch| {
        let qx = j as f64 + flow_fwd.get(i, j, 0) as f64;
        let qy = i as f64 + flow_fwd.get(i, j, 1) as f64;
        sample_bilinear(frame_td, qy, qx, ch) as f32
    })
    .expect("warped frame is finite")
}

/// Estimator-noise model for the cue rasters. Frames are never touched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Additive gaussian sigma on flow channels (pixels).
    pub sigma_flow: f64,
    /// Additive gaussian sigma on depth (scene units).
    pub sigma_depth: f64,
    /// Box-blur radius applied to cue rasters before noise; smears cue
    /// boundaries the way real estimators do.
    pub boundary_blur_radius: usize,
    /// Probability that a patch-shaped region of a cue raster is replaced by
    /// the corruption value 0.
    pub dropout_prob: f64,
    /// Side length of dropout patches in pixels.
    pub dropout_patch: usize,
}

impl NoiseModel {
    pub fn none() -> Self {
        NoiseModel {
            sigma_flow: 0.0,
            sigma_depth: 0.0,
            boundary_blur_radius: 0,
            dropout_prob: 0.0,
            dropout_patch: 8,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.sigma_flow < 0.0 || self.sigma_depth < 0.0 {
            return Err(SceneError::BadNoise("sigmas must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(SceneError::BadNoise("dropout probability must be in [0, 1]".into()));
        }
        if self.dropout_prob > 0.0 && self.dropout_patch == 0 {
            return Err(SceneError::BadNoise("dropout patch must be positive".into()));
        }
        Ok(())
    }

    pub fn is_none(&self) -> bool {
        self.sigma_flow == 0.0
            && self.sigma_depth == 0.0
            && self.boundary_blur_radius == 0
            && self.dropout_prob == 0.0
    }
}

fn box_blur(g: &Grid, radius: usize) -> Grid {
    if radius == 0 {
        return g.clone();
    }
    let (h, w, c) = (g.height(), g.width(), g.channels());
    let r = radius as isize;
    // Separable box blur with clamped borders, horizontal then vertical.
    let mut tmp = vec![0f64; h * w * c];
    for i in 0..h {
        for j in 0..w as isize {
            for ch in 0..c {
                let mut acc = 0.0;
                for dx in -r..=r {
                    let x = (j + dx).clamp(0, w as isize - 1) as usize;
                    acc += g.get(i, x, ch) as f64;
                }
                tmp[(i * w + j as usize) * c + ch] = acc / (2 * r + 1) as f64;
            }
        }
    }
    let mut out = vec![0f32; h * w * c];
    for i in 0..h as isize {
        for j in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in -r..=r {
                    let y = (i + dy).clamp(0, h as isize - 1) as usize;
                    acc += tmp[(y * w + j) * c + ch];
                }
                out[(i as usize * w + j) * c + ch] = (acc / (2 * r + 1) as f64) as f32;
            }
        }
    }
    Grid::from_vec(h, w, c, out).expect("blurred grid is finite")
}

fn corrupt_cue(g: &Grid, sigma: f64, nm: &NoiseModel, rng: &mut impl Rng) -> Grid {
    let mut out = box_blur(g, nm.boundary_blur_radius);
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("validated sigma");
        let data: Vec<f32> = out
            .data()
            .iter()
            .map(|&v| (v as f64 + normal.sample(rng)) as f32)
            .collect();
        out = Grid::from_vec(g.height(), g.width(), g.channels(), data).expect("finite noise");
    }
    if nm.dropout_prob > 0.0 {
        let (h, w, c) = (out.height(), out.width(), out.channels());
        let mut data = out.data().to_vec();
        let p = nm.dropout_patch;
        for ty in (0..h).step_by(p) {
            for tx in (0..w).step_by(p) {
                if rng.gen_bool(nm.dropout_prob) {
                    for y in ty..(ty + p).min(h) {
                        for x in tx..(tx + p).min(w) {
                            for ch in 0..c {
                                data[(y * w + x) * c + ch] = 0.0;
                            }
                        }
                    }
                }
            }
        }
        out = Grid::from_vec(h, w, c, data).expect("finite dropout");
    }
    out
}

/// Perturbs the cue rasters of a sample. Frames stay untouched; the gaussian
/// component has zero mean.
pub fn inject_noise(
    sample: &FramePairSample,
    nm: &NoiseModel,
    rng: &mut impl Rng,
) -> Result<FramePairSample, SceneError> {
    nm.validate()?;
    if nm.is_none() {
        return Ok(sample.clone());
    }
    Ok(FramePairSample {
        frame_t: sample.frame_t.clone(),
        frame_td: sample.frame_td.clone(),
        flow_fwd: corrupt_cue(&sample.flow_fwd, nm.sigma_flow, nm, rng),
        flow_bwd: corrupt_cue(&sample.flow_bwd, nm.sigma_flow, nm, rng),
        depth_t: corrupt_cue(&sample.depth_t, nm.sigma_depth, nm, rng),
        depth_td: corrupt_cue(&sample.depth_td, nm.sigma_depth, nm, rng),
        delta: sample.delta,
        provenance: sample.provenance,
    })
}

/// File set of one externally produced frame pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CuePaths {
    pub frame_t: PathBuf,
    pub frame_td: PathBuf,
    pub flow_fwd: PathBuf,
    pub flow_bwd: PathBuf,
    pub depth_t: PathBuf,
    pub depth_td: PathBuf,
    pub delta: usize,
}

/// Manifest record for external-data runs; paths are relative to the
/// manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub frame_t: String,
    pub frame_td: String,
    pub flow_fwd: String,
    pub flow_bwd: String,
    pub depth_t: String,
    pub depth_td: String,
    pub delta: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub pairs: Vec<ManifestRecord>,
}

impl ManifestRecord {
    pub fn paths(&self, base: &Path) -> CuePaths {
        CuePaths {
            frame_t: base.join(&self.frame_t),
            frame_td: base.join(&self.frame_td),
            flow_fwd: base.join(&self.flow_fwd),
            flow_bwd: base.join(&self.flow_bwd),
            depth_t: base.join(&self.depth_t),
            depth_td: base.join(&self.depth_td),
            delta: self.delta,
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|e| SceneError::Ingest {
        file: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    toml::from_str(&text).map_err(|e| SceneError::Ingest {
        file: path.to_path_buf(),
        detail: format!("manifest parse error: {e}"),
    })
}

fn read_checked(
    path: &Path,
    want_channels: usize,
    what: &str,
    size: Option<(usize, usize)>,
) -> Result<Grid, SceneError> {
    let g = grids::raster_read(path).map_err(|e| SceneError::Ingest {
        file: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if g.channels() != want_channels {
        return Err(SceneError::Ingest {
            file: path.to_path_buf(),
            detail: format!("{what} must have {want_channels} channels, got {}", g.channels()),
        });
    }
    if let Some((h, w)) = size {
        if g.height() != h || g.width() != w {
            return Err(SceneError::Ingest {
                file: path.to_path_buf(),
                detail: format!(
                    "{what} is {}x{} but the frames are {h}x{w}; no silent resampling",
                    g.height(),
                    g.width()
                ),
            });
        }
    }
    Ok(g)
}

/// Reads an externally produced frame pair from `LGRD` rasters. All rasters
/// must be spatially consistent with the frames; no noise is applied and the
/// provenance is marked external.
pub fn ingest_external_cues(paths: &CuePaths) -> Result<FramePairSample, SceneError> {
    if paths.delta == 0 {
        return Err(SceneError::BadConfig("manifest delta must be >= 1".into()));
    }
    let frame_t = read_checked(&paths.frame_t, 3, "frame", None)?;
    let size = (frame_t.height(), frame_t.width());
    let frame_td = read_checked(&paths.frame_td, 3, "frame", Some(size))?;
    for (g, p) in [(&frame_t, &paths.frame_t), (&frame_td, &paths.frame_td)] {
        if g.data().iter().any(|&v| !(-1e-6..=1.0 + 1e-6).contains(&v)) {
            return Err(SceneError::Ingest {
                file: p.clone(),
                detail: "frame values must lie in [0, 1]".into(),
            });
        }
    }
    Ok(FramePairSample {
        flow_fwd: read_checked(&paths.flow_fwd, 2, "flow", Some(size))?,
        flow_bwd: read_checked(&paths.flow_bwd, 2, "flow", Some(size))?,
        depth_t: read_checked(&paths.depth_t, 1, "depth", Some(size))?,
        depth_td: read_checked(&paths.depth_td, 1, "depth", Some(size))?,
        frame_t,
        frame_td,
        delta: paths.delta,
        provenance: CueProvenance::External,
    })
}

/// Writes a sample's six rasters under `dir` with the given stem and returns
/// the matching manifest record.
pub fn export_sample(
    sample: &FramePairSample,
    dir: &Path,
    stem: &str,
) -> Result<ManifestRecord, SceneError> {
    let names = [
        ("frame_t", &sample.frame_t),
        ("frame_td", &sample.frame_td),
        ("flow_fwd", &sample.flow_fwd),
        ("flow_bwd", &sample.flow_bwd),
        ("depth_t", &sample.depth_t),
        ("depth_td", &sample.depth_td),
    ];
    for (suffix, grid) in names {
        let path = dir.join(format!("{stem}.{suffix}.lgrd"));
        grids::raster_write(grid, &path).map_err(|e| SceneError::Ingest {
            file: path.clone(),
            detail: e.to_string(),
        })?;
    }
    Ok(ManifestRecord {
        frame_t: format!("{stem}.frame_t.lgrd"),
        frame_td: format!("{stem}.frame_td.lgrd"),
        flow_fwd: format!("{stem}.flow_fwd.lgrd"),
        flow_bwd: format!("{stem}.flow_bwd.lgrd"),
        depth_t: format!("{stem}.depth_t.lgrd"),
        depth_td: format!("{stem}.depth_td.lgrd"),
        delta: sample.delta,
    })
}

/// Which side of the pair a cue stack belongs to. Query stacks negate the
/// flow channels so one linear map explains both directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CueDirection {
    Context,
    Query,
}

fn crop_cue_rasters(
    d: &Grid,
    u: &Grid,
    direction: CueDirection,
    crop: &CropSpec,
) -> Result<(Grid, Grid), SceneError> {
    let d_c = grids::crop_apply(d, crop)?;
    let u_c = grids::crop_apply(u, crop)?;
    let (sx, sy) = crop.flow_scale();
    let sign = match direction {
        CueDirection::Context => 1.0,
        CueDirection::Query => -1.0,
    };
    let (h, w) = (u_c.height(), u_c.width());
    let u_fixed = Grid::from_fn(h, w, 2, |y, x, ch| {
        let scale = if ch == 0 { sx } else { sy };
        (sign * scale * u_c.get(y, x, ch) as f64) as f32
    })?;
    Ok((d_c, u_fixed))
}

/// Crops a flow raster and fixes up its values: magnitudes rescale by
/// `output_size / crop_size` per axis, and query-side flows are negated.
pub fn crop_and_rescale_flow(
    u: &Grid,
    direction: CueDirection,
    crop: &CropSpec,
) -> Result<Grid, SceneError> {
    if u.channels() != 2 {
        return Err(SceneError::Assembly(format!("flow must have 2 channels, got {}", u.channels())));
    }
    let dummy = Grid::constant(u.height(), u.width(), 1, 0.0)?;
    Ok(crop_cue_rasters(&dummy, u, direction, crop)?.1)
}

/// Assembles a cue stack `(F || D || U)` and applies the crop last. Query
/// stacks negate the flow before concatenation, and flow magnitudes are
/// rescaled by `output_size / crop_size` per axis. Output channels:
/// `d_F + 3`.
pub fn assemble_cues(
    f: &Grid,
    d: &Grid,
    u: &Grid,
    direction: CueDirection,
    crop: &CropSpec,
) -> Result<Grid, SceneError> {
    if d.channels() != 1 {
        return Err(SceneError::Assembly(format!("depth must have 1 channel, got {}", d.channels())));
    }
    if u.channels() != 2 {
        return Err(SceneError::Assembly(format!("flow must have 2 channels, got {}", u.channels())));
    }
    for (g, what) in [(d, "depth"), (u, "flow")] {
        if g.height() != f.height() || g.width() != f.width() {
            return Err(SceneError::Assembly(format!(
                "{what} is {}x{} but features are {}x{}",
                g.height(),
                g.width(),
                f.height(),
                f.width()
            )));
        }
    }
    crop.validate(f.height(), f.width()).map_err(SceneError::Grid)?;
    let f_c = grids::crop_apply(f, crop)?;
    let (d_c, u_c) = crop_cue_rasters(d, u, direction, crop)?;
    Ok(Grid::concat_channels(&[&f_c, &d_c, &u_c])?)
}

/// [`assemble_cues`] for the training path where the feature cue already
/// lives on the crop (it comes from the crop's own forward pass): `f_crop`
/// must match the crop output size; depth and flow are full-frame rasters
/// that get cropped and flow-rescaled here.
pub fn assemble_cues_precropped(
    f_crop: &Grid,
    d: &Grid,
    u: &Grid,
    direction: CueDirection,
    crop: &CropSpec,
) -> Result<Grid, SceneError> {
    if f_crop.height() != crop.output_height || f_crop.width() != crop.output_width {
        return Err(SceneError::Assembly(format!(
            "crop features are {}x{} but the crop output is {}x{}",
            f_crop.height(),
            f_crop.width(),
            crop.output_height,
            crop.output_width
        )));
    }
    crop.validate(d.height(), d.width()).map_err(SceneError::Grid)?;
    let (d_c, u_c) = crop_cue_rasters(d, u, direction, crop)?;
    Ok(Grid::concat_channels(&[f_crop, &d_c, &u_c])?)
}

/// Joint per-pair min-max normalisation of the two depth maps to `[0, 1]`,
/// mimicking the scale ambiguity of monocular estimates while keeping
/// targets bounded. Constant depth maps map to 0.5.
pub fn normalize_depth_pair(d_t: &Grid, d_td: &Grid) -> (Grid, Grid) {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for g in [d_t, d_td] {
        for &v in g.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = hi - lo;
    let map = |g: &Grid| {
        if span <= 0.0 {
            g.map(|_| 0.5)
        } else {
            g.map(|v| (v - lo) / span)
        }
    };
    (map(d_t), map(d_td))
}

/// Channel-wise standardisation (zero mean, unit variance) computed jointly
/// over both grids of a pair, so no cue modality dominates the losses.
pub fn standardize_features_pair(a: &Grid, b: &Grid) -> (Grid, Grid) {
    assert_eq!(a.channels(), b.channels());
    let c = a.channels();
    let mut mean = vec![0f64; c];
    let mut m2 = vec![0f64; c];
    let mut count = 0f64;
    for g in [a, b] {
        for px in g.data().chunks_exact(c) {
            for (ch, &v) in px.iter().enumerate() {
                mean[ch] += v as f64;
                m2[ch] += (v as f64) * (v as f64);
            }
        }
        count += g.pixels() as f64;
    }
    let mut std = vec![0f64; c];
    for ch in 0..c {
        mean[ch] /= count;
        std[ch] = (m2[ch] / count - mean[ch] * mean[ch]).max(0.0).sqrt().max(1e-6);
    }
    let apply = |g: &Grid| {
        Grid::from_fn(g.height(), g.width(), c, |y, x, ch| {
            ((g.get(y, x, ch) as f64 - mean[ch]) / std[ch]) as f32
        })
        .expect("standardised grid is finite")
    };
    (apply(a), apply(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn static_scene() -> SceneConfig {
        SceneConfig {
            height: 32,
            width: 32,
            sprites: vec![SpriteSpec {
                texture_seed: 11,
                depth: 2.0,
                depth_grad: (0.0, 0.0),
                velocity: (0.0, 0.0),
                size: 10.0,
                center: (16.0, 16.0),
                shape: SpriteShape::Disc,
            }],
            background_seed: 7,
            background_depth: 10.0,
            camera_velocity: (0.0, 0.0),
            clip_len: 10,
            seed: 1,
        }
    }

    #[test]
    fn static_scene_has_zero_flow_and_identical_frames() {
        let rp = render_pair_full(&static_scene(), 0, 3).unwrap();
        assert_eq!(rp.sample.frame_t.data(), rp.sample.frame_td.data());
        assert!(rp.sample.flow_fwd.data().iter().all(|&v| v == 0.0));
        assert!(rp.sample.flow_bwd.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sprite_velocity_appears_in_flow() {
        let mut cfg = static_scene();
        cfg.sprites[0].velocity = (2.0, 0.0);
        cfg.clip_len = 4;
        let rp = render_pair_full(&cfg, 0, 1).unwrap();
        let (h, w) = (cfg.height, cfg.width);
        for i in 0..h {
            for j in 0..w {
                let id = rp.ids_t[i * w + j];
                let fx = rp.sample.flow_fwd.get(i, j, 0);
                let fy = rp.sample.flow_fwd.get(i, j, 1);
                if id == 1 {
                    assert_eq!((fx, fy), (2.0, 0.0));
                } else {
                    assert_eq!((fx, fy), (0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn rigid_translation_gives_exact_flow_reversal() {
        // Static sprites, panning camera: the whole image translates, so the
        // backward flow is the exact pointwise negation of the forward flow.
        let mut cfg = static_scene();
        cfg.camera_velocity = (0.7, -0.3);
        let rp = render_pair_full(&cfg, 0, 2).unwrap();
        for (a, b) in rp.sample.flow_fwd.data().iter().zip(rp.sample.flow_bwd.data()) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn forward_backward_composition_returns_home() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let cfg = SceneConfig::sample(&mut rng, 40, 40, 2);
            let rp = render_pair_full(&cfg, 1, 3).unwrap();
            let mask = mutual_visibility(&rp);
            let s = &rp.sample;
            let mut checked = 0usize;
            for i in 0..40 {
                for j in 0..40 {
                    if !mask[i * 40 + j] {
                        continue;
                    }
                    let qx = j as f64 + s.flow_fwd.get(i, j, 0) as f64;
                    let qy = i as f64 + s.flow_fwd.get(i, j, 1) as f64;
                    let bx = sample_bilinear(&s.flow_bwd, qy, qx, 0);
                    let by = sample_bilinear(&s.flow_bwd, qy, qx, 1);
                    assert!(((qx + bx) - j as f64).abs() < 1e-4);
                    assert!(((qy + by) - i as f64).abs() < 1e-4);
                    checked += 1;
                }
            }
            assert!(checked > 100, "visibility mask too small: {checked}");
        }
    }

    #[test]
    fn photometric_consistency_under_warping() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let cfg = SceneConfig::sample(&mut rng, 40, 40, 2);
            let rp = render_pair_full(&cfg, 0, 2).unwrap();
            let mask = mutual_visibility(&rp);
            let warped = warp_backward(&rp.sample.frame_td, &rp.sample.flow_fwd);
            let mut err = 0.0f64;
            let mut n = 0usize;
            for p in 0..mask.len() {
                if !mask[p] {
                    continue;
                }
                for ch in 0..3 {
                    err += (warped.data()[p * 3 + ch] as f64 - rp.sample.frame_t.data()[p * 3 + ch] as f64)
                        .abs();
                    n += 1;
                }
            }
            assert!(n > 0);
            let mae = err / n as f64;
            assert!(mae < 2e-2, "photometric MAE {mae}");
        }
    }

    #[test]
    fn rendering_is_seed_deterministic() {
        let mut rng1 = ChaCha8Rng::seed_from_u64(9);
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let c1 = SceneConfig::sample(&mut rng1, 24, 24, 2);
        let c2 = SceneConfig::sample(&mut rng2, 24, 24, 2);
        let a = render_pair_full(&c1, 2, 4).unwrap();
        let b = render_pair_full(&c2, 2, 4).unwrap();
        assert_eq!(a.sample, b.sample);
    }

    #[test]
    fn off_canvas_sprite_rejected() {
        let mut cfg = static_scene();
        cfg.sprites[0].center = (200.0, 200.0);
        assert!(matches!(render_pair(&cfg, 0, 1), Err(SceneError::BadConfig(_))));
    }

    #[test]
    fn zero_noise_model_is_identity() {
        let rp = render_pair(&static_scene(), 0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = inject_noise(&rp, &NoiseModel::none(), &mut rng).unwrap();
        assert_eq!(out, rp);
    }

    #[test]
    fn gaussian_noise_has_requested_scale() {
        let rp = render_pair(&static_scene(), 0, 1).unwrap();
        let nm = NoiseModel { sigma_flow: 0.5, ..NoiseModel::none() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Empirical std of the perturbation on one pixel over many draws.
        let mut sum = 0.0f64;
        let mut sum2 = 0.0f64;
        let draws = 10_000;
        for _ in 0..draws {
            let noisy = inject_noise(&rp, &nm, &mut rng).unwrap();
            let d = noisy.flow_fwd.get(3, 3, 0) as f64 - rp.flow_fwd.get(3, 3, 0) as f64;
            sum += d;
            sum2 += d * d;
        }
        let mean = sum / draws as f64;
        let std = (sum2 / draws as f64 - mean * mean).sqrt();
        assert!((std - 0.5).abs() / 0.5 < 0.05, "std {std}");
        assert!(mean.abs() < 0.02, "mean {mean}");
        // Frames untouched.
        let noisy = inject_noise(&rp, &nm, &mut rng).unwrap();
        assert_eq!(noisy.frame_t, rp.frame_t);
    }

    #[test]
    fn full_dropout_zeroes_the_cues() {
        let rp = render_pair(&static_scene(), 0, 1).unwrap();
        let nm = NoiseModel {
            dropout_prob: 1.0,
            dropout_patch: 32,
            ..NoiseModel::none()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = inject_noise(&rp, &nm, &mut rng).unwrap();
        assert!(out.flow_fwd.data().iter().all(|&v| v == 0.0));
        assert!(out.depth_t.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.frame_t, rp.frame_t);
    }

    #[test]
    fn export_then_ingest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rp = render_pair(&static_scene(), 0, 2).unwrap();
        let rec = export_sample(&rp, dir.path(), "pair0").unwrap();
        let back = ingest_external_cues(&rec.paths(dir.path())).unwrap();
        assert_eq!(back.frame_t, rp.frame_t);
        assert_eq!(back.flow_fwd, rp.flow_fwd);
        assert_eq!(back.depth_td, rp.depth_td);
        assert_eq!(back.delta, 2);
        assert_eq!(back.provenance, CueProvenance::External);
    }

    #[test]
    fn ingest_rejects_bad_channel_counts_and_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let rp = render_pair(&static_scene(), 0, 2).unwrap();
        let rec = export_sample(&rp, dir.path(), "pair").unwrap();
        // Overwrite the forward flow with a 3-channel raster.
        let bad_flow = Grid::constant(32, 32, 3, 0.0).unwrap();
        grids::raster_write(&bad_flow, &dir.path().join("pair.flow_fwd.lgrd")).unwrap();
        match ingest_external_cues(&rec.paths(dir.path())) {
            Err(SceneError::Ingest { detail, .. }) => {
                assert!(detail.contains("flow must have 2 channels"), "{detail}")
            }
            other => panic!("expected ingest error, got {other:?}"),
        }
        // Restore flow, break the depth resolution.
        grids::raster_write(&rp.flow_fwd, &dir.path().join("pair.flow_fwd.lgrd")).unwrap();
        let half_depth = Grid::constant(16, 16, 1, 1.0).unwrap();
        grids::raster_write(&half_depth, &dir.path().join("pair.depth_t.lgrd")).unwrap();
        match ingest_external_cues(&rec.paths(dir.path())) {
            Err(SceneError::Ingest { detail, .. }) => {
                assert!(detail.contains("no silent resampling"), "{detail}")
            }
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn assemble_orders_channels_and_negates_query_flow() {
        let f = Grid::constant(8, 8, 4, 0.25).unwrap();
        let d = Grid::constant(8, 8, 1, 0.5).unwrap();
        let u = Grid::from_fn(8, 8, 2, |_, _, ch| if ch == 0 { 1.0 } else { -2.0 }).unwrap();
        let crop = CropSpec::full(8, 8);
        let ctx = assemble_cues(&f, &d, &u, CueDirection::Context, &crop).unwrap();
        assert_eq!(ctx.channels(), 4 + 3);
        assert_eq!(ctx.get(4, 4, 5), 1.0);
        assert_eq!(ctx.get(4, 4, 6), -2.0);
        let qry = assemble_cues(&f, &d, &u, CueDirection::Query, &crop).unwrap();
        assert_eq!(qry.get(4, 4, 5), -1.0);
        assert_eq!(qry.get(4, 4, 6), 2.0);
        // Feature and depth channels identical in both directions.
        assert_eq!(qry.get(4, 4, 0), 0.25);
        assert_eq!(qry.get(4, 4, 4), 0.5);
    }

    #[test]
    fn crop_rescales_flow_magnitudes_per_axis() {
        let f = Grid::constant(8, 8, 1, 0.0).unwrap();
        let d = Grid::constant(8, 8, 1, 0.0).unwrap();
        let u = Grid::from_fn(8, 8, 2, |_, _, ch| if ch == 0 { 3.0 } else { 1.0 }).unwrap();
        // Window of half width, output matches: scale 1.
        let crop = CropSpec { top: 0, left: 0, crop_height: 8, crop_width: 4, output_height: 8, output_width: 4 };
        let out = assemble_cues(&f, &d, &u, CueDirection::Context, &crop).unwrap();
        assert_eq!(out.get(2, 2, 2), 3.0);
        // Full window, doubled output width: horizontal flow doubles.
        let crop2 = CropSpec { top: 0, left: 0, crop_height: 8, crop_width: 8, output_height: 16, output_width: 16 };
        let out2 = assemble_cues(&f, &d, &u, CueDirection::Context, &crop2).unwrap();
        assert!((out2.get(4, 4, 2) - 6.0).abs() < 1e-6);
        assert!((out2.get(4, 4, 3) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn flow_rescale_is_consistent_with_warping() {
        // Rigid pan: warping the cropped query frame by the cropped+rescaled
        // forward flow must reproduce the cropped context frame.
        let mut cfg = static_scene();
        cfg.camera_velocity = (1.0, 0.5);
        let rp = render_pair_full(&cfg, 0, 2).unwrap();
        let s = &rp.sample;
        let crop = CropSpec { top: 4, left: 4, crop_height: 20, crop_width: 20, output_height: 10, output_width: 10 };
        let c0 = grids::crop_apply(&s.frame_t, &crop).unwrap();
        let ctd = grids::crop_apply(&s.frame_td, &crop).unwrap();
        let stack = assemble_cues(
            &Grid::constant(32, 32, 1, 0.0).unwrap(),
            &s.depth_t,
            &s.flow_fwd,
            CueDirection::Context,
            &crop,
        )
        .unwrap();
        let flow_c = stack.select_channels(&[2, 3]);
        let warped = warp_backward(&ctd, &flow_c);
        let mut err = 0.0;
        for (a, b) in warped.data().iter().zip(c0.data()) {
            err += (a - b).abs() as f64;
        }
        let mae = err / c0.data().len() as f64;
        assert!(mae < 3e-2, "crop-warp MAE {mae}");
    }

    #[test]
    fn depth_normalisation_bounds_and_constant_case() {
        let d1 = Grid::from_fn(4, 4, 1, |y, x, _| 1.0 + (y + x) as f32).unwrap();
        let d2 = Grid::from_fn(4, 4, 1, |y, x, _| 2.0 + (y * x) as f32).unwrap();
        let (n1, n2) = normalize_depth_pair(&d1, &d2);
        for g in [&n1, &n2] {
            assert!(g.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let flat = Grid::constant(4, 4, 1, 5.0).unwrap();
        let (f1, _) = normalize_depth_pair(&flat, &flat);
        assert!(f1.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn standardisation_zeroes_mean_and_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        let a = Grid::from_fn(6, 6, 2, |_, _, _| rng.gen_range(3.0f32..9.0)).unwrap();
        let b = Grid::from_fn(6, 6, 2, |_, _, _| rng.gen_range(3.0f32..9.0)).unwrap();
        let (sa, sb) = standardize_features_pair(&a, &b);
        for ch in 0..2 {
            let vals: Vec<f64> = sa
                .data()
                .chunks_exact(2)
                .chain(sb.data().chunks_exact(2))
                .map(|px| px[ch] as f64)
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn normals_of_tilted_sprites_are_unit_and_analytic() {
        let mut cfg = static_scene();
        cfg.sprites[0].depth_grad = (0.03, -0.01);
        let n = render_frame_normals(&cfg, 0).unwrap();
        for px in n.data().chunks_exact(3) {
            let norm: f32 = (px[0] * px[0] + px[1] * px[1] + px[2] * px[2]).sqrt();
            assert!((norm - 1.0).abs() < 1e-5);
        }
        // Background is flat.
        assert_eq!(n.get(0, 0, 2), 1.0);
    }
}
