//! The training loop: temporal pair sampling, crop generation, cue
//! preparation (refinement + assembly), the in-context solve, the loss,
//! optimisation and checkpointing; plus the per-frame distillation baseline.
//!
//! Two training modes share everything except the objective. `InContext`
//! fits a closed-form linear map from downsampled context features to the
//! downsampled context cue stack and penalises the map's reconstruction of
//! the full-resolution query cues. `PerFrame` drops the cross-frame solve
//! and regresses each crop's own cues through a fixed random linear head.
//! Only decoder parameters ever receive updates.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exec::{self, ExecMode};
use crate::grids::{self, CropSpec, Grid};
use crate::incontext::{
    self, grid_to_matrix, loss_total_tape, median_gradient_sigma, ridge_solve_tape, LambdaPolicy,
    LossWeights, SigmaPolicy,
};
use crate::model::{DecoderSpec, EncoderSpec, ModelState};
use crate::pamr::{self, PamrConfig};
use crate::scenes::{
    self, CueDirection, FramePairSample, Manifest, NoiseModel, SceneConfig,
};
use crate::tensor::{Tape, Var};

const CHECKPOINT_MAGIC: [u8; 4] = *b"LCKP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch element {index}: {source}")]
    Element { index: usize, source: Box<TrainError> },
    #[error(transparent)]
    Scene(#[from] scenes::SceneError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Incontext(#[from] incontext::IncontextError),
    #[error(transparent)]
    Pamr(#[from] pamr::PamrError),
    #[error(transparent)]
    Grid(#[from] grids::GridError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint integrity: {0}")]
    Corrupt(String),
    #[error("checkpoint config hash {found} does not match current config {expected}")]
    ConfigHashMismatch { found: String, expected: String },
}

/// Training objective variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Cross-frame in-context objective with the closed-form solve.
    InContext,
    /// Per-frame cue regression through a fixed linear head; no solve.
    PerFrame,
}

fn default_crop_scale() -> [f64; 2] {
    [0.5, 1.0]
}

/// Full run configuration. Every key is a config-file key; unspecified keys
/// fall back to these defaults.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Temporal gaps are drawn uniformly from `1..=delta_max`.
    pub delta_max: usize,
    #[serde(default = "default_crop_scale")]
    pub crop_scale_range: [f64; 2],
    pub crop_output_size: usize,
    pub gamma: f64,
    pub sigma_policy: SigmaPolicy,
    pub lambda_policy: LambdaPolicy,
    pub context_downsample_factor: usize,
    pub mode: TrainMode,
    pub seed: u64,
    // Component toggles.
    pub use_sd_cue: bool,
    pub use_depth_cue: bool,
    pub use_flow_cue: bool,
    pub use_pamr: bool,
    pub use_cropping: bool,
    /// Off: the pair degenerates to one frame seen through two crops.
    pub use_temporal_sampling: bool,
    // Model.
    pub encoder_patch: usize,
    pub encoder_width: usize,
    pub decoder_widths: [usize; 4],
    pub output_dim: usize,
    // Synthetic data.
    pub canvas_size: usize,
    pub sprite_count: usize,
    pub scene_count: usize,
    pub noise: NoiseModel,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            batch_size: 8,
            max_steps: 500,
            delta_max: 5,
            crop_scale_range: default_crop_scale(),
            crop_output_size: 32,
            gamma: 1.0,
            sigma_policy: SigmaPolicy::default(),
            lambda_policy: LambdaPolicy::default(),
            context_downsample_factor: 7,
            mode: TrainMode::InContext,
            seed: 0,
            use_sd_cue: true,
            use_depth_cue: true,
            use_flow_cue: true,
            use_pamr: true,
            use_cropping: true,
            use_temporal_sampling: true,
            encoder_patch: 8,
            encoder_width: 32,
            decoder_widths: [16, 24, 32, 48],
            output_dim: 32,
            canvas_size: 48,
            sprite_count: 3,
            scene_count: 8,
            noise: NoiseModel::none(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return Err(TrainError::BadConfig("rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch size must be >= 1".into()));
        }
        if self.delta_max == 0 {
            return Err(TrainError::BadConfig("delta_max must be >= 1".into()));
        }
        let [lo, hi] = self.crop_scale_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(TrainError::BadConfig("crop scale range must satisfy 0 < lo <= hi <= 1".into()));
        }
        if !(self.use_sd_cue || self.use_depth_cue || self.use_flow_cue) {
            return Err(TrainError::BadConfig("at least one cue modality must stay on".into()));
        }
        if self.crop_output_size % self.encoder_patch != 0 {
            return Err(TrainError::BadConfig(format!(
                "crop output {} must be divisible by the encoder patch {}",
                self.crop_output_size, self.encoder_patch
            )));
        }
        if self.context_downsample_factor == 0
            || self.context_downsample_factor > self.crop_output_size
        {
            return Err(TrainError::BadConfig("bad context downsample factor".into()));
        }
        if self.canvas_size < self.crop_output_size {
            return Err(TrainError::BadConfig("canvas smaller than crop output".into()));
        }
        Ok(())
    }

    /// Channel count of the assembled cue stack under the active toggles.
    pub fn cue_channels(&self) -> usize {
        let mut m = 0;
        if self.use_sd_cue {
            m += self.encoder_width;
        }
        if self.use_depth_cue {
            m += 1;
        }
        if self.use_flow_cue {
            m += 2;
        }
        m
    }

    /// Canonical hash of the config, stored in checkpoints and reports.
    pub fn config_hash(&self) -> String {
        let text = toml::to_string(self).expect("config serialises");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based stream seed: sampling depends only on `(seed, step,
/// element, purpose)`, never on how much entropy other draws consumed. Runs
/// that differ in one config knob therefore see identical data streams,
/// which keeps ablations and sweeps paired.
fn stream_seed(base: u64, step: u64, element: u64, purpose: u64) -> u64 {
    let mut z = base;
    for v in [step, element, purpose] {
        z = derive_seed(z, v.wrapping_add(0x9E37_79B9));
    }
    z
}

/// Training data source.
pub enum Dataset {
    Synthetic { scenes: Vec<SceneConfig> },
    External { base: PathBuf, manifest: Manifest },
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Synthetic { scenes } => scenes.len(),
            Dataset::External { manifest, .. } => manifest.pairs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builds the synthetic scene pool for a config.
pub fn synthetic_dataset(cfg: &TrainConfig) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5ce17e5));
    let scenes = (0..cfg.scene_count)
        .map(|_| SceneConfig::sample(&mut rng, cfg.canvas_size, cfg.canvas_size, cfg.sprite_count))
        .collect();
    Dataset::Synthetic { scenes }
}

pub(crate) fn draw_delta(rng: &mut impl Rng, delta_max: usize) -> usize {
    rng.gen_range(1..=delta_max)
}

/// Draws one frame pair. The gap is uniform over `1..=delta_max`; with
/// temporal sampling off the pair degenerates to a single frame (gap 0,
/// zero flow, both sides identical).
pub fn sample_pair(
    dataset: &Dataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(FramePairSample, usize), TrainError> {
    let delta = if cfg.use_temporal_sampling { draw_delta(rng, cfg.delta_max) } else { 0 };
    sample_pair_for_delta(dataset, delta, rng)
}

/// Renders/loads a pair for a pre-drawn gap. Gap 0 degenerates to a single
/// frame seen twice. External datasets carry their own gaps.
pub(crate) fn sample_pair_for_delta(
    dataset: &Dataset,
    delta: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(FramePairSample, usize), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    match dataset {
        Dataset::Synthetic { scenes } => {
            let scene = &scenes[rng.gen_range(0..scenes.len())];
            if delta > 0 {
                // A shared unit draw keeps the frame choice aligned across
                // runs with different gap windows.
                let span = scene.clip_len.saturating_sub(delta).max(1);
                let t = (rng.gen_range(0.0..1.0f64) * span as f64) as usize;
                let sample = scenes::render_pair(scene, t.min(span - 1), delta)?;
                Ok((sample, delta))
            } else {
                let t = rng.gen_range(0..scene.clip_len.max(1));
                let (frame, _ids, depth) = scenes::render_frame(scene, t)?;
                let zero_flow = Grid::constant(frame.height(), frame.width(), 2, 0.0)?;
                let sample = FramePairSample {
                    frame_td: frame.clone(),
                    depth_td: depth.clone(),
                    flow_fwd: zero_flow.clone(),
                    flow_bwd: zero_flow,
                    frame_t: frame,
                    depth_t: depth,
                    delta: 0,
                    provenance: scenes::CueProvenance::Synthetic,
                };
                Ok((sample, 0))
            }
        }
        Dataset::External { base, manifest } => {
            let rec = &manifest.pairs[rng.gen_range(0..manifest.pairs.len())];
            let sample = scenes::ingest_external_cues(&rec.paths(base))?;
            let delta = sample.delta;
            Ok((sample, delta))
        }
    }
}

/// Draws two independent aspect-preserving crops, one per frame. With
/// cropping off, both specs cover the full frame.
pub fn make_crops(
    sample: &FramePairSample,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Grid, CropSpec, Grid, CropSpec), TrainError> {
    let (h, w) = (sample.height(), sample.width());
    let out = cfg.crop_output_size;
    let draw = |rng: &mut ChaCha8Rng| -> Result<CropSpec, TrainError> {
        let spec = if cfg.use_cropping {
            let [lo, hi] = cfg.crop_scale_range;
            let side_max = h.min(w);
            let side = ((rng.gen_range(lo..=hi) * side_max as f64).round() as usize)
                .clamp(2, side_max);
            let top = rng.gen_range(0..=h - side);
            let left = rng.gen_range(0..=w - side);
            CropSpec {
                top,
                left,
                crop_height: side,
                crop_width: side,
                output_height: out,
                output_width: out,
            }
        } else {
            if h != w {
                return Err(TrainError::BadConfig(
                    "cropping off needs a square canvas to keep the aspect".into(),
                ));
            }
            CropSpec {
                top: 0,
                left: 0,
                crop_height: h,
                crop_width: w,
                output_height: out,
                output_width: out,
            }
        };
        spec.validate(h, w).map_err(TrainError::Grid)?;
        Ok(spec)
    };
    let spec0 = draw(rng)?;
    let spec_d = draw(rng)?;
    let c0 = grids::crop_apply(&sample.frame_t, &spec0)?;
    let cd = grids::crop_apply(&sample.frame_td, &spec_d)?;
    Ok((c0, spec0, cd, spec_d))
}

/// Cue targets for one element, as plain grids (constants to the tape).
pub struct Targets {
    pub g_context: Grid,
    pub g_query: Grid,
}

/// Builds the context/query cue stacks for a cropped pair.
///
/// The feature cue comes from the crop's own encoder pass: deepest tapped
/// level, upsampled to crop size, refined against the crop image (when the
/// refinement toggle is on) and standardised jointly over the pair. Depth is
/// min-max normalised per pair before cropping. Flow channels are negated
/// on the query side and rescaled under each crop.
pub fn prepare_targets(
    sample: &FramePairSample,
    spec0: &CropSpec,
    spec_d: &CropSpec,
    crop0: &Grid,
    crop_d: &Grid,
    enc0_deep: &Grid,
    encd_deep: &Grid,
    cfg: &TrainConfig,
    pamr_cfg: &PamrConfig,
) -> Result<Targets, TrainError> {
    let mut parts_ctx: Vec<Grid> = Vec::new();
    let mut parts_qry: Vec<Grid> = Vec::new();

    if cfg.use_sd_cue {
        let up0 = grids::resample_bilinear(enc0_deep, crop0.height(), crop0.width())?;
        let upd = grids::resample_bilinear(encd_deep, crop_d.height(), crop_d.width())?;
        let (f0, fd) = if cfg.use_pamr {
            (
                pamr::pamr_refine(&up0, crop0, pamr_cfg)?,
                pamr::pamr_refine(&upd, crop_d, pamr_cfg)?,
            )
        } else {
            (up0, upd)
        };
        let (f0, fd) = scenes::standardize_features_pair(&f0, &fd);
        parts_ctx.push(f0);
        parts_qry.push(fd);
    }
    if cfg.use_depth_cue {
        let (d0, dd) = scenes::normalize_depth_pair(&sample.depth_t, &sample.depth_td);
        parts_ctx.push(grids::crop_apply(&d0, spec0)?);
        parts_qry.push(grids::crop_apply(&dd, spec_d)?);
    }
    if cfg.use_flow_cue {
        parts_ctx.push(scenes::crop_and_rescale_flow(
            &sample.flow_fwd,
            CueDirection::Context,
            spec0,
        )?);
        parts_qry.push(scenes::crop_and_rescale_flow(
            &sample.flow_bwd,
            CueDirection::Query,
            spec_d,
        )?);
    }
    let refs_ctx: Vec<&Grid> = parts_ctx.iter().collect();
    let refs_qry: Vec<&Grid> = parts_qry.iter().collect();
    Ok(Targets {
        g_context: Grid::concat_channels(&refs_ctx)?,
        g_query: Grid::concat_channels(&refs_qry)?,
    })
}

/// Everything phase one produces for a batch element; phase two turns it
/// into a loss and gradients.
struct Prepared {
    crop0: Grid,
    crop_d: Grid,
    targets: Targets,
}

/// The in-context objective on a tape, shared by the trainer and by tests
/// that feed engineered features directly.
#[allow(clippy::too_many_arguments)]
pub fn incontext_objective(
    tape: &Tape,
    x0: Var,
    xq: Var,
    crop_h: usize,
    crop_w: usize,
    g_context: &Grid,
    g_query: &Grid,
    factor: usize,
    lambda_policy: &LambdaPolicy,
    weights: &LossWeights,
) -> Result<(Var, ObjectiveShapes), TrainError> {
    let (ds_h, ds_w) = (crop_h / factor, crop_w / factor);
    let x0_ds = tape.resize_bilinear(x0, crop_h, crop_w, ds_h, ds_w);
    let (gc_ds_h, gc_ds_w);
    let g_ctx_ds = {
        let g = grids::resample_bilinear(g_context, ds_h, ds_w)?;
        gc_ds_h = g.height();
        gc_ds_w = g.width();
        grid_to_matrix(&g)
    };
    debug_assert_eq!((gc_ds_h, gc_ds_w), (ds_h, ds_w));
    let x0_aug = tape.append_ones_col(x0_ds);
    let lambda = lambda_policy.resolve(&tape.value(x0_aug));
    let gc = tape.constant(g_ctx_ds);
    let w_star = ridge_solve_tape(tape, x0_aug, gc, lambda)?;
    let xq_aug = tape.append_ones_col(xq);
    let pred = tape.matmul(xq_aug, w_star);
    let loss = loss_total_tape(tape, pred, crop_h, crop_w, &grid_to_matrix(g_query), weights);
    Ok((
        loss,
        ObjectiveShapes { solve_rows: ds_h * ds_w, loss_rows: crop_h * crop_w },
    ))
}

/// Instrumented shapes of one objective evaluation: the solve must see the
/// downsampled grid, the loss the full-resolution one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectiveShapes {
    pub solve_rows: usize,
    pub loss_rows: usize,
}

/// Decoupled-weight-decay adaptive optimiser over a parameter list.
pub struct AdamW {
    lr: f64,
    wd: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, wd: f64, shapes: &[(usize, usize)]) -> Self {
        AdamW {
            lr,
            wd,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Array2::zeros((r, c))).collect(),
            v: shapes.iter().map(|&(r, c)| Array2::zeros((r, c))).collect(),
        }
    }

    pub fn step(&mut self, params: &mut crate::model::ParamSet, grads: &[Array2<f64>]) {
        assert_eq!(grads.len(), params.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..grads.len() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let p = params.value_mut(i);
            for ((p, m), v) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.wd * *p);
            }
        }
    }
}

/// Per-step result.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub shapes: Option<ObjectiveShapes>,
}

/// Stateful trainer: model, optimiser, counter-based sampling.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ModelState,
    pub optimizer: AdamW,
    pub pamr_cfg: PamrConfig,
    step: u64,
    /// Fixed random head for the per-frame baseline; never trained.
    fixed_head: Array2<f64>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let espec = EncoderSpec::toy(
            cfg.encoder_patch,
            cfg.encoder_width,
            derive_seed(cfg.seed, 0xe9c0de),
        );
        let dspec = DecoderSpec { fusion_widths: cfg.decoder_widths, output_dim: cfg.output_dim };
        let model = ModelState::new(espec, dspec, derive_seed(cfg.seed, 0xdec0de))?;
        let shapes: Vec<(usize, usize)> =
            model.decoder.params.iter().map(|(_, v)| v.dim()).collect();
        let optimizer = AdamW::new(cfg.learning_rate, cfg.weight_decay, &shapes);
        let mut head_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x4ead));
        let m = cfg.cue_channels();
        let fixed_head = Array2::from_shape_fn((cfg.output_dim, m), |_| {
            head_rng.gen_range(-1.0..1.0) / (cfg.output_dim as f64).sqrt()
        });
        Ok(Trainer { cfg, model, optimizer, pamr_cfg: PamrConfig::default(), step: 0, fixed_head })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn stream(&self, element: usize, purpose: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(stream_seed(
            derive_seed(self.cfg.seed, 0x5a3b1e),
            self.step,
            element as u64,
            purpose,
        ))
    }

    fn prepare_element(&self, dataset: &Dataset, element: usize) -> Result<Prepared, TrainError> {
        let delta = if self.cfg.use_temporal_sampling {
            draw_delta(&mut self.stream(element, 1), self.cfg.delta_max)
        } else {
            0
        };
        let (clean, _delta) =
            sample_pair_for_delta(dataset, delta, &mut self.stream(element, 2))?;
        let sample = if clean.provenance == scenes::CueProvenance::Synthetic {
            scenes::inject_noise(&clean, &self.cfg.noise, &mut self.stream(element, 3))?
        } else {
            clean
        };
        let (crop0, spec0, crop_d, spec_d) =
            make_crops(&sample, &self.cfg, &mut self.stream(element, 4))?;
        let enc0 = self.model.encoder.encode(&crop0)?;
        let encd = self.model.encoder.encode(&crop_d)?;
        let deep0 = crate::incontext::matrix_to_grid(
            enc0.levels.last().unwrap(),
            enc0.token_h,
            enc0.token_w,
        );
        let deepd = crate::incontext::matrix_to_grid(
            encd.levels.last().unwrap(),
            encd.token_h,
            encd.token_w,
        );
        let targets = prepare_targets(
            &sample,
            &spec0,
            &spec_d,
            &crop0,
            &crop_d,
            &deep0,
            &deepd,
            &self.cfg,
            &self.pamr_cfg,
        )?;
        Ok(Prepared { crop0, crop_d, targets })
    }

    fn resolve_sigma(&self, prepared: &[Prepared]) -> f64 {
        match self.cfg.sigma_policy {
            SigmaPolicy::Fixed { value } => value,
            SigmaPolicy::BatchMedian => {
                let gqs: Vec<&Grid> = prepared.iter().map(|p| &p.targets.g_query).collect();
                median_gradient_sigma(&gqs)
            }
        }
    }

    fn element_pass(
        &self,
        prep: &Prepared,
        weights: &LossWeights,
    ) -> Result<(f64, Vec<Array2<f64>>, ObjectiveShapes), TrainError> {
        let tape = Tape::new();
        let vars = self.model.decoder.bind(&tape);
        let size = self.cfg.crop_output_size;
        let (loss_var, shapes) = match self.cfg.mode {
            TrainMode::InContext => {
                let x0 = self.model.forward_tape(&tape, &vars, &prep.crop0)?;
                let xq = self.model.forward_tape(&tape, &vars, &prep.crop_d)?;
                incontext_objective(
                    &tape,
                    x0,
                    xq,
                    size,
                    size,
                    &prep.targets.g_context,
                    &prep.targets.g_query,
                    self.cfg.context_downsample_factor,
                    &self.cfg.lambda_policy,
                    weights,
                )?
            }
            TrainMode::PerFrame => {
                // Each crop regresses its own cue stack through the fixed
                // head; no cross-frame term, no solve.
                let head = tape.constant(self.fixed_head.clone());
                let x0 = self.model.forward_tape(&tape, &vars, &prep.crop0)?;
                let p0 = tape.matmul(x0, head);
                let l0 = loss_total_tape(
                    &tape,
                    p0,
                    size,
                    size,
                    &grid_to_matrix(&prep.targets.g_context),
                    weights,
                );
                let xq = self.model.forward_tape(&tape, &vars, &prep.crop_d)?;
                let pq = tape.matmul(xq, head);
                // The query stack keeps its negated flow; the head simply
                // learns the frame's own cue representation.
                let lq = loss_total_tape(
                    &tape,
                    pq,
                    size,
                    size,
                    &grid_to_matrix(&prep.targets.g_query),
                    weights,
                );
                let loss = tape.scale(tape.add(l0, lq), 0.5);
                (loss, ObjectiveShapes { solve_rows: 0, loss_rows: size * size })
            }
        };
        let loss = tape.scalar(loss_var);
        if !loss.is_finite() {
            return Err(TrainError::BadConfig(format!("non-finite loss {loss}")));
        }
        let grads = tape.backward(loss_var);
        let g: Vec<Array2<f64>> = vars.vars.iter().map(|&v| grads.get(v)).collect();
        Ok((loss, g, shapes))
    }

    /// Runs one optimisation step over a fresh batch. Sampling and cue
    /// preparation are deterministic for a given trainer state; batch
    /// elements evaluate independently (in parallel when enabled) and their
    /// gradients are summed in index order.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<StepStats, TrainError> {
        let b = self.cfg.batch_size;
        // Phase one: sample and prepare every element; counter-based
        // streams make this order-independent and parallel-safe.
        let prep_results = exec::map_indexed(ExecMode::auto(), b, |i| self.prepare_element(dataset, i));
        let mut prepared = Vec::with_capacity(b);
        for (index, res) in prep_results.into_iter().enumerate() {
            prepared.push(res.map_err(|e| TrainError::Element { index, source: Box::new(e) })?);
        }
        let sigma = self.resolve_sigma(&prepared);
        let weights = LossWeights::new(self.cfg.gamma, sigma.max(1e-9))
            .map_err(TrainError::Incontext)?;
        // Phase two in parallel; results collected in index order.
        let results = exec::map_indexed(ExecMode::auto(), b, |i| {
            self.element_pass(&prepared[i], &weights)
        });
        let mut total_loss = 0.0;
        let mut shapes = None;
        let mut grad_sum: Option<Vec<Array2<f64>>> = None;
        for (index, res) in results.into_iter().enumerate() {
            let (loss, grads, sh) =
                res.map_err(|e| TrainError::Element { index, source: Box::new(e) })?;
            total_loss += loss;
            shapes = Some(sh);
            match &mut grad_sum {
                None => grad_sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(grads) {
                        *a += &g;
                    }
                }
            }
        }
        let mut grads = grad_sum.expect("batch size >= 1");
        for g in &mut grads {
            *g /= b as f64;
        }
        self.optimizer.step(&mut self.model.decoder.params, &grads);
        self.step += 1;
        Ok(StepStats { step: self.step, loss: total_loss / b as f64, shapes })
    }
}

// ---- checkpointing ----

fn write_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn write_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn write_mat(w: &mut Vec<u8>, m: &Array2<f64>) {
    write_u64(w, m.nrows() as u64);
    write_u64(w, m.ncols() as u64);
    for v in m.iter() {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.buf.len() {
            return Err(TrainError::Corrupt("unexpected end of checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn mat(&mut self) -> Result<Array2<f64>, TrainError> {
        let r = self.u64()? as usize;
        let c = self.u64()? as usize;
        let bytes = self.take(r * c * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Array2::from_shape_vec((r, c), data)
            .map_err(|e| TrainError::Corrupt(format!("bad matrix shape: {e}")))
    }
}

/// Serialises the trainer (decoder parameters, optimiser state, rng cursor,
/// step counter) under the config hash. Reloading with the same config
/// reproduces the next step bit-identically.
pub fn checkpoint_save(trainer: &Trainer, path: &Path) -> Result<(), TrainError> {
    let mut body = Vec::new();
    body.extend_from_slice(&CHECKPOINT_MAGIC);
    write_u32(&mut body, CHECKPOINT_VERSION);
    let hash = trainer.cfg.config_hash();
    write_u64(&mut body, hash.len() as u64);
    body.extend_from_slice(hash.as_bytes());
    write_u64(&mut body, trainer.step);
    write_u64(&mut body, trainer.model.decoder.params.len() as u64);
    for (_, v) in trainer.model.decoder.params.iter() {
        write_mat(&mut body, v);
    }
    write_u64(&mut body, trainer.optimizer.t);
    for m in &trainer.optimizer.m {
        write_mat(&mut body, m);
    }
    for v in &trainer.optimizer.v {
        write_mat(&mut body, v);
    }
    let mut h = Sha256::new();
    h.update(&body);
    let digest = h.finalize();
    let mut f = std::fs::File::create(path)?;
    f.write_all(&body)?;
    f.write_all(&digest)?;
    Ok(())
}

/// Restores a trainer from a checkpoint; the supplied config must hash to
/// the recorded value.
pub fn checkpoint_load(path: &Path, cfg: TrainConfig) -> Result<Trainer, TrainError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 32 + 8 {
        return Err(TrainError::Corrupt("checkpoint too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut h = Sha256::new();
    h.update(body);
    if h.finalize().as_slice() != digest {
        return Err(TrainError::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(TrainError::Corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Corrupt(format!("unsupported version {version}")));
    }
    let hash_len = r.u64()? as usize;
    let found = String::from_utf8(r.take(hash_len)?.to_vec())
        .map_err(|_| TrainError::Corrupt("bad hash encoding".into()))?;
    let expected = cfg.config_hash();
    if found != expected {
        return Err(TrainError::ConfigHashMismatch { found, expected });
    }
    let step = r.u64()?;
    let n_params = r.u64()? as usize;
    let mut trainer = Trainer::new(cfg)?;
    if n_params != trainer.model.decoder.params.len() {
        return Err(TrainError::Corrupt(format!(
            "parameter count mismatch: {} vs {}",
            n_params,
            trainer.model.decoder.params.len()
        )));
    }
    for i in 0..n_params {
        *trainer.model.decoder.params.value_mut(i) = r.mat()?;
    }
    trainer.optimizer.t = r.u64()?;
    for i in 0..n_params {
        trainer.optimizer.m[i] = r.mat()?;
    }
    for i in 0..n_params {
        trainer.optimizer.v[i] = r.mat()?;
    }
    trainer.step = step;
    Ok(trainer)
}
