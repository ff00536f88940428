//! Synthetic held-out benchmarks. Each benchmark builds its evaluation
//! scenes from a seed derived from the training seed only (never from the
//! training mode or toggles), so ablation rows and mode comparisons are
//! paired: they see identical evaluation data.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use pixcue_core::grids::{self, CropSpec, Grid};
use pixcue_core::incontext::{
    self, grid_to_matrix, RidgeProblem, SigmaPolicy,
};
use pixcue_core::model::ModelState;
use pixcue_core::probes::{
    self, KnnConfig, LabelMask, NormalsSample, ProbeResult, SegSample, ZeroShotProbeState,
};
use pixcue_core::scenes::{self, SceneConfig, SpriteShape};
use pixcue_core::training::{prepare_targets, TrainConfig};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown benchmark `{0}`")]
    Unknown(String),
    #[error(transparent)]
    Scene(#[from] scenes::SceneError),
    #[error(transparent)]
    Model(#[from] pixcue_core::model::ModelError),
    #[error(transparent)]
    Probe(#[from] probes::ProbeError),
    #[error(transparent)]
    Grid(#[from] grids::GridError),
    #[error(transparent)]
    Incontext(#[from] incontext::IncontextError),
    #[error(transparent)]
    Train(#[from] pixcue_core::training::TrainError),
}

/// Evaluation knobs shared by the benchmarks.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalConfig {
    /// Held-out sequences for the segmentation-propagation benchmarks.
    pub vos_scenes: usize,
    /// Frames per sequence.
    pub vos_frames: usize,
    /// Frame stride inside a sequence.
    pub vos_stride: usize,
    pub knn_k: usize,
    pub knn_context: usize,
    pub knn_radius: usize,
    pub knn_temperature: f64,
    /// Held-out pairs for the clean-cue reconstruction benchmark.
    pub cue_fit_samples: usize,
    /// Images per split for the trained probes.
    pub probe_images: usize,
    pub probe_iterations: usize,
    pub attn_downsample: usize,
    /// Embedding width of the synthetic class embeddings.
    pub text_embed_dim: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            vos_scenes: 3,
            vos_frames: 5,
            vos_stride: 2,
            knn_k: 5,
            knn_context: 7,
            knn_radius: 6,
            knn_temperature: 0.07,
            cue_fit_samples: 6,
            probe_images: 4,
            probe_iterations: 120,
            attn_downsample: 4,
            text_embed_dim: 16,
        }
    }
}

/// Names understood by [`run_benchmark`].
pub const BENCHMARKS: &[&str] =
    &["vos_knn", "vos_linear", "clean_cue_fit", "normals", "seg_attention", "seg_zeroshot"];

fn eval_seed(train: &TrainConfig, tag: u64) -> u64 {
    // Mode and toggles are deliberately absent: paired runs share data.
    let mut z = train.seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

fn eval_scene(train: &TrainConfig, rng: &mut ChaCha8Rng) -> SceneConfig {
    SceneConfig::sample(rng, train.canvas_size, train.canvas_size, train.sprite_count)
}

fn ids_to_mask(ids: &[u32], h: usize, w: usize) -> LabelMask {
    LabelMask::new(h, w, ids.iter().map(|&v| v as i32).collect(), -1).expect("mask dims agree")
}

fn class_mask(cfg: &SceneConfig, ids: &[u32], h: usize, w: usize) -> LabelMask {
    // Semantic classes by surface kind: background 0, discs 1, squares 2.
    let ids = ids
        .iter()
        .map(|&v| {
            if v == 0 {
                0
            } else {
                match cfg.sprites[v as usize - 1].shape {
                    SpriteShape::Disc => 1,
                    SpriteShape::Square => 2,
                }
            }
        })
        .collect();
    LabelMask::new(h, w, ids, -1).expect("mask dims agree")
}

fn deep_encoder_grid(model: &ModelState, image: &Grid) -> Result<Grid, BenchError> {
    let enc = model.encoder.encode(image)?;
    Ok(incontext::matrix_to_grid(enc.levels.last().unwrap(), enc.token_h, enc.token_w))
}

/// Segmentation propagation over held-out sequences, either by local k-NN
/// label propagation or by the frame-0 linear probe.
fn vos_benchmark(
    model: &ModelState,
    train: &TrainConfig,
    eval: &EvalConfig,
    linear: bool,
) -> Result<ProbeResult, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(train, 0x705));
    let mut agg = ProbeResult::default();
    let mut j_sum = 0.0;
    let mut f_sum = 0.0;
    let mut n = 0.0f64;
    for _ in 0..eval.vos_scenes {
        let scene = eval_scene(train, &mut rng);
        let mut feats = Vec::new();
        let mut gts = Vec::new();
        for k in 0..eval.vos_frames {
            let (frame, ids, _) = scenes::render_frame(&scene, k * eval.vos_stride)?;
            feats.push(model.forward_infer(&frame)?);
            gts.push(ids_to_mask(&ids, frame.height(), frame.width()));
        }
        let objects = gts[0].present_ids().into_iter().filter(|&v| v > 0).collect::<Vec<_>>();
        if objects.is_empty() {
            continue;
        }
        let preds = if linear {
            let probe = probes::fit_vos_linear(&feats[0], &gts[0])?;
            feats.iter().map(|f| probes::apply_vos_linear(&probe, f)).collect::<Vec<_>>()
        } else {
            let cfg = KnnConfig {
                k: eval.knn_k,
                context_frames: eval.knn_context,
                window_radius: eval.knn_radius,
                temperature: eval.knn_temperature,
            };
            probes::knn_propagate(&feats, &gts[0], &cfg)?
        };
        let res = probes::evaluate_mask_sequence(&preds, &gts, &objects)?;
        j_sum += res.get("j_mean").unwrap();
        f_sum += res.get("f_mean").unwrap();
        n += 1.0;
    }
    let n = n.max(1.0);
    agg.insert("j_mean", j_sum / n);
    agg.insert("f_mean", f_sum / n);
    agg.insert("jf", 0.5 * (j_sum + f_sum) / n);
    Ok(agg)
}

/// Held-out in-context reconstruction against clean cues: fit the linear
/// map on the context frame's clean cue stack, report the L1 error of its
/// query-side reconstruction. Measures how linearly the features encode the
/// noise-free cues.
fn clean_cue_fit(
    model: &ModelState,
    train: &TrainConfig,
    eval: &EvalConfig,
) -> Result<ProbeResult, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(train, 0xc1ea));
    let mut noiseless = train.clone();
    noiseless.noise = scenes::NoiseModel::none();
    let pamr_cfg = pixcue_core::pamr::PamrConfig::default();
    let size = train.crop_output_size;
    let mut total = 0.0;
    let mut count = 0.0f64;
    for _ in 0..eval.cue_fit_samples {
        let scene = eval_scene(train, &mut rng);
        let delta = rng.gen_range(1..=train.delta_max.max(1));
        let t = rng.gen_range(0..scene.clip_len.saturating_sub(delta).max(1));
        let sample = scenes::render_pair(&scene, t, delta)?;
        // Identity-window crops resampled to the model input size.
        let spec = CropSpec {
            top: 0,
            left: 0,
            crop_height: sample.height(),
            crop_width: sample.width(),
            output_height: size,
            output_width: size,
        };
        let crop0 = grids::crop_apply(&sample.frame_t, &spec)?;
        let crop_d = grids::crop_apply(&sample.frame_td, &spec)?;
        let deep0 = deep_encoder_grid(model, &crop0)?;
        let deepd = deep_encoder_grid(model, &crop_d)?;
        let targets = prepare_targets(
            &sample, &spec, &spec, &crop0, &crop_d, &deep0, &deepd, &noiseless, &pamr_cfg,
        )?;
        let x0 = model.forward_infer(&crop0)?;
        let xq = model.forward_infer(&crop_d)?;
        let (x0_ds, g_ds) = incontext::downsample_context(
            &x0,
            &targets.g_context,
            train.context_downsample_factor,
        )?;
        let x0_mat = incontext::augment_bias(&grid_to_matrix(&x0_ds));
        let lambda = train.lambda_policy.resolve(&x0_mat);
        let sol = incontext::solve_ridge(&RidgeProblem::new(
            x0_mat,
            grid_to_matrix(&g_ds),
            lambda,
        )?)?;
        let xq_mat = incontext::augment_bias(&grid_to_matrix(&xq));
        let pred = incontext::predict_to_grid(&xq_mat, &sol, size, size)?;
        total += incontext::loss_l1(&pred, &targets.g_query)?;
        count += 1.0;
    }
    let mut out = ProbeResult::default();
    out.insert("clean_cue_l1", total / count.max(1.0));
    Ok(out)
}

/// Surface-normal probing on tilted-plane scenes with analytic targets.
fn normals_benchmark(
    model: &ModelState,
    train: &TrainConfig,
    eval: &EvalConfig,
) -> Result<ProbeResult, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(train, 0x0a11));
    let mut fit = Vec::new();
    let mut held = Vec::new();
    for i in 0..2 * eval.probe_images {
        let scene = eval_scene(train, &mut rng);
        let t = rng.gen_range(0..scene.clip_len);
        let (frame, _, _) = scenes::render_frame(&scene, t)?;
        let sample = NormalsSample {
            dec: model.forward_infer(&frame)?,
            enc: deep_encoder_grid(model, &frame)?,
            targets: scenes::render_frame_normals(&scene, t)?,
        };
        if i < eval.probe_images {
            fit.push(sample);
        } else {
            held.push(sample);
        }
    }
    let (probe, _) = probes::probe_normals(&fit, eval.probe_iterations, 0.03)?;
    let mut angles = Vec::new();
    for s in &held {
        let pred = probes::apply_normals(&probe, s)?;
        angles.extend(probes::angular_errors_deg(&pred, &s.targets));
    }
    Ok(probes::normal_metrics(&angles))
}

fn seg_split(
    model: &ModelState,
    train: &TrainConfig,
    eval: &EvalConfig,
    tag: u64,
) -> Result<(Vec<SegSample>, Vec<SegSample>), BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed(train, tag));
    let mut fit = Vec::new();
    let mut held = Vec::new();
    for i in 0..2 * eval.probe_images {
        let scene = eval_scene(train, &mut rng);
        let t = rng.gen_range(0..scene.clip_len);
        let (frame, ids, _) = scenes::render_frame(&scene, t)?;
        let labels = class_mask(&scene, &ids, frame.height(), frame.width());
        let sample = SegSample {
            dec: model.forward_infer(&frame)?,
            enc: deep_encoder_grid(model, &frame)?,
            labels,
        };
        if i < eval.probe_images {
            fit.push(sample);
        } else {
            held.push(sample);
        }
    }
    Ok((fit, held))
}

/// Attention segmentation probing over the three surface classes.
fn seg_attention_benchmark(
    model: &ModelState,
    train: &TrainConfig,
    eval: &EvalConfig,
) -> Result<ProbeResult, BenchError> {
    let (fit, held) = seg_split(model, train, eval, 0x5e6)?;
    let probe =
        probes::fit_seg_attention(&fit, 3, eval.attn_downsample, eval.probe_iterations, 0.03)?;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for s in &held {
        let logits = probes::seg_attention_logits(&probe, s)?;
        preds.push(probes::logits_to_mask(&logits, s.dec.height(), s.dec.width()));
        gts.push(s.labels.clone());
    }
    let (miou, pacc) = probes::miou_pacc(&preds, &gts, &[0, 1, 2]);
    let mut out = ProbeResult::default();
    out.insert("miou", miou);
    out.insert("pacc", pacc);
    Ok(out)
}

/// Zero-shot probing: synthetic class embeddings, squares held out as the
/// unseen class; reports seen/unseen mIoU and their harmonic mean.
fn seg_zeroshot_benchmark(
    model: &ModelState,
    train: &TrainConfig,
    eval: &EvalConfig,
) -> Result<ProbeResult, BenchError> {
    let (fit, held) = seg_split(model, train, eval, 0x25e)?;
    let embeddings = ZeroShotProbeState::synthetic_embeddings(3, eval.text_embed_dim, 77);
    let seen = vec![0usize, 1];
    let unseen = vec![2usize];
    let to_matrices = |s: &SegSample| -> (Array2<f64>, Array2<f64>) {
        let enc_up = grids::resample_bilinear(&s.enc, s.dec.height(), s.dec.width())
            .expect("enc upsample");
        (grid_to_matrix(&enc_up), grid_to_matrix(&s.dec))
    };
    let train_data: Vec<(Array2<f64>, Array2<f64>, Vec<Option<usize>>)> = fit
        .iter()
        .map(|s| {
            let (fe, fd) = to_matrices(s);
            let labels = s
                .labels
                .ids()
                .iter()
                .map(|&v| if v == 2 || v < 0 { None } else { Some(v as usize) })
                .collect();
            (fe, fd, labels)
        })
        .collect();
    let enc_w = fit[0].enc.channels();
    let dec_w = fit[0].dec.channels();
    let state = probes::fit_zero_shot(
        &train_data,
        embeddings,
        seen.clone(),
        unseen,
        (enc_w, dec_w),
        eval.probe_iterations,
        0.03,
    )?;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for s in &held {
        let (fe, fd) = to_matrices(s);
        let (logits, _) = probes::zero_shot_logits(&fe, &fd, &state)?;
        preds.push(probes::logits_to_mask(&logits, s.dec.height(), s.dec.width()));
        gts.push(s.labels.clone());
    }
    let miou_seen = probes::miou_pacc(&preds, &gts, &[0, 1]).0;
    let miou_unseen = probes::miou_pacc(&preds, &gts, &[2]).0;
    let mut out = ProbeResult::default();
    out.insert("miou_seen", miou_seen * 100.0);
    out.insert("miou_unseen", miou_unseen * 100.0);
    out.insert("harmonic", probes::harmonic_mean(miou_seen * 100.0, miou_unseen * 100.0));
    Ok(out)
}

/// Runs one named benchmark against a model.
pub fn run_benchmark(
    name: &str,
    model: &ModelState,
    train: &TrainConfig,
    eval: &EvalConfig,
) -> Result<ProbeResult, BenchError> {
    match name {
        "vos_knn" => vos_benchmark(model, train, eval, false),
        "vos_linear" => vos_benchmark(model, train, eval, true),
        "clean_cue_fit" => clean_cue_fit(model, train, eval),
        "normals" => normals_benchmark(model, train, eval),
        "seg_attention" => seg_attention_benchmark(model, train, eval),
        "seg_zeroshot" => seg_zeroshot_benchmark(model, train, eval),
        other => Err(BenchError::Unknown(other.to_string())),
    }
}

/// Resolves the sigma a loss report would use; exposed for diagnostics.
pub fn resolved_sigma(train: &TrainConfig, g_query: &Grid) -> f64 {
    match train.sigma_policy {
        SigmaPolicy::Fixed { value } => value,
        SigmaPolicy::BatchMedian => incontext::median_gradient_sigma(&[g_query]),
    }
}
