//! Evaluation protocols for frozen feature maps: a per-pixel linear
//! segmentation probe, local k-NN label propagation, a surface-normal
//! probe, an attention-based segmentation probe, a zero-shot text-embedding
//! probe, and the metrics they report.
//!
//! Probes only ever train their own small heads; backbone features enter as
//! constants. Fitting is deterministic: fixed iteration counts, fixed seeds.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grids::{self, Grid};
use crate::incontext::{self, grid_to_matrix, RidgeProblem};
use crate::tensor::{Tape, Var};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("invalid probe input: {0}")]
    BadInput(String),
    #[error("invalid probe config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Grid(#[from] grids::GridError),
    #[error(transparent)]
    Incontext(#[from] incontext::IncontextError),
}

/// Per-benchmark metric bundle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProbeResult {
    pub metrics: BTreeMap<String, f64>,
}

impl ProbeResult {
    pub fn insert(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

/// Integer id raster with an ignore sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    h: usize,
    w: usize,
    ids: Vec<i32>,
    ignore_id: i32,
}

impl LabelMask {
    pub const DEFAULT_IGNORE: i32 = -1;

    pub fn new(h: usize, w: usize, ids: Vec<i32>, ignore_id: i32) -> Result<Self, ProbeError> {
        if ids.len() != h * w {
            return Err(ProbeError::BadInput(format!(
                "mask data {} does not match {h}x{w}",
                ids.len()
            )));
        }
        Ok(LabelMask { h, w, ids, ignore_id })
    }

    pub fn constant(h: usize, w: usize, id: i32) -> Self {
        LabelMask { h, w, ids: vec![id; h * w], ignore_id: Self::DEFAULT_IGNORE }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn ignore_id(&self) -> i32 {
        self.ignore_id
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> i32 {
        self.ids[y * self.w + x]
    }

    pub fn ids(&self) -> &[i32] {
        &self.ids
    }

    /// Distinct non-ignore ids, ascending.
    pub fn present_ids(&self) -> Vec<i32> {
        let mut ids: Vec<i32> = self.ids.iter().cloned().filter(|&v| v != self.ignore_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Reads a mask from a 1-channel raster by rounding.
    pub fn from_grid(g: &Grid, ignore_id: i32) -> Result<Self, ProbeError> {
        if g.channels() != 1 {
            return Err(ProbeError::BadInput(format!(
                "mask raster must have 1 channel, got {}",
                g.channels()
            )));
        }
        let ids = g.data().iter().map(|&v| v.round() as i32).collect();
        LabelMask::new(g.height(), g.width(), ids, ignore_id)
    }

    pub fn to_grid(&self) -> Grid {
        Grid::from_vec(self.h, self.w, 1, self.ids.iter().map(|&v| v as f32).collect())
            .expect("mask ids are finite")
    }

    pub fn read_raster(path: &Path, ignore_id: i32) -> Result<Self, ProbeError> {
        Ok(Self::from_grid(&grids::raster_read(path)?, ignore_id)?)
    }
}

// ---- region and boundary metrics ----

/// Region Jaccard index of one object id. Defined as 1 when the object is
/// absent from both masks (empty union with empty prediction).
pub fn jaccard(pred: &LabelMask, gt: &LabelMask, id: i32) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.ids.iter().zip(&gt.ids) {
        let (ip, ig) = (*p == id, *g == id);
        if ip && ig {
            inter += 1;
        }
        if ip || ig {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn boundary_pixels(mask: &LabelMask, id: i32) -> Vec<(usize, usize)> {
    let (h, w) = (mask.h, mask.w);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != id {
                continue;
            }
            let mut edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            if !edge {
                edge = mask.get(y - 1, x) != id
                    || mask.get(y + 1, x) != id
                    || mask.get(y, x - 1) != id
                    || mask.get(y, x + 1) != id;
            }
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Boundary F-score of one object id under a morphological band of 0.8% of
/// the image diagonal.
pub fn boundary_f(pred: &LabelMask, gt: &LabelMask, id: i32) -> f64 {
    let diag = ((pred.h * pred.h + pred.w * pred.w) as f64).sqrt();
    let band = (0.008 * diag).ceil().max(1.0);
    let band2 = band * band;
    let pb = boundary_pixels(pred, id);
    let gb = boundary_pixels(gt, id);
    if pb.is_empty() && gb.is_empty() {
        return 1.0;
    }
    if pb.is_empty() || gb.is_empty() {
        return 0.0;
    }
    let within = |a: &[(usize, usize)], b: &[(usize, usize)]| -> f64 {
        let mut hits = 0usize;
        for &(ay, ax) in a {
            let ok = b.iter().any(|&(by, bx)| {
                let dy = ay as f64 - by as f64;
                let dx = ax as f64 - bx as f64;
                dy * dy + dx * dx <= band2
            });
            if ok {
                hits += 1;
            }
        }
        hits as f64 / a.len() as f64
    };
    let precision = within(&pb, &gb);
    let recall = within(&gb, &pb);
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Harmonic mean `2su/(s+u)` of seen/unseen scores.
pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Segmentation-propagation scores over a sequence: per-object J and F
/// averaged over frames 1.. and objects, plus their mean.
pub fn evaluate_mask_sequence(
    preds: &[LabelMask],
    gts: &[LabelMask],
    objects: &[i32],
) -> Result<ProbeResult, ProbeError> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(ProbeError::BadInput("prediction/ground-truth length mismatch".into()));
    }
    if objects.is_empty() {
        return Err(ProbeError::BadInput("no objects to evaluate".into()));
    }
    let mut j_sum = 0.0;
    let mut f_sum = 0.0;
    let mut n = 0usize;
    for t in 1..preds.len() {
        for &id in objects {
            j_sum += jaccard(&preds[t], &gts[t], id);
            f_sum += boundary_f(&preds[t], &gts[t], id);
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mut out = ProbeResult::default();
    let (jm, fm) = (j_sum / n, f_sum / n);
    out.insert("j_mean", jm);
    out.insert("f_mean", fm);
    out.insert("jf", 0.5 * (jm + fm));
    Ok(out)
}

/// Mean IoU over the given classes plus pixel accuracy, ignoring
/// ignore-labelled ground-truth pixels.
pub fn miou_pacc(preds: &[LabelMask], gts: &[LabelMask], classes: &[i32]) -> (f64, f64) {
    let mut inter = vec![0usize; classes.len()];
    let mut union = vec![0usize; classes.len()];
    let mut correct = 0usize;
    let mut total = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        for (pv, gv) in p.ids.iter().zip(&g.ids) {
            if *gv == g.ignore_id {
                continue;
            }
            total += 1;
            if pv == gv {
                correct += 1;
            }
            for (ci, &c) in classes.iter().enumerate() {
                let (ip, ig) = (*pv == c, *gv == c);
                if ip && ig {
                    inter[ci] += 1;
                }
                if ip || ig {
                    union[ci] += 1;
                }
            }
        }
    }
    let mut iou_sum = 0.0;
    let mut iou_n = 0usize;
    for ci in 0..classes.len() {
        if union[ci] > 0 {
            iou_sum += inter[ci] as f64 / union[ci] as f64;
            iou_n += 1;
        }
    }
    let miou = if iou_n == 0 { 0.0 } else { iou_sum / iou_n as f64 };
    let pacc = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    (miou, pacc)
}

// ---- linear segmentation probe ----

/// Per-pixel linear classifier fit on one annotated frame.
#[derive(Debug, Clone)]
pub struct VosLinearProbe {
    /// `(d+1) x classes`, bias row last.
    pub weights: Array2<f64>,
    pub classes: Vec<i32>,
    /// Set when the annotation had a single class (constant classifier).
    pub degenerate: bool,
}

/// Fits a least-squares linear map from features to one-hot class targets
/// on the annotated frame; applied unchanged to later frames.
pub fn fit_vos_linear(features: &Grid, mask: &LabelMask) -> Result<VosLinearProbe, ProbeError> {
    if features.height() != mask.h || features.width() != mask.w {
        return Err(ProbeError::BadInput("features and mask sizes differ".into()));
    }
    let classes = mask.present_ids();
    if classes.is_empty() {
        return Err(ProbeError::BadInput("mask has no labelled pixels".into()));
    }
    let x = incontext::augment_bias(&grid_to_matrix(features));
    let degenerate = classes.len() == 1;
    if degenerate {
        // Constant classifier for the single observed class.
        let mut w = Array2::zeros((x.ncols(), 1));
        w[[x.ncols() - 1, 0]] = 1.0;
        return Ok(VosLinearProbe { weights: w, classes, degenerate });
    }
    let mut targets = Array2::zeros((x.nrows(), classes.len()));
    for (row, &id) in mask.ids.iter().enumerate() {
        if id == mask.ignore_id {
            continue;
        }
        let ci = classes.iter().position(|&c| c == id).unwrap();
        targets[[row, ci]] = 1.0;
    }
    let trace: f64 = x.iter().map(|v| v * v).sum();
    let lambda = 1e-4 * trace / x.ncols() as f64;
    let sol = incontext::solve_ridge(&RidgeProblem::new(x, targets, lambda)?)?;
    Ok(VosLinearProbe { weights: sol.w, classes, degenerate })
}

/// Applies a fitted linear probe to a feature grid, emitting the argmax mask.
pub fn apply_vos_linear(probe: &VosLinearProbe, features: &Grid) -> LabelMask {
    let x = incontext::augment_bias(&grid_to_matrix(features));
    let scores = x.dot(&probe.weights);
    let ids = (0..scores.nrows())
        .map(|r| {
            let mut best = 0usize;
            for c in 1..scores.ncols() {
                if scores[[r, c]] > scores[[r, best]] {
                    best = c;
                }
            }
            probe.classes[best]
        })
        .collect();
    LabelMask {
        h: features.height(),
        w: features.width(),
        ids,
        ignore_id: LabelMask::DEFAULT_IGNORE,
    }
}

// ---- local k-NN propagation ----

#[derive(Debug, Clone, Copy)]
pub struct KnnConfig {
    pub k: usize,
    /// How many previous predicted masks vote (frame 0 always joins).
    pub context_frames: usize,
    /// Search window radius in pixels.
    pub window_radius: usize,
    /// Softmax temperature on cosine similarities.
    pub temperature: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig { k: 5, context_frames: 7, window_radius: 12, temperature: 0.07 }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.k == 0 || self.context_frames == 0 || self.window_radius == 0 {
            return Err(ProbeError::BadConfig("k, context frames and window radius must be positive".into()));
        }
        if self.temperature <= 0.0 {
            return Err(ProbeError::BadConfig("temperature must be positive".into()));
        }
        Ok(())
    }
}

fn normalized_features(g: &Grid) -> Array2<f64> {
    let mut m = grid_to_matrix(g);
    for mut row in m.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
    }
    m
}

/// Autoregressive label propagation: per pixel, cosine-similarity top-k over
/// window positions in the previous predicted masks (plus frame 0), with a
/// temperature-sharpened similarity-weighted vote.
pub fn knn_propagate(
    features: &[Grid],
    mask_t0: &LabelMask,
    cfg: &KnnConfig,
) -> Result<Vec<LabelMask>, ProbeError> {
    cfg.validate()?;
    if features.len() < 2 {
        return Err(ProbeError::BadInput("need at least two frames".into()));
    }
    let (h, w) = (mask_t0.h, mask_t0.w);
    for f in features {
        if f.height() != h || f.width() != w {
            return Err(ProbeError::BadInput("feature/mask size mismatch".into()));
        }
    }
    let feats: Vec<Array2<f64>> = features.iter().map(normalized_features).collect();
    let mut masks: Vec<LabelMask> = vec![mask_t0.clone()];
    let r = cfg.window_radius as isize;
    for t in 1..features.len() {
        // Candidate frames: frame 0 plus the trailing context window.
        let mut cands: Vec<usize> = vec![0];
        let lo = t.saturating_sub(cfg.context_frames);
        for s in lo..t {
            if s != 0 {
                cands.push(s);
            }
        }
        let cur = &feats[t];
        let rows: Vec<Vec<i32>> = crate::exec::map_indexed(crate::exec::ExecMode::auto(), h, |y| {
            let mut out_row = Vec::with_capacity(w);
            let mut top: Vec<(f64, i32)> = Vec::with_capacity(cfg.k + 1);
            for x in 0..w {
                top.clear();
                let q = cur.row(y * w + x);
                for &s in &cands {
                    let fs = &feats[s];
                    let ms = &masks[s];
                    for dy in -r..=r {
                        let yy = y as isize + dy;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in -r..=r {
                            let xx = x as isize + dx;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let label = ms.get(yy as usize, xx as usize);
                            if label == ms.ignore_id {
                                continue;
                            }
                            let row = fs.row(yy as usize * w + xx as usize);
                            let sim: f64 = q.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                            if top.len() < cfg.k {
                                top.push((sim, label));
                                top.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
                            } else if sim > top[cfg.k - 1].0 {
                                top[cfg.k - 1] = (sim, label);
                                top.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
                            }
                        }
                    }
                }
                let mut votes: BTreeMap<i32, f64> = BTreeMap::new();
                let best_sim = top.first().map(|t| t.0).unwrap_or(0.0);
                for &(sim, label) in &top {
                    *votes.entry(label).or_insert(0.0) += ((sim - best_sim) / cfg.temperature).exp();
                }
                let label = votes
                    .iter()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(a.0)))
                    .map(|(&l, _)| l)
                    .unwrap_or(mask_t0.ignore_id);
                out_row.push(label);
            }
            out_row
        });
        let ids: Vec<i32> = rows.into_iter().flatten().collect();
        masks.push(LabelMask { h, w, ids, ignore_id: mask_t0.ignore_id });
    }
    Ok(masks)
}

// ---- surface normal probe ----

/// Trained heads of the surface-normal probe: a 5x5 convolution on the
/// pixel-level features plus a 1x1 convolution on the upsampled encoder
/// features.
pub struct NormalsProbe {
    pub conv_w: Array2<f64>,
    pub conv_b: Array2<f64>,
    pub enc_w: Array2<f64>,
    pub enc_b: Array2<f64>,
}

/// One image of normal-probe training/evaluation data.
pub struct NormalsSample {
    /// Pixel-level decoder features.
    pub dec: Grid,
    /// Patch-level encoder features (any resolution).
    pub enc: Grid,
    /// Unit-norm target normals, 3 channels.
    pub targets: Grid,
}

fn normals_forward(
    tape: &Tape,
    probe_vars: &[Var; 4],
    sample: &NormalsSample,
) -> Result<Var, ProbeError> {
    let (h, w) = (sample.dec.height(), sample.dec.width());
    let dec = tape.constant(grid_to_matrix(&sample.dec));
    let enc = tape.constant(grid_to_matrix(&sample.enc));
    let dec_out = tape.conv2d(dec, h, w, probe_vars[0], probe_vars[1], 5);
    let enc_proj = tape.matmul(enc, probe_vars[2]);
    let enc_proj = tape.add_bias_row(enc_proj, probe_vars[3]);
    let enc_up = tape.resize_bilinear(
        enc_proj,
        sample.enc.height(),
        sample.enc.width(),
        h,
        w,
    );
    let merged = tape.add(dec_out, enc_up);
    Ok(tape.l2_normalize_rows(merged, 1e-9))
}

/// Fits the normal heads by minimising the cosine loss `1 - <pred, target>`
/// with a fixed-iteration Adam, then reports angular metrics on the same
/// samples.
pub fn probe_normals(
    samples: &[NormalsSample],
    iterations: usize,
    lr: f64,
) -> Result<(NormalsProbe, ProbeResult), ProbeError> {
    if samples.is_empty() {
        return Err(ProbeError::BadInput("no samples".into()));
    }
    for s in samples {
        if s.targets.channels() != 3 {
            return Err(ProbeError::BadInput("targets must have 3 channels".into()));
        }
        if s.targets.height() != s.dec.height() || s.targets.width() != s.dec.width() {
            return Err(ProbeError::BadInput("target size mismatch".into()));
        }
    }
    let d = samples[0].dec.channels();
    let e = samples[0].enc.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut params = vec![
        Array2::from_shape_fn((25 * d, 3), |_| rng.gen_range(-0.05..0.05)),
        Array2::zeros((1, 3)),
        Array2::from_shape_fn((e, 3), |_| rng.gen_range(-0.05..0.05)),
        Array2::zeros((1, 3)),
    ];
    let shapes: Vec<(usize, usize)> = params.iter().map(|p| p.dim()).collect();
    let mut opt = crate::training::AdamW::new(lr, 0.0, &shapes);
    for _ in 0..iterations {
        let mut grad_acc: Vec<Array2<f64>> =
            shapes.iter().map(|&(r, c)| Array2::zeros((r, c))).collect();
        for s in samples {
            let tape = Tape::new();
            let vars: [Var; 4] = [
                tape.leaf(params[0].clone()),
                tape.leaf(params[1].clone()),
                tape.leaf(params[2].clone()),
                tape.leaf(params[3].clone()),
            ];
            let pred = normals_forward(&tape, &vars, s)?;
            let t = tape.constant(grid_to_matrix(&s.targets));
            let dot = tape.sum_cols(tape.mul_elem(pred, t));
            let loss = tape.affine(tape.mean_all(dot), -1.0, 1.0);
            let grads = tape.backward(loss);
            for (acc, &v) in grad_acc.iter_mut().zip(vars.iter()) {
                *acc += &grads.get(v);
            }
        }
        for g in &mut grad_acc {
            *g /= samples.len() as f64;
        }
        let mut pset = params_to_set(&params);
        opt.step(&mut pset, &grad_acc);
        params = set_to_params(&pset);
    }
    let probe = NormalsProbe {
        conv_w: params[0].clone(),
        conv_b: params[1].clone(),
        enc_w: params[2].clone(),
        enc_b: params[3].clone(),
    };
    // Metrics over all samples.
    let mut angles = Vec::new();
    for s in samples {
        let pred = apply_normals(&probe, s)?;
        angles.extend(angular_errors_deg(&pred, &s.targets));
    }
    Ok((probe, normal_metrics(&angles)))
}

fn params_to_set(params: &[Array2<f64>]) -> crate::model::ParamSet {
    let mut set = crate::model::ParamSet::default_empty();
    for (i, p) in params.iter().enumerate() {
        set.push_named(format!("p{i}"), p.clone());
    }
    set
}

fn set_to_params(set: &crate::model::ParamSet) -> Vec<Array2<f64>> {
    set.iter().map(|(_, v)| v.clone()).collect()
}

/// Runs the fitted normal heads on one sample, producing unit normals.
pub fn apply_normals(probe: &NormalsProbe, sample: &NormalsSample) -> Result<Grid, ProbeError> {
    let tape = Tape::new();
    let vars: [Var; 4] = [
        tape.constant(probe.conv_w.clone()),
        tape.constant(probe.conv_b.clone()),
        tape.constant(probe.enc_w.clone()),
        tape.constant(probe.enc_b.clone()),
    ];
    let pred = normals_forward(&tape, &vars, sample)?;
    let v = tape.value(pred);
    Ok(incontext::matrix_to_grid(&v, sample.dec.height(), sample.dec.width()))
}

/// Per-pixel angular errors in degrees between two unit-normal grids.
pub fn angular_errors_deg(pred: &Grid, target: &Grid) -> Vec<f64> {
    let mut out = Vec::with_capacity(pred.pixels());
    for (p, t) in pred.data().chunks_exact(3).zip(target.data().chunks_exact(3)) {
        let dot: f64 = p.iter().zip(t).map(|(&a, &b)| a as f64 * b as f64).sum();
        out.push(dot.clamp(-1.0, 1.0).acos().to_degrees());
    }
    out
}

/// RMSE (degrees) and inlier ratios at 11.25, 22.5 and 30 degrees.
pub fn normal_metrics(angles_deg: &[f64]) -> ProbeResult {
    let n = angles_deg.len().max(1) as f64;
    let rmse = (angles_deg.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
    let ratio = |t: f64| angles_deg.iter().filter(|&&a| a < t).count() as f64 / n * 100.0;
    let mut out = ProbeResult::default();
    out.insert("rmse_deg", rmse);
    out.insert("delta1", ratio(11.25));
    out.insert("delta2", ratio(22.5));
    out.insert("delta3", ratio(30.0));
    out
}

// ---- attention segmentation probe ----

/// Attention probe parameters: class query tokens, a key projection, and an
/// encoder-branch 1x1 head.
pub struct SegAttentionProbe {
    pub queries: Array2<f64>,
    pub key_w: Array2<f64>,
    pub enc_w: Array2<f64>,
    pub enc_b: Array2<f64>,
    /// Cross-attention runs over the feature grid downsampled by this factor.
    pub attn_downsample: usize,
}

pub struct SegSample {
    pub dec: Grid,
    pub enc: Grid,
    pub labels: LabelMask,
}

fn seg_logits_on_tape(
    tape: &Tape,
    vars: &[Var; 4],
    sample: &SegSample,
    attn_downsample: usize,
) -> Result<Var, ProbeError> {
    let (h, w) = (sample.dec.height(), sample.dec.width());
    let ds = attn_downsample.max(1);
    let (dh, dw) = ((h / ds).max(1), (w / ds).max(1));
    let feat_ds = grids::resample_bilinear(&sample.dec, dh, dw)?;
    let f_ds = tape.constant(grid_to_matrix(&feat_ds));
    let f_full = tape.constant(grid_to_matrix(&sample.dec));
    let d = sample.dec.channels() as f64;
    let keys = tape.matmul(f_ds, vars[1]); // (n_ds x d)
    let scores = tape.scale(tape.matmul(vars[0], tape.transpose(keys)), 1.0 / d.sqrt());
    let attn = tape.softmax_rows(scores); // (C x n_ds)
    let protos = tape.matmul(attn, f_ds); // (C x d)
    let logits_dec = tape.matmul(f_full, tape.transpose(protos)); // (N x C)
    let enc = tape.constant(grid_to_matrix(&sample.enc));
    let enc_logits = tape.add_bias_row(tape.matmul(enc, vars[2]), vars[3]);
    let enc_up = tape.resize_bilinear(enc_logits, sample.enc.height(), sample.enc.width(), h, w);
    Ok(tape.add(logits_dec, enc_up))
}

/// Trains the attention probe with per-pixel cross-entropy over the class
/// set `0..n_classes`, then returns it. Labels outside that range (or the
/// ignore id) are skipped.
pub fn fit_seg_attention(
    samples: &[SegSample],
    n_classes: usize,
    attn_downsample: usize,
    iterations: usize,
    lr: f64,
) -> Result<SegAttentionProbe, ProbeError> {
    if n_classes < 2 {
        return Err(ProbeError::BadConfig("need at least two classes".into()));
    }
    if samples.is_empty() {
        return Err(ProbeError::BadInput("no samples".into()));
    }
    let d = samples[0].dec.channels();
    let e = samples[0].enc.channels();
    for s in samples {
        let present = s.labels.present_ids();
        if present.iter().any(|&c| c < 0 || c as usize >= n_classes) {
            return Err(ProbeError::BadInput(format!(
                "labels {present:?} exceed the declared class count {n_classes}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let mut params = vec![
        Array2::from_shape_fn((n_classes, d), |_| rng.gen_range(-0.5..0.5)),
        Array2::from_shape_fn((d, d), |_| rng.gen_range(-0.2..0.2)),
        Array2::from_shape_fn((e, n_classes), |_| rng.gen_range(-0.05..0.05)),
        Array2::zeros((1, n_classes)),
    ];
    let shapes: Vec<(usize, usize)> = params.iter().map(|p| p.dim()).collect();
    let mut opt = crate::training::AdamW::new(lr, 0.0, &shapes);
    for _ in 0..iterations {
        let mut grad_acc: Vec<Array2<f64>> =
            shapes.iter().map(|&(r, c)| Array2::zeros((r, c))).collect();
        for s in samples {
            let tape = Tape::new();
            let vars: [Var; 4] = [
                tape.leaf(params[0].clone()),
                tape.leaf(params[1].clone()),
                tape.leaf(params[2].clone()),
                tape.leaf(params[3].clone()),
            ];
            let logits = seg_logits_on_tape(&tape, &vars, s, attn_downsample)?;
            let labels: Vec<Option<usize>> = s
                .labels
                .ids()
                .iter()
                .map(|&v| {
                    if v == s.labels.ignore_id() || v < 0 || v as usize >= n_classes {
                        None
                    } else {
                        Some(v as usize)
                    }
                })
                .collect();
            let loss = tape.cross_entropy_mean(logits, &labels);
            let grads = tape.backward(loss);
            for (acc, &v) in grad_acc.iter_mut().zip(vars.iter()) {
                *acc += &grads.get(v);
            }
        }
        for g in &mut grad_acc {
            *g /= samples.len() as f64;
        }
        let mut pset = params_to_set(&params);
        opt.step(&mut pset, &grad_acc);
        params = set_to_params(&pset);
    }
    Ok(SegAttentionProbe {
        queries: params[0].clone(),
        key_w: params[1].clone(),
        enc_w: params[2].clone(),
        enc_b: params[3].clone(),
        attn_downsample,
    })
}

/// Per-pixel class logits of the fitted attention probe.
pub fn seg_attention_logits(
    probe: &SegAttentionProbe,
    sample: &SegSample,
) -> Result<Array2<f64>, ProbeError> {
    let tape = Tape::new();
    let vars: [Var; 4] = [
        tape.constant(probe.queries.clone()),
        tape.constant(probe.key_w.clone()),
        tape.constant(probe.enc_w.clone()),
        tape.constant(probe.enc_b.clone()),
    ];
    let logits = seg_logits_on_tape(&tape, &vars, sample, probe.attn_downsample)?;
    Ok((*tape.value(logits)).clone())
}

/// Argmax mask from per-pixel logits.
pub fn logits_to_mask(logits: &Array2<f64>, h: usize, w: usize) -> LabelMask {
    let ids = (0..logits.nrows())
        .map(|r| {
            let mut best = 0usize;
            for c in 1..logits.ncols() {
                if logits[[r, c]] > logits[[r, best]] {
                    best = c;
                }
            }
            best as i32
        })
        .collect();
    LabelMask { h, w, ids, ignore_id: LabelMask::DEFAULT_IGNORE }
}

// ---- zero-shot probe ----

/// Zero-shot probe state: projection heads into the text-embedding space,
/// fixed unit-norm class embeddings, branch weights and a learnable logit
/// scale, plus the seen/unseen class partition.
pub struct ZeroShotProbeState {
    pub p_enc: Array2<f64>,
    pub p_dec: Array2<f64>,
    /// `C x e`, rows unit-normalised.
    pub text_embeddings: Array2<f64>,
    pub alpha_enc: f64,
    pub alpha_dec: f64,
    pub logit_scale: f64,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

/// Diagnostics of a logit evaluation.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ZeroShotDiagnostics {
    /// Pixels whose projected feature hit the epsilon norm floor.
    pub floored_pixels: usize,
}

impl ZeroShotProbeState {
    pub fn validate(&self) -> Result<(), ProbeError> {
        for row in self.text_embeddings.rows() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(ProbeError::BadInput("text embeddings must be unit-normalised".into()));
            }
        }
        if self.seen.iter().any(|c| self.unseen.contains(c)) {
            return Err(ProbeError::BadInput("seen/unseen partition must be disjoint".into()));
        }
        Ok(())
    }

    /// Synthetic fixed random unit embeddings for desk-scale runs.
    pub fn synthetic_embeddings(n_classes: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Array2::from_shape_fn((n_classes, dim), |_| rng.gen_range(-1.0..1.0));
        for mut row in t.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
        }
        t
    }
}

/// Loads a `1 x C x dim` raster of class text embeddings, normalising rows.
pub fn load_text_embeddings(path: &Path) -> Result<Array2<f64>, ProbeError> {
    let g = grids::raster_read(path)?;
    if g.height() != 1 {
        return Err(ProbeError::BadInput(format!(
            "text embedding raster must be 1 x C x dim, got height {}",
            g.height()
        )));
    }
    let (c, dim) = (g.width(), g.channels());
    let mut out = Array2::zeros((c, dim));
    for ci in 0..c {
        for k in 0..dim {
            out[[ci, k]] = g.get(0, ci, k) as f64;
        }
    }
    for mut row in out.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
    }
    Ok(out)
}

const ZS_EPS: f64 = 1e-8;

/// Per-pixel class logits: cosine similarities of channel-normalised
/// projected features against the class embeddings, combined as
/// `exp(scale) * (alpha_enc * l_enc + alpha_dec * l_dec)`.
pub fn zero_shot_logits(
    f_enc: &Array2<f64>,
    f_dec: &Array2<f64>,
    state: &ZeroShotProbeState,
) -> Result<(Array2<f64>, ZeroShotDiagnostics), ProbeError> {
    state.validate()?;
    if f_enc.nrows() != f_dec.nrows() {
        return Err(ProbeError::BadInput("branch pixel counts differ".into()));
    }
    let mut diags = ZeroShotDiagnostics::default();
    let branch = |f: &Array2<f64>, p: &Array2<f64>, diags: &mut ZeroShotDiagnostics| {
        let mut proj = f.dot(p);
        for mut row in proj.rows_mut() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < ZS_EPS {
                diags.floored_pixels += 1;
            }
            let n = n.max(ZS_EPS);
            row.mapv_inplace(|v| v / n);
        }
        proj.dot(&state.text_embeddings.t())
    };
    let le = branch(f_enc, &state.p_enc, &mut diags);
    let ld = branch(f_dec, &state.p_dec, &mut diags);
    let scale = state.logit_scale.exp();
    let logits = (le * state.alpha_enc + ld * state.alpha_dec) * scale;
    Ok((logits, diags))
}

/// Zero-shot training loss: mean cross-entropy over labelled pixels; when
/// ignored pixels exist, adds the mean squared seen-class probability mass
/// over them, totalling `0.1 * ce + neg`; otherwise the loss is the
/// cross-entropy alone.
pub fn zero_shot_loss(
    logits: &Array2<f64>,
    labels: &[Option<usize>],
    seen: &[usize],
) -> Result<f64, ProbeError> {
    if labels.len() != logits.nrows() {
        return Err(ProbeError::BadInput("label count mismatch".into()));
    }
    let n_lab = labels.iter().flatten().count();
    if n_lab == 0 {
        return Err(ProbeError::BadInput("no labelled pixels".into()));
    }
    let mut ce = 0.0;
    let mut neg = 0.0;
    let mut n_ign = 0usize;
    for (r, lab) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        match lab {
            Some(y) => {
                ce += m + z.ln() - row[*y];
            }
            None => {
                let p_seen: f64 = seen.iter().map(|&c| (row[c] - m).exp() / z).sum();
                neg += p_seen * p_seen;
                n_ign += 1;
            }
        }
    }
    let ce = ce / n_lab as f64;
    Ok(if n_ign > 0 { 0.1 * ce + neg / n_ign as f64 } else { ce })
}

/// Fits the zero-shot probe (projections, branch weights, logit scale) on
/// seen-class pixels with the loss above, via the tape.
pub fn fit_zero_shot(
    samples: &[(Array2<f64>, Array2<f64>, Vec<Option<usize>>)],
    text_embeddings: Array2<f64>,
    seen: Vec<usize>,
    unseen: Vec<usize>,
    embed_dim_in: (usize, usize),
    iterations: usize,
    lr: f64,
) -> Result<ZeroShotProbeState, ProbeError> {
    let (enc_w, dec_w) = embed_dim_in;
    let e = text_embeddings.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let mut params = vec![
        Array2::from_shape_fn((enc_w, e), |_| rng.gen_range(-0.2..0.2)),
        Array2::from_shape_fn((dec_w, e), |_| rng.gen_range(-0.2..0.2)),
        Array2::from_elem((1, 1), 0.5), // alpha_enc
        Array2::from_elem((1, 1), 0.5), // alpha_dec
        Array2::from_elem((1, 1), 2.0), // logit scale
    ];
    let shapes: Vec<(usize, usize)> = params.iter().map(|p| p.dim()).collect();
    let mut opt = crate::training::AdamW::new(lr, 0.0, &shapes);
    let t_const = text_embeddings.t().as_standard_layout().to_owned();
    for _ in 0..iterations {
        let mut grad_acc: Vec<Array2<f64>> =
            shapes.iter().map(|&(r, c)| Array2::zeros((r, c))).collect();
        for (fe, fd, labels) in samples {
            let tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
            let tt = tape.constant(t_const.clone());
            let le = {
                let f = tape.constant(fe.clone());
                let proj = tape.l2_normalize_rows(tape.matmul(f, vars[0]), ZS_EPS);
                tape.matmul(proj, tt)
            };
            let ld = {
                let f = tape.constant(fd.clone());
                let proj = tape.l2_normalize_rows(tape.matmul(f, vars[1]), ZS_EPS);
                tape.matmul(proj, tt)
            };
            let combined = tape.add(
                tape.mul_scalar_var(le, vars[2]),
                tape.mul_scalar_var(ld, vars[3]),
            );
            let logits = tape.mul_scalar_var(combined, tape.exp(vars[4]));
            let ce = tape.cross_entropy_mean(logits, labels);
            let n_ign = labels.iter().filter(|l| l.is_none()).count();
            let loss = if n_ign > 0 {
                let p = tape.softmax_rows(logits);
                let s = tape.sum_cols_subset(p, &seen);
                let sq = tape.mul_elem(s, s);
                let mask = Array2::from_shape_fn((labels.len(), 1), |(r, _)| {
                    if labels[r].is_none() {
                        1.0
                    } else {
                        0.0
                    }
                });
                let neg = tape.masked_mean(sq, &mask, n_ign as f64);
                tape.add(tape.scale(ce, 0.1), neg)
            } else {
                ce
            };
            let grads = tape.backward(loss);
            for (acc, &v) in grad_acc.iter_mut().zip(vars.iter()) {
                *acc += &grads.get(v);
            }
        }
        for g in &mut grad_acc {
            *g /= samples.len() as f64;
        }
        let mut pset = params_to_set(&params);
        opt.step(&mut pset, &grad_acc);
        params = set_to_params(&pset);
    }
    Ok(ZeroShotProbeState {
        p_enc: params[0].clone(),
        p_dec: params[1].clone(),
        text_embeddings,
        alpha_enc: params[2][[0, 0]],
        alpha_dec: params[3][[0, 0]],
        logit_scale: params[4][[0, 0]],
        seen,
        unseen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn checker_mask(h: usize, w: usize) -> LabelMask {
        let ids = (0..h * w)
            .map(|p| {
                let (y, x) = (p / w, p % w);
                if x < w / 2 {
                    0
                } else if y < h / 2 {
                    1
                } else {
                    2
                }
            })
            .collect();
        LabelMask::new(h, w, ids, -1).unwrap()
    }

    #[test]
    fn jaccard_and_f_basics() {
        let m = checker_mask(16, 16);
        assert_eq!(jaccard(&m, &m, 1), 1.0);
        assert_eq!(boundary_f(&m, &m, 1), 1.0);
        // Disjoint equal-area masks.
        let a = LabelMask::new(4, 4, vec![1, 1, 0, 0].repeat(4), -1).unwrap();
        let b = LabelMask::new(4, 4, vec![0, 0, 1, 1].repeat(4), -1).unwrap();
        assert_eq!(jaccard(&a, &b, 1), 0.0);
        // Absent object in both: defined as 1.
        assert_eq!(jaccard(&a, &b, 9), 1.0);
        assert_eq!(boundary_f(&a, &b, 9), 1.0);
        // JF is the exact arithmetic mean.
        let res = evaluate_mask_sequence(&[m.clone(), m.clone()], &[m.clone(), m.clone()], &[1, 2])
            .unwrap();
        assert_eq!(res.get("jf").unwrap(), 1.0);
        assert!(
            (res.get("jf").unwrap()
                - 0.5 * (res.get("j_mean").unwrap() + res.get("f_mean").unwrap()))
            .abs()
                < 1e-15
        );
    }

    #[test]
    fn harmonic_mean_reproduces_reported_value() {
        let h = harmonic_mean(30.1, 17.0);
        assert!((h - 21.8).abs() <= 0.1, "harmonic {h}");
        // Harmonic <= arithmetic for nonnegative pairs.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let s = rng.gen_range(0.0..100.0);
            let u = rng.gen_range(0.0..100.0);
            assert!(harmonic_mean(s, u) <= 0.5 * (s + u) + 1e-12);
        }
    }

    #[test]
    fn miou_and_pacc_cases() {
        let gt = checker_mask(8, 8);
        let (miou, pacc) = miou_pacc(&[gt.clone()], &[gt.clone()], &[0, 1, 2]);
        assert_eq!(miou, 1.0);
        assert_eq!(pacc, 1.0);
        // Balanced random two-class prediction hovers near 50% accuracy.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut acc = 0.0;
        let trials = 200;
        for _ in 0..trials {
            let gt2 = LabelMask::new(10, 10, (0..100).map(|i| (i % 2) as i32).collect(), -1).unwrap();
            let pr = LabelMask::new(10, 10, (0..100).map(|_| rng.gen_range(0..2)).collect(), -1)
                .unwrap();
            acc += miou_pacc(&[pr], &[gt2], &[0, 1]).1;
        }
        let mean = acc / trials as f64;
        assert!((mean - 0.5).abs() < 0.02, "random pAcc {mean}");
    }

    #[test]
    fn vos_linear_separable_and_constant_features() {
        // Linearly separable toy features: class = indicator of channel 0.
        let h = 8;
        let feats = Grid::from_fn(h, h, 2, |y, _, c| {
            if c == 0 {
                if y < 4 {
                    1.0
                } else {
                    -1.0
                }
            } else {
                0.3
            }
        })
        .unwrap();
        let mask = LabelMask::new(h, h, (0..h * h).map(|p| if p / h < 4 { 1 } else { 2 }).collect(), -1)
            .unwrap();
        let probe = fit_vos_linear(&feats, &mask).unwrap();
        assert!(!probe.degenerate);
        let pred = apply_vos_linear(&probe, &feats);
        assert_eq!(pred.ids(), mask.ids());
        // Constant features predict the majority class everywhere.
        let flat = Grid::constant(h, h, 2, 0.7).unwrap();
        let skew: Vec<i32> = (0..h * h).map(|p| if p < 20 { 1 } else { 2 }).collect();
        let skew_mask = LabelMask::new(h, h, skew, -1).unwrap();
        let probe2 = fit_vos_linear(&flat, &skew_mask).unwrap();
        let pred2 = apply_vos_linear(&probe2, &flat);
        assert!(pred2.ids().iter().all(|&v| v == 2));
        // Single-class mask: degenerate constant classifier.
        let single = LabelMask::constant(h, h, 3);
        let probe3 = fit_vos_linear(&feats, &single).unwrap();
        assert!(probe3.degenerate);
        let pred3 = apply_vos_linear(&probe3, &feats);
        assert!(pred3.ids().iter().all(|&v| v == 3));
    }

    #[test]
    fn vos_linear_tracks_linear_ground_truth() {
        // A sequence whose class identity is a fixed linear function of the
        // features: later-frame J stays 1 within discretisation.
        let h = 10;
        let make = |shift: usize| {
            let feats = Grid::from_fn(h, h, 2, |_y, x, c| {
                let on = (x + shift) % h < 5;
                if c == 0 {
                    if on {
                        1.0
                    } else {
                        -1.0
                    }
                } else {
                    0.0
                }
            })
            .unwrap();
            let mask = LabelMask::new(
                h,
                h,
                (0..h * h)
                    .map(|p| if (p % h + shift) % h < 5 { 1 } else { 0 })
                    .collect(),
                -1,
            )
            .unwrap();
            (feats, mask)
        };
        let (f0, m0) = make(0);
        let probe = fit_vos_linear(&f0, &m0).unwrap();
        for shift in [2usize, 5] {
            let (f, m) = make(shift);
            let pred = apply_vos_linear(&probe, &f);
            assert_eq!(jaccard(&pred, &m, 1), 1.0);
        }
    }

    fn random_features(h: usize, w: usize, d: usize, seed: u64) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_fn(h, w, d, |_, _, _| rng.gen_range(-1.0f32..1.0)).unwrap()
    }

    #[test]
    fn knn_static_features_reproduce_mask() {
        let f = random_features(10, 10, 6, 3);
        let frames = vec![f.clone(), f.clone(), f.clone()];
        let mask = checker_mask(10, 10);
        for k in [1usize, 3, 5] {
            let cfg = KnnConfig { k, context_frames: 2, window_radius: 4, temperature: 0.07 };
            let masks = knn_propagate(&frames, &mask, &cfg).unwrap();
            for m in &masks {
                assert_eq!(m.ids(), mask.ids());
            }
        }
    }

    #[test]
    fn knn_follows_rigid_translation() {
        // A wide feature field seen through a window sliding 2 px per
        // frame; the object band moves with the features and stays inside
        // every frame.
        let h = 12;
        // Channel 0 encodes object membership with a dominant magnitude, so
        // content that enters the view without a correspondence still
        // matches a pixel of its own class.
        let noise = random_features(h, h + 4, 5, 4);
        let in_object = |wx: usize| (7..11).contains(&wx);
        let wide = Grid::from_fn(h, h + 4, 5, |y, x, c| {
            if c == 0 {
                if in_object(x) {
                    3.0
                } else {
                    -3.0
                }
            } else {
                noise.get(y, x, c)
            }
        })
        .unwrap();
        let offset = |t: usize| 2 * t; // panning window start column
        let frame = |t: usize| {
            Grid::from_fn(h, h, 5, |y, x, c| wide.get(y, x + offset(t), c)).unwrap()
        };
        let mask_at = |t: usize| {
            LabelMask::new(
                h,
                h,
                (0..h * h)
                    .map(|p| if in_object(p % h + offset(t)) { 1 } else { 0 })
                    .collect(),
                -1,
            )
            .unwrap()
        };
        let frames = vec![frame(0), frame(1), frame(2)];
        let cfg = KnnConfig { k: 1, context_frames: 1, window_radius: 5, temperature: 0.07 };
        let masks = knn_propagate(&frames, &mask_at(0), &cfg).unwrap();
        for (t, m) in masks.iter().enumerate() {
            assert_eq!(jaccard(m, &mask_at(t), 1), 1.0, "frame {t}");
        }
    }

    #[test]
    fn knn_k1_matches_brute_force_oracle() {
        // k = 1, one context frame, full window: plain nearest neighbour.
        let (h, w) = (16, 16);
        let f0 = random_features(h, w, 4, 7);
        let f1 = random_features(h, w, 4, 8);
        let mask = checker_mask(h, w);
        let cfg = KnnConfig { k: 1, context_frames: 1, window_radius: 16, temperature: 0.07 };
        let masks = knn_propagate(&[f0.clone(), f1.clone()], &mask, &cfg).unwrap();
        // Oracle: exhaustive all-pairs cosine argmax.
        let a0 = normalized_features(&f0);
        let a1 = normalized_features(&f1);
        for p in 0..h * w {
            let mut best = 0usize;
            let mut best_sim = f64::NEG_INFINITY;
            for q in 0..h * w {
                let sim: f64 = a1.row(p).iter().zip(a0.row(q).iter()).map(|(a, b)| a * b).sum();
                if sim > best_sim {
                    best_sim = sim;
                    best = q;
                }
            }
            assert_eq!(masks[1].ids()[p], mask.ids()[best], "pixel {p}");
        }
    }

    #[test]
    fn normal_metrics_constant_error() {
        // Uniform 11-degree error: delta1 = 100, RMSE = 11.
        let angles = vec![11.0; 500];
        let m = normal_metrics(&angles);
        assert!((m.get("rmse_deg").unwrap() - 11.0).abs() < 1e-12);
        assert_eq!(m.get("delta1").unwrap(), 100.0);
        assert_eq!(m.get("delta2").unwrap(), 100.0);
        assert_eq!(m.get("delta3").unwrap(), 100.0);
        // Perfect prediction.
        let zeros = vec![0.0; 10];
        let m0 = normal_metrics(&zeros);
        assert_eq!(m0.get("rmse_deg").unwrap(), 0.0);
        // Monotone inlier ratios on mixed errors.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mixed: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..90.0)).collect();
        let mm = normal_metrics(&mixed);
        assert!(mm.get("delta1").unwrap() <= mm.get("delta2").unwrap());
        assert!(mm.get("delta2").unwrap() <= mm.get("delta3").unwrap());
    }

    #[test]
    fn normals_probe_recovers_linear_ground_truth() {
        // Features linearly encode the normals; the probe should become
        // near-perfect.
        let h = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut samples = Vec::new();
        for _ in 0..2 {
            let targets = Grid::from_fn(h, h, 3, |y, x, c| {
                let gx = 0.3 * ((x as f64 / h as f64) - 0.5);
                let gy = 0.2 * ((y as f64 / h as f64) - 0.5);
                let n = (gx * gx + gy * gy + 1.0).sqrt();
                let v = [-gx / n, -gy / n, 1.0 / n];
                v[c] as f32
            })
            .unwrap();
            let dec = Grid::from_fn(h, h, 5, |y, x, c| {
                if c < 3 {
                    targets.get(y, x, c)
                } else {
                    rng.gen_range(-0.2f32..0.2)
                }
            })
            .unwrap();
            let enc = Grid::constant(3, 3, 2, 0.1).unwrap();
            samples.push(NormalsSample { dec, enc, targets });
        }
        let (_, metrics) = probe_normals(&samples, 120, 0.05).unwrap();
        assert!(metrics.get("delta1").unwrap() > 95.0, "delta1 {:?}", metrics);
    }

    #[test]
    fn seg_attention_fixed_prototypes_give_perfect_accuracy() {
        // Features are one-hot class indicators; with orthonormal query
        // prototypes the dot-product logits recover the class exactly.
        let h = 8;
        let n_classes = 3;
        let labels = checker_mask(h, h);
        let dec = Grid::from_fn(h, h, n_classes, |y, x, c| {
            if labels.get(y, x) == c as i32 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let mut protos = Array2::zeros((n_classes, n_classes));
        for i in 0..n_classes {
            protos[[i, i]] = 1.0;
        }
        let logits = grid_to_matrix(&dec).dot(&protos.t());
        let pred = logits_to_mask(&logits, h, h);
        let (_, pacc) = miou_pacc(&[pred], &[labels], &[0, 1, 2]);
        assert_eq!(pacc, 1.0);
    }

    #[test]
    fn seg_attention_training_learns_identifiable_classes() {
        let h = 12;
        let labels = checker_mask(h, h);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dec = Grid::from_fn(h, h, 4, |y, x, c| {
            let id = labels.get(y, x) as usize;
            if c < 3 {
                if c == id {
                    1.0
                } else {
                    0.0
                }
            } else {
                rng.gen_range(-0.1f32..0.1)
            }
        })
        .unwrap();
        let enc = Grid::constant(3, 3, 2, 0.0).unwrap();
        let samples = vec![SegSample { dec, enc, labels }];
        let probe = fit_seg_attention(&samples, 3, 2, 150, 0.05).unwrap();
        let logits = seg_attention_logits(&probe, &samples[0]).unwrap();
        let pred = logits_to_mask(&logits, h, h);
        let (miou, pacc) = miou_pacc(&[pred], &[samples[0].labels.clone()], &[0, 1, 2]);
        assert!(pacc > 0.95, "pAcc {pacc}");
        assert!(miou > 0.9, "mIoU {miou}");
    }

    #[test]
    fn zero_shot_logits_match_hand_cosines() {
        let e = 4;
        let t = ZeroShotProbeState::synthetic_embeddings(3, e, 11);
        let state = ZeroShotProbeState {
            p_enc: Array2::eye(e),
            p_dec: Array2::eye(e),
            text_embeddings: t.clone(),
            alpha_enc: 1.0,
            alpha_dec: 0.0,
            logit_scale: 0.0,
            seen: vec![0, 1],
            unseen: vec![2],
        };
        // Feature equal to class-0 embedding: its logit is exactly 1.
        let f = t.row(0).insert_axis(ndarray::Axis(0)).to_owned();
        let (logits, diags) = zero_shot_logits(&f, &f, &state).unwrap();
        assert!((logits[[0, 0]] - 1.0).abs() < 1e-12);
        assert_eq!(diags.floored_pixels, 0);
        for c in 1..3 {
            let hand: f64 = t.row(0).iter().zip(t.row(c).iter()).map(|(a, b)| a * b).sum();
            assert!((logits[[0, c]] - hand).abs() < 1e-12);
        }
        // Both branch weights zero: all logits vanish.
        let z = ZeroShotProbeState { alpha_enc: 0.0, alpha_dec: 0.0, ..state };
        let (logits0, _) = zero_shot_logits(&f, &f, &z).unwrap();
        assert!(logits0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_shot_logits_scale_invariant_and_match_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (n, enc_w, dec_w, e, c) = (20, 3, 5, 4, 6);
        let t = ZeroShotProbeState::synthetic_embeddings(c, e, 13);
        let state = ZeroShotProbeState {
            p_enc: Array2::from_shape_fn((enc_w, e), |_| rng.gen_range(-1.0..1.0)),
            p_dec: Array2::from_shape_fn((dec_w, e), |_| rng.gen_range(-1.0..1.0)),
            text_embeddings: t.clone(),
            alpha_enc: 0.7,
            alpha_dec: 0.4,
            logit_scale: 1.3,
            seen: vec![0, 1, 2],
            unseen: vec![3, 4, 5],
        };
        let fe = Array2::from_shape_fn((n, enc_w), |_| rng.gen_range(-1.0..1.0));
        let fd = Array2::from_shape_fn((n, dec_w), |_| rng.gen_range(-1.0..1.0));
        let (logits, _) = zero_shot_logits(&fe, &fd, &state).unwrap();
        // Naive per-pixel cosine oracle.
        for r in 0..n {
            for ci in 0..c {
                let cos = |f: ndarray::ArrayView1<f64>, p: &Array2<f64>| -> f64 {
                    let proj: Vec<f64> =
                        (0..e).map(|k| f.iter().zip(p.column(k)).map(|(a, b)| a * b).sum()).collect();
                    let nrm = proj.iter().map(|v| v * v).sum::<f64>().sqrt().max(ZS_EPS);
                    proj.iter().zip(t.row(ci)).map(|(a, b)| a / nrm * b).sum()
                };
                let want = state.logit_scale.exp()
                    * (state.alpha_enc * cos(fe.row(r), &state.p_enc)
                        + state.alpha_dec * cos(fd.row(r), &state.p_dec));
                assert!((logits[[r, ci]] - want).abs() < 1e-6);
            }
        }
        // Positive rescaling of the raw features leaves logits unchanged.
        let (logits2, _) = zero_shot_logits(&(fe * 37.5), &(fd * 0.03), &state).unwrap();
        for (a, b) in logits.iter().zip(logits2.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_shot_loss_hand_cases() {
        // Two pixels, three classes; pixel 0 labelled class 1, pixel 1
        // ignored. Hand-evaluate 0.1 * CE + (sum of seen probabilities)^2.
        let logits =
            Array2::from_shape_vec((2, 3), vec![0.2, 1.1, -0.3, 0.5, 0.5, 2.0]).unwrap();
        let labels = vec![Some(1), None];
        let seen = vec![0, 1];
        let got = zero_shot_loss(&logits, &labels, &seen).unwrap();
        let row0 = [0.2f64, 1.1, -0.3];
        let z0: f64 = row0.iter().map(|v| v.exp()).sum();
        let ce = z0.ln() - 1.1;
        let row1 = [0.5f64, 0.5, 2.0];
        let z1: f64 = row1.iter().map(|v| v.exp()).sum();
        let p_seen = (row1[0].exp() + row1[1].exp()) / z1;
        let want = 0.1 * ce + p_seen * p_seen;
        assert!((got - want).abs() < 1e-12);
        // No ignored pixels: the loss is exactly the cross-entropy.
        let labels2 = vec![Some(1), Some(2)];
        let got2 = zero_shot_loss(&logits, &labels2, &seen).unwrap();
        let ce2 = (ce + (z1.ln() - 2.0)) / 2.0;
        assert!((got2 - ce2).abs() < 1e-12);
        // Ignored pixel with zero seen-class mass contributes nothing.
        let logits3 =
            Array2::from_shape_vec((2, 3), vec![0.2, 1.1, -0.3, -80.0, -80.0, 20.0]).unwrap();
        let got3 = zero_shot_loss(&logits3, &labels, &seen).unwrap();
        assert!((got3 - 0.1 * ce).abs() < 1e-12);
        // Empty labelled set rejected.
        assert!(zero_shot_loss(&logits, &[None, None], &seen).is_err());
    }

    #[test]
    fn zero_shot_fit_transfers_to_unseen_classes() {
        // Four classes in a shared embedding space; train on classes 0/1
        // with class 2/3 pixels ignored, then check unseen pixels score
        // highest on their own class.
        let e = 6;
        let c = 4;
        let t = ZeroShotProbeState::synthetic_embeddings(c, e, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        // Decoder features: noisy copies of the class embedding.
        let n_per = 30usize;
        let mut fd = Array2::zeros((n_per * c, e));
        let mut labels: Vec<Option<usize>> = Vec::new();
        let mut truth: Vec<usize> = Vec::new();
        for ci in 0..c {
            for i in 0..n_per {
                for k in 0..e {
                    fd[[ci * n_per + i, k]] = t[[ci, k]] + rng.gen_range(-0.05..0.05);
                }
                truth.push(ci);
                labels.push(if ci < 2 { Some(ci) } else { None });
                let _ = i;
            }
        }
        let fe = fd.clone();
        let state = fit_zero_shot(
            &[(fe.clone(), fd.clone(), labels)],
            t,
            vec![0, 1],
            vec![2, 3],
            (e, e),
            200,
            0.05,
        )
        .unwrap();
        let (logits, _) = zero_shot_logits(&fe, &fd, &state).unwrap();
        // Seen pixels classify correctly; the negative regulariser keeps
        // seen-class probability mass off the ignored (unseen) pixels.
        let mut correct_seen = 0usize;
        let mut total_seen = 0usize;
        let mut seen_mass_on_unseen = 0.0;
        let mut total_unseen = 0usize;
        for (r, &ci) in truth.iter().enumerate() {
            let row = logits.row(r);
            if ci < 2 {
                total_seen += 1;
                let best = (0..c).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
                if best == ci {
                    correct_seen += 1;
                }
            } else {
                total_unseen += 1;
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                seen_mass_on_unseen += ((row[0] - m).exp() + (row[1] - m).exp()) / z;
            }
        }
        let seen_acc = correct_seen as f64 / total_seen as f64;
        let mean_mass = seen_mass_on_unseen / total_unseen as f64;
        assert!(seen_acc > 0.9, "seen accuracy {seen_acc}");
        assert!(mean_mass < 0.3, "seen-class mass on ignored pixels {mean_mass}");
    }

    #[test]
    fn mask_raster_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = checker_mask(6, 7);
        let path = dir.path().join("mask.lgrd");
        grids::raster_write(&m.to_grid(), &path).unwrap();
        let back = LabelMask::read_raster(&path, -1).unwrap();
        assert_eq!(m.ids(), back.ids());
    }

    #[test]
    fn text_embedding_import() {
        let dir = tempfile::tempdir().unwrap();
        let t = ZeroShotProbeState::synthetic_embeddings(5, 8, 33);
        let g = Grid::from_fn(1, 5, 8, |_, c, k| t[[c, k]] as f32).unwrap();
        let path = dir.path().join("text.lgrd");
        grids::raster_write(&g, &path).unwrap();
        let back = load_text_embeddings(&path).unwrap();
        assert_eq!(back.dim(), (5, 8));
        for (a, b) in t.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
}
