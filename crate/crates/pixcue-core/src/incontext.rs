//! The linear in-context learner: closed-form ridge solve on the context
//! pair and the query-side loss stack, differentiable with respect to the
//! feature grids.
//!
//! The ridge objective is read with squared Frobenius norms (standard ridge),
//! which is what makes the closed form `W* = (X^T X + lambda I)^{-1} X^T G`
//! exist. The solve factorises the `d_aug x d_aug` Gram matrix (never an
//! `N x N` system) and always runs in 64-bit arithmetic.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grids::{self, Axis2, Grid, GridError};
use crate::tensor::{Tape, Var};

static RIDGE_SOLVES: AtomicU64 = AtomicU64::new(0);

/// Number of ridge factorisations performed since the last reset.
/// Instrumentation for tests and the per-frame-distillation baseline.
pub fn ridge_solve_count() -> u64 {
    RIDGE_SOLVES.load(Ordering::Relaxed)
}

pub fn reset_ridge_solve_count() {
    RIDGE_SOLVES.store(0, Ordering::Relaxed);
}

#[derive(Debug, Error)]
pub enum IncontextError {
    #[error("row count mismatch: features have {x_rows} rows, cues have {g_rows}")]
    RowMismatch { x_rows: usize, g_rows: usize },
    #[error("lambda must be nonnegative and finite, got {0}")]
    BadLambda(f64),
    #[error("gram matrix is singular with lambda = 0; pass a positive lambda")]
    SingularGram,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid loss weights: {0}")]
    BadWeights(String),
    #[error("downsample factor {factor} exceeds spatial size {h}x{w}")]
    FactorTooLarge { factor: usize, h: usize, w: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Ridge problem on pre-flattened matrices. `x` may or may not carry a bias
/// column; [`augment_bias`] appends one.
#[derive(Debug, Clone)]
pub struct RidgeProblem {
    pub x: Array2<f64>,
    pub g: Array2<f64>,
    pub lambda: f64,
}

impl RidgeProblem {
    pub fn new(x: Array2<f64>, g: Array2<f64>, lambda: f64) -> Result<Self, IncontextError> {
        if x.nrows() != g.nrows() {
            return Err(IncontextError::RowMismatch { x_rows: x.nrows(), g_rows: g.nrows() });
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(IncontextError::BadLambda(lambda));
        }
        Ok(RidgeProblem { x, g, lambda })
    }
}

/// The optimal linear map produced by [`solve_ridge`].
#[derive(Debug, Clone)]
pub struct RidgeSolution {
    pub w: Array2<f64>,
}

/// Loss weights: `gamma` scales the gradient term, `sigma` sets the edge
/// weight sharpness (same units as cue-gradient magnitudes).
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub gamma: f64,
    pub sigma: f64,
}

impl LossWeights {
    pub fn new(gamma: f64, sigma: f64) -> Result<Self, IncontextError> {
        if gamma < 0.0 || !gamma.is_finite() {
            return Err(IncontextError::BadWeights(format!("gamma must be >= 0, got {gamma}")));
        }
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(IncontextError::BadWeights(format!("sigma must be > 0, got {sigma}")));
        }
        Ok(LossWeights { gamma, sigma })
    }
}

/// How the regularisation weight is chosen per solve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaPolicy {
    Fixed { value: f64 },
    /// `coeff * trace(X^T X) / d_aug`; scale-invariant conditioning.
    RelativeTrace { coeff: f64 },
}

impl Default for LambdaPolicy {
    fn default() -> Self {
        LambdaPolicy::RelativeTrace { coeff: 0.01 }
    }
}

impl LambdaPolicy {
    /// Resolves the policy against a concrete (augmented) feature matrix.
    /// Treated as a constant by the gradient pass.
    pub fn resolve(&self, x_aug: &Array2<f64>) -> f64 {
        match *self {
            LambdaPolicy::Fixed { value } => value,
            LambdaPolicy::RelativeTrace { coeff } => {
                let trace: f64 = x_aug.iter().map(|v| v * v).sum();
                coeff * trace / x_aug.ncols() as f64
            }
        }
    }
}

/// How the edge-weight sharpness is chosen per step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaPolicy {
    Fixed { value: f64 },
    /// Median of nonzero query-cue gradient magnitudes over the batch.
    BatchMedian,
}

impl Default for SigmaPolicy {
    fn default() -> Self {
        SigmaPolicy::BatchMedian
    }
}

/// Median of cue-gradient magnitudes across both axes of all grids, ignoring
/// (near-)zero entries so piecewise-constant cues do not collapse sigma.
pub fn median_gradient_sigma(g_queries: &[&Grid]) -> f64 {
    let mut mags: Vec<f64> = Vec::new();
    for g in g_queries {
        for axis in [Axis2::X, Axis2::Y] {
            if let Ok(grad) = grids::spatial_gradient_abs(g, axis) {
                mags.extend(grad.data().iter().map(|&v| v as f64).filter(|v| *v > 1e-12));
            }
        }
    }
    if mags.is_empty() {
        return 1.0;
    }
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    mags[mags.len() / 2]
}

// ---- linear algebra ----

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub(crate) struct CholFactor {
    l: Array2<f64>,
}

impl CholFactor {
    /// Factorises `a`; returns `None` when a pivot is not positive (matrix
    /// not positive definite to working precision).
    pub(crate) fn factor(a: &Array2<f64>) -> Option<CholFactor> {
        let n = a.nrows();
        assert_eq!(n, a.ncols());
        let scale = a.diag().iter().cloned().fold(0.0f64, f64::max).max(1.0);
        let tol = scale * 1e-13 * n as f64;
        let mut l = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut d = a[[j, j]];
            for k in 0..j {
                d -= l[[j, k]] * l[[j, k]];
            }
            if d <= tol {
                return None;
            }
            let dj = d.sqrt();
            l[[j, j]] = dj;
            for i in (j + 1)..n {
                let mut v = a[[i, j]];
                for k in 0..j {
                    v -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = v / dj;
            }
        }
        Some(CholFactor { l })
    }

    /// Solves `A w = b` column-wise using the stored factor.
    pub(crate) fn solve_mat(&self, b: &Array2<f64>) -> Array2<f64> {
        let n = self.l.nrows();
        assert_eq!(b.nrows(), n);
        let mut out = b.clone();
        for mut col in out.columns_mut() {
            // L y = b
            for i in 0..n {
                let mut v = col[i];
                for k in 0..i {
                    v -= self.l[[i, k]] * col[k];
                }
                col[i] = v / self.l[[i, i]];
            }
            // L^T w = y
            for i in (0..n).rev() {
                let mut v = col[i];
                for k in (i + 1)..n {
                    v -= self.l[[k, i]] * col[k];
                }
                col[i] = v / self.l[[i, i]];
            }
        }
        out
    }
}

/// Appends a constant ones column to a feature matrix.
pub fn augment_bias(x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::ones((n, d + 1));
    out.slice_mut(s![.., ..d]).assign(x);
    out
}

pub(crate) fn solve_ridge_mat(
    x: &Array2<f64>,
    g: &Array2<f64>,
    lambda: f64,
) -> Result<(Array2<f64>, CholFactor), IncontextError> {
    if x.nrows() != g.nrows() {
        return Err(IncontextError::RowMismatch { x_rows: x.nrows(), g_rows: g.nrows() });
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(IncontextError::BadLambda(lambda));
    }
    let d = x.ncols();
    let mut gram = x.t().dot(x);
    for i in 0..d {
        gram[[i, i]] += lambda;
    }
    let factor = CholFactor::factor(&gram).ok_or(IncontextError::SingularGram)?;
    let rhs = x.t().dot(g);
    let w = factor.solve_mat(&rhs);
    RIDGE_SOLVES.fetch_add(1, Ordering::Relaxed);
    Ok((w, factor))
}

/// Closed-form ridge solve `W* = (X^T X + lambda I)^{-1} X^T G`.
pub fn solve_ridge(p: &RidgeProblem) -> Result<RidgeSolution, IncontextError> {
    let (w, _) = solve_ridge_mat(&p.x, &p.g, p.lambda)?;
    Ok(RidgeSolution { w })
}

/// Differentiable ridge solve on a tape. The upstream gradient w.r.t. `W`
/// propagates to the feature matrix through the implicit function rule of
/// the normal equations:
/// `dX = (G - X W) S^T - X S W^T` with `S = (X^T X + lambda I)^{-1} dW`.
/// The Cholesky factor from the forward pass is retained until the gradient
/// pass completes. `lambda` is treated as a constant.
pub fn ridge_solve_tape(tape: &Tape, x: Var, g: Var, lambda: f64) -> Result<Var, IncontextError> {
    let vx = tape.value(x);
    let vg = tape.value(g);
    let (w, factor) = solve_ridge_mat(&vx, &vg, lambda)?;
    let (need_x, need_g) = (tape.needs_grad(x), tape.needs_grad(g));
    let w_saved = w.clone();
    Ok(tape.custom(w, need_x || need_g, move |dw, sink| {
        let s = factor.solve_mat(dw);
        if need_x {
            let residual = &*vg - &vx.dot(&w_saved);
            let dx = residual.dot(&s.t()) - vx.dot(&s).dot(&w_saved.t());
            sink.add(x, dx);
        }
        if need_g {
            sink.add(g, vx.dot(&s));
        }
    }))
}

/// Downsamples features and cue grid by the same integer factor so rows stay
/// aligned. Output dims are `floor(size / factor)`.
pub fn downsample_context(
    x0: &Grid,
    g_context: &Grid,
    factor: usize,
) -> Result<(Grid, Grid), IncontextError> {
    assert!(factor >= 1);
    let (h, w) = (x0.height(), x0.width());
    if g_context.height() != h || g_context.width() != w {
        return Err(IncontextError::DimMismatch(format!(
            "features {}x{} vs cues {}x{}",
            h,
            w,
            g_context.height(),
            g_context.width()
        )));
    }
    if factor > h || factor > w {
        return Err(IncontextError::FactorTooLarge { factor, h, w });
    }
    let (oh, ow) = (h / factor, w / factor);
    Ok((
        grids::resample_bilinear(x0, oh, ow)?,
        grids::resample_bilinear(g_context, oh, ow)?,
    ))
}

/// Matrix product `x . w`, the per-pixel linear readout.
pub fn predict(x: &Array2<f64>, w: &RidgeSolution) -> Result<Array2<f64>, IncontextError> {
    if x.ncols() != w.w.nrows() {
        return Err(IncontextError::DimMismatch(format!(
            "features have {} columns, map expects {}",
            x.ncols(),
            w.w.nrows()
        )));
    }
    Ok(x.dot(&w.w))
}

/// [`predict`] reshaped back to the query's spatial layout.
pub fn predict_to_grid(
    x: &Array2<f64>,
    w: &RidgeSolution,
    h: usize,
    wdt: usize,
) -> Result<Grid, IncontextError> {
    let p = predict(x, w)?;
    if p.nrows() != h * wdt {
        return Err(IncontextError::DimMismatch(format!(
            "{} rows cannot reshape to {}x{}",
            p.nrows(),
            h,
            wdt
        )));
    }
    Ok(matrix_to_grid(&p, h, wdt))
}

/// Grid (f32 raster) to row-major `N x C` f64 matrix.
pub fn grid_to_matrix(g: &Grid) -> Array2<f64> {
    let (n, c) = (g.pixels(), g.channels());
    let mut out = Array2::zeros((n, c));
    for (i, px) in g.data().chunks_exact(c).enumerate() {
        for (j, v) in px.iter().enumerate() {
            out[[i, j]] = *v as f64;
        }
    }
    out
}

/// Row-major `(h*w) x C` matrix back to a Grid, casting to f32.
pub fn matrix_to_grid(m: &Array2<f64>, h: usize, w: usize) -> Grid {
    assert_eq!(m.nrows(), h * w);
    let c = m.ncols();
    let data: Vec<f32> = m.iter().map(|&v| v as f32).collect();
    Grid::from_vec(h, w, c, data).expect("finite matrix reshapes to grid")
}

fn check_same_shape(a: &Grid, b: &Grid) -> Result<(), IncontextError> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(IncontextError::DimMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// Mean absolute error over all entries.
pub fn loss_l1(pred: &Grid, g_query: &Grid) -> Result<f64, IncontextError> {
    check_same_shape(pred, g_query)?;
    let n = pred.data().len() as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(g_query.data())
        .map(|(&p, &g)| (p as f64 - g as f64).abs())
        .sum();
    Ok(sum / n)
}

/// Edge weights `w = 1 - exp(-|grad(G)| / sigma)`, per channel; values in
/// `[0, 1)`.
pub fn edge_weight(g_query: &Grid, axis: Axis2, sigma: f64) -> Result<Grid, IncontextError> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(IncontextError::BadWeights(format!("sigma must be > 0, got {sigma}")));
    }
    let grad = grids::spatial_gradient_abs(g_query, axis)?;
    Ok(grad.map(|v| (1.0 - (-(v as f64) / sigma).exp()) as f32))
}

fn loss_grad_axis(pred: &Grid, g_query: &Grid, sigma: f64, axis: Axis2) -> Result<f64, IncontextError> {
    let gp = grids::spatial_gradient_abs(pred, axis)?;
    let gq = grids::spatial_gradient_abs(g_query, axis)?;
    let n = gp.data().len() as f64;
    let sum: f64 = gp
        .data()
        .iter()
        .zip(gq.data())
        .map(|(&p, &g)| {
            let w = 1.0 - (-(g as f64) / sigma).exp();
            w * (p as f64 - g as f64).abs()
        })
        .sum();
    Ok(sum / n)
}

/// Edge-weighted mean absolute difference of absolute gradients, summed over
/// the horizontal and vertical axes.
pub fn loss_grad(pred: &Grid, g_query: &Grid, weights: &LossWeights) -> Result<f64, IncontextError> {
    check_same_shape(pred, g_query)?;
    Ok(loss_grad_axis(pred, g_query, weights.sigma, Axis2::X)?
        + loss_grad_axis(pred, g_query, weights.sigma, Axis2::Y)?)
}

/// Total objective: `loss_l1 + gamma * loss_grad`.
pub fn loss_total(pred: &Grid, g_query: &Grid, weights: &LossWeights) -> Result<f64, IncontextError> {
    Ok(loss_l1(pred, g_query)? + weights.gamma * loss_grad(pred, g_query, weights)?)
}

/// Tape version of the total loss. `g_query` enters as a constant `N x m`
/// matrix with spatial layout `(h, w)`; the prediction is a tape variable.
pub fn loss_total_tape(
    tape: &Tape,
    pred: Var,
    h: usize,
    w: usize,
    g_query: &Array2<f64>,
    weights: &LossWeights,
) -> Var {
    assert_eq!(pred.rows, h * w);
    assert_eq!((pred.rows, pred.cols), g_query.dim());
    let gq = tape.constant(g_query.clone());
    let l1 = tape.mean_all(tape.abs(tape.sub(pred, gq)));
    if weights.gamma == 0.0 {
        return l1;
    }
    let mut total = l1;
    for axis in [Axis2::X, Axis2::Y] {
        let gp = tape.grad_abs(pred, h, w, axis);
        let gg_mat = grad_abs_matrix(g_query, h, w, axis);
        let omega = gg_mat.mapv(|v| 1.0 - (-v / weights.sigma).exp());
        let gg = tape.constant(gg_mat);
        let diff = tape.abs(tape.sub(gp, gg));
        let term = tape.mean_all(tape.mul_const(diff, &omega));
        total = tape.add(total, tape.scale(term, weights.gamma));
    }
    total
}

/// Absolute forward difference of an `(h*w) x C` matrix along a spatial
/// axis, trailing edge replicated; mirrors the raster-level operator.
pub fn grad_abs_matrix(m: &Array2<f64>, h: usize, w: usize, axis: Axis2) -> Array2<f64> {
    let c = m.ncols();
    let mut out = Array2::zeros((h * w, c));
    for y in 0..h {
        for x in 0..w {
            let (y1, x1, y0, x0) = match axis {
                Axis2::X => (y, x.min(w.saturating_sub(2)) + 1, y, x.min(w.saturating_sub(2))),
                Axis2::Y => (y.min(h.saturating_sub(2)) + 1, x, y.min(h.saturating_sub(2)), x),
            };
            for ch in 0..c {
                out[[y * w + x, ch]] = (m[[y1 * w + x1, ch]] - m[[y0 * w + x0, ch]]).abs();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randmat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn exact_linear_fit_without_bias() {
        let x = Array2::from_shape_vec((2, 1), vec![1.0, 2.0]).unwrap();
        let g = Array2::from_shape_vec((2, 1), vec![2.0, 4.0]).unwrap();
        let sol = solve_ridge(&RidgeProblem::new(x, g, 0.0).unwrap()).unwrap();
        assert!((sol.w[[0, 0]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn regularised_fit_matches_normal_equations() {
        let x = Array2::from_shape_vec((2, 1), vec![1.0, 2.0]).unwrap();
        let g = Array2::from_shape_vec((2, 1), vec![2.0, 4.0]).unwrap();
        let sol = solve_ridge(&RidgeProblem::new(x, g, 1.0).unwrap()).unwrap();
        assert!((sol.w[[0, 0]] - 10.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn singular_gram_with_zero_lambda_errors() {
        let x = Array2::from_shape_vec((2, 2), vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let g = Array2::from_shape_vec((2, 1), vec![1.0, 2.0]).unwrap();
        match solve_ridge(&RidgeProblem::new(x, g, 0.0).unwrap()) {
            Err(IncontextError::SingularGram) => {}
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn matches_qr_oracle_on_random_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let n = rng.gen_range(8..64);
            let d = rng.gen_range(2..10);
            let m = rng.gen_range(1..5);
            let lambda = [0.01, 0.1, 1.0][rng.gen_range(0..3)];
            let x = augment_bias(&randmat(&mut rng, n, d));
            let g = randmat(&mut rng, n, m);
            let sol = solve_ridge(&RidgeProblem::new(x.clone(), g.clone(), lambda).unwrap()).unwrap();
            let oracle = oracles::ridge_via_householder_qr(&x, &g, lambda);
            let num: f64 = (&sol.w - &oracle).iter().map(|v| v * v).sum::<f64>().sqrt();
            let den: f64 = oracle.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            assert!(num / den < 1e-8, "rel frobenius err {}", num / den);
        }
    }

    #[test]
    fn perturbing_solution_never_improves_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obj = |x: &Array2<f64>, g: &Array2<f64>, w: &Array2<f64>, lambda: f64| -> f64 {
            let r = x.dot(w) - g;
            r.iter().map(|v| v * v).sum::<f64>() + lambda * w.iter().map(|v| v * v).sum::<f64>()
        };
        for _ in 0..20 {
            let x = randmat(&mut rng, 30, 5);
            let g = randmat(&mut rng, 30, 3);
            let lambda = 0.1;
            let sol = solve_ridge(&RidgeProblem::new(x.clone(), g.clone(), lambda).unwrap()).unwrap();
            let base = obj(&x, &g, &sol.w, lambda);
            for _ in 0..10 {
                let delta = randmat(&mut rng, 5, 3) * 1e-3;
                let perturbed = &sol.w + &delta;
                assert!(obj(&x, &g, &perturbed, lambda) >= base - 1e-12);
            }
        }
    }

    #[test]
    fn lambda_to_infinity_drives_solution_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randmat(&mut rng, 40, 4);
        let g = randmat(&mut rng, 40, 2);
        let sol = solve_ridge(&RidgeProblem::new(x, g, 1e12).unwrap()).unwrap();
        assert!(sol.w.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn flow_antisymmetry_of_the_solution() {
        // Negating target columns negates the corresponding solution columns
        // exactly (the solve is linear in the targets), so the predicted
        // query flow is the exact negation of the predicted context flow.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = augment_bias(&randmat(&mut rng, 50, 6));
        let flow = randmat(&mut rng, 50, 2);
        let other = randmat(&mut rng, 50, 3);
        let mut g_ctx = Array2::zeros((50, 5));
        g_ctx.slice_mut(s![.., ..3]).assign(&other);
        g_ctx.slice_mut(s![.., 3..]).assign(&flow);
        let mut g_query = g_ctx.clone();
        g_query.slice_mut(s![.., 3..]).assign(&(-&flow));

        let wc = solve_ridge(&RidgeProblem::new(x.clone(), g_ctx, 0.05).unwrap()).unwrap();
        let wq = solve_ridge(&RidgeProblem::new(x.clone(), g_query, 0.05).unwrap()).unwrap();
        for col in 3..5 {
            for r in 0..x.ncols() {
                assert!((wq.w[[r, col]] + wc.w[[r, col]]).abs() < 1e-14);
            }
        }
        let pc = predict(&x, &wc).unwrap();
        let pq = predict(&x, &wq).unwrap();
        for r in 0..50 {
            for col in 3..5 {
                assert!((pq[[r, col]] + pc[[r, col]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predict_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // Zero map -> zero prediction.
        let x = randmat(&mut rng, 8, 3);
        let w0 = RidgeSolution { w: Array2::zeros((3, 2)) };
        assert!(predict(&x, &w0).unwrap().iter().all(|&v| v == 0.0));
        // One-hot rows pick out rows of W.
        let mut eye = Array2::zeros((3, 3));
        for i in 0..3 {
            eye[[i, i]] = 1.0;
        }
        let w = RidgeSolution { w: randmat(&mut rng, 3, 2) };
        let picked = predict(&eye, &w).unwrap();
        assert!((&picked - &w.w).iter().all(|v| v.abs() < 1e-15));
        // Random product matches the naive triple loop.
        let a = randmat(&mut rng, 8, 3);
        let w2 = RidgeSolution { w: randmat(&mut rng, 3, 2) };
        let got = predict(&a, &w2).unwrap();
        let want = oracles::matmul_naive(&a, &w2.w);
        assert!((&got - &want).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn downsample_examples() {
        let x = Grid::from_fn(224, 224, 2, |y, x, c| (y + x + c) as f32 * 1e-3).unwrap();
        let g = Grid::from_fn(224, 224, 3, |y, x, c| (y * x + c) as f32 * 1e-5).unwrap();
        let (xd, gd) = downsample_context(&x, &g, 7).unwrap();
        assert_eq!((xd.height(), xd.width()), (32, 32));
        assert_eq!((gd.height(), gd.width()), (32, 32));
        // Identity factor.
        let (xi, gi) = downsample_context(&x, &g, 1).unwrap();
        assert_eq!(xi.data(), x.data());
        assert_eq!(gi.data(), g.data());
        // Constant grids stay constant.
        let cx = Grid::constant(10, 12, 1, 2.5).unwrap();
        let cg = Grid::constant(10, 12, 2, -1.0).unwrap();
        let (cdx, cdg) = downsample_context(&cx, &cg, 3).unwrap();
        assert!(cdx.data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
        assert!(cdg.data().iter().all(|&v| (v + 1.0).abs() < 1e-6));
        // Oversized factor rejected.
        assert!(matches!(
            downsample_context(&cx, &cg, 11),
            Err(IncontextError::FactorTooLarge { .. })
        ));
    }

    fn ramp_pair() -> (Grid, Grid) {
        let pred = Grid::from_fn(3, 3, 1, |y, x, _| (y * 3 + x) as f32).unwrap();
        let gq = pred.map(|v| 2.0 * v);
        (pred, gq)
    }

    #[test]
    fn loss_values_match_hand_evaluation() {
        let (pred, gq) = ramp_pair();
        // |pred - gq| = pred itself: mean = 4.
        assert!((loss_l1(&pred, &gq).unwrap() - 4.0).abs() < 1e-12);
        // Horizontal gradients: pred 1, target 2; with sigma = 2 the weight
        // is 1 - e^{-1}. Vertical: pred 3, target 6, weight 1 - e^{-3}.
        let w = LossWeights::new(1.0, 2.0).unwrap();
        let expect_x = (1.0 - (-1.0f64).exp()) * 1.0;
        let expect_y = (1.0 - (-3.0f64).exp()) * 3.0;
        assert!((loss_grad(&pred, &gq, &w).unwrap() - (expect_x + expect_y)).abs() < 1e-12);
        assert!((loss_total(&pred, &gq, &w).unwrap() - (4.0 + expect_x + expect_y)).abs() < 1e-12);
        // gamma scaling.
        let w2 = LossWeights::new(2.0, 2.0).unwrap();
        assert!(
            (loss_total(&pred, &gq, &w2).unwrap() - (4.0 + 2.0 * (expect_x + expect_y))).abs()
                < 1e-12
        );
        let w0 = LossWeights::new(0.0, 2.0).unwrap();
        assert!((loss_total(&pred, &gq, &w0).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn edge_weight_examples() {
        // Flat target -> zero weights.
        let flat = Grid::constant(3, 4, 2, 5.0).unwrap();
        let w = edge_weight(&flat, Axis2::X, 0.5).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
        // Gradient magnitude equal to sigma -> 1 - e^{-1}.
        let ramp = Grid::from_fn(2, 4, 1, |_, x, _| 0.5 * x as f32).unwrap();
        let w = edge_weight(&ramp, Axis2::X, 0.5).unwrap();
        let expect = 1.0 - (-1.0f64).exp();
        assert!(w.data().iter().all(|&v| (v as f64 - expect).abs() < 1e-7));
        // Huge gradient -> weight approaches 1.
        let step = Grid::from_fn(2, 2, 1, |_, x, _| if x == 0 { 0.0 } else { 1e6 }).unwrap();
        let w = edge_weight(&step, Axis2::X, 0.5).unwrap();
        assert!(w.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn zero_loss_on_identical_grids() {
        let (pred, _) = ramp_pair();
        let w = LossWeights::new(1.0, 1.0).unwrap();
        assert_eq!(loss_l1(&pred, &pred).unwrap(), 0.0);
        assert_eq!(loss_grad(&pred, &pred, &w).unwrap(), 0.0);
        // Flat target kills the gradient loss regardless of the prediction.
        let flat = Grid::constant(3, 3, 1, 1.0).unwrap();
        let lg = loss_grad(&pred, &flat, &w).unwrap();
        assert_eq!(lg, 0.0);
    }

    #[test]
    fn constant_offset_l1() {
        let a = Grid::constant(4, 4, 2, 1.25).unwrap();
        let b = Grid::constant(4, 4, 2, -0.75).unwrap();
        assert!((loss_l1(&a, &b).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn l1_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Grid::from_fn(5, 6, 3, |_, _, _| rng.gen_range(-2.0f32..2.0)).unwrap();
        let b = Grid::from_fn(5, 6, 3, |_, _, _| rng.gen_range(-2.0f32..2.0)).unwrap();
        let mut sum = 0.0f64;
        for i in 0..a.data().len() {
            sum += (a.data()[i] as f64 - b.data()[i] as f64).abs();
        }
        assert!((loss_l1(&a, &b).unwrap() - sum / a.data().len() as f64).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_matches_grid_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pred = Grid::from_fn(4, 5, 2, |_, _, _| rng.gen_range(-1.0f32..1.0)).unwrap();
        let gq = Grid::from_fn(4, 5, 2, |_, _, _| rng.gen_range(-1.0f32..1.0)).unwrap();
        let w = LossWeights::new(1.0, 0.3).unwrap();
        let want = loss_total(&pred, &gq, &w).unwrap();
        let tape = Tape::new();
        let pv = tape.leaf(grid_to_matrix(&pred));
        let total = loss_total_tape(&tape, pv, 4, 5, &grid_to_matrix(&gq), &w);
        assert!((tape.scalar(total) - want).abs() < 1e-12);
    }

    #[test]
    fn gradients_through_solve_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w) = (4, 4);
        let n = h * w;
        let d = 3;
        let m = 2;
        let gq = randmat(&mut rng, n, m);
        let gc = randmat(&mut rng, n, m);
        let weights = LossWeights::new(1.0, 0.5).unwrap();
        let lambda = 0.1;
        let x0 = randmat(&mut rng, n, d);
        let xq = randmat(&mut rng, n, d);
        let err = crate::tensor::testutil::max_grad_rel_err(
            &[x0, xq],
            |t, v| {
                let x0a = t.append_ones_col(v[0]);
                let xqa = t.append_ones_col(v[1]);
                let gcv = t.constant(gc.clone());
                let w_star = ridge_solve_tape(t, x0a, gcv, lambda).unwrap();
                let pred = t.matmul(xqa, w_star);
                loss_total_tape(t, pred, h, w, &gq, &weights)
            },
            1e-6,
        );
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn solve_counter_counts() {
        reset_ridge_solve_count();
        let x = Array2::from_shape_vec((2, 1), vec![1.0, 2.0]).unwrap();
        let g = Array2::from_shape_vec((2, 1), vec![2.0, 4.0]).unwrap();
        let before = ridge_solve_count();
        let _ = solve_ridge(&RidgeProblem::new(x, g, 0.5).unwrap()).unwrap();
        assert_eq!(ridge_solve_count(), before + 1);
    }

    #[test]
    fn median_sigma_ignores_flat_regions() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let flat = Grid::constant(6, 6, 1, 3.0).unwrap();
        assert_eq!(median_gradient_sigma(&[&flat]), 1.0);
        let noisy = Grid::from_fn(6, 6, 1, |_, _, _| rng.gen_range(0.0f32..1.0)).unwrap();
        let sigma = median_gradient_sigma(&[&noisy]);
        assert!(sigma > 0.0 && sigma < 1.0);
    }
}
