//! Independent brute-force reference implementations used by the test
//! suites. These deliberately share no code with the production paths they
//! check: the ridge oracle goes through a Householder QR of the augmented
//! stack instead of the normal equations, the refinement oracle recomputes
//! dense affinities per pixel per iteration, and the matrix product is a
//! plain triple loop.

use ndarray::{s, Array2};

use crate::grids::Grid;

/// Least-squares solve of `min ||A w - b||^2` with `A = [X; sqrt(lambda) I]`
/// via Householder QR, column by column of `g`. For full-rank `A` this is
/// the pseudo-inverse applied to the stacked right-hand side.
pub fn ridge_via_householder_qr(x: &Array2<f64>, g: &Array2<f64>, lambda: f64) -> Array2<f64> {
    let (n, d) = x.dim();
    let m = g.ncols();
    let rows = n + d;
    let mut a = Array2::<f64>::zeros((rows, d));
    a.slice_mut(s![..n, ..]).assign(x);
    let sqrt_lambda = lambda.sqrt();
    for j in 0..d {
        a[[n + j, j]] = sqrt_lambda;
    }
    let mut b = Array2::<f64>::zeros((rows, m));
    b.slice_mut(s![..n, ..]).assign(g);

    for j in 0..d {
        let norm: f64 = (j..rows).map(|i| a[[i, j]] * a[[i, j]]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let sign = if a[[j, j]] >= 0.0 { 1.0 } else { -1.0 };
        let alpha = -sign * norm;
        let mut v: Vec<f64> = (j..rows).map(|i| a[[i, j]]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 < 1e-300 {
            continue;
        }
        for col in j..d {
            let dot: f64 = (j..rows).map(|i| v[i - j] * a[[i, col]]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..rows {
                a[[i, col]] -= f * v[i - j];
            }
        }
        for col in 0..m {
            let dot: f64 = (j..rows).map(|i| v[i - j] * b[[i, col]]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..rows {
                b[[i, col]] -= f * v[i - j];
            }
        }
    }

    let mut w = Array2::<f64>::zeros((d, m));
    for col in 0..m {
        for i in (0..d).rev() {
            let mut s = b[[i, col]];
            for k in (i + 1)..d {
                s -= a[[i, k]] * w[[k, col]];
            }
            w[[i, col]] = s / a[[i, i]];
        }
    }
    w
}

/// Triple-loop matrix product.
pub fn matmul_naive(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let (k2, m) = b.dim();
    assert_eq!(k, k2);
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[[i, l]] * b[[l, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

/// Dense single-level mean-field refinement, recomputing affinities from
/// scratch at every pixel and iteration. Neighbourhood: the centre (score 0)
/// plus the eight offsets of each dilation; scores are
/// `-||color(p) - color(q)||^2 / temperature`, softmax-normalised over the
/// in-bounds set.
pub fn mean_field_naive(
    features: &Grid,
    image: &Grid,
    dilations: &[usize],
    temperature: f64,
    iterations: usize,
) -> Grid {
    let (h, w, c) = (features.height(), features.width(), features.channels());
    assert_eq!((image.height(), image.width()), (h, w));
    let mut cur: Vec<f64> = features.data().iter().map(|&v| v as f64).collect();
    for _ in 0..iterations {
        let mut next = vec![0.0f64; cur.len()];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut offsets: Vec<(isize, isize)> = vec![(0, 0)];
                for &d in dilations {
                    let d = d as isize;
                    for dy in [-d, 0, d] {
                        for dx in [-d, 0, d] {
                            if dy == 0 && dx == 0 {
                                continue;
                            }
                            offsets.push((dy, dx));
                        }
                    }
                }
                let mut scores = Vec::with_capacity(offsets.len());
                let mut coords = Vec::with_capacity(offsets.len());
                for (dy, dx) in offsets {
                    let (qy, qx) = (y + dy, x + dx);
                    if qy < 0 || qy >= h as isize || qx < 0 || qx >= w as isize {
                        continue;
                    }
                    let mut dist = 0.0f64;
                    for ch in 0..image.channels() {
                        let dv = image.get(y as usize, x as usize, ch) as f64
                            - image.get(qy as usize, qx as usize, ch) as f64;
                        dist += dv * dv;
                    }
                    scores.push(-dist / temperature);
                    coords.push((qy as usize, qx as usize));
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let base = ((y as usize) * w + x as usize) * c;
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (e, (qy, qx)) in exps.iter().zip(&coords) {
                        acc += e * cur[(qy * w + qx) * c + ch];
                    }
                    next[base + ch] = acc / z;
                }
            }
        }
        cur = next;
    }
    let data: Vec<f32> = cur.iter().map(|&v| v as f32).collect();
    Grid::from_vec(h, w, c, data).expect("refined grid stays finite")
}
