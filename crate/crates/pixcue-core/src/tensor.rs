//! A small reverse-mode differentiation tape over `f64` matrices.
//!
//! Values are `ndarray::Array2<f64>`; spatial tensors are stored as
//! `(h*w) x channels` matrices with the spatial layout passed explicitly to
//! the ops that need it. Each op pushes its backward closure onto the tape;
//! [`Tape::backward`] walks the tape in reverse and accumulates gradients
//! into leaf slots. A tape lives on one thread and is consumed within one
//! training sample; batch elements each build their own tape.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array2, Axis};

use crate::grids::Axis2;

/// Handle to a tape node. Carries the value shape for cheap assertions.
#[derive(Debug, Clone, Copy)]
pub struct Var {
    id: usize,
    pub rows: usize,
    pub cols: usize,
}

type BackFn = Box<dyn Fn(&Array2<f64>, &mut [Option<Array2<f64>>])>;

struct Node {
    value: Rc<Array2<f64>>,
    back: Option<BackFn>,
    requires: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients keyed by leaf `Var`.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros if it never received
    /// a contribution.
    pub fn get(&self, v: Var) -> Array2<f64> {
        self.grads[v.id]
            .clone()
            .unwrap_or_else(|| Array2::zeros((v.rows, v.cols)))
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: usize, g: Array2<f64>) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, value: Array2<f64>, requires: bool, back: Option<BackFn>) -> Var {
        debug_assert!(value.iter().all(|v| v.is_finite()), "non-finite tape value");
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let (rows, cols) = value.dim();
        nodes.push(Node { value: Rc::new(value), back, requires });
        Var { id, rows, cols }
    }

    /// Trainable (or differentiated-against) input.
    pub fn leaf(&self, value: Array2<f64>) -> Var {
        self.push(value, true, None)
    }

    /// Non-differentiated input (targets, masks, fixed heads).
    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> Rc<Array2<f64>> {
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    /// Scalar payload of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].requires
    }

    /// Runs reverse accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!((root.rows, root.cols), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Array2::ones((1, 1)));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &nodes[id].back {
                Some(back) => back(&g, &mut grads),
                None => grads[id] = Some(g), // leaf or constant: keep
            }
        }
        Gradients { grads }
    }

    // ---- elementwise and affine ops ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols));
        let (va, vb) = (self.value(a), self.value(b));
        let out = &*va + &*vb;
        let (ra, rb) = (self.requires(a), self.requires(b));
        let back: Option<BackFn> = (ra || rb).then(|| {
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                if ra {
                    accumulate(grads, a.id, g.clone());
                }
                if rb {
                    accumulate(grads, b.id, g.clone());
                }
            }) as BackFn
        });
        self.push(out, ra || rb, back)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols));
        let (va, vb) = (self.value(a), self.value(b));
        let out = &*va - &*vb;
        let (ra, rb) = (self.requires(a), self.requires(b));
        let back: Option<BackFn> = (ra || rb).then(|| {
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                if ra {
                    accumulate(grads, a.id, g.clone());
                }
                if rb {
                    accumulate(grads, b.id, -g);
                }
            }) as BackFn
        });
        self.push(out, ra || rb, back)
    }

    /// `k * a + b`, elementwise with scalar constants.
    pub fn affine(&self, a: Var, k: f64, b: f64) -> Var {
        let va = self.value(a);
        let out = va.mapv(|v| k * v + b);
        let ra = self.requires(a);
        let back: Option<BackFn> = ra.then(|| {
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                accumulate(grads, a.id, g * k);
            }) as BackFn
        });
        self.push(out, ra, back)
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    pub fn mul_elem(&self, a: Var, b: Var) -> Var {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols));
        let (va, vb) = (self.value(a), self.value(b));
        let out = &*va * &*vb;
        let (ra, rb) = (self.requires(a), self.requires(b));
        let back: Option<BackFn> = (ra || rb).then(|| {
            let (va, vb) = (Rc::clone(&va), Rc::clone(&vb));
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                if ra {
                    accumulate(grads, a.id, g * &*vb);
                }
                if rb {
                    accumulate(grads, b.id, g * &*va);
                }
            }) as BackFn
        });
        self.push(out, ra || rb, back)
    }

    /// Elementwise product with a broadcast `1x1` variable.
    pub fn mul_scalar_var(&self, a: Var, s: Var) -> Var {
        assert_eq!((s.rows, s.cols), (1, 1));
        let (va, vs) = (self.value(a), self.value(s));
        let k = vs[[0, 0]];
        let out = &*va * k;
        let (ra, rs) = (self.requires(a), self.requires(s));
        let back: Option<BackFn> = (ra || rs).then(|| {
            let va = Rc::clone(&va);
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                if ra {
                    accumulate(grads, a.id, g * k);
                }
                if rs {
                    let dot: f64 = g.iter().zip(va.iter()).map(|(x, y)| x * y).sum();
                    accumulate(grads, s.id, Array2::from_elem((1, 1), dot));
                }
            }) as BackFn
        });
        self.push(out, ra || rs, back)
    }

    /// Elementwise product with a constant matrix (weights/masks).
    pub fn mul_const(&self, a: Var, m: &Array2<f64>) -> Var {
        assert_eq!((a.rows, a.cols), m.dim());
        let va = self.value(a);
        let out = &*va * m;
        let ra = self.requires(a);
        let back: Option<BackFn> = ra.then(|| {
            let m = m.clone();
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                accumulate(grads, a.id, g * &m);
            }) as BackFn
        });
        self.push(out, ra, back)
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|v| v.max(0.0));
        let ra = self.requires(a);
        let back: Option<BackFn> = ra.then(|| {
            let va = Rc::clone(&va);
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                let mut dg = g.clone();
                dg.zip_mut_with(&va, |d, &v| {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                });
                accumulate(grads, a.id, dg);
            }) as BackFn
        });
        self.push(out, ra, back)
    }

    /// Elementwise absolute value with subgradient 0 at the kink.
    pub fn abs(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(f64::abs);
        let ra = self.requires(a);
        let back: Option<BackFn> = ra.then(|| {
            let va = Rc::clone(&va);
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                let mut dg = g.clone();
                dg.zip_mut_with(&va, |d, &v| {
                    *d *= if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                accumulate(grads, a.id, dg);
            }) as BackFn
        });
        self.push(out, ra, back)
    }

    pub fn exp(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(f64::exp);
        let ra = self.requires(a);
        let out_rc = Rc::new(out);
        let back: Option<BackFn> = ra.then(|| {
            let y = Rc::clone(&out_rc);
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                accumulate(grads, a.id, g * &*y);
            }) as BackFn
        });
        let value = Rc::try_unwrap(out_rc.clone()).unwrap_or_else(|rc| (*rc).clone());
        self.push(value, ra, back)
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.cols, b.rows, "matmul dim mismatch");
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.dot(&*vb);
        let (ra, rb) = (self.requires(a), self.requires(b));
        let back: Option<BackFn> = (ra || rb).then(|| {
            let (va, vb) = (Rc::clone(&va), Rc::clone(&vb));
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                if ra {
                    accumulate(grads, a.id, g.dot(&vb.t()));
                }
                if rb {
                    accumulate(grads, b.id, va.t().dot(g));
                }
            }) as BackFn
        });
        self.push(out, ra || rb, back)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.t().as_standard_layout().to_owned();
        let ra = self.requires(a);
        let back: Option<BackFn> = ra.then(|| {
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                accumulate(grads, a.id, g.t().as_standard_layout().to_owned());
            }) as BackFn
        });
        self.push(out, ra, back)
    }

    /// Adds a `1 x C` bias row to every row of `a`.
    pub fn add_bias_row(&self, a: Var, bias: Var) -> Var {
        assert_eq!(bias.rows, 1);
        assert_eq!(a.cols, bias.cols);
        let (va, vb) = (self.value(a), self.value(bias));
        let out = &*va + &vb.row(0);
        let (ra, rb) = (self.requires(a), self.requires(bias));
        let back: Option<BackFn> = (ra || rb).then(|| {
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                if ra {
                    accumulate(grads, a.id, g.clone());
                }
                if rb {
                    let sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(grads, bias.id, sum);
                }
            }) as BackFn
        });
        self.push(out, ra || rb, back)
    }

    /// Appends a constant ones column: `[A | 1]`.
    pub fn append_ones_col(&self, a: Var) -> Var {
        let va = self.value(a);
        let (n, c) = va.dim();
        let mut out = Array2::ones((n, c + 1));
        out.slice_mut(ndarray::s![.., ..c]).assign(&va);
        let ra = self.requires(a);
        let back: Option<BackFn> = ra.then(|| {
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                let dg = g.slice(ndarray::s![.., ..g.ncols() - 1]).to_owned();
                accumulate(grads, a.id, dg);
            }) as BackFn
        });
        self.push(out, ra, back)
    }

    // ---- reductions ----

    pub fn mean_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = (a.rows * a.cols) as f64;
        let out = Array2::from_elem((1, 1), va.sum() / n);
        let ra = self.requires(a);
        let back: Option<BackFn> = ra.then(|| {
            let (rows, cols) = (a.rows, a.cols);
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                let v = g[[0, 0]] / n;
                accumulate(grads, a.id, Array2::from_elem((rows, cols), v));
            }) as BackFn
        });
        self.push(out, ra, back)
    }

    /// Row-wise sum over a subset of columns, producing `N x 1`.
    pub fn sum_cols_subset(&self, a: Var, cols: &[usize]) -> Var {
        assert!(cols.iter().all(|&c| c < a.cols));
        let va = self.value(a);
        let mut out = Array2::zeros((a.rows, 1));
        for r in 0..a.rows {
            let mut s = 0.0;
            for &c in cols {
                s += va[[r, c]];
            }
            out[[r, 0]] = s;
        }
        let ra = self.requires(a);
        let back: Option<BackFn> = ra.then(|| {
            let cols = cols.to_vec();
            let (rows, ncols) = (a.rows, a.cols);
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                let mut dg = Array2::zeros((rows, ncols));
                for r in 0..rows {
                    for &c in &cols {
                        dg[[r, c]] = g[[r, 0]];
                    }
                }
                accumulate(grads, a.id, dg);
            }) as BackFn
        });
        self.push(out, ra, back)
    }

    /// Row-wise full sum, producing `N x 1`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let all: Vec<usize> = (0..a.cols).collect();
        self.sum_cols_subset(a, &all)
    }

    /// `sum(a * mask) / denom` as a scalar; `mask` is a constant.
    pub fn masked_mean(&self, a: Var, mask: &Array2<f64>, denom: f64) -> Var {
        assert_eq!((a.rows, a.cols), mask.dim());
        assert!(denom > 0.0);
        let va = self.value(a);
        let s: f64 = va.iter().zip(mask.iter()).map(|(x, m)| x * m).sum();
        let out = Array2::from_elem((1, 1), s / denom);
        let ra = self.requires(a);
        let back: Option<BackFn> = ra.then(|| {
            let mask = mask.clone();
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                accumulate(grads, a.id, &mask * (g[[0, 0]] / denom));
            }) as BackFn
        });
        self.push(out, ra, back)
    }

    // ---- row-wise nonlinearities ----

    pub fn softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.as_ref().clone();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let ra = self.requires(a);
        let y = Rc::new(out);
        let back: Option<BackFn> = ra.then(|| {
            let y = Rc::clone(&y);
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                let mut dg = g * &*y;
                for r in 0..dg.nrows() {
                    let s: f64 = dg.row(r).sum();
                    let yr = y.row(r);
                    for c in 0..dg.ncols() {
                        dg[[r, c]] -= s * yr[c];
                    }
                }
                accumulate(grads, a.id, dg);
            }) as BackFn
        });
        let value = (*y).clone();
        self.push(value, ra, back)
    }

    /// Row-wise l2 normalisation with an epsilon floor on the norm.
    pub fn l2_normalize_rows(&self, a: Var, eps: f64) -> Var {
        assert!(eps > 0.0);
        let va = self.value(a);
        let mut norms = Vec::with_capacity(a.rows);
        let mut out = va.as_ref().clone();
        for mut row in out.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            norms.push(n);
            row.mapv_inplace(|v| v / n);
        }
        let ra = self.requires(a);
        let y = Rc::new(out);
        let back: Option<BackFn> = ra.then(|| {
            let y = Rc::clone(&y);
            let norms = norms.clone();
            let floored: Vec<bool> = {
                let va = Rc::clone(&va);
                (0..a.rows)
                    .map(|r| {
                        let n2: f64 = va.row(r).iter().map(|v| v * v).sum();
                        n2.sqrt() < eps
                    })
                    .collect()
            };
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                let mut dg = Array2::zeros(g.dim());
                for r in 0..g.nrows() {
                    let n = norms[r];
                    if floored[r] {
                        for c in 0..g.ncols() {
                            dg[[r, c]] = g[[r, c]] / n;
                        }
                    } else {
                        let yr = y.row(r);
                        let dot: f64 = g.row(r).iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                        for c in 0..g.ncols() {
                            dg[[r, c]] = (g[[r, c]] - yr[c] * dot) / n;
                        }
                    }
                }
                accumulate(grads, a.id, dg);
            }) as BackFn
        });
        let value = (*y).clone();
        self.push(value, ra, back)
    }

    // ---- spatial ops (rows = h*w in row-major pixel order) ----

    /// Same-padding KxK convolution via an explicit patch matrix.
    /// `weight` is `(k*k*cin) x cout` with patch order `(dy, dx, cin)`;
    /// `bias` is `1 x cout`.
    pub fn conv2d(&self, a: Var, h: usize, w: usize, weight: Var, bias: Var, k: usize) -> Var {
        assert_eq!(a.rows, h * w);
        assert!(k % 2 == 1, "kernel size must be odd");
        let cin = a.cols;
        assert_eq!(weight.rows, k * k * cin);
        let va = self.value(a);
        let patches = im2col(&va, h, w, k);
        let patches = Rc::new(patches);
        let vw = self.value(weight);
        let vb = self.value(bias);
        let out = patches.dot(&*vw) + &vb.row(0);
        let (ra, rw, rb) = (self.requires(a), self.requires(weight), self.requires(bias));
        let back: Option<BackFn> = (ra || rw || rb).then(|| {
            let patches = Rc::clone(&patches);
            let vw = Rc::clone(&vw);
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                if rw {
                    accumulate(grads, weight.id, patches.t().dot(g));
                }
                if rb {
                    accumulate(grads, bias.id, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if ra {
                    let dp = g.dot(&vw.t());
                    accumulate(grads, a.id, col2im(&dp, h, w, k, cin));
                }
            }) as BackFn
        });
        self.push(out, ra || rw || rb, back)
    }

    /// Bilinear spatial resampling from `(h, w)` to `(oh, ow)`; channels kept.
    pub fn resize_bilinear(&self, a: Var, h: usize, w: usize, oh: usize, ow: usize) -> Var {
        assert_eq!(a.rows, h * w);
        let va = self.value(a);
        let out = resize_matrix(&va, h, w, oh, ow);
        let ra = self.requires(a);
        let back: Option<BackFn> = ra.then(|| {
            let c = a.cols;
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                accumulate(grads, a.id, resize_matrix_transpose(g, h, w, oh, ow, c));
            }) as BackFn
        });
        self.push(out, ra, back)
    }

    /// Absolute forward difference along a spatial axis with trailing-edge
    /// replication; mirrors the raster-level gradient operator.
    pub fn grad_abs(&self, a: Var, h: usize, w: usize, axis: Axis2) -> Var {
        assert_eq!(a.rows, h * w);
        match axis {
            Axis2::X => assert!(w >= 2),
            Axis2::Y => assert!(h >= 2),
        }
        let va = self.value(a);
        let c = a.cols;
        let mut out = Array2::zeros((h * w, c));
        let idx = move |y: usize, x: usize| y * w + x;
        for y in 0..h {
            for x in 0..w {
                let (y1, x1, y0, x0) = match axis {
                    Axis2::X => (y, (x.min(w - 2)) + 1, y, x.min(w - 2)),
                    Axis2::Y => ((y.min(h - 2)) + 1, x, y.min(h - 2), x),
                };
                for ch in 0..c {
                    out[[idx(y, x), ch]] = (va[[idx(y1, x1), ch]] - va[[idx(y0, x0), ch]]).abs();
                }
            }
        }
        let ra = self.requires(a);
        let back: Option<BackFn> = ra.then(|| {
            let va = Rc::clone(&va);
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                let mut dg = Array2::zeros((h * w, c));
                for y in 0..h {
                    for x in 0..w {
                        // Each stored difference receives the upstream of its
                        // own cell plus the replicated trailing cell.
                        let (owner, hi, lo, extra) = match axis {
                            Axis2::X => {
                                if x == w - 1 {
                                    continue;
                                }
                                let extra = x == w - 2;
                                (idx(y, x), idx(y, x + 1), idx(y, x), extra.then(|| idx(y, w - 1)))
                            }
                            Axis2::Y => {
                                if y == h - 1 {
                                    continue;
                                }
                                let extra = y == h - 2;
                                (idx(y, x), idx(y + 1, x), idx(y, x), extra.then(|| idx(h - 1, x)))
                            }
                        };
                        for ch in 0..c {
                            let mut u = g[[owner, ch]];
                            if let Some(e) = extra {
                                u += g[[e, ch]];
                            }
                            let d = va[[hi, ch]] - va[[lo, ch]];
                            let s = if d > 0.0 {
                                1.0
                            } else if d < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            dg[[hi, ch]] += u * s;
                            dg[[lo, ch]] -= u * s;
                        }
                    }
                }
                accumulate(grads, a.id, dg);
            }) as BackFn
        });
        self.push(out, ra, back)
    }

    /// Mean cross-entropy over rows with a label; `labels[r] = None` skips
    /// row `r`. Numerically stable log-sum-exp formulation.
    pub fn cross_entropy_mean(&self, logits: Var, labels: &[Option<usize>]) -> Var {
        assert_eq!(labels.len(), logits.rows);
        let va = self.value(logits);
        let n_labeled = labels.iter().flatten().count();
        assert!(n_labeled > 0, "cross entropy needs at least one labelled row");
        let mut total = 0.0;
        let mut probs = Array2::zeros(va.dim());
        for (r, lab) in labels.iter().enumerate() {
            let Some(y) = lab else { continue };
            let row = va.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &v in row.iter() {
                z += (v - m).exp();
            }
            let lse = m + z.ln();
            total += lse - row[*y];
            for c in 0..va.ncols() {
                probs[[r, c]] = (row[c] - lse).exp();
            }
        }
        let out = Array2::from_elem((1, 1), total / n_labeled as f64);
        let ra = self.requires(logits);
        let back: Option<BackFn> = ra.then(|| {
            let labels = labels.to_vec();
            let probs = Rc::new(probs);
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                let scale = g[[0, 0]] / n_labeled as f64;
                let mut dg = Array2::zeros(probs.dim());
                for (r, lab) in labels.iter().enumerate() {
                    let Some(y) = lab else { continue };
                    for c in 0..dg.ncols() {
                        let onehot = if c == *y { 1.0 } else { 0.0 };
                        dg[[r, c]] = (probs[[r, c]] - onehot) * scale;
                    }
                }
                accumulate(grads, logits.id, dg);
            }) as BackFn
        });
        self.push(out, ra, back)
    }

    /// Pushes a node with a caller-supplied backward closure; used by fused
    /// ops defined in other modules (e.g. the ridge solve).
    pub fn custom(
        &self,
        value: Array2<f64>,
        parents_require: bool,
        back: impl Fn(&Array2<f64>, &mut CustomGrads) + 'static,
    ) -> Var {
        let back_fn: Option<BackFn> = parents_require.then(|| {
            Box::new(move |g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]| {
                let mut cg = CustomGrads { grads };
                back(g, &mut cg);
            }) as BackFn
        });
        self.push(value, parents_require, back_fn)
    }

    /// Whether gradients flow into `v` (for fused-op authors).
    pub fn needs_grad(&self, v: Var) -> bool {
        self.requires(v)
    }
}

/// Gradient sink handed to fused-op backward closures.
pub struct CustomGrads<'a> {
    grads: &'a mut [Option<Array2<f64>>],
}

impl CustomGrads<'_> {
    pub fn add(&mut self, v: Var, g: Array2<f64>) {
        assert_eq!((v.rows, v.cols), g.dim());
        accumulate(self.grads, v.id, g);
    }
}

fn im2col(a: &Array2<f64>, h: usize, w: usize, k: usize) -> Array2<f64> {
    let cin = a.ncols();
    let r = (k / 2) as isize;
    let mut p = Array2::zeros((h * w, k * k * cin));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let row = (y as usize) * w + x as usize;
            let mut col = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sy, sx) = (y + dy, x + dx);
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        let src = (sy as usize) * w + sx as usize;
                        for ch in 0..cin {
                            p[[row, col + ch]] = a[[src, ch]];
                        }
                    }
                    col += cin;
                }
            }
        }
    }
    p
}

fn col2im(dp: &Array2<f64>, h: usize, w: usize, k: usize, cin: usize) -> Array2<f64> {
    let r = (k / 2) as isize;
    let mut da = Array2::zeros((h * w, cin));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let row = (y as usize) * w + x as usize;
            let mut col = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sy, sx) = (y + dy, x + dx);
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        let src = (sy as usize) * w + sx as usize;
                        for ch in 0..cin {
                            da[[src, ch]] += dp[[row, col + ch]];
                        }
                    }
                    col += cin;
                }
            }
        }
    }
    da
}

fn resize_matrix(a: &Array2<f64>, h: usize, w: usize, oh: usize, ow: usize) -> Array2<f64> {
    let c = a.ncols();
    let xt = crate::grids::axis_taps(0, w, ow);
    let yt = crate::grids::axis_taps(0, h, oh);
    let mut out = Array2::zeros((oh * ow, c));
    for (oy, ty) in yt.iter().enumerate() {
        for (ox, tx) in xt.iter().enumerate() {
            let row = oy * ow + ox;
            let (r00, r01) = (ty.lo * w + tx.lo, ty.lo * w + tx.hi);
            let (r10, r11) = (ty.hi * w + tx.lo, ty.hi * w + tx.hi);
            let (wy, wx) = (ty.t, tx.t);
            let w00 = (1.0 - wy) * (1.0 - wx);
            let w01 = (1.0 - wy) * wx;
            let w10 = wy * (1.0 - wx);
            let w11 = wy * wx;
            for ch in 0..c {
                out[[row, ch]] = w00 * a[[r00, ch]]
                    + w01 * a[[r01, ch]]
                    + w10 * a[[r10, ch]]
                    + w11 * a[[r11, ch]];
            }
        }
    }
    out
}

fn resize_matrix_transpose(
    g: &Array2<f64>,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    c: usize,
) -> Array2<f64> {
    let xt = crate::grids::axis_taps(0, w, ow);
    let yt = crate::grids::axis_taps(0, h, oh);
    let mut da = Array2::zeros((h * w, c));
    for (oy, ty) in yt.iter().enumerate() {
        for (ox, tx) in xt.iter().enumerate() {
            let row = oy * ow + ox;
            let (r00, r01) = (ty.lo * w + tx.lo, ty.lo * w + tx.hi);
            let (r10, r11) = (ty.hi * w + tx.lo, ty.hi * w + tx.hi);
            let (wy, wx) = (ty.t, tx.t);
            let w00 = (1.0 - wy) * (1.0 - wx);
            let w01 = (1.0 - wy) * wx;
            let w10 = wy * (1.0 - wx);
            let w11 = wy * wx;
            for ch in 0..c {
                let u = g[[row, ch]];
                da[[r00, ch]] += w00 * u;
                da[[r01, ch]] += w01 * u;
                da[[r10, ch]] += w10 * u;
                da[[r11, ch]] += w11 * u;
            }
        }
    }
    da
}
