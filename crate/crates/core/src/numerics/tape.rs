//! Reverse-mode automatic differentiation over matrix-valued operations.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes, each
//! holding its value and (for tracked nodes) a one-shot backward closure.
//! Nodes are identified by [`Var`] handles and are created in topological
//! order, so [`Tape::backward`] is a single reverse sweep.
//!
//! Granularity is the matrix operation, not the scalar: one `matmul` is one
//! node whose backward closure performs the two transposed products. That
//! keeps tapes short (hundreds of nodes per training step) and pushes all
//! inner-loop work into the GEMM kernel.
//!
//! Tracking: a node is *tracked* if gradients should flow through it. Leaves
//! created with [`Tape::leaf`] are tracked; [`Tape::constant`] nodes are not,
//! and an operation whose inputs are all untracked registers no closure at
//! all. Generation passes (noise planning, adversarial-direction search with
//! frozen parameters) therefore cost no backward bookkeeping, and
//! stop-gradient semantics are structural: a snapshot passed in as a plain
//! matrix simply is not part of the graph.

use crate::error::{Error, Result};

use super::matrix::{Matrix, Scalar};
use super::rng::RngStream;

/// Probability floor used inside `ln` for cross-entropy and KL terms, and in
/// the matching backward formulas. Values below the floor contribute the
/// floored value's log and a bounded gradient.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Per-column statistics captured by a batch-normalization node. `std`
/// already includes the epsilon guard: `std = sqrt(var + eps)`.
#[derive(Clone, Debug)]
pub struct BatchStats<T: Scalar> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
    /// Population (1/N) variance before the epsilon guard.
    pub var: Vec<T>,
}

/// Read-only view handed to backward closures.
pub struct BackCtx<'a, T: Scalar> {
    values: &'a [Matrix<T>],
    tracked: &'a [bool],
}

impl<'a, T: Scalar> BackCtx<'a, T> {
    fn value(&self, id: usize) -> &Matrix<T> {
        &self.values[id]
    }

    /// Accumulates `delta` into the gradient slot of node `id`, skipping
    /// untracked nodes (their gradients are never read).
    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], id: usize, delta: Matrix<T>) {
        if !self.tracked[id] {
            return;
        }
        match &mut grads[id] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }
}

type BackFn<T> = Box<dyn FnOnce(&Matrix<T>, &BackCtx<'_, T>, &mut [Option<Matrix<T>>]) + Send>;

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`, if any reached it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Moves the gradient out, leaving `None`.
    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// One recorded forward computation. See module docs.
pub struct Tape<T: Scalar> {
    values: Vec<Matrix<T>>,
    tracked: Vec<bool>,
    backs: Vec<Option<BackFn<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            tracked: Vec::new(),
            backs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.values[v.0]
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.tracked[v.0]
    }

    fn push(&mut self, value: Matrix<T>, tracked: bool, back: Option<BackFn<T>>) -> Var {
        debug_assert!(back.is_none() || tracked, "backward closure on untracked node");
        self.values.push(value);
        self.tracked.push(tracked);
        self.backs.push(back);
        Var(self.values.len() - 1)
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.tracked[v.0])
    }

    /// Untracked input: gradients never flow into it.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, false, None)
    }

    /// Tracked leaf: a differentiation root (parameter or attacked input).
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, true, None)
    }

    /// Reverse sweep from `loss` (must be 1x1). Consumes the tape; each
    /// backward closure runs at most once.
    pub fn backward(self, loss: Var) -> Gradients<T> {
        assert_eq!(
            self.values[loss.0].shape(),
            (1, 1),
            "backward root must be a scalar node"
        );
        let Tape {
            values,
            tracked,
            mut backs,
        } = self;
        let ctx = BackCtx {
            values: &values,
            tracked: &tracked,
        };
        let mut grads: Vec<Option<Matrix<T>>> = (0..values.len()).map(|_| None).collect();
        if tracked[loss.0] {
            grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        }
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            if let Some(back) = backs[i].take() {
                // The node's own gradient is complete (all consumers have
                // higher indices and already ran); hand it to the closure and
                // reclaim the slot.
                let g = grads[i].take().expect("checked above");
                back(&g, &ctx, &mut grads);
            }
        }
        Gradients { grads }
    }

    // ---- arithmetic ---------------------------------------------------

    /// `x * w` for `x: n x d`, `w: d x m`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let value = self.values[x.0].matmul(&self.values[w.0]);
        let tracked = self.any_tracked(&[x, w]);
        let back: Option<BackFn<T>> = tracked.then(|| {
            Box::new(move |g: &Matrix<T>, ctx: &BackCtx<'_, T>, grads: &mut [Option<Matrix<T>>]| {
                ctx.accumulate(grads, x.0, g.matmul_nt(ctx.value(w.0)));
                ctx.accumulate(grads, w.0, ctx.value(x.0).matmul_tn(g));
            }) as BackFn<T>
        });
        self.push(value, tracked, back)
    }

    /// `x * w + b` with `b: 1 x m` broadcast over rows. Validates shapes and
    /// reports them in the error, since this is the main user-facing linear
    /// operation.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xr, xc) = self.values[x.0].shape();
        let (wr, wc) = self.values[w.0].shape();
        let (br, bc) = self.values[b.0].shape();
        if xc != wr {
            return Err(Error::dimension("affine", format!("x {}x{}", xr, xc), format!("w {}x{}", wr, wc)));
        }
        if br != 1 || bc != wc {
            return Err(Error::dimension("affine", format!("w {}x{}", wr, wc), format!("b {}x{}", br, bc)));
        }
        let prod = self.matmul(x, w);
        Ok(self.add_row(prod, b))
    }

    /// Elementwise `x + y`.
    pub fn add(&mut self, x: Var, y: Var) -> Var {
        let value = self.values[x.0].add(&self.values[y.0]);
        let tracked = self.any_tracked(&[x, y]);
        let back: Option<BackFn<T>> = tracked.then(|| {
            Box::new(move |g: &Matrix<T>, ctx: &BackCtx<'_, T>, grads: &mut [Option<Matrix<T>>]| {
                ctx.accumulate(grads, x.0, g.clone());
                ctx.accumulate(grads, y.0, g.clone());
            }) as BackFn<T>
        });
        self.push(value, tracked, back)
    }

    /// Elementwise `x - y`.
    pub fn sub(&mut self, x: Var, y: Var) -> Var {
        let value = self.values[x.0].sub(&self.values[y.0]);
        let tracked = self.any_tracked(&[x, y]);
        let back: Option<BackFn<T>> = tracked.then(|| {
            Box::new(move |g: &Matrix<T>, ctx: &BackCtx<'_, T>, grads: &mut [Option<Matrix<T>>]| {
                ctx.accumulate(grads, x.0, g.clone());
                ctx.accumulate(grads, y.0, g.scale(-T::one()));
            }) as BackFn<T>
        });
        self.push(value, tracked, back)
    }

    /// Elementwise product.
    pub fn elem_mul(&mut self, x: Var, y: Var) -> Var {
        let value = self.values[x.0].zip_map(&self.values[y.0], |a, b| a * b);
        let tracked = self.any_tracked(&[x, y]);
        let back: Option<BackFn<T>> = tracked.then(|| {
            Box::new(move |g: &Matrix<T>, ctx: &BackCtx<'_, T>, grads: &mut [Option<Matrix<T>>]| {
                ctx.accumulate(grads, x.0, g.zip_map(ctx.value(y.0), |a, b| a * b));
                ctx.accumulate(grads, y.0, g.zip_map(ctx.value(x.0), |a, b| a * b));
            }) as BackFn<T>
        });
        self.push(value, tracked, back)
    }

    /// `x + c` for a constant matrix `c` (noise injection, perturbations).
    pub fn add_const(&mut self, x: Var, c: &Matrix<T>) -> Var {
        let value = self.values[x.0].add(c);
        let tracked = self.tracked[x.0];
        let back: Option<BackFn<T>> = tracked.then(|| {
            Box::new(move |g: &Matrix<T>, ctx: &BackCtx<'_, T>, grads: &mut [Option<Matrix<T>>]| {
                ctx.accumulate(grads, x.0, g.clone());
            }) as BackFn<T>
        });
        self.push(value, tracked, back)
    }

    /// `alpha * x` for a constant scalar.
    pub fn scale(&mut self, x: Var, alpha: T) -> Var {
        let value = self.values[x.0].scale(alpha);
        let tracked = self.tracked[x.0];
        let back: Option<BackFn<T>> = tracked.then(|| {
            Box::new(move |g: &Matrix<T>, ctx: &BackCtx<'_, T>, grads: &mut [Option<Matrix<T>>]| {
                ctx.accumulate(grads, x.0, g.scale(alpha));
            }) as BackFn<T>
        });
        self.push(value, tracked, back)
    }

    /// `x + r` with `r: 1 x m` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Var {
        let xv = &self.values[x.0];
        let rv = &self.values[r.0];
        assert_eq!(rv.shape(), (1, xv.cols()), "add_row wants a 1x{} row", xv.cols());
        let value = broadcast_rows(xv, rv, |a, b| a + b);
        let tracked = self.any_tracked(&[x, r]);
        let back: Option<BackFn<T>> = tracked.then(|| {
            Box::new(move |g: &Matrix<T>, ctx: &BackCtx<'_, T>, grads: &mut [Option<Matrix<T>>]| {
                ctx.accumulate(grads, x.0, g.clone());
                ctx.accumulate(grads, r.0, Matrix::row_vector(g.col_sums()));
            }) as BackFn<T>
        });
        self.push(value, tracked, back)
    }

    /// `x * r` (elementwise) with `r: 1 x m` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        let xv = &self.values[x.0];
        let rv = &self.values[r.0];
        assert_eq!(rv.shape(), (1, xv.cols()), "mul_row wants a 1x{} row", xv.cols());
        let value = broadcast_rows(xv, rv, |a, b| a * b);
        let tracked = self.any_tracked(&[x, r]);
        let back: Option<BackFn<T>> = tracked.then(|| {
            Box::new(move |g: &Matrix<T>, ctx: &BackCtx<'_, T>, grads: &mut [Option<Matrix<T>>]| {
                let xv = ctx.value(x.0);
                let rv = ctx.value(r.0);
                ctx.accumulate(grads, x.0, broadcast_rows(g, rv, |a, b| a * b));
                ctx.accumulate(grads, r.0, Matrix::row_vector(g.zip_map(xv, |a, b| a * b).col_sums()));
            }) as BackFn<T>
        });
        self.push(value, tracked, back)
    }

    // ---- nonlinearities ------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.values[x.0].map(|v| v.max(T::zero()));
        let tracked = self.tracked[x.0];
        let back: Option<BackFn<T>> = tracked.then(|| {
            Box::new(move |g: &Matrix<T>, ctx: &BackCtx<'_, T>, grads: &mut [Option<Matrix<T>>]| {
                let mask = ctx.value(x.0);
                ctx.accumulate(
                    grads,
                    x.0,
                    g.zip_map(mask, |gv, xv| if xv > T::zero() { gv } else { T::zero() }),
                );
            }) as BackFn<T>
        });
        self.push(value, tracked, back)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.values[x.0].map(stable_sigmoid);
        let tracked = self.tracked[x.0];
        let out_id = self.values.len(); // the node about to be pushed
        let back: Option<BackFn<T>> = tracked.then(|| {
            Box::new(move |g: &Matrix<T>, ctx: &BackCtx<'_, T>, grads: &mut [Option<Matrix<T>>]| {
                let y = ctx.value(out_id);
                ctx.accumulate(grads, x.0, g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv)));
            }) as BackFn<T>
        });
        self.push(value, tracked, back)
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = softmax_value(&self.values[x.0]);
        let tracked = self.tracked[x.0];
        let out_id = self.values.len();
        let back: Option<BackFn<T>> = tracked.then(|| {
            Box::new(move |g: &Matrix<T>, ctx: &BackCtx<'_, T>, grads: &mut [Option<Matrix<T>>]| {
                let y = ctx.value(out_id);
                let (n, m) = y.shape();
                let mut dx = Vec::with_capacity(n * m);
                for (grow, yrow) in g.rows_iter().zip(y.rows_iter()) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (&gv, &yv) in grow.iter().zip(yrow) {
                        dx.push(yv * (gv - dot));
                    }
                }
                ctx.accumulate(grads, x.0, Matrix::from_vec(n, m, dx));
            }) as BackFn<T>
        });
        self.push(value, tracked, back)
    }

    // ---- normalization ---------------------------------------------------

    /// Batch normalization over rows (no affine part): each column is shifted
    /// to zero mean and scaled to unit variance using the batch's own
    /// statistics. Returns the captured statistics so callers can reuse them
    /// as constants (running averages, reconstruction renormalization).
    ///
    /// The backward pass differentiates through the batch mean and variance,
    /// not just the elementwise shift/scale.
    pub fn batch_norm(&mut self, x: Var, eps: T) -> (Var, BatchStats<T>) {
        let xv = &self.values[x.0];
        let mean = xv.col_means();
        let var = xv.col_vars(&mean);
        let std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt()).collect();
        let value = normalize_value(xv, &mean, &std);
        let stats = BatchStats { mean, std: std.clone(), var };
        let tracked = self.tracked[x.0];
        let out_id = self.values.len();
        let back: Option<BackFn<T>> = tracked.then(|| {
            let std = std.clone();
            Box::new(move |g: &Matrix<T>, ctx: &BackCtx<'_, T>, grads: &mut [Option<Matrix<T>>]| {
                let xhat = ctx.value(out_id);
                let (n, m) = xhat.shape();
                let inv_n = T::one() / T::from_f64(n as f64);
                let g_mean: Vec<T> = g.col_sums().into_iter().map(|s| s * inv_n).collect();
                let gx_mean: Vec<T> = g
                    .zip_map(xhat, |a, b| a * b)
                    .col_sums()
                    .into_iter()
                    .map(|s| s * inv_n)
                    .collect();
                let mut dx = Vec::with_capacity(n * m);
                for (grow, xrow) in g.rows_iter().zip(xhat.rows_iter()) {
                    for j in 0..m {
                        dx.push((grow[j] - g_mean[j] - xrow[j] * gx_mean[j]) / std[j]);
                    }
                }
                ctx.accumulate(grads, x.0, Matrix::from_vec(n, m, dx));
            }) as BackFn<T>
        });
        let var_node = self.push(value, tracked, back);
        (var_node, stats)
    }

    /// `(x - mean) / std` with *fixed* per-column statistics: nothing flows
    /// back through the stats, only `g / std` through `x`. Used for
    /// evaluation-mode normalization (running averages) and for
    /// renormalizing reconstructions by the clean pass's batch statistics.
    pub fn normalize_const(&mut self, x: Var, mean: &[T], std: &[T]) -> Var {
        let xv = &self.values[x.0];
        assert_eq!(mean.len(), xv.cols(), "normalize_const mean length");
        assert_eq!(std.len(), xv.cols(), "normalize_const std length");
        let value = normalize_value(xv, mean, std);
        let tracked = self.tracked[x.0];
        let back: Option<BackFn<T>> = tracked.then(|| {
            let std = std.to_vec();
            Box::new(move |g: &Matrix<T>, ctx: &BackCtx<'_, T>, grads: &mut [Option<Matrix<T>>]| {
                let (n, m) = g.shape();
                let mut dx = Vec::with_capacity(n * m);
                for grow in g.rows_iter() {
                    for j in 0..m {
                        dx.push(grow[j] / std[j]);
                    }
                }
                ctx.accumulate(grads, x.0, Matrix::from_vec(n, m, dx));
            }) as BackFn<T>
        });
        self.push(value, tracked, back)
    }

    /// `(x - mean(reference)) / std(reference)` with per-column statistics
    /// taken from `reference`'s batch — and, unlike [`Tape::normalize_const`],
    /// kept differentiable: gradients flow into `x` directly and into
    /// `reference` through the mean and variance. With `x == reference` this
    /// reduces exactly to [`Tape::batch_norm`]. Used to renormalize decoder
    /// reconstructions by the clean encoder's statistics so the comparison
    /// frame itself stays part of the objective.
    pub fn normalize_like(&mut self, x: Var, reference: Var, eps: T) -> Var {
        let refv = &self.values[reference.0];
        let xv = &self.values[x.0];
        assert_eq!(xv.cols(), refv.cols(), "normalize_like column count");
        let mean = refv.col_means();
        let var = refv.col_vars(&mean);
        let std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt()).collect();
        let value = normalize_value(xv, &mean, &std);
        let tracked = self.tracked[x.0] || self.tracked[reference.0];
        let out_id = self.values.len();
        let back: Option<BackFn<T>> = tracked.then(|| {
            let mean = mean.clone();
            let std = std.clone();
            Box::new(move |g: &Matrix<T>, ctx: &BackCtx<'_, T>, grads: &mut [Option<Matrix<T>>]| {
                let (n, m) = g.shape();
                let mut dx = Vec::with_capacity(n * m);
                for grow in g.rows_iter() {
                    for j in 0..m {
                        dx.push(grow[j] / std[j]);
                    }
                }
                ctx.accumulate(grads, x.0, Matrix::from_vec(n, m, dx));
                // Through the statistics: for reference entry (k, j),
                //   dref_kj = (dmu_j + ds_j * rhat_kj) / N
                // with dmu_j = -colsum_j(g) / std_j, ds_j = -colsum_j(g*out) / std_j,
                // and rhat the reference normalized by its own statistics.
                let out = ctx.value(out_id);
                let refval = ctx.value(reference.0);
                let (nr, _) = refval.shape();
                let inv_n = T::one() / T::from_f64(nr as f64);
                let g_sum = g.col_sums();
                let gy_sum = g.zip_map(out, |a, b| a * b).col_sums();
                let mut dref = Vec::with_capacity(nr * m);
                for refrow in refval.rows_iter() {
                    for j in 0..m {
                        let rhat = (refrow[j] - mean[j]) / std[j];
                        dref.push(-(g_sum[j] + gy_sum[j] * rhat) * inv_n / std[j]);
                    }
                }
                ctx.accumulate(grads, reference.0, Matrix::from_vec(nr, m, dref));
            }) as BackFn<T>
        });
        self.push(value, tracked, back)
    }

    /// Adds i.i.d. `N(0, sigma^2)` noise. `sigma = 0` is an exact no-op that
    /// draws nothing from `rng`, so disabling noise leaves every other
    /// stream's randomness untouched. Negative `sigma` is an error.
    pub fn gaussian_noise(&mut self, x: Var, sigma: T, rng: &mut RngStream) -> Result<Var> {
        if sigma < T::zero() {
            return Err(Error::Argument(format!("gaussian_noise: sigma must be >= 0, got {}", sigma)));
        }
        if sigma == T::zero() {
            return Ok(x);
        }
        let (n, m) = self.values[x.0].shape();
        let noise = rng.normal_matrix(n, m, sigma);
        Ok(self.add_const(x, &noise))
    }

    // ---- losses ----------------------------------------------------------

    /// Mean over all entries of `x^2`; the workhorse of reconstruction
    /// penalties. Produces a 1x1 node.
    pub fn mean_sq(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let count = T::from_f64(xv.len() as f64);
        let value = Matrix::filled(1, 1, xv.frobenius_sq() / count);
        let tracked = self.tracked[x.0];
        let back: Option<BackFn<T>> = tracked.then(|| {
            Box::new(move |g: &Matrix<T>, ctx: &BackCtx<'_, T>, grads: &mut [Option<Matrix<T>>]| {
                let gv = g.get(0, 0);
                let two = T::from_f64(2.0);
                ctx.accumulate(grads, x.0, ctx.value(x.0).map(|v| two * v * gv / count));
            }) as BackFn<T>
        });
        self.push(value, tracked, back)
    }

    /// Mean cross-entropy of `probs` (already softmax outputs) against
    /// integer labels: `-(1/n) sum_i ln probs[i, labels[i]]`, with the
    /// probability floored at [`PROB_FLOOR`] inside the log. Composed with
    /// the softmax backward this reproduces the numerically stable
    /// `(probs - onehot)/n` logit gradient.
    pub fn cross_entropy_mean(&mut self, probs: Var, labels: &[usize]) -> Var {
        let pv = &self.values[probs.0];
        assert_eq!(pv.rows(), labels.len(), "one label per row");
        let floor = T::from_f64(PROB_FLOOR);
        let n = T::from_f64(labels.len() as f64);
        let mut total = T::zero();
        for (row, &y) in pv.rows_iter().zip(labels) {
            assert!(y < pv.cols(), "label {} out of range for {} classes", y, pv.cols());
            total = total - row[y].max(floor).ln();
        }
        let value = Matrix::filled(1, 1, total / n);
        let tracked = self.tracked[probs.0];
        let labels_owned: Vec<usize> = labels.to_vec();
        let back: Option<BackFn<T>> = tracked.then(|| {
            Box::new(move |g: &Matrix<T>, ctx: &BackCtx<'_, T>, grads: &mut [Option<Matrix<T>>]| {
                let pv = ctx.value(probs.0);
                let gv = g.get(0, 0);
                let mut dp = Matrix::zeros(pv.rows(), pv.cols());
                {
                    let (cols, buf) = (pv.cols(), dp.as_mut_slice());
                    for (i, &y) in labels_owned.iter().enumerate() {
                        buf[i * cols + y] = -gv / (n * pv.get(i, y).max(floor));
                    }
                }
                ctx.accumulate(grads, probs.0, dp);
            }) as BackFn<T>
        });
        self.push(value, tracked, back)
    }

    /// Mean (over rows) KL divergence `KL(p || q)` where `p` is a *constant*
    /// reference distribution and `q` is on the tape. Rows are distributions;
    /// entries of `q` are floored at [`PROB_FLOOR`] inside the log and the
    /// backward formula; `p = 0` entries contribute exactly zero. Taking `p`
    /// by value rather than as a tape node is what implements the
    /// stop-gradient on the reference side.
    pub fn kl_mean(&mut self, p: &Matrix<T>, q: Var) -> Var {
        let qv = &self.values[q.0];
        assert!(p.same_shape(qv), "kl_mean shape mismatch: {} vs {}", p.shape_string(), qv.shape_string());
        let n = T::from_f64(p.rows() as f64);
        let value = Matrix::filled(1, 1, kl_divergence_total(p, qv) / n);
        let tracked = self.tracked[q.0];
        let p_owned = p.clone();
        let back: Option<BackFn<T>> = tracked.then(|| {
            Box::new(move |g: &Matrix<T>, ctx: &BackCtx<'_, T>, grads: &mut [Option<Matrix<T>>]| {
                let qv = ctx.value(q.0);
                let gv = g.get(0, 0);
                let floor = T::from_f64(PROB_FLOOR);
                let dq = p_owned.zip_map(qv, |pij, qij| {
                    if pij == T::zero() {
                        T::zero()
                    } else {
                        -gv * pij / (n * qij.max(floor))
                    }
                });
                ctx.accumulate(grads, q.0, dq);
            }) as BackFn<T>
        });
        self.push(value, tracked, back)
    }
}

// ---- shared value-level kernels (used by both forward passes and the
// value-only helpers in `ops`) ------------------------------------------------

fn broadcast_rows<T: Scalar>(x: &Matrix<T>, row: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    let (n, m) = x.shape();
    let r = row.as_slice();
    let mut data = Vec::with_capacity(n * m);
    for xrow in x.rows_iter() {
        for j in 0..m {
            data.push(f(xrow[j], r[j]));
        }
    }
    Matrix::from_vec(n, m, data)
}

/// Overflow-free logistic function.
pub(crate) fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_value<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let (n, m) = x.shape();
    let mut data = Vec::with_capacity(n * m);
    for row in x.rows_iter() {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        let start = data.len();
        for &v in row {
            let e = (v - max).exp();
            sum = sum + e;
            data.push(e);
        }
        for v in &mut data[start..] {
            *v = *v / sum;
        }
    }
    Matrix::from_vec(n, m, data)
}

pub(crate) fn normalize_value<T: Scalar>(x: &Matrix<T>, mean: &[T], std: &[T]) -> Matrix<T> {
    let (n, m) = x.shape();
    let mut data = Vec::with_capacity(n * m);
    for row in x.rows_iter() {
        for j in 0..m {
            data.push((row[j] - mean[j]) / std[j]);
        }
    }
    Matrix::from_vec(n, m, data)
}

/// Sum over rows of `KL(p_row || q_row)` with the [`PROB_FLOOR`] guard.
pub(crate) fn kl_divergence_total<T: Scalar>(p: &Matrix<T>, q: &Matrix<T>) -> T {
    let floor = T::from_f64(PROB_FLOOR);
    let mut total = T::zero();
    for (prow, qrow) in p.rows_iter().zip(q.rows_iter()) {
        for (&pj, &qj) in prow.iter().zip(qrow) {
            if pj > T::zero() {
                total = total + pj * (pj.ln() - qj.max(floor).ln());
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn softmax_of_known_logits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Matrix::from_vec(1, 2, vec![2.0f64.ln(), 0.0]));
        let y = tape.softmax(x);
        let v = tape.value(y);
        assert_relative_eq!(v.get(0, 0), 2.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(v.get(0, 1), 1.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_under_extreme_logits() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Matrix::from_vec(2, 3, vec![1000.0, 0.0, -1000.0, -1e30, 0.0, 1e30]));
        let y = tape.softmax(x);
        for row in tape.value(y).rows_iter() {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {}", s);
            assert!(row.iter().all(|p| p.is_finite()));
        }
    }

    #[test]
    fn kl_of_known_distributions() {
        let p = Matrix::from_vec(1, 2, vec![0.75, 0.25]);
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Matrix::from_vec(1, 2, vec![0.5, 0.5]));
        let kl = tape.kl_mean(&p, q);
        let expected = 0.75f64 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
        assert_relative_eq!(tape.value(kl).get(0, 0), expected, max_relative = 1e-12);
        assert_relative_eq!(expected, 0.130812036, max_relative = 1e-6);
    }

    #[test]
    fn kl_is_zero_iff_equal_and_positive_otherwise() {
        let p = Matrix::from_vec(1, 3, vec![0.2, 0.3, 0.5]);
        let mut tape = Tape::<f64>::new();
        let q_same = tape.constant(p.clone());
        let kl = tape.kl_mean(&p, q_same);
        assert_relative_eq!(tape.value(kl).get(0, 0), 0.0, epsilon = 1e-15);

        let mut tape = Tape::<f64>::new();
        let q_other = tape.constant(Matrix::from_vec(1, 3, vec![0.5, 0.3, 0.2]));
        let kl = tape.kl_mean(&p, q_other);
        assert!(tape.value(kl).get(0, 0) > 0.0);
    }

    #[test]
    fn zero_probability_rows_stay_finite() {
        let p = Matrix::from_vec(1, 2, vec![0.0, 1.0]);
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(Matrix::from_vec(1, 2, vec![0.0, 1.0]));
        let kl = tape.kl_mean(&p, q);
        assert!(tape.value(kl).get(0, 0).is_finite());
        let grads = tape.backward(kl);
        assert!(grads.wrt(q).unwrap().all_finite());
    }

    #[test]
    fn batch_norm_of_two_point_column() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Matrix::from_vec(2, 1, vec![0.0, 2.0]));
        let (y, stats) = tape.batch_norm(x, 1e-12);
        assert_relative_eq!(tape.value(y).get(0, 0), -1.0, max_relative = 1e-9);
        assert_relative_eq!(tape.value(y).get(1, 0), 1.0, max_relative = 1e-9);
        assert_relative_eq!(stats.mean[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(stats.var[0], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn batch_norm_output_has_zero_mean_unit_variance() {
        let mut rng = crate::numerics::rng::RngStream::new(5);
        let x_val: Matrix<f64> = rng.normal_matrix(64, 7, 3.0);
        let x_val = x_val.map(|v| v + 2.5); // offset so normalization has work to do
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(x_val);
        let (y, _) = tape.batch_norm(x, 1e-10);
        let yv = tape.value(y);
        let means = yv.col_means();
        let vars = yv.col_vars(&means);
        for j in 0..7 {
            assert!(means[j].abs() < 1e-9, "column {} mean {}", j, means[j]);
            assert!((vars[j] - 1.0).abs() < 1e-6, "column {} var {}", j, vars[j]);
        }
    }

    #[test]
    fn softmax_then_cross_entropy_has_the_fused_gradient() {
        // d(mean CE)/d(logits) must equal (probs - onehot)/n; this is the
        // composition of two separately implemented backward closures, so it
        // doubles as an integration check on both.
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Matrix::from_vec(2, 3, vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.4]));
        let probs = tape.softmax(logits);
        let labels = [2usize, 0];
        let loss = tape.cross_entropy_mean(probs, &labels);
        let probs_val = tape.value(probs).clone();
        let grads = tape.backward(loss);
        let g = grads.wrt(logits).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                let expected = (probs_val.get(i, j) - onehot) / 2.0;
                assert_relative_eq!(g.get(i, j), expected, max_relative = 1e-10, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn matmul_gradients_match_hand_derivation() {
        // loss = sum of entries of (x*w) via mean_sq trick is overkill; use
        // a direct 1x1 product instead: x (1x2) * w (2x1).
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Matrix::from_vec(1, 2, vec![3.0, -2.0]));
        let w = tape.leaf(Matrix::from_vec(2, 1, vec![0.5, 4.0]));
        let y = tape.matmul(x, w); // 1x1: 3*0.5 + (-2)*4 = -6.5
        assert_relative_eq!(tape.value(y).get(0, 0), -6.5);
        let grads = tape.backward(y);
        assert_eq!(grads.wrt(x).unwrap().as_slice(), &[0.5, 4.0]);
        assert_eq!(grads.wrt(w).unwrap().as_slice(), &[3.0, -2.0]);
    }

    #[test]
    fn gradient_accumulates_across_shared_use() {
        // y = x + x => dy/dx = 2
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Matrix::filled(1, 1, 1.5));
        let y = tape.add(x, x);
        let grads = tape.backward(y);
        assert_eq!(grads.wrt(x).unwrap().get(0, 0), 2.0);
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Matrix::filled(1, 1, 2.0));
        let c = tape.constant(Matrix::filled(1, 1, 3.0));
        let y = tape.elem_mul(x, c);
        let grads = tape.backward(y);
        assert_eq!(grads.wrt(x).unwrap().get(0, 0), 3.0);
        assert!(grads.wrt(c).is_none());
    }

    #[test]
    fn affine_reports_shapes_on_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Matrix::zeros(4, 3));
        let w = tape.constant(Matrix::zeros(5, 2));
        let b = tape.constant(Matrix::zeros(1, 2));
        let err = tape.affine(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("4x3") && msg.contains("5x2"), "unhelpful message: {msg}");
    }

    #[test]
    fn gaussian_noise_rejects_negative_sigma_and_skips_draws_at_zero() {
        let mut rng = crate::numerics::rng::RngStream::new(11);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Matrix::zeros(2, 2));
        assert!(tape.gaussian_noise(x, -0.1, &mut rng).is_err());

        let before = rng.clone().next_u64();
        let same = tape.gaussian_noise(x, 0.0, &mut rng).unwrap();
        assert_eq!(same, x, "sigma=0 must be the identity");
        assert_eq!(rng.next_u64(), before, "sigma=0 must not consume randomness");
    }

    #[test]
    fn normalize_like_self_reference_matches_batch_norm() {
        let xm = crate::numerics::rng::RngStream::new(31).normal_matrix(6, 4, 1.3);

        let mut a = Tape::<f64>::new();
        let xa = a.leaf(xm.clone());
        let (bn, _) = a.batch_norm(xa, 1e-5);
        let la = a.mean_sq(bn);
        let value_a = a.value(la).get(0, 0);
        let ga = a.backward(la).wrt(xa).unwrap().clone();

        let mut b = Tape::<f64>::new();
        let xb = b.leaf(xm);
        let nl = b.normalize_like(xb, xb, 1e-5);
        let lb = b.mean_sq(nl);
        assert_relative_eq!(b.value(lb).get(0, 0), value_a, max_relative = 1e-12);
        let gb = b.backward(lb).wrt(xb).unwrap().clone();
        let drift = ga.sub(&gb).max_abs();
        assert!(drift < 1e-12, "self-referenced normalize_like drifted {drift} from batch_norm");
    }

    #[test]
    fn normalize_like_gradients_match_finite_differences() {
        // Gradients must be exact through both the normalized input and the
        // reference that donates the statistics.
        use crate::numerics::{bind, grad_check, ParamSet};
        let mut rng = crate::numerics::rng::RngStream::new(37);
        let mut set = ParamSet::new();
        let x_id = set.add("x", rng.normal_matrix(5, 3, 1.0));
        let ref_id = set.add("ref", rng.normal_matrix(7, 3, 2.0));
        let report = grad_check(
            &mut set,
            |set: &ParamSet<f64>| {
                let mut tape = Tape::new();
                let binding = bind(&mut tape, set, true);
                let out = tape.normalize_like(binding.var(x_id), binding.var(ref_id), 1e-5);
                let loss = tape.mean_sq(out);
                (tape, binding, loss)
            },
            1e-5,
        );
        assert!(
            report.max_rel_err < 1e-8,
            "normalize_like gradient check failed: {} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
    }

    #[test]
    fn kl_mean_gradients_match_finite_differences() {
        // The running distribution enters through softmax so every probe stays
        // a valid distribution; the reference is a fixed constant.
        use crate::numerics::{bind, grad_check, ParamSet};
        let mut rng = crate::numerics::rng::RngStream::new(41);
        let p = crate::numerics::ops::softmax(&rng.normal_matrix::<f64>(4, 3, 1.0));
        let mut set = ParamSet::new();
        let w_id = set.add("w", rng.normal_matrix(4, 3, 1.5));
        let report = grad_check(
            &mut set,
            |set: &ParamSet<f64>| {
                let mut tape = Tape::new();
                let binding = bind(&mut tape, set, true);
                let q = tape.softmax(binding.var(w_id));
                let loss = tape.kl_mean(&p, q);
                (tape, binding, loss)
            },
            1e-5,
        );
        assert!(
            report.max_rel_err < 1e-8,
            "kl_mean gradient check failed: {} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
    }
}
