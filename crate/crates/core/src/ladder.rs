//! The ladder network: shared-weight clean/corrupted encoders, a denoising
//! decoder with per-unit combinator functions, and the layer-wise
//! reconstruction cost.
//!
//! Layer indexing: layer `0` is the input (width `widths[0]`); layers
//! `1..=L` are computed, with layer `L` the class distribution. One encoder
//! layer is `linear -> batch-norm -> (+ noise, + injected perturbation) ->
//! shift/scale -> nonlinearity`, ReLU for hidden layers and softmax at the
//! top. The batch-norm output *plus corruption* is the lateral activation
//! `z̃` handed to the decoder; the clean pass's batch-norm output is the
//! reconstruction target `z`.
//!
//! The decoder mirrors the encoder widths. At each layer a vertical signal
//! `u` (batch-normalized projection of the layer above; the corrupted output
//! distribution at the top) is fused with the lateral `z̃` by a per-unit
//! combinator
//!
//! ```text
//! mu(u) = a1 * sigmoid(a2 u + a3) + a4 u + a5
//!  v(u) = a6 * sigmoid(a7 u + a8) + a9 u + a10
//! zhat  = (z̃ - mu(u)) * v(u) + mu(u)
//! ```
//!
//! with ten trainable parameters per unit, initialized to the pass-through
//! `zhat = z̃` (a2 = a7 = a10 = 1, rest 0) plus small jitter.
//!
//! The reconstruction cost at layer `l` is the mean squared difference
//! between the *renormalized* reconstruction and the clean target, weighted
//! by `lambda[l]`. Renormalization uses the clean pass's batch statistics as
//! constants: gradients flow through `zhat` and through the target `z`, but
//! not through the statistics themselves.

use crate::error::{Error, Result};
use crate::numerics::{
    bind, Binding, BatchStats, Matrix, ParamId, ParamSet, RngStream, Scalar, Tape, Var,
};

/// Epsilon inside `sqrt(var + eps)` for every batch normalization in the
/// model (encoder layers, decoder verticals, eval-time running statistics).
pub const BN_EPS: f64 = 1e-5;

/// Momentum of the exponential moving average tracking clean-pass batch
/// statistics for evaluation.
pub const RUNNING_MOMENTUM: f64 = 0.99;

/// Standard deviation of the jitter added to combinator parameters at
/// initialization, on top of the exact pass-through setting.
pub const COMBINATOR_JITTER: f64 = 0.01;

/// Exponential moving averages of clean-pass batch statistics for one layer,
/// used in place of batch statistics at evaluation time.
#[derive(Clone, Debug)]
pub struct RunningStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    initialized: bool,
}

impl<T: Scalar> RunningStats<T> {
    fn fresh(width: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); width],
            var: vec![T::one(); width],
            initialized: false,
        }
    }

    /// Folds one batch's statistics into the average. The first update
    /// adopts the batch values outright so early evaluations are not pulled
    /// toward the arbitrary (0, 1) starting point.
    pub fn update(&mut self, mean: &[T], var: &[T]) {
        let momentum = T::from_f64(RUNNING_MOMENTUM);
        if !self.initialized {
            self.mean.copy_from_slice(mean);
            self.var.copy_from_slice(var);
            self.initialized = true;
            return;
        }
        for (m, &new) in self.mean.iter_mut().zip(mean) {
            *m = momentum * *m + (T::one() - momentum) * new;
        }
        for (v, &new) in self.var.iter_mut().zip(var) {
            *v = momentum * *v + (T::one() - momentum) * new;
        }
    }

    pub fn std(&self) -> Vec<T> {
        let eps = T::from_f64(BN_EPS);
        self.var.iter().map(|&v| (v + eps).sqrt()).collect()
    }

    /// Overwrites the stored statistics (checkpoint restore).
    pub fn restore(&mut self, mean: Vec<T>, var: Vec<T>) {
        assert_eq!(mean.len(), self.mean.len());
        assert_eq!(var.len(), self.var.len());
        self.mean = mean;
        self.var = var;
        self.initialized = true;
    }
}

/// All trainable parameters of one ladder model plus the evaluation-time
/// batch statistics.
#[derive(Clone, Debug)]
pub struct LadderParams<T: Scalar> {
    widths: Vec<usize>,
    pub set: ParamSet<T>,
    enc_w: Vec<ParamId>,
    enc_beta: Vec<ParamId>,
    enc_gamma: Vec<ParamId>,
    dec_v: Vec<ParamId>,
    comb: Vec<[ParamId; 10]>,
    pub running: Vec<RunningStats<T>>,
}

impl<T: Scalar> LadderParams<T> {
    /// Initializes a model: encoder/decoder weights `N(0, 1/fan_in)`,
    /// shifts 0, scales 1, combinators at pass-through plus jitter. All
    /// randomness comes from substreams of `rng`, so the same stream yields
    /// the same model regardless of what else has been sampled from it.
    pub fn init(widths: &[usize], rng: &RngStream) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Argument(format!(
                "a ladder needs an input and an output layer; got widths {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Argument(format!("zero-width layer in {widths:?}")));
        }
        let layers = widths.len() - 1;
        let mut set = ParamSet::new();
        let mut enc_w = Vec::with_capacity(layers);
        let mut enc_beta = Vec::with_capacity(layers);
        let mut enc_gamma = Vec::with_capacity(layers);
        let mut dec_v = Vec::with_capacity(layers);
        let mut comb = Vec::with_capacity(layers + 1);

        let mut wstream = rng.substream("init-encoder");
        for l in 1..=layers {
            let (fan_in, fan_out) = (widths[l - 1], widths[l]);
            let scale = T::from_f64(1.0 / (fan_in as f64).sqrt());
            let w = wstream.normal_matrix(fan_in, fan_out, scale);
            enc_w.push(set.add(format!("encoder.l{l}.weight"), w));
            enc_beta.push(set.add(format!("encoder.l{l}.beta"), Matrix::zeros(1, fan_out)));
            enc_gamma.push(set.add(format!("encoder.l{l}.gamma"), Matrix::filled(1, fan_out, T::one())));
        }

        let mut vstream = rng.substream("init-decoder");
        for l in 0..layers {
            // Projects layer l+1 down to layer l.
            let (fan_in, fan_out) = (widths[l + 1], widths[l]);
            let scale = T::from_f64(1.0 / (fan_in as f64).sqrt());
            let v = vstream.normal_matrix(fan_in, fan_out, scale);
            dec_v.push(set.add(format!("decoder.l{l}.weight"), v));
        }

        let mut cstream = rng.substream("init-combinator");
        let jitter = T::from_f64(COMBINATOR_JITTER);
        for (l, &width) in widths.iter().enumerate() {
            let mut ids = [None::<ParamId>; 10];
            for (k, slot) in ids.iter_mut().enumerate() {
                let a_index = k + 1; // a1..a10
                let base = match a_index {
                    2 | 7 | 10 => T::one(),
                    _ => T::zero(),
                };
                let mut init = cstream.normal_matrix(1, width, jitter);
                init.map_inplace(|v| v + base);
                *slot = Some(set.add(format!("combinator.l{l}.a{a_index}"), init));
            }
            comb.push(ids.map(|id| id.expect("filled above")));
        }

        let running = (1..=layers).map(|l| RunningStats::fresh(widths[l])).collect();

        Ok(LadderParams {
            widths: widths.to_vec(),
            set,
            enc_w,
            enc_beta,
            enc_gamma,
            dec_v,
            comb,
            running,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Number of computed layers (`widths.len() - 1`).
    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().expect("validated nonempty")
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    /// The same model with its parameter set replaced (architecture handles
    /// and running statistics carried over). Used by gradient checks, which
    /// re-evaluate a frozen objective on perturbed copies of the set.
    pub fn with_set(&self, set: ParamSet<T>) -> Self {
        let mut shell = self.clone();
        shell.set = set;
        shell
    }

    /// Folds a clean pass's batch statistics into the running averages.
    pub fn update_running(&mut self, stats: &[BatchStats<T>]) {
        assert_eq!(stats.len(), self.layers());
        for (rs, bs) in self.running.iter_mut().zip(stats) {
            rs.update(&bs.mean, &bs.var);
        }
    }
}

/// Which statistics the encoder's normalizations use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsMode {
    /// Normalize with the current batch's own statistics (training passes).
    TrainingBatch,
    /// Normalize with the stored running averages (evaluation, attacks).
    RunningAverages,
}

/// Pre-sampled additive corruption for one encoder pass: Gaussian noise and
/// injected (adversarial) perturbations per layer, both optional. Freezing
/// the corruption before the pass makes every training loss a deterministic
/// function of the parameters, which is what lets finite differences verify
/// the analytic gradient exactly.
#[derive(Clone, Debug)]
pub struct CorruptionPlan<T: Scalar> {
    /// `noise[l]` is added to layer `l`'s lateral activation; length L+1.
    pub noise: Vec<Option<Matrix<T>>>,
    /// Injected perturbations, same layout.
    pub inject: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> CorruptionPlan<T> {
    /// No corruption (clean pass) for a model with the given layer count.
    pub fn clean(layers: usize) -> Self {
        CorruptionPlan {
            noise: vec![None; layers + 1],
            inject: vec![None; layers + 1],
        }
    }

    /// Samples `N(0, sigma^2)` noise for every layer. `sigma = 0` draws
    /// nothing. Draw order is layer 0 upward; each plan should be given its
    /// own substream.
    pub fn sample(widths: &[usize], batch: usize, sigma: T, rng: &mut RngStream) -> Result<Self> {
        if sigma < T::zero() {
            return Err(Error::Argument(format!("noise sigma must be >= 0, got {sigma}")));
        }
        let mut plan = Self::clean(widths.len() - 1);
        if sigma > T::zero() {
            for (l, &w) in widths.iter().enumerate() {
                plan.noise[l] = Some(rng.normal_matrix(batch, w, sigma));
            }
        }
        Ok(plan)
    }

    fn validate(&self, widths: &[usize], batch: usize) -> Result<()> {
        let check = |kind: &'static str, slots: &[Option<Matrix<T>>]| -> Result<()> {
            if slots.len() != widths.len() {
                return Err(Error::dimension(
                    "corruption plan",
                    format!("{} {kind} slots", slots.len()),
                    format!("{} layers", widths.len()),
                ));
            }
            for (l, slot) in slots.iter().enumerate() {
                if let Some(m) = slot {
                    if m.shape() != (batch, widths[l]) {
                        return Err(Error::dimension(
                            "corruption plan",
                            format!("layer {l} {kind} {}", m.shape_string()),
                            format!("{}x{}", batch, widths[l]),
                        ));
                    }
                }
            }
            Ok(())
        };
        check("noise", &self.noise)?;
        check("inject", &self.inject)
    }
}

/// Tape-level trace of one encoder pass.
pub struct EncoderPass<T: Scalar> {
    /// Lateral activations: `z[0]` the (corrupted) input, `z[l]` the
    /// post-batch-norm, post-corruption activation of layer `l`.
    pub z: Vec<Var>,
    /// Post-nonlinearity outputs; `h[0] == z[0]`, `h[L]` is the class
    /// distribution.
    pub h: Vec<Var>,
    /// Pre-normalization linear outputs, index `l-1` for layer `l`. A clean
    /// pass's entries carry the statistics that renormalize reconstructions.
    pub pre: Vec<Var>,
    /// Batch statistics used at each computed layer (index `l-1` for layer
    /// `l`). In running-averages mode these echo the stored averages.
    pub stats: Vec<BatchStats<T>>,
    /// Pre-softmax shifted/scaled top activations.
    pub logits: Var,
    /// `h[L]`, for convenience.
    pub probs: Var,
}

fn stats_for_layer<T: Scalar>(params: &LadderParams<T>, l: usize) -> BatchStats<T> {
    let rs = &params.running[l - 1];
    BatchStats {
        mean: rs.mean.clone(),
        std: rs.std(),
        var: rs.var.clone(),
    }
}

/// One encoder pass over `x` (already on the tape). Applies the corruption
/// plan, normalizes according to `mode`, and returns the full trace.
pub fn encode_on<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &Binding,
    params: &LadderParams<T>,
    x: Var,
    plan: &CorruptionPlan<T>,
    mode: StatsMode,
) -> Result<EncoderPass<T>> {
    let (batch, in_width) = tape.value(x).shape();
    if in_width != params.input_width() {
        return Err(Error::dimension(
            "encode",
            format!("input {}x{}", batch, in_width),
            format!("model input width {}", params.input_width()),
        ));
    }
    plan.validate(params.widths(), batch)?;

    let layers = params.layers();
    let mut z = Vec::with_capacity(layers + 1);
    let mut h = Vec::with_capacity(layers + 1);
    let mut pres = Vec::with_capacity(layers);
    let mut stats = Vec::with_capacity(layers);

    let z0 = apply_corruption(tape, x, plan, 0);
    z.push(z0);
    h.push(z0);

    let mut logits = z0; // overwritten below; a ladder always has >= 1 layer
    for l in 1..=layers {
        let pre = tape.matmul(h[l - 1], binding.var(params.enc_w[l - 1]));
        pres.push(pre);
        let (normed, layer_stats) = match mode {
            StatsMode::TrainingBatch => tape.batch_norm(pre, T::from_f64(BN_EPS)),
            StatsMode::RunningAverages => {
                let s = stats_for_layer(params, l);
                let normed = tape.normalize_const(pre, &s.mean, &s.std);
                (normed, s)
            }
        };
        stats.push(layer_stats);
        let zt = apply_corruption(tape, normed, plan, l);
        z.push(zt);
        let shifted = tape.add_row(zt, binding.var(params.enc_beta[l - 1]));
        let scaled = tape.mul_row(shifted, binding.var(params.enc_gamma[l - 1]));
        if l == layers {
            logits = scaled;
            h.push(tape.softmax(scaled));
        } else {
            h.push(tape.relu(scaled));
        }
    }

    let probs = *h.last().expect("at least one layer");
    Ok(EncoderPass {
        z,
        h,
        pre: pres,
        stats,
        logits,
        probs,
    })
}

fn apply_corruption<T: Scalar>(tape: &mut Tape<T>, v: Var, plan: &CorruptionPlan<T>, l: usize) -> Var {
    let mut out = v;
    if let Some(noise) = &plan.noise[l] {
        out = tape.add_const(out, noise);
    }
    if let Some(inject) = &plan.inject[l] {
        out = tape.add_const(out, inject);
    }
    out
}

/// Re-runs the encoder from a given lateral activation at `layer` up to the
/// output distribution, reusing the plan's corruption for the layers above.
/// `start` plays the role of `z̃[layer]` (for `layer = 0`, the corrupted
/// input). This is how perturbed branches `p(y | ..., z̃ + r)` are built.
pub fn encode_from_on<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &Binding,
    params: &LadderParams<T>,
    layer: usize,
    start: Var,
    plan: &CorruptionPlan<T>,
    mode: StatsMode,
) -> Result<Var> {
    let layers = params.layers();
    if layer > layers {
        return Err(Error::Argument(format!(
            "encode_from layer {layer} out of range (model has layers 0..={layers})"
        )));
    }
    let expected = params.widths()[layer];
    if tape.value(start).cols() != expected {
        return Err(Error::dimension(
            "encode_from",
            format!("start width {}", tape.value(start).cols()),
            format!("layer {layer} width {expected}"),
        ));
    }

    let mut h = if layer == 0 {
        start
    } else {
        let shifted = tape.add_row(start, binding.var(params.enc_beta[layer - 1]));
        let scaled = tape.mul_row(shifted, binding.var(params.enc_gamma[layer - 1]));
        if layer == layers {
            return Ok(tape.softmax(scaled));
        }
        tape.relu(scaled)
    };

    for l in layer + 1..=layers {
        let pre = tape.matmul(h, binding.var(params.enc_w[l - 1]));
        let normed = match mode {
            StatsMode::TrainingBatch => tape.batch_norm(pre, T::from_f64(BN_EPS)).0,
            StatsMode::RunningAverages => {
                let s = stats_for_layer(params, l);
                tape.normalize_const(pre, &s.mean, &s.std)
            }
        };
        let zt = apply_corruption(tape, normed, plan, l);
        let shifted = tape.add_row(zt, binding.var(params.enc_beta[l - 1]));
        let scaled = tape.mul_row(shifted, binding.var(params.enc_gamma[l - 1]));
        h = if l == layers { tape.softmax(scaled) } else { tape.relu(scaled) };
    }
    Ok(h)
}

/// Tape-level trace of one decoder pass.
pub struct DecoderPass {
    /// Reconstructions `zhat[0..=L]` (input space at index 0).
    pub zhat: Vec<Var>,
    /// Batch-normalized vertical signals fed to each combinator.
    pub u: Vec<Var>,
}

/// Runs the decoder against a corrupted encoder pass: the top vertical
/// signal is the batch-normalized corrupted output distribution; each lower
/// layer batch-normalizes a linear projection of the reconstruction above,
/// then fuses it with that layer's lateral `z̃` through the combinator.
pub fn decode_on<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &Binding,
    params: &LadderParams<T>,
    corrupted: &EncoderPass<T>,
) -> DecoderPass {
    let layers = params.layers();
    let eps = T::from_f64(BN_EPS);
    let mut zhat = vec![None; layers + 1];
    let mut us = vec![None; layers + 1];

    let (u_top, _) = tape.batch_norm(corrupted.probs, eps);
    us[layers] = Some(u_top);
    zhat[layers] = Some(combinator_on(tape, binding, params, layers, corrupted.z[layers], u_top));

    for l in (0..layers).rev() {
        let above = zhat[l + 1].expect("filled by the previous iteration");
        let pre = tape.matmul(above, binding.var(params.dec_v[l]));
        let (u, _) = tape.batch_norm(pre, eps);
        us[l] = Some(u);
        zhat[l] = Some(combinator_on(tape, binding, params, l, corrupted.z[l], u));
    }

    DecoderPass {
        zhat: zhat.into_iter().map(|v| v.expect("all layers filled")).collect(),
        u: us.into_iter().map(|v| v.expect("all layers filled")).collect(),
    }
}

/// The per-unit denoising combinator (see module docs for the formula).
pub fn combinator_on<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &Binding,
    params: &LadderParams<T>,
    layer: usize,
    z_tilde: Var,
    u: Var,
) -> Var {
    let a = params.comb[layer].map(|id| binding.var(id));
    // mu(u) = a1 * sigmoid(a2 u + a3) + a4 u + a5
    let mu = {
        let lin = tape.mul_row(u, a[1]);
        let lin = tape.add_row(lin, a[2]);
        let sig = tape.sigmoid(lin);
        let left = tape.mul_row(sig, a[0]);
        let right = tape.mul_row(u, a[3]);
        let sum = tape.add(left, right);
        tape.add_row(sum, a[4])
    };
    // v(u) = a6 * sigmoid(a7 u + a8) + a9 u + a10
    let v = {
        let lin = tape.mul_row(u, a[6]);
        let lin = tape.add_row(lin, a[7]);
        let sig = tape.sigmoid(lin);
        let left = tape.mul_row(sig, a[5]);
        let right = tape.mul_row(u, a[8]);
        let sum = tape.add(left, right);
        tape.add_row(sum, a[9])
    };
    // zhat = (z̃ - mu) * v + mu
    let centered = tape.sub(z_tilde, mu);
    let scaled = tape.elem_mul(centered, v);
    tape.add(scaled, mu)
}

/// Layer-weighted reconstruction cost. For each layer with `lambda[l] > 0`,
/// renormalizes `zhat[l]` by the clean pass's batch statistics — kept
/// differentiable, so the frame of comparison is itself part of the
/// objective — and accumulates `lambda[l] * mean((zhat_bn - z)^2)`; the
/// layer-0 target is the clean input itself, compared unnormalized. The mean
/// is over all entries, i.e. per-example squared error divided by layer
/// width. Meant for training-mode passes, whose `pre` entries carry this
/// batch's statistics.
pub fn reconstruction_cost_on<T: Scalar>(
    tape: &mut Tape<T>,
    decoder: &DecoderPass,
    clean: &EncoderPass<T>,
    lambdas: &[T],
) -> Result<Var> {
    let layers = clean.z.len() - 1;
    if lambdas.len() != layers + 1 {
        return Err(Error::dimension(
            "reconstruction_cost",
            format!("{} lambdas", lambdas.len()),
            format!("{} layers", layers + 1),
        ));
    }
    if let Some(bad) = lambdas.iter().find(|&&l| l < T::zero()) {
        return Err(Error::Argument(format!(
            "reconstruction weights must be >= 0, got {bad}"
        )));
    }

    let mut total: Option<Var> = None;
    for l in 0..=layers {
        if lambdas[l] == T::zero() {
            continue;
        }
        let zhat_bn = if l == 0 {
            decoder.zhat[0]
        } else {
            tape.normalize_like(decoder.zhat[l], clean.pre[l - 1], T::from_f64(BN_EPS))
        };
        let diff = tape.sub(zhat_bn, clean.z[l]);
        let msq = tape.mean_sq(diff);
        let term = tape.scale(msq, lambdas[l]);
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Matrix::zeros(1, 1))))
}

// ---- value-level conveniences ------------------------------------------------

/// Value-level record of one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace<T: Scalar> {
    pub z: Vec<Matrix<T>>,
    pub h: Vec<Matrix<T>>,
    /// Pre-normalization linear outputs, index `l-1` for layer `l`.
    pub pre: Vec<Matrix<T>>,
    pub logits: Matrix<T>,
    pub probs: Matrix<T>,
    pub stats: Vec<BatchStats<T>>,
}

/// Runs one corrupted training-mode encoder pass and returns its values.
/// Noise is sampled from `rng` at scale `sigma`; `inject` optionally adds a
/// fixed perturbation per layer (shape-checked against the batch).
pub fn encode<T: Scalar>(
    params: &LadderParams<T>,
    x: &Matrix<T>,
    sigma: T,
    inject: Option<&[Option<Matrix<T>>]>,
    rng: &mut RngStream,
) -> Result<EncoderTrace<T>> {
    let mut plan = CorruptionPlan::sample(params.widths(), x.rows(), sigma, rng)?;
    if let Some(inject) = inject {
        if inject.len() != params.widths().len() {
            return Err(Error::dimension(
                "encode",
                format!("{} injection slots", inject.len()),
                format!("{} layers", params.widths().len()),
            ));
        }
        plan.inject = inject.to_vec();
    }
    encode_with_plan(params, x, &plan, StatsMode::TrainingBatch)
}

/// Value-level encoder pass with an explicit plan and statistics mode.
pub fn encode_with_plan<T: Scalar>(
    params: &LadderParams<T>,
    x: &Matrix<T>,
    plan: &CorruptionPlan<T>,
    mode: StatsMode,
) -> Result<EncoderTrace<T>> {
    let mut tape = Tape::new();
    let binding = bind(&mut tape, &params.set, false);
    let xv = tape.constant(x.clone());
    let pass = encode_on(&mut tape, &binding, params, xv, plan, mode)?;
    Ok(EncoderTrace {
        z: pass.z.iter().map(|&v| tape.value(v).clone()).collect(),
        h: pass.h.iter().map(|&v| tape.value(v).clone()).collect(),
        pre: pass.pre.iter().map(|&v| tape.value(v).clone()).collect(),
        logits: tape.value(pass.logits).clone(),
        probs: tape.value(pass.probs).clone(),
        stats: pass.stats,
    })
}

/// Class distribution for `x` on the clean evaluation path: no corruption,
/// running-average statistics.
pub fn predict<T: Scalar>(params: &LadderParams<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    let plan = CorruptionPlan::clean(params.layers());
    Ok(encode_with_plan(params, x, &plan, StatsMode::RunningAverages)?.probs)
}
