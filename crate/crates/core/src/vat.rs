//! Virtual adversarial machinery: power iteration for the locally most
//! damaging perturbation direction, perturbation generation at the input or
//! any encoder layer, and the resulting consistency costs.
//!
//! The adversarial direction maximizes, to second order, the divergence
//! `KL(p(y|z) || p(y|z + r))` over perturbations of bounded size. Its
//! dominant-curvature direction is found by power iteration on the
//! divergence's Hessian, each matrix-vector product realized as one gradient
//! evaluation at a small finite-difference probe `xi * d`. Generation is
//! gradient-isolated: the model's parameters enter probe passes as
//! constants, so no training gradient ever flows through the search.

use crate::error::{Error, Result};
use crate::ladder::{encode_from_on, CorruptionPlan, EncoderTrace, LadderParams, StatsMode};
use crate::numerics::{bind, Matrix, RngStream, Scalar, Tape};

/// Norm that shapes the final perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbNorm {
    /// `r = epsilon * d` with `d` unit per sample.
    L2,
    /// `r = epsilon * sign(d)`, every component at magnitude epsilon.
    LInf,
}

/// Settings for virtual adversarial generation.
#[derive(Clone, Debug)]
pub struct VatSettings<T: Scalar> {
    /// Per-layer perturbation radii; index 0 is the input.
    pub epsilon: Vec<T>,
    /// Per-layer cost weights.
    pub alpha: Vec<T>,
    /// Finite-difference probe scale.
    pub xi: T,
    /// Power iteration count K.
    pub power_iters: usize,
    /// Shape of the final perturbation.
    pub norm: PerturbNorm,
}

impl<T: Scalar> VatSettings<T> {
    /// Settings with radius `epsilon` at the input only, everything else at
    /// the defaults used throughout the experiments: alpha 1, xi 1e-6, one
    /// power iteration.
    pub fn input_only(epsilon: T, norm: PerturbNorm) -> Self {
        VatSettings {
            epsilon: vec![epsilon],
            alpha: vec![T::one()],
            xi: T::from_f64(1e-6),
            power_iters: 1,
            norm,
        }
    }

    /// Per-layer radii with unit weights and default probe settings.
    pub fn layerwise(epsilon: Vec<T>, norm: PerturbNorm) -> Self {
        let alpha = vec![T::one(); epsilon.len()];
        VatSettings { epsilon, alpha, xi: T::from_f64(1e-6), power_iters: 1, norm }
    }

    /// Radius at `layer`, zero when the vector is shorter.
    pub fn epsilon_at(&self, layer: usize) -> T {
        self.epsilon.get(layer).copied().unwrap_or_else(T::zero)
    }

    /// Weight at `layer`, zero when the vector is shorter.
    pub fn alpha_at(&self, layer: usize) -> T {
        self.alpha.get(layer).copied().unwrap_or_else(T::zero)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.epsilon.iter().find(|&&e| e < T::zero()) {
            return Err(Error::Argument(format!("epsilon must be >= 0, got {bad}")));
        }
        if let Some(bad) = self.alpha.iter().find(|&&a| a < T::zero()) {
            return Err(Error::Argument(format!("alpha must be >= 0, got {bad}")));
        }
        if !(self.xi > T::zero()) {
            return Err(Error::Argument(format!("xi must be > 0, got {}", self.xi)));
        }
        if self.power_iters == 0 {
            return Err(Error::Argument("power_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Output of [`power_iteration`].
#[derive(Clone, Debug)]
pub struct PowerIterationResult<T: Scalar> {
    /// Unit direction per sample (rows where every gradient probe vanished
    /// keep their random initialization).
    pub direction: Matrix<T>,
    /// Rows whose final gradient probe was exactly zero.
    pub degenerate_rows: Vec<usize>,
}

/// Output of [`vadv_perturbation`].
#[derive(Clone, Debug)]
pub struct PerturbationResult<T: Scalar> {
    /// Unit direction per sample, before norm shaping.
    pub direction: Matrix<T>,
    /// The perturbation: `epsilon * d` (L2) or `epsilon * sign(d)` (Linf).
    pub r_vadv: Matrix<T>,
    /// Mean divergence the perturbation achieves.
    pub divergence_value: T,
    /// Rows where the search degenerated to the random initialization.
    pub degenerate_rows: Vec<usize>,
}

/// Normalizes rows of `g` to unit L2 norm; rows with zero norm instead copy
/// the corresponding row of `previous` and are reported.
fn normalize_or_keep<T: Scalar>(g: &Matrix<T>, previous: &Matrix<T>) -> (Matrix<T>, Vec<usize>) {
    let (n, m) = g.shape();
    let mut data = Vec::with_capacity(n * m);
    let mut degenerate = Vec::new();
    for (i, row) in g.rows_iter().enumerate() {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() {
            data.extend(row.iter().map(|&v| v / norm));
        } else {
            degenerate.push(i);
            data.extend_from_slice(previous.row(i));
        }
    }
    (Matrix::from_vec(n, m, data), degenerate)
}

/// Finite-difference power iteration: starting from a random unit direction
/// per sample, repeatedly evaluates the divergence gradient at the probe
/// `xi * d` and renormalizes. `grad_at` must return the gradient of a
/// divergence that is zero (and has zero gradient) at `r = 0`, so the probe
/// gradient approximates a Hessian-vector product.
pub fn power_iteration<T: Scalar>(
    rows: usize,
    cols: usize,
    power_iters: usize,
    xi: T,
    mut grad_at: impl FnMut(&Matrix<T>) -> Matrix<T>,
    rng: &mut RngStream,
) -> PowerIterationResult<T> {
    let init = rng.normal_matrix(rows, cols, T::one());
    let (mut d, _) = normalize_or_keep(&init, &init);
    let mut degenerate = Vec::new();
    for _ in 0..power_iters {
        let g = grad_at(&d.scale(xi));
        assert_eq!(g.shape(), (rows, cols), "gradient shape drifted in power iteration");
        let (next, dgn) = normalize_or_keep(&g, &d);
        d = next;
        degenerate = dgn;
    }
    PowerIterationResult { direction: d, degenerate_rows: degenerate }
}

fn shape_perturbation<T: Scalar>(direction: &Matrix<T>, epsilon: T, norm: PerturbNorm) -> Matrix<T> {
    match norm {
        PerturbNorm::L2 => direction.scale(epsilon),
        PerturbNorm::LInf => direction.map(|v| {
            if v > T::zero() {
                epsilon
            } else if v < T::zero() {
                -epsilon
            } else {
                T::zero()
            }
        }),
    }
}

/// Mean `KL(p_ref || p(y | z_base + r at layer))` along the model, reusing
/// the plan's corruption above the attach layer. No gradients.
fn divergence_at<T: Scalar>(
    params: &LadderParams<T>,
    layer: usize,
    z_base: &Matrix<T>,
    p_ref: &Matrix<T>,
    plan: &CorruptionPlan<T>,
    mode: StatsMode,
    r: &Matrix<T>,
) -> Result<T> {
    let mut tape = Tape::new();
    let binding = bind(&mut tape, &params.set, false);
    let start = tape.constant(z_base.add(r));
    let probs = encode_from_on(&mut tape, &binding, params, layer, start, plan, mode)?;
    crate::numerics::ops::kl_divergence(p_ref, tape.value(probs))
}

/// Generates the virtual adversarial perturbation against `z_base` (the
/// lateral activation at `layer`; the corrupted input for layer 0). The
/// reference distribution `p_ref` is a constant; corruption above the attach
/// layer is frozen in `plan`, so both probe passes of one power step see
/// identical noise. Model parameters receive no gradients. `epsilon = 0`
/// short-circuits to a zero perturbation without drawing randomness.
pub fn vadv_perturbation<T: Scalar>(
    params: &LadderParams<T>,
    layer: usize,
    z_base: &Matrix<T>,
    p_ref: &Matrix<T>,
    plan: &CorruptionPlan<T>,
    mode: StatsMode,
    settings: &VatSettings<T>,
    rng: &mut RngStream,
) -> Result<PerturbationResult<T>> {
    settings.validate()?;
    let (rows, cols) = z_base.shape();
    let epsilon = settings.epsilon_at(layer);
    if epsilon == T::zero() {
        return Ok(PerturbationResult {
            direction: Matrix::zeros(rows, cols),
            r_vadv: Matrix::zeros(rows, cols),
            divergence_value: T::zero(),
            degenerate_rows: Vec::new(),
        });
    }

    let mut probe_error = None;
    let power = power_iteration(
        rows,
        cols,
        settings.power_iters,
        settings.xi,
        |probe| {
            let attempt = (|| -> Result<Matrix<T>> {
                let mut tape = Tape::new();
                let binding = bind(&mut tape, &params.set, false);
                let r = tape.leaf(probe.clone());
                let start = tape.add_const(r, z_base);
                let probs = encode_from_on(&mut tape, &binding, params, layer, start, plan, mode)?;
                let loss = tape.kl_mean(p_ref, probs);
                let mut grads = tape.backward(loss);
                Ok(grads.take(r).expect("probe leaf is tracked"))
            })();
            match attempt {
                Ok(g) => g,
                Err(e) => {
                    probe_error = Some(e);
                    Matrix::zeros(rows, cols)
                }
            }
        },
        rng,
    );
    if let Some(e) = probe_error {
        return Err(e);
    }

    let r_vadv = shape_perturbation(&power.direction, epsilon, settings.norm);
    let divergence_value = divergence_at(params, layer, z_base, p_ref, plan, mode, &r_vadv)?;
    Ok(PerturbationResult {
        direction: power.direction,
        r_vadv,
        divergence_value,
        degenerate_rows: power.degenerate_rows,
    })
}

/// Input-space virtual adversarial cost: generates the perturbation at layer
/// 0 against the trace's own output distribution and returns the mean
/// divergence it achieves.
pub fn vadv_cost<T: Scalar>(
    params: &LadderParams<T>,
    trace: &EncoderTrace<T>,
    plan: &CorruptionPlan<T>,
    mode: StatsMode,
    settings: &VatSettings<T>,
    rng: &mut RngStream,
) -> Result<T> {
    let result = vadv_perturbation(params, 0, &trace.z[0], &trace.probs, plan, mode, settings, rng)?;
    Ok(result.divergence_value)
}

/// Layer-wise virtual adversarial cost along a corrupted pass:
/// `sum_l alpha[l] * KL(p_ref || p(y | z[l] + r_vadv[l]))`, each layer's
/// perturbation generated independently (indexed substream per layer).
/// Layers with `alpha = 0` or `epsilon = 0` contribute nothing and are
/// skipped outright.
pub fn layerwise_vadv_cost<T: Scalar>(
    params: &LadderParams<T>,
    trace: &EncoderTrace<T>,
    plan: &CorruptionPlan<T>,
    mode: StatsMode,
    settings: &VatSettings<T>,
    rng: &RngStream,
) -> Result<T> {
    settings.validate()?;
    let mut total = T::zero();
    for layer in 0..trace.z.len() {
        let alpha = settings.alpha_at(layer);
        if alpha == T::zero() || settings.epsilon_at(layer) == T::zero() {
            continue;
        }
        let mut layer_rng = rng.substream_indexed("vadv-init", layer as u64);
        let result = vadv_perturbation(
            params,
            layer,
            &trace.z[layer],
            &trace.probs,
            plan,
            mode,
            settings,
            &mut layer_rng,
        )?;
        total = total + alpha * result.divergence_value;
    }
    Ok(total)
}
