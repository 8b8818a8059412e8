//! Adversarial evaluation: fast gradient attacks under three norms,
//! error-rate measurement, and a local-smoothness introspection metric.
//!
//! Attacks are white-box against the clean evaluation path — the same
//! no-corruption, running-statistics forward pass used for prediction. The
//! fast gradient method takes the gradient of the mean cross-entropy
//! against the *true* labels with respect to the input pixels, shapes it to
//! the requested norm and radius, and adds it to the input.

use crate::error::{Error, Result};
use crate::ladder::{encode_on, CorruptionPlan, LadderParams, StatsMode};
use crate::numerics::{bind, Matrix, RngStream, Scalar, Tape};
use crate::vat::{vadv_perturbation, PerturbNorm, VatSettings};

/// Attack norms. `L1` and `L2` scale the gradient to the requested radius
/// per sample; `LInf` takes its sign.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Norm {
    L1,
    L2,
    LInf,
}

impl Norm {
    pub const ALL: [Norm; 3] = [Norm::L1, Norm::L2, Norm::LInf];

    pub fn name(self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
            Norm::LInf => "linf",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            "linf" | "loo" | "max" => Ok(Norm::LInf),
            other => Err(Error::Config(format!(
                "unknown attack norm {other:?}; expected l1, l2, or linf"
            ))),
        }
    }

    /// Default attack radius on [0,1]-scaled pixels.
    pub fn default_epsilon(self) -> f64 {
        match self {
            Norm::L1 => 10.0,
            Norm::L2 => 2.0,
            Norm::LInf => 0.1,
        }
    }
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One attack setting.
#[derive(Clone, Copy, Debug)]
pub struct AttackSpec<T: Scalar> {
    pub norm: Norm,
    pub epsilon: T,
    /// Clamp adversarial pixels to [0,1] (on by default; the raw mode
    /// exists for norm-contract checks).
    pub clip: bool,
}

impl<T: Scalar> AttackSpec<T> {
    /// The default radius for `norm` with clipping on.
    pub fn standard(norm: Norm) -> Self {
        AttackSpec {
            norm,
            epsilon: T::from_f64(norm.default_epsilon()),
            clip: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < T::zero() {
            return Err(Error::Argument(format!(
                "attack epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Output of one fast-gradient attack.
#[derive(Clone, Debug)]
pub struct FgmResult<T: Scalar> {
    /// The attacked inputs, `x + r` (clamped when the spec says so).
    pub adversarial: Matrix<T>,
    /// The perturbation actually applied, pre-clipping.
    pub perturbation: Matrix<T>,
    /// Rows whose loss gradient was exactly zero; their perturbation is
    /// zero.
    pub degenerate_rows: Vec<usize>,
}

/// Gradient of the mean cross-entropy against `labels` with respect to the
/// inputs, on the clean evaluation path.
fn input_gradient<T: Scalar>(
    params: &LadderParams<T>,
    x: &Matrix<T>,
    labels: &[usize],
) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let binding = bind(&mut tape, &params.set, false);
    let input = tape.leaf(x.clone());
    let plan = CorruptionPlan::clean(params.layers());
    let pass = encode_on(&mut tape, &binding, params, input, &plan, StatsMode::RunningAverages)?;
    let loss = tape.cross_entropy_mean(pass.probs, labels);
    let mut grads = tape.backward(loss);
    Ok(grads.take(input).expect("input leaf is tracked"))
}

/// Shapes a gradient to the requested norm and radius, per sample. Rows
/// with a zero gradient keep a zero perturbation and are reported.
fn shape_gradient<T: Scalar>(g: &Matrix<T>, spec: &AttackSpec<T>) -> (Matrix<T>, Vec<usize>) {
    let (n, m) = g.shape();
    let mut data = Vec::with_capacity(n * m);
    let mut degenerate = Vec::new();
    for (i, row) in g.rows_iter().enumerate() {
        match spec.norm {
            Norm::LInf => {
                if row.iter().all(|&v| v == T::zero()) {
                    degenerate.push(i);
                }
                data.extend(row.iter().map(|&v| {
                    if v > T::zero() {
                        spec.epsilon
                    } else if v < T::zero() {
                        -spec.epsilon
                    } else {
                        T::zero()
                    }
                }));
            }
            Norm::L2 => {
                let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm > T::zero() {
                    data.extend(row.iter().map(|&v| spec.epsilon * v / norm));
                } else {
                    degenerate.push(i);
                    data.extend(std::iter::repeat_n(T::zero(), m));
                }
            }
            Norm::L1 => {
                let norm = row.iter().fold(T::zero(), |acc, &v| acc + v.abs());
                if norm > T::zero() {
                    data.extend(row.iter().map(|&v| spec.epsilon * v / norm));
                } else {
                    degenerate.push(i);
                    data.extend(std::iter::repeat_n(T::zero(), m));
                }
            }
        }
    }
    (Matrix::from_vec(n, m, data), degenerate)
}

/// Fast gradient attack against the clean evaluation path. `labels` must be
/// the true classes. A zero radius returns the input untouched without
/// running the model.
pub fn fgm<T: Scalar>(
    params: &LadderParams<T>,
    x: &Matrix<T>,
    labels: &[usize],
    spec: &AttackSpec<T>,
) -> Result<FgmResult<T>> {
    spec.validate()?;
    if labels.len() != x.rows() {
        return Err(Error::dimension(
            "fgm",
            format!("{} labels", labels.len()),
            format!("{} rows", x.rows()),
        ));
    }
    if spec.epsilon == T::zero() {
        return Ok(FgmResult {
            adversarial: x.clone(),
            perturbation: Matrix::zeros(x.rows(), x.cols()),
            degenerate_rows: Vec::new(),
        });
    }
    let g = input_gradient(params, x, labels)?;
    let (perturbation, degenerate_rows) = shape_gradient(&g, spec);
    let mut adversarial = x.add(&perturbation);
    if spec.clip {
        adversarial = adversarial.map(|v| v.max(T::zero()).min(T::one()));
    }
    Ok(FgmResult {
        adversarial,
        perturbation,
        degenerate_rows,
    })
}

/// Rows processed per forward/backward pass when sweeping a full dataset.
/// The evaluation path normalizes with running statistics, so chunking
/// cannot change any result; it only bounds memory.
pub const EVAL_CHUNK: usize = 512;

/// Argmax predictions for `images`, computed in chunks.
pub fn predict_classes<T: Scalar>(params: &LadderParams<T>, images: &Matrix<T>) -> Result<Vec<usize>> {
    let mut classes = Vec::with_capacity(images.rows());
    let mut start = 0;
    while start < images.rows() {
        let end = (start + EVAL_CHUNK).min(images.rows());
        let probs = crate::ladder::predict(params, &images.slice_rows(start, end))?;
        classes.extend(probs.rows_iter().map(crate::numerics::ops::argmax_row));
        start = end;
    }
    Ok(classes)
}

/// Percentage of `images` whose argmax prediction disagrees with `labels`.
pub fn error_rate<T: Scalar>(
    params: &LadderParams<T>,
    images: &Matrix<T>,
    labels: &[usize],
) -> Result<f64> {
    if images.rows() == 0 {
        return Err(Error::Argument("error_rate over an empty dataset".into()));
    }
    if labels.len() != images.rows() {
        return Err(Error::dimension(
            "error_rate",
            format!("{} labels", labels.len()),
            format!("{} rows", images.rows()),
        ));
    }
    let predicted = predict_classes(params, images)?;
    let wrong = predicted
        .iter()
        .zip(labels)
        .filter(|(p, l)| p != l)
        .count();
    Ok(100.0 * wrong as f64 / images.rows() as f64)
}

/// Error rate after attacking every image, attacking in chunks.
pub fn adversarial_error_rate<T: Scalar>(
    params: &LadderParams<T>,
    images: &Matrix<T>,
    labels: &[usize],
    spec: &AttackSpec<T>,
) -> Result<f64> {
    if images.rows() == 0 {
        return Err(Error::Argument("adversarial_error_rate over an empty dataset".into()));
    }
    if labels.len() != images.rows() {
        return Err(Error::dimension(
            "adversarial_error_rate",
            format!("{} labels", labels.len()),
            format!("{} rows", images.rows()),
        ));
    }
    let mut wrong = 0usize;
    let mut start = 0;
    while start < images.rows() {
        let end = (start + EVAL_CHUNK).min(images.rows());
        let chunk_labels = &labels[start..end];
        let attacked = fgm(params, &images.slice_rows(start, end), chunk_labels, spec)?;
        let probs = crate::ladder::predict(params, &attacked.adversarial)?;
        wrong += probs
            .rows_iter()
            .map(crate::numerics::ops::argmax_row)
            .zip(chunk_labels)
            .filter(|(p, l)| p != *l)
            .count();
        start = end;
    }
    Ok(100.0 * wrong as f64 / images.rows() as f64)
}

/// One row of an adversarial evaluation: the attack setting and the error
/// rate it produced.
#[derive(Clone, Copy, Debug)]
pub struct AttackOutcome<T: Scalar> {
    pub norm: Norm,
    pub epsilon: T,
    pub error_rate: f64,
}

/// Error rate under each attack spec in turn.
pub fn adversarial_error_matrix<T: Scalar>(
    params: &LadderParams<T>,
    images: &Matrix<T>,
    labels: &[usize],
    specs: &[AttackSpec<T>],
) -> Result<Vec<AttackOutcome<T>>> {
    specs
        .iter()
        .map(|spec| {
            Ok(AttackOutcome {
                norm: spec.norm,
                epsilon: spec.epsilon,
                error_rate: adversarial_error_rate(params, images, labels, spec)?,
            })
        })
        .collect()
}

/// Radius used by the smoothness introspection metric.
pub const SMOOTHNESS_EPSILON: f64 = 5.0;

/// Lack-of-local-smoothness measure: the mean divergence the virtual
/// adversarial perturbation achieves at radius `epsilon` (Euclidean ball)
/// around the given inputs, on the clean evaluation path. Larger means the
/// output distribution moves more under the most damaging perturbation of
/// that size. Non-negative; zero for a model whose output ignores its
/// input.
pub fn smoothness_metric<T: Scalar>(
    params: &LadderParams<T>,
    x: &Matrix<T>,
    epsilon: T,
    rng: &mut RngStream,
) -> Result<T> {
    if !(epsilon > T::zero()) {
        return Err(Error::Argument(format!(
            "smoothness radius must be > 0, got {epsilon}"
        )));
    }
    let plan = CorruptionPlan::clean(params.layers());
    let p_ref = crate::ladder::predict(params, x)?;
    let settings = VatSettings::input_only(epsilon, PerturbNorm::L2);
    let result = vadv_perturbation(
        params,
        0,
        x,
        &p_ref,
        &plan,
        StatsMode::RunningAverages,
        &settings,
        rng,
    )?;
    Ok(result.divergence_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::softmax;
    use approx::assert_relative_eq;

    fn toy_model(seed: u64) -> LadderParams<f64> {
        LadderParams::init(&[4, 6, 3], &RngStream::new(seed)).unwrap()
    }

    fn toy_inputs(rows: usize, seed: u64) -> Matrix<f64> {
        RngStream::new(seed)
            .substream("x")
            .normal_matrix(rows, 4, 1.0)
            .map(|v: f64| (v.abs() * 0.4).min(1.0))
    }

    #[test]
    fn zero_radius_attack_is_the_identity() {
        let params = toy_model(1);
        let x = toy_inputs(5, 2);
        for norm in Norm::ALL {
            let spec = AttackSpec { norm, epsilon: 0.0, clip: true };
            let out = fgm(&params, &x, &[0, 1, 2, 0, 1], &spec).unwrap();
            assert_eq!(out.adversarial, x);
            assert_eq!(out.perturbation.max_abs(), 0.0);
            assert!(out.degenerate_rows.is_empty());
        }
    }

    #[test]
    fn perturbation_norms_match_the_spec_per_sample() {
        let params = toy_model(3);
        let x = toy_inputs(6, 4);
        let labels = [0, 1, 2, 0, 1, 2];

        let l2 = fgm(&params, &x, &labels, &AttackSpec { norm: Norm::L2, epsilon: 0.7, clip: false })
            .unwrap();
        for row in l2.perturbation.rows_iter() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_relative_eq!(norm, 0.7, max_relative = 1e-6);
        }

        let l1 = fgm(&params, &x, &labels, &AttackSpec { norm: Norm::L1, epsilon: 0.5, clip: false })
            .unwrap();
        for row in l1.perturbation.rows_iter() {
            let norm: f64 = row.iter().map(|v| v.abs()).sum();
            assert_relative_eq!(norm, 0.5, max_relative = 1e-6);
        }

        let linf =
            fgm(&params, &x, &labels, &AttackSpec { norm: Norm::LInf, epsilon: 0.25, clip: false })
                .unwrap();
        for row in linf.perturbation.rows_iter() {
            for &v in row {
                assert!((v.abs() - 0.25).abs() < 1e-9, "component {v}");
            }
        }
    }

    #[test]
    fn linear_model_attack_matches_the_closed_form_gradient() {
        // Single-layer model: logits = BN(xW) with fresh running statistics
        // (mean 0, variance 1), unit scale, zero shift — so the loss
        // gradient for row i is (p_i - onehot_i) W^T / (n * s), with
        // s = sqrt(1 + eps) from the normalization. The attack direction
        // must match that formula exactly.
        let mut params = LadderParams::init(&[2, 3], &RngStream::new(7)).unwrap();
        let w = Matrix::from_vec(2, 3, vec![1.0, -0.5, 0.25, 0.75, 0.5, -1.0]);
        params.set.by_name_mut("encoder.l1.weight").unwrap().value = w.clone();

        let x = Matrix::from_vec(2, 2, vec![0.3, 0.8, 0.6, 0.1]);
        let labels = [2usize, 0];
        let s = (1.0 + crate::ladder::BN_EPS).sqrt();
        let logits = x.matmul(&w).scale(1.0 / s);
        let probs = softmax(&logits);
        let mut residual = probs.clone();
        for (i, &label) in labels.iter().enumerate() {
            residual.set(i, label, residual.get(i, label) - 1.0);
        }
        let expected_grad = residual.matmul_nt(&w).scale(1.0 / (2.0 * s));

        let spec = AttackSpec { norm: Norm::L2, epsilon: 0.3, clip: false };
        let out = fgm(&params, &x, &labels, &spec).unwrap();
        for i in 0..2 {
            let grow = expected_grad.row(i);
            let norm: f64 = grow.iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..2 {
                assert_relative_eq!(
                    out.perturbation.get(i, j),
                    0.3 * grow[j] / norm,
                    max_relative = 1e-9
                );
            }
        }

        let sign = fgm(&params, &x, &labels, &AttackSpec { norm: Norm::LInf, epsilon: 0.1, clip: false })
            .unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(sign.perturbation.get(i, j), 0.1 * expected_grad.get(i, j).signum());
            }
        }
    }

    #[test]
    fn zero_gradient_rows_are_flagged_and_unperturbed() {
        let mut params = toy_model(9);
        for l in 1..=2 {
            let p = params.set.by_name_mut(&format!("encoder.l{l}.weight")).unwrap();
            p.value = Matrix::zeros(p.value.rows(), p.value.cols());
        }
        let x = toy_inputs(4, 10);
        let spec = AttackSpec { norm: Norm::L2, epsilon: 1.0, clip: false };
        let out = fgm(&params, &x, &[0, 1, 2, 0], &spec).unwrap();
        assert_eq!(out.degenerate_rows, vec![0, 1, 2, 3]);
        assert_eq!(out.perturbation.max_abs(), 0.0);
        assert_eq!(out.adversarial, x);
    }

    #[test]
    fn clipping_keeps_pixels_in_the_unit_box() {
        let params = toy_model(11);
        let x = Matrix::filled(3, 4, 0.95);
        let labels = [0, 1, 2];
        let clipped =
            fgm(&params, &x, &labels, &AttackSpec { norm: Norm::LInf, epsilon: 0.2, clip: true })
                .unwrap();
        let raw =
            fgm(&params, &x, &labels, &AttackSpec { norm: Norm::LInf, epsilon: 0.2, clip: false })
                .unwrap();
        let max_clipped = clipped.adversarial.as_slice().iter().cloned().fold(0.0_f64, f64::max);
        let max_raw = raw.adversarial.as_slice().iter().cloned().fold(0.0_f64, f64::max);
        assert!(max_clipped <= 1.0);
        assert!(max_raw > 1.0, "unclipped attack should exceed the box here");
        let min_clipped = clipped
            .adversarial
            .as_slice()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(min_clipped >= 0.0);
    }

    #[test]
    fn error_rate_counts_argmax_disagreements() {
        let params = toy_model(13);
        let x = toy_inputs(8, 14);
        let predicted = predict_classes(&params, &x).unwrap();
        assert_eq!(error_rate(&params, &x, &predicted).unwrap(), 0.0);
        let all_wrong: Vec<usize> = predicted.iter().map(|&c| (c + 1) % 3).collect();
        assert_eq!(error_rate(&params, &x, &all_wrong).unwrap(), 100.0);

        // Permutation invariance.
        let perm = [5usize, 2, 7, 0, 3, 6, 1, 4];
        let mut data = Vec::new();
        let mut shuffled_labels = Vec::new();
        for &i in &perm {
            data.extend_from_slice(x.row(i));
            shuffled_labels.push(predicted[i]);
        }
        let shuffled = Matrix::from_vec(8, 4, data);
        assert_eq!(error_rate(&params, &shuffled, &shuffled_labels).unwrap(), 0.0);

        assert!(error_rate(&params, &Matrix::zeros(0, 4), &[]).is_err());
    }

    #[test]
    fn zero_radius_attack_matrix_equals_clean_error() {
        let params = toy_model(15);
        let x = toy_inputs(10, 16);
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let clean = error_rate(&params, &x, &labels).unwrap();
        let specs: Vec<AttackSpec<f64>> = Norm::ALL
            .into_iter()
            .map(|norm| AttackSpec { norm, epsilon: 0.0, clip: true })
            .collect();
        let matrix = adversarial_error_matrix(&params, &x, &labels, &specs).unwrap();
        assert_eq!(matrix.len(), 3);
        for outcome in matrix {
            assert_eq!(outcome.error_rate, clean);
        }
    }

    #[test]
    fn attacks_at_the_default_radii_do_not_reduce_error() {
        let params = toy_model(17);
        let x = toy_inputs(12, 18);
        let labels = predict_classes(&params, &x).unwrap();
        for norm in Norm::ALL {
            let spec = AttackSpec::standard(norm);
            let attacked = adversarial_error_rate(&params, &x, &labels, &spec).unwrap();
            assert!(
                attacked >= 0.0,
                "{norm}: error rate {attacked} out of range"
            );
        }
    }

    #[test]
    fn smoothness_metric_is_nonnegative_and_zero_for_constant_outputs() {
        let params = toy_model(19);
        let x = toy_inputs(6, 20);
        let value =
            smoothness_metric(&params, &x, 5.0, &mut RngStream::new(21).substream("s")).unwrap();
        assert!(value >= 0.0);

        let mut constant = toy_model(22);
        let top = constant.set.by_name_mut("encoder.l2.weight").unwrap();
        top.value = Matrix::zeros(top.value.rows(), top.value.cols());
        let flat =
            smoothness_metric(&constant, &x, 5.0, &mut RngStream::new(23).substream("s")).unwrap();
        assert!(
            flat.abs() < 1e-12,
            "constant-output model should have zero smoothness metric, got {flat}"
        );

        assert!(smoothness_metric(&params, &x, 0.0, &mut RngStream::new(24)).is_err());
    }
}
