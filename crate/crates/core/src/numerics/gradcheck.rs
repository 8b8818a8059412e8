//! Finite-difference verification of analytic gradients.
//!
//! [`grad_check`] compares the gradients produced by a tape's backward sweep
//! against central finite differences of the same loss, coordinate by
//! coordinate, across every parameter of a set. The loss builder must be a
//! *pure function* of the parameter values — all noise, perturbations and
//! reference distributions frozen beforehand — or the finite differences
//! measure a different function than the backward pass differentiated.
//!
//! Intended for `f64`: with a relative step of ~1e-5 the truncation error of
//! central differences sits around 1e-10, far below the 1e-4 acceptance
//! threshold, so a failure means a wrong backward formula rather than noise.

use super::matrix::{Matrix, Scalar};
use super::params::{absorb_gradients, Binding, ParamSet};
use super::tape::{Tape, Var};

/// Worst coordinate found by a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport<T: Scalar> {
    /// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_err: T,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic_at_worst: T,
    pub numeric_at_worst: T,
    pub coords_checked: usize,
}

/// Builds a loss over the given parameters. Returns the finished tape, the
/// binding used (so gradients can be attributed), and the scalar loss node.
pub trait LossBuilder<T: Scalar>: Fn(&ParamSet<T>) -> (Tape<T>, Binding, Var) {}
impl<T: Scalar, F: Fn(&ParamSet<T>) -> (Tape<T>, Binding, Var)> LossBuilder<T> for F {}

fn loss_value<T: Scalar>(build: &impl LossBuilder<T>, params: &ParamSet<T>) -> T {
    let (tape, _, loss) = build(params);
    tape.value(loss).get(0, 0)
}

/// Checks every coordinate of every parameter. `base_step` is scaled per
/// coordinate by `max(1, |x|)` to keep the relative perturbation sane for
/// large weights.
pub fn grad_check<T: Scalar>(
    params: &mut ParamSet<T>,
    build: impl LossBuilder<T>,
    base_step: T,
) -> GradCheckReport<T> {
    // Analytic pass.
    params.zero_grads();
    let (tape, binding, loss) = build(params);
    let mut grads = tape.backward(loss);
    absorb_gradients(params, &binding, &mut grads);
    let analytic: Vec<Matrix<T>> = params.iter().map(|p| p.grad.clone()).collect();

    let mut report = GradCheckReport {
        max_rel_err: T::zero(),
        worst_param: String::new(),
        worst_index: 0,
        analytic_at_worst: T::zero(),
        numeric_at_worst: T::zero(),
        coords_checked: 0,
    };

    let ids: Vec<_> = params.ids().collect();
    for (slot, id) in ids.iter().enumerate() {
        let coords = params.get(*id).value.len();
        for i in 0..coords {
            let original = params.get(*id).value.as_slice()[i];
            let h = base_step * T::one().max(original.abs());

            params.get_mut(*id).value.as_mut_slice()[i] = original + h;
            let plus = loss_value(&build, params);
            params.get_mut(*id).value.as_mut_slice()[i] = original - h;
            let minus = loss_value(&build, params);
            params.get_mut(*id).value.as_mut_slice()[i] = original;

            let numeric = (plus - minus) / (h + h);
            let a = analytic[slot].as_slice()[i];
            let scale = T::one().max(a.abs()).max(numeric.abs());
            let rel = (a - numeric).abs() / scale;
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = params.get(*id).name.clone();
                report.worst_index = i;
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::bind;
    use crate::numerics::rng::RngStream;

    #[test]
    fn quadratic_loss_checks_cleanly() {
        let mut rng = RngStream::new(3);
        let mut set = ParamSet::<f64>::new();
        set.add("w", rng.normal_matrix(3, 4, 1.0));
        let report = grad_check(
            &mut set,
            |p: &ParamSet<f64>| {
                let mut tape = Tape::new();
                let binding = bind(&mut tape, p, true);
                let w = binding.var(p.ids().next().unwrap());
                let loss = tape.mean_sq(w);
                (tape, binding, loss)
            },
            1e-5,
        );
        assert!(report.max_rel_err < 1e-9, "rel err {}", report.max_rel_err);
        assert_eq!(report.coords_checked, 12);
    }

    #[test]
    fn an_inconsistent_loss_builder_is_caught() {
        // Negative control for the checker itself. The honest tape API makes
        // it hard to produce a wrong gradient on purpose, so simulate one by
        // handing the analytic pass (the first call) a different function
        // than the finite-difference evaluations see.
        use std::cell::Cell;
        let calls = Cell::new(0usize);
        let mut set = ParamSet::<f64>::new();
        set.add("w", Matrix::from_vec(1, 2, vec![0.7, -1.3]));
        let report = grad_check(
            &mut set,
            |p: &ParamSet<f64>| {
                let n = calls.get();
                calls.set(n + 1);
                let mut tape = Tape::new();
                let binding = bind(&mut tape, p, true);
                let w = binding.var(p.ids().next().unwrap());
                let arg = if n == 0 { w } else { tape.scale(w, 1.1) };
                let loss = tape.mean_sq(arg);
                (tape, binding, loss)
            },
            1e-5,
        );
        assert!(
            report.max_rel_err > 1e-2,
            "checker failed to flag a 21% gradient discrepancy (rel err {})",
            report.max_rel_err
        );
    }
}
