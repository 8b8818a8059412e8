//! Named trainable parameters and their attachment to tapes.
//!
//! A [`ParamSet`] owns every trainable matrix of a model together with its
//! accumulated gradient and Adam moment buffers. Models refer to parameters
//! by [`ParamId`]; serialization refers to them by name.
//!
//! To use parameters in a forward pass, [`bind`] them onto a tape, which
//! creates one leaf per parameter — tracked for training passes, untracked
//! for generation and evaluation passes (cloning a matrix onto the tape is an
//! `Arc` bump, so binding is cheap either way). After `backward`,
//! [`absorb_gradients`] moves the leaf gradients back into the set.

use super::matrix::{Matrix, Scalar};
use super::tape::{Gradients, Tape, Var};

/// Index of a parameter within its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// One trainable matrix with optimizer state.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Matrix<T>,
    /// Gradient accumulated since the last [`ParamSet::zero_grads`].
    pub grad: Matrix<T>,
    /// Adam first-moment estimate.
    pub m1: Matrix<T>,
    /// Adam second-moment estimate.
    pub m2: Matrix<T>,
    /// Number of optimizer steps applied (for bias correction).
    pub steps: u64,
}

/// Ordered collection of parameters. Order is creation order and is part of
/// the determinism contract (optimizer sweeps and serialization follow it).
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Scalar> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.by_name(&name).is_none(),
            "duplicate parameter name {name:?}"
        );
        let (r, c) = value.shape();
        self.params.push(Param {
            name,
            grad: Matrix::zeros(r, c),
            m1: Matrix::zeros(r, c),
            m2: Matrix::zeros(r, c),
            steps: 0,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Matrix::zeros(p.value.rows(), p.value.cols());
        }
    }
}

/// Tape leaves for each parameter of a set, in set order.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Puts every parameter's current value on the tape. `trainable` decides
/// whether the leaves are tracked.
pub fn bind<T: Scalar>(tape: &mut Tape<T>, set: &ParamSet<T>, trainable: bool) -> Binding {
    let vars = set
        .iter()
        .map(|p| {
            if trainable {
                tape.leaf(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            }
        })
        .collect();
    Binding { vars }
}

/// Adds the binding's leaf gradients into `set`'s accumulators. Parameters
/// that received no gradient (unused in this pass) are left untouched.
pub fn absorb_gradients<T: Scalar>(set: &mut ParamSet<T>, binding: &Binding, grads: &mut Gradients<T>) {
    for (idx, var) in binding.vars.iter().enumerate() {
        if let Some(g) = grads.take(*var) {
            set.params[idx].grad.add_assign(&g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_flow_back_into_the_set() {
        let mut set = ParamSet::<f64>::new();
        let w = set.add("w", Matrix::from_vec(1, 2, vec![2.0, -1.0]));

        let mut tape = Tape::new();
        let binding = bind(&mut tape, &set, true);
        // loss = mean of squares of w = (w0^2 + w1^2)/2
        let loss = tape.mean_sq(binding.var(w));
        let mut grads = tape.backward(loss);
        absorb_gradients(&mut set, &binding, &mut grads);
        // d/dw_i = w_i (2/2)
        assert_eq!(set.get(w).grad.as_slice(), &[2.0, -1.0]);

        // A second pass accumulates.
        let mut tape = Tape::new();
        let binding = bind(&mut tape, &set, true);
        let loss = tape.mean_sq(binding.var(w));
        let mut grads = tape.backward(loss);
        absorb_gradients(&mut set, &binding, &mut grads);
        assert_eq!(set.get(w).grad.as_slice(), &[4.0, -2.0]);

        set.zero_grads();
        assert_eq!(set.get(w).grad.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn untracked_binding_produces_no_gradients() {
        let mut set = ParamSet::<f64>::new();
        let w = set.add("w", Matrix::from_vec(1, 2, vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let binding = bind(&mut tape, &set, false);
        let loss = tape.mean_sq(binding.var(w));
        assert!(!tape.is_tracked(loss), "loss of constants is constant");
        let mut grads = tape.backward(loss);
        absorb_gradients(&mut set, &binding, &mut grads);
        assert_eq!(set.get(w).grad.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_are_rejected() {
        let mut set = ParamSet::<f64>::new();
        set.add("w", Matrix::zeros(1, 1));
        set.add("w", Matrix::zeros(1, 1));
    }
}
