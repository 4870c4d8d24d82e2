//! Named parameter storage, initialization, and tape binding.
//!
//! Parameters live outside any tape in a [`ParamStore`]. For each forward
//! pass, parameter values are copied onto the tape as leaves through a
//! [`Bindings`] record; after `backward`, [`Bindings::harvest`] copies the
//! leaf gradients back into the store where the optimizer reads them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter within its store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// One learnable tensor with its accumulated gradient.
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

/// Ordered collection of parameters. Order is creation order and is part of
/// the crate's determinism story: the optimizer and the checkpoint format
/// both walk parameters in this order.
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Register a tensor as a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {:?}", name)));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    /// Look up a parameter id by name.
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(S::zero());
        }
    }

    /// Add `delta * scale` into the stored gradient of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor<S>, scale: S) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.shape() != delta.shape() {
            return Err(Error::invalid(format!(
                "gradient shape {:?} does not match parameter {:?} of shape {:?}",
                delta.shape(),
                p.name,
                p.grad.shape()
            )));
        }
        p.grad
            .data_mut()
            .iter_mut()
            .zip(delta.data().iter())
            .for_each(|(g, &d)| *g += d * scale);
        Ok(())
    }
}

/// Uniform init on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
///
/// Draws are made in `f64` then converted, so the value stream for a given
/// seed is identical across scalar types.
pub fn uniform_init<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    assert!(fan_in > 0, "fan_in must be positive");
    let bound = (fan_in as f64).sqrt().recip();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64_c(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/product consistency")
}

/// Map from store parameters to tape leaves for one forward pass.
pub struct Bindings {
    pairs: Vec<(ParamId, Var)>,
}

impl Default for Bindings {
    fn default() -> Self {
        Self::new()
    }
}

impl Bindings {
    pub fn new() -> Self {
        Bindings { pairs: Vec::new() }
    }

    /// Copy a parameter's current value onto the tape and remember the pair.
    pub fn bind<S: Scalar>(
        &mut self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        id: ParamId,
    ) -> Result<Var> {
        let var = tape.leaf(store.get(id).value.clone())?;
        self.pairs.push((id, var));
        Ok(var)
    }

    /// Copy tape gradients back into the store, scaled (e.g. by 1/batch).
    /// Parameters whose leaves did not influence the loss are skipped.
    pub fn harvest<S: Scalar>(
        &self,
        grads: &Grads<S>,
        store: &mut ParamStore<S>,
        scale: S,
    ) -> Result<()> {
        for &(id, var) in &self.pairs {
            if let Some(g) = grads.wrt(var) {
                store.accumulate_grad(id, g, scale)?;
            }
        }
        Ok(())
    }
}
