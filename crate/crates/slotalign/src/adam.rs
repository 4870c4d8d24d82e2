//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// First/second moment estimates for one parameter.
#[derive(Clone)]
pub struct AdamSlot<S> {
    pub m: Tensor<S>,
    pub v: Tensor<S>,
}

/// Adam optimizer state. Hyperparameters are stored in `f64` so the update
/// rule is written once and converted per step.
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed steps; drives bias correction.
    step_count: u64,
    slots: Vec<AdamSlot<S>>,
}

impl<S: Scalar> Adam<S> {
    /// Optimizer over the given store with standard betas (0.9, 0.999).
    pub fn new(store: &ParamStore<S>, lr: f64) -> Self {
        let slots = store
            .iter()
            .map(|p| AdamSlot {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            })
            .collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step_count: 0, slots }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn slots(&self) -> &[AdamSlot<S>] {
        &self.slots
    }

    /// Restore optimizer state from a checkpoint.
    pub fn restore(&mut self, slots: Vec<AdamSlot<S>>, step_count: u64) -> Result<()> {
        if slots.len() != self.slots.len() {
            return Err(Error::invalid(format!(
                "restored slot count {} does not match {} parameters",
                slots.len(),
                self.slots.len()
            )));
        }
        for (restored, cur) in slots.iter().zip(self.slots.iter()) {
            if restored.m.shape() != cur.m.shape() {
                return Err(Error::invalid("restored optimizer slot shape mismatch"));
            }
        }
        self.slots = slots;
        self.step_count = step_count;
        Ok(())
    }

    /// Apply one update from the gradients currently accumulated in the
    /// store, then zero them. Parameter order is store order, so updates are
    /// deterministic.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        if store.len() != self.slots.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, store has {}",
                self.slots.len(),
                store.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = S::from_f64_c(self.beta1);
        let b2 = S::from_f64_c(self.beta2);
        let one = S::one();
        let eps = S::from_f64_c(self.eps);
        let bc1 = S::from_f64_c(1.0 - self.beta1.powi(t));
        let bc2 = S::from_f64_c(1.0 - self.beta2.powi(t));
        let lr = S::from_f64_c(self.lr);

        for (p, slot) in store.iter_mut().zip(self.slots.iter_mut()) {
            if p.value.shape() != slot.m.shape() {
                return Err(Error::invalid(format!(
                    "optimizer slot shape {:?} does not match parameter {:?}",
                    slot.m.shape(),
                    p.name
                )));
            }
            if !p.grad.all_finite() {
                return Err(Error::numeric(format!("non-finite gradient for {:?}", p.name)));
            }
            let value = p.value.data_mut();
            let grad = p.grad.data_mut();
            let m = slot.m.data_mut();
            let v = slot.v.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            grad.fill(S::zero());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimizing f(w) = 0.5 * |w|^2 (gradient = w) must drive w to the
    /// origin. 200 steps at lr 0.05 from w = (3, -2) lands within 1e-2.
    /// The bound was confirmed by running this exact recurrence separately.
    #[test]
    fn quadratic_bowl_converges() {
        let mut store = ParamStore::<f64>::new();
        let w = store
            .add("w", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap())
            .unwrap();
        let mut opt = Adam::new(&store, 0.05);
        for _ in 0..200 {
            let g = store.get(w).value.clone();
            store.accumulate_grad(w, &g, 1.0).unwrap();
            opt.step(&mut store).unwrap();
        }
        let norm: f64 = store.get(w).value.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-2, "final |w| = {}", norm);
        assert_eq!(opt.step_count(), 200);
    }

    #[test]
    fn gradients_are_zeroed_after_step() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::zeros(&[3])).unwrap();
        let mut opt = Adam::new(&store, 0.01);
        store
            .accumulate_grad(w, &Tensor::filled(&[3], 1.0), 1.0)
            .unwrap();
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // With bias correction, the very first step is close to lr in each
        // coordinate regardless of gradient magnitude.
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_vec(&[1], vec![0.0]).unwrap()).unwrap();
        let mut opt = Adam::new(&store, 0.1);
        store
            .accumulate_grad(w, &Tensor::from_vec(&[1], vec![1234.0]).unwrap(), 1.0)
            .unwrap();
        opt.step(&mut store).unwrap();
        let moved = store.get(w).value.data()[0].abs();
        assert!((moved - 0.1).abs() < 1e-6, "moved {}", moved);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::zeros(&[1])).unwrap();
        let mut opt = Adam::new(&store, 0.01);
        store.get_mut(w).grad.data_mut()[0] = f64::NAN;
        assert!(opt.step(&mut store).is_err());
    }
}
