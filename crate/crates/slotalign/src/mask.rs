//! Boolean attention masks.
//!
//! A mask answers "may query position i attend to key position j". Kernels
//! realize it additively: disallowed pairs get a large negative bias before
//! the row softmax, which underflows their weight to exactly zero.

use crate::error::{Error, Result};
use crate::scalar::{mask_bias, Scalar};
use crate::tensor::Tensor;

/// Dense `n x n` allow matrix for self-attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    n: usize,
    allow: Vec<bool>,
}

impl AttnMask {
    /// Build from a predicate `allow(i, j)`.
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("mask size must be positive"));
        }
        let mut allow = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                allow[i * n + j] = f(i, j);
            }
        }
        let m = AttnMask { n, allow };
        m.validate()?;
        Ok(m)
    }

    /// Standard causal mask: position i sees positions `0..=i`.
    pub fn full_causal(n: usize) -> Result<Self> {
        Self::from_fn(n, |i, j| j <= i)
    }

    /// Causal window of width `w` tokens: i sees j iff `i - w < j <= i`.
    /// Each position attends to itself and at most `w - 1` predecessors.
    pub fn windowed(n: usize, w: usize) -> Result<Self> {
        if w == 0 {
            return Err(Error::invalid("window width must be positive"));
        }
        Self::from_fn(n, move |i, j| j <= i && i - j < w)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.n + j]
    }

    /// Every row must keep at least one allowed key, otherwise its softmax
    /// would be over an empty set.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            if !self.allow[i * self.n..(i + 1) * self.n].iter().any(|&a| a) {
                return Err(Error::invalid(format!("mask row {} allows no positions", i)));
            }
        }
        Ok(())
    }

    /// Additive score bias: 0 where allowed, a large negative constant where
    /// not.
    pub fn bias_tensor<S: Scalar>(&self) -> Tensor<S> {
        let neg = mask_bias::<S>();
        let data = self
            .allow
            .iter()
            .map(|&a| if a { S::zero() } else { neg })
            .collect();
        Tensor::from_vec(&[self.n, self.n], data).expect("mask dims are consistent")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_causal_is_lower_triangular() {
        let m = AttnMask::full_causal(4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.is_allowed(i, j), j <= i, "({}, {})", i, j);
            }
        }
    }

    #[test]
    fn window_limits_lookback() {
        // w = 2: each position sees itself and one predecessor.
        let m = AttnMask::windowed(5, 2).unwrap();
        assert!(m.is_allowed(3, 3));
        assert!(m.is_allowed(3, 2));
        assert!(!m.is_allowed(3, 1));
        assert!(!m.is_allowed(3, 4));
        // w = 1 degenerates to self-attention only.
        let s = AttnMask::windowed(4, 1).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(s.is_allowed(i, j), i == j);
            }
        }
    }

    #[test]
    fn empty_rows_rejected() {
        assert!(AttnMask::from_fn(3, |_, _| false).is_err());
        assert!(AttnMask::from_fn(0, |_, _| true).is_err());
    }

    #[test]
    fn bias_tensor_values() {
        let m = AttnMask::full_causal(2).unwrap();
        let b: Tensor<f32> = m.bias_tensor();
        assert_eq!(b.at(0, 0), 0.0);
        assert_eq!(b.at(0, 1), -1e9);
        assert_eq!(b.at(1, 0), 0.0);
    }
}
