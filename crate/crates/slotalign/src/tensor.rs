//! Dense row-major tensor with explicit shape checks.
//!
//! Shapes are plain `Vec<usize>`; matrices are `[rows, cols]`, vectors `[n]`.
//! Every constructor validates that the element count matches the shape, so a
//! well-formed `Tensor` never lies about its layout.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); n] }
    }

    /// Constant-filled tensor of the given shape.
    pub fn filled(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    /// Wrap existing data; the element count must match the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Single-element tensor with shape `[1]`.
    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// True when the shape has exactly two axes.
    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a matrix; panics on non-matrix shapes (internal misuse).
    pub fn rows(&self) -> usize {
        assert!(self.is_matrix(), "rows() on shape {:?}", self.shape);
        self.shape[0]
    }

    /// Column count of a matrix; panics on non-matrix shapes (internal misuse).
    pub fn cols(&self) -> usize {
        assert!(self.is_matrix(), "cols() on shape {:?}", self.shape);
        self.shape[1]
    }

    /// Borrow one row of a matrix.
    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Matrix element accessor.
    pub fn at(&self, i: usize, j: usize) -> S {
        let c = self.cols();
        self.data[i * c + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: S) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    /// The sole element of a `[1]`-shaped tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::invalid(format!(
                "item() requires exactly one element, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Same data under a new shape with an equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} ({} elems) to {:?} ({} elems)",
                self.shape,
                self.data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Copy of rows `[start, end)` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let r = self.rows();
        let c = self.cols();
        if start > end || end > r {
            return Err(Error::invalid(format!(
                "row slice {}..{} out of bounds for {} rows",
                start, end, r
            )));
        }
        Ok(Tensor {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        })
    }

    /// Copy of columns `[start, end)` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let r = self.rows();
        let c = self.cols();
        if start > end || end > c {
            return Err(Error::invalid(format!(
                "col slice {}..{} out of bounds for {} cols",
                start, end, c
            )));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Ok(Tensor { shape: vec![r, w], data })
    }

    /// Element-wise map preserving shape.
    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise cast to another scalar type (through `f64`).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64_c(v.to_f64_c())).collect(),
        }
    }

    /// Largest absolute element-wise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut m = S::zero();
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            let d = (*a - *b).abs();
            if d > m {
                m = d;
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_mismatched_count() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0f32; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0f32; 6]).is_ok());
    }

    #[test]
    fn row_and_element_access() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0]);
        assert_eq!(t.at(0, 2), 3.0);
    }

    #[test]
    fn slice_cols_copies_contiguous_window() {
        let t = Tensor::from_vec(&[2, 4], (0..8).map(|v| v as f32).collect()).unwrap();
        let s = t.slice_cols(1, 3).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn slice_rows_bounds_checked() {
        let t = Tensor::<f32>::zeros(&[3, 2]);
        assert!(t.slice_rows(2, 4).is_err());
        assert_eq!(t.slice_rows(1, 3).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let r = t.reshaped(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn finiteness_check() {
        let mut t = Tensor::<f32>::zeros(&[2, 2]);
        assert!(t.all_finite());
        t.data_mut()[3] = f32::NAN;
        assert!(!t.all_finite());
    }

    #[test]
    fn cast_round_trips_exact_values() {
        let t = Tensor::from_vec(&[3], vec![0.5f32, -2.0, 8.25]).unwrap();
        let w: Tensor<f64> = t.cast();
        let back: Tensor<f32> = w.cast();
        assert_eq!(back, t);
    }
}
