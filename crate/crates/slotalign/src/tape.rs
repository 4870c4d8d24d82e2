//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] records one forward computation as a list of nodes; each node
//! stores its operation, its inputs (as [`Var`] indices), and its output
//! value. [`Tape::backward`] walks the list in reverse and accumulates
//! gradients for every node reachable from a scalar root. Every operation
//! validates shapes and rejects non-finite outputs, so divergence surfaces
//! as an error instead of silently poisoning the run.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    /// `a @ transpose(b)`.
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, S),
    /// Element-wise add of a constant tensor (not differentiated through).
    AddConst(Var),
    /// Element-wise multiply by a constant tensor.
    MulConst(Var, Tensor<S>),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: kernels::LnCache<S>,
    },
    Gelu(Var),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    SlotCe {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Tensor<S>,
    },
}

struct Node<S> {
    op: Op<S>,
    out: Tensor<S>,
}

/// Recorded forward computation.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<S> {
    g: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient w.r.t. `v`, if `v` influenced the root.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.g[v.0].as_ref()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of any recorded node.
    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].out
    }

    fn push(&mut self, op: Op<S>, out: Tensor<S>) -> Result<Var> {
        if !out.all_finite() {
            return Err(Error::numeric(format!(
                "non-finite values produced at tape node {}",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node { op, out });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record an input tensor. Leaves are where parameter values and data
    /// enter the graph; their gradients are read back after `backward`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Result<Var> {
        self.push(Op::Leaf, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(&self.nodes[a.0].out, &self.nodes[b.0].out)?;
        self.push(Op::MatMul(a, b), out)
    }

    /// `a @ transpose(b)`, used for attention scores.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_nt(&self.nodes[a.0].out, &self.nodes[b.0].out)?;
        self.push(Op::MatMulNt(a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].out, &self.nodes[b.0].out);
        if ta.shape() != tb.shape() {
            return Err(Error::invalid(format!(
                "add shape mismatch {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = ta.clone();
        out.data_mut().iter_mut().zip(tb.data().iter()).for_each(|(x, &y)| *x += y);
        self.push(Op::Add(a, b), out)
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = kernels::add_row_bias(&self.nodes[x.0].out, &self.nodes[bias.0].out)?;
        self.push(Op::AddRowBias(x, bias), out)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let out = self.nodes[x.0].out.map(|v| v * c);
        self.push(Op::Scale(x, c), out)
    }

    /// Add a constant tensor (e.g. an attention mask bias). The constant is
    /// not a graph input and receives no gradient.
    pub fn add_const(&mut self, x: Var, t: &Tensor<S>) -> Result<Var> {
        let tx = &self.nodes[x.0].out;
        if tx.shape() != t.shape() {
            return Err(Error::invalid(format!(
                "add_const shape mismatch {:?} vs {:?}",
                tx.shape(),
                t.shape()
            )));
        }
        let mut out = tx.clone();
        out.data_mut().iter_mut().zip(t.data().iter()).for_each(|(a, &b)| *a += b);
        self.push(Op::AddConst(x), out)
    }

    /// Element-wise multiply by a constant tensor.
    pub fn mul_const(&mut self, x: Var, t: &Tensor<S>) -> Result<Var> {
        let tx = &self.nodes[x.0].out;
        if tx.shape() != t.shape() {
            return Err(Error::invalid(format!(
                "mul_const shape mismatch {:?} vs {:?}",
                tx.shape(),
                t.shape()
            )));
        }
        let mut out = tx.clone();
        out.data_mut().iter_mut().zip(t.data().iter()).for_each(|(a, &b)| *a *= b);
        self.push(Op::MulConst(x, t.clone()), out)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_rows(&self.nodes[x.0].out)?;
        self.push(Op::SoftmaxRows(x), out)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, cache) = kernels::layer_norm_fwd(
            &self.nodes[x.0].out,
            &self.nodes[gamma.0].out,
            &self.nodes[beta.0].out,
        )?;
        self.push(Op::LayerNorm { x, gamma, beta, cache }, out)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = kernels::gelu(&self.nodes[x.0].out);
        self.push(Op::Gelu(x), out)
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = kernels::embedding_lookup(&self.nodes[table.0].out, ids)?;
        self.push(Op::Embed { table, ids: ids.to_vec() }, out)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.nodes[x.0].out.slice_rows(start, end)?;
        self.push(Op::SliceRows { x, start }, out)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.nodes[x.0].out.slice_cols(start, end)?;
        self.push(Op::SliceCols { x, start }, out)
    }

    /// Stack matrices vertically; all inputs must share a column count.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat_rows of zero tensors"));
        }
        let c = self.nodes[xs[0].0].out.cols();
        let mut rows = 0usize;
        for &v in xs {
            let t = &self.nodes[v.0].out;
            if !t.is_matrix() || t.cols() != c {
                return Err(Error::invalid("concat_rows inputs must be matrices of equal width"));
            }
            rows += t.rows();
        }
        let mut data = Vec::with_capacity(rows * c);
        for &v in xs {
            data.extend_from_slice(self.nodes[v.0].out.data());
        }
        let out = Tensor::from_vec(&[rows, c], data)?;
        self.push(Op::ConcatRows(xs.to_vec()), out)
    }

    /// Stack matrices horizontally; all inputs must share a row count.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat_cols of zero tensors"));
        }
        let r = self.nodes[xs[0].0].out.rows();
        let mut cols = 0usize;
        for &v in xs {
            let t = &self.nodes[v.0].out;
            if !t.is_matrix() || t.rows() != r {
                return Err(Error::invalid("concat_cols inputs must be matrices of equal height"));
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(&[r, cols]);
        for i in 0..r {
            let orow = out.row_mut(i);
            let mut off = 0usize;
            for &v in xs {
                let t = &self.nodes[v.0].out;
                let w = t.cols();
                orow[off..off + w].copy_from_slice(t.row(i));
                off += w;
            }
        }
        self.push(Op::ConcatCols(xs.to_vec()), out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].out.reshaped(shape)?;
        self.push(Op::Reshape(x), out)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: S = self.nodes[x.0].out.data().iter().copied().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Mean cross-entropy over masked rows of `logits`, as a `[1]` tensor.
    pub fn slot_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (loss, probs) = kernels::slot_cross_entropy_fwd(&self.nodes[logits.0].out, targets, mask)?;
        self.push(
            Op::SlotCe {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        )
    }

    /// Reverse pass from a scalar root. Returns one gradient per reachable
    /// node; unreachable nodes report `None`.
    pub fn backward(&self, root: Var) -> Result<Grads<S>> {
        if self.nodes[root.0].out.shape() != [1] {
            return Err(Error::invalid(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].out.shape()
            )));
        }
        let mut g: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(Tensor::scalar(S::one()));

        for idx in (0..=root.0).rev() {
            // Clone so the accumulated gradient stays available in the result.
            let dy = match &g[idx] {
                Some(d) => d.clone(),
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = kernels::matmul_nt(&dy, &self.nodes[b.0].out)?;
                    let db = kernels::matmul_tn(&self.nodes[a.0].out, &dy)?;
                    acc(&mut g, *a, da)?;
                    acc(&mut g, *b, db)?;
                }
                Op::MatMulNt(a, b) => {
                    // c = a @ t(b): da = dc @ b, db = t(dc) @ a
                    let da = kernels::matmul(&dy, &self.nodes[b.0].out)?;
                    let db = kernels::matmul_tn(&dy, &self.nodes[a.0].out)?;
                    acc(&mut g, *a, da)?;
                    acc(&mut g, *b, db)?;
                }
                Op::Add(a, b) => {
                    acc(&mut g, *a, dy.clone())?;
                    acc(&mut g, *b, dy)?;
                }
                Op::AddRowBias(x, bias) => {
                    let cols = dy.cols();
                    let mut db = Tensor::<S>::zeros(&[cols]);
                    for i in 0..dy.rows() {
                        db.data_mut()
                            .iter_mut()
                            .zip(dy.row(i).iter())
                            .for_each(|(d, &v)| *d += v);
                    }
                    acc(&mut g, *x, dy)?;
                    acc(&mut g, *bias, db)?;
                }
                Op::Scale(x, c) => {
                    let cc = *c;
                    acc(&mut g, *x, dy.map(|v| v * cc))?;
                }
                Op::AddConst(x) => {
                    acc(&mut g, *x, dy)?;
                }
                Op::MulConst(x, t) => {
                    let mut dx = dy;
                    dx.data_mut().iter_mut().zip(t.data().iter()).for_each(|(d, &v)| *d *= v);
                    acc(&mut g, *x, dx)?;
                }
                Op::SoftmaxRows(x) => {
                    let dx = kernels::softmax_rows_backward(&node.out, &dy);
                    acc(&mut g, *x, dx)?;
                }
                Op::LayerNorm { x, gamma, beta, cache } => {
                    let (dx, dgamma, dbeta) = kernels::layer_norm_backward(
                        &self.nodes[x.0].out,
                        &self.nodes[gamma.0].out,
                        cache,
                        &dy,
                    );
                    acc(&mut g, *x, dx)?;
                    acc(&mut g, *gamma, dgamma)?;
                    acc(&mut g, *beta, dbeta)?;
                }
                Op::Gelu(x) => {
                    let dx = kernels::gelu_backward(&self.nodes[x.0].out, &dy);
                    acc(&mut g, *x, dx)?;
                }
                Op::Embed { table, ids } => {
                    let src = &self.nodes[table.0].out;
                    let mut dt = Tensor::zeros(src.shape());
                    for (i, &id) in ids.iter().enumerate() {
                        dt.row_mut(id)
                            .iter_mut()
                            .zip(dy.row(i).iter())
                            .for_each(|(d, &v)| *d += v);
                    }
                    acc(&mut g, *table, dt)?;
                }
                Op::SliceRows { x, start } => {
                    let src = &self.nodes[x.0].out;
                    let mut dx = Tensor::zeros(src.shape());
                    for i in 0..dy.rows() {
                        dx.row_mut(start + i)
                            .iter_mut()
                            .zip(dy.row(i).iter())
                            .for_each(|(d, &v)| *d += v);
                    }
                    acc(&mut g, *x, dx)?;
                }
                Op::SliceCols { x, start } => {
                    let src = &self.nodes[x.0].out;
                    let mut dx = Tensor::zeros(src.shape());
                    let w = dy.cols();
                    for i in 0..dy.rows() {
                        dx.row_mut(i)[*start..start + w]
                            .iter_mut()
                            .zip(dy.row(i).iter())
                            .for_each(|(d, &v)| *d += v);
                    }
                    acc(&mut g, *x, dx)?;
                }
                Op::ConcatRows(xs) => {
                    let mut off = 0usize;
                    for &v in xs {
                        let r = self.nodes[v.0].out.rows();
                        let dv = dy.slice_rows(off, off + r)?;
                        acc(&mut g, v, dv)?;
                        off += r;
                    }
                }
                Op::ConcatCols(xs) => {
                    let mut off = 0usize;
                    for &v in xs {
                        let w = self.nodes[v.0].out.cols();
                        let dv = dy.slice_cols(off, off + w)?;
                        acc(&mut g, v, dv)?;
                        off += w;
                    }
                }
                Op::Reshape(x) => {
                    let dx = dy.reshaped(self.nodes[x.0].out.shape())?;
                    acc(&mut g, *x, dx)?;
                }
                Op::Sum(x) => {
                    let d = dy.item()?;
                    let src = &self.nodes[x.0].out;
                    acc(&mut g, *x, Tensor::filled(src.shape(), d))?;
                }
                Op::SlotCe { logits, targets, mask, probs } => {
                    let d = dy.item()?;
                    let dl = kernels::slot_cross_entropy_backward(probs, targets, mask, d);
                    acc(&mut g, *logits, dl)?;
                }
            }
        }
        Ok(Grads { g })
    }
}

/// Accumulate `delta` into the gradient slot for `v`.
fn acc<S: Scalar>(g: &mut [Option<Tensor<S>>], v: Var, delta: Tensor<S>) -> Result<()> {
    match &mut g[v.0] {
        Some(cur) => {
            if cur.shape() != delta.shape() {
                return Err(Error::invalid(format!(
                    "gradient shape mismatch {:?} vs {:?}",
                    cur.shape(),
                    delta.shape()
                )));
            }
            cur.data_mut()
                .iter_mut()
                .zip(delta.data().iter())
                .for_each(|(a, &b)| *a += b);
        }
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf(Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap())
            .unwrap();
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        let gx = grads.wrt(x).unwrap();
        assert_eq!(gx.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = sum(x + x) => dy/dx = 2 everywhere.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let two_x = tape.add(x, x).unwrap();
        let s = tape.sum(two_x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn unreachable_nodes_have_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.0)).unwrap();
        let y = tape.leaf(Tensor::scalar(5.0)).unwrap();
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.wrt(y).is_none());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2])).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1e308)).unwrap();
        // 1e308 * 10 overflows to infinity.
        assert!(tape.scale(x, 10.0).is_err());
    }

    #[test]
    fn matmul_chain_matches_hand_gradient() {
        // f = sum(a @ b) with a = [[1, 2]], b = [[3], [4]] => f = 11.
        // df/da = [[3, 4]]^T rows, df/db = [[1], [2]].
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let b = tape.leaf(Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap()).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let f = tape.sum(c).unwrap();
        assert_eq!(tape.value(f).item().unwrap(), 11.0);
        let grads = tape.backward(f).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_round_trip_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let b = tape.leaf(Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap()).unwrap();
        let cat = tape.concat_rows(&[a, b]).unwrap();
        // Keep only the second row; only b should receive gradient.
        let second = tape.slice_rows(cat, 1, 2).unwrap();
        let f = tape.sum(second).unwrap();
        let grads = tape.backward(f).unwrap();
        assert_eq!(grads.wrt(b).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.wrt(a).unwrap().data(), &[0.0, 0.0]);
    }
}
