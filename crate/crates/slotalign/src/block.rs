//! Pre-norm transformer block: multi-head masked self-attention followed by
//! a GELU feed-forward, each wrapped in a residual connection.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::AttnMask;
use crate::param::{uniform_init, Bindings, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Feed-forward width multiplier (hidden = FFN_MULT * d_model).
pub const FFN_MULT: usize = 2;

/// Parameter ids for one transformer block.
pub struct BlockParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub w_up: ParamId,
    pub b_up: ParamId,
    pub w_down: ParamId,
    pub b_down: ParamId,
    d_model: usize,
    n_heads: usize,
}

impl BlockParams {
    /// Register one block's parameters under `prefix`. Weights draw from
    /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); norms start at identity.
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        d_model: usize,
        n_heads: usize,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if d_model == 0 || n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                d_model, n_heads
            )));
        }
        let d = d_model;
        let hidden = FFN_MULT * d;
        let ones = Tensor::filled(&[d], S::one());
        let zeros_d = Tensor::<S>::zeros(&[d]);
        let p = BlockParams {
            ln1_gamma: store.add(format!("{}.ln1_gamma", prefix), ones.clone())?,
            ln1_beta: store.add(format!("{}.ln1_beta", prefix), zeros_d.clone())?,
            wq: store.add(format!("{}.wq", prefix), uniform_init(&[d, d], d, rng))?,
            bq: store.add(format!("{}.bq", prefix), zeros_d.clone())?,
            wk: store.add(format!("{}.wk", prefix), uniform_init(&[d, d], d, rng))?,
            bk: store.add(format!("{}.bk", prefix), zeros_d.clone())?,
            wv: store.add(format!("{}.wv", prefix), uniform_init(&[d, d], d, rng))?,
            bv: store.add(format!("{}.bv", prefix), zeros_d.clone())?,
            wo: store.add(format!("{}.wo", prefix), uniform_init(&[d, d], d, rng))?,
            bo: store.add(format!("{}.bo", prefix), zeros_d.clone())?,
            ln2_gamma: store.add(format!("{}.ln2_gamma", prefix), ones)?,
            ln2_beta: store.add(format!("{}.ln2_beta", prefix), zeros_d.clone())?,
            w_up: store.add(format!("{}.w_up", prefix), uniform_init(&[d, hidden], d, rng))?,
            b_up: store.add(format!("{}.b_up", prefix), Tensor::zeros(&[hidden]))?,
            w_down: store.add(format!("{}.w_down", prefix), uniform_init(&[hidden, d], hidden, rng))?,
            b_down: store.add(format!("{}.b_down", prefix), zeros_d)?,
            d_model,
            n_heads,
        };
        Ok(p)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Record the block's forward computation on the tape.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        bindings: &mut Bindings,
        x: Var,
        mask: &AttnMask,
    ) -> Result<Var> {
        let t = tape.value(x).rows();
        if mask.n() != t {
            return Err(Error::invalid(format!(
                "mask size {} does not match sequence length {}",
                mask.n(),
                t
            )));
        }

        // Attention sub-layer.
        let g1 = bindings.bind(tape, store, self.ln1_gamma)?;
        let b1 = bindings.bind(tape, store, self.ln1_beta)?;
        let h = tape.layer_norm(x, g1, b1)?;

        let wq = bindings.bind(tape, store, self.wq)?;
        let bq = bindings.bind(tape, store, self.bq)?;
        let wk = bindings.bind(tape, store, self.wk)?;
        let bk = bindings.bind(tape, store, self.bk)?;
        let wv = bindings.bind(tape, store, self.wv)?;
        let bv = bindings.bind(tape, store, self.bv)?;
        let q = tape.matmul(h, wq).and_then(|v| tape.add_row_bias(v, bq))?;
        let k = tape.matmul(h, wk).and_then(|v| tape.add_row_bias(v, bk))?;
        let v = tape.matmul(h, wv).and_then(|v| tape.add_row_bias(v, bv))?;

        let dh = self.head_dim();
        let scale = S::from_f64_c((dh as f64).sqrt().recip());
        let bias: Tensor<S> = mask.bias_tensor();
        let mut heads = Vec::with_capacity(self.n_heads);
        for hi in 0..self.n_heads {
            let (lo, hiw) = (hi * dh, (hi + 1) * dh);
            let qh = tape.slice_cols(q, lo, hiw)?;
            let kh = tape.slice_cols(k, lo, hiw)?;
            let vh = tape.slice_cols(v, lo, hiw)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.scale(scores, scale)?;
            let masked = tape.add_const(scaled, &bias)?;
            let weights = tape.softmax_rows(masked)?;
            heads.push(tape.matmul(weights, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let wo = bindings.bind(tape, store, self.wo)?;
        let bo = bindings.bind(tape, store, self.bo)?;
        let att = tape.matmul(cat, wo).and_then(|v| tape.add_row_bias(v, bo))?;
        let x1 = tape.add(x, att)?;

        // Feed-forward sub-layer.
        let g2 = bindings.bind(tape, store, self.ln2_gamma)?;
        let b2 = bindings.bind(tape, store, self.ln2_beta)?;
        let h2 = tape.layer_norm(x1, g2, b2)?;
        let w_up = bindings.bind(tape, store, self.w_up)?;
        let b_up = bindings.bind(tape, store, self.b_up)?;
        let w_down = bindings.bind(tape, store, self.w_down)?;
        let b_down = bindings.bind(tape, store, self.b_down)?;
        let up = tape.matmul(h2, w_up).and_then(|v| tape.add_row_bias(v, b_up))?;
        let act = tape.gelu(up)?;
        let down = tape.matmul(act, w_down).and_then(|v| tape.add_row_bias(v, b_down))?;
        tape.add(x1, down)
    }
}
