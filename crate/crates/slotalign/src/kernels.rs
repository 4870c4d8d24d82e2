//! Dense numeric kernels: matrix products, row softmax, layer norm, GELU,
//! embedding lookup, masked attention, and the slot cross-entropy loss.
//!
//! Each differentiable primitive has a forward function here and, where the
//! tape needs it, a matching `*_backward`. Backward functions take the saved
//! forward values and the upstream gradient and return input gradients.

use crate::error::{Error, Result};
use crate::mask::AttnMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Epsilon added to the variance inside layer norm.
pub const LN_EPS: f64 = 1e-5;

fn want_matrix<S: Scalar>(t: &Tensor<S>, name: &str) -> Result<()> {
    if !t.is_matrix() {
        return Err(Error::invalid(format!("{} must be 2-D, got shape {:?}", name, t.shape())));
    }
    Ok(())
}

// ── matrix products ──────────────────────────────────────────────────────────

/// `a [m,k] @ b [k,n] -> [m,n]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    want_matrix(a, "a")?;
    want_matrix(b, "b")?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::invalid(format!(
            "matmul inner dims differ: [{},{}] @ [{},{}]",
            m, k, k2, n
        )));
    }
    let mut c = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let crow = c.row_mut(i);
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = b.row(kk);
            crow.iter_mut().zip(brow.iter()).for_each(|(cv, &bv)| *cv += aik * bv);
        }
    }
    Ok(c)
}

/// `a [m,k] @ transpose(b [n,k]) -> [m,n]` (row-by-row dot products).
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    want_matrix(a, "a")?;
    want_matrix(b, "b")?;
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::invalid(format!(
            "matmul_nt inner dims differ: [{},{}] @ t([{},{}])",
            m, k, n, k2
        )));
    }
    let mut c = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let crow = c.row_mut(i);
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = b.row(j);
            let mut acc = S::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *cv = acc;
        }
    }
    Ok(c)
}

/// `transpose(a [k,m]) @ b [k,n] -> [m,n]`.
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    want_matrix(a, "a")?;
    want_matrix(b, "b")?;
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::invalid(format!(
            "matmul_tn inner dims differ: t([{},{}]) @ [{},{}]",
            k, m, k2, n
        )));
    }
    let mut c = Tensor::zeros(&[m, n]);
    for kk in 0..k {
        let arow = a.row(kk);
        let brow = b.row(kk);
        for (i, &aki) in arow.iter().enumerate() {
            let crow = c.row_mut(i);
            crow.iter_mut().zip(brow.iter()).for_each(|(cv, &bv)| *cv += aki * bv);
        }
    }
    Ok(c)
}

/// Add a `[n]` bias vector to every row of `x [m,n]`.
pub fn add_row_bias<S: Scalar>(x: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    want_matrix(x, "x")?;
    if bias.shape() != [x.cols()] {
        return Err(Error::invalid(format!(
            "bias shape {:?} does not match row width {}",
            bias.shape(),
            x.cols()
        )));
    }
    let mut out = x.clone();
    for i in 0..out.rows() {
        out.row_mut(i)
            .iter_mut()
            .zip(bias.data().iter())
            .for_each(|(v, &b)| *v += b);
    }
    Ok(out)
}

// ── softmax ──────────────────────────────────────────────────────────────────

/// Row-wise softmax with max subtraction. Rows of width zero are rejected.
pub fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    want_matrix(x, "x")?;
    if x.cols() == 0 || x.rows() == 0 {
        return Err(Error::invalid("softmax_rows on empty matrix"));
    }
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mut m = row[0];
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Gradient of row softmax: `dx_j = y_j * (dy_j - sum_k dy_k * y_k)` per row.
pub fn softmax_rows_backward<S: Scalar>(y: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let mut dx = Tensor::zeros(y.shape());
    for i in 0..y.rows() {
        let yr = y.row(i);
        let dyr = dy.row(i);
        let mut dot = S::zero();
        for (&yv, &dv) in yr.iter().zip(dyr.iter()) {
            dot += yv * dv;
        }
        let dxr = dx.row_mut(i);
        for ((dst, &yv), &dv) in dxr.iter_mut().zip(yr.iter()).zip(dyr.iter()) {
            *dst = yv * (dv - dot);
        }
    }
    dx
}

// ── layer norm ───────────────────────────────────────────────────────────────

/// Per-row mean and reciprocal standard deviation saved for the backward pass.
pub struct LnCache<S> {
    pub mean: Vec<S>,
    pub rstd: Vec<S>,
}

/// Row-wise layer norm with learned scale and shift.
/// Requires row width >= 2 so the variance is meaningful.
pub fn layer_norm<S: Scalar>(x: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>) -> Result<Tensor<S>> {
    layer_norm_fwd(x, gamma, beta).map(|(y, _)| y)
}

pub fn layer_norm_fwd<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
) -> Result<(Tensor<S>, LnCache<S>)> {
    want_matrix(x, "x")?;
    let d = x.cols();
    if d < 2 {
        return Err(Error::invalid(format!("layer_norm needs row width >= 2, got {}", d)));
    }
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::invalid(format!(
            "layer_norm gamma/beta shapes {:?}/{:?} do not match width {}",
            gamma.shape(),
            beta.shape(),
            d
        )));
    }
    let eps = S::from_f64_c(LN_EPS);
    let dn = S::from_f64_c(d as f64);
    let mut out = Tensor::zeros(x.shape());
    let mut cache = LnCache { mean: Vec::with_capacity(x.rows()), rstd: Vec::with_capacity(x.rows()) };
    for i in 0..x.rows() {
        let row = x.row(i);
        let mut mean = S::zero();
        for &v in row {
            mean += v;
        }
        mean /= dn;
        let mut var = S::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var /= dn;
        let rstd = (var + eps).sqrt().recip();
        let orow = out.row_mut(i);
        for (k, dst) in orow.iter_mut().enumerate() {
            *dst = (row[k] - mean) * rstd * gamma.data()[k] + beta.data()[k];
        }
        cache.mean.push(mean);
        cache.rstd.push(rstd);
    }
    Ok((out, cache))
}

/// Gradients of layer norm w.r.t. input, gamma, and beta.
pub fn layer_norm_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    cache: &LnCache<S>,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let d = x.cols();
    let dn = S::from_f64_c(d as f64);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::<S>::zeros(&[d]);
    let mut dbeta = Tensor::<S>::zeros(&[d]);
    for i in 0..x.rows() {
        let row = x.row(i);
        let dyr = dy.row(i);
        let mean = cache.mean[i];
        let rstd = cache.rstd[i];
        // xhat_k = (x_k - mean) * rstd
        let mut sum_dxhat = S::zero();
        let mut sum_dxhat_xhat = S::zero();
        for k in 0..d {
            let xhat = (row[k] - mean) * rstd;
            let dxhat = dyr[k] * gamma.data()[k];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma.data_mut()[k] += dyr[k] * xhat;
            dbeta.data_mut()[k] += dyr[k];
        }
        let m1 = sum_dxhat / dn;
        let m2 = sum_dxhat_xhat / dn;
        let dxr = dx.row_mut(i);
        for k in 0..d {
            let xhat = (row[k] - mean) * rstd;
            let dxhat = dyr[k] * gamma.data()[k];
            dxr[k] = rstd * (dxhat - m1 - xhat * m2);
        }
    }
    (dx, dgamma, dbeta)
}

// ── GELU ─────────────────────────────────────────────────────────────────────

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Element-wise GELU (tanh approximation).
pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let c = S::from_f64_c(GELU_C);
    let a = S::from_f64_c(GELU_A);
    let half = S::from_f64_c(0.5);
    x.map(|v| {
        let u = c * (v + a * v * v * v);
        half * v * (S::one() + u.tanh())
    })
}

/// Gradient of the tanh-approximated GELU.
pub fn gelu_backward<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let c = S::from_f64_c(GELU_C);
    let a = S::from_f64_c(GELU_A);
    let half = S::from_f64_c(0.5);
    let three = S::from_f64_c(3.0);
    let mut dx = Tensor::zeros(x.shape());
    for ((dst, &v), &dv) in dx.data_mut().iter_mut().zip(x.data().iter()).zip(dy.data().iter()) {
        let u = c * (v + a * v * v * v);
        let t = u.tanh();
        let du = c * (S::one() + three * a * v * v);
        let grad = half * (S::one() + t) + half * v * (S::one() - t * t) * du;
        *dst = grad * dv;
    }
    dx
}

// ── embedding lookup ─────────────────────────────────────────────────────────

/// Gather rows of `table [V,d]` by id; every id must be `< V`.
pub fn embedding_lookup<S: Scalar>(table: &Tensor<S>, ids: &[usize]) -> Result<Tensor<S>> {
    want_matrix(table, "table")?;
    let v = table.rows();
    let d = table.cols();
    let mut out = Tensor::zeros(&[ids.len(), d]);
    for (i, &id) in ids.iter().enumerate() {
        if id >= v {
            return Err(Error::invalid(format!("embedding id {} out of range (vocab {})", id, v)));
        }
        out.row_mut(i).copy_from_slice(table.row(id));
    }
    Ok(out)
}

// ── masked attention ─────────────────────────────────────────────────────────

/// Single-head scaled dot-product attention under a boolean mask.
///
/// `q, k, v` are `[T, d]`; scores are `q @ t(k) / sqrt(d)` plus the mask's
/// additive bias, then row-softmaxed and applied to `v`. Disallowed pairs
/// receive exactly zero weight.
pub fn masked_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: &AttnMask,
) -> Result<Tensor<S>> {
    want_matrix(q, "q")?;
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::invalid(format!(
            "q/k/v shapes differ: {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let t = q.rows();
    if mask.n() != t {
        return Err(Error::invalid(format!("mask size {} does not match seq len {}", mask.n(), t)));
    }
    mask.validate()?;
    let scale = S::from_f64_c((q.cols() as f64).sqrt().recip());
    let mut scores = matmul_nt(q, k)?;
    let bias: Tensor<S> = mask.bias_tensor();
    for (s, &b) in scores.data_mut().iter_mut().zip(bias.data().iter()) {
        *s = *s * scale + b;
    }
    let weights = softmax_rows(&scores)?;
    matmul(&weights, v)
}

// ── slot cross-entropy ───────────────────────────────────────────────────────

fn check_slot_args<S: Scalar>(logits: &Tensor<S>, targets: &[usize], mask: &[bool]) -> Result<usize> {
    want_matrix(logits, "logits")?;
    let l = logits.rows();
    let c = logits.cols();
    if targets.len() != l || mask.len() != l {
        return Err(Error::invalid(format!(
            "targets/mask lengths {}/{} do not match {} rows",
            targets.len(),
            mask.len(),
            l
        )));
    }
    let mut n_slots = 0usize;
    for i in 0..l {
        if mask[i] {
            if targets[i] >= c {
                return Err(Error::invalid(format!(
                    "target {} at row {} out of range ({} classes)",
                    targets[i], i, c
                )));
            }
            n_slots += 1;
        }
    }
    if n_slots == 0 {
        return Err(Error::invalid("slot_cross_entropy with no masked positions"));
    }
    Ok(n_slots)
}

/// Mean cross-entropy over rows where `mask` is true; other rows contribute
/// nothing. Errors when no row is masked.
pub fn slot_cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[usize],
    mask: &[bool],
) -> Result<S> {
    slot_cross_entropy_fwd(logits, targets, mask).map(|(loss, _)| loss)
}

/// Forward pass that also returns per-masked-row softmax probabilities
/// (zero rows elsewhere) for the backward pass.
pub fn slot_cross_entropy_fwd<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[usize],
    mask: &[bool],
) -> Result<(S, Tensor<S>)> {
    let n_slots = check_slot_args(logits, targets, mask)?;
    let c = logits.cols();
    let mut probs = Tensor::zeros(logits.shape());
    let mut loss = S::zero();
    for i in 0..logits.rows() {
        if !mask[i] {
            continue;
        }
        let row = logits.row(i);
        let mut m = row[0];
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let mut sum = S::zero();
        let prow = probs.row_mut(i);
        for k in 0..c {
            let e = (row[k] - m).exp();
            prow[k] = e;
            sum += e;
        }
        for p in prow.iter_mut() {
            *p /= sum;
        }
        // -log softmax[target] = log(sum) + m - logit[target]
        loss += sum.ln() + m - row[targets[i]];
    }
    loss /= S::from_f64_c(n_slots as f64);
    Ok((loss, probs))
}

/// Gradient of the mean slot cross-entropy w.r.t. the logits.
pub fn slot_cross_entropy_backward<S: Scalar>(
    probs: &Tensor<S>,
    targets: &[usize],
    mask: &[bool],
    dloss: S,
) -> Tensor<S> {
    let n_slots = mask.iter().filter(|&&m| m).count();
    let scale = dloss / S::from_f64_c(n_slots as f64);
    let mut dl = Tensor::zeros(probs.shape());
    for i in 0..probs.rows() {
        if !mask[i] {
            continue;
        }
        let prow = probs.row(i);
        let drow = dl.row_mut(i);
        for (dst, &p) in drow.iter_mut().zip(prow.iter()) {
            *dst = p * scale;
        }
        drow[targets[i]] -= scale;
    }
    dl
}

// ── decode helpers ───────────────────────────────────────────────────────────

/// Index of the largest element in row `i`; ties resolve to the lowest index.
pub fn argmax_row<S: Scalar>(t: &Tensor<S>, i: usize) -> usize {
    let row = t.row(i);
    let mut best = 0usize;
    let mut best_v = row[0];
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}
