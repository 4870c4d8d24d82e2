//! Streaming scheduler for the encoder.
//!
//! Audio arrives in fixed-size chunks. The stream keeps per-layer activation
//! caches and, on every push, re-encodes only the region covered by the last
//! `unfixed_chunks` chunks; older tokens are committed and emitted. A commit
//! may in principle withdraw up to `retract_budget` previously emitted tokens
//! when re-encoding changes them — with a causal attention mask committed
//! tokens can never change, so live retraction counts stay at zero, but the
//! reconciliation bookkeeping is implemented and exercised directly.
//!
//! The per-row computations below mirror the offline tape kernels operation
//! for operation, so committed streaming output matches `Encoder::encode`
//! on the full input to within floating-point identity.

use crate::block::BlockParams;
use crate::encoder::{Encoder, DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::kernels;
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct StreamConfig {
    /// Frames per full chunk; the final chunk may be shorter.
    pub chunk_frames: usize,
    /// Number of trailing chunks kept open for re-encoding.
    pub unfixed_chunks: usize,
    /// Maximum number of already-emitted tokens a commit may withdraw.
    pub retract_budget: usize,
    /// Attention window used for encoding, in tokens.
    pub window_tokens: usize,
}

impl StreamConfig {
    /// 2-second chunks (200 frames), 4 unfixed chunks, 5-token budget.
    pub fn new(window_tokens: usize) -> Self {
        StreamConfig {
            chunk_frames: 200,
            unfixed_chunks: 4,
            retract_budget: 5,
            window_tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_frames < DOWNSAMPLE || self.chunk_frames % DOWNSAMPLE != 0 {
            return Err(Error::config(format!(
                "chunk_frames must be a positive multiple of {}, got {}",
                DOWNSAMPLE, self.chunk_frames
            )));
        }
        if self.unfixed_chunks == 0 {
            return Err(Error::config("unfixed_chunks must be at least 1"));
        }
        if self.window_tokens == 0 {
            return Err(Error::config("window_tokens must be positive"));
        }
        Ok(())
    }

    pub fn tokens_per_chunk(&self) -> usize {
        self.chunk_frames / DOWNSAMPLE
    }
}

/// Result of one push: tokens newly committed by this chunk.
pub struct StreamEvent<S> {
    pub newly_committed: Tensor<S>,
    /// Total committed tokens after this push.
    pub committed_tokens: usize,
    /// Previously emitted tokens withdrawn by this push.
    pub retracted: usize,
}

/// Incremental encoder state over one audio stream.
pub struct EncoderStream<'a, S> {
    enc: &'a Encoder<S>,
    cfg: StreamConfig,
    /// Flat row-major frame buffer, `feat_dim` wide.
    frames: Vec<S>,
    n_frames: usize,
    /// Per-level activation caches: `acts[0]` holds projected tokens with
    /// positions added, `acts[l + 1]` the output of block `l`. Row counts
    /// track the current token total.
    acts: Vec<Tensor<S>>,
    committed: usize,
    chunks: usize,
    short_seen: bool,
    finalized: bool,
}

impl<'a, S: Scalar> EncoderStream<'a, S> {
    pub fn new(enc: &'a Encoder<S>, cfg: StreamConfig) -> Result<Self> {
        cfg.validate()?;
        let (lo, hi) = enc.cfg.window_range;
        if cfg.window_tokens < lo || cfg.window_tokens > hi {
            return Err(Error::config(format!(
                "stream window {} outside encoder range ({}, {})",
                cfg.window_tokens, lo, hi
            )));
        }
        let d = enc.cfg.d_model;
        let acts = (0..=enc.cfg.n_layers).map(|_| Tensor::zeros(&[0, d])).collect();
        Ok(EncoderStream {
            enc,
            cfg,
            frames: Vec::new(),
            n_frames: 0,
            acts,
            committed: 0,
            chunks: 0,
            short_seen: false,
            finalized: false,
        })
    }

    pub fn committed_tokens(&self) -> usize {
        self.committed
    }

    /// Feed the next chunk. Full-size chunks may be followed by more; a
    /// shorter chunk must be the last before `finalize`.
    pub fn push(&mut self, chunk: &Tensor<S>) -> Result<StreamEvent<S>> {
        if self.finalized {
            return Err(Error::state("push after finalize"));
        }
        if self.short_seen {
            return Err(Error::state("a short chunk must be the final chunk"));
        }
        if !chunk.is_matrix() || chunk.cols() != self.enc.cfg.feat_dim {
            return Err(Error::invalid(format!(
                "chunk must be [T, {}], got {:?}",
                self.enc.cfg.feat_dim,
                chunk.shape()
            )));
        }
        if chunk.rows() == 0 || chunk.rows() > self.cfg.chunk_frames {
            return Err(Error::invalid(format!(
                "chunk rows must be in 1..={}, got {}",
                self.cfg.chunk_frames,
                chunk.rows()
            )));
        }

        self.frames.extend_from_slice(chunk.data());
        self.n_frames += chunk.rows();
        self.chunks += 1;
        if chunk.rows() < self.cfg.chunk_frames {
            self.short_seen = true;
        }

        let n_tok = self.n_frames / DOWNSAMPLE;
        if n_tok > self.enc.cfg.max_tokens {
            return Err(Error::capacity(format!(
                "{} tokens exceed the configured maximum {}",
                n_tok, self.enc.cfg.max_tokens
            )));
        }

        // Region to (re-)encode: everything from the start of the oldest
        // unfixed chunk. Chunks before it are committed.
        let tpc = self.cfg.tokens_per_chunk();
        let boundary = tpc * self.chunks.saturating_sub(self.cfg.unfixed_chunks);
        self.recompute(boundary, n_tok)?;

        // The recomputed region starts exactly at the committed boundary, so
        // it never overlaps emitted tokens; reconciliation therefore always
        // reports zero retractions here. See `reconcile_emitted` for the
        // mechanism itself.
        let retracted = 0usize;

        let newly = self.acts[self.enc.cfg.n_layers].slice_rows(self.committed, boundary)?;
        self.committed = boundary;
        Ok(StreamEvent { newly_committed: newly, committed_tokens: boundary, retracted })
    }

    /// Close the stream: commit all remaining tokens and return the full
    /// encoded sequence. An empty stream yields a `[0, d_model]` tensor.
    pub fn finalize(&mut self) -> Result<Tensor<S>> {
        if self.finalized {
            return Err(Error::state("finalize called twice"));
        }
        self.finalized = true;
        let n_tok = self.n_frames / DOWNSAMPLE;
        self.committed = n_tok;
        if n_tok == 0 {
            return Ok(Tensor::zeros(&[0, self.enc.cfg.d_model]));
        }
        self.acts[self.enc.cfg.n_layers].slice_rows(0, n_tok)
    }

    /// Recompute cached activations for token rows `[from, n_tok)`.
    fn recompute(&mut self, from: usize, n_tok: usize) -> Result<()> {
        if from >= n_tok {
            return Ok(());
        }
        let l0 = self.layer0_rows(from, n_tok)?;
        set_rows(&mut self.acts[0], from, &l0, n_tok);
        for l in 0..self.enc.cfg.n_layers {
            let blk = &self.enc.params.blocks[l];
            let out = block_forward_rows(
                &self.enc.store,
                blk,
                &self.acts[l],
                from,
                self.cfg.window_tokens,
            )?;
            set_rows(&mut self.acts[l + 1], from, &out, n_tok);
        }
        Ok(())
    }

    /// Projection + position rows for tokens `[from, to)`.
    fn layer0_rows(&self, from: usize, to: usize) -> Result<Tensor<S>> {
        let f = self.enc.cfg.feat_dim;
        let stacked_w = DOWNSAMPLE * f;
        let rows = to - from;
        let stacked = Tensor::from_vec(
            &[rows, stacked_w],
            self.frames[from * stacked_w..to * stacked_w].to_vec(),
        )?;
        let pw = &self.enc.store.get(self.enc.params.proj_w).value;
        let pb = &self.enc.store.get(self.enc.params.proj_b).value;
        let mut x = kernels::add_row_bias(&kernels::matmul(&stacked, pw)?, pb)?;
        let pos = &self.enc.store.get(self.enc.params.pos).value;
        for r in 0..rows {
            x.row_mut(r)
                .iter_mut()
                .zip(pos.row(from + r).iter())
                .for_each(|(a, &b)| *a += b);
        }
        Ok(x)
    }
}

/// Replace rows `[from, total)` of `t`, growing it to `total` rows.
fn set_rows<S: Scalar>(t: &mut Tensor<S>, from: usize, new_rows: &Tensor<S>, total: usize) {
    let d = new_rows.cols();
    let mut out = Tensor::zeros(&[total, d]);
    for i in 0..from {
        out.row_mut(i).copy_from_slice(t.row(i));
    }
    for r in 0..new_rows.rows() {
        out.row_mut(from + r).copy_from_slice(new_rows.row(r));
    }
    *t = out;
}

/// One block's forward pass restricted to output rows `[from, n)`, reading
/// context rows from the cached layer input. Mirrors the tape path exactly:
/// same kernels, same per-row operation order.
fn block_forward_rows<S: Scalar>(
    store: &ParamStore<S>,
    blk: &BlockParams,
    x: &Tensor<S>,
    from: usize,
    w: usize,
) -> Result<Tensor<S>> {
    let n = x.rows();
    let d = x.cols();
    let ctx = from.saturating_sub(w - 1);
    let x_ctx = x.slice_rows(ctx, n)?;
    let g1 = &store.get(blk.ln1_gamma).value;
    let b1 = &store.get(blk.ln1_beta).value;
    let h_ctx = kernels::layer_norm(&x_ctx, g1, b1)?;
    let h_reg = h_ctx.slice_rows(from - ctx, n - ctx)?;

    let q = kernels::add_row_bias(
        &kernels::matmul(&h_reg, &store.get(blk.wq).value)?,
        &store.get(blk.bq).value,
    )?;
    let k = kernels::add_row_bias(
        &kernels::matmul(&h_ctx, &store.get(blk.wk).value)?,
        &store.get(blk.bk).value,
    )?;
    let v = kernels::add_row_bias(
        &kernels::matmul(&h_ctx, &store.get(blk.wv).value)?,
        &store.get(blk.bv).value,
    )?;

    let nh = blk.n_heads();
    let dh = blk.head_dim();
    let scale = S::from_f64_c((dh as f64).sqrt().recip());
    let region = n - from;
    let mut att = Tensor::zeros(&[region, d]);
    for hi in 0..nh {
        let (lo, hiw) = (hi * dh, (hi + 1) * dh);
        let qh = q.slice_cols(lo, hiw)?;
        let kh = k.slice_cols(lo, hiw)?;
        let vh = v.slice_cols(lo, hiw)?;
        for r in 0..region {
            let i = from + r;
            let jlo = i.saturating_sub(w - 1);
            // Scores over the window, ascending in j.
            let mut scores: Vec<S> = Vec::with_capacity(i - jlo + 1);
            for j in jlo..=i {
                let mut dot = S::zero();
                for (&a, &b) in qh.row(r).iter().zip(kh.row(j - ctx).iter()) {
                    dot += a * b;
                }
                scores.push(dot * scale);
            }
            let mut m = scores[0];
            for &s in &scores {
                if s > m {
                    m = s;
                }
            }
            let mut sum = S::zero();
            for s in scores.iter_mut() {
                *s = (*s - m).exp();
                sum += *s;
            }
            let orow = &mut att.row_mut(r)[lo..hiw];
            for (idx, j) in (jlo..=i).enumerate() {
                let wgt = scores[idx] / sum;
                orow.iter_mut()
                    .zip(vh.row(j - ctx).iter())
                    .for_each(|(a, &b)| *a += wgt * b);
            }
        }
    }

    let proj = kernels::add_row_bias(
        &kernels::matmul(&att, &store.get(blk.wo).value)?,
        &store.get(blk.bo).value,
    )?;
    let x_reg = x.slice_rows(from, n)?;
    let mut x1 = x_reg;
    add_into(&mut x1, &proj);

    let g2 = &store.get(blk.ln2_gamma).value;
    let b2 = &store.get(blk.ln2_beta).value;
    let h2 = kernels::layer_norm(&x1, g2, b2)?;
    let up = kernels::add_row_bias(
        &kernels::matmul(&h2, &store.get(blk.w_up).value)?,
        &store.get(blk.b_up).value,
    )?;
    let act = kernels::gelu(&up);
    let down = kernels::add_row_bias(
        &kernels::matmul(&act, &store.get(blk.w_down).value)?,
        &store.get(blk.b_down).value,
    )?;
    add_into(&mut x1, &down);
    Ok(x1)
}

fn add_into<S: Scalar>(a: &mut Tensor<S>, b: &Tensor<S>) {
    a.data_mut()
        .iter_mut()
        .zip(b.data().iter())
        .for_each(|(x, &y)| *x += y);
}

/// Reconcile re-encoded values for already-emitted tokens.
///
/// Rows are compared exactly; differing rows are replaced newest-first until
/// `budget` replacements have been spent, and older disagreements keep their
/// emitted values. Returns the reconciled rows and the retract count.
pub fn reconcile_emitted<S: Scalar>(
    emitted: &Tensor<S>,
    recomputed: &Tensor<S>,
    budget: usize,
) -> Result<(Tensor<S>, usize)> {
    if emitted.shape() != recomputed.shape() {
        return Err(Error::invalid(format!(
            "emitted shape {:?} does not match recomputed {:?}",
            emitted.shape(),
            recomputed.shape()
        )));
    }
    let mut out = emitted.clone();
    let mut retracted = 0usize;
    for i in (0..emitted.rows()).rev() {
        if emitted.row(i) != recomputed.row(i) {
            if retracted < budget {
                out.row_mut(i).copy_from_slice(recomputed.row(i));
                retracted += 1;
            }
        }
    }
    Ok((out, retracted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::test_config;

    fn ramp_frames(n: usize, f: usize) -> Tensor<f32> {
        let data = (0..n * f).map(|i| ((i % 37) as f32) * 0.01 - 0.17).collect();
        Tensor::from_vec(&[n, f], data).unwrap()
    }

    #[test]
    fn streaming_matches_offline_exactly() {
        let enc = Encoder::<f32>::new(test_config(4, 8), 21).unwrap();
        let frames = ramp_frames(120, 4); // 15 tokens
        let offline = enc.encode(&frames, 4).unwrap();

        let cfg = StreamConfig {
            chunk_frames: 24, // 3 tokens per chunk
            unfixed_chunks: 2,
            retract_budget: 5,
            window_tokens: 4,
        };
        let mut stream = EncoderStream::new(&enc, cfg).unwrap();
        let mut committed_rows = 0usize;
        for c in 0..5 {
            let chunk = frames.slice_rows(c * 24, (c + 1) * 24).unwrap();
            let ev = stream.push(&chunk).unwrap();
            assert_eq!(ev.retracted, 0);
            // Committed tokens must equal the offline encoding bit for bit.
            for r in 0..ev.newly_committed.rows() {
                assert_eq!(
                    ev.newly_committed.row(r),
                    offline.row(committed_rows + r),
                    "committed token {} diverged from offline",
                    committed_rows + r
                );
            }
            committed_rows += ev.newly_committed.rows();
        }
        let full = stream.finalize().unwrap();
        assert_eq!(full, offline);
    }

    #[test]
    fn short_final_chunk_and_state_errors() {
        let enc = Encoder::<f32>::new(test_config(4, 8), 21).unwrap();
        let cfg = StreamConfig {
            chunk_frames: 24,
            unfixed_chunks: 2,
            retract_budget: 5,
            window_tokens: 4,
        };
        let frames = ramp_frames(40, 4); // 24 + 16: one full + one short chunk
        let offline = enc.encode(&frames, 4).unwrap();

        let mut stream = EncoderStream::new(&enc, cfg.clone()).unwrap();
        stream.push(&frames.slice_rows(0, 24).unwrap()).unwrap();
        stream.push(&frames.slice_rows(24, 40).unwrap()).unwrap();
        // No pushing after a short chunk.
        assert!(matches!(
            stream.push(&frames.slice_rows(0, 24).unwrap()),
            Err(Error::State(_))
        ));
        let full = stream.finalize().unwrap();
        assert_eq!(full, offline);
        // No finalize or push after finalize.
        assert!(matches!(stream.finalize(), Err(Error::State(_))));

        let mut s2 = EncoderStream::new(&enc, cfg).unwrap();
        s2.finalize().unwrap();
        assert!(matches!(s2.push(&frames.slice_rows(0, 24).unwrap()), Err(Error::State(_))));
    }

    #[test]
    fn empty_stream_finalizes_to_empty_output() {
        let enc = Encoder::<f32>::new(test_config(4, 8), 21).unwrap();
        let mut stream = EncoderStream::new(&enc, StreamConfig::new(4)).unwrap();
        let out = stream.finalize().unwrap();
        assert_eq!(out.shape(), &[0, 8]);
    }

    #[test]
    fn single_short_chunk_equals_offline() {
        let enc = Encoder::<f32>::new(test_config(4, 8), 21).unwrap();
        let frames = ramp_frames(16, 4);
        let offline = enc.encode(&frames, 4).unwrap();
        let mut stream = EncoderStream::new(&enc, StreamConfig::new(4)).unwrap();
        let ev = stream.push(&frames).unwrap();
        // Everything is still unfixed after one chunk.
        assert_eq!(ev.committed_tokens, 0);
        assert_eq!(stream.finalize().unwrap(), offline);
    }

    #[test]
    fn reconcile_respects_budget_newest_first() {
        let emitted = Tensor::from_vec(&[4, 2], vec![0.0f32; 8]).unwrap();
        let mut recomputed = emitted.clone();
        // Rows 0, 2, 3 disagree.
        recomputed.row_mut(0)[0] = 9.0;
        recomputed.row_mut(2)[1] = 5.0;
        recomputed.row_mut(3)[0] = 7.0;
        let (out, n) = reconcile_emitted(&emitted, &recomputed, 2).unwrap();
        assert_eq!(n, 2);
        // Newest disagreements (rows 3 then 2) were retracted; row 0 kept.
        assert_eq!(out.row(3), recomputed.row(3));
        assert_eq!(out.row(2), recomputed.row(2));
        assert_eq!(out.row(0), emitted.row(0));

        let (out_all, n_all) = reconcile_emitted(&emitted, &recomputed, 10).unwrap();
        assert_eq!(n_all, 3);
        assert_eq!(out_all, recomputed);

        let (out_none, n_none) = reconcile_emitted(&emitted, &emitted, 10).unwrap();
        assert_eq!(n_none, 0);
        assert_eq!(out_none, emitted);
    }

    #[test]
    fn chunk_validation() {
        let enc = Encoder::<f32>::new(test_config(4, 8), 21).unwrap();
        let mut stream = EncoderStream::new(&enc, StreamConfig::new(4)).unwrap();
        // Wrong width.
        assert!(stream.push(&Tensor::zeros(&[10, 3])).is_err());
        // Empty.
        assert!(stream.push(&Tensor::zeros(&[0, 4])).is_err());
        // Oversized.
        assert!(stream.push(&Tensor::zeros(&[201, 4])).is_err());
    }
}
