//! Frame encoder: 8x temporal downsampling by frame stacking, a linear
//! projection into model width, learned positions, and a stack of causal
//! windowed-attention blocks. 10 ms input frames become 80 ms tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::BlockParams;
use crate::error::{Error, Result};
use crate::mask::AttnMask;
use crate::param::{uniform_init, Bindings, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Fixed downsampling factor: 8 consecutive frames form one token.
pub const DOWNSAMPLE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Width of one input frame.
    pub feat_dim: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Downsampling factor; must equal [`DOWNSAMPLE`]. Kept explicit so the
    /// value is visible in serialized configs.
    pub downsample: usize,
    /// Inclusive range of attention window widths, in tokens.
    pub window_range: (usize, usize),
    /// Maximum encoded sequence length (position table size).
    pub max_tokens: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample != DOWNSAMPLE {
            return Err(Error::config(format!(
                "downsample must be {}, got {}",
                DOWNSAMPLE, self.downsample
            )));
        }
        if self.feat_dim == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must divide evenly into {} heads",
                self.d_model, self.n_heads
            )));
        }
        let (lo, hi) = self.window_range;
        if lo < 1 || lo > hi || hi > 512 {
            return Err(Error::config(format!(
                "window range ({}, {}) must satisfy 1 <= lo <= hi <= 512",
                lo, hi
            )));
        }
        if self.max_tokens == 0 {
            return Err(Error::config("max_tokens must be positive"));
        }
        Ok(())
    }

    /// Number of tokens produced from `n_frames` input frames (floor).
    pub fn token_count(&self, n_frames: usize) -> usize {
        n_frames / DOWNSAMPLE
    }
}

/// Causal window mask over `n_tokens` positions: token i attends to token j
/// iff `i - window_tokens < j <= i`.
pub fn build_window_mask(n_tokens: usize, window_tokens: usize) -> Result<AttnMask> {
    if n_tokens == 0 {
        return Err(Error::invalid("cannot build a mask over zero tokens"));
    }
    AttnMask::windowed(n_tokens, window_tokens)
}

/// Parameter ids for the encoder stack.
pub struct EncoderParams {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
}

impl EncoderParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &EncoderConfig,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let stacked = DOWNSAMPLE * cfg.feat_dim;
        let proj_w = store.add(
            format!("{}.proj_w", prefix),
            uniform_init(&[stacked, cfg.d_model], stacked, rng),
        )?;
        let proj_b = store.add(format!("{}.proj_b", prefix), Tensor::zeros(&[cfg.d_model]))?;
        let pos = store.add(
            format!("{}.pos", prefix),
            uniform_init(&[cfg.max_tokens, cfg.d_model], cfg.d_model, rng),
        )?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            blocks.push(BlockParams::init(
                store,
                cfg.d_model,
                cfg.n_heads,
                &format!("{}.blk{}", prefix, l),
                rng,
            )?);
        }
        Ok(EncoderParams { proj_w, proj_b, pos, blocks })
    }

    /// Record the encoder forward pass on a tape. `frames` is `[T, feat_dim]`
    /// with `T >= 8`; any remainder after the last full group of 8 frames is
    /// dropped. Returns a `[T/8, d_model]` token variable.
    pub fn encode_on_tape<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        bindings: &mut Bindings,
        cfg: &EncoderConfig,
        frames: &Tensor<S>,
        window_tokens: usize,
    ) -> Result<Var> {
        if !frames.is_matrix() || frames.cols() != cfg.feat_dim {
            return Err(Error::invalid(format!(
                "frames must be [T, {}], got {:?}",
                cfg.feat_dim,
                frames.shape()
            )));
        }
        let t = cfg.token_count(frames.rows());
        if t == 0 {
            return Err(Error::invalid(format!(
                "need at least {} frames for one token, got {}",
                DOWNSAMPLE,
                frames.rows()
            )));
        }
        if t > cfg.max_tokens {
            return Err(Error::capacity(format!(
                "{} tokens exceed the configured maximum {}",
                t, cfg.max_tokens
            )));
        }
        let (lo, hi) = cfg.window_range;
        if window_tokens < lo || window_tokens > hi {
            return Err(Error::invalid(format!(
                "window {} outside configured range ({}, {})",
                window_tokens, lo, hi
            )));
        }

        // Stack groups of 8 frames into single rows, then project.
        let trimmed = frames.slice_rows(0, t * DOWNSAMPLE)?;
        let x = tape.leaf(trimmed)?;
        let stacked = tape.reshape(x, &[t, DOWNSAMPLE * cfg.feat_dim])?;
        let pw = bindings.bind(tape, store, self.proj_w)?;
        let pb = bindings.bind(tape, store, self.proj_b)?;
        let projected = tape.matmul(stacked, pw).and_then(|v| tape.add_row_bias(v, pb))?;
        let pos_all = bindings.bind(tape, store, self.pos)?;
        let pos_t = tape.slice_rows(pos_all, 0, t)?;
        let mut h = tape.add(projected, pos_t)?;

        let mask = build_window_mask(t, window_tokens)?;
        for block in &self.blocks {
            h = block.forward(tape, store, bindings, h, &mask)?;
        }
        Ok(h)
    }
}

/// Standalone encoder owning its parameters; the aligner embeds
/// [`EncoderParams`] in its own store instead.
pub struct Encoder<S> {
    pub cfg: EncoderConfig,
    pub store: ParamStore<S>,
    pub params: EncoderParams,
}

impl<S: Scalar> Encoder<S> {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = EncoderParams::init(&mut store, &cfg, "enc", &mut rng)?;
        Ok(Encoder { cfg, store, params })
    }

    /// Offline encode: run the full forward pass and return token vectors.
    pub fn encode(&self, frames: &Tensor<S>, window_tokens: usize) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let mut bindings = Bindings::new();
        let out = self.params.encode_on_tape(
            &mut tape,
            &self.store,
            &mut bindings,
            &self.cfg,
            frames,
            window_tokens,
        )?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
pub(crate) fn test_config(feat_dim: usize, d_model: usize) -> EncoderConfig {
    EncoderConfig {
        feat_dim,
        d_model,
        n_layers: 2,
        n_heads: 2,
        downsample: DOWNSAMPLE,
        window_range: (2, 100),
        max_tokens: 400,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut cfg = test_config(4, 8);
        assert!(cfg.validate().is_ok());
        cfg.downsample = 4;
        assert!(cfg.validate().is_err());
        cfg.downsample = DOWNSAMPLE;
        cfg.window_range = (0, 10);
        assert!(cfg.validate().is_err());
        cfg.window_range = (5, 600);
        assert!(cfg.validate().is_err());
        cfg.window_range = (8, 4);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_downsamples_by_eight() {
        let enc = Encoder::<f32>::new(test_config(4, 8), 11).unwrap();
        // 83 frames -> 10 tokens, remainder 3 frames dropped.
        let frames = Tensor::filled(&[83, 4], 0.1f32);
        let out = enc.encode(&frames, 4).unwrap();
        assert_eq!(out.shape(), &[10, 8]);
        // Dropping the remainder explicitly changes nothing.
        let trimmed = frames.slice_rows(0, 80).unwrap();
        let out2 = enc.encode(&trimmed, 4).unwrap();
        assert_eq!(out, out2);
    }

    #[test]
    fn encode_rejects_too_few_frames() {
        let enc = Encoder::<f32>::new(test_config(4, 8), 11).unwrap();
        let frames = Tensor::filled(&[7, 4], 0.1f32);
        assert!(enc.encode(&frames, 4).is_err());
    }

    #[test]
    fn encode_rejects_out_of_range_window() {
        let enc = Encoder::<f32>::new(test_config(4, 8), 11).unwrap();
        let frames = Tensor::filled(&[16, 4], 0.1f32);
        assert!(enc.encode(&frames, 1).is_err());
        assert!(enc.encode(&frames, 101).is_err());
        assert!(enc.encode(&frames, 2).is_ok());
    }

    #[test]
    fn encode_enforces_capacity() {
        let mut cfg = test_config(4, 8);
        cfg.max_tokens = 5;
        let enc = Encoder::<f32>::new(cfg, 11).unwrap();
        let frames = Tensor::filled(&[48, 4], 0.1f32);
        assert!(matches!(enc.encode(&frames, 4), Err(Error::Capacity(_))));
    }

    #[test]
    fn window_restricts_long_range_influence() {
        // With a window of 2 tokens, perturbing token 0's frames must leave
        // token 5 unchanged after a single layer... but stacked layers widen
        // the receptive field, so check influence distance > n_layers * (w-1).
        let enc = Encoder::<f64>::new(test_config(4, 8), 5).unwrap();
        let mut frames = Tensor::filled(&[64, 4], 0.05f64);
        let base = enc.encode(&frames, 2).unwrap();
        for v in frames.row_mut(0) {
            *v = 3.0;
        }
        let changed = enc.encode(&frames, 2).unwrap();
        // 2 layers at w=2: receptive field reaches back 2 tokens, so token 7
        // (distance 7) cannot see token 0.
        assert_eq!(base.row(7), changed.row(7));
        // Token 0 itself obviously changes.
        assert_ne!(base.row(0), changed.row(0));
    }
}
