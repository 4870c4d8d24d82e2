//! Slot-filling aligner model.
//!
//! A transcript is laid out as token ids with a timestamp-slot token inserted
//! after each requested word (once for start, once for end). The model sees
//! one causal stream: encoded audio tokens first, then the augmented
//! transcript. Logits at slot positions are scored against discretized gold
//! frame indices at the same positions (no shift), and decoding fills every
//! slot in a single forward pass.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::BlockParams;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::kernels;
use crate::mask::AttnMask;
use crate::param::{uniform_init, Bindings, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::synth::WordSpan;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignerConfig {
    /// Duration of one encoded token (and one timestamp class) in ms.
    pub frame_ms: u32,
    /// Maximum supported audio span in ms; fixes the class count.
    pub max_audio_ms: u64,
    /// Number of distinct text token ids; the slot token gets the next id.
    pub text_vocab: usize,
    pub d_model: usize,
    /// Transformer blocks in the language-model stack.
    pub n_layers: usize,
    pub n_heads: usize,
    /// Combined audio + text sequence length cap.
    pub max_seq: usize,
    pub encoder: EncoderConfig,
}

impl AlignerConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.frame_ms == 0 {
            return Err(Error::config("frame_ms must be positive"));
        }
        if self.max_audio_ms == 0 || self.max_audio_ms % self.frame_ms as u64 != 0 {
            return Err(Error::config(format!(
                "max_audio_ms {} must be a positive multiple of frame_ms {}",
                self.max_audio_ms, self.frame_ms
            )));
        }
        if self.text_vocab == 0 {
            return Err(Error::config("text_vocab must be positive"));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must divide evenly into {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.encoder.d_model != self.d_model {
            return Err(Error::config(format!(
                "encoder width {} must match model width {}",
                self.encoder.d_model, self.d_model
            )));
        }
        if self.max_seq == 0 {
            return Err(Error::config("max_seq must be positive"));
        }
        Ok(())
    }

    /// Number of timestamp classes: one per frame of the maximum span.
    pub fn n_classes(&self) -> usize {
        (self.max_audio_ms / self.frame_ms as u64) as usize
    }

    /// Token id reserved for timestamp slots (first id past the text vocab).
    pub fn time_token_id(&self) -> u32 {
        self.text_vocab as u32
    }

    /// Full embedding vocabulary: text ids plus the slot token.
    pub fn token_vocab(&self) -> usize {
        self.text_vocab + 1
    }
}

// ── timestamp discretization ─────────────────────────────────────────────────

/// Map a time in ms to its class index: round-half-up to the nearest frame,
/// then clamp into `[0, n_classes - 1]`.
pub fn discretize(t_ms: i64, frame_ms: u32, n_classes: usize) -> Result<usize> {
    if frame_ms == 0 || n_classes == 0 {
        return Err(Error::invalid("frame_ms and n_classes must be positive"));
    }
    let f = frame_ms as i64;
    // floor((t + f/2) / f) without intermediate fractions: floor((2t + f) / 2f).
    let idx = (2 * t_ms + f).div_euclid(2 * f);
    Ok(idx.clamp(0, n_classes as i64 - 1) as usize)
}

/// Inverse of [`discretize`] up to rounding: class index to time in ms.
pub fn index_to_ms(index: usize, frame_ms: u32) -> i64 {
    index as i64 * frame_ms as i64
}

// ── slot sequences ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotRole {
    Start,
    End,
}

/// One timestamp slot: its absolute position in the combined stream, whether
/// it asks for the owning word's start or end, and the word's index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub position: usize,
    pub role: SlotRole,
    pub owner_word: usize,
}

/// Which words receive timestamp slots.
#[derive(Clone, Debug, PartialEq)]
pub enum SlotPolicy {
    /// Every word gets a start and an end slot.
    All,
    /// Each word is selected independently with probability `p`.
    Random { p: f64 },
    /// Only the listed word indices (both slots each).
    Subset(Vec<usize>),
}

/// Transcript tokens augmented with slot tokens, plus slot records. Built
/// text-only (`audio_len == 0`); attach the audio span before use with
/// [`SlotSequence::with_audio_span`].
#[derive(Clone, Debug, PartialEq)]
pub struct SlotSequence {
    /// Length of the leading audio-token span.
    pub audio_len: usize,
    /// Text stream: word tokens with slot tokens interleaved.
    pub text_tokens: Vec<u32>,
    /// Slots in ascending position order; positions are absolute within
    /// audio + text.
    pub slots: Vec<Slot>,
    /// Source words (token ids per word), kept for pairing predictions back
    /// to words.
    pub words: Vec<Vec<u32>>,
}

impl SlotSequence {
    pub fn total_len(&self) -> usize {
        self.audio_len + self.text_tokens.len()
    }

    /// Re-anchor the sequence after `n` leading audio tokens.
    pub fn with_audio_span(mut self, n: usize) -> Self {
        let shift = n as i64 - self.audio_len as i64;
        for s in &mut self.slots {
            s.position = (s.position as i64 + shift) as usize;
        }
        self.audio_len = n;
        self
    }

    /// Structural checks: slot positions ascending, inside the text span,
    /// holding the slot token, and exactly covering its occurrences.
    pub fn validate(&self, time_token_id: u32) -> Result<()> {
        let mut prev: Option<usize> = None;
        for s in &self.slots {
            if s.position < self.audio_len || s.position >= self.total_len() {
                return Err(Error::invalid(format!(
                    "slot position {} outside text span [{}, {})",
                    s.position,
                    self.audio_len,
                    self.total_len()
                )));
            }
            if self.text_tokens[s.position - self.audio_len] != time_token_id {
                return Err(Error::invalid(format!(
                    "slot position {} does not hold the slot token",
                    s.position
                )));
            }
            if let Some(p) = prev {
                if s.position <= p {
                    return Err(Error::invalid("slot positions must be strictly ascending"));
                }
            }
            if s.owner_word >= self.words.len() {
                return Err(Error::invalid(format!("slot owner {} out of range", s.owner_word)));
            }
            prev = Some(s.position);
        }
        let occurrences = self.text_tokens.iter().filter(|&&t| t == time_token_id).count();
        if occurrences != self.slots.len() {
            return Err(Error::invalid(format!(
                "{} slot tokens in text but {} slot records",
                occurrences,
                self.slots.len()
            )));
        }
        Ok(())
    }
}

/// Lay out the augmented transcript: each word's tokens, then (for selected
/// words) a start slot token and an end slot token. `rng` is consulted only
/// by the random policy.
pub fn build_slot_sequence(
    words: &[Vec<u32>],
    time_token_id: u32,
    policy: &SlotPolicy,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<SlotSequence> {
    if words.is_empty() {
        return Err(Error::invalid("cannot build a slot sequence over zero words"));
    }
    if words.iter().any(|w| w.is_empty()) {
        return Err(Error::invalid("every word needs at least one token"));
    }
    let selected: Vec<bool> = match policy {
        SlotPolicy::All => vec![true; words.len()],
        SlotPolicy::Random { p } => {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::invalid(format!("slot probability {} outside [0, 1]", p)));
            }
            let rng = rng
                .as_deref_mut()
                .ok_or_else(|| Error::invalid("random slot policy needs an RNG"))?;
            words.iter().map(|_| rng.random::<f64>() < *p).collect()
        }
        SlotPolicy::Subset(indices) => {
            let mut sel = vec![false; words.len()];
            for &i in indices {
                if i >= words.len() {
                    return Err(Error::invalid(format!(
                        "subset index {} out of range for {} words",
                        i,
                        words.len()
                    )));
                }
                if sel[i] {
                    return Err(Error::invalid(format!("duplicate subset index {}", i)));
                }
                sel[i] = true;
            }
            sel
        }
    };

    let mut text_tokens = Vec::new();
    let mut slots = Vec::new();
    for (i, word) in words.iter().enumerate() {
        text_tokens.extend_from_slice(word);
        if selected[i] {
            for role in [SlotRole::Start, SlotRole::End] {
                text_tokens.push(time_token_id);
                slots.push(Slot { position: text_tokens.len() - 1, role, owner_word: i });
            }
        }
    }
    Ok(SlotSequence { audio_len: 0, text_tokens, slots, words: words.to_vec() })
}

/// A sequence with exactly one slot (for the autoregressive reference
/// decoder): all words' tokens, one slot token after the chosen word.
pub fn build_single_slot_sequence(
    words: &[Vec<u32>],
    time_token_id: u32,
    word_idx: usize,
    role: SlotRole,
) -> Result<SlotSequence> {
    if words.is_empty() {
        return Err(Error::invalid("cannot build a slot sequence over zero words"));
    }
    if word_idx >= words.len() {
        return Err(Error::invalid(format!("word index {} out of range", word_idx)));
    }
    let mut text_tokens = Vec::new();
    let mut slots = Vec::new();
    for (i, word) in words.iter().enumerate() {
        text_tokens.extend_from_slice(word);
        if i == word_idx {
            text_tokens.push(time_token_id);
            slots.push(Slot { position: text_tokens.len() - 1, role, owner_word: i });
        }
    }
    Ok(SlotSequence { audio_len: 0, text_tokens, slots, words: words.to_vec() })
}

// ── training targets ─────────────────────────────────────────────────────────

/// Per-position class targets and loss mask over the combined stream.
/// Unmasked positions carry target 0 and contribute nothing to the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestampTargets {
    pub target_index: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

/// Discretize gold boundaries into per-slot-position targets. Positions are
/// scored against their own targets — no shift. A sequence with zero slots
/// yields an all-false mask; callers must not train on it.
pub fn make_targets(
    seq: &SlotSequence,
    gold: &[WordSpan],
    cfg: &AlignerConfig,
) -> Result<TimestampTargets> {
    let len = seq.total_len();
    let mut target_index = vec![0usize; len];
    let mut loss_mask = vec![false; len];
    let n_classes = cfg.n_classes();
    for slot in &seq.slots {
        let span = gold.get(slot.owner_word).ok_or_else(|| {
            Error::invalid(format!(
                "no gold span for word {} ({} spans given)",
                slot.owner_word,
                gold.len()
            ))
        })?;
        let t_ms = match slot.role {
            SlotRole::Start => span.start_ms,
            SlotRole::End => span.end_ms,
        };
        target_index[slot.position] = discretize(t_ms, cfg.frame_ms, n_classes)?;
        loss_mask[slot.position] = true;
    }
    Ok(TimestampTargets { target_index, loss_mask })
}

/// Mean cross-entropy of `logits` against slot targets (non-slot rows are
/// ignored). Errors when the mask has no slots.
pub fn training_loss<S: Scalar>(logits: &Tensor<S>, targets: &TimestampTargets) -> Result<S> {
    kernels::slot_cross_entropy(logits, &targets.target_index, &targets.loss_mask)
}

// ── model ────────────────────────────────────────────────────────────────────

/// One slot's decoded timestamp class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotPrediction {
    pub owner_word: usize,
    pub role: SlotRole,
    pub class_index: usize,
}

/// Encoder + language-model stack with a timestamp classification head.
pub struct AlignerModel<S> {
    pub cfg: AlignerConfig,
    pub(crate) store: ParamStore<S>,
    pub(crate) enc: EncoderParams,
    emb: ParamId,
    pos: ParamId,
    blocks: Vec<BlockParams>,
    ln_f_gamma: ParamId,
    ln_f_beta: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    forward_passes: AtomicU64,
}

impl<S: Scalar> AlignerModel<S> {
    pub fn init(cfg: AlignerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EncoderParams::init(&mut store, &cfg.encoder, "enc", &mut rng)?;
        let d = cfg.d_model;
        let emb = store.add("lm.emb", uniform_init(&[cfg.token_vocab(), d], d, &mut rng))?;
        let pos = store.add("lm.pos", uniform_init(&[cfg.max_seq, d], d, &mut rng))?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            blocks.push(BlockParams::init(
                &mut store,
                d,
                cfg.n_heads,
                &format!("lm.blk{}", l),
                &mut rng,
            )?);
        }
        let ln_f_gamma = store.add("lm.ln_f_gamma", Tensor::filled(&[d], S::one()))?;
        let ln_f_beta = store.add("lm.ln_f_beta", Tensor::zeros(&[d]))?;
        let head_w = store.add("lm.head_w", uniform_init(&[d, cfg.n_classes()], d, &mut rng))?;
        let head_b = store.add("lm.head_b", Tensor::zeros(&[cfg.n_classes()]))?;
        Ok(AlignerModel {
            cfg,
            store,
            enc,
            emb,
            pos,
            blocks,
            ln_f_gamma,
            ln_f_beta,
            head_w,
            head_b,
            forward_passes: AtomicU64::new(0),
        })
    }

    /// Cumulative count of forward passes (offline decode counts one each).
    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    /// Record the language-model stack on a tape: audio tokens and embedded
    /// text in one causal stream, ending in `[L, n_classes]` logits.
    pub(crate) fn lm_on_tape(
        &self,
        tape: &mut Tape<S>,
        bindings: &mut Bindings,
        audio: Var,
        seq: &SlotSequence,
    ) -> Result<Var> {
        seq.validate(self.cfg.time_token_id())?;
        let ta = tape.value(audio).rows();
        if tape.value(audio).cols() != self.cfg.d_model {
            return Err(Error::invalid(format!(
                "audio token width {} does not match model width {}",
                tape.value(audio).cols(),
                self.cfg.d_model
            )));
        }
        if seq.audio_len != ta {
            return Err(Error::invalid(format!(
                "sequence expects {} audio tokens, got {}",
                seq.audio_len, ta
            )));
        }
        if seq.text_tokens.is_empty() {
            return Err(Error::invalid("empty text stream"));
        }
        let l = seq.total_len();
        if l > self.cfg.max_seq {
            return Err(Error::capacity(format!(
                "sequence length {} exceeds max_seq {}",
                l, self.cfg.max_seq
            )));
        }

        let vocab = self.cfg.token_vocab();
        let mut ids = Vec::with_capacity(seq.text_tokens.len());
        for &t in &seq.text_tokens {
            let id = t as usize;
            if id >= vocab {
                return Err(Error::invalid(format!("token id {} outside vocab {}", id, vocab)));
            }
            ids.push(id);
        }

        let emb = bindings.bind(tape, &self.store, self.emb)?;
        let text = tape.embedding(emb, &ids)?;
        let x0 = if ta > 0 { tape.concat_rows(&[audio, text])? } else { text };
        let pos_all = bindings.bind(tape, &self.store, self.pos)?;
        let pos_l = tape.slice_rows(pos_all, 0, l)?;
        let mut x = tape.add(x0, pos_l)?;

        let mask = AttnMask::full_causal(l)?;
        for block in &self.blocks {
            x = block.forward(tape, &self.store, bindings, x, &mask)?;
        }
        let gf = bindings.bind(tape, &self.store, self.ln_f_gamma)?;
        let bf = bindings.bind(tape, &self.store, self.ln_f_beta)?;
        let h = tape.layer_norm(x, gf, bf)?;
        let hw = bindings.bind(tape, &self.store, self.head_w)?;
        let hb = bindings.bind(tape, &self.store, self.head_b)?;
        tape.matmul(h, hw).and_then(|v| tape.add_row_bias(v, hb))
    }

    /// Full graph from raw frames: encoder and language model on one tape.
    /// `seq` must still be text-only; the audio span is attached here.
    pub(crate) fn graph_from_frames(
        &self,
        tape: &mut Tape<S>,
        bindings: &mut Bindings,
        frames: &Tensor<S>,
        window_tokens: usize,
        seq: SlotSequence,
    ) -> Result<(Var, SlotSequence)> {
        let audio = self.enc.encode_on_tape(
            tape,
            &self.store,
            bindings,
            &self.cfg.encoder,
            frames,
            window_tokens,
        )?;
        let ta = tape.value(audio).rows();
        let seq = seq.with_audio_span(ta);
        let logits = self.lm_on_tape(tape, bindings, audio, &seq)?;
        Ok((logits, seq))
    }

    /// Single forward pass over pre-encoded audio tokens. Returns logits for
    /// every position of the combined stream.
    pub fn forward(&self, audio_tokens: &Tensor<S>, seq: &SlotSequence) -> Result<Tensor<S>> {
        if !audio_tokens.is_matrix() {
            return Err(Error::invalid(format!(
                "audio tokens must be 2-D, got {:?}",
                audio_tokens.shape()
            )));
        }
        let mut tape = Tape::new();
        let mut bindings = Bindings::new();
        let audio = tape.leaf(audio_tokens.clone())?;
        let logits = self.lm_on_tape(&mut tape, &mut bindings, audio, seq)?;
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        Ok(tape.value(logits).clone())
    }

    /// Decode every requested slot in one forward pass: encode the frames,
    /// run the combined stream, and argmax each slot position (ties take the
    /// lowest class index). The random policy is a training feature and is
    /// rejected here.
    pub fn nar_decode(
        &self,
        frames: &Tensor<f32>,
        words: &[Vec<u32>],
        policy: &SlotPolicy,
    ) -> Result<Vec<SlotPrediction>> {
        if matches!(policy, SlotPolicy::Random { .. }) {
            return Err(Error::invalid("random slot policy is only for training"));
        }
        let seq = build_slot_sequence(words, self.cfg.time_token_id(), policy, None)?;
        self.decode_sequence(frames, seq)
    }

    /// Decode the slots of a prebuilt (text-only) sequence in one pass.
    pub fn decode_sequence(
        &self,
        frames: &Tensor<f32>,
        seq: SlotSequence,
    ) -> Result<Vec<SlotPrediction>> {
        let mut tape = Tape::new();
        let mut bindings = Bindings::new();
        let window = self.cfg.encoder.window_range.1;
        let frames_s: Tensor<S> = frames.cast();
        let (logits, seq) = self.graph_from_frames(&mut tape, &mut bindings, &frames_s, window, seq)?;
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        let lv = tape.value(logits);
        Ok(seq
            .slots
            .iter()
            .map(|s| SlotPrediction {
                owner_word: s.owner_word,
                role: s.role,
                class_index: kernels::argmax_row(lv, s.position),
            })
            .collect())
    }
}

#[cfg(test)]
pub(crate) fn test_aligner_config() -> AlignerConfig {
    AlignerConfig {
        frame_ms: 80,
        max_audio_ms: 30_000,
        text_vocab: 8,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq: 128,
        encoder: EncoderConfig {
            feat_dim: 4,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            downsample: crate::encoder::DOWNSAMPLE,
            window_range: (2, 100),
            max_tokens: 100,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discretize_rounds_half_up_and_clamps() {
        // 40 ms at 80 ms frames sits exactly between classes 0 and 1.
        assert_eq!(discretize(40, 80, 375).unwrap(), 1);
        assert_eq!(discretize(39, 80, 375).unwrap(), 0);
        assert_eq!(discretize(0, 80, 375).unwrap(), 0);
        assert_eq!(discretize(80, 80, 375).unwrap(), 1);
        assert_eq!(discretize(119, 80, 375).unwrap(), 1);
        assert_eq!(discretize(120, 80, 375).unwrap(), 2);
        // Clamping at both ends.
        assert_eq!(discretize(-500, 80, 375).unwrap(), 0);
        assert_eq!(discretize(10_000_000, 80, 375).unwrap(), 374);
        // 30 s span -> 375 classes; last in-range value maps to 374.
        assert_eq!(discretize(29_940, 80, 375).unwrap(), 374);
        assert!(discretize(0, 0, 10).is_err());
        assert!(discretize(0, 80, 0).is_err());
    }

    #[test]
    fn desk_and_paper_class_counts() {
        let cfg = test_aligner_config();
        assert_eq!(cfg.n_classes(), 375);
        let mut paper = cfg.clone();
        paper.max_audio_ms = 300_000;
        assert_eq!(paper.n_classes(), 3750);
    }

    #[test]
    fn slot_layout_matches_expected_pattern() {
        // Two single-token words, slots everywhere:
        // [w1, T, T, w2, T, T] with slots at 1, 2, 4, 5.
        let words = vec![vec![3u32], vec![5u32]];
        let seq = build_slot_sequence(&words, 8, &SlotPolicy::All, None).unwrap();
        assert_eq!(seq.text_tokens, vec![3, 8, 8, 5, 8, 8]);
        let positions: Vec<usize> = seq.slots.iter().map(|s| s.position).collect();
        assert_eq!(positions, vec![1, 2, 4, 5]);
        assert_eq!(seq.slots[0].role, SlotRole::Start);
        assert_eq!(seq.slots[1].role, SlotRole::End);
        assert_eq!(seq.slots[2].owner_word, 1);
        seq.validate(8).unwrap();

        // Attaching an audio span shifts slot positions.
        let shifted = seq.with_audio_span(10);
        let positions: Vec<usize> = shifted.slots.iter().map(|s| s.position).collect();
        assert_eq!(positions, vec![11, 12, 14, 15]);
        shifted.validate(8).unwrap();
    }

    #[test]
    fn subset_policy_selects_only_listed_words() {
        let words = vec![vec![1u32], vec![2], vec![3]];
        let seq =
            build_slot_sequence(&words, 9, &SlotPolicy::Subset(vec![1]), None).unwrap();
        assert_eq!(seq.text_tokens, vec![1, 2, 9, 9, 3]);
        assert_eq!(seq.slots.len(), 2);
        assert!(seq.slots.iter().all(|s| s.owner_word == 1));
        assert!(build_slot_sequence(&words, 9, &SlotPolicy::Subset(vec![3]), None).is_err());
        assert!(build_slot_sequence(&words, 9, &SlotPolicy::Subset(vec![1, 1]), None).is_err());
    }

    #[test]
    fn random_policy_needs_rng_and_valid_p() {
        let words = vec![vec![1u32], vec![2]];
        assert!(build_slot_sequence(&words, 9, &SlotPolicy::Random { p: 0.5 }, None).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(
            build_slot_sequence(&words, 9, &SlotPolicy::Random { p: 1.5 }, Some(&mut rng)).is_err()
        );
        let seq =
            build_slot_sequence(&words, 9, &SlotPolicy::Random { p: 1.0 }, Some(&mut rng)).unwrap();
        assert_eq!(seq.slots.len(), 4);
        let seq0 =
            build_slot_sequence(&words, 9, &SlotPolicy::Random { p: 0.0 }, Some(&mut rng)).unwrap();
        assert!(seq0.slots.is_empty());
    }

    #[test]
    fn empty_words_rejected() {
        assert!(build_slot_sequence(&[], 9, &SlotPolicy::All, None).is_err());
        assert!(build_slot_sequence(&[vec![]], 9, &SlotPolicy::All, None).is_err());
    }

    #[test]
    fn targets_align_with_slots() {
        let cfg = test_aligner_config();
        let words = vec![vec![1u32], vec![2]];
        let gold = vec![
            WordSpan { token_id: 1, start_ms: 100, end_ms: 240 },
            WordSpan { token_id: 2, start_ms: 400, end_ms: 720 },
        ];
        let seq = build_slot_sequence(&words, cfg.time_token_id(), &SlotPolicy::All, None)
            .unwrap()
            .with_audio_span(4);
        let t = make_targets(&seq, &gold, &cfg).unwrap();
        assert_eq!(t.target_index.len(), seq.total_len());
        // Slot positions: 5, 6, 8, 9 after the 4-token audio span.
        assert!(t.loss_mask[5] && t.loss_mask[6] && t.loss_mask[8] && t.loss_mask[9]);
        assert_eq!(t.loss_mask.iter().filter(|&&m| m).count(), 4);
        assert_eq!(t.target_index[5], 1); // 100 ms -> class 1
        assert_eq!(t.target_index[6], 3); // 240 ms -> class 3
        assert_eq!(t.target_index[8], 5); // 400 ms -> class 5
        assert_eq!(t.target_index[9], 9); // 720 ms -> class 9
        // Non-slot positions are unmasked.
        assert!(!t.loss_mask[0] && !t.loss_mask[4] && !t.loss_mask[7]);
    }

    #[test]
    fn targets_with_zero_slots_are_all_unmasked() {
        let cfg = test_aligner_config();
        let words = vec![vec![1u32]];
        let seq =
            build_slot_sequence(&words, cfg.time_token_id(), &SlotPolicy::Subset(vec![]), None)
                .unwrap();
        let gold = vec![WordSpan { token_id: 1, start_ms: 0, end_ms: 80 }];
        let t = make_targets(&seq, &gold, &cfg).unwrap();
        assert!(t.loss_mask.iter().all(|&m| !m));
        // Training on it must fail loudly.
        let logits = Tensor::<f32>::zeros(&[seq.total_len(), cfg.n_classes()]);
        assert!(training_loss(&logits, &t).is_err());
    }

    #[test]
    fn targets_require_gold_for_every_slot_owner() {
        let cfg = test_aligner_config();
        let words = vec![vec![1u32], vec![2]];
        let seq = build_slot_sequence(&words, cfg.time_token_id(), &SlotPolicy::All, None).unwrap();
        let gold = vec![WordSpan { token_id: 1, start_ms: 0, end_ms: 80 }];
        assert!(make_targets(&seq, &gold, &cfg).is_err());
    }

    #[test]
    fn forward_emits_logits_per_position_and_counts_once() {
        let model = AlignerModel::<f32>::init(test_aligner_config(), 42).unwrap();
        let words = vec![vec![1u32], vec![2]];
        let seq = build_slot_sequence(&words, model.cfg.time_token_id(), &SlotPolicy::All, None)
            .unwrap()
            .with_audio_span(3);
        let audio = Tensor::filled(&[3, 16], 0.05f32);
        let before = model.forward_passes();
        let logits = model.forward(&audio, &seq).unwrap();
        assert_eq!(model.forward_passes(), before + 1);
        assert_eq!(logits.shape(), &[seq.total_len(), model.cfg.n_classes()]);
    }

    #[test]
    fn forward_rejects_mismatched_audio_span() {
        let model = AlignerModel::<f32>::init(test_aligner_config(), 42).unwrap();
        let words = vec![vec![1u32]];
        let seq = build_slot_sequence(&words, model.cfg.time_token_id(), &SlotPolicy::All, None)
            .unwrap()
            .with_audio_span(5);
        let audio = Tensor::filled(&[3, 16], 0.05f32);
        assert!(model.forward(&audio, &seq).is_err());
    }

    #[test]
    fn forward_rejects_overlong_sequences() {
        let mut cfg = test_aligner_config();
        cfg.max_seq = 8;
        let model = AlignerModel::<f32>::init(cfg, 42).unwrap();
        let words = vec![vec![1u32], vec![2], vec![3]];
        let seq = build_slot_sequence(&words, model.cfg.time_token_id(), &SlotPolicy::All, None)
            .unwrap()
            .with_audio_span(0);
        let audio = Tensor::<f32>::zeros(&[0, 16]);
        assert!(matches!(model.forward(&audio, &seq), Err(Error::Capacity(_))));
    }

    #[test]
    fn nar_decode_fills_every_requested_slot_in_one_pass() {
        let model = AlignerModel::<f32>::init(test_aligner_config(), 42).unwrap();
        let frames = Tensor::filled(&[80, 4], 0.1f32); // 10 audio tokens
        let words = vec![vec![1u32], vec![2], vec![3]];
        let before = model.forward_passes();
        let preds = model.nar_decode(&frames, &words, &SlotPolicy::All).unwrap();
        assert_eq!(model.forward_passes() - before, 1);
        assert_eq!(preds.len(), 6);
        assert!(preds.iter().all(|p| p.class_index < model.cfg.n_classes()));

        // Subset decode: two predictions for the chosen word only.
        let before = model.forward_passes();
        let preds = model
            .nar_decode(&frames, &words, &SlotPolicy::Subset(vec![2]))
            .unwrap();
        assert_eq!(model.forward_passes() - before, 1);
        assert_eq!(preds.len(), 2);
        assert!(preds.iter().all(|p| p.owner_word == 2));

        // Random policy is rejected at decode time.
        assert!(model
            .nar_decode(&frames, &words, &SlotPolicy::Random { p: 0.5 })
            .is_err());
    }

    #[test]
    fn single_slot_sequence_has_exactly_one_slot() {
        let words = vec![vec![1u32], vec![2]];
        let seq = build_single_slot_sequence(&words, 9, 1, SlotRole::End).unwrap();
        assert_eq!(seq.text_tokens, vec![1, 2, 9]);
        assert_eq!(seq.slots.len(), 1);
        assert_eq!(seq.slots[0].role, SlotRole::End);
        seq.validate(9).unwrap();
    }
}
