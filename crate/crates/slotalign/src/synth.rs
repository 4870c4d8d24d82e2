//! Synthetic speech-like corpus generation.
//!
//! Each vocabulary token has a fixed random unit-norm template vector. An
//! utterance is a frame sequence: per-word template repetitions separated by
//! silence gaps, with Gaussian noise over everything. Word boundaries are the
//! exact gold timestamps, in integer milliseconds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub feat_dim: usize,
    /// Duration of one raw frame in milliseconds.
    pub raw_frame_ms: u32,
    /// Inclusive word duration range in ms; multiples of `raw_frame_ms`.
    pub word_dur_ms: (u32, u32),
    /// Inclusive silence gap range in ms; multiples of `raw_frame_ms`.
    pub gap_dur_ms: (u32, u32),
    /// Inclusive range of words per utterance.
    pub words_per_utt: (usize, usize),
    /// Standard deviation of the additive Gaussian frame noise.
    pub noise_sigma: f64,
    /// Corpus seed; token templates and every utterance derive from it.
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size must be positive"));
        }
        if self.feat_dim == 0 {
            return Err(Error::config("feat_dim must be positive"));
        }
        if self.raw_frame_ms == 0 {
            return Err(Error::config("raw_frame_ms must be positive"));
        }
        let check_range = |name: &str, (lo, hi): (u32, u32), allow_zero: bool| -> Result<()> {
            if lo > hi {
                return Err(Error::config(format!("{} range ({}, {}) has lo > hi", name, lo, hi)));
            }
            if !allow_zero && lo == 0 {
                return Err(Error::config(format!("{} must be positive", name)));
            }
            if lo % self.raw_frame_ms != 0 || hi % self.raw_frame_ms != 0 {
                return Err(Error::config(format!(
                    "{} range ({}, {}) must be multiples of raw_frame_ms {}",
                    name, lo, hi, self.raw_frame_ms
                )));
            }
            Ok(())
        };
        check_range("word_dur_ms", self.word_dur_ms, false)?;
        check_range("gap_dur_ms", self.gap_dur_ms, true)?;
        let (wlo, whi) = self.words_per_utt;
        if wlo == 0 || wlo > whi {
            return Err(Error::config(format!(
                "words_per_utt range ({}, {}) must satisfy 1 <= lo <= hi",
                wlo, whi
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and non-negative"));
        }
        Ok(())
    }

    /// Upper bound on utterance duration in ms.
    pub fn max_utt_ms(&self) -> u64 {
        let (_, whi) = self.words_per_utt;
        let (_, dhi) = self.word_dur_ms;
        let (_, ghi) = self.gap_dur_ms;
        whi as u64 * dhi as u64 + (whi as u64 + 1) * ghi as u64
    }
}

/// One gold word interval: token id plus start/end in integer ms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WordSpan {
    pub token_id: u32,
    pub start_ms: i64,
    pub end_ms: i64,
}

// Serialized as a compact `[token_id, start_ms, end_ms]` triple.
impl Serialize for WordSpan {
    fn serialize<Ser: serde::Serializer>(&self, s: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        (self.token_id, self.start_ms, self.end_ms).serialize(s)
    }
}

impl<'de> Deserialize<'de> for WordSpan {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let (token_id, start_ms, end_ms) = <(u32, i64, i64)>::deserialize(d)?;
        Ok(WordSpan { token_id, start_ms, end_ms })
    }
}

/// One synthetic utterance: raw frames plus gold word spans.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T, feat_dim]` frame matrix.
    pub frames: Tensor<f32>,
    pub words: Vec<WordSpan>,
    /// Duration of one frame row, in ms.
    pub raw_frame_ms: u32,
}

impl Utterance {
    pub fn duration_ms(&self) -> i64 {
        self.frames.rows() as i64 * self.raw_frame_ms as i64
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_ms() as f64 / 1000.0
    }

    /// Transcript as one single-token word per span, ready for slot layout.
    pub fn word_tokens(&self) -> Vec<Vec<u32>> {
        self.words.iter().map(|w| vec![w.token_id]).collect()
    }

    /// Check word spans are ordered, non-overlapping, and inside the audio.
    pub fn validate(&self) -> Result<()> {
        let dur = self.duration_ms();
        let mut prev_end = 0i64;
        for (i, w) in self.words.iter().enumerate() {
            if w.start_ms < prev_end || w.start_ms > w.end_ms || w.end_ms > dur {
                return Err(Error::invalid(format!(
                    "word {} span ({}, {}) violates ordering within {} ms",
                    i, w.start_ms, w.end_ms, dur
                )));
            }
            prev_end = w.end_ms;
        }
        Ok(())
    }
}

// ── seeding ──────────────────────────────────────────────────────────────────

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Independent child seed for a numbered stream under a corpus seed.
pub fn child_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

/// Stream index reserved for token templates; utterance i uses `i + 1`.
const TEMPLATE_STREAM: u64 = 0;

// ── synthesis ────────────────────────────────────────────────────────────────

/// Fixed unit-norm template vector per vocabulary token, derived from the
/// corpus seed alone.
pub fn token_templates(cfg: &SynthConfig) -> Result<Vec<Vec<f32>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(cfg.seed, TEMPLATE_STREAM));
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(cfg.vocab_size);
    for _ in 0..cfg.vocab_size {
        let raw: Vec<f64> = (0..cfg.feat_dim).map(|_| normal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::numeric("degenerate zero-norm template"));
        }
        out.push(raw.iter().map(|v| (v / norm) as f32).collect());
    }
    Ok(out)
}

/// Render one utterance with the given per-utterance RNG. Layout draws come
/// first (word count, then per word: gap, token, duration, then the final
/// gap), followed by one noise draw per frame element in row-major order.
pub fn render_utterance(
    cfg: &SynthConfig,
    templates: &[Vec<f32>],
    id: impl Into<String>,
    rng: &mut ChaCha8Rng,
) -> Result<Utterance> {
    cfg.validate()?;
    if templates.len() != cfg.vocab_size {
        return Err(Error::invalid(format!(
            "{} templates for vocab of {}",
            templates.len(),
            cfg.vocab_size
        )));
    }
    let fpm = cfg.raw_frame_ms; // ms per frame
    let wframes = (cfg.word_dur_ms.0 / fpm, cfg.word_dur_ms.1 / fpm);
    let gframes = (cfg.gap_dur_ms.0 / fpm, cfg.gap_dur_ms.1 / fpm);

    let n_words = rng.random_range(cfg.words_per_utt.0..=cfg.words_per_utt.1);
    struct Piece {
        token: Option<u32>,
        frames: u32,
    }
    let mut pieces = Vec::with_capacity(2 * n_words + 1);
    for _ in 0..n_words {
        pieces.push(Piece { token: None, frames: rng.random_range(gframes.0..=gframes.1) });
        let token = rng.random_range(0..cfg.vocab_size as u32);
        let frames = rng.random_range(wframes.0..=wframes.1);
        pieces.push(Piece { token: Some(token), frames });
    }
    pieces.push(Piece { token: None, frames: rng.random_range(gframes.0..=gframes.1) });

    let total_frames: u32 = pieces.iter().map(|p| p.frames).sum();
    let mut frames = Tensor::<f32>::zeros(&[total_frames as usize, cfg.feat_dim]);
    let mut words = Vec::with_capacity(n_words);
    let mut cursor = 0usize;
    for p in &pieces {
        let n = p.frames as usize;
        if let Some(token) = p.token {
            let template = &templates[token as usize];
            for r in cursor..cursor + n {
                frames.row_mut(r).copy_from_slice(template);
            }
            let start_ms = (cursor as i64) * fpm as i64;
            let end_ms = ((cursor + n) as i64) * fpm as i64;
            words.push(WordSpan { token_id: token, start_ms, end_ms });
        }
        cursor += n;
    }

    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0f64, cfg.noise_sigma)
            .map_err(|e| Error::config(format!("bad noise sigma: {}", e)))?;
        for v in frames.data_mut() {
            *v += noise.sample(rng) as f32;
        }
    }

    let utt = Utterance { id: id.into(), frames, words, raw_frame_ms: fpm };
    utt.validate()?;
    Ok(utt)
}

/// Generate `n` utterances in memory with ids `utt_00000`, `utt_00001`, ...
pub fn synth_corpus(cfg: &SynthConfig, n: usize) -> Result<Vec<Utterance>> {
    if n == 0 {
        return Err(Error::invalid("corpus size must be at least 1"));
    }
    let templates = token_templates(cfg)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(cfg.seed, 1 + i as u64));
        out.push(render_utterance(cfg, &templates, format!("utt_{:05}", i), &mut rng)?);
    }
    Ok(out)
}

/// Simulate noisy pseudo-labels: shift each boundary by `bias_ms` plus
/// Gaussian noise of `sigma_ms`, round to integer ms, clamp into the
/// utterance, and swap within a word if start crosses end.
pub fn corrupt_labels(
    utt: &Utterance,
    sigma_ms: f64,
    bias_ms: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<WordSpan>> {
    if !(sigma_ms >= 0.0 && sigma_ms.is_finite() && bias_ms.is_finite()) {
        return Err(Error::invalid("sigma_ms must be non-negative and both shifts finite"));
    }
    let normal = Normal::new(0.0f64, sigma_ms)
        .map_err(|e| Error::invalid(format!("bad sigma: {}", e)))?;
    let dur = utt.duration_ms();
    let mut out = Vec::with_capacity(utt.words.len());
    for w in &utt.words {
        let shift_start = (bias_ms + normal.sample(rng)).round() as i64;
        let shift_end = (bias_ms + normal.sample(rng)).round() as i64;
        let mut s = (w.start_ms + shift_start).clamp(0, dur);
        let mut e = (w.end_ms + shift_end).clamp(0, dur);
        if s > e {
            std::mem::swap(&mut s, &mut e);
        }
        out.push(WordSpan { token_id: w.token_id, start_ms: s, end_ms: e });
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) fn tiny_config() -> SynthConfig {
    SynthConfig {
        vocab_size: 8,
        feat_dim: 4,
        raw_frame_ms: 10,
        word_dur_ms: (80, 160),
        gap_dur_ms: (0, 80),
        words_per_utt: (1, 3),
        noise_sigma: 0.1,
        seed: 99,
    }
}
