//! One flat run configuration covering corpus synthesis, model shape, and
//! training, with two presets ("desk" and "paper"), a plain key=value file
//! format, and a canonical string whose hash fingerprints every artifact.

use std::path::Path;

use crate::aligner::AlignerConfig;
use crate::encoder::{EncoderConfig, DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::hashing::{fnv1a64, hex64};
use crate::synth::SynthConfig;
use crate::train::TrainHyper;

/// Every tunable of a run. Field semantics match the structs they feed (see
/// the constructor methods); times are ms unless suffixed otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    // Corpus synthesis.
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub raw_frame_ms: u32,
    pub word_dur_lo_ms: u32,
    pub word_dur_hi_ms: u32,
    pub gap_lo_ms: u32,
    pub gap_hi_ms: u32,
    pub words_lo: usize,
    pub words_hi: usize,
    pub noise_sigma: f64,
    // Model shape.
    pub frame_ms: u32,
    pub max_audio_ms: u64,
    pub d_model: usize,
    pub enc_layers: usize,
    pub lm_layers: usize,
    pub n_heads: usize,
    pub window_lo: usize,
    pub window_hi: usize,
    pub max_seq: usize,
    // Training.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs ramping linearly to `lr` before cosine decay begins.
    pub warmup_epochs: usize,
    pub slot_prob: f64,
    /// Early-stop target for held-out accuracy; `None` disables it.
    pub target_aas_ms: Option<f64>,
}

impl RunConfig {
    /// Small-footprint preset: 30 s audio ceiling (375 timestamp classes),
    /// trainable on a laptop CPU in minutes.
    pub fn desk() -> Self {
        RunConfig {
            preset: "desk".into(),
            seed: 42,
            vocab_size: 32,
            feat_dim: 16,
            raw_frame_ms: 10,
            word_dur_lo_ms: 160,
            word_dur_hi_ms: 480,
            gap_lo_ms: 0,
            gap_hi_ms: 240,
            words_lo: 2,
            words_hi: 8,
            noise_sigma: 0.1,
            frame_ms: 80,
            max_audio_ms: 30_000,
            d_model: 128,
            enc_layers: 2,
            lm_layers: 4,
            n_heads: 4,
            // 1 s .. 8 s of context in 80 ms tokens.
            window_lo: 13,
            window_hi: 100,
            max_seq: 512,
            epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            warmup_epochs: 0,
            slot_prob: 0.9,
            target_aas_ms: Some(120.0),
        }
    }

    /// Full-span preset: the 300 s ceiling (3,750 classes). Same toy model
    /// width; exists to exercise the full class range, not to be trained in
    /// tests.
    pub fn paper() -> Self {
        RunConfig {
            preset: "paper".into(),
            max_audio_ms: 300_000,
            max_seq: 4096,
            ..Self::desk()
        }
    }

    pub fn preset_by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::config(format!(
                "unknown preset {:?} (expected \"desk\" or \"paper\")",
                other
            ))),
        }
    }

    /// Tokens the encoder may emit for the longest supported audio.
    pub fn max_tokens(&self) -> usize {
        (self.max_audio_ms / self.frame_ms as u64) as usize
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            vocab_size: self.vocab_size,
            feat_dim: self.feat_dim,
            raw_frame_ms: self.raw_frame_ms,
            word_dur_ms: (self.word_dur_lo_ms, self.word_dur_hi_ms),
            gap_dur_ms: (self.gap_lo_ms, self.gap_hi_ms),
            words_per_utt: (self.words_lo, self.words_hi),
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            feat_dim: self.feat_dim,
            d_model: self.d_model,
            n_layers: self.enc_layers,
            n_heads: self.n_heads,
            downsample: DOWNSAMPLE,
            window_range: (self.window_lo, self.window_hi),
            max_tokens: self.max_tokens(),
        }
    }

    pub fn aligner_config(&self) -> AlignerConfig {
        AlignerConfig {
            frame_ms: self.frame_ms,
            max_audio_ms: self.max_audio_ms,
            text_vocab: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.lm_layers,
            n_heads: self.n_heads,
            max_seq: self.max_seq,
            encoder: self.encoder_config(),
        }
    }

    pub fn train_hyper(&self) -> TrainHyper {
        TrainHyper {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_epochs: self.warmup_epochs,
            slot_prob: self.slot_prob,
            seed: self.seed,
            target_aas_ms: self.target_aas_ms,
        }
    }

    /// Cross-struct validation: each derived config must accept its values.
    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        self.aligner_config().validate()?;
        self.train_hyper().validate()?;
        // One encoded token must cover exactly `downsample` raw frames.
        if self.frame_ms as u64 != self.raw_frame_ms as u64 * DOWNSAMPLE as u64 {
            return Err(Error::config(format!(
                "frame_ms {} must equal raw_frame_ms {} x downsample {}",
                self.frame_ms, self.raw_frame_ms, DOWNSAMPLE
            )));
        }
        Ok(())
    }

    /// Field layout backing the file format, canonical string, and overrides.
    fn entries(&self) -> Vec<(&'static str, String)> {
        let target = match self.target_aas_ms {
            None => "none".to_string(),
            Some(v) => format!("{}", v),
        };
        vec![
            ("preset", self.preset.clone()),
            ("seed", self.seed.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("feat_dim", self.feat_dim.to_string()),
            ("raw_frame_ms", self.raw_frame_ms.to_string()),
            ("word_dur_lo_ms", self.word_dur_lo_ms.to_string()),
            ("word_dur_hi_ms", self.word_dur_hi_ms.to_string()),
            ("gap_lo_ms", self.gap_lo_ms.to_string()),
            ("gap_hi_ms", self.gap_hi_ms.to_string()),
            ("words_lo", self.words_lo.to_string()),
            ("words_hi", self.words_hi.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("frame_ms", self.frame_ms.to_string()),
            ("max_audio_ms", self.max_audio_ms.to_string()),
            ("d_model", self.d_model.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("lm_layers", self.lm_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("window_lo", self.window_lo.to_string()),
            ("window_hi", self.window_hi.to_string()),
            ("max_seq", self.max_seq.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("slot_prob", self.slot_prob.to_string()),
            ("target_aas_ms", target),
        ]
    }

    /// Set one field from its textual form; the same path serves file keys
    /// and command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| {
                Error::config(format!("bad value {:?} for key {:?}", v, key))
            })
        }
        match key {
            "preset" => {
                let base = Self::preset_by_name(value)?;
                *self = base;
            }
            "seed" => self.seed = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "feat_dim" => self.feat_dim = num(key, value)?,
            "raw_frame_ms" => self.raw_frame_ms = num(key, value)?,
            "word_dur_lo_ms" => self.word_dur_lo_ms = num(key, value)?,
            "word_dur_hi_ms" => self.word_dur_hi_ms = num(key, value)?,
            "gap_lo_ms" => self.gap_lo_ms = num(key, value)?,
            "gap_hi_ms" => self.gap_hi_ms = num(key, value)?,
            "words_lo" => self.words_lo = num(key, value)?,
            "words_hi" => self.words_hi = num(key, value)?,
            "noise_sigma" => self.noise_sigma = num(key, value)?,
            "frame_ms" => self.frame_ms = num(key, value)?,
            "max_audio_ms" => self.max_audio_ms = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "enc_layers" => self.enc_layers = num(key, value)?,
            "lm_layers" => self.lm_layers = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "window_lo" => self.window_lo = num(key, value)?,
            "window_hi" => self.window_hi = num(key, value)?,
            "max_seq" => self.max_seq = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "slot_prob" => self.slot_prob = num(key, value)?,
            "target_aas_ms" => {
                self.target_aas_ms =
                    if value == "none" { None } else { Some(num(key, value)?) };
            }
            other => return Err(Error::config(format!("unknown config key {:?}", other))),
        }
        Ok(())
    }

    /// Canonical rendering: every field as `key=value`, fixed order, one per
    /// line. Parsing it back reproduces the config exactly.
    pub fn canonical_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Fingerprint of the canonical rendering; artifacts embed it so outputs
    /// can be traced to the exact configuration that produced them.
    pub fn hash(&self) -> String {
        hex64(fnv1a64(self.canonical_string().as_bytes()))
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Parse the key=value format: `#` starts a comment, blank lines are
/// ignored, keys may not repeat. A `preset` line (wherever it appears) is
/// applied first; all other keys then override it in file order.
pub fn parse_config_text(text: &str) -> Result<RunConfig> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected key=value, got {:?}", lineno + 1, line))
        })?;
        let (key, value) = (key.trim().to_string(), value.trim().to_string());
        if pairs.iter().any(|(k, _)| *k == key) {
            return Err(Error::config(format!("line {}: duplicate key {:?}", lineno + 1, key)));
        }
        pairs.push((key, value));
    }
    let mut cfg = match pairs.iter().find(|(k, _)| k == "preset") {
        Some((_, name)) => RunConfig::preset_by_name(name)?,
        None => RunConfig::desk(),
    };
    for (key, value) in &pairs {
        if key != "preset" {
            cfg.set(key, value)?;
        }
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text)
}
