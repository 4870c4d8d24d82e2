//! On-disk corpus layout: binary feature files plus a JSONL manifest.
//!
//! Feature file: 16-byte header (4-byte magic `SAFT`, u32 version, u32 rows,
//! u32 cols, all little-endian) followed by `rows * cols` f32 values.
//!
//! Manifest: first line is a header object carrying format name, version,
//! config hash, and frame geometry; every following line is one utterance
//! entry with a relative feature path and gold word spans.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{fnv1a64, hex64};
use crate::synth::{synth_corpus, SynthConfig, Utterance, WordSpan};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"SAFT";
pub const FEATURE_VERSION: u32 = 1;
pub const MANIFEST_FORMAT: &str = "slotalign-corpus";
pub const MANIFEST_VERSION: u32 = 1;

// ── feature files ────────────────────────────────────────────────────────────

/// Write a frame matrix as a little-endian f32 feature file.
pub fn write_features(path: &Path, frames: &Tensor<f32>) -> Result<()> {
    if !frames.is_matrix() {
        return Err(Error::invalid(format!("features must be 2-D, got {:?}", frames.shape())));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(&FEATURE_MAGIC)?;
    write(&FEATURE_VERSION.to_le_bytes())?;
    write(&(frames.rows() as u32).to_le_bytes())?;
    write(&(frames.cols() as u32).to_le_bytes())?;
    for &v in frames.data() {
        write(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a feature file back into a frame matrix.
pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|_| Error::format(path, "truncated feature header"))?;
    if head[0..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic, not a feature file"));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported feature version {}", version)));
    }
    let rows = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    let mut payload = vec![0u8; rows * cols * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::format(path, "truncated feature payload"))?;
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(Error::format(path, "trailing bytes after feature payload")),
        Err(e) => return Err(Error::io(path, e)),
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&[rows, cols], data)
}

// ── manifest ─────────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    config_hash: String,
    raw_frame_ms: u32,
    feat_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Feature file path, relative to the manifest's directory.
    pub features: String,
    pub words: Vec<WordSpan>,
}

/// Parsed manifest plus the directory it lives in.
#[derive(Debug)]
pub struct Manifest {
    pub config_hash: String,
    pub raw_frame_ms: u32,
    pub feat_dim: usize,
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn feature_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.dir.join(&entry.features)
    }

    /// Load one entry's frames and pair them with its gold words.
    pub fn load_utterance(&self, entry: &ManifestEntry) -> Result<Utterance> {
        let frames = read_features(&self.feature_path(entry))?;
        if frames.cols() != self.feat_dim {
            return Err(Error::format(
                self.feature_path(entry),
                format!("feature width {} does not match manifest feat_dim {}", frames.cols(), self.feat_dim),
            ));
        }
        let utt = Utterance {
            id: entry.id.clone(),
            frames,
            words: entry.words.clone(),
            raw_frame_ms: self.raw_frame_ms,
        };
        utt.validate()?;
        Ok(utt)
    }

    pub fn load_all(&self) -> Result<Vec<Utterance>> {
        self.entries.iter().map(|e| self.load_utterance(e)).collect()
    }
}

/// Parse and validate a manifest: header first, unique ids, and every
/// referenced feature file present on disk.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();

    let head_line = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::format(path, "empty manifest")),
    };
    let header: ManifestHeader = serde_json::from_str(&head_line)
        .map_err(|e| Error::format(path, format!("bad manifest header: {}", e)))?;
    if header.format != MANIFEST_FORMAT {
        return Err(Error::format(path, format!("unknown format {:?}", header.format)));
    }
    if header.version != MANIFEST_VERSION {
        return Err(Error::format(path, format!("unsupported manifest version {}", header.version)));
    }

    let dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut entries = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("bad entry on line {}: {}", lineno + 2, e)))?;
        if !seen.insert(entry.id.clone()) {
            return Err(Error::format(path, format!("duplicate utterance id {:?}", entry.id)));
        }
        let fpath = dir.join(&entry.features);
        if !fpath.is_file() {
            return Err(Error::format(
                path,
                format!("feature file {:?} for {:?} is missing", entry.features, entry.id),
            ));
        }
        entries.push(entry);
    }
    Ok(Manifest {
        config_hash: header.config_hash,
        raw_frame_ms: header.raw_frame_ms,
        feat_dim: header.feat_dim,
        dir,
        entries,
    })
}

/// Fingerprint of a synthesis config, embedded in generated corpora.
pub fn synth_config_hash(cfg: &SynthConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    hex64(fnv1a64(json.as_bytes()))
}

/// Generate `n` utterances into `out_dir`: one feature file each plus
/// `manifest.jsonl`. Output bytes depend only on the config (no timestamps),
/// so repeated runs are identical.
pub fn gen_corpus(cfg: &SynthConfig, n: usize, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let utterances = synth_corpus(cfg, n)?; // rejects n == 0
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let manifest_path = out_dir.join("manifest.jsonl");
    let file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut w = BufWriter::new(file);
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        config_hash: synth_config_hash(cfg),
        raw_frame_ms: cfg.raw_frame_ms,
        feat_dim: cfg.feat_dim,
    };
    let hline = serde_json::to_string(&header).expect("header serializes");
    writeln!(w, "{}", hline).map_err(|e| Error::io(&manifest_path, e))?;

    let mut entries = Vec::with_capacity(n);
    for utt in &utterances {
        let fname = format!("{}.feat", utt.id);
        write_features(&out_dir.join(&fname), &utt.frames)?;
        let entry = ManifestEntry { id: utt.id.clone(), features: fname, words: utt.words.clone() };
        let line = serde_json::to_string(&entry).expect("entry serializes");
        writeln!(w, "{}", line).map_err(|e| Error::io(&manifest_path, e))?;
        entries.push(entry);
    }
    w.flush().map_err(|e| Error::io(&manifest_path, e))?;

    Ok(Manifest {
        config_hash: header.config_hash,
        raw_frame_ms: cfg.raw_frame_ms,
        feat_dim: cfg.feat_dim,
        dir: out_dir.to_path_buf(),
        entries,
    })
}
