//! Command-line front end: corpus generation, training, alignment,
//! evaluation, benchmarking, and wire-format parsing.
//!
//! Exit codes are a stable contract for scripting: 0 success, 2 for
//! configuration or validation problems, 3 for I/O and file-format problems,
//! 4 for wire-format parse failures.

use std::io::Read as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use slotalign::adam::Adam;
use slotalign::aligner::{build_slot_sequence, AlignerModel, SlotPolicy};
use slotalign::bench::{bench_latency, bench_offline, report_table, OnePassAligner};
use slotalign::checkpoint::{load_checkpoint, save_checkpoint};
use slotalign::config::{load_config, RunConfig};
use slotalign::error::{Error, Result};
use slotalign::hashing::{fnv1a64, hex64};
use slotalign::manifest::{gen_corpus, load_manifest};
use slotalign::metrics::{aas_corpus, compare_table, Granularity};
use slotalign::postproc::{alignment_from_predictions, emit_json, parse_alignment, AlignmentResult};
use slotalign::protocol;
use slotalign::synth::{child_seed, corrupt_labels, Utterance};
use slotalign::train::{train, TrainHyper};
use slotalign::Real;

const ALIGNMENTS_FORMAT: &str = "slotalign-alignments";
const ALIGNMENTS_VERSION: u32 = 1;
/// Seed stream tag for label corruption, disjoint from training streams.
const CORRUPT_STREAM: u64 = 0xC0C0;

#[derive(Parser)]
#[command(
    name = "slotalign",
    about = "Slot-filling forced aligner: synthesize corpora, train, align, evaluate, benchmark",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by commands that build a run configuration. Precedence:
/// `--config` file (or `--preset` when no file) establishes the base, then
/// individual flags and `--set` pairs override it.
#[derive(Args)]
struct ConfigArgs {
    /// Key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset name ("desk" or "paper") used when no --config file is given.
    #[arg(long)]
    preset: Option<String>,
    /// Override the corpus/training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Additional key=value overrides (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => load_config(path)?,
            (None, Some(name)) => RunConfig::preset_by_name(name)?,
            (None, None) => RunConfig::desk(),
        };
        if let (Some(path), Some(name)) = (&self.config, &self.preset) {
            let _ = path;
            // A preset flag next to a config file re-bases the file's values;
            // that is almost never intended, so reject the ambiguity.
            return Err(Error::config(format!(
                "--preset {:?} conflicts with --config; set `preset={}` inside the file instead",
                name, name
            )));
        }
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {:?}", pair)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: feature files plus manifest.jsonl.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Number of utterances.
        #[arg(long)]
        n: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an aligner on a generated corpus and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training corpus manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Held-out corpus manifest for per-epoch accuracy and early stop.
        #[arg(long)]
        holdout: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint (continues the epoch counter).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Epoch budget override.
        #[arg(long)]
        epochs: Option<usize>,
        /// Batch size override.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Corrupt training labels: Gaussian sigma in ms.
        #[arg(long, default_value_t = 0.0)]
        label_sigma_ms: f64,
        /// Corrupt training labels: constant bias in ms.
        #[arg(long, default_value_t = 0.0)]
        label_bias_ms: f64,
    },
    /// Decode word boundaries for a corpus with a trained checkpoint.
    Align {
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus manifest to align.
        #[arg(long)]
        manifest: PathBuf,
        /// Align only this utterance id.
        #[arg(long)]
        id: Option<String>,
        /// Which words receive timestamps: "all" or comma-separated indices.
        #[arg(long, default_value = "all")]
        slots: String,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predicted alignments against a reference manifest.
    Eval {
        /// Alignments file produced by `align`.
        #[arg(long)]
        pred: PathBuf,
        /// Reference corpus manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Second system for a side-by-side table.
        #[arg(long)]
        pred2: Option<PathBuf>,
        /// Boundaries to score: start, end, or both.
        #[arg(long, default_value = "both")]
        granularity: String,
        /// Emit the report as JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Measure inference efficiency of a trained checkpoint.
    Bench {
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus manifest to run against.
        #[arg(long)]
        manifest: PathBuf,
        /// "offline" (sequential batches) or "latency" (concurrent workers).
        #[arg(long, default_value = "offline")]
        mode: String,
        /// Worker counts for latency mode (comma-separated).
        #[arg(long, default_value = "1")]
        concurrency: String,
        /// Batch sizes for offline mode (comma-separated).
        #[arg(long, default_value = "1")]
        batch_sizes: String,
    },
    /// Parse transcript wire format into JSON.
    Parse {
        /// Literal input text.
        #[arg(long, conflicts_with_all = ["file", "stdin"])]
        text: Option<String>,
        /// Read input from a file.
        #[arg(long, conflicts_with = "stdin")]
        file: Option<PathBuf>,
        /// Read input from standard input.
        #[arg(long)]
        stdin: bool,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Parse { .. } => 4,
        _ => 2,
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e);
            std::process::exit(exit_code(&e));
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { config, n, out } => cmd_gen(&config, n, &out),
        Command::Train {
            config,
            manifest,
            holdout,
            out,
            resume,
            epochs,
            batch_size,
            label_sigma_ms,
            label_bias_ms,
        } => cmd_train(
            &config,
            &manifest,
            holdout.as_deref(),
            &out,
            resume.as_deref(),
            epochs,
            batch_size,
            label_sigma_ms,
            label_bias_ms,
        ),
        Command::Align { checkpoint, manifest, id, slots, out } => {
            cmd_align(&checkpoint, &manifest, id.as_deref(), &slots, out.as_deref())
        }
        Command::Eval { pred, manifest, pred2, granularity, json } => {
            cmd_eval(&pred, &manifest, pred2.as_deref(), &granularity, json)
        }
        Command::Bench { checkpoint, manifest, mode, concurrency, batch_sizes } => {
            cmd_bench(&checkpoint, &manifest, &mode, &concurrency, &batch_sizes)
        }
        Command::Parse { text, file, stdin } => cmd_parse(text.as_deref(), file.as_deref(), stdin),
    }
}

// ── gen ──────────────────────────────────────────────────────────────────────

fn cmd_gen(config: &ConfigArgs, n: usize, out: &Path) -> Result<()> {
    let cfg = config.resolve()?;
    if n == 0 {
        return Err(Error::config("--n must be at least 1"));
    }
    let manifest = gen_corpus(&cfg.synth_config(), n, out)?;
    println!(
        "wrote {} utterances to {} (config {}, corpus {})",
        manifest.entries.len(),
        out.join("manifest.jsonl").display(),
        cfg.hash(),
        manifest.config_hash
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: &ConfigArgs,
    manifest: &Path,
    holdout: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    label_sigma_ms: f64,
    label_bias_ms: f64,
) -> Result<()> {
    let mut cfg = config.resolve()?;
    if let Some(e) = epochs {
        cfg.set("epochs", &e.to_string())?;
    }
    if let Some(b) = batch_size {
        cfg.set("batch_size", &b.to_string())?;
    }
    cfg.validate()?;
    let hyper: TrainHyper = cfg.train_hyper();

    let mut train_set = load_manifest(manifest)?.load_all()?;
    let holdout_set: Vec<Utterance> = match holdout {
        Some(p) => load_manifest(p)?.load_all()?,
        None => Vec::new(),
    };

    if label_sigma_ms != 0.0 || label_bias_ms != 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(hyper.seed, CORRUPT_STREAM));
        for utt in &mut train_set {
            utt.words = corrupt_labels(utt, label_sigma_ms, label_bias_ms, &mut rng)?;
        }
        eprintln!(
            "corrupted training labels: sigma {} ms, bias {} ms",
            label_sigma_ms, label_bias_ms
        );
    }

    let (mut model, mut opt, start_epoch) = match resume {
        Some(ckpt) => {
            let loaded = load_checkpoint::<Real>(ckpt)?;
            if loaded.model.cfg != cfg.aligner_config() {
                return Err(Error::config(
                    "checkpoint model configuration does not match the requested run config",
                ));
            }
            let opt = match loaded.opt {
                Some(o) => o,
                None => Adam::new(loaded.model.store(), hyper.lr),
            };
            eprintln!("resuming from {} at epoch {}", ckpt.display(), loaded.next_epoch);
            (loaded.model, opt, loaded.next_epoch)
        }
        None => {
            let model = AlignerModel::<Real>::init(cfg.aligner_config(), cfg.seed)?;
            let opt = Adam::new(model.store(), hyper.lr);
            (model, opt, 0)
        }
    };

    let report = train(&mut model, &mut opt, &train_set, &holdout_set, &hyper, start_epoch, |s| {
        match s.holdout_aas_ms {
            Some(aas) => eprintln!(
                "epoch {:3}  loss {:9.4}  holdout aas {:8.2} ms  ({} trained, {} skipped)",
                s.epoch, s.mean_loss, aas, s.n_trained, s.n_skipped
            ),
            None => eprintln!(
                "epoch {:3}  loss {:9.4}  ({} trained, {} skipped)",
                s.epoch, s.mean_loss, s.n_trained, s.n_skipped
            ),
        }
    })?;

    save_checkpoint(out, &model, Some(&opt), report.next_epoch())?;
    if report.stopped_early {
        eprintln!("target accuracy reached; stopped after epoch {}", report.next_epoch() - 1);
    }
    println!(
        "wrote checkpoint {} after epoch {} (config {})",
        out.display(),
        report.next_epoch().saturating_sub(1),
        cfg.hash()
    );
    Ok(())
}

// ── align ────────────────────────────────────────────────────────────────────

/// First line of an alignments file; every artifact names the model
/// configuration hash that produced it.
#[derive(Serialize, Deserialize)]
struct AlignmentsHeader {
    format: String,
    version: u32,
    config_hash: String,
}

fn model_config_hash(model: &AlignerModel<Real>) -> String {
    let json = serde_json::to_vec(&model.cfg).expect("config serializes");
    hex64(fnv1a64(&json))
}

fn parse_slots(spec: &str) -> Result<SlotPolicy> {
    if spec == "all" {
        return Ok(SlotPolicy::All);
    }
    let indices: Vec<usize> = spec
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::config(format!("bad word index {:?} in --slots", s)))
        })
        .collect::<Result<_>>()?;
    if indices.is_empty() {
        return Err(Error::config("--slots needs \"all\" or at least one word index"));
    }
    Ok(SlotPolicy::Subset(indices))
}

fn cmd_align(
    checkpoint: &Path,
    manifest: &Path,
    id: Option<&str>,
    slots: &str,
    out: Option<&Path>,
) -> Result<()> {
    let policy = parse_slots(slots)?;
    let loaded = load_checkpoint::<Real>(checkpoint)?;
    let model = loaded.model;
    let m = load_manifest(manifest)?;

    let entries: Vec<_> = match id {
        Some(want) => {
            let e = m
                .entry(want)
                .ok_or_else(|| Error::invalid(format!("utterance {:?} not in manifest", want)))?;
            vec![e.clone()]
        }
        None => m.entries.clone(),
    };

    let header = AlignmentsHeader {
        format: ALIGNMENTS_FORMAT.to_string(),
        version: ALIGNMENTS_VERSION,
        config_hash: model_config_hash(&model),
    };
    let mut text = serde_json::to_string(&header).expect("header serializes");
    text.push('\n');
    for entry in &entries {
        let utt = m.load_utterance(entry)?;
        let words = utt.word_tokens();
        let seq = build_slot_sequence(&words, model.cfg.time_token_id(), &policy, None)?;
        let preds = model.decode_sequence(&utt.frames, seq.clone())?;
        let alignment = alignment_from_predictions(&seq, &preds, &utt.id, model.cfg.frame_ms)?;
        text.push_str(&emit_json(&alignment));
    }

    match out {
        Some(path) => std::fs::write(path, &text).map_err(|e| Error::io(path, e))?,
        None => print!("{}", text),
    }
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────────────

fn read_alignments(path: &Path) -> Result<Vec<AlignmentResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let head = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty alignments file"))?;
    let header: AlignmentsHeader = serde_json::from_str(head)
        .map_err(|e| Error::format(path, format!("bad alignments header: {}", e)))?;
    if header.format != ALIGNMENTS_FORMAT {
        return Err(Error::format(path, format!("unknown format {:?}", header.format)));
    }
    if header.version != ALIGNMENTS_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", header.version)));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            parse_alignment(l).map_err(|e| Error::format(path, format!("bad alignment line: {}", e)))
        })
        .collect()
}

fn parse_granularity(s: &str) -> Result<Granularity> {
    match s {
        "start" => Ok(Granularity::Start),
        "end" => Ok(Granularity::End),
        "both" => Ok(Granularity::Both),
        other => Err(Error::config(format!(
            "bad granularity {:?} (expected start, end, or both)",
            other
        ))),
    }
}

fn cmd_eval(
    pred: &Path,
    manifest: &Path,
    pred2: Option<&Path>,
    granularity: &str,
    json: bool,
) -> Result<()> {
    let gran = parse_granularity(granularity)?;
    let m = load_manifest(manifest)?;
    let lookup = |id: &str| m.entry(id).map(|e| e.words.as_slice());

    let score = |path: &Path| -> Result<_> {
        let alignments = read_alignments(path)?;
        let missing: Vec<&str> = alignments
            .iter()
            .filter(|a| m.entry(&a.id).is_none())
            .map(|a| a.id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::invalid(format!(
                "predictions reference utterances missing from the manifest: {}",
                missing.join(", ")
            )));
        }
        aas_corpus(&alignments, lookup, gran)
    };

    let report = score(pred)?;
    match pred2 {
        Some(second) => {
            let report2 = score(second)?;
            let rows = vec![
                (pred.display().to_string(), report),
                (second.display().to_string(), report2),
            ];
            if json {
                let obj: Vec<_> = rows
                    .iter()
                    .map(|(name, r)| serde_json::json!({ "system": name, "report": r }))
                    .collect();
                println!("{}", serde_json::Value::Array(obj));
            } else {
                print!("{}", compare_table(&rows));
            }
        }
        None => {
            if json {
                println!("{}", serde_json::to_string(&report).expect("report serializes"));
            } else {
                println!(
                    "boundaries {}  mean abs shift {:.3} ms",
                    report.n_boundaries, report.mean_abs_shift_ms
                );
            }
        }
    }
    Ok(())
}

// ── bench ────────────────────────────────────────────────────────────────────

fn parse_usize_list(spec: &str, what: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::config(format!("bad {} value {:?}", what, s)))
        })
        .collect()
}

fn cmd_bench(
    checkpoint: &Path,
    manifest: &Path,
    mode: &str,
    concurrency: &str,
    batch_sizes: &str,
) -> Result<()> {
    let loaded = load_checkpoint::<Real>(checkpoint)?;
    let model = loaded.model;
    let corpus = load_manifest(manifest)?.load_all()?;
    let service = OnePassAligner { model: &model };

    let reports = match mode {
        "offline" => {
            let sizes = parse_usize_list(batch_sizes, "--batch-sizes")?;
            bench_offline(&service, &corpus, &sizes)?
        }
        "latency" => {
            let workers = parse_usize_list(concurrency, "--concurrency")?;
            if workers.is_empty() {
                return Err(Error::config("--concurrency needs at least one value"));
            }
            let mut reports = Vec::with_capacity(workers.len());
            for c in workers {
                reports.push(bench_latency(&service, &corpus, c)?);
            }
            reports
        }
        other => {
            return Err(Error::config(format!(
                "bad mode {:?} (expected offline or latency)",
                other
            )));
        }
    };

    for r in &reports {
        println!("{}", serde_json::to_string(r).expect("report serializes"));
    }
    eprint!("{}", report_table(&reports));
    Ok(())
}

// ── parse ────────────────────────────────────────────────────────────────────

fn cmd_parse(text: Option<&str>, file: Option<&Path>, stdin: bool) -> Result<()> {
    let input = match (text, file, stdin) {
        (Some(t), None, false) => t.to_string(),
        (None, Some(p), false) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        (None, None, true) => {
            let mut buf = String::new();
            std::io::stdin()
                .read_to_string(&mut buf)
                .map_err(|e| Error::io("<stdin>", e))?;
            buf
        }
        _ => return Err(Error::config("provide exactly one of --text, --file, --stdin")),
    };
    // File and stdin inputs usually end with a newline that is not part of
    // the payload.
    let payload = input.strip_suffix('\n').unwrap_or(&input);
    let transcript = protocol::parse(payload)?;
    println!("{}", serde_json::to_string(&transcript).expect("transcript serializes"));
    Ok(())
}
