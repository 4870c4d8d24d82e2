//! End-to-end tests of the command-line binary: exit codes, the full
//! gen → train → align → eval → bench pipeline on a small configuration, and
//! byte-level determinism of every artifact.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slotalign"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, want: i32, context: &str) {
    let got = out.status.code().expect("exit code");
    assert_eq!(
        got,
        want,
        "{}: expected exit {}, got {}\nstdout: {}\nstderr: {}",
        context,
        want,
        got,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Overrides that shrink the desk preset to a configuration that trains in
/// well under a second.
const TINY: &[&str] = &[
    "--set", "vocab_size=8",
    "--set", "feat_dim=4",
    "--set", "word_dur_lo_ms=160",
    "--set", "word_dur_hi_ms=320",
    "--set", "gap_hi_ms=160",
    "--set", "words_lo=2",
    "--set", "words_hi=4",
    "--set", "max_audio_ms=4000",
    "--set", "d_model=16",
    "--set", "enc_layers=1",
    "--set", "lm_layers=1",
    "--set", "n_heads=2",
    "--set", "window_lo=2",
    "--set", "window_hi=20",
    "--set", "max_seq=64",
    "--set", "epochs=2",
    "--set", "batch_size=4",
    "--set", "target_aas_ms=none",
];

fn gen(dir: &Path, n: usize, extra: &[&str]) {
    let mut args = vec!["gen", "--n", ""];
    let n_s = n.to_string();
    args[2] = &n_s;
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    args.push("--out");
    let out_s = dir.to_str().expect("utf-8 path");
    args.push(out_s);
    let out = run(&args);
    assert_code(&out, 0, "gen");
}

fn train(manifest: &Path, ckpt: &Path, extra: &[&str]) {
    let mut args = vec!["train"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    let m = manifest.to_str().unwrap();
    let c = ckpt.to_str().unwrap();
    args.extend_from_slice(&["--manifest", m, "--out", c]);
    let out = run(&args);
    assert_code(&out, 0, "train");
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.jsonl")
}

// ── exit codes ───────────────────────────────────────────────────────────────

#[test]
fn help_lists_every_subcommand() {
    let out = run(&["--help"]);
    assert_code(&out, 0, "--help");
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen", "train", "align", "eval", "bench", "parse"] {
        assert!(text.contains(sub), "help must mention {}", sub);
    }
}

#[test]
fn config_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("c");
    let out_s = out_dir.to_str().unwrap();

    let out = run(&["gen", "--preset", "nope", "--n", "3", "--out", out_s]);
    assert_code(&out, 2, "unknown preset");

    let out = run(&["gen", "--n", "0", "--out", out_s]);
    assert_code(&out, 2, "zero utterances");

    let out = run(&["gen", "--set", "frame_ms=33", "--n", "3", "--out", out_s]);
    assert_code(&out, 2, "invalid config value");

    let out = run(&["gen", "--set", "nonsense", "--n", "3", "--out", out_s]);
    assert_code(&out, 2, "malformed --set");

    // clap's own usage errors share the config exit code.
    let out = run(&["gen"]);
    assert_code(&out, 2, "missing required flags");

    let cfg_file = tmp.path().join("cfg");
    std::fs::write(&cfg_file, "preset=desk\n").unwrap();
    let out = run(&[
        "gen", "--config", cfg_file.to_str().unwrap(), "--preset", "desk", "--n", "3", "--out",
        out_s,
    ]);
    assert_code(&out, 2, "--config with --preset is ambiguous");
}

#[test]
fn io_errors_exit_3() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("absent.ckpt");
    let manifest = tmp.path().join("absent.jsonl");
    let out = run(&[
        "align", "--checkpoint", missing.to_str().unwrap(), "--manifest",
        manifest.to_str().unwrap(),
    ]);
    assert_code(&out, 3, "missing checkpoint");

    let out = run(&["eval", "--pred", missing.to_str().unwrap(), "--manifest", manifest.to_str().unwrap()]);
    assert_code(&out, 3, "missing predictions file");

    // A corrupt checkpoint is a format problem, also exit 3.
    let bad = tmp.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let out = run(&["align", "--checkpoint", bad.to_str().unwrap(), "--manifest", manifest.to_str().unwrap()]);
    assert_code(&out, 3, "corrupt checkpoint");
}

#[test]
fn parse_errors_exit_4() {
    let out = run(&["parse", "--text", "no marker here"]);
    assert_code(&out, 4, "malformed transcript");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error"), "diagnostic on stderr: {}", err);
}

// ── parse subcommand ─────────────────────────────────────────────────────────

#[test]
fn parse_handles_both_template_forms() {
    let out = run(&["parse", "--text", "language English<asr_text>hello world"]);
    assert_code(&out, 0, "parse tagged");
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).expect("JSON out");
    assert_eq!(v["language"], "English");
    assert_eq!(v["text"], "hello world");

    let out = run(&["parse", "--text", "language None<asr_text>"]);
    assert_code(&out, 0, "parse empty");
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).expect("JSON out");
    assert!(v["language"].is_null());
    assert_eq!(v["text"], "");
}

#[test]
fn parse_file_and_stdin_agree() {
    use std::io::Write as _;
    let tmp = TempDir::new().unwrap();
    let file = tmp.path().join("t.txt");
    std::fs::write(&file, "language French<asr_text>bonjour\n").unwrap();

    let from_file = run(&["parse", "--file", file.to_str().unwrap()]);
    assert_code(&from_file, 0, "parse --file");

    let mut child = bin()
        .args(["parse", "--stdin"])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .expect("spawn");
    child
        .stdin
        .as_mut()
        .expect("stdin")
        .write_all(b"language French<asr_text>bonjour\n")
        .unwrap();
    let from_stdin = child.wait_with_output().expect("wait");
    assert_code(&from_stdin, 0, "parse --stdin");

    assert_eq!(from_file.stdout, from_stdin.stdout, "file and stdin modes agree");
}

// ── pipeline + determinism ───────────────────────────────────────────────────

fn read_sorted_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .expect("dir")
        .map(|e| {
            let e = e.expect("entry");
            let name = e.file_name().to_string_lossy().into_owned();
            let bytes = std::fs::read(e.path()).expect("read file");
            (name, bytes)
        })
        .collect();
    files.sort_by(|a, b| a.0.cmp(&b.0));
    files
}

#[test]
fn gen_train_align_artifacts_are_byte_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (dir_a, dir_b) = (tmp.path().join("a"), tmp.path().join("b"));

    gen(&dir_a, 12, &[]);
    gen(&dir_b, 12, &[]);
    let files_a = read_sorted_dir(&dir_a);
    let files_b = read_sorted_dir(&dir_b);
    assert!(!files_a.is_empty());
    assert_eq!(files_a, files_b, "generated corpora are byte-identical");

    let (ckpt_a, ckpt_b) = (tmp.path().join("a.ckpt"), tmp.path().join("b.ckpt"));
    train(&manifest_path(&dir_a), &ckpt_a, &[]);
    train(&manifest_path(&dir_b), &ckpt_b, &[]);
    let bytes_a = std::fs::read(&ckpt_a).unwrap();
    let bytes_b = std::fs::read(&ckpt_b).unwrap();
    assert_eq!(bytes_a, bytes_b, "checkpoints are byte-identical");

    let (out_a, out_b) = (tmp.path().join("a.json"), tmp.path().join("b.json"));
    for (ckpt, dir, out) in [(&ckpt_a, &dir_a, &out_a), (&ckpt_b, &dir_b, &out_b)] {
        let o = run(&[
            "align", "--checkpoint", ckpt.to_str().unwrap(), "--manifest",
            manifest_path(dir).to_str().unwrap(), "--out", out.to_str().unwrap(),
        ]);
        assert_code(&o, 0, "align");
    }
    let align_a = std::fs::read(&out_a).unwrap();
    let align_b = std::fs::read(&out_b).unwrap();
    assert!(!align_a.is_empty());
    assert_eq!(align_a, align_b, "alignment JSON is byte-identical");
}

#[test]
fn resume_matches_uninterrupted_training() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("corpus");
    gen(&dir, 10, &[]);
    let manifest = manifest_path(&dir);

    // One uninterrupted 2-epoch run.
    let full = tmp.path().join("full.ckpt");
    train(&manifest, &full, &["--epochs", "2"]);

    // The same run split across a checkpoint boundary.
    let half = tmp.path().join("half.ckpt");
    train(&manifest, &half, &["--epochs", "1"]);
    let resumed = tmp.path().join("resumed.ckpt");
    train(&manifest, &resumed, &["--epochs", "2", "--resume", half.to_str().unwrap()]);

    let full_bytes = std::fs::read(&full).unwrap();
    let resumed_bytes = std::fs::read(&resumed).unwrap();
    assert_eq!(full_bytes, resumed_bytes, "resumed run must equal uninterrupted run");
}

#[test]
fn resume_rejects_mismatched_config() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("corpus");
    gen(&dir, 6, &[]);
    let manifest = manifest_path(&dir);
    let ckpt = tmp.path().join("m.ckpt");
    train(&manifest, &ckpt, &["--epochs", "1"]);

    // Same data, different model shape: the checkpoint must be refused.
    let mut args = vec!["train"];
    args.extend_from_slice(TINY);
    let m = manifest.to_str().unwrap();
    let c = ckpt.to_str().unwrap();
    let out2 = tmp.path().join("m2.ckpt");
    let o = out2.to_str().unwrap();
    args.extend_from_slice(&[
        "--set", "lm_layers=2",
        "--manifest", m,
        "--resume", c,
        "--out", o,
    ]);
    let out = run(&args);
    assert_code(&out, 2, "resume with different architecture");
}

#[test]
fn eval_scores_aligned_output_and_flags_unknown_ids() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("corpus");
    gen(&dir, 10, &[]);
    let manifest = manifest_path(&dir);
    let ckpt = tmp.path().join("m.ckpt");
    train(&manifest, &ckpt, &["--epochs", "1"]);

    let pred = tmp.path().join("pred.json");
    let o = run(&[
        "align", "--checkpoint", ckpt.to_str().unwrap(), "--manifest",
        manifest.to_str().unwrap(), "--out", pred.to_str().unwrap(),
    ]);
    assert_code(&o, 0, "align");

    let o = run(&[
        "eval", "--pred", pred.to_str().unwrap(), "--manifest", manifest.to_str().unwrap(),
        "--json",
    ]);
    assert_code(&o, 0, "eval");
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).expect("JSON report");
    assert!(v["n_boundaries"].as_u64().unwrap() > 0);
    assert!(v["mean_abs_shift_ms"].as_f64().unwrap() >= 0.0);

    // Rewrite one id so it no longer matches the manifest.
    let text = std::fs::read_to_string(&pred).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    lines[1] = lines[1].replacen("\"id\":\"", "\"id\":\"ghost-", 1);
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let o = run(&[
        "eval", "--pred", bad.to_str().unwrap(), "--manifest", manifest.to_str().unwrap(),
    ]);
    assert_code(&o, 2, "unknown prediction id");
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("ghost-"), "error names the missing id: {}", err);
}

#[test]
fn align_single_id_and_slot_subset() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("corpus");
    gen(&dir, 6, &[]);
    let manifest = manifest_path(&dir);
    let ckpt = tmp.path().join("m.ckpt");
    train(&manifest, &ckpt, &["--epochs", "1"]);

    // Find an id from the manifest (the first line is the corpus header).
    let manifest_text = std::fs::read_to_string(&manifest).unwrap();
    let entry: serde_json::Value =
        serde_json::from_str(manifest_text.lines().nth(1).unwrap()).expect("manifest line");
    let id = entry["id"].as_str().expect("id").to_owned();

    let o = run(&[
        "align", "--checkpoint", ckpt.to_str().unwrap(), "--manifest",
        manifest.to_str().unwrap(), "--id", &id, "--slots", "0",
    ]);
    assert_code(&o, 0, "align single id");
    let text = String::from_utf8_lossy(&o.stdout);
    let mut lines = text.lines();
    let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).expect("header");
    assert_eq!(header["format"], "slotalign-alignments");
    let body: serde_json::Value = serde_json::from_str(lines.next().unwrap()).expect("body");
    assert_eq!(body["id"], id.as_str());
    assert_eq!(body["words"].as_array().unwrap().len(), 1, "one slotted word");
    assert!(lines.next().is_none(), "exactly one alignment line");

    let o = run(&[
        "align", "--checkpoint", ckpt.to_str().unwrap(), "--manifest",
        manifest.to_str().unwrap(), "--id", "no-such-id",
    ]);
    assert_code(&o, 2, "unknown id");
}

#[test]
fn bench_emits_reports_in_both_modes() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("corpus");
    gen(&dir, 8, &[]);
    let manifest = manifest_path(&dir);
    let ckpt = tmp.path().join("m.ckpt");
    train(&manifest, &ckpt, &["--epochs", "1"]);

    let o = run(&[
        "bench", "--checkpoint", ckpt.to_str().unwrap(), "--manifest",
        manifest.to_str().unwrap(), "--mode", "offline", "--batch-sizes", "1,2",
    ]);
    assert_code(&o, 0, "bench offline");
    let text = String::from_utf8_lossy(&o.stdout);
    let reports: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).expect("report JSON"))
        .collect();
    assert_eq!(reports.len(), 2, "one report per batch size");
    for r in &reports {
        assert!(r["rtf"].as_f64().unwrap() > 0.0);
        assert!(r["throughput"].as_f64().unwrap() > 0.0);
        assert!(r["latency_p95_ms"].as_f64().unwrap() > 0.0);
    }

    let o = run(&[
        "bench", "--checkpoint", ckpt.to_str().unwrap(), "--manifest",
        manifest.to_str().unwrap(), "--mode", "latency", "--concurrency", "1,2",
    ]);
    assert_code(&o, 0, "bench latency");
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().count(), 2, "one report per concurrency");

    let o = run(&[
        "bench", "--checkpoint", ckpt.to_str().unwrap(), "--manifest",
        manifest.to_str().unwrap(), "--mode", "sideways",
    ]);
    assert_code(&o, 2, "unknown mode");
}

#[test]
fn config_file_matches_equivalent_flags() {
    let tmp = TempDir::new().unwrap();
    // Express TINY as a config file instead of --set flags.
    let mut cfg_text = String::from("preset=desk\n");
    for pair in TINY.chunks(2) {
        if pair[0] == "--set" {
            cfg_text.push_str(pair[1]);
            cfg_text.push('\n');
        }
    }
    let cfg_file = tmp.path().join("tiny.cfg");
    std::fs::write(&cfg_file, &cfg_text).unwrap();

    let (dir_flags, dir_file) = (tmp.path().join("flags"), tmp.path().join("file"));
    gen(&dir_flags, 5, &[]);
    let o = run(&[
        "gen", "--config", cfg_file.to_str().unwrap(), "--n", "5", "--out",
        dir_file.to_str().unwrap(),
    ]);
    assert_code(&o, 0, "gen from config file");

    assert_eq!(
        read_sorted_dir(&dir_flags),
        read_sorted_dir(&dir_file),
        "config file and flags produce identical corpora"
    );
}
