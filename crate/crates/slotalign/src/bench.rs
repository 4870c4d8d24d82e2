//! Inference efficiency harness: wall-clocks an alignment service over a
//! corpus and reports real-time factor, throughput, and per-request latency
//! (average and nearest-rank p95), sequentially in batches or from concurrent
//! workers. Also checks the one-pass speed contract against a stepwise
//! reference decoder.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aligner::{
    build_single_slot_sequence, AlignerModel, SlotPolicy, SlotPrediction, SlotRole,
};
use crate::error::{Error, Result};
use crate::hashing::{fnv1a64, hex64};
use crate::scalar::Scalar;
use crate::synth::Utterance;

/// Warm-up passes over the corpus before any timed measurement.
const WARMUP_ITERS: usize = 2;

/// Anything that can align one utterance and count its forward passes.
/// Implementations must be callable from multiple threads; the harness never
/// mutates the service.
pub trait AlignService: Sync {
    fn align(&self, utt: &Utterance) -> Result<Vec<SlotPrediction>>;
    /// Cumulative forward passes issued so far.
    fn forward_passes(&self) -> u64;
}

/// The production path: every boundary of the transcript in one forward pass.
pub struct OnePassAligner<'a, S> {
    pub model: &'a AlignerModel<S>,
}

impl<S: Scalar> AlignService for OnePassAligner<'_, S> {
    fn align(&self, utt: &Utterance) -> Result<Vec<SlotPrediction>> {
        self.model.nar_decode(&utt.frames, &utt.word_tokens(), &SlotPolicy::All)
    }

    fn forward_passes(&self) -> u64 {
        self.model.forward_passes()
    }
}

/// Reference decoder that fills one slot per forward pass (k slots cost k
/// passes). Exists to demonstrate what the one-pass path saves.
pub struct StepwiseAligner<'a, S> {
    pub model: &'a AlignerModel<S>,
}

impl<S: Scalar> AlignService for StepwiseAligner<'_, S> {
    fn align(&self, utt: &Utterance) -> Result<Vec<SlotPrediction>> {
        let words = utt.word_tokens();
        let ttid = self.model.cfg.time_token_id();
        let mut preds = Vec::with_capacity(2 * words.len());
        for w in 0..words.len() {
            for role in [SlotRole::Start, SlotRole::End] {
                let seq = build_single_slot_sequence(&words, ttid, w, role)?;
                let one = self.model.decode_sequence(&utt.frames, seq)?;
                preds.extend(one);
            }
        }
        Ok(preds)
    }

    fn forward_passes(&self) -> u64 {
        self.model.forward_passes()
    }
}

/// One measured run. `rtf` and `throughput` are always recomputable from the
/// raw totals logged alongside them:
///
/// * `rtf = total_processing_s / total_audio_s` — wall time spent inside
///   requests (summed across workers) per second of audio; below 1 is faster
///   than real time.
/// * `throughput = total_audio_s / total_wall_s` — audio seconds retired per
///   wall second over the whole timed span. With `c` saturated workers on
///   fixed-length work, `throughput × rtf ≈ c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: String,
    pub concurrency: usize,
    pub batch_size: usize,
    pub n_requests: usize,
    /// Fingerprint of the corpus (ids and frame counts), stable across runs.
    pub corpus_hash: String,
    pub total_audio_s: f64,
    /// Span of the timed phase on the monotonic clock.
    pub total_wall_s: f64,
    /// Sum of per-request latencies across all workers.
    pub total_processing_s: f64,
    pub rtf: f64,
    pub throughput: f64,
    pub latency_avg_ms: f64,
    pub latency_p95_ms: f64,
    /// Forward passes issued during the timed phase.
    pub forward_passes: u64,
}

/// Nearest-rank 95th percentile: the value at rank `ceil(0.95 n)` (1-based)
/// of the sorted sample — an actual observation, never an interpolation.
pub fn nearest_rank_p95(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("p95 of an empty sample"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("latencies are comparable"));
    let rank = ((0.95 * sorted.len() as f64).ceil() as usize).max(1);
    Ok(sorted[rank - 1])
}

/// Stable fingerprint of which corpus was benched.
pub fn corpus_fingerprint(corpus: &[Utterance]) -> String {
    let mut bytes = Vec::new();
    for u in corpus {
        bytes.extend_from_slice(u.id.as_bytes());
        bytes.push(0);
        bytes.extend_from_slice(&(u.frames.rows() as u64).to_le_bytes());
        bytes.extend_from_slice(&u.raw_frame_ms.to_le_bytes());
    }
    hex64(fnv1a64(&bytes))
}

fn assemble_report(
    mode: &str,
    concurrency: usize,
    batch_size: usize,
    corpus: &[Utterance],
    latencies_s: &[f64],
    total_wall_s: f64,
    forward_passes: u64,
) -> Result<BenchReport> {
    let total_audio_s: f64 = corpus.iter().map(|u| u.duration_s()).sum();
    let total_processing_s: f64 = latencies_s.iter().sum();
    let latencies_ms: Vec<f64> = latencies_s.iter().map(|l| l * 1e3).collect();
    Ok(BenchReport {
        mode: mode.to_string(),
        concurrency,
        batch_size,
        n_requests: latencies_s.len(),
        corpus_hash: corpus_fingerprint(corpus),
        total_audio_s,
        total_wall_s,
        total_processing_s,
        rtf: total_processing_s / total_audio_s,
        throughput: total_audio_s / total_wall_s,
        latency_avg_ms: latencies_ms.iter().sum::<f64>() / latencies_ms.len() as f64,
        latency_p95_ms: nearest_rank_p95(&latencies_ms)?,
        forward_passes,
    })
}

fn warm_up<A: AlignService + ?Sized>(service: &A, corpus: &[Utterance]) -> Result<()> {
    for _ in 0..WARMUP_ITERS {
        for utt in corpus {
            service.align(utt)?;
        }
    }
    Ok(())
}

/// Sequential timed run over the corpus in groups of each batch size; one
/// report per batch size. Warm-up iterations are excluded from all timers.
pub fn bench_offline<A: AlignService + ?Sized>(
    service: &A,
    corpus: &[Utterance],
    batch_sizes: &[usize],
) -> Result<Vec<BenchReport>> {
    if corpus.is_empty() {
        return Err(Error::invalid("benchmark corpus is empty"));
    }
    if batch_sizes.is_empty() || batch_sizes.contains(&0) {
        return Err(Error::invalid("batch sizes must be a non-empty list of positive values"));
    }
    warm_up(service, corpus)?;
    let mut reports = Vec::with_capacity(batch_sizes.len());
    for &b in batch_sizes {
        let passes_before = service.forward_passes();
        let mut latencies = Vec::with_capacity(corpus.len());
        let span_start = Instant::now();
        for chunk in corpus.chunks(b) {
            for utt in chunk {
                let t0 = Instant::now();
                service.align(utt)?;
                latencies.push(t0.elapsed().as_secs_f64());
            }
        }
        let total_wall_s = span_start.elapsed().as_secs_f64();
        let passes = service.forward_passes() - passes_before;
        reports.push(assemble_report("offline", 1, b, corpus, &latencies, total_wall_s, passes)?);
    }
    Ok(reports)
}

/// Concurrent timed run: `concurrency` workers share the corpus round-robin
/// against the frozen service, each recording its own request latencies;
/// results are merged after every worker has finished.
pub fn bench_latency<A: AlignService + ?Sized>(
    service: &A,
    corpus: &[Utterance],
    concurrency: usize,
) -> Result<BenchReport> {
    if corpus.is_empty() {
        return Err(Error::invalid("benchmark corpus is empty"));
    }
    if concurrency == 0 {
        return Err(Error::invalid("concurrency must be at least 1"));
    }
    warm_up(service, corpus)?;
    let passes_before = service.forward_passes();
    let span_start = Instant::now();
    let worker_latencies: Vec<Vec<f64>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..concurrency)
            .map(|w| {
                scope.spawn(move || -> Result<Vec<f64>> {
                    let mut lats = Vec::new();
                    for utt in corpus.iter().skip(w).step_by(concurrency) {
                        let t0 = Instant::now();
                        service.align(utt)?;
                        lats.push(t0.elapsed().as_secs_f64());
                    }
                    Ok(lats)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bench worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let total_wall_s = span_start.elapsed().as_secs_f64();
    let passes = service.forward_passes() - passes_before;
    let latencies: Vec<f64> = worker_latencies.into_iter().flatten().collect();
    assemble_report("latency", concurrency, 1, corpus, &latencies, total_wall_s, passes)
}

/// Outcome of the one-pass speed contract: median decode latency with many
/// slots versus few slots over the same audio, both conditions verified to
/// cost exactly one forward pass per decode.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedContract {
    pub many_slots: usize,
    pub few_slots: usize,
    pub many_latency_ms: f64,
    pub few_latency_ms: f64,
    /// `many_latency / few_latency`; near 1 means extra slots are close to
    /// free compared to the audio-dominated sequence cost.
    pub ratio: f64,
}

fn median_decode_ms<S: Scalar>(
    model: &AlignerModel<S>,
    utt: &Utterance,
    policy: &SlotPolicy,
    reps: usize,
) -> Result<(f64, usize)> {
    let words = utt.word_tokens();
    let mut times = Vec::with_capacity(reps);
    let mut n_slots = 0;
    for _ in 0..reps {
        let before = model.forward_passes();
        let t0 = Instant::now();
        let preds = model.nar_decode(&utt.frames, &words, policy)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        if model.forward_passes() - before != 1 {
            return Err(Error::state("decode took more than one forward pass"));
        }
        n_slots = preds.len();
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    Ok((times[times.len() / 2], n_slots))
}

/// Time the same audio under two slot policies (e.g. all words vs one word)
/// and return the latency ratio. Each decode is asserted to cost exactly one
/// forward pass; `reps` timed repetitions per condition, median taken, after
/// one discarded warm-up decode per condition.
pub fn nar_speed_contract<S: Scalar>(
    model: &AlignerModel<S>,
    utt: &Utterance,
    many: &SlotPolicy,
    few: &SlotPolicy,
    reps: usize,
) -> Result<SpeedContract> {
    if reps == 0 {
        return Err(Error::invalid("need at least one timed repetition"));
    }
    let words = utt.word_tokens();
    model.nar_decode(&utt.frames, &words, many)?;
    model.nar_decode(&utt.frames, &words, few)?;
    let (many_latency_ms, many_slots) = median_decode_ms(model, utt, many, reps)?;
    let (few_latency_ms, few_slots) = median_decode_ms(model, utt, few, reps)?;
    if many_slots <= few_slots {
        return Err(Error::invalid(format!(
            "'many' condition has {} slots, 'few' has {}; expected strictly more",
            many_slots, few_slots
        )));
    }
    Ok(SpeedContract {
        many_slots,
        few_slots,
        many_latency_ms,
        few_latency_ms,
        ratio: many_latency_ms / few_latency_ms,
    })
}

/// Table-shaped text rendering of a batch of reports.
pub fn report_table(reports: &[BenchReport]) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8} {:>5} {:>6} {:>6} {:>10} {:>12} {:>10} {:>10}",
        "mode", "conc", "batch", "reqs", "rtf", "throughput", "avg_ms", "p95_ms"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<8} {:>5} {:>6} {:>6} {:>10.5} {:>12.3} {:>10.3} {:>10.3}",
            r.mode,
            r.concurrency,
            r.batch_size,
            r.n_requests,
            r.rtf,
            r.throughput,
            r.latency_avg_ms,
            r.latency_p95_ms
        );
    }
    out
}
