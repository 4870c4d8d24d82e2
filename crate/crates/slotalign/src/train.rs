//! Training loop: per-epoch shuffling, random slot selection that changes
//! every epoch, mini-batch gradient accumulation, held-out accuracy after
//! each epoch, and early stopping at a target accuracy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::Adam;
use crate::aligner::{build_slot_sequence, make_targets, AlignerModel, SlotPolicy};
use crate::error::{Error, Result};
use crate::metrics::{aas_corpus, AasReport, Granularity};
use crate::param::Bindings;
use crate::postproc::alignment_from_predictions;
use crate::scalar::Scalar;
use crate::synth::{child_seed, Utterance};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHyper {
    /// Total epoch budget (absolute; resuming continues toward the same cap).
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs spent ramping linearly up to `lr` before cosine decay begins.
    pub warmup_epochs: usize,
    /// Probability that a word receives timestamp slots in a given epoch.
    pub slot_prob: f64,
    pub seed: u64,
    /// Stop once held-out accuracy reaches this mean shift (ms), if set.
    pub target_aas_ms: Option<f64>,
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epoch budget must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.slot_prob) {
            return Err(Error::config(format!(
                "slot probability {} outside [0, 1]",
                self.slot_prob
            )));
        }
        if let Some(t) = self.target_aas_ms {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::config(format!("target accuracy {} must be positive", t)));
            }
        }
        Ok(())
    }
}

/// One epoch's record: mean training loss over utterances that drew at least
/// one slot, and held-out accuracy if a holdout set was given.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub holdout_aas_ms: Option<f64>,
    /// Utterances trained on this epoch.
    pub n_trained: usize,
    /// Utterances skipped because their random slot draw selected no words.
    pub n_skipped: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// True when the held-out target was reached before the epoch budget.
    pub stopped_early: bool,
}

impl TrainReport {
    /// Absolute index to hand to a resumed run (one past the last epoch).
    pub fn next_epoch(&self) -> usize {
        self.epochs.last().map_or(0, |e| e.epoch + 1)
    }
}

/// RNG for one purpose within one epoch. Purposes use disjoint stream tags so
/// shuffling, slot selection, and window sampling never share draws, and each
/// depends only on (seed, absolute epoch) — a resumed run replays the same
/// streams it would have seen uninterrupted.
fn epoch_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(seed, epoch as u64 * 4 + purpose))
}

pub(crate) fn epoch_slot_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    epoch_rng(seed, epoch, 1)
}

/// Linear ramp to the base learning rate over the warmup epochs, then cosine
/// decay to a tenth of it across the remaining budget. A function of the
/// absolute epoch only, so a resumed run applies exactly the rates the
/// uninterrupted run would have used.
fn scheduled_lr(base: f64, warmup: usize, epoch: usize, total_epochs: usize) -> f64 {
    let warmup = warmup.min(total_epochs.saturating_sub(1));
    if epoch < warmup {
        return base * (epoch + 1) as f64 / (warmup + 1) as f64;
    }
    let span = total_epochs - 1 - warmup;
    if span == 0 {
        return base;
    }
    let floor = base / 10.0;
    let t = (epoch - warmup) as f64 / span as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Numeric failures during an epoch (overflow/NaN anywhere in the graph or
/// optimizer) are reported as divergence at that epoch; other errors pass
/// through unchanged.
fn mark_divergence(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Train { epoch, msg },
        other => other,
    }
}

/// Decode every word boundary of every utterance (one pass per utterance)
/// and score the post-processed output against the utterances' own spans.
pub fn eval_aas<S: Scalar>(model: &AlignerModel<S>, utts: &[Utterance]) -> Result<AasReport> {
    if utts.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty set"));
    }
    let ttid = model.cfg.time_token_id();
    let mut alignments = Vec::with_capacity(utts.len());
    for utt in utts {
        let words = utt.word_tokens();
        let preds = model.nar_decode(&utt.frames, &words, &SlotPolicy::All)?;
        let seq = build_slot_sequence(&words, ttid, &SlotPolicy::All, None)?;
        alignments.push(alignment_from_predictions(&seq, &preds, &utt.id, model.cfg.frame_ms)?);
    }
    let lookup = |id: &str| {
        utts.iter()
            .find(|u| u.id == id)
            .map(|u| u.words.as_slice())
    };
    aas_corpus(&alignments, lookup, Granularity::Both)
}

/// Run epochs `start_epoch .. hyper.epochs`. Each epoch shuffles the corpus,
/// redraws which words get slots, samples a fresh attention window per batch,
/// accumulates gradients over each batch (scaled by batch size), and takes
/// one optimizer step per batch. The learning rate follows a warmup ramp and
/// cosine decay over the epoch budget (see [`scheduled_lr`]). `on_epoch`
/// fires after every epoch.
///
/// The same (model, optimizer, seed) reach bit-identical parameters whether
/// the epochs run in one call or are split across calls at any boundary.
pub fn train<S: Scalar, F: FnMut(&EpochStats)>(
    model: &mut AlignerModel<S>,
    opt: &mut Adam<S>,
    train_set: &[Utterance],
    holdout: &[Utterance],
    hyper: &TrainHyper,
    start_epoch: usize,
    mut on_epoch: F,
) -> Result<TrainReport> {
    hyper.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if start_epoch >= hyper.epochs {
        return Err(Error::config(format!(
            "start epoch {} is past the budget of {}",
            start_epoch, hyper.epochs
        )));
    }
    let ttid = model.cfg.time_token_id();
    let (w_lo, w_hi) = model.cfg.encoder.window_range;
    let mut report = TrainReport::default();

    for epoch in start_epoch..hyper.epochs {
        opt.lr = scheduled_lr(hyper.lr, hyper.warmup_epochs, epoch, hyper.epochs);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut epoch_rng(hyper.seed, epoch, 0));
        let mut slot_rng = epoch_slot_rng(hyper.seed, epoch);
        let mut window_rng = epoch_rng(hyper.seed, epoch, 2);

        let mut sum_loss = 0.0f64;
        let mut n_trained = 0usize;
        let mut n_skipped = 0usize;

        for batch in order.chunks(hyper.batch_size) {
            let window = window_rng.random_range(w_lo..=w_hi);
            model.store.zero_grads();
            let mut used = 0usize;
            for &i in batch {
                let utt = &train_set[i];
                let words = utt.word_tokens();
                let seq = build_slot_sequence(
                    &words,
                    ttid,
                    &SlotPolicy::Random { p: hyper.slot_prob },
                    Some(&mut slot_rng),
                )?;
                if seq.slots.is_empty() {
                    n_skipped += 1;
                    continue;
                }
                let frames: Tensor<S> = utt.frames.cast();
                let mut tape = Tape::new();
                let mut bind = Bindings::new();
                let (logits, seq) = model
                    .graph_from_frames(&mut tape, &mut bind, &frames, window, seq)
                    .map_err(|e| mark_divergence(e, epoch))?;
                let targets = make_targets(&seq, &utt.words, &model.cfg)?;
                let loss = tape
                    .slot_cross_entropy(logits, &targets.target_index, &targets.loss_mask)
                    .map_err(|e| mark_divergence(e, epoch))?;
                sum_loss += tape.value(loss).item()?.to_f64_c();
                let grads = tape.backward(loss).map_err(|e| mark_divergence(e, epoch))?;
                bind.harvest(&grads, &mut model.store, S::from_f64_c(1.0 / batch.len() as f64))?;
                used += 1;
            }
            if used > 0 {
                opt.step(&mut model.store).map_err(|e| mark_divergence(e, epoch))?;
            }
            n_trained += used;
        }

        if n_trained == 0 {
            return Err(Error::Train {
                epoch,
                msg: "every utterance drew zero slots; raise slot_prob".into(),
            });
        }
        let holdout_aas_ms = if holdout.is_empty() {
            None
        } else {
            Some(eval_aas(model, holdout)?.mean_abs_shift_ms)
        };
        let stats = EpochStats {
            epoch,
            mean_loss: sum_loss / n_trained as f64,
            holdout_aas_ms,
            n_trained,
            n_skipped,
        };
        on_epoch(&stats);
        report.epochs.push(stats);
        if let (Some(target), Some(aas)) = (hyper.target_aas_ms, holdout_aas_ms) {
            if aas <= target {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aligner::test_aligner_config;
    use crate::synth::{synth_corpus, tiny_config};

    fn tiny_hyper(epochs: usize) -> TrainHyper {
        TrainHyper {
            epochs,
            batch_size: 4,
            lr: 1e-2,
            warmup_epochs: 0,
            slot_prob: 0.6,
            seed: 11,
            target_aas_ms: None,
        }
    }

    #[test]
    fn hyper_validation_catches_bad_values() {
        let good = tiny_hyper(1);
        good.validate().unwrap();
        for bad in [
            TrainHyper { epochs: 0, ..good.clone() },
            TrainHyper { batch_size: 0, ..good.clone() },
            TrainHyper { lr: 0.0, ..good.clone() },
            TrainHyper { lr: f64::NAN, ..good.clone() },
            TrainHyper { slot_prob: 1.5, ..good.clone() },
            TrainHyper { target_aas_ms: Some(-1.0), ..good.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn slot_patterns_differ_across_epochs() {
        // The per-epoch slot RNG must actually change which words get slots;
        // with 6 words over 8 epochs, identical draws everywhere would be a
        // (2^-6)^7 coincidence.
        let words: Vec<Vec<u32>> = (0..6).map(|t| vec![t as u32]).collect();
        let mut patterns = std::collections::BTreeSet::new();
        for epoch in 0..8 {
            let mut rng = epoch_slot_rng(42, epoch);
            let seq = build_slot_sequence(
                &words,
                9,
                &SlotPolicy::Random { p: 0.5 },
                Some(&mut rng),
            )
            .unwrap();
            let owners: Vec<usize> = seq.slots.iter().map(|s| s.owner_word).collect();
            patterns.insert(owners);
        }
        assert!(patterns.len() >= 2, "slot selection never varied across epochs");
    }

    #[test]
    fn loss_falls_on_a_tiny_corpus() {
        let utts = synth_corpus(&tiny_config(), 6).unwrap();
        let mut model = AlignerModel::<f32>::init(test_aligner_config(), 5).unwrap();
        let mut opt = Adam::new(&model.store, 1e-2);
        let mut seen = Vec::new();
        let report = train(&mut model, &mut opt, &utts, &[], &tiny_hyper(4), 0, |s| {
            seen.push(s.epoch)
        })
        .unwrap();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        assert_eq!(report.epochs.len(), 4);
        assert!(!report.stopped_early);
        let first = report.epochs.first().unwrap().mean_loss;
        let last = report.epochs.last().unwrap().mean_loss;
        assert!(first.is_finite() && last.is_finite());
        assert!(last < first, "loss did not fall: {} -> {}", first, last);
        assert!(report.epochs.iter().all(|e| e.holdout_aas_ms.is_none()));
        assert!(report.epochs.iter().all(|e| e.n_trained > 0));
    }

    #[test]
    fn holdout_eval_and_generous_target_stop_early() {
        let utts = synth_corpus(&tiny_config(), 5).unwrap();
        let (train_set, holdout) = utts.split_at(4);
        let mut model = AlignerModel::<f32>::init(test_aligner_config(), 5).unwrap();
        let mut opt = Adam::new(&model.store, 1e-2);
        let hyper = TrainHyper { target_aas_ms: Some(1e9), ..tiny_hyper(5) };
        let report =
            train(&mut model, &mut opt, train_set, holdout, &hyper, 0, |_| {}).unwrap();
        // Any finite accuracy beats the absurd target after epoch 0.
        assert!(report.stopped_early);
        assert_eq!(report.epochs.len(), 1);
        assert!(report.epochs[0].holdout_aas_ms.unwrap().is_finite());
        assert_eq!(report.next_epoch(), 1);
    }

    #[test]
    fn split_runs_match_one_uninterrupted_run() {
        let utts = synth_corpus(&tiny_config(), 6).unwrap();
        let hyper = tiny_hyper(3);

        let mut one = AlignerModel::<f32>::init(test_aligner_config(), 5).unwrap();
        let mut opt_one = Adam::new(&one.store, hyper.lr);
        train(&mut one, &mut opt_one, &utts, &[], &hyper, 0, |_| {}).unwrap();

        let mut two = AlignerModel::<f32>::init(test_aligner_config(), 5).unwrap();
        let mut opt_two = Adam::new(&two.store, hyper.lr);
        let first = train(&mut two, &mut opt_two, &utts, &[], &TrainHyper { epochs: 1, ..hyper.clone() }, 0, |_| {}).unwrap();
        assert_eq!(first.next_epoch(), 1);
        train(&mut two, &mut opt_two, &utts, &[], &hyper, first.next_epoch(), |_| {}).unwrap();

        for (a, b) in one.store().iter().zip(two.store().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data(), "parameter {} drifted", a.name);
        }
    }

    #[test]
    fn start_epoch_past_budget_is_rejected() {
        let utts = synth_corpus(&tiny_config(), 2).unwrap();
        let mut model = AlignerModel::<f32>::init(test_aligner_config(), 5).unwrap();
        let mut opt = Adam::new(&model.store, 1e-2);
        assert!(train(&mut model, &mut opt, &utts, &[], &tiny_hyper(2), 2, |_| {}).is_err());
        assert!(train(&mut model, &mut opt, &[], &[], &tiny_hyper(2), 0, |_| {}).is_err());
    }

    #[test]
    fn eval_aas_scores_every_boundary() {
        let utts = synth_corpus(&tiny_config(), 3).unwrap();
        let model = AlignerModel::<f32>::init(test_aligner_config(), 5).unwrap();
        let rep = eval_aas(&model, &utts).unwrap();
        let expected: usize = utts.iter().map(|u| 2 * u.words.len()).sum();
        assert_eq!(rep.n_boundaries, expected);
        assert!(rep.mean_abs_shift_ms.is_finite());
        assert!(eval_aas(&model, &[]).is_err());
    }
}
