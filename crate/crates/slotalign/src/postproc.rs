//! From slot predictions to word alignments: class indices become times,
//! times are repaired to be non-decreasing, and start/end slots are paired
//! into per-word intervals with a canonical JSON rendering.

use serde::{Deserialize, Serialize};

use crate::aligner::{index_to_ms, SlotPrediction, SlotRole, SlotSequence};
use crate::error::{Error, Result};

/// Convert class indices to times in ms (index times frame duration).
pub fn indices_to_times(indices: &[usize], frame_ms: u32) -> Vec<i64> {
    indices.iter().map(|&i| index_to_ms(i, frame_ms)).collect()
}

/// Running-max repair: every output time is the maximum of the input up to
/// that point, so the sequence is non-decreasing and already-ordered input
/// passes through unchanged.
pub fn enforce_monotonic(times: &[i64]) -> Vec<i64> {
    let mut out = Vec::with_capacity(times.len());
    let mut cur = i64::MIN;
    for &t in times {
        if t > cur {
            cur = t;
        }
        out.push(cur);
    }
    out
}

/// One aligned word: its index in the transcript, its (first) token id, and
/// whichever boundaries were requested. Times are multiples of the frame
/// duration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordAlignment {
    pub index: usize,
    pub token: u32,
    pub start_ms: Option<i64>,
    pub end_ms: Option<i64>,
}

/// Alignment output for one utterance. Contains an entry for every word that
/// owned at least one slot, in word order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub id: String,
    pub frame_ms: u32,
    pub words: Vec<WordAlignment>,
}

impl AlignmentResult {
    /// All times must be non-negative multiples of `frame_ms`, and within a
    /// word start must not exceed end.
    pub fn validate(&self) -> Result<()> {
        let f = self.frame_ms as i64;
        if f == 0 {
            return Err(Error::invalid("frame_ms must be positive"));
        }
        for w in &self.words {
            for t in [w.start_ms, w.end_ms].into_iter().flatten() {
                if t < 0 || t % f != 0 {
                    return Err(Error::invalid(format!(
                        "time {} for word {} is not a non-negative multiple of {}",
                        t, w.index, f
                    )));
                }
            }
            if let (Some(s), Some(e)) = (w.start_ms, w.end_ms) {
                if s > e {
                    return Err(Error::invalid(format!(
                        "word {} has start {} after end {}",
                        w.index, s, e
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Group slot times into per-word intervals. `times[i]` belongs to
/// `seq.slots[i]`; each word may own at most one start and one end slot.
pub fn pair_intervals(
    seq: &SlotSequence,
    times: &[i64],
    id: impl Into<String>,
    frame_ms: u32,
) -> Result<AlignmentResult> {
    if times.len() != seq.slots.len() {
        return Err(Error::invalid(format!(
            "{} times for {} slots",
            times.len(),
            seq.slots.len()
        )));
    }
    let mut per_word: Vec<Option<WordAlignment>> = vec![None; seq.words.len()];
    for (slot, &t) in seq.slots.iter().zip(times.iter()) {
        let token = seq.words[slot.owner_word][0];
        let entry = per_word[slot.owner_word].get_or_insert(WordAlignment {
            index: slot.owner_word,
            token,
            start_ms: None,
            end_ms: None,
        });
        let field = match slot.role {
            SlotRole::Start => &mut entry.start_ms,
            SlotRole::End => &mut entry.end_ms,
        };
        if field.is_some() {
            return Err(Error::invalid(format!(
                "word {} has more than one {:?} slot",
                slot.owner_word, slot.role
            )));
        }
        *field = Some(t);
    }
    let result = AlignmentResult {
        id: id.into(),
        frame_ms,
        words: per_word.into_iter().flatten().collect(),
    };
    result.validate()?;
    Ok(result)
}

/// Full post-processing pipeline for one decode: times from class indices,
/// monotonic repair across all slots in position order, then pairing.
pub fn alignment_from_predictions(
    seq: &SlotSequence,
    preds: &[SlotPrediction],
    id: impl Into<String>,
    frame_ms: u32,
) -> Result<AlignmentResult> {
    if preds.len() != seq.slots.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} slots",
            preds.len(),
            seq.slots.len()
        )));
    }
    for (p, s) in preds.iter().zip(seq.slots.iter()) {
        if p.owner_word != s.owner_word || p.role != s.role {
            return Err(Error::invalid("predictions do not line up with sequence slots"));
        }
    }
    let indices: Vec<usize> = preds.iter().map(|p| p.class_index).collect();
    let times = enforce_monotonic(&indices_to_times(&indices, frame_ms));
    pair_intervals(seq, &times, id, frame_ms)
}

/// Canonical single-line JSON rendering (newline-terminated).
pub fn emit_json(result: &AlignmentResult) -> String {
    let mut s = serde_json::to_string(result).expect("alignment serializes");
    s.push('\n');
    s
}

/// Parse an alignment back from its JSON line.
pub fn parse_alignment(text: &str) -> Result<AlignmentResult> {
    let r: AlignmentResult = serde_json::from_str(text.trim_end_matches('\n')).map_err(|e| {
        Error::Parse {
            offset: e.column().saturating_sub(1),
            msg: format!("bad alignment json: {}", e),
        }
    })?;
    r.validate()?;
    Ok(r)
}
