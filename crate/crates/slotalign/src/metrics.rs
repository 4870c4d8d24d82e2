//! Alignment accuracy: mean absolute boundary shift between predicted and
//! reference times, pooled over all scored boundaries.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postproc::AlignmentResult;
use crate::synth::WordSpan;

/// Accuracy summary: how many boundaries were scored and their mean absolute
/// shift in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AasReport {
    pub n_boundaries: usize,
    pub mean_abs_shift_ms: f64,
}

/// Which boundaries of each word participate in scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Start,
    End,
    Both,
}

impl Granularity {
    pub fn scores_start(self) -> bool {
        matches!(self, Granularity::Start | Granularity::Both)
    }

    pub fn scores_end(self) -> bool {
        matches!(self, Granularity::End | Granularity::Both)
    }
}

/// Mean absolute shift between paired time lists.
pub fn aas(pred_ms: &[i64], ref_ms: &[i64]) -> Result<AasReport> {
    if pred_ms.len() != ref_ms.len() {
        return Err(Error::invalid(format!(
            "{} predictions vs {} references",
            pred_ms.len(),
            ref_ms.len()
        )));
    }
    if pred_ms.is_empty() {
        return Err(Error::invalid("no boundaries to score"));
    }
    let total: f64 = pred_ms
        .iter()
        .zip(ref_ms.iter())
        .map(|(&p, &r)| (p - r).abs() as f64)
        .sum();
    Ok(AasReport {
        n_boundaries: pred_ms.len(),
        mean_abs_shift_ms: total / pred_ms.len() as f64,
    })
}

/// Corpus-level accuracy: every scored boundary from every utterance goes
/// into one pool and the report is the mean over that pool, so short and
/// long utterances weigh by their boundary counts. `lookup` resolves an
/// utterance id to its reference word spans.
pub fn aas_corpus<'a, F>(
    preds: &[AlignmentResult],
    lookup: F,
    granularity: Granularity,
) -> Result<AasReport>
where
    F: Fn(&str) -> Option<&'a [WordSpan]>,
{
    let mut pred_pool = Vec::new();
    let mut ref_pool = Vec::new();
    for al in preds {
        let spans = lookup(&al.id)
            .ok_or_else(|| Error::invalid(format!("no reference for utterance {}", al.id)))?;
        for w in &al.words {
            let span = spans.get(w.index).ok_or_else(|| {
                Error::invalid(format!(
                    "utterance {} has no reference word {}",
                    al.id, w.index
                ))
            })?;
            if granularity.scores_start() {
                if let Some(p) = w.start_ms {
                    pred_pool.push(p);
                    ref_pool.push(span.start_ms);
                }
            }
            if granularity.scores_end() {
                if let Some(p) = w.end_ms {
                    pred_pool.push(p);
                    ref_pool.push(span.end_ms);
                }
            }
        }
    }
    aas(&pred_pool, &ref_pool)
}

/// Fixed-width comparison table for named accuracy reports.
pub fn compare_table(rows: &[(String, AasReport)]) -> String {
    let name_w = rows
        .iter()
        .map(|(n, _)| n.len())
        .max()
        .unwrap_or(6)
        .max("system".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<name_w$}  {:>10}  {:>12}", "system", "boundaries", "shift_ms");
    for (name, rep) in rows {
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>10}  {:>12.3}",
            name, rep.n_boundaries, rep.mean_abs_shift_ms
        );
    }
    out
}
