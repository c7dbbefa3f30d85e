//! Evaluation numbers for ID/OOD score vectors.
//!
//! Conventions: scores are larger-is-ID; the acceptance threshold `T` is an
//! exact order statistic of the ID scores (no interpolation); a score equal to
//! `T` is accepted as ID on both sides.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default true-positive-rate target.
pub const DEFAULT_TPR: f64 = 0.95;
/// Default FPR at or above which a noise set counts as a failed unit test.
pub const DEFAULT_UNIT_TEST_THRESHOLD: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub fpr_at_tpr: f64,
    pub auroc: f64,
    /// Score threshold `T`; samples with score `≥ T` are accepted as ID.
    pub threshold: f64,
    pub tpr_target: f64,
    /// TPR actually achieved at `T` (≥ `tpr_target`).
    pub tpr_achieved: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

fn check(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::EmptyScores);
    }
    if id.iter().chain(ood).any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("scores must be finite".into()));
    }
    Ok(())
}

/// Number of ID samples that must be accepted: `⌈target·n⌉`, at least 1.
fn required_accepts(tpr_target: f64, n: usize) -> usize {
    // the small slack keeps e.g. 0.95·20 from rounding up to 20
    ((tpr_target * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Threshold at the `⌈target·n⌉`-th largest ID score.
pub fn tpr_threshold(id_scores: &[f64], tpr_target: f64) -> Result<f64> {
    if id_scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "tpr_target must be in (0, 1], got {tpr_target}"
        )));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[required_accepts(tpr_target, sorted.len()) - 1])
}

fn fraction_at_least(scores: &[f64], t: f64) -> f64 {
    scores.iter().filter(|&&s| s >= t).count() as f64 / scores.len() as f64
}

/// FPR at the given TPR, together with AUROC.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr_target: f64) -> Result<EvalResult> {
    check(id_scores, ood_scores)?;
    let threshold = tpr_threshold(id_scores, tpr_target)?;
    Ok(EvalResult {
        fpr_at_tpr: fraction_at_least(ood_scores, threshold),
        auroc: auroc(id_scores, ood_scores)?,
        threshold,
        tpr_target,
        tpr_achieved: fraction_at_least(id_scores, threshold),
        n_id: id_scores.len(),
        n_ood: ood_scores.len(),
    })
}

/// Mann–Whitney AUROC with half credit for ties, via rank sums.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check(id_scores, ood_scores)?;
    let (n_id, n_ood) = (id_scores.len(), ood_scores.len());
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the ID rank sum, in integers: a tie group spanning positions
    // i..=j (1-based i+1..=j+1) gives each member rank (i+j+2)/2.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let ids = all[i..=j].iter().filter(|x| x.1).count() as u128;
        twice_rank_sum += ids * (i + j + 2) as u128;
        i = j + 1;
    }
    // 2U = 2R − n(n+1)
    let twice_u = twice_rank_sum - (n_id as u128) * (n_id as u128 + 1);
    Ok(twice_u as f64 / (2.0 * n_id as f64 * n_ood as f64))
}

/// Number of FPR values at or above `threshold`.
pub fn unit_test_failures(fprs: &[f64], threshold: f64) -> usize {
    fprs.iter().filter(|&&f| f >= threshold).count()
}

/// Number of distinct classes among ID samples rejected at `threshold`
/// (score strictly below it).
pub fn rejected_class_coverage(
    id_scores: &[f64],
    id_labels: &[usize],
    threshold: f64,
) -> Result<usize> {
    if id_scores.len() != id_labels.len() {
        return Err(Error::DimensionMismatch {
            what: "ID labels vs scores",
            expected: id_scores.len(),
            found: id_labels.len(),
        });
    }
    Ok(id_scores
        .iter()
        .zip(id_labels)
        .filter(|(s, _)| **s < threshold)
        .map(|(_, c)| *c)
        .collect::<BTreeSet<_>>()
        .len())
}

/// A fraction rendered as a percentage with one decimal, e.g. `0.4163 → "41.6"`.
pub fn percent(fraction: f64) -> String {
    format!("{:.1}", fraction * 100.0)
}
