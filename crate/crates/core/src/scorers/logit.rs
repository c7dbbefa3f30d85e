//! Scorers built on the classifier logits: MSP, max-logit, energy and its
//! ReAct / Ash-s shaped variants, KL-matching, and softmax-scaled cosine.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use super::{Method, ModelHead, ScoreVector};
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, FeatureMatrix, Labels, RowMatrix};
use crate::stats::quantile_in_place;

/// Probabilities are floored at this value inside logarithms.
pub const KLM_PROB_FLOOR: f64 = 1e-12;

fn max(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let m = max(values);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Largest softmax probability, `1 / Σ exp(o_c − max o)`.
fn max_softmax(o: &[f64]) -> f64 {
    let m = max(o);
    1.0 / o.iter().map(|v| (v - m).exp()).sum::<f64>()
}

fn softmax_into(o: &[f64], out: &mut [f64]) {
    let m = max(o);
    let mut z = 0.0;
    for (p, v) in out.iter_mut().zip(o) {
        *p = (v - m).exp();
        z += *p;
    }
    out.iter_mut().for_each(|p| *p /= z);
}

fn per_row(
    method: Method,
    logits: &RowMatrix,
    f: impl Fn(&[f64]) -> f64 + Sync + Send,
) -> Result<ScoreVector> {
    ScoreVector::new(method, logits.par_rows().map(f).collect())
}

pub fn msp_from_logits(logits: &RowMatrix) -> Result<ScoreVector> {
    per_row(Method::Msp, logits, max_softmax)
}

pub fn maxlogit_from_logits(logits: &RowMatrix) -> Result<ScoreVector> {
    per_row(Method::MaxLogit, logits, max)
}

pub fn energy_from_logits(logits: &RowMatrix) -> Result<ScoreVector> {
    per_row(Method::Energy, logits, log_sum_exp)
}

pub fn score_msp(head: &ModelHead, test: &FeatureMatrix) -> Result<ScoreVector> {
    msp_from_logits(&head.logits(test)?)
}

pub fn score_maxlogit(head: &ModelHead, test: &FeatureMatrix) -> Result<ScoreVector> {
    maxlogit_from_logits(&head.logits(test)?)
}

pub fn score_energy(head: &ModelHead, test: &FeatureMatrix) -> Result<ScoreVector> {
    energy_from_logits(&head.logits(test)?)
}

/// ReAct clipping threshold: the `quantile` of all pooled train activations.
pub fn react_threshold(train: &FeatureMatrix, quantile: f64) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::MissingTrain);
    }
    let mut pooled = train.as_slice().to_vec();
    Ok(quantile_in_place(&mut pooled, quantile))
}

pub(crate) fn energy_clipped(
    head: &ModelHead,
    test: &FeatureMatrix,
    threshold: f64,
) -> Result<ScoreVector> {
    test.require_dim(head.dim(), "feature width vs head")?;
    let scores = test
        .par_rows()
        .map(|x| {
            let clipped: Vec<f64> = x.iter().map(|v| v.min(threshold)).collect();
            let mut o = vec![0.0; head.n_classes()];
            head.logits_into(&clipped, &mut o);
            log_sum_exp(&o)
        })
        .collect();
    ScoreVector::new(Method::EnergyReact, scores)
}

/// Energy of logits computed from features clipped element-wise at the
/// train-calibrated ReAct threshold.
pub fn score_energy_react(
    head: &ModelHead,
    test: &FeatureMatrix,
    train_features: &FeatureMatrix,
    clip_quantile: f64,
) -> Result<ScoreVector> {
    energy_clipped(head, test, react_threshold(train_features, clip_quantile)?)
}

/// Per-class mean softmax vectors over the training logits (`C x C`).
pub fn klm_templates(train_logits: &RowMatrix, labels: &Labels) -> Result<RowMatrix> {
    labels.require_rows(train_logits.n_rows())?;
    let k = train_logits.dim();
    let c = labels.n_classes();
    let mut sums = vec![0.0; c * k];
    let mut p = vec![0.0; k];
    for (o, &y) in train_logits.rows().zip(labels.values()) {
        softmax_into(o, &mut p);
        for (s, v) in sums[y * k..(y + 1) * k].iter_mut().zip(&p) {
            *s += v;
        }
    }
    let counts = labels.counts();
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(empty));
    }
    for (cls, &n) in counts.iter().enumerate() {
        sums[cls * k..(cls + 1) * k]
            .iter_mut()
            .for_each(|v| *v /= n as f64);
    }
    Ok(RowMatrix::from_vec_unchecked(sums, c, k))
}

fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pk, _)| **pk > 0.0)
        .map(|(pk, qk)| pk * (pk.max(KLM_PROB_FLOOR).ln() - qk.max(KLM_PROB_FLOOR).ln()))
        .sum()
}

/// `−min_c KL(p ‖ d_c)` against precomputed class templates.
pub fn score_klm_logits(templates: &RowMatrix, logits: &RowMatrix) -> Result<ScoreVector> {
    logits.require_dim(templates.dim(), "logit width vs KL templates")?;
    let scores = logits
        .par_rows()
        .map(|o| {
            let mut p = vec![0.0; o.len()];
            softmax_into(o, &mut p);
            -templates
                .rows()
                .map(|d| kl_divergence(&p, d))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    ScoreVector::new(Method::KlMatching, scores)
}

pub fn score_klm(
    head: &ModelHead,
    train_features: &FeatureMatrix,
    train_labels: &Labels,
    test: &FeatureMatrix,
) -> Result<ScoreVector> {
    let templates = klm_templates(&head.logits(train_features)?, train_labels)?;
    score_klm_logits(&templates, &head.logits(test)?)
}

/// Max softmax of `t·cos θ_c`, the cosines between the test row and each
/// weight row.
pub fn score_ssc(head: &ModelHead, test: &FeatureMatrix, scale: f64) -> Result<ScoreVector> {
    test.require_dim(head.dim(), "feature width vs head")?;
    let w_norms: Vec<f64> = head.weights().rows().map(norm).collect();
    if let Some(row) = test.par_rows().position_first(|x| norm(x) == 0.0) {
        return Err(Error::ZeroNormRow(row));
    }
    let scores = test
        .par_rows()
        .map(|x| {
            let xn = norm(x);
            let z: Vec<f64> = head
                .weights()
                .rows()
                .zip(&w_norms)
                .map(|(w, wn)| {
                    if *wn > 0.0 {
                        scale * dot(w, x) / (wn * xn)
                    } else {
                        0.0
                    }
                })
                .collect();
            max_softmax(&z)
        })
        .collect();
    ScoreVector::new(Method::Ssc, scores)
}

/// Ash-s scores plus how many rows had every activation pruned.
#[derive(Debug, Clone)]
pub struct AshOutcome {
    pub scores: ScoreVector,
    pub all_pruned_rows: usize,
}

/// Keeps the `n − round(n·p/100)` largest activations of a row (ties by
/// position), zeroes the rest, and rescales survivors by `exp(s₁/s₂)` with
/// `s₁`/`s₂` the activation sums before/after pruning. Returns `None` when
/// nothing survives or `s₂ = 0`.
pub(crate) fn ash_s_shape(x: &[f64], percentile: f64) -> Option<Vec<f64>> {
    let n = x.len();
    let keep = n - ((n as f64 * percentile / 100.0).round() as usize).min(n);
    if keep == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    let s1: f64 = x.iter().sum();
    let s2: f64 = order[..keep].iter().map(|&i| x[i]).sum();
    if s2 == 0.0 {
        return None;
    }
    let scale = (s1 / s2).exp();
    let mut out = vec![0.0; n];
    for &i in &order[..keep] {
        out[i] = x[i] * scale;
    }
    Some(out)
}

/// Energy of the head applied to Ash-s shaped features.
///
/// Rows where pruning removes everything score the energy of the bias alone;
/// their count is reported and logged.
pub fn score_ash_s(
    head: &ModelHead,
    test: &FeatureMatrix,
    prune_percentile: f64,
) -> Result<AshOutcome> {
    test.require_dim(head.dim(), "feature width vs head")?;
    let pruned = AtomicUsize::new(0);
    let bias_energy = log_sum_exp(head.bias());
    let scores = test
        .par_rows()
        .map(|x| match ash_s_shape(x, prune_percentile) {
            Some(shaped) => {
                let mut o = vec![0.0; head.n_classes()];
                head.logits_into(&shaped, &mut o);
                log_sum_exp(&o)
            }
            None => {
                pruned.fetch_add(1, Ordering::Relaxed);
                bias_energy
            }
        })
        .collect();
    let all_pruned_rows = pruned.into_inner();
    if all_pruned_rows > 0 {
        log::warn!("ash-s: {all_pruned_rows} rows fully pruned; scored with the bias energy");
    }
    Ok(AshOutcome {
        scores: ScoreVector::new(Method::AshS, scores)?,
        all_pruned_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: &[&[f64]]) -> RowMatrix {
        RowMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn msp_cases() {
        let s =
            msp_from_logits(&logits(&[&[0.0, 0.0], &[1000.0, 0.0], &[2f64.ln(), 0.0]])).unwrap();
        assert_eq!(s.scores[0], 0.5);
        assert!((s.scores[1] - 1.0).abs() < 1e-12);
        assert!((s.scores[2] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn maxlogit_cases() {
        let s = maxlogit_from_logits(&logits(&[&[3.0, 1.0, 2.0]])).unwrap();
        assert_eq!(s.scores, vec![3.0]);
        let w = RowMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let head = ModelHead::new(w, vec![0.0, 0.0]).unwrap();
        let s = score_maxlogit(&head, &RowMatrix::from_rows(&[[-1.0, -2.0]]).unwrap()).unwrap();
        assert_eq!(s.scores, vec![-1.0]);
    }

    #[test]
    fn energy_cases() {
        let s = energy_from_logits(&logits(&[&[0.0, 0.0], &[1000.0, 0.0]])).unwrap();
        assert!((s.scores[0] - 2f64.ln()).abs() < 1e-15);
        assert!((s.scores[1] - 1000.0).abs() < 1e-9);
        let s = energy_from_logits(&logits(&[&[1.0, 2.0, 3.0]])).unwrap();
        let expect = 3.0 + (1.0 + (-1f64).exp() + (-2f64).exp()).ln();
        assert!((s.scores[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let l = logits(&[&[1e4, -1e4, 0.0], &[-1e4, -1e4, -1e4]]);
        assert!(msp_from_logits(&l).is_ok());
        assert!(energy_from_logits(&l).is_ok());
    }

    #[test]
    fn react_no_clip_and_full_clip() {
        let w = RowMatrix::from_rows(&[[1.0, -0.5], [0.3, 2.0]]).unwrap();
        let head = ModelHead::new(w, vec![0.1, -0.2]).unwrap();
        let test = RowMatrix::from_rows(&[[0.5, 1.0], [2.0, 0.1]]).unwrap();
        let plain = score_energy(&head, &test).unwrap();
        let none = energy_clipped(&head, &test, 10.0).unwrap();
        assert_eq!(plain.scores, none.scores);
        let full = energy_clipped(&head, &test, 0.0).unwrap();
        let b_only = log_sum_exp(&[0.1, -0.2]);
        assert!(full.scores.iter().all(|s| (s - b_only).abs() < 1e-15));
    }

    #[test]
    fn react_hand_clipped() {
        let w = RowMatrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let head = ModelHead::new(w, vec![0.0]).unwrap();
        let test = RowMatrix::from_rows(&[[3.0, 0.5]]).unwrap();
        // clip at 1: [1, 0.5] -> logit 2
        let s = energy_clipped(&head, &test, 1.0).unwrap();
        assert!((s.scores[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn react_threshold_is_pooled_quantile() {
        let train = RowMatrix::new((1..=100).map(f64::from).collect(), 25, 4).unwrap();
        assert!((react_threshold(&train, 0.99).unwrap() - 99.01).abs() < 1e-12);
    }

    #[test]
    fn klm_cases() {
        let templates = logits(&[&[0.5, 0.5]]);
        let s = score_klm_logits(&templates, &logits(&[&[0.0, 0.0], &[2000.0, 0.0]])).unwrap();
        assert!(s.scores[0].abs() < 1e-15);
        assert!((s.scores[1] + 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn ssc_cases() {
        let w = RowMatrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let head = ModelHead::new(w, vec![0.0, 0.0]).unwrap();
        let s = score_ssc(&head, &RowMatrix::from_rows(&[[3.0, 0.0]]).unwrap(), 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((s.scores[0] - e / (e + 1.0 / e)).abs() < 1e-15);
        let w = RowMatrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        let head = ModelHead::new(w, vec![0.0; 3]).unwrap();
        let s = score_ssc(
            &head,
            &RowMatrix::from_rows(&[[0.3, -2.0], [5.0, 1.0]]).unwrap(),
            1.0,
        )
        .unwrap();
        assert!(s.scores.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn ash_shape_hand_case() {
        let shaped = ash_s_shape(&[4.0, 3.0, 2.0, 1.0], 50.0).unwrap();
        let k = (10.0f64 / 7.0).exp();
        assert_eq!(shaped, vec![4.0 * k, 3.0 * k, 0.0, 0.0]);
        assert!(ash_s_shape(&[1.0, 2.0], 100.0).is_none());
        assert!(ash_s_shape(&[1.0, -1.0, 0.0], 0.0).is_none());
    }

    #[test]
    fn ash_all_pruned_scores_bias() {
        let w = RowMatrix::from_rows(&[[1.0, 1.0], [2.0, 0.0]]).unwrap();
        let head = ModelHead::new(w, vec![0.5, 1.5]).unwrap();
        let out = score_ash_s(&head, &RowMatrix::from_rows(&[[1.0, 2.0]]).unwrap(), 100.0).unwrap();
        assert_eq!(out.all_pruned_rows, 1);
        assert_eq!(out.scores.scores[0], log_sum_exp(&[0.5, 1.5]));
    }
}
