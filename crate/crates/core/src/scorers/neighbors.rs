//! Exact nearest-neighbor and cosine scorers in l2-normalized feature space.

use rayon::prelude::*;

use super::{logit::energy_from_logits, Method, ModelHead, ScoreVector};
use crate::error::{Error, Result};
use crate::gaussian::l2_normalize;
use crate::matrix::{dot, norm, FeatureMatrix, RowMatrix};
use crate::rng::SeededRng;

/// Brute-force index over l2-normalized reference rows.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    bank: RowMatrix,
}

impl KnnIndex {
    pub fn new(reference: &FeatureMatrix) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::MissingTrain);
        }
        Ok(Self {
            bank: l2_normalize(reference)?,
        })
    }

    pub fn len(&self) -> usize {
        self.bank.n_rows()
    }

    pub fn is_empty(&self) -> bool {
        self.bank.is_empty()
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.len() {
            return Err(Error::InvalidConfig(format!(
                "k = {k} must be in [1, {}] (reference rows)",
                self.len()
            )));
        }
        Ok(())
    }

    /// Distance from each normalized test row to its `k`-th nearest reference row.
    pub fn kth_distance(&self, test: &FeatureMatrix, k: usize) -> Result<Vec<f64>> {
        self.check_k(k)?;
        test.require_dim(self.bank.dim(), "test feature width vs reference")?;
        let z = l2_normalize(test)?;
        Ok(z.par_rows()
            .map(|q| {
                let mut dist: Vec<f64> = self
                    .bank
                    .rows()
                    .map(|r| {
                        r.iter()
                            .zip(q)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect();
                *dist.select_nth_unstable_by(k - 1, f64::total_cmp).1
            })
            .collect())
    }

    /// Cosine similarity between each test row and its `k`-th most similar
    /// reference row.
    pub fn kth_similarity(&self, test: &FeatureMatrix, k: usize) -> Result<Vec<f64>> {
        self.check_k(k)?;
        test.require_dim(self.bank.dim(), "test feature width vs reference")?;
        let z = l2_normalize(test)?;
        Ok(z.par_rows()
            .map(|q| {
                let mut sims: Vec<f64> = self.bank.rows().map(|r| dot(r, q)).collect();
                // k-th largest
                *sims.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a)).1
            })
            .collect())
    }

    pub fn score_knn(&self, test: &FeatureMatrix, k: usize) -> Result<ScoreVector> {
        let d = self.kth_distance(test, k)?;
        ScoreVector::new(Method::Knn, d.into_iter().map(|v| -v).collect())
    }
}

/// Negative distance to the `k`-th nearest train row, both sides l2-normalized.
pub fn score_knn(
    train_features: &FeatureMatrix,
    test: &FeatureMatrix,
    k: usize,
) -> Result<ScoreVector> {
    KnnIndex::new(train_features)?.score_knn(test, k)
}

/// Sorted indices of the NNGuide reference subset: `⌈fraction·n⌉` rows
/// (at least one) drawn without replacement from a seeded stream.
pub fn nnguide_subset(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let size = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1.min(n), n);
    SeededRng::new(seed).sample_indices(n, size)
}

/// Energy multiplied by the cosine similarity to the `k`-th nearest row of a
/// seeded train subset.
pub fn score_nnguide(
    head: &ModelHead,
    train_features: &FeatureMatrix,
    test: &FeatureMatrix,
    subset_fraction: f64,
    k: usize,
    seed: u64,
) -> Result<ScoreVector> {
    let subset = nnguide_subset(train_features.n_rows(), subset_fraction, seed);
    let index = KnnIndex::new(&train_features.select_rows(&subset))?;
    let sims = index.kth_similarity(test, k)?;
    let energy = energy_from_logits(&head.logits(test)?)?;
    ScoreVector::new(
        Method::NnGuide,
        energy
            .scores
            .iter()
            .zip(&sims)
            .map(|(e, s)| e * s)
            .collect(),
    )
}

/// Maximum cosine similarity between the test row and each class vector.
pub fn score_cosine(class_vectors: &RowMatrix, test: &FeatureMatrix) -> Result<ScoreVector> {
    test.require_dim(class_vectors.dim(), "test feature width vs class vectors")?;
    let norms: Vec<f64> = class_vectors.rows().map(norm).collect();
    if let Some(row) = test.par_rows().position_first(|x| norm(x) == 0.0) {
        return Err(Error::ZeroNormRow(row));
    }
    let scores = test
        .par_rows()
        .map(|x| {
            let xn = norm(x);
            class_vectors
                .rows()
                .zip(&norms)
                .map(|(u, un)| {
                    if *un > 0.0 {
                        dot(u, x) / (un * xn)
                    } else {
                        0.0
                    }
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    ScoreVector::new(Method::Cosine, scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knn_self_and_boundary() {
        let train = RowMatrix::from_rows(&[[1.0, 0.0], [0.0, 2.0], [-3.0, 0.0]]).unwrap();
        let s = score_knn(&train, &RowMatrix::from_rows(&[[5.0, 0.0]]).unwrap(), 1).unwrap();
        assert_eq!(s.scores, vec![0.0]);
        let s = score_knn(&train, &RowMatrix::from_rows(&[[1.0, 0.0]]).unwrap(), 3).unwrap();
        assert!((s.scores[0] + 2.0).abs() < 1e-15);
        assert!(score_knn(&train, &train, 4).is_err());
    }

    #[test]
    fn nnguide_subset_size_and_determinism() {
        assert_eq!(nnguide_subset(10_000, 0.01, 3).len(), 100);
        assert_eq!(nnguide_subset(10, 0.01, 3).len(), 1);
        assert_eq!(nnguide_subset(10, 1.0, 3), (0..10).collect::<Vec<_>>());
        assert_eq!(nnguide_subset(500, 0.1, 9), nnguide_subset(500, 0.1, 9));
    }

    #[test]
    fn nnguide_exact_match_gives_energy() {
        let train = RowMatrix::from_rows(&[[1.0, 0.0], [0.0, 2.0]]).unwrap();
        let w = RowMatrix::from_rows(&[[1.0, 0.5], [0.2, -1.0]]).unwrap();
        let head = ModelHead::new(w, vec![0.0, 0.1]).unwrap();
        let test = RowMatrix::from_rows(&[[0.0, 2.0]]).unwrap();
        let s = score_nnguide(&head, &train, &test, 1.0, 1, 0).unwrap();
        let e = energy_from_logits(&head.logits(&test).unwrap()).unwrap();
        assert!((s.scores[0] - e.scores[0]).abs() < 1e-15);
    }

    #[test]
    fn cosine_cases() {
        let u = RowMatrix::from_rows(&[[1.0, 1.0], [1.0, -1.0]]).unwrap();
        let t = RowMatrix::from_rows(&[[2.0, 2.0], [3.0, 1.0]]).unwrap();
        let s = score_cosine(&u, &t).unwrap();
        assert!((s.scores[0] - 1.0).abs() < 1e-15);
        // [3,1]·[1,1] / (√10 √2) = 4/√20
        assert!((s.scores[1] - 4.0 / 20f64.sqrt()).abs() < 1e-12);
        let u = RowMatrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let s = score_cosine(&u, &RowMatrix::from_rows(&[[0.0, 0.0, 4.0]]).unwrap()).unwrap();
        assert_eq!(s.scores, vec![0.0]);
    }
}
