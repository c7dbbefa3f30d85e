//! Principal-subspace scorers: ViM (virtual logit from the residual norm) and
//! NeCo (norm ratio of the projection onto the principal space).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use super::{Method, ModelHead, ScoreVector};
use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, RowMatrix, BLOCK_ROWS};
use crate::stats::mean_std;

/// Eigenvalues below this fraction of the largest count as zero when
/// measuring rank.
const RANK_TOL: f64 = 1e-10;

/// Eigenpairs of a symmetric matrix, eigenvalues descending, ties broken by
/// original index.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

/// `XᵀX` accumulated over row blocks in a fixed order.
fn gram(rows: &RowMatrix, offset: &[f64]) -> DMatrix<f64> {
    let d = rows.dim();
    let partials: Vec<DMatrix<f64>> = rows
        .as_slice()
        .par_chunks(BLOCK_ROWS * d)
        .map(|block| {
            let n = block.len() / d;
            let mut x = DMatrix::from_row_slice(n, d, block);
            for mut r in x.row_iter_mut() {
                for (v, o) in r.iter_mut().zip(offset) {
                    *v -= o;
                }
            }
            x.tr_mul(&x)
        })
        .collect();
    partials
        .into_iter()
        .fold(DMatrix::zeros(d, d), |acc, p| acc + p)
}

/// Principal dimension used when none is configured: 1000 for `d ≥ 2048`,
/// 512 for `768 ≤ d < 2048`, else `d/2` rounded.
pub fn vim_auto_dim(d: usize) -> usize {
    if d >= 2048 {
        1000
    } else if d >= 768 {
        512
    } else {
        ((d as f64 / 2.0).round() as usize).max(1)
    }
}

/// Calibrated ViM state.
#[derive(Debug, Clone)]
pub struct VimModel {
    head: ModelHead,
    offset: Vec<f64>,
    /// `d x D` orthonormal basis of the principal space.
    basis: DMatrix<f64>,
    alpha: f64,
    principal_dim: usize,
}

impl VimModel {
    /// Offsets train features by `u = −W⁺ b`, takes the top eigenvectors of
    /// `FᵀF`, and sets `α = Σ max_c o_i / Σ ‖residual_i‖` over the train rows.
    ///
    /// When the requested dimension exceeds the numerical rank it is reduced
    /// to the rank with a warning.
    pub fn new(
        head: &ModelHead,
        train: &FeatureMatrix,
        train_logits: Option<&RowMatrix>,
        dim: Option<usize>,
    ) -> Result<Self> {
        train.require_dim(head.dim(), "train feature width vs head")?;
        if train.is_empty() {
            return Err(Error::MissingTrain);
        }
        let d = head.dim();
        let w = head.weights().to_dmatrix();
        let svd = w.svd(true, true);
        let max_sv = svd.singular_values.max();
        let tol = max_sv * (d.max(head.n_classes()) as f64) * f64::EPSILON;
        let pinv = svd
            .pseudo_inverse(tol)
            .map_err(|e| Error::InvalidConfig(format!("head pseudo-inverse: {e}")))?;
        let u = -(pinv * DVector::from_column_slice(head.bias()));
        let offset: Vec<f64> = u.iter().copied().collect();

        let (values, vectors) = sorted_eigen(gram(train, &offset));
        let top = values.first().copied().unwrap_or(0.0).max(0.0);
        let rank = values.iter().filter(|&&v| v > RANK_TOL * top).count();
        let mut principal_dim = dim.unwrap_or_else(|| vim_auto_dim(d)).min(d);
        if principal_dim > rank {
            log::warn!("vim: principal dimension {principal_dim} exceeds feature rank {rank}; using {rank}");
            principal_dim = rank;
        }
        let basis = vectors.columns(0, principal_dim).into_owned();

        let mut model = Self {
            head: head.clone(),
            offset,
            basis,
            alpha: 0.0,
            principal_dim,
        };
        let residual_sum: f64 = model.residual_norms(train).iter().sum();
        let offset_norm_sum: f64 = train
            .rows()
            .map(|x| {
                x.iter()
                    .zip(&model.offset)
                    .map(|(a, o)| (a - o) * (a - o))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        let logits = match train_logits {
            Some(l) => l.clone(),
            None => head.logits(train)?,
        };
        let max_logit_sum: f64 = logits
            .rows()
            .map(|o| o.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .sum();
        // residuals at rounding level of the feature norms count as zero
        model.alpha = if residual_sum > RANK_TOL * offset_norm_sum {
            max_logit_sum / residual_sum
        } else {
            log::warn!(
                "vim: train features have no residual outside the principal space; alpha set to 0"
            );
            0.0
        };
        Ok(model)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn principal_dim(&self) -> usize {
        self.principal_dim
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    /// `‖h − P Pᵀ h‖` with `h = φ − u`.
    pub fn residual_norms(&self, features: &FeatureMatrix) -> Vec<f64> {
        let d = self.offset.len();
        features
            .par_rows()
            .map(|x| {
                let h = DVector::from_iterator(d, x.iter().zip(&self.offset).map(|(a, o)| a - o));
                let proj = &self.basis * (self.basis.tr_mul(&h));
                (h - proj).norm()
            })
            .collect()
    }

    /// `−exp(o₀) / (Σ exp(o_c) + exp(o₀))` with virtual logit `o₀ = α‖residual‖`.
    pub fn score(&self, test: &FeatureMatrix, logits: Option<&RowMatrix>) -> Result<ScoreVector> {
        test.require_dim(self.offset.len(), "test feature width vs vim")?;
        let logits = match logits {
            Some(l) => l.clone(),
            None => self.head.logits(test)?,
        };
        let residuals = self.residual_norms(test);
        let scores = logits
            .rows()
            .zip(&residuals)
            .map(|(o, r)| {
                let v = self.alpha * r;
                let m = o.iter().copied().fold(v, f64::max);
                let ev = (v - m).exp();
                -ev / (o.iter().map(|x| (x - m).exp()).sum::<f64>() + ev)
            })
            .collect();
        ScoreVector::new(Method::Vim, scores)
    }
}

pub fn score_vim(
    head: &ModelHead,
    train_features: &FeatureMatrix,
    test: &FeatureMatrix,
    dim: Option<usize>,
) -> Result<ScoreVector> {
    VimModel::new(head, train_features, None, dim)?.score(test, None)
}

/// Calibrated NeCo state: train standardization and principal basis.
#[derive(Debug, Clone)]
pub struct NecoModel {
    mean: Vec<f64>,
    std: Vec<f64>,
    basis: DMatrix<f64>,
}

impl NecoModel {
    /// Standardizes coordinates with train mean/std (zero std → 1) and keeps
    /// the fewest leading eigenvectors of the standardized covariance whose
    /// eigenvalues reach `explained_variance` of the total.
    pub fn new(train: &FeatureMatrix, explained_variance: f64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::MissingTrain);
        }
        let d = train.dim();
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        let mut column = vec![0.0; train.n_rows()];
        for k in 0..d {
            for (c, row) in column.iter_mut().zip(train.rows()) {
                *c = row[k];
            }
            let (m, s) = mean_std(&column);
            mean[k] = m;
            std[k] = if s > 0.0 { s } else { 1.0 };
        }
        let standardized = train.map_rows(d, |x, z| {
            for k in 0..d {
                z[k] = (x[k] - mean[k]) / std[k];
            }
        });
        let cov = gram(&standardized, &vec![0.0; d]) / train.n_rows() as f64;
        let (values, vectors) = sorted_eigen(cov);
        let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
        let target = explained_variance * total * (1.0 - 1e-12);
        let mut acc = 0.0;
        let mut keep = d;
        for (i, v) in values.iter().enumerate() {
            acc += v.max(0.0);
            if acc >= target {
                keep = i + 1;
                break;
            }
        }
        Ok(Self {
            mean,
            std,
            basis: vectors.columns(0, keep).into_owned(),
        })
    }

    pub fn principal_dim(&self) -> usize {
        self.basis.ncols()
    }

    /// `‖Pᵀz‖ / ‖z‖` for the standardized row `z`; 1 when `z = 0`.
    pub fn norm_ratio(&self, x: &[f64]) -> f64 {
        let z = DVector::from_iterator(
            x.len(),
            x.iter()
                .zip(&self.mean)
                .zip(&self.std)
                .map(|((v, m), s)| (v - m) / s),
        );
        let zn = z.norm();
        if zn == 0.0 {
            return 1.0;
        }
        (self.basis.tr_mul(&z).norm() / zn).min(1.0)
    }

    pub fn score(&self, test: &FeatureMatrix, logits: &RowMatrix) -> Result<ScoreVector> {
        test.require_dim(self.mean.len(), "test feature width vs neco")?;
        if logits.n_rows() != test.n_rows() {
            return Err(Error::DimensionMismatch {
                what: "logit rows vs feature rows",
                expected: test.n_rows(),
                found: logits.n_rows(),
            });
        }
        let scores = test
            .par_rows()
            .zip(logits.par_rows())
            .map(|(x, o)| self.norm_ratio(x) * o.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        ScoreVector::new(Method::NeCo, scores)
    }
}

pub fn score_neco(
    head: &ModelHead,
    train_features: &FeatureMatrix,
    test: &FeatureMatrix,
    explained_variance: f64,
) -> Result<ScoreVector> {
    NecoModel::new(train_features, explained_variance)?.score(test, &head.logits(test)?)
}
