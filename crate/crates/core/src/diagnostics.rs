//! How Gaussian are the features? Norm moments of a Gaussian, per-class
//! covariance deviation from the shared covariance, QQ quantile pairs, norm
//! statistics, norm/score correlation and the OOD feature-scaling sweep.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{estimate_class_means, GaussianFit, PerClassCovariances};
use crate::matrix::{FeatureMatrix, Labels};
use crate::metrics::{fpr_at_tpr, DEFAULT_TPR};
use crate::rng::SeededRng;
use crate::scorers::{scale_features, score_maha, Method};
use crate::special::norm_ppf;
use crate::stats::{average_ranks, mean_std, pearson, quantile_sorted};

/// Projected variance below which a QQ direction is degenerate.
pub const DEGENERATE_VARIANCE: f64 = 1e-30;
/// Default histogram resolution for [`norm_stats`].
pub const DEFAULT_HISTOGRAM_BINS: usize = 100;

/// Mean and variance of `‖X‖²` for `X ~ N(μ, Σ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormMoments {
    pub mean_sq_norm: f64,
    pub var_sq_norm: f64,
}

impl NormMoments {
    /// Chebyshev bound on `P(|‖X‖² − mean| ≥ eps)`, capped at 1.
    pub fn concentration_bound(&self, eps: f64) -> f64 {
        if eps <= 0.0 {
            return 1.0;
        }
        (self.var_sq_norm / (eps * eps)).min(1.0)
    }
}

fn check_gaussian(mu: &[f64], sigma: &DMatrix<f64>) -> Result<()> {
    let d = mu.len();
    if sigma.nrows() != d || sigma.ncols() != d {
        return Err(Error::DimensionMismatch {
            what: "covariance size vs mean length",
            expected: d,
            found: sigma.nrows(),
        });
    }
    let scale = sigma
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let asym = (sigma - sigma.transpose())
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if asym > 1e-12 * scale {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

fn check_psd(eigenvalues: &[f64], trace: f64) -> Result<()> {
    let min = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-10 * trace.abs().max(f64::MIN_POSITIVE) {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    Ok(())
}

/// Moments of `‖X‖²` via `tr Σ + ‖μ‖²` and `2 tr(Σ²) + 4 μᵀΣμ`.
pub fn gaussian_norm_moments(mu: &[f64], sigma: &DMatrix<f64>) -> Result<NormMoments> {
    check_gaussian(mu, sigma)?;
    let eig = SymmetricEigen::new(sigma.clone());
    check_psd(eig.eigenvalues.as_slice(), sigma.trace())?;
    let d = mu.len();
    let mu_sq: f64 = mu.iter().map(|v| v * v).sum();
    let tr_sq: f64 = sigma.iter().map(|v| v * v).sum();
    let mut quad = 0.0;
    for i in 0..d {
        let row: f64 = (0..d).map(|j| sigma[(i, j)] * mu[j]).sum();
        quad += mu[i] * row;
    }
    Ok(NormMoments {
        mean_sq_norm: sigma.trace() + mu_sq,
        var_sq_norm: (2.0 * tr_sq + 4.0 * quad).max(0.0),
    })
}

/// The same moments summed over the eigenbasis of `Σ`:
/// `Σ_i (3λ_i² + 6μ_i²λ_i + μ_i⁴) − (λ_i + μ_i²)²` with `μ_i` the
/// coordinates of `μ` along the eigenvectors.
pub fn gaussian_norm_moments_eigenbasis(mu: &[f64], sigma: &DMatrix<f64>) -> Result<NormMoments> {
    check_gaussian(mu, sigma)?;
    let eig = SymmetricEigen::new(sigma.clone());
    check_psd(eig.eigenvalues.as_slice(), sigma.trace())?;
    let d = mu.len();
    let (mut mean, mut var) = (0.0, 0.0);
    for i in 0..d {
        let lambda = eig.eigenvalues[i];
        let m: f64 = (0..d).map(|r| eig.eigenvectors[(r, i)] * mu[r]).sum();
        let m2 = m * m;
        mean += lambda + m2;
        var += 3.0 * lambda * lambda + 6.0 * m2 * lambda + m2 * m2 - (lambda + m2) * (lambda + m2);
    }
    Ok(NormMoments {
        mean_sq_norm: mean,
        var_sq_norm: var.max(0.0),
    })
}

/// Per-class deviation of `Σ_i` from the shared covariance along uniformly
/// random directions, and its average over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub per_class: Vec<f64>,
    pub mean: f64,
    /// Shrinkage of the shared covariance whose inverse was used.
    pub shrinkage_eps: f64,
}

/// `(2 tr(A²) + tr(A)²) / (d(d+2))`, the sphere average of `(uᵀAu)²` for
/// symmetric `A`.
pub fn sphere_quartic_moment(a: &DMatrix<f64>) -> f64 {
    let d = a.nrows() as f64;
    let tr = a.trace();
    let tr_sq: f64 = a.iter().map(|v| v * v).sum();
    (2.0 * tr_sq + tr * tr) / (d * (d + 2.0))
}

/// Solves `L X = B` column by column for lower-triangular `L`.
fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let d = l.nrows();
    let mut x = b.clone();
    for col in 0..x.ncols() {
        for i in 0..d {
            let mut s = x[(i, col)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, col)];
            }
            x[(i, col)] = s / l[(i, i)];
        }
    }
    x
}

/// Deviation of every class covariance from the shared one:
/// `A = L⁻¹(Σ_i − Σ)L⁻ᵀ` with `LLᵀ` the shrunk shared covariance, whose
/// traces equal those of `(Σ+εI)⁻¹(Σ_i − Σ)`.
pub fn variance_deviation(
    fit: &GaussianFit,
    per_class: &PerClassCovariances,
) -> Result<DeviationReport> {
    let d = fit.dim();
    if per_class.covs.is_empty() {
        return Err(Error::Empty("per-class covariances"));
    }
    if let Some(bad) = per_class
        .covs
        .iter()
        .find(|m| m.nrows() != d || m.ncols() != d)
    {
        return Err(Error::DimensionMismatch {
            what: "per-class covariance size",
            expected: d,
            found: bad.nrows(),
        });
    }
    let l = fit.shared_factor();
    let shared = fit.shared_cov();
    let per_class: Vec<f64> = per_class
        .covs
        .par_iter()
        .map(|cov| {
            let diff = cov - shared;
            let b = solve_lower(l, &diff);
            let a = solve_lower(l, &b.transpose());
            // symmetrize away rounding
            let a = (&a + a.transpose()) * 0.5;
            sphere_quartic_moment(&a)
        })
        .collect();
    let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok(DeviationReport {
        per_class,
        mean,
        shrinkage_eps: fit.shrinkage_eps(),
    })
}

/// Sample versus standard-normal quantiles along one direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QQPair {
    pub direction: usize,
    pub probabilities: Vec<f64>,
    pub sample_quantiles: Vec<f64>,
    pub theoretical_quantiles: Vec<f64>,
}

/// Plotting positions `k/(Q+1)`, `k = 1..=Q`.
pub fn plotting_positions(n_quantiles: usize) -> Vec<f64> {
    (1..=n_quantiles)
        .map(|k| k as f64 / (n_quantiles + 1) as f64)
        .collect()
}

/// QQ pairs of class-centered features projected on each direction and
/// divided by that projection's standard deviation (denominator `N`).
///
/// Sample quantiles interpolate linearly between order statistics at
/// `p·(N−1)`.
pub fn qq_quantiles(
    features: &FeatureMatrix,
    labels: &Labels,
    directions: &[Vec<f64>],
    n_quantiles: usize,
) -> Result<Vec<QQPair>> {
    if features.n_rows() < 2 {
        return Err(Error::Empty("QQ input needs at least 2 rows"));
    }
    if n_quantiles == 0 {
        return Err(Error::InvalidConfig(
            "number of QQ quantiles must be at least 1".into(),
        ));
    }
    let means = estimate_class_means(features, labels)?;
    let probabilities = plotting_positions(n_quantiles);
    let theoretical: Vec<f64> = probabilities.iter().map(|&p| norm_ppf(p)).collect();
    directions
        .iter()
        .enumerate()
        .map(|(k, dir)| {
            if dir.len() != features.dim() {
                return Err(Error::DimensionMismatch {
                    what: "QQ direction length",
                    expected: features.dim(),
                    found: dir.len(),
                });
            }
            let mut proj: Vec<f64> = features
                .rows()
                .zip(labels.values())
                .map(|(x, &c)| {
                    x.iter()
                        .zip(means.row(c))
                        .zip(dir)
                        .map(|((a, m), u)| (a - m) * u)
                        .sum()
                })
                .collect();
            let (_, std) = mean_std(&proj);
            if !(std * std >= DEGENERATE_VARIANCE) {
                return Err(Error::DegenerateDirection(k));
            }
            proj.iter_mut().for_each(|v| *v /= std);
            proj.sort_by(f64::total_cmp);
            Ok(QQPair {
                direction: k,
                probabilities: probabilities.clone(),
                sample_quantiles: probabilities
                    .iter()
                    .map(|&p| quantile_sorted(&proj, p))
                    .collect(),
                theoretical_quantiles: theoretical.clone(),
            })
        })
        .collect()
}

/// Three seeded uniform directions, followed by the leading and trailing
/// eigenvectors of `shared_cov` when given.
pub fn default_qq_directions(
    dim: usize,
    seed: u64,
    shared_cov: Option<&DMatrix<f64>>,
) -> Vec<Vec<f64>> {
    let mut rng = SeededRng::new(seed);
    let mut dirs: Vec<Vec<f64>> = (0..3).map(|_| rng.unit_vector(dim)).collect();
    if let Some(cov) = shared_cov {
        let eig = SymmetricEigen::new(cov.clone());
        let vals = eig.eigenvalues.as_slice();
        let argmax = (0..vals.len()).fold(0, |b, i| if vals[i] > vals[b] { i } else { b });
        let argmin = (0..vals.len()).fold(0, |b, i| if vals[i] < vals[b] { i } else { b });
        for i in [argmax, argmin] {
            dirs.push(eig.eigenvectors.column(i).iter().copied().collect());
        }
    }
    dirs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassNormStats {
    pub class: usize,
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Equal-width histogram; the last bin is closed on the right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidConfig(
                "histogram needs at least one bin".into(),
            ));
        }
        if values.is_empty() {
            return Err(Error::Empty("histogram input"));
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = if width > 0.0 {
                (((v - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        Ok(Self { edges, counts })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub per_class: Vec<ClassNormStats>,
    pub histogram: Histogram,
}

/// Per-class statistics of the row norms and a pooled histogram.
pub fn norm_stats(features: &FeatureMatrix, labels: &Labels, bins: usize) -> Result<NormStats> {
    labels.require_rows(features.n_rows())?;
    if features.is_empty() {
        return Err(Error::Empty("feature matrix"));
    }
    let norms = features.row_norms();
    let mut by_class: Vec<Vec<f64>> = vec![Vec::new(); labels.n_classes()];
    for (&n, &c) in norms.iter().zip(labels.values()) {
        by_class[c].push(n);
    }
    let per_class = by_class
        .iter()
        .enumerate()
        .map(|(class, v)| {
            if v.is_empty() {
                return Err(Error::EmptyClass(class));
            }
            let (mean, std) = mean_std(v);
            Ok(ClassNormStats {
                class,
                count: v.len(),
                mean,
                std,
                min: v.iter().copied().fold(f64::INFINITY, f64::min),
                max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
        })
        .collect::<Result<_>>()?;
    Ok(NormStats {
        per_class,
        histogram: Histogram::new(&norms, bins)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson: f64,
    pub spearman: f64,
}

/// Pearson and Spearman correlation between row norms and scores.
pub fn norm_score_correlation(features: &FeatureMatrix, scores: &[f64]) -> Result<Correlation> {
    if scores.len() != features.n_rows() {
        return Err(Error::DimensionMismatch {
            what: "score count vs feature rows",
            expected: features.n_rows(),
            found: scores.len(),
        });
    }
    let norms = features.row_norms();
    Ok(Correlation {
        pearson: pearson(&norms, scores)?,
        spearman: pearson(&average_ranks(&norms), &average_ranks(scores))?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub fpr: f64,
    pub auroc: f64,
}

/// FPR at 95% TPR after scaling only the OOD features by each `alpha`.
///
/// `method` must be [`Method::Maha`] or [`Method::MahaPP`], matching the
/// normalization of `fit`.
pub fn alpha_sweep(
    fit: &GaussianFit,
    id_test: &FeatureMatrix,
    ood_test: &FeatureMatrix,
    alphas: &[f64],
    method: Method,
) -> Result<Vec<AlphaPoint>> {
    let normalized = match method {
        Method::Maha => false,
        Method::MahaPP => true,
        other => {
            return Err(Error::InvalidConfig(format!(
                "alpha sweep supports maha and maha++, not {other}"
            )))
        }
    };
    let id = score_maha(fit, id_test, normalized)?;
    alphas
        .iter()
        .map(|&alpha| {
            let ood = score_maha(fit, &scale_features(ood_test, alpha)?, normalized)
                .map_err(|e| e.context(format!("alpha {alpha}")))?;
            let r = fpr_at_tpr(&id.scores, &ood.scores, DEFAULT_TPR)?;
            Ok(AlphaPoint {
                alpha,
                fpr: r.fpr_at_tpr,
                auroc: r.auroc,
            })
        })
        .collect()
}
