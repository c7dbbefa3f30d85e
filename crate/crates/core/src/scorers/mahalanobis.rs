use std::borrow::Cow;

use rayon::prelude::*;

use super::{Method, ScoreVector};
use crate::error::{Error, Result};
use crate::gaussian::{
    factorize, forward_substitute, l2_normalize, row_major, GaussianFit, PerClassCovariances,
    Shrinkage,
};
use crate::matrix::FeatureMatrix;

fn prepare<'a>(
    fit: &GaussianFit,
    test: &'a FeatureMatrix,
    normalized_variant: bool,
) -> Result<Cow<'a, FeatureMatrix>> {
    if fit.normalized() != normalized_variant {
        return Err(Error::FitMismatch {
            fit_normalized: fit.normalized(),
            requested: normalized_variant,
        });
    }
    test.require_dim(fit.dim(), "test feature width vs fit")?;
    if normalized_variant {
        Ok(Cow::Owned(l2_normalize(test)?))
    } else {
        Ok(Cow::Borrowed(test))
    }
}

fn min(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(f64::INFINITY, f64::min)
}

/// Negative smallest squared Mahalanobis distance to a class mean.
///
/// With `normalized_variant` (Mahalanobis++) the fit must come from
/// l2-normalized training features and test rows are normalized first.
pub fn score_maha(
    fit: &GaussianFit,
    test: &FeatureMatrix,
    normalized_variant: bool,
) -> Result<ScoreVector> {
    let test = prepare(fit, test, normalized_variant)?;
    let scores = test
        .par_rows()
        .map(|x| -min(fit.class_distances(x)))
        .collect();
    let method = if normalized_variant {
        Method::MahaPP
    } else {
        Method::Maha
    };
    Ok(ScoreVector::new(method, scores)?.with_fit(fit))
}

/// Relative Mahalanobis: `−min_c [d_c(φ) − d_global(φ)]`.
pub fn score_rel_maha(
    fit: &GaussianFit,
    test: &FeatureMatrix,
    normalized_variant: bool,
) -> Result<ScoreVector> {
    let test = prepare(fit, test, normalized_variant)?;
    let scores = test
        .par_rows()
        .map(|x| {
            let dg = fit.global_distance(x);
            -min(fit.class_distances(x).into_iter().map(|dc| dc - dg))
        })
        .collect();
    let method = if normalized_variant {
        Method::RelMahaPP
    } else {
        Method::RelMaha
    };
    Ok(ScoreVector::new(method, scores)?.with_fit(fit))
}

#[derive(Debug, Clone)]
struct Component {
    mean: Vec<f64>,
    factor_rows: Vec<f64>,
    /// `ln π_c − (d/2) ln 2π − Σ ln L_ii`
    log_norm: f64,
    shrinkage_eps: f64,
}

/// Class-weighted mixture of full-covariance Gaussians, one per class.
#[derive(Debug, Clone)]
pub struct GmmModel {
    components: Vec<Component>,
    normalized: bool,
    dim: usize,
}

impl GmmModel {
    /// Components `N(μ_c, Σ_c + ε_c·s_c·I)` with weights `N_c/N`.
    ///
    /// `s_c = tr(Σ_c)/d`, falling back to the shared covariance's scale for
    /// classes with zero spread (singletons).
    pub fn new(
        fit: &GaussianFit,
        per_class: &PerClassCovariances,
        shrinkage: Shrinkage,
    ) -> Result<Self> {
        let d = fit.dim();
        if per_class.covs.len() != fit.n_classes() {
            return Err(Error::DimensionMismatch {
                what: "per-class covariance count",
                expected: fit.n_classes(),
                found: per_class.covs.len(),
            });
        }
        let shared_scale = fit.shared_cov().trace() / d as f64;
        let n: usize = per_class.counts.iter().sum();
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut components = Vec::with_capacity(fit.n_classes());
        for (c, (cov, &nc)) in per_class.covs.iter().zip(&per_class.counts).enumerate() {
            let own = cov.trace() / d as f64;
            let scale = if own > 0.0 { own } else { shared_scale };
            let (l, eps) = factorize(cov, shrinkage, Some(scale))
                .map_err(|e| e.context(format!("gmm class {c}")))?;
            let log_det_half: f64 = (0..d).map(|i| l[(i, i)].ln()).sum();
            components.push(Component {
                mean: fit.means().row(c).to_vec(),
                factor_rows: row_major(&l),
                log_norm: (nc as f64 / n as f64).ln() - d as f64 * half_log_2pi - log_det_half,
                shrinkage_eps: eps,
            });
        }
        Ok(Self {
            components,
            normalized: fit.normalized(),
            dim: d,
        })
    }

    /// Shrinkage actually applied per component.
    pub fn shrinkage_eps(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.shrinkage_eps).collect()
    }

    /// Mixture log density of one row.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.dim];
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|comp| {
                for ((b, xi), m) in buf.iter_mut().zip(x).zip(&comp.mean) {
                    *b = xi - m;
                }
                forward_substitute(&comp.factor_rows, &mut buf);
                comp.log_norm - 0.5 * buf.iter().map(|v| v * v).sum::<f64>()
            })
            .collect();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }

    pub fn score(&self, test: &FeatureMatrix) -> Result<ScoreVector> {
        test.require_dim(self.dim, "test feature width vs gmm")?;
        let test = if self.normalized {
            Cow::Owned(l2_normalize(test)?)
        } else {
            Cow::Borrowed(test)
        };
        let scores = test.par_rows().map(|x| self.log_density(x)).collect();
        ScoreVector::new(Method::Gmm, scores)
    }
}

/// Mixture log density under per-class Gaussians.
pub fn score_gmm(
    fit: &GaussianFit,
    per_class: &PerClassCovariances,
    test: &FeatureMatrix,
    shrinkage: Shrinkage,
) -> Result<ScoreVector> {
    Ok(GmmModel::new(fit, per_class, shrinkage)?
        .score(test)?
        .with_fit(fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{estimate_per_class_covariances, fit};
    use crate::matrix::{Labels, RowMatrix};

    fn four_points() -> (FeatureMatrix, Labels) {
        (
            RowMatrix::from_rows(&[[1.0, 0.0], [3.0, 0.0], [0.0, 2.0], [0.0, 4.0]]).unwrap(),
            Labels::new(vec![0, 0, 1, 1], 2).unwrap(),
        )
    }

    #[test]
    fn score_at_class_mean_is_zero() {
        let (f, l) = four_points();
        let g = fit(&f, &l, false, Shrinkage::Auto).unwrap();
        let t = RowMatrix::from_rows(&[[2.0, 0.0], [0.0, 3.0]]).unwrap();
        let s = score_maha(&g, &t, false).unwrap();
        assert_eq!(s.scores, vec![0.0, 0.0]);
        assert_eq!(s.provenance.unwrap().shrinkage_eps, g.shrinkage_eps());
    }

    #[test]
    fn mismatched_fit_refused() {
        let (f, l) = four_points();
        let g = fit(&f, &l, false, Shrinkage::Auto).unwrap();
        assert!(matches!(
            score_maha(&g, &f, true),
            Err(Error::FitMismatch { .. })
        ));
        assert!(matches!(
            score_rel_maha(&g, &f, true),
            Err(Error::FitMismatch { .. })
        ));
    }

    #[test]
    fn maha_pp_rejects_zero_rows() {
        let f = RowMatrix::from_rows(&[[1.0, 0.2], [3.0, -0.1], [0.1, 2.0], [-0.2, 4.0]]).unwrap();
        let l = Labels::new(vec![0, 0, 1, 1], 2).unwrap();
        let g = fit(&f, &l, true, Shrinkage::Auto).unwrap();
        let t = RowMatrix::from_rows(&[[0.0, 0.0]]).unwrap();
        assert!(matches!(
            score_maha(&g, &t, true),
            Err(Error::ZeroNormRow(0))
        ));
        // plain Maha accepts the origin
        let g = fit(&f, &l, false, Shrinkage::Auto).unwrap();
        assert!(score_maha(&g, &t, false).is_ok());
    }

    #[test]
    fn rel_maha_single_class_is_zero() {
        let f = RowMatrix::from_rows(&[[1.0, 0.5], [2.0, -1.0], [0.0, 0.3], [1.5, 2.0]]).unwrap();
        let l = Labels::new(vec![0; 4], 1).unwrap();
        let g = fit(&f, &l, false, Shrinkage::Auto).unwrap();
        let t = RowMatrix::from_rows(&[[0.1, 0.2], [5.0, -3.0]]).unwrap();
        for s in score_rel_maha(&g, &t, false).unwrap().scores {
            assert!(s.abs() < 1e-9);
        }
    }

    #[test]
    fn gmm_single_class_peak() {
        let f = RowMatrix::from_rows(&[[1.0, 0.5], [2.0, -1.0], [0.0, 0.3], [1.5, 2.0]]).unwrap();
        let l = Labels::new(vec![0; 4], 1).unwrap();
        let g = fit(&f, &l, false, Shrinkage::Fixed(0.0)).unwrap();
        let pcs = estimate_per_class_covariances(&f, &l, g.means()).unwrap();
        let s = score_gmm(&g, &pcs, &g.means().clone(), Shrinkage::Fixed(0.0)).unwrap();
        let det = pcs.covs[0].determinant();
        let expect = -(2.0 / 2.0) * (2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln();
        assert!((s.scores[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn gmm_symmetric_midpoint() {
        // two mirror-image classes; midpoint has equal responsibilities
        let f = RowMatrix::from_rows(&[
            [-3.0, 1.0],
            [-3.0, -1.0],
            [-2.0, 0.0],
            [3.0, 1.0],
            [3.0, -1.0],
            [2.0, 0.0],
        ])
        .unwrap();
        let l = Labels::new(vec![0, 0, 0, 1, 1, 1], 2).unwrap();
        let g = fit(&f, &l, false, Shrinkage::Fixed(0.0)).unwrap();
        let pcs = estimate_per_class_covariances(&f, &l, g.means()).unwrap();
        let model = GmmModel::new(&g, &pcs, Shrinkage::Fixed(0.0)).unwrap();
        let single = model.components[0].log_norm
            - 0.5 * {
                let mut b = vec![
                    0.0 - model.components[0].mean[0],
                    0.0 - model.components[0].mean[1],
                ];
                forward_substitute(&model.components[0].factor_rows, &mut b);
                b.iter().map(|v| v * v).sum::<f64>()
            };
        let got = model.log_density(&[0.0, 0.0]);
        assert!((got - (single + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn gmm_singleton_class_uses_shared_scale() {
        let f = RowMatrix::from_rows(&[[1.0, 0.0], [3.0, 0.5], [2.0, 1.0], [10.0, 10.0]]).unwrap();
        let l = Labels::new(vec![0, 0, 0, 1], 2).unwrap();
        let g = fit(&f, &l, false, Shrinkage::Auto).unwrap();
        let pcs = estimate_per_class_covariances(&f, &l, g.means()).unwrap();
        let model = GmmModel::new(&g, &pcs, Shrinkage::Auto).unwrap();
        assert!(model.shrinkage_eps()[1] > 0.0);
        assert!(model
            .score(&f)
            .unwrap()
            .scores
            .iter()
            .all(|s| s.is_finite()));
    }
}
