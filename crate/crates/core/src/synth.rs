//! Seeded synthetic datasets with controllable per-class norm spread and
//! heavy tails, plus naive reference implementations in [`oracle`].
//!
//! Class `c` draws `r_c · t · (μ_c + L z)` with `z ~ N(0, I)`, `LLᵀ = Σ`, a
//! per-class radial scale `r_c` and a per-sample tail factor `t` (1 unless the
//! sample is in the heavy-tail fraction, then log-uniform in `[1, max]`).
//! Class means sit on a sphere of radius `R`; OOD classes use held-out mean
//! directions at least `2/√d` radians away from every training mean.

pub mod oracle;

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, FeatureMatrix, Labels, RowMatrix};
use crate::rng::SeededRng;
use crate::scorers::ModelHead;

/// Attempts per held-out OOD direction before giving up.
const MAX_DIRECTION_TRIES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceSpec {
    /// `σ² I`
    Isotropic { sigma: f64 },
    /// `s · (AAᵀ + d I) / (2d)` with `A` standard normal, so `tr Σ ≈ s·d`.
    RandomPsd { scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RadialLaw {
    Constant { scale: f64 },
    LogUniform { lo: f64, hi: f64 },
}

impl RadialLaw {
    fn draw(&self, rng: &mut SeededRng) -> f64 {
        match *self {
            RadialLaw::Constant { scale } => scale,
            RadialLaw::LogUniform { lo, hi } => rng.log_uniform(lo, hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub id_test_per_class: usize,
    pub n_ood_classes: usize,
    pub ood_per_class: usize,
    /// Radius `R` of the sphere holding the class means.
    pub mean_radius: f64,
    pub covariance: CovarianceSpec,
    pub radial: RadialLaw,
    #[serde(default)]
    pub heavy_tail_fraction: f64,
    #[serde(default = "default_heavy_tail_max")]
    pub heavy_tail_max_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_heavy_tail_max() -> f64 {
    4.0
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            dim: 16,
            train_per_class: 100,
            id_test_per_class: 50,
            n_ood_classes: 5,
            ood_per_class: 100,
            mean_radius: 4.0,
            covariance: CovarianceSpec::Isotropic { sigma: 1.0 },
            radial: RadialLaw::Constant { scale: 1.0 },
            heavy_tail_fraction: 0.0,
            heavy_tail_max_scale: default_heavy_tail_max(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// The heteroscedastic-norm setting: 50 classes in 64 dimensions, radial
    /// scales log-uniform in `[0.5, 2]`, 200 training rows per class.
    pub fn heteroscedastic(seed: u64) -> Self {
        Self {
            n_classes: 50,
            dim: 64,
            train_per_class: 200,
            id_test_per_class: 50,
            n_ood_classes: 20,
            ood_per_class: 100,
            mean_radius: 4.0,
            covariance: CovarianceSpec::Isotropic { sigma: 1.0 },
            radial: RadialLaw::LogUniform { lo: 0.5, hi: 2.0 },
            heavy_tail_fraction: 0.0,
            heavy_tail_max_scale: default_heavy_tail_max(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_classes == 0 || self.dim == 0 {
            return bad("n_classes and dim must be at least 1".into());
        }
        if self.train_per_class == 0 {
            return bad("train_per_class must be at least 1".into());
        }
        if !(self.mean_radius >= 0.0 && self.mean_radius.is_finite()) {
            return bad(format!(
                "mean_radius must be finite and ≥ 0, got {}",
                self.mean_radius
            ));
        }
        match self.covariance {
            CovarianceSpec::Isotropic { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                return bad(format!("sigma must be positive, got {sigma}"))
            }
            CovarianceSpec::RandomPsd { scale } if !(scale > 0.0 && scale.is_finite()) => {
                return bad(format!("covariance scale must be positive, got {scale}"))
            }
            _ => {}
        }
        match self.radial {
            RadialLaw::Constant { scale } if !(scale > 0.0 && scale.is_finite()) => {
                return bad(format!("radial scale must be positive, got {scale}"))
            }
            RadialLaw::LogUniform { lo, hi } if !(lo > 0.0 && lo <= hi && hi.is_finite()) => {
                return bad(format!("radial law needs 0 < lo ≤ hi, got [{lo}, {hi}]"))
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.heavy_tail_fraction) {
            return bad(format!(
                "heavy_tail_fraction must be in [0, 1], got {}",
                self.heavy_tail_fraction
            ));
        }
        if !(self.heavy_tail_max_scale >= 1.0 && self.heavy_tail_max_scale.is_finite()) {
            return bad(format!(
                "heavy_tail_max_scale must be ≥ 1, got {}",
                self.heavy_tail_max_scale
            ));
        }
        Ok(())
    }
}

/// A generated dataset with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: FeatureMatrix,
    pub train_labels: Labels,
    pub id_test: FeatureMatrix,
    pub id_test_labels: Labels,
    pub ood: FeatureMatrix,
    /// Held-out class index of each OOD row.
    pub ood_labels: Vec<usize>,
    /// Unscaled class means `μ_c` (`C x d`).
    pub class_means: RowMatrix,
    pub ood_means: RowMatrix,
    pub radial_scales: Vec<f64>,
    pub ood_radial_scales: Vec<f64>,
    /// The covariance `Σ` shared by all classes before radial scaling.
    pub covariance: DMatrix<f64>,
    /// Linear head `w_c = Σ⁻¹ r_cμ_c`, `b_c = −½ r_cμ_cᵀ Σ⁻¹ r_cμ_c`.
    pub head: ModelHead,
}

struct Sampler<'a> {
    factor: &'a DMatrix<f64>,
    spec: &'a SynthSpec,
    z: Vec<f64>,
}

impl Sampler<'_> {
    fn draw(&mut self, rng: &mut SeededRng, mean: &[f64], radial: f64, out: &mut Vec<f64>) {
        let d = mean.len();
        rng.fill_normal(&mut self.z);
        let tail = if self.spec.heavy_tail_fraction > 0.0
            && rng.bernoulli(self.spec.heavy_tail_fraction)
        {
            rng.log_uniform(1.0, self.spec.heavy_tail_max_scale)
        } else {
            1.0
        };
        for i in 0..d {
            let lz: f64 = (0..=i).map(|k| self.factor[(i, k)] * self.z[k]).sum();
            out.push(radial * tail * (mean[i] + lz));
        }
    }

    fn block(
        &mut self,
        rng: &mut SeededRng,
        means: &RowMatrix,
        scales: &[f64],
        per_class: usize,
    ) -> (RowMatrix, Vec<usize>) {
        let d = means.dim();
        let mut data = Vec::with_capacity(means.n_rows() * per_class * d);
        let mut labels = Vec::with_capacity(means.n_rows() * per_class);
        for c in 0..means.n_rows() {
            for _ in 0..per_class {
                self.draw(rng, means.row(c), scales[c], &mut data);
                labels.push(c);
            }
        }
        (RowMatrix::from_vec_unchecked(data, labels.len(), d), labels)
    }
}

fn covariance(spec: &SynthSpec, rng: &mut SeededRng) -> DMatrix<f64> {
    let d = spec.dim;
    match spec.covariance {
        CovarianceSpec::Isotropic { sigma } => DMatrix::identity(d, d) * (sigma * sigma),
        CovarianceSpec::RandomPsd { scale } => {
            let a = DMatrix::from_fn(d, d, |_, _| rng.normal());
            let m = &a * a.transpose() + DMatrix::identity(d, d) * d as f64;
            m * (scale / (2.0 * d as f64))
        }
    }
}

/// Generates train, ID test and OOD sets from `spec`, bit-identically per seed.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let d = spec.dim;
    let mut rng = SeededRng::new(spec.seed);

    let mut means = Vec::with_capacity(spec.n_classes * d);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    for _ in 0..spec.n_classes {
        let u = rng.unit_vector(d);
        means.extend(u.iter().map(|v| v * spec.mean_radius));
        dirs.push(u);
    }
    let class_means = RowMatrix::from_vec_unchecked(means, spec.n_classes, d);
    let cov = covariance(spec, &mut rng);
    let radial_scales: Vec<f64> = (0..spec.n_classes)
        .map(|_| spec.radial.draw(&mut rng))
        .collect();

    let min_angle = 2.0 / (d as f64).sqrt();
    let mut ood_means = Vec::with_capacity(spec.n_ood_classes * d);
    for k in 0..spec.n_ood_classes {
        let mut tries = 0;
        let u = loop {
            let u = rng.unit_vector(d);
            if dirs
                .iter()
                .all(|m| dot(&u, m).clamp(-1.0, 1.0).acos() >= min_angle)
            {
                break u;
            }
            tries += 1;
            if tries >= MAX_DIRECTION_TRIES {
                return Err(Error::InvalidConfig(format!(
                    "could not place OOD class {k} at least {min_angle:.3} rad from every train mean"
                )));
            }
        };
        ood_means.extend(u.iter().map(|v| v * spec.mean_radius));
    }
    let ood_means = RowMatrix::from_vec_unchecked(ood_means, spec.n_ood_classes, d);
    let ood_radial_scales: Vec<f64> = (0..spec.n_ood_classes)
        .map(|_| spec.radial.draw(&mut rng))
        .collect();

    let chol = Cholesky::new(cov.clone()).ok_or(Error::SingularCovariance { eps: 0.0 })?;
    let factor = chol.l();
    let mut sampler = Sampler {
        factor: &factor,
        spec,
        z: vec![0.0; d],
    };
    let (train, train_labels) =
        sampler.block(&mut rng, &class_means, &radial_scales, spec.train_per_class);
    let (id_test, id_test_labels) = sampler.block(
        &mut rng,
        &class_means,
        &radial_scales,
        spec.id_test_per_class,
    );
    let (ood, ood_labels) =
        sampler.block(&mut rng, &ood_means, &ood_radial_scales, spec.ood_per_class);

    let mut w = Vec::with_capacity(spec.n_classes * d);
    let mut b = Vec::with_capacity(spec.n_classes);
    for c in 0..spec.n_classes {
        let m = nalgebra::DVector::from_iterator(
            d,
            class_means.row(c).iter().map(|v| v * radial_scales[c]),
        );
        let wc = chol.solve(&m);
        b.push(-0.5 * m.dot(&wc));
        w.extend(wc.iter());
    }
    let head = ModelHead::new(RowMatrix::from_vec_unchecked(w, spec.n_classes, d), b)?;

    Ok(SynthData {
        train,
        train_labels: Labels::new(train_labels, spec.n_classes)?,
        id_test,
        id_test_labels: Labels::new(id_test_labels, spec.n_classes)?,
        ood,
        ood_labels,
        class_means,
        ood_means,
        radial_scales,
        ood_radial_scales,
        covariance: cov,
        head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec {
            heavy_tail_fraction: 0.2,
            covariance: CovarianceSpec::RandomPsd { scale: 1.0 },
            ..SynthSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.ood, b.ood);
        assert_eq!(a.head, b.head);
        let c = generate(&SynthSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn shapes_and_separation() {
        let spec = SynthSpec::default();
        let s = generate(&spec).unwrap();
        assert_eq!(s.train.n_rows(), 1000);
        assert_eq!(s.id_test.n_rows(), 500);
        assert_eq!(s.ood.n_rows(), 500);
        let min_angle = 2.0 / (spec.dim as f64).sqrt();
        for o in s.ood_means.rows() {
            for m in s.class_means.rows() {
                let cos = dot(o, m) / (spec.mean_radius * spec.mean_radius);
                assert!(cos.clamp(-1.0, 1.0).acos() >= min_angle);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = [
            SynthSpec {
                dim: 0,
                ..SynthSpec::default()
            },
            SynthSpec {
                radial: RadialLaw::LogUniform { lo: 2.0, hi: 1.0 },
                ..SynthSpec::default()
            },
            SynthSpec {
                heavy_tail_fraction: 1.5,
                ..SynthSpec::default()
            },
            SynthSpec {
                covariance: CovarianceSpec::Isotropic { sigma: 0.0 },
                ..SynthSpec::default()
            },
        ];
        for s in bad {
            assert!(matches!(generate(&s), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn spec_json_roundtrip() {
        let s = SynthSpec::heteroscedastic(7);
        let back: SynthSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(s, back);
    }
}
