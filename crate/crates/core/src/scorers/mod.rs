//! OOD scoring functions.
//!
//! Every scorer maps a batch of test features (and optionally precomputed
//! logits) to one score per row, larger meaning more in-distribution.
//! Calibration that depends on training data (ReAct threshold, ViM principal
//! space, NNGuide subset, KL-matching templates, ...) happens once when a
//! scorer is built; [`Scorer::score`] is then a pure function of its input.

mod logit;
mod mahalanobis;
mod neighbors;
mod subspace;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{self, GaussianFit, Shrinkage};
use crate::matrix::{dot, FeatureMatrix, Labels, RowMatrix};

pub use logit::{
    energy_from_logits, klm_templates, maxlogit_from_logits, msp_from_logits, react_threshold,
    score_ash_s, score_energy, score_energy_react, score_klm, score_klm_logits, score_maxlogit,
    score_msp, score_ssc, AshOutcome,
};
pub use mahalanobis::{score_gmm, score_maha, score_rel_maha, GmmModel};
pub use neighbors::{nnguide_subset, score_cosine, score_knn, score_nnguide, KnnIndex};
pub use subspace::{score_neco, score_vim, vim_auto_dim, NecoModel, VimModel};

/// Linear classifier head producing logits `o = W φ + b`, with `W` stored `C x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHead {
    w: RowMatrix,
    b: Vec<f64>,
}

impl ModelHead {
    pub fn new(w: RowMatrix, b: Vec<f64>) -> Result<Self> {
        if b.len() != w.n_rows() {
            return Err(Error::DimensionMismatch {
                what: "head bias length",
                expected: w.n_rows(),
                found: b.len(),
            });
        }
        if let Some(i) = b.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: i, col: 0 });
        }
        Ok(Self { w, b })
    }

    pub fn weights(&self) -> &RowMatrix {
        &self.w
    }

    pub fn bias(&self) -> &[f64] {
        &self.b
    }

    pub fn n_classes(&self) -> usize {
        self.w.n_rows()
    }

    pub fn dim(&self) -> usize {
        self.w.dim()
    }

    pub(crate) fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, w), b) in out.iter_mut().zip(self.w.rows()).zip(&self.b) {
            *o = dot(w, x) + b;
        }
    }

    pub fn logits(&self, features: &FeatureMatrix) -> Result<RowMatrix> {
        features.require_dim(self.dim(), "feature width vs head")?;
        Ok(features.map_rows(self.n_classes(), |x, o| self.logits_into(x, o)))
    }
}

/// Every supported scoring method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Msp,
    MaxLogit,
    Energy,
    EnergyReact,
    KlMatching,
    Knn,
    Vim,
    Cosine,
    Ssc,
    AshS,
    NeCo,
    Gmm,
    NnGuide,
    Maha,
    MahaPP,
    RelMaha,
    RelMahaPP,
}

impl Method {
    pub const ALL: [Method; 17] = [
        Method::Msp,
        Method::MaxLogit,
        Method::Energy,
        Method::EnergyReact,
        Method::KlMatching,
        Method::Knn,
        Method::Vim,
        Method::Cosine,
        Method::Ssc,
        Method::AshS,
        Method::NeCo,
        Method::Gmm,
        Method::NnGuide,
        Method::Maha,
        Method::MahaPP,
        Method::RelMaha,
        Method::RelMahaPP,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Msp => "msp",
            Method::MaxLogit => "maxlogit",
            Method::Energy => "energy",
            Method::EnergyReact => "react",
            Method::KlMatching => "klm",
            Method::Knn => "knn",
            Method::Vim => "vim",
            Method::Cosine => "cosine",
            Method::Ssc => "ssc",
            Method::AshS => "ash-s",
            Method::NeCo => "neco",
            Method::Gmm => "gmm",
            Method::NnGuide => "nnguide",
            Method::Maha => "maha",
            Method::MahaPP => "maha++",
            Method::RelMaha => "rmaha",
            Method::RelMahaPP => "rmaha++",
        }
    }

    /// Which Gaussian fit the method consumes: `Some(normalized)` or `None`.
    pub fn gaussian_fit(self) -> Option<bool> {
        match self {
            Method::Maha | Method::RelMaha | Method::Gmm => Some(false),
            Method::MahaPP | Method::RelMahaPP => Some(true),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        let m = match key.as_str() {
            "msp" => Method::Msp,
            "maxlogit" | "max-logit" | "ml" | "mls" => Method::MaxLogit,
            "energy" | "e" | "ebo" => Method::Energy,
            "react" | "energy+react" | "e+r" => Method::EnergyReact,
            "klm" | "kl-matching" => Method::KlMatching,
            "knn" => Method::Knn,
            "vim" => Method::Vim,
            "cosine" | "cos" => Method::Cosine,
            "ssc" => Method::Ssc,
            "ash-s" | "ashs" | "ash" => Method::AshS,
            "neco" | "nec" => Method::NeCo,
            "gmm" => Method::Gmm,
            "nnguide" | "nng" => Method::NnGuide,
            "maha" | "md" | "mahalanobis" => Method::Maha,
            "maha++" | "md++" | "mahalanobis++" => Method::MahaPP,
            "rmaha" | "rmd" | "relmaha" => Method::RelMaha,
            "rmaha++" | "rmd++" | "relmaha++" => Method::RelMahaPP,
            _ => return Err(Error::UnknownMethod(s.to_string())),
        };
        Ok(m)
    }
}

/// Hyperparameters for all scorers, with the reference defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    pub knn_k: usize,
    pub react_clip_quantile: f64,
    pub nnguide_subset_fraction: f64,
    pub nnguide_k: usize,
    pub ash_prune_percentile: f64,
    pub neco_explained_variance: f64,
    /// `None` picks the dimension from the feature width, see [`vim_auto_dim`].
    pub vim_dim: Option<usize>,
    pub ssc_scale: f64,
    pub shrinkage: Shrinkage,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            knn_k: 1000,
            react_clip_quantile: 0.99,
            nnguide_subset_fraction: 0.01,
            nnguide_k: 10,
            ash_prune_percentile: 90.0,
            neco_explained_variance: 0.90,
            vim_dim: None,
            ssc_scale: 1.0,
            shrinkage: Shrinkage::Auto,
            seed: 0,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        let fraction = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "{name} must be in (0, 1], got {v}"
                )))
            }
        };
        fraction("react_clip_quantile", self.react_clip_quantile)?;
        fraction("nnguide_subset_fraction", self.nnguide_subset_fraction)?;
        fraction("neco_explained_variance", self.neco_explained_variance)?;
        if self.knn_k == 0 || self.nnguide_k == 0 || self.vim_dim == Some(0) {
            return Err(Error::InvalidConfig(
                "neighbor counts and vim_dim must be >= 1".into(),
            ));
        }
        if !(0.0..=100.0).contains(&self.ash_prune_percentile) {
            return Err(Error::InvalidConfig(format!(
                "ash_prune_percentile must be in [0, 100], got {}",
                self.ash_prune_percentile
            )));
        }
        if !self.ssc_scale.is_finite() {
            return Err(Error::InvalidConfig("ssc_scale must be finite".into()));
        }
        Ok(())
    }
}

/// Which fit produced a score vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitProvenance {
    pub shrinkage_eps: f64,
    pub normalized: bool,
}

impl FitProvenance {
    pub fn of(fit: &GaussianFit) -> Self {
        Self {
            shrinkage_eps: fit.shrinkage_eps(),
            normalized: fit.normalized(),
        }
    }
}

/// Per-sample scores, larger = more in-distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub method: Method,
    pub provenance: Option<FitProvenance>,
}

impl ScoreVector {
    pub fn new(method: Method, scores: Vec<f64>) -> Result<Self> {
        if let Some(row) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteScore {
                method: method.name().to_string(),
                row,
            });
        }
        Ok(Self {
            scores,
            method,
            provenance: None,
        })
    }

    pub(crate) fn with_fit(mut self, fit: &GaussianFit) -> Self {
        self.provenance = Some(FitProvenance::of(fit));
        self
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Multiplies every row by `alpha`, keeping directions.
pub fn scale_features(test: &FeatureMatrix, alpha: f64) -> Result<FeatureMatrix> {
    if !alpha.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "alpha must be finite, got {alpha}"
        )));
    }
    Ok(test.map_rows(test.dim(), |src, dst| {
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s * alpha;
        }
    }))
}

/// Test input for a [`Scorer`]: features plus optional precomputed logits.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a FeatureMatrix,
    pub logits: Option<&'a RowMatrix>,
}

impl<'a> Batch<'a> {
    pub fn features(features: &'a FeatureMatrix) -> Self {
        Self {
            features,
            logits: None,
        }
    }
}

/// Training-side inputs used to calibrate scorers.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub features: &'a FeatureMatrix,
    pub labels: &'a Labels,
    pub head: Option<&'a ModelHead>,
    /// Precomputed train logits, used when no head is available.
    pub logits: Option<&'a RowMatrix>,
}

/// Gaussian fits shared between scorers.
#[derive(Debug, Clone, Default)]
pub struct Fits {
    pub plain: Option<Arc<GaussianFit>>,
    pub normalized: Option<Arc<GaussianFit>>,
}

impl Fits {
    fn get(&self, normalized: bool) -> Result<&Arc<GaussianFit>> {
        let f = if normalized {
            &self.normalized
        } else {
            &self.plain
        };
        f.as_ref().ok_or(Error::FitMismatch {
            fit_normalized: !normalized,
            requested: normalized,
        })
    }
}

/// A calibrated scorer.
pub trait Scorer: Send + Sync {
    fn method(&self) -> Method;
    fn score(&self, batch: Batch<'_>) -> Result<ScoreVector>;
}

/// Logits for a batch: precomputed ones if given, else from the head.
fn batch_logits(batch: Batch<'_>, head: Option<&ModelHead>) -> Result<RowMatrix> {
    if let Some(l) = batch.logits {
        if l.n_rows() != batch.features.n_rows() {
            return Err(Error::DimensionMismatch {
                what: "logit rows vs feature rows",
                expected: batch.features.n_rows(),
                found: l.n_rows(),
            });
        }
        return Ok(l.clone());
    }
    head.ok_or(Error::MissingHead)?.logits(batch.features)
}

fn train_logits(train: &TrainingData<'_>) -> Result<RowMatrix> {
    batch_logits(
        Batch {
            features: train.features,
            logits: train.logits,
        },
        train.head,
    )
}

struct LogitScorer {
    method: Method,
    head: Option<ModelHead>,
    f: fn(&RowMatrix) -> Result<ScoreVector>,
}

impl Scorer for LogitScorer {
    fn method(&self) -> Method {
        self.method
    }

    fn score(&self, batch: Batch<'_>) -> Result<ScoreVector> {
        (self.f)(&batch_logits(batch, self.head.as_ref())?)
    }
}

struct MahaScorer {
    fit: Arc<GaussianFit>,
    method: Method,
}

impl Scorer for MahaScorer {
    fn method(&self) -> Method {
        self.method
    }

    fn score(&self, batch: Batch<'_>) -> Result<ScoreVector> {
        let normalized = self.fit.normalized();
        let mut s = match self.method {
            Method::RelMaha | Method::RelMahaPP => {
                score_rel_maha(&self.fit, batch.features, normalized)?
            }
            _ => score_maha(&self.fit, batch.features, normalized)?,
        };
        s.method = self.method;
        Ok(s)
    }
}

struct ReactScorer {
    head: ModelHead,
    threshold: f64,
}

impl Scorer for ReactScorer {
    fn method(&self) -> Method {
        Method::EnergyReact
    }

    fn score(&self, batch: Batch<'_>) -> Result<ScoreVector> {
        logit::energy_clipped(&self.head, batch.features, self.threshold)
    }
}

struct KlmScorer {
    head: Option<ModelHead>,
    templates: RowMatrix,
}

impl Scorer for KlmScorer {
    fn method(&self) -> Method {
        Method::KlMatching
    }

    fn score(&self, batch: Batch<'_>) -> Result<ScoreVector> {
        score_klm_logits(&self.templates, &batch_logits(batch, self.head.as_ref())?)
    }
}

struct HeadScorer {
    method: Method,
    head: ModelHead,
    config: ScorerConfig,
}

impl Scorer for HeadScorer {
    fn method(&self) -> Method {
        self.method
    }

    fn score(&self, batch: Batch<'_>) -> Result<ScoreVector> {
        match self.method {
            Method::Ssc => score_ssc(&self.head, batch.features, self.config.ssc_scale),
            Method::AshS => {
                Ok(
                    score_ash_s(&self.head, batch.features, self.config.ash_prune_percentile)?
                        .scores,
                )
            }
            _ => unreachable!("head scorer built for {}", self.method),
        }
    }
}

struct KnnScorer {
    index: KnnIndex,
    k: usize,
}

impl Scorer for KnnScorer {
    fn method(&self) -> Method {
        Method::Knn
    }

    fn score(&self, batch: Batch<'_>) -> Result<ScoreVector> {
        self.index.score_knn(batch.features, self.k)
    }
}

struct NnGuideScorer {
    head: Option<ModelHead>,
    index: KnnIndex,
    k: usize,
}

impl Scorer for NnGuideScorer {
    fn method(&self) -> Method {
        Method::NnGuide
    }

    fn score(&self, batch: Batch<'_>) -> Result<ScoreVector> {
        let energy = energy_from_logits(&batch_logits(batch, self.head.as_ref())?)?;
        let sims = self.index.kth_similarity(batch.features, self.k)?;
        let scores = energy
            .scores
            .iter()
            .zip(&sims)
            .map(|(e, s)| e * s)
            .collect();
        ScoreVector::new(Method::NnGuide, scores)
    }
}

struct CosineScorer {
    means: RowMatrix,
}

impl Scorer for CosineScorer {
    fn method(&self) -> Method {
        Method::Cosine
    }

    fn score(&self, batch: Batch<'_>) -> Result<ScoreVector> {
        score_cosine(&self.means, batch.features)
    }
}

struct VimScorer {
    model: VimModel,
}

impl Scorer for VimScorer {
    fn method(&self) -> Method {
        Method::Vim
    }

    fn score(&self, batch: Batch<'_>) -> Result<ScoreVector> {
        self.model.score(batch.features, batch.logits)
    }
}

struct NecoScorer {
    head: Option<ModelHead>,
    model: NecoModel,
}

impl Scorer for NecoScorer {
    fn method(&self) -> Method {
        Method::NeCo
    }

    fn score(&self, batch: Batch<'_>) -> Result<ScoreVector> {
        let logits = batch_logits(batch, self.head.as_ref())?;
        self.model.score(batch.features, &logits)
    }
}

struct GmmScorer {
    model: GmmModel,
}

impl Scorer for GmmScorer {
    fn method(&self) -> Method {
        Method::Gmm
    }

    fn score(&self, batch: Batch<'_>) -> Result<ScoreVector> {
        self.model.score(batch.features)
    }
}

/// Builds and calibrates the scorer for `method`.
///
/// Gaussian-based methods take their fit from `fits`; everything else is
/// calibrated from `train` here, once.
pub fn build_scorer(
    method: Method,
    config: &ScorerConfig,
    train: &TrainingData<'_>,
    fits: &Fits,
) -> Result<Box<dyn Scorer>> {
    config.validate()?;
    let head = train.head.cloned();
    let scorer: Box<dyn Scorer> = match method {
        Method::Msp => Box::new(LogitScorer {
            method,
            head,
            f: msp_from_logits,
        }),
        Method::MaxLogit => Box::new(LogitScorer {
            method,
            head,
            f: maxlogit_from_logits,
        }),
        Method::Energy => Box::new(LogitScorer {
            method,
            head,
            f: energy_from_logits,
        }),
        Method::EnergyReact => {
            let head = head.ok_or(Error::MissingHead)?;
            let threshold = react_threshold(train.features, config.react_clip_quantile)?;
            Box::new(ReactScorer { head, threshold })
        }
        Method::KlMatching => {
            let templates = klm_templates(&train_logits(train)?, train.labels)?;
            Box::new(KlmScorer { head, templates })
        }
        Method::Ssc | Method::AshS => Box::new(HeadScorer {
            method,
            head: head.ok_or(Error::MissingHead)?,
            config: config.clone(),
        }),
        Method::Knn => {
            if config.knn_k > train.features.n_rows() {
                return Err(Error::InvalidConfig(format!(
                    "knn_k = {} exceeds the {} training rows",
                    config.knn_k,
                    train.features.n_rows()
                )));
            }
            Box::new(KnnScorer {
                index: KnnIndex::new(train.features)?,
                k: config.knn_k,
            })
        }
        Method::NnGuide => {
            let subset = nnguide_subset(
                train.features.n_rows(),
                config.nnguide_subset_fraction,
                config.seed,
            );
            if config.nnguide_k > subset.len() {
                return Err(Error::InvalidConfig(format!(
                    "nnguide_k = {} exceeds the {}-row guide subset",
                    config.nnguide_k,
                    subset.len()
                )));
            }
            if head.is_none() && train.logits.is_none() {
                return Err(Error::MissingHead);
            }
            Box::new(NnGuideScorer {
                head,
                index: KnnIndex::new(&train.features.select_rows(&subset))?,
                k: config.nnguide_k,
            })
        }
        Method::Cosine => Box::new(CosineScorer {
            means: match &fits.plain {
                Some(f) => f.means().clone(),
                None => gaussian::estimate_class_means(train.features, train.labels)?,
            },
        }),
        Method::Vim => {
            let head = head.ok_or(Error::MissingHead)?;
            Box::new(VimScorer {
                model: VimModel::new(&head, train.features, train.logits, config.vim_dim)?,
            })
        }
        Method::NeCo => {
            if head.is_none() {
                return Err(Error::MissingHead);
            }
            Box::new(NecoScorer {
                head,
                model: NecoModel::new(train.features, config.neco_explained_variance)?,
            })
        }
        Method::Gmm => {
            let fit = fits.get(false)?.clone();
            let pcs = gaussian::estimate_per_class_covariances(
                train.features,
                train.labels,
                fit.means(),
            )?;
            Box::new(GmmScorer {
                model: GmmModel::new(&fit, &pcs, config.shrinkage)?,
            })
        }
        Method::Maha | Method::RelMaha | Method::MahaPP | Method::RelMahaPP => {
            let normalized = method.gaussian_fit() == Some(true);
            Box::new(MahaScorer {
                fit: fits.get(normalized)?.clone(),
                method,
            })
        }
    };
    Ok(scorer)
}
