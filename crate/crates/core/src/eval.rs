//! End-to-end evaluation of a bundle: fit once, score every set, tabulate.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use crate::bundle::{load_bundle, Bundle};
use crate::diagnostics::{
    default_qq_directions, norm_score_correlation, norm_stats, qq_quantiles, variance_deviation,
    DEFAULT_HISTOGRAM_BINS,
};
use crate::error::{Error, Result};
use crate::gaussian::{estimate_per_class_covariances, fit, l2_normalize, GaussianFit, Shrinkage};
use crate::matrix::FeatureMatrix;
use crate::metrics::{fpr_at_tpr, unit_test_failures, DEFAULT_TPR, DEFAULT_UNIT_TEST_THRESHOLD};
use crate::report::{
    Average, BundleInfo, ConfigEcho, CorrelationEntry, DeviationEntry, DiagnosticsSummary,
    MethodResult, QQEntry, RunReport, SetResult, Timings, SCHEMA_VERSION, TIE_RULE,
};
use crate::scorers::{
    build_scorer, Batch, Fits, Method, ScoreVector, Scorer, ScorerConfig, TrainingData,
};
use crate::VERSION;

/// Name used for the ID test split in reports and `score --set`.
pub const ID_TEST: &str = "id_test";

/// Which diagnostics to compute.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsConfig {
    /// Per-class norm statistics of the training features, with this many histogram bins.
    pub norm_stats: Option<usize>,
    /// Number of QQ quantiles.
    pub qq: Option<usize>,
    pub deviation: bool,
    /// Methods whose scores are correlated with feature norms.
    pub correlation: Vec<Method>,
}

impl DiagnosticsConfig {
    /// Everything except correlations, at default resolution.
    pub fn standard() -> Self {
        Self {
            norm_stats: Some(DEFAULT_HISTOGRAM_BINS),
            qq: Some(100),
            deviation: true,
            correlation: Vec::new(),
        }
    }

    fn needs_fits(&self) -> bool {
        self.qq.is_some() || self.deviation
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub scorer: ScorerConfig,
    pub tpr_target: f64,
    pub unit_test_threshold: f64,
    pub diagnostics: Option<DiagnosticsConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scorer: ScorerConfig::default(),
            tpr_target: DEFAULT_TPR,
            unit_test_threshold: DEFAULT_UNIT_TEST_THRESHOLD,
            diagnostics: None,
        }
    }
}

pub fn bundle_info(bundle: &Bundle, manifest: &str) -> BundleInfo {
    BundleInfo {
        manifest: manifest.to_string(),
        dim: bundle.dim(),
        n_classes: bundle.n_classes(),
        n_train: bundle.train.n_rows(),
        n_id_test: bundle.id_test.n_rows(),
        ood_sets: bundle
            .ood_sets
            .iter()
            .map(|(k, v)| (k.clone(), v.n_rows()))
            .collect(),
        unit_test_sets: bundle.manifest.unit_test_sets.clone(),
    }
}

/// Fits the plain and/or normalized Gaussian on the bundle's training split.
pub fn fit_bundle(
    bundle: &Bundle,
    plain: bool,
    normalized: bool,
    shrinkage: Shrinkage,
) -> Result<Fits> {
    let one = |normalize: bool| -> Result<Arc<GaussianFit>> {
        let f = fit(&bundle.train, &bundle.train_labels, normalize, shrinkage).map_err(|e| {
            e.context(format!(
                "fitting {} features",
                if normalize { "normalized" } else { "plain" }
            ))
        })?;
        log::info!(
            "fitted {} Gaussian: d={}, C={}, shrinkage eps={:e}",
            if normalize { "normalized" } else { "plain" },
            f.dim(),
            f.n_classes(),
            f.shrinkage_eps()
        );
        Ok(Arc::new(f))
    };
    Ok(Fits {
        plain: if plain { Some(one(false)?) } else { None },
        normalized: if normalized { Some(one(true)?) } else { None },
    })
}

pub fn training_data(bundle: &Bundle) -> TrainingData<'_> {
    TrainingData {
        features: &bundle.train,
        labels: &bundle.train_labels,
        head: bundle.head.as_ref(),
        logits: bundle.logits.train.as_ref(),
    }
}

/// Features and logits of [`ID_TEST`] or a named OOD set.
pub fn batch<'a>(bundle: &'a Bundle, set: &str) -> Result<Batch<'a>> {
    if set == ID_TEST {
        return Ok(Batch {
            features: &bundle.id_test,
            logits: bundle.logits.id_test.as_ref(),
        });
    }
    Ok(Batch {
        features: bundle.ood(set)?,
        logits: bundle.logits.ood_sets.get(set),
    })
}

pub fn score_set(scorer: &dyn Scorer, bundle: &Bundle, set: &str) -> Result<ScoreVector> {
    scorer
        .score(batch(bundle, set)?)
        .map_err(|e| e.context(format!("{} on {set}", scorer.method())))
}

/// Rejects an empty or repeated method list.
pub fn check_methods(methods: &[Method]) -> Result<()> {
    if methods.is_empty() {
        return Err(Error::NoMethods);
    }
    let mut seen = BTreeSet::new();
    for m in methods {
        if !seen.insert(m.name()) {
            return Err(Error::InvalidConfig(format!("method {m} listed twice")));
        }
    }
    Ok(())
}

/// Loads the bundle at `manifest` and evaluates `methods` on it.
pub fn run_eval(
    manifest: impl AsRef<Path>,
    methods: &[Method],
    config: &EvalConfig,
) -> Result<RunReport> {
    check_methods(methods)?;
    let start = Instant::now();
    let manifest = manifest.as_ref();
    let bundle = load_bundle(manifest)?;
    let load = start.elapsed().as_secs_f64();
    let mut report = eval_bundle(&bundle, &manifest.display().to_string(), methods, config)?;
    if let Some(t) = report.timings.as_mut() {
        t.load = load;
        t.total = start.elapsed().as_secs_f64();
    }
    Ok(report)
}

/// Evaluates an already loaded bundle; `manifest` is only echoed.
pub fn eval_bundle(
    bundle: &Bundle,
    manifest: &str,
    methods: &[Method],
    config: &EvalConfig,
) -> Result<RunReport> {
    check_methods(methods)?;
    config.scorer.validate()?;
    if bundle.ood_sets.is_empty() {
        return Err(Error::Manifest("bundle has no OOD sets".into()));
    }
    let start = Instant::now();
    let mut timings = Timings::default();

    let diag_fits = config
        .diagnostics
        .as_ref()
        .is_some_and(DiagnosticsConfig::needs_fits);
    let need = |normalized: bool| {
        diag_fits || methods.iter().any(|m| m.gaussian_fit() == Some(normalized))
    };
    let fits = fit_bundle(bundle, need(false), need(true), config.scorer.shrinkage)?;
    timings.fit = start.elapsed().as_secs_f64();

    let train = training_data(bundle);
    let regular = bundle.regular_sets();
    let mut results = Vec::with_capacity(methods.len());
    for &method in methods {
        let t0 = Instant::now();
        let scorer = build_scorer(method, &config.scorer, &train, &fits)
            .map_err(|e| e.context(format!("building {method}")))?;
        let id = score_set(scorer.as_ref(), bundle, ID_TEST)?;
        let evaluate = |set: &str| -> Result<SetResult> {
            let ood = score_set(scorer.as_ref(), bundle, set)?;
            let result = fpr_at_tpr(&id.scores, &ood.scores, config.tpr_target)
                .map_err(|e| e.context(format!("{method} on {set}")))?;
            Ok(SetResult {
                set: set.to_string(),
                result,
            })
        };
        let sets = regular
            .iter()
            .map(|s| evaluate(s))
            .collect::<Result<Vec<_>>>()?;
        let unit_tests = bundle
            .manifest
            .unit_test_sets
            .iter()
            .map(|s| evaluate(s))
            .collect::<Result<Vec<_>>>()?;
        let fprs: Vec<f64> = unit_tests.iter().map(|r| r.result.fpr_at_tpr).collect();
        results.push(MethodResult {
            method: method.name().to_string(),
            fit: id.provenance,
            average: Average::of(&sets),
            sets,
            unit_test_failures: unit_test_failures(&fprs, config.unit_test_threshold),
            unit_tests,
        });
        timings
            .methods
            .insert(method.name().to_string(), t0.elapsed().as_secs_f64());
    }

    let diagnostics = match &config.diagnostics {
        Some(dc) => {
            let t0 = Instant::now();
            let d = run_diagnostics(bundle, &fits, dc, &config.scorer)?;
            timings.diagnostics = t0.elapsed().as_secs_f64();
            Some(d)
        }
        None => None,
    };
    timings.total = start.elapsed().as_secs_f64();

    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        toolkit_version: VERSION.to_string(),
        bundle: bundle_info(bundle, manifest),
        config: ConfigEcho {
            scorer: config.scorer.clone(),
            tpr_target: config.tpr_target,
            unit_test_threshold: config.unit_test_threshold,
            tie_rule: TIE_RULE.to_string(),
        },
        methods: results,
        diagnostics,
        timings: Some(timings),
    })
}

/// Computes the requested diagnostics. QQ and deviation run once per
/// available fit in `fits`; fits they need but that are missing are computed here.
pub fn run_diagnostics(
    bundle: &Bundle,
    fits: &Fits,
    config: &DiagnosticsConfig,
    scorer_config: &ScorerConfig,
) -> Result<DiagnosticsSummary> {
    let mut out = DiagnosticsSummary::default();
    if let Some(bins) = config.norm_stats {
        out.norm_stats = Some(norm_stats(&bundle.train, &bundle.train_labels, bins)?);
    }
    if config.needs_fits() {
        let fits = Fits {
            plain: fits.plain.clone(),
            normalized: fits.normalized.clone(),
        };
        let fits = if fits.plain.is_none() || fits.normalized.is_none() {
            let missing = fit_bundle(
                bundle,
                fits.plain.is_none(),
                fits.normalized.is_none(),
                scorer_config.shrinkage,
            )?;
            Fits {
                plain: fits.plain.or(missing.plain),
                normalized: fits.normalized.or(missing.normalized),
            }
        } else {
            fits
        };
        let normalized_train = l2_normalize(&bundle.train)?;
        for (normalized, fit) in [(false, &fits.plain), (true, &fits.normalized)] {
            let fit = fit.as_ref().expect("both fits present");
            let features: &FeatureMatrix = if normalized {
                &normalized_train
            } else {
                &bundle.train
            };
            if let Some(q) = config.qq {
                let dirs =
                    default_qq_directions(bundle.dim(), scorer_config.seed, Some(fit.shared_cov()));
                out.qq.push(QQEntry {
                    normalized,
                    pairs: qq_quantiles(features, &bundle.train_labels, &dirs, q)
                        .map_err(|e| e.context(format!("QQ on {} features", tag(normalized))))?,
                });
            }
            if config.deviation {
                let pcs =
                    estimate_per_class_covariances(features, &bundle.train_labels, fit.means())?;
                out.deviation.push(DeviationEntry {
                    normalized,
                    report: variance_deviation(fit, &pcs)?,
                });
            }
        }
    }
    if !config.correlation.is_empty() {
        let need = |n: bool| {
            config
                .correlation
                .iter()
                .any(|m| m.gaussian_fit() == Some(n))
        };
        let fits = Fits {
            plain: match &fits.plain {
                Some(f) => Some(f.clone()),
                None if need(false) => {
                    fit_bundle(bundle, true, false, scorer_config.shrinkage)?.plain
                }
                None => None,
            },
            normalized: match &fits.normalized {
                Some(f) => Some(f.clone()),
                None if need(true) => {
                    fit_bundle(bundle, false, true, scorer_config.shrinkage)?.normalized
                }
                None => None,
            },
        };
        let train = training_data(bundle);
        for &method in &config.correlation {
            let scorer = build_scorer(method, scorer_config, &train, &fits)?;
            let sets = std::iter::once(ID_TEST).chain(bundle.ood_sets.keys().map(String::as_str));
            for set in sets {
                let scores = score_set(scorer.as_ref(), bundle, set)?;
                let b = batch(bundle, set)?;
                out.correlations.push(CorrelationEntry {
                    method: method.name().to_string(),
                    set: set.to_string(),
                    correlation: norm_score_correlation(b.features, &scores.scores)
                        .map_err(|e| e.context(format!("correlation of {method} on {set}")))?,
                });
            }
        }
    }
    Ok(out)
}

fn tag(normalized: bool) -> &'static str {
    if normalized {
        "normalized"
    } else {
        "plain"
    }
}
