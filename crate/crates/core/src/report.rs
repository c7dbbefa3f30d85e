//! Serialized outputs: run reports, diagnostics, fit files and CSV tables.
//!
//! JSON floats are written with shortest round-trip formatting and parsed
//! back exactly, so every file here re-reads losslessly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{AlphaPoint, Correlation, DeviationReport, Histogram, NormStats, QQPair};
use crate::error::{Error, Result};
use crate::gaussian::{FitParts, GaussianFit, Shrinkage};
use crate::metrics::{percent, EvalResult};
use crate::npy::atomic_write;
use crate::scorers::{FitProvenance, ScorerConfig};
use crate::VERSION;

pub const SCHEMA_VERSION: u32 = 1;

/// How ties at the threshold are resolved, echoed into every report.
pub const TIE_RULE: &str = "scores >= threshold are accepted as ID, for ID and OOD samples alike";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleInfo {
    pub manifest: String,
    pub dim: usize,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_id_test: usize,
    /// Rows per OOD set.
    pub ood_sets: BTreeMap<String, usize>,
    pub unit_test_sets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetResult {
    pub set: String,
    pub result: EvalResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub fpr_at_tpr: f64,
    pub auroc: f64,
}

impl Average {
    /// Arithmetic mean over `results`; `None` when empty.
    pub fn of(results: &[SetResult]) -> Option<Self> {
        if results.is_empty() {
            return None;
        }
        let n = results.len() as f64;
        Some(Self {
            fpr_at_tpr: results.iter().map(|r| r.result.fpr_at_tpr).sum::<f64>() / n,
            auroc: results.iter().map(|r| r.result.auroc).sum::<f64>() / n,
        })
    }
}

/// One row of the result grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    /// Gaussian fit behind the scores, for Gaussian-based methods.
    pub fit: Option<FitProvenance>,
    /// Regular OOD sets in name order.
    pub sets: Vec<SetResult>,
    /// Mean over `sets`.
    pub average: Option<Average>,
    pub unit_tests: Vec<SetResult>,
    /// Unit-test sets with FPR at or above the failure threshold.
    pub unit_test_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub scorer: ScorerConfig,
    pub tpr_target: f64,
    pub unit_test_threshold: f64,
    pub tie_rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationEntry {
    pub normalized: bool,
    pub report: DeviationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QQEntry {
    pub normalized: bool,
    pub pairs: Vec<QQPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub method: String,
    /// `id_test` or an OOD set name.
    pub set: String,
    pub correlation: Correlation,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    /// Norms of the training features per class.
    pub norm_stats: Option<NormStats>,
    pub deviation: Vec<DeviationEntry>,
    pub qq: Vec<QQEntry>,
    pub correlations: Vec<CorrelationEntry>,
}

/// Wall-clock seconds; excluded from determinism comparisons.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub load: f64,
    pub fit: f64,
    pub methods: BTreeMap<String, f64>,
    pub diagnostics: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub toolkit_version: String,
    pub bundle: BundleInfo,
    pub config: ConfigEcho,
    pub methods: Vec<MethodResult>,
    pub diagnostics: Option<DiagnosticsSummary>,
    pub timings: Option<Timings>,
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Report(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn from_json<T: DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Report(format!("{what}: {e}")))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn check_schema(found: u32, what: &str) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(Error::Report(format!(
            "{what} schema version {found} is not supported (expected {SCHEMA_VERSION})"
        )));
    }
    Ok(())
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        to_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: RunReport = from_json(text, "run report")?;
        check_schema(r.schema_version, "run report")?;
        Ok(r)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        atomic_write(path, self.to_json()?.as_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&read_text(path.as_ref())?)
    }

    /// The report with timings removed, as compared for determinism.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: None,
            ..self.clone()
        }
    }

    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// Table with one row per method: FPR per regular set, the average,
    /// then AUROC likewise and unit-test failures. Values are percentages
    /// with one decimal.
    pub fn to_csv(&self) -> String {
        let sets: Vec<&str> = self
            .bundle
            .ood_sets
            .keys()
            .filter(|k| !self.bundle.unit_test_sets.contains(k))
            .map(String::as_str)
            .collect();
        let mut out = String::from("method");
        for prefix in ["fpr95", "auroc"] {
            for s in &sets {
                let _ = write!(out, ",{}", csv_field(&format!("{prefix}:{s}")));
            }
            let _ = write!(out, ",{prefix}:average");
        }
        if !self.bundle.unit_test_sets.is_empty() {
            out.push_str(",unit_test_failures");
        }
        out.push('\n');
        for m in &self.methods {
            out.push_str(&csv_field(&m.method));
            let pick = |f: fn(&EvalResult) -> f64, avg: Option<f64>, out: &mut String| {
                for s in &sets {
                    match m.sets.iter().find(|r| r.set == *s) {
                        Some(r) => {
                            let _ = write!(out, ",{}", percent(f(&r.result)));
                        }
                        None => out.push(','),
                    }
                }
                match avg {
                    Some(v) => {
                        let _ = write!(out, ",{}", percent(v));
                    }
                    None => out.push(','),
                }
            };
            pick(|r| r.fpr_at_tpr, m.average.map(|a| a.fpr_at_tpr), &mut out);
            pick(|r| r.auroc, m.average.map(|a| a.auroc), &mut out);
            if !self.bundle.unit_test_sets.is_empty() {
                let _ = write!(out, ",{}", m.unit_test_failures);
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Output of the `diagnose` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub schema_version: u32,
    pub toolkit_version: String,
    pub bundle: BundleInfo,
    pub shrinkage: Shrinkage,
    pub seed: u64,
    pub diagnostics: DiagnosticsSummary,
}

impl DiagnoseReport {
    pub fn to_json(&self) -> Result<String> {
        to_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: DiagnoseReport = from_json(text, "diagnostics report")?;
        check_schema(r.schema_version, "diagnostics report")?;
        Ok(r)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        atomic_write(path, self.to_json()?.as_bytes())
    }
}

pub const FIT_FILE_KIND: &str = "mahakit-fit";

/// Contents of a fit file: one or two Gaussian fits of the same bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub kind: String,
    pub schema_version: u32,
    pub toolkit_version: String,
    pub shrinkage: Shrinkage,
    pub fits: Vec<FitParts>,
}

impl FitFile {
    pub fn new(shrinkage: Shrinkage, fits: &[&GaussianFit]) -> Self {
        Self {
            kind: FIT_FILE_KIND.into(),
            schema_version: SCHEMA_VERSION,
            toolkit_version: VERSION.into(),
            shrinkage,
            fits: fits.iter().map(|f| f.to_parts()).collect(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        atomic_write(path, to_json(self)?.as_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f: FitFile = serde_json::from_str(&read_text(path)?)
            .map_err(|e| Error::FitFile(format!("{}: {e}", path.display())))?;
        if f.kind != FIT_FILE_KIND || f.schema_version != SCHEMA_VERSION {
            return Err(Error::FitFile(format!(
                "{}: not a version {SCHEMA_VERSION} fit file",
                path.display()
            )));
        }
        Ok(f)
    }

    /// Rebuilds the fits, returned as `(plain, normalized)`.
    pub fn into_fits(self) -> Result<(Option<GaussianFit>, Option<GaussianFit>)> {
        let (mut plain, mut normalized) = (None, None);
        for parts in self.fits {
            let fit = GaussianFit::from_parts(parts)?;
            let slot = if fit.normalized() {
                &mut normalized
            } else {
                &mut plain
            };
            if slot.replace(fit).is_some() {
                return Err(Error::FitFile(
                    "two fits with the same normalization".into(),
                ));
            }
        }
        Ok((plain, normalized))
    }
}

/// `alpha,fpr95,auroc` in percent with one decimal.
pub fn alpha_sweep_csv(points: &[AlphaPoint]) -> String {
    let mut out = String::from("alpha,fpr95,auroc\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.alpha, percent(p.fpr), percent(p.auroc));
    }
    out
}

/// `lower,upper,count` per bin.
pub fn histogram_csv(h: &Histogram) -> String {
    let mut out = String::from("lower,upper,count\n");
    for (i, c) in h.counts.iter().enumerate() {
        let _ = writeln!(out, "{},{},{}", h.edges[i], h.edges[i + 1], c);
    }
    out
}

/// Long format: `normalized,direction,probability,sample,theoretical`.
pub fn qq_csv(entries: &[QQEntry]) -> String {
    let mut out = String::from("normalized,direction,probability,sample,theoretical\n");
    for e in entries {
        for p in &e.pairs {
            for k in 0..p.probabilities.len() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    e.normalized,
                    p.direction,
                    p.probabilities[k],
                    p.sample_quantiles[k],
                    p.theoretical_quantiles[k]
                );
            }
        }
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}
