//! Dataset bundles: a JSON manifest naming the NPY files of one evaluation.
//!
//! Relative paths in a manifest are resolved against the manifest's own
//! directory. A minimal manifest:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "train_features": "train.npy",
//!   "train_labels": "train_labels.npy",
//!   "id_test_features": "id_test.npy",
//!   "ood_sets": { "textures": "ood_textures.npy" }
//! }
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, Labels, RowMatrix};
use crate::npy::{self, Dtype};
use crate::scorers::ModelHead;
use crate::synth::{SynthData, SynthSpec};

pub const FORMAT_VERSION: u32 = 1;

/// Precomputed logits, an alternative to `head_w`/`head_b`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitPaths {
    pub train: Option<PathBuf>,
    pub id_test: Option<PathBuf>,
    #[serde(default)]
    pub ood_sets: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub format_version: u32,
    pub train_features: PathBuf,
    pub train_labels: PathBuf,
    pub id_test_features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_test_labels: Option<PathBuf>,
    /// `C x d` classifier weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_w: Option<PathBuf>,
    /// Length-`C` bias; zeros when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_b: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<LogitPaths>,
    pub ood_sets: BTreeMap<String, PathBuf>,
    /// Names from `ood_sets` that are far-OOD noise sets.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unit_test_sets: Vec<String>,
    /// Declared descr (`<f4` or `<f8`) of every feature file, checked on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dtype: Option<String>,
    /// Class count when it exceeds the largest train label + 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    /// Free-form notes: model name, extraction settings.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl BundleManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: BundleManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Manifest(format!(
                "{}: format_version {} is not supported (expected {FORMAT_VERSION})",
                path.display(),
                m.format_version
            )));
        }
        for name in &m.unit_test_sets {
            if !m.ood_sets.contains_key(name) {
                return Err(Error::Manifest(format!(
                    "unit test set {name:?} is not listed in ood_sets"
                )));
            }
        }
        if let Some(d) = &m.feature_dtype {
            if !matches!(Dtype::from_descr(d), Some(Dtype::F32 | Dtype::F64)) {
                return Err(Error::Manifest(format!(
                    "feature_dtype must be \"<f4\" or \"<f8\", got {d:?}"
                )));
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Manifest(e.to_string()))?;
        text.push('\n');
        npy::atomic_write(path, text.as_bytes())
    }
}

#[derive(Debug, Clone, Default)]
pub struct BundleLogits {
    pub train: Option<RowMatrix>,
    pub id_test: Option<RowMatrix>,
    pub ood_sets: BTreeMap<String, RowMatrix>,
}

/// A loaded and cross-checked bundle.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub manifest: BundleManifest,
    pub root: PathBuf,
    pub train: FeatureMatrix,
    pub train_labels: Labels,
    pub id_test: FeatureMatrix,
    pub id_test_labels: Option<Labels>,
    pub head: Option<ModelHead>,
    pub logits: BundleLogits,
    pub ood_sets: BTreeMap<String, FeatureMatrix>,
}

impl Bundle {
    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    pub fn n_classes(&self) -> usize {
        self.train_labels.n_classes()
    }

    /// OOD set names that are not unit tests, in name order.
    pub fn regular_sets(&self) -> Vec<&str> {
        self.ood_sets
            .keys()
            .filter(|k| !self.manifest.unit_test_sets.contains(k))
            .map(String::as_str)
            .collect()
    }

    pub fn ood(&self, name: &str) -> Result<&FeatureMatrix> {
        self.ood_sets.get(name).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "no OOD set named {name:?}; available: {}",
                self.ood_sets.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn check_dtype(path: &Path, declared: Option<&str>) -> Result<()> {
    let Some(declared) = declared else {
        return Ok(());
    };
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let header = npy::read_header(&mut f, path)?;
    if header.dtype.descr() != declared {
        return Err(Error::Manifest(format!(
            "{} has dtype {} but the manifest declares {declared}",
            path.display(),
            header.dtype.descr()
        )));
    }
    Ok(())
}

fn require_dim(what: &'static str, m: &RowMatrix, d: usize) -> Result<()> {
    if m.dim() != d {
        return Err(Error::DimensionMismatch {
            what,
            expected: d,
            found: m.dim(),
        });
    }
    Ok(())
}

fn read_logits(path: &Path, rows: usize, classes: Option<usize>) -> Result<RowMatrix> {
    let m = npy::read_matrix(path)?;
    if m.n_rows() != rows {
        return Err(Error::DimensionMismatch {
            what: "logit rows vs feature rows",
            expected: rows,
            found: m.n_rows(),
        }
        .context(path.display().to_string()));
    }
    if let Some(c) = classes {
        require_dim("logit columns vs class count", &m, c)
            .map_err(|e| e.context(path.display().to_string()))?;
    }
    Ok(m)
}

/// Reads the manifest at `path` and every file it names.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<Bundle> {
    let path = path.as_ref();
    let manifest = BundleManifest::read(path)?;
    let root = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let file = |p: &Path| resolve(&root, p);
    let declared = manifest.feature_dtype.as_deref();

    let feature_file = |p: &Path| -> Result<FeatureMatrix> {
        let p = file(p);
        check_dtype(&p, declared)?;
        npy::read_matrix(&p)
    };
    let train = feature_file(&manifest.train_features)?;
    let d = train.dim();

    let head = match (&manifest.head_w, &manifest.head_b) {
        (Some(w), b) => {
            let w = npy::read_matrix(file(w))?;
            let b = match b {
                Some(b) => npy::read_vector(file(b))?,
                None => {
                    log::info!("manifest has head_w without head_b; using a zero bias");
                    vec![0.0; w.n_rows()]
                }
            };
            require_dim("head width vs feature width", &w, d)?;
            Some(ModelHead::new(w, b)?)
        }
        (None, Some(_)) => return Err(Error::Manifest("head_b given without head_w".into())),
        (None, None) => None,
    };

    let n_classes = manifest.n_classes.or(head.as_ref().map(|h| h.n_classes()));
    let train_labels = npy::read_labels(file(&manifest.train_labels), n_classes)?;
    train_labels
        .require_rows(train.n_rows())
        .map_err(|e| e.context("train labels"))?;
    let n_classes = train_labels.n_classes();
    if let Some(h) = &head {
        if h.n_classes() != n_classes {
            return Err(Error::DimensionMismatch {
                what: "head rows vs class count",
                expected: n_classes,
                found: h.n_classes(),
            });
        }
    }

    let id_test = feature_file(&manifest.id_test_features)?;
    require_dim("ID test width vs train width", &id_test, d)?;
    let id_test_labels = match &manifest.id_test_labels {
        Some(p) => {
            let l = npy::read_labels(file(p), Some(n_classes))?;
            l.require_rows(id_test.n_rows())
                .map_err(|e| e.context("ID test labels"))?;
            Some(l)
        }
        None => None,
    };

    let mut ood_sets = BTreeMap::new();
    for (name, p) in &manifest.ood_sets {
        let m = feature_file(p).map_err(|e| e.context(format!("OOD set {name}")))?;
        require_dim("OOD width vs train width", &m, d)
            .map_err(|e| e.context(format!("OOD set {name}")))?;
        ood_sets.insert(name.clone(), m);
    }

    let mut logits = BundleLogits::default();
    if let Some(lp) = &manifest.logits {
        let classes = Some(n_classes);
        if let Some(p) = &lp.train {
            logits.train = Some(read_logits(&file(p), train.n_rows(), classes)?);
        }
        if let Some(p) = &lp.id_test {
            logits.id_test = Some(read_logits(&file(p), id_test.n_rows(), classes)?);
        }
        for (name, p) in &lp.ood_sets {
            let rows = ood_sets
                .get(name)
                .ok_or_else(|| {
                    Error::Manifest(format!("logits given for unknown OOD set {name:?}"))
                })?
                .n_rows();
            logits
                .ood_sets
                .insert(name.clone(), read_logits(&file(p), rows, classes)?);
        }
    }

    Ok(Bundle {
        manifest,
        root,
        train,
        train_labels,
        id_test,
        id_test_labels,
        head,
        logits,
        ood_sets,
    })
}

/// Name of the single OOD set in a synthetic bundle.
pub const SYNTH_OOD_SET: &str = "held_out";

/// Writes a generated dataset as `f8` NPY files plus `manifest.json` into
/// `dir`, returning the manifest path.
pub fn write_synth_bundle(
    dir: impl AsRef<Path>,
    spec: &SynthSpec,
    data: &SynthData,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    npy::write_matrix(dir.join("train.npy"), &data.train, Dtype::F64)?;
    npy::write_labels(dir.join("train_labels.npy"), &data.train_labels)?;
    npy::write_matrix(dir.join("id_test.npy"), &data.id_test, Dtype::F64)?;
    npy::write_labels(dir.join("id_test_labels.npy"), &data.id_test_labels)?;
    npy::write_matrix(dir.join("head_w.npy"), data.head.weights(), Dtype::F64)?;
    npy::write_vector(dir.join("head_b.npy"), data.head.bias())?;
    npy::write_matrix(dir.join("ood_held_out.npy"), &data.ood, Dtype::F64)?;
    let ood_labels: Vec<i64> = data.ood_labels.iter().map(|&c| c as i64).collect();
    npy::write_array(
        dir.join("ood_held_out_classes.npy"),
        &npy::NpyArray::from_labels(&ood_labels),
    )?;

    let mut provenance = BTreeMap::new();
    provenance.insert("generator".to_string(), serde_json::json!("mahakit synth"));
    provenance.insert(
        "spec".to_string(),
        serde_json::to_value(spec).map_err(|e| Error::Manifest(e.to_string()))?,
    );
    provenance.insert(
        "radial_scales".to_string(),
        serde_json::json!(data.radial_scales),
    );
    let manifest = BundleManifest {
        format_version: FORMAT_VERSION,
        train_features: "train.npy".into(),
        train_labels: "train_labels.npy".into(),
        id_test_features: "id_test.npy".into(),
        id_test_labels: Some("id_test_labels.npy".into()),
        head_w: Some("head_w.npy".into()),
        head_b: Some("head_b.npy".into()),
        logits: None,
        ood_sets: BTreeMap::from([(SYNTH_OOD_SET.to_string(), "ood_held_out.npy".into())]),
        unit_test_sets: Vec::new(),
        feature_dtype: Some(Dtype::F64.descr().to_string()),
        n_classes: Some(spec.n_classes),
        provenance,
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_classes: 3,
            dim: 4,
            train_per_class: 10,
            id_test_per_class: 5,
            n_ood_classes: 2,
            ood_per_class: 6,
            seed: 9,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn synth_bundle_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let data = generate(&spec).unwrap();
        let path = write_synth_bundle(dir.path(), &spec, &data).unwrap();
        let b = load_bundle(&path).unwrap();
        assert_eq!(b.train, data.train);
        assert_eq!(b.train_labels, data.train_labels);
        assert_eq!(b.id_test, data.id_test);
        assert_eq!(b.ood_sets[SYNTH_OOD_SET], data.ood);
        assert_eq!(b.head.as_ref().unwrap(), &data.head);
        assert_eq!(b.regular_sets(), vec![SYNTH_OOD_SET]);
    }

    #[test]
    fn manifest_checks() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let data = generate(&spec).unwrap();
        let path = write_synth_bundle(dir.path(), &spec, &data).unwrap();
        let good = BundleManifest::read(&path).unwrap();

        let mut m = good.clone();
        m.feature_dtype = Some("<f4".into());
        m.write(&path).unwrap();
        assert!(matches!(
            load_bundle(&path).unwrap_err(),
            Error::Manifest(_)
        ));

        let mut m = good.clone();
        m.unit_test_sets = vec!["noise".into()];
        m.write(&path).unwrap();
        assert!(matches!(
            load_bundle(&path).unwrap_err(),
            Error::Manifest(_)
        ));

        let mut m = good.clone();
        m.train_labels = "id_test_labels.npy".into();
        m.write(&path).unwrap();
        assert_eq!(load_bundle(&path).unwrap_err().exit_code(), 2);

        let mut m = good;
        m.ood_sets.insert("missing".into(), "nope.npy".into());
        m.write(&path).unwrap();
        assert!(matches!(
            load_bundle(&path).unwrap_err().root(),
            Error::Io { .. }
        ));

        std::fs::write(&path, "{\"format_version\": 1, \"surprise\": 3}").unwrap();
        assert!(matches!(
            load_bundle(&path).unwrap_err(),
            Error::Manifest(_)
        ));
    }
}
