#![allow(dead_code)]

pub mod checks;

use mahakit::rng::SeededRng;
use mahakit::synth::oracle::Mat;
use mahakit::{FeatureMatrix, Labels, ModelHead, RowMatrix};

/// A random labeled training set, a test set and a linear head.
pub struct Instance {
    pub train: FeatureMatrix,
    pub labels: Labels,
    pub test: FeatureMatrix,
    pub head: ModelHead,
}

impl Instance {
    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.n_classes()
    }
}

/// Class-structured Gaussian data with per-class radial scales.
///
/// Every class gets at least `d + 2` rows so per-class covariances are full
/// rank; `n_max` caps the total.
pub fn instance(seed: u64, n_max: usize, d_max: usize, c_max: usize) -> Instance {
    let mut rng = SeededRng::new(seed);
    let d = 2 + rng.below((d_max - 1) as u64) as usize;
    let c_cap = (n_max / (d + 2)).clamp(2, c_max);
    let c = 2 + rng.below((c_cap - 1) as u64) as usize;
    let per_class_max = n_max / c;
    let counts: Vec<usize> = (0..c)
        .map(|_| d + 2 + rng.below((per_class_max - d - 1) as u64) as usize)
        .collect();
    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..d).map(|_| 3.0 * rng.normal()).collect())
        .collect();
    let scales: Vec<f64> = (0..c).map(|_| rng.log_uniform(0.5, 2.0)).collect();
    let mix: Vec<f64> = (0..d * d)
        .map(|i| {
            if i % (d + 1) == 0 {
                1.0
            } else {
                0.3 * rng.normal()
            }
        })
        .collect();
    let draw = |rng: &mut SeededRng, class: usize, shift: f64| -> Vec<f64> {
        let z: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        (0..d)
            .map(|i| {
                let lz: f64 = (0..d).map(|k| mix[i * d + k] * z[k]).sum();
                scales[class] * (means[class][i] + shift + lz)
            })
            .collect()
    };
    let mut train = Vec::new();
    let mut labels = Vec::new();
    for (class, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            train.extend(draw(&mut rng, class, 0.0));
            labels.push(class);
        }
    }
    let n_test = 30;
    let mut test = Vec::new();
    for i in 0..n_test {
        let class = rng.below(c as u64) as usize;
        let shift = if i % 2 == 0 { 0.0 } else { 2.0 * rng.normal() };
        test.extend(draw(&mut rng, class, shift));
    }
    let w: Vec<f64> = (0..c * d).map(|_| rng.normal()).collect();
    let b: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
    Instance {
        train: RowMatrix::new(train, labels.len(), d).unwrap(),
        labels: Labels::new(labels, c).unwrap(),
        test: RowMatrix::new(test, n_test, d).unwrap(),
        head: ModelHead::new(RowMatrix::new(w, c, d).unwrap(), b).unwrap(),
    }
}

/// Element-wise absolute values, for scorers that expect post-ReLU features.
pub fn abs(m: &FeatureMatrix) -> FeatureMatrix {
    RowMatrix::new(
        m.as_slice().iter().map(|v| v.abs()).collect(),
        m.n_rows(),
        m.dim(),
    )
    .unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Largest `|a − b| / max(|b|, 1)`.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn dflat(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
        .collect()
}

/// A random orthogonal matrix from Gram–Schmidt on Gaussian columns.
pub fn random_rotation(d: usize, seed: u64) -> Mat {
    let mut rng = SeededRng::new(seed);
    let mut q: Mat = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    q
}

/// Rows of `m` multiplied by `rᵀ`, i.e. `x ↦ R x`.
pub fn rotate(m: &FeatureMatrix, r: &Mat) -> FeatureMatrix {
    let data = m
        .rows()
        .flat_map(|x| {
            r.iter()
                .map(move |ri| ri.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect();
    RowMatrix::new(data, m.n_rows(), m.dim()).unwrap()
}

/// Scorer settings that fit a few hundred training rows.
pub fn small_config() -> mahakit::ScorerConfig {
    mahakit::ScorerConfig {
        knn_k: 10,
        nnguide_subset_fraction: 0.5,
        nnguide_k: 5,
        ..Default::default()
    }
}

/// A small synthetic bundle in `dir` with two unit-test sets: `id_copy`
/// (the ID test split again) and `far` (the OOD rows scaled by 20).
pub fn small_bundle(dir: &std::path::Path, seed: u64) -> std::path::PathBuf {
    use mahakit::bundle::{write_synth_bundle, BundleManifest};
    use mahakit::npy::{write_matrix, Dtype};
    use mahakit::synth::{generate, RadialLaw, SynthSpec};

    let spec = SynthSpec {
        n_classes: 5,
        dim: 8,
        train_per_class: 60,
        id_test_per_class: 20,
        n_ood_classes: 3,
        ood_per_class: 20,
        radial: RadialLaw::LogUniform { lo: 0.5, hi: 2.0 },
        seed,
        ..SynthSpec::default()
    };
    let data = generate(&spec).unwrap();
    let path = write_synth_bundle(dir, &spec, &data).unwrap();
    write_matrix(dir.join("id_copy.npy"), &data.id_test, Dtype::F64).unwrap();
    let far = RowMatrix::new(
        data.ood.as_slice().iter().map(|v| 20.0 * v).collect(),
        data.ood.n_rows(),
        data.ood.dim(),
    )
    .unwrap();
    write_matrix(dir.join("far.npy"), &far, Dtype::F64).unwrap();
    let mut m = BundleManifest::read(&path).unwrap();
    m.ood_sets.insert("id_copy".into(), "id_copy.npy".into());
    m.ood_sets.insert("far".into(), "far.npy".into());
    m.unit_test_sets = vec!["far".into(), "id_copy".into()];
    m.write(&path).unwrap();
    path
}

/// Well-conditioned random covariance with a random overall scale.
pub fn random_psd(d: usize, rng: &mut SeededRng) -> nalgebra::DMatrix<f64> {
    let a = nalgebra::DMatrix::from_fn(d, d, |_, _| rng.normal());
    let mut s = &a * a.transpose() / d as f64;
    for i in 0..d {
        s[(i, i)] += 0.05;
    }
    s * rng.log_uniform(0.2, 5.0)
}

pub fn to_mat(m: &nalgebra::DMatrix<f64>) -> Mat {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
