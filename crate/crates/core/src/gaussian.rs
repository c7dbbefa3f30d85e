//! Class-conditional Gaussian fits on feature matrices.
//!
//! Estimation is two-pass and accumulates in `f64`: pass one sums rows per
//! class, pass two sums centered outer products. Each pass splits its input
//! into fixed-size row blocks, reduces them in parallel and merges the partial
//! results in block order, so the result is bit-identical for any number of
//! worker threads. The same passes run over a [`ChunkSource`] so that fits can
//! stream features from disk.
//!
//! Covariances use the maximum-likelihood denominator (`N`, or `N_c` per
//! class). Before factorization the shared covariance is shrunk towards a
//! scaled identity, `Σ + ε·(tr Σ / d)·I`.

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{norm, FeatureMatrix, Labels, RowMatrix, BLOCK_ROWS};
use crate::rng::SeededRng;

/// Row norms below this are treated as zero by [`l2_normalize`].
pub const ZERO_NORM_TOL: f64 = 1e-30;

/// First shrinkage factor tried by [`Shrinkage::Auto`].
pub const AUTO_SHRINKAGE_START: f64 = 1e-10;
/// Largest shrinkage factor [`Shrinkage::Auto`] will try.
pub const AUTO_SHRINKAGE_CAP: f64 = 1e-2;

/// How much scaled identity to add before factorizing a covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shrinkage {
    /// Start at [`AUTO_SHRINKAGE_START`] and grow ×10 until Cholesky succeeds,
    /// giving up past [`AUTO_SHRINKAGE_CAP`].
    Auto,
    /// Exactly this factor (may be 0).
    Fixed(f64),
}

impl Default for Shrinkage {
    fn default() -> Self {
        Shrinkage::Auto
    }
}

impl std::str::FromStr for Shrinkage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Shrinkage::Auto);
        }
        let eps: f64 = s.parse().map_err(|_| {
            Error::InvalidConfig(format!("shrinkage must be 'auto' or a number, got {s:?}"))
        })?;
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "shrinkage must be >= 0, got {eps}"
            )));
        }
        Ok(Shrinkage::Fixed(eps))
    }
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(features: &FeatureMatrix) -> Result<FeatureMatrix> {
    if let Some(row) = features
        .par_rows()
        .position_first(|r| !(norm(r) >= ZERO_NORM_TOL))
    {
        return Err(Error::ZeroNormRow(row));
    }
    Ok(features.map_rows(features.dim(), |src, dst| {
        let n = norm(src);
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s / n;
        }
    }))
}

/// Streams labeled row chunks for the two estimation passes.
///
/// `for_each_chunk` is called once per pass and must yield the same rows in
/// the same order each time.
pub trait ChunkSource {
    fn dim(&self) -> usize;
    fn n_classes(&self) -> usize;
    fn for_each_chunk(&self, f: &mut dyn FnMut(&RowMatrix, &[usize]) -> Result<()>) -> Result<()>;
}

/// An in-memory matrix viewed as a single chunk.
pub struct InMemory<'a> {
    pub features: &'a FeatureMatrix,
    pub labels: &'a Labels,
}

impl ChunkSource for InMemory<'_> {
    fn dim(&self) -> usize {
        self.features.dim()
    }

    fn n_classes(&self) -> usize {
        self.labels.n_classes()
    }

    fn for_each_chunk(&self, f: &mut dyn FnMut(&RowMatrix, &[usize]) -> Result<()>) -> Result<()> {
        f(self.features, self.labels.values())
    }
}

trait Merge: Send {
    fn merge(&mut self, other: &Self);
}

#[derive(Debug, Clone)]
struct MeanAccumulator {
    dim: usize,
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl MeanAccumulator {
    fn new(dim: usize, n_classes: usize) -> Self {
        Self {
            dim,
            sums: vec![0.0; dim * n_classes],
            counts: vec![0; n_classes],
        }
    }

    fn add_rows(&mut self, rows: &[f64], labels: &[usize]) {
        for (row, &c) in rows.chunks_exact(self.dim).zip(labels) {
            self.counts[c] += 1;
            let acc = &mut self.sums[c * self.dim..(c + 1) * self.dim];
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
}

impl Merge for MeanAccumulator {
    fn merge(&mut self, other: &Self) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Upper-triangle scatter sums; mirrored into a full matrix at the end.
#[derive(Debug, Clone)]
struct ScatterAccumulator {
    dim: usize,
    within: Vec<f64>,
    global: Vec<f64>,
    per_class: Option<Vec<Vec<f64>>>,
}

impl ScatterAccumulator {
    fn new(dim: usize, n_classes: usize, per_class: bool) -> Self {
        Self {
            dim,
            within: vec![0.0; dim * dim],
            global: vec![0.0; dim * dim],
            per_class: per_class.then(|| vec![vec![0.0; dim * dim]; n_classes]),
        }
    }

    fn add_outer(acc: &mut [f64], v: &[f64]) {
        let d = v.len();
        for i in 0..d {
            let vi = v[i];
            let row = &mut acc[i * d + i..(i + 1) * d];
            for (a, vj) in row.iter_mut().zip(&v[i..]) {
                *a += vi * vj;
            }
        }
    }

    fn add_rows(&mut self, rows: &[f64], labels: &[usize], means: &[f64], global_mean: &[f64]) {
        let d = self.dim;
        let mut centered = vec![0.0; d];
        for (row, &c) in rows.chunks_exact(d).zip(labels) {
            let mu = &means[c * d..(c + 1) * d];
            for k in 0..d {
                centered[k] = row[k] - mu[k];
            }
            Self::add_outer(&mut self.within, &centered);
            if let Some(pc) = self.per_class.as_mut() {
                Self::add_outer(&mut pc[c], &centered);
            }
            for k in 0..d {
                centered[k] = row[k] - global_mean[k];
            }
            Self::add_outer(&mut self.global, &centered);
        }
    }
}

impl Merge for ScatterAccumulator {
    fn merge(&mut self, other: &Self) {
        for (a, b) in self.within.iter_mut().zip(&other.within) {
            *a += b;
        }
        for (a, b) in self.global.iter_mut().zip(&other.global) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (self.per_class.as_mut(), other.per_class.as_ref()) {
            for (ma, mb) in a.iter_mut().zip(b) {
                for (x, y) in ma.iter_mut().zip(mb) {
                    *x += y;
                }
            }
        }
    }
}

fn symmetric_from_upper(upper: &[f64], d: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        upper[a * d + b] * scale
    })
}

fn check_chunk(
    chunk: &RowMatrix,
    labels: &[usize],
    dim: usize,
    n_classes: usize,
    offset: usize,
) -> Result<()> {
    chunk.require_dim(dim, "feature width")?;
    if labels.len() != chunk.n_rows() {
        return Err(Error::DimensionMismatch {
            what: "label count vs feature rows",
            expected: chunk.n_rows(),
            found: labels.len(),
        });
    }
    if let Some(i) = labels.iter().position(|&c| c >= n_classes) {
        return Err(Error::LabelOutOfRange {
            row: offset + i,
            label: labels[i] as i64,
            n_classes,
        });
    }
    Ok(())
}

/// Block-parallel reduction over one chunk, merged in block order.
fn reduce_blocks<A, F>(
    chunk: &RowMatrix,
    labels: &[usize],
    init: impl Fn() -> A + Sync,
    add: F,
) -> A
where
    A: Merge,
    F: Fn(&mut A, &[f64], &[usize]) + Sync,
{
    let d = chunk.dim();
    let partials: Vec<A> = chunk
        .as_slice()
        .par_chunks(BLOCK_ROWS * d)
        .zip(labels.par_chunks(BLOCK_ROWS))
        .map(|(rows, labs)| {
            let mut acc = init();
            add(&mut acc, rows, labs);
            acc
        })
        .collect();
    let mut it = partials.into_iter();
    let first = it.next().unwrap_or_else(&init);
    it.fold(first, |mut acc, p| {
        acc.merge(&p);
        acc
    })
}

/// Applies optional normalization to a chunk before accumulation.
fn prepared<'a>(
    chunk: &'a RowMatrix,
    normalize: bool,
    offset: usize,
) -> Result<std::borrow::Cow<'a, RowMatrix>> {
    if normalize {
        l2_normalize(chunk)
            .map(std::borrow::Cow::Owned)
            .map_err(|e| match e {
                Error::ZeroNormRow(r) => Error::ZeroNormRow(offset + r),
                e => e,
            })
    } else {
        Ok(std::borrow::Cow::Borrowed(chunk))
    }
}

fn mean_pass(source: &dyn ChunkSource, normalize: bool) -> Result<MeanAccumulator> {
    let (d, c) = (source.dim(), source.n_classes());
    let mut total = MeanAccumulator::new(d, c);
    let mut offset = 0;
    source.for_each_chunk(&mut |chunk, labels| {
        check_chunk(chunk, labels, d, c, offset)?;
        let chunk = prepared(chunk, normalize, offset)?;
        let part = reduce_blocks(
            &chunk,
            labels,
            || MeanAccumulator::new(d, c),
            |a, r, l| a.add_rows(r, l),
        );
        total.merge(&part);
        offset += labels.len();
        Ok(())
    })?;
    Ok(total)
}

fn scatter_pass(
    source: &dyn ChunkSource,
    normalize: bool,
    means: &[f64],
    global_mean: &[f64],
    per_class: bool,
) -> Result<ScatterAccumulator> {
    let (d, c) = (source.dim(), source.n_classes());
    let mut total = ScatterAccumulator::new(d, c, per_class);
    let mut offset = 0;
    source.for_each_chunk(&mut |chunk, labels| {
        check_chunk(chunk, labels, d, c, offset)?;
        let chunk = prepared(chunk, normalize, offset)?;
        let part = reduce_blocks(
            &chunk,
            labels,
            || ScatterAccumulator::new(d, c, per_class),
            |a, r, l| a.add_rows(r, l, means, global_mean),
        );
        total.merge(&part);
        offset += labels.len();
        Ok(())
    })?;
    Ok(total)
}

fn means_from(acc: &MeanAccumulator) -> Result<(RowMatrix, Vec<f64>, usize)> {
    let d = acc.dim;
    if let Some(c) = acc.counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(c));
    }
    let n: usize = acc.counts.iter().sum();
    let mut means = acc.sums.clone();
    for (c, &nc) in acc.counts.iter().enumerate() {
        means[c * d..(c + 1) * d]
            .iter_mut()
            .for_each(|v| *v /= nc as f64);
    }
    let mut global = vec![0.0; d];
    for c in 0..acc.counts.len() {
        for k in 0..d {
            global[k] += acc.sums[c * d + k];
        }
    }
    global.iter_mut().for_each(|v| *v /= n as f64);
    Ok((
        RowMatrix::from_vec_unchecked(means, acc.counts.len(), d),
        global,
        n,
    ))
}

/// Per-class arithmetic means (`C x d`).
pub fn estimate_class_means(features: &FeatureMatrix, labels: &Labels) -> Result<RowMatrix> {
    labels.require_rows(features.n_rows())?;
    let acc = mean_pass(&InMemory { features, labels }, false)?;
    Ok(means_from(&acc)?.0)
}

fn check_means(means: &RowMatrix, features: &FeatureMatrix, labels: &Labels) -> Result<()> {
    labels.require_rows(features.n_rows())?;
    means.require_dim(features.dim(), "class-mean width")?;
    if means.n_rows() != labels.n_classes() {
        return Err(Error::DimensionMismatch {
            what: "class-mean count",
            expected: labels.n_classes(),
            found: means.n_rows(),
        });
    }
    Ok(())
}

/// Pooled within-class covariance with denominator `N`.
pub fn estimate_shared_covariance(
    features: &FeatureMatrix,
    labels: &Labels,
    means: &RowMatrix,
) -> Result<DMatrix<f64>> {
    check_means(means, features, labels)?;
    if features.is_empty() {
        return Err(Error::Empty("feature matrix"));
    }
    let zero = vec![0.0; features.dim()];
    let acc = scatter_pass(
        &InMemory { features, labels },
        false,
        means.as_slice(),
        &zero,
        false,
    )?;
    Ok(symmetric_from_upper(
        &acc.within,
        features.dim(),
        1.0 / features.n_rows() as f64,
    ))
}

/// Per-class maximum-likelihood covariances `Σ_c` and their sample counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PerClassCovariances {
    pub covs: Vec<DMatrix<f64>>,
    pub counts: Vec<usize>,
}

impl PerClassCovariances {
    /// `Σ_c (N_c/N) Σ_c`, which reproduces the shared covariance.
    pub fn weighted_average(&self) -> DMatrix<f64> {
        let d = self.covs.first().map(|m| m.nrows()).unwrap_or(0);
        let n: usize = self.counts.iter().sum();
        let mut out = DMatrix::zeros(d, d);
        for (cov, &nc) in self.covs.iter().zip(&self.counts) {
            out += cov * (nc as f64 / n as f64);
        }
        out
    }
}

fn per_class_from(acc: &ScatterAccumulator, counts: &[usize]) -> PerClassCovariances {
    let d = acc.dim;
    let covs = acc
        .per_class
        .as_ref()
        .expect("per-class scatter requested")
        .iter()
        .zip(counts)
        .map(|(s, &nc)| symmetric_from_upper(s, d, 1.0 / nc.max(1) as f64))
        .collect();
    PerClassCovariances {
        covs,
        counts: counts.to_vec(),
    }
}

/// Per-class covariances against precomputed class means.
pub fn estimate_per_class_covariances(
    features: &FeatureMatrix,
    labels: &Labels,
    means: &RowMatrix,
) -> Result<PerClassCovariances> {
    check_means(means, features, labels)?;
    let zero = vec![0.0; features.dim()];
    let acc = scatter_pass(
        &InMemory { features, labels },
        false,
        means.as_slice(),
        &zero,
        true,
    )?;
    Ok(per_class_from(&acc, &labels.counts()))
}

/// Lower Cholesky factor of `cov + eps·scale·I` and the `eps` that worked.
///
/// `scale` defaults to `tr(cov)/d`.
pub fn factorize(
    cov: &DMatrix<f64>,
    shrinkage: Shrinkage,
    scale: Option<f64>,
) -> Result<(DMatrix<f64>, f64)> {
    let d = cov.nrows();
    let scale = scale.unwrap_or_else(|| cov.trace() / d as f64);
    let attempt = |eps: f64| {
        let mut m = cov.clone();
        for i in 0..d {
            m[(i, i)] += eps * scale;
        }
        Cholesky::new(m).map(|c| c.l())
    };
    match shrinkage {
        Shrinkage::Fixed(eps) => attempt(eps)
            .map(|l| (l, eps))
            .ok_or(Error::SingularCovariance { eps }),
        Shrinkage::Auto => {
            let mut eps = AUTO_SHRINKAGE_START;
            loop {
                if let Some(l) = attempt(eps) {
                    return Ok((l, eps));
                }
                if eps >= AUTO_SHRINKAGE_CAP * (1.0 - 1e-9) {
                    return Err(Error::SingularCovariance { eps });
                }
                eps = (eps * 10.0).min(AUTO_SHRINKAGE_CAP);
            }
        }
    }
}

/// Solves `L y = b` for lower-triangular `L` stored row-major.
pub(crate) fn forward_substitute(l_rows: &[f64], b: &mut [f64]) {
    let d = b.len();
    for i in 0..d {
        let row = &l_rows[i * d..i * d + i];
        let s: f64 = row.iter().zip(&b[..i]).map(|(l, y)| l * y).sum();
        b[i] = (b[i] - s) / l_rows[i * d + i];
    }
}

/// Row-major copy of a `d x d` matrix.
pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        out.extend(m.row(i).iter());
    }
    out
}

/// Center selector for [`GaussianFit::whiten`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Center {
    Class(usize),
    Global,
}

/// Serializable content of a [`GaussianFit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParts {
    pub dim: usize,
    pub n_classes: usize,
    pub counts: Vec<usize>,
    pub normalized: bool,
    pub shrinkage_eps: f64,
    pub global_shrinkage_eps: f64,
    /// `C x d`, row-major.
    pub means: Vec<f64>,
    /// `d x d`, row-major.
    pub shared_cov: Vec<f64>,
    pub shared_factor: Vec<f64>,
    pub global_mean: Vec<f64>,
    pub global_cov: Vec<f64>,
    pub global_factor: Vec<f64>,
}

/// Fitted class means, shared covariance and class-agnostic global Gaussian.
///
/// Immutable once built; whitened means are cached so that a Mahalanobis
/// distance costs one triangular solve plus `C·d` work.
#[derive(Debug, Clone)]
pub struct GaussianFit {
    means: RowMatrix,
    counts: Vec<usize>,
    shared_cov: DMatrix<f64>,
    shared_factor: DMatrix<f64>,
    shrinkage_eps: f64,
    global_mean: Vec<f64>,
    global_cov: DMatrix<f64>,
    global_factor: DMatrix<f64>,
    global_shrinkage_eps: f64,
    normalized: bool,
    // caches
    shared_factor_rows: Vec<f64>,
    global_factor_rows: Vec<f64>,
    whitened_means: RowMatrix,
    whitened_global_mean: Vec<f64>,
}

/// Fits means, shared and global covariances in memory.
pub fn fit(
    features: &FeatureMatrix,
    labels: &Labels,
    normalize: bool,
    shrinkage: Shrinkage,
) -> Result<GaussianFit> {
    labels.require_rows(features.n_rows())?;
    fit_source(&InMemory { features, labels }, normalize, shrinkage)
}

/// Two-pass fit over a chunked source.
pub fn fit_source(
    source: &dyn ChunkSource,
    normalize: bool,
    shrinkage: Shrinkage,
) -> Result<GaussianFit> {
    let d = source.dim();
    let means_acc = mean_pass(source, normalize)?;
    let (means, global_mean, n) = means_from(&means_acc)?;
    if n == 0 {
        return Err(Error::Empty("feature matrix"));
    }
    let scatter = scatter_pass(source, normalize, means.as_slice(), &global_mean, false)?;
    let inv_n = 1.0 / n as f64;
    let shared_cov = symmetric_from_upper(&scatter.within, d, inv_n);
    let global_cov = symmetric_from_upper(&scatter.global, d, inv_n);
    let (shared_factor, shrinkage_eps) = factorize(&shared_cov, shrinkage, None)?;
    let (global_factor, global_shrinkage_eps) = factorize(&global_cov, shrinkage, None)?;
    Ok(GaussianFit::assemble(
        means,
        means_acc.counts,
        shared_cov,
        shared_factor,
        shrinkage_eps,
        global_mean,
        global_cov,
        global_factor,
        global_shrinkage_eps,
        normalize,
    ))
}

/// Per-class covariances for an existing fit, re-reading the source.
pub fn per_class_covariances_source(
    source: &dyn ChunkSource,
    fit: &GaussianFit,
) -> Result<PerClassCovariances> {
    let acc = scatter_pass(
        source,
        fit.normalized,
        fit.means.as_slice(),
        &fit.global_mean,
        true,
    )?;
    Ok(per_class_from(&acc, &fit.counts))
}

impl GaussianFit {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        means: RowMatrix,
        counts: Vec<usize>,
        shared_cov: DMatrix<f64>,
        shared_factor: DMatrix<f64>,
        shrinkage_eps: f64,
        global_mean: Vec<f64>,
        global_cov: DMatrix<f64>,
        global_factor: DMatrix<f64>,
        global_shrinkage_eps: f64,
        normalized: bool,
    ) -> Self {
        let d = means.dim();
        let shared_factor_rows = row_major(&shared_factor);
        let global_factor_rows = row_major(&global_factor);
        let whitened_means = means.map_rows(d, |src, dst| {
            dst.copy_from_slice(src);
            forward_substitute(&shared_factor_rows, dst);
        });
        let mut whitened_global_mean = global_mean.clone();
        forward_substitute(&global_factor_rows, &mut whitened_global_mean);
        Self {
            means,
            counts,
            shared_cov,
            shared_factor,
            shrinkage_eps,
            global_mean,
            global_cov,
            global_factor,
            global_shrinkage_eps,
            normalized,
            shared_factor_rows,
            global_factor_rows,
            whitened_means,
            whitened_global_mean,
        }
    }

    pub fn to_parts(&self) -> FitParts {
        FitParts {
            dim: self.dim(),
            n_classes: self.n_classes(),
            counts: self.counts.clone(),
            normalized: self.normalized,
            shrinkage_eps: self.shrinkage_eps,
            global_shrinkage_eps: self.global_shrinkage_eps,
            means: self.means.as_slice().to_vec(),
            shared_cov: row_major(&self.shared_cov),
            shared_factor: self.shared_factor_rows.clone(),
            global_mean: self.global_mean.clone(),
            global_cov: row_major(&self.global_cov),
            global_factor: self.global_factor_rows.clone(),
        }
    }

    pub fn from_parts(p: FitParts) -> Result<Self> {
        let d = p.dim;
        let square = |v: &[f64], what: &'static str| -> Result<DMatrix<f64>> {
            if v.len() != d * d {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: d * d,
                    found: v.len(),
                });
            }
            Ok(DMatrix::from_row_slice(d, d, v))
        };
        if p.counts.len() != p.n_classes || p.global_mean.len() != d {
            return Err(Error::FitFile(
                "inconsistent class count or mean width".into(),
            ));
        }
        let means = RowMatrix::new(p.means, p.n_classes, d)?;
        Ok(Self::assemble(
            means,
            p.counts,
            square(&p.shared_cov, "shared covariance")?,
            square(&p.shared_factor, "shared factor")?,
            p.shrinkage_eps,
            p.global_mean,
            square(&p.global_cov, "global covariance")?,
            square(&p.global_factor, "global factor")?,
            p.global_shrinkage_eps,
            p.normalized,
        ))
    }

    pub fn dim(&self) -> usize {
        self.means.dim()
    }

    pub fn n_classes(&self) -> usize {
        self.means.n_rows()
    }

    pub fn means(&self) -> &RowMatrix {
        &self.means
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn shared_cov(&self) -> &DMatrix<f64> {
        &self.shared_cov
    }

    /// Lower factor `L` with `L Lᵀ = Σ + ε·(tr Σ/d)·I`.
    pub fn shared_factor(&self) -> &DMatrix<f64> {
        &self.shared_factor
    }

    pub fn shrinkage_eps(&self) -> f64 {
        self.shrinkage_eps
    }

    /// The matrix actually factorized: `Σ + ε·(tr Σ/d)·I`.
    pub fn shrunk_shared_cov(&self) -> DMatrix<f64> {
        shrunk(&self.shared_cov, self.shrinkage_eps)
    }

    pub fn global_mean(&self) -> &[f64] {
        &self.global_mean
    }

    pub fn global_cov(&self) -> &DMatrix<f64> {
        &self.global_cov
    }

    pub fn global_factor(&self) -> &DMatrix<f64> {
        &self.global_factor
    }

    pub fn global_shrinkage_eps(&self) -> f64 {
        self.global_shrinkage_eps
    }

    pub fn shrunk_global_cov(&self) -> DMatrix<f64> {
        shrunk(&self.global_cov, self.global_shrinkage_eps)
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    /// `L⁻¹(x − μ)` for the selected center.
    pub fn whiten(&self, x: &[f64], center: Center) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "whiten input",
                expected: self.dim(),
                found: x.len(),
            });
        }
        let (mu, l) = match center {
            Center::Class(c) => {
                if c >= self.n_classes() {
                    return Err(Error::LabelOutOfRange {
                        row: 0,
                        label: c as i64,
                        n_classes: self.n_classes(),
                    });
                }
                (self.means.row(c), &self.shared_factor_rows)
            }
            Center::Global => (self.global_mean.as_slice(), &self.global_factor_rows),
        };
        let mut y: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
        forward_substitute(l, &mut y);
        Ok(y)
    }

    /// Squared Mahalanobis distance of `x` to every class mean under the
    /// shrunk shared covariance. `x` must have width `dim`.
    pub fn class_distances(&self, x: &[f64]) -> Vec<f64> {
        let mut wx = x.to_vec();
        forward_substitute(&self.shared_factor_rows, &mut wx);
        self.whitened_means
            .rows()
            .map(|m| wx.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect()
    }

    /// Squared Mahalanobis distance of `x` to the global Gaussian.
    pub fn global_distance(&self, x: &[f64]) -> f64 {
        let mut wx = x.to_vec();
        forward_substitute(&self.global_factor_rows, &mut wx);
        wx.iter()
            .zip(&self.whitened_global_mean)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

fn shrunk(cov: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let d = cov.nrows();
    let scale = cov.trace() / d as f64;
    let mut m = cov.clone();
    for i in 0..d {
        m[(i, i)] += eps * scale;
    }
    m
}

/// `n` draws of `μ_c + L z`, `z ~ N(0, I)`, from a seeded stream.
pub fn sample_from_fit(
    fit: &GaussianFit,
    class: usize,
    n: usize,
    seed: u64,
) -> Result<FeatureMatrix> {
    if class >= fit.n_classes() {
        return Err(Error::LabelOutOfRange {
            row: 0,
            label: class as i64,
            n_classes: fit.n_classes(),
        });
    }
    let d = fit.dim();
    let mu = fit.means.row(class);
    let l = &fit.shared_factor_rows;
    let mut rng = SeededRng::new(seed);
    let mut z = vec![0.0; d];
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        rng.fill_normal(&mut z);
        for i in 0..d {
            let lz: f64 = l[i * d..i * d + i + 1]
                .iter()
                .zip(&z)
                .map(|(a, b)| a * b)
                .sum();
            data.push(mu[i] + lz);
        }
    }
    Ok(RowMatrix::from_vec_unchecked(data, n, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_points() -> (FeatureMatrix, Labels) {
        (
            RowMatrix::from_rows(&[[1.0, 0.0], [3.0, 0.0], [0.0, 2.0], [0.0, 4.0]]).unwrap(),
            Labels::new(vec![0, 0, 1, 1], 2).unwrap(),
        )
    }

    fn max_abs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).abs().max()
    }

    #[test]
    fn normalize_three_four_five() {
        let m = RowMatrix::from_rows(&[[3.0, 4.0], [1.0, 0.0]]).unwrap();
        let n = l2_normalize(&m).unwrap();
        assert_eq!(n.row(0), &[0.6, 0.8]);
        assert_eq!(n.row(1), &[1.0, 0.0]);
        let unit = RowMatrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(l2_normalize(&unit).unwrap().row(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_zero_row_errors() {
        let m = RowMatrix::from_rows(&[[1.0, 1.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(l2_normalize(&m), Err(Error::ZeroNormRow(1))));
    }

    #[test]
    fn hand_means_and_covariances() {
        let (f, l) = four_points();
        let means = estimate_class_means(&f, &l).unwrap();
        assert_eq!(means.as_slice(), &[2.0, 0.0, 0.0, 3.0]);
        let shared = estimate_shared_covariance(&f, &l, &means).unwrap();
        assert!(
            max_abs(
                &shared,
                &DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5])
            ) < 1e-15
        );
        let pc = estimate_per_class_covariances(&f, &l, &means).unwrap();
        assert!(
            max_abs(
                &pc.covs[0],
                &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])
            ) < 1e-15
        );
        assert!(
            max_abs(
                &pc.covs[1],
                &DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0])
            ) < 1e-15
        );
        assert!(max_abs(&pc.weighted_average(), &shared) < 1e-15);
    }

    #[test]
    fn constant_data_mean_and_zero_scatter() {
        let v = [0.25, -1.5, 3.0];
        let f = RowMatrix::from_rows(&[v, v, v]).unwrap();
        let l = Labels::new(vec![0, 0, 0], 1).unwrap();
        let means = estimate_class_means(&f, &l).unwrap();
        assert_eq!(means.row(0), &v);
        let cov = estimate_shared_covariance(&f, &l, &means).unwrap();
        assert_eq!(cov.abs().max(), 0.0);
    }

    #[test]
    fn variance_uses_n_denominator() {
        let f = RowMatrix::from_rows(&[[-1.0], [1.0]]).unwrap();
        let l = Labels::new(vec![0, 0], 1).unwrap();
        let means = estimate_class_means(&f, &l).unwrap();
        let cov = estimate_shared_covariance(&f, &l, &means).unwrap();
        assert_eq!(cov[(0, 0)], 1.0);
    }

    #[test]
    fn empty_class_is_reported() {
        let f = RowMatrix::from_rows(&[[1.0], [2.0]]).unwrap();
        let l = Labels::new(vec![0, 2], 3).unwrap();
        assert!(matches!(
            estimate_class_means(&f, &l),
            Err(Error::EmptyClass(1))
        ));
    }

    #[test]
    fn singleton_class_has_zero_covariance() {
        let f = RowMatrix::from_rows(&[[1.0, 2.0], [0.0, 1.0], [2.0, 5.0]]).unwrap();
        let l = Labels::new(vec![0, 0, 1], 2).unwrap();
        let means = estimate_class_means(&f, &l).unwrap();
        let pc = estimate_per_class_covariances(&f, &l, &means).unwrap();
        assert_eq!(pc.covs[1].abs().max(), 0.0);
    }

    #[test]
    fn mismatched_means_rejected() {
        let (f, l) = four_points();
        let bad = RowMatrix::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            estimate_shared_covariance(&f, &l, &bad),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rank_deficient_input_gets_shrinkage() {
        // N < d with duplicated rows.
        let r = [1.0, 2.0, 3.0, 4.0, 5.0];
        let f = RowMatrix::from_rows(&[r, r, [0.0, 1.0, 0.0, 1.0, 0.0]]).unwrap();
        let l = Labels::new(vec![0, 0, 0], 1).unwrap();
        let fit = fit(&f, &l, false, Shrinkage::Auto).unwrap();
        assert!(fit.shrinkage_eps() > 0.0);
        let l = fit.shared_factor();
        let rel =
            (l * l.transpose() - fit.shrunk_shared_cov()).norm() / fit.shrunk_shared_cov().norm();
        assert!(rel < 1e-8);
    }

    #[test]
    fn fixed_zero_shrinkage_on_singular_fails() {
        let f = RowMatrix::from_rows(&[[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]).unwrap();
        let l = Labels::new(vec![0, 0, 0], 1).unwrap();
        // perfectly collinear data: exact zero eigenvalue
        let err = fit(&f, &l, false, Shrinkage::Fixed(0.0));
        if let Err(e) = err {
            assert!(matches!(e, Error::SingularCovariance { .. }));
        }
    }

    #[test]
    fn all_zero_covariance_fails_at_cap() {
        let f = RowMatrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let l = Labels::new(vec![0, 0], 1).unwrap();
        assert!(matches!(
            fit(&f, &l, false, Shrinkage::Auto),
            Err(Error::SingularCovariance { .. })
        ));
    }

    #[test]
    fn whiten_identity_and_centering() {
        let (f, l) = four_points();
        let g = fit(&f, &l, false, Shrinkage::Fixed(0.0)).unwrap();
        let w = g.whiten(&[2.0, 0.0], Center::Class(0)).unwrap();
        assert_eq!(w, vec![0.0, 0.0]);
        assert!(g.whiten(&[1.0], Center::Class(0)).is_err());
        assert!(g.whiten(&[1.0, 0.0], Center::Class(5)).is_err());
        // Σ = 0.5 I  ⇒  L = I/√2
        let w = g.whiten(&[3.0, 1.0], Center::Class(0)).unwrap();
        let expect = [1.0 / 0.5f64.sqrt(), 1.0 / 0.5f64.sqrt()];
        assert!((w[0] - expect[0]).abs() < 1e-12 && (w[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn shrinkage_parse() {
        assert_eq!("auto".parse::<Shrinkage>().unwrap(), Shrinkage::Auto);
        assert_eq!("1e-6".parse::<Shrinkage>().unwrap(), Shrinkage::Fixed(1e-6));
        assert!("-1".parse::<Shrinkage>().is_err());
        assert!("x".parse::<Shrinkage>().is_err());
    }

    #[test]
    fn sampling_empty_and_deterministic() {
        let (f, l) = four_points();
        let g = fit(&f, &l, false, Shrinkage::Auto).unwrap();
        assert!(sample_from_fit(&g, 0, 0, 1).unwrap().is_empty());
        let a = sample_from_fit(&g, 1, 50, 9).unwrap();
        let b = sample_from_fit(&g, 1, 50, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parts_roundtrip() {
        let f = RowMatrix::from_rows(&[[1.0, 0.2], [3.0, -0.1], [0.1, 2.0], [-0.2, 4.0]]).unwrap();
        let l = Labels::new(vec![0, 0, 1, 1], 2).unwrap();
        let g = fit(&f, &l, true, Shrinkage::Auto).unwrap();
        let back = GaussianFit::from_parts(g.to_parts()).unwrap();
        assert_eq!(back.to_parts(), g.to_parts());
        assert_eq!(
            back.class_distances(&[0.3, 0.9]),
            g.class_distances(&[0.3, 0.9])
        );
    }
}
