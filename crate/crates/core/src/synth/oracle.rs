//! Textbook reference implementations for testing.
//!
//! Everything here is deliberately naive: nested loops over `Vec<Vec<f64>>`,
//! Gauss–Jordan inverses, cyclic Jacobi eigendecompositions and full sorts.
//! Nothing calls into the estimation or scoring code; only the public data
//! types are shared. Intended for small inputs (`d ≤ 32`, a few hundred rows).

use crate::matrix::{FeatureMatrix, Labels, RowMatrix};
use crate::rng::SeededRng;
use crate::scorers::ModelHead;

pub type Mat = Vec<Vec<f64>>;

pub fn to_rows(m: &RowMatrix) -> Mat {
    m.rows().map(|r| r.to_vec()).collect()
}

pub fn identity(d: usize) -> Mat {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    let (r, c) = (a.len(), a.first().map_or(0, |x| x.len()));
    (0..c).map(|j| (0..r).map(|i| a[i][j]).collect()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, |x| x.len()));
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn matvec(a: &Mat, x: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum())
        .collect()
}

fn trace(a: &Mat) -> f64 {
    (0..a.len()).map(|i| a[i][i]).sum()
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Inverse by Gauss–Jordan elimination with partial pivoting; `None` when a
/// pivot vanishes.
pub fn gauss_jordan_inverse(a: &Mat) -> Option<Mat> {
    let n = a.len();
    let mut aug: Mat = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))?;
        if aug[pivot][col].abs() < 1e-300 {
            return None;
        }
        aug.swap(col, pivot);
        let p = aug[col][col];
        for v in aug[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = aug[r][col];
                if f != 0.0 {
                    for j in 0..2 * n {
                        aug[r][j] -= f * aug[col][j];
                    }
                }
            }
        }
    }
    Some(aug.into_iter().map(|r| r[n..].to_vec()).collect())
}

/// `ln |det A|` by Gaussian elimination with partial pivoting.
pub fn log_abs_det(a: &Mat) -> f64 {
    let n = a.len();
    let mut m = a.clone();
    let mut acc = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        acc += p.abs().ln();
        for r in col + 1..n {
            let f = m[r][col] / p;
            for j in col..n {
                m[r][j] -= f * m[col][j];
            }
        }
    }
    acc
}

/// Lower Cholesky factor, or `None` if a pivot is not positive.
pub fn cholesky(a: &Mat) -> Option<Mat> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns eigenvalues
/// in descending order and the matching eigenvectors as columns.
pub fn jacobi_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.len();
    let mut m = a.clone();
    let mut v = identity(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| m[i][i] * m[i][i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[y][y].total_cmp(&m[x][x]));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = (0..n)
        .map(|r| order.iter().map(|&i| v[r][i]).collect())
        .collect();
    (values, vectors)
}

/// `A^{-1/2}` of a symmetric positive-definite matrix via Jacobi.
pub fn inverse_sqrt(a: &Mat) -> Mat {
    let n = a.len();
    let (vals, vecs) = jacobi_eigen(a);
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            out[i][j] = (0..n)
                .map(|k| vecs[i][k] * vecs[j][k] / vals[k].sqrt())
                .sum();
        }
    }
    out
}

pub fn class_means(features: &FeatureMatrix, labels: &Labels) -> Mat {
    let d = features.dim();
    let mut sums = vec![vec![0.0; d]; labels.n_classes()];
    let mut counts = vec![0usize; labels.n_classes()];
    for i in 0..features.n_rows() {
        let c = labels.values()[i];
        counts[c] += 1;
        for k in 0..d {
            sums[c][k] += features.get(i, k);
        }
    }
    for (s, n) in sums.iter_mut().zip(&counts) {
        for v in s.iter_mut() {
            *v /= *n as f64;
        }
    }
    sums
}

fn scatter<'a>(rows: impl Iterator<Item = (&'a [f64], &'a [f64])>, d: usize) -> Mat {
    let mut s = vec![vec![0.0; d]; d];
    for (x, mu) in rows {
        for a in 0..d {
            for b in 0..d {
                s[a][b] += (x[a] - mu[a]) * (x[b] - mu[b]);
            }
        }
    }
    s
}

fn scaled(mut m: Mat, f: f64) -> Mat {
    m.iter_mut().flatten().for_each(|v| *v *= f);
    m
}

/// Pooled within-class covariance, denominator `N`.
pub fn shared_covariance(features: &FeatureMatrix, labels: &Labels) -> Mat {
    let means = class_means(features, labels);
    let rows =
        (0..features.n_rows()).map(|i| (features.row(i), means[labels.values()[i]].as_slice()));
    scaled(
        scatter(rows, features.dim()),
        1.0 / features.n_rows() as f64,
    )
}

/// Per-class covariances, denominator `N_c`.
pub fn per_class_covariances(features: &FeatureMatrix, labels: &Labels) -> Vec<Mat> {
    let means = class_means(features, labels);
    (0..labels.n_classes())
        .map(|c| {
            let idx: Vec<usize> = (0..features.n_rows())
                .filter(|&i| labels.values()[i] == c)
                .collect();
            let rows = idx.iter().map(|&i| (features.row(i), means[c].as_slice()));
            scaled(scatter(rows, features.dim()), 1.0 / idx.len() as f64)
        })
        .collect()
}

pub fn global_mean_cov(features: &FeatureMatrix) -> (Vec<f64>, Mat) {
    let d = features.dim();
    let n = features.n_rows() as f64;
    let mut mu = vec![0.0; d];
    for x in features.rows() {
        for k in 0..d {
            mu[k] += x[k] / n;
        }
    }
    let cov = scaled(
        scatter(features.rows().map(|x| (x, mu.as_slice())), d),
        1.0 / n,
    );
    (mu, cov)
}

/// `Σ + eps·(tr Σ/d)·I`. With `eps = None` the smallest of `1e-10, 1e-9, …,
/// 1e-2` for which a Cholesky factor exists is used.
pub fn shrink(cov: &Mat, eps: Option<f64>) -> (Mat, f64) {
    let d = cov.len();
    let s = trace(cov) / d as f64;
    let with = |e: f64| {
        let mut m = cov.clone();
        for i in 0..d {
            m[i][i] += e * s;
        }
        m
    };
    match eps {
        Some(e) => (with(e), e),
        None => {
            let mut e = 1e-10;
            while cholesky(&with(e)).is_none() && e < 1e-2 {
                e *= 10.0;
            }
            (with(e), e)
        }
    }
}

fn quad_form(inv: &Mat, x: &[f64], mu: &[f64]) -> f64 {
    let d = x.len();
    let mut s = 0.0;
    for a in 0..d {
        for b in 0..d {
            s += (x[a] - mu[a]) * inv[a][b] * (x[b] - mu[b]);
        }
    }
    s
}

pub fn normalize_rows(m: &FeatureMatrix) -> FeatureMatrix {
    let rows: Mat = m
        .rows()
        .map(|r| {
            let n = sq_norm(r).sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    RowMatrix::new(rows.concat(), m.n_rows(), m.dim()).unwrap()
}

/// Squared Mahalanobis distances of every test row to every class mean.
pub fn mahalanobis_distances(
    train: &FeatureMatrix,
    labels: &Labels,
    test: &FeatureMatrix,
    eps: Option<f64>,
) -> Mat {
    let means = class_means(train, labels);
    let (cov, _) = shrink(&shared_covariance(train, labels), eps);
    let inv = gauss_jordan_inverse(&cov).expect("invertible covariance");
    test.rows()
        .map(|x| means.iter().map(|mu| quad_form(&inv, x, mu)).collect())
        .collect()
}

fn neg_min(v: &[f64]) -> f64 {
    -v.iter().copied().fold(f64::INFINITY, f64::min)
}

/// `−min_c` squared Mahalanobis distance with an explicit inverse.
pub fn naive_mahalanobis(
    train: &FeatureMatrix,
    labels: &Labels,
    test: &FeatureMatrix,
    eps: Option<f64>,
) -> Vec<f64> {
    mahalanobis_distances(train, labels, test, eps)
        .iter()
        .map(|d| neg_min(d))
        .collect()
}

/// The same after l2-normalizing train and test rows.
pub fn naive_mahalanobis_pp(
    train: &FeatureMatrix,
    labels: &Labels,
    test: &FeatureMatrix,
    eps: Option<f64>,
) -> Vec<f64> {
    naive_mahalanobis(&normalize_rows(train), labels, &normalize_rows(test), eps)
}

/// `−min_c [d_c − d_global]`.
pub fn naive_rel_mahalanobis(
    train: &FeatureMatrix,
    labels: &Labels,
    test: &FeatureMatrix,
    eps: Option<f64>,
    global_eps: Option<f64>,
) -> Vec<f64> {
    let dists = mahalanobis_distances(train, labels, test, eps);
    let (mu, cov) = global_mean_cov(train);
    let (cov, _) = shrink(&cov, global_eps);
    let inv = gauss_jordan_inverse(&cov).expect("invertible covariance");
    test.rows()
        .zip(&dists)
        .map(|(x, d)| {
            let g = quad_form(&inv, x, &mu);
            neg_min(&d.iter().map(|v| v - g).collect::<Vec<_>>())
        })
        .collect()
}

pub fn logits(head: &ModelHead, features: &FeatureMatrix) -> Mat {
    features
        .rows()
        .map(|x| {
            (0..head.n_classes())
                .map(|c| {
                    head.bias()[c]
                        + (0..head.dim())
                            .map(|k| head.weights().get(c, k) * x[k])
                            .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// Softmax by direct exponentiation (no shift); for moderate logits only.
pub fn softmax(o: &[f64]) -> Vec<f64> {
    let z: f64 = o.iter().map(|v| v.exp()).sum();
    o.iter().map(|v| v.exp() / z).collect()
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn naive_msp(head: &ModelHead, test: &FeatureMatrix) -> Vec<f64> {
    logits(head, test)
        .iter()
        .map(|o| max(&softmax(o)))
        .collect()
}

pub fn naive_maxlogit(head: &ModelHead, test: &FeatureMatrix) -> Vec<f64> {
    logits(head, test).iter().map(|o| max(o)).collect()
}

fn energy(o: &[f64]) -> f64 {
    o.iter().map(|v| v.exp()).sum::<f64>().ln()
}

pub fn naive_energy(head: &ModelHead, test: &FeatureMatrix) -> Vec<f64> {
    logits(head, test).iter().map(|o| energy(o)).collect()
}

/// Linear-interpolation quantile at `q·(n−1)` after a full sort.
pub fn sorted_quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = q * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn naive_react(
    head: &ModelHead,
    train: &FeatureMatrix,
    test: &FeatureMatrix,
    q: f64,
) -> Vec<f64> {
    let r = sorted_quantile(train.as_slice(), q);
    let clipped: Vec<f64> = test
        .as_slice()
        .iter()
        .map(|v| if *v > r { r } else { *v })
        .collect();
    let clipped = RowMatrix::new(clipped, test.n_rows(), test.dim()).unwrap();
    naive_energy(head, &clipped)
}

pub fn naive_klm(
    head: &ModelHead,
    train: &FeatureMatrix,
    labels: &Labels,
    test: &FeatureMatrix,
) -> Vec<f64> {
    let c = head.n_classes();
    let mut templates = vec![vec![0.0; c]; labels.n_classes()];
    let mut counts = vec![0.0; labels.n_classes()];
    for (o, &y) in logits(head, train).iter().zip(labels.values()) {
        for (t, p) in templates[y].iter_mut().zip(softmax(o)) {
            *t += p;
        }
        counts[y] += 1.0;
    }
    for (t, n) in templates.iter_mut().zip(&counts) {
        t.iter_mut().for_each(|v| *v /= n);
    }
    logits(head, test)
        .iter()
        .map(|o| {
            let p = softmax(o);
            let kls: Vec<f64> = templates
                .iter()
                .map(|d| {
                    let mut kl = 0.0;
                    for k in 0..c {
                        if p[k] > 0.0 {
                            kl += p[k] * (p[k].max(1e-12) / d[k].max(1e-12)).ln();
                        }
                    }
                    kl
                })
                .collect();
            neg_min(&kls)
        })
        .collect()
}

/// Distance to the `k`-th nearest normalized train row, by full sort.
pub fn naive_knn(train: &FeatureMatrix, test: &FeatureMatrix, k: usize) -> Vec<f64> {
    let bank = to_rows(&normalize_rows(train));
    to_rows(&normalize_rows(test))
        .iter()
        .map(|q| {
            let mut d: Vec<f64> = bank
                .iter()
                .map(|r| {
                    r.iter()
                        .zip(q)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            d.sort_by(f64::total_cmp);
            -d[k - 1]
        })
        .collect()
}

/// Energy times cosine similarity to the `k`-th most similar row of the
/// given train subset.
pub fn naive_nnguide(
    head: &ModelHead,
    train: &FeatureMatrix,
    subset: &[usize],
    test: &FeatureMatrix,
    k: usize,
) -> Vec<f64> {
    let bank: Mat = subset
        .iter()
        .map(|&i| {
            let r = train.row(i);
            let n = sq_norm(r).sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let e = naive_energy(head, test);
    test.rows()
        .zip(e)
        .map(|(x, en)| {
            let n = sq_norm(x).sqrt();
            let mut sims: Vec<f64> = bank
                .iter()
                .map(|r| r.iter().zip(x).map(|(a, b)| a * b / n).sum())
                .collect();
            sims.sort_by(|a, b| b.total_cmp(a));
            en * sims[k - 1]
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (sq_norm(a).sqrt(), sq_norm(b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

pub fn naive_cosine(train: &FeatureMatrix, labels: &Labels, test: &FeatureMatrix) -> Vec<f64> {
    let means = class_means(train, labels);
    test.rows()
        .map(|x| max(&means.iter().map(|m| cosine(m, x)).collect::<Vec<_>>()))
        .collect()
}

pub fn naive_ssc(head: &ModelHead, test: &FeatureMatrix, t: f64) -> Vec<f64> {
    let w = to_rows(head.weights());
    test.rows()
        .map(|x| {
            max(&softmax(
                &w.iter().map(|wc| t * cosine(wc, x)).collect::<Vec<_>>(),
            ))
        })
        .collect()
}

/// Ash-s with the top-`(n − round(n·p/100))` keep rule; fully pruned rows get
/// the bias energy.
pub fn naive_ash_s(head: &ModelHead, test: &FeatureMatrix, percentile: f64) -> Vec<f64> {
    let n = test.dim();
    let pruned_count = ((n as f64 * percentile / 100.0).round() as usize).min(n);
    let keep = n - pruned_count;
    let shaped: Vec<Option<Vec<f64>>> = test
        .rows()
        .map(|x| {
            // selection by repeated argmax, lowest index first among equals
            let mut taken = vec![false; n];
            for _ in 0..keep {
                let mut best: Option<usize> = None;
                for i in 0..n {
                    if !taken[i] && best.is_none_or(|b| x[i] > x[b]) {
                        best = Some(i);
                    }
                }
                taken[best.unwrap()] = true;
            }
            let s1: f64 = x.iter().sum();
            let s2: f64 = (0..n).filter(|&i| taken[i]).map(|i| x[i]).sum();
            if keep == 0 || s2 == 0.0 {
                return None;
            }
            let f = (s1 / s2).exp();
            Some(
                (0..n)
                    .map(|i| if taken[i] { x[i] * f } else { 0.0 })
                    .collect(),
            )
        })
        .collect();
    shaped
        .iter()
        .map(|s| match s {
            Some(v) => energy(&logits(head, &RowMatrix::new(v.clone(), 1, n).unwrap())[0]),
            None => energy(head.bias()),
        })
        .collect()
}

/// Moore–Penrose pseudo-inverse of a full-rank matrix via normal equations.
pub fn pinv_full_rank(a: &Mat) -> Mat {
    let at = transpose(a);
    if a.len() <= at.len() {
        // full row rank: Aᵀ(AAᵀ)⁻¹
        matmul(
            &at,
            &gauss_jordan_inverse(&matmul(a, &at)).expect("full row rank"),
        )
    } else {
        matmul(
            &gauss_jordan_inverse(&matmul(&at, a)).expect("full column rank"),
            &at,
        )
    }
}

/// ViM with principal dimension `dim`, for heads of full rank.
pub fn naive_vim(
    head: &ModelHead,
    train: &FeatureMatrix,
    test: &FeatureMatrix,
    dim: usize,
) -> Vec<f64> {
    let d = head.dim();
    let pinv = pinv_full_rank(&to_rows(head.weights()));
    let u: Vec<f64> = matvec(&pinv, head.bias()).iter().map(|v| -v).collect();
    let centered = |m: &FeatureMatrix| -> Mat {
        m.rows()
            .map(|x| x.iter().zip(&u).map(|(a, b)| a - b).collect())
            .collect()
    };
    let h = centered(train);
    let gram = matmul(&transpose(&h), &h);
    let (_, vecs) = jacobi_eigen(&gram);
    let residual = |x: &[f64]| -> f64 {
        let mut r = x.to_vec();
        for j in 0..dim {
            let c: f64 = (0..d).map(|i| vecs[i][j] * x[i]).sum();
            for i in 0..d {
                r[i] -= c * vecs[i][j];
            }
        }
        sq_norm(&r).sqrt()
    };
    let res_sum: f64 = h.iter().map(|x| residual(x)).sum();
    let logit_sum: f64 = logits(head, train).iter().map(|o| max(o)).sum();
    let alpha = logit_sum / res_sum;
    centered(test)
        .iter()
        .zip(logits(head, test))
        .map(|(x, o)| {
            let v = alpha * residual(x);
            -v.exp() / (o.iter().map(|t| t.exp()).sum::<f64>() + v.exp())
        })
        .collect()
}

pub fn naive_neco(
    head: &ModelHead,
    train: &FeatureMatrix,
    test: &FeatureMatrix,
    explained: f64,
) -> Vec<f64> {
    let d = train.dim();
    let n = train.n_rows() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|k| train.rows().map(|x| x[k]).sum::<f64>() / n)
        .collect();
    let std: Vec<f64> = (0..d)
        .map(|k| (train.rows().map(|x| (x[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    let z = |x: &[f64]| -> Vec<f64> { (0..d).map(|k| (x[k] - mean[k]) / std[k]).collect() };
    let zs: Mat = train.rows().map(z).collect();
    let cov = scaled(matmul(&transpose(&zs), &zs), 1.0 / n);
    let (vals, vecs) = jacobi_eigen(&cov);
    let total: f64 = vals.iter().sum();
    let mut keep = d;
    let mut acc = 0.0;
    for (i, v) in vals.iter().enumerate() {
        acc += v;
        if acc >= explained * total * (1.0 - 1e-12) {
            keep = i + 1;
            break;
        }
    }
    test.rows()
        .zip(logits(head, test))
        .map(|(x, o)| {
            let zx = z(x);
            let proj: f64 = (0..keep)
                .map(|j| (0..d).map(|i| vecs[i][j] * zx[i]).sum::<f64>().powi(2))
                .sum();
            (proj.sqrt() / sq_norm(&zx).sqrt()) * max(&o)
        })
        .collect()
}

/// Mixture log density `ln Σ_c (N_c/N) N(x; μ_c, Σ_c + eps_c·s_c·I)` with
/// `s_c = tr(Σ_c)/d`, or the shared covariance's scale when that is zero.
pub fn naive_gmm(
    train: &FeatureMatrix,
    labels: &Labels,
    test: &FeatureMatrix,
    eps: &[f64],
) -> Vec<f64> {
    let d = train.dim();
    let means = class_means(train, labels);
    let covs = per_class_covariances(train, labels);
    let shared_scale = trace(&shared_covariance(train, labels)) / d as f64;
    let n = train.n_rows() as f64;
    let counts = labels.counts();
    let comps: Vec<(Mat, f64)> = covs
        .iter()
        .zip(eps)
        .zip(&counts)
        .map(|((cov, e), nc)| {
            let own = trace(cov) / d as f64;
            let s = if own > 0.0 { own } else { shared_scale };
            let mut m = cov.clone();
            for i in 0..d {
                m[i][i] += e * s;
            }
            let log_norm = (*nc as f64 / n).ln()
                - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
                - 0.5 * log_abs_det(&m);
            (gauss_jordan_inverse(&m).expect("invertible"), log_norm)
        })
        .collect();
    test.rows()
        .map(|x| {
            let terms: Vec<f64> = comps
                .iter()
                .zip(&means)
                .map(|((inv, ln), mu)| ln - 0.5 * quad_form(inv, x, mu))
                .collect();
            let m = max(&terms);
            m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
        })
        .collect()
}

/// Monte-Carlo estimate of `E_u[(uᵀAu)²]` over uniform unit vectors, with its
/// standard error.
pub fn mc_sphere_average(a: &Mat, n_draws: usize, seed: u64) -> (f64, f64) {
    let d = a.len();
    let mut rng = SeededRng::new(seed);
    let (mut s, mut s2) = (0.0, 0.0);
    let mut u = vec![0.0; d];
    for _ in 0..n_draws {
        rng.fill_normal(&mut u);
        let n = sq_norm(&u).sqrt();
        u.iter_mut().for_each(|v| *v /= n);
        let q: f64 = quad_form(a, &u, &vec![0.0; d]);
        let v = q * q;
        s += v;
        s2 += v * v;
    }
    let n = n_draws as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

/// Sample mean and variance of `‖X‖²` for `X = μ + Lz`, with standard errors
/// `(mean, var, se_mean, se_var)`.
pub fn mc_norm_moments(mu: &[f64], sigma: &Mat, n_draws: usize, seed: u64) -> (f64, f64, f64, f64) {
    let d = mu.len();
    let l = cholesky(sigma).unwrap_or_else(|| vec![vec![0.0; d]; d]);
    let mut rng = SeededRng::new(seed);
    let mut z = vec![0.0; d];
    let vals: Vec<f64> = (0..n_draws)
        .map(|_| {
            rng.fill_normal(&mut z);
            let x: Vec<f64> = (0..d)
                .map(|i| mu[i] + (0..=i).map(|k| l[i][k] * z[k]).sum::<f64>())
                .collect();
            sq_norm(&x)
        })
        .collect();
    let n = n_draws as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let m2 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = vals.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    (
        mean,
        m2,
        (m2 / n).sqrt(),
        ((m4 - m2 * m2).max(0.0) / n).sqrt(),
    )
}

/// AUROC by counting every ID/OOD pair, ties worth one half.
pub fn pair_count_auroc(id_scores: &[f64], ood_scores: &[f64]) -> f64 {
    let mut twice = 0u64;
    for a in id_scores {
        for b in ood_scores {
            twice += if a > b {
                2
            } else if a == b {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2.0 * id_scores.len() as f64 * ood_scores.len() as f64)
}
