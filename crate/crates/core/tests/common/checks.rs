//! Every scorer against its brute-force oracle on one instance.

use mahakit::gaussian::{estimate_class_means, estimate_per_class_covariances};
use mahakit::scorers::{
    nnguide_subset, score_ash_s, score_cosine, score_energy, score_energy_react, score_gmm,
    score_klm, score_knn, score_maha, score_maxlogit, score_msp, score_neco, score_nnguide,
    score_rel_maha, score_ssc, score_vim,
};
use mahakit::synth::oracle;
use mahakit::{fit, Method, Shrinkage};

use super::{abs, max_rel_diff, Instance};

/// Largest relative error of each method over its parameter variants.
/// ViM is left out when `d ≤ C + 1`, where no residual space remains.
pub fn oracle_errors(inst: &Instance) -> Vec<(Method, f64)> {
    let (h, tr, te, y) = (&inst.head, &inst.train, &inst.test, &inst.labels);
    let mut out = Vec::new();
    let mut push = |m: Method, got: Vec<f64>, want: Vec<f64>| {
        let e = max_rel_diff(&got, &want);
        match out.iter_mut().find(|(k, _)| *k == m) {
            Some((_, worst)) => *worst = f64::max(*worst, e),
            None => out.push((m, e)),
        }
    };

    let plain = fit(tr, y, false, Shrinkage::Auto).unwrap();
    let normed = fit(tr, y, true, Shrinkage::Auto).unwrap();
    push(
        Method::Maha,
        score_maha(&plain, te, false).unwrap().scores,
        oracle::naive_mahalanobis(tr, y, te, None),
    );
    push(
        Method::MahaPP,
        score_maha(&normed, te, true).unwrap().scores,
        oracle::naive_mahalanobis_pp(tr, y, te, None),
    );
    push(
        Method::RelMaha,
        score_rel_maha(&plain, te, false).unwrap().scores,
        oracle::naive_rel_mahalanobis(tr, y, te, None, None),
    );
    let (ntr, nte) = (oracle::normalize_rows(tr), oracle::normalize_rows(te));
    push(
        Method::RelMahaPP,
        score_rel_maha(&normed, te, true).unwrap().scores,
        oracle::naive_rel_mahalanobis(&ntr, y, &nte, None, None),
    );
    let pcs = estimate_per_class_covariances(tr, y, plain.means()).unwrap();
    let eps: Vec<f64> = oracle::per_class_covariances(tr, y)
        .iter()
        .map(|c| oracle::shrink(c, None).1)
        .collect();
    push(
        Method::Gmm,
        score_gmm(&plain, &pcs, te, Shrinkage::Auto).unwrap().scores,
        oracle::naive_gmm(tr, y, te, &eps),
    );

    push(
        Method::Msp,
        score_msp(h, te).unwrap().scores,
        oracle::naive_msp(h, te),
    );
    push(
        Method::MaxLogit,
        score_maxlogit(h, te).unwrap().scores,
        oracle::naive_maxlogit(h, te),
    );
    push(
        Method::Energy,
        score_energy(h, te).unwrap().scores,
        oracle::naive_energy(h, te),
    );
    for q in [0.5, 0.9, 0.99, 1.0] {
        push(
            Method::EnergyReact,
            score_energy_react(h, te, tr, q).unwrap().scores,
            oracle::naive_react(h, tr, te, q),
        );
    }
    push(
        Method::KlMatching,
        score_klm(h, tr, y, te).unwrap().scores,
        oracle::naive_klm(h, tr, y, te),
    );
    for t in [0.5, 1.0, 10.0] {
        push(
            Method::Ssc,
            score_ssc(h, te, t).unwrap().scores,
            oracle::naive_ssc(h, te, t),
        );
    }
    // ASH expects non-negative activations
    let pos = abs(te);
    for p in [0.0, 30.0, 65.0, 90.0] {
        push(
            Method::AshS,
            score_ash_s(h, &pos, p).unwrap().scores.scores,
            oracle::naive_ash_s(h, &pos, p),
        );
    }

    for k in [1, 3, 10] {
        push(
            Method::Knn,
            score_knn(tr, te, k).unwrap().scores,
            oracle::naive_knn(tr, te, k),
        );
    }
    for (f, k) in [(1.0, 1), (0.3, 2)] {
        let subset = nnguide_subset(tr.n_rows(), f, 11);
        push(
            Method::NnGuide,
            score_nnguide(h, tr, te, f, k, 11).unwrap().scores,
            oracle::naive_nnguide(h, tr, &subset, te, k),
        );
    }
    let means = estimate_class_means(tr, y).unwrap();
    push(
        Method::Cosine,
        score_cosine(&means, te).unwrap().scores,
        oracle::naive_cosine(tr, y, te),
    );
    for ev in [0.5, 0.9, 1.0] {
        push(
            Method::NeCo,
            score_neco(h, tr, te, ev).unwrap().scores,
            oracle::naive_neco(h, tr, te, ev),
        );
    }

    let (c, d) = (inst.n_classes(), inst.dim());
    if d > c + 1 {
        for dim in [c, d - 1] {
            push(
                Method::Vim,
                score_vim(h, tr, te, Some(dim)).unwrap().scores,
                oracle::naive_vim(h, tr, te, dim),
            );
        }
    }
    out
}
