//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::checks::oracle_errors;
use common::{dflat, flat, instance, max_abs_diff, random_psd, small_bundle, small_config, to_mat};
use mahakit::bundle::load_bundle;
use mahakit::diagnostics::{alpha_sweep, gaussian_norm_moments, variance_deviation};
use mahakit::eval::{eval_bundle, DiagnosticsConfig, EvalConfig};
use mahakit::gaussian::{
    estimate_class_means, estimate_per_class_covariances, estimate_shared_covariance,
    PerClassCovariances,
};
use mahakit::metrics::{auroc, fpr_at_tpr, unit_test_failures};
use mahakit::npy::{
    encode, read_array, read_array_with, write_array, ArrayData, NpyArray, ReadOptions,
};
use mahakit::rng::SeededRng;
use mahakit::scorers::score_maha;
use mahakit::synth::oracle::{self, pair_count_auroc};
use mahakit::synth::{generate, SynthSpec};
use mahakit::threads::with_threads;
use mahakit::{fit, l2_normalize, Error, Method, Shrinkage};
use nalgebra::DMatrix;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || {
        format!("took {elapsed:.1?}, limit {limit:?}")
    })
}

fn estimation() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let inst = instance(seed, 200, 8, 5);
        let means = estimate_class_means(&inst.train, &inst.labels).unwrap();
        let shared = estimate_shared_covariance(&inst.train, &inst.labels, &means).unwrap();
        let pcs = estimate_per_class_covariances(&inst.train, &inst.labels, &means).unwrap();
        worst = worst.max(max_abs_diff(
            means.as_slice(),
            &flat(&oracle::class_means(&inst.train, &inst.labels)),
        ));
        worst = worst.max(max_abs_diff(
            &dflat(&shared),
            &flat(&oracle::shared_covariance(&inst.train, &inst.labels)),
        ));
        for (got, want) in pcs
            .covs
            .iter()
            .zip(oracle::per_class_covariances(&inst.train, &inst.labels))
        {
            worst = worst.max(max_abs_diff(&dflat(got), &flat(&want)));
        }
    }
    ensure(worst <= 1e-10, || format!("max abs error {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "100 instances, max abs error {worst:.1e}, {:.2?}",
        start.elapsed()
    ))
}

fn scorers() -> Outcome {
    let start = Instant::now();
    let mut worst = vec![0.0f64; Method::ALL.len()];
    let mut counts = vec![0usize; Method::ALL.len()];
    let idx = |m: Method| Method::ALL.iter().position(|&k| k == m).unwrap();
    let mut seed = 0;
    // ViM only counts instances with d > C + 1, so keep drawing until it has 50 too
    while counts.iter().any(|&c| c < 50) {
        for (m, e) in oracle_errors(&instance(seed, 200, 8, 5)) {
            if counts[idx(m)] < 50 {
                counts[idx(m)] += 1;
                worst[idx(m)] = worst[idx(m)].max(e);
            }
        }
        seed += 1;
    }
    let (i, e) = worst
        .iter()
        .enumerate()
        .fold((0, 0.0), |b, (i, &e)| if e > b.1 { (i, e) } else { b });
    ensure(e <= 1e-8, || {
        format!("{} relative error {e:e}", Method::ALL[i])
    })?;
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "{} scorers x 50 instances, worst {} at {e:.1e}, {:.2?}",
        Method::ALL.len(),
        Method::ALL[i],
        start.elapsed()
    ))
}

fn norm_moments() -> Outcome {
    let mut rng = SeededRng::new(2);
    let mut worst_z = 0.0f64;
    for k in 0..20 {
        let d = [2, 16, 64][k % 3];
        let sigma = random_psd(d, &mut rng);
        let mu: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let m = gaussian_norm_moments(&mu, &sigma).unwrap();
        let (mean, var, se_mean, se_var) =
            oracle::mc_norm_moments(&mu, &to_mat(&sigma), 200_000, 500 + k as u64);
        let z = f64::max(
            (mean - m.mean_sq_norm).abs() / se_mean,
            (var - m.var_sq_norm).abs() / se_var,
        );
        worst_z = worst_z.max(z);
        ensure(z <= 3.0, || {
            format!("case {k} (d={d}) is {z:.2} standard errors off")
        })?;
    }
    for d in [2, 16, 64] {
        let m = gaussian_norm_moments(&vec![0.0; d], &DMatrix::identity(d, d)).unwrap();
        ensure(
            m.mean_sq_norm == d as f64 && m.var_sq_norm == 2.0 * d as f64,
            || {
                format!(
                    "standard normal d={d} gave ({}, {})",
                    m.mean_sq_norm, m.var_sq_norm
                )
            },
        )?;
    }
    Ok(format!(
        "20 cases within {worst_z:.2} SE; identity case exact"
    ))
}

fn deviation() -> Outcome {
    let mut rng = SeededRng::new(4);
    let mut worst = 0.0f64;
    for seed in 0..8 {
        let inst = instance(seed, 200, 8, 5);
        let f = fit(&inst.train, &inst.labels, false, Shrinkage::Fixed(0.0)).unwrap();
        let d = f.dim();
        let pcs = PerClassCovariances {
            covs: (0..3).map(|_| random_psd(d, &mut rng)).collect(),
            counts: vec![1; 3],
        };
        let r = variance_deviation(&f, &pcs).unwrap();
        let isq = oracle::inverse_sqrt(&to_mat(f.shared_cov()));
        for (c, cov) in pcs.covs.iter().enumerate() {
            let a = oracle::matmul(
                &oracle::matmul(&isq, &to_mat(&(cov - f.shared_cov()))),
                &isq,
            );
            let (mc, _) = oracle::mc_sphere_average(&a, 1_000_000, 40 + seed * 3 + c as u64);
            let rel = (r.per_class[c] - mc).abs() / mc;
            worst = worst.max(rel);
            ensure(rel <= 0.01, || {
                format!("d={d} class {c}: {} vs {mc}", r.per_class[c])
            })?;
        }
        let shared = f.shared_cov().clone();
        let exact = PerClassCovariances {
            covs: vec![shared.clone(), &shared * 2.0],
            counts: vec![1, 1],
        };
        let r = variance_deviation(&f, &exact).unwrap();
        ensure(
            r.per_class[0].abs() <= 1e-12 && (r.per_class[1] - 1.0).abs() <= 1e-12,
            || format!("identities gave {:?}", r.per_class),
        )?;
    }
    Ok(format!(
        "24 classes, d <= 8, worst relative gap {:.3}%; 0 and 1 identities hold",
        100.0 * worst
    ))
}

fn metrics() -> Outcome {
    let mut rng = SeededRng::new(5);
    let mut min_ties = 1.0f64;
    for _ in 0..100 {
        let grid = 5 + rng.below(40);
        let continuous = rng.uniform() * 0.6;
        let (ni, no) = (20 + rng.below(300), 20 + rng.below(300));
        let mut draw = |n: u64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    if rng.bernoulli(continuous) {
                        rng.normal() * 10.0
                    } else {
                        rng.below(grid) as f64 - 10.0
                    }
                })
                .collect()
        };
        let id = draw(ni);
        let ood = draw(no);
        let mut all: Vec<f64> = id.iter().chain(&ood).copied().collect();
        all.sort_by(f64::total_cmp);
        let tied = (0..all.len())
            .filter(|&i| {
                (i > 0 && all[i - 1] == all[i]) || (i + 1 < all.len() && all[i + 1] == all[i])
            })
            .count();
        min_ties = min_ties.min(tied as f64 / all.len() as f64);
        let (a, b) = (auroc(&id, &ood).unwrap(), pair_count_auroc(&id, &ood));
        ensure(a == b, || format!("AUROC {a} vs pair count {b}"))?;
    }
    ensure(min_ties >= 0.2, || {
        format!("an instance had only {:.0}% tied samples", 100.0 * min_ties)
    })?;

    let eq = |what: &str, got: f64, want: f64| {
        ensure(got == want, || format!("{what}: {got} != {want}"))
    };
    let id: Vec<f64> = (0..100).rev().map(|v| v as f64 + 10.0).collect();
    eq(
        "separated FPR",
        fpr_at_tpr(&id, &[0.0, 5.0, 9.0], 0.95).unwrap().fpr_at_tpr,
        0.0,
    )?;
    let id: Vec<f64> = (1..=20).map(f64::from).collect();
    let r = fpr_at_tpr(&id, &[0.5, 10.5], 0.95).unwrap();
    eq("threshold", r.threshold, 2.0)?;
    eq("FPR", r.fpr_at_tpr, 0.5)?;
    let same: Vec<f64> = (0..1000).map(|v| v as f64 * 0.37).collect();
    let r = fpr_at_tpr(&same, &same, 0.95).unwrap();
    ensure((r.fpr_at_tpr - 0.95).abs() <= 1.0 / 1000.0, || {
        format!("identical sets FPR {}", r.fpr_at_tpr)
    })?;
    eq(
        "separated AUROC",
        auroc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(),
        1.0,
    )?;
    eq("identical AUROC", auroc(&same, &same).unwrap(), 0.5)?;
    eq("[3,1] vs [2]", auroc(&[3.0, 1.0], &[2.0]).unwrap(), 0.5)?;
    eq(
        "no failures",
        unit_test_failures(&[0.0; 17], 0.10) as f64,
        0.0,
    )?;
    eq(
        "boundary failure",
        unit_test_failures(&[0.10], 0.10) as f64,
        1.0,
    )?;
    eq(
        "two failures",
        unit_test_failures(&[0.05, 0.2, 0.11], 0.10) as f64,
        2.0,
    )?;
    Ok(format!(
        "100 instances exact (>= {:.0}% ties each); hand cases exact",
        100.0 * min_ties
    ))
}

fn fpr_of(f: &mahakit::GaussianFit, data: &mahakit::synth::SynthData, normalized: bool) -> f64 {
    let id = score_maha(f, &data.id_test, normalized).unwrap();
    let ood = score_maha(f, &data.ood, normalized).unwrap();
    fpr_at_tpr(&id.scores, &ood.scores, 0.95)
        .unwrap()
        .fpr_at_tpr
}

fn synthetic_direction() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let (mut fpr_sum, mut dev_sum) = ([0.0; 2], [0.0; 2]);
    for seed in 0..20 {
        let data = generate(&SynthSpec::heteroscedastic(seed)).unwrap();
        let plain = fit(&data.train, &data.train_labels, false, Shrinkage::Auto).unwrap();
        let normed = fit(&data.train, &data.train_labels, true, Shrinkage::Auto).unwrap();
        let fpr = [fpr_of(&plain, &data, false), fpr_of(&normed, &data, true)];
        let dev = [plain, normed].map(|f| {
            let feats = if f.normalized() {
                l2_normalize(&data.train).unwrap()
            } else {
                data.train.clone()
            };
            let pcs =
                estimate_per_class_covariances(&feats, &data.train_labels, f.means()).unwrap();
            variance_deviation(&f, &pcs).unwrap().mean
        });
        wins += usize::from(fpr[1] < fpr[0] && dev[1] < dev[0]);
        for k in 0..2 {
            fpr_sum[k] += fpr[k] / 20.0;
            dev_sum[k] += dev[k] / 20.0;
        }
    }
    ensure(wins >= 18, || {
        format!("Maha++ better on both counts in only {wins}/20 seeds")
    })?;
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "{wins}/20 seeds; mean FPR {:.1}% -> {:.1}%, deviation {:.3} -> {:.3}, {:.1?}",
        100.0 * fpr_sum[0],
        100.0 * fpr_sum[1],
        dev_sum[0],
        dev_sum[1],
        start.elapsed()
    ))
}

fn scale_invariance() -> Outcome {
    let data = generate(&SynthSpec::heteroscedastic(0)).unwrap();
    let alphas = [0.25, 0.5, 1.0, 2.0, 4.0];
    let step = 1.0 / data.ood.n_rows() as f64;
    let normed = fit(&data.train, &data.train_labels, true, Shrinkage::Auto).unwrap();
    let pp = alpha_sweep(&normed, &data.id_test, &data.ood, &alphas, Method::MahaPP).unwrap();
    let (lo, hi) = pp.iter().fold((1.0f64, 0.0f64), |(lo, hi), p| {
        (lo.min(p.fpr), hi.max(p.fpr))
    });
    ensure(hi - lo <= step, || {
        format!("Maha++ FPR ranges over [{lo}, {hi}]")
    })?;
    let plain = fit(&data.train, &data.train_labels, false, Shrinkage::Auto).unwrap();
    let m = alpha_sweep(&plain, &data.id_test, &data.ood, &alphas, Method::Maha).unwrap();
    ensure(m[0].fpr >= m[2].fpr, || {
        format!("Maha FPR(0.25) = {} < FPR(1) = {}", m[0].fpr, m[2].fpr)
    })?;
    ensure(m.windows(2).all(|w| w[0].fpr >= w[1].fpr), || {
        "Maha FPR is not monotone in alpha".into()
    })?;
    let fprs: Vec<String> = m.iter().map(|p| format!("{:.1}", 100.0 * p.fpr)).collect();
    Ok(format!(
        "Maha++ FPR spread {:.2} points; Maha FPR over alphas [{}]",
        100.0 * (hi - lo),
        fprs.join(", ")
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_bundle(dir.path(), 8);
    let bundle = load_bundle(&manifest).unwrap();
    let config = EvalConfig {
        scorer: small_config(),
        diagnostics: Some(DiagnosticsConfig {
            correlation: vec![Method::Maha, Method::MahaPP],
            ..DiagnosticsConfig::standard()
        }),
        ..EvalConfig::default()
    };
    let run = |threads| {
        with_threads(threads, || {
            eval_bundle(&bundle, "manifest.json", &Method::ALL, &config)
                .unwrap()
                .without_timings()
                .to_json()
                .unwrap()
        })
    };
    let first = run(1);
    ensure(first == run(1), || "two single-threaded runs differ".into())?;
    ensure(first == run(4), || "1 and 4 threads differ".into())?;
    Ok(format!(
        "{} methods, {} report bytes identical across runs and 1/4 threads",
        Method::ALL.len(),
        first.len()
    ))
}

fn format_conformance() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.npy");
    let mut rng = SeededRng::new(9);
    let arrays = [
        ArrayData::F64((0..60).map(|_| f64::from_bits(rng.next_u64())).collect()),
        ArrayData::F32(
            (0..60)
                .map(|_| f32::from_bits(rng.next_u64() as u32))
                .collect(),
        ),
        ArrayData::I64((0..60).map(|_| rng.next_u64() as i64).collect()),
    ];
    for data in arrays {
        for shape in [vec![60], vec![12, 5]] {
            let a = NpyArray::new(shape, data.clone()).unwrap();
            write_array(&p, &a).unwrap();
            let back = read_array_with(&p, ReadOptions { widen_f32: false }).unwrap();
            ensure(encode(&back) == encode(&a), || {
                format!("{:?} {:?} did not round-trip", a.data.dtype(), a.shape)
            })?;
        }
    }
    let good = encode(&NpyArray::from_vector(&[1.0, 2.0, 3.0]));
    let mut bad_magic = good.clone();
    bad_magic[0] = b'P';
    let truncated = good[..good.len() - 3].to_vec();
    let header_end = 10 + u16::from_le_bytes([good[8], good[9]]) as usize;
    let header = String::from_utf8(good[10..header_end].to_vec())
        .unwrap()
        .replace("'fortran_order': False", "'fortran_order': True ");
    let fortran = [&good[..10], header.as_bytes(), &good[header_end..]].concat();
    let cases: [(&str, Vec<u8>, fn(&Error) -> bool); 3] = [
        ("bad magic", bad_magic, |e| {
            matches!(e, Error::BadMagic { .. })
        }),
        ("truncated payload", truncated, |e| {
            matches!(e, Error::TruncatedPayload { .. })
        }),
        ("fortran_order", fortran, |e| {
            matches!(e, Error::FortranOrderUnsupported { .. })
        }),
    ];
    for (name, bytes, expected) in cases {
        std::fs::write(&p, bytes).unwrap();
        let e = read_array(&p).unwrap_err();
        ensure(expected(&e) && e.exit_code() == 2, || {
            format!("{name}: got {e} (exit {})", e.exit_code())
        })?;
    }
    Ok("f8/f4/i8 bit-exact; malformed corpus rejected with exit code 2".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("estimation matches two-loop oracles", estimation),
        ("scorers match naive oracles", scorers),
        ("norm moments match Monte Carlo", norm_moments),
        ("variance deviation matches sphere average", deviation),
        ("rank metrics exact", metrics),
        (
            "normalization helps on heteroscedastic norms",
            synthetic_direction,
        ),
        ("Maha++ is scale invariant", scale_invariance),
        ("reports are deterministic", determinism),
        (
            "npy round-trips and rejects malformed files",
            format_conformance,
        ),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
