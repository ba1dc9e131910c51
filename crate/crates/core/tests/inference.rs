use std::collections::BTreeSet;

use leakguard::audit::{
    duplicate_scan, perm_gap, target_scan_multivariate, MultiScanConfig, PermRefit,
    PermutationConfig,
};
use leakguard::dlsi::{bca_interval, delta_lsi, DlsiConfig, Estimator, HuberConfig, Tier};
use leakguard::learners::LearnerSpec;
use leakguard::preprocess::PreprocSpec;
use leakguard::resample::{fit_resample, FitConfig};
use leakguard::split::{make_split_plan, SplitConfig, SplitMode};
use leakguard::util::{mean, quantile_sorted, rng_from, sorted};
use leakguard::{Column, Dataset, RoleMap, TaskKind};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

/// Percentile bootstrap interval of the mean.
fn percentile_interval(d: &[f64], m: usize, seed: u64) -> (f64, f64) {
    let mut rng = rng_from(seed, &[]);
    let boot: Vec<f64> = (0..m)
        .map(|_| {
            mean(
                &(0..d.len())
                    .map(|_| d[rng.random_range(0..d.len())])
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let b = sorted(&boot);
    (quantile_sorted(&b, 0.025), quantile_sorted(&b, 0.975))
}

#[test]
fn bca_is_close_to_percentile_for_symmetric_deltas() {
    let mut rng = rng_from(8, &[]);
    for case in 0..20u64 {
        let d: Vec<f64> = (0..40)
            .map(|_| 0.1 + 0.02 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let (lo, hi) = bca_interval(
            &d,
            Estimator::Mean,
            4000,
            0.95,
            case,
            &HuberConfig::default(),
        )
        .unwrap();
        let (plo, phi) = percentile_interval(&d, 4000, 100 + case);
        let width = phi - plo;
        assert!(
            (lo - plo).abs() < 0.1 * width && (hi - phi).abs() < 0.1 * width,
            "case {case}: [{lo}, {hi}] vs [{plo}, {phi}]"
        );
    }
}

fn null_dataset(n: usize, p: usize, seed: u64) -> Dataset {
    let mut rng = rng_from(seed, &[]);
    let mut cols = vec![Column::dense(
        "y",
        &(0..n).map(|i| (i % 2) as f64).collect::<Vec<_>>(),
    )];
    let mut names = Vec::new();
    for j in 0..p {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        cols.push(Column::dense(format!("x{j}"), &v));
        names.push(format!("x{j}"));
    }
    Dataset::new(
        cols,
        RoleMap::new("y").positive("1").predictors(names),
        Some(TaskKind::BinaryClassification),
    )
    .unwrap()
}

#[test]
fn refit_permutation_is_calibrated_under_the_null() {
    let datasets = 300;
    let mut rejections = 0;
    for seed in 0..datasets {
        let ds = null_dataset(60, 3, seed);
        let plan =
            make_split_plan(&ds, &SplitConfig::new(SplitMode::RowWise, 5).seed(seed)).unwrap();
        let fr = fit_resample(
            &ds,
            &plan,
            &FitConfig::new(LearnerSpec::glm(), PreprocSpec::standard()).seed(seed),
        )
        .unwrap();
        let cfg = PermutationConfig {
            b: 99,
            perm_refit: PermRefit::Always,
            seed,
            ..PermutationConfig::default()
        };
        let r = perm_gap(&fr, &cfg).unwrap();
        if r.p_value < 0.05 {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / datasets as f64;
    assert!((0.03..=0.08).contains(&rate), "refit rejection rate {rate}");
}

#[test]
fn multivariate_scan_is_calibrated_on_coin_flips() {
    let draws = 200;
    let mut rng = rng_from(77, &[]);
    let x = DMatrix::from_fn(120, 12, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut rejections = 0;
    for d in 0..draws {
        let y: Vec<f64> = (0..120)
            .map(|_| f64::from(u8::from(rng.random::<bool>())))
            .collect();
        let cfg = MultiScanConfig {
            b: 99,
            seed: d,
            ..MultiScanConfig::default()
        };
        let r = target_scan_multivariate(&x, &y, &cfg).unwrap();
        if r.p_value.unwrap() < 0.05 {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / draws as f64;
    assert!(
        (0.01..=0.10).contains(&rate),
        "multivariate rejection rate {rate}"
    );
}

#[test]
fn duplicate_pairs_do_not_depend_on_row_order() {
    let mut rng = rng_from(3, &[]);
    let mut x = DMatrix::from_fn(60, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
    for (a, b) in [(3, 40), (10, 11), (25, 59)] {
        let row = x.row(a).into_owned();
        x.set_row(b, &(row * 1.0001));
    }
    let canon =
        |pairs: &[leakguard::audit::DuplicatePair], map: &[usize]| -> BTreeSet<(usize, usize)> {
            pairs
                .iter()
                .map(|p| {
                    let (a, b) = (map[p.row_a], map[p.row_b]);
                    (a.min(b), a.max(b))
                })
                .collect()
        };
    let ident: Vec<usize> = (0..60).collect();
    let base = canon(&duplicate_scan(&x, None, 0.995).unwrap().pairs, &ident);
    assert_eq!(base, BTreeSet::from([(3, 40), (10, 11), (25, 59)]));
    for seed in 0..10 {
        let mut perm: Vec<usize> = (0..60).collect();
        perm.shuffle(&mut rng_from(seed, &[]));
        let xp = DMatrix::from_fn(60, 5, |i, j| x[(perm[i], j)]);
        let got = canon(&duplicate_scan(&xp, None, 0.995).unwrap().pairs, &perm);
        assert_eq!(got, base);
    }
}

#[test]
fn unpaired_fits_are_tier_d() {
    let ds = null_dataset(80, 3, 1);
    let cfg = FitConfig::new(LearnerSpec::glm(), PreprocSpec::standard());
    let p1 = make_split_plan(
        &ds,
        &SplitConfig::new(SplitMode::RowWise, 5).repeats(10).seed(1),
    )
    .unwrap();
    let p2 = make_split_plan(
        &ds,
        &SplitConfig::new(SplitMode::RowWise, 5).repeats(10).seed(2),
    )
    .unwrap();
    let a = fit_resample(&ds, &p1, &cfg).unwrap();
    let b = fit_resample(&ds, &p2, &cfg).unwrap();
    let r = delta_lsi(&a, &b, &DlsiConfig::default()).unwrap();
    assert_eq!(r.tier, Tier::D);
    assert!(!r.paired && !r.inference_ok);
    assert!(r.p_signflip.is_none() && r.ci_metric.is_none());
    let same = delta_lsi(&a, &a, &DlsiConfig::default()).unwrap();
    assert!(same.paired);
    assert_eq!(same.tier, Tier::B);
    assert_eq!(same.delta_metric, 0.0);
}
