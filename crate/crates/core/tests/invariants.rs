use std::collections::{BTreeMap, BTreeSet};

use leakguard::learners::LearnerSpec;
use leakguard::preprocess::{LassoChoice, PreprocSpec, PreprocStep};
use leakguard::resample::{fit_resample, FitConfig, FoldStatus};
use leakguard::split::{
    group_straddles, make_split_plan, Fold, SplitConfig, SplitMode, SplitPlan, TimeParams,
};
use leakguard::util::rng_from;
use leakguard::{Column, Dataset, RoleMap, TaskKind};
use proptest::prelude::*;
use proptest::test_runner::TestRunner;
use rand::Rng;
use rand_distr::StandardNormal;

/// Random dataset with subject, batch, study and time columns. Groups have
/// uneven sizes and outcome prevalence varies by subject.
fn random_dataset(n: usize, n_groups: usize, seed: u64) -> Dataset {
    let mut rng = rng_from(seed, &[]);
    let subject: Vec<usize> = (0..n)
        .map(|i| {
            if i < n_groups {
                i
            } else {
                rng.random_range(0..n_groups)
            }
        })
        .collect();
    let lean: Vec<f64> = (0..n_groups).map(|_| rng.random_range(0.2..0.8)).collect();
    let y: Vec<f64> = subject
        .iter()
        .map(|&s| f64::from(u8::from(rng.random::<f64>() < lean[s])))
        .collect();
    let batch: Vec<f64> = (0..n)
        .map(|i| {
            if i < 4 {
                i as f64
            } else {
                rng.random_range(0..4) as f64
            }
        })
        .collect();
    let study: Vec<f64> = subject.iter().map(|&s| (s % 3) as f64).collect();
    // coarse times so ties occur
    let time: Vec<f64> = (0..n)
        .map(|_| rng.random_range(0..(n as u32 / 2).max(2)) as f64)
        .collect();
    let x1: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let x2: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let columns = vec![
        Column::dense("y", &y),
        Column::dense(
            "subject",
            &subject.iter().map(|&s| s as f64).collect::<Vec<_>>(),
        ),
        Column::dense("batch", &batch),
        Column::dense("study", &study),
        Column::dense("time", &time),
        Column::dense("x1", &x1),
        Column::dense("x2", &x2),
    ];
    let roles = RoleMap::new("y")
        .positive("1")
        .subject("subject")
        .batch("batch")
        .study("study")
        .time("time")
        .predictors(["x1", "x2"]);
    Dataset::new(columns, roles, Some(TaskKind::BinaryClassification)).unwrap()
}

fn group_column(mode: &SplitMode) -> &'static str {
    match mode {
        SplitMode::BatchBlocked => "batch",
        SplitMode::StudyLoocv => "study",
        _ => "subject",
    }
}

/// Grouped plans over `cases` random datasets: no straddles, inner folds
/// nested in their outer training rows, each row tested once per repeat.
pub fn check_grouped_plans(cases: u32) {
    let strategy = (
        20usize..150,
        6usize..20,
        2usize..6,
        1usize..3,
        0usize..3,
        any::<bool>(),
        any::<bool>(),
        any::<u64>(),
    );
    let mut runner = TestRunner::new(ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(cases)
    });
    let res = runner.run(
        &strategy,
        |(n, n_groups, v, repeats, mode_ix, stratify, nested, seed)| {
            let ds = random_dataset(n, n_groups, seed);
            let mode = [
                SplitMode::SubjectGrouped,
                SplitMode::BatchBlocked,
                SplitMode::StudyLoocv,
            ][mode_ix]
                .clone();
            let v = match mode {
                SplitMode::BatchBlocked => v.min(4),
                SplitMode::StudyLoocv => 3,
                _ => v,
            };
            let cfg = SplitConfig::new(mode.clone(), v)
                .repeats(repeats)
                .stratify(stratify)
                .nested(nested && mode == SplitMode::SubjectGrouped)
                .seed(seed);
            let plan = make_split_plan(&ds, &cfg).unwrap();
            let col = group_column(&mode);
            prop_assert!(group_straddles(&plan, &ds, col).unwrap().is_empty());
            let values = ds.column(col).unwrap().as_numeric().unwrap().to_vec();
            for f in plan.folds().iter() {
                let test: BTreeSet<u64> = f
                    .test
                    .iter()
                    .map(|&r| values[r].unwrap().to_bits())
                    .collect();
                prop_assert!(f
                    .train
                    .iter()
                    .all(|&r| !test.contains(&values[r].unwrap().to_bits())));
                for inner in &f.inner {
                    prop_assert!(inner
                        .train
                        .iter()
                        .chain(&inner.test)
                        .all(|r| f.train.contains(r)));
                    let it: BTreeSet<u64> = inner
                        .test
                        .iter()
                        .map(|&r| values[r].unwrap().to_bits())
                        .collect();
                    prop_assert!(inner
                        .train
                        .iter()
                        .all(|&r| !it.contains(&values[r].unwrap().to_bits())));
                }
            }
            // every row tested exactly once per repeat
            for rep in 1..=plan.repeats {
                let mut seen = vec![0u32; n];
                for f in plan.folds().iter().filter(|f| f.repeat == rep) {
                    for &r in &f.test {
                        seen[r] += 1;
                    }
                }
                prop_assert!(seen.iter().all(|&c| c == 1));
            }
            Ok(())
        },
    );
    if let Err(e) = res {
        panic!("{e}");
    }
}

#[test]
fn grouped_plans_never_straddle() {
    check_grouped_plans(1000);
}

/// Rows in time order, ties by row index.
fn time_ranks(times: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)));
    let mut rank = vec![0; times.len()];
    for (k, &r) in order.iter().enumerate() {
        rank[r] = k;
    }
    rank
}

/// Time-series plans with random horizon, purge and embargo.
pub fn check_time_series_plans(cases: u32) {
    let strategy = (
        30usize..200,
        1usize..6,
        0usize..4,
        0usize..5,
        0usize..5,
        any::<u64>(),
    );
    let mut runner = TestRunner::new(ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(cases)
    });
    let res = runner.run(&strategy, |(n, v, horizon, purge, embargo, seed)| {
        let ds = random_dataset(n, 10, seed);
        let tp = TimeParams {
            horizon,
            purge,
            embargo,
        };
        let plan = make_split_plan(
            &ds,
            &SplitConfig::new(SplitMode::TimeSeries, v)
                .time(tp)
                .seed(seed),
        )
        .unwrap();
        let times: Vec<f64> = ds
            .column("time")
            .unwrap()
            .as_numeric()
            .unwrap()
            .iter()
            .map(|t| t.unwrap())
            .collect();
        let rank = time_ranks(&times);
        let gap = horizon + purge + embargo;
        for f in plan.folds().iter() {
            prop_assert!(!f.test.is_empty());
            let mut tr: Vec<usize> = f.test.iter().map(|&r| rank[r]).collect();
            tr.sort_unstable();
            prop_assert!(
                tr.windows(2).all(|w| w[1] == w[0] + 1),
                "test block not contiguous"
            );
            let lo = tr[0];
            let t0 = f
                .test
                .iter()
                .map(|&r| times[r])
                .fold(f64::INFINITY, f64::min);
            for &r in &f.train {
                prop_assert!(times[r] < t0);
                prop_assert!(rank[r] + gap < lo);
            }
            // nothing eligible was dropped
            let eligible = (0..n)
                .filter(|&r| rank[r] + gap < lo && times[r] < t0)
                .count();
            prop_assert_eq!(eligible, f.train.len());
        }
        Ok(())
    });
    if let Err(e) = res {
        panic!("{e}");
    }
}

#[test]
fn time_series_plans_respect_time_order() {
    check_time_series_plans(300);
}

/// Copy of `ds` with every value in `rows` scrambled, including the outcome
/// and a categorical level never seen elsewhere.
fn mutate_rows(ds: &Dataset, rows: &[usize], seed: u64) -> Dataset {
    let mut rng = rng_from(seed, &[7]);
    let columns: Vec<Column> = ds
        .columns()
        .iter()
        .map(|c| {
            let name = c.name.clone();
            if ["subject", "batch", "study", "time"].contains(&name.as_str()) {
                return c.clone();
            }
            if c.is_numeric() {
                let mut v = c.as_numeric().unwrap().to_vec();
                for &r in rows {
                    v[r] = if name == "y" {
                        Some(1.0 - v[r].unwrap())
                    } else if rng.random::<f64>() < 0.2 {
                        None
                    } else {
                        Some(1e3 * rng.sample::<f64, _>(StandardNormal))
                    };
                }
                Column::numeric(name, v)
            } else {
                let mut v: Vec<Option<String>> = (0..c.len()).map(|i| c.cell(i)).collect();
                for &r in rows {
                    v[r] = if name == "y" {
                        v[r].as_deref().map(|l| {
                            if l == "1" {
                                "0".to_string()
                            } else {
                                "1".to_string()
                            }
                        })
                    } else {
                        Some("unseen".to_string())
                    };
                }
                Column::categorical(name, &v)
            }
        })
        .collect();
    Dataset::new(columns, ds.roles().clone(), Some(ds.task())).unwrap()
}

fn random_pipeline(rng: &mut leakguard::util::Rng) -> (PreprocSpec, LearnerSpec) {
    let mut steps = Vec::new();
    if rng.random::<bool>() {
        steps.push(PreprocStep::ImputeMedian);
    }
    match rng.random_range(0..3) {
        0 => steps.push(PreprocStep::NormalizeZscore),
        1 => steps.push(PreprocStep::NormalizeRobust),
        _ => {}
    }
    if rng.random::<f64>() < 0.3 {
        steps.push(PreprocStep::FilterVariance { threshold: 0.01 });
    }
    match rng.random_range(0..4) {
        0 => steps.push(PreprocStep::SelectTtest {
            k: rng.random_range(1..5),
        }),
        1 => steps.push(PreprocStep::SelectLasso {
            choice: LassoChoice::TopK(3),
        }),
        _ => {}
    }
    if rng.random::<f64>() < 0.3 {
        steps.push(PreprocStep::ProjectPca { m: 2 });
    }
    let learner = match rng.random_range(0..4) {
        0 => LearnerSpec::glm(),
        1 => LearnerSpec::glmnet_fixed(0.9, 0.02),
        2 => LearnerSpec::glmnet(0.5),
        _ => LearnerSpec::glmnet_fixed(1.0, 0.05),
    };
    // imputation is needed whenever missing cells can reach a step
    if !steps.contains(&PreprocStep::ImputeMedian) {
        steps.push(PreprocStep::ImputeMedian);
    }
    (PreprocSpec::new(steps).unwrap(), learner)
}

/// Mutating the test rows of a single-fold plan leaves the fitted
/// preprocessing and model untouched, over `cases` random pipelines.
pub fn check_guard_metamorphic(cases: u64) {
    let mut rng = rng_from(2024, &[]);
    for case in 0..cases {
        let n = rng.random_range(60..120);
        let p = rng.random_range(3..8);
        let mut columns = vec![];
        let y: Vec<f64> = (0..n)
            .map(|_| f64::from(u8::from(rng.random::<bool>())))
            .collect();
        columns.push(Column::dense("y", &y));
        let subject: Vec<f64> = (0..n).map(|i| (i / 2) as f64).collect();
        columns.push(Column::dense("subject", &subject));
        let mut preds = Vec::new();
        for j in 0..p {
            let v: Vec<Option<f64>> = (0..n)
                .map(|i| {
                    if rng.random::<f64>() < 0.05 {
                        None
                    } else {
                        Some(
                            rng.sample::<f64, _>(StandardNormal)
                                + 0.5 * y[i] * (j == 0) as u8 as f64,
                        )
                    }
                })
                .collect();
            columns.push(Column::numeric(format!("x{j}"), v));
            preds.push(format!("x{j}"));
        }
        if case % 2 == 0 {
            let levels = ["a", "b", "c"];
            let v: Vec<Option<&str>> = (0..n)
                .map(|_| Some(levels[rng.random_range(0..3)]))
                .collect();
            columns.push(Column::categorical("site", &v));
            preds.push("site".into());
        }
        let roles = RoleMap::new("y")
            .positive("1")
            .subject("subject")
            .predictors(preds);
        let ds = Dataset::new(columns, roles, Some(TaskKind::BinaryClassification)).unwrap();

        let full = make_split_plan(
            &ds,
            &SplitConfig::new(SplitMode::SubjectGrouped, 4).seed(case),
        )
        .unwrap();
        let first: Fold = full.folds()[0].clone();
        let plan = SplitPlan::from_folds(&ds, SplitMode::SubjectGrouped, case, vec![first.clone()])
            .unwrap();
        let (pre, learner) = random_pipeline(&mut rng);
        let cfg = FitConfig::new(learner, pre)
            .seed(case)
            .store_refit_data(false);

        let a = fit_resample(&ds, &plan, &cfg).unwrap();
        let mutated = mutate_rows(&ds, &first.test, case);
        let b = fit_resample(&mutated, &plan, &cfg).unwrap();
        let (fa, fb) = (&a.folds[0], &b.folds[0]);
        assert_eq!(fa.status, fb.status, "case {case}");
        if fa.status == FoldStatus::Success {
            assert_eq!(
                fa.preproc_hash,
                fb.preproc_hash,
                "case {case}: {}",
                cfg.preprocess.label()
            );
            assert_eq!(fa.model, fb.model, "case {case}");
            assert_eq!(fa.n_train, fb.n_train);
        }
    }
}

#[test]
fn test_rows_never_influence_the_fitted_pipeline() {
    check_guard_metamorphic(200);
}

#[test]
fn stratified_plans_beat_random_draws() {
    for seed in 0..60u64 {
        let ds = random_dataset(80 + 5 * seed as usize, 15 + seed as usize % 25, seed);
        let y = ds.outcome_vector();
        let global = y.iter().sum::<f64>() / y.len() as f64;
        let worst = |plan: &SplitPlan| {
            plan.folds()
                .iter()
                .map(|f| {
                    let prev = f.test.iter().map(|&r| y[r]).sum::<f64>() / f.test.len() as f64;
                    (prev - global).abs()
                })
                .fold(0.0f64, f64::max)
        };
        let strat = make_split_plan(
            &ds,
            &SplitConfig::new(SplitMode::SubjectGrouped, 5)
                .stratify(true)
                .seed(seed),
        )
        .unwrap();
        let best_random = (0..100u64)
            .map(|k| {
                let p = make_split_plan(
                    &ds,
                    &SplitConfig::new(SplitMode::SubjectGrouped, 5).seed(1000 + k),
                )
                .unwrap();
                worst(&p)
            })
            .fold(f64::INFINITY, f64::min);
        assert!(
            worst(&strat) <= best_random + 1e-12,
            "seed {seed}: {} vs {best_random}",
            worst(&strat)
        );
    }
}

#[test]
fn plans_are_deterministic_and_compact_round_trips() {
    let ds = random_dataset(90, 15, 3);
    let cfg = SplitConfig::new(SplitMode::SubjectGrouped, 5)
        .repeats(3)
        .seed(9);
    let a = make_split_plan(&ds, &cfg).unwrap();
    let b = make_split_plan(&ds, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.hash.len(), 12);
    let c = make_split_plan(&ds, &cfg.clone().compact(true)).unwrap();
    assert_eq!(c.hash, a.hash);
    assert_eq!(c.folds().into_owned(), a.folds);
    let mut sizes = BTreeMap::new();
    for f in a.folds().iter() {
        *sizes.entry(f.repeat).or_insert(0) += f.test.len();
    }
    assert!(sizes.values().all(|&s| s == 90));
    let other = make_split_plan(&ds, &cfg.clone().seed(10)).unwrap();
    assert_ne!(other.hash, a.hash);
}
