//! Post hoc leakage diagnostics for a cross-validated fit.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnValues, Dataset, TaskKind};
use crate::error::{Error, Result};
use crate::learners::fit_logistic_irls;
use crate::linalg::{select_rows, take};
use crate::metrics::{auc, compute_metric, MetricName};
use crate::preprocess::principal_axes;
use crate::resample::{fit_resample, FitResult, FoldStatus};
use crate::split::{overlap_check, SplitMode, SplitPlan};
use crate::util::{chi2_sf, mean, median, rng_from, sample_sd, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermRefit {
    Auto,
    #[serde(rename = "true")]
    Always,
    #[serde(rename = "false")]
    Never,
}

impl PermRefit {
    pub fn parse(s: &str) -> Result<PermRefit> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(PermRefit::Auto),
            "true" | "yes" | "refit" => Ok(PermRefit::Always),
            "false" | "no" | "fixed" => Ok(PermRefit::Never),
            _ => Err(Error::invalid(format!(
                "perm-refit must be auto, true or false, not `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationConfig {
    pub b: usize,
    pub perm_refit: PermRefit,
    pub perm_stratify: bool,
    pub return_perm: bool,
    pub metric: MetricName,
    pub seed: u64,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        PermutationConfig {
            b: 200,
            perm_refit: PermRefit::Auto,
            perm_stratify: false,
            return_perm: false,
            metric: MetricName::Auc,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermMethod {
    FixedPredictions,
    Refit,
}

impl PermMethod {
    pub fn label(&self) -> &'static str {
        match self {
            PermMethod::FixedPredictions => "fixed predictions",
            PermMethod::Refit => "refit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermGapResult {
    pub metric: MetricName,
    pub observed: f64,
    pub perm_mean: f64,
    pub perm_sd: f64,
    pub gap: f64,
    pub p_value: f64,
    pub b: usize,
    pub method: PermMethod,
    pub stratified: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draws: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub messages: Vec<String>,
}

/// Phipson–Smyth p-value: `(b + 1) / (B + 1)` where `b` counts permuted
/// statistics at least as extreme as the observed one.
pub fn phipson_smyth(observed: f64, draws: &[f64], higher_is_better: bool) -> f64 {
    let b = draws
        .iter()
        .filter(|&&d| {
            if higher_is_better {
                d >= observed
            } else {
                d <= observed
            }
        })
        .count();
    (b + 1) as f64 / (draws.len() + 1) as f64
}

/// A label permutation: row `i` receives the label of row `perm[i]`.
/// With `groups`, whole groups exchange label vectors with other groups of
/// the same size.
pub fn label_permutation(n: usize, groups: Option<&[u32]>, rng: &mut Rng) -> Vec<usize> {
    match groups {
        None => {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(rng);
            p
        }
        Some(g) => {
            let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for (i, &k) in g.iter().enumerate() {
                members.entry(k).or_default().push(i);
            }
            let mut by_size: BTreeMap<usize, Vec<&Vec<usize>>> = BTreeMap::new();
            for rows in members.values() {
                by_size.entry(rows.len()).or_default().push(rows);
            }
            let mut perm: Vec<usize> = (0..n).collect();
            for stratum in by_size.values() {
                let mut order: Vec<usize> = (0..stratum.len()).collect();
                order.shuffle(rng);
                for (dst, &src) in stratum.iter().zip(&order) {
                    for (a, b) in dst.iter().zip(stratum[src].iter()) {
                        perm[*a] = *b;
                    }
                }
            }
            perm
        }
    }
}

/// Mean over usable folds of the metric computed against `labels`.
fn fold_mean_metric(fr: &FitResult, metric: MetricName, labels: &[f64]) -> f64 {
    let vals: Vec<f64> = fr
        .folds
        .iter()
        .filter(|f| {
            f.status != FoldStatus::Failed
                && f.predictions.len() == f.test_rows.len()
                && !f.test_rows.is_empty()
        })
        .filter_map(|f| compute_metric(metric, &f.predictions, &take(labels, &f.test_rows), 0.5))
        .collect();
    if vals.is_empty() {
        f64::NAN
    } else {
        mean(&vals)
    }
}

/// Label-permutation test of the fitted predictions.
pub fn perm_gap(fr: &FitResult, cfg: &PermutationConfig) -> Result<PermGapResult> {
    if cfg.b == 0 {
        return Err(Error::invalid("the permutation count B must be at least 1"));
    }
    if !fr.metrics.contains(&cfg.metric) {
        return Err(Error::invalid(format!(
            "metric `{}` was not computed for this fit",
            cfg.metric
        )));
    }
    let mut messages = Vec::new();
    let method = match (cfg.perm_refit, fr.refit.as_ref().and_then(|r| r.dataset.as_ref())) {
        (PermRefit::Never, _) => PermMethod::FixedPredictions,
        (_, Some(_)) => PermMethod::Refit,
        (PermRefit::Always, None) => {
            return Err(Error::invalid(
                "refit permutations need the stored data and learner; fit with store_refit_data enabled",
            ))
        }
        (PermRefit::Auto, None) => {
            messages.push("no refit data stored; using fixed-prediction permutations".into());
            PermMethod::FixedPredictions
        }
    };
    if method == PermMethod::FixedPredictions && !fr.has_predictions() {
        return Err(Error::invalid(
            "the fit holds no out-of-fold predictions to permute",
        ));
    }
    let groups = if cfg.perm_stratify {
        fr.groups.as_deref()
    } else {
        None
    };
    if cfg.perm_stratify && groups.is_none() {
        messages.push("plan is not grouped; labels permuted row-wise".into());
    }
    let observed = fold_mean_metric(fr, cfg.metric, &fr.outcome_values);
    let n = fr.outcome_values.len();
    let draws: Vec<f64> = match method {
        PermMethod::FixedPredictions => (0..cfg.b)
            .into_par_iter()
            .map(|d| {
                let perm = label_permutation(n, groups, &mut rng_from(cfg.seed, &[0xBE, d as u64]));
                let labels = take(&fr.outcome_values, &perm);
                fold_mean_metric(fr, cfg.metric, &labels)
            })
            .collect(),
        PermMethod::Refit => {
            let payload = fr.refit.as_ref().expect("checked above");
            let ds = payload.dataset.as_ref().expect("checked above");
            let mut fit_cfg = payload.config.clone();
            fit_cfg.store_refit_data = false;
            (0..cfg.b)
                .into_par_iter()
                .map(|d| {
                    let perm =
                        label_permutation(n, groups, &mut rng_from(cfg.seed, &[0xBE, d as u64]));
                    let pds = ds.with_permuted_outcome(&perm);
                    match fit_resample(&pds, &payload.plan, &fit_cfg) {
                        Ok(pf) => fold_mean_metric(&pf, cfg.metric, &pf.outcome_values),
                        Err(_) => f64::NAN,
                    }
                })
                .collect()
        }
    };
    let usable: Vec<f64> = draws.iter().copied().filter(|d| d.is_finite()).collect();
    if usable.len() < draws.len() {
        messages.push(format!(
            "{} permutation draw(s) produced no usable metric",
            draws.len() - usable.len()
        ));
    }
    if usable.is_empty() {
        return Err(Error::Fit(
            "no permutation draw produced a usable metric".into(),
        ));
    }
    let perm_mean = mean(&usable);
    Ok(PermGapResult {
        metric: cfg.metric,
        observed,
        perm_mean,
        perm_sd: sample_sd(&usable).unwrap_or(0.0),
        gap: observed - perm_mean,
        p_value: phipson_smyth(observed, &usable, cfg.metric.higher_is_better()),
        b: usable.len(),
        method,
        stratified: groups.is_some(),
        draws: cfg.return_perm.then_some(usable),
        messages,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationTest {
    pub column: String,
    pub repeat: usize,
    pub chi2: Option<f64>,
    pub df: usize,
    pub p_value: Option<f64>,
    pub cramers_v: Option<f64>,
    /// Rows are test folds, columns are levels.
    pub table: Vec<Vec<usize>>,
    pub folds: Vec<usize>,
    pub levels: Vec<String>,
    /// The column defines the split, so association is expected.
    pub by_design: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AssociationResult {
    pub tests: Vec<AssociationTest>,
}

/// Pearson chi-square, degrees of freedom and Cramér's V of a contingency
/// table after dropping empty rows and columns. `None` when fewer than two
/// rows or columns remain.
pub fn chi_square(table: &[Vec<usize>]) -> Option<(f64, usize, f64)> {
    let rows: Vec<&Vec<usize>> = table
        .iter()
        .filter(|r| r.iter().sum::<usize>() > 0)
        .collect();
    let nc = rows.first().map_or(0, |r| r.len());
    let cols: Vec<usize> = (0..nc).filter(|&j| rows.iter().any(|r| r[j] > 0)).collect();
    let (r, c) = (rows.len(), cols.len());
    if r < 2 || c < 2 {
        return None;
    }
    let n: usize = rows.iter().map(|r| r.iter().sum::<usize>()).sum();
    let rs: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().sum::<usize>() as f64)
        .collect();
    let cs: Vec<f64> = cols
        .iter()
        .map(|&j| rows.iter().map(|r| r[j]).sum::<usize>() as f64)
        .collect();
    let mut chi2 = 0.0;
    for (i, row) in rows.iter().enumerate() {
        for (jj, &j) in cols.iter().enumerate() {
            let e = rs[i] * cs[jj] / n as f64;
            chi2 += (row[j] as f64 - e).powi(2) / e;
        }
    }
    let mut v = (chi2 / (n as f64 * (r.min(c) - 1) as f64)).sqrt();
    if (v - 1.0).abs() < 1e-9 {
        v = 1.0;
    }
    Some((chi2, (r - 1) * (c - 1), v.clamp(0.0, 1.0)))
}

fn column_levels(ds: &Dataset, name: &str) -> Result<(Vec<Option<usize>>, Vec<String>)> {
    let col = ds.column(name)?;
    match &col.values {
        ColumnValues::Categorical { levels, codes } => Ok((
            codes.iter().map(|c| c.map(|c| c as usize)).collect(),
            levels.clone(),
        )),
        ColumnValues::Numeric { values } => {
            let mut distinct: Vec<f64> = values.iter().flatten().copied().collect();
            distinct.sort_by(|a, b| a.total_cmp(b));
            distinct.dedup();
            if distinct.len() <= 20 {
                let codes = values
                    .iter()
                    .map(|v| v.map(|x| distinct.iter().position(|d| *d == x).unwrap()))
                    .collect();
                Ok((codes, distinct.iter().map(|d| d.to_string()).collect()))
            } else {
                // quartile bins
                let s: Vec<f64> = distinct.clone();
                let q: Vec<f64> = [0.25, 0.5, 0.75]
                    .iter()
                    .map(|&p| crate::util::quantile_sorted(&s, p))
                    .collect();
                let codes = values
                    .iter()
                    .map(|v| v.map(|x| q.iter().filter(|&&c| x > c).count()))
                    .collect();
                Ok((
                    codes,
                    vec!["Q1".into(), "Q2".into(), "Q3".into(), "Q4".into()],
                ))
            }
        }
    }
}

/// Chi-square test of test-fold assignment against each named column, per
/// repeat.
pub fn fold_association(
    plan: &SplitPlan,
    ds: &Dataset,
    cols: &[String],
) -> Result<AssociationResult> {
    plan.validate_for(ds)?;
    let folds = plan.folds();
    let mut tests = Vec::new();
    for name in cols {
        let (codes, levels) = column_levels(ds, name)?;
        let by_design = plan.group_cols.contains(name);
        for r in 1..=plan.repeats {
            let rf: Vec<_> = folds.iter().filter(|f| f.repeat == r).collect();
            let mut table = vec![vec![0usize; levels.len()]; rf.len()];
            for (i, f) in rf.iter().enumerate() {
                for &row in &f.test {
                    if let Some(c) = codes[row] {
                        table[i][c] += 1;
                    }
                }
            }
            let res = chi_square(&table);
            let note = match (&res, by_design) {
                (None, _) => Some(
                    "association undefined: fewer than two levels or folds observed".to_string(),
                ),
                (Some(_), true) => Some("expected by design".to_string()),
                _ => None,
            };
            tests.push(AssociationTest {
                column: name.clone(),
                repeat: r,
                chi2: res.map(|t| t.0),
                df: res.map_or(0, |t| t.1),
                p_value: res.map(|t| chi2_sf(t.0, t.1 as f64)),
                cramers_v: res.map(|t| t.2),
                table,
                folds: rf.iter().map(|f| f.fold).collect(),
                levels: levels.clone(),
                by_design,
                note,
            });
        }
    }
    Ok(AssociationResult { tests })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub feature: String,
    pub auc: Option<f64>,
    pub score: f64,
    pub flagged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnivariateScan {
    pub threshold: f64,
    pub features: Vec<FeatureScore>,
    pub n_flagged: usize,
    /// Non-numeric features that were not scanned.
    #[serde(default)]
    pub unscanned: Vec<String>,
}

/// `|AUC − 0.5| × 2` of each column against a binary outcome, ignoring
/// missing cells.
pub fn target_scan_univariate(
    x: &DMatrix<f64>,
    names: &[String],
    y: &[f64],
    threshold: f64,
) -> Result<UnivariateScan> {
    if x.nrows() != y.len() {
        return Err(Error::invalid(
            "reference matrix and outcome differ in length",
        ));
    }
    let features: Vec<FeatureScore> = (0..x.ncols())
        .map(|j| {
            let (xs, ys): (Vec<f64>, Vec<f64>) = x
                .column(j)
                .iter()
                .zip(y)
                .filter(|(v, _)| !v.is_nan())
                .map(|(v, l)| (*v, *l))
                .unzip();
            let constant = xs.windows(2).all(|w| w[0] == w[1]);
            let a = if constant { None } else { auc(&xs, &ys) };
            let score = a.map_or(0.0, |a| (a - 0.5).abs() * 2.0);
            FeatureScore {
                feature: names[j].clone(),
                auc: a,
                score,
                flagged: score >= threshold,
                note: if constant {
                    Some("constant feature".into())
                } else if a.is_none() {
                    Some("one outcome class among non-missing rows".into())
                } else {
                    None
                },
            }
        })
        .collect();
    Ok(UnivariateScan {
        threshold,
        n_flagged: features.iter().filter(|f| f.flagged).count(),
        features,
        unscanned: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiScanConfig {
    pub min_features: usize,
    /// `None` means `min(10, p, n / 10)`.
    pub n_pc: Option<usize>,
    pub folds: usize,
    pub b: usize,
    pub seed: u64,
}

impl Default for MultiScanConfig {
    fn default() -> Self {
        MultiScanConfig {
            min_features: 5,
            n_pc: None,
            folds: 5,
            b: 200,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiScanResult {
    pub available: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub n_pc: usize,
    pub b: usize,
}

impl MultiScanResult {
    fn unavailable(reason: &str) -> Self {
        MultiScanResult {
            available: false,
            reason: Some(reason.into()),
            statistic: None,
            p_value: None,
            n_pc: 0,
            b: 0,
        }
    }
}

struct PcFold {
    train: Vec<usize>,
    test: Vec<usize>,
    z_train: DMatrix<f64>,
    z_test: DMatrix<f64>,
}

fn stratified_row_folds(y: &[f64], k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..y.len()).filter(|&i| y[i] == 1.0).collect();
    let mut neg: Vec<usize> = (0..y.len()).filter(|&i| y[i] != 1.0).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let mut id = vec![0; y.len()];
    for (t, &i) in pos.iter().chain(neg.iter()).enumerate() {
        id[i] = t % k;
    }
    id
}

fn pc_auc(folds: &[PcFold], y: &[f64]) -> f64 {
    let vals: Vec<f64> = folds
        .iter()
        .filter_map(|f| {
            let ytr = take(y, &f.train);
            let fit = fit_logistic_irls(&f.z_train, &ytr, 1e-6, 50, 1e-8).ok()?;
            let pred = fit.model.linear_predictor(&f.z_test);
            auc(&pred, &take(y, &f.test))
        })
        .collect();
    if vals.is_empty() {
        f64::NAN
    } else {
        mean(&vals)
    }
}

/// Cross-validated AUC of a logistic model on training-fold principal
/// components, with a label-permutation p-value. The component scores are
/// label-free, so they are computed once per fold and reused by every
/// permutation.
pub fn target_scan_multivariate(
    x: &DMatrix<f64>,
    y: &[f64],
    cfg: &MultiScanConfig,
) -> Result<MultiScanResult> {
    let (n, p) = x.shape();
    if n != y.len() {
        return Err(Error::invalid(
            "reference matrix and outcome differ in length",
        ));
    }
    if p < cfg.min_features {
        return Ok(MultiScanResult::unavailable(
            "too few predictors to build a meaningful principal-component model",
        ));
    }
    let n_pos = y.iter().filter(|&&v| v == 1.0).count();
    if n_pos < cfg.folds || n - n_pos < cfg.folds {
        return Ok(MultiScanResult::unavailable(
            "too few rows of each outcome class",
        ));
    }
    let n_pc = cfg.n_pc.unwrap_or(10.min(p).min(n / 10)).max(1);
    let id = stratified_row_folds(y, cfg.folds, &mut rng_from(cfg.seed, &[0x5C]));
    let mut folds = Vec::with_capacity(cfg.folds);
    for k in 0..cfg.folds {
        let train: Vec<usize> = (0..n).filter(|&i| id[i] != k).collect();
        let test: Vec<usize> = (0..n).filter(|&i| id[i] == k).collect();
        let xtr = select_rows(x, &train);
        let med: Vec<f64> = (0..p)
            .map(|j| {
                let m = median(xtr.column(j).as_slice());
                if m.is_nan() {
                    0.0
                } else {
                    m
                }
            })
            .collect();
        let fill = |m: DMatrix<f64>| {
            DMatrix::from_fn(m.nrows(), p, |i, j| {
                if m[(i, j)].is_nan() {
                    med[j]
                } else {
                    m[(i, j)]
                }
            })
        };
        let xtr = fill(xtr);
        let xte = fill(select_rows(x, &test));
        let centers: Vec<f64> = (0..p).map(|j| xtr.column(j).mean()).collect();
        let xc = DMatrix::from_fn(xtr.nrows(), p, |i, j| xtr[(i, j)] - centers[j]);
        let axes = principal_axes(&xc, n_pc);
        let project = |m: &DMatrix<f64>| {
            DMatrix::from_fn(m.nrows(), axes.len(), |i, a| {
                (0..p).map(|j| (m[(i, j)] - centers[j]) * axes[a][j]).sum()
            })
        };
        folds.push(PcFold {
            z_train: project(&xtr),
            z_test: project(&xte),
            train,
            test,
        });
    }
    let observed = pc_auc(&folds, y);
    if !observed.is_finite() {
        return Ok(MultiScanResult::unavailable(
            "the principal-component model could not be fitted",
        ));
    }
    let draws: Vec<f64> = (0..cfg.b)
        .into_par_iter()
        .map(|d| {
            let perm = label_permutation(n, None, &mut rng_from(cfg.seed, &[0x5D, d as u64]));
            pc_auc(&folds, &take(y, &perm))
        })
        .filter(|v| v.is_finite())
        .collect();
    Ok(MultiScanResult {
        available: true,
        reason: None,
        statistic: Some(observed),
        p_value: Some(phipson_smyth(observed, &draws, true)),
        n_pc,
        b: draws.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuplicatePair {
    pub row_a: usize,
    pub row_b: usize,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuplicateResult {
    pub threshold: f64,
    pub pairs: Vec<DuplicatePair>,
    pub cross_fold_pairs: Vec<DuplicatePair>,
    /// Rows with zero norm after standardization, left out of pairing.
    #[serde(default)]
    pub excluded_rows: Vec<usize>,
}

/// Row pairs with cosine similarity at least `threshold`, computed on
/// globally z-scored columns with missing cells at the column mean. Pairs
/// that fall on opposite sides of a train/test split in some fold are
/// listed once in `cross_fold_pairs`.
pub fn duplicate_scan(
    x: &DMatrix<f64>,
    plan: Option<&SplitPlan>,
    threshold: f64,
) -> Result<DuplicateResult> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid("duplicate threshold must lie in (0, 1]"));
    }
    let (n, p) = x.shape();
    let mut z = DMatrix::<f64>::zeros(n, p);
    for j in 0..p {
        let vals: Vec<f64> = x
            .column(j)
            .iter()
            .copied()
            .filter(|v| !v.is_nan())
            .collect();
        if vals.len() < 2 {
            continue;
        }
        let m = mean(&vals);
        let sd = sample_sd(&vals).unwrap_or(0.0);
        if sd <= 0.0 {
            continue;
        }
        for i in 0..n {
            let v = x[(i, j)];
            z[(i, j)] = if v.is_nan() { 0.0 } else { (v - m) / sd };
        }
    }
    let mut excluded = Vec::new();
    for i in 0..n {
        let norm = z.row(i).norm();
        if norm > 0.0 {
            let mut row = z.row_mut(i);
            row /= norm;
        } else {
            excluded.push(i);
        }
    }
    let keep: Vec<usize> = (0..n).filter(|i| !excluded.contains(i)).collect();
    let zk = select_rows(&z, &keep);
    const BLOCK: usize = 512;
    let mut pairs: Vec<DuplicatePair> = (0..keep.len().div_ceil(BLOCK))
        .into_par_iter()
        .flat_map_iter(|b| {
            let lo = b * BLOCK;
            let hi = ((b + 1) * BLOCK).min(keep.len());
            let rows: Vec<usize> = (lo..hi).collect();
            let block = select_rows(&zk, &rows);
            let g = &block * zk.transpose();
            let mut out = Vec::new();
            for (bi, a) in (lo..hi).enumerate() {
                for c in a + 1..keep.len() {
                    let s = g[(bi, c)].min(1.0);
                    if s >= threshold {
                        let (ra, rb) = (keep[a], keep[c]);
                        let exact = x
                            .row(ra)
                            .iter()
                            .zip(x.row(rb).iter())
                            .all(|(u, v)| u == v || (u.is_nan() && v.is_nan()));
                        out.push(DuplicatePair {
                            row_a: ra.min(rb),
                            row_b: ra.max(rb),
                            similarity: if exact { 1.0 } else { s },
                        });
                    }
                }
            }
            out
        })
        .collect();
    pairs.sort_by(|a, b| (a.row_a, a.row_b).cmp(&(b.row_a, b.row_b)));
    let cross_fold_pairs = match plan {
        None => Vec::new(),
        Some(plan) => {
            let folds = plan.folds();
            let sides: Vec<Vec<u8>> = folds
                .iter()
                .map(|f| {
                    let mut s = vec![0u8; n];
                    for &r in &f.train {
                        s[r] = 1;
                    }
                    for &r in &f.test {
                        s[r] = 2;
                    }
                    s
                })
                .collect();
            pairs
                .iter()
                .filter(|pr| sides.iter().any(|s| s[pr.row_a] * s[pr.row_b] == 2))
                .cloned()
                .collect()
        }
    };
    Ok(DuplicateResult {
        threshold,
        pairs,
        cross_fold_pairs,
        excluded_rows: excluded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismClass {
    SubjectOverlap,
    BatchConfounded,
    PreprocessingLeak,
    TargetLeakage,
}

impl MechanismClass {
    pub fn label(&self) -> &'static str {
        match self {
            MechanismClass::SubjectOverlap => "subject_overlap",
            MechanismClass::BatchConfounded => "batch_confounded",
            MechanismClass::PreprocessingLeak => "preprocessing_leak",
            MechanismClass::TargetLeakage => "target_leakage",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismRow {
    pub mechanism_class: MechanismClass,
    pub flagged: bool,
    pub evidence: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismAssessment {
    pub rows: Vec<MechanismRow>,
}

impl MechanismAssessment {
    pub fn flagged(&self, class: MechanismClass) -> bool {
        self.rows
            .iter()
            .any(|r| r.mechanism_class == class && r.flagged)
    }

    pub fn any_flagged(&self) -> bool {
        self.rows.iter().any(|r| r.flagged)
    }
}

/// Inputs to the mechanism rollup.
#[derive(Clone, Debug)]
pub struct MechanismInputs<'a> {
    pub permutation: &'a PermGapResult,
    pub association: Option<&'a AssociationResult>,
    pub univariate: Option<&'a UnivariateScan>,
    pub multivariate: Option<&'a MultiScanResult>,
    pub plan_mode: &'a str,
    /// The plan splits rows individually while a subject column repeats.
    pub rowwise_with_repeated_subjects: bool,
    pub group_straddles: usize,
    pub guarded: bool,
    pub alpha: f64,
}

pub fn assess_mechanisms(inp: &MechanismInputs) -> MechanismAssessment {
    let mut rows = Vec::new();

    let (flag, ev) = if inp.rowwise_with_repeated_subjects {
        (
            true,
            "row-wise splits while subjects contribute several rows".to_string(),
        )
    } else if inp.group_straddles > 0 {
        (
            true,
            format!("{} group(s) straddle train and test", inp.group_straddles),
        )
    } else {
        (
            false,
            format!("OK: {} splits", inp.plan_mode.replace("[", " [")),
        )
    };
    rows.push(MechanismRow {
        mechanism_class: MechanismClass::SubjectOverlap,
        flagged: flag,
        evidence: ev,
    });

    let tested: Vec<&AssociationTest> = inp
        .association
        .map(|a| {
            a.tests
                .iter()
                .filter(|t| !t.by_design && t.p_value.is_some())
                .collect()
        })
        .unwrap_or_default();
    let hits: Vec<&&AssociationTest> = tested
        .iter()
        .filter(|t| t.p_value.unwrap() < inp.alpha)
        .collect();
    let (flag, ev) = if let Some(t) = hits.first() {
        (
            true,
            format!(
                "{} Chi^2 p = {:.4} < {}",
                t.column,
                t.p_value.unwrap(),
                inp.alpha
            ),
        )
    } else if tested.is_empty() {
        (false, "OK: no batch/study columns tested".to_string())
    } else {
        let names: BTreeSet<&str> = tested.iter().map(|t| t.column.as_str()).collect();
        (
            false,
            format!(
                "OK: {} Chi^2 not significant",
                names.into_iter().collect::<Vec<_>>().join("/")
            ),
        )
    };
    rows.push(MechanismRow {
        mechanism_class: MechanismClass::BatchConfounded,
        flagged: flag,
        evidence: ev,
    });

    rows.push(MechanismRow {
        mechanism_class: MechanismClass::PreprocessingLeak,
        flagged: !inp.guarded,
        evidence: if inp.guarded {
            "OK: guarded preprocessing".into()
        } else {
            "predictions were produced outside the guarded pipeline".into()
        },
    });

    let n_uni = inp.univariate.map_or(0, |u| u.n_flagged);
    let multi_p = inp.multivariate.and_then(|m| m.p_value);
    let (flag, ev) = if n_uni > 0 {
        (
            true,
            format!("{n_uni} feature(s) flagged by the univariate scan"),
        )
    } else if let Some(p) = multi_p.filter(|&p| p < inp.alpha) {
        (
            true,
            format!("multivariate scan p = {p:.4} < {}", inp.alpha),
        )
    } else {
        (false, "OK: no features flagged".to_string())
    };
    rows.push(MechanismRow {
        mechanism_class: MechanismClass::TargetLeakage,
        flagged: flag,
        evidence: ev,
    });
    MechanismAssessment { rows }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub permutation: PermutationConfig,
    /// Metadata columns tested for association with the fold assignment.
    pub batch_cols: Vec<String>,
    /// Columns of the reference matrix; `None` uses the numeric predictors.
    pub xref_cols: Option<Vec<String>>,
    pub target_threshold: f64,
    pub dup_threshold: f64,
    pub multivariate: Option<MultiScanConfig>,
    /// Significance level for the association and multivariate flags.
    pub mechanism_alpha: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            permutation: PermutationConfig::default(),
            batch_cols: Vec::new(),
            xref_cols: None,
            target_threshold: 0.9,
            dup_threshold: 0.995,
            multivariate: Some(MultiScanConfig::default()),
            mechanism_alpha: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub task: TaskKind,
    pub outcome: String,
    pub plan_mode: String,
    pub plan_hash: String,
    pub v: usize,
    pub repeats: usize,
    pub permutation: PermGapResult,
    pub association: Option<AssociationResult>,
    pub univariate: Option<UnivariateScan>,
    pub multivariate: Option<MultiScanResult>,
    pub duplicates: Option<DuplicateResult>,
    pub mechanisms: MechanismAssessment,
    pub interpretation: String,
    pub config: AuditConfig,
    #[serde(default)]
    pub messages: Vec<String>,
}

impl AuditReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Numeric reference matrix from dataset columns; non-numeric names are
/// returned separately.
pub fn reference_matrix(
    ds: &Dataset,
    cols: &[String],
) -> Result<(DMatrix<f64>, Vec<String>, Vec<String>)> {
    let mut numeric = Vec::new();
    let mut other = Vec::new();
    for c in cols {
        if ds.column(c)?.is_numeric() {
            numeric.push(c.clone());
        } else {
            other.push(c.clone());
        }
    }
    let x = crate::data::column_matrix(ds, &numeric)?;
    Ok((x, numeric, other))
}

fn interpret(perm: &PermGapResult, mech: &MechanismAssessment) -> String {
    let signal = if perm.p_value < 0.05 && perm.gap >= 0.1 {
        "Strong non-random signal."
    } else if perm.gap > 0.02 {
        "Modest non-random signal."
    } else {
        "No signal beyond chance."
    };
    let flagged: Vec<&str> = mech
        .rows
        .iter()
        .filter(|r| r.flagged)
        .map(|r| r.mechanism_class.label())
        .collect();
    if flagged.is_empty() {
        format!("{signal} No leakage indicators flagged.")
    } else {
        format!("{signal} Flagged: {}.", flagged.join(", "))
    }
}

/// Run every audit component. Components that need the dataset or the
/// plan are skipped when those are not supplied.
pub fn audit(
    fr: &FitResult,
    ds: Option<&Dataset>,
    plan: Option<&SplitPlan>,
    cfg: &AuditConfig,
) -> Result<AuditReport> {
    let permutation = perm_gap(fr, &cfg.permutation)?;
    let mut messages = permutation.messages.clone();
    if let Some(plan) = plan {
        if plan.hash != fr.plan_hash {
            return Err(Error::invalid(format!(
                "plan {} does not match the plan {} used by the fit",
                plan.hash, fr.plan_hash
            )));
        }
    }
    if let Some(ds) = ds {
        if ds.n_rows() != fr.n_rows {
            return Err(Error::invalid(format!(
                "dataset has {} rows, the fit used {}",
                ds.n_rows(),
                fr.n_rows
            )));
        }
    }
    let association = match (plan, ds) {
        (Some(p), Some(d)) if !cfg.batch_cols.is_empty() => {
            Some(fold_association(p, d, &cfg.batch_cols)?)
        }
        _ => None,
    };
    let y = &fr.outcome_values;
    let mut univariate = None;
    let mut multivariate = None;
    let mut duplicates = None;
    if let Some(ds) = ds {
        let cols = cfg
            .xref_cols
            .clone()
            .unwrap_or_else(|| ds.predictors().to_vec());
        let (x, names, other) = reference_matrix(ds, &cols)?;
        if fr.task == TaskKind::BinaryClassification {
            let mut u = target_scan_univariate(&x, &names, y, cfg.target_threshold)?;
            u.unscanned = other;
            univariate = Some(u);
            multivariate = match &cfg.multivariate {
                Some(mc) => Some(target_scan_multivariate(&x, y, mc)?),
                None => None,
            };
        } else {
            messages.push("target scans need a binary outcome; skipped".into());
        }
        if names.is_empty() {
            messages.push("no numeric reference columns; duplicate scan skipped".into());
        } else {
            duplicates = Some(duplicate_scan(&x, plan, cfg.dup_threshold)?);
        }
    }
    let mut rowwise_with_repeated_subjects = false;
    let mut straddles = 0;
    if let (Some(ds), Some(plan)) = (ds, plan) {
        if let Some(subj) = &ds.roles().subject {
            let (codes, labels) = ds.column(subj)?.group_codes();
            let repeated = codes.len() > labels.len();
            rowwise_with_repeated_subjects = plan.mode == SplitMode::RowWise && repeated;
        }
        straddles = overlap_check(plan, ds)?.group_straddles.len();
    } else if fr.plan_mode == SplitMode::RowWise.label() {
        messages
            .push("row-wise plan audited without the dataset; subject overlap not checked".into());
    }
    let mechanisms = assess_mechanisms(&MechanismInputs {
        permutation: &permutation,
        association: association.as_ref(),
        univariate: univariate.as_ref(),
        multivariate: multivariate.as_ref(),
        plan_mode: &fr.plan_mode,
        rowwise_with_repeated_subjects,
        group_straddles: straddles,
        guarded: fr.guarded,
        alpha: cfg.mechanism_alpha,
    });
    Ok(AuditReport {
        schema_version: crate::SCHEMA_VERSION,
        task: fr.task,
        outcome: fr.outcome.clone(),
        plan_mode: fr.plan_mode.clone(),
        plan_hash: fr.plan_hash.clone(),
        v: fr.v,
        repeats: fr.repeats,
        interpretation: interpret(&permutation, &mechanisms),
        permutation,
        association,
        univariate,
        multivariate,
        duplicates,
        mechanisms,
        config: cfg.clone(),
        messages,
    })
}
