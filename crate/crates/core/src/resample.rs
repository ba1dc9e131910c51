//! Cross-validated fitting with fold-local preprocessing, repeat-level
//! aggregation, and nested penalty tuning.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_csv, CsvOptions, Dataset, RoleMap, TaskKind};
use crate::error::{Error, Result};
use crate::learners::{
    fit_learner, lambda_max, lambda_sequence, FittedModel, LambdaChoice, LearnerKind, LearnerSpec,
};
use crate::linalg::take;
use crate::metrics::{compute_metric, metric_suite, MetricName, MetricValue};
use crate::preprocess::{fit_transform, Encoder, FittedPreproc, PreprocSpec};
use crate::split::{group_ids, Fold, SplitPlan};
use crate::util::{derive_seed, mean, median, sample_sd, t_critical};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldStatus {
    Success,
    Skipped,
    Failed,
}

/// What was fitted in one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub learner: String,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub feature_names: Vec<String>,
    pub lambda: Option<f64>,
    pub n_nonzero: usize,
    pub converged: bool,
}

impl From<&FittedModel> for ModelSummary {
    fn from(m: &FittedModel) -> Self {
        ModelSummary {
            learner: m.learner.clone(),
            intercept: m.intercept,
            coefficients: m.coefficients.clone(),
            feature_names: m.feature_names.clone(),
            lambda: m.lambda,
            n_nonzero: m.coefficients.iter().filter(|b| **b != 0.0).count(),
            converged: m.converged,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub repeat: usize,
    pub fold: usize,
    pub status: FoldStatus,
    pub metrics: Vec<MetricValue>,
    /// Test rows, aligned with `predictions`.
    pub test_rows: Vec<usize>,
    pub predictions: Vec<f64>,
    pub n_train: usize,
    pub features_final: usize,
    pub preproc_hash: Option<String>,
    pub model: Option<ModelSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl FoldRecord {
    pub fn n_test(&self) -> usize {
        self.test_rows.len()
    }

    pub fn metric(&self, name: MetricName) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.name == name)
            .map(|m| m.value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: MetricName,
    pub mean: f64,
    pub sd: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub n_folds: usize,
}

/// Everything needed to rerun the fit, for example under permuted labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefitPayload {
    pub data_hash: String,
    /// Absent when only a reference to the data file is kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<Dataset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<DataSource>,
    pub config: FitConfig,
    pub plan: SplitPlan,
}

/// Where a dataset can be reloaded from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub path: String,
    pub roles: RoleMap,
    pub options: CsvOptions,
}

impl RefitPayload {
    /// Keep only the file reference instead of the data itself.
    pub fn detach(&mut self, source: DataSource) {
        self.dataset = None;
        self.source = Some(source);
    }

    /// Reload referenced data, refusing a file whose content changed.
    pub fn attach(&mut self) -> Result<()> {
        if self.dataset.is_some() {
            return Ok(());
        }
        let Some(src) = &self.source else {
            return Ok(());
        };
        let ds = load_csv(&src.path, src.roles.clone(), &src.options)?;
        let hash = ds.content_hash();
        if hash != self.data_hash {
            return Err(Error::invalid(format!(
                "{} has changed since the fit (data hash {hash}, fit recorded {})",
                src.path, self.data_hash
            )));
        }
        self.dataset = Some(ds);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub schema_version: u32,
    pub task: TaskKind,
    pub outcome: String,
    pub positive_class: Option<String>,
    pub learner: String,
    pub preprocess: String,
    pub metrics: Vec<MetricName>,
    pub folds: Vec<FoldRecord>,
    pub aggregate: Vec<MetricSummary>,
    pub plan_hash: String,
    pub plan_mode: String,
    pub v: usize,
    pub repeats: usize,
    pub n_rows: usize,
    pub data_hash: String,
    pub seed: u64,
    /// Outcome per row (1/0 for binary tasks).
    pub outcome_values: Vec<f64>,
    /// Dependence-unit id per row for grouped plans.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<u32>>,
    /// False when predictions were imported rather than produced by the
    /// fold-local preprocessing pipeline.
    pub guarded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refit: Option<RefitPayload>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn summary(&self, name: MetricName) -> Option<&MetricSummary> {
        self.aggregate.iter().find(|s| s.name == name)
    }

    pub fn status_counts(&self) -> (usize, usize, usize) {
        let c = |s| self.folds.iter().filter(|f| f.status == s).count();
        (
            c(FoldStatus::Success),
            c(FoldStatus::Skipped),
            c(FoldStatus::Failed),
        )
    }

    /// Mean over folds of one metric, using only folds where it is defined.
    pub fn fold_metric_values(&self, name: MetricName) -> Vec<f64> {
        self.folds
            .iter()
            .filter(|f| f.status != FoldStatus::Failed)
            .filter_map(|f| f.metric(name))
            .collect()
    }

    pub fn has_predictions(&self) -> bool {
        self.folds
            .iter()
            .filter(|f| f.status != FoldStatus::Failed)
            .any(|f| f.predictions.len() == f.test_rows.len() && !f.test_rows.is_empty())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<FitResult> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub learner: LearnerSpec,
    pub preprocess: PreprocSpec,
    /// Empty means the task defaults.
    #[serde(default)]
    pub metrics: Vec<MetricName>,
    pub seed: u64,
    #[serde(default)]
    pub store_refit_data: bool,
    #[serde(default)]
    pub threshold: Option<f64>,
}

impl FitConfig {
    pub fn new(learner: LearnerSpec, preprocess: PreprocSpec) -> Self {
        FitConfig {
            learner,
            preprocess,
            metrics: Vec::new(),
            seed: 1,
            store_refit_data: true,
            threshold: None,
        }
    }

    pub fn metrics(mut self, m: Vec<MetricName>) -> Self {
        self.metrics = m;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn store_refit_data(mut self, on: bool) -> Self {
        self.store_refit_data = on;
        self
    }

    fn metric_names(&self, task: TaskKind) -> Result<Vec<MetricName>> {
        let names = if self.metrics.is_empty() {
            MetricName::defaults(task)
        } else {
            self.metrics.clone()
        };
        for m in &names {
            if !m.valid_for(task) {
                return Err(Error::invalid(format!(
                    "metric `{m}` is not available for {} tasks",
                    task.label()
                )));
            }
        }
        Ok(names)
    }
}

/// Fitted state of one training fold.
#[derive(Clone, Debug)]
pub struct FoldFit {
    pub encoder: Encoder,
    pub preproc: FittedPreproc,
    pub model: FittedModel,
    pub warnings: Vec<String>,
}

/// Estimate encoding, preprocessing and model on `train` rows only.
pub fn fit_fold(
    ds: &Dataset,
    train: &[usize],
    learner: &LearnerSpec,
    preprocess: &PreprocSpec,
    seed: u64,
) -> Result<FoldFit> {
    let y = ds.outcome_vector();
    let ytr = take(&y, train);
    let encoder = Encoder::fit(ds, train)?;
    let (xtr, _) = encoder.transform(ds, train)?;
    let (preproc, xtr) = fit_transform(
        preprocess,
        &xtr,
        &ytr,
        &encoder.output_names,
        ds.task(),
        seed,
    )?;
    let model = fit_learner(learner, &xtr, &ytr, ds.task(), &preproc.output_names, seed)?;
    let mut warnings = preproc.warnings.clone();
    warnings.extend(model.warnings.iter().cloned());
    Ok(FoldFit {
        encoder,
        preproc,
        model,
        warnings,
    })
}

impl FoldFit {
    /// Predictions for `rows`, plus a count of unseen categorical levels.
    pub fn predict(&self, ds: &Dataset, rows: &[usize]) -> Result<(Vec<f64>, usize)> {
        let (x, unseen) = self.encoder.transform(ds, rows)?;
        let x = self.preproc.apply(&x)?;
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Fit(
                "missing values reach the model; add impute=median".into(),
            ));
        }
        Ok((self.model.predict(&x), unseen))
    }
}

fn run_fold(
    ds: &Dataset,
    fold: &Fold,
    cfg: &FitConfig,
    names: &[MetricName],
    y: &[f64],
) -> FoldRecord {
    let mut rec = FoldRecord {
        repeat: fold.repeat,
        fold: fold.fold,
        status: FoldStatus::Failed,
        metrics: Vec::new(),
        test_rows: fold.test.clone(),
        predictions: Vec::new(),
        n_train: fold.train.len(),
        features_final: 0,
        preproc_hash: None,
        model: None,
        message: None,
        warnings: Vec::new(),
    };
    if fold.skipped || fold.train.is_empty() || fold.test.is_empty() {
        rec.status = FoldStatus::Skipped;
        rec.message = Some("no training or test rows".into());
        return rec;
    }
    let seed = derive_seed(cfg.seed, &[fold.repeat as u64, fold.fold as u64]);
    let fitted = fit_fold(ds, &fold.train, &cfg.learner, &cfg.preprocess, seed)
        .and_then(|ff| ff.predict(ds, &fold.test).map(|p| (ff, p)));
    let (ff, (pred, unseen)) = match fitted {
        Ok(v) => v,
        Err(e) => {
            rec.message = Some(e.to_string());
            return rec;
        }
    };
    rec.warnings = ff.warnings;
    if unseen > 0 {
        rec.warnings.push(format!(
            "{unseen} test cell(s) had a category level unseen in training"
        ));
    }
    rec.features_final = ff.preproc.n_features_out();
    rec.preproc_hash = Some(ff.preproc.hash());
    rec.model = Some(ModelSummary::from(&ff.model));
    let yte = take(y, &fold.test);
    match metric_suite(ds.task(), names, &pred, &yte, cfg.threshold) {
        Ok(m) => {
            rec.status = if m.len() == names.len() {
                FoldStatus::Success
            } else {
                rec.message =
                    Some("a metric is undefined on this test fold (single outcome class)".into());
                FoldStatus::Skipped
            };
            rec.metrics = m;
        }
        Err(e) => rec.message = Some(e.to_string()),
    }
    rec.predictions = pred;
    rec
}

/// Two-sided t interval `mean ± t(0.975, F−1)·sd/√F`, clipped to `range`.
pub fn t_interval(mean: f64, sd: f64, f: usize, range: (f64, f64)) -> Option<(f64, f64)> {
    if f < 2 || !sd.is_finite() {
        return None;
    }
    let half = t_critical(0.95, (f - 1) as f64) * sd / (f as f64).sqrt();
    Some(((mean - half).max(range.0), (mean + half).min(range.1)))
}

pub fn summarize_metric(name: MetricName, values: &[f64]) -> Option<MetricSummary> {
    if values.is_empty() {
        return None;
    }
    let m = mean(values);
    let sd = sample_sd(values);
    let ci = sd.and_then(|s| t_interval(m, s, values.len(), name.range()));
    Some(MetricSummary {
        name,
        mean: m,
        sd,
        ci_lo: ci.map(|c| c.0),
        ci_hi: ci.map(|c| c.1),
        n_folds: values.len(),
    })
}

fn aggregate(folds: &[FoldRecord], names: &[MetricName]) -> Vec<MetricSummary> {
    names
        .iter()
        .filter_map(|&n| {
            let vals: Vec<f64> = folds
                .iter()
                .filter(|f| f.status != FoldStatus::Failed)
                .filter_map(|f| f.metric(n))
                .collect();
            summarize_metric(n, &vals)
        })
        .collect()
}

/// Cross-validate `cfg.learner` with fold-local preprocessing over every fold
/// of `plan`. Folds run in parallel; each draws its randomness from
/// `(seed, repeat, fold)`.
pub fn fit_resample(ds: &Dataset, plan: &SplitPlan, cfg: &FitConfig) -> Result<FitResult> {
    plan.validate_for(ds)?;
    cfg.learner.validate()?;
    if !cfg.learner.supports(ds.task()) {
        return Err(Error::invalid(format!(
            "learner `{}` does not support {} tasks",
            cfg.learner.label(),
            ds.task().label()
        )));
    }
    let names = cfg.metric_names(ds.task())?;
    let y = ds.outcome_vector();
    let folds = plan.folds();
    let records: Vec<FoldRecord> = folds
        .par_iter()
        .map(|f| run_fold(ds, f, cfg, &names, &y))
        .collect();
    if records.iter().all(|r| r.status == FoldStatus::Failed) {
        let why = records
            .iter()
            .find_map(|r| r.message.clone())
            .unwrap_or_default();
        return Err(Error::Fit(format!("every fold failed: {why}")));
    }
    let mut warnings = Vec::new();
    let failed = records
        .iter()
        .filter(|r| r.status == FoldStatus::Failed)
        .count();
    if failed > 0 {
        warnings.push(format!(
            "{failed} fold(s) failed and were excluded from aggregates"
        ));
    }
    let groups = if plan.group_cols.is_empty() {
        None
    } else {
        Some(group_ids(ds, &plan.group_cols)?)
    };
    let refit = cfg.store_refit_data.then(|| RefitPayload {
        data_hash: ds.content_hash(),
        dataset: Some(ds.clone()),
        source: None,
        config: cfg.clone(),
        plan: plan.clone(),
    });
    Ok(FitResult {
        schema_version: crate::SCHEMA_VERSION,
        task: ds.task(),
        outcome: ds.roles().outcome.clone(),
        positive_class: ds.roles().positive_class.clone(),
        learner: cfg.learner.label(),
        preprocess: cfg.preprocess.label(),
        aggregate: aggregate(&records, &names),
        metrics: names,
        folds: records,
        plan_hash: plan.hash.clone(),
        plan_mode: plan.mode.label(),
        v: plan.v,
        repeats: plan.repeats,
        n_rows: ds.n_rows(),
        data_hash: plan.data_hash.clone(),
        seed: cfg.seed,
        outcome_values: y,
        groups,
        guarded: true,
        refit,
        warnings,
    })
}

/// Fold-level predictions produced outside this crate, for auditing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalFold {
    pub repeat: usize,
    pub fold: usize,
    pub test_rows: Vec<usize>,
    pub predictions: Vec<f64>,
}

/// Wrap externally computed out-of-fold predictions in a [`FitResult`]. The
/// result is marked as not guarded.
pub fn fit_result_from_predictions(
    ds: &Dataset,
    plan: &SplitPlan,
    folds: Vec<ExternalFold>,
    metrics: &[MetricName],
    seed: u64,
) -> Result<FitResult> {
    plan.validate_for(ds)?;
    let names = if metrics.is_empty() {
        MetricName::defaults(ds.task())
    } else {
        metrics.to_vec()
    };
    let y = ds.outcome_vector();
    let mut records = Vec::new();
    for f in folds {
        if f.test_rows.len() != f.predictions.len() {
            return Err(Error::invalid(format!(
                "fold {}/{}: {} predictions for {} rows",
                f.repeat,
                f.fold,
                f.predictions.len(),
                f.test_rows.len()
            )));
        }
        if f.test_rows.iter().any(|&r| r >= ds.n_rows()) {
            return Err(Error::invalid("prediction row index out of range"));
        }
        let yte = take(&y, &f.test_rows);
        let m = metric_suite(ds.task(), &names, &f.predictions, &yte, None)?;
        records.push(FoldRecord {
            repeat: f.repeat,
            fold: f.fold,
            status: if m.len() == names.len() {
                FoldStatus::Success
            } else {
                FoldStatus::Skipped
            },
            metrics: m,
            test_rows: f.test_rows,
            predictions: f.predictions,
            n_train: 0,
            features_final: 0,
            preproc_hash: None,
            model: None,
            message: None,
            warnings: Vec::new(),
        });
    }
    let groups = if plan.group_cols.is_empty() {
        None
    } else {
        Some(group_ids(ds, &plan.group_cols)?)
    };
    Ok(FitResult {
        schema_version: crate::SCHEMA_VERSION,
        task: ds.task(),
        outcome: ds.roles().outcome.clone(),
        positive_class: ds.roles().positive_class.clone(),
        learner: "external".into(),
        preprocess: "external".into(),
        aggregate: aggregate(&records, &names),
        metrics: names,
        folds: records,
        plan_hash: plan.hash.clone(),
        plan_mode: plan.mode.label(),
        v: plan.v,
        repeats: plan.repeats,
        n_rows: ds.n_rows(),
        data_hash: plan.data_hash.clone(),
        seed,
        outcome_values: y,
        groups,
        guarded: false,
        refit: None,
        warnings: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub repeat: usize,
    pub mean: f64,
    pub n_test: usize,
    pub n_folds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatLevel {
    pub metric: MetricName,
    pub repeats: Vec<RepeatSummary>,
    /// Repeats without any usable fold.
    pub dropped: Vec<usize>,
}

/// Test-size-weighted mean of the metric over the usable folds of each
/// repeat.
pub fn aggregate_repeats(fr: &FitResult, metric: MetricName) -> Result<RepeatLevel> {
    if !fr.metrics.contains(&metric) {
        return Err(Error::invalid(format!(
            "metric `{metric}` was not computed for this fit"
        )));
    }
    let mut acc: BTreeMap<usize, (f64, usize, usize)> = BTreeMap::new();
    for r in 1..=fr.repeats {
        acc.insert(r, (0.0, 0, 0));
    }
    for f in &fr.folds {
        if f.status == FoldStatus::Failed {
            continue;
        }
        if let Some(v) = f.metric(metric) {
            let e = acc.entry(f.repeat).or_insert((0.0, 0, 0));
            e.0 += v * f.n_test() as f64;
            e.1 += f.n_test();
            e.2 += 1;
        }
    }
    let mut repeats = Vec::new();
    let mut dropped = Vec::new();
    for (r, (s, n, k)) in acc {
        if n == 0 {
            dropped.push(r);
        } else {
            repeats.push(RepeatSummary {
                repeat: r,
                mean: s / n as f64,
                n_test: n,
                n_folds: k,
            });
        }
    }
    Ok(RepeatLevel {
        metric,
        repeats,
        dropped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Best,
    OneStdErr,
}

impl Selection {
    pub fn parse(s: &str) -> Result<Selection> {
        match s {
            "best" => Ok(Selection::Best),
            "one_std_err" | "1se" | "one_se" => Ok(Selection::OneStdErr),
            _ => Err(Error::invalid(format!("unknown selection rule `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    /// Log-spaced penalties from the outer training fold's `lambda_max`
    /// down three decades.
    Count(usize),
    Explicit(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub learner: LearnerSpec,
    pub preprocess: PreprocSpec,
    pub grid: Grid,
    /// The first metric drives selection.
    pub metrics: Vec<MetricName>,
    pub selection: Selection,
    pub refit: bool,
    pub seed: u64,
}

/// Inner-CV table and the penalty chosen for one outer fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSelection {
    pub repeat: usize,
    pub fold: usize,
    pub candidates: Vec<f64>,
    pub inner_mean: Vec<f64>,
    pub inner_se: Vec<f64>,
    pub best_index: usize,
    pub selected_index: usize,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub outer: FitResult,
    pub selections: Vec<FoldSelection>,
    pub selection: Selection,
    pub metric: MetricName,
    pub final_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_model: Option<FittedModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_preproc: Option<FittedPreproc>,
}

fn with_lambda(spec: &LearnerSpec, lambda: f64) -> LearnerSpec {
    let mut s = spec.clone();
    match &mut s.kind {
        LearnerKind::ElasticNet { lambda: l, .. } => *l = LambdaChoice::Fixed(lambda),
        LearnerKind::LinearRidge { lambda: l } => *l = lambda,
        _ => {}
    }
    s
}

/// Choose an index from inner means and standard errors. Candidates are
/// ordered from most to least regularized.
pub fn select_candidate(
    means: &[f64],
    ses: &[f64],
    higher_is_better: bool,
    rule: Selection,
) -> Option<(usize, usize)> {
    let sign = if higher_is_better { 1.0 } else { -1.0 };
    let mut best: Option<usize> = None;
    for (i, m) in means.iter().enumerate() {
        if m.is_nan() {
            continue;
        }
        if best.is_none_or(|b| sign * m > sign * means[b]) {
            best = Some(i);
        }
    }
    let best = best?;
    let chosen = match rule {
        Selection::Best => best,
        Selection::OneStdErr => {
            let se = if ses[best].is_finite() {
                ses[best]
            } else {
                0.0
            };
            let bar = sign * means[best] - se;
            (0..means.len())
                .find(|&i| !means[i].is_nan() && sign * means[i] >= bar)
                .unwrap_or(best)
        }
    };
    Some((best, chosen))
}

fn candidates_for(ds: &Dataset, rows: &[usize], cfg: &TuneConfig, seed: u64) -> Result<Vec<f64>> {
    let mut c = match &cfg.grid {
        Grid::Explicit(v) => {
            if v.is_empty() {
                return Err(Error::invalid("empty tuning grid"));
            }
            v.clone()
        }
        Grid::Count(0) => return Err(Error::invalid("empty tuning grid")),
        Grid::Count(g) => {
            let alpha = match &cfg.learner.kind {
                LearnerKind::ElasticNet { alpha, .. } => *alpha,
                _ => {
                    return Err(Error::invalid(
                        "a counted grid needs an elastic-net learner",
                    ))
                }
            };
            let y = ds.outcome_vector();
            let ytr = take(&y, rows);
            let enc = Encoder::fit(ds, rows)?;
            let (x, _) = enc.transform(ds, rows)?;
            let (_, x) = fit_transform(
                &cfg.preprocess,
                &x,
                &ytr,
                &enc.output_names,
                ds.task(),
                seed,
            )?;
            let lmax = lambda_max(&x, &ytr, alpha);
            if lmax <= 0.0 || !lmax.is_finite() {
                vec![1.0]
            } else {
                lambda_sequence(lmax, *g, 1e-3)
            }
        }
    };
    c.sort_by(|a, b| b.total_cmp(a));
    c.dedup();
    Ok(c)
}

fn tune_fold(
    ds: &Dataset,
    outer: &Fold,
    cfg: &TuneConfig,
    metric: MetricName,
    y: &[f64],
) -> Result<FoldSelection> {
    let seed = derive_seed(cfg.seed, &[outer.repeat as u64, outer.fold as u64, 0x7E]);
    let candidates = candidates_for(ds, &outer.train, cfg, seed)?;
    let mut per_fold: Vec<Vec<f64>> = vec![Vec::new(); candidates.len()];
    for inner in &outer.inner {
        if inner.train.is_empty() || inner.test.is_empty() {
            continue;
        }
        let yte = take(y, &inner.test);
        let iseed = derive_seed(seed, &[inner.fold as u64]);
        for (ci, &lambda) in candidates.iter().enumerate() {
            let spec = with_lambda(&cfg.learner, lambda);
            let Ok(ff) = fit_fold(ds, &inner.train, &spec, &cfg.preprocess, iseed) else {
                continue;
            };
            let Ok((pred, _)) = ff.predict(ds, &inner.test) else {
                continue;
            };
            if let Some(v) = compute_metric(metric, &pred, &yte, 0.5) {
                per_fold[ci].push(v);
            }
        }
    }
    let inner_mean: Vec<f64> = per_fold
        .iter()
        .map(|v| if v.is_empty() { f64::NAN } else { mean(v) })
        .collect();
    let inner_se: Vec<f64> = per_fold
        .iter()
        .map(|v| {
            sample_sd(v)
                .map(|s| s / (v.len() as f64).sqrt())
                .unwrap_or(f64::NAN)
        })
        .collect();
    let (best_index, selected_index) = select_candidate(
        &inner_mean,
        &inner_se,
        metric.higher_is_better(),
        cfg.selection,
    )
    .ok_or_else(|| {
        Error::Fit(format!(
            "no inner fold could score any candidate in outer fold {}",
            outer.fold
        ))
    })?;
    Ok(FoldSelection {
        repeat: outer.repeat,
        fold: outer.fold,
        lambda: candidates[selected_index],
        candidates,
        inner_mean,
        inner_se,
        best_index,
        selected_index,
    })
}

/// Nested tuning: for every outer fold the penalty is chosen on that fold's
/// inner folds, refitted on the outer training rows and scored on the outer
/// test rows.
pub fn tune_resample(ds: &Dataset, plan: &SplitPlan, cfg: &TuneConfig) -> Result<TuneResult> {
    plan.validate_for(ds)?;
    if !plan.nested {
        return Err(Error::invalid(
            "tuning needs a nested split plan (use --nested)",
        ));
    }
    if !matches!(
        cfg.learner.kind,
        LearnerKind::ElasticNet { .. } | LearnerKind::LinearRidge { .. }
    ) {
        return Err(Error::invalid(
            "only penalized learners (glmnet, ridge) can be tuned",
        ));
    }
    if matches!(cfg.grid, Grid::Count(0)) || matches!(&cfg.grid, Grid::Explicit(v) if v.is_empty())
    {
        return Err(Error::invalid("empty tuning grid"));
    }
    let fit_cfg = FitConfig {
        learner: cfg.learner.clone(),
        preprocess: cfg.preprocess.clone(),
        metrics: cfg.metrics.clone(),
        seed: cfg.seed,
        store_refit_data: false,
        threshold: None,
    };
    let names = fit_cfg.metric_names(ds.task())?;
    let metric = names[0];
    let y = ds.outcome_vector();
    let folds = plan.folds();
    let outcomes: Vec<(Option<FoldSelection>, FoldRecord)> = folds
        .par_iter()
        .map(|f| match tune_fold(ds, f, cfg, metric, &y) {
            Ok(sel) => {
                let mut fc = fit_cfg.clone();
                fc.learner = with_lambda(&cfg.learner, sel.lambda);
                let rec = run_fold(ds, f, &fc, &names, &y);
                (Some(sel), rec)
            }
            Err(e) => {
                let mut rec = run_fold(
                    ds,
                    &Fold {
                        skipped: true,
                        ..f.clone()
                    },
                    &fit_cfg,
                    &names,
                    &y,
                );
                rec.status = FoldStatus::Failed;
                rec.message = Some(e.to_string());
                (None, rec)
            }
        })
        .collect();
    let mut selections = Vec::new();
    let mut records = Vec::new();
    for (s, r) in outcomes {
        selections.extend(s);
        records.push(r);
    }
    if records.iter().all(|r| r.status == FoldStatus::Failed) {
        return Err(Error::Fit("every outer fold failed".into()));
    }
    let mut outer = fit_result_shell(ds, plan, &fit_cfg, names, records)?;
    outer.learner = format!("{} (tuned)", cfg.learner.label());

    let mut final_lambda = None;
    let mut final_model = None;
    let mut final_preproc = None;
    if !selections.is_empty() {
        let lambdas: Vec<f64> = selections.iter().map(|s| s.lambda).collect();
        let lam = median(&lambdas);
        final_lambda = Some(lam);
        if cfg.refit {
            let all: Vec<usize> = (0..ds.n_rows()).collect();
            let ff = fit_fold(
                ds,
                &all,
                &with_lambda(&cfg.learner, lam),
                &cfg.preprocess,
                derive_seed(cfg.seed, &[0xF1]),
            )?;
            final_model = Some(ff.model);
            final_preproc = Some(ff.preproc);
        }
    }
    Ok(TuneResult {
        outer,
        selections,
        selection: cfg.selection,
        metric,
        final_lambda,
        final_model,
        final_preproc,
    })
}

fn fit_result_shell(
    ds: &Dataset,
    plan: &SplitPlan,
    cfg: &FitConfig,
    names: Vec<MetricName>,
    records: Vec<FoldRecord>,
) -> Result<FitResult> {
    let groups = if plan.group_cols.is_empty() {
        None
    } else {
        Some(group_ids(ds, &plan.group_cols)?)
    };
    Ok(FitResult {
        schema_version: crate::SCHEMA_VERSION,
        task: ds.task(),
        outcome: ds.roles().outcome.clone(),
        positive_class: ds.roles().positive_class.clone(),
        learner: cfg.learner.label(),
        preprocess: cfg.preprocess.label(),
        aggregate: aggregate(&records, &names),
        metrics: names,
        folds: records,
        plan_hash: plan.hash.clone(),
        plan_mode: plan.mode.label(),
        v: plan.v,
        repeats: plan.repeats,
        n_rows: ds.n_rows(),
        data_hash: plan.data_hash.clone(),
        seed: cfg.seed,
        outcome_values: ds.outcome_vector(),
        groups,
        guarded: true,
        refit: None,
        warnings: Vec::new(),
    })
}
