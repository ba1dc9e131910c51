//! Preprocessing estimated on training rows only and replayed unchanged on
//! any other rows.
//!
//! Steps always run in the order impute, normalize, filter, select, project,
//! whatever order they were listed in.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{ColumnValues, Dataset, TaskKind};
use crate::error::{Error, Result};
use crate::learners::{
    enet_cv, enet_path, fit_enet_fixed, lambda_max, lambda_sequence, EnetOptions,
};
use crate::linalg::select_cols;
use crate::util::{median, quantile_sorted, short_hash, sorted};

/// Robust scale factor applied to the MAD.
pub const MAD_SCALE: f64 = 1.4826;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LassoChoice {
    Lambda(f64),
    TopK(usize),
    /// Penalty picked by inner 3-fold CV on the training rows.
    Cv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum PreprocStep {
    ImputeMedian,
    NormalizeZscore,
    NormalizeRobust,
    FilterVariance { threshold: f64 },
    FilterIqr { threshold: f64 },
    SelectTtest { k: usize },
    SelectLasso { choice: LassoChoice },
    ProjectPca { m: usize },
}

impl PreprocStep {
    fn stage(&self) -> u8 {
        match self {
            PreprocStep::ImputeMedian => 0,
            PreprocStep::NormalizeZscore | PreprocStep::NormalizeRobust => 1,
            PreprocStep::FilterVariance { .. } => 2,
            PreprocStep::FilterIqr { .. } => 3,
            PreprocStep::SelectTtest { .. } | PreprocStep::SelectLasso { .. } => 4,
            PreprocStep::ProjectPca { .. } => 5,
        }
    }

    pub fn label(&self) -> String {
        match self {
            PreprocStep::ImputeMedian => "impute=median".into(),
            PreprocStep::NormalizeZscore => "normalize=zscore".into(),
            PreprocStep::NormalizeRobust => "normalize=robust".into(),
            PreprocStep::FilterVariance { threshold } => format!("filter=variance:{threshold}"),
            PreprocStep::FilterIqr { threshold } => format!("filter=iqr:{threshold}"),
            PreprocStep::SelectTtest { k } => format!("select=ttest:{k}"),
            PreprocStep::SelectLasso { choice } => match choice {
                LassoChoice::Lambda(l) => format!("select=lasso:lambda={l}"),
                LassoChoice::TopK(k) => format!("select=lasso:k={k}"),
                LassoChoice::Cv => "select=lasso".into(),
            },
            PreprocStep::ProjectPca { m } => format!("project=pca:{m}"),
        }
    }
}

/// Ordered preprocessing steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocSpec {
    pub steps: Vec<PreprocStep>,
}

impl PreprocSpec {
    /// Validate and put steps into canonical order.
    pub fn new(mut steps: Vec<PreprocStep>) -> Result<PreprocSpec> {
        steps.sort_by_key(PreprocStep::stage);
        for w in steps.windows(2) {
            if w[0].stage() == w[1].stage() {
                return Err(Error::invalid(format!(
                    "conflicting preprocessing steps `{}` and `{}`",
                    w[0].label(),
                    w[1].label()
                )));
            }
        }
        for s in &steps {
            match s {
                PreprocStep::SelectTtest { k } | PreprocStep::ProjectPca { m: k } if *k == 0 => {
                    return Err(Error::invalid(format!(
                        "`{}` needs a positive count",
                        s.label()
                    )))
                }
                PreprocStep::SelectLasso {
                    choice: LassoChoice::TopK(0),
                } => return Err(Error::invalid("lasso selection needs k > 0")),
                PreprocStep::SelectLasso {
                    choice: LassoChoice::Lambda(l),
                } if *l < 0.0 => return Err(Error::invalid("lasso lambda must be non-negative")),
                _ => {}
            }
        }
        Ok(PreprocSpec { steps })
    }

    pub fn none() -> PreprocSpec {
        PreprocSpec::default()
    }

    /// Median imputation followed by z-scoring.
    pub fn standard() -> PreprocSpec {
        PreprocSpec {
            steps: vec![PreprocStep::ImputeMedian, PreprocStep::NormalizeZscore],
        }
    }

    /// Parse `impute=median,normalize=zscore,filter=variance:0.01,select=ttest:100`.
    /// `none` or an empty string gives no steps.
    pub fn parse(s: &str) -> Result<PreprocSpec> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(PreprocSpec::none());
        }
        let mut steps = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, val) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected stage=method in `{part}`")))?;
            let (method, arg) = val.split_once(':').unwrap_or((val, ""));
            let num = |a: &str| -> Result<f64> {
                a.trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("`{a}` is not a number in `{part}`")))
            };
            let step = match (key.trim(), method.trim()) {
                ("impute", "median") => PreprocStep::ImputeMedian,
                ("normalize", "zscore") => PreprocStep::NormalizeZscore,
                ("normalize", "robust") => PreprocStep::NormalizeRobust,
                ("filter", "variance") => PreprocStep::FilterVariance {
                    threshold: if arg.is_empty() { 0.0 } else { num(arg)? },
                },
                ("filter", "iqr") => PreprocStep::FilterIqr {
                    threshold: if arg.is_empty() { 0.0 } else { num(arg)? },
                },
                ("select", "ttest") => PreprocStep::SelectTtest {
                    k: num(arg)? as usize,
                },
                ("select", "lasso") => {
                    let choice = if arg.is_empty() {
                        LassoChoice::Cv
                    } else if let Some(l) = arg.strip_prefix("lambda=") {
                        LassoChoice::Lambda(num(l)?)
                    } else if let Some(k) = arg.strip_prefix("k=") {
                        LassoChoice::TopK(num(k)? as usize)
                    } else {
                        LassoChoice::Lambda(num(arg)?)
                    };
                    PreprocStep::SelectLasso { choice }
                }
                ("project", "pca") | ("select", "pca") => PreprocStep::ProjectPca {
                    m: num(arg)? as usize,
                },
                _ => {
                    return Err(Error::invalid(format!(
                        "unknown preprocessing step `{part}`"
                    )))
                }
            };
            steps.push(step);
        }
        PreprocSpec::new(steps)
    }

    pub fn label(&self) -> String {
        if self.steps.is_empty() {
            return "none".into();
        }
        self.steps
            .iter()
            .map(PreprocStep::label)
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Parameters estimated by one step on the training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum FittedStep {
    ImputeMedian {
        medians: Vec<f64>,
    },
    Zscore {
        means: Vec<f64>,
        sds: Vec<f64>,
    },
    Robust {
        medians: Vec<f64>,
        scales: Vec<f64>,
    },
    /// Column subset produced by a filter or selection step.
    Keep {
        method: String,
        kept: Vec<usize>,
    },
    Pca {
        centers: Vec<f64>,
        loadings: Vec<Vec<f64>>,
    },
}

impl FittedStep {
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            FittedStep::ImputeMedian { medians } => {
                let mut out = x.clone();
                for j in 0..out.ncols() {
                    for i in 0..out.nrows() {
                        if out[(i, j)].is_nan() {
                            out[(i, j)] = medians[j];
                        }
                    }
                }
                out
            }
            FittedStep::Zscore { means: c, sds: s }
            | FittedStep::Robust {
                medians: c,
                scales: s,
            } => DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - c[j]) / s[j]),
            FittedStep::Keep { kept, .. } => select_cols(x, kept),
            FittedStep::Pca { centers, loadings } => {
                DMatrix::from_fn(x.nrows(), loadings.len(), |i, k| {
                    loadings[k]
                        .iter()
                        .enumerate()
                        .map(|(j, l)| (x[(i, j)] - centers[j]) * l)
                        .sum()
                })
            }
        }
    }
}

/// Preprocessing state for one training fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedPreproc {
    pub input_names: Vec<String>,
    pub steps: Vec<FittedStep>,
    pub output_names: Vec<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl FittedPreproc {
    pub fn n_features_out(&self) -> usize {
        self.output_names.len()
    }

    /// Replay the fitted steps; nothing about `x` is estimated here.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_names.len() {
            return Err(Error::invalid(format!(
                "matrix has {} columns, preprocessing was fitted on {}",
                x.ncols(),
                self.input_names.len()
            )));
        }
        let mut cur = x.clone();
        for step in &self.steps {
            cur = step.apply(&cur);
        }
        Ok(cur)
    }

    /// Short content hash of the fitted parameters.
    pub fn hash(&self) -> String {
        short_hash(&serde_json::to_vec(self).expect("serializable"))
    }
}

fn finite(col: impl Iterator<Item = f64>) -> Vec<f64> {
    col.filter(|v| !v.is_nan()).collect()
}

fn sample_var(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Welch two-sample t statistic of `x` between `y == 1` and `y == 0`,
/// ignoring missing values. Zero when undefined.
pub fn welch_t(x: &[f64], y: &[f64]) -> f64 {
    let a: Vec<f64> = x
        .iter()
        .zip(y)
        .filter(|(v, l)| **l == 1.0 && !v.is_nan())
        .map(|(v, _)| *v)
        .collect();
    let b: Vec<f64> = x
        .iter()
        .zip(y)
        .filter(|(v, l)| **l != 1.0 && !v.is_nan())
        .map(|(v, _)| *v)
        .collect();
    if a.len() < 2 || b.len() < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / a.len() as f64;
    let mb = b.iter().sum::<f64>() / b.len() as f64;
    let se2 = sample_var(&a) / a.len() as f64 + sample_var(&b) / b.len() as f64;
    if se2 <= 0.0 {
        return if ma == mb {
            0.0
        } else {
            f64::INFINITY.copysign(ma - mb)
        };
    }
    (ma - mb) / se2.sqrt()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let pairs: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(v, _)| !v.is_nan())
        .map(|(a, b)| (*a, *b))
        .collect();
    let n = pairs.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

fn require_complete(x: &DMatrix<f64>, what: &str) -> Result<()> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::Fit(format!(
            "{what} needs complete data; add impute=median before it"
        )));
    }
    Ok(())
}

/// Top-`m` principal axes of the column-centered matrix, each sign-normalized
/// so its largest-magnitude entry is positive.
pub fn principal_axes(xc: &DMatrix<f64>, m: usize) -> Vec<Vec<f64>> {
    let (n, p) = xc.shape();
    let m = m.min(n).min(p);
    if m == 0 {
        return Vec::new();
    }
    let mut axes: Vec<Vec<f64>> = if p <= n {
        let cov = xc.transpose() * xc;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        order[..m]
            .iter()
            .map(|&k| eig.eigenvectors.column(k).iter().copied().collect())
            .collect()
    } else {
        let gram = xc * xc.transpose();
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        order[..m]
            .iter()
            .map(|&k| {
                let u = eig.eigenvectors.column(k);
                let v = xc.transpose() * u;
                let norm = v.norm();
                if norm > 0.0 {
                    (v / norm).iter().copied().collect()
                } else {
                    vec![0.0; p]
                }
            })
            .collect()
    };
    for a in &mut axes {
        let big = a
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if big < 0.0 {
            for v in a.iter_mut() {
                *v = -*v;
            }
        }
    }
    axes
}

/// Estimate every step on `x_train` and return the state together with the
/// transformed training matrix.
pub fn fit_transform(
    spec: &PreprocSpec,
    x_train: &DMatrix<f64>,
    y_train: &[f64],
    names: &[String],
    task: TaskKind,
    seed: u64,
) -> Result<(FittedPreproc, DMatrix<f64>)> {
    if x_train.nrows() == 0 {
        return Err(Error::invalid(
            "cannot fit preprocessing on zero training rows",
        ));
    }
    if names.len() != x_train.ncols() {
        return Err(Error::invalid(
            "feature name count does not match matrix width",
        ));
    }
    let mut cur = x_train.clone();
    let mut cur_names = names.to_vec();
    let mut steps = Vec::new();
    let mut warnings = Vec::new();
    for step in &spec.steps {
        let p = cur.ncols();
        let fitted = match step {
            PreprocStep::ImputeMedian => {
                let medians = (0..p)
                    .map(|j| {
                        let m = median(cur.column(j).as_slice());
                        if m.is_nan() {
                            warnings.push(format!(
                                "`{}` is missing in every training row; imputed with 0",
                                cur_names[j]
                            ));
                            0.0
                        } else {
                            m
                        }
                    })
                    .collect();
                FittedStep::ImputeMedian { medians }
            }
            PreprocStep::NormalizeZscore => {
                let mut means = Vec::with_capacity(p);
                let mut sds = Vec::with_capacity(p);
                for j in 0..p {
                    let v = finite(cur.column(j).iter().copied());
                    let m = if v.is_empty() {
                        0.0
                    } else {
                        v.iter().sum::<f64>() / v.len() as f64
                    };
                    let sd = sample_var(&v).sqrt();
                    means.push(m);
                    if sd > 0.0 && sd.is_finite() {
                        sds.push(sd);
                    } else {
                        warnings.push(format!(
                            "`{}` has zero training variance; centered only",
                            cur_names[j]
                        ));
                        sds.push(1.0);
                    }
                }
                FittedStep::Zscore { means, sds }
            }
            PreprocStep::NormalizeRobust => {
                let mut medians = Vec::with_capacity(p);
                let mut scales = Vec::with_capacity(p);
                for j in 0..p {
                    let v = finite(cur.column(j).iter().copied());
                    let m = median(&v);
                    let m = if m.is_nan() { 0.0 } else { m };
                    let dev: Vec<f64> = v.iter().map(|x| (x - m).abs()).collect();
                    let s = MAD_SCALE * median(&dev);
                    medians.push(m);
                    if s > 0.0 && s.is_finite() {
                        scales.push(s);
                    } else {
                        warnings.push(format!(
                            "`{}` has zero training MAD; centered only",
                            cur_names[j]
                        ));
                        scales.push(1.0);
                    }
                }
                FittedStep::Robust { medians, scales }
            }
            PreprocStep::FilterVariance { threshold } => {
                let kept = (0..p)
                    .filter(|&j| sample_var(&finite(cur.column(j).iter().copied())) > *threshold)
                    .collect();
                FittedStep::Keep {
                    method: step.label(),
                    kept,
                }
            }
            PreprocStep::FilterIqr { threshold } => {
                let kept = (0..p)
                    .filter(|&j| {
                        let v = sorted(&finite(cur.column(j).iter().copied()));
                        !v.is_empty()
                            && quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25) > *threshold
                    })
                    .collect();
                FittedStep::Keep {
                    method: step.label(),
                    kept,
                }
            }
            PreprocStep::SelectTtest { k } => {
                if *k >= p {
                    if *k > p {
                        warnings.push(format!(
                            "select=ttest:{k} exceeds the {p} available features; keeping all"
                        ));
                    }
                    FittedStep::Keep {
                        method: step.label(),
                        kept: (0..p).collect(),
                    }
                } else {
                    let scores: Vec<f64> = (0..p)
                        .map(|j| {
                            let col: Vec<f64> = cur.column(j).iter().copied().collect();
                            let s = match task {
                                TaskKind::BinaryClassification => welch_t(&col, y_train),
                                TaskKind::Regression => pearson(&col, y_train),
                            };
                            if s.is_nan() {
                                0.0
                            } else {
                                s.abs()
                            }
                        })
                        .collect();
                    let mut order: Vec<usize> = (0..p).collect();
                    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                    let mut kept = order[..*k].to_vec();
                    kept.sort_unstable();
                    FittedStep::Keep {
                        method: step.label(),
                        kept,
                    }
                }
            }
            PreprocStep::SelectLasso { choice } => {
                require_complete(&cur, "lasso selection")?;
                let opts = EnetOptions {
                    alpha: 1.0,
                    family: task,
                    tol: 1e-7,
                    max_iter: 100,
                };
                let coefs: Vec<f64> = match choice {
                    LassoChoice::Lambda(l) => {
                        fit_enet_fixed(&cur, y_train, *l, &opts)?.coefficients
                    }
                    LassoChoice::Cv => {
                        let (path, cv) = enet_cv(&cur, y_train, &opts, 3, 50, seed)?;
                        path.betas[cv.index_min].clone()
                    }
                    LassoChoice::TopK(k) => {
                        let lmax = lambda_max(&cur, y_train, 1.0);
                        let path =
                            enet_path(&cur, y_train, &lambda_sequence(lmax, 100, 1e-3), &opts)?;
                        let idx = (0..path.len())
                            .find(|&i| path.betas[i].iter().filter(|b| **b != 0.0).count() >= *k)
                            .unwrap_or(path.len().saturating_sub(1));
                        let mut b = path.betas.get(idx).cloned().unwrap_or_else(|| vec![0.0; p]);
                        let sds: Vec<f64> = (0..p)
                            .map(|j| sample_var(&finite(cur.column(j).iter().copied())).sqrt())
                            .collect();
                        let mut order: Vec<usize> = (0..p).filter(|&j| b[j] != 0.0).collect();
                        order.sort_by(|&a, &c| {
                            (b[c] * sds[c])
                                .abs()
                                .total_cmp(&(b[a] * sds[a]).abs())
                                .then(a.cmp(&c))
                        });
                        for &j in order.iter().skip(*k) {
                            b[j] = 0.0;
                        }
                        b
                    }
                };
                let kept: Vec<usize> = (0..p).filter(|&j| coefs[j] != 0.0).collect();
                if kept.is_empty() {
                    warnings.push("lasso selection kept no features".into());
                }
                FittedStep::Keep {
                    method: step.label(),
                    kept,
                }
            }
            PreprocStep::ProjectPca { m } => {
                require_complete(&cur, "PCA projection")?;
                let n = cur.nrows();
                let centers: Vec<f64> = (0..p).map(|j| cur.column(j).mean()).collect();
                let xc = DMatrix::from_fn(n, p, |i, j| cur[(i, j)] - centers[j]);
                if *m > n.min(p) {
                    warnings.push(format!("project=pca:{m} capped at {} components", n.min(p)));
                }
                let loadings = principal_axes(&xc, *m);
                FittedStep::Pca { centers, loadings }
            }
        };
        cur = fitted.apply(&cur);
        cur_names = match &fitted {
            FittedStep::Keep { kept, .. } => kept.iter().map(|&j| cur_names[j].clone()).collect(),
            FittedStep::Pca { loadings, .. } => {
                (1..=loadings.len()).map(|k| format!("PC{k}")).collect()
            }
            _ => cur_names,
        };
        steps.push(fitted);
    }
    Ok((
        FittedPreproc {
            input_names: names.to_vec(),
            steps,
            output_names: cur_names,
            warnings,
        },
        cur,
    ))
}

/// Estimate the preprocessing state on training data.
pub fn fit_preproc(
    spec: &PreprocSpec,
    x_train: &DMatrix<f64>,
    y_train: &[f64],
    names: &[String],
    task: TaskKind,
    seed: u64,
) -> Result<FittedPreproc> {
    fit_transform(spec, x_train, y_train, names, task, seed).map(|(fp, _)| fp)
}

pub fn apply_preproc(fp: &FittedPreproc, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    fp.apply(x)
}

/// Encoding of one predictor column into design-matrix columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncodedColumn {
    Numeric {
        name: String,
    },
    /// Treatment coding against the alphabetically first training level;
    /// `levels` lists the other training levels, one indicator column each.
    Dummies {
        name: String,
        reference: String,
        levels: Vec<String>,
        labels: Vec<String>,
    },
}

/// Maps dataset predictors to a numeric matrix using levels seen in the
/// training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub columns: Vec<EncodedColumn>,
    pub output_names: Vec<String>,
}

impl Encoder {
    pub fn fit(ds: &Dataset, train: &[usize]) -> Result<Encoder> {
        let mut columns = Vec::new();
        let mut output_names = Vec::new();
        for name in ds.predictors() {
            let col = ds.column(name)?;
            match &col.values {
                ColumnValues::Numeric { .. } => {
                    columns.push(EncodedColumn::Numeric { name: name.clone() });
                    output_names.push(name.clone());
                }
                ColumnValues::Categorical { levels, codes } => {
                    let mut seen = vec![false; levels.len()];
                    for &r in train {
                        if let Some(c) = codes[r] {
                            seen[c as usize] = true;
                        }
                    }
                    // ordering by name keeps the coding independent of
                    // where levels first appear in the full table
                    let mut present: Vec<String> = (0..levels.len())
                        .filter(|&c| seen[c])
                        .map(|c| levels[c].clone())
                        .collect();
                    present.sort();
                    let reference = present.first().cloned().unwrap_or_default();
                    let dummies: Vec<String> = present.into_iter().skip(1).collect();
                    let labels: Vec<String> =
                        dummies.iter().map(|l| format!("{name}={l}")).collect();
                    output_names.extend(labels.iter().cloned());
                    columns.push(EncodedColumn::Dummies {
                        name: name.clone(),
                        reference,
                        levels: dummies,
                        labels,
                    });
                }
            }
        }
        Ok(Encoder {
            columns,
            output_names,
        })
    }

    /// Design matrix for `rows`; also returns how many cells held a level
    /// never seen in training (encoded as the reference level).
    pub fn transform(&self, ds: &Dataset, rows: &[usize]) -> Result<(DMatrix<f64>, usize)> {
        let mut x = DMatrix::<f64>::zeros(rows.len(), self.output_names.len());
        let mut j0 = 0;
        let mut unseen = 0;
        for enc in &self.columns {
            match enc {
                EncodedColumn::Numeric { name } => {
                    let vals = ds.column(name)?.as_numeric()?;
                    for (i, &r) in rows.iter().enumerate() {
                        x[(i, j0)] = vals[r].unwrap_or(f64::NAN);
                    }
                    j0 += 1;
                }
                EncodedColumn::Dummies {
                    name,
                    reference,
                    levels: dummies,
                    ..
                } => {
                    let ColumnValues::Categorical { levels, codes } = &ds.column(name)?.values
                    else {
                        return Err(Error::invalid(format!(
                            "`{name}` changed kind since encoding"
                        )));
                    };
                    // dataset code -> indicator column (None for the reference
                    // or a level unseen in training)
                    let slot: Vec<Option<usize>> = levels
                        .iter()
                        .map(|l| dummies.iter().position(|d| d == l))
                        .collect();
                    for (i, &r) in rows.iter().enumerate() {
                        match codes[r] {
                            None => {
                                for k in 0..dummies.len() {
                                    x[(i, j0 + k)] = f64::NAN;
                                }
                            }
                            Some(c) => {
                                if let Some(k) = slot[c as usize] {
                                    x[(i, j0 + k)] = 1.0;
                                } else if levels[c as usize] != *reference {
                                    unseen += 1;
                                }
                            }
                        }
                    }
                    j0 += dummies.len();
                }
            }
        }
        Ok((x, unseen))
    }
}
