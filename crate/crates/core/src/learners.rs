//! Built-in learners: logistic regression by IRLS, elastic net by coordinate
//! descent (binomial and gaussian), ordinary least squares and ridge.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::linalg::solve_spd;
use crate::util::rng_from;

/// How the elastic-net penalty is chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaChoice {
    Fixed(f64),
    /// Inner cross-validation on deviance along a path of `n_lambda` values.
    Cv {
        nfolds: usize,
        n_lambda: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerKind {
    LogisticGlm {
        ridge_eps: f64,
    },
    /// Binomial for binary tasks, gaussian for regression.
    ElasticNet {
        alpha: f64,
        lambda: LambdaChoice,
    },
    LinearOls,
    LinearRidge {
        lambda: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    pub max_iter: usize,
    pub tol: f64,
}

pub const DEFAULT_RIDGE_EPS: f64 = 1e-8;
pub const DEFAULT_ALPHA: f64 = 0.9;

impl LearnerSpec {
    pub fn glm() -> Self {
        LearnerSpec {
            kind: LearnerKind::LogisticGlm {
                ridge_eps: DEFAULT_RIDGE_EPS,
            },
            max_iter: 100,
            tol: 1e-8,
        }
    }

    pub fn glmnet(alpha: f64) -> Self {
        LearnerSpec {
            kind: LearnerKind::ElasticNet {
                alpha,
                lambda: LambdaChoice::Cv {
                    nfolds: 5,
                    n_lambda: 100,
                },
            },
            max_iter: 100,
            tol: 1e-8,
        }
    }

    pub fn glmnet_fixed(alpha: f64, lambda: f64) -> Self {
        let mut s = LearnerSpec::glmnet(alpha);
        s.kind = LearnerKind::ElasticNet {
            alpha,
            lambda: LambdaChoice::Fixed(lambda),
        };
        s
    }

    pub fn ols() -> Self {
        LearnerSpec {
            kind: LearnerKind::LinearOls,
            max_iter: 1,
            tol: 0.0,
        }
    }

    pub fn ridge(lambda: f64) -> Self {
        LearnerSpec {
            kind: LearnerKind::LinearRidge { lambda },
            max_iter: 1,
            tol: 0.0,
        }
    }

    pub fn label(&self) -> String {
        match &self.kind {
            LearnerKind::LogisticGlm { .. } => "glm".into(),
            LearnerKind::ElasticNet { alpha, lambda } => match lambda {
                LambdaChoice::Fixed(l) => format!("glmnet(alpha={alpha}, lambda={l})"),
                LambdaChoice::Cv { nfolds, .. } => {
                    format!("glmnet(alpha={alpha}, lambda=cv{nfolds})")
                }
            },
            LearnerKind::LinearOls => "ols".into(),
            LearnerKind::LinearRidge { lambda } => format!("ridge(lambda={lambda})"),
        }
    }

    /// Parse `glm`, `glmnet`, `glmnet:alpha=0.9,lambda=0.01,nfolds=5`, `ols`,
    /// or `ridge:lambda=1`.
    pub fn parse(s: &str) -> Result<LearnerSpec> {
        let (head, rest) = s.trim().split_once(':').unwrap_or((s.trim(), ""));
        let mut kv = Vec::new();
        for part in rest.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected key=value in `{part}`")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("`{v}` is not a number")))?;
            kv.push((k.trim().to_string(), v));
        }
        let get = |key: &str| kv.iter().find(|(k, _)| k == key).map(|(_, v)| *v);
        let unknown = |allowed: &[&str]| {
            kv.iter()
                .find(|(k, _)| !allowed.contains(&k.as_str()))
                .map(|(k, _)| Error::invalid(format!("unknown learner option `{k}`")))
        };
        let spec = match head {
            "glm" | "logistic" => {
                if let Some(e) = unknown(&["ridge_eps"]) {
                    return Err(e);
                }
                let mut s = LearnerSpec::glm();
                if let Some(e) = get("ridge_eps") {
                    s.kind = LearnerKind::LogisticGlm { ridge_eps: e };
                }
                s
            }
            "glmnet" | "elastic_net" => {
                if let Some(e) = unknown(&["alpha", "lambda", "nfolds", "nlambda"]) {
                    return Err(e);
                }
                let alpha = get("alpha").unwrap_or(DEFAULT_ALPHA);
                let lambda = match get("lambda") {
                    Some(l) => LambdaChoice::Fixed(l),
                    None => LambdaChoice::Cv {
                        nfolds: get("nfolds").map(|v| v as usize).unwrap_or(5),
                        n_lambda: get("nlambda").map(|v| v as usize).unwrap_or(100),
                    },
                };
                let mut s = LearnerSpec::glmnet(alpha);
                s.kind = LearnerKind::ElasticNet { alpha, lambda };
                s
            }
            "ols" | "lm" => LearnerSpec::ols(),
            "ridge" => {
                if let Some(e) = unknown(&["lambda"]) {
                    return Err(e);
                }
                LearnerSpec::ridge(get("lambda").unwrap_or(1.0))
            }
            other => return Err(Error::invalid(format!("unknown learner `{other}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            LearnerKind::ElasticNet { alpha, lambda } => {
                if !(0.0..=1.0).contains(alpha) {
                    return Err(Error::invalid(format!(
                        "alpha must lie in [0, 1], got {alpha}"
                    )));
                }
                match lambda {
                    LambdaChoice::Fixed(l) if *l < 0.0 || !l.is_finite() => Err(Error::invalid(
                        format!("lambda must be non-negative, got {l}"),
                    )),
                    LambdaChoice::Cv { nfolds, n_lambda } if *nfolds < 2 || *n_lambda < 1 => {
                        Err(Error::invalid("cv needs nfolds >= 2 and nlambda >= 1"))
                    }
                    _ => Ok(()),
                }
            }
            LearnerKind::LinearRidge { lambda } if *lambda < 0.0 => Err(Error::invalid(format!(
                "lambda must be non-negative, got {lambda}"
            ))),
            LearnerKind::LogisticGlm { ridge_eps } if *ridge_eps < 0.0 => {
                Err(Error::invalid("ridge_eps must be non-negative"))
            }
            _ => Ok(()),
        }
    }

    pub fn supports(&self, task: TaskKind) -> bool {
        match self.kind {
            LearnerKind::LogisticGlm { .. } => task == TaskKind::BinaryClassification,
            LearnerKind::ElasticNet { .. } => true,
            LearnerKind::LinearOls | LearnerKind::LinearRidge { .. } => {
                task == TaskKind::Regression
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub learner: String,
    pub family: TaskKind,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub feature_names: Vec<String>,
    pub iterations: usize,
    pub converged: bool,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl FittedModel {
    /// Intercept followed by the slopes.
    pub fn coef_vector(&self) -> Vec<f64> {
        std::iter::once(self.intercept)
            .chain(self.coefficients.iter().copied())
            .collect()
    }

    pub fn linear_predictor(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| {
                self.intercept
                    + self
                        .coefficients
                        .iter()
                        .enumerate()
                        .map(|(j, b)| b * x[(i, j)])
                        .sum::<f64>()
            })
            .collect()
    }

    /// Probabilities of the positive class for binomial models, fitted values
    /// otherwise.
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let eta = self.linear_predictor(x);
        match self.family {
            TaskKind::BinaryClassification => eta.into_iter().map(sigmoid).collect(),
            TaskKind::Regression => eta,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(z)) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn check_binary(y: &[f64]) -> Result<()> {
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("binary outcome must be coded 0/1"));
    }
    let pos = y.iter().filter(|&&v| v == 1.0).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::DegenerateOutcome(
            "outcome is constant in the training data".into(),
        ));
    }
    Ok(())
}

fn check_finite(x: &DMatrix<f64>) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit(
            "design matrix contains missing or non-finite values".into(),
        ));
    }
    Ok(())
}

/// Penalized negative log-likelihood used by the IRLS fit.
pub fn logistic_objective(
    x: &DMatrix<f64>,
    y: &[f64],
    intercept: f64,
    beta: &[f64],
    ridge_eps: f64,
) -> f64 {
    let mut nll = 0.0;
    for i in 0..x.nrows() {
        let mut eta = intercept;
        for (j, b) in beta.iter().enumerate() {
            eta += b * x[(i, j)];
        }
        nll += softplus(eta) - y[i] * eta;
    }
    nll + 0.5 * ridge_eps * beta.iter().map(|b| b * b).sum::<f64>()
}

/// Result of [`fit_logistic_irls`] plus the per-iteration objective trace.
#[derive(Clone, Debug)]
pub struct IrlsFit {
    pub model: FittedModel,
    pub objective_trace: Vec<f64>,
}

/// Logistic regression by Newton-Raphson (IRLS) with step halving, minimizing
/// `-loglik + ridge_eps/2 * |slopes|^2`.
pub fn fit_logistic_irls(
    x: &DMatrix<f64>,
    y: &[f64],
    ridge_eps: f64,
    max_iter: usize,
    tol: f64,
) -> Result<IrlsFit> {
    check_binary(y)?;
    check_finite(x)?;
    let (n, p) = x.shape();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let mut b0 = (ybar / (1.0 - ybar)).ln();
    let mut beta = vec![0.0; p];
    let mut obj = logistic_objective(x, y, b0, &beta, ridge_eps);
    let mut trace = vec![obj];
    let mut converged = false;
    let mut iterations = 0;
    let mut warnings = Vec::new();
    for it in 0..max_iter {
        iterations = it + 1;
        let mut h = DMatrix::<f64>::zeros(p + 1, p + 1);
        let mut g = DVector::<f64>::zeros(p + 1);
        let mut row = vec![0.0; p + 1];
        row[0] = 1.0;
        for i in 0..n {
            let mut eta = b0;
            for j in 0..p {
                row[j + 1] = x[(i, j)];
                eta += beta[j] * row[j + 1];
            }
            let mu = sigmoid(eta);
            let w = (mu * (1.0 - mu)).max(1e-12);
            let r = y[i] - mu;
            for a in 0..=p {
                g[a] += row[a] * r;
                let wa = w * row[a];
                for b in 0..=a {
                    h[(a, b)] += wa * row[b];
                }
            }
        }
        for a in 0..=p {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
        }
        for j in 0..p {
            g[j + 1] -= ridge_eps * beta[j];
            h[(j + 1, j + 1)] += ridge_eps;
        }
        let step =
            solve_spd(&h, &g).ok_or_else(|| Error::Fit("singular information matrix".into()))?;
        let mut t = 1.0;
        let (mut nb0, mut nbeta);
        loop {
            nb0 = b0 + t * step[0];
            nbeta = (0..p)
                .map(|j| beta[j] + t * step[j + 1])
                .collect::<Vec<_>>();
            let nobj = logistic_objective(x, y, nb0, &nbeta, ridge_eps);
            if nobj <= obj + 1e-12 * obj.abs().max(1.0) || t < 1e-10 {
                obj = nobj.min(obj);
                break;
            }
            t *= 0.5;
        }
        let change = std::iter::once((nb0 - b0).abs())
            .chain((0..p).map(|j| (nbeta[j] - beta[j]).abs()))
            .fold(0.0f64, f64::max);
        b0 = nb0;
        beta = nbeta;
        trace.push(obj);
        if change < tol {
            converged = true;
            break;
        }
    }
    // Perfect separation: every case on the right side of the boundary and
    // the slopes growing without a likelihood optimum.
    let eta: Vec<f64> = (0..n)
        .map(|i| b0 + (0..p).map(|j| beta[j] * x[(i, j)]).sum::<f64>())
        .collect();
    let separated = p > 0
        && eta.iter().zip(y).all(|(e, yy)| (*e > 0.0) == (*yy == 1.0))
        && beta.iter().any(|b| b.abs() > 10.0);
    if separated {
        converged = false;
        warnings.push("perfect separation detected; coefficients are ridge-stabilized".into());
    } else if !converged {
        warnings.push(format!("IRLS did not converge in {max_iter} iterations"));
    }
    Ok(IrlsFit {
        model: FittedModel {
            learner: "glm".into(),
            family: TaskKind::BinaryClassification,
            intercept: b0,
            coefficients: beta,
            feature_names: Vec::new(),
            iterations,
            converged,
            lambda: None,
            warnings,
        },
        objective_trace: trace,
    })
}

/// Least squares with intercept; `lambda > 0` adds a ridge penalty
/// `lambda * |slopes|^2` on the centered design.
pub fn fit_linear(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<FittedModel> {
    check_finite(x)?;
    let (n, p) = x.shape();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let means: Vec<f64> = (0..p).map(|j| x.column(j).mean()).collect();
    let xc = DMatrix::from_fn(n, p, |i, j| x[(i, j)] - means[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - ybar));
    let beta: Vec<f64> = if p == 0 {
        Vec::new()
    } else if lambda > 0.0 {
        let mut a = xc.transpose() * &xc;
        for j in 0..p {
            a[(j, j)] += lambda;
        }
        let b = xc.transpose() * &yc;
        solve_spd(&a, &b)
            .ok_or_else(|| Error::Fit("ridge system is singular".into()))?
            .iter()
            .copied()
            .collect()
    } else {
        let svd = xc.clone().svd(true, true);
        svd.solve(&yc, 1e-10 * svd.singular_values.max().max(1.0))
            .map_err(|e| Error::Fit(e.to_string()))?
            .iter()
            .copied()
            .collect()
    };
    let intercept = ybar - beta.iter().zip(&means).map(|(b, m)| b * m).sum::<f64>();
    Ok(FittedModel {
        learner: if lambda > 0.0 {
            format!("ridge(lambda={lambda})")
        } else {
            "ols".into()
        },
        family: TaskKind::Regression,
        intercept,
        coefficients: beta,
        feature_names: Vec::new(),
        iterations: 1,
        converged: true,
        lambda: (lambda > 0.0).then_some(lambda),
        warnings: Vec::new(),
    })
}

/// Options shared by the elastic-net path and CV routines.
#[derive(Clone, Debug)]
pub struct EnetOptions {
    pub alpha: f64,
    pub family: TaskKind,
    pub tol: f64,
    pub max_iter: usize,
}

/// Coefficients along a decreasing penalty sequence, on the original scale.
#[derive(Clone, Debug)]
pub struct EnetPath {
    pub lambdas: Vec<f64>,
    pub intercepts: Vec<f64>,
    pub betas: Vec<Vec<f64>>,
    pub converged: Vec<bool>,
    pub iterations: usize,
}

impl EnetPath {
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }
}

struct Standardized {
    xs: DMatrix<f64>,
    means: Vec<f64>,
    sds: Vec<f64>,
    /// Columns with positive spread; constant columns keep a zero slope.
    usable: Vec<bool>,
}

fn standardize(x: &DMatrix<f64>) -> Standardized {
    let (n, p) = x.shape();
    let mut means = vec![0.0; p];
    let mut sds = vec![1.0; p];
    let mut usable = vec![false; p];
    let mut xs = DMatrix::<f64>::zeros(n, p);
    for j in 0..p {
        let col = x.column(j);
        let m = col.mean();
        let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
        means[j] = m;
        let sd = var.sqrt();
        if sd > 1e-12 * m.abs().max(1.0) {
            sds[j] = sd;
            usable[j] = true;
            for i in 0..n {
                xs[(i, j)] = (x[(i, j)] - m) / sd;
            }
        }
    }
    Standardized {
        xs,
        means,
        sds,
        usable,
    }
}

/// Smallest penalty at which every slope is zero.
pub fn lambda_max(x: &DMatrix<f64>, y: &[f64], alpha: f64) -> f64 {
    let st = standardize(x);
    lambda_max_std(&st, y, alpha)
}

fn lambda_max_std(st: &Standardized, y: &[f64], alpha: f64) -> f64 {
    let n = y.len() as f64;
    let ybar = y.iter().sum::<f64>() / n;
    let mut m = 0.0f64;
    for j in 0..st.xs.ncols() {
        if !st.usable[j] {
            continue;
        }
        let g: f64 = st
            .xs
            .column(j)
            .iter()
            .zip(y)
            .map(|(x, yy)| x * (yy - ybar))
            .sum();
        m = m.max(g.abs() / n);
    }
    // a hair above the exact boundary so rounding in the solver cannot
    // leave a slope marginally nonzero
    m / alpha.max(1e-3) * (1.0 + 1e-9)
}

/// Log-spaced sequence from `lmax` down to `lmax * ratio`.
pub fn lambda_sequence(lmax: f64, n_lambda: usize, ratio: f64) -> Vec<f64> {
    if n_lambda == 1 {
        return vec![lmax];
    }
    let (a, b) = (lmax.ln(), (lmax * ratio).ln());
    (0..n_lambda)
        .map(|k| (a + (b - a) * k as f64 / (n_lambda - 1) as f64).exp())
        .collect()
}

/// Weighted inner product `sum w*a*b`, four lanes at a time.
fn wdot(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb, cw) = (a.chunks_exact(4), b.chunks_exact(4), w.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .zip(cw.remainder())
        .map(|((x, y), z)| x * y * z)
        .sum();
    for ((x, y), z) in ca.zip(cb).zip(cw) {
        for k in 0..4 {
            acc[k] += x[k] * y[k] * z[k];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

fn soft_threshold(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

/// Coordinate descent for one penalty value on standardized columns,
/// warm-started from `b0`/`beta`. Returns (converged, passes).
#[allow(clippy::too_many_arguments)]
fn cd_solve(
    xs: &DMatrix<f64>,
    usable: &[bool],
    y: &[f64],
    lambda: f64,
    opts: &EnetOptions,
    b0: &mut f64,
    beta: &mut [f64],
) -> (bool, usize) {
    let (n, p) = xs.shape();
    let nf = n as f64;
    let l1 = lambda * opts.alpha;
    let l2 = lambda * (1.0 - opts.alpha);
    let binomial = opts.family == TaskKind::BinaryClassification;
    let data = xs.as_slice();
    let col = |j: usize| &data[j * n..(j + 1) * n];
    let mut w = vec![1.0; n];
    let mut r = vec![0.0; n];
    let mut xwx = vec![0.0; p];
    let mut passes = 0;
    let max_outer = if binomial { opts.max_iter } else { 1 };
    let max_passes = 100_000;
    for _outer in 0..max_outer {
        let old_b0 = *b0;
        let old_beta = beta.to_vec();
        // working weights and residuals at the current coefficients
        let mut eta = vec![*b0; n];
        for j in 0..p {
            if beta[j] != 0.0 {
                for (e, x) in eta.iter_mut().zip(col(j)) {
                    *e += beta[j] * x;
                }
            }
        }
        for i in 0..n {
            if binomial {
                let mu = sigmoid(eta[i]);
                w[i] = (mu * (1.0 - mu)).max(1e-5);
                r[i] = (y[i] - mu) / w[i];
            } else {
                r[i] = y[i] - eta[i];
            }
        }
        let wsum: f64 = w.iter().sum();
        for j in 0..p {
            if usable[j] {
                xwx[j] = wdot(col(j), col(j), &w) / nf;
            }
        }
        let mut active: Vec<bool> = beta.iter().map(|b| *b != 0.0).collect();
        let mut full_pass = true;
        let mut inner_ok = false;
        while passes < max_passes {
            passes += 1;
            let mut max_change = 0.0f64;
            let d = r.iter().zip(&w).map(|(ri, wi)| ri * wi).sum::<f64>() / wsum;
            if d != 0.0 {
                *b0 += d;
                for ri in r.iter_mut() {
                    *ri -= d;
                }
                max_change = max_change.max(d.abs());
            }
            for j in 0..p {
                if !usable[j] || (!full_pass && !active[j]) {
                    continue;
                }
                let cj = col(j);
                let grad = wdot(cj, &r, &w) / nf;
                let new = soft_threshold(grad + xwx[j] * beta[j], l1) / (xwx[j] + l2);
                let diff = new - beta[j];
                if diff != 0.0 {
                    for (ri, x) in r.iter_mut().zip(cj) {
                        *ri -= diff * x;
                    }
                    beta[j] = new;
                    max_change = max_change.max(diff.abs() * xwx[j].sqrt());
                    if new != 0.0 {
                        active[j] = true;
                    }
                }
            }
            if max_change < opts.tol {
                if full_pass {
                    inner_ok = true;
                    break;
                }
                full_pass = true;
            } else {
                full_pass = false;
            }
        }
        if !inner_ok {
            return (false, passes);
        }
        if !binomial {
            return (true, passes);
        }
        let change = std::iter::once((*b0 - old_b0).abs())
            .chain(beta.iter().zip(&old_beta).map(|(a, b)| (a - b).abs()))
            .fold(0.0f64, f64::max);
        if change < opts.tol {
            return (true, passes);
        }
    }
    (false, passes)
}

fn deviance(family: TaskKind, y: &[f64], eta: &[f64]) -> f64 {
    match family {
        TaskKind::BinaryClassification => {
            2.0 * y
                .iter()
                .zip(eta)
                .map(|(yy, e)| softplus(*e) - yy * e)
                .sum::<f64>()
        }
        TaskKind::Regression => y.iter().zip(eta).map(|(yy, e)| (yy - e).powi(2)).sum(),
    }
}

fn null_deviance(family: TaskKind, y: &[f64]) -> f64 {
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let eta0 = match family {
        TaskKind::BinaryClassification => (ybar / (1.0 - ybar)).ln(),
        TaskKind::Regression => ybar,
    };
    deviance(family, y, &vec![eta0; y.len()])
}

/// Elastic-net path over `lambdas` (decreasing). The objective on the
/// standardized design is `loss/n + lambda * ((1-alpha)/2 |b|^2 + alpha |b|_1)`
/// where `loss` is the negative log-likelihood (binomial) or half the residual
/// sum of squares (gaussian). The path stops early once 99.9% of the null
/// deviance is explained.
pub fn enet_path(
    x: &DMatrix<f64>,
    y: &[f64],
    lambdas: &[f64],
    opts: &EnetOptions,
) -> Result<EnetPath> {
    if opts.family == TaskKind::BinaryClassification {
        check_binary(y)?;
    }
    check_finite(x)?;
    let st = standardize(x);
    Ok(enet_path_std(&st, y, lambdas, opts))
}

fn enet_path_std(st: &Standardized, y: &[f64], lambdas: &[f64], opts: &EnetOptions) -> EnetPath {
    let (n, p) = st.xs.shape();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let mut b0 = match opts.family {
        TaskKind::BinaryClassification => (ybar / (1.0 - ybar)).ln(),
        TaskKind::Regression => ybar,
    };
    let mut beta = vec![0.0; p];
    let null_dev = null_deviance(opts.family, y);
    let mut prev_rsq = 0.0;
    let mut path = EnetPath {
        lambdas: Vec::new(),
        intercepts: Vec::new(),
        betas: Vec::new(),
        converged: Vec::new(),
        iterations: 0,
    };
    for &lam in lambdas {
        let (ok, passes) = cd_solve(&st.xs, &st.usable, y, lam, opts, &mut b0, &mut beta);
        path.iterations += passes;
        let orig: Vec<f64> = (0..p)
            .map(|j| {
                if st.usable[j] {
                    beta[j] / st.sds[j]
                } else {
                    0.0
                }
            })
            .collect();
        let icpt = b0 - orig.iter().zip(&st.means).map(|(b, m)| b * m).sum::<f64>();
        path.lambdas.push(lam);
        path.intercepts.push(icpt);
        path.betas.push(orig);
        path.converged.push(ok);
        let mut eta = vec![b0; n];
        for (j, b) in beta.iter().enumerate() {
            if *b != 0.0 {
                for (e, x) in eta.iter_mut().zip(st.xs.column(j).as_slice()) {
                    *e += b * x;
                }
            }
        }
        let dev = deviance(opts.family, y, &eta);
        if null_dev > 0.0 {
            let rsq = 1.0 - dev / null_dev;
            // stop once the fit saturates or the explained deviance no
            // longer moves along the path
            if rsq > 0.999 || (path.len() >= 5 && rsq - prev_rsq < 1e-5 * rsq) {
                break;
            }
            prev_rsq = rsq;
        }
    }
    path
}

/// Cross-validation table for an elastic-net path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnetCv {
    pub lambdas: Vec<f64>,
    /// Mean held-out deviance per observation.
    pub cv_deviance: Vec<f64>,
    pub lambda_min: f64,
    pub index_min: usize,
}

/// Choose the penalty minimizing held-out deviance over `nfolds` random row
/// folds. Penalties at which any fold failed to converge are skipped.
pub fn enet_cv(
    x: &DMatrix<f64>,
    y: &[f64],
    opts: &EnetOptions,
    nfolds: usize,
    n_lambda: usize,
    seed: u64,
) -> Result<(EnetPath, EnetCv)> {
    if opts.family == TaskKind::BinaryClassification {
        check_binary(y)?;
    }
    check_finite(x)?;
    let (n, p) = x.shape();
    let st = standardize(x);
    let lmax = lambda_max_std(&st, y, opts.alpha);
    let ratio = if n > p { 1e-4 } else { 1e-2 };
    let lambdas = if lmax > 0.0 {
        lambda_sequence(lmax, n_lambda, ratio)
    } else {
        vec![0.0]
    };
    let full = enet_path_std(&st, y, &lambdas, opts);

    let nfolds = nfolds.min(n).max(2);
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut rng_from(seed, &[0xCF]));
    let mut foldid = vec![0usize; n];
    for (k, &r) in rows.iter().enumerate() {
        foldid[r] = k % nfolds;
    }
    let mut dev_sum = vec![0.0; lambdas.len()];
    let mut valid = vec![true; lambdas.len()];
    for k in 0..nfolds {
        let train: Vec<usize> = (0..n).filter(|&i| foldid[i] != k).collect();
        let test: Vec<usize> = (0..n).filter(|&i| foldid[i] == k).collect();
        let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let degenerate = opts.family == TaskKind::BinaryClassification
            && (ytr.iter().all(|&v| v == 1.0) || ytr.iter().all(|&v| v == 0.0));
        if degenerate {
            continue;
        }
        let xtr = crate::linalg::select_rows(x, &train);
        let sub = standardize(&xtr);
        let path = enet_path_std(&sub, &ytr, &lambdas, opts);
        for (li, _) in lambdas.iter().enumerate().take(full.len()) {
            // a fold path that stopped early keeps its last solution
            let at = li.min(path.len() - 1);
            if !path.converged[at] {
                valid[li] = false;
                continue;
            }
            let eta: Vec<f64> = test
                .iter()
                .map(|&i| {
                    path.intercepts[at]
                        + path.betas[at]
                            .iter()
                            .enumerate()
                            .map(|(j, b)| b * x[(i, j)])
                            .sum::<f64>()
                })
                .collect();
            let yte: Vec<f64> = test.iter().map(|&i| y[i]).collect();
            dev_sum[li] += deviance(opts.family, &yte, &eta);
        }
    }
    let mut best = None;
    for li in 0..full.len() {
        if !valid[li] || !full.converged[li] {
            continue;
        }
        let d = dev_sum[li] / n as f64;
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((li, d));
        }
    }
    let (index_min, _) =
        best.ok_or_else(|| Error::Fit("no penalty converged in every CV fold".into()))?;
    let cv = EnetCv {
        lambdas: lambdas.clone(),
        cv_deviance: dev_sum.iter().map(|d| d / n as f64).collect(),
        lambda_min: lambdas[index_min],
        index_min,
    };
    Ok((full, cv))
}

/// Elastic net at a single penalty, approached along a short warm-start path
/// from `lambda_max`.
pub fn fit_enet_fixed(
    x: &DMatrix<f64>,
    y: &[f64],
    lambda: f64,
    opts: &EnetOptions,
) -> Result<FittedModel> {
    if opts.family == TaskKind::BinaryClassification {
        check_binary(y)?;
    }
    check_finite(x)?;
    let st = standardize(x);
    let lmax = lambda_max_std(&st, y, opts.alpha);
    let mut lambdas: Vec<f64> = if lmax > lambda && lambda > 0.0 {
        let steps = ((lmax / lambda).ln() / 0.5).ceil().clamp(1.0, 30.0) as usize;
        lambda_sequence(lmax, steps + 1, lambda / lmax)
    } else {
        vec![]
    };
    lambdas.retain(|&l| l > lambda);
    lambdas.push(lambda);
    let mut tight = opts.clone();
    tight.max_iter = opts.max_iter.max(1);
    let st_path = {
        // no early stopping here: solve every step down to the target
        let (n, p) = st.xs.shape();
        let ybar = y.iter().sum::<f64>() / n as f64;
        let mut b0 = match opts.family {
            TaskKind::BinaryClassification => (ybar / (1.0 - ybar)).ln(),
            TaskKind::Regression => ybar,
        };
        let mut beta = vec![0.0; p];
        let mut ok = true;
        let mut iters = 0;
        for &l in &lambdas {
            let (c, it) = cd_solve(&st.xs, &st.usable, y, l, &tight, &mut b0, &mut beta);
            ok = c;
            iters += it;
        }
        (b0, beta, ok, iters)
    };
    let (b0, beta, ok, iters) = st_path;
    let p = x.ncols();
    let orig: Vec<f64> = (0..p)
        .map(|j| {
            if st.usable[j] {
                beta[j] / st.sds[j]
            } else {
                0.0
            }
        })
        .collect();
    let intercept = b0 - orig.iter().zip(&st.means).map(|(b, m)| b * m).sum::<f64>();
    let mut warnings = Vec::new();
    if !ok {
        warnings.push(format!(
            "coordinate descent did not converge at lambda = {lambda}"
        ));
    }
    Ok(FittedModel {
        learner: format!("glmnet(alpha={})", opts.alpha),
        family: opts.family,
        intercept,
        coefficients: orig,
        feature_names: Vec::new(),
        iterations: iters,
        converged: ok,
        lambda: Some(lambda),
        warnings,
    })
}

/// Fit any learner. `seed` drives the inner CV folds of the elastic net.
pub fn fit_learner(
    spec: &LearnerSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    task: TaskKind,
    feature_names: &[String],
    seed: u64,
) -> Result<FittedModel> {
    spec.validate()?;
    if !spec.supports(task) {
        return Err(Error::invalid(format!(
            "learner `{}` does not support {} tasks",
            spec.label(),
            task.label()
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::Fit("fewer than 2 training rows".into()));
    }
    let mut model = match &spec.kind {
        LearnerKind::LogisticGlm { ridge_eps } => {
            fit_logistic_irls(x, y, *ridge_eps, spec.max_iter, spec.tol)?.model
        }
        LearnerKind::ElasticNet { alpha, lambda } => {
            let opts = EnetOptions {
                alpha: *alpha,
                family: task,
                tol: spec.tol,
                max_iter: spec.max_iter,
            };
            match lambda {
                LambdaChoice::Fixed(l) => fit_enet_fixed(x, y, *l, &opts)?,
                LambdaChoice::Cv { nfolds, n_lambda } => {
                    let (path, cv) = enet_cv(x, y, &opts, *nfolds, *n_lambda, seed)?;
                    let k = cv.index_min;
                    let mut warnings = Vec::new();
                    let skipped = path.converged.iter().filter(|c| !**c).count();
                    if skipped > 0 {
                        warnings.push(format!(
                            "{skipped} penalty value(s) skipped after non-convergence"
                        ));
                    }
                    FittedModel {
                        learner: spec.label(),
                        family: task,
                        intercept: path.intercepts[k],
                        coefficients: path.betas[k].clone(),
                        feature_names: Vec::new(),
                        iterations: path.iterations,
                        converged: path.converged[k],
                        lambda: Some(cv.lambda_min),
                        warnings,
                    }
                }
            }
        }
        LearnerKind::LinearOls => fit_linear(x, y, 0.0)?,
        LearnerKind::LinearRidge { lambda } => fit_linear(x, y, *lambda)?,
    };
    model.learner = spec.label();
    model.feature_names = feature_names.to_vec();
    Ok(model)
}
