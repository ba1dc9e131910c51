use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use leakguard::audit::{audit as run_audit, AuditConfig, AuditReport, PermRefit, PermutationConfig};
use leakguard::dlsi::{delta_lsi as run_delta_lsi, DeltaLsiResult, DlsiConfig};
use leakguard::learners::LearnerSpec;
use leakguard::metrics::MetricName;
use leakguard::preprocess::PreprocSpec;
use leakguard::report::{render_html, ReportBundle, ReportPayload};
use leakguard::resample::{fit_resample as run_fit, FitConfig, FitResult};
use leakguard::sim::{simulate as run_simulate, Mechanism, SimConfig};
use leakguard::split::{make_split_plan as run_split, SplitConfig, SplitMode, SplitPlan};
use leakguard::{CsvOptions, Dataset, RoleMap};

fn err(e: leakguard::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Dataset", module = "leakguard_py", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn n_rows(&self) -> usize {
        self.inner.n_rows()
    }

    #[getter]
    fn predictors(&self) -> Vec<String> {
        self.inner.predictors().to_vec()
    }

    #[getter]
    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    /// Outcome as floats (1/0 for binary outcomes).
    fn outcome(&self) -> Vec<f64> {
        self.inner.outcome_vector()
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        let f = std::fs::File::create(path).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        leakguard::write_csv(&self.inner, f).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n_rows={}, predictors={}, hash={})",
            self.inner.n_rows(),
            self.inner.predictors().len(),
            self.inner.content_hash()
        )
    }
}

#[pyclass(name = "SplitPlan", module = "leakguard_py", frozen)]
struct PyPlan {
    inner: SplitPlan,
}

#[pymethods]
impl PyPlan {
    #[getter]
    fn hash(&self) -> String {
        self.inner.hash.clone()
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.label()
    }

    #[getter]
    fn repeats(&self) -> usize {
        self.inner.repeats
    }

    /// `(repeat, fold, train_rows, test_rows)` for every fold.
    fn folds(&self) -> Vec<(usize, usize, Vec<usize>, Vec<usize>)> {
        self.inner
            .folds()
            .iter()
            .map(|f| (f.repeat, f.fold, f.train.clone(), f.test.clone()))
            .collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(json_err)
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(PyPlan {
            inner: serde_json::from_str(s).map_err(json_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.folds().len()
    }
}

#[pyclass(name = "FitResult", module = "leakguard_py", frozen)]
struct PyFit {
    inner: FitResult,
}

#[pymethods]
impl PyFit {
    #[getter]
    fn plan_hash(&self) -> String {
        self.inner.plan_hash.clone()
    }

    /// Mean of a metric over usable folds, or None when it was not computed.
    fn mean(&self, metric: &str) -> PyResult<Option<f64>> {
        let m = MetricName::parse(metric).map_err(err)?;
        Ok(self.inner.summary(m).map(|s| s.mean))
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(PyFit {
            inner: FitResult::from_json(s).map_err(err)?,
        })
    }
}

#[pyclass(name = "AuditReport", module = "leakguard_py", frozen)]
struct PyAudit {
    inner: AuditReport,
}

#[pymethods]
impl PyAudit {
    #[getter]
    fn observed(&self) -> f64 {
        self.inner.permutation.observed
    }

    #[getter]
    fn gap(&self) -> f64 {
        self.inner.permutation.gap
    }

    #[getter]
    fn p_value(&self) -> f64 {
        self.inner.permutation.p_value
    }

    #[getter]
    fn interpretation(&self) -> String {
        self.inner.interpretation.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    /// Self-contained HTML report.
    fn html(&self) -> PyResult<String> {
        let cfg = serde_json::to_value(&self.inner.config).map_err(json_err)?;
        let bundle = ReportBundle::now(ReportPayload::Audit(Box::new(self.inner.clone())), cfg);
        Ok(render_html(&bundle))
    }
}

#[pyclass(name = "DeltaLsiResult", module = "leakguard_py", frozen)]
struct PyDelta {
    inner: DeltaLsiResult,
}

#[pymethods]
impl PyDelta {
    #[getter]
    fn delta_metric(&self) -> f64 {
        self.inner.delta_metric
    }

    #[getter]
    fn delta_lsi(&self) -> f64 {
        self.inner.delta_lsi
    }

    #[getter]
    fn p_signflip(&self) -> Option<f64> {
        self.inner.p_signflip
    }

    #[getter]
    fn ci_metric(&self) -> Option<(f64, f64)> {
        self.inner.ci_metric
    }

    #[getter]
    fn tier(&self) -> &'static str {
        self.inner.tier.label()
    }

    #[getter]
    fn r_eff(&self) -> usize {
        self.inner.r_eff
    }

    #[getter]
    fn deltas(&self) -> Vec<f64> {
        self.inner.deltas.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    fn html(&self) -> PyResult<String> {
        let cfg = serde_json::to_value(&self.inner.config).map_err(json_err)?;
        let bundle = ReportBundle::now(ReportPayload::Dlsi(Box::new(self.inner.clone())), cfg);
        Ok(render_html(&bundle))
    }
}

#[pyfunction]
#[pyo3(signature = (path, outcome, positive=None, subject=None, batch=None, study=None, time=None, predictors=None, regression=false))]
#[allow(clippy::too_many_arguments)]
fn load_csv(
    path: &str,
    outcome: &str,
    positive: Option<String>,
    subject: Option<String>,
    batch: Option<String>,
    study: Option<String>,
    time: Option<String>,
    predictors: Option<Vec<String>>,
    regression: bool,
) -> PyResult<PyDataset> {
    let mut roles = RoleMap::new(outcome);
    if let Some(p) = positive {
        roles = roles.positive(p);
    }
    if let Some(c) = subject {
        roles = roles.subject(c);
    }
    if let Some(c) = batch {
        roles = roles.batch(c);
    }
    if let Some(c) = study {
        roles = roles.study(c);
    }
    if let Some(c) = time {
        roles = roles.time(c);
    }
    if let Some(p) = predictors {
        roles = roles.predictors(p);
    }
    let opts = CsvOptions {
        task: regression.then_some(leakguard::TaskKind::Regression),
        ..CsvOptions::default()
    };
    Ok(PyDataset {
        inner: leakguard::load_csv(path, roles, &opts).map_err(err)?,
    })
}

/// Simulated dataset with one leakage mechanism injected.
#[pyfunction]
#[pyo3(signature = (mechanism="none", n=250, p=10, s=0.0, seed=1))]
fn simulate(mechanism: &str, n: usize, p: usize, s: f64, seed: u64) -> PyResult<PyDataset> {
    let m = Mechanism::parse(mechanism).map_err(err)?;
    let sim = run_simulate(&SimConfig::new(m, n, p, s, seed)).map_err(err)?;
    Ok(PyDataset { inner: sim.dataset })
}

#[pyfunction]
#[pyo3(signature = (dataset, mode, v=5, repeats=1, group=None, stratify=false, nested=false, seed=1))]
#[allow(clippy::too_many_arguments)]
fn make_split_plan(
    dataset: &PyDataset,
    mode: &str,
    v: usize,
    repeats: usize,
    group: Option<String>,
    stratify: bool,
    nested: bool,
    seed: u64,
) -> PyResult<PyPlan> {
    let mut cfg = SplitConfig::new(SplitMode::parse(mode).map_err(err)?, v)
        .repeats(repeats)
        .stratify(stratify)
        .nested(nested)
        .seed(seed);
    if let Some(g) = group {
        cfg = cfg.group_col(g);
    }
    Ok(PyPlan {
        inner: run_split(&dataset.inner, &cfg).map_err(err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (dataset, plan, learner="glmnet", preprocess="impute=median,normalize=zscore", metrics=None, seed=1))]
fn fit_resample(
    py: Python<'_>,
    dataset: &PyDataset,
    plan: &PyPlan,
    learner: &str,
    preprocess: &str,
    metrics: Option<Vec<String>>,
    seed: u64,
) -> PyResult<PyFit> {
    let metrics = metrics
        .unwrap_or_default()
        .iter()
        .map(|m| MetricName::parse(m))
        .collect::<leakguard::Result<Vec<_>>>()
        .map_err(err)?;
    let cfg = FitConfig::new(
        LearnerSpec::parse(learner).map_err(err)?,
        PreprocSpec::parse(preprocess).map_err(err)?,
    )
    .metrics(metrics)
    .seed(seed);
    let fr = py
        .detach(|| run_fit(&dataset.inner, &plan.inner, &cfg))
        .map_err(err)?;
    Ok(PyFit { inner: fr })
}

#[pyfunction]
#[pyo3(signature = (fit, b=200, perm_refit="auto", batch_cols=None, seed=1))]
fn audit(
    py: Python<'_>,
    fit: &PyFit,
    b: usize,
    perm_refit: &str,
    batch_cols: Option<Vec<String>>,
    seed: u64,
) -> PyResult<PyAudit> {
    let cfg = AuditConfig {
        permutation: PermutationConfig {
            b,
            perm_refit: PermRefit::parse(perm_refit).map_err(err)?,
            seed,
            ..PermutationConfig::default()
        },
        batch_cols: batch_cols.unwrap_or_default(),
        ..AuditConfig::default()
    };
    let rep = py
        .detach(|| run_audit(&fit.inner, None, None, &cfg))
        .map_err(err)?;
    Ok(PyAudit { inner: rep })
}

#[pyfunction]
#[pyo3(signature = (leaky, guarded, metric="auc", seed=1))]
fn delta_lsi(py: Python<'_>, leaky: &PyFit, guarded: &PyFit, metric: &str, seed: u64) -> PyResult<PyDelta> {
    let cfg = DlsiConfig {
        metric: MetricName::parse(metric).map_err(err)?,
        seed,
        ..DlsiConfig::default()
    };
    let res = py
        .detach(|| run_delta_lsi(&leaky.inner, &guarded.inner, &cfg))
        .map_err(err)?;
    Ok(PyDelta { inner: res })
}

#[pymodule]
fn leakguard_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPlan>()?;
    m.add_class::<PyFit>()?;
    m.add_class::<PyAudit>()?;
    m.add_class::<PyDelta>()?;
    m.add_function(wrap_pyfunction!(load_csv, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(make_split_plan, m)?)?;
    m.add_function(wrap_pyfunction!(fit_resample, m)?)?;
    m.add_function(wrap_pyfunction!(audit, m)?)?;
    m.add_function(wrap_pyfunction!(delta_lsi, m)?)?;
    Ok(())
}
