//! Synthetic datasets with controlled leakage and the factorial detection
//! experiments built on them.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::{perm_gap, PermRefit, PermutationConfig};
use crate::data::{Column, Dataset, RoleMap, TaskKind};
use crate::dlsi::{
    delta_lsi, huber_location, sign_flip_test, DeltaLsiResult, DlsiConfig, Exchangeability,
    SignFlipResult,
};
use crate::error::{Error, Result};
use crate::learners::{sigmoid, LearnerSpec};
use crate::metrics::MetricName;
use crate::preprocess::{PreprocSpec, PreprocStep};
use crate::resample::{fit_resample, FitConfig, FitResult};
use crate::split::{make_split_plan, SplitConfig, SplitMode, SplitPlan};
use crate::util::{derive_seed, mean, normal_cdf, rng_from, wilson_interval, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    None,
    SubjectOverlap,
    BatchConfounded,
    PeekNorm,
    Lookahead,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] = [
        Mechanism::None,
        Mechanism::SubjectOverlap,
        Mechanism::BatchConfounded,
        Mechanism::PeekNorm,
        Mechanism::Lookahead,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Mechanism::None => "none",
            Mechanism::SubjectOverlap => "subject_overlap",
            Mechanism::BatchConfounded => "batch_confounded",
            Mechanism::PeekNorm => "peek_norm",
            Mechanism::Lookahead => "lookahead",
        }
    }

    pub fn parse(s: &str) -> Result<Mechanism> {
        Mechanism::ALL
            .iter()
            .copied()
            .find(|m| m.label() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown mechanism `{s}`")))
    }

    /// Name of the injected predictor, if any.
    pub fn leak_column(&self) -> Option<&'static str> {
        match self {
            Mechanism::None => None,
            Mechanism::SubjectOverlap => Some("leak_subject_mean"),
            Mechanism::BatchConfounded => Some("leak_batch_mean"),
            Mechanism::PeekNorm => Some("leak_peek"),
            Mechanism::Lookahead => Some("leak_lookahead"),
        }
    }

    fn tag(&self) -> u64 {
        *self as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub mechanism: Mechanism,
    pub n: usize,
    pub p: usize,
    /// Signal level; 0 means the outcome is pure noise.
    pub s: f64,
    pub seed: u64,
    /// Defaults to `n / 3`.
    pub subjects: Option<usize>,
    pub batches: usize,
    pub studies: usize,
    pub ar_rho: f64,
    pub peek_var: f64,
    /// Number of leading predictors carrying the signal.
    pub k_signal: usize,
    /// Logit offset tying batch membership to the outcome.
    pub batch_strength: f64,
    /// Measurement noise of the biomarker shifted by the look-ahead mechanism.
    pub biomarker_sd: f64,
}

impl SimConfig {
    pub fn new(mechanism: Mechanism, n: usize, p: usize, s: f64, seed: u64) -> Self {
        SimConfig {
            mechanism,
            n,
            p,
            s,
            seed,
            subjects: None,
            batches: 6,
            studies: 5,
            ar_rho: 0.9,
            peek_var: 0.09,
            k_signal: 5,
            batch_strength: 1.0,
            biomarker_sd: 1.0,
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.unwrap_or(self.n / 3).clamp(1, self.n.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::invalid("simulation needs at least 10 rows"));
        }
        if self.p == 0 {
            return Err(Error::invalid("simulation needs at least one predictor"));
        }
        if !(self.s >= 0.0 && self.s.is_finite()) {
            return Err(Error::invalid(
                "signal level must be finite and non-negative",
            ));
        }
        if !(self.ar_rho.abs() < 1.0) {
            return Err(Error::invalid("AR coefficient must lie in (-1, 1)"));
        }
        if self.batches == 0 || self.studies == 0 {
            return Err(Error::invalid("batch and study counts must be positive"));
        }
        if self.studies > self.n_subjects() {
            return Err(Error::invalid("more studies than subjects"));
        }
        if !(self.peek_var >= 0.0 && self.biomarker_sd >= 0.0) {
            return Err(Error::invalid("noise variances must be non-negative"));
        }
        Ok(())
    }
}

/// A generated dataset plus what was put into it.
#[derive(Clone, Debug)]
pub struct SimDataset {
    pub dataset: Dataset,
    pub config: SimConfig,
    pub leak_columns: Vec<String>,
    pub feature_names: Vec<String>,
    /// Latent coefficients, already scaled by the signal level.
    pub beta: Vec<f64>,
    /// The AR(1) component of the latent predictor (zeros when `s = 0`).
    pub latent_noise: Vec<f64>,
    pub outcome: Vec<f64>,
}

impl SimDataset {
    /// The same data without the injected columns.
    pub fn clean(&self) -> Result<Dataset> {
        self.dataset.with_predictor_set(&self.feature_names)
    }
}

fn group_means(values: &[f64], groups: &[usize], n_groups: usize) -> Vec<f64> {
    let mut sum = vec![0.0; n_groups];
    let mut cnt = vec![0usize; n_groups];
    for (&v, &g) in values.iter().zip(groups) {
        sum[g] += v;
        cnt[g] += 1;
    }
    groups.iter().map(|&g| sum[g] / cnt[g] as f64).collect()
}

pub fn simulate(cfg: &SimConfig) -> Result<SimDataset> {
    cfg.validate()?;
    let (n, p) = (cfg.n, cfg.p);
    let mut rng = rng_from(cfg.seed, &[0x5173]);
    let x: Vec<Vec<f64>> = (0..p)
        .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .collect();

    let k = cfg.k_signal.min(p);
    let beta: Vec<f64> = (0..p)
        .map(|j| {
            if cfg.s > 0.0 && j < k {
                cfg.s / (k as f64).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut ar = vec![0.0; n];
    if cfg.s > 0.0 {
        let innov = (1.0 - cfg.ar_rho * cfg.ar_rho).sqrt();
        ar[0] = rng.sample(StandardNormal);
        for t in 1..n {
            let e: f64 = rng.sample(StandardNormal);
            ar[t] = cfg.ar_rho * ar[t - 1] + innov * e;
        }
    }
    let eta: Vec<f64> = (0..n)
        .map(|i| ar[i] + (0..k).map(|j| beta[j] * x[j][i]).sum::<f64>())
        .collect();
    let y: Vec<f64> = eta
        .iter()
        .map(|&e| {
            if rng.random::<f64>() < normal_cdf(e) {
                1.0
            } else {
                0.0
            }
        })
        .collect();

    // rows are in time order, visit-major: every subject's first visit, then
    // every second visit, and so on
    let n_sub = cfg.n_subjects();
    let subject: Vec<usize> = (0..n).map(|i| i % n_sub).collect();
    let study: Vec<usize> = subject.iter().map(|&s| s * cfg.studies / n_sub).collect();
    let nb = cfg.batches;
    let batch: Vec<usize> = if cfg.mechanism == Mechanism::BatchConfounded && nb > 1 {
        // logit of landing in the upper half of batches is +strength for
        // cases and -strength for controls; uniform within each half
        let half = nb / 2;
        y.iter()
            .map(|&yi| {
                let p_high = sigmoid(cfg.batch_strength * (2.0 * yi - 1.0));
                if rng.random::<f64>() < p_high {
                    half + rng.random_range(0..nb - half)
                } else {
                    rng.random_range(0..half)
                }
            })
            .collect()
    } else {
        (0..n).map(|_| rng.random_range(0..nb)).collect()
    };

    let leak: Option<Vec<f64>> = match cfg.mechanism {
        Mechanism::None => None,
        Mechanism::SubjectOverlap => Some(group_means(&y, &subject, n_sub)),
        Mechanism::BatchConfounded => Some(group_means(&y, &batch, nb)),
        Mechanism::PeekNorm => {
            let sd = cfg.peek_var.sqrt();
            Some(
                y.iter()
                    .map(|&v| v + sd * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            )
        }
        Mechanism::Lookahead => {
            let bio: Vec<f64> = eta
                .iter()
                .map(|&e| e + cfg.biomarker_sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Some(
                (0..n)
                    .map(|i| {
                        if i + n_sub < n {
                            bio[i + n_sub]
                        } else {
                            bio[i]
                        }
                    })
                    .collect(),
            )
        }
    };

    let feature_names: Vec<String> = (1..=p).map(|j| format!("x{j}")).collect();
    let as_f = |v: &[usize]| v.iter().map(|&g| g as f64).collect::<Vec<f64>>();
    let mut columns = vec![
        Column::dense("y", &y),
        Column::dense("subject", &as_f(&subject)),
        Column::dense("batch", &as_f(&batch)),
        Column::dense("study", &as_f(&study)),
        Column::dense("time", &(0..n).map(|i| i as f64).collect::<Vec<_>>()),
    ];
    for (name, col) in feature_names.iter().zip(&x) {
        columns.push(Column::dense(name.clone(), col));
    }
    let mut predictors = feature_names.clone();
    let mut leak_columns = Vec::new();
    if let (Some(v), Some(name)) = (leak, cfg.mechanism.leak_column()) {
        columns.push(Column::dense(name, &v));
        predictors.push(name.to_string());
        leak_columns.push(name.to_string());
    }
    let roles = RoleMap::new("y")
        .positive("1")
        .subject("subject")
        .batch("batch")
        .study("study")
        .time("time")
        .predictors(predictors);
    let dataset = Dataset::new(columns, roles, Some(TaskKind::BinaryClassification))?;
    Ok(SimDataset {
        dataset,
        config: cfg.clone(),
        leak_columns,
        feature_names,
        beta,
        latent_noise: ar,
        outcome: y,
    })
}

/// Learner, preprocessing and permutation settings shared by grid tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub learner: LearnerSpec,
    pub preprocess: PreprocSpec,
    pub v: usize,
    pub b: usize,
    pub alpha: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            learner: LearnerSpec::glmnet(0.9),
            preprocess: PreprocSpec::standard(),
            v: 5,
            b: 200,
            alpha: 0.05,
        }
    }
}

/// Split settings for a simulated dataset. Batch-blocked plans hold out one
/// batch per fold and study plans one study.
pub fn split_config_for(mode: &SplitMode, sim: &SimConfig, v: usize, seed: u64) -> SplitConfig {
    let v = match mode {
        SplitMode::BatchBlocked => sim.batches,
        SplitMode::StudyLoocv => sim.studies,
        _ => v,
    };
    SplitConfig::new(mode.clone(), v).seed(seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridTask {
    pub mechanism: Mechanism,
    pub mode: SplitMode,
    pub n: usize,
    pub p: usize,
    pub s: f64,
    pub rep: usize,
    pub base_seed: u64,
}

impl GridTask {
    /// Seed of the dataset; independent of the split mode so that modes are
    /// compared on identical data.
    pub fn data_seed(&self) -> u64 {
        derive_seed(
            self.base_seed,
            &[
                self.mechanism.tag(),
                self.n as u64,
                self.p as u64,
                self.s.to_bits(),
                self.rep as u64,
            ],
        )
    }

    pub fn key(&self) -> String {
        format!(
            "{}_{}_n{}_p{}_s{}_r{}_b{}",
            self.mechanism.label(),
            self.mode.label().replace(['+', ' '], "-"),
            self.n,
            self.p,
            self.s,
            self.rep,
            self.base_seed
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: GridTask,
    pub observed_auc: Option<f64>,
    pub perm_mean: Option<f64>,
    pub gap: Option<f64>,
    pub p_value: Option<f64>,
    pub rejected: Option<bool>,
    pub error: Option<String>,
}

/// Run one grid task end to end.
pub fn run_task(task: &GridTask, pipe: &PipelineConfig) -> TaskResult {
    let out = (|| -> Result<_> {
        let seed = task.data_seed();
        let cfg = SimConfig::new(task.mechanism, task.n, task.p, task.s, seed);
        let sim = simulate(&cfg)?;
        let plan = make_split_plan(
            &sim.dataset,
            &split_config_for(&task.mode, &cfg, pipe.v, derive_seed(seed, &[1])),
        )?;
        let fit_cfg = FitConfig::new(pipe.learner.clone(), pipe.preprocess.clone())
            .metrics(vec![MetricName::Auc])
            .seed(derive_seed(seed, &[2]))
            .store_refit_data(false);
        let fr = fit_resample(&sim.dataset, &plan, &fit_cfg)?;
        let perm = perm_gap(
            &fr,
            &PermutationConfig {
                b: pipe.b,
                perm_refit: PermRefit::Never,
                seed: derive_seed(seed, &[3]),
                ..PermutationConfig::default()
            },
        )?;
        Ok(perm)
    })();
    match out {
        Ok(perm) => TaskResult {
            task: task.clone(),
            observed_auc: Some(perm.observed),
            perm_mean: Some(perm.perm_mean),
            gap: Some(perm.gap),
            p_value: Some(perm.p_value),
            rejected: Some(perm.p_value < pipe.alpha),
            error: None,
        },
        Err(e) => TaskResult {
            task: task.clone(),
            observed_auc: None,
            perm_mean: None,
            gap: None,
            p_value: None,
            rejected: None,
            error: Some(e.to_string()),
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub mechanisms: Vec<Mechanism>,
    pub modes: Vec<SplitMode>,
    pub ns: Vec<usize>,
    pub ps: Vec<usize>,
    pub ss: Vec<f64>,
    pub seeds: usize,
    pub base_seed: u64,
}

impl GridSpec {
    pub fn new(
        mechanisms: Vec<Mechanism>,
        ns: Vec<usize>,
        ps: Vec<usize>,
        ss: Vec<f64>,
        seeds: usize,
    ) -> Self {
        GridSpec {
            mechanisms,
            modes: vec![SplitMode::SubjectGrouped],
            ns,
            ps,
            ss,
            seeds,
            base_seed: 1,
        }
    }

    pub fn tasks(&self) -> Vec<GridTask> {
        let mut out = Vec::new();
        for &mechanism in &self.mechanisms {
            for mode in &self.modes {
                for &n in &self.ns {
                    for &p in &self.ps {
                        for &s in &self.ss {
                            for rep in 0..self.seeds {
                                out.push(GridTask {
                                    mechanism,
                                    mode: mode.clone(),
                                    n,
                                    p,
                                    s,
                                    rep,
                                    base_seed: self.base_seed,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Aggregated results of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub mechanism: Mechanism,
    pub mode: String,
    pub n: usize,
    pub p: usize,
    pub s: f64,
    pub tasks: usize,
    pub failed: usize,
    pub rejections: usize,
    pub rejection_rate: f64,
    /// Binomial standard error over the tasks that completed.
    pub se: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub mean_auc: f64,
    pub mean_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub spec: GridSpec,
    pub pipeline: PipelineConfig,
    pub tasks: Vec<TaskResult>,
    pub cells: Vec<CellSummary>,
}

impl GridResult {
    pub fn cell(
        &self,
        mechanism: Mechanism,
        mode: &SplitMode,
        n: usize,
        p: usize,
        s: f64,
    ) -> Option<&CellSummary> {
        let mode = mode.label();
        self.cells.iter().find(|c| {
            c.mechanism == mechanism && c.mode == mode && c.n == n && c.p == p && c.s == s
        })
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "mechanism",
            "mode",
            "n",
            "p",
            "s",
            "tasks",
            "failed",
            "rejection_rate",
            "se",
            "wilson_lo",
            "wilson_hi",
            "mean_auc",
            "mean_gap",
        ])
        .map_err(Error::from)?;
        for c in &self.cells {
            wr.write_record([
                c.mechanism.label().to_string(),
                c.mode.clone(),
                c.n.to_string(),
                c.p.to_string(),
                c.s.to_string(),
                c.tasks.to_string(),
                c.failed.to_string(),
                format!("{:.4}", c.rejection_rate),
                format!("{:.4}", c.se),
                format!("{:.4}", c.wilson_lo),
                format!("{:.4}", c.wilson_hi),
                format!("{:.4}", c.mean_auc),
                format!("{:.4}", c.mean_gap),
            ])
            .map_err(Error::from)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn summarize_cells(tasks: &[TaskResult]) -> Vec<CellSummary> {
    let mut order: Vec<(Mechanism, String, usize, usize, u64)> = Vec::new();
    let mut cells: BTreeMap<(Mechanism, String, usize, usize, u64), Vec<&TaskResult>> =
        BTreeMap::new();
    for t in tasks {
        let k = (
            t.task.mechanism,
            t.task.mode.label(),
            t.task.n,
            t.task.p,
            t.task.s.to_bits(),
        );
        if !cells.contains_key(&k) {
            order.push(k.clone());
        }
        cells.entry(k).or_default().push(t);
    }
    order
        .into_iter()
        .map(|k| {
            let ts = &cells[&k];
            let ok: Vec<&&TaskResult> = ts.iter().filter(|t| t.error.is_none()).collect();
            let m = ok.len();
            let rej = ok.iter().filter(|t| t.rejected == Some(true)).count();
            let rate = if m > 0 {
                rej as f64 / m as f64
            } else {
                f64::NAN
            };
            let se = if m > 0 {
                (rate * (1.0 - rate) / m as f64).sqrt()
            } else {
                f64::NAN
            };
            let (lo, hi) = if m > 0 {
                wilson_interval(rej, m, 0.95)
            } else {
                (f64::NAN, f64::NAN)
            };
            let aucs: Vec<f64> = ok.iter().filter_map(|t| t.observed_auc).collect();
            let gaps: Vec<f64> = ok.iter().filter_map(|t| t.gap).collect();
            CellSummary {
                mechanism: k.0,
                mode: k.1.clone(),
                n: k.2,
                p: k.3,
                s: f64::from_bits(k.4),
                tasks: ts.len(),
                failed: ts.len() - m,
                rejections: rej,
                rejection_rate: rate,
                se,
                wilson_lo: lo,
                wilson_hi: hi,
                mean_auc: if aucs.is_empty() {
                    f64::NAN
                } else {
                    mean(&aucs)
                },
                mean_gap: if gaps.is_empty() {
                    f64::NAN
                } else {
                    mean(&gaps)
                },
            }
        })
        .collect()
}

/// Write `bytes` to `path` through a temporary file and a rename, so a
/// reader never sees a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn checkpoint_path(dir: &Path, task: &GridTask) -> PathBuf {
    dir.join(format!("task_{}.json", task.key()))
}

fn load_checkpoint(dir: &Path, task: &GridTask) -> Option<TaskResult> {
    let text = fs::read_to_string(checkpoint_path(dir, task)).ok()?;
    let tr: TaskResult = serde_json::from_str(&text).ok()?;
    (tr.task == *task).then_some(tr)
}

/// Run every task of the grid in parallel. With a checkpoint directory each
/// finished task is stored as JSON and reused on the next run.
pub fn run_grid(
    spec: &GridSpec,
    pipe: &PipelineConfig,
    checkpoint: Option<&Path>,
) -> Result<GridResult> {
    if spec.seeds == 0 {
        return Err(Error::invalid("grid needs at least one seed"));
    }
    if let Some(dir) = checkpoint {
        fs::create_dir_all(dir)?;
    }
    let tasks = spec.tasks();
    let results: Vec<TaskResult> = tasks
        .par_iter()
        .map(|t| -> Result<TaskResult> {
            if let Some(dir) = checkpoint {
                if let Some(done) = load_checkpoint(dir, t) {
                    return Ok(done);
                }
            }
            let r = run_task(t, pipe);
            if let Some(dir) = checkpoint {
                write_atomic(
                    &checkpoint_path(dir, t),
                    serde_json::to_string_pretty(&r)?.as_bytes(),
                )?;
            }
            Ok(r)
        })
        .collect::<Result<_>>()?;
    Ok(GridResult {
        spec: spec.clone(),
        pipeline: pipe.clone(),
        cells: summarize_cells(&results),
        tasks: results,
    })
}

/// Mechanism-by-split-mode grid at a single `(n, p, s)` point.
#[allow(clippy::too_many_arguments)]
pub fn run_split_mode_grid(
    modes: &[SplitMode],
    mechanisms: &[Mechanism],
    n: usize,
    p: usize,
    s: f64,
    seeds: usize,
    base_seed: u64,
    pipe: &PipelineConfig,
    checkpoint: Option<&Path>,
) -> Result<GridResult> {
    let spec = GridSpec {
        mechanisms: mechanisms.to_vec(),
        modes: modes.to_vec(),
        ns: vec![n],
        ps: vec![p],
        ss: vec![s],
        seeds,
        base_seed,
    };
    run_grid(&spec, pipe, checkpoint)
}

/// Settings of the paired leaky-versus-guarded experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DlsiSimConfig {
    pub n: usize,
    pub p: usize,
    pub s: f64,
    /// Standard deviation of the noise added to the outcome copy.
    pub peek_sd: f64,
    pub repeats: usize,
    pub v: usize,
    pub learner: LearnerSpec,
    pub preprocess: PreprocSpec,
    pub dlsi: DlsiConfig,
}

impl Default for DlsiSimConfig {
    fn default() -> Self {
        DlsiSimConfig {
            n: 200,
            p: 20,
            s: 1.0,
            peek_sd: 0.3,
            repeats: 20,
            v: 5,
            learner: LearnerSpec::glmnet(0.9),
            preprocess: PreprocSpec::standard(),
            dlsi: DlsiConfig::default(),
        }
    }
}

impl DlsiSimConfig {
    fn fit_config(&self, seed: u64) -> FitConfig {
        FitConfig::new(self.learner.clone(), self.preprocess.clone())
            .metrics(vec![MetricName::Auc])
            .seed(seed)
            .store_refit_data(false)
    }
}

/// One paired replicate: a peek feature is added to the leaky arm, both arms
/// share a repeated subject-grouped plan.
pub fn dlsi_power_replicate(cfg: &DlsiSimConfig, seed: u64) -> Result<DeltaLsiResult> {
    let mut sc = SimConfig::new(
        Mechanism::PeekNorm,
        cfg.n,
        cfg.p,
        cfg.s,
        derive_seed(seed, &[0xD1]),
    );
    sc.peek_var = cfg.peek_sd * cfg.peek_sd;
    let sim = simulate(&sc)?;
    let guarded_ds = sim.clean()?;
    let plan = make_split_plan(
        &sim.dataset,
        &SplitConfig::new(SplitMode::SubjectGrouped, cfg.v)
            .repeats(cfg.repeats)
            .seed(derive_seed(seed, &[0xD2])),
    )?;
    let fit_seed = derive_seed(seed, &[0xD3]);
    let leaky = fit_resample(&sim.dataset, &plan, &cfg.fit_config(fit_seed))?;
    let guarded = fit_resample(&guarded_ds, &plan, &cfg.fit_config(fit_seed))?;
    let dcfg = DlsiConfig {
        seed: derive_seed(seed, &[0xD4]),
        ..cfg.dlsi.clone()
    };
    delta_lsi(&leaky, &guarded, &dcfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullReplicate {
    pub deltas: Vec<f64>,
    pub delta_metric: f64,
    pub delta_lsi: f64,
    pub signflip: SignFlipResult,
}

fn mean_auc(fr: &FitResult) -> Result<f64> {
    fr.summary(MetricName::Auc)
        .map(|s| s.mean)
        .ok_or_else(|| Error::Fit("no AUC summary".into()))
}

/// One null replicate: each repeat draws a fresh dataset from the same
/// population and gives both arms their own pure-noise feature.
pub fn dlsi_null_replicate(cfg: &DlsiSimConfig, seed: u64) -> Result<NullReplicate> {
    let deltas: Vec<f64> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| -> Result<f64> {
            let rs = derive_seed(seed, &[0xE0, r as u64]);
            let sim = simulate(&SimConfig::new(Mechanism::None, cfg.n, cfg.p, cfg.s, rs))?;
            let mut rng: Rng = rng_from(rs, &[0xE1]);
            let mut noise =
                || -> Vec<f64> { (0..cfg.n).map(|_| rng.sample(StandardNormal)).collect() };
            let a = sim
                .dataset
                .with_predictor(Column::dense("noise_a", &noise()))?;
            let b = sim
                .dataset
                .with_predictor(Column::dense("noise_b", &noise()))?;
            let plan: SplitPlan = make_split_plan(
                &a,
                &SplitConfig::new(SplitMode::SubjectGrouped, cfg.v).seed(derive_seed(rs, &[0xE2])),
            )?;
            let fit_seed = derive_seed(rs, &[0xE3]);
            let fa = fit_resample(&a, &plan, &cfg.fit_config(fit_seed))?;
            let fb = fit_resample(&b, &plan, &cfg.fit_config(fit_seed))?;
            Ok(mean_auc(&fa)? - mean_auc(&fb)?)
        })
        .collect::<Result<_>>()?;
    let signflip = sign_flip_test(
        &deltas,
        Exchangeability::Iid,
        cfg.dlsi.m_flip,
        derive_seed(seed, &[0xE4]),
        None,
    )?;
    Ok(NullReplicate {
        delta_metric: mean(&deltas),
        delta_lsi: huber_location(&deltas, &cfg.dlsi.huber)?,
        deltas,
        signflip,
    })
}

/// Multi-study synthetic data for the four-arm decomposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourArmConfig {
    pub studies: usize,
    pub per_study: usize,
    pub p: usize,
    /// Features carrying a weak share of the signal.
    pub signal_features: usize,
    pub signal: f64,
    /// Standard deviation of the study-level outcome offsets (logit scale).
    pub study_effect: f64,
    /// Standard deviation of study-specific feature shifts.
    pub study_shift: f64,
    /// Genes kept by the t-test filter in the guarded arm.
    pub top_k: usize,
    /// Noise of the outcome copy in the leaky arm.
    pub peek_sd: f64,
}

impl Default for FourArmConfig {
    fn default() -> Self {
        FourArmConfig {
            studies: 8,
            per_study: 60,
            p: 200,
            signal_features: 40,
            signal: 1.2,
            study_effect: 1.0,
            study_shift: 0.5,
            top_k: 10,
            peek_sd: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourArmResult {
    pub guarded: f64,
    pub guarded_no_fs: f64,
    pub naive: f64,
    pub leaky: f64,
}

impl FourArmResult {
    pub fn monotone(&self) -> bool {
        self.guarded < self.guarded_no_fs
            && self.guarded_no_fs < self.naive
            && self.naive < self.leaky
    }
}

/// Data for the four-arm run: clean dataset plus the three leak-prone
/// columns (per-study outcome mean, noisy outcome copy, global first PC).
pub fn four_arm_data(cfg: &FourArmConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = cfg.studies * cfg.per_study;
    let mut rng = rng_from(seed, &[0xF0]);
    let study: Vec<usize> = (0..n).map(|i| i / cfg.per_study).collect();
    let offsets: Vec<f64> = (0..cfg.studies)
        .map(|_| cfg.study_effect * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let shifts: Vec<Vec<f64>> = (0..cfg.studies)
        .map(|_| {
            (0..cfg.p)
                .map(|_| cfg.study_shift * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let k = cfg.signal_features.min(cfg.p);
    let w = cfg.signal / (k as f64).sqrt();
    let mut x = vec![vec![0.0; n]; cfg.p];
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut eta = offsets[study[i]];
        for j in 0..cfg.p {
            let z: f64 = rng.sample(StandardNormal);
            if j < k {
                eta += w * z;
            }
            x[j][i] = z + shifts[study[i]][j];
        }
        y[i] = if rng.random::<f64>() < normal_cdf(eta) {
            1.0
        } else {
            0.0
        };
    }
    let names: Vec<String> = (1..=cfg.p).map(|j| format!("g{j}")).collect();
    let mut columns = vec![
        Column::dense("y", &y),
        Column::dense(
            "study",
            &study.iter().map(|&s| s as f64).collect::<Vec<_>>(),
        ),
    ];
    for (nm, col) in names.iter().zip(&x) {
        columns.push(Column::dense(nm.clone(), col));
    }
    let roles = RoleMap::new("y")
        .positive("1")
        .study("study")
        .predictors(names.clone());
    let clean = Dataset::new(columns, roles, Some(TaskKind::BinaryClassification))?;

    let study_mean = group_means(&y, &study, cfg.studies);
    let peek: Vec<f64> = y
        .iter()
        .map(|&v| v + cfg.peek_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let m = nalgebra::DMatrix::from_fn(n, cfg.p, |i, j| x[j][i]);
    let (_, pcs) = crate::preprocess::fit_transform(
        &PreprocSpec::new(vec![
            PreprocStep::NormalizeZscore,
            PreprocStep::ProjectPca { m: 1 },
        ])?,
        &m,
        &y,
        &names,
        TaskKind::BinaryClassification,
        seed,
    )?;
    let pc1: Vec<f64> = pcs.column(0).iter().copied().collect();
    let leaky = clean
        .with_predictor(Column::dense("leak_study_mean", &study_mean))?
        .with_predictor(Column::dense("leak_peek", &peek))?
        .with_predictor(Column::dense("leak_pc1", &pc1))?;
    Ok((clean, leaky))
}

/// Mean out-of-fold AUC of the four workflows: guarded (study hold-out with
/// a t-test filter), guarded without the filter, naive row-wise CV on clean
/// data, and row-wise CV with the leak-prone columns.
pub fn four_arm_run(cfg: &FourArmConfig, seed: u64) -> Result<FourArmResult> {
    let (clean, leaky) = four_arm_data(cfg, seed)?;
    let learner = LearnerSpec::glmnet(0.9);
    let fs = PreprocSpec::new(vec![
        PreprocStep::ImputeMedian,
        PreprocStep::NormalizeZscore,
        PreprocStep::SelectTtest { k: cfg.top_k },
    ])?;
    let std = PreprocSpec::standard();
    let loso = make_split_plan(
        &clean,
        &SplitConfig::new(SplitMode::StudyLoocv, cfg.studies).seed(seed),
    )?;
    let rows = make_split_plan(&clean, &SplitConfig::new(SplitMode::RowWise, 5).seed(seed))?;
    let run = |ds: &Dataset, plan: &SplitPlan, pre: &PreprocSpec| -> Result<f64> {
        let fc = FitConfig::new(learner.clone(), pre.clone())
            .metrics(vec![MetricName::Auc])
            .seed(derive_seed(seed, &[0xF1]))
            .store_refit_data(false);
        mean_auc(&fit_resample(ds, plan, &fc)?)
    };
    Ok(FourArmResult {
        guarded: run(&clean, &loso, &fs)?,
        guarded_no_fs: run(&clean, &loso, &std)?,
        naive: run(&clean, &rows, &std)?,
        leaky: run(&leaky, &rows, &std)?,
    })
}
