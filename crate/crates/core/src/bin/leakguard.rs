use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use leakguard::audit::{
    audit, AuditConfig, AuditReport, MultiScanConfig, PermRefit, PermutationConfig,
};
use leakguard::dlsi::{delta_lsi, DeltaLsiResult, DlsiConfig, Exchangeability};
use leakguard::learners::LearnerSpec;
use leakguard::metrics::MetricName;
use leakguard::preprocess::PreprocSpec;
use leakguard::report::{render_html, ReportBundle, ReportPayload};
use leakguard::resample::{
    fit_resample, tune_resample, DataSource, FitConfig, FitResult, Grid, Selection, TuneConfig,
};
use leakguard::sim::{run_grid, simulate, GridSpec, Mechanism, PipelineConfig, SimConfig};
use leakguard::split::{
    make_split_plan, overlap_check, SplitConfig, SplitMode, SplitPlan, TimeParams,
};
use leakguard::{load_csv, write_csv, CsvOptions, Dataset, Error, Result, RoleMap};

#[derive(Parser)]
#[command(
    name = "leakguard",
    version,
    about = "Leakage-aware resampling, auditing and inflation inference"
)]
struct Cli {
    /// Suppress informational messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    /// Worker threads (overrides LEAKGUARD_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a split plan from a CSV dataset.
    Split(SplitArgs),
    /// Cross-validate a learner with guarded preprocessing.
    Fit(FitArgs),
    /// Nested tuning of the penalty of a glmnet or ridge learner.
    Tune(TuneArgs),
    /// Audit a fit for leakage.
    Audit(AuditArgs),
    /// Compare a leaky and a guarded fit.
    Dlsi(DlsiArgs),
    /// Run simulation grids or write one simulated dataset.
    Simulate(SimArgs),
    /// Render an audit or dlsi result as a single-file HTML report.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "outcome")]
    outcome: String,
    /// Positive class level of a binary outcome.
    #[arg(long)]
    positive: Option<String>,
    #[arg(long)]
    subject: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    study: Option<String>,
    #[arg(long)]
    time: Option<String>,
    /// Comma-separated predictors; default is every column without a role.
    #[arg(long, value_delimiter = ',')]
    predictors: Vec<String>,
    /// Columns read as categorical regardless of content.
    #[arg(long, value_delimiter = ',')]
    categorical: Vec<String>,
    /// Treat the outcome as continuous.
    #[arg(long)]
    regression: bool,
}

impl DataArgs {
    fn load(&self, extra_group: Option<(&SplitMode, &str)>) -> Result<Dataset> {
        let src = self.source(extra_group)?;
        load_csv(&src.path, src.roles, &src.options)
    }

    fn source(&self, extra_group: Option<(&SplitMode, &str)>) -> Result<DataSource> {
        let mut roles = RoleMap::new(&self.outcome);
        if let Some(p) = &self.positive {
            roles = roles.positive(p);
        }
        let mut subject = self.subject.clone();
        let mut batch = self.batch.clone();
        let mut study = self.study.clone();
        if let Some((mode, g)) = extra_group {
            match mode {
                SplitMode::SubjectGrouped => subject = subject.or(Some(g.to_string())),
                SplitMode::BatchBlocked => batch = batch.or(Some(g.to_string())),
                SplitMode::StudyLoocv => study = study.or(Some(g.to_string())),
                _ => {}
            }
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
        if let Some(c) = &self.time {
            roles = roles.time(c);
        }
        if !self.predictors.is_empty() {
            roles = roles.predictors(self.predictors.clone());
        }
        let opts = CsvOptions {
            categorical: self.categorical.clone(),
            task: self.regression.then_some(leakguard::TaskKind::Regression),
            ..CsvOptions::default()
        };
        let path = std::fs::canonicalize(&self.data).unwrap_or_else(|_| self.data.clone());
        Ok(DataSource {
            path: path.to_string_lossy().into_owned(),
            roles,
            options: opts,
        })
    }
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// subject_grouped, batch_blocked, study_loocv, time_series, combined:subject+batch, row_wise
    #[arg(long)]
    mode: String,
    /// Grouping column for single-constraint modes.
    #[arg(long)]
    group: Option<String>,
    #[arg(long, default_value_t = 5)]
    v: usize,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long)]
    stratify: bool,
    #[arg(long)]
    nested: bool,
    #[arg(long, default_value_t = 3)]
    inner_v: usize,
    /// Store fold vectors instead of row lists.
    #[arg(long)]
    compact: bool,
    #[arg(long, default_value_t = 0)]
    horizon: usize,
    #[arg(long, default_value_t = 0)]
    purge: usize,
    #[arg(long, default_value_t = 0)]
    embargo: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// glm, glmnet, glmnet:alpha=0.9,lambda=0.01, ols, ridge:lambda=1
    #[arg(long, default_value = "glmnet")]
    learner: String,
    /// Preprocessing steps, e.g. impute=median,normalize=zscore,select=ttest:100; `none` disables.
    #[arg(long, default_value = "impute=median,normalize=zscore")]
    preprocess: String,
    /// Comma-separated metrics; default depends on the task.
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
}

impl ModelArgs {
    fn learner(&self) -> Result<LearnerSpec> {
        LearnerSpec::parse(&self.learner)
    }

    fn preprocess(&self) -> Result<PreprocSpec> {
        PreprocSpec::parse(&self.preprocess)
    }

    fn metrics(&self) -> Result<Vec<MetricName>> {
        self.metrics.iter().map(|m| MetricName::parse(m)).collect()
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    plan: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Do not embed the dataset in the fit (disables refit permutations).
    #[arg(long)]
    no_store_data: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    data: DataArgs,
    /// A nested plan.
    #[arg(long)]
    plan: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Number of log-spaced penalties.
    #[arg(long, default_value_t = 10)]
    grid: usize,
    /// Explicit penalties; overrides --grid.
    #[arg(long, value_delimiter = ',')]
    lambdas: Vec<f64>,
    /// best or one_std_err
    #[arg(long, default_value = "one_std_err")]
    selection: String,
    /// Skip the final refit on all rows.
    #[arg(long)]
    no_refit: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    /// Fit JSON produced by `fit`.
    #[arg(long)]
    fit: PathBuf,
    /// Dataset for association, target and duplicate scans; defaults to the data stored in the fit.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    b: usize,
    /// auto, true or false
    #[arg(long, default_value = "auto")]
    perm_refit: String,
    #[arg(long)]
    perm_stratify: bool,
    #[arg(long)]
    return_perm: bool,
    #[arg(long, default_value = "auc")]
    metric: String,
    /// Metadata columns tested against the fold assignment.
    #[arg(long, value_delimiter = ',')]
    batch_cols: Vec<String>,
    /// Reference-matrix columns for target and duplicate scans; default is the numeric predictors.
    #[arg(long, value_delimiter = ',')]
    xref: Vec<String>,
    #[arg(long, default_value_t = 0.9)]
    target_threshold: f64,
    #[arg(long, default_value_t = 0.995)]
    dup_threshold: f64,
    #[arg(long)]
    no_multivariate: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DlsiArgs {
    #[arg(long)]
    leaky: PathBuf,
    #[arg(long)]
    guarded: PathBuf,
    #[arg(long, default_value = "auc")]
    metric: String,
    /// iid, blocked_time, by_group, within_batch
    #[arg(long, default_value = "iid")]
    exchangeability: String,
    #[arg(long)]
    block_len: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    m_boot: usize,
    #[arg(long, default_value_t = 10000)]
    m_flip: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, value_delimiter = ',', default_value = "none")]
    mechanisms: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "subject_grouped")]
    modes: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "250")]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "10")]
    p: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    s: Vec<f64>,
    /// Replicates per cell.
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    b: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 5)]
    v: usize,
    /// Directory for per-task JSON checkpoints.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Aggregated CSV table.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Full grid result as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write a single simulated dataset (first mechanism, n, p, s) instead of running a grid.
    #[arg(long)]
    write_data: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, conflicts_with_all = ["dlsi", "bundle"])]
    audit: Option<PathBuf>,
    #[arg(long, conflicts_with = "bundle")]
    dlsi: Option<PathBuf>,
    /// A bundle written earlier by --bundle-out; rendering it is reproducible.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the bundle JSON.
    #[arg(long)]
    bundle_out: Option<PathBuf>,
}

struct Ctx {
    quiet: bool,
}

impl Ctx {
    fn info(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run_split(a: &SplitArgs, ctx: &Ctx) -> Result<()> {
    let mode = SplitMode::parse(&a.mode)?;
    let ds = a.data.load(a.group.as_deref().map(|g| (&mode, g)))?;
    let mut cfg = SplitConfig::new(mode, a.v)
        .repeats(a.repeats)
        .stratify(a.stratify)
        .nested(a.nested)
        .compact(a.compact)
        .seed(a.seed)
        .time(TimeParams {
            horizon: a.horizon,
            purge: a.purge,
            embargo: a.embargo,
        });
    cfg.inner_v = a.inner_v;
    if let Some(g) = &a.group {
        cfg = cfg.group_col(g);
    }
    let plan = make_split_plan(&ds, &cfg)?;
    let ov = overlap_check(&plan, &ds)?;
    ctx.info(format!(
        "plan {}: {} folds ({} repeat(s)) over {} rows; {} group straddle(s)",
        plan.hash,
        plan.folds().len(),
        plan.repeats,
        plan.n_rows,
        ov.group_straddles.len()
    ));
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&plan)?)
}

fn run_fit(a: &FitArgs, ctx: &Ctx) -> Result<()> {
    let ds = a.data.load(None)?;
    let plan: SplitPlan = read_json(&a.plan)?;
    plan.validate_for(&ds)?;
    let cfg = FitConfig::new(a.model.learner()?, a.model.preprocess()?)
        .metrics(a.model.metrics()?)
        .seed(a.seed)
        .store_refit_data(!a.no_store_data);
    let mut fr = fit_resample(&ds, &plan, &cfg)?;
    if let Some(r) = fr.refit.as_mut() {
        r.detach(a.data.source(None)?);
    }
    let (ok, skipped, failed) = fr.status_counts();
    ctx.info(format!(
        "folds: {ok} success, {skipped} skipped, {failed} failed"
    ));
    for s in &fr.aggregate {
        ctx.info(format!("{}: mean {:.4} (n={})", s.name, s.mean, s.n_folds));
    }
    emit(a.out.as_deref(), &fr.to_json()?)
}

fn run_tune(a: &TuneArgs, ctx: &Ctx) -> Result<()> {
    let ds = a.data.load(None)?;
    let plan: SplitPlan = read_json(&a.plan)?;
    let cfg = TuneConfig {
        learner: a.model.learner()?,
        preprocess: a.model.preprocess()?,
        grid: if a.lambdas.is_empty() {
            Grid::Count(a.grid)
        } else {
            Grid::Explicit(a.lambdas.clone())
        },
        metrics: a.model.metrics()?,
        selection: Selection::parse(&a.selection)?,
        refit: !a.no_refit,
        seed: a.seed,
    };
    let tr = tune_resample(&ds, &plan, &cfg)?;
    if let Some(l) = tr.final_lambda {
        ctx.info(format!("selected penalty {l:.6} by {}", tr.metric));
    }
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&tr)?)
}

fn run_audit(a: &AuditArgs, ctx: &Ctx) -> Result<()> {
    let mut fr: FitResult = read_json(&a.fit)?;
    if let Some(r) = fr.refit.as_mut() {
        r.attach()?;
    }
    let stored = fr.refit.as_ref();
    let ds = match &a.data {
        Some(p) => {
            let roles = stored
                .and_then(|r| r.dataset.as_ref())
                .map(|d| d.roles().clone())
                .unwrap_or_else(|| RoleMap::new(&fr.outcome));
            Some(load_csv(p, roles, &CsvOptions::default())?)
        }
        None => stored.and_then(|r| r.dataset.clone()),
    };
    let plan = match &a.plan {
        Some(p) => Some(read_json::<SplitPlan>(p)?),
        None => stored.map(|r| r.plan.clone()),
    };
    if let (Some(d), Some(p)) = (&ds, &plan) {
        p.validate_for(d)?;
    }
    let cfg = AuditConfig {
        permutation: PermutationConfig {
            b: a.b,
            perm_refit: PermRefit::parse(&a.perm_refit)?,
            perm_stratify: a.perm_stratify,
            return_perm: a.return_perm,
            metric: MetricName::parse(&a.metric)?,
            seed: a.seed,
        },
        batch_cols: a.batch_cols.clone(),
        xref_cols: (!a.xref.is_empty()).then(|| a.xref.clone()),
        target_threshold: a.target_threshold,
        dup_threshold: a.dup_threshold,
        multivariate: (!a.no_multivariate).then(|| MultiScanConfig {
            seed: a.seed,
            ..MultiScanConfig::default()
        }),
        ..AuditConfig::default()
    };
    let rep: AuditReport = audit(&fr, ds.as_ref(), plan.as_ref(), &cfg)?;
    ctx.info(format!(
        "observed {:.4}, gap {:.4}, p = {:.4}. {}",
        rep.permutation.observed, rep.permutation.gap, rep.permutation.p_value, rep.interpretation
    ));
    emit(a.out.as_deref(), &rep.to_json()?)
}

fn run_dlsi(a: &DlsiArgs, ctx: &Ctx) -> Result<()> {
    let leaky: FitResult = read_json(&a.leaky)?;
    let guarded: FitResult = read_json(&a.guarded)?;
    let cfg = DlsiConfig {
        metric: MetricName::parse(&a.metric)?,
        m_boot: a.m_boot,
        m_flip: a.m_flip,
        exchangeability: Exchangeability::parse(&a.exchangeability)?,
        block_len: a.block_len,
        level: a.level,
        seed: a.seed,
        ..DlsiConfig::default()
    };
    let res: DeltaLsiResult = delta_lsi(&leaky, &guarded, &cfg)?;
    ctx.info(format!(
        "delta_metric {:.4}, delta_lsi {:.4}, tier {}",
        res.delta_metric,
        res.delta_lsi,
        res.tier.label()
    ));
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&res)?)
}

fn run_simulate(a: &SimArgs, ctx: &Ctx) -> Result<()> {
    let mechanisms: Vec<Mechanism> = a
        .mechanisms
        .iter()
        .map(|m| Mechanism::parse(m))
        .collect::<Result<_>>()?;
    if let Some(path) = &a.write_data {
        let (m, n, p, s) = (
            mechanisms[0],
            a.n.first().copied().unwrap_or(250),
            a.p.first().copied().unwrap_or(10),
            a.s.first().copied().unwrap_or(0.0),
        );
        let sim = simulate(&SimConfig::new(m, n, p, s, a.seed))?;
        write_csv(&sim.dataset, fs::File::create(path)?)?;
        ctx.info(format!("wrote {} rows to {}", n, path.display()));
        return Ok(());
    }
    let modes: Vec<SplitMode> = a
        .modes
        .iter()
        .map(|m| SplitMode::parse(m))
        .collect::<Result<_>>()?;
    let spec = GridSpec {
        mechanisms,
        modes,
        ns: a.n.clone(),
        ps: a.p.clone(),
        ss: a.s.clone(),
        seeds: a.seeds,
        base_seed: a.seed,
    };
    let pipe = PipelineConfig {
        b: a.b,
        alpha: a.alpha,
        v: a.v,
        ..PipelineConfig::default()
    };
    ctx.info(format!("running {} task(s)", spec.tasks().len()));
    let grid = run_grid(&spec, &pipe, a.checkpoint_dir.as_deref())?;
    let failed: usize = grid.cells.iter().map(|c| c.failed).sum();
    if failed > 0 {
        ctx.info(format!(
            "{failed} task(s) failed; see the JSON output for messages"
        ));
    }
    if let Some(j) = &a.json {
        fs::write(j, serde_json::to_string_pretty(&grid)?)?;
    }
    match &a.out {
        Some(p) => grid.write_csv(fs::File::create(p)?),
        None => grid.write_csv(std::io::stdout()),
    }
}

fn run_report(a: &ReportArgs, ctx: &Ctx) -> Result<()> {
    let bundle = if let Some(b) = &a.bundle {
        read_json::<ReportBundle>(b)?
    } else if let Some(p) = &a.audit {
        let rep: AuditReport = read_json(p)?;
        let cfg = serde_json::to_value(&rep.config)?;
        ReportBundle::now(ReportPayload::Audit(Box::new(rep)), cfg)
    } else if let Some(p) = &a.dlsi {
        let res: DeltaLsiResult = read_json(p)?;
        let cfg = serde_json::to_value(&res.config)?;
        ReportBundle::now(ReportPayload::Dlsi(Box::new(res)), cfg)
    } else {
        return Err(Error::invalid(
            "one of --audit, --dlsi or --bundle is required",
        ));
    };
    if let Some(b) = &a.bundle_out {
        fs::write(b, bundle.to_json()?)?;
    }
    fs::write(&a.out, render_html(&bundle))?;
    ctx.info(format!("wrote {}", a.out.display()));
    Ok(())
}

fn configure_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("LEAKGUARD_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n.filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads(cli.threads);
    let ctx = Ctx { quiet: cli.quiet };
    let res = match &cli.command {
        Command::Split(a) => run_split(a, &ctx),
        Command::Fit(a) => run_fit(a, &ctx),
        Command::Tune(a) => run_tune(a, &ctx),
        Command::Audit(a) => run_audit(a, &ctx),
        Command::Dlsi(a) => run_dlsi(a, &ctx),
        Command::Simulate(a) => run_simulate(a, &ctx),
        Command::Report(a) => run_report(a, &ctx),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
