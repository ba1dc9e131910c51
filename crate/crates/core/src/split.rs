//! Resampling plans that respect subject, batch, study, and time dependence.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::util::{rng_from, short_hash, Rng};

/// A dependence unit that a combined plan must keep intact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    Subject,
    Batch,
    Study,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    SubjectGrouped,
    BatchBlocked,
    StudyLoocv,
    TimeSeries,
    Combined(Vec<Constraint>),
    /// Plain row-level k-fold; ignores every dependence structure. Useful as
    /// a naive comparator.
    RowWise,
}

impl SplitMode {
    pub fn label(&self) -> String {
        match self {
            SplitMode::SubjectGrouped => "subject_grouped".into(),
            SplitMode::BatchBlocked => "batch_blocked".into(),
            SplitMode::StudyLoocv => "study_loocv".into(),
            SplitMode::TimeSeries => "time_series".into(),
            SplitMode::RowWise => "row_wise".into(),
            SplitMode::Combined(cs) => {
                let parts: Vec<&str> = cs
                    .iter()
                    .map(|c| match c {
                        Constraint::Subject => "subject",
                        Constraint::Batch => "batch",
                        Constraint::Study => "study",
                    })
                    .collect();
                format!("combined[{}]", parts.join("+"))
            }
        }
    }

    pub fn parse(s: &str) -> Result<SplitMode> {
        let s = s.trim();
        Ok(match s {
            "subject_grouped" => SplitMode::SubjectGrouped,
            "batch_blocked" => SplitMode::BatchBlocked,
            "study_loocv" => SplitMode::StudyLoocv,
            "time_series" => SplitMode::TimeSeries,
            "row_wise" => SplitMode::RowWise,
            _ if s.starts_with("combined") => {
                let inner = s
                    .trim_start_matches("combined")
                    .trim_matches(|c| c == ':' || c == '[' || c == ']');
                let mut cs = Vec::new();
                for part in inner.split(['+', ',']).filter(|p| !p.is_empty()) {
                    cs.push(match part.trim() {
                        "subject" => Constraint::Subject,
                        "batch" => Constraint::Batch,
                        "study" => Constraint::Study,
                        other => {
                            return Err(Error::invalid(format!(
                                "unknown combined constraint `{other}`"
                            )))
                        }
                    });
                }
                SplitMode::Combined(cs)
            }
            _ => return Err(Error::invalid(format!("unknown split mode `{s}`"))),
        })
    }

    /// Whether rows are assigned to folds through whole groups.
    pub fn is_grouped(&self) -> bool {
        matches!(
            self,
            SplitMode::SubjectGrouped
                | SplitMode::BatchBlocked
                | SplitMode::StudyLoocv
                | SplitMode::Combined(_)
        )
    }
}

/// Exclusion windows for time-series plans, in rows of time order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeParams {
    pub horizon: usize,
    pub purge: usize,
    pub embargo: usize,
}

impl TimeParams {
    pub fn gap(&self) -> usize {
        self.horizon + self.purge + self.embargo
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    /// 1-based.
    pub repeat: usize,
    /// 1-based.
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub skipped: bool,
    /// Inner resampling folds over `train` (nested plans only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inner: Vec<Fold>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub v: usize,
    pub repeats: usize,
    pub seed: u64,
    pub hash: String,
    pub n_rows: usize,
    pub data_hash: String,
    #[serde(default)]
    pub group_cols: Vec<String>,
    #[serde(default)]
    pub time_col: Option<String>,
    #[serde(default)]
    pub stratified: bool,
    #[serde(default)]
    pub nested: bool,
    #[serde(default)]
    pub inner_v: Option<usize>,
    #[serde(default)]
    pub time_params: TimeParams,
    /// Set when the time column had ties, resolved by row order.
    #[serde(default)]
    pub time_ties: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub folds: Vec<Fold>,
    /// One per-row fold vector (1-based fold ids) per repeat.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compact: Option<Vec<Vec<u32>>>,
}

/// Parameters for [`make_split_plan`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub mode: SplitMode,
    pub v: usize,
    pub repeats: usize,
    pub stratify: bool,
    pub nested: bool,
    pub inner_v: usize,
    pub compact: bool,
    pub seed: u64,
    pub time: TimeParams,
    /// Overrides the role column used for grouping in single-constraint modes.
    pub group_col: Option<String>,
}

impl SplitConfig {
    pub fn new(mode: SplitMode, v: usize) -> Self {
        SplitConfig {
            mode,
            v,
            repeats: 1,
            stratify: false,
            nested: false,
            inner_v: 3,
            compact: false,
            seed: 1,
            time: TimeParams::default(),
            group_col: None,
        }
    }

    pub fn repeats(mut self, r: usize) -> Self {
        self.repeats = r;
        self
    }

    pub fn stratify(mut self, on: bool) -> Self {
        self.stratify = on;
        self
    }

    pub fn nested(mut self, on: bool) -> Self {
        self.nested = on;
        self
    }

    pub fn compact(mut self, on: bool) -> Self {
        self.compact = on;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn time(mut self, tp: TimeParams) -> Self {
        self.time = tp;
        self
    }

    pub fn group_col(mut self, col: impl Into<String>) -> Self {
        self.group_col = Some(col.into());
        self
    }
}

fn role_col(ds: &Dataset, c: Constraint) -> Result<String> {
    let roles = ds.roles();
    let (col, what) = match c {
        Constraint::Subject => (&roles.subject, "subject"),
        Constraint::Batch => (&roles.batch, "batch"),
        Constraint::Study => (&roles.study, "study"),
    };
    col.clone()
        .ok_or_else(|| Error::invalid(format!("mode requires a {what} column")))
}

/// Columns whose groups the plan keeps intact.
fn grouping_columns(ds: &Dataset, cfg: &SplitConfig) -> Result<Vec<String>> {
    let single = |c| match &cfg.group_col {
        Some(g) => Ok(vec![g.clone()]),
        None => role_col(ds, c).map(|s| vec![s]),
    };
    match &cfg.mode {
        SplitMode::SubjectGrouped => single(Constraint::Subject),
        SplitMode::BatchBlocked => single(Constraint::Batch),
        SplitMode::StudyLoocv => single(Constraint::Study),
        SplitMode::Combined(cs) => {
            if cs.is_empty() {
                return Err(Error::invalid(
                    "combined mode needs at least one constraint",
                ));
            }
            let mut cols: Vec<String> =
                cs.iter().map(|&c| role_col(ds, c)).collect::<Result<_>>()?;
            cols.dedup();
            Ok(cols)
        }
        SplitMode::TimeSeries | SplitMode::RowWise => Ok(Vec::new()),
    }
}

/// Group id per row: connected components of rows sharing a value in any of
/// `cols`. With no columns every row is its own group.
pub fn group_ids(ds: &Dataset, cols: &[String]) -> Result<Vec<u32>> {
    let n = ds.n_rows();
    if cols.is_empty() {
        return Ok((0..n as u32).collect());
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for col in cols {
        let (codes, _) = ds.column(col)?.group_codes();
        let mut first: HashMap<u32, usize> = HashMap::new();
        for (i, c) in codes.into_iter().enumerate() {
            match first.get(&c) {
                Some(&j) => {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
                None => {
                    first.insert(c, i);
                }
            }
        }
    }
    let mut ids = HashMap::new();
    Ok((0..n)
        .map(|i| {
            let r = find(&mut parent, i);
            let next = ids.len() as u32;
            *ids.entry(r).or_insert(next)
        })
        .collect())
}

struct GroupStats {
    rows: Vec<usize>,
    target: f64,
}

/// Assign the groups present in `rows` to `v` folds. Returns the test sets.
fn assign_groups(
    rows: &[usize],
    groups: &[u32],
    y: &[f64],
    v: usize,
    stratify: bool,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut by_group: BTreeMap<u32, GroupStats> = BTreeMap::new();
    for &r in rows {
        let g = by_group.entry(groups[r]).or_insert(GroupStats {
            rows: Vec::new(),
            target: 0.0,
        });
        g.rows.push(r);
        g.target += y[r];
    }
    let gs: Vec<GroupStats> = by_group.into_values().collect();
    if v < 2 {
        return Err(Error::invalid("v must be at least 2"));
    }
    if v > gs.len() {
        return Err(Error::invalid(format!(
            "v = {v} exceeds the number of distinct groups ({})",
            gs.len()
        )));
    }
    let mut order: Vec<usize> = (0..gs.len()).collect();
    order.shuffle(rng);
    let mut fold_of = vec![0usize; gs.len()];
    let mut size = vec![0usize; v];
    let mut sum = vec![0.0f64; v];

    if stratify {
        let total: f64 = gs.iter().map(|g| g.target).sum();
        let p = total / rows.len() as f64;
        let mut best: Option<((f64, f64), Vec<usize>)> = None;
        for _ in 0..STRATIFY_STARTS {
            let mut f_of = vec![0usize; gs.len()];
            let mut sz = vec![0usize; v];
            let mut sm = vec![0.0f64; v];
            greedy_stratified(&gs, &order, v, p, rng, &mut f_of, &mut sz, &mut sm);
            let spread = sz.iter().max().unwrap() - sz.iter().min().unwrap();
            let allowed = spread.max(balanced_spread(&gs, &order, v));
            let score = refine_assignment(&gs, &mut f_of, &mut sz, &mut sm, p, allowed);
            if best.as_ref().is_none_or(|(b, _)| {
                score.0 < b.0 - 1e-12 || (score.0 <= b.0 + 1e-12 && score.1 < b.1 - 1e-12)
            }) {
                best = Some((score, f_of));
            }
            order.shuffle(rng);
        }
        fold_of = best.expect("at least one start").1;
    } else {
        for &g in &order {
            let f = (0..v).min_by_key(|&f| size[f]).unwrap();
            fold_of[g] = f;
            size[f] += gs[g].rows.len();
            sum[f] += gs[g].target;
        }
    }

    let mut tests = vec![Vec::new(); v];
    for (g, stats) in gs.iter().enumerate() {
        tests[fold_of[g]].extend_from_slice(&stats.rows);
    }
    for t in &mut tests {
        t.sort_unstable();
    }
    Ok(tests)
}

fn stratification_score(size: &[usize], sum: &[f64], p: f64) -> (f64, f64) {
    let mut worst = 0.0f64;
    let mut ss = 0.0;
    for (s, t) in size.iter().zip(sum) {
        if *s > 0 {
            let d = (t / *s as f64 - p).abs();
            worst = worst.max(d);
            ss += d * d;
        }
    }
    (worst, ss)
}

/// Fold size spread of the unstratified assignment in `order`.
fn balanced_spread(gs: &[GroupStats], order: &[usize], v: usize) -> usize {
    let mut size = vec![0usize; v];
    for &g in order {
        let f = (0..v).min_by_key(|&f| size[f]).unwrap();
        size[f] += gs[g].rows.len();
    }
    size.iter().max().unwrap() - size.iter().min().unwrap()
}

/// Independent greedy starts of the stratified assignment.
const STRATIFY_STARTS: usize = 8;

/// Largest groups first, each into the fold that stays smallest, ties broken
/// by the smaller prevalence deviation.
#[allow(clippy::too_many_arguments)]
fn greedy_stratified(
    gs: &[GroupStats],
    order: &[usize],
    v: usize,
    p: f64,
    rng: &mut Rng,
    fold_of: &mut [usize],
    size: &mut [usize],
    sum: &mut [f64],
) {
    let mut order = order.to_vec();
    order.sort_by(|&a, &b| gs[b].rows.len().cmp(&gs[a].rows.len()));
    for &g in &order {
        let s = gs[g].rows.len();
        let start = rng.random_range(0..v);
        let mut best = (usize::MAX, f64::INFINITY, 0usize);
        for k in 0..v {
            let f = (start + k) % v;
            let new_size = size[f] + s;
            let dev = ((sum[f] + gs[g].target) / new_size as f64 - p).abs();
            if new_size < best.0 || (new_size == best.0 && dev < best.1 - 1e-12) {
                best = (new_size, dev, f);
            }
        }
        fold_of[g] = best.2;
        size[best.2] += s;
        sum[best.2] += gs[g].target;
    }
}

/// Single-group moves and pairwise swaps that lower the worst fold's
/// deviation from the global target mean (then the sum of squared
/// deviations) while keeping the fold size spread within `max_spread` and
/// every fold non-empty. Returns the final score.
fn refine_assignment(
    gs: &[GroupStats],
    fold_of: &mut [usize],
    size: &mut [usize],
    sum: &mut [f64],
    p: f64,
    max_spread: usize,
) -> (f64, f64) {
    let v = size.len();
    let spread = |size: &[usize]| size.iter().max().unwrap() - size.iter().min().unwrap();
    let better = |cand: (f64, f64), cur: (f64, f64)| {
        cand.0 < cur.0 - 1e-12 || (cand.0 <= cur.0 + 1e-12 && cand.1 < cur.1 - 1e-12)
    };
    let mut current = stratification_score(size, sum, p);
    for _ in 0..100 {
        let mut improved = false;
        for a in 0..gs.len() {
            let fa = fold_of[a];
            let sa = gs[a].rows.len();
            for fb in 0..v {
                if fb == fa || size[fa] == sa {
                    continue;
                }
                size[fa] -= sa;
                size[fb] += sa;
                sum[fa] -= gs[a].target;
                sum[fb] += gs[a].target;
                let cand = stratification_score(size, sum, p);
                if spread(size) <= max_spread && better(cand, current) {
                    fold_of[a] = fb;
                    current = cand;
                    improved = true;
                    break;
                }
                size[fa] += sa;
                size[fb] -= sa;
                sum[fa] += gs[a].target;
                sum[fb] -= gs[a].target;
            }
        }
        for a in 0..gs.len() {
            for b in (a + 1)..gs.len() {
                let (fa, fb) = (fold_of[a], fold_of[b]);
                if fa == fb
                    || (gs[a].target == gs[b].target && gs[a].rows.len() == gs[b].rows.len())
                {
                    continue;
                }
                let (sa, sb) = (gs[a].rows.len(), gs[b].rows.len());
                size[fa] = size[fa] - sa + sb;
                size[fb] = size[fb] - sb + sa;
                let dt = gs[b].target - gs[a].target;
                sum[fa] += dt;
                sum[fb] -= dt;
                let cand = stratification_score(size, sum, p);
                if spread(size) <= max_spread && better(cand, current) {
                    fold_of[a] = fb;
                    fold_of[b] = fa;
                    current = cand;
                    improved = true;
                } else {
                    size[fa] = size[fa] + sa - sb;
                    size[fb] = size[fb] + sb - sa;
                    sum[fa] -= dt;
                    sum[fb] += dt;
                }
            }
        }
        if !improved {
            break;
        }
    }
    current
}

/// Forward-chaining folds over `order` (rows sorted by time).
fn time_series_folds(
    order: &[usize],
    times: &[f64],
    v: usize,
    tp: TimeParams,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let n = order.len();
    if v < 1 {
        return Err(Error::invalid("v must be at least 1"));
    }
    let m = (n * v).div_ceil(v + 1);
    if m < v {
        return Err(Error::invalid(format!(
            "{n} rows are too few for {v} time blocks"
        )));
    }
    let start = n - m;
    let gap = tp.gap();
    let mut out = Vec::with_capacity(v);
    for k in 0..v {
        let lo = start + k * m / v;
        let hi = start + (k + 1) * m / v;
        let mut test: Vec<usize> = order[lo..hi].to_vec();
        let t0 = times[order[lo]];
        let mut train: Vec<usize> = order[..lo.saturating_sub(gap)]
            .iter()
            .copied()
            .filter(|&r| times[r] < t0)
            .collect();
        test.sort_unstable();
        train.sort_unstable();
        out.push((train, test));
    }
    Ok(out)
}

fn complement(all: &[usize], test: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(all.len().saturating_sub(test.len()));
    let mut j = 0;
    for &r in all {
        while j < test.len() && test[j] < r {
            j += 1;
        }
        if j < test.len() && test[j] == r {
            continue;
        }
        out.push(r);
    }
    out
}

struct PlanContext<'a> {
    mode: &'a SplitMode,
    groups: Vec<u32>,
    y: Vec<f64>,
    times: Vec<f64>,
    time_rank: Vec<usize>,
    tp: TimeParams,
}

impl PlanContext<'_> {
    /// Train/test pairs over the candidate `rows` (sorted).
    fn folds_over(
        &self,
        rows: &[usize],
        v: usize,
        stratify: bool,
        rng: &mut Rng,
    ) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        match self.mode {
            SplitMode::TimeSeries => {
                let mut order = rows.to_vec();
                order.sort_by_key(|&r| self.time_rank[r]);
                time_series_folds(&order, &self.times, v, self.tp)
            }
            SplitMode::StudyLoocv => {
                let mut seen: Vec<u32> = Vec::new();
                for &r in rows {
                    if !seen.contains(&self.groups[r]) {
                        seen.push(self.groups[r]);
                    }
                }
                if seen.len() < 2 {
                    return Err(Error::invalid("study_loocv needs at least 2 studies"));
                }
                Ok(seen
                    .iter()
                    .map(|&g| {
                        let test: Vec<usize> = rows
                            .iter()
                            .copied()
                            .filter(|&r| self.groups[r] == g)
                            .collect();
                        (complement(rows, &test), test)
                    })
                    .collect())
            }
            _ => {
                let tests = assign_groups(rows, &self.groups, &self.y, v, stratify, rng)?;
                Ok(tests
                    .into_iter()
                    .map(|t| (complement(rows, &t), t))
                    .collect())
            }
        }
    }
}

/// Build a resampling plan for `ds`.
///
/// `study_loocv` sets `v` to the number of studies and uses a single repeat;
/// `time_series` also uses a single repeat. Folds whose training set comes out
/// empty are kept and marked `skipped`.
pub fn make_split_plan(ds: &Dataset, cfg: &SplitConfig) -> Result<SplitPlan> {
    let n = ds.n_rows();
    let group_cols = grouping_columns(ds, cfg)?;
    let groups = group_ids(ds, &group_cols)?;
    let is_time = cfg.mode == SplitMode::TimeSeries;
    let (times, time_rank, time_ties, time_col) = if is_time {
        let col = ds
            .roles()
            .time
            .clone()
            .ok_or_else(|| Error::invalid("time_series mode requires a time column"))?;
        let (order, ties) = ds.time_order()?;
        let times: Vec<f64> = ds
            .column(&col)?
            .as_numeric()?
            .iter()
            .map(|v| v.unwrap())
            .collect();
        let mut rank = vec![0; n];
        for (pos, &r) in order.iter().enumerate() {
            rank[r] = pos;
        }
        (times, rank, ties, Some(col))
    } else {
        (Vec::new(), Vec::new(), false, None)
    };
    if cfg.compact && (is_time || cfg.nested) {
        return Err(Error::invalid(
            "compact storage is only available for non-nested, non-time-series plans",
        ));
    }
    if cfg.repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let ctx = PlanContext {
        mode: &cfg.mode,
        groups,
        y: ds.outcome_vector(),
        times,
        time_rank,
        tp: cfg.time,
    };
    let stratify = cfg.stratify && !is_time;
    let (v, repeats) = match cfg.mode {
        SplitMode::StudyLoocv => {
            let mut g = ctx.groups.clone();
            g.sort_unstable();
            g.dedup();
            (g.len(), 1)
        }
        SplitMode::TimeSeries => (cfg.v, 1),
        _ => (cfg.v, cfg.repeats),
    };
    let all: Vec<usize> = (0..n).collect();
    let mut folds = Vec::new();
    for r in 0..repeats {
        let mut rng = rng_from(cfg.seed, &[r as u64]);
        let pairs = ctx.folds_over(&all, v, stratify, &mut rng)?;
        for (k, (train, test)) in pairs.into_iter().enumerate() {
            let mut inner = Vec::new();
            if cfg.nested && !train.is_empty() {
                let mut irng = rng_from(cfg.seed, &[r as u64, k as u64, 0x1_0000]);
                let n_groups = {
                    let mut g: Vec<u32> = train.iter().map(|&i| ctx.groups[i]).collect();
                    g.sort_unstable();
                    g.dedup();
                    g.len()
                };
                let iv = if is_time {
                    cfg.inner_v
                } else {
                    cfg.inner_v.min(n_groups)
                };
                let inner_pairs = ctx.folds_over(&train, iv, stratify, &mut irng)?;
                inner = inner_pairs
                    .into_iter()
                    .enumerate()
                    .map(|(j, (tr, te))| Fold {
                        repeat: r + 1,
                        fold: j + 1,
                        skipped: tr.is_empty(),
                        train: tr,
                        test: te,
                        inner: Vec::new(),
                    })
                    .collect();
            }
            folds.push(Fold {
                repeat: r + 1,
                fold: k + 1,
                skipped: train.is_empty(),
                train,
                test,
                inner,
            });
        }
    }
    let mut plan = SplitPlan {
        mode: cfg.mode.clone(),
        v,
        repeats,
        seed: cfg.seed,
        hash: String::new(),
        n_rows: n,
        data_hash: ds.content_hash(),
        group_cols,
        time_col,
        stratified: stratify,
        nested: cfg.nested,
        inner_v: cfg.nested.then_some(cfg.inner_v),
        time_params: cfg.time,
        time_ties,
        folds,
        compact: None,
    };
    plan.hash = plan_hash(&plan);
    if cfg.compact {
        plan = plan.to_compact()?;
    }
    Ok(plan)
}

fn canonical_text(plan: &SplitPlan, folds: &[Fold]) -> String {
    let mut sorted: Vec<&Fold> = folds.iter().collect();
    sorted.sort_by_key(|f| (f.repeat, f.fold));
    let mut s = format!(
        "mode={};v={};repeats={};seed={}\n",
        plan.mode.label(),
        plan.v,
        plan.repeats,
        plan.seed
    );
    fn push_fold(s: &mut String, f: &Fold, depth: usize) {
        let mut train = f.train.clone();
        let mut test = f.test.clone();
        train.sort_unstable();
        test.sort_unstable();
        let _ = write!(s, "{}{},{}|train:", ">".repeat(depth), f.repeat, f.fold);
        for r in &train {
            let _ = write!(s, "{r},");
        }
        s.push_str("|test:");
        for r in &test {
            let _ = write!(s, "{r},");
        }
        s.push('\n');
        let mut inner: Vec<&Fold> = f.inner.iter().collect();
        inner.sort_by_key(|f| (f.repeat, f.fold));
        for i in inner {
            push_fold(s, i, depth + 1);
        }
    }
    for f in sorted {
        push_fold(&mut s, f, 0);
    }
    s
}

/// 12-hex-character digest of the plan's canonical membership text.
pub fn plan_hash(plan: &SplitPlan) -> String {
    let folds = plan.folds();
    short_hash(canonical_text(plan, &folds).as_bytes())
}

impl SplitPlan {
    /// Assemble a plan from explicit folds (for externally defined designs).
    pub fn from_folds(
        ds: &Dataset,
        mode: SplitMode,
        seed: u64,
        folds: Vec<Fold>,
    ) -> Result<SplitPlan> {
        let n = ds.n_rows();
        for f in &folds {
            if f.train.iter().chain(&f.test).any(|&r| r >= n) {
                return Err(Error::invalid("fold row index out of range"));
            }
        }
        let repeats = folds.iter().map(|f| f.repeat).max().unwrap_or(0);
        let v = folds.iter().map(|f| f.fold).max().unwrap_or(0);
        let cfg = SplitConfig::new(mode.clone(), v);
        let group_cols = grouping_columns(ds, &cfg).unwrap_or_default();
        let mut plan = SplitPlan {
            mode,
            v,
            repeats,
            seed,
            hash: String::new(),
            n_rows: n,
            data_hash: ds.content_hash(),
            group_cols,
            time_col: ds.roles().time.clone(),
            stratified: false,
            nested: folds.iter().any(|f| !f.inner.is_empty()),
            inner_v: None,
            time_params: TimeParams::default(),
            time_ties: false,
            folds,
            compact: None,
        };
        plan.hash = plan_hash(&plan);
        Ok(plan)
    }

    /// Explicit folds, expanding a compact representation on the fly.
    pub fn folds(&self) -> Cow<'_, [Fold]> {
        match &self.compact {
            None => Cow::Borrowed(&self.folds),
            Some(vectors) => Cow::Owned(expand_vectors(vectors, self.v)),
        }
    }

    pub fn is_compact(&self) -> bool {
        self.compact.is_some()
    }

    /// Store the plan as one per-row fold vector per repeat.
    pub fn to_compact(&self) -> Result<SplitPlan> {
        if self.compact.is_some() {
            return Ok(self.clone());
        }
        if self.nested || self.mode == SplitMode::TimeSeries {
            return Err(Error::invalid(
                "compact storage is only available for non-nested, non-time-series plans",
            ));
        }
        let mut vectors = vec![vec![0u32; self.n_rows]; self.repeats];
        for f in &self.folds {
            for &r in &f.test {
                vectors[f.repeat - 1][r] = f.fold as u32;
            }
        }
        let mut out = self.clone();
        out.folds = Vec::new();
        out.compact = Some(vectors);
        Ok(out)
    }

    /// Check that the plan was built for a dataset of this shape.
    pub fn validate_for(&self, ds: &Dataset) -> Result<()> {
        if self.n_rows != ds.n_rows() {
            return Err(Error::PlanMismatch {
                plan_hash: self.hash.clone(),
                data_hash: ds.content_hash(),
                plan_rows: self.n_rows,
                data_rows: ds.n_rows(),
            });
        }
        Ok(())
    }

    /// Folds of one repeat (1-based).
    pub fn repeat_folds(&self, repeat: usize) -> Vec<Fold> {
        self.folds()
            .iter()
            .filter(|f| f.repeat == repeat)
            .cloned()
            .collect()
    }
}

fn expand_vectors(vectors: &[Vec<u32>], v: usize) -> Vec<Fold> {
    let mut folds = Vec::with_capacity(vectors.len() * v);
    for (r, vec) in vectors.iter().enumerate() {
        for k in 1..=v as u32 {
            let test: Vec<usize> = (0..vec.len()).filter(|&i| vec[i] == k).collect();
            let train: Vec<usize> = (0..vec.len())
                .filter(|&i| vec[i] != k && vec[i] != 0)
                .collect();
            folds.push(Fold {
                repeat: r + 1,
                fold: k as usize,
                skipped: train.is_empty(),
                train,
                test,
                inner: Vec::new(),
            });
        }
    }
    folds
}

/// Replace a compact representation with explicit folds.
pub fn expand_compact(plan: &SplitPlan) -> SplitPlan {
    let mut out = plan.clone();
    if let Some(vectors) = out.compact.take() {
        out.folds = expand_vectors(&vectors, plan.v);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStraddle {
    pub repeat: usize,
    pub fold: usize,
    pub column: String,
    pub group: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeViolation {
    pub repeat: usize,
    pub fold: usize,
    /// Latest training row in time order.
    pub train_row: usize,
    /// Earliest test row in time order.
    pub test_row: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowOverlap {
    pub repeat: usize,
    pub fold: usize,
    pub row: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub group_straddles: Vec<GroupStraddle>,
    pub time_violations: Vec<TimeViolation>,
    pub row_overlaps: Vec<RowOverlap>,
}

impl OverlapReport {
    pub fn is_clean(&self) -> bool {
        self.group_straddles.is_empty()
            && self.time_violations.is_empty()
            && self.row_overlaps.is_empty()
    }
}

/// Groups of `column` that have rows on both sides of some fold.
pub fn group_straddles(plan: &SplitPlan, ds: &Dataset, column: &str) -> Result<Vec<GroupStraddle>> {
    let (codes, labels) = ds.column(column)?.group_codes();
    let mut out = Vec::new();
    for f in plan.folds().iter() {
        let mut in_train = vec![false; labels.len()];
        for &r in &f.train {
            in_train[codes[r] as usize] = true;
        }
        let mut reported = vec![false; labels.len()];
        for &r in &f.test {
            let g = codes[r] as usize;
            if in_train[g] && !reported[g] {
                reported[g] = true;
                out.push(GroupStraddle {
                    repeat: f.repeat,
                    fold: f.fold,
                    column: column.to_string(),
                    group: labels[g].clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Verify a plan against the dataset: grouping columns of the plan never
/// straddle train and test, time-series training rows precede the test block
/// by more than the embargo, and no row is in both sets of a fold.
pub fn overlap_check(plan: &SplitPlan, ds: &Dataset) -> Result<OverlapReport> {
    let mut report = OverlapReport::default();
    for col in &plan.group_cols {
        report
            .group_straddles
            .extend(group_straddles(plan, ds, col)?);
    }
    let folds = plan.folds();
    for f in folds.iter() {
        let mut test_mark = vec![false; ds.n_rows()];
        for &r in &f.test {
            test_mark[r] = true;
        }
        for &r in &f.train {
            if test_mark[r] {
                report.row_overlaps.push(RowOverlap {
                    repeat: f.repeat,
                    fold: f.fold,
                    row: r,
                });
            }
        }
    }
    if plan.mode == SplitMode::TimeSeries {
        let (order, _) = ds.time_order()?;
        let times: Vec<f64> = ds
            .column(plan.time_col.as_deref().unwrap_or_default())?
            .as_numeric()?
            .iter()
            .map(|v| v.unwrap())
            .collect();
        let mut rank = vec![0usize; ds.n_rows()];
        for (pos, &r) in order.iter().enumerate() {
            rank[r] = pos;
        }
        let embargo = plan.time_params.embargo;
        for f in folds.iter() {
            let (Some(&last_train), Some(&first_test)) = (
                f.train.iter().max_by_key(|&&r| rank[r]),
                f.test.iter().min_by_key(|&&r| rank[r]),
            ) else {
                continue;
            };
            if times[last_train] >= times[first_test]
                || rank[last_train] + embargo >= rank[first_test]
            {
                report.time_violations.push(TimeViolation {
                    repeat: f.repeat,
                    fold: f.fold,
                    train_row: last_train,
                    test_row: first_test,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Column, RoleMap};

    fn grouped_ds(n_subjects: usize, rows_per: usize) -> Dataset {
        let n = n_subjects * rows_per;
        let subj: Vec<Option<String>> =
            (0..n).map(|i| Some(format!("s{}", i / rows_per))).collect();
        let y: Vec<Option<&str>> = (0..n)
            .map(|i| {
                Some(if (i * 37 + 11) % 7 < 3 {
                    "case"
                } else {
                    "control"
                })
            })
            .collect();
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        Dataset::new(
            vec![
                Column::categorical("subject", &subj),
                Column::categorical("outcome", &y),
                Column::dense("x1", &x),
            ],
            RoleMap::new("outcome").positive("case").subject("subject"),
            None,
        )
        .unwrap()
    }

    fn time_ds(n: usize) -> Dataset {
        let t: Vec<f64> = (1..=n).map(|i| i as f64).collect();
        let y: Vec<Option<&str>> = (0..n)
            .map(|i| Some(if i % 2 == 0 { "a" } else { "b" }))
            .collect();
        Dataset::new(
            vec![
                Column::dense("t", &t),
                Column::categorical("y", &y),
                Column::dense("x", &t),
            ],
            RoleMap::new("y").time("t").predictors(["x"]),
            None,
        )
        .unwrap()
    }

    #[test]
    fn subject_grouped_five_folds() {
        let ds = grouped_ds(40, 3);
        let plan = make_split_plan(
            &ds,
            &SplitConfig::new(SplitMode::SubjectGrouped, 5).stratify(true),
        )
        .unwrap();
        assert_eq!(plan.folds.len(), 5);
        for f in &plan.folds {
            assert_eq!((f.train.len(), f.test.len()), (96, 24));
        }
        assert_eq!(plan.hash.len(), 12);
        assert!(overlap_check(&plan, &ds).unwrap().is_clean());
    }

    #[test]
    fn v_exceeding_groups_is_error() {
        let ds = grouped_ds(4, 3);
        assert!(make_split_plan(&ds, &SplitConfig::new(SplitMode::SubjectGrouped, 5)).is_err());
    }

    #[test]
    fn study_loocv_sizes() {
        let sizes = [10usize, 20, 30];
        let study: Vec<Option<String>> = sizes
            .iter()
            .enumerate()
            .flat_map(|(s, &k)| std::iter::repeat_n(Some(format!("st{s}")), k))
            .collect();
        let y: Vec<Option<&str>> = (0..60)
            .map(|i| Some(if i % 2 == 0 { "a" } else { "b" }))
            .collect();
        let x: Vec<f64> = (0..60).map(|i| i as f64).collect();
        let ds = Dataset::new(
            vec![
                Column::categorical("study", &study),
                Column::categorical("y", &y),
                Column::dense("x", &x),
            ],
            RoleMap::new("y").study("study"),
            None,
        )
        .unwrap();
        let plan =
            make_split_plan(&ds, &SplitConfig::new(SplitMode::StudyLoocv, 99).repeats(4)).unwrap();
        assert_eq!((plan.v, plan.repeats), (3, 1));
        let shape: Vec<(usize, usize)> = plan
            .folds
            .iter()
            .map(|f| (f.test.len(), f.train.len()))
            .collect();
        assert_eq!(shape, vec![(10, 50), (20, 40), (30, 30)]);
    }

    #[test]
    fn time_series_blocks() {
        let ds = time_ds(100);
        let plan = make_split_plan(&ds, &SplitConfig::new(SplitMode::TimeSeries, 4)).unwrap();
        for (k, f) in plan.folds.iter().enumerate() {
            let lo = 20 + 20 * k;
            assert_eq!(f.test, (lo..lo + 20).collect::<Vec<_>>());
            assert_eq!(f.train, (0..lo).collect::<Vec<_>>());
        }
        assert!(overlap_check(&plan, &ds).unwrap().is_clean());
    }

    #[test]
    fn purge_and_embargo_widen_gap() {
        let ds = time_ds(100);
        let tp = TimeParams {
            horizon: 1,
            purge: 2,
            embargo: 3,
        };
        let plan =
            make_split_plan(&ds, &SplitConfig::new(SplitMode::TimeSeries, 4).time(tp)).unwrap();
        assert_eq!(plan.folds[0].train, (0..14).collect::<Vec<_>>());
        assert!(overlap_check(&plan, &ds).unwrap().is_clean());
    }

    #[test]
    fn empty_train_fold_is_skipped() {
        let ds = time_ds(10);
        let tp = TimeParams {
            purge: 5,
            ..Default::default()
        };
        let plan =
            make_split_plan(&ds, &SplitConfig::new(SplitMode::TimeSeries, 2).time(tp)).unwrap();
        assert!(plan.folds[0].skipped);
        assert!(!plan.folds[1].skipped);
    }

    #[test]
    fn hash_depends_on_seed_and_not_fold_order() {
        let ds = grouped_ds(40, 3);
        let a =
            make_split_plan(&ds, &SplitConfig::new(SplitMode::SubjectGrouped, 5).seed(1)).unwrap();
        let a2 =
            make_split_plan(&ds, &SplitConfig::new(SplitMode::SubjectGrouped, 5).seed(1)).unwrap();
        let b =
            make_split_plan(&ds, &SplitConfig::new(SplitMode::SubjectGrouped, 5).seed(2)).unwrap();
        assert_eq!(a.hash, a2.hash);
        assert_ne!(a.hash, b.hash);
        let mut shuffled = a.clone();
        shuffled.folds.reverse();
        assert_eq!(plan_hash(&shuffled), a.hash);
    }

    #[test]
    fn planted_straddle_is_reported() {
        let ds = grouped_ds(10, 3);
        let mut plan =
            make_split_plan(&ds, &SplitConfig::new(SplitMode::SubjectGrouped, 5)).unwrap();
        // subject s7 owns rows 21..24; move one of its rows to the other side
        let f = plan
            .folds
            .iter_mut()
            .find(|f| f.test.contains(&21))
            .unwrap();
        f.test.retain(|&r| r != 22);
        f.train.push(22);
        let rep = overlap_check(&plan, &ds).unwrap();
        assert_eq!(rep.group_straddles.len(), 1);
        assert_eq!(rep.group_straddles[0].group, "s7");
    }

    #[test]
    fn planted_time_violation_is_reported() {
        let ds = time_ds(100);
        let mut plan = make_split_plan(&ds, &SplitConfig::new(SplitMode::TimeSeries, 4)).unwrap();
        plan.folds[0].train.push(50);
        let rep = overlap_check(&plan, &ds).unwrap();
        assert_eq!(rep.time_violations.len(), 1);
    }

    #[test]
    fn compact_round_trip() {
        let ds = grouped_ds(40, 3);
        let cfg = SplitConfig::new(SplitMode::SubjectGrouped, 5).repeats(2);
        let explicit = make_split_plan(&ds, &cfg).unwrap();
        let compact = make_split_plan(&ds, &cfg.clone().compact(true)).unwrap();
        assert_eq!(compact.hash, explicit.hash);
        assert_eq!(expand_compact(&compact).folds, explicit.folds);
        assert_eq!(explicit.to_compact().unwrap(), compact);
        let stored: usize = compact.compact.as_ref().unwrap().iter().map(Vec::len).sum();
        let explicit_len: usize = explicit
            .folds
            .iter()
            .map(|f| f.train.len() + f.test.len())
            .sum();
        assert_eq!(explicit_len / stored, 5);
    }

    #[test]
    fn compact_vector_definition() {
        let plan = SplitPlan {
            mode: SplitMode::RowWise,
            v: 3,
            repeats: 1,
            seed: 0,
            hash: String::new(),
            n_rows: 6,
            data_hash: String::new(),
            group_cols: vec![],
            time_col: None,
            stratified: false,
            nested: false,
            inner_v: None,
            time_params: TimeParams::default(),
            time_ties: false,
            folds: vec![],
            compact: Some(vec![vec![1, 1, 2, 2, 3, 3]]),
        };
        let f = expand_compact(&plan).folds;
        assert_eq!(f[1].test, vec![2, 3]);
        assert_eq!(f[1].train, vec![0, 1, 4, 5]);
    }

    #[test]
    fn nested_inner_folds_stay_in_outer_train() {
        let ds = grouped_ds(30, 3);
        let plan = make_split_plan(
            &ds,
            &SplitConfig::new(SplitMode::SubjectGrouped, 3).nested(true),
        )
        .unwrap();
        for f in &plan.folds {
            assert_eq!(f.inner.len(), 3);
            for inner in &f.inner {
                assert!(inner
                    .train
                    .iter()
                    .chain(&inner.test)
                    .all(|r| f.train.contains(r)));
            }
        }
    }

    #[test]
    fn combined_links_groups() {
        let n = 60;
        let subj: Vec<Option<String>> = (0..n).map(|i| Some(format!("s{}", i / 3))).collect();
        let batch: Vec<Option<String>> =
            (0..n).map(|i| Some(format!("b{}", (i / 3) % 4))).collect();
        let y: Vec<Option<&str>> = (0..n)
            .map(|i| Some(if i % 2 == 0 { "a" } else { "b" }))
            .collect();
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let ds = Dataset::new(
            vec![
                Column::categorical("subject", &subj),
                Column::categorical("batch", &batch),
                Column::categorical("y", &y),
                Column::dense("x", &x),
            ],
            RoleMap::new("y").subject("subject").batch("batch"),
            None,
        )
        .unwrap();
        let mode = SplitMode::Combined(vec![Constraint::Subject, Constraint::Batch]);
        let plan = make_split_plan(&ds, &SplitConfig::new(mode, 4)).unwrap();
        assert!(overlap_check(&plan, &ds).unwrap().is_clean());
        assert!(make_split_plan(
            &ds,
            &SplitConfig::new(
                SplitMode::Combined(vec![Constraint::Subject, Constraint::Batch]),
                5
            )
        )
        .is_err());
    }

    #[test]
    fn mode_labels_parse_back() {
        for m in [
            SplitMode::SubjectGrouped,
            SplitMode::BatchBlocked,
            SplitMode::StudyLoocv,
            SplitMode::TimeSeries,
            SplitMode::RowWise,
            SplitMode::Combined(vec![Constraint::Subject, Constraint::Batch]),
        ] {
            assert_eq!(SplitMode::parse(&m.label()).unwrap(), m);
        }
    }
}
