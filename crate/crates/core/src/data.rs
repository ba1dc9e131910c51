//! Columnar datasets with role annotations, CSV ingestion and export.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::short_hash;

/// Values of a single column. Missing entries are `None` in both kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnValues {
    Numeric {
        values: Vec<Option<f64>>,
    },
    Categorical {
        levels: Vec<String>,
        codes: Vec<Option<u32>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub values: ColumnValues,
}

impl Column {
    pub fn numeric(name: impl Into<String>, values: Vec<Option<f64>>) -> Self {
        Column {
            name: name.into(),
            values: ColumnValues::Numeric { values },
        }
    }

    /// Numeric column without missing values.
    pub fn dense(name: impl Into<String>, values: &[f64]) -> Self {
        Column::numeric(name, values.iter().map(|&v| Some(v)).collect())
    }

    /// Categorical column; levels are collected in first-appearance order.
    pub fn categorical<S: AsRef<str>>(name: impl Into<String>, values: &[Option<S>]) -> Self {
        let mut levels: Vec<String> = Vec::new();
        let mut index: HashMap<String, u32> = HashMap::new();
        let codes = values
            .iter()
            .map(|v| {
                v.as_ref().map(|s| {
                    let s = s.as_ref();
                    *index.entry(s.to_string()).or_insert_with(|| {
                        levels.push(s.to_string());
                        (levels.len() - 1) as u32
                    })
                })
            })
            .collect();
        Column {
            name: name.into(),
            values: ColumnValues::Categorical { levels, codes },
        }
    }

    /// Categorical column with an explicit level set.
    pub fn with_levels(
        name: impl Into<String>,
        levels: Vec<String>,
        codes: Vec<Option<u32>>,
    ) -> Self {
        Column {
            name: name.into(),
            values: ColumnValues::Categorical { levels, codes },
        }
    }

    pub fn len(&self) -> usize {
        match &self.values {
            ColumnValues::Numeric { values } => values.len(),
            ColumnValues::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.values, ColumnValues::Numeric { .. })
    }

    pub fn is_missing(&self, row: usize) -> bool {
        match &self.values {
            ColumnValues::Numeric { values } => values[row].is_none(),
            ColumnValues::Categorical { codes, .. } => codes[row].is_none(),
        }
    }

    pub fn n_missing(&self) -> usize {
        (0..self.len()).filter(|&i| self.is_missing(i)).count()
    }

    pub fn as_numeric(&self) -> Result<&[Option<f64>]> {
        match &self.values {
            ColumnValues::Numeric { values } => Ok(values),
            ColumnValues::Categorical { .. } => Err(Error::NotNumeric(self.name.clone())),
        }
    }

    /// String form of a cell, `None` when missing.
    pub fn cell(&self, row: usize) -> Option<String> {
        match &self.values {
            ColumnValues::Numeric { values } => values[row].map(|v| v.to_string()),
            ColumnValues::Categorical { levels, codes } => {
                codes[row].map(|c| levels[c as usize].clone())
            }
        }
    }

    /// Dense integer codes suitable for grouping. Numeric values are mapped to
    /// codes in first-appearance order; missing cells share one extra code.
    pub fn group_codes(&self) -> (Vec<u32>, Vec<String>) {
        let mut labels: Vec<String> = Vec::new();
        let mut index: HashMap<String, u32> = HashMap::new();
        let codes = (0..self.len())
            .map(|i| {
                let key = self.cell(i).unwrap_or_else(|| "NA".to_string());
                *index.entry(key.clone()).or_insert_with(|| {
                    labels.push(key);
                    (labels.len() - 1) as u32
                })
            })
            .collect();
        (codes, labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    BinaryClassification,
    Regression,
}

impl TaskKind {
    pub fn label(&self) -> &'static str {
        match self {
            TaskKind::BinaryClassification => "binomial",
            TaskKind::Regression => "gaussian",
        }
    }
}

/// Assignment of columns to roles.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleMap {
    pub outcome: String,
    #[serde(default)]
    pub positive_class: Option<String>,
    #[serde(default)]
    pub subject: Option<String>,
    #[serde(default)]
    pub batch: Option<String>,
    #[serde(default)]
    pub study: Option<String>,
    #[serde(default)]
    pub time: Option<String>,
    #[serde(default)]
    pub predictors: Vec<String>,
}

impl RoleMap {
    pub fn new(outcome: impl Into<String>) -> Self {
        RoleMap {
            outcome: outcome.into(),
            ..Default::default()
        }
    }

    pub fn positive(mut self, level: impl Into<String>) -> Self {
        self.positive_class = Some(level.into());
        self
    }

    pub fn subject(mut self, col: impl Into<String>) -> Self {
        self.subject = Some(col.into());
        self
    }

    pub fn batch(mut self, col: impl Into<String>) -> Self {
        self.batch = Some(col.into());
        self
    }

    pub fn study(mut self, col: impl Into<String>) -> Self {
        self.study = Some(col.into());
        self
    }

    pub fn time(mut self, col: impl Into<String>) -> Self {
        self.time = Some(col.into());
        self
    }

    pub fn predictors<S: Into<String>>(mut self, cols: impl IntoIterator<Item = S>) -> Self {
        self.predictors = cols.into_iter().map(Into::into).collect();
        self
    }

    /// Non-predictor role columns other than the outcome.
    pub fn metadata_columns(&self) -> Vec<&str> {
        [&self.subject, &self.batch, &self.study, &self.time]
            .into_iter()
            .filter_map(|c| c.as_deref())
            .collect()
    }
}

/// An immutable table of equally long columns plus their roles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    columns: Vec<Column>,
    roles: RoleMap,
    n_rows: usize,
    task: TaskKind,
}

impl Dataset {
    /// Build and validate a dataset. `task` is inferred when `None`: a
    /// categorical or two-valued outcome is binary, anything else regression.
    /// The default positive class is level `1` when present, otherwise the
    /// second level in order of appearance.
    ///
    /// When `roles.predictors` is empty, every column without a role becomes
    /// a predictor.
    pub fn new(columns: Vec<Column>, mut roles: RoleMap, task: Option<TaskKind>) -> Result<Self> {
        let n_rows = columns.first().map(Column::len).unwrap_or(0);
        let mut seen = HashSet::new();
        for c in &columns {
            if c.len() != n_rows {
                return Err(Error::invalid(format!(
                    "column `{}` has {} rows, expected {}",
                    c.name,
                    c.len(),
                    n_rows
                )));
            }
            if !seen.insert(c.name.clone()) {
                return Err(Error::invalid(format!(
                    "duplicate column name `{}`",
                    c.name
                )));
            }
        }
        if n_rows < 2 {
            return Err(Error::invalid("a dataset needs at least 2 rows"));
        }
        let find = |name: &str| columns.iter().position(|c| c.name == name);
        if find(&roles.outcome).is_none() {
            return Err(Error::MissingColumn(roles.outcome.clone()));
        }
        for meta in roles.metadata_columns() {
            if find(meta).is_none() {
                return Err(Error::MissingColumn(meta.to_string()));
            }
        }
        if roles.predictors.is_empty() {
            let taken: HashSet<&str> = roles
                .metadata_columns()
                .into_iter()
                .chain(std::iter::once(roles.outcome.as_str()))
                .collect();
            roles.predictors = columns
                .iter()
                .filter(|c| !taken.contains(c.name.as_str()))
                .map(|c| c.name.clone())
                .collect();
        }
        if roles.predictors.is_empty() {
            return Err(Error::invalid("at least one predictor column is required"));
        }
        let mut pred_set = HashSet::new();
        for p in &roles.predictors {
            if find(p).is_none() {
                return Err(Error::MissingColumn(p.clone()));
            }
            if !pred_set.insert(p.as_str()) {
                return Err(Error::invalid(format!("predictor `{p}` listed twice")));
            }
        }
        if pred_set.contains(roles.outcome.as_str()) {
            return Err(Error::invalid(format!(
                "outcome `{}` cannot also be a predictor",
                roles.outcome
            )));
        }
        for meta in roles.metadata_columns() {
            if pred_set.contains(meta) {
                return Err(Error::invalid(format!(
                    "role column `{meta}` cannot also be a predictor"
                )));
            }
            if meta == roles.outcome {
                return Err(Error::invalid(format!(
                    "`{meta}` is both outcome and a role column"
                )));
            }
        }
        if let Some(t) = &roles.time {
            let col = &columns[find(t).unwrap()];
            let vals = col.as_numeric()?;
            if vals.iter().any(Option::is_none) {
                return Err(Error::invalid(format!(
                    "time column `{t}` has missing values"
                )));
            }
        }

        let oi = find(&roles.outcome).unwrap();
        let mut columns = columns;
        if columns[oi].n_missing() > 0 {
            return Err(Error::DegenerateOutcome(format!(
                "outcome `{}` has missing values",
                roles.outcome
            )));
        }
        let distinct = distinct_count(&columns[oi]);
        let task = match task {
            Some(t) => t,
            None if !columns[oi].is_numeric() || distinct == 2 => TaskKind::BinaryClassification,
            None => TaskKind::Regression,
        };
        match task {
            TaskKind::BinaryClassification => {
                if distinct != 2 {
                    return Err(Error::DegenerateOutcome(format!(
                        "binary outcome `{}` has {} distinct level(s), expected 2",
                        roles.outcome, distinct
                    )));
                }
                if columns[oi].is_numeric() {
                    columns[oi] = numeric_to_binary(&columns[oi]);
                }
                let ColumnValues::Categorical { levels, codes } = &columns[oi].values else {
                    unreachable!()
                };
                let used: Vec<&String> = {
                    let present: HashSet<u32> = codes.iter().flatten().copied().collect();
                    levels
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| present.contains(&(*i as u32)))
                        .map(|(_, l)| l)
                        .collect()
                };
                match &roles.positive_class {
                    Some(p) if !used.iter().any(|l| *l == p) => {
                        return Err(Error::invalid(format!(
                            "positive class `{p}` is not a level of `{}`",
                            roles.outcome
                        )))
                    }
                    Some(_) => {}
                    None => {
                        let one = used.iter().find(|l| l.as_str() == "1");
                        roles.positive_class = Some(one.unwrap_or(&used[1]).to_string());
                    }
                }
            }
            TaskKind::Regression => {
                columns[oi].as_numeric()?;
                roles.positive_class = None;
            }
        }
        Ok(Dataset {
            columns,
            roles,
            n_rows,
            task,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn roles(&self) -> &RoleMap {
        &self.roles
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn predictors(&self) -> &[String] {
        &self.roles.predictors
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.iter().any(|c| c.name == name)
    }

    /// Outcome as reals: 1/0 for the positive/negative class of a binary
    /// task, raw values for regression.
    pub fn outcome_vector(&self) -> Vec<f64> {
        let col = self.column(&self.roles.outcome).expect("validated");
        match &col.values {
            ColumnValues::Numeric { values } => values.iter().map(|v| v.unwrap()).collect(),
            ColumnValues::Categorical { levels, codes } => {
                let pos = self.roles.positive_class.as_deref().unwrap_or_default();
                codes
                    .iter()
                    .map(|c| {
                        if levels[c.unwrap() as usize] == pos {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
        }
    }

    /// Row order by the time column with insertion order breaking ties.
    /// The flag reports whether any ties were found.
    pub fn time_order(&self) -> Result<(Vec<usize>, bool)> {
        let name = self
            .roles
            .time
            .as_deref()
            .ok_or_else(|| Error::invalid("no time column assigned"))?;
        let vals = self.column(name)?.as_numeric()?;
        let mut order: Vec<usize> = (0..self.n_rows).collect();
        order.sort_by(|&a, &b| {
            vals[a]
                .unwrap()
                .total_cmp(&vals[b].unwrap())
                .then(a.cmp(&b))
        });
        let ties = order.windows(2).any(|w| vals[w[0]] == vals[w[1]]);
        Ok((order, ties))
    }

    /// Copy with the outcome rows rearranged: row `i` receives the outcome of
    /// row `perm[i]`.
    pub fn with_permuted_outcome(&self, perm: &[usize]) -> Dataset {
        let mut out = self.clone();
        let oi = out
            .columns
            .iter()
            .position(|c| c.name == out.roles.outcome)
            .unwrap();
        out.columns[oi].values = match &self.columns[oi].values {
            ColumnValues::Numeric { values } => ColumnValues::Numeric {
                values: perm.iter().map(|&j| values[j]).collect(),
            },
            ColumnValues::Categorical { levels, codes } => ColumnValues::Categorical {
                levels: levels.clone(),
                codes: perm.iter().map(|&j| codes[j]).collect(),
            },
        };
        out
    }

    /// Copy with an extra predictor column appended.
    pub fn with_predictor(&self, column: Column) -> Result<Dataset> {
        let mut cols = self.columns.clone();
        let mut roles = self.roles.clone();
        roles.predictors.push(column.name.clone());
        cols.push(column);
        Dataset::new(cols, roles, Some(self.task))
    }

    /// Copy restricted to the given predictors (other columns kept).
    pub fn with_predictor_set(&self, predictors: &[String]) -> Result<Dataset> {
        let mut roles = self.roles.clone();
        roles.predictors = predictors.to_vec();
        Dataset::new(self.columns.clone(), roles, Some(self.task))
    }

    /// Content hash (12 hex chars) of the serialized dataset.
    pub fn content_hash(&self) -> String {
        short_hash(&serde_json::to_vec(self).expect("dataset serializes"))
    }
}

fn distinct_count(col: &Column) -> usize {
    match &col.values {
        ColumnValues::Numeric { values } => {
            let mut v: Vec<f64> = values.iter().flatten().copied().collect();
            v.sort_by(|a, b| a.total_cmp(b));
            v.dedup();
            v.len()
        }
        ColumnValues::Categorical { codes, .. } => {
            codes.iter().flatten().collect::<HashSet<_>>().len()
        }
    }
}

fn numeric_to_binary(col: &Column) -> Column {
    let vals = col.as_numeric().unwrap();
    let mut distinct: Vec<f64> = vals.iter().flatten().copied().collect();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    let levels: Vec<String> = distinct.iter().map(|v| v.to_string()).collect();
    let codes = vals
        .iter()
        .map(|v| v.map(|x| distinct.iter().position(|d| *d == x).unwrap() as u32))
        .collect();
    Column::with_levels(col.name.clone(), levels, codes)
}

/// Numeric matrix (rows x `cols`) with NaN marking missing cells.
pub fn column_matrix(ds: &Dataset, cols: &[String]) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::<f64>::zeros(ds.n_rows(), cols.len());
    for (j, name) in cols.iter().enumerate() {
        let vals = ds.column(name)?.as_numeric()?;
        for (i, v) in vals.iter().enumerate() {
            m[(i, j)] = v.unwrap_or(f64::NAN);
        }
    }
    Ok(m)
}

/// CSV parsing options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvOptions {
    pub delimiter: u8,
    pub na_tokens: Vec<String>,
    pub has_header: bool,
    /// Columns forced to categorical regardless of content.
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub task: Option<TaskKind>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            delimiter: b',',
            na_tokens: vec![String::new(), "NA".to_string()],
            has_header: true,
            categorical: Vec::new(),
            task: None,
        }
    }
}

fn parse_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Load a CSV file into a validated [`Dataset`].
pub fn load_csv(path: impl AsRef<Path>, roles: RoleMap, opts: &CsvOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, roles, opts)
}

/// Parse CSV from any reader.
///
/// Subject, batch and study columns are always categorical; other columns are
/// numeric when most of their non-missing cells parse as numbers, and the
/// cells that do not parse become missing.
pub fn read_csv<R: Read>(reader: R, roles: RoleMap, opts: &CsvOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(opts.has_header)
        .from_reader(reader);
    let mut raw: Vec<Vec<String>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        raw.push(rec.iter().map(str::to_string).collect());
    }
    let width = raw.first().map(Vec::len).unwrap_or(0);
    let names: Vec<String> = if opts.has_header {
        rdr.headers()?
            .iter()
            .map(|s| s.trim().to_string())
            .collect()
    } else {
        (1..=width).map(|i| format!("V{i}")).collect()
    };
    if !names.iter().any(|n| *n == roles.outcome) {
        return Err(Error::MissingColumn(roles.outcome.clone()));
    }
    let is_na = |s: &str| opts.na_tokens.iter().any(|t| t == s.trim());
    let forced_cat: HashSet<&str> = [&roles.subject, &roles.batch, &roles.study]
        .into_iter()
        .filter_map(|c| c.as_deref())
        .chain(opts.categorical.iter().map(String::as_str))
        .collect();

    let mut columns = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let cells: Vec<Option<&str>> = raw
            .iter()
            .map(|r| r.get(j).map(String::as_str).filter(|s| !is_na(s)))
            .collect();
        let present = cells.iter().flatten().count();
        let parsed = cells
            .iter()
            .flatten()
            .filter(|s| parse_number(s).is_some())
            .count();
        let numeric = if forced_cat.contains(name.as_str()) {
            false
        } else if *name == roles.outcome {
            match opts.task {
                Some(TaskKind::Regression) => true,
                Some(TaskKind::BinaryClassification) => false,
                None => {
                    parsed == present && {
                        let mut d: Vec<&str> = cells.iter().flatten().copied().collect();
                        d.sort_unstable();
                        d.dedup();
                        d.len() > 2
                    }
                }
            }
        } else {
            Some(name) == roles.time.as_ref() || 2 * parsed >= present
        };
        let col = if numeric {
            Column::numeric(
                name.clone(),
                cells.iter().map(|c| c.and_then(parse_number)).collect(),
            )
        } else {
            let trimmed: Vec<Option<&str>> = cells.iter().map(|c| c.map(str::trim)).collect();
            Column::categorical(name.clone(), &trimmed)
        };
        columns.push(col);
    }
    Dataset::new(columns, roles, opts.task)
}

/// Write a dataset as CSV with a header row; missing cells are written as `NA`.
pub fn write_csv<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ds.columns.iter().map(|c| c.name.as_str()))?;
    for i in 0..ds.n_rows {
        w.write_record(
            ds.columns
                .iter()
                .map(|c| c.cell(i).unwrap_or_else(|| "NA".into())),
        )?;
    }
    w.flush()?;
    Ok(())
}
