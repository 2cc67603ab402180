//! Categorical datasets with an explicit missingness mask.
//!
//! Cells are dense category codes (`Some(level)`) or missing (`None`). Level
//! index 0 of every variable is its base level for dummy coding.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single cell: a category code, or `None` when missing.
pub type Cell = Option<u32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Outcome,
    #[default]
    Covariate,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub levels: Vec<String>,
    #[serde(default)]
    pub role: Role,
}

impl Variable {
    pub fn new<S: Into<String>>(name: impl Into<String>, levels: impl IntoIterator<Item = S>) -> Self {
        Variable { name: name.into(), levels: levels.into_iter().map(Into::into).collect(), role: Role::Covariate }
    }

    /// A 0/1 variable with labels `"0"` and `"1"`.
    pub fn binary(name: impl Into<String>) -> Self {
        Variable::new(name, ["0", "1"])
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_index(&self, label: &str) -> Option<u32> {
        self.levels.iter().position(|l| l == label).map(|i| i as u32)
    }

    fn validate(&self) -> Result<()> {
        if self.levels.len() < 2 {
            return Err(Error::Schema(format!("variable `{}` needs at least two levels", self.name)));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.levels {
            if !seen.insert(l.as_str()) {
                return Err(Error::Schema(format!("variable `{}` has duplicate level `{l}`", self.name)));
            }
        }
        Ok(())
    }
}

/// Rectangular table of categorical variables.
///
/// Immutable once built; every mutation returns a new dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    variables: Vec<Variable>,
    columns: Vec<Vec<Cell>>,
}

impl Dataset {
    pub fn new(variables: Vec<Variable>, columns: Vec<Vec<Cell>>) -> Result<Self> {
        if variables.len() != columns.len() {
            return Err(Error::Schema(format!(
                "{} variables but {} columns",
                variables.len(),
                columns.len()
            )));
        }
        if variables.is_empty() {
            return Err(Error::Schema("dataset has no variables".into()));
        }
        let n = columns[0].len();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        let mut names = std::collections::HashSet::new();
        let mut targets = 0;
        for (var, col) in variables.iter().zip(&columns) {
            var.validate()?;
            if !names.insert(var.name.as_str()) {
                return Err(Error::Schema(format!("duplicate variable name `{}`", var.name)));
            }
            if col.len() != n {
                return Err(Error::Schema(format!("column `{}` has {} rows, expected {n}", var.name, col.len())));
            }
            let k = var.levels.len() as u32;
            if let Some(bad) = col.iter().flatten().find(|&&c| c >= k) {
                return Err(Error::Schema(format!("code {bad} out of range for `{}` ({k} levels)", var.name)));
            }
            match var.role {
                Role::Target => targets += 1,
                Role::Outcome | Role::Covariate => {
                    // only the target may carry missing cells once roles are assigned
                }
            }
        }
        if targets > 1 {
            return Err(Error::Schema("more than one target variable".into()));
        }
        Ok(Dataset { variables, columns })
    }

    pub fn n_rows(&self) -> usize {
        self.columns[0].len()
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn variable(&self, index: usize) -> &Variable {
        &self.variables[index]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.variables
            .iter()
            .position(|v| v.name == name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown variable `{name}`")))
    }

    pub fn column(&self, index: usize) -> &[Cell] {
        &self.columns[index]
    }

    pub fn column_by_name(&self, name: &str) -> Result<&[Cell]> {
        Ok(self.column(self.index_of(name)?))
    }

    pub fn cell(&self, row: usize, var: usize) -> Cell {
        self.columns[var][row]
    }

    /// Response indicator of a variable: `true` where the cell is observed.
    pub fn response_indicator(&self, var: usize) -> Vec<bool> {
        self.columns[var].iter().map(Option::is_some).collect()
    }

    pub fn n_observed(&self, var: usize) -> usize {
        self.columns[var].iter().filter(|c| c.is_some()).count()
    }

    pub fn n_missing(&self, var: usize) -> usize {
        self.n_rows() - self.n_observed(var)
    }

    /// Number of observed cells per level.
    pub fn level_counts(&self, var: usize) -> Vec<usize> {
        let mut counts = vec![0; self.variables[var].n_levels()];
        for c in self.columns[var].iter().flatten() {
            counts[*c as usize] += 1;
        }
        counts
    }

    /// Returns a copy with one column replaced.
    pub fn with_column(&self, var: usize, column: Vec<Cell>) -> Result<Dataset> {
        let mut columns = self.columns.clone();
        columns[var] = column;
        Dataset::new(self.variables.clone(), columns)
    }

    /// Keeps the rows for which `keep` is true.
    pub fn filter_rows(&self, keep: &[bool]) -> Result<Dataset> {
        let columns = self
            .columns
            .iter()
            .map(|col| col.iter().zip(keep).filter(|(_, &k)| k).map(|(c, _)| *c).collect())
            .collect();
        Dataset::new(self.variables.clone(), columns)
    }

    /// Assigns roles by name; every other variable becomes a covariate.
    pub fn with_roles(&self, outcome: Option<&str>, target: Option<&str>) -> Result<Dataset> {
        let mut ds = self.clone();
        for v in &mut ds.variables {
            v.role = Role::Covariate;
        }
        if let Some(name) = outcome {
            let i = ds.index_of(name)?;
            ds.variables[i].role = Role::Outcome;
        }
        if let Some(name) = target {
            let i = ds.index_of(name)?;
            if ds.variables[i].role == Role::Outcome {
                return Err(Error::InvalidInput(format!("`{name}` cannot be both outcome and target")));
            }
            ds.variables[i].role = Role::Target;
        }
        Ok(ds)
    }

    /// Reorders the levels of a variable, recoding its cells.
    pub fn reorder_levels(&self, var: usize, order: &[String]) -> Result<Dataset> {
        let old = &self.variables[var];
        if order.len() != old.levels.len() {
            return Err(Error::Schema(format!("new level order for `{}` has wrong length", old.name)));
        }
        let map: Vec<u32> = old
            .levels
            .iter()
            .map(|l| {
                order
                    .iter()
                    .position(|o| o == l)
                    .map(|p| p as u32)
                    .ok_or_else(|| Error::Schema(format!("level `{l}` missing from new order for `{}`", old.name)))
            })
            .collect::<Result<_>>()?;
        let mut ds = self.clone();
        ds.variables[var].levels = order.to_vec();
        ds.columns[var] = self.columns[var].iter().map(|c| c.map(|c| map[c as usize])).collect();
        Dataset::new(ds.variables, ds.columns)
    }

    /// Makes `label` the base level (index 0) of a variable.
    pub fn set_base_level(&self, var: usize, label: &str) -> Result<Dataset> {
        let levels = &self.variables[var].levels;
        if !levels.iter().any(|l| l == label) {
            return Err(Error::Schema(format!("`{label}` is not a level of `{}`", self.variables[var].name)));
        }
        let mut order = vec![label.to_string()];
        order.extend(levels.iter().filter(|l| *l != label).cloned());
        self.reorder_levels(var, &order)
    }

    /// Sorts levels numerically for every variable whose labels are all integers.
    pub fn sort_integer_levels(&self) -> Result<Dataset> {
        let mut ds = self.clone();
        for i in 0..self.n_vars() {
            let levels = &self.variables[i].levels;
            let parsed: Option<Vec<i64>> = levels.iter().map(|l| l.trim().parse().ok()).collect();
            if let Some(values) = parsed {
                let mut order: Vec<usize> = (0..levels.len()).collect();
                order.sort_by_key(|&k| values[k]);
                let labels: Vec<String> = order.iter().map(|&k| levels[k].clone()).collect();
                ds = ds.reorder_levels(i, &labels)?;
            }
        }
        Ok(ds)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    /// Emits the table as CSV. Missing cells become empty fields.
    pub fn write_csv_to<W: Write>(&self, writer: W) -> Result<()> {
        self.write_rows(writer, None)
    }

    pub(crate) fn write_rows<W: Write>(&self, writer: W, leading: Option<(&str, &[String])>) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        let mut header: Vec<&str> = Vec::with_capacity(self.n_vars() + 1);
        if let Some((name, _)) = leading {
            header.push(name);
        }
        header.extend(self.variables.iter().map(|v| v.name.as_str()));
        w.write_record(&header).map_err(csv_io)?;
        let mut record: Vec<&str> = Vec::with_capacity(header.len());
        for row in 0..self.n_rows() {
            record.clear();
            if let Some((_, values)) = leading {
                record.push(values[row].as_str());
            }
            for (var, col) in self.variables.iter().zip(&self.columns) {
                record.push(match col[row] {
                    Some(c) => var.levels[c as usize].as_str(),
                    None => "",
                });
            }
            w.write_record(&record).map_err(csv_io)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::io("<csv>", std::io::Error::other(e))
}

/// Options for [`read_csv`].
#[derive(Debug, Clone)]
pub struct ReadOptions {
    pub missing_tokens: Vec<String>,
    /// Fixed level tables; columns not listed here discover their levels.
    pub schema: Option<Vec<Variable>>,
}

impl Default for ReadOptions {
    fn default() -> Self {
        ReadOptions { missing_tokens: vec![String::new(), "NA".to_string()], schema: None }
    }
}

pub fn read_csv(path: impl AsRef<Path>, options: &ReadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_from(file, options)
}

/// Parses CSV with a header row. Without a schema, levels are numbered in
/// order of first appearance.
pub fn read_csv_from<R: Read>(reader: R, options: &ReadOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Parse { line: 1, message: "missing header row".into() });
    }

    let mut variables: Vec<Variable> = Vec::with_capacity(header.len());
    let mut fixed = Vec::with_capacity(header.len());
    for name in &header {
        let schema_var = options.schema.as_ref().and_then(|s| s.iter().find(|v| &v.name == name));
        match schema_var {
            Some(v) => {
                variables.push(v.clone());
                fixed.push(true);
            }
            None => {
                variables.push(Variable { name: name.clone(), levels: Vec::new(), role: Role::Covariate });
                fixed.push(false);
            }
        }
    }
    let mut lookup: Vec<HashMap<String, u32>> = variables
        .iter()
        .map(|v| v.levels.iter().enumerate().map(|(i, l)| (l.clone(), i as u32)).collect())
        .collect();
    let mut columns: Vec<Vec<Cell>> = vec![Vec::new(); header.len()];

    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for (j, field) in record.iter().enumerate() {
            if options.missing_tokens.iter().any(|t| t == field) {
                columns[j].push(None);
                continue;
            }
            let code = match lookup[j].get(field) {
                Some(&c) => c,
                None if fixed[j] => {
                    return Err(Error::Schema(format!(
                        "line {line}: unknown category `{field}` for `{}`",
                        variables[j].name
                    )))
                }
                None => {
                    let c = variables[j].levels.len() as u32;
                    variables[j].levels.push(field.to_string());
                    lookup[j].insert(field.to_string(), c);
                    c
                }
            };
            columns[j].push(Some(code));
        }
    }
    if columns[0].is_empty() {
        return Err(Error::EmptyInput);
    }
    // A fully missing or single-valued column still needs two levels to be a
    // valid categorical variable; pad with placeholder labels.
    for v in variables.iter_mut() {
        let mut k = 0;
        while v.levels.len() < 2 {
            let label = format!("_level{k}");
            if !v.levels.contains(&label) {
                v.levels.push(label);
            }
            k += 1;
        }
    }
    Dataset::new(variables, columns)
}

/// Where a population distribution came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationSource {
    /// A census or equivalent, treated as fixed.
    Exact,
    /// Sample proportions from an external dataset of `n_ex` records.
    Estimated { n_ex: usize },
}

/// Population marginal distribution of the target variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationDistribution {
    pub target: String,
    pub proportions: Vec<f64>,
    pub source: PopulationSource,
}

impl PopulationDistribution {
    pub fn new(target: impl Into<String>, proportions: Vec<f64>, source: PopulationSource) -> Result<Self> {
        let sum: f64 = proportions.iter().sum();
        if proportions.len() < 2 {
            return Err(Error::InvalidInput("population distribution needs at least two levels".into()));
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("population proportions sum to {sum}, not 1")));
        }
        if let Some(p) = proportions.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::InvalidInput(format!("population proportion {p} is not in (0, 1)")));
        }
        if let PopulationSource::Estimated { n_ex } = source {
            if n_ex < 1 {
                return Err(Error::InvalidInput("external sample size must be at least 1".into()));
            }
        }
        Ok(PopulationDistribution { target: target.into(), proportions, source })
    }

    /// Binary target with `P(level 1) = p1`.
    pub fn binary(target: impl Into<String>, p1: f64, source: PopulationSource) -> Result<Self> {
        Self::new(target, vec![1.0 - p1, p1], source)
    }

    /// Parses `"label=prob,label=prob"`. At most one level may be omitted;
    /// its probability is the complement of the listed ones.
    pub fn from_level_spec(variable: &Variable, spec: &str, source: PopulationSource) -> Result<Self> {
        let k = variable.n_levels();
        let mut probs: Vec<Option<f64>> = vec![None; k];
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (label, value) = item
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("expected `level=prob`, got `{item}`")))?;
            let idx = variable.level_index(label.trim()).ok_or_else(|| {
                Error::InvalidInput(format!("`{}` is not a level of `{}`", label.trim(), variable.name))
            })?;
            let p: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("invalid probability `{}`", value.trim())))?;
            if probs[idx as usize].replace(p).is_some() {
                return Err(Error::InvalidInput(format!("level `{}` listed twice", label.trim())));
            }
        }
        let unlisted: Vec<usize> = (0..k).filter(|&i| probs[i].is_none()).collect();
        match unlisted.as_slice() {
            [] => {}
            [i] => {
                let listed: f64 = probs.iter().flatten().sum();
                let rest = 1.0 - listed;
                if rest < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "listed proportions sum to {listed}; complement for `{}` would be negative",
                        variable.levels[*i]
                    )));
                }
                probs[*i] = Some(rest);
            }
            _ => {
                return Err(Error::InvalidInput(format!(
                    "population distribution for `{}` leaves {} levels unspecified",
                    variable.name,
                    unlisted.len()
                )))
            }
        }
        let mut proportions: Vec<f64> = probs.into_iter().map(|p| p.unwrap_or(0.0)).collect();
        // Normalize away representation error from decimal input.
        let sum: f64 = proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("population proportions sum to {sum}, not 1")));
        }
        proportions.iter_mut().for_each(|p| *p /= sum);
        Self::new(variable.name.clone(), proportions, source)
    }

    pub fn n_levels(&self) -> usize {
        self.proportions.len()
    }
}
