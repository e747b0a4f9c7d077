//! Balanced entity-by-year panel and the variable transforms used by every estimator.
//!
//! Cells are stored row-major (entity, then year). Missing cells carry an explicit
//! mask; no transform ever unmasks a cell.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use indexmap::IndexMap;

use crate::{Error, Result};

/// One `N x T` variable with its missing-cell mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelColumn {
    values: Vec<f64>,
    missing: Vec<bool>,
}

impl PanelColumn {
    pub fn new(values: Vec<f64>, missing: Vec<bool>) -> Self {
        assert_eq!(values.len(), missing.len());
        let values = values
            .into_iter()
            .zip(&missing)
            .map(|(v, &m)| if m { f64::NAN } else { v })
            .collect();
        Self { values, missing }
    }

    /// Column with no missing cells.
    pub fn complete(values: Vec<f64>) -> Self {
        let missing = values.iter().map(|v| !v.is_finite()).collect();
        Self::new(values, missing)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn missing(&self) -> &[bool] {
        &self.missing
    }

    pub fn get(&self, idx: usize) -> Option<f64> {
        if self.missing[idx] {
            None
        } else {
            Some(self.values[idx])
        }
    }

    pub fn n_missing(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn map_cells(&self, f: impl Fn(f64) -> f64) -> PanelColumn {
        PanelColumn::new(self.values.iter().map(|&v| f(v)).collect(), self.missing.clone())
    }
}

/// Direction of an indicator comparison against a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `value >= theta`
    AtLeast,
    /// `value < theta`
    Below,
}

/// A derived variable.
#[derive(Debug, Clone, PartialEq)]
pub enum VariableTransform {
    FirstDifference(String),
    Lag(String, usize),
    Lead(String, usize),
    Log(String),
    /// 1 where `num / den >= theta`, else 0.
    IndicatorRatio { num: String, den: String, theta: f64 },
    /// 1 where `var` compares to `theta` in the given direction, else 0.
    Indicator { var: String, theta: f64, direction: Direction },
    Interaction(String, String),
}

impl VariableTransform {
    /// Default column name of the derived variable.
    pub fn default_name(&self) -> String {
        match self {
            Self::FirstDifference(v) => format!("d.{v}"),
            Self::Lag(v, k) => format!("l{k}.{v}"),
            Self::Lead(v, k) => format!("f{k}.{v}"),
            Self::Log(v) => format!("log.{v}"),
            Self::IndicatorRatio { num, den, theta } => format!("1[{num}/{den}>={theta}]"),
            Self::Indicator { var, theta, direction } => match direction {
                Direction::AtLeast => format!("1[{var}>={theta}]"),
                Direction::Below => format!("1[{var}<{theta}]"),
            },
            Self::Interaction(a, b) => format!("{a}:{b}"),
        }
    }

    /// Number of leading and trailing years the transform masks on a complete column.
    pub fn span_loss(&self) -> (usize, usize) {
        match self {
            Self::FirstDifference(_) => (1, 0),
            Self::Lag(_, k) => (*k, 0),
            Self::Lead(_, k) => (0, *k),
            _ => (0, 0),
        }
    }

    pub fn sources(&self) -> Vec<&str> {
        match self {
            Self::FirstDifference(v) | Self::Lag(v, _) | Self::Lead(v, _) | Self::Log(v) => vec![v],
            Self::IndicatorRatio { num, den, .. } => vec![num, den],
            Self::Indicator { var, .. } => vec![var],
            Self::Interaction(a, b) => vec![a, b],
        }
    }
}

/// One long-format observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub entity: String,
    pub year: i32,
    pub name: String,
    pub value: f64,
}

impl Record {
    pub fn new(entity: impl Into<String>, year: i32, name: impl Into<String>, value: f64) -> Self {
        Self { entity: entity.into(), year, name: name.into(), value }
    }
}

/// Balanced entity-by-year table of named numeric variables.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    entities: Vec<String>,
    years: Vec<i32>,
    columns: IndexMap<String, PanelColumn>,
}

fn check_contiguous(years: &[i32]) -> Result<()> {
    for w in years.windows(2) {
        if w[1] != w[0] + 1 {
            return Err(Error::NonContiguousYears { before: w[0], after: w[1] });
        }
    }
    Ok(())
}

impl PanelDataset {
    /// Empty panel on the given grid. Entities must be unique and years contiguous.
    pub fn new(entities: Vec<String>, years: Vec<i32>) -> Result<Self> {
        let unique: BTreeSet<&String> = entities.iter().collect();
        if unique.len() != entities.len() {
            return Err(Error::InvalidArgument("duplicate entity identifiers".into()));
        }
        if years.is_empty() || entities.is_empty() {
            return Err(Error::InvalidArgument("panel needs at least one entity and one year".into()));
        }
        check_contiguous(&years)?;
        Ok(Self { entities, years, columns: IndexMap::new() })
    }

    /// Build a balanced panel from long-format records. Entities are ordered
    /// lexicographically and years ascending; cells not covered by a record are masked.
    pub fn from_records(records: &[Record]) -> Result<Self> {
        let entities: BTreeSet<&str> = records.iter().map(|r| r.entity.as_str()).collect();
        let years: BTreeSet<i32> = records.iter().map(|r| r.year).collect();
        let entities: Vec<String> = entities.into_iter().map(String::from).collect();
        let years: Vec<i32> = years.into_iter().collect();
        let mut panel = Self::new(entities, years)?;
        let n_cells = panel.n_entities() * panel.n_years();
        let entity_idx: BTreeMap<&str, usize> =
            panel.entities.iter().enumerate().map(|(i, e)| (e.as_str(), i)).collect();
        let first_year = panel.years[0];
        let t_len = panel.n_years();

        let mut staged: IndexMap<String, (Vec<f64>, Vec<bool>, Vec<bool>)> = IndexMap::new();
        for r in records {
            let cell = entity_idx[r.entity.as_str()] * t_len + (r.year - first_year) as usize;
            let (vals, miss, seen) = staged
                .entry(r.name.clone())
                .or_insert_with(|| (vec![f64::NAN; n_cells], vec![true; n_cells], vec![false; n_cells]));
            if seen[cell] {
                return Err(Error::DuplicateRecord {
                    entity: r.entity.clone(),
                    year: r.year,
                    name: r.name.clone(),
                });
            }
            seen[cell] = true;
            if r.value.is_finite() {
                vals[cell] = r.value;
                miss[cell] = false;
            }
        }
        for (name, (vals, miss, _)) in staged {
            panel.columns.insert(name, PanelColumn::new(vals, miss));
        }
        Ok(panel)
    }

    /// Long-format export; masked cells are omitted.
    pub fn to_records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        for (name, col) in &self.columns {
            for (i, e) in self.entities.iter().enumerate() {
                for (t, &y) in self.years.iter().enumerate() {
                    if let Some(v) = col.get(self.index(i, t)) {
                        out.push(Record::new(e.clone(), y, name.clone(), v));
                    }
                }
            }
        }
        out
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_years(&self) -> usize {
        self.years.len()
    }

    /// Flat cell index of (entity `i`, year position `t`).
    pub fn index(&self, i: usize, t: usize) -> usize {
        i * self.years.len() + t
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.contains_key(name)
    }

    pub fn column(&self, name: &str) -> Result<&PanelColumn> {
        self.columns.get(name).ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn value(&self, name: &str, i: usize, t: usize) -> Result<Option<f64>> {
        Ok(self.column(name)?.get(self.index(i, t)))
    }

    /// Insert (or replace) a column. The column must match the panel grid.
    pub fn insert_column(&mut self, name: impl Into<String>, column: PanelColumn) -> Result<()> {
        let cells = self.n_entities() * self.n_years();
        if column.len() != cells {
            return Err(Error::DimensionMismatch { expected: cells, got: column.len() });
        }
        self.columns.insert(name.into(), column);
        Ok(())
    }

    /// Compute a transform without inserting it.
    pub fn transform(&self, transform: &VariableTransform) -> Result<PanelColumn> {
        match transform {
            VariableTransform::FirstDifference(v) => self.first_difference(v),
            VariableTransform::Lag(v, k) => self.lag(v, *k),
            VariableTransform::Lead(v, k) => self.lead(v, *k),
            VariableTransform::Log(v) => self.log_col(v),
            VariableTransform::IndicatorRatio { num, den, theta } => {
                self.indicator_threshold(num, den, *theta)
            }
            VariableTransform::Indicator { var, theta, direction } => {
                self.indicator(var, *theta, *direction)
            }
            VariableTransform::Interaction(a, b) => self.interaction(a, b),
        }
    }

    /// Compute a transform and insert it under `name` (or its default name).
    /// Returns the column name.
    pub fn derive(&mut self, transform: &VariableTransform, name: Option<&str>) -> Result<String> {
        let col = self.transform(transform)?;
        let name = name.map(String::from).unwrap_or_else(|| transform.default_name());
        self.insert_column(name.clone(), col)?;
        Ok(name)
    }

    fn shifted(&self, var: &str, offset: isize) -> Result<PanelColumn> {
        let src = self.column(var)?;
        let t_len = self.n_years() as isize;
        let cells = src.len();
        let mut values = vec![f64::NAN; cells];
        let mut missing = vec![true; cells];
        for i in 0..self.n_entities() {
            for t in 0..t_len {
                let s = t - offset;
                if s < 0 || s >= t_len {
                    continue;
                }
                let from = self.index(i, s as usize);
                let to = self.index(i, t as usize);
                if !src.missing[from] {
                    values[to] = src.values[from];
                    missing[to] = false;
                }
            }
        }
        Ok(PanelColumn::new(values, missing))
    }

    /// `x_it - x_i,t-1`; the first year is masked.
    pub fn first_difference(&self, var: &str) -> Result<PanelColumn> {
        let src = self.column(var)?;
        if self.n_years() < 2 {
            return Err(Error::InvalidArgument("first difference needs T >= 2".into()));
        }
        let lagged = self.shifted(var, 1)?;
        let cells = src.len();
        let mut values = vec![f64::NAN; cells];
        let mut missing = vec![true; cells];
        for c in 0..cells {
            if !src.missing[c] && !lagged.missing[c] {
                values[c] = src.values[c] - lagged.values[c];
                missing[c] = false;
            }
        }
        Ok(PanelColumn::new(values, missing))
    }

    fn check_order(&self, k: usize) -> Result<()> {
        if k == 0 || k + 1 > self.n_years() {
            return Err(Error::InvalidArgument(format!(
                "lag/lead order {k} outside 1..={}",
                self.n_years().saturating_sub(1)
            )));
        }
        Ok(())
    }

    /// Value from `k` years earlier; the first `k` years are masked.
    pub fn lag(&self, var: &str, k: usize) -> Result<PanelColumn> {
        self.check_order(k)?;
        self.shifted(var, k as isize)
    }

    /// Value from `k` years later; the last `k` years are masked.
    pub fn lead(&self, var: &str, k: usize) -> Result<PanelColumn> {
        self.check_order(k)?;
        self.shifted(var, -(k as isize))
    }

    /// Natural log. Every unmasked cell must be strictly positive.
    pub fn log_col(&self, var: &str) -> Result<PanelColumn> {
        let src = self.column(var)?;
        for c in 0..src.len() {
            if !src.missing[c] && src.values[c] <= 0.0 {
                let t = self.n_years();
                return Err(Error::NonPositiveLog {
                    entity: self.entities[c / t].clone(),
                    year: self.years[c % t],
                    value: src.values[c],
                });
            }
        }
        Ok(src.map_cells(f64::ln))
    }

    /// 1 where `num / den >= theta`, 0 otherwise. Cells with a non-positive denominator
    /// are masked.
    pub fn indicator_threshold(&self, num: &str, den: &str, theta: f64) -> Result<PanelColumn> {
        if !theta.is_finite() {
            return Err(Error::InvalidArgument("threshold must be finite".into()));
        }
        let n = self.column(num)?;
        let d = self.column(den)?;
        let cells = n.len();
        let mut values = vec![f64::NAN; cells];
        let mut missing = vec![true; cells];
        for c in 0..cells {
            if n.missing[c] || d.missing[c] || d.values[c] <= 0.0 {
                continue;
            }
            values[c] = if n.values[c] / d.values[c] >= theta { 1.0 } else { 0.0 };
            missing[c] = false;
        }
        Ok(PanelColumn::new(values, missing))
    }

    pub fn indicator(&self, var: &str, theta: f64, direction: Direction) -> Result<PanelColumn> {
        if !theta.is_finite() {
            return Err(Error::InvalidArgument("threshold must be finite".into()));
        }
        let src = self.column(var)?;
        Ok(src.map_cells(|v| {
            let hit = match direction {
                Direction::AtLeast => v >= theta,
                Direction::Below => v < theta,
            };
            if hit {
                1.0
            } else {
                0.0
            }
        }))
    }

    /// Elementwise product; masked where either factor is masked.
    pub fn interaction(&self, a: &str, b: &str) -> Result<PanelColumn> {
        let x = self.column(a)?;
        let y = self.column(b)?;
        let cells = x.len();
        let mut values = vec![f64::NAN; cells];
        let mut missing = vec![true; cells];
        for c in 0..cells {
            if !x.missing[c] && !y.missing[c] {
                values[c] = x.values[c] * y.values[c];
                missing[c] = false;
            }
        }
        Ok(PanelColumn::new(values, missing))
    }

    /// Keep the entities for which `keep(entity_id, index)` is true; the year range is
    /// unchanged.
    pub fn subset(&self, keep: impl Fn(&str, usize) -> bool) -> Result<PanelDataset> {
        let kept: Vec<usize> =
            (0..self.n_entities()).filter(|&i| keep(&self.entities[i], i)).collect();
        if kept.is_empty() {
            return Err(Error::EmptySubset);
        }
        let t_len = self.n_years();
        let mut out = PanelDataset {
            entities: kept.iter().map(|&i| self.entities[i].clone()).collect(),
            years: self.years.clone(),
            columns: IndexMap::new(),
        };
        for (name, col) in &self.columns {
            let mut values = Vec::with_capacity(kept.len() * t_len);
            let mut missing = Vec::with_capacity(kept.len() * t_len);
            for &i in &kept {
                values.extend_from_slice(&col.values[i * t_len..(i + 1) * t_len]);
                missing.extend_from_slice(&col.missing[i * t_len..(i + 1) * t_len]);
            }
            out.columns.insert(name.clone(), PanelColumn::new(values, missing));
        }
        Ok(out)
    }

    /// Keep the years in `first..=last`; all entities are kept.
    pub fn restrict_years(&self, first: i32, last: i32) -> Result<PanelDataset> {
        let kept: Vec<usize> = (0..self.n_years()).filter(|&t| (first..=last).contains(&self.years[t])).collect();
        if kept.is_empty() {
            return Err(Error::InvalidArgument(format!("no years in {first}..={last}")));
        }
        let t_len = self.n_years();
        let n = self.n_entities();
        let mut out = PanelDataset {
            entities: self.entities.clone(),
            years: kept.iter().map(|&t| self.years[t]).collect(),
            columns: IndexMap::new(),
        };
        for (name, col) in &self.columns {
            let cells = (0..n).flat_map(|i| kept.iter().map(move |&t| i * t_len + t));
            let (values, missing) = cells.map(|c| (col.values[c], col.missing[c])).unzip();
            out.columns.insert(name.clone(), PanelColumn::new(values, missing));
        }
        Ok(out)
    }

    /// Entities whose `var` is strictly positive in at least one observed year (the
    /// coal-county rule applied to active mines).
    pub fn entities_ever_positive(&self, var: &str) -> Result<BTreeSet<String>> {
        let col = self.column(var)?;
        let t_len = self.n_years();
        Ok((0..self.n_entities())
            .filter(|&i| (0..t_len).any(|t| col.get(i * t_len + t).is_some_and(|v| v > 0.0)))
            .map(|i| self.entities[i].clone())
            .collect())
    }

    /// Subset to entities with `var > 0` in some year.
    pub fn coal_subset(&self, var: &str) -> Result<PanelDataset> {
        let keep = self.entities_ever_positive(var)?;
        self.subset(|e, _| keep.contains(e))
    }
}

impl fmt::Display for PanelDataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "panel: {} entities x {} years ({}-{}), {} variables",
            self.n_entities(),
            self.n_years(),
            self.years[0],
            self.years[self.n_years() - 1],
            self.columns.len()
        )
    }
}
