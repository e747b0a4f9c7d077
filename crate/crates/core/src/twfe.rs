//! Two-way fixed-effects OLS with multiway cluster-robust covariance.
//!
//! Rows with a masked cell in any used column are dropped (listwise deletion). The
//! surviving rows are demeaned by the larger fixed-effect dimension and then residualized
//! on the demeaned dummies of the smaller one, which is exact for unbalanced samples.
//! Clustered covariance follows the
//! Cameron–Gelbach–Miller inclusion–exclusion sum with a per-term `G/(G-1)` factor and
//! the `(n-1)/(n-K)` adjustment.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};

use crate::inference::{significance_code, two_sided_p, Reference};
use crate::linalg::{collinear_columns, floor_psd, spd_inverse, COLLINEARITY_TOL};
use crate::panel::{PanelColumn, PanelDataset};
use crate::{Error, Result};

/// Maximum cell change at which alternating demeaning stops, relative to the column
/// scale (`max(1, max |x|)`).
pub const DEMEAN_TOL: f64 = 1e-10;
pub const DEMEAN_MAX_SWEEPS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dim {
    Entity,
    Year,
}

impl Dim {
    pub fn label(self) -> &'static str {
        match self {
            Dim::Entity => "entity",
            Dim::Year => "year",
        }
    }
}

/// Entity-level grouping used for grouped slopes: each listed regressor is replaced by
/// one interaction column per group level.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedSlopes {
    pub groups: BTreeMap<String, String>,
    pub vars: Vec<String>,
}

/// Declarative description of one regression on an already-derived panel.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub dependent: String,
    pub regressors: Vec<String>,
    pub fe: Vec<Dim>,
    pub cluster: Vec<Dim>,
    /// Entities to keep; `None` keeps all.
    pub sample: Option<BTreeSet<String>>,
    pub grouped: Option<GroupedSlopes>,
    /// Student-t reference with `min(G) - 1` degrees of freedom instead of the normal.
    pub t_reference: bool,
}

impl ModelSpec {
    pub fn new(name: impl Into<String>, dependent: impl Into<String>, regressors: &[&str]) -> Self {
        Self {
            name: name.into(),
            dependent: dependent.into(),
            regressors: regressors.iter().map(|s| s.to_string()).collect(),
            fe: vec![Dim::Entity, Dim::Year],
            cluster: vec![Dim::Entity, Dim::Year],
            sample: None,
            grouped: None,
            t_reference: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.regressors.iter().any(|r| *r == self.dependent) {
            return Err(Error::InvalidArgument(format!(
                "dependent variable {} listed among regressors",
                self.dependent
            )));
        }
        let unique: BTreeSet<&String> = self.regressors.iter().collect();
        if unique.len() != self.regressors.len() {
            return Err(Error::InvalidArgument("duplicate regressor".into()));
        }
        if let Some(g) = &self.grouped {
            for v in &g.vars {
                if !self.regressors.contains(v) {
                    return Err(Error::InvalidArgument(format!("grouped variable {v} is not a regressor")));
                }
            }
        }
        Ok(())
    }
}

/// Estimation sample after listwise deletion, with the regressor matrix expanded for
/// grouped slopes.
#[derive(Debug, Clone)]
pub struct Design {
    pub entity: Vec<usize>,
    pub year: Vec<usize>,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub names: Vec<String>,
    /// Panel entity ids and years (row labels index into these).
    pub entity_ids: Vec<String>,
    pub years: Vec<i32>,
}

impl Design {
    pub fn nobs(&self) -> usize {
        self.y.len()
    }

    pub fn build(spec: &ModelSpec, panel: &PanelDataset) -> Result<Design> {
        spec.validate()?;
        let dep = panel.column(&spec.dependent)?;
        let cols: Vec<&PanelColumn> =
            spec.regressors.iter().map(|r| panel.column(r)).collect::<Result<_>>()?;
        let t_len = panel.n_years();

        let group_of: Option<Vec<Option<&String>>> = spec.grouped.as_ref().map(|g| {
            panel.entities().iter().map(|e| g.groups.get(e)).collect()
        });
        let levels: Vec<String> = spec
            .grouped
            .as_ref()
            .map(|g| g.groups.values().cloned().collect::<BTreeSet<_>>().into_iter().collect())
            .unwrap_or_default();
        if spec.grouped.is_some() && levels.len() < 2 {
            return Err(Error::SingleLevelFactor("grouped slopes".into()));
        }

        let mut names = Vec::new();
        let mut expanded: Vec<(usize, Option<&str>)> = Vec::new();
        for (k, r) in spec.regressors.iter().enumerate() {
            let grouped = spec.grouped.as_ref().is_some_and(|g| g.vars.contains(r));
            if grouped {
                for lvl in &levels {
                    names.push(format!("{lvl}:{r}"));
                    expanded.push((k, Some(lvl.as_str())));
                }
            } else {
                names.push(r.clone());
                expanded.push((k, None));
            }
        }

        let mut entity = Vec::new();
        let mut year = Vec::new();
        let mut y = Vec::new();
        let mut xs: Vec<f64> = Vec::new();
        for i in 0..panel.n_entities() {
            if let Some(s) = &spec.sample {
                if !s.contains(&panel.entities()[i]) {
                    continue;
                }
            }
            let grp = match &group_of {
                Some(g) => match g[i] {
                    Some(lvl) => Some(lvl.as_str()),
                    None => {
                        return Err(Error::InvalidArgument(format!(
                            "entity {} has no group for grouped slopes",
                            panel.entities()[i]
                        )))
                    }
                },
                None => None,
            };
            for t in 0..t_len {
                let c = i * t_len + t;
                let Some(yv) = dep.get(c) else { continue };
                if cols.iter().any(|col| col.missing()[c]) {
                    continue;
                }
                entity.push(i);
                year.push(t);
                y.push(yv);
                for &(k, lvl) in &expanded {
                    let v = cols[k].values()[c];
                    xs.push(match lvl {
                        Some(l) if Some(l) != grp => 0.0,
                        _ => v,
                    });
                }
            }
        }
        let n = y.len();
        Ok(Design {
            entity,
            year,
            y: DVector::from_vec(y),
            x: DMatrix::from_row_slice(n, names.len(), &xs),
            names,
            entity_ids: panel.entities().to_vec(),
            years: panel.years().to_vec(),
        })
    }
}

/// Complete `N x T` sub-panel of a design, rows entity-major (`i * T + t`).
#[derive(Debug, Clone)]
pub struct Balanced {
    pub design: Design,
    /// Panel indices of the kept entities and years.
    pub entities: Vec<usize>,
    pub years: Vec<usize>,
    pub dropped_entities: Vec<String>,
    pub dropped_years: Vec<i32>,
}

impl Balanced {
    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_years(&self) -> usize {
        self.years.len()
    }

    pub fn entity_ids(&self) -> Vec<String> {
        self.entities.iter().map(|&i| self.design.entity_ids[i].clone()).collect()
    }

    pub fn year_labels(&self) -> Vec<i32> {
        self.years.iter().map(|&t| self.design.years[t]).collect()
    }

    /// Build from a design: years without any row are dropped, then entities of
    /// `sample` (all panel entities when `None`) missing a remaining year are excluded.
    pub fn from_design(design: &Design, sample: Option<&BTreeSet<String>>) -> Result<Balanced> {
        let t_all = design.years.len();
        let mut present = vec![vec![None; t_all]; design.entity_ids.len()];
        for r in 0..design.nobs() {
            present[design.entity[r]][design.year[r]] = Some(r);
        }
        let years: Vec<usize> = (0..t_all).filter(|&t| present.iter().any(|row| row[t].is_some())).collect();
        let dropped_years = (0..t_all).filter(|t| !years.contains(t)).map(|t| design.years[t]).collect();
        let mut entities = Vec::new();
        let mut dropped_entities = Vec::new();
        for (i, row) in present.iter().enumerate() {
            if sample.is_some_and(|s| !s.contains(&design.entity_ids[i])) {
                continue;
            }
            if years.iter().all(|&t| row[t].is_some()) {
                entities.push(i);
            } else {
                dropped_entities.push(design.entity_ids[i].clone());
            }
        }
        if entities.len() < 2 || years.len() < 2 {
            return Err(Error::InsufficientObservations { needed: 2, have: entities.len().min(years.len()) });
        }
        let rows: Vec<usize> =
            entities.iter().flat_map(|&i| years.iter().map(|&t| present[i][t].unwrap()).collect::<Vec<_>>()).collect();
        let k = design.x.ncols();
        let sub = Design {
            entity: rows.iter().map(|&r| design.entity[r]).collect(),
            year: rows.iter().map(|&r| design.year[r]).collect(),
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&r| design.y[r])),
            x: DMatrix::from_fn(rows.len(), k, |r, j| design.x[(rows[r], j)]),
            names: design.names.clone(),
            entity_ids: design.entity_ids.clone(),
            years: design.years.clone(),
        };
        Ok(Balanced { design: sub, entities, years, dropped_entities, dropped_years })
    }

    pub fn build(spec: &ModelSpec, panel: &PanelDataset) -> Result<Balanced> {
        let design = Design::build(spec, panel)?;
        Balanced::from_design(&design, spec.sample.as_ref())
    }
}

/// Groups in the smaller dimension up to which two-way demeaning is solved directly.
pub const DIRECT_DEMEAN_MAX_GROUPS: usize = 2_000;

/// Subtract group means in place; returns the largest absolute mean removed.
fn subtract_means(labels: &[usize], counts: &[usize], col: &mut [f64]) -> f64 {
    let mut sums = vec![0.0; counts.len()];
    for (r, &g) in labels.iter().enumerate() {
        sums[g] += col[r];
    }
    let mut change: f64 = 0.0;
    for (g, s) in sums.iter_mut().enumerate() {
        if counts[g] > 0 {
            *s /= counts[g] as f64;
        }
        change = change.max(s.abs());
    }
    for (r, &g) in labels.iter().enumerate() {
        col[r] -= sums[g];
    }
    change
}

fn group_counts(labels: &[usize]) -> Vec<usize> {
    let mut counts = vec![0usize; labels.iter().max().map_or(0, |m| m + 1)];
    for &g in labels {
        counts[g] += 1;
    }
    counts
}

/// Two-way within transformation of `cols` (each of length `n`) in place. With one
/// dimension this is a single pass of group demeaning. With both, the columns are
/// demeaned by the dimension with more groups and then residualized on that dimension's
/// demeaned dummies for the other, which is exact on unbalanced samples. When both
/// dimensions exceed [`DIRECT_DEMEAN_MAX_GROUPS`] alternating projections are used
/// instead. Returns the number of sweeps used.
pub fn demean_in_place(
    entity: &[usize],
    year: &[usize],
    fe: &[Dim],
    cols: &mut [&mut [f64]],
) -> Result<usize> {
    if fe.is_empty() {
        return Err(Error::InvalidArgument("at least one fixed-effect dimension is required".into()));
    }
    let (counts_e, counts_t) = (group_counts(entity), group_counts(year));
    let both = fe.contains(&Dim::Entity) && fe.contains(&Dim::Year);
    if !both {
        let (labels, counts) = if fe.contains(&Dim::Entity) { (entity, &counts_e) } else { (year, &counts_t) };
        for col in cols.iter_mut() {
            subtract_means(labels, counts, col);
        }
        return Ok(1);
    }
    let (big, big_counts, small, small_counts) = if counts_e.len() >= counts_t.len() {
        (entity, &counts_e, year, &counts_t)
    } else {
        (year, &counts_t, entity, &counts_e)
    };
    if small_counts.len() <= DIRECT_DEMEAN_MAX_GROUPS {
        demean_direct(big, big_counts, small, small_counts.len(), cols);
        return Ok(1);
    }
    let mut max_sweeps = 1;
    for col in cols.iter_mut() {
        let scale = col.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let mut sweeps = 0;
        loop {
            sweeps += 1;
            let change = subtract_means(entity, &counts_e, col).max(subtract_means(year, &counts_t, col));
            if change < DEMEAN_TOL * scale {
                break;
            }
            if sweeps >= DEMEAN_MAX_SWEEPS {
                return Err(Error::DemeanNotConverged { sweeps });
            }
        }
        max_sweeps = max_sweeps.max(sweeps);
    }
    Ok(max_sweeps)
}

fn demean_direct(big: &[usize], big_counts: &[usize], small: &[usize], n_small: usize, cols: &mut [&mut [f64]]) {
    let n = big.len();
    let mut d = DMatrix::<f64>::zeros(n, n_small);
    for (r, &g) in small.iter().enumerate() {
        d[(r, g)] = 1.0;
    }
    if n > 0 {
        for c in d.as_mut_slice().chunks_mut(n) {
            subtract_means(big, big_counts, c);
        }
    }
    // demeaned dummies sum to zero within each connected component; keep a basis
    let bad = collinear_columns(&(d.transpose() * &d));
    let keep: Vec<usize> = (0..n_small).filter(|j| !bad.contains(j)).collect();
    let d = d.select_columns(&keep);
    let chol = (d.transpose() * &d).cholesky();
    for col in cols.iter_mut() {
        subtract_means(big, big_counts, col);
        let Some(chol) = &chol else { continue };
        // second pass removes the rounding left by the first
        for _ in 0..2 {
            let v = DVector::from_column_slice(col);
            let coef = chol.solve(&d.tr_mul(&v));
            let fitted = &d * coef;
            for (c, f) in col.iter_mut().zip(fitted.iter()) {
                *c -= f;
            }
        }
    }
}

/// Regressors that are collinear after the within transformation: columns whose
/// demeaned variation is negligible next to their raw variation (absorbed by the fixed
/// effects), then linear combinations of earlier columns.
pub fn within_collinear(raw: &DMatrix<f64>, within: &DMatrix<f64>) -> Vec<usize> {
    let absorbed: Vec<usize> = (0..raw.ncols())
        .filter(|&j| {
            let col = raw.column(j);
            let m = col.mean();
            let centered: f64 = col.iter().map(|v| (v - m).powi(2)).sum();
            within.column(j).norm_squared() <= COLLINEARITY_TOL * centered
        })
        .collect();
    let keep: Vec<usize> = (0..raw.ncols()).filter(|j| !absorbed.contains(j)).collect();
    let sub = within.select_columns(&keep);
    let mut bad: Vec<usize> = absorbed;
    bad.extend(collinear_columns(&(sub.transpose() * &sub)).into_iter().map(|j| keep[j]));
    bad.sort_unstable();
    bad
}

/// Demean `y` and the columns of `x` on the design's rows.
pub fn within_transform(design: &Design, fe: &[Dim]) -> Result<(DVector<f64>, DMatrix<f64>, usize)> {
    let n = design.nobs();
    let mut y = design.y.clone();
    // column-major storage keeps each regressor column contiguous
    let mut x = design.x.clone();
    let mut cols: Vec<&mut [f64]> = Vec::with_capacity(x.ncols() + 1);
    cols.push(y.as_mut_slice());
    if n > 0 {
        cols.extend(x.as_mut_slice().chunks_mut(n));
    }
    let sweeps = demean_in_place(&design.entity, &design.year, fe, &mut cols)?;
    Ok((y, x, sweeps))
}

/// Options for cluster-robust covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterOptions {
    /// Apply `G/(G-1)` per term and `(n-1)/(n-K)` overall.
    pub small_sample: bool,
    /// Repair a non-PSD result by flooring eigenvalues at zero.
    pub floor_eigenvalues: bool,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self { small_sample: true, floor_eigenvalues: true }
    }
}

/// Multiway clustered covariance `Σ_S (-1)^{|S|+1} c_S A (Σ_g s_g s_g') A` over nonempty
/// subsets `S` of the clustering dimensions. `labels[d][r]` is row `r`'s cluster in
/// dimension `d`. Returns the covariance and whether eigenvalues were floored.
pub fn cluster_vcov(
    x: &DMatrix<f64>,
    resid: &DVector<f64>,
    xtx_inv: &DMatrix<f64>,
    labels: &[Vec<usize>],
    dim_names: &[&str],
    opts: ClusterOptions,
) -> Result<(DMatrix<f64>, bool)> {
    let n = x.nrows();
    let k = x.ncols();
    for (d, l) in labels.iter().enumerate() {
        let distinct: BTreeSet<usize> = l.iter().copied().collect();
        if distinct.len() < 2 {
            return Err(Error::SingleCluster(dim_names.get(d).unwrap_or(&"?").to_string()));
        }
    }
    let mut total = DMatrix::<f64>::zeros(k, k);
    let n_dims = labels.len();
    for mask in 1u32..(1 << n_dims) {
        let members: Vec<usize> = (0..n_dims).filter(|d| mask & (1 << d) != 0).collect();
        let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut sums: Vec<DVector<f64>> = Vec::new();
        for r in 0..n {
            let key: Vec<usize> = members.iter().map(|&d| labels[d][r]).collect();
            let next = index.len();
            let g = *index.entry(key).or_insert(next);
            if g == sums.len() {
                sums.push(DVector::zeros(k));
            }
            let e = resid[r];
            for j in 0..k {
                sums[g][j] += x[(r, j)] * e;
            }
        }
        let g_count = sums.len() as f64;
        let mut meat = DMatrix::<f64>::zeros(k, k);
        for s in &sums {
            meat.ger(1.0, s, s, 1.0);
        }
        let mut factor = 1.0;
        if opts.small_sample {
            factor *= g_count / (g_count - 1.0).max(1.0);
        }
        let sign = if members.len() % 2 == 1 { 1.0 } else { -1.0 };
        total += meat * (sign * factor);
    }
    let mut v = xtx_inv * total * xtx_inv;
    if opts.small_sample && n > k {
        v *= (n as f64 - 1.0) / (n as f64 - k as f64);
    }
    if opts.floor_eigenvalues {
        Ok(floor_psd(&v))
    } else {
        Ok(((&v + v.transpose()) * 0.5, false))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub code: &'static str,
}

/// Linear combination `c'β` with standard error from the reported covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearCombination {
    pub estimate: f64,
    pub se: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: String,
    pub dependent: String,
    pub names: Vec<String>,
    pub coefficients: DVector<f64>,
    pub vcov_iid: DMatrix<f64>,
    pub vcov_cluster: Option<DMatrix<f64>>,
    pub cluster_dims: Vec<Dim>,
    /// Clusters per dimension, in `cluster_dims` order.
    pub cluster_counts: Vec<usize>,
    pub residuals: DVector<f64>,
    pub x_within: DMatrix<f64>,
    pub xtx_inv: DMatrix<f64>,
    pub entity: Vec<usize>,
    pub year: Vec<usize>,
    pub entity_ids: Vec<String>,
    pub years: Vec<i32>,
    pub nobs: usize,
    pub n_entities: usize,
    pub n_years: usize,
    pub ssr: f64,
    pub r2: f64,
    pub within_r2: f64,
    pub log_likelihood: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_params: usize,
    pub reference: Reference,
    pub sweeps: usize,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn k(&self) -> usize {
        self.coefficients.len()
    }

    /// Clustered covariance if computed, otherwise the iid one.
    pub fn vcov(&self) -> &DMatrix<f64> {
        self.vcov_cluster.as_ref().unwrap_or(&self.vcov_iid)
    }

    pub fn se(&self) -> Vec<f64> {
        let v = self.vcov();
        (0..self.k()).map(|j| v[(j, j)].max(0.0).sqrt()).collect()
    }

    pub fn coef(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|j| self.coefficients[j])
    }

    pub fn coef_table(&self) -> Vec<CoefRow> {
        let se = self.se();
        (0..self.k())
            .map(|j| {
                let est = self.coefficients[j];
                let stat = est / se[j];
                let p = two_sided_p(stat, self.reference);
                CoefRow {
                    name: self.names[j].clone(),
                    estimate: est,
                    se: se[j],
                    statistic: stat,
                    p_value: p,
                    code: significance_code(p),
                }
            })
            .collect()
    }

    /// `c'β`, `sqrt(c'Vc)` and its two-sided p-value.
    pub fn linear_combination(&self, weights: &[f64]) -> Result<LinearCombination> {
        if weights.len() != self.k() {
            return Err(Error::DimensionMismatch { expected: self.k(), got: weights.len() });
        }
        let c = DVector::from_column_slice(weights);
        let estimate = c.dot(&self.coefficients);
        let var = (c.transpose() * self.vcov() * &c)[(0, 0)];
        let se = var.max(0.0).sqrt();
        let p_value = if se > 0.0 { two_sided_p(estimate / se, self.reference) } else { f64::NAN };
        Ok(LinearCombination { estimate, se, p_value })
    }

    /// Recompute clustered covariance for other dimensions.
    pub fn cluster_vcov(&self, dims: &[Dim], opts: ClusterOptions) -> Result<(DMatrix<f64>, bool)> {
        let labels: Vec<Vec<usize>> = dims
            .iter()
            .map(|d| match d {
                Dim::Entity => self.entity.clone(),
                Dim::Year => self.year.clone(),
            })
            .collect();
        let names: Vec<&str> = dims.iter().map(|d| d.label()).collect();
        cluster_vcov(&self.x_within, &self.residuals, &self.xtx_inv, &labels, &names, opts)
    }

    /// Residuals as an `N x T` matrix over the panel grid, NaN where no row survived.
    pub fn residual_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::from_element(self.entity_ids.len(), self.years.len(), f64::NAN);
        for r in 0..self.nobs {
            m[(self.entity[r], self.year[r])] = self.residuals[r];
        }
        m
    }
}

/// Gaussian log-likelihood at the ML variance `SSR/n`.
pub fn gaussian_loglik(ssr: f64, n: usize) -> f64 {
    let n = n as f64;
    -0.5 * n * ((2.0 * std::f64::consts::PI * ssr / n).ln() + 1.0)
}

pub fn fit_twfe(spec: &ModelSpec, panel: &PanelDataset) -> Result<FitResult> {
    let design = Design::build(spec, panel)?;
    fit_design(spec, &design)
}

pub fn fit_design(spec: &ModelSpec, design: &Design) -> Result<FitResult> {
    let n = design.nobs();
    let k = design.x.ncols();
    let n_entities = design.entity.iter().collect::<BTreeSet<_>>().len();
    let n_years = design.year.iter().collect::<BTreeSet<_>>().len();
    if n_entities < 2 {
        return Err(Error::InsufficientObservations { needed: 2, have: n_entities });
    }
    let fe_dof = match (spec.fe.contains(&Dim::Entity), spec.fe.contains(&Dim::Year)) {
        (true, true) => n_entities + n_years - 1,
        (true, false) => n_entities,
        (false, true) => n_years,
        (false, false) => 0,
    };
    let needed = k + n_entities + n_years;
    if n < needed {
        return Err(Error::InsufficientObservations { needed, have: n });
    }
    let (yw, xw, sweeps) = within_transform(design, &spec.fe)?;
    let gram = xw.transpose() * &xw;
    let bad = within_collinear(&design.x, &xw);
    if !bad.is_empty() {
        return Err(Error::Collinear(bad.into_iter().map(|j| design.names[j].clone()).collect()));
    }
    let xtx_inv = spd_inverse(&gram)?;
    let beta = &xtx_inv * (xw.transpose() * &yw);
    let resid = &yw - &xw * &beta;
    let ssr = resid.norm_squared();
    let sst_within = yw.norm_squared();
    let ybar = design.y.mean();
    let sst = design.y.iter().map(|v| (v - ybar).powi(2)).sum::<f64>();
    let within_r2 = if sst_within > 0.0 { (1.0 - ssr / sst_within).clamp(0.0, 1.0) } else { 0.0 };
    let r2 = if sst > 0.0 { 1.0 - ssr / sst } else { 0.0 };
    let resid_dof = n.saturating_sub(k + fe_dof).max(1);
    let sigma2 = ssr / resid_dof as f64;
    let vcov_iid = &xtx_inv * sigma2;

    let mut warnings = Vec::new();
    let mut cluster_counts = Vec::new();
    let vcov_cluster = if spec.cluster.is_empty() {
        None
    } else {
        let labels: Vec<Vec<usize>> = spec
            .cluster
            .iter()
            .map(|d| match d {
                Dim::Entity => design.entity.clone(),
                Dim::Year => design.year.clone(),
            })
            .collect();
        for l in &labels {
            cluster_counts.push(l.iter().collect::<BTreeSet<_>>().len());
        }
        let names: Vec<&str> = spec.cluster.iter().map(|d| d.label()).collect();
        let (v, floored) =
            cluster_vcov(&xw, &resid, &xtx_inv, &labels, &names, ClusterOptions::default())?;
        if floored {
            warnings.push("clustered covariance was not PSD; negative eigenvalues floored at zero".into());
        }
        Some(v)
    };
    let reference = if spec.t_reference && !cluster_counts.is_empty() {
        Reference::StudentT((*cluster_counts.iter().min().unwrap() as f64 - 1.0).max(1.0))
    } else {
        Reference::Normal
    };

    let log_likelihood = gaussian_loglik(ssr, n);
    // coefficients, absorbed effects and the error variance
    let n_params = k + fe_dof + 1;
    Ok(FitResult {
        model: spec.name.clone(),
        dependent: spec.dependent.clone(),
        names: design.names.clone(),
        coefficients: beta,
        vcov_iid,
        vcov_cluster,
        cluster_dims: spec.cluster.clone(),
        cluster_counts,
        residuals: resid,
        x_within: xw,
        xtx_inv,
        entity: design.entity.clone(),
        year: design.year.clone(),
        entity_ids: design.entity_ids.clone(),
        years: design.years.clone(),
        nobs: n,
        n_entities,
        n_years,
        ssr,
        r2,
        within_r2,
        log_likelihood,
        aic: -2.0 * log_likelihood + 2.0 * n_params as f64,
        bic: -2.0 * log_likelihood + (n as f64).ln() * n_params as f64,
        n_params,
        reference,
        sweeps,
        warnings,
    })
}

/// Interaction factor: a panel column (binary or categorical) or an entity-level grouping.
#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    Column(String),
    EntityGroups(BTreeMap<String, String>),
}

/// Product columns of `var` with each level of `factor`. A binary 0/1 column yields one
/// product column; categorical factors yield one column per level, summing to `var`.
pub fn make_interaction(
    panel: &PanelDataset,
    var: &str,
    factor: &Factor,
) -> Result<Vec<(String, PanelColumn)>> {
    let src = panel.column(var)?;
    let t_len = panel.n_years();
    let cells = src.len();
    match factor {
        Factor::Column(name) => {
            let f = panel.column(name)?;
            let mut levels: Vec<f64> = (0..cells).filter_map(|c| f.get(c)).collect();
            levels.sort_by(f64::total_cmp);
            levels.dedup();
            if levels.len() < 2 {
                return Err(Error::SingleLevelFactor(name.clone()));
            }
            if levels == [0.0, 1.0] {
                return Ok(vec![(format!("{var}:{name}"), panel.interaction(var, name)?)]);
            }
            Ok(levels
                .iter()
                .map(|&lvl| {
                    let mut values = vec![f64::NAN; cells];
                    let mut missing = vec![true; cells];
                    for c in 0..cells {
                        if let (Some(x), Some(g)) = (src.get(c), f.get(c)) {
                            values[c] = if g == lvl { x } else { 0.0 };
                            missing[c] = false;
                        }
                    }
                    (format!("{var}:{name}={lvl}"), PanelColumn::new(values, missing))
                })
                .collect())
        }
        Factor::EntityGroups(groups) => {
            let levels: BTreeSet<&String> = panel.entities().iter().filter_map(|e| groups.get(e)).collect();
            if levels.len() < 2 {
                return Err(Error::SingleLevelFactor("entity groups".into()));
            }
            Ok(levels
                .into_iter()
                .map(|lvl| {
                    let mut values = vec![f64::NAN; cells];
                    let mut missing = vec![true; cells];
                    for (i, e) in panel.entities().iter().enumerate() {
                        let Some(g) = groups.get(e) else { continue };
                        for t in 0..t_len {
                            let c = i * t_len + t;
                            if let Some(x) = src.get(c) {
                                values[c] = if g == lvl { x } else { 0.0 };
                                missing[c] = false;
                            }
                        }
                    }
                    (format!("{lvl}:{var}"), PanelColumn::new(values, missing))
                })
                .collect())
        }
    }
}
