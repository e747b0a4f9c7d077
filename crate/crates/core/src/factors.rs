//! Heterogeneous time trends: two-way fixed effects plus `d` smooth latent factors.
//!
//! The common component `V = Λ F'` minimizes `‖E − V‖² + κ Σ_i ‖D₂ v_i‖²` over rank-`d`
//! matrices, where `E` is the demeaned residual matrix and `D₂` takes second differences
//! along time. With `M = I + κ D₂'D₂` the minimizer is `V = [E M^{-1/2}]_d M^{-1/2}`,
//! so the alternation between `β` and `V` never increases the penalized objective. The
//! penalty weight `κ` is chosen once by generalized cross-validation of the smoother
//! `M^{-1}` on the first-step residuals projected onto their leading `d` loadings.
//! Standard errors use the regressors with loadings and factors projected out.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::inference::{significance_code, two_sided_p, Reference};
use crate::linalg::spd_inverse;
use crate::panel::PanelDataset;
use crate::twfe::{demean_in_place, gaussian_loglik, within_collinear, Balanced, CoefRow, ModelSpec};
use crate::{Error, Result};

pub const FACTOR_TOL: f64 = 1e-7;
pub const FACTOR_MAX_ITER: usize = 500;
pub const MAX_SELECT_FACTORS: usize = 8;

/// How the roughness penalty weight is set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Smoothing {
    Gcv,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct FactorFit {
    pub model: String,
    pub dependent: String,
    pub names: Vec<String>,
    pub beta: DVector<f64>,
    pub vcov: DMatrix<f64>,
    /// `T x d`, with `F'F = T I`.
    pub factors: DMatrix<f64>,
    /// `N x d`, with `Λ'Λ` diagonal.
    pub loadings: DMatrix<f64>,
    pub d: usize,
    pub kappa: f64,
    pub sigma2: f64,
    pub ssr: f64,
    pub r2: f64,
    pub log_likelihood: f64,
    pub nobs: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Penalized objective after each iteration.
    pub objective_trace: Vec<f64>,
    /// Residuals `N x T` after removing effects, regressors and factors.
    pub residuals: DMatrix<f64>,
    pub entity_ids: Vec<String>,
    pub years: Vec<i32>,
    pub dropped_entities: Vec<String>,
}

impl FactorFit {
    pub fn se(&self) -> Vec<f64> {
        (0..self.beta.len()).map(|j| self.vcov[(j, j)].max(0.0).sqrt()).collect()
    }

    pub fn coef(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|j| self.beta[j])
    }

    pub fn coef_table(&self) -> Vec<CoefRow> {
        let se = self.se();
        (0..self.beta.len())
            .map(|j| {
                let est = self.beta[j];
                let stat = est / se[j];
                let p = two_sided_p(stat, Reference::Normal);
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

    /// The common component `Λ F'`.
    pub fn common_component(&self) -> DMatrix<f64> {
        &self.loadings * self.factors.transpose()
    }
}

/// Second-difference penalty `D₂'D₂` for a series of length `t`.
pub fn second_difference_penalty(t: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(t.saturating_sub(2), t);
    for r in 0..t.saturating_sub(2) {
        d[(r, r)] = 1.0;
        d[(r, r + 1)] = -2.0;
        d[(r, r + 2)] = 1.0;
    }
    d.transpose() * d
}

/// `Σ_t (Δ² f(t))²` for each column.
pub fn roughness(f: &DMatrix<f64>) -> Vec<f64> {
    f.column_iter()
        .map(|c| (2..c.len()).map(|t| (c[t] - 2.0 * c[t - 1] + c[t - 2]).powi(2)).sum())
        .collect()
}

/// `M^{p}` for `M = I + κ D₂'D₂`, through its eigendecomposition.
fn penalty_power(eig: &SymmetricEigen<f64, nalgebra::Dyn>, kappa: f64, power: f64) -> DMatrix<f64> {
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, &mu) in eig.eigenvalues.iter().enumerate() {
        scaled.column_mut(j).scale_mut((1.0 + kappa * mu.max(0.0)).powf(power));
    }
    scaled * q.transpose()
}

/// Pooled GCV score of smoothing the rows of `e` with `(I + κ D₂'D₂)^{-1}`.
pub fn gcv_score(e: &DMatrix<f64>, kappa: f64) -> f64 {
    let t = e.ncols();
    let eig = SymmetricEigen::new(second_difference_penalty(t));
    gcv_with(&eig, e, kappa)
}

fn gcv_with(eig: &SymmetricEigen<f64, nalgebra::Dyn>, e: &DMatrix<f64>, kappa: f64) -> f64 {
    let t = e.ncols() as f64;
    let s = penalty_power(eig, kappa, -1.0);
    let fitted = e * &s;
    let rss = (e - fitted).norm_squared() / (e.nrows() as f64 * t);
    let df: f64 = eig.eigenvalues.iter().map(|&mu| 1.0 / (1.0 + kappa * mu.max(0.0))).sum();
    rss / (1.0 - df / t).powi(2)
}

/// GCV-minimizing `κ` over a log grid from `1e-3` to `1e6`.
pub fn choose_kappa(e: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(second_difference_penalty(e.ncols()));
    (0..=90)
        .map(|i| 10f64.powf(-3.0 + i as f64 / 10.0))
        .map(|k| (k, gcv_with(&eig, e, k)))
        .filter(|(_, g)| g.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map_or(1.0, |(k, _)| k)
}

/// Top-`d` eigenvectors of a symmetric matrix, by descending eigenvalue.
fn top_eigenvectors(m: &DMatrix<f64>, d: usize) -> (DMatrix<f64>, Vec<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    (eig.eigenvectors.select_columns(&order[..d]), vals)
}

/// Rank-`d` penalized minimizer for a residual matrix, returned as `(F, Λ)` with
/// `F'F = T I` and `Λ'Λ` diagonal.
pub fn penalized_factors(e: &DMatrix<f64>, d: usize, kappa: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, t) = e.shape();
    if d == 0 {
        return (DMatrix::zeros(t, 0), DMatrix::zeros(n, 0));
    }
    let eig = SymmetricEigen::new(second_difference_penalty(t));
    let half = penalty_power(&eig, kappa, -0.5);
    let z = e * &half;
    let (g, _) = top_eigenvectors(&(z.transpose() * &z), d);
    let v = &z * &g * g.transpose() * &half;
    let (q, _) = top_eigenvectors(&(v.transpose() * &v), d);
    let tf = t as f64;
    let factors = &q * tf.sqrt();
    let loadings = &v * &q / tf.sqrt();
    (factors, loadings)
}

fn penalized_objective(e: &DMatrix<f64>, v: &DMatrix<f64>, pen: &DMatrix<f64>, kappa: f64) -> f64 {
    let rough: f64 = v.row_iter().map(|r| (r * pen * r.transpose())[(0, 0)]).sum();
    (e - v).norm_squared() + kappa * rough
}

/// Demeaned data of a balanced design as `N x T` matrices.
struct FactorData {
    y: DMatrix<f64>,
    x: Vec<DMatrix<f64>>,
    xm: DMatrix<f64>,
    sst: f64,
}

fn factor_data(spec: &ModelSpec, bal: &Balanced) -> Result<FactorData> {
    let design = &bal.design;
    let (n, t) = (bal.n_entities(), bal.n_years());
    let k = design.x.ncols();
    let ybar = design.y.mean();
    let sst = design.y.iter().map(|v| (v - ybar).powi(2)).sum();
    let mut y: Vec<f64> = design.y.iter().copied().collect();
    let mut xs: Vec<Vec<f64>> = (0..k).map(|j| design.x.column(j).iter().copied().collect()).collect();
    let ent: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, t)).collect();
    let yr: Vec<usize> = (0..n).flat_map(|_| 0..t).collect();
    let mut cols: Vec<&mut [f64]> = vec![&mut y];
    cols.extend(xs.iter_mut().map(|c| c.as_mut_slice()));
    demean_in_place(&ent, &yr, &spec.fe, &mut cols)?;
    let xm = DMatrix::from_fn(n * t, k, |r, j| xs[j][r]);
    let bad = within_collinear(&design.x, &xm);
    if !bad.is_empty() {
        return Err(Error::Collinear(bad.into_iter().map(|j| design.names[j].clone()).collect()));
    }
    Ok(FactorData {
        y: DMatrix::from_row_slice(n, t, &y),
        x: xs.iter().map(|c| DMatrix::from_row_slice(n, t, c)).collect(),
        xm,
        sst,
    })
}

fn regress(data: &FactorData, xtx_inv: &DMatrix<f64>, v: &DMatrix<f64>) -> DVector<f64> {
    let target = &data.y - v;
    let xty = DVector::from_iterator(data.x.len(), data.x.iter().map(|x| x.dot(&target)));
    xtx_inv * xty
}

fn residual_matrix(data: &FactorData, beta: &DVector<f64>) -> DMatrix<f64> {
    let mut e = data.y.clone();
    for (x, b) in data.x.iter().zip(beta.iter()) {
        e -= x * *b;
    }
    e
}

/// GCV penalty for `d` factors. With `d > 0` the criterion is evaluated on the
/// cross-sectional projections `(Λ'Λ)^{-1} Λ' E` of the residuals onto their leading
/// `d` unpenalized loadings, which are noisy versions of the factors themselves.
fn factor_kappa(e: &DMatrix<f64>, d: usize) -> f64 {
    if d == 0 {
        return choose_kappa(e);
    }
    let (_, loadings) = penalized_factors(e, d, 0.0);
    match spd_inverse(&(loadings.transpose() * &loadings)) {
        Ok(inv) => choose_kappa(&(inv * loadings.transpose() * e)),
        Err(_) => choose_kappa(e),
    }
}

/// `(I - P)` for the column space of `a`; identity when `a` has no columns.
fn annihilator(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = a.nrows();
    if a.ncols() == 0 {
        return Ok(DMatrix::identity(m, m));
    }
    let inv = spd_inverse(&(a.transpose() * a))?;
    Ok(DMatrix::identity(m, m) - a * inv * a.transpose())
}

/// Gram matrix of the regressors after projecting out loadings and factors,
/// `G_jl = ⟨M_Λ X_j M_F, M_Λ X_l M_F⟩`. Reduces to `X'X` with no factors.
fn projected_gram(x: &[DMatrix<f64>], factors: &DMatrix<f64>, loadings: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (ml, mf) = (annihilator(loadings)?, annihilator(factors)?);
    let z: Vec<DMatrix<f64>> = x.iter().map(|xj| &ml * xj * &mf).collect();
    Ok(DMatrix::from_fn(x.len(), x.len(), |j, l| z[j].dot(&z[l])))
}

pub fn fit_htt(spec: &ModelSpec, panel: &PanelDataset, d: usize, smoothing: Smoothing) -> Result<FactorFit> {
    let bal = Balanced::build(spec, panel)?;
    fit_balanced(spec, &bal, d, smoothing)
}

pub fn fit_balanced(spec: &ModelSpec, bal: &Balanced, d: usize, smoothing: Smoothing) -> Result<FactorFit> {
    let (n, t) = (bal.n_entities(), bal.n_years());
    if d + 1 > n.min(t) {
        return Err(Error::InvalidArgument(format!(
            "{d} factors requested; at most {} for a {n} x {t} panel",
            n.min(t) - 1
        )));
    }
    let data = factor_data(spec, bal)?;
    let k = data.xm.ncols();
    let xtx_inv = spd_inverse(&(data.xm.transpose() * &data.xm))?;
    let pen = second_difference_penalty(t);

    let mut v = DMatrix::zeros(n, t);
    let mut beta = regress(&data, &xtx_inv, &v);
    let kappa = match smoothing {
        Smoothing::Gcv => factor_kappa(&residual_matrix(&data, &beta), d),
        Smoothing::Fixed(k) if k >= 0.0 => k,
        Smoothing::Fixed(k) => return Err(Error::InvalidArgument(format!("negative penalty weight {k}"))),
    };
    let mut factors = DMatrix::zeros(t, d);
    let mut loadings = DMatrix::zeros(n, d);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut previous = beta.clone();
    while iterations < FACTOR_MAX_ITER {
        iterations += 1;
        let e = residual_matrix(&data, &beta);
        (factors, loadings) = penalized_factors(&e, d, kappa);
        v = &loadings * factors.transpose();
        previous = beta.clone();
        beta = regress(&data, &xtx_inv, &v);
        trace.push(penalized_objective(&residual_matrix(&data, &beta), &v, &pen, kappa));
        if (&beta - &previous).amax() < FACTOR_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::FactorNotConverged {
            previous: previous.iter().copied().collect(),
            last: beta.iter().copied().collect(),
        });
    }
    let residuals = residual_matrix(&data, &beta) - &v;
    let ssr = residuals.norm_squared();
    let nobs = n * t;
    let fe_dof = n + t - 1;
    let dof = nobs as isize - (k + fe_dof + d * (n + t - d)) as isize;
    if dof <= 0 {
        return Err(Error::InsufficientObservations { needed: nobs - dof as usize + 1, have: nobs });
    }
    let sigma2 = ssr / dof as f64;
    let gram = projected_gram(&data.x, &factors, &loadings)?;
    let vcov = spd_inverse(&gram)? * sigma2;
    Ok(FactorFit {
        model: spec.name.clone(),
        dependent: spec.dependent.clone(),
        names: bal.design.names.clone(),
        beta,
        vcov,
        factors,
        loadings,
        d,
        kappa,
        sigma2,
        ssr,
        r2: if data.sst > 0.0 { 1.0 - ssr / data.sst } else { 0.0 },
        log_likelihood: gaussian_loglik(ssr, nobs),
        nobs,
        iterations,
        converged,
        objective_trace: trace,
        residuals,
        entity_ids: bal.entity_ids(),
        years: bal.year_labels(),
        dropped_entities: bal.dropped_entities.clone(),
    })
}

/// `β` given fixed factors and loadings.
pub fn beta_given_factors(
    spec: &ModelSpec,
    bal: &Balanced,
    factors: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let data = factor_data(spec, bal)?;
    let xtx_inv = spd_inverse(&(data.xm.transpose() * &data.xm))?;
    Ok(regress(&data, &xtx_inv, &(loadings * factors.transpose())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorCriterion {
    pub d: usize,
    pub log_likelihood: f64,
    pub n_params: usize,
    pub aic: f64,
    pub bic: f64,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorSelection {
    /// Eigenvalues of the smoothed residual covariance, descending.
    pub scree: Vec<f64>,
    pub shares: Vec<f64>,
    pub cumulative: Vec<f64>,
    /// Each candidate `d` is fitted with its own GCV penalty.
    pub criteria: Vec<FactorCriterion>,
    /// Penalty used to smooth the residuals for the scree.
    pub kappa: f64,
    pub chosen_aic: usize,
    pub chosen_bic: usize,
}

impl FactorSelection {
    /// Factor count used downstream (BIC).
    pub fn chosen(&self) -> usize {
        self.chosen_bic
    }
}

pub fn select_factors(spec: &ModelSpec, panel: &PanelDataset, d_max: usize) -> Result<FactorSelection> {
    if d_max > MAX_SELECT_FACTORS {
        return Err(Error::InvalidArgument(format!("d_max {d_max} exceeds {MAX_SELECT_FACTORS}")));
    }
    let bal = Balanced::build(spec, panel)?;
    let (n, t) = (bal.n_entities(), bal.n_years());
    let base = fit_balanced(spec, &bal, 0, Smoothing::Gcv)?;
    let kappa = base.kappa;
    let eig = SymmetricEigen::new(second_difference_penalty(t));
    let smoothed = &base.residuals * penalty_power(&eig, kappa, -1.0);
    let (_, mut scree) = top_eigenvectors(&(smoothed.transpose() * &smoothed / (n * t) as f64), 0);
    for v in &mut scree {
        *v = v.max(0.0);
    }
    let total: f64 = scree.iter().sum();
    let shares: Vec<f64> = scree.iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect();
    let cumulative = shares
        .iter()
        .scan(0.0, |acc, s| {
            *acc += s;
            Some(f64::min(*acc, 1.0))
        })
        .collect();

    let k = base.beta.len();
    let nobs = (n * t) as f64;
    let mut criteria = Vec::new();
    for d in 0..=d_max {
        let fit = if d == 0 { base.clone() } else { fit_balanced(spec, &bal, d, Smoothing::Gcv)? };
        let n_params = k + (n + t - 1) + d * (n + t) + 1;
        let ll = fit.log_likelihood;
        criteria.push(FactorCriterion {
            d,
            log_likelihood: ll,
            n_params,
            aic: -2.0 * ll + 2.0 * n_params as f64,
            bic: -2.0 * ll + nobs.ln() * n_params as f64,
            beta: fit.beta.iter().copied().collect(),
        });
    }
    let argmin = |f: &dyn Fn(&FactorCriterion) -> f64| {
        criteria.iter().min_by(|a, b| f(a).total_cmp(&f(b))).map_or(0, |c| c.d)
    };
    let chosen_aic = argmin(&|c| c.aic);
    let chosen_bic = argmin(&|c| c.bic);
    Ok(FactorSelection { scree, shares, cumulative, criteria, kappa, chosen_aic, chosen_bic })
}
