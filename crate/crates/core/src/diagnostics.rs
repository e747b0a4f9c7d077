//! Cross-sectional dependence tests and information-criterion model comparison.
//!
//! Inputs are `N x T` matrices with NaN marking missing cells. Correlations use pairwise
//! deletion, so each pair contributes over its own overlap `T_ij`. Entities with no
//! variation are excluded with a warning; pairs with fewer than three overlapping
//! periods or no variation on the overlap are skipped.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::factors::FactorFit;
use crate::inference::{chi2_upper_p, two_sided_p, Reference};
use crate::panel::PanelDataset;
use crate::rng;
use crate::spatial::SpatialFit;
use crate::twfe::FitResult;
use crate::{Error, Result};

pub const MIN_OVERLAP: usize = 3;
pub const DEFAULT_PERMUTATIONS: usize = 999;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsdMethod {
    PesaranCd,
    BreuschPaganLm,
    ScaledLm,
    PermutationCd,
}

impl CsdMethod {
    pub fn label(self) -> &'static str {
        match self {
            CsdMethod::PesaranCd => "Pesaran CD test",
            CsdMethod::BreuschPaganLm => "Breusch-Pagan LM test",
            CsdMethod::ScaledLm => "Scaled LM test",
            CsdMethod::PermutationCd => "Permutation CD test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsdTestResult {
    pub method: CsdMethod,
    pub statistic: f64,
    pub p_value: f64,
    /// Chi-squared degrees of freedom for the LM test.
    pub dof: Option<f64>,
    pub alternative: &'static str,
    pub mean_rho: f64,
    pub mean_abs_rho: f64,
    pub n_entities: usize,
    pub n_pairs: usize,
    /// Row indices excluded for zero variance.
    pub excluded: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Pairwise correlations `(T_ij, ρ_ij)` in `(i, j)` lexicographic order.
#[derive(Debug, Clone)]
pub struct PairwiseCorrelations {
    pub pairs: Vec<(usize, f64)>,
    pub n_entities: usize,
    pub excluded: Vec<usize>,
    pub skipped_pairs: usize,
}

impl PairwiseCorrelations {
    pub fn compute(e: &DMatrix<f64>) -> Result<Self> {
        let (n, t) = e.shape();
        if t < MIN_OVERLAP {
            return Err(Error::NotComputable(format!("{t} periods; at least {MIN_OVERLAP} required")));
        }
        let rows: Vec<Vec<f64>> = (0..n).map(|i| e.row(i).iter().copied().collect()).collect();
        let excluded: Vec<usize> = (0..n)
            .filter(|&i| {
                let vals: Vec<f64> = rows[i].iter().copied().filter(|v| v.is_finite()).collect();
                vals.len() < 2 || vals.iter().all(|&v| v == vals[0])
            })
            .collect();
        let kept: Vec<usize> = (0..n).filter(|i| !excluded.contains(i)).collect();
        if kept.len() < 2 {
            return Err(Error::NotComputable(format!(
                "{} of {n} entities have zero variance",
                excluded.len()
            )));
        }
        let per_row: Vec<Vec<Option<(usize, f64)>>> = (0..kept.len())
            .into_par_iter()
            .map(|a| ((a + 1)..kept.len()).map(|b| pair_corr(&rows[kept[a]], &rows[kept[b]])).collect())
            .collect();
        let mut pairs = Vec::new();
        let mut skipped = 0;
        for row in per_row {
            for p in row {
                match p {
                    Some(v) => pairs.push(v),
                    None => skipped += 1,
                }
            }
        }
        if pairs.is_empty() {
            return Err(Error::NotComputable("no entity pair has a usable overlap".into()));
        }
        Ok(Self { pairs, n_entities: kept.len(), excluded, skipped_pairs: skipped })
    }

    fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if !self.excluded.is_empty() {
            w.push(format!("{} entities with zero variance excluded", self.excluded.len()));
        }
        if self.skipped_pairs > 0 {
            w.push(format!(
                "{} pairs skipped (overlap below {MIN_OVERLAP} periods or constant on overlap)",
                self.skipped_pairs
            ));
        }
        w
    }

    pub fn mean_rho(&self) -> f64 {
        self.pairs.iter().map(|p| p.1).sum::<f64>() / self.pairs.len() as f64
    }

    pub fn mean_abs_rho(&self) -> f64 {
        self.pairs.iter().map(|p| p.1.abs()).sum::<f64>() / self.pairs.len() as f64
    }

    fn cd(&self) -> f64 {
        let s: f64 = self.pairs.iter().map(|&(t, r)| (t as f64).sqrt() * r).sum();
        s / (self.pairs.len() as f64).sqrt()
    }

    fn result(&self, method: CsdMethod, statistic: f64, p_value: f64, dof: Option<f64>, alternative: &'static str) -> CsdTestResult {
        CsdTestResult {
            method,
            statistic,
            p_value,
            dof,
            alternative,
            mean_rho: self.mean_rho(),
            mean_abs_rho: self.mean_abs_rho(),
            n_entities: self.n_entities,
            n_pairs: self.pairs.len(),
            excluded: self.excluded.clone(),
            warnings: self.warnings(),
        }
    }
}

fn pair_corr(a: &[f64], b: &[f64]) -> Option<(usize, f64)> {
    let idx: Vec<usize> = (0..a.len()).filter(|&t| a[t].is_finite() && b[t].is_finite()).collect();
    let m = idx.len();
    if m < MIN_OVERLAP {
        return None;
    }
    let ma = idx.iter().map(|&t| a[t]).sum::<f64>() / m as f64;
    let mb = idx.iter().map(|&t| b[t]).sum::<f64>() / m as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for &t in &idx {
        let (da, db) = (a[t] - ma, b[t] - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((m, (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)))
}

const ALT: &str = "cross-sectional dependence";

/// `CD = sqrt(1/P) Σ sqrt(T_ij) ρ_ij` over the `P` usable pairs; standard normal.
pub fn pesaran_cd(e: &DMatrix<f64>) -> Result<CsdTestResult> {
    let pc = PairwiseCorrelations::compute(e)?;
    let cd = pc.cd();
    Ok(pc.result(CsdMethod::PesaranCd, cd, two_sided_p(cd, Reference::Normal), None, ALT))
}

/// `LM = Σ T_ij ρ_ij²`, chi-squared with `P` degrees of freedom. Intended for `N` small
/// relative to `T`.
pub fn bp_lm(e: &DMatrix<f64>) -> Result<CsdTestResult> {
    let pc = PairwiseCorrelations::compute(e)?;
    let lm: f64 = pc.pairs.iter().map(|&(t, r)| t as f64 * r * r).sum();
    let dof = pc.pairs.len() as f64;
    Ok(pc.result(CsdMethod::BreuschPaganLm, lm, chi2_upper_p(lm, dof), Some(dof), ALT))
}

/// `sqrt(1/(2P)) Σ (T_ij ρ_ij² − 1)`; standard normal.
pub fn scaled_lm(e: &DMatrix<f64>) -> Result<CsdTestResult> {
    let pc = PairwiseCorrelations::compute(e)?;
    let s: f64 = pc.pairs.iter().map(|&(t, r)| t as f64 * r * r - 1.0).sum();
    let stat = s / (2.0 * pc.pairs.len() as f64).sqrt();
    Ok(pc.result(CsdMethod::ScaledLm, stat, two_sided_p(stat, Reference::Normal), None, ALT))
}

/// Experimental permutation variant of CD: each entity's series is shuffled in time
/// independently, and the p-value is `(1 + #{|CD*| ≥ |CD|}) / (B + 1)`.
pub fn permutation_cd(e: &DMatrix<f64>, draws: usize, seed: u64) -> Result<CsdTestResult> {
    if draws == 0 {
        return Err(Error::InvalidArgument("permutation test needs at least one draw".into()));
    }
    let pc = PairwiseCorrelations::compute(e)?;
    let observed = pc.cd();
    let exceed: usize = (0..draws)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::substream(seed, b as u64);
            let mut m = e.clone();
            for i in 0..m.nrows() {
                let mut row: Vec<f64> = m.row(i).iter().copied().collect();
                row.shuffle(&mut r);
                for (t, v) in row.into_iter().enumerate() {
                    m[(i, t)] = v;
                }
            }
            match PairwiseCorrelations::compute(&m) {
                Ok(p) if p.cd().abs() >= observed.abs() => 1,
                _ => 0,
            }
        })
        .sum();
    let p = (1 + exceed) as f64 / (draws + 1) as f64;
    let mut out = pc.result(CsdMethod::PermutationCd, observed, p, None, ALT);
    out.warnings.push(format!("experimental: {draws} within-entity time permutations, seed {seed}"));
    Ok(out)
}

/// The four tests reported together for one input.
pub fn csd_battery(e: &DMatrix<f64>) -> Result<Vec<CsdTestResult>> {
    Ok(vec![pesaran_cd(e)?, bp_lm(e)?, scaled_lm(e)?])
}

/// `N x T` matrix of a panel column, NaN where masked.
pub fn variable_matrix(panel: &PanelDataset, var: &str) -> Result<DMatrix<f64>> {
    let col = panel.column(var)?;
    let t = panel.n_years();
    Ok(DMatrix::from_fn(panel.n_entities(), t, |i, s| col.get(i * t + s).unwrap_or(f64::NAN)))
}

/// Fits that expose residuals on the entity-by-year grid and likelihood summaries.
pub trait ModelFit {
    fn model_name(&self) -> &str;
    fn dependent(&self) -> &str;
    fn residual_grid(&self) -> DMatrix<f64>;
    fn summary(&self) -> ModelSummary;
}

impl ModelFit for FitResult {
    fn model_name(&self) -> &str {
        &self.model
    }
    fn dependent(&self) -> &str {
        &self.dependent
    }
    fn residual_grid(&self) -> DMatrix<f64> {
        self.residual_matrix()
    }
    fn summary(&self) -> ModelSummary {
        ModelSummary {
            name: self.model.clone(),
            dependent: self.dependent.clone(),
            nobs: self.nobs,
            log_likelihood: self.log_likelihood,
            aic: self.aic,
            bic: self.bic,
            n_params: self.n_params,
        }
    }
}

impl ModelFit for SpatialFit {
    fn model_name(&self) -> &str {
        &self.model
    }
    fn dependent(&self) -> &str {
        &self.dependent
    }
    fn residual_grid(&self) -> DMatrix<f64> {
        self.residual_matrix()
    }
    fn summary(&self) -> ModelSummary {
        ModelSummary {
            name: format!("{} ({})", self.model, self.kind.label()),
            dependent: self.dependent.clone(),
            nobs: self.nobs,
            log_likelihood: self.log_likelihood,
            aic: self.aic,
            bic: self.bic,
            n_params: self.n_params,
        }
    }
}

impl ModelFit for FactorFit {
    fn model_name(&self) -> &str {
        &self.model
    }
    fn dependent(&self) -> &str {
        &self.dependent
    }
    fn residual_grid(&self) -> DMatrix<f64> {
        self.residuals.clone()
    }
    fn summary(&self) -> ModelSummary {
        let (n, t) = self.residuals.shape();
        let n_params = self.beta.len() + (n + t - 1) + self.d * (n + t) + 1;
        let ll = self.log_likelihood;
        ModelSummary {
            name: format!("{} (HTT {})", self.model, self.d),
            dependent: self.dependent.clone(),
            nobs: self.nobs,
            log_likelihood: ll,
            aic: -2.0 * ll + 2.0 * n_params as f64,
            bic: -2.0 * ll + (self.nobs as f64).ln() * n_params as f64,
            n_params,
        }
    }
}

/// Pesaran CD on a fit's residual grid.
pub fn residual_csd(fit: &dyn ModelFit) -> Result<CsdTestResult> {
    pesaran_cd(&fit.residual_grid())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSummary {
    pub name: String,
    pub dependent: String,
    pub nobs: usize,
    pub log_likelihood: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub rank: usize,
    pub summary: ModelSummary,
}

/// Rank fits by ascending AIC; ties keep input order.
pub fn compare_models(fits: &[ModelSummary]) -> Result<Vec<ComparisonRow>> {
    if let Some(first) = fits.first() {
        for f in &fits[1..] {
            if f.dependent != first.dependent || f.nobs != first.nobs {
                return Err(Error::MismatchedSamples(format!(
                    "{} ({}, n = {}) vs {} ({}, n = {})",
                    first.name, first.dependent, first.nobs, f.name, f.dependent, f.nobs
                )));
            }
        }
    }
    let mut sorted: Vec<ModelSummary> = fits.to_vec();
    sorted.sort_by(|a, b| a.aic.total_cmp(&b.aic));
    Ok(sorted.into_iter().enumerate().map(|(i, summary)| ComparisonRow { rank: i + 1, summary }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn noise(n: usize, t: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng::seeded(seed);
        DMatrix::from_fn(n, t, |_, _| r.sample(StandardNormal))
    }

    /// Pearson correlation through an explicit covariance formula.
    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
        let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let saa: f64 = a.iter().map(|x| x * x).sum();
        let sbb: f64 = b.iter().map(|x| x * x).sum();
        (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
    }

    #[test]
    fn identical_rows_give_maximal_cd() {
        let row = [1.0, 3.0, 2.0, 5.0, 4.0];
        let n = 6;
        let e = DMatrix::from_fn(n, 5, |_, t| row[t]);
        let r = pesaran_cd(&e).unwrap();
        let expected = (2.0 / (n * (n - 1)) as f64).sqrt() * 5f64.sqrt() * (n * (n - 1) / 2) as f64;
        assert_relative_eq!(r.statistic, expected, max_relative = 1e-12);
        assert_relative_eq!(r.mean_rho, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pairwise_deletion_matches_overlap_correlation() {
        let mut e = noise(3, 8, 1);
        e[(0, 2)] = f64::NAN;
        e[(1, 5)] = f64::NAN;
        let pc = PairwiseCorrelations::compute(&e).unwrap();
        let keep: Vec<usize> = (0..8).filter(|&t| t != 2 && t != 5).collect();
        let a: Vec<f64> = keep.iter().map(|&t| e[(0, t)]).collect();
        let b: Vec<f64> = keep.iter().map(|&t| e[(1, t)]).collect();
        assert_eq!(pc.pairs[0].0, 6);
        assert_relative_eq!(pc.pairs[0].1, pearson(&a, &b), max_relative = 1e-12);
        assert_eq!(pc.pairs[1].0, 7);
    }

    #[test]
    fn sign_scale_and_order_invariance() {
        let e = noise(10, 12, 2) + DMatrix::from_fn(10, 12, |_, t| (t as f64).sin());
        let base = csd_battery(&e).unwrap();
        let neg = csd_battery(&(-&e)).unwrap();
        let scaled = csd_battery(&DMatrix::from_fn(10, 12, |i, t| e[(i, t)] * (1.0 + i as f64) + 3.0)).unwrap();
        let perm: Vec<usize> = (0..10).rev().collect();
        let permuted = csd_battery(&e.select_rows(&perm)).unwrap();
        for k in 0..3 {
            for other in [&neg, &scaled, &permuted] {
                assert_relative_eq!(base[k].statistic, other[k].statistic, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn lm_statistics_match_definitions() {
        let e = noise(5, 20, 3);
        let pc = PairwiseCorrelations::compute(&e).unwrap();
        let mut lm = 0.0;
        for i in 0..5 {
            for j in (i + 1)..5 {
                let a: Vec<f64> = e.row(i).iter().copied().collect();
                let b: Vec<f64> = e.row(j).iter().copied().collect();
                lm += 20.0 * pearson(&a, &b).powi(2);
            }
        }
        let r = bp_lm(&e).unwrap();
        assert_relative_eq!(r.statistic, lm, max_relative = 1e-10);
        assert_eq!(r.dof, Some(10.0));
        let s = scaled_lm(&e).unwrap();
        assert_relative_eq!(s.statistic, (lm - 10.0) / 20f64.sqrt(), max_relative = 1e-10);
        assert_eq!(pc.pairs.len(), 10);
    }

    #[test]
    fn zero_matrix_not_computable_and_constant_rows_excluded() {
        assert!(matches!(pesaran_cd(&DMatrix::zeros(2, 5)), Err(Error::NotComputable(_))));
        let mut e = noise(4, 6, 4);
        for t in 0..6 {
            e[(2, t)] = 1.5;
        }
        let r = pesaran_cd(&e).unwrap();
        assert_eq!(r.excluded, vec![2]);
        assert_eq!(r.n_pairs, 3);
        assert!(!r.warnings.is_empty());
        assert!(matches!(pesaran_cd(&DMatrix::zeros(3, 2)), Err(Error::NotComputable(_))));
    }

    #[test]
    fn common_factor_is_detected() {
        let mut r = rng::seeded(5);
        let f: Vec<f64> = (0..30).map(|_| r.sample(StandardNormal)).collect();
        let e = DMatrix::from_fn(40, 30, |_, t| f[t]) + noise(40, 30, 6);
        for test in csd_battery(&e).unwrap() {
            assert!(test.p_value < 0.001, "{test:?}");
        }
        let perm = permutation_cd(&e, 99, 1).unwrap();
        assert!(perm.p_value <= 0.01 + 1e-12);
        assert_eq!(perm, permutation_cd(&e, 99, 1).unwrap());
    }

    #[test]
    fn comparison_ranks_by_aic_stably() {
        let s = |name: &str, aic: f64| ModelSummary {
            name: name.into(),
            dependent: "y".into(),
            nobs: 10,
            log_likelihood: -aic / 2.0,
            aic,
            bic: aic,
            n_params: 1,
        };
        let out = compare_models(&[s("a", 5.0), s("b", 3.0), s("c", 5.0)]).unwrap();
        let names: Vec<&str> = out.iter().map(|r| r.summary.name.as_str()).collect();
        assert_eq!(names, vec!["b", "a", "c"]);
        let mut other = s("d", 1.0);
        other.nobs = 11;
        assert!(matches!(compare_models(&[s("a", 1.0), other]), Err(Error::MismatchedSamples(_))));
    }
}
