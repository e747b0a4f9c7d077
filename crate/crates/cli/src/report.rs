//! Model results in a uniform shape, and their CSV, JSON and plain-text renderings.

use panelkit::diagnostics::{CsdTestResult, ModelFit, ModelSummary};
use panelkit::factors::FactorFit;
use panelkit::inference::normal_quantile;
use panelkit::spatial::{ImpactsResult, SpatialFit};
use panelkit::twfe::{CoefRow, FitResult};
use serde::Serialize;

use crate::config::{Estimator, ModelEntry};
use crate::io::{csv_line, fmt_num};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coef {
    pub term: String,
    pub estimate: f64,
    pub se: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub code: String,
}

impl From<CoefRow> for Coef {
    fn from(r: CoefRow) -> Self {
        Self {
            term: r.name,
            estimate: r.estimate,
            se: r.se,
            statistic: r.statistic,
            p_value: r.p_value,
            code: r.code.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Impact {
    pub term: String,
    pub effect: &'static str,
    pub estimate: f64,
    pub se: f64,
    pub p_value: f64,
    pub code: String,
}

fn impact_rows(imp: &ImpactsResult) -> Vec<Impact> {
    let mut out = Vec::new();
    for r in &imp.rows {
        for (effect, e) in [("direct", r.direct), ("indirect", r.indirect), ("total", r.total)] {
            out.push(Impact {
                term: r.name.clone(),
                effect,
                estimate: e.estimate,
                se: e.se,
                p_value: e.p_value,
                code: e.code.into(),
            });
        }
    }
    out
}

/// One estimated model, independent of the estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelReport {
    pub model: String,
    pub estimator: Estimator,
    pub dependent: String,
    pub subset: String,
    pub coefficients: Vec<Coef>,
    pub nobs: usize,
    pub n_entities: usize,
    pub n_years: usize,
    pub r2: Option<f64>,
    pub within_r2: Option<f64>,
    pub log_likelihood: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_params: usize,
    /// Estimator-specific scalars (smoothing penalty, sweeps, ...).
    pub extra: Vec<(String, f64)>,
    pub impacts: Vec<Impact>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub horizons: Vec<i32>,
    /// `(fips, year, residual)` for every estimation cell.
    #[serde(skip)]
    pub residuals: Vec<(String, i32, f64)>,
}

fn grid_cells(fit: &dyn ModelFit, ids: &[String], years: &[i32]) -> Vec<(String, i32, f64)> {
    let g = fit.residual_grid();
    let mut out = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        for (t, &y) in years.iter().enumerate() {
            let v = g[(i, t)];
            if v.is_finite() {
                out.push((id.clone(), y, v));
            }
        }
    }
    out
}

impl ModelReport {
    fn base(entry: &ModelEntry, subset: &str, coefs: Vec<CoefRow>, summary: ModelSummary) -> Self {
        let coefficients: Vec<Coef> = coefs.into_iter().map(Coef::from).collect();
        let horizons = coefficients.iter().map(|c| entry.horizon(&c.term)).collect();
        Self {
            model: entry.name.clone(),
            estimator: entry.estimator,
            dependent: entry.dependent.clone(),
            subset: subset.into(),
            coefficients,
            nobs: summary.nobs,
            n_entities: 0,
            n_years: 0,
            r2: None,
            within_r2: None,
            log_likelihood: summary.log_likelihood,
            aic: summary.aic,
            bic: summary.bic,
            n_params: summary.n_params,
            extra: Vec::new(),
            impacts: Vec::new(),
            warnings: Vec::new(),
            horizons,
            residuals: Vec::new(),
        }
    }

    pub fn from_twfe(entry: &ModelEntry, subset: &str, fit: &FitResult) -> Self {
        let mut r = Self::base(entry, subset, fit.coef_table(), fit.summary());
        r.n_entities = fit.n_entities;
        r.n_years = fit.n_years;
        r.r2 = Some(fit.r2);
        r.within_r2 = Some(fit.within_r2);
        r.extra.push(("demeaning_sweeps".into(), fit.sweeps as f64));
        for (d, g) in fit.cluster_dims.iter().zip(&fit.cluster_counts) {
            r.extra.push((format!("clusters_{}", d.label()), *g as f64));
        }
        r.warnings = fit.warnings.clone();
        r.residuals = grid_cells(fit, &fit.entity_ids, &fit.years);
        r
    }

    pub fn from_spatial(entry: &ModelEntry, subset: &str, fit: &SpatialFit, impacts: Option<&ImpactsResult>) -> Self {
        let mut r = Self::base(entry, subset, fit.coef_table(), fit.summary());
        r.n_entities = fit.n_entities();
        r.n_years = fit.n_years();
        r.extra.push(("sigma2".into(), fit.sigma2));
        r.warnings = fit.warnings.clone();
        if let Some(imp) = impacts {
            r.impacts = impact_rows(imp);
            r.extra.push(("impact_draws".into(), imp.n_sim as f64));
        }
        r.residuals = grid_cells(fit, &fit.entity_ids, &fit.years);
        r
    }

    pub fn from_factor(entry: &ModelEntry, subset: &str, fit: &FactorFit) -> Self {
        let mut r = Self::base(entry, subset, fit.coef_table(), fit.summary());
        r.n_entities = fit.entity_ids.len();
        r.n_years = fit.years.len();
        r.r2 = Some(fit.r2);
        r.extra.push(("factors".into(), fit.d as f64));
        r.extra.push(("kappa".into(), fit.kappa));
        r.extra.push(("iterations".into(), fit.iterations as f64));
        if !fit.converged {
            r.warnings.push(format!("factor iterations stopped after {} without converging", fit.iterations));
        }
        r.residuals = grid_cells(fit, &fit.entity_ids, &fit.years);
        r
    }

    pub fn coef(&self, term: &str) -> Option<&Coef> {
        self.coefficients.iter().find(|c| c.term == term)
    }

    pub fn impact(&self, term: &str, effect: &str) -> Option<&Impact> {
        self.impacts.iter().find(|i| i.term == term && i.effect == effect)
    }

    pub fn summary(&self) -> ModelSummary {
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

pub fn coefficients_csv(reports: &[ModelReport], manifest: &str) -> String {
    let mut s = csv_line(&["model", "term", "estimate", "se", "statistic", "p_value", "code", "manifest"]);
    for r in reports {
        for c in &r.coefficients {
            s += &csv_line(&[
                r.model.clone(),
                c.term.clone(),
                fmt_num(c.estimate),
                fmt_num(c.se),
                fmt_num(c.statistic),
                fmt_num(c.p_value),
                c.code.clone(),
                manifest.into(),
            ]);
        }
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

pub fn fit_stats_csv(reports: &[ModelReport], manifest: &str) -> String {
    let mut s = csv_line(&[
        "model", "estimator", "dependent", "subset", "nobs", "n_entities", "n_years", "r2", "within_r2",
        "log_likelihood", "aic", "bic", "n_params", "manifest",
    ]);
    for r in reports {
        s += &csv_line(&[
            r.model.clone(),
            r.estimator.label().into(),
            r.dependent.clone(),
            r.subset.clone(),
            r.nobs.to_string(),
            r.n_entities.to_string(),
            r.n_years.to_string(),
            opt(r.r2),
            opt(r.within_r2),
            fmt_num(r.log_likelihood),
            fmt_num(r.aic),
            fmt_num(r.bic),
            r.n_params.to_string(),
            manifest.into(),
        ]);
    }
    s
}

pub fn impacts_csv(reports: &[ModelReport], manifest: &str) -> String {
    let mut s = csv_line(&["model", "term", "effect", "estimate", "se", "p_value", "code", "manifest"]);
    for r in reports {
        for i in &r.impacts {
            s += &csv_line(&[
                r.model.clone(),
                i.term.clone(),
                i.effect.into(),
                fmt_num(i.estimate),
                fmt_num(i.se),
                fmt_num(i.p_value),
                i.code.clone(),
                manifest.into(),
            ]);
        }
    }
    s
}

/// Coefficient-plot data with 95% normal intervals. `flip` negates every estimate
/// (response to a decrease) and swaps the interval ends.
pub fn coefplot_csv(reports: &[ModelReport], flip: bool, manifest: &str) -> String {
    let z = normal_quantile(0.975);
    let sign = if flip { -1.0 } else { 1.0 };
    let mut s = csv_line(&["model", "term", "horizon", "estimate", "ci_lo", "ci_hi", "manifest"]);
    for r in reports {
        for (c, h) in r.coefficients.iter().zip(&r.horizons) {
            let est = sign * c.estimate;
            let half = z * c.se;
            s += &csv_line(&[
                r.model.clone(),
                c.term.clone(),
                h.to_string(),
                fmt_num(est),
                fmt_num(est - half),
                fmt_num(est + half),
                manifest.into(),
            ]);
        }
    }
    s
}

pub fn csd_csv(rows: &[(String, CsdTestResult)], manifest: &str) -> String {
    let mut s = csv_line(&[
        "input", "test", "statistic", "p_value", "dof", "mean_rho", "mean_abs_rho", "n_entities", "n_pairs",
        "excluded", "manifest",
    ]);
    for (input, r) in rows {
        s += &csv_line(&[
            input.clone(),
            r.method.label().into(),
            fmt_num(r.statistic),
            fmt_num(r.p_value),
            opt(r.dof),
            fmt_num(r.mean_rho),
            fmt_num(r.mean_abs_rho),
            r.n_entities.to_string(),
            r.n_pairs.to_string(),
            r.excluded.len().to_string(),
            manifest.into(),
        ]);
    }
    s
}

fn pad_table(rows: &[Vec<String>]) -> String {
    let ncol = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..ncol).map(|j| rows.iter().filter_map(|r| r.get(j)).map(|c| c.chars().count()).max().unwrap_or(0)).collect();
    let mut s = String::new();
    for r in rows {
        let mut line = String::new();
        for (j, w) in widths.iter().enumerate() {
            let cell = r.get(j).map(String::as_str).unwrap_or("");
            let fill = w - cell.chars().count();
            if j == 0 {
                line.push_str(cell);
                line.push_str(&" ".repeat(fill));
            } else {
                line.push_str("  ");
                line.push_str(&" ".repeat(fill));
                line.push_str(cell);
            }
        }
        s.push_str(line.trim_end());
        s.push('\n');
    }
    s
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Side-by-side regression table: estimate with code, standard error below.
pub fn regression_table(reports: &[ModelReport], manifest: &str) -> String {
    let mut terms: Vec<&str> = Vec::new();
    for r in reports {
        for c in &r.coefficients {
            if !terms.contains(&c.term.as_str()) {
                terms.push(&c.term);
            }
        }
    }
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut head = vec!["".to_string()];
    head.extend(reports.iter().map(|r| r.model.clone()));
    rows.push(head);
    let mut dep = vec!["Dependent".to_string()];
    dep.extend(reports.iter().map(|r| r.dependent.clone()));
    rows.push(dep);
    let mut est = vec!["Estimator".to_string()];
    est.extend(reports.iter().map(|r| r.estimator.label().to_string()));
    rows.push(est);
    let mut sub = vec!["Sample".to_string()];
    sub.extend(reports.iter().map(|r| r.subset.clone()));
    rows.push(sub);
    rows.push(vec![]);
    for t in &terms {
        let mut a = vec![t.to_string()];
        let mut b = vec![String::new()];
        for r in reports {
            match r.coef(t) {
                Some(c) => {
                    a.push(format!("{:.4}{}", c.estimate, c.code));
                    b.push(format!("({:.4})", c.se));
                }
                None => {
                    a.push(String::new());
                    b.push(String::new());
                }
            }
        }
        rows.push(a);
        rows.push(b);
    }
    rows.push(vec![]);
    let stat = |label: &str, f: &dyn Fn(&ModelReport) -> String| {
        let mut row = vec![label.to_string()];
        row.extend(reports.iter().map(f));
        row
    };
    rows.push(stat("Observations", &|r| thousands(r.nobs)));
    rows.push(stat("R2", &|r| r.r2.map(|v| format!("{v:.5}")).unwrap_or_default()));
    rows.push(stat("Within R2", &|r| r.within_r2.map(|v| format!("{v:.5}")).unwrap_or_default()));
    rows.push(stat("Log-likelihood", &|r| format!("{:.2}", r.log_likelihood)));
    rows.push(stat("AIC", &|r| format!("{:.2}", r.aic)));
    rows.push(stat("BIC", &|r| format!("{:.2}", r.bic)));
    let mut s = pad_table(&rows);
    s.push_str("Signif. codes: ***: 0.001, **: 0.01, *: 0.05, .: 0.1\n");
    s.push_str(&format!("manifest: {manifest}\n"));
    s
}

pub fn impacts_table(reports: &[ModelReport], manifest: &str) -> String {
    let mut rows = vec![vec![
        "Model".to_string(),
        "Term".into(),
        "Direct".into(),
        "Indirect".into(),
        "Total".into(),
    ]];
    for r in reports {
        let mut terms: Vec<&str> = Vec::new();
        for i in &r.impacts {
            if !terms.contains(&i.term.as_str()) {
                terms.push(&i.term);
            }
        }
        for t in terms {
            let cell = |e: &str| {
                r.impact(t, e).map(|i| format!("{:.4}{} ({:.4})", i.estimate, i.code, i.se)).unwrap_or_default()
            };
            rows.push(vec![r.model.clone(), t.into(), cell("direct"), cell("indirect"), cell("total")]);
        }
    }
    if rows.len() == 1 {
        return String::new();
    }
    let mut s = pad_table(&rows);
    s.push_str(&format!("manifest: {manifest}\n"));
    s
}

pub fn csd_table(rows: &[(String, CsdTestResult)], manifest: &str) -> String {
    let mut out = vec![vec![
        "Input".to_string(),
        "Test".into(),
        "Statistic".into(),
        "p-value".into(),
        "Mean rho".into(),
        "Mean |rho|".into(),
    ]];
    for (input, r) in rows {
        out.push(vec![
            input.clone(),
            r.method.label().into(),
            format!("{:.3}", r.statistic),
            format!("{:.4}", r.p_value),
            format!("{:.4}", r.mean_rho),
            format!("{:.4}", r.mean_abs_rho),
        ]);
    }
    let mut s = pad_table(&out);
    s.push_str(&format!("manifest: {manifest}\n"));
    s
}
