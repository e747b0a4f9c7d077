//! Seeded synthetic data-generating processes with known truth.
//!
//! Entities are labelled with zero-padded five-digit codes and years start at 2000.
//! Regressors are named `x1..xK` and the outcome `y`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::panel::{PanelDataset, Record};
use crate::rng::{self, PanelRng};
use crate::typology::{standardize, FeatureTable};
use crate::weights::SpatialWeights;
use crate::{Error, Result};

pub const FIRST_YEAR: i32 = 2000;
/// Correlation between each regressor and the entity effect.
pub const X_ALPHA_CORR: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct DgpConfig {
    pub n: usize,
    pub t: usize,
    pub beta: Vec<f64>,
    pub rho: f64,
    pub delta: f64,
    pub n_factors: usize,
    pub factor_scale: f64,
    pub sigma: f64,
    pub fe_scale: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n: 50,
            t: 10,
            beta: vec![1.0],
            rho: 0.0,
            delta: 0.0,
            n_factors: 0,
            factor_scale: 1.0,
            sigma: 1.0,
            fe_scale: 1.0,
            seed: 0,
        }
    }
}

/// Parameters and latent components behind a generated panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub beta: Vec<f64>,
    pub rho: f64,
    pub delta: f64,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    /// `T x d`.
    pub factors: DMatrix<f64>,
    /// `N x d`.
    pub loadings: DMatrix<f64>,
    /// Spatially filtered error `u`, `N x T`.
    pub u: DMatrix<f64>,
}

pub fn entity_id(i: usize) -> String {
    format!("{:05}", i + 1)
}

pub fn regressor_names(k: usize) -> Vec<String> {
    (1..=k).map(|j| format!("x{j}")).collect()
}

fn normal(r: &mut PanelRng) -> f64 {
    r.sample(StandardNormal)
}

fn validate(cfg: &DgpConfig) -> Result<()> {
    if cfg.n < 2 || cfg.t < 3 {
        return Err(Error::InvalidArgument(format!("need N >= 2 and T >= 3, got {} x {}", cfg.n, cfg.t)));
    }
    if !(cfg.sigma >= 0.0) || !(cfg.fe_scale >= 0.0) {
        return Err(Error::InvalidArgument("scales must be non-negative".into()));
    }
    Ok(())
}

/// Smooth factor `l` (0-based) at period `s` of `t`: alternating sines and cosines of
/// increasing frequency.
pub fn smooth_factor(l: usize, s: usize, t: usize) -> f64 {
    let freq = (l / 2 + 1) as f64;
    let arg = 2.0 * std::f64::consts::PI * freq * s as f64 / t as f64;
    if l % 2 == 0 {
        arg.sin()
    } else {
        arg.cos()
    }
}

struct Draws {
    alpha: Vec<f64>,
    gamma: Vec<f64>,
    /// `x[k][i * T + s]`
    x: Vec<Vec<f64>>,
    eps: Vec<f64>,
    factors: DMatrix<f64>,
    loadings: DMatrix<f64>,
}

/// Every random quantity is drawn in a fixed order so outputs depend only on the seed.
fn draw(cfg: &DgpConfig, n: usize) -> Draws {
    let mut r = rng::seeded(cfg.seed);
    let t = cfg.t;
    let alpha: Vec<f64> = (0..n).map(|_| cfg.fe_scale * normal(&mut r)).collect();
    let gamma: Vec<f64> = (0..t).map(|_| cfg.fe_scale * normal(&mut r)).collect();
    let d = cfg.n_factors;
    let factors = DMatrix::from_fn(t, d, |s, l| smooth_factor(l, s, t));
    let loadings = DMatrix::from_fn(n, d, |_, _| cfg.factor_scale * normal(&mut r));
    let a_scale = if cfg.fe_scale > 0.0 { cfg.fe_scale } else { 1.0 };
    let tail = (1.0 - X_ALPHA_CORR * X_ALPHA_CORR).sqrt();
    let x: Vec<Vec<f64>> = (0..cfg.beta.len())
        .map(|k| {
            (0..n * t)
                .map(|c| {
                    let (i, s) = (c / t, c % t);
                    let mut v = X_ALPHA_CORR * alpha[i] / a_scale + tail * normal(&mut r);
                    if k == 0 && d > 0 {
                        v += 0.5 * loadings[(i, 0)] * factors[(s, 0)];
                    }
                    v
                })
                .collect()
        })
        .collect();
    let eps: Vec<f64> = (0..n * t).map(|_| cfg.sigma * normal(&mut r)).collect();
    Draws { alpha, gamma, x, eps, factors, loadings }
}

fn assemble(ids: &[String], t: usize, y: &[f64], x: &[Vec<f64>]) -> Result<PanelDataset> {
    let names = regressor_names(x.len());
    let mut recs = Vec::with_capacity(ids.len() * t * (1 + x.len()));
    for (i, id) in ids.iter().enumerate() {
        for s in 0..t {
            let year = FIRST_YEAR + s as i32;
            recs.push(Record::new(id.clone(), year, "y", y[i * t + s]));
            for (k, col) in x.iter().enumerate() {
                recs.push(Record::new(id.clone(), year, names[k].clone(), col[i * t + s]));
            }
        }
    }
    PanelDataset::from_records(&recs)
}

fn xb(d: &Draws, beta: &[f64], c: usize) -> f64 {
    d.x.iter().zip(beta).map(|(col, b)| col[c] * b).sum()
}

/// `y = X β + α_i + γ_t + ε`, with each regressor correlated 0.3 with `α`.
pub fn gen_twfe(cfg: &DgpConfig) -> Result<(PanelDataset, Truth)> {
    let mut plain = cfg.clone();
    plain.n_factors = 0;
    gen_factor(&plain)
}

/// Two-way effects plus `Σ_l λ_il f_l(t)` with smooth trigonometric factors. The first
/// regressor loads on the first factor, so ignoring the factor biases `β̂`.
pub fn gen_factor(cfg: &DgpConfig) -> Result<(PanelDataset, Truth)> {
    validate(cfg)?;
    let (n, t) = (cfg.n, cfg.t);
    let d = draw(cfg, n);
    let common = &d.loadings * d.factors.transpose();
    let y: Vec<f64> = (0..n * t)
        .map(|c| {
            let (i, s) = (c / t, c % t);
            xb(&d, &cfg.beta, c) + d.alpha[i] + d.gamma[s] + common[(i, s)] + d.eps[c]
        })
        .collect();
    let ids: Vec<String> = (0..n).map(entity_id).collect();
    let panel = assemble(&ids, t, &y, &d.x)?;
    let u = DMatrix::from_fn(n, t, |i, s| d.eps[i * t + s]);
    Ok((
        panel,
        Truth {
            beta: cfg.beta.clone(),
            rho: 0.0,
            delta: 0.0,
            alpha: d.alpha,
            gamma: d.gamma,
            factors: d.factors,
            loadings: d.loadings,
            u,
        },
    ))
}

/// Per year `y = (I − ρW)^{-1}(X β + α + γ_t + u)` with `u = (I − δW)^{-1} ε`, over the
/// entities of `w` (`cfg.n` is ignored).
pub fn gen_spatial(cfg: &DgpConfig, w: &SpatialWeights) -> Result<(PanelDataset, Truth)> {
    let mut c = cfg.clone();
    c.n = w.len();
    c.n_factors = 0;
    validate(&c)?;
    let (lo, hi) = w.feasible_interval();
    for (name, v) in [("rho", c.rho), ("delta", c.delta)] {
        let eps = 1e-10;
        if !(v > lo + eps && v < hi - eps) {
            return Err(Error::InfeasibleParameter { name: name.into(), value: v, lower: lo, upper: hi });
        }
    }
    let (n, t) = (c.n, c.t);
    let d = draw(&c, n);
    let mut y = vec![0.0; n * t];
    let mut u = DMatrix::zeros(n, t);
    for s in 0..t {
        let eps: Vec<f64> = (0..n).map(|i| d.eps[i * t + s]).collect();
        let us = w.solve_shifted(c.delta, &eps)?;
        let rhs: Vec<f64> = (0..n).map(|i| xb(&d, &c.beta, i * t + s) + d.alpha[i] + d.gamma[s] + us[i]).collect();
        let ys = w.solve_shifted(c.rho, &rhs)?;
        for i in 0..n {
            y[i * t + s] = ys[i];
            u[(i, s)] = us[i];
        }
    }
    let panel = assemble(w.ids(), t, &y, &d.x)?;
    Ok((
        panel,
        Truth {
            beta: c.beta.clone(),
            rho: c.rho,
            delta: c.delta,
            alpha: d.alpha,
            gamma: d.gamma,
            factors: d.factors,
            loadings: d.loadings,
            u,
        },
    ))
}

/// `k` isotropic gaussian blobs of `n_per` points in `k` dimensions, centred on
/// `sep/√2 · e_c` so that centres are `sep` apart. Returns the standardized table and the
/// planted labels.
pub fn gen_blobs(k: usize, n_per: usize, sigma: f64, sep: f64, seed: u64) -> Result<(FeatureTable, Vec<usize>)> {
    if k < 1 || n_per < 1 || k * n_per < 2 {
        return Err(Error::InvalidArgument("blobs need at least two points".into()));
    }
    if !(sep > 0.0) || !(sigma > 0.0) {
        return Err(Error::InvalidArgument("sep and sigma must be positive".into()));
    }
    let mut r = rng::seeded(seed);
    let dims = k.max(2);
    let raw = DMatrix::from_fn(k * n_per, dims, |_, _| sigma * normal(&mut r));
    let raw = DMatrix::from_fn(k * n_per, dims, |i, j| raw[(i, j)] + if i / n_per == j { sep / 2f64.sqrt() } else { 0.0 });
    let ids: Vec<String> = (0..k * n_per).map(entity_id).collect();
    let names: Vec<String> = (1..=dims).map(|j| format!("f{j}")).collect();
    let table = standardize(&ids, &names, &raw)?;
    Ok((table, (0..k * n_per).map(|i| i / n_per).collect()))
}
