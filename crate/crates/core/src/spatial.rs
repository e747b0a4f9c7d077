//! Maximum-likelihood spatial panel models on two-way demeaned data.
//!
//! The general model is `B(A y - X β) = ε` per year with `A = I - ρW`, `B = I - δW`.
//! SLM fixes `δ = 0`, SEM fixes `ρ = 0`. Spatial lags are formed on the raw
//! cross-sections and then demeaned, so every quantity the concentrated likelihood needs
//! is a quadratic form in one fixed Gram matrix and each evaluation costs `O(K^3 + N)`.
//!
//! Estimation uses a balanced sub-panel: years with no complete row are dropped and
//! entities missing any remaining year are excluded, after which `W` is re-normalized
//! over the kept entities.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::inference::{significance_code, two_sided_p, Reference};
use crate::linalg::{floor_psd, sample_sd, spd_inverse};
use crate::panel::PanelDataset;
use crate::rng;
use crate::twfe::{demean_in_place, within_collinear, Balanced, CoefRow, ModelSpec};
use crate::weights::SpatialWeights;
use crate::{Error, Result};

const GRID_POINTS: usize = 200;
const GOLDEN_TOL: f64 = 1e-10;
const NEWTON_TOL: f64 = 1e-8;
/// Relative distance to an interval end below which an optimum counts as a boundary one.
const BOUNDARY_FRAC: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpatialKind {
    Slm,
    Sem,
    Sarar,
}

impl SpatialKind {
    pub fn label(self) -> &'static str {
        match self {
            SpatialKind::Slm => "SLM",
            SpatialKind::Sem => "SEM",
            SpatialKind::Sarar => "SARAR",
        }
    }
}

/// Optional constraints on the spatial parameters. A fixed parameter is held at the
/// given value, excluded from the covariance and from the parameter count.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SpatialOptions {
    pub fix_rho: Option<f64>,
    pub fix_delta: Option<f64>,
}

/// Concentrated likelihood over `(ρ, δ)` built from the Gram matrix of
/// `[ÿ, (Wy)¨, (W²y)¨, Ẍ, (WX)¨]`.
#[derive(Debug, Clone)]
pub struct Concentrated {
    gram: DMatrix<f64>,
    k: usize,
    n: usize,
    t: usize,
    spectrum: Vec<f64>,
    interval: (f64, f64),
}

impl Concentrated {
    fn combination(&self, rho: f64, delta: f64) -> (DVector<f64>, DMatrix<f64>) {
        let p = 3 + 2 * self.k;
        let mut c = DVector::zeros(p);
        c[0] = 1.0;
        c[1] = -(rho + delta);
        c[2] = rho * delta;
        let mut m = DMatrix::zeros(p, self.k);
        for j in 0..self.k {
            m[(3 + j, j)] = 1.0;
            m[(3 + self.k + j, j)] = -delta;
        }
        (c, m)
    }

    pub fn feasible(&self, v: f64) -> bool {
        v > self.interval.0 && v < self.interval.1
    }

    /// GLS coefficients and ML error variance at `(ρ, δ)`.
    pub fn solve(&self, rho: f64, delta: f64) -> Option<(DVector<f64>, f64)> {
        let (c, m) = self.combination(rho, delta);
        let gc = &self.gram * &c;
        let zz = m.transpose() * &self.gram * &m;
        let zy = m.transpose() * &gc;
        let yy = c.dot(&gc);
        let beta = if self.k == 0 { DVector::zeros(0) } else { zz.cholesky()?.solve(&zy) };
        let ssr = yy - zy.dot(&beta);
        (ssr > 0.0).then(|| (beta, ssr / self.n as f64))
    }

    fn log_det(&self, v: f64) -> f64 {
        self.spectrum.iter().map(|&l| (1.0 - v * l).ln()).sum()
    }

    /// Concentrated log-likelihood; `-inf` outside the feasible box.
    pub fn log_lik(&self, rho: f64, delta: f64) -> f64 {
        if !self.feasible(rho) || !self.feasible(delta) {
            return f64::NEG_INFINITY;
        }
        let Some((_, sigma2)) = self.solve(rho, delta) else {
            return f64::NEG_INFINITY;
        };
        let n = self.n as f64;
        -0.5 * n * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0)
            + self.t as f64 * (self.log_det(rho) + self.log_det(delta))
    }
}

/// Balanced, demeaned data for spatial estimation.
#[derive(Debug, Clone)]
pub struct SpatialData {
    pub entity_ids: Vec<String>,
    pub years: Vec<i32>,
    pub names: Vec<String>,
    pub weights: Arc<SpatialWeights>,
    /// Demeaned `y`, `Wy`, `W²y`, entity-major (`i * T + t`).
    pub y: DVector<f64>,
    pub wy: DVector<f64>,
    pub w2y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub wx: DMatrix<f64>,
    pub dropped_entities: Vec<String>,
    pub dropped_years: Vec<i32>,
}

impl SpatialData {
    pub fn n_entities(&self) -> usize {
        self.entity_ids.len()
    }

    pub fn n_years(&self) -> usize {
        self.years.len()
    }

    pub fn nobs(&self) -> usize {
        self.y.len()
    }

    pub fn build(spec: &ModelSpec, panel: &PanelDataset, w: &SpatialWeights) -> Result<SpatialData> {
        let bal = Balanced::build(spec, panel)?;
        let (n, t) = (bal.n_entities(), bal.n_years());
        if n < 3 {
            return Err(Error::InsufficientObservations { needed: 3, have: n });
        }
        let ids = bal.entity_ids();
        let weights = if w.ids() == ids.as_slice() { Arc::new(w.clone()) } else { Arc::new(w.restrict(&ids)?) };
        if weights.spectrum().iter().all(|l| l.abs() < 1e-12) {
            return Err(Error::InvalidArgument("spatial weights have no links among sample entities".into()));
        }
        let design = &bal.design;
        let k = design.x.ncols();
        let raw_y: Vec<f64> = design.y.iter().copied().collect();
        let raw_x: Vec<Vec<f64>> = (0..k).map(|j| design.x.column(j).iter().copied().collect()).collect();
        let lag = |v: &[f64]| -> Result<Vec<f64>> {
            let mut out = vec![0.0; n * t];
            for s in 0..t {
                let cross: Vec<f64> = (0..n).map(|i| v[i * t + s]).collect();
                for (i, val) in weights.spmv(&cross)?.into_iter().enumerate() {
                    out[i * t + s] = val;
                }
            }
            Ok(out)
        };
        let mut wy = lag(&raw_y)?;
        let mut w2y = lag(&wy)?;
        let mut wx: Vec<Vec<f64>> = raw_x.iter().map(|c| lag(c)).collect::<Result<_>>()?;
        let mut y = raw_y;
        let mut x = raw_x;

        let ent: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, t)).collect();
        let yr: Vec<usize> = (0..n).flat_map(|_| 0..t).collect();
        let mut cols: Vec<&mut [f64]> = vec![&mut y, &mut wy, &mut w2y];
        cols.extend(x.iter_mut().map(|c| c.as_mut_slice()));
        cols.extend(wx.iter_mut().map(|c| c.as_mut_slice()));
        demean_in_place(&ent, &yr, &spec.fe, &mut cols)?;

        let xm = DMatrix::from_fn(n * t, k, |r, j| x[j][r]);
        let bad = within_collinear(&design.x, &xm);
        if !bad.is_empty() {
            return Err(Error::Collinear(bad.into_iter().map(|j| design.names[j].clone()).collect()));
        }
        Ok(SpatialData {
            entity_ids: ids,
            years: bal.year_labels(),
            names: design.names.clone(),
            weights,
            y: DVector::from_vec(y),
            wy: DVector::from_vec(wy),
            w2y: DVector::from_vec(w2y),
            x: xm,
            wx: DMatrix::from_fn(n * t, k, |r, j| wx[j][r]),
            dropped_entities: bal.dropped_entities,
            dropped_years: bal.dropped_years,
        })
    }

    pub fn concentrated(&self) -> Concentrated {
        let k = self.x.ncols();
        let nr = self.nobs();
        let mut v = DMatrix::zeros(nr, 3 + 2 * k);
        v.set_column(0, &self.y);
        v.set_column(1, &self.wy);
        v.set_column(2, &self.w2y);
        for j in 0..k {
            v.set_column(3 + j, &self.x.column(j));
            v.set_column(3 + k + j, &self.wx.column(j));
        }
        let (lo, hi) = self.weights.feasible_interval();
        Concentrated {
            gram: v.tr_mul(&v),
            k,
            n: nr,
            t: self.n_years(),
            spectrum: self.weights.spectrum().to_vec(),
            interval: (lo.max(-1e6), hi.min(1e6)),
        }
    }

    /// `ε = B(A ÿ - Ẍ β)` on the demeaned data.
    pub fn residuals(&self, beta: &DVector<f64>, rho: f64, delta: f64) -> DVector<f64> {
        let xb = &self.x * beta - (&self.wx * beta) * delta;
        &self.y - &self.wy * (rho + delta) + &self.w2y * (rho * delta) - xb
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Optimum1 {
    x: f64,
    f: f64,
}

fn golden(f: &(dyn Fn(f64) -> f64 + Sync), mut a: f64, mut b: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > GOLDEN_TOL * (1.0 + a.abs().max(b.abs())) {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd {
        c
    } else {
        d
    }
}

/// Newton steps on numerical derivatives, accepted only when they improve `f`.
fn newton_polish(f: &(dyn Fn(f64) -> f64 + Sync), mut x: f64, lo: f64, hi: f64) -> f64 {
    let mut fx = f(x);
    for _ in 0..50 {
        let h = 1e-5 * (1.0 + x.abs());
        let (fp, fm) = (f(x + h), f(x - h));
        let d1 = (fp - fm) / (2.0 * h);
        let d2 = (fp - 2.0 * fx + fm) / (h * h);
        if !d1.is_finite() || !d2.is_finite() || d2 >= 0.0 {
            break;
        }
        let step = -d1 / d2;
        let cand = x + step;
        if cand <= lo || cand >= hi {
            break;
        }
        let fcand = f(cand);
        if fcand < fx {
            break;
        }
        x = cand;
        fx = fcand;
        if step.abs() < NEWTON_TOL {
            break;
        }
    }
    x
}

fn maximize_1d(f: &(dyn Fn(f64) -> f64 + Sync), lo: f64, hi: f64) -> Optimum1 {
    let step = (hi - lo) / (GRID_POINTS + 1) as f64;
    let grid: Vec<(f64, f64)> = (1..=GRID_POINTS)
        .into_par_iter()
        .map(|i| {
            let x = lo + step * i as f64;
            (x, f(x))
        })
        .collect();
    let b = (0..grid.len()).max_by(|&i, &j| grid[i].1.total_cmp(&grid[j].1)).unwrap_or(0);
    let a = if b == 0 { lo + step * 1e-6 } else { grid[b - 1].0 };
    let c = if b + 1 == grid.len() { hi - step * 1e-6 } else { grid[b + 1].0 };
    let x = golden(f, a, c);
    let x = newton_polish(f, x, lo, hi);
    Optimum1 { x, f: f(x) }
}

fn near_boundary(x: f64, lo: f64, hi: f64) -> bool {
    let w = hi - lo;
    x - lo < BOUNDARY_FRAC * w || hi - x < BOUNDARY_FRAC * w
}

fn nelder_mead(f: &(dyn Fn(f64, f64) -> f64 + Sync), start: [f64; 2], scale: f64) -> ([f64; 2], f64) {
    let neg = |p: &[f64; 2]| -f(p[0], p[1]);
    let mut simplex = [start, [start[0] + scale, start[1]], [start[0], start[1] + scale]];
    let mut vals = simplex.map(|p| neg(&p));
    for _ in 0..5000 {
        let mut idx = [0, 1, 2];
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = idx.map(|i| simplex[i]);
        vals = idx.map(|i| vals[i]);
        let size = (0..2).map(|d| (simplex[1][d] - simplex[0][d]).abs().max((simplex[2][d] - simplex[0][d]).abs())).fold(0.0, f64::max);
        if size < 1e-10 && (vals[2] - vals[0]).abs() < 1e-12 * (1.0 + vals[0].abs()) {
            break;
        }
        let centroid = [(simplex[0][0] + simplex[1][0]) / 2.0, (simplex[0][1] + simplex[1][1]) / 2.0];
        let along = |t: f64| [centroid[0] + t * (simplex[2][0] - centroid[0]), centroid[1] + t * (simplex[2][1] - centroid[1])];
        let r = along(-1.0);
        let fr = neg(&r);
        if fr < vals[0] {
            let e = along(-2.0);
            let fe = neg(&e);
            if fe < fr {
                simplex[2] = e;
                vals[2] = fe;
            } else {
                simplex[2] = r;
                vals[2] = fr;
            }
        } else if fr < vals[1] {
            simplex[2] = r;
            vals[2] = fr;
        } else {
            let c = if fr < vals[2] { along(-0.5) } else { along(0.5) };
            let fcon = neg(&c);
            if fcon < vals[2].min(fr) {
                simplex[2] = c;
                vals[2] = fcon;
            } else {
                for i in 1..3 {
                    simplex[i] = [
                        simplex[0][0] + 0.5 * (simplex[i][0] - simplex[0][0]),
                        simplex[0][1] + 0.5 * (simplex[i][1] - simplex[0][1]),
                    ];
                    vals[i] = neg(&simplex[i]);
                }
            }
        }
    }
    let best = (0..3).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    (simplex[best], -vals[best])
}

/// Newton polish in two dimensions on a numerical Hessian.
fn newton_polish_2d(f: &(dyn Fn(f64, f64) -> f64 + Sync), mut p: [f64; 2]) -> [f64; 2] {
    let mut fp = f(p[0], p[1]);
    for _ in 0..50 {
        let h = [1e-5 * (1.0 + p[0].abs()), 1e-5 * (1.0 + p[1].abs())];
        let g0 = (f(p[0] + h[0], p[1]) - f(p[0] - h[0], p[1])) / (2.0 * h[0]);
        let g1 = (f(p[0], p[1] + h[1]) - f(p[0], p[1] - h[1])) / (2.0 * h[1]);
        let h00 = (f(p[0] + h[0], p[1]) - 2.0 * fp + f(p[0] - h[0], p[1])) / (h[0] * h[0]);
        let h11 = (f(p[0], p[1] + h[1]) - 2.0 * fp + f(p[0], p[1] - h[1])) / (h[1] * h[1]);
        let h01 = (f(p[0] + h[0], p[1] + h[1]) - f(p[0] + h[0], p[1] - h[1]) - f(p[0] - h[0], p[1] + h[1])
            + f(p[0] - h[0], p[1] - h[1]))
            / (4.0 * h[0] * h[1]);
        let det = h00 * h11 - h01 * h01;
        if !det.is_finite() || h00 >= 0.0 || det <= 0.0 {
            break;
        }
        let step = [-(h11 * g0 - h01 * g1) / det, -(h00 * g1 - h01 * g0) / det];
        let cand = [p[0] + step[0], p[1] + step[1]];
        let fc = f(cand[0], cand[1]);
        if !(fc >= fp) {
            break;
        }
        p = cand;
        fp = fc;
        if step[0].abs().max(step[1].abs()) < NEWTON_TOL {
            break;
        }
    }
    p
}

/// Result of a spatial ML fit.
#[derive(Clone)]
pub struct SpatialFit {
    pub kind: SpatialKind,
    pub model: String,
    pub dependent: String,
    pub names: Vec<String>,
    pub beta: DVector<f64>,
    pub rho: f64,
    pub delta: f64,
    pub rho_free: bool,
    pub delta_free: bool,
    pub sigma2: f64,
    /// Covariance of `(β, ρ, δ)` restricted to free parameters, in that order.
    pub vcov: DMatrix<f64>,
    pub log_likelihood: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_params: usize,
    pub nobs: usize,
    pub residuals: DVector<f64>,
    pub entity_ids: Vec<String>,
    pub years: Vec<i32>,
    pub weights: Arc<SpatialWeights>,
    pub concentrated: Concentrated,
    pub warnings: Vec<String>,
}

impl fmt::Debug for SpatialFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpatialFit")
            .field("kind", &self.kind)
            .field("names", &self.names)
            .field("beta", &self.beta.as_slice())
            .field("rho", &self.rho)
            .field("delta", &self.delta)
            .field("sigma2", &self.sigma2)
            .field("log_likelihood", &self.log_likelihood)
            .field("nobs", &self.nobs)
            .finish()
    }
}

impl SpatialFit {
    pub fn k(&self) -> usize {
        self.beta.len()
    }

    /// Names of the parameters covered by `vcov`.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = self.names.clone();
        if self.rho_free {
            out.push("rho".into());
        }
        if self.delta_free {
            out.push("delta".into());
        }
        out
    }

    pub fn estimates(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.beta.iter().copied().collect();
        if self.rho_free {
            out.push(self.rho);
        }
        if self.delta_free {
            out.push(self.delta);
        }
        out
    }

    pub fn se(&self) -> Vec<f64> {
        (0..self.vcov.nrows()).map(|j| self.vcov[(j, j)].max(0.0).sqrt()).collect()
    }

    pub fn coef(&self, name: &str) -> Option<f64> {
        let names = self.param_names();
        names.iter().position(|n| n == name).map(|j| self.estimates()[j])
    }

    pub fn coef_table(&self) -> Vec<CoefRow> {
        let se = self.se();
        self.param_names()
            .into_iter()
            .zip(self.estimates())
            .zip(se)
            .map(|((name, est), se)| {
                let stat = est / se;
                let p = two_sided_p(stat, Reference::Normal);
                CoefRow { name, estimate: est, se, statistic: stat, p_value: p, code: significance_code(p) }
            })
            .collect()
    }

    pub fn n_entities(&self) -> usize {
        self.entity_ids.len()
    }

    pub fn n_years(&self) -> usize {
        self.years.len()
    }

    /// Residuals `ε` as an `N x T` matrix over the estimation sample.
    pub fn residual_matrix(&self) -> DMatrix<f64> {
        let t = self.n_years();
        DMatrix::from_fn(self.n_entities(), t, |i, s| self.residuals[i * t + s])
    }

    /// Largest concentrated log-likelihood over an even grid of `points` values of each
    /// free spatial parameter (profiling out the other one for SARAR).
    pub fn grid_audit(&self, points: usize) -> GridAudit {
        let c = &self.concentrated;
        let (lo, hi) = c.interval;
        let step = (hi - lo) / (points + 1) as f64;
        let grid: Vec<f64> = (1..=points).map(|i| lo + step * i as f64).collect();
        let evals: Vec<(f64, f64, f64)> = match (self.rho_free, self.delta_free) {
            (true, false) => grid.par_iter().map(|&r| (r, self.delta, c.log_lik(r, self.delta))).collect(),
            (false, true) => grid.par_iter().map(|&d| (self.rho, d, c.log_lik(self.rho, d))).collect(),
            (true, true) => grid
                .par_iter()
                .map(|&r| {
                    let inner = |d: f64| c.log_lik(r, d);
                    let best = maximize_1d(&inner, lo, hi);
                    (r, best.x, best.f)
                })
                .collect(),
            (false, false) => vec![(self.rho, self.delta, self.log_likelihood)],
        };
        let best = evals.into_iter().max_by(|a, b| a.2.total_cmp(&b.2)).unwrap();
        GridAudit {
            points,
            best_rho: best.0,
            best_delta: best.1,
            best_log_lik: best.2,
            fitted_log_lik: self.log_likelihood,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridAudit {
    pub points: usize,
    pub best_rho: f64,
    pub best_delta: f64,
    pub best_log_lik: f64,
    pub fitted_log_lik: f64,
}

impl GridAudit {
    pub fn passed(&self) -> bool {
        self.fitted_log_lik >= self.best_log_lik - 1e-8 * (1.0 + self.fitted_log_lik.abs())
    }
}

pub fn fit_slm(spec: &ModelSpec, panel: &PanelDataset, w: &SpatialWeights) -> Result<SpatialFit> {
    fit_spatial(spec, panel, w, SpatialKind::Slm, SpatialOptions::default())
}

pub fn fit_sem(spec: &ModelSpec, panel: &PanelDataset, w: &SpatialWeights) -> Result<SpatialFit> {
    fit_spatial(spec, panel, w, SpatialKind::Sem, SpatialOptions::default())
}

pub fn fit_sarar(spec: &ModelSpec, panel: &PanelDataset, w: &SpatialWeights) -> Result<SpatialFit> {
    fit_spatial(spec, panel, w, SpatialKind::Sarar, SpatialOptions::default())
}

pub fn fit_spatial(
    spec: &ModelSpec,
    panel: &PanelDataset,
    w: &SpatialWeights,
    kind: SpatialKind,
    opts: SpatialOptions,
) -> Result<SpatialFit> {
    let data = SpatialData::build(spec, panel, w)?;
    fit_data(spec, &data, kind, opts)
}

pub fn fit_data(spec: &ModelSpec, data: &SpatialData, kind: SpatialKind, opts: SpatialOptions) -> Result<SpatialFit> {
    let conc = data.concentrated();
    let (lo, hi) = conc.interval;
    let check = |name: &str, v: f64| {
        if conc.feasible(v) {
            Ok(v)
        } else {
            Err(Error::InfeasibleParameter { name: name.into(), value: v, lower: lo, upper: hi })
        }
    };
    let fixed_rho = match (kind, opts.fix_rho) {
        (SpatialKind::Sem, _) => Some(0.0),
        (_, Some(v)) => Some(check("rho", v)?),
        _ => None,
    };
    let fixed_delta = match (kind, opts.fix_delta) {
        (SpatialKind::Slm, _) => Some(0.0),
        (_, Some(v)) => Some(check("delta", v)?),
        _ => None,
    };
    let boundary = |name: &str, v: f64| Error::BoundaryOptimum { parameter: name.into(), value: v };
    let (rho, delta) = match (fixed_rho, fixed_delta) {
        (Some(r), Some(d)) => (r, d),
        (None, Some(d)) => {
            let f = |r: f64| conc.log_lik(r, d);
            let o = maximize_1d(&f, lo, hi);
            if near_boundary(o.x, lo, hi) {
                return Err(boundary("rho", o.x));
            }
            (o.x, d)
        }
        (Some(r), None) => {
            let f = |d: f64| conc.log_lik(r, d);
            let o = maximize_1d(&f, lo, hi);
            if near_boundary(o.x, lo, hi) {
                return Err(boundary("delta", o.x));
            }
            (r, o.x)
        }
        (None, None) => {
            let f = |r: f64, d: f64| conc.log_lik(r, d);
            let starts: Vec<[f64; 2]> = (1..=5)
                .flat_map(|i| (1..=5).map(move |j| (i, j)))
                .map(|(i, j)| [lo + (hi - lo) * i as f64 / 6.0, lo + (hi - lo) * j as f64 / 6.0])
                .collect();
            let runs: Vec<([f64; 2], f64)> =
                starts.par_iter().map(|s| nelder_mead(&f, *s, 0.05 * (hi - lo))).collect();
            let (best, _) = runs.into_iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
            let p = newton_polish_2d(&f, best);
            if near_boundary(p[0], lo, hi) {
                return Err(boundary("rho", p[0]));
            }
            if near_boundary(p[1], lo, hi) {
                return Err(boundary("delta", p[1]));
            }
            (p[0], p[1])
        }
    };
    let (beta, sigma2) =
        conc.solve(rho, delta).ok_or_else(|| Error::Numerical("degenerate concentrated likelihood".into()))?;
    let log_likelihood = conc.log_lik(rho, delta);
    let residuals = data.residuals(&beta, rho, delta);
    let rho_free = fixed_rho.is_none();
    let delta_free = fixed_delta.is_none();
    let vcov = information_inverse(data, &beta, rho, delta, sigma2, rho_free, delta_free)?;

    let n = data.nobs();
    let fe_dof = data.n_entities() + data.n_years() - 1;
    let n_params = beta.len() + rho_free as usize + delta_free as usize + 1 + fe_dof;
    let mut warnings = Vec::new();
    if !data.dropped_entities.is_empty() {
        warnings.push(format!(
            "{} entities with incomplete years excluded from the balanced spatial sample",
            data.dropped_entities.len()
        ));
    }
    Ok(SpatialFit {
        kind,
        model: spec.name.clone(),
        dependent: spec.dependent.clone(),
        names: data.names.clone(),
        beta,
        rho,
        delta,
        rho_free,
        delta_free,
        sigma2,
        vcov,
        log_likelihood,
        aic: -2.0 * log_likelihood + 2.0 * n_params as f64,
        bic: -2.0 * log_likelihood + (n as f64).ln() * n_params as f64,
        n_params,
        nobs: n,
        residuals,
        entity_ids: data.entity_ids.clone(),
        years: data.years.clone(),
        weights: data.weights.clone(),
        concentrated: conc,
        warnings,
    })
}

/// Full information matrix of `(β, ρ, δ, σ²)`, in that order.
pub fn information_matrix(
    data: &SpatialData,
    beta: &DVector<f64>,
    rho: f64,
    delta: f64,
    sigma2: f64,
) -> Result<DMatrix<f64>> {
    let w = &data.weights;
    let (n, t) = (data.n_entities(), data.n_years());
    let k = beta.len();
    let tt = t as f64;
    let ga = |l: f64| l / (1.0 - rho * l);
    let hb = |l: f64| l / (1.0 - delta * l);

    // B W A^{-1} X β, applied year by year
    let xb = &data.x * beta;
    let mut bgxb = DVector::zeros(n * t);
    for s in 0..t {
        let cross: Vec<f64> = (0..n).map(|i| xb[i * t + s]).collect();
        let out = w.apply_fn(|l| (1.0 - delta * l) * ga(l), &cross)?;
        for i in 0..n {
            bgxb[i * t + s] = out[i];
        }
    }
    let xt = &data.x - &data.wx * delta;

    let mut m = DMatrix::zeros(k + 3, k + 3);
    let (ir, id, is) = (k, k + 1, k + 2);
    m.view_mut((0, 0), (k, k)).copy_from(&(xt.transpose() * &xt / sigma2));
    let xr = xt.transpose() * &bgxb / sigma2;
    for j in 0..k {
        m[(j, ir)] = xr[j];
        m[(ir, j)] = xr[j];
    }
    m[(ir, ir)] = tt * (w.trace_fn(|l| ga(l).powi(2)) + w.trace_product(ga, ga)) + bgxb.norm_squared() / sigma2;
    m[(ir, id)] = tt * (w.trace_fn(|l| hb(l) * ga(l)) + w.trace_product(hb, ga));
    m[(id, ir)] = m[(ir, id)];
    m[(ir, is)] = tt * w.trace_fn(ga) / sigma2;
    m[(is, ir)] = m[(ir, is)];
    m[(id, id)] = tt * (w.trace_fn(|l| hb(l).powi(2)) + w.trace_product(hb, hb));
    m[(id, is)] = tt * w.trace_fn(hb) / sigma2;
    m[(is, id)] = m[(id, is)];
    m[(is, is)] = (n * t) as f64 / (2.0 * sigma2 * sigma2);
    Ok(m)
}

fn information_inverse(
    data: &SpatialData,
    beta: &DVector<f64>,
    rho: f64,
    delta: f64,
    sigma2: f64,
    rho_free: bool,
    delta_free: bool,
) -> Result<DMatrix<f64>> {
    let k = beta.len();
    let full = information_matrix(data, beta, rho, delta, sigma2)?;
    let mut keep: Vec<usize> = (0..k).collect();
    if rho_free {
        keep.push(k);
    }
    if delta_free {
        keep.push(k + 1);
    }
    keep.push(k + 2);
    let sub = full.select_rows(&keep).select_columns(&keep);
    let inv = spd_inverse(&sub)?;
    let m = keep.len() - 1;
    Ok(inv.view((0, 0), (m, m)).into_owned())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpactEstimate {
    pub estimate: f64,
    pub se: f64,
    pub p_value: f64,
    pub code: &'static str,
}

impl ImpactEstimate {
    fn new(estimate: f64, se: f64) -> Self {
        let p_value = if se > 0.0 { two_sided_p(estimate / se, Reference::Normal) } else { f64::NAN };
        let code = if p_value.is_nan() { "" } else { significance_code(p_value) };
        Self { estimate, se, p_value, code }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpactRow {
    pub name: String,
    pub direct: ImpactEstimate,
    pub indirect: ImpactEstimate,
    pub total: ImpactEstimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpactsResult {
    pub model: String,
    pub rows: Vec<ImpactRow>,
    pub n_sim: usize,
    pub seed: u64,
}

impl ImpactsResult {
    pub fn row(&self, name: &str) -> Option<&ImpactRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// `(1/N) tr S` and `(1/N) 1'S1` for `S = (I - ρW)^{-1}`.
pub fn impact_multipliers(w: &SpatialWeights, rho: f64) -> Result<(f64, f64)> {
    let (lo, hi) = w.feasible_interval();
    if rho <= lo || rho >= hi {
        return Err(Error::SingularOperator(rho));
    }
    if rho == 0.0 {
        return Ok((1.0, 1.0));
    }
    let n = w.len() as f64;
    let f = |l: f64| 1.0 / (1.0 - rho * l);
    Ok((w.trace_fn(f) / n, w.total_fn(f) / n))
}

/// Direct, indirect and total impacts with standard errors from `n_sim` draws of the
/// free parameters from their asymptotic normal distribution.
pub fn impacts(fit: &SpatialFit, n_sim: usize, seed: u64) -> Result<ImpactsResult> {
    if n_sim < 100 {
        return Err(Error::InvalidArgument(format!("impacts need at least 100 draws, got {n_sim}")));
    }
    let k = fit.k();
    let w = &fit.weights;
    let (md, mt) = impact_multipliers(w, fit.rho)?;

    let free = k + fit.rho_free as usize;
    let cov = fit.vcov.view((0, 0), (free, free)).into_owned();
    let (cov, _) = floor_psd(&cov);
    let eig = SymmetricEigen::new(cov);
    let mut root = eig.eigenvectors.clone();
    for (j, &v) in eig.eigenvalues.iter().enumerate() {
        root.column_mut(j).scale_mut(v.max(0.0).sqrt());
    }
    let mut centre: Vec<f64> = fit.beta.iter().copied().collect();
    if fit.rho_free {
        centre.push(fit.rho);
    }
    let centre = DVector::from_vec(centre);
    let (lo, hi) = w.feasible_interval();

    let draws: Vec<Vec<[f64; 3]>> = (0..n_sim)
        .into_par_iter()
        .map(|d| {
            let mut r = rng::substream(seed, d as u64);
            for _ in 0..1000 {
                let z = DVector::from_fn(free, |_, _| r.sample::<f64, _>(StandardNormal));
                let theta = &centre + &root * z;
                let rho = if fit.rho_free { theta[k] } else { fit.rho };
                if rho <= lo || rho >= hi {
                    continue;
                }
                let (dm, tm) = impact_multipliers(w, rho)?;
                return Ok((0..k).map(|j| [theta[j] * dm, theta[j] * (tm - dm), theta[j] * tm]).collect());
            }
            Err(Error::Numerical("simulated spatial parameter repeatedly outside the feasible interval".into()))
        })
        .collect::<Result<_>>()?;

    let rows = (0..k)
        .map(|j| {
            let b = fit.beta[j];
            let se = |c: usize| sample_sd(&draws.iter().map(|d| d[j][c]).collect::<Vec<_>>());
            let (direct, total) = (b * md, b * mt);
            ImpactRow {
                name: fit.names[j].clone(),
                direct: ImpactEstimate::new(direct, se(0)),
                indirect: ImpactEstimate::new(total - direct, se(1)),
                total: ImpactEstimate::new(total, se(2)),
            }
        })
        .collect();
    Ok(ImpactsResult { model: fit.model.clone(), rows, n_sim, seed })
}
