//! Property tests over random inputs for the estimator invariants.

use nalgebra::{DMatrix, DVector};
use panelkit::diagnostics::pesaran_cd;
use panelkit::panel::Record;
use panelkit::rng::seeded;
use panelkit::spatial::{fit_spatial, SpatialKind, SpatialOptions};
use panelkit::synth::{gen_blobs, gen_spatial, gen_twfe, DgpConfig};
use panelkit::twfe::{fit_twfe, ModelSpec};
use panelkit::typology::{adjusted_rand_index, hclust_ward};
use panelkit::{AdjacencyGraph, PanelDataset};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn normal(r: &mut impl Rng) -> f64 {
    r.sample(StandardNormal)
}

fn random_graph(n: usize, p: f64, seed: u64) -> AdjacencyGraph {
    let mut r = seeded(seed);
    let nodes: Vec<String> = (0..n).map(|i| format!("{i:05}")).collect();
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            if r.random_bool(p) {
                pairs.push((nodes[a].clone(), nodes[b].clone()));
            }
        }
    }
    AdjacencyGraph::from_edges(&nodes, &pairs).unwrap()
}

/// Dense least squares on `[X, entity dummies, year dummies without the first]`.
fn lsdv(panel: &PanelDataset, names: &[&str]) -> Vec<f64> {
    let (n, t, k) = (panel.n_entities(), panel.n_years(), names.len());
    let cols = k + n + t - 1;
    let a = DMatrix::from_fn(n * t, cols, |c, j| {
        let (i, s) = (c / t, c % t);
        if j < k {
            panel.value(names[j], i, s).unwrap().unwrap()
        } else if j < k + n {
            f64::from(u8::from(j - k == i))
        } else {
            f64::from(u8::from(j - k - n + 1 == s))
        }
    });
    let b = DVector::from_fn(n * t, |c, _| panel.value("y", c / t, c % t).unwrap().unwrap());
    let qr = a.qr();
    let sol = qr.r().solve_upper_triangular(&(qr.q().transpose() * b)).unwrap();
    sol.iter().take(k).copied().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn weights_are_row_stochastic_symmetric_and_bounded(n in 2usize..60, p in 0.02f64..0.5, seed in 0u64..1000) {
        let g = random_graph(n, p, seed);
        let w = g.row_normalize(g.nodes()).unwrap();
        let dense = w.to_dense();
        for i in 0..n {
            let s: f64 = dense.row(i).sum();
            prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
            for j in 0..n {
                prop_assert_eq!(dense[(i, j)] != 0.0, dense[(j, i)] != 0.0);
            }
        }
        prop_assert!(w.spectrum().iter().all(|l| l.abs() <= 1.0 + 1e-10));
        let (lo, hi) = w.feasible_interval();
        prop_assert!(lo < hi);
    }

    #[test]
    fn twfe_matches_dummy_regression(n in 3usize..40, t in 3usize..12, k in 1usize..4, seed in 0u64..1000) {
        prop_assume!(n * t <= 2000 && n * t > k + n + t + 2);
        let beta: Vec<f64> = (0..k).map(|j| 1.0 - 0.4 * j as f64).collect();
        let (panel, _) = gen_twfe(&DgpConfig { n, t, beta, seed, ..DgpConfig::default() }).unwrap();
        let names: Vec<String> = (1..=k).map(|j| format!("x{j}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut spec = ModelSpec::new("m", "y", &refs);
        spec.cluster.clear();
        let fit = fit_twfe(&spec, &panel).unwrap();
        for (j, o) in lsdv(&panel, &refs).iter().enumerate() {
            prop_assert!(((fit.coefficients[j] - o) / o).abs() < 1e-8);
        }
        prop_assert!((0.0..=1.0).contains(&fit.within_r2));
        prop_assert_eq!(fit.nobs, n * t);
    }

    #[test]
    fn cd_ignores_sign_scale_and_entity_order(n in 3usize..25, t in 5usize..30, seed in 0u64..1000) {
        let mut r = seeded(seed);
        let f: Vec<f64> = (0..t).map(|_| normal(&mut r)).collect();
        let e = DMatrix::from_fn(n, t, |_, s| 0.3 * f[s] + normal(&mut r));
        let base = pesaran_cd(&e).unwrap();
        let neg = pesaran_cd(&(-&e)).unwrap();
        let scales: Vec<f64> = (0..n).map(|i| 0.5 + i as f64).collect();
        let scaled = DMatrix::from_fn(n, t, |i, s| e[(i, s)] * scales[i] + 3.0);
        let order: Vec<usize> = (0..n).rev().collect();
        let permuted = e.select_rows(&order);
        for other in [neg, pesaran_cd(&scaled).unwrap(), pesaran_cd(&permuted).unwrap()] {
            prop_assert!((other.statistic - base.statistic).abs() < 1e-9 * base.statistic.abs().max(1.0));
        }
        prop_assert!((0.0..=1.0).contains(&base.p_value));
    }

    #[test]
    fn ward_heights_monotone_and_order_free(n in 3usize..50, p in 1usize..5, seed in 0u64..1000) {
        let mut r = seeded(seed);
        let x = DMatrix::from_fn(n, p, |_, _| normal(&mut r));
        let d = hclust_ward(&x);
        prop_assert!(d.merges.windows(2).all(|m| m[0].height <= m[1].height));
        let order: Vec<usize> = (0..n).rev().collect();
        let dp = hclust_ward(&x.select_rows(&order));
        for k in 1..=n.min(6) {
            let a = d.cut(k).unwrap();
            let b = dp.cut(k).unwrap();
            let b_back: Vec<usize> = (0..n).map(|i| b[n - 1 - i]).collect();
            prop_assert_eq!(adjusted_rand_index(&a, &b_back).unwrap(), 1.0);
        }
    }

    #[test]
    fn spatial_estimates_stay_feasible(seed in 0u64..200) {
        let g = AdjacencyGraph::torus(6, 6);
        let w = g.row_normalize(g.nodes()).unwrap();
        let cfg = DgpConfig { t: 6, rho: 0.3, delta: 0.2, seed, ..DgpConfig::default() };
        let (panel, _) = gen_spatial(&cfg, &w).unwrap();
        let (lo, hi) = w.feasible_interval();
        let spec = ModelSpec::new("m", "y", &["x1"]);
        for kind in [SpatialKind::Slm, SpatialKind::Sem, SpatialKind::Sarar] {
            let fit = fit_spatial(&spec, &panel, &w, kind, SpatialOptions::default()).unwrap();
            prop_assert!(fit.rho > lo && fit.rho < hi);
            prop_assert!(fit.delta > lo && fit.delta < hi);
            prop_assert!(fit.log_likelihood.is_finite());
        }
    }
}

#[test]
fn generators_are_seed_deterministic() {
    let cfg = DgpConfig { n: 20, t: 6, seed: 99, ..DgpConfig::default() };
    assert_eq!(gen_twfe(&cfg).unwrap().0.to_records(), gen_twfe(&cfg).unwrap().0.to_records());
    let (a, la) = gen_blobs(3, 10, 0.2, 1.0, 4).unwrap();
    let (b, lb) = gen_blobs(3, 10, 0.2, 1.0, 4).unwrap();
    assert_eq!((a.z, la), (b.z, lb));
}

#[test]
fn records_round_trip_through_panel() {
    let recs = vec![
        Record::new("01001", 2001, "y", 1.5),
        Record::new("01001", 2000, "y", 0.5),
        Record::new("01003", 2000, "y", -2.0),
        Record::new("01003", 2001, "y", 4.0),
    ];
    let panel = PanelDataset::from_records(&recs).unwrap();
    let mut back = panel.to_records();
    let mut want = recs.clone();
    let key = |r: &Record| (r.entity.clone(), r.year);
    back.sort_by_key(key);
    want.sort_by_key(key);
    assert_eq!(back, want);
}
