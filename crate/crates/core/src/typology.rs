//! Standardized feature tables, Ward hierarchical clustering and choice of the number of
//! clusters.
//!
//! Ward.D2 linkage runs on squared Euclidean distances through the Lance–Williams
//! recurrence with the nearest-neighbour chain algorithm. A merge at height `h` raises
//! the within-cluster sum of squares by `h² / 2`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::linalg::{mean, sample_sd};
use crate::rng;
use crate::{Error, Result};

/// Complete feature rows with their z-scores (sample standard deviation).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub ids: Vec<String>,
    pub names: Vec<String>,
    pub raw: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// Ids dropped because a feature was missing (NaN).
    pub excluded: Vec<String>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.names.iter().position(|n| n == name).ok_or_else(|| Error::UnknownVariable(name.into()))
    }

    /// Raw values from z-scores.
    pub fn inverse(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| z[(i, j)] * self.sds[j] + self.means[j])
    }
}

/// Z-score every column. Rows containing NaN are excluded and reported.
pub fn standardize(ids: &[String], names: &[String], raw: &DMatrix<f64>) -> Result<FeatureTable> {
    if raw.nrows() != ids.len() {
        return Err(Error::DimensionMismatch { expected: ids.len(), got: raw.nrows() });
    }
    if raw.ncols() != names.len() {
        return Err(Error::DimensionMismatch { expected: names.len(), got: raw.ncols() });
    }
    if names.is_empty() {
        return Err(Error::InvalidArgument("feature table has no columns".into()));
    }
    let keep: Vec<usize> = (0..raw.nrows()).filter(|&i| raw.row(i).iter().all(|v| v.is_finite())).collect();
    let excluded = (0..raw.nrows()).filter(|i| !keep.contains(i)).map(|i| ids[i].clone()).collect();
    if keep.len() < 2 {
        return Err(Error::InsufficientObservations { needed: 2, have: keep.len() });
    }
    let raw = raw.select_rows(&keep);
    let mut means = Vec::new();
    let mut sds = Vec::new();
    for (j, name) in names.iter().enumerate() {
        let col: Vec<f64> = raw.column(j).iter().copied().collect();
        let (m, s) = (mean(&col), sample_sd(&col));
        if !(s > 0.0) {
            return Err(Error::ZeroVariance(name.clone()));
        }
        means.push(m);
        sds.push(s);
    }
    let z = DMatrix::from_fn(raw.nrows(), raw.ncols(), |i, j| (raw[(i, j)] - means[j]) / sds[j]);
    Ok(FeatureTable {
        ids: keep.iter().map(|&i| ids[i].clone()).collect(),
        names: names.to_vec(),
        raw,
        z,
        means,
        sds,
        excluded,
    })
}

/// One agglomeration step. Leaves are `0..n`; the cluster formed at step `m` is `n + m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    pub n: usize,
    pub merges: Vec<Merge>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

impl Dendrogram {
    /// Cluster labels `0..k` after `n - k` merges, numbered by first appearance in row
    /// order.
    pub fn cut(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.n {
            return Err(Error::InvalidArgument(format!("cannot cut {} leaves into {k} clusters", self.n)));
        }
        let mut uf = UnionFind::new(self.n);
        let mut rep: Vec<usize> = (0..self.n).collect();
        for m in &self.merges[..self.n - k] {
            let (ra, rb) = (uf.find(rep[m.a]), uf.find(rep[m.b]));
            uf.parent[rb] = ra;
            rep.push(ra);
        }
        let mut labels = vec![usize::MAX; self.n];
        let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, label) in labels.iter_mut().enumerate() {
            let root = uf.find(i);
            let next = seen.len();
            *label = *seen.entry(root).or_insert(next);
        }
        Ok(labels)
    }

    /// Within-cluster sum of squares after cutting at `k` clusters.
    pub fn wss(&self, k: usize) -> f64 {
        self.merges[..self.n.saturating_sub(k)].iter().map(|m| m.height * m.height / 2.0).sum()
    }
}

/// Ward.D2 hierarchical clustering of the rows of `x`.
pub fn hclust_ward(x: &DMatrix<f64>) -> Dendrogram {
    let n = x.nrows();
    if n < 2 {
        return Dendrogram { n, merges: Vec::new() };
    }
    let mut d2 = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (x.row(i) - x.row(j)).norm_squared();
            d2[i * n + j] = v;
            d2[j * n + i] = v;
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    // merges recorded by representative leaf indices, relabelled after sorting
    let mut raw: Vec<(usize, usize, f64)> = Vec::with_capacity(n - 1);
    let mut chain: Vec<usize> = Vec::new();
    let mut remaining = n;
    while remaining > 1 {
        if chain.is_empty() {
            chain.push((0..n).find(|&i| active[i]).unwrap());
        }
        loop {
            let a = *chain.last().unwrap();
            let prev = if chain.len() >= 2 { Some(chain[chain.len() - 2]) } else { None };
            let mut best = prev;
            let mut best_d = prev.map_or(f64::INFINITY, |p| d2[a * n + p]);
            for j in 0..n {
                if j != a && active[j] && d2[a * n + j] < best_d {
                    best_d = d2[a * n + j];
                    best = Some(j);
                }
            }
            let b = best.unwrap();
            if Some(b) == prev {
                chain.pop();
                chain.pop();
                let (lo, hi) = (a.min(b), a.max(b));
                raw.push((lo, hi, best_d.max(0.0).sqrt()));
                let (ni, nj) = (size[lo] as f64, size[hi] as f64);
                for k in 0..n {
                    if !active[k] || k == lo || k == hi {
                        continue;
                    }
                    let nk = size[k] as f64;
                    let v = ((ni + nk) * d2[lo * n + k] + (nj + nk) * d2[hi * n + k] - nk * best_d) / (ni + nj + nk);
                    d2[lo * n + k] = v;
                    d2[k * n + lo] = v;
                }
                size[lo] += size[hi];
                active[hi] = false;
                remaining -= 1;
                break;
            }
            chain.push(b);
        }
    }
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&p, &q| raw[p].2.total_cmp(&raw[q].2));
    let mut uf = UnionFind::new(n);
    let mut cluster_of_root: Vec<usize> = (0..n).collect();
    let mut sizes = vec![1usize; n];
    let mut merges = Vec::with_capacity(n - 1);
    for (m, &idx) in order.iter().enumerate() {
        let (p, q, h) = raw[idx];
        let (rp, rq) = (uf.find(p), uf.find(q));
        let (ca, cb) = (cluster_of_root[rp], cluster_of_root[rq]);
        let s = sizes[rp] + sizes[rq];
        uf.parent[rq] = rp;
        sizes[rp] = s;
        cluster_of_root[rp] = n + m;
        merges.push(Merge { a: ca.min(cb), b: ca.max(cb), height: h, size: s });
    }
    Dendrogram { n, merges }
}

/// Within-cluster sum of squares of a partition, from the raw points.
pub fn partition_wss(x: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let p = x.ncols();
    let mut sums = DMatrix::<f64>::zeros(k, p);
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for j in 0..p {
            sums[(l, j)] += x[(i, j)];
        }
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| (0..p).map(|j| (x[(i, j)] - sums[(l, j)] / counts[l] as f64).powi(2)).sum::<f64>())
        .sum()
}

/// Adjusted Rand index between two labelings of the same rows (1 when both are a single
/// cluster).
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let mut table: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, f64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    let pairs = |c: f64| c * (c - 1.0) / 2.0;
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sa: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sb: f64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(a.len() as f64);
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < f64::EPSILON {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Mean silhouette width over all rows (singleton clusters contribute 0).
pub fn mean_silhouette(dist: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let n = labels.len();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let total: f64 = (0..n)
        .map(|i| {
            let own = labels[i];
            if counts[own] <= 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in 0..n {
                sums[labels[j]] += dist[(i, j)];
            }
            let a = sums[own] / (counts[own] - 1) as f64;
            let b = (0..k).filter(|&c| c != own && counts[c] > 0).map(|c| sums[c] / counts[c] as f64).fold(f64::INFINITY, f64::min);
            if a.max(b) > 0.0 {
                (b - a) / a.max(b)
            } else {
                0.0
            }
        })
        .sum();
    total / n as f64
}

pub fn euclidean_distances(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (x.row(i) - x.row(j)).norm();
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// `k` at the point of the WSS curve farthest from the chord joining its ends, with both
/// axes rescaled to `[0, 1]`. `wss[0]` belongs to `k = 1`.
pub fn elbow(wss: &[f64]) -> usize {
    let m = wss.len();
    if m < 3 {
        return 1;
    }
    let (w0, w1) = (wss[0], wss[m - 1]);
    let span = (w0 - w1).abs().max(f64::MIN_POSITIVE);
    let pts: Vec<(f64, f64)> = (0..m).map(|i| (i as f64 / (m - 1) as f64, (wss[i] - w1) / span)).collect();
    let (x0, y0, x1, y1) = (pts[0].0, pts[0].1, pts[m - 1].0, pts[m - 1].1);
    let norm = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &(x, y)) in pts.iter().enumerate() {
        let dist = ((y1 - y0) * x - (x1 - x0) * y + x1 * y0 - y1 * x0).abs() / norm;
        if dist > best.1 {
            best = (i, dist);
        }
    }
    best.0 + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSelection {
    pub k_max: usize,
    /// Index `k - 1`.
    pub wss: Vec<f64>,
    /// Index `k - 1`; `None` at `k = 1`.
    pub silhouette: Vec<Option<f64>>,
    pub gap: Vec<f64>,
    pub gap_se: Vec<f64>,
    pub elbow_k: usize,
    pub silhouette_k: usize,
    pub gap_k: usize,
    pub reference_sets: usize,
    pub seed: u64,
}

impl KSelection {
    pub fn agree(&self) -> bool {
        self.elbow_k == self.silhouette_k && self.silhouette_k == self.gap_k
    }

    pub fn note(&self) -> String {
        if self.agree() {
            format!("all criteria choose k = {}", self.elbow_k)
        } else {
            let ks = [self.elbow_k, self.silhouette_k, self.gap_k];
            format!(
                "criteria disagree (elbow {}, silhouette {}, gap {}); inconclusive between {} and {}",
                self.elbow_k,
                self.silhouette_k,
                self.gap_k,
                ks.iter().min().unwrap(),
                ks.iter().max().unwrap()
            )
        }
    }
}

/// Elbow, silhouette and gap criteria for `k = 1..=k_max`. Gap reference sets are drawn
/// uniformly over each feature's observed range and clustered with the same linkage.
pub fn choose_k(x: &DMatrix<f64>, dendrogram: &Dendrogram, k_max: usize, b: usize, seed: u64) -> Result<KSelection> {
    let n = x.nrows();
    if k_max < 2 || k_max + 1 > n {
        return Err(Error::InvalidArgument(format!("k_max must lie in 2..={} for {n} rows", n.saturating_sub(1))));
    }
    if b < 50 {
        return Err(Error::InvalidArgument(format!("gap statistic needs at least 50 reference sets, got {b}")));
    }
    let wss: Vec<f64> = (1..=k_max).map(|k| dendrogram.wss(k)).collect();
    let dist = euclidean_distances(x);
    let mut silhouette = vec![None];
    for k in 2..=k_max {
        silhouette.push(Some(mean_silhouette(&dist, &dendrogram.cut(k)?)));
    }
    let silhouette_k = (2..=k_max)
        .max_by(|&p, &q| silhouette[p - 1].unwrap().total_cmp(&silhouette[q - 1].unwrap()).then(q.cmp(&p)))
        .unwrap();

    let p = x.ncols();
    let lo: Vec<f64> = (0..p).map(|j| x.column(j).min()).collect();
    let hi: Vec<f64> = (0..p).map(|j| x.column(j).max()).collect();
    let reference: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut r = rng::substream(seed, rep as u64);
            let sample = DMatrix::from_fn(n, p, |_, j| if hi[j] > lo[j] { r.random_range(lo[j]..hi[j]) } else { lo[j] });
            let d = hclust_ward(&sample);
            (1..=k_max).map(|k| d.wss(k).ln()).collect()
        })
        .collect();
    let mut gap = Vec::with_capacity(k_max);
    let mut gap_se = Vec::with_capacity(k_max);
    for k in 0..k_max {
        let vals: Vec<f64> = reference.iter().map(|v| v[k]).collect();
        let m = mean(&vals);
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / b as f64).sqrt();
        gap.push(m - wss[k].ln());
        gap_se.push(sd * (1.0 + 1.0 / b as f64).sqrt());
    }
    let gap_k = (0..k_max - 1).find(|&k| gap[k] >= gap[k + 1] - gap_se[k + 1]).map_or(k_max, |k| k + 1);
    Ok(KSelection {
        k_max,
        elbow_k: elbow(&wss),
        wss,
        silhouette,
        silhouette_k,
        gap,
        gap_se,
        gap_k,
        reference_sets: b,
        seed,
    })
}

/// One term of the ordering composite: a feature, optionally logged, with a sign.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeTerm {
    pub column: String,
    pub sign: f64,
    pub log: bool,
}

impl CompositeTerm {
    pub fn new(column: &str, sign: f64, log: bool) -> Self {
        Self { column: column.into(), sign, log }
    }
}

/// Composite for the county feature layout: higher means less vulnerable.
pub fn county_composite() -> Vec<CompositeTerm> {
    vec![
        CompositeTerm::new("edu_attain", 1.0, false),
        CompositeTerm::new("median_earnings", 1.0, false),
        CompositeTerm::new("female_lfp", 1.0, false),
        CompositeTerm::new("diversity_index", 1.0, false),
        CompositeTerm::new("rural_urban", -1.0, false),
        CompositeTerm::new("population", 1.0, true),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypeProfile {
    pub label: usize,
    pub size: usize,
    pub composite: f64,
    /// Raw feature means, in table column order.
    pub means: Vec<f64>,
    /// Means of passive descriptor columns (NaN cells ignored).
    pub descriptor_means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Typology {
    pub k: usize,
    pub ids: Vec<String>,
    /// `1..=k`, Type 1 having the highest composite.
    pub labels: Vec<usize>,
    pub feature_names: Vec<String>,
    pub descriptor_names: Vec<String>,
    pub profiles: Vec<TypeProfile>,
}

impl Typology {
    pub fn sizes(&self) -> Vec<usize> {
        self.profiles.iter().map(|p| p.size).collect()
    }

    pub fn groups(&self) -> BTreeMap<String, String> {
        self.ids.iter().zip(&self.labels).map(|(id, l)| (id.clone(), format!("Type {l}"))).collect()
    }
}

/// Cut at `k`, order clusters by descending mean composite and profile them.
/// `descriptors` holds passive columns aligned with the table rows.
pub fn cut_and_label(
    dendrogram: &Dendrogram,
    k: usize,
    table: &FeatureTable,
    composite: &[CompositeTerm],
    descriptors: &[(String, Vec<f64>)],
) -> Result<Typology> {
    let n = table.len();
    for (name, col) in descriptors {
        if col.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: col.len() }).map_err(|e| {
                Error::InvalidArgument(format!("descriptor {name}: {e}"))
            });
        }
    }
    let raw_labels = dendrogram.cut(k)?;
    let mut score = vec![0.0; n];
    for term in composite {
        let j = table.column(&term.column)?;
        let vals: Vec<f64> = table
            .raw
            .column(j)
            .iter()
            .map(|&v| {
                if !term.log {
                    Ok(v)
                } else if v > 0.0 {
                    Ok(v.ln())
                } else {
                    Err(Error::InvalidArgument(format!("log of non-positive {} value {v}", term.column)))
                }
            })
            .collect::<Result<_>>()?;
        let (m, s) = (mean(&vals), sample_sd(&vals));
        if !(s > 0.0) {
            return Err(Error::ZeroVariance(term.column.clone()));
        }
        for (sc, v) in score.iter_mut().zip(vals) {
            *sc += term.sign * (v - m) / s / composite.len() as f64;
        }
    }
    let mut cluster_score = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in raw_labels.iter().enumerate() {
        cluster_score[l] += score[i];
        counts[l] += 1;
    }
    for (s, &c) in cluster_score.iter_mut().zip(&counts) {
        *s /= c as f64;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| cluster_score[b].total_cmp(&cluster_score[a]));
    let mut rank = vec![0; k];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r + 1;
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&l| rank[l]).collect();
    let profiles = order
        .iter()
        .enumerate()
        .map(|(r, &c)| {
            let members: Vec<usize> = (0..n).filter(|&i| raw_labels[i] == c).collect();
            let means = (0..table.names.len())
                .map(|j| members.iter().map(|&i| table.raw[(i, j)]).sum::<f64>() / members.len() as f64)
                .collect();
            let descriptor_means = descriptors
                .iter()
                .map(|(_, col)| {
                    let vals: Vec<f64> = members.iter().map(|&i| col[i]).filter(|v| v.is_finite()).collect();
                    if vals.is_empty() {
                        f64::NAN
                    } else {
                        mean(&vals)
                    }
                })
                .collect();
            TypeProfile { label: r + 1, size: members.len(), composite: cluster_score[c], means, descriptor_means }
        })
        .collect();
    Ok(Typology {
        k,
        ids: table.ids.clone(),
        labels,
        feature_names: table.names.clone(),
        descriptor_names: descriptors.iter().map(|(n, _)| n.clone()).collect(),
        profiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand_distr::StandardNormal;

    fn table(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{i:03}")).collect()
    }

    #[test]
    fn ari_known_values() {
        let a = [0, 0, 1, 1, 2, 2];
        assert_relative_eq!(adjusted_rand_index(&a, &[5, 5, 3, 3, 9, 9]).unwrap(), 1.0);
        // Hand-computed: index 2, expected 6*3/15 = 1.2, max 4.5.
        let ari = adjusted_rand_index(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 2, 2]).unwrap();
        assert_relative_eq!(ari, (2.0 - 1.2) / (4.5 - 1.2), epsilon = 1e-12);
        assert!(adjusted_rand_index(&a, &[0, 1]).is_err());
    }

    /// Blobs centred on scaled unit vectors, so centres are `sep` apart pairwise.
    fn blobs(k: usize, per: usize, sep: f64, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
        let mut r = rng::seeded(seed);
        let x = DMatrix::from_fn(k * per, k, |i, j| {
            let centre = if i / per == j { sep / 2f64.sqrt() } else { 0.0 };
            centre + 0.1 * r.sample::<f64, _>(StandardNormal)
        });
        (x, (0..k * per).map(|i| i / per).collect())
    }

    #[test]
    fn two_point_zscores() {
        let t = standardize(&ids(2), &["a".into()], &table(&[&[1.0], &[3.0]])).unwrap();
        assert_relative_eq!(t.z[(0, 0)], -std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_relative_eq!(t.z[(1, 0)], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        let again = standardize(&t.ids, &t.names, &t.z).unwrap();
        assert_relative_eq!(again.z, t.z, epsilon = 1e-12);
        assert_relative_eq!(t.inverse(&t.z), t.raw, epsilon = 1e-12);
    }

    #[test]
    fn standardize_rejects_constant_and_drops_missing() {
        let names = vec!["a".to_string(), "b".to_string()];
        let err = standardize(&ids(3), &names, &table(&[&[1.0, 2.0], &[2.0, 2.0], &[3.0, 2.0]])).unwrap_err();
        assert_eq!(err, Error::ZeroVariance("b".into()));
        let t = standardize(&ids(3), &names, &table(&[&[1.0, 2.0], &[f64::NAN, 2.0], &[3.0, 5.0]])).unwrap();
        assert_eq!(t.excluded, vec!["001".to_string()]);
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn small_dendrograms() {
        let d = hclust_ward(&table(&[&[0.0], &[3.0]]));
        assert_eq!(d.merges, vec![Merge { a: 0, b: 1, height: 3.0, size: 2 }]);
        let d = hclust_ward(&table(&[&[0.0], &[1.0], &[10.0]]));
        assert_eq!((d.merges[0].a, d.merges[0].b), (0, 1));
        assert_eq!((d.merges[1].a, d.merges[1].b), (2, 3));
        assert_eq!(d.cut(2).unwrap(), vec![0, 0, 1]);
        assert_eq!(d.wss(3), 0.0);
    }

    #[test]
    fn ward_wss_matches_brute_force() {
        for seed in 0..100 {
            let mut r = rng::seeded(seed);
            let x = DMatrix::from_fn(20, 3, |_, _| r.sample::<f64, _>(StandardNormal));
            let d = hclust_ward(&x);
            assert!(d.merges.windows(2).all(|w| w[0].height <= w[1].height));
            for k in 1..=20 {
                let labels = d.cut(k).unwrap();
                assert_eq!(labels.iter().max().unwrap() + 1, k);
                let brute = partition_wss(&x, &labels);
                assert!((d.wss(k) - brute).abs() <= 1e-8 * brute.max(1e-300), "seed {seed} k {k}");
            }
        }
    }

    #[test]
    fn cuts_are_nested() {
        let mut r = rng::seeded(3);
        let x = DMatrix::from_fn(15, 2, |_, _| r.sample::<f64, _>(StandardNormal));
        let d = hclust_ward(&x);
        for k in 2..=15 {
            let fine = d.cut(k).unwrap();
            let coarse = d.cut(k - 1).unwrap();
            for i in 0..15 {
                for j in 0..15 {
                    if fine[i] == fine[j] {
                        assert_eq!(coarse[i], coarse[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn planted_blobs_recovered() {
        let (x, truth) = blobs(3, 15, 10.0, 4);
        let d = hclust_ward(&x);
        let sel = choose_k(&x, &d, 6, 50, 9).unwrap();
        assert_eq!((sel.elbow_k, sel.silhouette_k, sel.gap_k), (3, 3, 3), "{sel:?}");
        assert!(sel.agree());
        let labels = d.cut(3).unwrap();
        for i in 0..x.nrows() {
            for j in 0..x.nrows() {
                assert_eq!(labels[i] == labels[j], truth[i] == truth[j]);
            }
        }
        let (x2, _) = blobs(2, 10, 10.0, 5);
        let d2 = hclust_ward(&x2);
        let s = mean_silhouette(&euclidean_distances(&x2), &d2.cut(2).unwrap());
        assert!(s > 0.9);
    }

    #[test]
    fn labels_follow_composite() {
        let names: Vec<String> = ["edu", "rural"].iter().map(|s| s.to_string()).collect();
        let raw = table(&[&[10.0, 9.0], &[11.0, 9.0], &[50.0, 1.0], &[51.0, 1.0], &[30.0, 5.0], &[31.0, 5.0]]);
        let t = standardize(&ids(6), &names, &raw).unwrap();
        let d = hclust_ward(&t.z);
        let comp = vec![CompositeTerm::new("edu", 1.0, false), CompositeTerm::new("rural", -1.0, false)];
        let desc = vec![("party".to_string(), vec![0.1, 0.2, f64::NAN, 0.4, 0.5, 0.6])];
        let ty = cut_and_label(&d, 3, &t, &comp, &desc).unwrap();
        assert_eq!(ty.labels, vec![3, 3, 1, 1, 2, 2]);
        assert_eq!(ty.sizes(), vec![2, 2, 2]);
        assert_relative_eq!(ty.profiles[0].means[0], 50.5);
        assert_relative_eq!(ty.profiles[0].descriptor_means[0], 0.4);
        assert!(ty.profiles[0].composite > ty.profiles[1].composite);
        assert_eq!(ty.groups()["002"], "Type 1");
        assert!(matches!(
            cut_and_label(&d, 3, &t, &[CompositeTerm::new("x", 1.0, false)], &[]),
            Err(Error::UnknownVariable(_))
        ));
    }

    #[test]
    fn elbow_of_a_kink() {
        assert_eq!(elbow(&[100.0, 50.0, 5.0, 4.0, 3.0, 2.0]), 3);
    }

    proptest! {
        #[test]
        fn permutation_invariant_partition(seed in 0u64..500, shift in 1usize..19) {
            let mut r = rng::seeded(seed);
            let x = DMatrix::from_fn(19, 2, |_, _| r.sample::<f64, _>(StandardNormal));
            let perm: Vec<usize> = (0..19).map(|i| (i + shift) % 19).collect();
            let xp = x.select_rows(&perm);
            let (a, b) = (hclust_ward(&x).cut(4).unwrap(), hclust_ward(&xp).cut(4).unwrap());
            for i in 0..19 {
                for j in 0..19 {
                    prop_assert_eq!(a[perm[i]] == a[perm[j]], b[i] == b[j]);
                }
            }
        }

        #[test]
        fn silhouettes_bounded(seed in 0u64..200, k in 2usize..6) {
            let mut r = rng::seeded(seed);
            let x = DMatrix::from_fn(12, 2, |_, _| r.sample::<f64, _>(StandardNormal));
            let s = mean_silhouette(&euclidean_distances(&x), &hclust_ward(&x).cut(k).unwrap());
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
