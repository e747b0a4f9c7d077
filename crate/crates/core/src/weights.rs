//! Contiguity graphs and the row-normalized spatial weight matrix.
//!
//! `W = D^{-1} A` for a symmetric 0/1 adjacency `A` with degree matrix `D`. It is
//! similar to the symmetric `S = D^{-1/2} A D^{-1/2}`, so every matrix function of `W`
//! can be written `f(W) = D^{-1/2} Q f(Λ) Q' D^{1/2}` with `S = Q Λ Q'`. The
//! eigendecomposition is computed once at construction and reused for log-determinants,
//! traces and solves with `I - ρW`. Isolated nodes keep a zero row (degree is treated
//! as 1 in the similarity transform, contributing eigenvalue 0).

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// Undirected graph over FIPS-like identifiers. Node ids are kept sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyGraph {
    nodes: Vec<String>,
    edges: BTreeSet<(usize, usize)>,
}

/// Result of reading an adjacency list.
#[derive(Debug, Clone)]
pub struct ParsedAdjacency {
    pub graph: AdjacencyGraph,
    /// Pairs dropped because an endpoint was outside the supplied universe.
    pub dropped_pairs: usize,
    /// Self-pairs removed.
    pub self_pairs: usize,
}

/// Zero-pad a numeric FIPS code to width 5.
pub fn normalize_fips(raw: &str) -> Option<String> {
    let s = raw.trim().trim_matches('"');
    if s.is_empty() || !s.chars().all(|c| c.is_ascii_digit()) || s.len() > 5 {
        return None;
    }
    Some(format!("{s:0>5}"))
}

impl AdjacencyGraph {
    pub fn from_edges<S: AsRef<str>>(nodes: &[S], pairs: &[(S, S)]) -> Result<Self> {
        let node_set: BTreeSet<String> = nodes
            .iter()
            .map(|s| s.as_ref().to_string())
            .chain(pairs.iter().flat_map(|(a, b)| [a.as_ref().to_string(), b.as_ref().to_string()]))
            .collect();
        let nodes: Vec<String> = node_set.into_iter().collect();
        let idx: BTreeMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut edges = BTreeSet::new();
        for (a, b) in pairs {
            let (i, j) = (idx[a.as_ref()], idx[b.as_ref()]);
            if i != j {
                edges.insert((i.min(j), i.max(j)));
            }
        }
        Ok(Self { nodes, edges })
    }

    /// Parse `fips_a,fips_b` lines. A first line that does not parse as two codes is
    /// treated as a header. When `universe` is given, pairs touching nodes outside it are
    /// dropped and counted.
    pub fn parse<'a>(
        lines: impl IntoIterator<Item = &'a str>,
        universe: Option<&BTreeSet<String>>,
    ) -> Result<ParsedAdjacency> {
        let mut pairs = Vec::new();
        let mut dropped = 0;
        let mut self_pairs = 0;
        let mut nodes = BTreeSet::new();
        for (lineno, line) in lines.into_iter().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let (a, b) = match (fields.next(), fields.next()) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::MalformedFips { line: lineno + 1, code: line.to_string() });
                }
            };
            let (na, nb) = (normalize_fips(a), normalize_fips(b));
            let (na, nb) = match (na, nb) {
                (Some(x), Some(y)) => (x, y),
                (None, _) | (_, None) if lineno == 0 && !a.trim().chars().any(|c| c.is_ascii_digit()) => {
                    continue;
                }
                (None, _) => return Err(Error::MalformedFips { line: lineno + 1, code: a.to_string() }),
                (_, None) => return Err(Error::MalformedFips { line: lineno + 1, code: b.to_string() }),
            };
            if let Some(u) = universe {
                if !u.contains(&na) || !u.contains(&nb) {
                    dropped += 1;
                    continue;
                }
            }
            nodes.insert(na.clone());
            nodes.insert(nb.clone());
            if na == nb {
                self_pairs += 1;
                continue;
            }
            pairs.push((na, nb));
        }
        let nodes: Vec<String> = nodes.into_iter().collect();
        let graph = Self::from_edges(&nodes, &pairs)?;
        Ok(ParsedAdjacency { graph, dropped_pairs: dropped, self_pairs })
    }

    /// Torus lattice on `rows x cols` nodes; every node has degree 4 when both sides
    /// are at least 3. Node ids are zero-padded indices.
    pub fn torus(rows: usize, cols: usize) -> Self {
        let id = |r: usize, c: usize| r * cols + c;
        let nodes: Vec<String> = (0..rows * cols).map(|i| format!("{i:05}")).collect();
        let mut edges = BTreeSet::new();
        for r in 0..rows {
            for c in 0..cols {
                let a = id(r, c);
                for b in [id((r + 1) % rows, c), id(r, (c + 1) % cols)] {
                    if a != b {
                        edges.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
        Self { nodes, edges }
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.edges.iter().map(|&(i, j)| (self.nodes[i].as_str(), self.nodes[j].as_str()))
    }

    pub fn degrees(&self) -> BTreeMap<&str, usize> {
        let mut deg: BTreeMap<&str, usize> = self.nodes.iter().map(|n| (n.as_str(), 0)).collect();
        for (a, b) in self.edges() {
            *deg.get_mut(a).unwrap() += 1;
            *deg.get_mut(b).unwrap() += 1;
        }
        deg
    }

    /// Connected components by union-find, as sorted lists of node ids.
    pub fn components(&self) -> Vec<Vec<String>> {
        let n = self.nodes.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(i, j) in &self.edges {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
        let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for i in 0..n {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(self.nodes[i].clone());
        }
        groups.into_values().collect()
    }

    /// Row-normalized weights in the given entity order. Every graph node must appear
    /// in `order`; entities absent from the graph become isolated.
    pub fn row_normalize(&self, order: &[String]) -> Result<SpatialWeights> {
        let pos: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, e)| (e.as_str(), i)).collect();
        if pos.len() != order.len() {
            return Err(Error::InvalidArgument("duplicate entity in weight order".into()));
        }
        let mut neighbors = vec![Vec::new(); order.len()];
        for (a, b) in self.edges() {
            let (Some(&i), Some(&j)) = (pos.get(a), pos.get(b)) else {
                let missing = if pos.contains_key(a) { b } else { a };
                return Err(Error::InvalidArgument(format!("graph node {missing} not in entity order")));
            };
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        Ok(SpatialWeights::from_neighbors(order.to_vec(), neighbors))
    }
}

/// Sparse row-normalized `W` with its cached spectral decomposition.
#[derive(Debug, Clone)]
pub struct SpatialWeights {
    ids: Vec<String>,
    neighbors: Vec<Vec<usize>>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
    /// `sqrt(deg)`, with isolated nodes at 1.
    sqrt_deg: Vec<f64>,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
    /// `(1' D^{-1/2} q_k)(q_k' D^{1/2} 1)` per eigenpair; `1' f(W) 1 = Σ c_k f(λ_k)`.
    total_weights: Vec<f64>,
    frobenius_cache: OnceLock<DMatrix<f64>>,
}

impl SpatialWeights {
    fn from_neighbors(ids: Vec<String>, neighbors: Vec<Vec<usize>>) -> Self {
        let n = ids.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for nb in &neighbors {
            let w = if nb.is_empty() { 0.0 } else { 1.0 / nb.len() as f64 };
            for &j in nb {
                col_idx.push(j);
                vals.push(w);
            }
            row_ptr.push(col_idx.len());
        }
        let sqrt_deg: Vec<f64> =
            neighbors.iter().map(|nb| if nb.is_empty() { 1.0 } else { (nb.len() as f64).sqrt() }).collect();
        let mut sym = DMatrix::<f64>::zeros(n, n);
        for (i, nb) in neighbors.iter().enumerate() {
            for &j in nb {
                sym[(i, j)] = 1.0 / (sqrt_deg[i] * sqrt_deg[j]);
            }
        }
        let eig = SymmetricEigen::new(sym);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let eigenvectors = eig.eigenvectors.select_columns(&order);
        let left = DVector::from_iterator(n, sqrt_deg.iter().map(|d| 1.0 / d));
        let right = DVector::from_column_slice(&sqrt_deg);
        let a = eigenvectors.tr_mul(&left);
        let b = eigenvectors.tr_mul(&right);
        let total_weights = (0..n).map(|k| a[k] * b[k]).collect();
        Self {
            ids,
            neighbors,
            row_ptr,
            col_idx,
            vals,
            sqrt_deg,
            eigenvalues,
            eigenvectors,
            total_weights,
            frobenius_cache: OnceLock::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.vals[self.row_ptr[i]..self.row_ptr[i + 1]].iter().sum()).collect()
    }

    pub fn n_isolated(&self) -> usize {
        self.neighbors.iter().filter(|n| n.is_empty()).count()
    }

    /// Re-normalized weights on a subset of entities (in the given order).
    pub fn restrict(&self, keep: &[String]) -> Result<SpatialWeights> {
        let pos: BTreeMap<&str, usize> = self.ids.iter().enumerate().map(|(i, e)| (e.as_str(), i)).collect();
        let new_pos: BTreeMap<&str, usize> = keep.iter().enumerate().map(|(i, e)| (e.as_str(), i)).collect();
        let mut neighbors = Vec::with_capacity(keep.len());
        for id in keep {
            let &old = pos.get(id.as_str()).ok_or_else(|| Error::UnknownVariable(id.clone()))?;
            let nb: Vec<usize> = self.neighbors[old]
                .iter()
                .filter_map(|&j| new_pos.get(self.ids[j].as_str()).copied())
                .collect();
            neighbors.push(nb);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        Ok(SpatialWeights::from_neighbors(keep.to_vec(), neighbors))
    }

    /// Sparse product `W x`.
    pub fn spmv(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: x.len() });
        }
        Ok((0..self.len())
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1]).map(|p| self.vals[p] * x[self.col_idx[p]]).sum()
            })
            .collect())
    }

    /// Eigenvalues of `W`, ascending.
    pub fn spectrum(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues[self.len() - 1]
    }

    /// Open interval `(1/λ_min, 1/λ_max)` on which `I - ρW` is nonsingular with
    /// positive determinant.
    pub fn feasible_interval(&self) -> (f64, f64) {
        let lo = if self.lambda_min() < 0.0 { 1.0 / self.lambda_min() } else { f64::NEG_INFINITY };
        let hi = if self.lambda_max() > 0.0 { 1.0 / self.lambda_max() } else { f64::INFINITY };
        (lo, hi)
    }

    /// `ln |I - ρW| = Σ ln(1 - ρ λ_i)`.
    pub fn log_det(&self, rho: f64) -> f64 {
        self.eigenvalues.iter().map(|&l| (1.0 - rho * l).ln()).sum()
    }

    /// `Σ f(λ_i) = tr f(W)`.
    pub fn trace_fn(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.eigenvalues.iter().map(|&l| f(l)).sum()
    }

    /// `1' f(W) 1`.
    pub fn total_fn(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.eigenvalues.iter().zip(&self.total_weights).map(|(&l, &c)| c * f(l)).sum()
    }

    /// `tr(f(W)' g(W))`. Builds an `N x N` cache on first use.
    pub fn trace_product(&self, f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64) -> f64 {
        let h = self.frobenius_cache.get_or_init(|| {
            let n = self.len();
            let d0 = self.sqrt_deg[0];
            if self.sqrt_deg.iter().all(|&d| d == d0) {
                // regular graph: W is symmetric and the cache is the identity
                return DMatrix::identity(n, n);
            }
            let q = &self.eigenvectors;
            let mut lower = q.clone();
            let mut upper = q.clone();
            for (i, &d) in self.sqrt_deg.iter().enumerate() {
                lower.row_mut(i).scale_mut(1.0 / d);
                upper.row_mut(i).scale_mut(d);
            }
            let p = lower.tr_mul(&lower);
            let r = upper.tr_mul(&upper);
            p.component_mul(&r)
        });
        let fv: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let gv: Vec<f64> = self.eigenvalues.iter().map(|&l| g(l)).collect();
        let mut total = 0.0;
        for i in 0..self.len() {
            let mut row = 0.0;
            for j in 0..self.len() {
                row += h[(i, j)] * gv[j];
            }
            total += fv[i] * row;
        }
        total
    }

    /// `f(W) v`.
    pub fn apply_fn(&self, f: impl Fn(f64) -> f64, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: v.len() });
        }
        let scaled = DVector::from_iterator(self.len(), v.iter().zip(&self.sqrt_deg).map(|(x, d)| x * d));
        let mut coef = self.eigenvectors.tr_mul(&scaled);
        for (c, &l) in coef.iter_mut().zip(&self.eigenvalues) {
            *c *= f(l);
        }
        let out = &self.eigenvectors * coef;
        Ok(out.iter().zip(&self.sqrt_deg).map(|(x, d)| x / d).collect())
    }

    /// Solve `(I - ρW) x = v` through the spectrum with one step of iterative refinement.
    pub fn solve_shifted(&self, rho: f64, v: &[f64]) -> Result<Vec<f64>> {
        let (lo, hi) = self.feasible_interval();
        if rho <= lo || rho >= hi {
            return Err(Error::SingularOperator(rho));
        }
        let inv = |l: f64| 1.0 / (1.0 - rho * l);
        let mut x = self.apply_fn(inv, v)?;
        let wx = self.spmv(&x)?;
        let resid: Vec<f64> = (0..v.len()).map(|i| v[i] - (x[i] - rho * wx[i])).collect();
        let corr = self.apply_fn(inv, &resid)?;
        for (xi, ci) in x.iter_mut().zip(corr) {
            *xi += ci;
        }
        Ok(x)
    }

    /// Dense copy of `W`.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.col_idx[p])] = self.vals[p];
            }
        }
        m
    }

    /// Dense `f(W)`.
    pub fn dense_fn(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let n = self.len();
        let fl = DVector::from_iterator(n, self.eigenvalues.iter().map(|&l| f(l)));
        let left = DMatrix::from_diagonal(&DVector::from_iterator(n, self.sqrt_deg.iter().map(|d| 1.0 / d)));
        let right = DMatrix::from_diagonal(&DVector::from_column_slice(&self.sqrt_deg));
        let q = &self.eigenvectors;
        left * q * DMatrix::from_diagonal(&fl) * q.transpose() * right
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::lu_log_det;
    use crate::rng;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn ids(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn path() -> SpatialWeights {
        let g = AdjacencyGraph::from_edges(&["A", "B", "C"], &[("A", "B"), ("B", "C")]).unwrap();
        g.row_normalize(&ids(&["A", "B", "C"])).unwrap()
    }

    pub(crate) fn random_graph(n: usize, p: f64, seed: u64) -> SpatialWeights {
        let mut r = rng::seeded(seed);
        let nodes: Vec<String> = (0..n).map(|i| format!("{i:05}")).collect();
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if r.random::<f64>() < p {
                    pairs.push((nodes[i].clone(), nodes[j].clone()));
                }
            }
        }
        AdjacencyGraph::from_edges(&nodes, &pairs).unwrap().row_normalize(&nodes).unwrap()
    }

    #[test]
    fn parse_dedupes_and_drops_self_loops() {
        let lines = ["fips_a,fips_b", "1001,1003", "01003,01001", "1001,1001"];
        let parsed = AdjacencyGraph::parse(lines, None).unwrap();
        assert_eq!(parsed.graph.n_edges(), 1);
        assert_eq!(parsed.self_pairs, 1);
        assert_eq!(parsed.graph.nodes(), &ids(&["01001", "01003"]));
    }

    #[test]
    fn parse_rejects_malformed_with_line() {
        let lines = ["01001,01003", "01001,123456"];
        assert_eq!(
            AdjacencyGraph::parse(lines, None).unwrap_err(),
            Error::MalformedFips { line: 2, code: "123456".into() }
        );
        let u: BTreeSet<String> = ["01001".to_string()].into();
        let parsed = AdjacencyGraph::parse(["01001,01003"], Some(&u)).unwrap();
        assert_eq!(parsed.dropped_pairs, 1);
    }

    #[test]
    fn path_degrees_and_rows() {
        let g = AdjacencyGraph::from_edges(&["A", "B", "C"], &[("A", "B"), ("B", "C")]).unwrap();
        let deg: Vec<usize> = g.degrees().values().copied().collect();
        assert_eq!(deg, vec![1, 2, 1]);
        let w = path().to_dense();
        assert_eq!(w.row(1).iter().copied().collect::<Vec<_>>(), vec![0.5, 0.0, 0.5]);
        assert_eq!(path().spmv(&[1.0, 0.0, 0.0]).unwrap(), vec![0.0, 0.5, 0.0]);
        assert!(path().spmv(&[1.0]).is_err());
    }

    #[test]
    fn complete_graph_spectrum() {
        let g = AdjacencyGraph::from_edges(&["A", "B", "C"], &[("A", "B"), ("B", "C"), ("A", "C")]).unwrap();
        let w = g.row_normalize(&ids(&["A", "B", "C"])).unwrap();
        let s = w.spectrum();
        assert_relative_eq!(s[0], -0.5, epsilon = 1e-12);
        assert_relative_eq!(s[1], -0.5, epsilon = 1e-12);
        assert_relative_eq!(s[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn isolated_node_keeps_zero_row() {
        let g = AdjacencyGraph::from_edges(&["A", "B"], &[("A", "B")]).unwrap();
        let w = g.row_normalize(&ids(&["A", "B", "Z"])).unwrap();
        assert_eq!(w.row_sums(), vec![1.0, 1.0, 0.0]);
        assert_eq!(w.n_isolated(), 1);
        assert!(w.spectrum().iter().any(|l| l.abs() < 1e-12));
        assert_eq!(w.spmv(&[1.0, 1.0, 1.0]).unwrap(), vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn torus_is_regular() {
        let g = AdjacencyGraph::torus(4, 5);
        assert!(g.degrees().values().all(|&d| d == 4));
        assert_eq!(g.components().len(), 1);
    }

    #[test]
    fn log_det_matches_dense_lu() {
        let w = random_graph(50, 0.1, 11);
        for &rho in &[-0.8, -0.2, 0.3, 0.9] {
            let dense = DMatrix::identity(50, 50) - w.to_dense() * rho;
            let (lu, sign) = lu_log_det(&dense);
            assert_eq!(sign, 1.0);
            assert!((w.log_det(rho) - lu).abs() < 1e-8);
        }
    }

    #[test]
    fn matrix_functions_match_dense() {
        let w = random_graph(30, 0.15, 3);
        let rho = 0.6;
        let a = DMatrix::identity(30, 30) - w.to_dense() * rho;
        let inv = a.clone().try_inverse().unwrap();
        let g = w.to_dense() * &inv;
        assert_relative_eq!(w.trace_fn(|l| 1.0 / (1.0 - rho * l)), inv.trace(), epsilon = 1e-9);
        assert_relative_eq!(w.total_fn(|l| 1.0 / (1.0 - rho * l)), inv.sum(), epsilon = 1e-9);
        let gl = |l: f64| l / (1.0 - rho * l);
        assert_relative_eq!(w.trace_product(gl, gl), (g.transpose() * &g).trace(), epsilon = 1e-9);
        let v: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let x = w.solve_shifted(rho, &v).unwrap();
        let back = &a * DVector::from_vec(x);
        for i in 0..30 {
            assert!((back[i] - v[i]).abs() < 1e-12);
        }
        assert!(w.solve_shifted(1.0, &v).is_err());
    }

    #[test]
    fn restrict_renormalizes() {
        let w = path().restrict(&ids(&["A", "B"])).unwrap();
        assert_eq!(w.row_sums(), vec![1.0, 1.0]);
    }

    #[test]
    fn invariants_on_random_graphs() {
        for seed in 0..5 {
            let w = random_graph(40, 0.08, seed);
            let d = w.to_dense();
            for (i, s) in w.row_sums().into_iter().enumerate() {
                if !w.neighbors(i).is_empty() {
                    assert!((s - 1.0).abs() < 1e-12);
                }
                assert_eq!(d[(i, i)], 0.0);
                for j in 0..40 {
                    assert_eq!(d[(i, j)] != 0.0, d[(j, i)] != 0.0);
                }
            }
            assert!(w.spectrum().iter().all(|l| l.abs() <= 1.0 + 1e-12));
            assert!((w.lambda_max() - 1.0).abs() < 1e-12);
            let (lo, hi) = w.feasible_interval();
            assert!(lo < hi);
        }
    }
}
