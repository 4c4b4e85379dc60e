//! Clustered undirected population networks.
//!
//! Nodes carry global ids `0..N`. Cluster `i` owns the contiguous block
//! `offset(i)..offset(i) + size(i)`; inside a [`ClusterGraph`] nodes use local
//! ids `0..size`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Power iteration cap used by [`spectral_radius`].
pub const POWER_ITERATION_CAP: usize = 10_000;
pub const DEFAULT_SPECTRAL_TOL: f64 = 1e-8;

/// Simple undirected graph on local node ids `0..size`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterGraph {
    size: usize,
    /// Sorted `(a, b)` pairs with `a < b`.
    edges: Vec<(usize, usize)>,
    /// Sorted neighbor lists.
    adjacency: Vec<Vec<usize>>,
}

impl ClusterGraph {
    pub fn empty(size: usize) -> Self {
        ClusterGraph {
            size,
            edges: Vec::new(),
            adjacency: vec![Vec::new(); size],
        }
    }

    /// Builds a graph from an arbitrary edge list. Pairs may come in either
    /// orientation; self-loops, out-of-range ids and duplicates are rejected.
    pub fn from_edges(size: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut norm = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a == b {
                return Err(Error::Input(format!("self-loop on node {a}")));
            }
            if a >= size || b >= size {
                return Err(Error::Input(format!(
                    "edge ({a}, {b}) out of range for {size} nodes"
                )));
            }
            norm.push((a.min(b), a.max(b)));
        }
        norm.sort_unstable();
        if let Some(w) = norm.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Input(format!(
                "duplicate edge ({}, {})",
                w[0].0, w[0].1
            )));
        }
        Ok(Self::from_sorted_unique(size, norm))
    }

    pub(crate) fn from_sorted_unique(size: usize, edges: Vec<(usize, usize)>) -> Self {
        let mut adjacency = vec![Vec::new(); size];
        for &(a, b) in &edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for nb in &mut adjacency {
            nb.sort_unstable();
        }
        ClusterGraph {
            size,
            edges,
            adjacency,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency.iter().map(Vec::len).collect()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        a < self.size && self.adjacency[a].binary_search(&b).is_ok()
    }

    /// Connected components as sorted node lists, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut label = vec![usize::MAX; self.size];
        let mut out = Vec::new();
        for start in 0..self.size {
            if label[start] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut comp = vec![start];
            label[start] = id;
            let mut head = 0;
            while head < comp.len() {
                let v = comp[head];
                head += 1;
                for &w in &self.adjacency[v] {
                    if label[w] == usize::MAX {
                        label[w] = id;
                        comp.push(w);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Dense 0/1 adjacency, row-major. Intended for small graphs and oracles.
    pub fn dense_adjacency(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.size]; self.size];
        for &(a, b) in &self.edges {
            m[a][b] = 1.0;
            m[b][a] = 1.0;
        }
        m
    }

    /// Full scan of the structural invariants. Returns a description of the
    /// first violation found.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if self.adjacency.len() != self.size {
            return Err("adjacency length differs from size".into());
        }
        for w in self.edges.windows(2) {
            if w[0] >= w[1] {
                return Err(format!("edges not strictly sorted at {:?}", w));
            }
        }
        let mut degree_sum = 0;
        for (v, nb) in self.adjacency.iter().enumerate() {
            degree_sum += nb.len();
            for &w in nb {
                if w == v {
                    return Err(format!("self-loop at {v}"));
                }
                if self.adjacency[w].binary_search(&v).is_err() {
                    return Err(format!("asymmetric adjacency {v}-{w}"));
                }
            }
        }
        if degree_sum != 2 * self.edges.len() {
            return Err("degree sum differs from twice the edge count".into());
        }
        for &(a, b) in &self.edges {
            if a >= b || !self.has_edge(a, b) {
                return Err(format!("edge ({a}, {b}) missing from adjacency"));
            }
        }
        Ok(())
    }
}

/// Largest-magnitude adjacency eigenvalue.
///
/// Runs power iteration on `A + I` separately on each connected component
/// starting from the all-ones vector, so the Perron root of every component is
/// simple and dominant; the maximum over components is returned. Converged
/// when the eigen-residual `|Ax - λx| / λ` falls below `tol`.
pub fn spectral_radius(cluster: &ClusterGraph, tol: f64) -> Result<f64> {
    spectral_radius_with_cap(cluster, tol, POWER_ITERATION_CAP)
}

pub fn spectral_radius_with_cap(cluster: &ClusterGraph, tol: f64, cap: usize) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::Input(format!("tolerance must be positive, got {tol}")));
    }
    let mut best = 0.0_f64;
    let mut local = vec![usize::MAX; cluster.size()];
    for comp in cluster.components() {
        if comp.len() < 2 {
            continue;
        }
        for (i, &v) in comp.iter().enumerate() {
            local[v] = i;
        }
        let k = comp.len();
        let apply = |x: &[f64], out: &mut [f64]| {
            for (i, &v) in comp.iter().enumerate() {
                out[i] = cluster.neighbors(v).iter().map(|&w| x[local[w]]).sum();
            }
        };
        let mut x = vec![1.0 / (k as f64).sqrt(); k];
        let mut ax = vec![0.0; k];
        let mut converged = None;
        for iter in 0..cap {
            apply(&x, &mut ax);
            let lambda: f64 = x.iter().zip(&ax).map(|(a, b)| a * b).sum();
            if lambda.abs() < f64::EPSILON {
                // Start vector orthogonal to the dominant direction: perturb by index.
                for (i, xi) in x.iter_mut().enumerate() {
                    *xi = 1.0 + (i as f64 + 1.0) / k as f64;
                }
                normalize(&mut x);
                continue;
            }
            let resid = x
                .iter()
                .zip(&ax)
                .map(|(xi, ai)| (ai - lambda * xi).powi(2))
                .sum::<f64>()
                .sqrt();
            if resid <= tol * lambda.abs() {
                converged = Some(lambda);
                break;
            }
            // Shifted step x <- (A + I) x.
            for (xi, ai) in x.iter_mut().zip(&ax) {
                *xi += ai;
            }
            normalize(&mut x);
            if iter + 1 == cap {
                break;
            }
        }
        match converged {
            Some(l) => best = best.max(l.abs()),
            None => return Err(Error::PowerIteration { iterations: cap }),
        }
    }
    Ok(best)
}

fn normalize(x: &mut [f64]) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
}

/// Subgraph induced by `nodes` (duplicates ignored). Returns the graph on
/// local ids `0..k` and the map from new id to original id, ascending.
pub fn induced_subgraph(cluster: &ClusterGraph, nodes: &[usize]) -> (ClusterGraph, Vec<usize>) {
    let mut keep: Vec<usize> = nodes.to_vec();
    keep.sort_unstable();
    keep.dedup();
    let mut new_id = vec![usize::MAX; cluster.size()];
    for (i, &v) in keep.iter().enumerate() {
        new_id[v] = i;
    }
    let edges: Vec<(usize, usize)> = cluster
        .edges()
        .iter()
        .filter(|&&(a, b)| new_id[a] != usize::MAX && new_id[b] != usize::MAX)
        .map(|&(a, b)| (new_id[a], new_id[b]))
        .collect();
    // Relabeling is monotone, so the filtered list stays sorted.
    (ClusterGraph::from_sorted_unique(keep.len(), edges), keep)
}

/// Node-disjoint union of clusters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopulationNetwork {
    clusters: Vec<ClusterGraph>,
    offsets: Vec<usize>,
    total_size: usize,
}

impl PopulationNetwork {
    pub fn new(clusters: Vec<ClusterGraph>) -> Self {
        let mut offsets = Vec::with_capacity(clusters.len());
        let mut total = 0;
        for c in &clusters {
            offsets.push(total);
            total += c.size();
        }
        PopulationNetwork {
            clusters,
            offsets,
            total_size: total,
        }
    }

    pub fn clusters(&self) -> &[ClusterGraph] {
        &self.clusters
    }

    pub fn cluster(&self, i: usize) -> &ClusterGraph {
        &self.clusters[i]
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn total_size(&self) -> usize {
        self.total_size
    }

    pub fn offset(&self, cluster: usize) -> usize {
        self.offsets[cluster]
    }

    pub fn edge_count(&self) -> usize {
        self.clusters.iter().map(ClusterGraph::edge_count).sum()
    }

    /// `(cluster, local id)` of a global node id.
    pub fn locate(&self, node: usize) -> (usize, usize) {
        let c = self.offsets.partition_point(|&o| o <= node) - 1;
        (c, node - self.offsets[c])
    }

    pub fn global_id(&self, cluster: usize, local: usize) -> usize {
        self.offsets[cluster] + local
    }

    pub fn cluster_of(&self, node: usize) -> usize {
        self.locate(node).0
    }

    pub fn degree(&self, node: usize) -> usize {
        let (c, l) = self.locate(node);
        self.clusters[c].degree(l)
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.clusters.iter().flat_map(|c| c.degrees()).collect()
    }

    /// Global ids of a node's neighbors.
    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        let (c, l) = self.locate(node);
        let off = self.offsets[c];
        self.clusters[c].neighbors(l).iter().map(move |&w| w + off)
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        let (ca, la) = self.locate(a);
        let (cb, lb) = self.locate(b);
        ca == cb && self.clusters[ca].has_edge(la, lb)
    }

    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let mut expected = 0;
        for (i, c) in self.clusters.iter().enumerate() {
            if self.offsets[i] != expected {
                return Err(format!("cluster {i} offset is not contiguous"));
            }
            expected += c.size();
            c.check_invariants()
                .map_err(|e| format!("cluster {i}: {e}"))?;
        }
        if expected != self.total_size {
            return Err("cluster sizes do not sum to N".into());
        }
        Ok(())
    }

    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["cluster_id", "node_a", "node_b"])
            .map_err(|e| Error::csv(path, e))?;
        for (i, c) in self.clusters.iter().enumerate() {
            let off = self.offsets[i];
            for &(a, b) in c.edges() {
                w.write_record([i.to_string(), (a + off).to_string(), (b + off).to_string()])
                    .map_err(|e| Error::csv(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_node_file(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["node_id", "cluster_id", "degree"])
            .map_err(|e| Error::csv(path, e))?;
        for (i, c) in self.clusters.iter().enumerate() {
            for l in 0..c.size() {
                w.write_record([
                    (self.offsets[i] + l).to_string(),
                    i.to_string(),
                    c.degree(l).to_string(),
                ])
                .map_err(|e| Error::csv(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads an edge list and, optionally, the node attribute companion file.
    /// Without the node file, cluster membership is inferred from the edges, so
    /// isolated nodes are only representable when the node file is present.
    pub fn read(edges: &Path, nodes: Option<&Path>) -> Result<Self> {
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut declared_degree: BTreeMap<usize, usize> = BTreeMap::new();
        if let Some(np) = nodes {
            let mut r = csv::Reader::from_path(np).map_err(|e| Error::csv(np, e))?;
            for rec in r.records() {
                let rec = rec.map_err(|e| Error::csv(np, e))?;
                let node = parse_field(&rec, 0, np)?;
                let cluster = parse_field(&rec, 1, np)?;
                members.entry(cluster).or_default().push(node);
                if let Some(d) = rec.get(2).filter(|s| !s.trim().is_empty()) {
                    let d = d.trim().parse().map_err(|_| Error::Parse {
                        context: np.display().to_string(),
                        message: format!("bad degree `{d}`"),
                    })?;
                    declared_degree.insert(node, d);
                }
            }
        }
        let mut raw_edges: Vec<(usize, usize, usize)> = Vec::new();
        let mut r = csv::Reader::from_path(edges).map_err(|e| Error::csv(edges, e))?;
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::csv(edges, e))?;
            let c = parse_field(&rec, 0, edges)?;
            let a = parse_field(&rec, 1, edges)?;
            let b = parse_field(&rec, 2, edges)?;
            raw_edges.push((c, a, b));
            if nodes.is_none() {
                let m = members.entry(c).or_default();
                m.push(a);
                m.push(b);
            }
        }
        let expected_clusters = members.keys().copied().enumerate().all(|(i, k)| i == k);
        if !expected_clusters {
            return Err(Error::Input("cluster ids must be 0..m without gaps".into()));
        }
        let mut offsets = Vec::new();
        let mut next = 0;
        for m in members.values_mut() {
            m.sort_unstable();
            m.dedup();
            if m.first() != Some(&next) || m.last().map(|l| l + 1 - next) != Some(m.len()) {
                let hint = if nodes.is_none() { " (isolated nodes need the node file)" } else { "" };
                return Err(Error::Input(format!(
                    "cluster node ids must be contiguous starting at {next}{hint}"
                )));
            }
            offsets.push(next);
            next += m.len();
        }
        let mut per_cluster: Vec<Vec<(usize, usize)>> = vec![Vec::new(); members.len()];
        for (c, a, b) in raw_edges {
            if c >= offsets.len() {
                return Err(Error::Input(format!("edge references unknown cluster {c}")));
            }
            let size = members[&c].len();
            let off = offsets[c];
            if a < off || b < off || a >= off + size || b >= off + size {
                return Err(Error::Input(format!("edge ({a}, {b}) crosses cluster {c}")));
            }
            per_cluster[c].push((a - off, b - off));
        }
        let clusters = per_cluster
            .iter()
            .enumerate()
            .map(|(c, e)| ClusterGraph::from_edges(members[&c].len(), e))
            .collect::<Result<Vec<_>>>()?;
        let net = PopulationNetwork::new(clusters);
        for (node, d) in declared_degree {
            if net.degree(node) != d {
                return Err(Error::Input(format!(
                    "node {node}: declared degree {d} differs from edge list degree {}",
                    net.degree(node)
                )));
            }
        }
        Ok(net)
    }
}

fn parse_field(rec: &csv::StringRecord, idx: usize, path: &Path) -> Result<usize> {
    let s = rec.get(idx).ok_or_else(|| Error::Parse {
        context: path.display().to_string(),
        message: format!("missing field {idx}"),
    })?;
    s.trim().parse().map_err(|_| Error::Parse {
        context: path.display().to_string(),
        message: format!("bad integer `{s}`"),
    })
}

/// Ratio of realized ties to possible ties over the whole population.
/// Returns 0 for networks with fewer than two nodes.
pub fn density(net: &PopulationNetwork) -> f64 {
    let n = net.total_size() as f64;
    if n < 2.0 {
        return 0.0;
    }
    net.edge_count() as f64 / (n * (n - 1.0) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn path(n: usize) -> ClusterGraph {
        let e: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        ClusterGraph::from_edges(n, &e).unwrap()
    }

    fn complete(n: usize) -> ClusterGraph {
        let mut e = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                e.push((a, b));
            }
        }
        ClusterGraph::from_edges(n, &e).unwrap()
    }

    fn dense_radius(g: &ClusterGraph) -> f64 {
        let n = g.size();
        let m = DMatrix::from_fn(n, n, |i, j| if g.has_edge(i, j) { 1.0 } else { 0.0 });
        m.symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(0.0_f64, |acc: f64, v: &f64| acc.max(v.abs()))
    }

    #[test]
    fn spectral_radius_small_graphs() {
        let r = spectral_radius(&path(2), 1e-10).unwrap();
        assert!((r - 1.0).abs() < 1e-8);
        let r = spectral_radius(&complete(3), 1e-10).unwrap();
        assert!((r - 2.0).abs() < 1e-8);
        let star = ClusterGraph::from_edges(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]).unwrap();
        assert!((dense_radius(&star) - 2.0).abs() < 1e-12);
        let r = spectral_radius(&star, 1e-10).unwrap();
        assert!((r - 2.0).abs() < 1e-8);
        assert_eq!(spectral_radius(&ClusterGraph::empty(4), 1e-8).unwrap(), 0.0);
    }

    #[test]
    fn spectral_radius_reports_cap() {
        let g = path(40);
        match spectral_radius_with_cap(&g, 1e-14, 3) {
            Err(Error::PowerIteration { iterations }) => assert_eq!(iterations, 3),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn spectral_radius_matches_dense_oracle_exhaustive_random() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for trial in 0..600 {
            let n = 1 + trial % 12;
            let p = rng.random_range(0.05..0.9);
            let mut e = Vec::new();
            for a in 0..n {
                for b in a + 1..n {
                    if rng.random_bool(p) {
                        e.push((a, b));
                    }
                }
            }
            let g = ClusterGraph::from_edges(n, &e).unwrap();
            let oracle = dense_radius(&g);
            let got = spectral_radius(&g, DEFAULT_SPECTRAL_TOL).unwrap();
            assert!(
                (got - oracle).abs() <= 1e-6 * oracle.max(1e-300),
                "n={n} edges={e:?}: {got} vs {oracle}"
            );
        }
    }

    #[test]
    fn induced_subgraph_examples() {
        let tri = complete(3);
        let (g, map) = induced_subgraph(&tri, &[0, 1]);
        assert_eq!(g.edges(), &[(0, 1)]);
        assert_eq!(map, vec![0, 1]);

        let (g, _) = induced_subgraph(&tri, &[0, 1, 2]);
        assert_eq!(g, tri);

        let (g, map) = induced_subgraph(&path(3), &[0, 2]);
        assert_eq!(g.edge_count(), 0);
        assert_eq!(g.size(), 2);
        assert_eq!(map, vec![0, 2]);

        let (g, map) = induced_subgraph(&tri, &[]);
        assert!(g.is_empty() && map.is_empty());
    }

    #[test]
    fn density_examples() {
        let net = PopulationNetwork::new(vec![complete(3)]);
        assert_eq!(density(&net), 1.0);
        let net = PopulationNetwork::new(vec![ClusterGraph::empty(10)]);
        assert_eq!(density(&net), 0.0);
        // 4995 edges spread over 10 clusters of 100 nodes.
        let clusters = (0..10)
            .map(|c| {
                let mut e = Vec::new();
                let want = if c < 5 { 500 } else { 499 };
                'outer: for a in 0..100 {
                    for b in a + 1..100 {
                        if e.len() == want {
                            break 'outer;
                        }
                        e.push((a, b));
                    }
                }
                ClusterGraph::from_edges(100, &e).unwrap()
            })
            .collect();
        let net = PopulationNetwork::new(clusters);
        assert_eq!(net.edge_count(), 4995);
        assert!((density(&net) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn from_edges_rejects_bad_input() {
        assert!(ClusterGraph::from_edges(3, &[(1, 1)]).is_err());
        assert!(ClusterGraph::from_edges(3, &[(0, 3)]).is_err());
        assert!(ClusterGraph::from_edges(3, &[(0, 1), (1, 0)]).is_err());
    }

    #[test]
    fn locate_roundtrip() {
        let net = PopulationNetwork::new(vec![path(3), ClusterGraph::empty(2), complete(4)]);
        for v in 0..net.total_size() {
            let (c, l) = net.locate(v);
            assert_eq!(net.global_id(c, l), v);
        }
        assert_eq!(net.locate(3), (1, 0));
        assert_eq!(net.locate(5), (2, 0));
        assert!(net.has_edge(5, 8));
        assert!(!net.has_edge(2, 3));
        assert_eq!(net.neighbors(1).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn edge_list_roundtrip_with_isolated_nodes() {
        let dir = tempfile::tempdir().unwrap();
        let net = PopulationNetwork::new(vec![path(4), ClusterGraph::empty(2), complete(3)]);
        let e = dir.path().join("edges.csv");
        let n = dir.path().join("nodes.csv");
        net.write_edge_list(&e).unwrap();
        net.write_node_file(&n).unwrap();
        let text = std::fs::read_to_string(&e).unwrap();
        assert!(text.starts_with("cluster_id,node_a,node_b\n0,0,1\n"));
        let back = PopulationNetwork::read(&e, Some(&n)).unwrap();
        assert_eq!(back, net);
    }

    fn arb_graph() -> impl Strategy<Value = ClusterGraph> {
        (1usize..14).prop_flat_map(|n| {
            let dyads = n * (n - 1) / 2;
            proptest::collection::vec(any::<bool>(), dyads).prop_map(move |bits| {
                let mut e = Vec::new();
                let mut k = 0;
                for a in 0..n {
                    for b in a + 1..n {
                        if bits[k] {
                            e.push((a, b));
                        }
                        k += 1;
                    }
                }
                ClusterGraph::from_edges(n, &e).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn induced_subgraph_is_idempotent(g in arb_graph(), mask in proptest::collection::vec(any::<bool>(), 14)) {
            let nodes: Vec<usize> = (0..g.size()).filter(|&v| mask[v]).collect();
            let (once, _) = induced_subgraph(&g, &nodes);
            let all: Vec<usize> = (0..once.size()).collect();
            let (twice, map) = induced_subgraph(&once, &all);
            prop_assert_eq!(&twice, &once);
            prop_assert_eq!(map, all);
            prop_assert!(once.check_invariants().is_ok());
            for &(a, b) in once.edges() {
                prop_assert!(g.has_edge(nodes[a], nodes[b]));
            }
        }

        #[test]
        fn generated_graphs_satisfy_invariants(g in arb_graph()) {
            prop_assert!(g.check_invariants().is_ok());
            let dense = g.dense_adjacency();
            for v in 0..g.size() {
                prop_assert_eq!(dense[v][v], 0.0);
                for w in 0..g.size() {
                    prop_assert_eq!(dense[v][w], dense[w][v]);
                }
                prop_assert_eq!(dense[v].iter().sum::<f64>() as usize, g.degree(v));
            }
        }
    }
}
