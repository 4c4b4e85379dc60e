//! ERGM population networks via Metropolis–Hastings dyad toggling.
//!
//! The model has three sufficient statistics per cluster: edge count,
//! geometrically weighted degree (GWD) and homophily matches on a binary node
//! attribute. Only change statistics are ever evaluated, so the normalizing
//! constant never appears.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ClusterGraph, PopulationNetwork};
use crate::rng::{named_stream, StreamRng};

/// Relative half-width of the accepted band around the target density.
pub const DENSITY_BAND: f64 = 0.10;
/// Generation attempts (fresh streams) before giving up on the band.
pub const GENERATION_RETRY_CAP: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErgmConfig {
    pub population_size: usize,
    pub num_clusters: usize,
    pub target_density: f64,
    pub gwd_coefficient: f64,
    pub gwd_decay: f64,
    #[serde(default)]
    pub homophily_coefficient: f64,
    /// MH steps before the first sample; `None` means 20 × dyads.
    #[serde(default)]
    pub burn_in: Option<usize>,
    /// MH steps between retained samples; `None` means 10 × dyads.
    #[serde(default)]
    pub thin: Option<usize>,
    /// Fixed edge coefficient; calibrated from `target_density` when `None`.
    /// Only used by [`DensityControl::CalibratedCoefficient`].
    #[serde(default)]
    pub edge_coefficient: Option<f64>,
    #[serde(default)]
    pub density_control: DensityControl,
}

/// How the realized density is tied to the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityControl {
    /// Each cluster holds exactly its equal share of the target edge count;
    /// the chain uses tie-swap moves, which leave the count unchanged.
    #[default]
    FixedEdges,
    /// Dyad-toggle chain with an edge coefficient found by bisection on the
    /// realized density.
    CalibratedCoefficient,
}

impl ErgmConfig {
    /// The network of the reference design: 1000 nodes in 10 clusters, 1%
    /// density, GWD coefficient −6 with decay 3.
    pub fn reference() -> Self {
        ErgmConfig {
            population_size: 1000,
            num_clusters: 10,
            target_density: 0.01,
            gwd_coefficient: -6.0,
            gwd_decay: 3.0,
            homophily_coefficient: 0.0,
            burn_in: None,
            thin: None,
            edge_coefficient: None,
            density_control: DensityControl::FixedEdges,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 || self.population_size == 0 {
            return Err(Error::Config("population and cluster counts must be positive".into()));
        }
        if !self.population_size.is_multiple_of(self.num_clusters) {
            return Err(Error::Config(format!(
                "population size {} is not divisible by {} clusters",
                self.population_size, self.num_clusters
            )));
        }
        if self.cluster_size() < 2 {
            return Err(Error::Config("clusters need at least two nodes".into()));
        }
        if !(self.target_density > 0.0 && self.target_density < 1.0) {
            return Err(Error::Config(format!(
                "target density {} outside (0, 1)",
                self.target_density
            )));
        }
        if self.target_density * (self.population_size as f64 - 1.0) < 1.0 {
            return Err(Error::Config(format!(
                "target density {} implies mean degree below one",
                self.target_density
            )));
        }
        if self.gwd_decay < 0.0 {
            return Err(Error::Config("GWD decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn cluster_size(&self) -> usize {
        self.population_size / self.num_clusters
    }

    fn dyads(&self) -> usize {
        let n = self.cluster_size();
        n * (n - 1) / 2
    }

    pub fn burn_in_steps(&self) -> usize {
        self.burn_in.unwrap_or(20 * self.dyads())
    }

    pub fn thin_steps(&self) -> usize {
        self.thin.unwrap_or(10 * self.dyads())
    }

    /// Total edges implied by the overall target density.
    pub fn target_edges(&self) -> f64 {
        let n = self.population_size as f64;
        self.target_density * n * (n - 1.0) / 2.0
    }

    /// Edge count of each cluster under [`DensityControl::FixedEdges`]: the
    /// rounded total split as evenly as possible, earlier clusters taking the
    /// remainder.
    pub fn cluster_edge_targets(&self) -> Vec<usize> {
        let m = self.num_clusters;
        let total = (self.target_edges().round() as usize).min(m * self.dyads());
        (0..m)
            .map(|c| total / m + usize::from(c < total % m))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErgmStatistics {
    pub edge_count: usize,
    pub gwd_value: f64,
    pub homophily_matches: usize,
}

/// `e^{d} Σ_k [1 − (1 − e^{−d})^k] D_k` where `D_k` counts degree-k nodes.
pub fn gwd_statistic(degrees: &[usize], decay: f64) -> f64 {
    let r = 1.0 - (-decay).exp();
    let scale = decay.exp();
    degrees
        .iter()
        .filter(|&&k| k > 0)
        .map(|&k| scale * (1.0 - r.powi(k as i32)))
        .sum()
}

pub fn ergm_statistics(cluster: &ClusterGraph, attr: Option<&[u8]>, decay: f64) -> ErgmStatistics {
    let homophily_matches = attr
        .map(|a| cluster.edges().iter().filter(|&&(x, y)| a[x] == a[y]).count())
        .unwrap_or(0);
    ErgmStatistics {
        edge_count: cluster.edge_count(),
        gwd_value: gwd_statistic(&cluster.degrees(), decay),
        homophily_matches,
    }
}

/// Model coefficients for one MH chain.
#[derive(Debug, Clone, Copy)]
pub struct ErgmCoefficients {
    pub edges: f64,
    pub gwd: f64,
    pub decay: f64,
    pub homophily: f64,
}

/// Metropolis–Hastings chain on the graphs of one cluster.
pub struct ErgmSampler {
    n: usize,
    adj: Vec<bool>,
    degree: Vec<usize>,
    edge_count: usize,
    attr: Vec<u8>,
    /// `(1 − e^{−decay})^k` for `k = 0..n`.
    gwd_weight: Vec<f64>,
    coef: ErgmCoefficients,
    /// Present edges, for uniform selection in tie-swap moves.
    edge_list: Vec<(usize, usize)>,
    /// Position of each present dyad in `edge_list`.
    edge_pos: Vec<usize>,
}

impl ErgmSampler {
    pub fn new(n: usize, attr: Vec<u8>, coef: ErgmCoefficients) -> Self {
        assert!(n >= 2, "MH chain needs at least two nodes");
        assert_eq!(attr.len(), n);
        let r = 1.0 - (-coef.decay).exp();
        let gwd_weight = (0..=n).map(|k| r.powi(k as i32)).collect();
        ErgmSampler {
            n,
            adj: vec![false; n * n],
            degree: vec![0; n],
            edge_count: 0,
            attr,
            gwd_weight,
            coef,
            edge_list: Vec::new(),
            edge_pos: vec![usize::MAX; n * n],
        }
    }

    /// Start from a Bernoulli graph with edge probability `p`.
    pub fn seed_bernoulli(&mut self, p: f64, rng: &mut StreamRng) {
        for a in 0..self.n {
            for b in a + 1..self.n {
                let want = rng.random_bool(p.clamp(0.0, 1.0));
                if want != self.adj[a * self.n + b] {
                    self.toggle(a, b);
                }
            }
        }
    }

    fn toggle(&mut self, a: usize, b: usize) {
        let (a, b) = (a.min(b), a.max(b));
        let present = self.adj[a * self.n + b];
        self.adj[a * self.n + b] = !present;
        self.adj[b * self.n + a] = !present;
        if present {
            let pos = self.edge_pos[a * self.n + b];
            self.edge_list.swap_remove(pos);
            if let Some(&(c, d)) = self.edge_list.get(pos) {
                self.edge_pos[c * self.n + d] = pos;
            }
            self.edge_pos[a * self.n + b] = usize::MAX;
            self.degree[a] -= 1;
            self.degree[b] -= 1;
            self.edge_count -= 1;
        } else {
            self.edge_pos[a * self.n + b] = self.edge_list.len();
            self.edge_list.push((a, b));
            self.degree[a] += 1;
            self.degree[b] += 1;
            self.edge_count += 1;
        }
    }

    /// Log of the unnormalized density ratio for adding the absent edge (a, b)
    /// to a graph in which a and b have degrees `da`, `db`.
    fn add_log_ratio(&self, a: usize, b: usize, da: usize, db: usize) -> f64 {
        let c = &self.coef;
        let mut v = c.edges + c.gwd * (self.gwd_weight[da] + self.gwd_weight[db]);
        if c.homophily != 0.0 && self.attr[a] == self.attr[b] {
            v += c.homophily;
        }
        v
    }

    /// One uniform dyad toggle proposal.
    pub fn step(&mut self, rng: &mut StreamRng) {
        let a = rng.random_range(0..self.n);
        let mut b = rng.random_range(0..self.n - 1);
        if b >= a {
            b += 1;
        }
        let present = self.adj[a * self.n + b];
        let log_ratio = if present {
            -self.add_log_ratio(a, b, self.degree[a] - 1, self.degree[b] - 1)
        } else {
            self.add_log_ratio(a, b, self.degree[a], self.degree[b])
        };
        if log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp() {
            self.toggle(a, b);
        }
    }

    /// Tie-swap move: drop a uniformly chosen edge and add a uniformly chosen
    /// absent dyad. Keeps the edge count fixed.
    pub fn swap_step(&mut self, rng: &mut StreamRng) {
        let m = self.edge_list.len();
        let dyads = self.n * (self.n - 1) / 2;
        if m == 0 || m == dyads {
            return;
        }
        let (a, b) = self.edge_list[rng.random_range(0..m)];
        let (c, d) = loop {
            let c = rng.random_range(0..self.n);
            let mut d = rng.random_range(0..self.n - 1);
            if d >= c {
                d += 1;
            }
            if !self.adj[c * self.n + d] {
                break (c, d);
            }
        };
        let remove = -self.add_log_ratio(a, b, self.degree[a] - 1, self.degree[b] - 1);
        self.toggle(a, b);
        let add = self.add_log_ratio(c, d, self.degree[c], self.degree[d]);
        let log_ratio = remove + add;
        if log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp() {
            self.toggle(c, d);
        } else {
            self.toggle(a, b);
        }
    }

    pub fn run_swaps(&mut self, steps: usize, rng: &mut StreamRng) {
        for _ in 0..steps {
            self.swap_step(rng);
        }
    }

    /// Replace the current state with `g`.
    pub fn load(&mut self, g: &ClusterGraph) {
        assert_eq!(g.size(), self.n);
        let current = self.edge_list.clone();
        for (a, b) in current {
            self.toggle(a, b);
        }
        for &(a, b) in g.edges() {
            self.toggle(a, b);
        }
    }

    pub fn run(&mut self, steps: usize, rng: &mut StreamRng) {
        for _ in 0..steps {
            self.step(rng);
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn graph(&self) -> ClusterGraph {
        let mut edges = Vec::with_capacity(self.edge_count);
        for a in 0..self.n {
            for b in a + 1..self.n {
                if self.adj[a * self.n + b] {
                    edges.push((a, b));
                }
            }
        }
        ClusterGraph::from_sorted_unique(self.n, edges)
    }

    pub fn attributes(&self) -> &[u8] {
        &self.attr
    }
}

fn cluster_coefficients(cfg: &ErgmConfig, edge_coef: f64) -> ErgmCoefficients {
    ErgmCoefficients {
        edges: edge_coef,
        gwd: cfg.gwd_coefficient,
        decay: cfg.gwd_decay,
        homophily: cfg.homophily_coefficient,
    }
}

fn simulate_cluster(
    cfg: &ErgmConfig,
    edge_coef: f64,
    edge_target: usize,
    mut rng: StreamRng,
) -> (ClusterGraph, Vec<u8>) {
    let n = cfg.cluster_size();
    let attr: Vec<u8> = if cfg.homophily_coefficient != 0.0 {
        (0..n).map(|_| rng.random_range(0..2u8)).collect()
    } else {
        vec![0; n]
    };
    let mut chain = ErgmSampler::new(n, attr, cluster_coefficients(cfg, edge_coef));
    match cfg.density_control {
        DensityControl::FixedEdges => {
            chain.load(&uniform_graph(n, edge_target, &mut rng));
            chain.run_swaps(cfg.burn_in_steps(), &mut rng);
        }
        DensityControl::CalibratedCoefficient => {
            let within = cfg.target_edges() / cfg.num_clusters as f64 / cfg.dyads() as f64;
            chain.seed_bernoulli(within, &mut rng);
            chain.run(cfg.burn_in_steps(), &mut rng);
        }
    }
    (chain.graph(), chain.attr)
}

/// Uniform draw from graphs on `n` nodes with exactly `edges` edges.
pub fn uniform_graph(n: usize, edges: usize, rng: &mut StreamRng) -> ClusterGraph {
    let dyads = n * (n - 1) / 2;
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, dyads, edges.min(dyads)).into_vec();
    picked.sort_unstable();
    // Dyad index k enumerates (a, b), a < b, row by row.
    let mut out = Vec::with_capacity(picked.len());
    let mut row_start = 0;
    let mut a = 0;
    for k in picked {
        while k >= row_start + (n - 1 - a) {
            row_start += n - 1 - a;
            a += 1;
        }
        out.push((a, a + 1 + (k - row_start)));
    }
    ClusterGraph::from_sorted_unique(n, out)
}

fn simulate_network(cfg: &ErgmConfig, edge_coef: f64, seed: u64, attempt: u64) -> PopulationNetwork {
    let targets = cfg.cluster_edge_targets();
    let clusters: Vec<ClusterGraph> = (0..cfg.num_clusters)
        .into_par_iter()
        .map(|c| {
            let rng = named_stream(seed, "ergm-cluster", &[attempt, c as u64]);
            simulate_cluster(cfg, edge_coef, targets[c], rng).0
        })
        .collect();
    PopulationNetwork::new(clusters)
}

/// Bisection on the edge coefficient so that a simulated network hits the
/// target density. Deterministic in `seed`.
pub fn calibrate_edge_coefficient(cfg: &ErgmConfig, seed: u64) -> Result<f64> {
    cfg.validate()?;
    let cfg = &ErgmConfig {
        density_control: DensityControl::CalibratedCoefficient,
        ..cfg.clone()
    };
    let target = cfg.target_density;
    let (mut lo, mut hi) = (-30.0_f64, 30.0_f64);
    let mut last = f64::NAN;
    let mut best = (f64::INFINITY, 0.0);
    for iter in 0..60 {
        let mid = 0.5 * (lo + hi);
        let net = simulate_network(cfg, mid, seed, 1_000_000 + iter);
        last = crate::net::density(&net);
        let rel = (last - target).abs() / target;
        if rel < best.0 {
            best = (rel, mid);
        }
        if rel < 0.02 {
            return Ok(mid);
        }
        if last < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    if best.0 <= DENSITY_BAND {
        return Ok(best.1);
    }
    Err(Error::Calibration {
        attempts: 60,
        last_density: last,
        target,
    })
}

/// Generates a population network; output density always lies within
/// ±[`DENSITY_BAND`] of the target. Under fixed-edge control the edge
/// coefficient cancels out of every move; otherwise it is taken from the
/// config or calibrated first.
pub fn generate_population(cfg: &ErgmConfig, rng_seed: u64) -> Result<PopulationNetwork> {
    cfg.validate()?;
    let edge_coef = match (cfg.density_control, cfg.edge_coefficient) {
        (DensityControl::FixedEdges, _) => 0.0,
        (_, Some(c)) => c,
        (_, None) => calibrate_edge_coefficient(cfg, rng_seed)?,
    };
    generate_with_coefficient(cfg, edge_coef, rng_seed)
}

pub fn generate_with_coefficient(
    cfg: &ErgmConfig,
    edge_coef: f64,
    rng_seed: u64,
) -> Result<PopulationNetwork> {
    cfg.validate()?;
    let target = cfg.target_density;
    let mut last = f64::NAN;
    for attempt in 0..GENERATION_RETRY_CAP {
        let net = simulate_network(cfg, edge_coef, rng_seed, attempt as u64);
        last = crate::net::density(&net);
        if (last - target).abs() <= DENSITY_BAND * target {
            return Ok(net);
        }
    }
    Err(Error::Calibration {
        attempts: GENERATION_RETRY_CAP,
        last_density: last,
        target,
    })
}
