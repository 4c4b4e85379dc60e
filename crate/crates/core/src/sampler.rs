//! Respondent-driven sampling on a population network.
//!
//! Recruitment is breadth ordered: recruiters are served first-in first-out and
//! each hands out all of its coupons, every coupon going to a uniformly chosen
//! not-yet-recruited neighbor. Chains that die out before the target size is
//! reached are replaced by fresh seeds drawn from the unrecruited nodes.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ClusterGraph, PopulationNetwork};
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdsConfig {
    pub num_seeds: usize,
    pub coupons: usize,
    pub sample_fraction: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl RdsConfig {
    pub fn reference(sample_fraction: f64) -> Self {
        RdsConfig {
            num_seeds: 10,
            coupons: 3,
            sample_fraction,
            rng_seed: 0,
        }
    }

    /// `⌈f·N⌉`.
    pub fn target_size(&self, population: usize) -> usize {
        let raw = self.sample_fraction * population as f64;
        // Guard against 0.2 * 1000 landing a hair above 200.
        ((raw - 1e-9).ceil().max(0.0) as usize).min(population)
    }

    pub fn validate(&self, population: usize) -> Result<()> {
        if self.num_seeds == 0 {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "sample fraction {} outside (0, 1]",
                self.sample_fraction
            )));
        }
        if self.target_size(population) < self.num_seeds {
            return Err(Error::Config(format!(
                "target size {} is smaller than {} seeds",
                self.target_size(population),
                self.num_seeds
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recruit {
    pub node_id: usize,
    pub cluster_id: usize,
    /// Node id of the seed heading this recruit's chain.
    pub seed_id: usize,
    pub recruiter_id: Option<usize>,
    pub wave: usize,
    pub degree: usize,
}

impl Recruit {
    pub fn is_seed(&self) -> bool {
        self.recruiter_id.is_none()
    }
}

/// Observed RDS sample in recruitment order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecruitmentTree {
    recruits: Vec<Recruit>,
}

impl RecruitmentTree {
    /// Wraps recruits listed in recruitment order, checking the structural
    /// invariants that do not need the population network.
    pub fn new(recruits: Vec<Recruit>) -> Result<Self> {
        let tree = RecruitmentTree { recruits };
        tree.check_structure().map_err(Error::Structure)?;
        Ok(tree)
    }

    pub fn recruits(&self) -> &[Recruit] {
        &self.recruits
    }

    pub fn len(&self) -> usize {
        self.recruits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recruits.is_empty()
    }

    pub fn seed_count(&self) -> usize {
        self.recruits.iter().filter(|r| r.is_seed()).count()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.recruits.iter().map(|r| r.degree).collect()
    }

    /// Recruiter → recruit pairs as node ids.
    pub fn tree_edges(&self) -> Vec<(usize, usize)> {
        self.recruits
            .iter()
            .filter_map(|r| r.recruiter_id.map(|p| (p, r.node_id)))
            .collect()
    }

    /// Map from node id to position in recruitment order.
    pub fn positions(&self) -> HashMap<usize, usize> {
        self.recruits
            .iter()
            .enumerate()
            .map(|(i, r)| (r.node_id, i))
            .collect()
    }

    /// Recruit positions of each recruit's own recruits, in recruitment order.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let pos = self.positions();
        let mut out = vec![Vec::new(); self.recruits.len()];
        for (i, r) in self.recruits.iter().enumerate() {
            if let Some(p) = r.recruiter_id {
                out[pos[&p]].push(i);
            }
        }
        out
    }

    /// Positions of the seeds, in recruitment order.
    pub fn seed_positions(&self) -> Vec<usize> {
        (0..self.recruits.len())
            .filter(|&i| self.recruits[i].is_seed())
            .collect()
    }

    fn check_structure(&self) -> std::result::Result<(), String> {
        let mut seen: HashMap<usize, usize> = HashMap::new();
        for (i, r) in self.recruits.iter().enumerate() {
            if seen.insert(r.node_id, i).is_some() {
                return Err(format!("node {} recruited twice", r.node_id));
            }
            match r.recruiter_id {
                None => {
                    if r.wave != 0 || r.seed_id != r.node_id {
                        return Err(format!("seed {} must have wave 0 and be its own seed", r.node_id));
                    }
                }
                Some(p) => {
                    let Some(&pi) = seen.get(&p).filter(|&&pi| pi < i) else {
                        return Err(format!(
                            "recruiter {p} of node {} does not precede it",
                            r.node_id
                        ));
                    };
                    let parent = &self.recruits[pi];
                    if r.wave != parent.wave + 1 {
                        return Err(format!("wave of node {} is not parent wave + 1", r.node_id));
                    }
                    if r.seed_id != parent.seed_id {
                        return Err(format!("node {} has a different seed than its recruiter", r.node_id));
                    }
                }
            }
        }
        Ok(())
    }

    /// Full invariant audit: structure, coupon cap, ties present in the
    /// population network, and degrees matching the network.
    pub fn check_invariants(&self, net: &PopulationNetwork, coupons: usize) -> std::result::Result<(), String> {
        self.check_structure()?;
        for (i, kids) in self.children().iter().enumerate() {
            if kids.len() > coupons {
                return Err(format!(
                    "recruiter {} has {} recruits",
                    self.recruits[i].node_id,
                    kids.len()
                ));
            }
        }
        for r in &self.recruits {
            if r.degree != net.degree(r.node_id) || r.cluster_id != net.cluster_of(r.node_id) {
                return Err(format!("node {} attributes differ from the network", r.node_id));
            }
            if let Some(p) = r.recruiter_id {
                if !net.has_edge(p, r.node_id) {
                    return Err(format!("tree edge {p}-{} is not a network tie", r.node_id));
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["node_id", "cluster_id", "seed_id", "recruiter_id", "wave", "degree"])
            .map_err(|e| Error::csv(path, e))?;
        for r in &self.recruits {
            w.write_record([
                r.node_id.to_string(),
                r.cluster_id.to_string(),
                r.seed_id.to_string(),
                r.recruiter_id.map(|p| p.to_string()).unwrap_or_default(),
                r.wave.to_string(),
                r.degree.to_string(),
            ])
            .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let headers = r.headers().map_err(|e| Error::csv(path, e))?.clone();
        let cols = RecruitColumns::locate(&headers)?;
        let mut recruits = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            recruits.push(cols.parse(&rec, &path.display().to_string())?);
        }
        RecruitmentTree::new(recruits)
    }
}

/// Column positions of the recruit fields in a CSV header.
pub(crate) struct RecruitColumns {
    idx: [usize; 6],
}

pub(crate) const RECRUIT_COLUMNS: [&str; 6] =
    ["node_id", "cluster_id", "seed_id", "recruiter_id", "wave", "degree"];

impl RecruitColumns {
    pub(crate) fn locate(headers: &csv::StringRecord) -> Result<Self> {
        let mut idx = [0; 6];
        for (k, name) in RECRUIT_COLUMNS.iter().enumerate() {
            idx[k] = headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| Error::MissingColumn((*name).to_string()))?;
        }
        Ok(RecruitColumns { idx })
    }

    pub(crate) fn parse(&self, rec: &csv::StringRecord, ctx: &str) -> Result<Recruit> {
        let field = |k: usize| rec.get(self.idx[k]).unwrap_or("").trim();
        let num = |k: usize| -> Result<usize> {
            field(k).parse().map_err(|_| Error::Parse {
                context: ctx.to_string(),
                message: format!("bad {} `{}`", RECRUIT_COLUMNS[k], field(k)),
            })
        };
        let recruiter_id = if field(3).is_empty() { None } else { Some(num(3)?) };
        Ok(Recruit {
            node_id: num(0)?,
            cluster_id: num(1)?,
            seed_id: num(2)?,
            recruiter_id,
            wave: num(4)?,
            degree: num(5)?,
        })
    }
}

/// Nodes eligible as seeds within a cluster: non-isolated nodes when any exist.
fn seed_candidates(cluster: &ClusterGraph) -> Vec<usize> {
    let connected: Vec<usize> = (0..cluster.size()).filter(|&v| cluster.degree(v) > 0).collect();
    if connected.is_empty() {
        (0..cluster.size()).collect()
    } else {
        connected
    }
}

/// One seed per cluster, uniformly within the cluster. With fewer seeds than
/// clusters a uniform subset of clusters is used; with more, clusters are
/// cycled. Isolated nodes are skipped whenever a cluster has any tie.
pub fn select_seeds(net: &PopulationNetwork, s: usize, rng: &mut StreamRng) -> Result<Vec<usize>> {
    let m = net.num_clusters();
    if m == 0 {
        return Err(Error::Structure("network has no clusters".into()));
    }
    if let Some(i) = net.clusters().iter().position(ClusterGraph::is_empty) {
        return Err(Error::Structure(format!("cluster {i} is empty")));
    }
    let mut candidates: Vec<Vec<usize>> = net.clusters().iter().map(seed_candidates).collect();
    let mut order: Vec<usize> = Vec::with_capacity(s);
    for _ in 0..s / m {
        order.extend(0..m);
    }
    let rest = rand::seq::index::sample(rng, m, s % m).into_vec();
    order.extend(rest);
    let mut seeds = Vec::with_capacity(s);
    for c in order {
        let pool = &mut candidates[c];
        if pool.is_empty() {
            return Err(Error::Structure(format!(
                "cluster {c} has no nodes left for another seed"
            )));
        }
        let k = rng.random_range(0..pool.len());
        seeds.push(net.global_id(c, pool.swap_remove(k)));
    }
    Ok(seeds)
}

/// Simulates one RDS recruitment process; stops exactly at `⌈f·N⌉` recruits.
pub fn run_rds(net: &PopulationNetwork, cfg: &RdsConfig, rng: &mut StreamRng) -> Result<RecruitmentTree> {
    let population = net.total_size();
    cfg.validate(population)?;
    let target = cfg.target_size(population);
    let mut recruited = vec![false; population];
    let mut recruits: Vec<Recruit> = Vec::with_capacity(target);
    let mut queue: VecDeque<usize> = VecDeque::new();

    let make_seed = |node: usize| Recruit {
        node_id: node,
        cluster_id: net.cluster_of(node),
        seed_id: node,
        recruiter_id: None,
        wave: 0,
        degree: net.degree(node),
    };

    for node in select_seeds(net, cfg.num_seeds, rng)? {
        recruited[node] = true;
        queue.push_back(recruits.len());
        recruits.push(make_seed(node));
    }

    let mut free: Vec<usize> = Vec::new();
    while recruits.len() < target {
        let Some(pos) = queue.pop_front() else {
            let node = replenishment_seed(net, &recruited, rng);
            recruited[node] = true;
            queue.push_back(recruits.len());
            recruits.push(make_seed(node));
            continue;
        };
        let (recruiter, wave, seed) = {
            let r = &recruits[pos];
            (r.node_id, r.wave, r.seed_id)
        };
        for _ in 0..cfg.coupons {
            if recruits.len() == target {
                break;
            }
            free.clear();
            free.extend(net.neighbors(recruiter).filter(|&w| !recruited[w]));
            let Some(&node) = free.choose(rng) else {
                break;
            };
            recruited[node] = true;
            queue.push_back(recruits.len());
            recruits.push(Recruit {
                node_id: node,
                cluster_id: net.cluster_of(node),
                seed_id: seed,
                recruiter_id: Some(recruiter),
                wave: wave + 1,
                degree: net.degree(node),
            });
        }
    }
    RecruitmentTree::new(recruits)
}

fn replenishment_seed(net: &PopulationNetwork, recruited: &[bool], rng: &mut StreamRng) -> usize {
    let open: Vec<usize> = (0..net.total_size())
        .filter(|&v| !recruited[v] && net.degree(v) > 0)
        .collect();
    if let Some(&v) = open.choose(rng) {
        return v;
    }
    let rest: Vec<usize> = (0..net.total_size()).filter(|&v| !recruited[v]).collect();
    *rest.choose(rng).expect("target never exceeds the population")
}

/// Graph of observed recruiter–recruit ties on recruit positions `0..n`.
pub fn sample_graph(tree: &RecruitmentTree) -> ClusterGraph {
    let pos = tree.positions();
    let edges: Vec<(usize, usize)> = tree
        .recruits()
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.recruiter_id.map(|p| (pos[&p], i)))
        .collect();
    ClusterGraph::from_edges(tree.len(), &edges).expect("tree edges are simple")
}

/// One observed recruitment tree: its seed, member node ids in recruitment
/// order, and the recruiter–recruit ties on local ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservedTree {
    pub seed_id: usize,
    pub nodes: Vec<usize>,
    pub graph: ClusterGraph,
}

/// Observed adjacency of every recruitment tree, ordered by seed appearance.
pub fn observed_adjacency(tree: &RecruitmentTree) -> Vec<ObservedTree> {
    let mut by_seed: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out: Vec<ObservedTree> = Vec::new();
    let mut local: HashMap<usize, usize> = HashMap::new();
    let mut edges: Vec<Vec<(usize, usize)>> = Vec::new();
    for r in tree.recruits() {
        let t = *by_seed.entry(r.seed_id).or_insert_with(|| {
            out.push(ObservedTree {
                seed_id: r.seed_id,
                nodes: Vec::new(),
                graph: ClusterGraph::empty(0),
            });
            edges.push(Vec::new());
            out.len() - 1
        });
        local.insert(r.node_id, out[t].nodes.len());
        if let Some(p) = r.recruiter_id {
            edges[t].push((local[&p], out[t].nodes.len()));
        }
        out[t].nodes.push(r.node_id);
    }
    for (t, e) in out.iter_mut().zip(edges) {
        t.graph = ClusterGraph::from_edges(t.nodes.len(), &e).expect("tree edges are simple");
    }
    out
}
