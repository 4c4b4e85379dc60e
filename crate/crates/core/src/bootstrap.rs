//! Tree and neighborhood bootstrap for RDS samples.

use std::collections::HashMap;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Row};
use crate::error::{Error, Result};
use crate::glmm::FitResult;
use crate::rng::{named_stream, StreamRng};
use crate::sampler::RecruitmentTree;

/// Share of failed replicate fits above which a result is flagged.
pub const FAILURE_LIMIT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Tree,
    Neighborhood,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Tree => "tree",
            Method::Neighborhood => "neighborhood",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tree" => Ok(Method::Tree),
            "neighborhood" | "neighbourhood" | "nbhd" => Ok(Method::Neighborhood),
            other => Err(Error::Config(format!("unknown bootstrap method `{other}`"))),
        }
    }
}

/// How recruits are drawn at each level of the tree bootstrap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replacement {
    #[default]
    With,
    /// Draws every recruit set without replacement, which reproduces the
    /// original membership and only permutes the order.
    Without,
}

/// How the neighborhood bootstrap turns its stage-1 draw into a replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborhoodVariant {
    /// Stage 1 with replacement; every drawn recruit contributes itself and
    /// its tree neighbors, duplicates kept.
    #[default]
    Replicated,
    /// Stage 1 without replacement; the replicate is the union of the
    /// closed neighborhoods, each recruit once.
    Induced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub method: Method,
    pub replicates: usize,
    pub level: f64,
    pub rng_seed: u64,
    #[serde(default)]
    pub replacement: Replacement,
    #[serde(default)]
    pub neighborhood_variant: NeighborhoodVariant,
}

impl BootstrapConfig {
    pub fn new(method: Method, replicates: usize, rng_seed: u64) -> Self {
        BootstrapConfig {
            method,
            replicates,
            level: 0.95,
            rng_seed,
            replacement: Replacement::default(),
            neighborhood_variant: NeighborhoodVariant::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("bootstrap needs at least one replicate".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("confidence level {} outside (0, 1)", self.level)));
        }
        Ok(())
    }
}

/// One appearance in a tree-bootstrap replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeDraw {
    /// Row of the original sample.
    pub source: usize,
    /// Index of the recruiter's appearance within the replicate.
    pub parent: Option<usize>,
}

fn draw_from(set: &[usize], replacement: Replacement, rng: &mut StreamRng) -> Vec<usize> {
    match replacement {
        Replacement::With => (0..set.len()).map(|_| set[rng.random_range(0..set.len())]).collect(),
        Replacement::Without => sample_indices(rng, set.len(), set.len())
            .into_iter()
            .map(|i| set[i])
            .collect(),
    }
}

/// Resamples seeds, then for every drawn appearance resamples its original
/// recruits, level by level. Appearances are returned in breadth-first
/// order, so recruiters precede their recruits.
pub fn tree_resample(tree: &RecruitmentTree, replacement: Replacement, rng: &mut StreamRng) -> Vec<TreeDraw> {
    let children = tree.children();
    let seeds = tree.seed_positions();
    let mut out: Vec<TreeDraw> = draw_from(&seeds, replacement, rng)
        .into_iter()
        .map(|source| TreeDraw { source, parent: None })
        .collect();
    let mut next = 0;
    while next < out.len() {
        let source = out[next].source;
        for child in draw_from(&children[source], replacement, rng) {
            out.push(TreeDraw { source: child, parent: Some(next) });
        }
        next += 1;
    }
    out
}

/// Rows of a tree-bootstrap replicate. Every appearance gets a fresh node
/// id (its index), so duplicated recruits form separate groups.
pub fn tree_replicate(dataset: &Dataset, draws: &[TreeDraw]) -> Dataset {
    let mut seed_of = vec![0usize; draws.len()];
    let rows = draws
        .iter()
        .enumerate()
        .map(|(i, d)| {
            seed_of[i] = d.parent.map_or(i, |p| seed_of[p]);
            let src = &dataset.rows[d.source];
            let mut row = src.clone();
            row.recruit.node_id = i;
            row.recruit.recruiter_id = d.parent;
            row.recruit.seed_id = seed_of[i];
            row
        })
        .collect();
    Dataset {
        covariate_names: dataset.covariate_names.clone(),
        rows,
    }
}

/// Stage-1 draw count `round(n / c_r)` with `c_r = 2·|tree edges| / n`;
/// `None` for an edgeless tree.
pub fn neighborhood_stage1_count(tree: &RecruitmentTree) -> Option<usize> {
    let n = tree.len();
    let edges = tree.tree_edges().len();
    if edges == 0 {
        return None;
    }
    let cr = 2.0 * edges as f64 / n as f64;
    Some(((n as f64 / cr).round() as usize).clamp(1, n))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodDraw {
    /// Stage-1 selections (sample rows).
    pub selected: Vec<usize>,
    /// `(copy, row)` pairs of the replicate. Rows sharing a copy index come
    /// from the same stage-1 unit (always copy 0 for the induced variant).
    pub members: Vec<(usize, usize)>,
    /// The tree had no edges and a simple random sample with replacement
    /// was drawn instead.
    pub fallback: bool,
}

pub fn neighborhood_resample(
    tree: &RecruitmentTree,
    variant: NeighborhoodVariant,
    rng: &mut StreamRng,
) -> NeighborhoodDraw {
    let n = tree.len();
    let Some(k) = neighborhood_stage1_count(tree) else {
        let selected: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let members = selected.iter().enumerate().map(|(c, &r)| (c, r)).collect();
        return NeighborhoodDraw { selected, members, fallback: true };
    };
    let pos = tree.positions();
    let children = tree.children();
    let neighbors = |i: usize| {
        let parent = tree.recruits()[i].recruiter_id.map(|p| pos[&p]);
        std::iter::once(i).chain(parent).chain(children[i].iter().copied())
    };
    match variant {
        NeighborhoodVariant::Induced => {
            let selected: Vec<usize> = sample_indices(rng, n, k).into_iter().collect();
            let mut keep = vec![false; n];
            for &s in &selected {
                neighbors(s).for_each(|j| keep[j] = true);
            }
            let members = (0..n).filter(|&j| keep[j]).map(|j| (0, j)).collect();
            NeighborhoodDraw { selected, members, fallback: false }
        }
        NeighborhoodVariant::Replicated => {
            let selected: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
            let mut members = Vec::new();
            for (c, &s) in selected.iter().enumerate() {
                let mut unit: Vec<usize> = neighbors(s).collect();
                unit.sort_unstable();
                members.extend(unit.into_iter().map(|j| (c, j)));
            }
            NeighborhoodDraw { selected, members, fallback: false }
        }
    }
}

/// Rows of a neighborhood replicate. Ids are relabelled per copy, so rows
/// from different stage-1 units never share a node, recruiter or seed id,
/// while rows of one unit keep their relations.
pub fn neighborhood_replicate(dataset: &Dataset, draw: &NeighborhoodDraw) -> Dataset {
    let mut ids: HashMap<(usize, usize), usize> = HashMap::new();
    let mut id = |copy: usize, orig: usize| {
        let next = ids.len();
        *ids.entry((copy, orig)).or_insert(next)
    };
    let rows: Vec<Row> = draw
        .members
        .iter()
        .map(|&(copy, j)| {
            let src = &dataset.rows[j];
            let mut row = src.clone();
            row.recruit.node_id = id(copy, src.recruit.node_id);
            row.recruit.recruiter_id = src.recruit.recruiter_id.map(|p| id(copy, p));
            row.recruit.seed_id = id(copy, src.recruit.seed_id);
            row
        })
        .collect();
    Dataset {
        covariate_names: dataset.covariate_names.clone(),
        rows,
    }
}

/// Draws one replicate dataset under `cfg`.
pub fn resample(dataset: &Dataset, tree: &RecruitmentTree, cfg: &BootstrapConfig, rng: &mut StreamRng) -> Dataset {
    match cfg.method {
        Method::Tree => tree_replicate(dataset, &tree_resample(tree, cfg.replacement, rng)),
        Method::Neighborhood => {
            neighborhood_replicate(dataset, &neighborhood_resample(tree, cfg.neighborhood_variant, rng))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    /// Successful replicate estimates, one vector per coefficient.
    pub replicate_estimates: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub ci: Vec<(f64, f64)>,
    pub failed: usize,
    /// Too many failed fits, or too few replicates for a spread estimate.
    pub unreliable: bool,
}

impl BootstrapResult {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Nearest-rank empirical quantile of sorted values.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = (p * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 || v.iter().all(|x| *x == v[0]) {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Runs `cfg.replicates` resample-and-refit rounds in parallel. Replicate
/// `b` always uses the stream derived from `(rng_seed, b)`, so results do
/// not depend on scheduling. `refit` must be a pure function of its inputs.
pub fn bootstrap_fit<F>(
    dataset: &Dataset,
    tree: &RecruitmentTree,
    baseline: &FitResult,
    cfg: &BootstrapConfig,
    refit: F,
) -> Result<BootstrapResult>
where
    F: Fn(&Dataset, &mut StreamRng) -> Result<FitResult> + Sync,
{
    cfg.validate()?;
    if tree.is_empty() {
        return Err(Error::Input("cannot bootstrap an empty sample".into()));
    }
    let fits: Vec<Option<Vec<f64>>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = named_stream(cfg.rng_seed, "bootstrap", &[b as u64]);
            let rep = resample(dataset, tree, cfg, &mut rng);
            refit(&rep, &mut rng)
                .ok()
                .filter(|f| f.names == baseline.names && f.coefficients.iter().all(|c| c.is_finite()))
                .map(|f| f.coefficients)
        })
        .collect();
    Ok(summarize(baseline, fits, cfg.level))
}

fn summarize(baseline: &FitResult, fits: Vec<Option<Vec<f64>>>, level: f64) -> BootstrapResult {
    let total = fits.len();
    let ok: Vec<Vec<f64>> = fits.into_iter().flatten().collect();
    let failed = total - ok.len();
    let p = baseline.coefficients.len();
    let mut replicate_estimates = vec![Vec::with_capacity(ok.len()); p];
    for f in &ok {
        for j in 0..p {
            replicate_estimates[j].push(f[j]);
        }
    }
    let mut se = Vec::with_capacity(p);
    let mut ci = Vec::with_capacity(p);
    for (j, reps) in replicate_estimates.iter().enumerate() {
        if reps.is_empty() {
            se.push(f64::NAN);
            ci.push((f64::NAN, f64::NAN));
            continue;
        }
        se.push(sample_sd(reps));
        if reps.len() == 1 {
            ci.push((baseline.coefficients[j], baseline.coefficients[j]));
            continue;
        }
        let mut sorted = reps.clone();
        sorted.sort_by(f64::total_cmp);
        ci.push((
            nearest_rank(&sorted, 0.5 * (1.0 - level)),
            nearest_rank(&sorted, 0.5 * (1.0 + level)),
        ));
    }
    let unreliable = ok.len() < 2 || failed as f64 > FAILURE_LIMIT * total as f64;
    BootstrapResult {
        names: baseline.names.clone(),
        estimates: baseline.coefficients.clone(),
        replicate_estimates,
        se,
        ci,
        failed,
        unreliable,
    }
}
