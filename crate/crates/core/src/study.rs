//! Replication studies over configuration grids, the summary metrics, and
//! report files.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bootstrap::{bootstrap_fit, BootstrapConfig, Method, NeighborhoodVariant, Replacement};
use crate::dataset::Dataset;
use crate::dgp::{
    calibrate_intercept, gen_covariate, gen_outcomes, sample_network_effects, CovariateSpec, DgpParams, Link,
    SarPolicy,
};
use crate::error::{Error, Result};
use crate::glmm::{fit_dataset, wald_ci, Clustering, ModelSpec};
use crate::net::PopulationNetwork;
use crate::netgen::{generate_population, ErgmConfig};
use crate::rng::{derive_seed, label_key, named_stream};
use crate::sampler::{run_rds, RdsConfig};
use crate::weights::{SsOptions, WeightScheme};

/// Share of failed replicates above which a cell is flagged.
pub const CELL_FAILURE_LIMIT: f64 = 0.10;

/// The coefficient every metric is computed for.
pub const TARGET_TERM: &str = "x";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpGrid {
    pub beta0: f64,
    pub beta1: f64,
    pub gamma: f64,
    pub sigma2: f64,
    pub rhos: Vec<f64>,
    pub links: Vec<Link>,
    #[serde(default = "one")]
    pub residual_variance: f64,
    #[serde(default)]
    pub sar_policy: SarPolicy,
    /// Logit cells calibrate β0 to this outcome prevalence.
    #[serde(default)]
    pub target_prevalence: Option<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateGrid {
    pub mean: f64,
    pub sd: f64,
    pub degree_correlations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGrid {
    pub clusterings: Vec<Clustering>,
    /// Scheme labels: `1`, `rds`, `ss`, `ss_u`, `ss_o`.
    pub schemes: Vec<String>,
    #[serde(default)]
    pub include_homophily_term: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapGrid {
    pub replicates: usize,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub neighborhood_variant: NeighborhoodVariant,
    #[serde(default)]
    pub replacement: Replacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub network: ErgmConfig,
    pub sample_fractions: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub num_seeds: usize,
    #[serde(default = "default_coupons")]
    pub coupons: usize,
    pub dgp: DgpGrid,
    pub covariate: CovariateGrid,
    pub models: ModelGrid,
    pub replicates: usize,
    #[serde(default)]
    pub bootstrap: Option<BootstrapGrid>,
    pub master_seed: u64,
    /// Reuse one network for every replicate instead of drawing a fresh one.
    #[serde(default)]
    pub fixed_network: bool,
    #[serde(default)]
    pub ss: SsOptions,
    #[serde(default = "default_level")]
    pub level: f64,
}

fn default_seeds() -> usize {
    10
}

fn default_coupons() -> usize {
    3
}

fn default_level() -> f64 {
    0.95
}

impl StudyConfig {
    /// Homophily study: `(β0, β1, γ, σ²) = (0, 2, 1.5, 1)`, ρ ∈ {0.05, 0.1},
    /// all three links, logit intercept calibrated to 30% prevalence.
    pub fn homophily_study(replicates: usize, master_seed: u64) -> Self {
        StudyConfig {
            network: ErgmConfig::reference(),
            sample_fractions: vec![0.1, 0.2],
            num_seeds: 10,
            coupons: 3,
            dgp: DgpGrid {
                beta0: 0.0,
                beta1: 2.0,
                gamma: 1.5,
                sigma2: 1.0,
                rhos: vec![0.05, 0.1],
                links: vec![Link::Identity, Link::Log, Link::Logit],
                residual_variance: 1.0,
                sar_policy: SarPolicy::default(),
                target_prevalence: Some(0.3),
            },
            covariate: CovariateGrid {
                mean: 3.0,
                sd: 1.5,
                degree_correlations: vec![0.0],
            },
            models: ModelGrid {
                clusterings: vec![Clustering::Seed, Clustering::Recruiter],
                schemes: ["1", "rds", "ss", "ss_u", "ss_o"].map(String::from).to_vec(),
                include_homophily_term: false,
            },
            replicates,
            bootstrap: Some(BootstrapGrid {
                replicates: 300,
                methods: vec![Method::Tree, Method::Neighborhood],
                neighborhood_variant: NeighborhoodVariant::default(),
                replacement: Replacement::default(),
            }),
            master_seed,
            fixed_network: false,
            ss: SsOptions::default(),
            level: 0.95,
        }
    }

    /// Degree-correlated predictor study: `(β0, β1, γ, σ², ρ) = (0, 2, 0, 1,
    /// 0.05)`, ρ_d ∈ {0.4, 0.6}, f = 0.2.
    pub fn degree_study(replicates: usize, master_seed: u64) -> Self {
        let mut cfg = Self::homophily_study(replicates, master_seed);
        cfg.sample_fractions = vec![0.2];
        cfg.dgp.gamma = 0.0;
        cfg.dgp.rhos = vec![0.05];
        cfg.covariate.degree_correlations = vec![0.4, 0.6];
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.replicates == 0 {
            return Err(Error::Config("a study needs at least one replicate".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("confidence level {} outside (0, 1)", self.level)));
        }
        for &f in &self.sample_fractions {
            self.rds(f).validate(self.network.population_size)?;
        }
        for cell in self.cells() {
            self.params(&cell).validate()?;
            self.covariate_spec(&cell).validate()?;
        }
        if let Some(p) = self.dgp.target_prevalence {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config(format!("target prevalence {p} outside (0, 1)")));
            }
        }
        self.model_specs()?;
        if let Some(b) = &self.bootstrap {
            BootstrapConfig::new(Method::Tree, b.replicates, 0).validate()?;
        }
        let empty = [
            ("sample_fractions", self.sample_fractions.len()),
            ("dgp.rhos", self.dgp.rhos.len()),
            ("dgp.links", self.dgp.links.len()),
            ("covariate.degree_correlations", self.covariate.degree_correlations.len()),
            ("models.clusterings", self.models.clusterings.len()),
            ("models.schemes", self.models.schemes.len()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, n)| *n == 0) {
            return Err(Error::Config(format!("`{name}` is empty")));
        }
        Ok(())
    }

    fn rds(&self, f: f64) -> RdsConfig {
        RdsConfig {
            num_seeds: self.num_seeds,
            coupons: self.coupons,
            sample_fraction: f,
            rng_seed: 0,
        }
    }

    /// Data cells in grid order: f, then ρ, then link, then ρ_d.
    pub fn cells(&self) -> Vec<DataCell> {
        let mut out = Vec::new();
        for &f in &self.sample_fractions {
            for &rho in &self.dgp.rhos {
                for &link in &self.dgp.links {
                    for &rho_d in &self.covariate.degree_correlations {
                        out.push(DataCell { f, rho, link, rho_d });
                    }
                }
            }
        }
        out
    }

    fn params(&self, cell: &DataCell) -> DgpParams {
        DgpParams {
            beta0: self.dgp.beta0,
            beta1: self.dgp.beta1,
            gamma: self.dgp.gamma,
            sigma2: self.dgp.sigma2,
            rho: cell.rho,
            link: cell.link,
            residual_variance: self.dgp.residual_variance,
            sar_policy: self.dgp.sar_policy,
        }
    }

    fn covariate_spec(&self, cell: &DataCell) -> CovariateSpec {
        CovariateSpec {
            mean: self.covariate.mean,
            sd: self.covariate.sd,
            degree_correlation: cell.rho_d,
        }
    }

    /// Model grid for one link: clustering, then scheme.
    fn model_specs(&self) -> Result<Vec<(Clustering, WeightScheme)>> {
        let mut out = Vec::new();
        for &c in &self.models.clusterings {
            for s in &self.models.schemes {
                out.push((c, WeightScheme::from_label(s)?));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataCell {
    pub f: f64,
    pub rho: f64,
    pub link: Link,
    pub rho_d: f64,
}

impl DataCell {
    /// Stream key: depends only on the cell's parameter values.
    pub fn label(&self) -> String {
        format!("f={};rho={};link={};rho_d={}", self.f, self.rho, self.link.name(), self.rho_d)
    }

    fn key(&self) -> u64 {
        label_key(&self.label())
    }
}

fn model_key(c: Clustering, s: &WeightScheme) -> u64 {
    label_key(&format!("{};{}", c.name(), s.label()))
}

/// What one replicate contributed to one model cell.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplicateOutcome {
    pub estimate: Option<f64>,
    pub model_variance: f64,
    pub covered: bool,
    /// Bootstrap variance and CI coverage; `None` if the bootstrap failed.
    pub tree: Option<(f64, bool)>,
    pub neighborhood: Option<(f64, bool)>,
}

/// One replicate's failure, kept for the study log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub cell: String,
    pub replicate: usize,
    pub model: String,
    pub message: String,
}

/// One report row: a data cell crossed with a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub f: f64,
    pub rho: f64,
    pub rho_d: f64,
    pub link: String,
    pub clustering: String,
    pub scheme: String,
    pub beta0: f64,
    pub truth: f64,
    pub replicates: usize,
    pub r_effective: usize,
    pub mean_estimate: f64,
    pub rb: f64,
    /// False when the truth is zero and `rb` holds the absolute bias.
    pub rb_relative: bool,
    pub rmse: f64,
    pub ci: f64,
    pub ci_hw: f64,
    pub tci: Option<f64>,
    pub tci_hw: Option<f64>,
    pub tci_n: usize,
    pub nci: Option<f64>,
    pub nci_hw: Option<f64>,
    pub nci_n: usize,
    pub var_empirical: f64,
    pub var_rb_model: f64,
    pub var_rb_model_se: f64,
    pub var_rb_tree: Option<f64>,
    pub var_rb_tree_se: Option<f64>,
    pub var_rb_nbhd: Option<f64>,
    pub var_rb_nbhd_se: Option<f64>,
    pub flagged: bool,
}

const FULL_HEADER: [&str; 30] = [
    "f",
    "rho",
    "rho_d",
    "link",
    "clustering",
    "scheme",
    "beta0",
    "truth",
    "replicates",
    "r_effective",
    "mean_estimate",
    "rb",
    "rb_relative",
    "rmse",
    "ci",
    "ci_hw",
    "tci",
    "tci_hw",
    "tci_n",
    "nci",
    "nci_hw",
    "nci_n",
    "var_empirical",
    "var_rb_model",
    "var_rb_model_se",
    "var_rb_tree",
    "var_rb_tree_se",
    "var_rb_nbhd",
    "var_rb_nbhd_se",
    "flagged",
];

const ROUNDED_HEADER: [&str; 16] = [
    "f",
    "rho",
    "rho_d",
    "link",
    "clustering",
    "scheme",
    "RB",
    "RMSE",
    "CI",
    "TCI",
    "NCI",
    "var_rb_model",
    "var_rb_tree",
    "var_rb_nbhd",
    "R_effective",
    "flagged",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimReport {
    pub rows: Vec<ReportRow>,
    pub failures: Vec<FailureRecord>,
}

impl SimReport {
    pub fn any_flagged(&self) -> bool {
        self.rows.iter().any(|r| r.flagged)
    }

    /// First row matching the labels.
    pub fn find(&self, f: f64, rho: f64, rho_d: f64, link: Link, clustering: Clustering, scheme: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| {
            r.f == f
                && r.rho == rho
                && r.rho_d == rho_d
                && r.link == link.name()
                && r.clustering == clustering.name()
                && r.scheme == scheme
        })
    }
}

/// `(mean − truth)/truth`, or the absolute bias with `false` when the truth
/// is zero.
pub fn metric_relative_bias(estimates: &[f64], truth: f64) -> (f64, bool) {
    let bias = mean(estimates) - truth;
    if truth == 0.0 {
        (bias, false)
    } else {
        (bias / truth, true)
    }
}

pub fn rmse(estimates: &[f64], truth: f64) -> f64 {
    (estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / estimates.len() as f64).sqrt()
}

/// Monte Carlo half-width `sqrt(p(1 − p)/R)` of a coverage estimate.
pub fn coverage_half_width(p: f64, r: usize) -> f64 {
    (p * (1.0 - p) / r as f64).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Relative bias of a variance estimator, `mean(v̂)/S² − 1`, with its
/// delta-method standard error. `pairs` holds `(β̂, v̂)` per replicate; `S²`
/// is the sample variance of every estimate in `estimates`.
pub fn variance_relative_bias(estimates: &[f64], pairs: &[(f64, f64)]) -> (f64, f64) {
    let r = estimates.len();
    if r < 2 || pairs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m_e = mean(estimates);
    let s2 = estimates.iter().map(|e| (e - m_e).powi(2)).sum::<f64>() / (r - 1) as f64;
    let v: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let m = mean(&v);
    let vrb = m / s2 - 1.0;
    let q = pairs.len() as f64;
    let sq: Vec<f64> = pairs.iter().map(|p| (p.0 - m_e).powi(2)).collect();
    let m_sq = mean(&sq);
    let var_m = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / q / q;
    let mu4 = estimates.iter().map(|e| (e - m_e).powi(4)).sum::<f64>() / r as f64;
    let var_s2 = (mu4 - s2 * s2).max(0.0) / r as f64;
    let cov = v.iter().zip(&sq).map(|(a, b)| (a - m) * (b - m_sq)).sum::<f64>() / q / q;
    let var = var_m / s2.powi(2) + m * m * var_s2 / s2.powi(4) - 2.0 * m * cov / s2.powi(3);
    (vrb, var.max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannWhitney {
    /// U statistic of the first group.
    pub u: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// Largest pooled size for the exact null distribution.
const EXACT_POOLED_LIMIT: usize = 400;
/// Largest smaller-group size for the exact null distribution.
const EXACT_GROUP_LIMIT: usize = 20;

/// Two-sided Mann-Whitney U test. Exact permutation distribution of the
/// midrank sum when the smaller group has at most 20 values (and the pooled
/// sample at most 400), otherwise the normal approximation with tie and
/// continuity corrections.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("Mann-Whitney needs two nonempty groups".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Input("Mann-Whitney input contains NaN".into()));
    }
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let mut pooled: Vec<(f64, bool)> = a.iter().map(|&v| (v, true)).chain(b.iter().map(|&v| (v, false))).collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    // Doubled midranks are integers.
    let mut ranks2 = vec![0usize; n];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        for r in &mut ranks2[i..=j] {
            *r = i + j + 2;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    let s2_a: usize = (0..n).filter(|&k| pooled[k].1).map(|k| ranks2[k]).sum();
    let u = s2_a as f64 / 2.0 - (na * (na + 1)) as f64 / 2.0;
    let mu = (na * nb) as f64 / 2.0;

    if na.min(nb) <= EXACT_GROUP_LIMIT && n <= EXACT_POOLED_LIMIT {
        let k = na.min(nb);
        let s2_obs = if k == na { s2_a } else { n * (n + 1) - s2_a };
        let expected2 = k * (n + 1);
        let max_sum = ranks2.iter().rev().take(k).sum::<usize>();
        // counts[j][s]: subsets of size j with doubled rank sum s.
        let mut counts = vec![vec![0f64; max_sum + 1]; k + 1];
        counts[0][0] = 1.0;
        for &r in &ranks2 {
            for j in (1..=k).rev() {
                let (lo, hi) = counts.split_at_mut(j);
                for s in (r..=max_sum).rev() {
                    let add = lo[j - 1][s - r];
                    if add != 0.0 {
                        hi[0][s] += add;
                    }
                }
            }
        }
        let total: f64 = counts[k].iter().sum();
        let dev = (s2_obs as i64 - expected2 as i64).abs();
        let extreme: f64 = counts[k]
            .iter()
            .enumerate()
            .filter(|(s, _)| (*s as i64 - expected2 as i64).abs() >= dev)
            .map(|(_, c)| c)
            .sum();
        return Ok(MannWhitney { u, p: (extreme / total).min(1.0) });
    }

    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1)) as f64;
    let var = (na * nb) as f64 / 12.0 * ((n + 1) as f64 - tie_term);
    if var <= 0.0 {
        return Ok(MannWhitney { u, p: 1.0 });
    }
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(MannWhitney { u, p: (2.0 * (1.0 - normal.cdf(z))).min(1.0) })
}

/// Everything one replicate produces for a data cell.
struct ReplicateRun {
    outcomes: Vec<ReplicateOutcome>,
    failures: Vec<FailureRecord>,
}

/// Simulated data for one (cell, replicate).
pub struct SimulatedSample {
    pub network: PopulationNetwork,
    pub dataset: Dataset,
}

/// Draws the population network, covariate, effects and outcome, runs RDS
/// and returns the observed dataset. Streams depend only on the master
/// seed, the cell label and the replicate index.
pub fn simulate_replicate(cfg: &StudyConfig, cell: &DataCell, beta0: f64, rep: usize) -> Result<SimulatedSample> {
    let seed = cfg.master_seed;
    let ck = cell.key();
    let r = rep as u64;
    let net_rep = if cfg.fixed_network { 0 } else { r };
    let network = generate_population(&cfg.network, derive_seed(seed, &[label_key("network"), net_rep]))?;
    let mut params = cfg.params(cell);
    params.beta0 = beta0;
    let x = gen_covariate(
        &cfg.covariate_spec(cell),
        &network.degrees(),
        &mut named_stream(seed, "covariate", &[ck, r]),
    )?;
    let delta = sample_network_effects(
        &network,
        params.sigma2,
        params.rho,
        params.sar_policy,
        &mut named_stream(seed, "effects", &[ck, r]),
    )?;
    let out = gen_outcomes(&network, &x, &delta, &params, &mut named_stream(seed, "outcome", &[ck, r]))?;
    let tree = run_rds(&network, &cfg.rds(cell.f), &mut named_stream(seed, "sampling", &[ck, r]))?;
    let dataset = Dataset::from_population(&tree, &x, &out.y);
    Ok(SimulatedSample { network, dataset })
}

/// Intercept used for a cell: calibrated for logit cells when a target
/// prevalence is set, the configured β0 otherwise.
pub fn cell_intercept(cfg: &StudyConfig, cell: &DataCell) -> Result<f64> {
    match (cell.link, cfg.dgp.target_prevalence) {
        (Link::Logit, Some(p)) => {
            let ck = cell.key();
            let net = generate_population(&cfg.network, derive_seed(cfg.master_seed, &[label_key("calibrate-network"), ck]))?;
            calibrate_intercept(
                p,
                &cfg.params(cell),
                &cfg.covariate_spec(cell),
                &net,
                &mut named_stream(cfg.master_seed, "calibrate", &[ck]),
            )
        }
        _ => Ok(cfg.dgp.beta0),
    }
}

fn run_replicate(
    cfg: &StudyConfig,
    cell: &DataCell,
    beta0: f64,
    models: &[(Clustering, WeightScheme)],
    rep: usize,
) -> ReplicateRun {
    let label = cell.label();
    let failed = |model: &str, e: &Error| FailureRecord {
        cell: label.clone(),
        replicate: rep,
        model: model.to_string(),
        message: e.to_string(),
    };
    let sample = match simulate_replicate(cfg, cell, beta0, rep) {
        Ok(s) => s,
        Err(e) => {
            return ReplicateRun {
                outcomes: vec![ReplicateOutcome::default(); models.len()],
                failures: vec![failed("*", &e)],
            }
        }
    };
    let tree = match sample.dataset.tree() {
        Ok(t) => t,
        Err(e) => {
            return ReplicateRun {
                outcomes: vec![ReplicateOutcome::default(); models.len()],
                failures: vec![failed("*", &e)],
            }
        }
    };
    let true_n = sample.network.total_size();
    let truth = cfg.dgp.beta1;
    let ck = cell.key();
    let r = rep as u64;
    let mut outcomes = Vec::with_capacity(models.len());
    let mut failures = Vec::new();
    for (clustering, scheme) in models {
        let mk = model_key(*clustering, scheme);
        let model_name = format!("{}/{}", clustering.name(), scheme.label());
        let mut spec = ModelSpec::new(cell.link, *clustering, *scheme);
        spec.include_homophily_term = cfg.models.include_homophily_term;
        let mut wrng = named_stream(cfg.master_seed, "weights", &[ck, r, mk]);
        let fit = match fit_dataset(&sample.dataset, &spec, true_n, &cfg.ss, &mut wrng) {
            Ok(f) => f,
            Err(e) => {
                failures.push(failed(&model_name, &e));
                outcomes.push(ReplicateOutcome::default());
                continue;
            }
        };
        let j = fit.index(TARGET_TERM).expect("target term is always in the design");
        let (lo, hi) = wald_ci(&fit, cfg.level)[j];
        let mut outcome = ReplicateOutcome {
            estimate: Some(fit.coefficients[j]),
            model_variance: fit.vcov[(j, j)],
            covered: lo <= truth && truth <= hi,
            tree: None,
            neighborhood: None,
        };
        if let Some(bg) = &cfg.bootstrap {
            for &method in &bg.methods {
                let bcfg = BootstrapConfig {
                    method,
                    replicates: bg.replicates,
                    level: cfg.level,
                    rng_seed: derive_seed(cfg.master_seed, &[label_key("bootstrap"), ck, r, mk, label_key(method.name())]),
                    replacement: bg.replacement,
                    neighborhood_variant: bg.neighborhood_variant,
                };
                let refit = |d: &Dataset, rng: &mut crate::rng::StreamRng| fit_dataset(d, &spec, true_n, &cfg.ss, rng);
                let summary = match bootstrap_fit(&sample.dataset, &tree, &fit, &bcfg, refit) {
                    Ok(b) if !b.unreliable => {
                        let (blo, bhi) = b.ci[j];
                        Some((b.se[j].powi(2), blo <= truth && truth <= bhi))
                    }
                    Ok(b) => {
                        failures.push(FailureRecord {
                            cell: label.clone(),
                            replicate: rep,
                            model: format!("{model_name}/{}", method.name()),
                            message: format!("{} of {} bootstrap refits failed", b.failed, bg.replicates),
                        });
                        None
                    }
                    Err(e) => {
                        failures.push(failed(&format!("{model_name}/{}", method.name()), &e));
                        None
                    }
                };
                match method {
                    Method::Tree => outcome.tree = summary,
                    Method::Neighborhood => outcome.neighborhood = summary,
                }
            }
        }
        outcomes.push(outcome);
    }
    ReplicateRun { outcomes, failures }
}

/// Collapses the per-replicate outcomes of one model cell into a row.
pub fn summarize_cell(
    cell: &DataCell,
    clustering: Clustering,
    scheme: &WeightScheme,
    beta0: f64,
    truth: f64,
    outcomes: &[ReplicateOutcome],
    bootstrap_methods: &[Method],
) -> ReportRow {
    let replicates = outcomes.len();
    let ok: Vec<&ReplicateOutcome> = outcomes.iter().filter(|o| o.estimate.is_some()).collect();
    let estimates: Vec<f64> = ok.iter().map(|o| o.estimate.unwrap()).collect();
    let r_eff = estimates.len();
    let nan = f64::NAN;
    let (rb, rb_relative) = if r_eff > 0 { metric_relative_bias(&estimates, truth) } else { (nan, truth != 0.0) };
    let ci = if r_eff > 0 { ok.iter().filter(|o| o.covered).count() as f64 / r_eff as f64 } else { nan };
    let var_empirical = if r_eff > 1 {
        let m = mean(&estimates);
        estimates.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (r_eff - 1) as f64
    } else {
        nan
    };
    let model_pairs: Vec<(f64, f64)> = ok.iter().map(|o| (o.estimate.unwrap(), o.model_variance)).collect();
    let (var_rb_model, var_rb_model_se) = variance_relative_bias(&estimates, &model_pairs);

    let boot = |pick: fn(&ReplicateOutcome) -> Option<(f64, bool)>, method: Method| {
        if !bootstrap_methods.contains(&method) {
            return (None, None, 0, None, None);
        }
        let with: Vec<(f64, (f64, bool))> = ok.iter().filter_map(|o| pick(o).map(|b| (o.estimate.unwrap(), b))).collect();
        let n = with.len();
        if n == 0 {
            return (Some(nan), Some(nan), 0, Some(nan), Some(nan));
        }
        let cov = with.iter().filter(|w| w.1 .1).count() as f64 / n as f64;
        let pairs: Vec<(f64, f64)> = with.iter().map(|w| (w.0, w.1 .0)).collect();
        let (vrb, se) = variance_relative_bias(&estimates, &pairs);
        (Some(cov), Some(coverage_half_width(cov, n)), n, Some(vrb), Some(se))
    };
    let (tci, tci_hw, tci_n, var_rb_tree, var_rb_tree_se) = boot(|o| o.tree, Method::Tree);
    let (nci, nci_hw, nci_n, var_rb_nbhd, var_rb_nbhd_se) = boot(|o| o.neighborhood, Method::Neighborhood);

    ReportRow {
        f: cell.f,
        rho: cell.rho,
        rho_d: cell.rho_d,
        link: cell.link.name().to_string(),
        clustering: clustering.name().to_string(),
        scheme: scheme.label().to_string(),
        beta0,
        truth,
        replicates,
        r_effective: r_eff,
        mean_estimate: if r_eff > 0 { mean(&estimates) } else { nan },
        rb,
        rb_relative,
        rmse: if r_eff > 0 { rmse(&estimates, truth) } else { nan },
        ci,
        ci_hw: if r_eff > 0 { coverage_half_width(ci, r_eff) } else { nan },
        tci,
        tci_hw,
        tci_n,
        nci,
        nci_hw,
        nci_n,
        var_empirical,
        var_rb_model,
        var_rb_model_se,
        var_rb_tree,
        var_rb_tree_se,
        var_rb_nbhd,
        var_rb_nbhd_se,
        flagged: (replicates - r_eff) as f64 > CELL_FAILURE_LIMIT * replicates as f64,
    }
}

/// Runs every (cell, replicate) in parallel and aggregates in grid order.
pub fn run_study(cfg: &StudyConfig) -> Result<SimReport> {
    cfg.validate()?;
    let cells = cfg.cells();
    let models = cfg.model_specs()?;
    let intercepts: Vec<Result<f64>> = cells.par_iter().map(|c| cell_intercept(cfg, c)).collect();
    let intercepts = intercepts.into_iter().collect::<Result<Vec<f64>>>()?;
    let tasks: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cfg.replicates).map(move |r| (c, r)))
        .collect();
    let runs: Vec<ReplicateRun> = tasks
        .par_iter()
        .map(|&(c, r)| run_replicate(cfg, &cells[c], intercepts[c], &models, r))
        .collect();
    let methods: Vec<Method> = cfg.bootstrap.as_ref().map(|b| b.methods.clone()).unwrap_or_default();
    let mut report = SimReport::default();
    for (c, cell) in cells.iter().enumerate() {
        let cell_runs = &runs[c * cfg.replicates..(c + 1) * cfg.replicates];
        for (m, (clustering, scheme)) in models.iter().enumerate() {
            let outcomes: Vec<ReplicateOutcome> = cell_runs.iter().map(|run| run.outcomes[m].clone()).collect();
            report
                .rows
                .push(summarize_cell(cell, *clustering, scheme, intercepts[c], cfg.dgp.beta1, &outcomes, &methods));
        }
        for run in cell_runs {
            report.failures.extend(run.failures.iter().cloned());
        }
    }
    Ok(report)
}

/// Path of the full-precision companion of a rounded report.
pub fn full_report_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    path.with_file_name(format!("{stem}_full.csv"))
}


fn fmt2(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        // Avoid "-0.00".
        let s = format!("{v:.2}");
        if s == "-0.00" { "0.00".to_string() } else { s }
    }
}

fn fmt2_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, fmt2)
}

/// Writes the 2-decimal table to `path` and the full-precision rows to
/// [`full_report_path`]. Both files always carry their header.
pub fn write_report(report: &SimReport, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    w.write_record(ROUNDED_HEADER).map_err(|e| Error::csv(path, e))?;
    for r in &report.rows {
        w.write_record([
            r.f.to_string(),
            r.rho.to_string(),
            r.rho_d.to_string(),
            r.link.clone(),
            r.clustering.clone(),
            r.scheme.clone(),
            fmt2(r.rb),
            fmt2(r.rmse),
            fmt2(r.ci),
            fmt2_opt(r.tci),
            fmt2_opt(r.nci),
            fmt2(r.var_rb_model),
            fmt2_opt(r.var_rb_tree),
            fmt2_opt(r.var_rb_nbhd),
            r.r_effective.to_string(),
            r.flagged.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let full = full_report_path(path);
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&full)
        .map_err(|e| Error::csv(&full, e))?;
    w.write_record(FULL_HEADER).map_err(|e| Error::csv(&full, e))?;
    for r in &report.rows {
        w.serialize(r).map_err(|e| Error::csv(&full, e))?;
    }
    w.flush().map_err(|e| Error::io(&full, e))?;
    Ok(())
}

/// Reads a full-precision report written by [`write_report`].
pub fn read_full_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| Error::csv(path, e))).collect()
}

/// Writes replicate failures as `cell,replicate,model,message`.
pub fn write_failures(failures: &[FailureRecord], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    w.write_record(["cell", "replicate", "model", "message"]).map_err(|e| Error::csv(path, e))?;
    for f in failures {
        w.serialize(f).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a study config from JSON.
pub fn load_config(path: &Path) -> Result<StudyConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn save_config(cfg: &StudyConfig, path: &Path) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
    writeln!(f, "{text}").map_err(|e| Error::io(path, e))
}
