//! Data-generating model: covariates, SAR random effects and outcomes on the
//! full population network.
//!
//! The linear predictor of node `j` in cluster `i` is
//! `β0 + β1·x_ij + γ·mean_{k~j} x_ik + δ_ij`, where `δ_i` solves the SAR system
//! `(I − ρS_i) δ_i = u_i` with `u_i ~ N(0, σ²I)`.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Bernoulli, Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{spectral_radius, ClusterGraph, PopulationNetwork, DEFAULT_SPECTRAL_TOL};
use crate::rng::StreamRng;

/// Largest linear predictor accepted for Poisson outcomes.
pub const POISSON_ETA_CAP: f64 = 30.0;
/// Largest condition number of `I − ρS` accepted by the SAR solver.
pub const SAR_CONDITION_CAP: f64 = 1e8;
pub const CG_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Log,
    Logit,
}

impl Link {
    pub fn name(self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Log => "log",
            Link::Logit => "logit",
        }
    }

    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Log => eta.exp(),
            Link::Logit => expit(eta),
        }
    }
}

impl std::str::FromStr for Link {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" | "linear" | "gaussian" => Ok(Link::Identity),
            "log" | "poisson" => Ok(Link::Log),
            "logit" | "logistic" | "binomial" => Ok(Link::Logit),
            other => Err(Error::Config(format!("unknown link `{other}`"))),
        }
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Which condition on `ρ` the SAR draw enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SarPolicy {
    /// `|ρ|·λ_max(S) < 1`, so `I − ρS` is positive definite.
    Stationary,
    /// `I − ρS` only has to be invertible (condition number below
    /// [`SAR_CONDITION_CAP`]).
    #[default]
    Invertible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpParams {
    pub beta0: f64,
    pub beta1: f64,
    pub gamma: f64,
    pub sigma2: f64,
    pub rho: f64,
    pub link: Link,
    /// Residual variance of the identity-link outcome.
    #[serde(default = "one")]
    pub residual_variance: f64,
    #[serde(default)]
    pub sar_policy: SarPolicy,
}

fn one() -> f64 {
    1.0
}

impl DgpParams {
    /// First-study parameters `(β0, β1, γ, σ²) = (0, 2, 1.5, 1)`.
    pub fn homophily_study(rho: f64, link: Link) -> Self {
        DgpParams {
            beta0: 0.0,
            beta1: 2.0,
            gamma: 1.5,
            sigma2: 1.0,
            rho,
            link,
            residual_variance: 1.0,
            sar_policy: SarPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0) {
            return Err(Error::Config(format!("σ² must be positive, got {}", self.sigma2)));
        }
        if self.link == Link::Identity && !(self.residual_variance >= 0.0) {
            return Err(Error::Config("residual variance must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub mean: f64,
    pub sd: f64,
    #[serde(default)]
    pub degree_correlation: f64,
}

impl CovariateSpec {
    pub fn reference(degree_correlation: f64) -> Self {
        CovariateSpec {
            mean: 3.0,
            sd: 1.5,
            degree_correlation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sd > 0.0) {
            return Err(Error::Config("covariate sd must be positive".into()));
        }
        if !(self.degree_correlation.abs() < 1.0) {
            return Err(Error::Config("degree correlation must lie in (-1, 1)".into()));
        }
        Ok(())
    }
}

/// `X = mean + sd·(ρ_d·z_d + sqrt(1 − ρ_d²)·Z)` with `z_d` the standardized
/// degree vector; plain i.i.d. normal when `ρ_d = 0`.
pub fn gen_covariate(spec: &CovariateSpec, degrees: &[usize], rng: &mut StreamRng) -> Result<Vec<f64>> {
    spec.validate()?;
    if degrees.is_empty() {
        return Err(Error::Input("degree vector is empty".into()));
    }
    let n = degrees.len() as f64;
    let rd = spec.degree_correlation;
    let z_d: Vec<f64> = if rd != 0.0 {
        let mean = degrees.iter().sum::<usize>() as f64 / n;
        let var = degrees.iter().map(|&d| (d as f64 - mean).powi(2)).sum::<f64>() / n;
        if var <= 0.0 {
            return Err(Error::Config(
                "degree-correlated covariate needs non-constant degrees".into(),
            ));
        }
        let sd = var.sqrt();
        degrees.iter().map(|&d| (d as f64 - mean) / sd).collect()
    } else {
        vec![0.0; degrees.len()]
    };
    let noise = (1.0 - rd * rd).sqrt();
    Ok(z_d
        .iter()
        .map(|&zd| {
            let z: f64 = StandardNormal.sample(rng);
            spec.mean + spec.sd * (rd * zd + noise * z)
        })
        .collect())
}

/// `y = (I − ρS) x` for the cluster adjacency `S`.
fn apply_sar(cluster: &ClusterGraph, rho: f64, x: &[f64], out: &mut [f64]) {
    for (v, o) in out.iter_mut().enumerate() {
        let s: f64 = cluster.neighbors(v).iter().map(|&w| x[w]).sum();
        *o = x[v] - rho * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Diagonally preconditioned conjugate gradient for a symmetric positive
/// definite operator.
fn pcg(
    apply: impl Fn(&[f64], &mut [f64]),
    diag: &[f64],
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Option<Vec<f64>> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return Some(x);
    }
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(ri, d)| ri / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for _ in 0..max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return None;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= tol * b_norm {
            return Some(x);
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    None
}

/// Solver for `(I − ρS) δ = u` on one cluster, validated once and reusable.
pub struct SarSolver<'a> {
    cluster: &'a ClusterGraph,
    rho: f64,
    /// `I − ρS` is positive definite; otherwise the normal equations are used.
    definite: bool,
    condition: f64,
}

impl<'a> SarSolver<'a> {
    pub fn new(cluster: &'a ClusterGraph, rho: f64, policy: SarPolicy) -> Result<Self> {
        let fail = |reason: String| Error::SarPrecondition { cluster: 0, reason };
        let radius = spectral_radius(cluster, DEFAULT_SPECTRAL_TOL)?;
        let scaled = rho.abs() * radius;
        if scaled < 1.0 {
            let condition = (1.0 + scaled) / (1.0 - scaled);
            if condition > SAR_CONDITION_CAP {
                return Err(fail(format!("condition number {condition:.3e} exceeds cap")));
            }
            return Ok(SarSolver { cluster, rho, definite: true, condition });
        }
        if policy == SarPolicy::Stationary {
            return Err(fail(format!(
                "|ρ|·spectral radius = {scaled:.4} is not below 1"
            )));
        }
        let n = cluster.size();
        let s = DMatrix::<f64>::from_fn(n, n, |i, j| if cluster.has_edge(i, j) { 1.0 } else { 0.0 });
        let eig = s.symmetric_eigen().eigenvalues;
        let mags: Vec<f64> = eig.iter().map(|l: &f64| (1.0 - rho * l).abs()).collect();
        let lo = mags.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = mags.iter().cloned().fold(0.0, f64::max);
        let condition = hi / lo;
        if !(condition <= SAR_CONDITION_CAP) {
            return Err(fail(format!(
                "I − ρS is near-singular (condition number {condition:.3e})"
            )));
        }
        Ok(SarSolver { cluster, rho, definite: false, condition })
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn solve(&self, u: &[f64]) -> Result<Vec<f64>> {
        let n = self.cluster.size();
        let max_iter = 20 * n + 100;
        let out = if self.definite {
            let diag = vec![1.0; n];
            pcg(
                |x, y| apply_sar(self.cluster, self.rho, x, y),
                &diag,
                u,
                CG_TOLERANCE,
                max_iter,
            )
        } else {
            // (I − ρS)² δ = (I − ρS) u; the operator is symmetric, so its
            // square is positive definite whenever it is invertible.
            let mut rhs = vec![0.0; n];
            apply_sar(self.cluster, self.rho, u, &mut rhs);
            let diag: Vec<f64> = (0..n)
                .map(|v| 1.0 + self.rho * self.rho * self.cluster.degree(v) as f64)
                .collect();
            let tmp = std::cell::RefCell::new(vec![0.0; n]);
            let tol = CG_TOLERANCE / self.condition.max(1.0);
            pcg(
                |x, y| {
                    let mut t = tmp.borrow_mut();
                    apply_sar(self.cluster, self.rho, x, &mut t);
                    apply_sar(self.cluster, self.rho, &t, y);
                },
                &diag,
                &rhs,
                tol.max(1e-15),
                max_iter * 4,
            )
        };
        out.ok_or_else(|| Error::SarPrecondition {
            cluster: 0,
            reason: "conjugate gradient did not converge".into(),
        })
    }
}

/// One SAR draw `δ = (I − ρS)^{-1} u`, `u ~ N(0, σ²I)`.
pub fn sample_sar_effects(
    cluster: &ClusterGraph,
    sigma2: f64,
    rho: f64,
    policy: SarPolicy,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    if cluster.is_empty() {
        return Ok(Vec::new());
    }
    let solver = SarSolver::new(cluster, rho, policy)?;
    let normal = Normal::new(0.0, sigma2.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let u: Vec<f64> = (0..cluster.size()).map(|_| normal.sample(rng)).collect();
    solver.solve(&u)
}

/// SAR draws for every cluster, concatenated in global node order. Errors
/// name the offending cluster.
pub fn sample_network_effects(
    net: &PopulationNetwork,
    sigma2: f64,
    rho: f64,
    policy: SarPolicy,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(net.total_size());
    for (i, c) in net.clusters().iter().enumerate() {
        let d = sample_sar_effects(c, sigma2, rho, policy, rng).map_err(|e| match e {
            Error::SarPrecondition { reason, .. } => Error::SarPrecondition { cluster: i, reason },
            other => other,
        })?;
        out.extend(d);
    }
    Ok(out)
}

/// `σ² W Wᵀ` with `W = (I − ρS)^{-1}`, built column by column through the
/// same solver used for sampling.
pub fn sar_covariance(cluster: &ClusterGraph, sigma2: f64, rho: f64, policy: SarPolicy) -> Result<DMatrix<f64>> {
    let n = cluster.size();
    let solver = SarSolver::new(cluster, rho, policy)?;
    let mut w = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = solver.solve(&e)?;
        w.set_column(j, &DVector::from_vec(col));
    }
    Ok(&w * w.transpose() * sigma2)
}

/// Mean of `x` over the node's neighbors; `None` for isolated nodes.
pub fn neighbor_mean(x: &[f64], cluster: &ClusterGraph, node: usize) -> Option<f64> {
    let nb = cluster.neighbors(node);
    if nb.is_empty() {
        None
    } else {
        Some(nb.iter().map(|&w| x[w]).sum::<f64>() / nb.len() as f64)
    }
}

/// Neighbor means for every node of the network (global order). Isolated
/// nodes get 0 and are flagged.
pub fn network_neighbor_means(net: &PopulationNetwork, x: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let mut means = Vec::with_capacity(net.total_size());
    let mut isolated = Vec::with_capacity(net.total_size());
    for (i, c) in net.clusters().iter().enumerate() {
        let off = net.offset(i);
        let xc = &x[off..off + c.size()];
        for v in 0..c.size() {
            let m = neighbor_mean(xc, c, v);
            means.push(m.unwrap_or(0.0));
            isolated.push(m.is_none());
        }
    }
    (means, isolated)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcomes {
    pub y: Vec<f64>,
    pub eta: Vec<f64>,
    /// Nodes whose homophily term was set to zero because they have no ties.
    pub isolated: Vec<bool>,
}

/// Linear predictor without the intercept.
pub fn linear_predictor_rest(
    net: &PopulationNetwork,
    x: &[f64],
    delta: &[f64],
    params: &DgpParams,
) -> (Vec<f64>, Vec<bool>) {
    let (nm, isolated) = network_neighbor_means(net, x);
    let eta = (0..net.total_size())
        .map(|j| params.beta1 * x[j] + params.gamma * nm[j] + delta[j])
        .collect();
    (eta, isolated)
}

pub fn gen_outcomes(
    net: &PopulationNetwork,
    x: &[f64],
    delta: &[f64],
    params: &DgpParams,
    rng: &mut StreamRng,
) -> Result<Outcomes> {
    params.validate()?;
    if x.len() != net.total_size() || delta.len() != net.total_size() {
        return Err(Error::Input("covariate and effect vectors must cover the population".into()));
    }
    let (rest, isolated) = linear_predictor_rest(net, x, delta, params);
    let eta: Vec<f64> = rest.iter().map(|r| params.beta0 + r).collect();
    let y = match params.link {
        Link::Identity => {
            let sd = params.residual_variance.sqrt();
            eta.iter()
                .map(|&e| {
                    let z: f64 = StandardNormal.sample(rng);
                    e + sd * z
                })
                .collect()
        }
        Link::Log => {
            if let Some(max) = eta.iter().cloned().reduce(f64::max).filter(|&m| m > POISSON_ETA_CAP) {
                return Err(Error::Generation(format!(
                    "Poisson linear predictor reaches {max:.2} (cap {POISSON_ETA_CAP}); review the parameters"
                )));
            }
            eta.iter()
                .map(|&e| {
                    Poisson::new(e.exp())
                        .map(|p| p.sample(rng))
                        .map_err(|err| Error::Generation(err.to_string()))
                })
                .collect::<Result<Vec<f64>>>()?
        }
        Link::Logit => eta
            .iter()
            .map(|&e| {
                let b = Bernoulli::new(expit(e)).expect("expit lies in [0, 1]");
                if b.sample(rng) { 1.0 } else { 0.0 }
            })
            .collect(),
    };
    Ok(Outcomes { y, eta, isolated })
}

/// Draws used for intercept calibration.
pub const CALIBRATION_DRAWS: usize = 100_000;

/// Finds the logit intercept giving the target prevalence by bisection on
/// the expected prevalence over at least [`CALIBRATION_DRAWS`] synthetic
/// linear predictors (fresh covariates and SAR effects on `net`). The draws
/// are fixed up front, so prevalence is a smooth increasing function of β0.
pub fn calibrate_intercept(
    target_prevalence: f64,
    params: &DgpParams,
    covariate: &CovariateSpec,
    net: &PopulationNetwork,
    rng: &mut StreamRng,
) -> Result<f64> {
    if !(target_prevalence > 0.0 && target_prevalence < 1.0) {
        return Err(Error::Config(format!(
            "target prevalence {target_prevalence} outside (0, 1)"
        )));
    }
    if params.link != Link::Logit {
        return Err(Error::Config("intercept calibration applies to the logit link".into()));
    }
    let degrees = net.degrees();
    let mut rest = Vec::with_capacity(CALIBRATION_DRAWS + net.total_size());
    while rest.len() < CALIBRATION_DRAWS {
        let x = gen_covariate(covariate, &degrees, rng)?;
        let delta = sample_network_effects(net, params.sigma2, params.rho, params.sar_policy, rng)?;
        rest.extend(linear_predictor_rest(net, &x, &delta, params).0);
    }
    let prevalence = |b0: f64| rest.iter().map(|r| expit(b0 + r)).sum::<f64>() / rest.len() as f64;
    let (mut lo, mut hi) = (-100.0_f64, 100.0_f64);
    let (p_lo, p_hi) = (prevalence(lo), prevalence(hi));
    if !(p_lo < target_prevalence && target_prevalence < p_hi) {
        return Err(Error::InterceptBracket { lo, hi, p_lo, p_hi, target: target_prevalence });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let p = prevalence(mid);
        if (p - target_prevalence).abs() < 1e-9 || hi - lo < 1e-12 {
            return Ok(mid);
        }
        if p < target_prevalence {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
