//! Weighted random-intercept regression: linear (REML), Poisson and logistic
//! (Laplace approximation), with clustering by seed or by recruiter.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::dataset::Dataset;
use crate::dgp::{expit, Link};
use crate::error::{Error, Result};
use crate::optim::{maximize_profile, ProfileMax};
use crate::rng::StreamRng;
use crate::weights::{apply_scheme_to_degrees, SsOptions, WeightScheme};

/// Lower bound of the random-intercept variance search; estimates at the
/// bound are reported as exactly zero.
pub const VARIANCE_FLOOR: f64 = 1e-10;
/// Upper bound of the variance ratio search for the linear model.
pub const THETA_CEILING: f64 = 1e6;
/// Largest |η| tolerated before a logistic fit is declared separated.
pub const ETA_CAP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clustering {
    #[default]
    Seed,
    Recruiter,
}

impl Clustering {
    pub fn name(self) -> &'static str {
        match self {
            Clustering::Seed => "seed",
            Clustering::Recruiter => "recruiter",
        }
    }
}

impl std::str::FromStr for Clustering {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "seed" | "s" => Ok(Clustering::Seed),
            "recruiter" | "r" => Ok(Clustering::Recruiter),
            other => Err(Error::Config(format!("unknown clustering `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub link: Link,
    pub clustering: Clustering,
    #[serde(default)]
    pub weight_scheme: WeightScheme,
    #[serde(default)]
    pub include_homophily_term: bool,
    #[serde(default = "default_columns")]
    pub fixed_effect_columns: Vec<String>,
}

fn default_columns() -> Vec<String> {
    vec!["x".to_string()]
}

impl ModelSpec {
    pub fn new(link: Link, clustering: Clustering, weight_scheme: WeightScheme) -> Self {
        ModelSpec {
            link,
            clustering,
            weight_scheme,
            include_homophily_term: false,
            fixed_effect_columns: default_columns(),
        }
    }
}

/// Response, design matrix, compact group ids and normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub y: Vec<f64>,
    pub x: DMatrix<f64>,
    pub names: Vec<String>,
    pub groups: Vec<usize>,
    pub n_groups: usize,
    pub weights: Vec<f64>,
}

impl Design {
    /// Validates the pieces and normalizes weights to sum to `n`.
    pub fn new(
        y: Vec<f64>,
        x: DMatrix<f64>,
        names: Vec<String>,
        groups: &[usize],
        weights: &[f64],
    ) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || groups.len() != n || weights.len() != n || names.len() != x.ncols() {
            return Err(Error::Input("design pieces have inconsistent lengths".into()));
        }
        if let Some(i) = y.iter().chain(x.iter()).position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite value in design (entry {i})")));
        }
        if let Some((row, &weight)) = weights.iter().enumerate().find(|(_, w)| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::NonPositiveWeight { row, weight });
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.iter().map(|w| w * n as f64 / total).collect();
        let (groups, n_groups) = compact_groups(groups);
        let rank = x.clone().svd(false, false).rank(1e-10 * x.amax().max(1.0) * (n as f64).sqrt());
        if rank < x.ncols() {
            return Err(Error::SingularDesign { rank, cols: x.ncols() });
        }
        Ok(Design { y, x, names, groups, n_groups, weights })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn cols(&self) -> usize {
        self.x.ncols()
    }

    fn rows_by_group(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_groups];
        for (i, &g) in self.groups.iter().enumerate() {
            out[g].push(i);
        }
        out
    }
}

fn compact_groups(raw: &[usize]) -> (Vec<usize>, usize) {
    let mut map: HashMap<usize, usize> = HashMap::new();
    let ids = raw
        .iter()
        .map(|&g| {
            let next = map.len();
            *map.entry(g).or_insert(next)
        })
        .collect();
    (ids, map.len())
}

/// Group key per row. Under recruiter clustering a recruit belongs to its
/// recruiter's group and each seed forms its own group.
pub fn group_keys(dataset: &Dataset, clustering: Clustering) -> Vec<usize> {
    // Seeds get keys above every node id so they never merge with the group
    // of their own recruits.
    let offset = dataset.rows.iter().map(|r| r.recruit.node_id).max().unwrap_or(0) + 1;
    dataset
        .rows
        .iter()
        .map(|r| match clustering {
            Clustering::Seed => r.recruit.seed_id,
            Clustering::Recruiter => match r.recruit.recruiter_id {
                Some(p) => p,
                None => offset + r.recruit.node_id,
            },
        })
        .collect()
}

/// Mean of `values` over each row's observed recruitment ties (its
/// recruiter and its recruits among the rows). Rows without ties get 0.
pub fn observed_neighbor_mean(dataset: &Dataset, values: &[f64]) -> Vec<f64> {
    let mut pos: HashMap<usize, usize> = HashMap::new();
    for (i, r) in dataset.rows.iter().enumerate() {
        pos.entry(r.recruit.node_id).or_insert(i);
    }
    let n = dataset.len();
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for (i, r) in dataset.rows.iter().enumerate() {
        if let Some(&p) = r.recruit.recruiter_id.and_then(|id| pos.get(&id)) {
            sum[i] += values[p];
            count[i] += 1;
            sum[p] += values[i];
            count[p] += 1;
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}

/// Intercept, the requested covariates and optionally the observed-tie
/// neighbor mean of the first covariate.
pub fn build_design(dataset: &Dataset, spec: &ModelSpec, weights: &[f64]) -> Result<Design> {
    if weights.len() != dataset.len() {
        return Err(Error::Input("one weight per row is required".into()));
    }
    let n = dataset.len();
    let mut names = vec!["(Intercept)".to_string()];
    let mut columns: Vec<Vec<f64>> = vec![vec![1.0; n]];
    for name in &spec.fixed_effect_columns {
        let j = dataset
            .column_index(name)
            .ok_or_else(|| Error::MissingColumn(name.clone()))?;
        columns.push(dataset.rows.iter().map(|r| r.covariates[j]).collect());
        names.push(name.clone());
    }
    if spec.include_homophily_term {
        let first = spec
            .fixed_effect_columns
            .first()
            .ok_or_else(|| Error::Config("homophily term needs a covariate".into()))?;
        let nm = observed_neighbor_mean(dataset, &columns[1]);
        columns.push(nm);
        names.push(format!("nbr_mean_{first}"));
    }
    let x = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);
    Design::new(
        dataset.response(),
        x,
        names,
        &group_keys(dataset, spec.clustering),
        weights,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub link: Link,
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub vcov: DMatrix<f64>,
    pub se: Vec<f64>,
    /// Random-intercept standard deviation.
    pub sigma0: f64,
    /// Residual standard deviation (linear model only).
    pub sigma_res: Option<f64>,
    /// Intraclass correlation; latent scale for logit, absent for log.
    pub icc: Option<f64>,
    pub loglik: f64,
    pub converged: bool,
    /// The variance estimate sits on the zero boundary.
    pub boundary: bool,
    pub n_groups: usize,
}

impl FitResult {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn coef(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.coefficients[i])
    }

    pub fn variance(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.vcov[(i, i)])
    }
}

fn finish_vcov(vcov: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let sym = (&vcov + vcov.transpose()) * 0.5;
    let se = (0..sym.nrows()).map(|i| sym[(i, i)].max(0.0).sqrt()).collect();
    (sym, se)
}

fn check_fit_size(d: &Design) -> Result<()> {
    if d.n_groups < 2 {
        return Err(Error::Input(format!("need at least 2 groups, found {}", d.n_groups)));
    }
    if d.len() <= d.cols() + 2 {
        return Err(Error::Input(format!(
            "need more than {} observations for {} coefficients",
            d.cols() + 2,
            d.cols()
        )));
    }
    Ok(())
}

/// Per-θ pieces of the linear model with `V = σ²(W⁻¹ + θZZᵀ)`.
struct LmmProfile<'a> {
    d: &'a Design,
    rows: Vec<Vec<usize>>,
    /// Σ_i w_i per group.
    wsum: Vec<f64>,
    /// Σ_i log w_i.
    log_w: f64,
}

struct LmmEval {
    beta: DVector<f64>,
    /// `Xᵀ H⁻¹ X` with `H = V/σ²`.
    info: DMatrix<f64>,
    sigma2: f64,
    reml: f64,
    /// Derivative of the restricted log-likelihood in θ.
    d_theta: f64,
}

impl<'a> LmmProfile<'a> {
    fn new(d: &'a Design) -> Self {
        let rows = d.rows_by_group();
        let wsum = rows.iter().map(|r| r.iter().map(|&i| d.weights[i]).sum()).collect();
        let log_w = d.weights.iter().map(|w| w.ln()).sum();
        LmmProfile { d, rows, wsum, log_w }
    }

    fn eval(&self, theta: f64) -> Result<LmmEval> {
        let d = self.d;
        let (n, p) = (d.len(), d.cols());
        let mut info = DMatrix::<f64>::zeros(p, p);
        let mut xty = DVector::<f64>::zeros(p);
        let mut log_det_h = -self.log_w;
        let mut d_log_det_h = 0.0;
        let mut cs = Vec::with_capacity(self.rows.len());
        for (g, rows) in self.rows.iter().enumerate() {
            let s = self.wsum[g];
            let a = theta / (1.0 + theta * s);
            log_det_h += (theta * s).ln_1p();
            d_log_det_h += s / (1.0 + theta * s);
            let mut c = DVector::<f64>::zeros(p);
            let mut cy = 0.0;
            for &i in rows {
                let w = d.weights[i];
                let xi = d.x.row(i).transpose();
                info += &xi * xi.transpose() * w;
                xty += &xi * (w * d.y[i]);
                c += &xi * w;
                cy += w * d.y[i];
            }
            info -= &c * c.transpose() * a;
            xty -= &c * (a * cy);
            cs.push(c);
        }
        let chol = info
            .clone()
            .cholesky()
            .ok_or(Error::SingularDesign { rank: 0, cols: p })?;
        let beta = chol.solve(&xty);
        let log_det_info = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let mut q = 0.0;
        let mut d_q = 0.0;
        let mut d_log_det_info = 0.0;
        for (g, rows) in self.rows.iter().enumerate() {
            let s = self.wsum[g];
            let a = theta / (1.0 + theta * s);
            let mut sr = 0.0;
            for &i in rows {
                let r = d.y[i] - (d.x.row(i) * &beta)[0];
                q += d.weights[i] * r * r;
                sr += d.weights[i] * r;
            }
            q -= a * sr * sr;
            d_q -= (sr / (1.0 + theta * s)).powi(2);
            let ct = &cs[g] / (1.0 + theta * s);
            d_log_det_info -= ct.dot(&chol.solve(&ct));
        }
        let dof = (n - p) as f64;
        let sigma2 = q / dof;
        let reml = -0.5
            * (dof * sigma2.ln() + log_det_h + log_det_info + dof * (1.0 + (2.0 * std::f64::consts::PI).ln()));
        let d_theta = -0.5 * (dof * d_q / q + d_log_det_h + d_log_det_info);
        Ok(LmmEval { beta, info, sigma2, reml, d_theta })
    }
}

fn lmm_result(d: &Design, e: &LmmEval, theta: f64, converged: bool, boundary: bool) -> Result<FitResult> {
    let inv = e
        .info
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularDesign { rank: 0, cols: d.cols() })?;
    let (vcov, se) = finish_vcov(inv * e.sigma2);
    let sigma0_sq = theta * e.sigma2;
    Ok(FitResult {
        link: Link::Identity,
        names: d.names.clone(),
        coefficients: e.beta.iter().copied().collect(),
        vcov,
        se,
        sigma0: sigma0_sq.sqrt(),
        sigma_res: Some(e.sigma2.sqrt()),
        icc: Some(sigma0_sq / (sigma0_sq + e.sigma2)),
        loglik: e.reml,
        converged,
        boundary,
        n_groups: d.n_groups,
    })
}

/// Linear model at a fixed variance ratio `θ = σ0²/σ²`.
pub fn fit_lmm_fixed_theta(d: &Design, theta: f64) -> Result<FitResult> {
    if !(theta >= 0.0) {
        return Err(Error::Input("variance ratio must be non-negative".into()));
    }
    let p = LmmProfile::new(d);
    lmm_result(d, &p.eval(theta)?, theta, true, theta == 0.0)
}

/// Weighted REML fit of `y = Xβ + b_group + ε`, optimized over
/// `log θ ∈ [log 1e-10, log 1e6]`.
pub fn fit_lmm(d: &Design) -> Result<FitResult> {
    check_fit_size(d)?;
    let prof = LmmProfile::new(d);
    let profile = |t: f64| {
        let theta = t.exp();
        prof.eval(theta)
            .ok()
            .filter(|e| e.reml.is_finite())
            .map(|e| (e.reml, theta * e.d_theta))
    };
    let at_zero = prof.eval(0.0)?;
    let (theta, converged) = match maximize_profile(profile, VARIANCE_FLOOR.ln(), THETA_CEILING.ln(), 40, 1e-14) {
        ProfileMax::Lower => return lmm_result(d, &at_zero, 0.0, true, true),
        ProfileMax::Upper => (THETA_CEILING, false),
        ProfileMax::Interior(t) => (t.exp(), true),
    };
    let inner = prof.eval(theta)?;
    if at_zero.reml >= inner.reml {
        return lmm_result(d, &at_zero, 0.0, true, true);
    }
    lmm_result(d, &inner, theta, converged, false)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean, variance function and its derivative at `η`.
fn moments(link: Link, eta: f64) -> (f64, f64, f64) {
    match link {
        Link::Logit => {
            let mu = expit(eta);
            let v = mu * (1.0 - mu);
            (mu, v, v * (1.0 - 2.0 * mu))
        }
        Link::Log => {
            let mu = eta.exp();
            (mu, mu, mu)
        }
        Link::Identity => (eta, 1.0, 0.0),
    }
}

fn unit_loglik(link: Link, y: f64, eta: f64) -> f64 {
    match link {
        // Written without the cancellation in y·η − log(1 + e^η).
        Link::Logit => -((1.0 - y) * softplus(eta) + y * softplus(-eta)),
        Link::Log => y * eta - eta.exp() - ln_gamma(y + 1.0),
        Link::Identity => -0.5 * (y - eta).powi(2),
    }
}

/// Laplace-approximate weighted log-likelihood for a non-identity link.
struct Laplace<'a> {
    d: &'a Design,
    link: Link,
    rows: Vec<Vec<usize>>,
}

struct LaplaceEval {
    value: f64,
    grad: DVector<f64>,
    /// Positive definite approximation of the negative Hessian in β.
    info: DMatrix<f64>,
    /// Largest |xβ|; the group intercepts are bounded by their prior and
    /// left out.
    max_abs_eta: f64,
    /// Partial derivative in τ at fixed β; the total derivative of the
    /// profile once β is at its optimum.
    d_tau: f64,
}

impl<'a> Laplace<'a> {
    fn new(d: &'a Design, link: Link) -> Result<Self> {
        match link {
            Link::Identity => return Err(Error::Config("Laplace fit needs a log or logit link".into())),
            Link::Logit => {
                if let Some(i) = d.y.iter().position(|&y| y != 0.0 && y != 1.0) {
                    return Err(Error::Input(format!("logistic response must be 0/1 (row {i})")));
                }
            }
            Link::Log => {
                if let Some(i) = d.y.iter().position(|&y| y < 0.0 || y.fract() != 0.0) {
                    return Err(Error::Input(format!("Poisson response must be a count (row {i})")));
                }
            }
        }
        Ok(Laplace { d, link, rows: d.rows_by_group() })
    }

    /// Conditional mode of one group intercept: Newton on the score, which
    /// is strictly decreasing in `b`, kept inside a sign bracket with
    /// bisection fallback.
    fn group_mode(&self, rows: &[usize], eta0: &[f64], tau: f64, start: f64) -> Result<f64> {
        let d = self.d;
        let score = |b: f64| -> (f64, f64) {
            let (mut g, mut curv) = (-b / tau, 1.0 / tau);
            for &i in rows {
                let (mu, v, _) = moments(self.link, eta0[i] + b);
                g += d.weights[i] * (d.y[i] - mu);
                curv += d.weights[i] * v;
            }
            (g, curv)
        };
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut b = start;
        for _ in 0..400 {
            let (g, curv) = score(b);
            if g == 0.0 {
                return Ok(b);
            }
            if g > 0.0 {
                lo = b;
            } else {
                hi = b;
            }
            let step = g / curv;
            if step.abs() <= 1e-13 * (1.0 + b.abs()) {
                return Ok(b + step);
            }
            let mut next = b + step;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if !next.is_finite() {
                break;
            }
            if hi - lo <= 1e-13 * (1.0 + b.abs()) {
                return Ok(next);
            }
            b = next;
        }
        Err(Error::IrlsDivergence("random-intercept mode did not converge".into()))
    }

    /// Objective, analytic β-gradient and information at `(β, τ)`. `τ = 0`
    /// is the single-level weighted GLM. `modes` holds warm starts and is
    /// updated in place.
    fn eval(&self, beta: &DVector<f64>, tau: f64, modes: &mut [f64]) -> Result<LaplaceEval> {
        let d = self.d;
        let p = d.cols();
        let eta0: Vec<f64> = (&d.x * beta).iter().copied().collect();
        let mut value = 0.0;
        let mut grad = DVector::<f64>::zeros(p);
        let mut info = DMatrix::<f64>::zeros(p, p);
        let mut max_abs_eta: f64 = 0.0;
        let mut d_tau = 0.0;
        for (g, rows) in self.rows.iter().enumerate() {
            let b = if tau > 0.0 {
                let b = self.group_mode(rows, &eta0, tau, modes[g])?;
                modes[g] = b;
                b
            } else {
                0.0
            };
            let mut hg = if tau > 0.0 { -b * b / (2.0 * tau) } else { 0.0 };
            let mut curv = if tau > 0.0 { 1.0 / tau } else { 0.0 };
            let mut c = DVector::<f64>::zeros(p);
            let mut c3 = DVector::<f64>::zeros(p);
            let mut s3 = 0.0;
            let mut sv = 0.0;
            for &i in rows {
                let w = d.weights[i];
                let eta = eta0[i] + b;
                max_abs_eta = max_abs_eta.max(eta0[i].abs());
                let (mu, v, dv) = moments(self.link, eta);
                hg += w * unit_loglik(self.link, d.y[i], eta);
                curv += w * v;
                let xi = d.x.row(i).transpose();
                grad += &xi * (w * (d.y[i] - mu));
                info += &xi * xi.transpose() * (w * v);
                c += &xi * (w * v);
                c3 += &xi * (w * dv);
                s3 += w * dv;
                sv += w * v;
            }
            value += hg;
            if tau > 0.0 {
                value -= 0.5 * (tau * curv).ln();
                info -= &c * c.transpose() / curv;
                // d log H_g / dβ = Σ w v'(η) (x_i + db̂/dβ), db̂/dβ = −c / H_g.
                let dlog = (&c3 - &c * (s3 / curv)) / curv;
                grad -= dlog * 0.5;
                // db̂/dτ = b̂ / (τ² H_g).
                d_tau += b * b / (2.0 * tau * tau) - 0.5 * (sv + s3 * b / (tau * curv)) / (tau * curv);
            }
        }
        Ok(LaplaceEval { value, grad, info, max_abs_eta, d_tau })
    }

    fn value(&self, beta: &DVector<f64>, tau: f64, modes: &mut [f64]) -> Result<f64> {
        Ok(self.eval(beta, tau, modes)?.value)
    }

    /// `|xβ|` beyond the cap signals divergence. Logit coefficients
    /// conditional on a random intercept of variance `τ` are inflated by
    /// about `sqrt(1 + c²τ)` with `c = 16√3/(15π)`, so the cap grows with it.
    fn check_eta(&self, max_abs_eta: f64, tau: f64) -> Result<()> {
        let cap = match self.link {
            Link::Logit => {
                let c = 16.0 * 3f64.sqrt() / (15.0 * std::f64::consts::PI);
                ETA_CAP * (1.0 + c * c * tau).sqrt()
            }
            _ => ETA_CAP,
        };
        if max_abs_eta > cap {
            return Err(match self.link {
                Link::Logit => Error::Separation,
                _ => Error::IrlsDivergence(format!("linear predictor reached {max_abs_eta:.1}")),
            });
        }
        Ok(())
    }

    /// Maximizes over β at fixed τ by damped Newton steps. The steps use the
    /// approximate information until a full step fails to improve the
    /// objective, then switch to the finite-difference Hessian, which also
    /// carries the curvature of the log-determinant term.
    fn fit_beta(&self, start: &DVector<f64>, tau: f64, modes: &mut [f64]) -> Result<(DVector<f64>, LaplaceEval)> {
        let mut beta = start.clone();
        let mut cur = self.eval(&beta, tau, modes)?;
        self.check_eta(cur.max_abs_eta, tau)?;
        let mut exact = false;
        for _ in 0..200 {
            let gnorm = cur.grad.norm();
            let curvature = if exact {
                self.neg_hessian(&beta, tau, modes)
                    .ok()
                    .filter(|h| h.clone().cholesky().is_some())
                    .unwrap_or_else(|| cur.info.clone())
            } else {
                cur.info.clone()
            };
            let step = match curvature.cholesky() {
                Some(ch) => ch.solve(&cur.grad),
                None => return Err(Error::IrlsDivergence("information matrix is not positive definite".into())),
            };
            // Stopping on the step rather than the gradient keeps pushing
            // separated fits until the |η| cap trips.
            if step.amax() <= 1e-11 * (1.0 + beta.amax()) {
                return Ok((beta, cur));
            }
            let mut t = 1.0;
            let mut saved = modes.to_vec();
            loop {
                let cand = &beta + &step * t;
                match self.eval(&cand, tau, modes) {
                    Ok(e) if e.value >= cur.value - 1e-12 * cur.value.abs() => {
                        self.check_eta(e.max_abs_eta, tau)?;
                        if t < 1.0 || e.value < cur.value {
                            exact = true;
                        }
                        beta = cand;
                        cur = e;
                        break;
                    }
                    Ok(_) | Err(Error::IrlsDivergence(_)) => {}
                    Err(other) => return Err(other),
                }
                modes.copy_from_slice(&saved);
                t *= 0.5;
                if t < 1e-12 {
                    if gnorm <= 1e-6 * (1.0 + cur.value.abs()) {
                        return Ok((beta, cur));
                    }
                    return Err(Error::IrlsDivergence("step halving cap reached".into()));
                }
            }
            saved.clear();
        }
        Err(Error::NonConvergence("fixed-effect Newton iterations hit their cap".into()))
    }

    /// Negative central-difference Hessian of the objective in β, built
    /// from the analytic gradient.
    fn neg_hessian(&self, beta: &DVector<f64>, tau: f64, modes: &[f64]) -> Result<DMatrix<f64>> {
        let p = beta.len();
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for j in 0..p {
            let h = 1e-5 * (1.0 + beta[j].abs());
            let mut up = beta.clone();
            up[j] += h;
            let mut dn = beta.clone();
            dn[j] -= h;
            let mut m = modes.to_vec();
            let gu = self.eval(&up, tau, &mut m)?.grad;
            let mut m = modes.to_vec();
            let gd = self.eval(&dn, tau, &mut m)?.grad;
            hess.set_column(j, &((gu - gd) / (2.0 * h)));
        }
        Ok(-(&hess + hess.transpose()) * 0.5)
    }

    fn vcov(&self, beta: &DVector<f64>, tau: f64, modes: &[f64]) -> Result<DMatrix<f64>> {
        self.neg_hessian(beta, tau, modes)?
            .try_inverse()
            .ok_or_else(|| Error::NonConvergence("Hessian of the Laplace objective is singular".into()))
    }
}

fn glm_start(d: &Design, link: Link) -> DVector<f64> {
    let mut beta = DVector::zeros(d.cols());
    let ybar = d.y.iter().zip(&d.weights).map(|(y, w)| y * w).sum::<f64>() / d.len() as f64;
    beta[0] = match link {
        Link::Logit => {
            let p = ybar.clamp(1e-3, 1.0 - 1e-3);
            (p / (1.0 - p)).ln()
        }
        Link::Log => ybar.max(1e-3).ln(),
        Link::Identity => ybar,
    };
    beta
}

fn glmm_result(
    lap: &Laplace,
    beta: DVector<f64>,
    eval: &LaplaceEval,
    tau: f64,
    modes: &[f64],
    converged: bool,
) -> Result<FitResult> {
    let (vcov, se) = finish_vcov(lap.vcov(&beta, tau, modes)?);
    Ok(FitResult {
        link: lap.link,
        names: lap.d.names.clone(),
        coefficients: beta.iter().copied().collect(),
        vcov,
        se,
        sigma0: tau.sqrt(),
        sigma_res: None,
        // Latent-scale ICC, with the standard logistic residual variance.
        icc: (lap.link == Link::Logit).then(|| tau / (tau + std::f64::consts::PI.powi(2) / 3.0)),
        loglik: eval.value,
        converged,
        boundary: tau == 0.0,
        n_groups: lap.d.n_groups,
    })
}

/// Laplace fit with the random-intercept variance held at `sigma0_sq`; zero
/// gives the weighted single-level GLM.
pub fn fit_glmm_fixed(d: &Design, link: Link, sigma0_sq: f64) -> Result<FitResult> {
    if !(sigma0_sq >= 0.0) {
        return Err(Error::Input("random-intercept variance must be non-negative".into()));
    }
    let lap = Laplace::new(d, link)?;
    let mut modes = vec![0.0; d.n_groups];
    let (beta, eval) = lap.fit_beta(&glm_start(d, link), sigma0_sq, &mut modes)?;
    glmm_result(&lap, beta, &eval, sigma0_sq, &modes, true)
}

/// Upper end of the random-intercept variance search for Laplace fits.
pub fn glmm_variance_ceiling(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (10.0 * var).max(25.0)
}

/// Weighted Laplace fit for log and logit links. The random-intercept
/// variance is optimized on the log scale; the identity link is delegated
/// to [`fit_lmm`].
pub fn fit_glmm(d: &Design, link: Link) -> Result<FitResult> {
    if link == Link::Identity {
        return fit_lmm(d);
    }
    check_fit_size(d)?;
    let lap = Laplace::new(d, link)?;
    let mut modes0 = vec![0.0; d.n_groups];
    let (beta0, eval0) = lap.fit_beta(&glm_start(d, link), 0.0, &mut modes0)?;

    let mut beta = beta0.clone();
    let mut modes = vec![0.0; d.n_groups];
    let mut failure = None;
    let profile = |t: f64| {
        let tau = t.exp();
        match lap.fit_beta(&beta, tau, &mut modes) {
            Ok((b, e)) => {
                beta = b;
                Some((e.value, tau * e.d_tau))
            }
            Err(err) => {
                // Large variances inflate the conditional coefficients until
                // the |η| cap trips; such points are infeasible, not fatal.
                if !matches!(err, Error::IrlsDivergence(_) | Error::NonConvergence(_) | Error::Separation) {
                    failure.get_or_insert(err);
                }
                modes.iter_mut().for_each(|m| *m = 0.0);
                None
            }
        }
    };
    let hi = glmm_variance_ceiling(&d.y);
    let found = maximize_profile(profile, VARIANCE_FLOOR.ln(), hi.ln(), 16, 1e-12);
    if let Some(err) = failure {
        return Err(err);
    }
    let (tau, converged) = match found {
        ProfileMax::Lower => return glmm_result(&lap, beta0, &eval0, 0.0, &modes0, true),
        ProfileMax::Upper => (hi, false),
        ProfileMax::Interior(t) => (t.exp(), true),
    };
    let mut modes = vec![0.0; d.n_groups];
    let (beta, eval) = lap.fit_beta(&beta0, tau, &mut modes)?;
    if eval.value <= eval0.value {
        return glmm_result(&lap, beta0, &eval0, 0.0, &modes0, true);
    }
    glmm_result(&lap, beta, &eval, tau, &modes, converged)
}

/// Dispatches on the link.
pub fn fit_model(d: &Design, link: Link) -> Result<FitResult> {
    match link {
        Link::Identity => fit_lmm(d),
        _ => fit_glmm(d, link),
    }
}

/// Computes the model's weights on the dataset's degrees, assembles the
/// design and fits it. `true_n` feeds the SS population-size variants.
pub fn fit_dataset(
    dataset: &Dataset,
    spec: &ModelSpec,
    true_n: usize,
    ss: &SsOptions,
    rng: &mut StreamRng,
) -> Result<FitResult> {
    let w = apply_scheme_to_degrees(&dataset.degrees(), &spec.weight_scheme, true_n, ss, rng)?;
    let d = build_design(dataset, spec, &w.weight)?;
    fit_model(&d, spec.link)
}

/// The Laplace objective at `(β, σ0²)`, with conditional modes solved
/// afresh.
pub fn laplace_objective(d: &Design, link: Link, beta: &[f64], sigma0_sq: f64) -> Result<f64> {
    let lap = Laplace::new(d, link)?;
    let mut modes = vec![0.0; d.n_groups];
    lap.value(&DVector::from_column_slice(beta), sigma0_sq, &mut modes)
}

/// Analytic gradient of [`laplace_objective`] in β.
pub fn laplace_gradient(d: &Design, link: Link, beta: &[f64], sigma0_sq: f64) -> Result<Vec<f64>> {
    let lap = Laplace::new(d, link)?;
    let mut modes = vec![0.0; d.n_groups];
    Ok(lap
        .eval(&DVector::from_column_slice(beta), sigma0_sq, &mut modes)?
        .grad
        .iter()
        .copied()
        .collect())
}

/// `β̂ ± z·se` per coefficient.
pub fn wald_ci(fit: &FitResult, level: f64) -> Vec<(f64, f64)> {
    let z = Normal::standard().inverse_cdf(0.5 * (1.0 + level));
    fit.coefficients
        .iter()
        .zip(&fit.se)
        .map(|(b, s)| (b - z * s, b + z * s))
        .collect()
}
