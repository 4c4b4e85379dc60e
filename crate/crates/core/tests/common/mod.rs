//! Property checks shared by the proptest suite and the acceptance runner.
#![allow(dead_code)]

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rdsreg::bootstrap::{
    neighborhood_replicate, neighborhood_resample, tree_replicate, tree_resample, NeighborhoodVariant, Replacement,
};
use rdsreg::dataset::Dataset;
use rdsreg::dgp::{expit, Link};
use rdsreg::glmm::{fit_glmm, fit_model, laplace_gradient, laplace_objective, Design, FitResult};
use rdsreg::net::spectral_radius;
use rdsreg::netgen::{generate_population, ErgmConfig};
use rdsreg::rng::stream;
use rdsreg::sampler::{run_rds, RdsConfig};
use rdsreg::study::{simulate_replicate, StudyConfig};
use rdsreg::weights::{rds2_weights, ss_weights, SsOptions};

type Check = Result<(), TestCaseError>;

/// 60 nodes in 3 clusters, mean degree about 6.
pub fn small_network_config() -> ErgmConfig {
    ErgmConfig {
        population_size: 60,
        num_clusters: 3,
        target_density: 0.1,
        gwd_coefficient: -2.0,
        ..ErgmConfig::reference()
    }
}

pub fn small_study(seed: u64) -> StudyConfig {
    let mut cfg = StudyConfig::homophily_study(1, seed);
    cfg.network = small_network_config();
    cfg.sample_fractions = vec![0.3];
    cfg.num_seeds = 3;
    cfg.dgp.rhos = vec![0.1];
    cfg.dgp.links = vec![Link::Identity];
    cfg
}

pub fn sample_dataset(seed: u64) -> Dataset {
    let cfg = small_study(seed);
    let cell = cfg.cells()[0];
    simulate_replicate(&cfg, &cell, 0.0, 0).expect("small replicate").dataset
}

/// Random-intercept data with `groups` clusters of `per` rows and
/// positive weights.
pub fn random_design(link: Link, groups: usize, per: usize, seed: u64) -> Design {
    let mut rng = stream(seed, &[]);
    let (mut y, mut x, mut g, mut w) = (vec![], vec![], vec![], vec![]);
    for k in 0..groups {
        let b = 0.8 * rng.sample::<f64, _>(StandardNormal);
        for _ in 0..per {
            let xi: f64 = rng.random_range(-1.0..1.0);
            let eta = match link {
                Link::Identity => 1.0 + 2.0 * xi + b,
                _ => -0.3 + 0.8 * xi + b,
            };
            y.push(match link {
                Link::Identity => eta + rng.sample::<f64, _>(StandardNormal),
                Link::Logit => f64::from(u8::from(rng.random::<f64>() < expit(eta))),
                Link::Log => Poisson::new(eta.exp()).unwrap().sample(&mut rng),
            });
            x.push(xi);
            g.push(k);
            w.push(rng.random_range(0.5..3.0));
        }
    }
    build(&y, &x, &g, &w)
}

pub fn build(y: &[f64], x: &[f64], g: &[usize], w: &[f64]) -> Design {
    let xm = DMatrix::from_fn(y.len(), 2, |i, j| if j == 0 { 1.0 } else { x[i] });
    Design::new(y.to_vec(), xm, vec!["(Intercept)".into(), "x".into()], g, w).expect("design")
}

fn column(d: &Design) -> Vec<f64> {
    d.x.column(1).iter().copied().collect()
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Check {
    prop_assert!((a - b).abs() <= tol, "{what}: {a} vs {b}");
    Ok(())
}

/// Generated networks are simple and symmetric, and the power iteration
/// matches a dense eigensolver.
pub fn graph_invariants(seed: u64) -> Check {
    let net = generate_population(&small_network_config(), seed).map_err(|e| TestCaseError::fail(e.to_string()))?;
    net.check_invariants().map_err(TestCaseError::fail)?;
    for c in net.clusters() {
        let a = c.dense_adjacency();
        for i in 0..c.size() {
            prop_assert_eq!(a[i][i], 0.0);
            for j in 0..c.size() {
                prop_assert_eq!(a[i][j], a[j][i]);
            }
        }
        let dense = DMatrix::from_fn(c.size(), c.size(), |i, j| a[i][j]);
        let exact = dense.symmetric_eigen().eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let power = spectral_radius(c, 1e-12).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!((power - exact).abs() <= 1e-6 * exact.max(1.0), "{power} vs {exact}");
    }
    Ok(())
}

/// RDS draws without replacement, along network ties, with waves one
/// above the recruiter's.
pub fn sampling_invariants(seed: u64, fraction: f64) -> Check {
    let net = generate_population(&small_network_config(), seed).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let cfg = RdsConfig { num_seeds: 3, coupons: 3, sample_fraction: fraction, rng_seed: 0 };
    let tree = run_rds(&net, &cfg, &mut stream(seed, &[1])).map_err(|e| TestCaseError::fail(e.to_string()))?;
    tree.check_invariants(&net, 3).map_err(TestCaseError::fail)?;
    let ids: HashSet<usize> = tree.recruits().iter().map(|r| r.node_id).collect();
    prop_assert_eq!(ids.len(), tree.len());
    prop_assert_eq!(tree.len(), cfg.target_size(net.total_size()));
    let pos = tree.positions();
    for r in tree.recruits() {
        if let Some(p) = r.recruiter_id {
            prop_assert_eq!(r.wave, tree.recruits()[pos[&p]].wave + 1);
            prop_assert!(net.has_edge(p, r.node_id));
        }
    }
    Ok(())
}

/// Network, sample and simulated data are functions of the seed alone.
pub fn determinism(seed: u64) -> Check {
    let a = generate_population(&small_network_config(), seed).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let b = generate_population(&small_network_config(), seed).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(a.clusters(), b.clusters());
    prop_assert_eq!(sample_dataset(seed), sample_dataset(seed));
    Ok(())
}

/// RDS-II is free of the degree scale and follows a permutation of the
/// sample; SS probabilities lie in (0, 1] and rise with degree.
pub fn weight_invariances(degrees: &[usize], scale: usize, seed: u64) -> Check {
    let base = rds2_weights(degrees).unwrap();
    let scaled: Vec<usize> = degrees.iter().map(|d| d * scale).collect();
    for (a, b) in base.pi_hat.iter().zip(&rds2_weights(&scaled).unwrap().pi_hat) {
        close(*a, *b, 1e-12, "scaled degrees")?;
    }
    let mut perm: Vec<usize> = (0..degrees.len()).collect();
    perm.shuffle(&mut stream(seed, &[2]));
    let permuted: Vec<usize> = perm.iter().map(|&i| degrees[i]).collect();
    let moved = rds2_weights(&permuted).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        close(moved.pi_hat[k], base.pi_hat[i], 1e-12, "permuted degrees")?;
    }

    let n = degrees.len();
    let ss = ss_weights(degrees, 3 * n, &SsOptions::default(), &mut stream(seed, &[3])).unwrap();
    let mut pairs: Vec<(usize, f64)> = degrees.iter().copied().zip(ss.pi_hat.iter().copied()).collect();
    prop_assert!(pairs.iter().all(|(_, p)| *p > 0.0 && *p <= 1.0), "{pairs:?}");
    if ss.converged {
        pairs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        prop_assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1 + 1e-12), "{pairs:?}");
    }
    Ok(())
}

fn same_fit(a: &FitResult, b: &FitResult, tol: f64) -> Check {
    for j in 0..a.coefficients.len() {
        close(a.coefficients[j], b.coefficients[j], tol, "coefficient")?;
        close(a.se[j], b.se[j], tol, "standard error")?;
    }
    close(a.sigma0, b.sigma0, tol, "sigma0")
}

/// Rescaling the weights or reordering the rows leaves the fit unchanged.
pub fn fit_invariances(link: Link, seed: u64, scale: f64) -> Check {
    let d = random_design(link, 8, 7, seed);
    let x = column(&d);
    let base = fit_model(&d, link).map_err(|e| TestCaseError::fail(e.to_string()))?;

    let w: Vec<f64> = d.weights.iter().map(|v| v * scale).collect();
    let scaled = fit_model(&build(&d.y, &x, &d.groups, &w), link).map_err(|e| TestCaseError::fail(e.to_string()))?;
    same_fit(&base, &scaled, 1e-10)?;

    let mut perm: Vec<usize> = (0..d.len()).collect();
    perm.shuffle(&mut stream(seed, &[4]));
    let pick = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let groups: Vec<usize> = perm.iter().map(|&i| d.groups[i]).collect();
    let moved = build(&pick(&d.y), &pick(&x), &groups, &pick(&d.weights));
    let permuted = fit_model(&moved, link).map_err(|e| TestCaseError::fail(e.to_string()))?;
    same_fit(&base, &permuted, 1e-10)
}

/// The analytic score of the Laplace objective vanishes at the optimum
/// and agrees with central differences away from it.
pub fn score_matches_finite_differences(link: Link, seed: u64) -> Check {
    let d = random_design(link, 12, 10, seed);
    let fit = fit_glmm(&d, link).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let tau = fit.sigma0.powi(2);
    let obj = laplace_objective(&d, link, &fit.coefficients, tau).unwrap();
    let grad = laplace_gradient(&d, link, &fit.coefficients, tau).unwrap();
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    prop_assert!(norm < 1e-6 * (1.0 + obj.abs()), "score norm {norm} at the optimum");

    let beta: Vec<f64> = fit.coefficients.iter().map(|b| b + 0.15).collect();
    let grad = laplace_gradient(&d, link, &beta, tau).unwrap();
    let h = 1e-5;
    for j in 0..beta.len() {
        let mut up = beta.clone();
        up[j] += h;
        let mut dn = beta.clone();
        dn[j] -= h;
        let fd = (laplace_objective(&d, link, &up, tau).unwrap() - laplace_objective(&d, link, &dn, tau).unwrap())
            / (2.0 * h);
        prop_assert!((fd - grad[j]).abs() <= 1e-5 * (1.0 + grad[j].abs()), "{j}: {fd} vs {}", grad[j]);
    }
    Ok(())
}

/// Bootstrap replicates keep every recruiter/recruit pair of the original
/// sample and never deepen the tree.
pub fn bootstrap_structure(seed: u64, without: bool) -> Check {
    let data = sample_dataset(seed);
    let tree = data.tree().map_err(|e| TestCaseError::fail(e.to_string()))?;
    let max_wave = tree.recruits().iter().map(|r| r.wave).max().unwrap_or(0);
    let orig = &data.rows;
    let mut rng = stream(seed, &[5]);

    let replacement = if without { Replacement::Without } else { Replacement::With };
    let draws = tree_resample(&tree, replacement, &mut rng);
    let rep = tree_replicate(&data, &draws);
    let rep_tree = rep.tree().map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(rep_tree.seed_count(), tree.seed_count());
    prop_assert!(rep_tree.recruits().iter().all(|r| r.wave <= max_wave));
    for (i, d) in draws.iter().enumerate() {
        prop_assert_eq!(rep.rows[i].y, orig[d.source].y);
        prop_assert_eq!(&rep.rows[i].covariates, &orig[d.source].covariates);
        if let Some(p) = d.parent {
            prop_assert_eq!(orig[d.source].recruit.recruiter_id, Some(orig[draws[p].source].recruit.node_id));
        }
    }
    if without {
        let mut sources: Vec<usize> = draws.iter().map(|d| d.source).collect();
        sources.sort_unstable();
        prop_assert_eq!(sources, (0..data.len()).collect::<Vec<_>>());
    }

    for variant in [NeighborhoodVariant::Replicated, NeighborhoodVariant::Induced] {
        let draw = neighborhood_resample(&tree, variant, &mut rng);
        let rep = neighborhood_replicate(&data, &draw);
        prop_assert_eq!(rep.len(), draw.members.len());
        for (i, &(ci, ri)) in draw.members.iter().enumerate() {
            prop_assert_eq!(rep.rows[i].y, orig[ri].y);
            for (j, &(cj, rj)) in draw.members.iter().enumerate() {
                let linked = rep.rows[i].recruit.recruiter_id == Some(rep.rows[j].recruit.node_id);
                let was = orig[ri].recruit.recruiter_id == Some(orig[rj].recruit.node_id);
                prop_assert_eq!(linked, ci == cj && was, "rows {} and {}", i, j);
                if ci != cj {
                    prop_assert_ne!(rep.rows[i].recruit.node_id, rep.rows[j].recruit.node_id);
                }
            }
        }
    }
    Ok(())
}

/// Weighted least squares by QR of the row-scaled design.
pub fn wls(d: &Design) -> Vec<f64> {
    let sw: Vec<f64> = d.weights.iter().map(|w| w.sqrt()).collect();
    let a = DMatrix::from_fn(d.len(), d.cols(), |i, j| sw[i] * d.x[(i, j)]);
    let b = DVector::from_fn(d.len(), |i, _| sw[i] * d.y[i]);
    let qr = a.qr();
    let rhs = qr.q().transpose() * b;
    qr.r().solve_upper_triangular(&rhs).expect("full rank").iter().copied().collect()
}

/// Single-level weighted IRLS for the canonical logit and log links.
pub fn irls(d: &Design, link: Link) -> Vec<f64> {
    let mut beta = DVector::zeros(d.cols());
    for _ in 0..200 {
        let eta = &d.x * &beta;
        let (mut xtwx, mut xtwz) = (DMatrix::zeros(d.cols(), d.cols()), DVector::zeros(d.cols()));
        for i in 0..d.len() {
            let mu = match link {
                Link::Logit => 1.0 / (1.0 + (-eta[i]).exp()),
                _ => eta[i].exp(),
            };
            let var = if link == Link::Logit { mu * (1.0 - mu) } else { mu };
            let z = eta[i] + (d.y[i] - mu) / var;
            let row = d.x.row(i).transpose();
            xtwx += &row * row.transpose() * (d.weights[i] * var);
            xtwz += &row * (d.weights[i] * var * z);
        }
        let next = xtwx.cholesky().expect("positive definite").solve(&xtwz);
        let change = (&next - &beta).amax();
        beta = next;
        if change < 1e-14 {
            break;
        }
    }
    beta.iter().copied().collect()
}

/// Successive sampling by hand: `n` sequential draws proportional to
/// degree among the units not yet drawn. Returns per-unit inclusion
/// frequencies over `reps` samples.
pub fn brute_force_ss(population: &[usize], n: usize, reps: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, &[6]);
    let mut hits = vec![0usize; population.len()];
    let mut taken = vec![false; population.len()];
    for _ in 0..reps {
        taken.iter_mut().for_each(|t| *t = false);
        let mut left: usize = population.iter().sum();
        for _ in 0..n {
            let mut u = rng.random_range(0..left);
            let pick = (0..population.len())
                .filter(|&i| !taken[i])
                .find(|&i| {
                    if u < population[i] {
                        true
                    } else {
                        u -= population[i];
                        false
                    }
                })
                .expect("mass left");
            taken[pick] = true;
            hits[pick] += 1;
            left -= population[pick];
        }
    }
    hits.iter().map(|&h| h as f64 / reps as f64).collect()
}

pub fn degree_vectors() -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::vec(1usize..40, 2..40)
}

pub fn links() -> impl Strategy<Value = Link> {
    prop_oneof![Just(Link::Identity), Just(Link::Logit), Just(Link::Log)]
}
