//! RDS design weights: RDS-II (inverse degree) and successive-sampling (SS)
//! inclusion probabilities.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    #[default]
    Unweighted,
    Rds2,
    Ss,
}

/// Population size handed to the SS estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopSizeAssumption {
    #[default]
    TrueN,
    /// `N − (N − n)/2`
    Under,
    /// `N + (N − n)/2`
    Over,
}

impl PopSizeAssumption {
    /// Assumed population size, rounded to the nearest integer.
    pub fn resolve(self, true_n: usize, sample_n: usize) -> usize {
        let half_gap = (true_n as f64 - sample_n as f64) / 2.0;
        let v = match self {
            PopSizeAssumption::TrueN => return true_n,
            PopSizeAssumption::Under => true_n as f64 - half_gap,
            PopSizeAssumption::Over => true_n as f64 + half_gap,
        };
        v.round().max(0.0) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct WeightScheme {
    pub kind: WeightKind,
    #[serde(default)]
    pub population_size_assumption: PopSizeAssumption,
}

impl WeightScheme {
    pub const UNWEIGHTED: WeightScheme = WeightScheme {
        kind: WeightKind::Unweighted,
        population_size_assumption: PopSizeAssumption::TrueN,
    };
    pub const RDS2: WeightScheme = WeightScheme {
        kind: WeightKind::Rds2,
        population_size_assumption: PopSizeAssumption::TrueN,
    };

    pub fn ss(assumption: PopSizeAssumption) -> Self {
        WeightScheme {
            kind: WeightKind::Ss,
            population_size_assumption: assumption,
        }
    }

    /// Short label used in reports: `1`, `rds`, `ss`, `ss_u`, `ss_o`.
    pub fn label(&self) -> &'static str {
        match (self.kind, self.population_size_assumption) {
            (WeightKind::Unweighted, _) => "1",
            (WeightKind::Rds2, _) => "rds",
            (WeightKind::Ss, PopSizeAssumption::TrueN) => "ss",
            (WeightKind::Ss, PopSizeAssumption::Under) => "ss_u",
            (WeightKind::Ss, PopSizeAssumption::Over) => "ss_o",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "1" | "none" | "unweighted" => WeightScheme::UNWEIGHTED,
            "rds" | "rds2" | "rds-ii" => WeightScheme::RDS2,
            "ss" => WeightScheme::ss(PopSizeAssumption::TrueN),
            "ss_u" | "ss-u" | "ss_under" => WeightScheme::ss(PopSizeAssumption::Under),
            "ss_o" | "ss-o" | "ss_over" => WeightScheme::ss(PopSizeAssumption::Over),
            other => return Err(Error::Config(format!("unknown weight scheme `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub pi_hat: Vec<f64>,
    pub weight: Vec<f64>,
    /// False when the SS iteration hit its cap.
    pub converged: bool,
}

impl WeightVector {
    fn from_pi(pi_hat: Vec<f64>, converged: bool) -> Self {
        let weight = pi_hat.iter().map(|p| 1.0 / p).collect();
        WeightVector { pi_hat, weight, converged }
    }

    pub fn uniform(n: usize) -> Self {
        WeightVector::from_pi(vec![1.0; n], true)
    }
}

fn check_degrees(degrees: &[usize]) -> Result<()> {
    if degrees.is_empty() {
        return Err(Error::Input("degree vector is empty".into()));
    }
    match degrees.iter().position(|&d| d == 0) {
        Some(index) => Err(Error::ZeroDegree { index }),
        None => Ok(()),
    }
}

/// `π̂_i = mean(d)/d_i`. Values above 1 are kept: they are relative, not
/// true, inclusion probabilities.
pub fn rds2_weights(degrees: &[usize]) -> Result<WeightVector> {
    check_degrees(degrees)?;
    let mean = degrees.iter().sum::<usize>() as f64 / degrees.len() as f64;
    Ok(WeightVector::from_pi(
        degrees.iter().map(|&d| mean / d as f64).collect(),
        true,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsOptions {
    pub draws: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SsOptions {
    fn default() -> Self {
        SsOptions {
            draws: 2000,
            tol: 1e-4,
            max_iter: 25,
        }
    }
}

/// Weighted least-squares nondecreasing fit to `values`.
fn pool_adjacent_violators(values: &[f64], weights: &[usize]) -> Vec<f64> {
    // Blocks of (mean, weight, length).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w as f64, 1));
        while blocks.len() > 1 && blocks[blocks.len() - 2].0 > blocks[blocks.len() - 1].0 {
            let (m2, w2, l2) = blocks.pop().expect("two blocks");
            let (m1, w1, l1) = blocks.pop().expect("two blocks");
            blocks.push(((m1 * w1 + m2 * w2) / (w1 + w2), w1 + w2, l1 + l2));
        }
    }
    blocks.into_iter().flat_map(|(m, _, l)| std::iter::repeat_n(m, l)).collect()
}

/// Splits `total` units over degree classes in proportion to `mass`, never
/// giving a class fewer than `floor` units. Largest-remainder rounding.
fn allocate(total: usize, mass: &[f64], floor: &[usize]) -> Vec<usize> {
    let sum: f64 = mass.iter().sum();
    let target: Vec<f64> = mass.iter().map(|m| total as f64 * m / sum).collect();
    let mut counts: Vec<usize> = target
        .iter()
        .zip(floor)
        .map(|(t, &f)| (t.floor() as usize).max(f))
        .collect();
    let mut assigned: usize = counts.iter().sum();
    while assigned < total {
        let k = (0..counts.len())
            .max_by(|&a, &b| {
                let ra = target[a] - counts[a] as f64;
                let rb = target[b] - counts[b] as f64;
                ra.total_cmp(&rb).then(b.cmp(&a))
            })
            .expect("at least one class");
        counts[k] += 1;
        assigned += 1;
    }
    while assigned > total {
        let k = (0..counts.len())
            .filter(|&k| counts[k] > floor[k])
            .max_by(|&a, &b| {
                let ra = counts[a] as f64 - target[a];
                let rb = counts[b] as f64 - target[b];
                ra.total_cmp(&rb).then(b.cmp(&a))
            })
            .expect("total is at least the sum of floors");
        counts[k] -= 1;
        assigned -= 1;
    }
    counts
}

/// Inclusion probability per degree class when `n` units are drawn
/// successively with probability proportional to degree, without
/// replacement, from a population with `counts[k]` units of degree
/// `classes[k]`. Uses exponential keys: the `n` smallest `E_j / d_j` form a
/// successive-sampling draw.
pub fn ss_inclusion(
    classes: &[usize],
    counts: &[usize],
    n: usize,
    draws: usize,
    rng: &mut StreamRng,
) -> Vec<f64> {
    let units: Vec<(usize, f64)> = classes
        .iter()
        .zip(counts)
        .enumerate()
        .flat_map(|(k, (&d, &c))| std::iter::repeat_n((k, d as f64), c))
        .collect();
    let total = units.len();
    let mut hits = vec![0u64; classes.len()];
    if n >= total {
        return counts.iter().map(|&c| if c > 0 { 1.0 } else { 0.0 }).collect();
    }
    let mut keys: Vec<(f64, usize)> = Vec::with_capacity(total);
    for _ in 0..draws {
        keys.clear();
        for &(k, d) in &units {
            let e: f64 = Exp1.sample(rng);
            keys.push((e / d, k));
        }
        if n > 0 {
            keys.select_nth_unstable_by(n - 1, |a, b| a.0.total_cmp(&b.0));
        }
        for &(_, k) in &keys[..n] {
            hits[k] += 1;
        }
    }
    hits.iter()
        .zip(counts)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / (draws as f64 * c as f64) })
        .collect()
}

/// Iterated successive-sampling inclusion probabilities, starting from
/// RDS-II. Every iteration reuses the same random numbers, so the map is
/// deterministic and the loop settles once the estimated population stops
/// changing. When the integer allocations fall into a cycle instead, the
/// probabilities are averaged over it. Simulation noise can leave adjacent
/// classes out of order, so the result is made nondecreasing in degree by
/// pooling adjacent violators, weighted by the sample counts.
pub fn ss_weights(
    degrees: &[usize],
    assumed_n: usize,
    opts: &SsOptions,
    rng: &mut StreamRng,
) -> Result<WeightVector> {
    check_degrees(degrees)?;
    let n = degrees.len();
    if assumed_n < n {
        return Err(Error::Input(format!(
            "assumed population size {assumed_n} is below the sample size {n}"
        )));
    }
    if opts.draws == 0 || !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::Config("SS options need draws ≥ 1, tol > 0 and max_iter ≥ 1".into()));
    }
    let mut by_class: BTreeMap<usize, usize> = BTreeMap::new();
    for &d in degrees {
        *by_class.entry(d).or_default() += 1;
    }
    let classes: Vec<usize> = by_class.keys().copied().collect();
    let sample_counts: Vec<usize> = by_class.values().copied().collect();
    let class_of = |d: usize| classes.binary_search(&d).expect("observed class");

    let mean = degrees.iter().sum::<usize>() as f64 / n as f64;
    let mut pi: Vec<f64> = classes.iter().map(|&d| mean / d as f64).collect();
    let base_seed: u64 = rng.random();
    let mut converged = false;
    // Allocations seen so far with the probabilities they produced. The map
    // is deterministic, so a repeated allocation means a cycle.
    let mut history: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
    for _ in 0..opts.max_iter {
        let mass: Vec<f64> = sample_counts.iter().zip(&pi).map(|(&c, p)| c as f64 / p).collect();
        let pop = allocate(assumed_n, &mass, &sample_counts);
        if let Some(start) = history.iter().position(|(seen, _)| *seen == pop) {
            let cycle = &history[start..];
            pi = (0..classes.len())
                .map(|k| cycle.iter().map(|(_, p)| p[k]).sum::<f64>() / cycle.len() as f64)
                .collect();
            converged = true;
            break;
        }
        let mut sim = StreamRng::seed_from_u64(base_seed);
        let next = ss_inclusion(&classes, &pop, n, opts.draws, &mut sim);
        let delta = next
            .iter()
            .zip(&pi)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        pi = next.clone();
        history.push((pop, next));
        if delta < opts.tol {
            converged = true;
            break;
        }
    }
    let pi = pool_adjacent_violators(&pi, &sample_counts);
    // A class can receive zero simulated hits only with tiny `draws`; keep
    // the probabilities strictly positive.
    let floor = 1.0 / (opts.draws as f64 * assumed_n as f64);
    Ok(WeightVector::from_pi(
        degrees.iter().map(|&d| pi[class_of(d)].max(floor)).collect(),
        converged,
    ))
}

/// Weights for a degree vector under `scheme`; `true_n` is the actual
/// population size, from which the SS variants derive their assumption.
pub fn apply_scheme_to_degrees(
    degrees: &[usize],
    scheme: &WeightScheme,
    true_n: usize,
    opts: &SsOptions,
    rng: &mut StreamRng,
) -> Result<WeightVector> {
    match scheme.kind {
        WeightKind::Unweighted => {
            if degrees.is_empty() {
                return Err(Error::Input("degree vector is empty".into()));
            }
            Ok(WeightVector::uniform(degrees.len()))
        }
        WeightKind::Rds2 => rds2_weights(degrees),
        WeightKind::Ss => {
            let assumed = scheme.population_size_assumption.resolve(true_n, degrees.len());
            ss_weights(degrees, assumed, opts, rng)
        }
    }
}

pub fn apply_scheme(
    tree: &crate::sampler::RecruitmentTree,
    scheme: &WeightScheme,
    true_n: usize,
    opts: &SsOptions,
    rng: &mut StreamRng,
) -> Result<WeightVector> {
    apply_scheme_to_degrees(&tree.degrees(), scheme, true_n, opts, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    #[test]
    fn rds2_examples() {
        let w = rds2_weights(&[1, 2, 4]).unwrap();
        let want = [7.0 / 3.0, 7.0 / 6.0, 7.0 / 12.0];
        for (a, b) in w.pi_hat.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in w.weight.iter().zip(want) {
            assert!((a - 1.0 / b).abs() < 1e-12);
        }
        let eq = rds2_weights(&[5; 7]).unwrap();
        assert!(eq.pi_hat.iter().all(|&p| p == 1.0));
        assert!(matches!(rds2_weights(&[3, 0, 2]), Err(Error::ZeroDegree { index: 1 })));
    }

    proptest! {
        #[test]
        fn rds2_is_scale_free(d in prop::collection::vec(1usize..50, 1..40), k in 1usize..9) {
            let a = rds2_weights(&d).unwrap();
            let scaled: Vec<usize> = d.iter().map(|x| x * k).collect();
            let b = rds2_weights(&scaled).unwrap();
            for (x, y) in a.pi_hat.iter().zip(&b.pi_hat) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn allocation_respects_total_and_floors(
            mass in prop::collection::vec(0.01f64..10.0, 1..8),
            extra in 0usize..200,
        ) {
            let floor: Vec<usize> = mass.iter().map(|m| (m * 3.0) as usize).collect();
            let total = floor.iter().sum::<usize>() + extra;
            let c = allocate(total, &mass, &floor);
            prop_assert_eq!(c.iter().sum::<usize>(), total);
            prop_assert!(c.iter().zip(&floor).all(|(a, b)| a >= b));
        }
    }

    #[test]
    fn population_size_variants() {
        assert_eq!(PopSizeAssumption::Under.resolve(1000, 200), 600);
        assert_eq!(PopSizeAssumption::Over.resolve(1000, 200), 1400);
        assert_eq!(PopSizeAssumption::TrueN.resolve(1000, 200), 1000);
    }

    #[test]
    fn ss_census_and_symmetric_cases() {
        let opts = SsOptions::default();
        let w = ss_weights(&[1, 2, 2, 5, 9], 5, &opts, &mut stream(1, &[])).unwrap();
        assert!(w.pi_hat.iter().all(|&p| p == 1.0));
        assert!(w.converged);

        let w = ss_weights(&[3; 20], 40, &opts, &mut stream(2, &[])).unwrap();
        assert!(w.pi_hat.iter().all(|&p| (p - 0.5).abs() < 1e-12), "{:?}", w.pi_hat);

        let true_n = 60;
        let w = apply_scheme_to_degrees(&[4; 15], &WeightScheme::ss(PopSizeAssumption::TrueN), true_n, &opts, &mut stream(3, &[]))
            .unwrap();
        assert!(w.weight.iter().all(|&x| (x - 4.0).abs() < 1e-9));

        assert!(ss_weights(&[1, 2, 3], 2, &opts, &mut stream(1, &[])).is_err());
        assert!(matches!(ss_weights(&[1, 0], 5, &opts, &mut stream(1, &[])), Err(Error::ZeroDegree { index: 1 })));
    }

    /// Sequential draw-by-draw successive sampling, independent of the
    /// exponential-key shortcut.
    fn brute_force_inclusion(pop: &[usize], n: usize, draws: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, &[]);
        let mut hits = vec![0u64; pop.len()];
        for _ in 0..draws {
            let mut alive: Vec<usize> = (0..pop.len()).collect();
            for _ in 0..n {
                let total: usize = alive.iter().map(|&j| pop[j]).sum();
                let mut u = rng.random_range(0..total);
                let pos = alive
                    .iter()
                    .position(|&j| {
                        if u < pop[j] {
                            true
                        } else {
                            u -= pop[j];
                            false
                        }
                    })
                    .unwrap();
                hits[alive.swap_remove(pos)] += 1;
            }
        }
        hits.iter().map(|&h| h as f64 / draws as f64).collect()
    }

    #[test]
    fn adjacent_violators_are_pooled() {
        let cases: [(&[f64], &[usize], &[f64]); 3] = [
            (&[0.1, 0.3, 0.2, 0.5], &[1, 1, 3, 1], &[0.1, 0.225, 0.225, 0.5]),
            (&[0.4, 0.2, 0.0], &[1, 1, 2], &[0.15; 3]),
            (&[0.1, 0.2], &[5, 1], &[0.1, 0.2]),
        ];
        for (v, w, want) in cases {
            let got = pool_adjacent_violators(v, w);
            assert!(got.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15), "{got:?}");
        }
    }

    #[test]
    fn ss_is_monotone_in_degree() {
        let mut d = vec![1; 19];
        d.push(10);
        let w = ss_weights(&d, 100, &SsOptions::default(), &mut stream(4, &[])).unwrap();
        assert!(w.pi_hat[19] > w.pi_hat[0]);
        assert!(w.pi_hat.iter().all(|&p| p > 0.0 && p <= 1.0));
    }

    #[test]
    fn exponential_keys_match_sequential_draws() {
        let classes = [1, 2, 5];
        let counts = [6, 3, 3];
        let pop: Vec<usize> = classes.iter().zip(counts).flat_map(|(&d, c)| std::iter::repeat_n(d, c)).collect();
        let fast = ss_inclusion(&classes, &counts, 4, 40_000, &mut stream(5, &[]));
        let slow = brute_force_inclusion(&pop, 4, 40_000, 6);
        let mut start = 0;
        for (k, &c) in counts.iter().enumerate() {
            let mean = slow[start..start + c].iter().sum::<f64>() / c as f64;
            assert!((fast[k] - mean).abs() < 0.01, "class {k}: {} vs {mean}", fast[k]);
            start += c;
        }
    }

    #[test]
    fn ss_is_deterministic() {
        let d = [1, 3, 3, 4, 8, 2, 2, 6];
        let a = ss_weights(&d, 30, &SsOptions::default(), &mut stream(9, &[])).unwrap();
        let b = ss_weights(&d, 30, &SsOptions::default(), &mut stream(9, &[])).unwrap();
        assert_eq!(a, b);
    }

    /// Degrees of a 200-recruit sample whose allocations alternate between
    /// two states under some streams.
    const CYCLING_SAMPLE: [usize; 200] = [
            9, 15, 9, 1, 10, 10, 5, 3, 2, 2, 27, 29, 25, 37, 25, 32, 24, 32, 31, 23, 4, 30, 43, 42, 5,
            24, 36, 35, 6, 38, 35, 39, 35, 30, 26, 31, 1, 37, 35, 28, 24, 18, 34, 26, 27, 4, 2, 3, 11, 28,
            8, 30, 35, 39, 3, 6, 35, 5, 30, 26, 28, 3, 33, 15, 24, 31, 41, 22, 36, 22, 43, 33, 7, 23, 7,
            28, 21, 6, 32, 28, 26, 28, 21, 16, 30, 5, 19, 20, 32, 25, 34, 29, 31, 20, 4, 5, 8, 13, 3, 38,
            8, 37, 9, 23, 24, 27, 33, 32, 33, 33, 29, 31, 11, 28, 4, 5, 2, 24, 6, 27, 43, 4, 16, 28, 22,
            32, 17, 38, 26, 3, 8, 14, 38, 20, 9, 10, 29, 21, 18, 27, 30, 18, 32, 2, 29, 21, 5, 6, 3, 43,
            25, 9, 4, 5, 21, 22, 3, 23, 31, 27, 34, 32, 38, 18, 5, 23, 34, 5, 14, 37, 4, 3, 30, 31, 5,
            24, 15, 29, 9, 10, 7, 10, 32, 3, 19, 19, 41, 1, 36, 31, 23, 6, 27, 6, 38, 26, 7, 10, 3, 32,
    ];

    #[test]
    fn allocation_cycles_end_the_iteration() {
        let opts = SsOptions::default();
        let fits: Vec<WeightVector> = (0..5)
            .map(|s| ss_weights(&CYCLING_SAMPLE, 1000, &opts, &mut stream(s, &[])).unwrap())
            .collect();
        assert!(fits.iter().all(|w| w.converged));
        // Different streams agree up to Monte Carlo noise.
        for w in &fits[1..] {
            for (a, b) in w.pi_hat.iter().zip(&fits[0].pi_hat) {
                assert!((a - b).abs() < 0.05, "{a} vs {b}");
            }
        }
    }
}
