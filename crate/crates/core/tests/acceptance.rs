//! Acceptance suite. Prints one pass/fail line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rdsreg::dgp::{sar_covariance, Link, SarPolicy};
use rdsreg::glmm::{fit_glmm_fixed, fit_lmm_fixed_theta, Clustering, VARIANCE_FLOOR};
use rdsreg::net::ClusterGraph;
use rdsreg::rng::stream;
use rdsreg::study::{full_report_path, run_study, save_config, ReportRow, SimReport, StudyConfig};
use rdsreg::weights::{rds2_weights, ss_weights, SsOptions};

const MASTER_SEED: u64 = 7;
const REPLICATES: usize = 200;

type Outcome = Result<String, String>;
type Suite = Box<dyn FnMut(&mut TestRunner) -> Result<(), String>>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn row<'a>(report: &'a SimReport, rho_d: f64, link: Link, clustering: Clustering, scheme: &str) -> &'a ReportRow {
    report
        .find(0.2, 0.05, rho_d, link, clustering, scheme)
        .unwrap_or_else(|| panic!("no report row for {link:?} {clustering:?} {scheme}"))
}

fn linear_report() -> SimReport {
    let mut cfg = StudyConfig::homophily_study(REPLICATES, MASTER_SEED);
    cfg.sample_fractions = vec![0.2];
    cfg.dgp.rhos = vec![0.05];
    cfg.dgp.links = vec![Link::Identity];
    cfg.models.clusterings = vec![Clustering::Seed];
    cfg.models.schemes = vec!["1".into()];
    run_study(&cfg).expect("linear study")
}

fn criterion_1(report: &SimReport) -> Outcome {
    let r = row(report, 0.0, Link::Identity, Clustering::Seed, "1");
    let (nci, nci_hw) = (r.nci.unwrap_or(f64::NAN), r.nci_hw.unwrap_or(f64::NAN));
    let detail = format!(
        "RB {:.4} (|RB| <= 0.02), RMSE {:.4} in [0.03, 0.12], CI {:.3} ± {:.3} in [0.92, 1], NCI {:.3} ± {:.3} in [0.89, 0.98], R {}",
        r.rb, r.rmse, r.ci, r.ci_hw, nci, nci_hw, r.r_effective
    );
    let ok = r.rb.abs() <= 0.02
        && (0.03..=0.12).contains(&r.rmse)
        && (0.92..=1.0).contains(&r.ci)
        && (0.89..=0.98).contains(&nci);
    ensure(ok, detail)
}

fn criterion_2() -> Outcome {
    let mut cfg = StudyConfig::homophily_study(REPLICATES, MASTER_SEED);
    cfg.sample_fractions = vec![0.2];
    cfg.dgp.rhos = vec![0.05];
    cfg.dgp.links = vec![Link::Logit];
    cfg.models.schemes = vec!["1".into()];
    cfg.bootstrap = None;
    let report = run_study(&cfg).map_err(|e| e.to_string())?;
    let seed = row(&report, 0.0, Link::Logit, Clustering::Seed, "1");
    let recruiter = row(&report, 0.0, Link::Logit, Clustering::Recruiter, "1");
    let detail = format!(
        "seed RB {:.4} (<= -0.08), recruiter RB {:.4} (|.| < {:.4})",
        seed.rb,
        recruiter.rb,
        seed.rb.abs()
    );
    ensure(seed.rb <= -0.08 && recruiter.rb.abs() < seed.rb.abs(), detail)
}

fn criterion_3() -> Outcome {
    let mut cfg = StudyConfig::degree_study(REPLICATES, MASTER_SEED);
    cfg.dgp.links = vec![Link::Logit];
    cfg.models.clusterings = vec![Clustering::Seed];
    cfg.models.schemes = vec!["1".into(), "rds".into()];
    cfg.bootstrap = None;
    let report = run_study(&cfg).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut parts = Vec::new();
    for rho_d in [0.4, 0.6] {
        let plain = row(&report, rho_d, Link::Logit, Clustering::Seed, "1").rb;
        let rds = row(&report, rho_d, Link::Logit, Clustering::Seed, "rds").rb;
        ok &= rds.abs() <= plain.abs();
        parts.push(format!("rho_d {rho_d}: RB unweighted {plain:.4}, RDS-II {rds:.4}"));
    }
    ensure(ok, parts.join("; "))
}

fn criterion_4(report: &SimReport) -> Outcome {
    let r = row(report, 0.0, Link::Identity, Clustering::Seed, "1");
    let (Some(tree), Some(tree_se), Some(nbhd), Some(nbhd_se)) =
        (r.var_rb_tree, r.var_rb_tree_se, r.var_rb_nbhd, r.var_rb_nbhd_se)
    else {
        return Err("bootstrap variance summaries are missing".into());
    };
    let gap = nbhd.abs() - r.var_rb_model.abs();
    let gap_se = r.var_rb_model_se.hypot(nbhd_se);
    let detail = format!(
        "tree {:.3} ± {:.3}, neighborhood {:.3} ± {:.3}, model {:.3} ± {:.3}; |nbhd| - |model| = {:.3} vs 2 se {:.3}",
        tree,
        tree_se,
        nbhd,
        nbhd_se,
        r.var_rb_model,
        r.var_rb_model_se,
        gap,
        2.0 * gap_se
    );
    ensure(tree - 2.0 * tree_se > 0.0 && gap > 2.0 * gap_se, detail)
}

fn timed(name: &str, f: impl FnOnce() -> f64, tol: f64) -> Result<String, String> {
    let start = Instant::now();
    let err = f();
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{name} {err:.1e} in {secs:.3}s");
    if err <= tol && secs < 1.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_5() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    let mut record = |r: Result<String, String>| match r {
        Ok(s) => parts.push(s),
        Err(s) => {
            ok = false;
            parts.push(format!("{s} FAILED"));
        }
    };

    record(timed(
        "LMM at the variance floor vs WLS",
        || {
            let d = random_design(Link::Identity, 10, 8, 3);
            let exact = wls(&d);
            let floor = fit_lmm_fixed_theta(&d, VARIANCE_FLOOR).unwrap();
            let zero = fit_lmm_fixed_theta(&d, 0.0).unwrap();
            max_diff(&floor.coefficients, &exact).max(max_diff(&zero.coefficients, &exact))
        },
        1e-8,
    ));
    record(timed(
        "GLMM without random intercept vs IRLS",
        || {
            [Link::Logit, Link::Log]
                .iter()
                .map(|&link| {
                    let d = random_design(link, 10, 8, 4);
                    let fit = fit_glmm_fixed(&d, link, 0.0).unwrap();
                    max_diff(&fit.coefficients, &irls(&d, link))
                })
                .fold(0.0, f64::max)
        },
        1e-6,
    ));
    record(timed(
        "two-node SAR covariance vs closed form",
        || {
            let (sigma2, rho) = (1.7, 0.3);
            let g = ClusterGraph::from_edges(2, &[(0, 1)]).unwrap();
            let cov = sar_covariance(&g, sigma2, rho, SarPolicy::default()).unwrap();
            let c = sigma2 / (1.0 - rho * rho).powi(2);
            let exact = DMatrix::from_row_slice(2, 2, &[1.0 + rho * rho, 2.0 * rho, 2.0 * rho, 1.0 + rho * rho]) * c;
            (cov - exact).amax()
        },
        1e-12,
    ));
    record(timed(
        "RDS-II on degrees (1, 2, 4)",
        || {
            let w = rds2_weights(&[1, 2, 4]).unwrap();
            let exact = [3.0 / 7.0, 6.0 / 7.0, 12.0 / 7.0];
            max_diff(&w.weight, &exact).max(max_diff(&w.pi_hat, &[7.0 / 3.0, 7.0 / 6.0, 7.0 / 12.0]))
        },
        1e-12,
    ));
    ensure(ok, parts.join("; "))
}

fn criterion_6() -> Outcome {
    // 12 units of degree 1, 12 of degree 3 and 6 of degree 6; the sample
    // below allocates back to exactly these class sizes at the fixed point.
    let population: Vec<usize> = [(1, 12), (3, 12), (6, 6)]
        .iter()
        .flat_map(|&(d, c)| std::iter::repeat_n(d, c))
        .collect();
    let sample: Vec<usize> = [(1, 2), (3, 5), (6, 4)]
        .iter()
        .flat_map(|&(d, c)| std::iter::repeat_n(d, c))
        .collect();
    let n = sample.len();
    let freq = brute_force_ss(&population, n, 100_000, 11);
    let opts = SsOptions { draws: 100_000, tol: 1e-4, max_iter: 50 };
    let ss = ss_weights(&sample, population.len(), &opts, &mut stream(12, &[])).map_err(|e| e.to_string())?;
    let mut ok = ss.converged;
    let mut parts = Vec::new();
    for d in [1, 3, 6] {
        let class: Vec<f64> = (0..population.len()).filter(|&i| population[i] == d).map(|i| freq[i]).collect();
        let brute = class.iter().sum::<f64>() / class.len() as f64;
        let est = ss.pi_hat[sample.iter().position(|&s| s == d).unwrap()];
        ok &= (est - brute).abs() <= 0.02;
        parts.push(format!("degree {d}: {est:.4} vs {brute:.4}"));
    }
    parts.push(format!("converged {}", ss.converged));
    ensure(ok, parts.join(", "))
}

static CASES: AtomicUsize = AtomicUsize::new(0);

fn counted(result: Result<(), TestCaseError>) -> Result<(), TestCaseError> {
    CASES.fetch_add(1, Ordering::Relaxed);
    result
}

fn criterion_7() -> Outcome {
    let config = Config { cases: 24, failure_persistence: None, ..Config::default() };
    let suites: Vec<(&str, Suite)> = vec![
        ("graph", Box::new(|r| r.run(&any::<u64>(), |s| counted(graph_invariants(s))).map_err(|e| e.to_string()))),
        (
            "sampling",
            Box::new(|r| r.run(&(any::<u64>(), 0.1f64..=1.0), |(s, f)| counted(sampling_invariants(s, f))).map_err(|e| e.to_string())),
        ),
        ("determinism", Box::new(|r| r.run(&any::<u64>(), |s| counted(determinism(s))).map_err(|e| e.to_string()))),
        (
            "weights",
            Box::new(|r| {
                r.run(&(degree_vectors(), 1usize..7, any::<u64>()), |(d, k, s)| counted(weight_invariances(&d, k, s)))
                    .map_err(|e| e.to_string())
            }),
        ),
        (
            "fit invariance",
            Box::new(|r| {
                r.run(&(links(), any::<u64>(), 0.01f64..100.0), |(l, s, c)| counted(fit_invariances(l, s, c)))
                    .map_err(|e| e.to_string())
            }),
        ),
        (
            "bootstrap",
            Box::new(|r| r.run(&(any::<u64>(), any::<bool>()), |(s, w)| counted(bootstrap_structure(s, w))).map_err(|e| e.to_string())),
        ),
        (
            "score",
            Box::new(|r| {
                r.run(&(any::<bool>(), any::<u64>()), |(logit, s)| {
                    counted(score_matches_finite_differences(if logit { Link::Logit } else { Link::Log }, s))
                })
                .map_err(|e| e.to_string())
            }),
        ),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, mut suite) in suites {
        CASES.store(0, Ordering::Relaxed);
        match suite(&mut TestRunner::new(config.clone())) {
            Ok(()) => parts.push(format!("{name} ok ({} cases)", CASES.load(Ordering::Relaxed))),
            Err(e) => {
                ok = false;
                parts.push(format!("{name} failed: {e}"));
            }
        }
    }
    ensure(ok, parts.join(", "))
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = StudyConfig::homophily_study(3, 5);
    cfg.network.population_size = 200;
    cfg.network.num_clusters = 4;
    cfg.network.target_density = 0.05;
    cfg.sample_fractions = vec![0.2];
    cfg.num_seeds = 4;
    cfg.dgp.rhos = vec![0.05];
    cfg.dgp.links = vec![Link::Identity, Link::Logit];
    cfg.models.schemes = vec!["1".into(), "rds".into(), "ss".into()];
    if let Some(b) = cfg.bootstrap.as_mut() {
        b.replicates = 20;
    }
    let config = dir.path().join("config.json");
    save_config(&cfg, &config).map_err(|e| e.to_string())?;
    let mut reports = Vec::new();
    let mut codes = Vec::new();
    for (run, threads) in [("a", "1"), ("b", "3")] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_rdsreg"))
            .arg("study")
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .args(["--threads", threads])
            .output()
            .map_err(|e| e.to_string())?;
        codes.push(status.status.code());
        let path = full_report_path(&out.join("report.csv"));
        reports.push(std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?);
    }
    let detail = format!(
        "full reports of {} and {} bytes, exit codes {:?}",
        reports[0].len(),
        reports[1].len(),
        codes
    );
    ensure(reports[0] == reports[1] && codes[0] == codes[1] && !reports[0].is_empty(), detail)
}

fn run(id: usize, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {id}: {tag} ({secs:.1}s) {detail}");
    outcome.is_ok()
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|v| v.contains(&id));
    let mut all = true;

    let mut linear: Option<SimReport> = None;
    if wanted(1) || wanted(4) {
        let ok = run(1, || {
            let report = linear_report();
            let outcome = criterion_1(&report);
            linear = Some(report);
            outcome
        });
        if wanted(1) {
            all &= ok;
        }
    }
    if wanted(2) {
        all &= run(2, criterion_2);
    }
    if wanted(3) {
        all &= run(3, criterion_3);
    }
    if wanted(4) {
        let missing = || Err("linear study failed to run".to_string());
        all &= run(4, || linear.as_ref().map_or_else(missing, criterion_4));
    }
    if wanted(5) {
        all &= run(5, criterion_5);
    }
    if wanted(6) {
        all &= run(6, criterion_6);
    }
    if wanted(7) {
        all &= run(7, criterion_7);
    }
    if wanted(8) {
        all &= run(8, criterion_8);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
