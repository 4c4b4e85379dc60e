use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rdsreg::bootstrap::{bootstrap_fit, BootstrapConfig, Method, NeighborhoodVariant, Replacement};
use rdsreg::dataset::Dataset;
use rdsreg::dgp::{
    calibrate_intercept, gen_covariate, gen_outcomes, sample_network_effects, CovariateSpec, DgpParams, Link,
    SarPolicy,
};
use rdsreg::glmm::{fit_dataset, wald_ci, Clustering, FitResult, ModelSpec};
use rdsreg::net::PopulationNetwork;
use rdsreg::netgen::{generate_population, ErgmConfig};
use rdsreg::rng::named_stream;
use rdsreg::sampler::{run_rds, RdsConfig, RecruitmentTree};
use rdsreg::study::{load_config, run_study, save_config, write_failures, write_report, StudyConfig};
use rdsreg::weights::{apply_scheme, PopSizeAssumption, SsOptions, WeightKind, WeightScheme};
use rdsreg::{Error, Result};

#[derive(Parser)]
#[command(name = "rdsreg", version, about = "Regression on respondent-driven sampling data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a clustered population network from the ERGM.
    Generate(GenerateArgs),
    /// Run RDS recruitment on a network.
    Sample(SampleArgs),
    /// Draw covariate and outcome on a network and keep the recruits.
    SimulateData(SimulateArgs),
    /// Compute design weights for a recruitment tree.
    Weights(WeightsArgs),
    /// Fit a weighted random-intercept model to a dataset.
    Fit(FitArgs),
    /// Tree or neighborhood bootstrap of a model fit.
    Bootstrap(BootstrapArgs),
    /// Run a replication study from a JSON config.
    Study(StudyArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// ERGM config as JSON; the reference design when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NetworkInput {
    #[arg(long)]
    edges: PathBuf,
    #[arg(long)]
    nodes: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    network: NetworkInput,
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    #[arg(long, default_value_t = 3)]
    coupons: usize,
    #[arg(long, default_value_t = 0.2)]
    fraction: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    network: NetworkInput,
    /// Recruitment tree from `sample`.
    #[arg(long)]
    tree: PathBuf,
    #[arg(long, value_enum, default_value_t = LinkArg::Identity)]
    link: LinkArg,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    beta0: f64,
    #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
    beta1: f64,
    #[arg(long, default_value_t = 1.5, allow_hyphen_values = true)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    #[arg(long, default_value_t = 0.05, allow_hyphen_values = true)]
    rho: f64,
    #[arg(long, default_value_t = 1.0)]
    residual_variance: f64,
    /// Require ρ·λ_max < 1 in every cluster.
    #[arg(long)]
    stationary: bool,
    #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
    x_mean: f64,
    #[arg(long, default_value_t = 1.5)]
    x_sd: f64,
    /// Target correlation between x and degree.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    rho_d: f64,
    /// Logit only: calibrate β0 to this prevalence instead of `--beta0`.
    #[arg(long)]
    prevalence: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum LinkArg {
    Identity,
    Log,
    Logit,
}

impl From<LinkArg> for Link {
    fn from(l: LinkArg) -> Link {
        match l {
            LinkArg::Identity => Link::Identity,
            LinkArg::Log => Link::Log,
            LinkArg::Logit => Link::Logit,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    None,
    Rds2,
    Ss,
}

#[derive(Clone, Copy, ValueEnum)]
enum PopSizeArg {
    True,
    Under,
    Over,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClusterArg {
    Seed,
    Recruiter,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Tree,
    Neighborhood,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Replicated,
    Induced,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReplacementArg {
    With,
    Without,
}

#[derive(Args)]
struct SchemeOpts {
    #[arg(long, value_enum, default_value_t = SchemeArg::None)]
    scheme: SchemeArg,
    /// Population size for SS weights.
    #[arg(long)]
    pop_size: Option<usize>,
    #[arg(long, value_enum, default_value_t = PopSizeArg::True)]
    pop_size_variant: PopSizeArg,
    /// Monte Carlo draws per SS iteration.
    #[arg(long, default_value_t = 2000)]
    ss_draws: usize,
}

impl SchemeOpts {
    fn scheme(&self) -> WeightScheme {
        let assumption = match self.pop_size_variant {
            PopSizeArg::True => PopSizeAssumption::TrueN,
            PopSizeArg::Under => PopSizeAssumption::Under,
            PopSizeArg::Over => PopSizeAssumption::Over,
        };
        match self.scheme {
            SchemeArg::None => WeightScheme::UNWEIGHTED,
            SchemeArg::Rds2 => WeightScheme::RDS2,
            SchemeArg::Ss => WeightScheme::ss(assumption),
        }
    }

    fn pop_size(&self, sample: usize) -> Result<usize> {
        match (self.scheme().kind, self.pop_size) {
            (WeightKind::Ss, None) => Err(Error::Config("SS weights need --pop-size".into())),
            (_, Some(n)) => Ok(n),
            (_, None) => Ok(sample),
        }
    }

    fn ss(&self) -> SsOptions {
        SsOptions {
            draws: self.ss_draws,
            ..SsOptions::default()
        }
    }
}

#[derive(Args)]
struct WeightsArgs {
    #[arg(long)]
    tree: PathBuf,
    #[command(flatten)]
    scheme: SchemeOpts,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelOpts {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = LinkArg::Identity)]
    link: LinkArg,
    #[arg(long, value_enum, default_value_t = ClusterArg::Seed)]
    cluster: ClusterArg,
    #[command(flatten)]
    scheme: SchemeOpts,
    /// Add the observed-tree neighbor mean of x as a covariate.
    #[arg(long)]
    homophily_term: bool,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl ModelOpts {
    fn spec(&self) -> ModelSpec {
        let clustering = match self.cluster {
            ClusterArg::Seed => Clustering::Seed,
            ClusterArg::Recruiter => Clustering::Recruiter,
        };
        let mut spec = ModelSpec::new(self.link.into(), clustering, self.scheme.scheme());
        spec.include_homophily_term = self.homophily_term;
        spec
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    model: ModelOpts,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BootstrapArgs {
    #[command(flatten)]
    model: ModelOpts,
    #[arg(long, value_enum, default_value_t = MethodArg::Tree)]
    method: MethodArg,
    #[arg(long = "B", default_value_t = 1000)]
    replicates: usize,
    #[arg(long, value_enum, default_value_t = VariantArg::Replicated)]
    variant: VariantArg,
    #[arg(long, value_enum, default_value_t = ReplacementArg::With)]
    replacement: ReplacementArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    /// JSON study config.
    config: Option<PathBuf>,
    /// Start from a built-in design instead of a file.
    #[arg(long, value_parser = ["homophily", "degree"])]
    preset: Option<String>,
    /// Write the resolved config and exit.
    #[arg(long)]
    print_config: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Sample(a) => sample(a),
        Command::SimulateData(a) => simulate(a),
        Command::Weights(a) => weights(a),
        Command::Fit(a) => fit(a),
        Command::Bootstrap(a) => bootstrap(a),
        Command::Study(a) => study(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_network(n: &NetworkInput) -> Result<PopulationNetwork> {
    PopulationNetwork::read(&n.edges, n.nodes.as_deref())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => read_json::<ErgmConfig>(p)?,
        None => ErgmConfig::reference(),
    };
    let net = generate_population(&cfg, a.seed)?;
    create_dir(&a.out)?;
    net.write_edge_list(&a.out.join("edges.csv"))?;
    net.write_node_file(&a.out.join("nodes.csv"))?;
    #[derive(serde::Serialize)]
    struct Echo<'a> {
        seed: u64,
        config: &'a ErgmConfig,
    }
    write_json(&Echo { seed: a.seed, config: &cfg }, &a.out.join("config.json"))?;
    eprintln!("{} nodes, {} edges -> {}", net.total_size(), net.edge_count(), a.out.display());
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let net = read_network(&a.network)?;
    let cfg = RdsConfig {
        num_seeds: a.seeds,
        coupons: a.coupons,
        sample_fraction: a.fraction,
        rng_seed: a.seed,
    };
    let tree = run_rds(&net, &cfg, &mut named_stream(a.seed, "sampling", &[]))?;
    tree.write(&a.out)?;
    eprintln!("{} recruits from {} seeds -> {}", tree.len(), tree.seed_count(), a.out.display());
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let net = read_network(&a.network)?;
    let tree = RecruitmentTree::read(&a.tree)?;
    let mut params = DgpParams {
        beta0: a.beta0,
        beta1: a.beta1,
        gamma: a.gamma,
        sigma2: a.sigma2,
        rho: a.rho,
        link: a.link.into(),
        residual_variance: a.residual_variance,
        sar_policy: if a.stationary { SarPolicy::Stationary } else { SarPolicy::Invertible },
    };
    let cov = CovariateSpec {
        mean: a.x_mean,
        sd: a.x_sd,
        degree_correlation: a.rho_d,
    };
    if let Some(p) = a.prevalence {
        params.beta0 = calibrate_intercept(p, &params, &cov, &net, &mut named_stream(a.seed, "calibrate", &[]))?;
        eprintln!("calibrated beta0 = {:.4}", params.beta0);
    }
    let x = gen_covariate(&cov, &net.degrees(), &mut named_stream(a.seed, "covariate", &[]))?;
    let delta = sample_network_effects(&net, params.sigma2, params.rho, params.sar_policy, &mut named_stream(a.seed, "effects", &[]))?;
    let out = gen_outcomes(&net, &x, &delta, &params, &mut named_stream(a.seed, "outcome", &[]))?;
    Dataset::from_population(&tree, &x, &out.y).write(&a.out)
}

fn weights(a: WeightsArgs) -> Result<()> {
    let tree = RecruitmentTree::read(&a.tree)?;
    let n = a.scheme.pop_size(tree.len())?;
    let w = apply_scheme(&tree, &a.scheme.scheme(), n, &a.scheme.ss(), &mut named_stream(a.seed, "weights", &[]))?;
    if !w.converged {
        eprintln!("warning: SS iteration hit its cap before converging");
    }
    let mut out = csv::Writer::from_path(&a.out).map_err(|e| Error::csv(&a.out, e))?;
    out.write_record(["node_id", "pi_hat", "weight"]).map_err(|e| Error::csv(&a.out, e))?;
    for ((r, p), wt) in tree.recruits().iter().zip(&w.pi_hat).zip(&w.weight) {
        out.write_record([r.node_id.to_string(), p.to_string(), wt.to_string()])
            .map_err(|e| Error::csv(&a.out, e))?;
    }
    out.flush().map_err(|e| Error::io(&a.out, e))
}

fn fit_with(m: &ModelOpts) -> Result<(Dataset, ModelSpec, usize, FitResult)> {
    let data = Dataset::read(&m.data)?;
    let spec = m.spec();
    let n = m.scheme.pop_size(data.len())?;
    let fit = fit_dataset(&data, &spec, n, &m.scheme.ss(), &mut named_stream(m.seed, "weights", &[]))?;
    Ok((data, spec, n, fit))
}

/// Writes CSV rows to `path`, or to stdout when absent.
fn emit(rows: Vec<Vec<String>>, path: Option<&Path>) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in &rows {
            w.write_record(r).map_err(|e| Error::csv(path.unwrap_or(Path::new("-")), e))?;
        }
        w.flush().map_err(|e| Error::io(path.unwrap_or(Path::new("-")), e))?;
    }
    match path {
        Some(p) => std::fs::write(p, buf).map_err(|e| Error::io(p, e)),
        None => print_stdout(&buf),
    }
}

/// Writes to stdout; a closed pipe is not an error.
fn print_stdout(bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(bytes) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn fit(a: FitArgs) -> Result<()> {
    let (_, _, _, fit) = fit_with(&a.model)?;
    let ci = wald_ci(&fit, a.model.level);
    let mut rows = vec![["term", "estimate", "se", "ci_lo", "ci_hi"].map(String::from).to_vec()];
    for (j, name) in fit.names.iter().enumerate() {
        rows.push(vec![
            name.clone(),
            fit.coefficients[j].to_string(),
            fit.se[j].to_string(),
            ci[j].0.to_string(),
            ci[j].1.to_string(),
        ]);
    }
    let blank = || String::new();
    rows.push(vec!["sigma0".into(), fit.sigma0.to_string(), blank(), blank(), blank()]);
    if let Some(s) = fit.sigma_res {
        rows.push(vec!["sigma".into(), s.to_string(), blank(), blank(), blank()]);
    }
    rows.push(vec!["icc".into(), fit.icc.map_or_else(blank, |v| v.to_string()), blank(), blank(), blank()]);
    if !fit.converged {
        eprintln!("warning: variance optimization stopped at the search boundary");
    }
    emit(rows, a.out.as_deref())
}

fn bootstrap(a: BootstrapArgs) -> Result<()> {
    let (data, spec, n, fit) = fit_with(&a.model)?;
    let tree = data.tree()?;
    let cfg = BootstrapConfig {
        method: match a.method {
            MethodArg::Tree => Method::Tree,
            MethodArg::Neighborhood => Method::Neighborhood,
        },
        replicates: a.replicates,
        level: a.model.level,
        rng_seed: a.model.seed,
        replacement: match a.replacement {
            ReplacementArg::With => Replacement::With,
            ReplacementArg::Without => Replacement::Without,
        },
        neighborhood_variant: match a.variant {
            VariantArg::Replicated => NeighborhoodVariant::Replicated,
            VariantArg::Induced => NeighborhoodVariant::Induced,
        },
    };
    let ss = a.model.scheme.ss();
    let res = bootstrap_fit(&data, &tree, &fit, &cfg, |d, rng| fit_dataset(d, &spec, n, &ss, rng))?;
    if res.unreliable {
        eprintln!("warning: {} of {} refits failed; result unreliable", res.failed, a.replicates);
    }
    let mut rows = vec![["term", "estimate", "se_boot", "ci_lo", "ci_hi", "failed"].map(String::from).to_vec()];
    for (j, name) in res.names.iter().enumerate() {
        rows.push(vec![
            name.clone(),
            res.estimates[j].to_string(),
            res.se[j].to_string(),
            res.ci[j].0.to_string(),
            res.ci[j].1.to_string(),
            res.failed.to_string(),
        ]);
    }
    emit(rows, a.out.as_deref())
}

fn study(a: StudyArgs) -> Result<()> {
    let mut cfg = match (&a.config, a.preset.as_deref()) {
        (Some(p), None) => load_config(p)?,
        (None, Some("homophily")) => StudyConfig::homophily_study(200, 1),
        (None, Some(_)) => StudyConfig::degree_study(200, 1),
        (Some(_), Some(_)) => return Err(Error::Config("give a config file or --preset, not both".into())),
        (None, None) => return Err(Error::Config("a config file or --preset is required".into())),
    };
    if let Some(s) = a.seed {
        cfg.master_seed = s;
    }
    if let Some(r) = a.replicates {
        cfg.replicates = r;
    }
    if a.print_config {
        let text = serde_json::to_string_pretty(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        return print_stdout((text + "\n").as_bytes());
    }
    let out = a.out.ok_or_else(|| Error::Config("--out is required".into()))?;
    if let Some(t) = a.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    create_dir(&out)?;
    save_config(&cfg, &out.join("config.json"))?;
    let report = run_study(&cfg)?;
    write_report(&report, &out.join("report.csv"))?;
    write_failures(&report.failures, &out.join("failures.csv"))?;
    let flagged = report.rows.iter().filter(|r| r.flagged).count();
    eprintln!(
        "{} rows, {} failures logged, {} flagged -> {}",
        report.rows.len(),
        report.failures.len(),
        flagged,
        out.display()
    );
    if flagged > 0 {
        return Err(Error::Structure(format!("{flagged} cell(s) exceeded the failure limit")));
    }
    Ok(())
}
