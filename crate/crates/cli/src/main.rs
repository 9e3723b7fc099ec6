mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use givehr::baselines::Estimator;
use givehr::benchmark::{config_hash, run_replications, BenchmarkConfig};
use givehr::dataset::{load_long_csv, validate, write_long_csv_to, Cohort};
use givehr::error::{GivehrError, Result};
use givehr::inference::{bootstrap_variance, sandwich_variance, SeMethod, VarianceEstimate};
use givehr::outcome::{fit_givehr, GivehrConfig, GivehrFit};
use givehr::simulate::{generate, Scenario, ScenarioSpec};
use log::info;
use serde::Serialize;

use config::{load_roles, require, FileConfig, FitSettings, SimulateSettings};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "givehr",
    version,
    about = "Regression for EHR biomarkers with informative visiting and observation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; command-line flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for replications and bootstrap (default: logical cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Random seed (default 0)
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a long-format cohort file against the data model
    Validate(DataArgs),
    /// Fit the three-stage estimator to a cohort file
    Fit(FitArgs),
    /// Simulate a cohort from a named scenario
    Simulate(SimulateArgs),
    /// Run a replication study and write bias/RMSE tables
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Long-format CSV (one row per visit)
    #[arg(long)]
    input: Option<PathBuf>,
    /// JSON document assigning columns to the five covariate roles
    #[arg(long)]
    roles: Option<PathBuf>,
    /// End of follow-up; defaults to the largest time in the file
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model document (JSON)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Coefficient table (CSV); defaults to the model path with a `.coefficients.csv` suffix
    #[arg(long)]
    coefficients: Option<PathBuf>,
    /// Standard errors: bootstrap, sandwich or none
    #[arg(long)]
    se: Option<String>,
    #[arg(long)]
    boot_reps: Option<usize>,
    #[arg(long)]
    ci_level: Option<f64>,
    /// Largest accepted condition number of the outcome equation matrix
    #[arg(long)]
    max_condition: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Cohort CSV; the truth is written next to it as `<stem>.truth.json`
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    /// Comma-separated estimator ids, or `all`
    #[arg(long)]
    methods: Option<String>,
    /// sandwich or none
    #[arg(long)]
    se: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: String,
    exit_code: u8,
}

fn exit_code(e: &GivehrError) -> u8 {
    if e.is_numerical() {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let record = ErrorRecord {
                error: e.kind(),
                message: e.to_string(),
                exit_code: code,
            };
            eprintln!(
                "{}",
                serde_json::to_string(&record).expect("error record serializes")
            );
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    if let Some(threads) = cli.threads.or(file.threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| GivehrError::Config(format!("thread pool: {e}")))?;
    }
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    match cli.command {
        Command::Validate(args) => cmd_validate(&args, &file),
        Command::Fit(args) => cmd_fit(&args, &file, seed),
        Command::Simulate(args) => cmd_simulate(&args, &file, seed),
        Command::Benchmark(args) => cmd_benchmark(&args, &file, seed),
    }
}

fn header_line(seed: u64, hash: &str) -> String {
    format!("# givehr {VERSION} seed={seed} config_sha256={hash}")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

struct FitSettingsPart {
    input: PathBuf,
    roles: givehr::dataset::CovariateSpec,
    columns: givehr::dataset::ColumnSchema,
    tau: Option<f64>,
}

fn load_cohort(args: &DataArgs, file: &FileConfig) -> Result<(Cohort, FitSettingsPart)> {
    let input = require(args.input.clone().or_else(|| file.input.clone()), "input")?;
    let roles = match &args.roles {
        Some(path) => load_roles(path)?,
        None => require(file.roles.clone(), "roles")?,
    };
    let columns = file.columns.clone().unwrap_or_default();
    let tau = args.tau.or(file.tau);
    let cohort = load_long_csv(&input, &roles, &columns, tau)?;
    Ok((
        cohort,
        FitSettingsPart {
            input,
            roles,
            columns,
            tau,
        },
    ))
}

fn cmd_validate(args: &DataArgs, file: &FileConfig) -> Result<()> {
    let (cohort, _) = load_cohort(args, file)?;
    let report = validate(&cohort);
    println!("{}", serde_json::to_string_pretty(&report)?);
    match report.violations.first() {
        None => Ok(()),
        Some(v) => Err(GivehrError::InvalidInput(format!(
            "{} violation(s); first: subject `{}`: {}",
            report.violations.len(),
            v.subject,
            v.message
        ))),
    }
}

#[derive(Serialize)]
struct ModelDocument<'a> {
    version: &'a str,
    seed: u64,
    config_sha256: &'a str,
    settings: &'a FitSettings,
    fit: &'a GivehrFit,
    variance: Option<&'a VarianceEstimate>,
}

fn cmd_fit(args: &FitArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let (cohort, part) = load_cohort(&args.data, file)?;
    let se: SeMethod = args
        .se
        .clone()
        .or_else(|| file.se.clone())
        .unwrap_or_else(|| "sandwich".into())
        .parse()?;
    let ci_level = args.ci_level.or(file.ci_level).unwrap_or(0.95);
    if !(ci_level > 0.0 && ci_level < 1.0) {
        return Err(GivehrError::Config(format!(
            "ci level {ci_level} not in (0, 1)"
        )));
    }
    let settings = FitSettings {
        input: part.input,
        roles: part.roles,
        columns: part.columns,
        tau: part.tau,
        se: se.to_string(),
        boot_reps: args.boot_reps.or(file.boot_reps).unwrap_or(200),
        seed,
        ci_level,
        max_condition: args.max_condition.or(file.max_condition).unwrap_or(1e12),
    };
    let out = require(args.out.clone().or_else(|| file.output.clone()), "out")?;
    let coef_path = args
        .coefficients
        .clone()
        .or_else(|| file.coefficients.clone())
        .unwrap_or_else(|| out.with_extension("coefficients.csv"));

    let config = GivehrConfig {
        max_condition: settings.max_condition,
        ..GivehrConfig::default()
    };
    info!(
        "fitting {} subjects, {} visits",
        cohort.n(),
        cohort.total_visits()
    );
    let fit = fit_givehr(&cohort, &config)?;
    let variance = match se {
        SeMethod::None => None,
        SeMethod::Sandwich => Some(sandwich_variance(&fit, &cohort)?),
        SeMethod::Bootstrap => Some(bootstrap_variance(
            &cohort,
            &config,
            settings.boot_reps,
            seed,
            &fit,
        )?),
    }
    .map(|v| v.with_ci_level(ci_level));

    let hash = config_hash(&settings);
    let doc = ModelDocument {
        version: VERSION,
        seed,
        config_sha256: &hash,
        settings: &settings,
        fit: &fit,
        variance: variance.as_ref(),
    };
    let mut w = create(&out)?;
    serde_json::to_writer_pretty(&mut w, &doc)?;
    writeln!(w)?;
    w.flush()?;

    let mut w = create(&coef_path)?;
    writeln!(w, "{}", header_line(seed, &hash))?;
    writeln!(w, "parameter,estimate,se,ci_low,ci_high")?;
    let blank = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (name, est) in fit.names.iter().zip(fit.coefficients()) {
        let se = variance.as_ref().and_then(|v| v.se_of(name));
        let ci = variance.as_ref().and_then(|v| v.interval(name, est));
        writeln!(
            w,
            "{name},{est},{},{},{}",
            blank(se),
            blank(ci.map(|c| c.0)),
            blank(ci.map(|c| c.1))
        )?;
    }
    w.flush()?;
    Ok(())
}

fn scenario_arg(flag: &Option<String>, file: &FileConfig) -> Result<Scenario> {
    require(flag.clone().or_else(|| file.scenario.clone()), "scenario")?.parse()
}

fn cmd_simulate(args: &SimulateArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let scenario = scenario_arg(&args.scenario, file)?;
    let mut spec = ScenarioSpec::new(scenario, args.n.or(file.n).unwrap_or(1000), seed);
    if let Some(tau) = args.tau.or(file.tau) {
        spec.tau = tau;
    }
    let out = require(args.out.clone().or_else(|| file.output.clone()), "out")?;
    let settings = SimulateSettings {
        scenario: scenario.to_string(),
        n: spec.n,
        tau: spec.tau,
        seed,
    };
    let (cohort, truth) = generate(&spec)?;
    let mut w = create(&out)?;
    writeln!(w, "{}", header_line(seed, &config_hash(&settings)))?;
    write_long_csv_to(&cohort, w, &Default::default())?;
    let mut w = create(&out.with_extension("truth.json"))?;
    serde_json::to_writer_pretty(&mut w, &truth)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn cmd_benchmark(args: &BenchmarkArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let scenario = scenario_arg(&args.scenario, file)?;
    let methods = match (&args.methods, &file.estimators) {
        (Some(m), _) => m.clone(),
        (None, Some(list)) => list.join(","),
        (None, None) => "givehr".into(),
    };
    let estimators = Estimator::parse_list(&methods)?;
    let mut config = BenchmarkConfig::new(
        scenario,
        args.n.or(file.n).unwrap_or(1000),
        estimators,
        args.reps.or(file.reps).unwrap_or(200),
        seed,
    );
    if let Some(tau) = file.tau {
        config.scenario.tau = tau;
    }
    config.se = args
        .se
        .clone()
        .or_else(|| file.se.clone())
        .unwrap_or_else(|| "none".into())
        .parse()?;
    let out = require(args.out.clone().or_else(|| file.output.clone()), "out")?;
    info!("benchmark {} x {} reps", scenario, config.reps);
    let result = run_replications(&config)?;
    let w = create(&out)?;
    result.table.write_csv(w)?;
    Ok(())
}
