//! `dosefind`: fit hybrid designs, simulate operating characteristics and
//! serve live trials.

mod scenario;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dosefind::hybrid::{self, HybridCoefficients, IterationPlan};
use dosefind::simulate::{operating_characteristics, reports_csv};
use dosefind::{DoseError, PolicySpec, SimReport};
use scenario::{split_list, ScenarioFile};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<DoseError> for CliError {
    fn from(e: DoseError) -> Self {
        match e {
            DoseError::InvalidConfig(_)
            | DoseError::InvalidPolicy(_)
            | DoseError::Parse(_)
            | DoseError::ResolutionTooSmall { .. }
            | DoseError::DoseOutOfRange { .. }
            | DoseError::InvalidCohortCount(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "dosefind", version, about = "Bayesian dose finding: rollout and hybrid designs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Scenario file (TOML, flat keys).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Comma-separated policy names.
    #[arg(long)]
    policies: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated trials per policy.
    #[arg(long)]
    reps: Option<usize>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long)]
    threads: Option<usize>,
    /// Output path; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Monte Carlo size: rollout replicates for simulate and risk-curve,
    /// sampled trials per iteration for fit.
    #[arg(long = "B")]
    b: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit hybrid coefficients by iterated rollouts.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Operating characteristics of each policy as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Append-only event log; sessions are restored from it on start.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Write the (block, s, epsilon) lookup table for stored coefficients.
    ExportTable {
        /// Coefficients JSON, either a fit output or a single coefficient set.
        #[arg(long)]
        coefficients: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        beta0: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        beta1: Option<f64>,
        #[arg(long, default_value_t = 2.0)]
        s_max: f64,
        #[arg(long, default_value_t = 21)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cumulative risk curve (k, R_k, se) of each policy.
    RiskCurve {
        #[command(flatten)]
        common: Common,
    },
}

const DEFAULT_SIM_REPS: usize = 2000;
const DEFAULT_FIT_REPS: usize = 300;
const DEFAULT_FIT_TRIALS: usize = 200;
const DEFAULT_SEED: u64 = 1;

fn config_hash<T: Serialize>(value: &T) -> Result<String, CliError> {
    let json = serde_json::to_string(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

fn with_header(hash: &str, body: &str) -> String {
    format!("# config-hash: {hash}\n{body}")
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        None => {
            print!("{text}");
            Ok(())
        }
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", p.display()))),
    }
}

fn set_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(t) = threads {
        if t == 0 {
            return Err(CliError::Validation("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

/// Everything that determines a simulate or risk-curve result.
#[derive(Serialize)]
struct SimulationRun<'a> {
    command: &'a str,
    scenario: &'a scenario::ScenarioKeys,
    policies: &'a [PolicySpec],
    reps: usize,
    seed: u64,
}

fn policy_names(common: &Common, file: &ScenarioFile, default: &str) -> Vec<String> {
    match (&common.policies, &file.keys.policies) {
        (Some(p), _) => split_list(p),
        (None, Some(p)) => p.clone(),
        (None, None) => vec![default.to_string()],
    }
}

fn resolve(common: &Common, command: &'static str) -> Result<(ScenarioFile, Vec<PolicySpec>, usize, u64), CliError> {
    let file = ScenarioFile::load(common.scenario.as_deref())?;
    let names = policy_names(common, &file, "ewoc");
    if names.is_empty() {
        return Err(CliError::Validation("no policies given".into()));
    }
    let specs = names.iter().map(|n| file.spec(n, common.b)).collect::<Result<Vec<_>, _>>()?;
    let default_reps = if command == "fit" { DEFAULT_FIT_REPS } else { DEFAULT_SIM_REPS };
    let reps = common.reps.or(file.keys.reps).unwrap_or(default_reps);
    let seed = common.seed.or(file.keys.seed).unwrap_or(DEFAULT_SEED);
    Ok((file, specs, reps, seed))
}

fn simulate_reports(file: &ScenarioFile, specs: &[PolicySpec], reps: usize, seed: u64) -> Result<Vec<SimReport>, CliError> {
    let cfg = file.cfg();
    cfg.validate()?;
    specs
        .iter()
        .map(|spec| {
            let scenario = file.scenario(spec.build(&cfg)?, reps, seed)?;
            Ok(operating_characteristics(&scenario)?)
        })
        .collect()
}

fn simulate(common: Common) -> Result<(), CliError> {
    set_threads(common.threads)?;
    let (file, specs, reps, seed) = resolve(&common, "simulate")?;
    let hash = config_hash(&SimulationRun { command: "simulate", scenario: &file.keys, policies: &specs, reps, seed })?;
    let reports = simulate_reports(&file, &specs, reps, seed)?;
    emit(common.out.as_deref(), &with_header(&hash, &reports_csv(&reports)))
}

fn risk_curve(common: Common) -> Result<(), CliError> {
    set_threads(common.threads)?;
    let (file, specs, reps, seed) = resolve(&common, "risk-curve")?;
    let hash = config_hash(&SimulationRun { command: "risk-curve", scenario: &file.keys, policies: &specs, reps, seed })?;
    let mut body = String::new();
    for r in simulate_reports(&file, &specs, reps, seed)? {
        body.push_str(&format!("# design: {}\n", r.design));
        body.push_str(&r.breakdown.risk_curve_csv());
    }
    emit(common.out.as_deref(), &with_header(&hash, &body))
}

#[derive(Serialize)]
struct FitRun<'a> {
    command: &'a str,
    scenario: &'a scenario::ScenarioKeys,
    base: &'a PolicySpec,
    rollout: &'a PolicySpec,
    learning: &'a PolicySpec,
    iterations: usize,
    sample_trials: usize,
    reps: usize,
    seed: u64,
}

#[derive(Serialize)]
struct FitIteration {
    iteration: usize,
    coefficients: HybridCoefficients,
    sample_size: usize,
    risk: f64,
    risk_se: f64,
}

#[derive(Serialize)]
struct FitOutput {
    config_hash: String,
    iterations: Vec<FitIteration>,
}

fn fit(common: Common, iterations: Option<usize>) -> Result<(), CliError> {
    set_threads(common.threads)?;
    let file = ScenarioFile::load(common.scenario.as_deref())?;
    let cfg = file.cfg();
    cfg.validate()?;
    let base_name = policy_names(&common, &file, "ewoc");
    let [base_name] = base_name.as_slice() else {
        return Err(CliError::Validation("fit takes exactly one base policy".into()));
    };
    let base = file.spec(base_name, None)?;
    let rollout = file.spec("rollout", None)?;
    let learning = match &rollout.learning {
        Some(l) => (**l).clone(),
        None => file.spec("copt", None)?,
    };
    let iterations = iterations.or(file.keys.iterations).unwrap_or(2);
    if iterations == 0 {
        return Err(CliError::Validation("--iterations must be at least 1".into()));
    }
    let sample_trials = common.b.or(file.keys.sample_trials).unwrap_or(DEFAULT_FIT_TRIALS);
    let reps = common.reps.or(file.keys.reps).unwrap_or(DEFAULT_FIT_REPS);
    let seed = common.seed.or(file.keys.seed).unwrap_or(DEFAULT_SEED);
    let hash = config_hash(&FitRun {
        command: "fit",
        scenario: &file.keys,
        base: &base,
        rollout: &rollout,
        learning: &learning,
        iterations,
        sample_trials,
        reps,
        seed,
    })?;

    let base_policy = base.build(&cfg)?;
    let eval = file.scenario(base_policy.clone(), reps, seed)?;
    let plan = IterationPlan {
        learning: learning.build(&cfg)?.to_unit(&cfg),
        myopic: rollout.myopic,
        rollout: rollout.rollout_config(),
        sample_trials,
        blocks: file.keys.blocks,
        mode: file.keys.epsilon_mode,
    };
    let results = hybrid::iterate(&eval.policy, &plan, iterations, &eval)?;
    let mut reports = vec![operating_characteristics(&eval)?];
    reports.extend(results.iter().map(|r| r.report.clone()));
    let output = FitOutput {
        config_hash: hash.clone(),
        iterations: results
            .iter()
            .enumerate()
            .map(|(i, r)| FitIteration {
                iteration: i + 1,
                coefficients: r.coefficients.clone(),
                sample_size: r.sample_size,
                risk: r.report.risk.mean,
                risk_se: r.report.risk.se,
            })
            .collect(),
    };
    let last = &results[results.len() - 1].coefficients;
    let table = hybrid::export_lookup_table(last, &hybrid::s_grid(2.0, 21));
    let json = serde_json::to_string_pretty(&output).map_err(|e| CliError::Runtime(e.to_string()))? + "\n";
    let dir = common.out.unwrap_or_else(|| PathBuf::from("fit"));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    emit(Some(&dir.join("coefficients.json")), &json)?;
    emit(Some(&dir.join("lookup.csv")), &with_header(&hash, &table))?;
    emit(Some(&dir.join("report.csv")), &with_header(&hash, &reports_csv(&reports)))?;
    Ok(())
}

fn read_coefficients(path: &Path) -> Result<HybridCoefficients, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let coeffs = match value.get("iterations").and_then(|v| v.as_array()).and_then(|a| a.last()) {
        Some(last) => last.get("coefficients").cloned().unwrap_or(serde_json::Value::Null),
        None => value,
    };
    serde_json::from_value(coeffs).map_err(|e| CliError::Validation(format!("{}: not a coefficient set: {e}", path.display())))
}

fn export_table(
    coefficients: Option<PathBuf>,
    beta: (Option<f64>, Option<f64>),
    s_max: f64,
    points: usize,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let coeffs = match (coefficients, beta) {
        (Some(p), (None, None)) => read_coefficients(&p)?,
        (None, (Some(b0), Some(b1))) => HybridCoefficients::single(b0, b1, 1),
        _ => return Err(CliError::Validation("give either --coefficients or both --beta0 and --beta1".into())),
    };
    if !(s_max > 0.0 && s_max.is_finite()) || points < 2 {
        return Err(CliError::Validation("--s-max must be positive and --points at least 2".into()));
    }
    let hash = config_hash(&(&coeffs, s_max, points))?;
    emit(out.as_deref(), &with_header(&hash, &hybrid::export_lookup_table(&coeffs, &hybrid::s_grid(s_max, points))))
}

fn serve(port: u16, log: Option<PathBuf>, threads: Option<usize>) -> Result<(), CliError> {
    let mut builder = tokio::runtime::Builder::new_multi_thread();
    if let Some(t) = threads {
        builder.worker_threads(t.max(1));
    }
    let rt = builder.enable_all().build().map_err(|e| CliError::Runtime(e.to_string()))?;
    let addr = std::net::SocketAddr::from(([0, 0, 0, 0], port));
    eprintln!("listening on {addr}");
    rt.block_on(trial_service::serve(addr, log)).map_err(|e| CliError::Runtime(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fit { common, iterations } => fit(common, iterations),
        Command::Simulate { common } => simulate(common),
        Command::RiskCurve { common } => risk_curve(common),
        Command::Serve { port, log, threads } => serve(port, log, threads),
        Command::ExportTable { coefficients, beta0, beta1, s_max, points, out } => {
            export_table(coefficients, (beta0, beta1), s_max, points, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(match e {
                CliError::Validation(_) => 1,
                CliError::Runtime(_) => 2,
            })
        }
    }
}
