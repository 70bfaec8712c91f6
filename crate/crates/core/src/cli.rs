//! `sbridge` command-line interface.
//!
//! Every command that writes to `--out` also writes `metadata.json`, whose
//! `config` object can be passed back through `--config` to rerun it.
//! Flags override config-file values, which override defaults.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{
    aggregate, assign_folds, read_aggregates, read_units, write_aggregates, write_units, CellFoldAggregate, DataError, Dataset, UnitRecord,
};
use crate::estimators::{jive_2fold_with_ci, jive_lfold, ols_surrogate_index, tsls, EstimatorError, EstimatorTag};
use crate::identification::{build_counterexample_dgp, verify_instances, FiniteDgpSpec, HeldOutCheck, IdentificationError};
use crate::risk::{minimize_risk_linear, EmpiricalRiskValue, RiskError};
use crate::simulation::{run_sweep, simulate_dataset, LinearDgpConfig, SimulationError, SweepResult, SweepSettings, DEFAULT_K_GRID};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;
pub const EXIT_ACCEPTANCE: u8 = 5;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
    Acceptance(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Acceptance(_) => EXIT_ACCEPTANCE,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numerical(m) | CliError::Acceptance(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EstimatorError> for CliError {
    fn from(e: EstimatorError) -> Self {
        match e {
            EstimatorError::Data(d) => d.into(),
            EstimatorError::Invalid(m) => CliError::Data(m),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<RiskError> for CliError {
    fn from(e: RiskError) -> Self {
        match e {
            RiskError::Data(d) => d.into(),
            RiskError::Singular { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<SimulationError> for CliError {
    fn from(e: SimulationError) -> Self {
        match e {
            SimulationError::Config(m) => CliError::Config(m),
            SimulationError::Data(d) => d.into(),
            SimulationError::Estimator(e) => e.into(),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<IdentificationError> for CliError {
    fn from(e: IdentificationError) -> Self {
        match e {
            IdentificationError::Spec(_) | IdentificationError::Probability { .. } => CliError::Config(e.to_string()),
            IdentificationError::Data(d) => d.into(),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sbridge", version, about = "Surrogate bridge estimation from many weak experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the linear design and write unit, aggregate and ground-truth files
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        folds: Option<usize>,
        /// Number of experiment cells K
        #[arg(long)]
        cells: Option<usize>,
    },
    /// Estimate beta from a unit-level or aggregate CSV
    Estimate {
        /// Unit-level (`cell_id,fold_id,s_1..,y`) or aggregate (`cell_id,fold_id,count,..`) CSV
        input: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Method::Jive)]
        method: Method,
        #[arg(long)]
        alpha: Option<f64>,
        /// Folds to assign when a unit-level file carries none
        #[arg(long)]
        folds: Option<usize>,
    },
    /// MSE and coverage sweep over K
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated estimators (JIVE_LFOLD, TSLS, OLS)
        #[arg(long, value_delimiter = ',')]
        method: Option<Vec<String>>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        k_grid: Option<Vec<usize>>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Check E[Y(a')] = E[h(S(a'))] on random finite instances
    VerifyIdent {
        #[command(flatten)]
        common: Common,
        /// Number of instances
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Jive,
    Jive2Ci,
    Tsls,
    Ols,
    ErmLinear,
}

/// Config file for `sweep`: the DGP fields plus the sweep grid. `seed` keys
/// the sweep's generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    #[serde(flatten)]
    pub dgp: LinearDgpConfig,
    pub k_grid: Vec<usize>,
    pub estimators: Vec<EstimatorTag>,
    pub replications: usize,
    pub alpha: f64,
    pub parallelism: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let s = SweepSettings::default();
        SweepConfig {
            dgp: LinearDgpConfig::default(),
            k_grid: DEFAULT_K_GRID.to_vec(),
            estimators: s.estimators,
            replications: s.replications,
            alpha: s.alpha,
            parallelism: s.parallelism,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    #[serde(flatten)]
    pub spec: FiniteDgpSpec,
    pub instances: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { spec: FiniteDgpSpec::default(), instances: 100, tolerance: 1e-10, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub input: PathBuf,
    pub method: Method,
    pub alpha: f64,
    /// Folds assigned by the command; `None` when the input already had them.
    pub assigned_folds: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
struct Metadata<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    config: &'a C,
    outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErmReport {
    pub estimator_tag: String,
    pub beta_hat: Vec<f64>,
    pub risk: EmpiricalRiskValue,
    pub num_cells: usize,
}

#[derive(Debug, Serialize)]
struct VerifyOutput {
    #[serde(flatten)]
    report: crate::identification::VerificationReport,
    counterexample: Option<HeldOutCheck>,
}

/// Reads a config file. A `metadata.json` written by an earlier run is
/// accepted too; its `config` object is used.
fn read_config_value(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    match value {
        Value::Object(mut map) if map.contains_key("command") && map.contains_key("config") => Ok(map.remove("config").expect("checked")),
        other => Ok(other),
    }
}

fn load_config<C: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<C, CliError> {
    let Some(path) = path else { return Ok(C::default()) };
    serde_json::from_value(read_config_value(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn write_metadata<C: Serialize>(out: &Path, command: &str, config: &C, outputs: &[&str]) -> Result<(), CliError> {
    let meta = Metadata { command, version: env!("CARGO_PKG_VERSION"), config, outputs: outputs.iter().map(|s| s.to_string()).collect() };
    write_text(&out.join("metadata.json"), &to_json(&meta))
}

fn check_alpha(alpha: f64) -> Result<f64, CliError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(alpha)
    } else {
        Err(CliError::Config(format!("--alpha must lie in (0, 1), got {alpha}")))
    }
}

pub fn cmd_simulate(common: &Common, folds: Option<usize>, cells: Option<usize>) -> Result<String, CliError> {
    let mut config: LinearDgpConfig = load_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(l) = folds {
        config.num_folds = l;
    }
    if let Some(k) = cells {
        config.num_cells = k;
    }
    let (dataset, truth) = simulate_dataset(&config)?;
    let aggregates = aggregate(&dataset)?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    prepare_out(&out)?;
    write_units(&dataset, &out.join("units.csv"))?;
    write_aggregates(&aggregates, &out.join("aggregates.csv"))?;
    write_text(&out.join("ground_truth.json"), &to_json(&truth))?;
    write_metadata(&out, "simulate", &config, &["units.csv", "aggregates.csv", "ground_truth.json"])?;
    Ok(format!("wrote {} units in {} cells x {} folds to {}\n", dataset.len(), config.num_cells, config.num_folds, out.display()))
}

enum Input {
    Units(Dataset),
    Aggregates(Vec<CellFoldAggregate>),
}

fn read_input(path: &Path) -> Result<Input, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut header = String::new();
    BufReader::new(file).read_line(&mut header).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let with_path = |e: DataError| CliError::Data(format!("{}: {e}", path.display()));
    if header.starts_with("cell_id,fold_id,count") {
        read_aggregates(path).map(Input::Aggregates).map_err(with_path)
    } else {
        read_units(path).map(Input::Units).map_err(with_path)
    }
}

/// Replaces each aggregate by `count` identical pseudo-units at the means.
/// Linear bridges see the same fold means, so the linear risk is unchanged.
fn expand_aggregates(aggregates: &[CellFoldAggregate]) -> Result<Dataset, CliError> {
    let mut ids: Vec<usize> = aggregates.iter().map(|a| a.cell_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let dim = aggregates.first().map_or(0, |a| a.mean_surrogate.len());
    let mut records = Vec::new();
    for agg in aggregates {
        let cell_id = ids.binary_search(&agg.cell_id).expect("collected") + 1;
        for _ in 0..agg.count {
            records.push(UnitRecord {
                cell_id,
                fold_id: Some(agg.fold_id),
                surrogate: agg.mean_surrogate.clone(),
                outcome: agg.mean_outcome,
            });
        }
    }
    Ok(Dataset::new(records, ids.len(), dim)?)
}

pub fn cmd_estimate(input: &Path, common: &Common, method: Method, alpha: Option<f64>, folds: Option<usize>) -> Result<String, CliError> {
    let mut config = EstimateConfig { input: input.to_path_buf(), method, alpha: 0.05, assigned_folds: None, seed: 0 };
    if let Some(path) = common.config.as_deref() {
        let v = read_config_value(path)?;
        if let Some(a) = v.get("alpha").and_then(Value::as_f64) {
            config.alpha = a;
        }
        if let Some(s) = v.get("seed").and_then(Value::as_u64) {
            config.seed = s;
        }
    }
    if let Some(a) = alpha {
        config.alpha = a;
    }
    if let Some(s) = common.seed {
        config.seed = s;
    }
    check_alpha(config.alpha)?;

    let data = read_input(input)?;
    let default_folds = if method == Method::Jive2Ci { 2 } else { 5 };
    let mut with_folds = |ds: Dataset| -> Result<Dataset, CliError> {
        if ds.num_folds().is_some() {
            return Ok(ds);
        }
        let l = folds.unwrap_or(default_folds);
        config.assigned_folds = Some(l);
        Ok(assign_folds(ds, l, config.seed)?)
    };
    let needs_units = |name: &str| CliError::Data(format!("method `{name}` needs a unit-level file, got aggregates"));

    let text = match (method, data) {
        (Method::Ols, Input::Units(ds)) => to_json(&ols_surrogate_index(&ds)?),
        (Method::Ols, Input::Aggregates(_)) => return Err(needs_units("ols")),
        (Method::ErmLinear, data) => {
            let ds = match data {
                Input::Units(ds) => with_folds(ds)?,
                Input::Aggregates(aggs) => expand_aggregates(&aggs)?,
            };
            let (beta_hat, risk) = minimize_risk_linear(&ds)?;
            to_json(&ErmReport { estimator_tag: "ERM_LINEAR".into(), beta_hat, risk, num_cells: ds.num_cells() })
        }
        (m, data) => {
            let aggs = match data {
                Input::Units(ds) => aggregate(&with_folds(ds)?)?,
                Input::Aggregates(aggs) => aggs,
            };
            let report = match m {
                Method::Jive => jive_lfold(&aggs)?,
                Method::Jive2Ci => jive_2fold_with_ci(&aggs, config.alpha)?,
                Method::Tsls => tsls(&aggs)?,
                Method::Ols | Method::ErmLinear => unreachable!(),
            };
            to_json(&report)
        }
    };
    if let Some(out) = &common.out {
        prepare_out(out)?;
        write_text(&out.join("report.json"), &text)?;
        write_metadata(out, "estimate", &config, &["report.json"])?;
    }
    Ok(text)
}

pub fn resolve_sweep(
    common: &Common,
    method: Option<&[String]>,
    alpha: Option<f64>,
    k_grid: Option<&[usize]>,
    reps: Option<usize>,
    parallelism: Option<usize>,
    folds: Option<usize>,
) -> Result<SweepConfig, CliError> {
    let mut config: SweepConfig = load_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.dgp.seed = seed;
    }
    if let Some(names) = method {
        config.estimators = names.iter().map(|n| n.trim().parse::<EstimatorTag>().map_err(CliError::Config)).collect::<Result<_, _>>()?;
    }
    if let Some(a) = alpha {
        config.alpha = a;
    }
    if let Some(k) = k_grid {
        config.k_grid = k.to_vec();
    }
    if let Some(r) = reps {
        config.replications = r;
    }
    if let Some(p) = parallelism {
        config.parallelism = p;
    }
    if let Some(l) = folds {
        config.dgp.num_folds = l;
    }
    check_alpha(config.alpha)?;
    if config.parallelism == 0 {
        return Err(CliError::Config("--parallelism must be at least 1".into()));
    }
    Ok(config)
}

pub fn cmd_sweep(config: &SweepConfig, out: Option<&Path>) -> Result<String, CliError> {
    let settings = SweepSettings {
        k_grid: config.k_grid.clone(),
        estimators: config.estimators.clone(),
        replications: config.replications,
        alpha: config.alpha,
        parallelism: config.parallelism,
        seed: config.dgp.seed,
    };
    let (result, failure) = match run_sweep(&config.dgp, &settings) {
        Ok(r) => (r, None),
        Err(SimulationError::TooManyFailures { partial, .. }) if out.is_some() => {
            let msg = "too many failed replications; partial table written".to_string();
            (*partial, Some(CliError::Numerical(msg)))
        }
        Err(e) => return Err(e.into()),
    };
    let csv = result.to_csv();
    if let Some(out) = out {
        write_sweep(out, config, &result, &csv)?;
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(csv),
    }
}

fn write_sweep(out: &Path, config: &SweepConfig, result: &SweepResult, csv: &str) -> Result<(), CliError> {
    prepare_out(out)?;
    write_text(&out.join("sweep.csv"), csv)?;
    write_text(&out.join("sweep.json"), &to_json(result))?;
    // parallelism does not change results, but record it anyway
    write_metadata(out, "sweep", config, &["sweep.csv", "sweep.json"])
}

pub fn cmd_verify_ident(common: &Common, reps: Option<usize>, tolerance: Option<f64>) -> Result<String, CliError> {
    let mut config: VerifyConfig = load_config(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(n) = reps {
        config.instances = n;
    }
    if let Some(t) = tolerance {
        config.tolerance = t;
    }
    if !(config.tolerance > 0.0) {
        return Err(CliError::Config("--tolerance must be positive".into()));
    }
    let report = verify_instances(&config.spec, config.instances, config.seed, config.tolerance)?;
    let counterexample = build_counterexample_dgp(&config.spec, config.seed, 1e-2).ok().map(|(_, c)| c);
    let all_pass = report.all_pass;
    let max_gap = report.max_gap;
    let failed = report.instances.iter().filter(|c| !c.pass).count();
    let text = to_json(&VerifyOutput { report, counterexample });
    if let Some(out) = &common.out {
        prepare_out(out)?;
        write_text(&out.join("verification.json"), &text)?;
        write_metadata(out, "verify-ident", &config, &["verification.json"])?;
    }
    if all_pass {
        Ok(text)
    } else {
        print!("{text}");
        Err(CliError::Acceptance(format!("{failed} instance(s) exceed tolerance {:e}; max gap {max_gap:e}", config.tolerance)))
    }
}

pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Simulate { common, folds, cells } => cmd_simulate(&common, folds, cells),
        Command::Estimate { input, common, method, alpha, folds } => cmd_estimate(&input, &common, method, alpha, folds),
        Command::Sweep { common, method, alpha, k_grid, reps, parallelism, folds } => {
            let config = resolve_sweep(&common, method.as_deref(), alpha, k_grid.as_deref(), reps, parallelism, folds)?;
            cmd_sweep(&config, common.out.as_deref())
        }
        Command::VerifyIdent { common, reps, tolerance } => cmd_verify_ident(&common, reps, tolerance),
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
