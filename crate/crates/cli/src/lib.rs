//! Argument parsing and command implementations for the `covadj` binary.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use covadj::dataset::{encode_treatment, load_csv, BinaryTrial};
use covadj::estimators::{render_csv, render_table};
use covadj::glm::LinkFamily;
use covadj::imputer::{impute, ImputationMethod};
use covadj::lasso::Family;
use covadj::pipeline::{analyze, PipelineConfig};
use covadj::selector::{select, SelectionMethod, SelectionSpec};
use covadj::simlab::{
    default_methods, run_monte_carlo, true_ate_oracle, Delta, DgpSpec, LinearDeltaReading, Outcome, SimMethod,
    DEFAULT_ORACLE_N_BIG, DEFAULT_ORACLE_REPS,
};
use serde::Serialize;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

/// Library errors raised while running: bad parameters are configuration
/// problems, everything else is about the data.
impl From<covadj::Error> for CliError {
    fn from(e: covadj::Error) -> Self {
        match e {
            covadj::Error::InvalidParameter(_) => Self::config(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "covadj", version, about = "Covariate-adjusted treatment effects for randomized trials")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the ATE with all four estimators.
    Analyze(AnalyzeArgs),
    /// Run variable selection and export the chosen covariates.
    Select(SelectArgs),
    /// Monte Carlo study on the built-in data-generating process.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutcomeType {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "Y")]
    pub outcome_col: String,
    #[arg(long, default_value = "A")]
    pub treatment_col: String,
    /// Treatment arm label in the treatment column.
    #[arg(long)]
    pub trt_name: String,
    /// Control arm label in the treatment column.
    #[arg(long)]
    pub ctrl_name: String,
    /// Inferred from the outcome when omitted (two values 0/1 means binary).
    #[arg(long, value_enum)]
    pub outcome_type: Option<OutcomeType>,
    /// No, Lasso, A.Lasso, Corr.k, Corr.xi or Pre.test.
    #[arg(long, default_value = "Lasso")]
    pub var_sel_method: String,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 0.25)]
    pub xi: f64,
    #[arg(long, default_value_t = 0.05)]
    pub pre_alpha: f64,
    /// gaussian or binomial; follows the outcome type when omitted.
    #[arg(long)]
    pub lasso_family: Option<String>,
    /// gaussian or binomial; follows the outcome type when omitted.
    #[arg(long)]
    pub a_lasso_family: Option<String>,
    /// cc, mice, ipw or missInd.
    #[arg(long, default_value = "cc")]
    pub mi_method: String,
    #[arg(long, default_value_t = 4399)]
    pub seed: u64,
    /// Flat key=value file of defaults; explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// linear, identity, logit, probit, log or cloglog; logit for binary outcomes when omitted.
    #[arg(long)]
    pub out1_model_aipw: Option<String>,
    #[arg(long)]
    pub out0_model_aipw: Option<String>,
    /// Coverage of the confidence intervals.
    #[arg(long, default_value_t = 0.95)]
    pub conf_level: f64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// JSON file receiving the selection, imputation summary and AIPW arm means.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Write the (imputed) dataset restricted to the pooled selection.
    #[arg(long)]
    pub export_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value = "continuous")]
    pub outcome: String,
    #[arg(long, default_value = "linear")]
    pub delta: String,
    /// as-written (c1 * X'beta1) or additive (c1 + X'beta1).
    #[arg(long, default_value = "as-written")]
    pub linear_delta_reading: String,
    /// Rows per simulated trial.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// Replications.
    #[arg(long, default_value_t = 500)]
    pub m: usize,
    #[arg(long, default_value_t = 4399)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Comma-separated labels such as Simple,Lasso+AIPW,No+AIPW[X]; all methods when omitted.
    #[arg(long)]
    pub methods: Option<String>,
    /// Print the oracle ATE and stop.
    #[arg(long)]
    pub oracle_only: bool,
    #[arg(long, default_value_t = DEFAULT_ORACLE_N_BIG)]
    pub oracle_n_big: usize,
    #[arg(long, default_value_t = DEFAULT_ORACLE_REPS)]
    pub oracle_reps: usize,
    /// Use this true ATE instead of computing the oracle.
    #[arg(long)]
    pub oracle_tau: Option<f64>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// JSON report path.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// CSV summary path.
    #[arg(long)]
    pub summary_csv: Option<PathBuf>,
    /// Per-replication CSV path.
    #[arg(long)]
    pub replications_csv: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Splices `--config` file entries in front of the explicit arguments so that
/// flags given on the command line override them.
pub fn expand_config(args: Vec<String>) -> CliResult<Vec<String>> {
    let pos = args.iter().position(|a| a == "--config" || a.starts_with("--config="));
    let Some(pos) = pos else { return Ok(args) };
    let (path, consumed) = match args[pos].strip_prefix("--config=") {
        Some(p) => (p.to_string(), 1),
        None => (args.get(pos + 1).cloned().ok_or_else(|| CliError::config("--config needs a file path"))?, 2),
    };
    let text = fs::read_to_string(&path).map_err(|e| CliError::config(format!("--config {path}: {e}")))?;
    let mut injected = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--config {path}:{}: expected key=value", lineno + 1)))?;
        let key = key.trim().trim_start_matches("--").replace(['_', '.'], "-").to_ascii_lowercase();
        let value = value.trim();
        if key == "oracle-only" {
            match value.to_ascii_lowercase().as_str() {
                "true" | "1" | "yes" => injected.push(format!("--{key}")),
                "false" | "0" | "no" => {}
                _ => return Err(CliError::config(format!("--config {path}: {key} expects true/false"))),
            }
        } else {
            injected.push(format!("--{key}"));
            injected.push(value.to_string());
        }
    }
    let mut out: Vec<String> = args[..pos].to_vec();
    // Subcommand is the first argument after the program name.
    let insert_at = out.len().min(2);
    let rest: Vec<String> = args[pos + consumed..].to_vec();
    let tail = out.split_off(insert_at);
    out.extend(injected);
    out.extend(tail);
    out.extend(rest);
    Ok(out)
}

fn parse_link(name: &str, flag: &str) -> CliResult<LinkFamily> {
    name.parse().map_err(|_| {
        CliError::config(format!(
            "{flag}: unknown link {name:?} (expected linear, identity, logit, probit, log or cloglog)"
        ))
    })
}

fn parse_family(name: &str, flag: &str) -> CliResult<Family> {
    name.parse().map_err(|e: covadj::Error| CliError::config(format!("{flag}: {e}")))
}

fn parse_mi(name: &str) -> CliResult<ImputationMethod> {
    name.parse().map_err(|e: covadj::Error| match e {
        covadj::Error::UnsupportedMissingness(msg) => CliError::config(format!("--mi-method {name}: {msg}")),
        other => CliError::config(format!("--mi-method: {other}")),
    })
}

/// Effective settings after defaults that depend on the outcome type.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub outcome_type: &'static str,
    pub outcome_type_inferred: bool,
    pub var_sel_method: String,
    pub lasso_family: String,
    pub mi_method: String,
    pub out1_model_aipw: String,
    pub out0_model_aipw: String,
    pub conf_level: f64,
    pub seed: u64,
}

struct Loaded {
    trial: BinaryTrial,
    binary: bool,
    inferred: bool,
}

fn load(args: &DataArgs) -> CliResult<Loaded> {
    let ds = load_csv(&args.data, &args.outcome_col, &args.treatment_col)
        .map_err(|e| CliError::data(format!("--data {}: {e}", args.data.display())))?;
    let trial = encode_treatment(&ds, &args.trt_name, &args.ctrl_name)
        .map_err(|e| CliError::data(format!("--trt-name/--ctrl-name: {e}")))?;
    let observed: Vec<f64> = trial.outcome().iter().flatten().copied().collect();
    let zero_one = observed.iter().all(|&v| v == 0.0 || v == 1.0);
    let (binary, inferred) = match args.outcome_type {
        Some(OutcomeType::Binary) => {
            if !zero_one {
                return Err(CliError::data(format!(
                    "--outcome-type binary: outcome column {} must hold 0/1 values",
                    args.outcome_col
                )));
            }
            (true, false)
        }
        Some(OutcomeType::Continuous) => (false, false),
        None => (zero_one && observed.contains(&0.0) && observed.contains(&1.0), true),
    };
    Ok(Loaded { trial, binary, inferred })
}

fn selection_spec(args: &DataArgs, binary: bool) -> CliResult<(SelectionSpec, String)> {
    let method = SelectionMethod::from_name(&args.var_sel_method, args.k, args.xi, args.pre_alpha)
        .map_err(|e| CliError::config(format!("--var-sel-method: {e}")))?;
    let (flag, given) = if method == SelectionMethod::AdaptiveLasso {
        ("--a-lasso-family", &args.a_lasso_family)
    } else {
        ("--lasso-family", &args.lasso_family)
    };
    let family = match given {
        Some(name) => parse_family(name, flag)?,
        None if binary => Family::Binomial,
        None => Family::Gaussian,
    };
    let mut spec = SelectionSpec::new(method, args.seed);
    spec.family = Some(family);
    Ok((spec, family.to_string()))
}

fn write_out(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::data(format!("--output {}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|e| CliError::data(format!("stdout: {e}")))
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| CliError::data(format!("JSON encoding: {e}")))
}

pub fn resolve_analyze(
    args: &AnalyzeArgs,
    binary: bool,
    inferred: bool,
) -> CliResult<(PipelineConfig, ResolvedConfig)> {
    if !(args.conf_level > 0.5 && args.conf_level < 1.0) {
        return Err(CliError::config(format!(
            "--conf-level {} must be the interval coverage in (0.5, 1), e.g. 0.95",
            args.conf_level
        )));
    }
    let imputation = parse_mi(&args.data.mi_method)?;
    let (selection, family) = selection_spec(&args.data, binary)?;
    let default_link = if binary { "logit" } else { "linear" };
    let l1 = args.out1_model_aipw.clone().unwrap_or_else(|| default_link.into());
    let l0 = args.out0_model_aipw.clone().unwrap_or_else(|| default_link.into());
    let cfg = PipelineConfig {
        selection,
        imputation,
        link1: parse_link(&l1, "--out1-model-aipw")?,
        link0: parse_link(&l0, "--out0-model-aipw")?,
        conf_level: args.conf_level,
        seed: args.data.seed,
    };
    let resolved = ResolvedConfig {
        outcome_type: if binary { "binary" } else { "continuous" },
        outcome_type_inferred: inferred,
        var_sel_method: cfg.selection.method.to_string(),
        lasso_family: family,
        mi_method: imputation.name().to_string(),
        out1_model_aipw: l1,
        out0_model_aipw: l0,
        conf_level: args.conf_level,
        seed: args.data.seed,
    };
    Ok((cfg, resolved))
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> CliResult<()> {
    // Validate flags before touching the data so configuration errors win.
    parse_mi(&args.data.mi_method)?;
    SelectionMethod::from_name(&args.data.var_sel_method, args.data.k, args.data.xi, args.data.pre_alpha)
        .map_err(|e| CliError::config(format!("--var-sel-method: {e}")))?;
    resolve_analyze(args, false, false)?;
    let loaded = load(&args.data)?;
    let (cfg, resolved) = resolve_analyze(args, loaded.binary, loaded.inferred)?;
    let analysis = analyze(&loaded.trial, &cfg)?;
    let body = match args.format {
        Format::Text => render_table(&analysis.estimates),
        Format::Csv => render_csv(&analysis.estimates),
        Format::Json => to_json(&serde_json::json!({
            "config": resolved,
            "estimates": analysis.estimates,
            "selection": analysis.selection,
            "potential_means": analysis.potential_means,
            "imputation": analysis.imputation,
        }))?,
    };
    write_out(args.output.as_deref(), &body)?;
    if let Some(path) = &args.sidecar {
        let side = to_json(&serde_json::json!({
            "config": resolved,
            "selection": analysis.selection,
            "potential_means": analysis.potential_means,
            "imputation": analysis.imputation,
        }))?;
        fs::write(path, side).map_err(|e| CliError::data(format!("--sidecar {}: {e}", path.display())))?;
    }
    Ok(())
}

pub fn cmd_select(args: &SelectArgs) -> CliResult<()> {
    let imputation = parse_mi(&args.data.mi_method)?;
    selection_spec(&args.data, false)?;
    let loaded = load(&args.data)?;
    let (spec, _) = selection_spec(&args.data, loaded.binary)?;
    let imputed = impute(&loaded.trial, imputation, args.data.seed)?;
    let complete = imputed.complete()?;
    let sel = select(&spec, &complete)?;
    let named = sel.named(complete.covariate_names());
    let body = match args.format {
        Format::Json => to_json(&serde_json::json!({
            "selection": named,
            "indices": { "pooled": sel.pooled, "arm0": sel.per_arm[0], "arm1": sel.per_arm[1] },
            "diagnostics": sel.diagnostics,
        }))?,
        Format::Text => format!(
            "method: {}\npooled: {}\narm0: {}\narm1: {}\n",
            named.method,
            named.pooled.join(","),
            named.arm0.join(","),
            named.arm1.join(",")
        ),
        Format::Csv => {
            let mut s = String::from("set,covariate\n");
            for (set, names) in [("pooled", &named.pooled), ("arm0", &named.arm0), ("arm1", &named.arm1)] {
                for n in names {
                    s.push_str(&format!("{set},{n}\n"));
                }
            }
            s
        }
    };
    write_out(args.output.as_deref(), &body)?;
    if let Some(path) = &args.export_csv {
        let file =
            fs::File::create(path).map_err(|e| CliError::data(format!("--export-csv {}: {e}", path.display())))?;
        complete.restrict_covariates(&sel.pooled).write_csv(file)?;
    }
    Ok(())
}

fn sim_spec(args: &SimulateArgs) -> CliResult<DgpSpec> {
    let outcome: Outcome = args.outcome.parse().map_err(|e| CliError::config(format!("--outcome: {e}")))?;
    let delta: Delta = args.delta.parse().map_err(|e| CliError::config(format!("--delta: {e}")))?;
    let reading: LinearDeltaReading =
        args.linear_delta_reading.parse().map_err(|e| CliError::config(format!("--linear-delta-reading: {e}")))?;
    let spec = DgpSpec::new(outcome, delta, args.n, args.seed).with_reading(reading);
    spec.validate().map_err(|e| CliError::config(format!("--n: {e}")))?;
    if args.workers == 0 {
        return Err(CliError::config("--workers must be >= 1"));
    }
    Ok(spec)
}

fn sim_methods(args: &SimulateArgs, outcome: Outcome) -> CliResult<Vec<SimMethod>> {
    let link = match outcome {
        Outcome::Continuous => LinkFamily::Identity,
        Outcome::Binary => LinkFamily::Logit,
    };
    match &args.methods {
        None => Ok(default_methods(outcome)),
        Some(list) => list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| SimMethod::parse(s, link).map_err(|e| CliError::config(format!("--methods: {e}"))))
            .collect(),
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    let spec = sim_spec(args)?;
    let methods = sim_methods(args, spec.outcome)?;
    if args.m == 0 {
        return Err(CliError::config("--m must be >= 1"));
    }
    let (tau, se) = match args.oracle_tau {
        Some(t) if !args.oracle_only => (t, None),
        _ => {
            if args.oracle_n_big == 0 || args.oracle_reps == 0 {
                return Err(CliError::config("--oracle-n-big and --oracle-reps must be >= 1"));
            }
            let o = true_ate_oracle(&spec, args.oracle_n_big, args.oracle_reps, args.workers)?;
            let tol = match spec.outcome {
                Outcome::Continuous => 0.1,
                Outcome::Binary => 0.01,
            };
            if let Some(msg) = o.discrepancy(spec.published_tau(), tol) {
                eprintln!("note: {msg}");
            }
            (o.tau, Some(o.mc_se))
        }
    };
    let oracle_line = match se {
        Some(se) => format!("oracle tau = {tau:.6} (MC SE {se:.6})\n"),
        None => format!("oracle tau = {tau:.6} (supplied)\n"),
    };
    if args.oracle_only {
        let body = match args.format {
            Format::Json => to_json(&serde_json::json!({ "tau": tau, "mc_se": se, "spec": spec }))?,
            Format::Csv => format!("tau,mc_se\n{tau},{}\n", se.map_or("NA".into(), |s| s.to_string())),
            Format::Text => oracle_line,
        };
        return write_out(None, &body);
    }
    if args.format != Format::Text {
        eprint!("{oracle_line}");
    }
    let report = run_monte_carlo(&spec, &methods, args.m, args.seed, tau, args.workers)?;
    let json = to_json(&report)?;
    let csv = report.summary_csv();
    if let Some(p) = &args.output {
        fs::write(p, &json).map_err(|e| CliError::data(format!("--output {}: {e}", p.display())))?;
    }
    if let Some(p) = &args.summary_csv {
        fs::write(p, &csv).map_err(|e| CliError::data(format!("--summary-csv {}: {e}", p.display())))?;
    }
    if let Some(p) = &args.replications_csv {
        fs::write(p, report.replications_csv())
            .map_err(|e| CliError::data(format!("--replications-csv {}: {e}", p.display())))?;
    }
    let body = match args.format {
        Format::Json => json,
        Format::Csv => csv,
        Format::Text => format!("{oracle_line}{}", align_csv(&csv)),
    };
    write_out(None, &body)
}

fn align_csv(csv: &str) -> String {
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let ncol = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width: Vec<usize> =
        (0..ncol).map(|j| rows.iter().filter_map(|r| r.get(j)).map(|c| c.len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in &rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(j, c)| if j == 0 { format!("{c:<w$}", w = width[j]) } else { format!("{c:>w$}", w = width[j]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Select(s) => cmd_select(s),
        Command::Simulate(s) => cmd_simulate(s),
    }
}

/// Parses `args` (program name first) and runs; returns the process exit code.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.code;
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
