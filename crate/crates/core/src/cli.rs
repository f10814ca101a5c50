//! Command-line front end.
//!
//! Subcommands: `estimate`, `simulate`, `expand`, `series`. Every artifact
//! carries a provenance record with the fully resolved configuration: a
//! top-level `provenance` object in JSON, a leading `# provenance: {...}`
//! comment line in CSV and table output. Errors are printed as one line on
//! stderr; usage errors exit with 2, runtime errors with 1.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::balancing::LoadingOptions;
use crate::data::{ensure_intercept, expand_covariates, write_csv, Covariates, ExpansionSpec, NumericTable};
use crate::error::{Error, Result};
use crate::estimators::{self, counterfactual_series, AttEstimate, EstimatorConfig, Method};
use crate::link::LinkSpec;
use crate::simulation::{format_report_table, run_study, write_report_csv, GridPoint, StudyOptions, ZetaConvention};
use crate::solver::SolverOptions;

#[derive(Debug, Parser)]
#[command(name = "balance-att", version, about = "ATT estimation with penalized balancing weights and immunization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the ATT on a CSV file.
    Estimate(EstimateArgs),
    /// Run the Monte Carlo study over a grid of (n, p).
    Simulate(SimulateArgs),
    /// Write the covariate expansion (rescaling, interactions, powers) as CSV.
    Expand(ExpandArgs),
    /// Immunized estimates for several outcome columns sharing one balancing fit.
    Series(SeriesArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EstimatorArg {
    Naive,
    Immunized,
    Farrell,
    Lowdim,
    Oracle,
    DoubleSelection,
    Ols,
}

impl From<EstimatorArg> for Method {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Naive => Method::Naive,
            EstimatorArg::Immunized => Method::Immunized,
            EstimatorArg::Farrell => Method::Farrell,
            EstimatorArg::Lowdim => Method::Lowdim,
            EstimatorArg::Oracle => Method::Oracle,
            EstimatorArg::DoubleSelection => Method::DoubleSelection,
            EstimatorArg::Ols => Method::Ols,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Debug, Args)]
struct Tuning {
    /// Link for the balancing weights: `exp` or `hyperbolic`.
    #[arg(long, default_value = "exp")]
    link: String,
    /// Significance level in the penalty level.
    #[arg(long, default_value_t = 0.05)]
    gamma: f64,
    /// Penalty multiplier.
    #[arg(long, default_value_t = 1.1)]
    c: f64,
    /// Loading-iteration stopping threshold (sup norm).
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    /// Maximum loading refits.
    #[arg(long, default_value_t = 15)]
    k0: usize,
    /// Solver tolerance on the KKT residual.
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
    /// Confidence intervals have level 1 - alpha.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    outcome: String,
    #[arg(long)]
    treatment: String,
    /// `rest` or a comma-separated list of column names.
    #[arg(long, default_value = "rest")]
    covariates: String,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long = "estimator", value_enum, default_values_t = [EstimatorArg::Immunized])]
    estimators: Vec<EstimatorArg>,
    #[command(flatten)]
    tuning: Tuning,
    #[arg(long, env = "BALANCE_ATT_SEED", default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Whitespace-separated `key=v1,v2` terms with keys `n`, `p` and
    /// optionally `zeta` (`printed` or `fifth`).
    #[arg(long, default_value = "n=500,1000,2000 p=50,500,1000")]
    grid: String,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    reps: u64,
    #[arg(long = "estimator", value_enum,
          default_values_t = [EstimatorArg::Naive, EstimatorArg::Immunized, EstimatorArg::Farrell, EstimatorArg::Oracle])]
    estimators: Vec<EstimatorArg>,
    #[command(flatten)]
    tuning: Tuning,
    #[arg(long, env = "BALANCE_ATT_SEED", default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Args)]
struct ExpandArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Args)]
struct SeriesArgs {
    #[arg(long)]
    input: PathBuf,
    /// One outcome column per period; comma-separated or repeated.
    #[arg(long = "outcome", value_delimiter = ',', required = true)]
    outcomes: Vec<String>,
    #[arg(long)]
    treatment: String,
    #[arg(long, default_value = "rest")]
    covariates: String,
    #[command(flatten)]
    tuning: Tuning,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Run(Error::from(e))
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Entry point used by the binary.
pub fn main() -> i32 {
    run(std::env::args_os())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Expand(a) => cmd_expand(a),
        Command::Series(a) => cmd_series(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {}", one_line(&msg));
            2
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            1
        }
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Tuning {
    fn resolve(&self) -> CliResult<EstimatorConfig> {
        let link = LinkSpec::by_name(&self.link).ok_or_else(|| usage(format!("unknown link `{}`", self.link)))?;
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(usage(format!("--gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(usage(format!("--c must be positive, got {}", self.c)));
        }
        if self.eps.is_nan() || self.eps < 0.0 {
            return Err(usage(format!("--eps must be non-negative, got {}", self.eps)));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(usage(format!("--tol must be positive, got {}", self.tol)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(usage(format!("--alpha must lie in (0, 1), got {}", self.alpha)));
        }
        let solver = SolverOptions { tol: self.tol, ..SolverOptions::default() };
        Ok(EstimatorConfig {
            link,
            loadings: LoadingOptions { gamma: self.gamma, c: self.c, eps: self.eps, k0: self.k0, solver },
            alpha: self.alpha,
            ..EstimatorConfig::default()
        })
    }

    fn provenance(&self) -> Value {
        json!({
            "link": self.link,
            "gamma": self.gamma,
            "c": self.c,
            "eps": self.eps,
            "k0": self.k0,
            "tol": self.tol,
            "alpha": self.alpha,
        })
    }
}

fn provenance(command: &str, config: Value) -> Value {
    json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": config,
    })
}

fn provenance_line(prov: &Value) -> String {
    format!("# provenance: {prov}\n")
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, bytes).map_err(|source| Error::Io { path: path.display().to_string(), source })
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(bytes)
                .and_then(|_| stdout.flush())
                .map_err(|source| Error::Io { path: "<stdout>".into(), source })
        }
    }
}

fn json_bytes(value: &Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("JSON values serialize");
    s.push('\n');
    s.into_bytes()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

fn fmt_count(v: Option<usize>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn estimates_csv(prov: &Value, estimates: &[AttEstimate]) -> Result<Vec<u8>> {
    let mut buf = provenance_line(prov).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record([
            "estimator", "theta", "se", "ci_low", "ci_high", "alpha", "n", "n1", "propensity_active", "outcome_active",
            "propensity_lambda", "outcome_lambda",
        ])?;
        for e in estimates {
            w.write_record([
                e.method.to_string(),
                format!("{}", e.theta),
                format!("{}", e.se),
                format!("{}", e.ci_low),
                format!("{}", e.ci_high),
                format!("{}", e.alpha),
                e.n.to_string(),
                e.n1.to_string(),
                fmt_count(e.propensity_active),
                fmt_count(e.outcome_active),
                fmt_opt(e.propensity_stage.as_ref().map(|s| s.lambda)),
                fmt_opt(e.outcome_stage.as_ref().map(|s| s.lambda)),
            ])?;
        }
        w.flush().map_err(|source| Error::Io { path: "<buffer>".into(), source })?;
    }
    Ok(buf)
}

fn estimates_table(prov: &Value, estimates: &[AttEstimate]) -> Vec<u8> {
    let mut s = provenance_line(prov);
    s.push_str(&format!(
        "{:<18}{:>14}{:>12}{:>14}{:>14}{:>8}{:>8}\n",
        "estimator", "theta", "se", "ci_low", "ci_high", "#beta", "#mu"
    ));
    for e in estimates {
        s.push_str(&format!(
            "{:<18}{:>14.4}{:>12.4}{:>14.4}{:>14.4}{:>8}{:>8}\n",
            e.method.name(),
            e.theta,
            e.se,
            e.ci_low,
            e.ci_high,
            fmt_count(e.propensity_active),
            fmt_count(e.outcome_active),
        ));
    }
    s.into_bytes()
}

fn cmd_estimate(a: EstimateArgs) -> CliResult<()> {
    let cfg = a.tuning.resolve()?;
    let mut methods: Vec<Method> = Vec::new();
    for e in &a.estimators {
        let m = Method::from(*e);
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    let covariates = Covariates::parse(&a.data.covariates);
    let table = NumericTable::read(&a.data.input)?;
    let ds = ensure_intercept(&table.to_dataset(&a.data.outcome, &a.data.treatment, &covariates)?)?;
    let estimates = methods.iter().map(|&m| estimators::estimate(&ds, m, &cfg)).collect::<Result<Vec<_>>>()?;

    let prov = provenance(
        "estimate",
        json!({
            "input": a.data.input.display().to_string(),
            "outcome": a.data.outcome,
            "treatment": a.data.treatment,
            "covariates": a.data.covariates,
            "estimators": methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "tuning": a.tuning.provenance(),
            "seed": a.seed,
            "format": a.format,
        }),
    );
    let bytes = match a.format {
        Format::Json => json_bytes(&json!({ "provenance": prov, "estimates": estimates })),
        Format::Csv => estimates_csv(&prov, &estimates)?,
        Format::Table => estimates_table(&prov, &estimates),
    };
    emit(a.out.as_deref(), &bytes)?;
    Ok(())
}

struct ParsedGrid {
    points: Vec<GridPoint>,
    convention: ZetaConvention,
}

fn parse_grid(spec: &str) -> CliResult<ParsedGrid> {
    let mut ns = None;
    let mut ps = None;
    let mut convention = ZetaConvention::Printed;
    for term in spec.split_whitespace() {
        let (key, values) = term.split_once('=').ok_or_else(|| usage(format!("grid term `{term}` is not key=values")))?;
        let parse_list = || -> CliResult<Vec<usize>> {
            values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| usage(format!("grid value `{v}` for `{key}` is not a positive integer")))
                })
                .collect()
        };
        match key {
            "n" => ns = Some(parse_list()?),
            "p" => ps = Some(parse_list()?),
            "zeta" => {
                convention = match values {
                    "printed" => ZetaConvention::Printed,
                    "fifth" => ZetaConvention::FifthOfVariance,
                    other => return Err(usage(format!("unknown zeta convention `{other}`"))),
                }
            }
            other => return Err(usage(format!("unknown grid key `{other}`"))),
        }
    }
    let ns = ns.ok_or_else(|| usage("grid needs an `n=` term"))?;
    let ps = ps.ok_or_else(|| usage("grid needs a `p=` term"))?;
    if let Some(&n) = ns.iter().find(|&&n| n < 2) {
        return Err(usage(format!("grid n must be at least 2, got {n}")));
    }
    if let Some(&p) = ps.iter().find(|&&p| p < 20) {
        return Err(usage(format!("grid p must be at least 20, got {p}")));
    }
    let points = ps.iter().flat_map(|&p| ns.iter().map(move |&n| GridPoint { n, p })).collect();
    Ok(ParsedGrid { points, convention })
}

fn cmd_simulate(a: SimulateArgs) -> CliResult<()> {
    let cfg = a.tuning.resolve()?;
    let grid = parse_grid(&a.grid)?;
    let mut methods: Vec<Method> = Vec::new();
    for e in &a.estimators {
        let m = Method::from(*e);
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    let opts = StudyOptions { convention: grid.convention, estimator: cfg, jobs: a.jobs, ..StudyOptions::default() };
    let report = run_study(&grid.points, &methods, a.reps as usize, a.seed, &opts)?;

    // --jobs does not affect the report and is left out so that runs with
    // different thread counts produce identical files.
    let prov = provenance(
        "simulate",
        json!({
            "grid": a.grid,
            "zeta_convention": grid.convention,
            "reps": a.reps,
            "estimators": methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "tuning": a.tuning.provenance(),
            "seed": a.seed,
            "format": a.format,
        }),
    );
    let bytes = match a.format {
        Format::Json => json_bytes(&json!({ "provenance": prov, "rows": report.rows })),
        Format::Csv => {
            let mut buf = provenance_line(&prov).into_bytes();
            write_report_csv(&report, &mut buf)?;
            buf
        }
        Format::Table => {
            let mut s = provenance_line(&prov);
            s.push_str(&format_report_table(&report));
            s.into_bytes()
        }
    };
    emit(a.out.as_deref(), &bytes)?;
    Ok(())
}

fn cmd_expand(a: ExpandArgs) -> CliResult<()> {
    if a.format != Format::Csv {
        return Err(usage("expand writes CSV only"));
    }
    let covariates = Covariates::parse(&a.data.covariates);
    let ds = NumericTable::read(&a.data.input)?.to_dataset(&a.data.outcome, &a.data.treatment, &covariates)?;
    let spec = ExpansionSpec::from_kinds(&ds);
    let expanded = expand_covariates(&ds, &spec)?;
    let prov = provenance(
        "expand",
        json!({
            "input": a.data.input.display().to_string(),
            "outcome": a.data.outcome,
            "treatment": a.data.treatment,
            "covariates": a.data.covariates,
            "expansion": spec,
            "columns": expanded.p(),
        }),
    );
    let mut buf = provenance_line(&prov).into_bytes();
    write_csv(&expanded, &a.data.outcome, &a.data.treatment, &mut buf)?;
    emit(a.out.as_deref(), &buf)?;
    Ok(())
}

fn cmd_series(a: SeriesArgs) -> CliResult<()> {
    let cfg = a.tuning.resolve()?;
    let table = NumericTable::read(&a.input)?;
    let covariates = match Covariates::parse(&a.covariates) {
        Covariates::Rest => Covariates::Named(
            table.header.iter().filter(|h| **h != a.treatment && !a.outcomes.contains(h)).cloned().collect(),
        ),
        named => named,
    };
    let first = a.outcomes.first().ok_or_else(|| usage("at least one --outcome column is required"))?;
    let ds = ensure_intercept(&table.to_dataset(first, &a.treatment, &covariates)?)?;
    let outcomes = a
        .outcomes
        .iter()
        .map(|name| table.column(name).map(|c| (name.clone(), c.to_vec())))
        .collect::<Result<Vec<_>>>()?;
    let series = counterfactual_series(&ds, &outcomes, &cfg)?;
    for w in &series.warnings {
        eprintln!("warning: {w}");
    }

    let prov = provenance(
        "series",
        json!({
            "input": a.input.display().to_string(),
            "outcomes": a.outcomes,
            "treatment": a.treatment,
            "covariates": a.covariates,
            "tuning": a.tuning.provenance(),
            "format": a.format,
        }),
    );
    let bytes = match a.format {
        Format::Json => json_bytes(&json!({ "provenance": prov, "series": series })),
        Format::Csv | Format::Table => {
            let mut buf = provenance_line(&prov).into_bytes();
            {
                let mut w = csv::Writer::from_writer(&mut buf);
                w.write_record(["period", "theta", "se", "ci_low", "ci_high", "counterfactual_level", "error"])?;
                for pt in &series.points {
                    let e = pt.estimate.as_ref();
                    w.write_record([
                        pt.period.clone(),
                        fmt_opt(e.map(|e| e.theta)),
                        fmt_opt(e.map(|e| e.se)),
                        fmt_opt(e.map(|e| e.ci_low)),
                        fmt_opt(e.map(|e| e.ci_high)),
                        fmt_opt(pt.counterfactual_level),
                        pt.error.clone().unwrap_or_default(),
                    ])?;
                }
                w.flush().map_err(|source| Error::Io { path: "<buffer>".into(), source })?;
            }
            buf
        }
    };
    emit(a.out.as_deref(), &bytes)?;
    Ok(())
}
