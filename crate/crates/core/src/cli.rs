//! Command-line front end. Summaries go to stdout as JSON, bulk data to
//! files, diagnostics to stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::closed_form::{fit_closed_form, AteVariant};
use crate::divergence::{empirical_tv, tv_bounds};
use crate::error::{Error, ErrorKind, Result};
use crate::gibbs::{run_chains, Chain, GibbsConfig};
use crate::imputation::{estimate_ate, AteEstimate, ImputationConfig, ImputationMode};
use crate::mcse::ess_autocorr;
use crate::model::{Dataset, InvGamma, ModelSpec, ZeroPolicy};
use crate::oracle::{run_oracle, OracleConfig};
use crate::pipeline::{
    balance_table, bin_outcome, dichotomize, groupwise_ate, load_csv, per_capita_rate, write_csv,
    BinningRule, ColumnMapping, CsvTable,
};
use crate::rng::RngStream;
use crate::synthetic::{generate, true_ate, SimModel, SimSpec};

/// Split index deriving the imputation seed from the run seed.
const IMPUTATION_STREAM: u64 = 0x1_0000_0000;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "count-ate",
    version,
    about = "Bayesian ATE estimation for count outcomes"
)]
pub struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "COUNT_ATE_THREADS")]
    pub threads: Option<usize>,
    /// Write a JSON run manifest here, also when the command fails.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Simulate a completely randomized experiment with both potential outcomes.
    Simulate(SimulateArgs),
    /// Estimate the ATE of a count dataset.
    Fit(FitArgs),
    /// Sweep sample sizes and engines on simulated data.
    Benchmark(BenchmarkArgs),
    /// Tabulate the normal versus log-gamma divergences over a grid of counts.
    Diagnose(DiagnoseArgs),
    /// Standardized mean differences of the covariates.
    Balance(BalanceArgs),
    /// Bin an outcome column and optionally dichotomize an exposure.
    Bin(BinArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    Simple,
    Complex,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    /// Gaussian approximation to the coefficient posterior.
    Approx,
    /// Metropolis–Hastings on the exact posterior.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Likelihood {
    Poisson,
    LognormalPoisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantArg {
    Nb,
    Printed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    ReuseChainBeta,
    RedrawBeta,
    PerUnit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroArg {
    Error,
    DropRow,
    ContinuityCorrection,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "simple")]
    pub model: ModelChoice,
    /// Control coefficients for `--model custom`, intercept first.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub beta_c: Vec<f64>,
    /// Treated coefficients for `--model custom`, intercept first.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub beta_t: Vec<f64>,
    /// Number of units; must be even.
    #[arg(long)]
    pub n: usize,
    /// Standard deviation of the log-scale noise; 0 gives Poisson outcomes.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Observed data CSV (y, w, x1..xk).
    #[arg(long)]
    pub out: PathBuf,
    /// Potential outcomes CSV (unit, y0, y1).
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "y")]
    pub y_col: String,
    #[arg(long, default_value = "w")]
    pub w_col: String,
    /// Covariate columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub x_cols: Vec<String>,
    #[arg(long)]
    pub y0_col: Option<String>,
    #[arg(long)]
    pub y1_col: Option<String>,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
}

impl DataArgs {
    fn mapping(&self) -> Result<ColumnMapping> {
        let x: Vec<&str> = self.x_cols.iter().map(String::as_str).collect();
        let mut m = ColumnMapping::new(&self.y_col, &self.w_col, &x)
            .with_delimiter(delimiter_byte(self.delimiter)?);
        match (&self.y0_col, &self.y1_col) {
            (Some(a), Some(b)) => m = m.with_potential_outcomes(a, b),
            (None, None) => {}
            _ => {
                return Err(Error::InvalidParameter(
                    "--y0-col and --y1-col go together".into(),
                ))
            }
        }
        Ok(m)
    }
}

fn delimiter_byte(c: char) -> Result<u8> {
    u8::try_from(c)
        .ok()
        .filter(u8::is_ascii)
        .ok_or_else(|| Error::InvalidParameter(format!("delimiter must be ASCII, got {c:?}")))
}

#[derive(Debug, Args, Serialize)]
pub struct PriorArgs {
    /// Prior variance of every coefficient.
    #[arg(long, default_value_t = 100.0)]
    pub sigma_beta_sq: f64,
    /// Inverse-gamma shape of both log-scale variances.
    #[arg(long, default_value_t = 2.0)]
    pub ig_shape: f64,
    /// Inverse-gamma scale of both log-scale variances.
    #[arg(long, default_value_t = 1.0)]
    pub ig_scale: f64,
    #[arg(long, value_enum, default_value = "drop-row")]
    pub zero_policy: ZeroArg,
}

#[derive(Debug, Args, Serialize)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 1000)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    #[arg(long, default_value_t = 1)]
    pub chains: usize,
    /// Per-chain wall-clock limit in seconds.
    #[arg(long)]
    pub max_seconds: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "approx")]
    pub engine: Engine,
    #[arg(long, value_enum, default_value = "poisson")]
    pub model: Likelihood,
    /// Skip sampling and use the negative-binomial closed form (Poisson only).
    #[arg(long)]
    pub closed_form: bool,
    #[arg(long, value_enum, default_value = "nb")]
    pub variant: VariantArg,
    #[arg(long, value_enum, default_value = "reuse-chain-beta")]
    pub mode: ModeArg,
    #[command(flatten)]
    pub prior: PriorArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Per-replication ATE CSV.
    #[arg(long)]
    pub per_rep: Option<PathBuf>,
    /// Retained draws CSV (all chains, in chain order).
    #[arg(long)]
    pub chain_out: Option<PathBuf>,
    /// Column holding a group label for the group-wise table.
    #[arg(long)]
    pub groups_col: Option<String>,
    #[arg(long, requires = "groups_col")]
    pub groupwise_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchmarkArgs {
    #[arg(long, value_enum, default_value = "simple")]
    pub model: ModelChoice,
    /// Sample sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "500,1000,2000")]
    pub grid: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "approx,exact"
    )]
    pub engines: Vec<Engine>,
    /// Log-scale noise of the simulated outcomes; 0 fits the Poisson model.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[command(flatten)]
    pub prior: PriorArgs,
    /// Iterations and burn-in of the approximate sampler (lognormal only).
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 500)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 20_000)]
    pub exact_iters: usize,
    #[arg(long, default_value_t = 5_000)]
    pub exact_burn_in: usize,
    /// Largest N run with the exact engine; bigger cells are skipped.
    #[arg(long, default_value_t = 5_000)]
    pub max_n_exact: usize,
    /// Per-cell wall-clock limit in seconds; a cell over it is recorded, not fatal.
    #[arg(long)]
    pub timeout: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Accuracy CSV, one row per (N, engine, replication).
    #[arg(long)]
    pub out: PathBuf,
    /// Wall-clock CSV with the same keys.
    #[arg(long)]
    pub timing_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DiagnoseArgs {
    /// Counts to evaluate, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<f64>,
    /// Log-spaced grid from `--y-min` to `--y-max` when `--grid` is absent.
    #[arg(long, default_value_t = 1.0)]
    pub y_min: f64,
    #[arg(long, default_value_t = 1e4)]
    pub y_max: f64,
    #[arg(long, default_value_t = 20)]
    pub points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BalanceArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BinArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    /// Column to bin.
    #[arg(long)]
    pub column: Option<String>,
    /// JSON binning rule: `{"edges": [...], "open_left": .., "open_right": ..}`.
    #[arg(long, requires = "column")]
    pub rules: Option<PathBuf>,
    #[arg(long, default_value = "y")]
    pub label_col: String,
    /// Case count column for a per-capita rate.
    #[arg(long, requires = "rate_population")]
    pub rate_cases: Option<String>,
    #[arg(long, requires = "rate_cases")]
    pub rate_population: Option<String>,
    /// The rate is per `10^power` inhabitants.
    #[arg(long, default_value_t = 5)]
    pub rate_power: i32,
    #[arg(long, default_value = "rate")]
    pub rate_col: String,
    /// Column to dichotomize; may name the rate column.
    #[arg(long, requires = "threshold")]
    pub exposure_col: Option<String>,
    /// Treatment is 1 when the exposure is at least this value.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value = "w")]
    pub treat_col: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct Phase {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub version: String,
    pub threads: usize,
    pub phases: Vec<Phase>,
    pub outputs: Vec<PathBuf>,
    pub status: String,
    pub error: Option<String>,
}

#[derive(Default)]
struct Ctx {
    phases: Vec<Phase>,
    outputs: Vec<PathBuf>,
}

impl Ctx {
    fn timed<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f();
        self.phases.push(Phase {
            name: name.into(),
            seconds: t.elapsed().as_secs_f64(),
        });
        out
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    fn timings(&self) -> Value {
        let map: BTreeMap<&str, f64> = self
            .phases
            .iter()
            .map(|p| (p.name.as_str(), p.seconds))
            .collect();
        json!(map)
    }
}

pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli.threads.unwrap_or_else(rayon::current_num_threads);
    let mut ctx = Ctx::default();
    let outcome = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| dispatch(&cli.command, &mut ctx)),
        Err(e) => Err(Error::InvalidParameter(format!(
            "cannot start {threads} threads: {e}"
        ))),
    };
    let (status, error) = match &outcome {
        Ok(_) => ("ok".to_string(), None),
        Err(e) => ("error".to_string(), Some(e.to_string())),
    };
    let mut code = match &outcome {
        Ok(_) => 0,
        Err(e) => exit_code(e.kind()),
    };
    if let Some(path) = &cli.manifest {
        let manifest = RunManifest {
            command: command_name(&cli.command).into(),
            config: serde_json::to_value(&cli).unwrap_or(Value::Null),
            seed: command_seed(&cli.command),
            version: env!("CARGO_PKG_VERSION").into(),
            threads,
            phases: ctx.phases.clone(),
            outputs: ctx.outputs.clone(),
            status,
            error,
        };
        if let Err(e) = write_json(path, &manifest) {
            eprintln!("error: {e}");
            code = code.max(2);
        }
    }
    match outcome {
        Ok(summary) => match serde_json::to_string_pretty(&summary) {
            Ok(s) => println!("{s}"),
            Err(e) => {
                eprintln!("error: {e}");
                return 3;
            }
        },
        Err(e) => eprintln!("error: {e}"),
    }
    code
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate(_) => "simulate",
        Command::Fit(_) => "fit",
        Command::Benchmark(_) => "benchmark",
        Command::Diagnose(_) => "diagnose",
        Command::Balance(_) => "balance",
        Command::Bin(_) => "bin",
    }
}

fn command_seed(c: &Command) -> Option<u64> {
    match c {
        Command::Simulate(a) => Some(a.seed),
        Command::Fit(a) => Some(a.seed),
        Command::Benchmark(a) => Some(a.seed),
        _ => None,
    }
}

fn dispatch(c: &Command, ctx: &mut Ctx) -> Result<Value> {
    match c {
        Command::Simulate(a) => cmd_simulate(a, ctx),
        Command::Fit(a) => cmd_fit(a, ctx),
        Command::Benchmark(a) => cmd_benchmark(a, ctx),
        Command::Diagnose(a) => cmd_diagnose(a, ctx),
        Command::Balance(a) => cmd_balance(a, ctx),
        Command::Bin(a) => cmd_bin(a, ctx),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::io::BufWriter<std::fs::File>>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(std::io::BufWriter::new(file)))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn sim_model(choice: ModelChoice, beta_c: &[f64], beta_t: &[f64]) -> Result<SimModel> {
    match choice {
        ModelChoice::Simple => Ok(SimModel::Simple),
        ModelChoice::Complex => Ok(SimModel::Complex),
        ModelChoice::Custom if !beta_c.is_empty() => Ok(SimModel::Custom {
            beta_c: beta_c.to_vec(),
            beta_t: beta_t.to_vec(),
        }),
        ModelChoice::Custom => Err(Error::InvalidParameter(
            "--model custom needs --beta-c and --beta-t".into(),
        )),
    }
}

fn covariate_names(k: usize) -> Vec<String> {
    (1..=k).map(|j| format!("x{j}")).collect()
}

fn cmd_simulate(a: &SimulateArgs, ctx: &mut Ctx) -> Result<Value> {
    let spec = SimSpec::new(
        sim_model(a.model, &a.beta_c, &a.beta_t)?,
        a.n,
        a.sigma,
        a.seed,
    );
    let ds = ctx.timed("generate", || generate(&spec))?;
    let names = covariate_names(ds.k());
    let x: Vec<&str> = names.iter().map(String::as_str).collect();
    ctx.timed("write", || {
        write_csv(&ds, &a.out, &ColumnMapping::new("y", "w", &x))
    })?;
    ctx.output(&a.out);
    if let Some(truth) = &a.truth {
        #[derive(Serialize)]
        struct Row {
            unit: usize,
            y0: u64,
            y1: u64,
        }
        let (y0, y1) = (ds.y0().unwrap_or_default(), ds.y1().unwrap_or_default());
        let rows: Vec<Row> = (0..ds.n())
            .map(|i| Row {
                unit: i,
                y0: y0[i],
                y1: y1[i],
            })
            .collect();
        write_rows(truth, &rows)?;
        ctx.output(truth);
    }
    Ok(json!({
        "command": "simulate",
        "n": ds.n(),
        "k": ds.k(),
        "n_treated": ds.n_treated(),
        "true_ate": true_ate(&ds)?,
        "data": a.out,
        "truth": a.truth,
    }))
}

fn model_spec(model: Likelihood, prior: &PriorArgs) -> Result<ModelSpec> {
    let policy = match prior.zero_policy {
        ZeroArg::Error => ZeroPolicy::Error,
        ZeroArg::DropRow => ZeroPolicy::DropRow,
        ZeroArg::ContinuityCorrection => ZeroPolicy::ContinuityCorrection,
    };
    let spec = match model {
        Likelihood::Poisson => ModelSpec::poisson(prior.sigma_beta_sq),
        Likelihood::LognormalPoisson => {
            let ig = InvGamma::new(prior.ig_shape, prior.ig_scale)?;
            ModelSpec::lognormal(prior.sigma_beta_sq, ig, ig)
        }
    }
    .with_zero_policy(policy);
    spec.validate()?;
    Ok(spec)
}

fn imputation_mode(m: ModeArg) -> ImputationMode {
    match m {
        ModeArg::ReuseChainBeta => ImputationMode::ReuseChainBeta,
        ModeArg::RedrawBeta => ImputationMode::RedrawBeta,
        ModeArg::PerUnit => ImputationMode::PerUnit,
    }
}

fn imputation_seed(seed: u64) -> u64 {
    RngStream::new(seed).split(IMPUTATION_STREAM).next_raw()
}

struct Sampled {
    chain: Chain,
    diagnostics: Value,
}

/// Runs `chains` independent chains of the chosen engine and pools them.
fn sample(
    ds: &Dataset,
    spec: &ModelSpec,
    engine: Engine,
    s: &SamplerArgs,
    seed: u64,
) -> Result<Sampled> {
    if s.chains == 0 {
        return Err(Error::InvalidParameter("--chains must be positive".into()));
    }
    match engine {
        Engine::Approx => {
            let mut cfg = GibbsConfig::new(s.iters, s.burn_in, seed).with_thin(s.thin);
            cfg.max_seconds = s.max_seconds;
            let chains = run_chains(ds, spec, &cfg, s.chains)?;
            Ok(Sampled {
                chain: Chain::concat(chains),
                diagnostics: json!({}),
            })
        }
        Engine::Exact => {
            use rayon::prelude::*;
            let root = RngStream::new(seed);
            let runs = (0..s.chains as u64)
                .into_par_iter()
                .map(|c| {
                    let mut cfg = OracleConfig::new(s.iters, s.burn_in, root.split(c).next_raw());
                    cfg.thin = s.thin;
                    cfg.max_seconds = s.max_seconds;
                    run_oracle(ds, spec, &cfg)
                })
                .collect::<Result<Vec<_>>>()?;
            let accept_beta: Vec<f64> = runs.iter().map(|r| r.accept_beta).collect();
            let accept_eps: Vec<Option<f64>> = runs.iter().map(|r| r.accept_eps).collect();
            Ok(Sampled {
                chain: Chain::concat(runs.into_iter().map(|r| r.chain).collect()),
                diagnostics: json!({ "accept_beta": accept_beta, "accept_eps": accept_eps }),
            })
        }
    }
}

fn min_ess(chain: &Chain) -> Option<f64> {
    let d = chain.draws.first()?.beta.len();
    (0..d)
        .map(|j| ess_autocorr(&chain.beta_column(j)))
        .filter(|e| e.is_finite())
        .min_by(f64::total_cmp)
}

fn cmd_fit(a: &FitArgs, ctx: &mut Ctx) -> Result<Value> {
    let mapping = a.data.mapping()?;
    let ds = ctx.timed("load", || load_csv(&a.data.data, &mapping))?;
    let spec = model_spec(a.model, &a.prior)?;
    let truth = true_ate(&ds).ok();
    let variant = match a.variant {
        VariantArg::Nb => AteVariant::Nb,
        VariantArg::Printed => AteVariant::Printed,
    };
    if a.closed_form {
        if !spec.is_poisson() {
            return Err(Error::ModelMismatch(
                "the closed form needs --model poisson".into(),
            ));
        }
        if a.engine == Engine::Exact {
            return Err(Error::ModelMismatch(
                "the closed form belongs to the approx engine".into(),
            ));
        }
        if a.per_rep.is_some() || a.chain_out.is_some() || a.groups_col.is_some() {
            return Err(Error::InvalidParameter(
                "the closed form has no replications or draws to write".into(),
            ));
        }
        let cf = ctx.timed("closed_form", || fit_closed_form(&ds, &spec, variant))?;
        return Ok(json!({
            "command": "fit",
            "engine": "approx",
            "model": a.model,
            "closed_form": true,
            "variant": a.variant,
            "n": ds.n(),
            "ate_mean": cf.mean,
            "ate_variance": cf.variance,
            "ate_sd": cf.sd(),
            "true_ate": truth,
            "timings": ctx.timings(),
        }));
    }
    let sampled = ctx.timed("sample", || {
        sample(&ds, &spec, a.engine, &a.sampler, a.seed)
    })?;
    let mut icfg =
        ImputationConfig::new(imputation_seed(a.seed)).with_mode(imputation_mode(a.mode));
    if a.groups_col.is_some() {
        icfg = icfg.keeping_imputations();
    }
    let est = ctx.timed("impute", || estimate_ate(&ds, &spec, &sampled.chain, &icfg))?;
    if let Some(path) = &a.per_rep {
        write_per_rep(path, &est)?;
        ctx.output(path);
    }
    if let Some(path) = &a.chain_out {
        sampled.chain.write_csv(path)?;
        ctx.output(path);
    }
    let mut groups = Value::Null;
    if let Some(col) = &a.groups_col {
        let table = CsvTable::read(&a.data.data, mapping.delimiter)?;
        let labels = table.column_str(col)?;
        let mut names: Vec<&str> = labels.clone();
        names.sort_unstable();
        names.dedup();
        let index: Vec<usize> = labels
            .iter()
            .map(|l| names.binary_search(l).unwrap_or_default())
            .collect();
        let imps = est.imputations.as_deref().unwrap_or_default();
        let rows = groupwise_ate(&ds, imps, &index, names.len())?;
        #[derive(Serialize)]
        struct Row<'a> {
            group: &'a str,
            ate: Option<f64>,
            sd: Option<f64>,
            n: usize,
            weight: f64,
        }
        let out: Vec<Row> = rows
            .iter()
            .map(|g| Row {
                group: names[g.group],
                ate: g.ate,
                sd: g.sd,
                n: g.n,
                weight: g.weight,
            })
            .collect();
        if let Some(path) = &a.groupwise_out {
            write_rows(path, &out)?;
            ctx.output(path);
        }
        groups = serde_json::to_value(&out)?;
    }
    Ok(json!({
        "command": "fit",
        "engine": a.engine,
        "model": a.model,
        "closed_form": false,
        "mode": a.mode,
        "n": ds.n(),
        "r": est.r,
        "ate_mean": est.mean,
        "ate_sd": est.sd(),
        "ate_se_of_mean": est.se_of_mean(),
        "true_ate": truth,
        "beta_mean": sampled.chain.beta_mean(),
        "min_ess_beta": min_ess(&sampled.chain),
        "diagnostics": sampled.diagnostics,
        "groups": groups,
        "timings": ctx.timings(),
    }))
}

fn write_per_rep(path: &Path, est: &AteEstimate) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        replication: usize,
        ate: f64,
    }
    let rows: Vec<Row> = est
        .per_rep
        .iter()
        .enumerate()
        .map(|(replication, &ate)| Row { replication, ate })
        .collect();
    write_rows(path, &rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkRow {
    pub n: usize,
    pub engine: Engine,
    pub replication: usize,
    pub status: String,
    pub ate_mean: Option<f64>,
    pub ate_sd: Option<f64>,
    pub true_ate: f64,
    pub abs_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingRow {
    pub n: usize,
    pub engine: Engine,
    pub replication: usize,
    pub seconds: f64,
}

fn is_timeout(e: &Error) -> bool {
    match e {
        Error::Timeout { .. } => true,
        Error::AtIteration { source, .. } => is_timeout(source),
        _ => false,
    }
}

fn bench_cell(
    a: &BenchmarkArgs,
    ds: &Dataset,
    spec: &ModelSpec,
    engine: Engine,
    seed: u64,
) -> Result<(f64, f64)> {
    if engine == Engine::Approx && spec.is_poisson() {
        let cf = fit_closed_form(ds, spec, AteVariant::Nb)?;
        return Ok((cf.mean, cf.sd().unwrap_or(f64::NAN)));
    }
    let s = match engine {
        Engine::Approx => SamplerArgs {
            iters: a.iters,
            burn_in: a.burn_in,
            thin: 1,
            chains: 1,
            max_seconds: a.timeout,
        },
        Engine::Exact => SamplerArgs {
            iters: a.exact_iters,
            burn_in: a.exact_burn_in,
            thin: 1,
            chains: 1,
            max_seconds: a.timeout,
        },
    };
    let sampled = sample(ds, spec, engine, &s, seed)?;
    let est = estimate_ate(
        ds,
        spec,
        &sampled.chain,
        &ImputationConfig::new(imputation_seed(seed)),
    )?;
    Ok((est.mean, est.sd()))
}

fn cmd_benchmark(a: &BenchmarkArgs, ctx: &mut Ctx) -> Result<Value> {
    if a.grid.is_empty() || a.reps == 0 || a.engines.is_empty() {
        return Err(Error::InvalidParameter(
            "benchmark needs a grid, engines and at least one replication".into(),
        ));
    }
    let likelihood = if a.sigma > 0.0 {
        Likelihood::LognormalPoisson
    } else {
        Likelihood::Poisson
    };
    let spec = model_spec(likelihood, &a.prior)?;
    let model = sim_model(a.model, &[], &[])?;
    let root = RngStream::new(a.seed);
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    let start = Instant::now();
    for &n in &a.grid {
        let base = SimSpec::new(model.clone(), n, a.sigma, root.split(n as u64).next_raw());
        for r in 0..a.reps {
            let ds = generate(&base.replication(r as u64))?;
            let truth = true_ate(&ds)?;
            for &engine in &a.engines {
                let seed = root.split(n as u64).split(r as u64 + 1).next_raw();
                let t = Instant::now();
                let (status, value) = if engine == Engine::Exact && n > a.max_n_exact {
                    ("skipped".to_string(), None)
                } else {
                    match bench_cell(a, &ds, &spec, engine, seed) {
                        Ok(v) => ("ok".to_string(), Some(v)),
                        Err(e) if is_timeout(&e) => ("timeout".to_string(), None),
                        Err(e) => {
                            eprintln!("n={n} engine={engine:?} replication={r}: {e}");
                            ("error".to_string(), None)
                        }
                    }
                };
                let seconds = t.elapsed().as_secs_f64();
                rows.push(BenchmarkRow {
                    n,
                    engine,
                    replication: r,
                    status,
                    ate_mean: value.map(|v| v.0),
                    ate_sd: value.map(|v| v.1),
                    true_ate: truth,
                    abs_error: value.map(|v| (v.0 - truth).abs()),
                });
                timing.push(TimingRow {
                    n,
                    engine,
                    replication: r,
                    seconds,
                });
            }
        }
    }
    ctx.phases.push(Phase {
        name: "benchmark".into(),
        seconds: start.elapsed().as_secs_f64(),
    });
    write_rows(&a.out, &rows)?;
    ctx.output(&a.out);
    if let Some(path) = &a.timing_out {
        write_rows(path, &timing)?;
        ctx.output(path);
    }
    let mut mae: BTreeMap<String, f64> = BTreeMap::new();
    for &engine in &a.engines {
        for &n in &a.grid {
            let errs: Vec<f64> = rows
                .iter()
                .filter(|r| r.n == n && r.engine == engine)
                .filter_map(|r| r.abs_error)
                .collect();
            if !errs.is_empty() {
                mae.insert(
                    format!("{engine:?}/{n}").to_lowercase(),
                    crate::mcse::mean(&errs),
                );
            }
        }
    }
    Ok(json!({
        "command": "benchmark",
        "rows": rows.len(),
        "mae": mae,
        "results": a.out,
        "timing": a.timing_out,
        "timings": ctx.timings(),
    }))
}

#[derive(Debug, Clone, Serialize)]
pub struct DivergenceRow {
    pub y: f64,
    pub kl_exact: f64,
    pub kl_leading: f64,
    pub tv_bound: f64,
    pub tv_leading: f64,
    /// Absent below `y = 1`.
    pub empirical_tv: Option<f64>,
}

fn cmd_diagnose(a: &DiagnoseArgs, ctx: &mut Ctx) -> Result<Value> {
    let grid: Vec<f64> = if !a.grid.is_empty() {
        a.grid.clone()
    } else {
        if !(a.y_min > 0.0 && a.y_max > a.y_min && a.points >= 2) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < y-min < y-max and at least two points, got ({}, {}, {})",
                a.y_min, a.y_max, a.points
            )));
        }
        let (lo, hi) = (a.y_min.ln(), a.y_max.ln());
        (0..a.points)
            .map(|j| (lo + (hi - lo) * j as f64 / (a.points - 1) as f64).exp())
            .collect()
    };
    let rows = ctx.timed("evaluate", || {
        use rayon::prelude::*;
        grid.par_iter()
            .map(|&y| {
                let r = tv_bounds(y)?;
                Ok(DivergenceRow {
                    y,
                    kl_exact: r.kl_exact,
                    kl_leading: r.kl_leading,
                    tv_bound: r.tv_bound,
                    tv_leading: r.tv_leading,
                    empirical_tv: if y >= 1.0 {
                        Some(empirical_tv(y)?)
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    write_rows(&a.out, &rows)?;
    ctx.output(&a.out);
    Ok(json!({
        "command": "diagnose",
        "rows": rows.len(),
        "out": a.out,
        "timings": ctx.timings(),
    }))
}

fn cmd_balance(a: &BalanceArgs, ctx: &mut Ctx) -> Result<Value> {
    let mapping = a.data.mapping()?;
    let ds = ctx.timed("load", || load_csv(&a.data.data, &mapping))?;
    let rows = balance_table(&ds, Some(&mapping.x))?;
    write_rows(&a.out, &rows)?;
    ctx.output(&a.out);
    let max_abs = rows
        .iter()
        .filter_map(|r| r.smd.map(f64::abs))
        .max_by(f64::total_cmp);
    Ok(json!({
        "command": "balance",
        "covariates": rows.len(),
        "n0": ds.n() - ds.n_treated(),
        "n1": ds.n_treated(),
        "max_abs_smd": max_abs,
        "out": a.out,
    }))
}

fn cmd_bin(a: &BinArgs, ctx: &mut Ctx) -> Result<Value> {
    let delim = delimiter_byte(a.delimiter)?;
    let table = ctx.timed("load", || CsvTable::read(&a.input, delim))?;
    let mut headers: Vec<String> = table.headers().to_vec();
    let mut extra: Vec<(String, Vec<String>)> = Vec::new();
    let mut summary = serde_json::Map::new();
    summary.insert("command".into(), json!("bin"));
    summary.insert("rows".into(), json!(table.len()));

    let mut rates: Option<Vec<f64>> = None;
    if let (Some(c), Some(p)) = (&a.rate_cases, &a.rate_population) {
        let cases = table.column_f64(c)?;
        let pops = table.column_f64(p)?;
        let r = cases
            .iter()
            .zip(&pops)
            .map(|(&c, &p)| per_capita_rate(c, p, a.rate_power))
            .collect::<Result<Vec<f64>>>()?;
        extra.push((a.rate_col.clone(), r.iter().map(f64::to_string).collect()));
        rates = Some(r);
    }
    if let (Some(col), Some(rules)) = (&a.column, &a.rules) {
        let text = std::fs::read_to_string(rules).map_err(|e| Error::io(rules, e))?;
        let rule = BinningRule::from_json(&text)?;
        let labels = bin_outcome(&table.column_f64(col)?, &rule)?;
        summary.insert("max_label".into(), json!(labels.iter().max()));
        extra.push((
            a.label_col.clone(),
            labels.iter().map(u64::to_string).collect(),
        ));
    }
    if let (Some(col), Some(h)) = (&a.exposure_col, a.threshold) {
        let exposure = match &rates {
            Some(r) if *col == a.rate_col => r.clone(),
            _ => table.column_f64(col)?,
        };
        let w = dichotomize(&exposure, h);
        summary.insert(
            "n_treated".into(),
            json!(w.iter().filter(|&&v| v == 1).count()),
        );
        extra.push((a.treat_col.clone(), w.iter().map(u8::to_string).collect()));
    }
    if extra.is_empty() {
        return Err(Error::InvalidParameter(
            "nothing to do: give --column/--rules, --rate-cases/--rate-population or --exposure-col/--threshold".into(),
        ));
    }
    // new columns replace same-named input columns
    let replaced: Vec<Option<usize>> = extra
        .iter()
        .map(|(name, _)| headers.iter().position(|h| h == name))
        .collect();
    for ((name, _), r) in extra.iter().zip(&replaced) {
        if r.is_none() {
            headers.push(name.clone());
        }
    }
    let file = std::fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut w = csv::WriterBuilder::new()
        .delimiter(delim)
        .from_writer(std::io::BufWriter::new(file));
    w.write_record(&headers)?;
    let cols: Vec<Vec<&str>> = table
        .headers()
        .iter()
        .map(|h| table.column_str(h))
        .collect::<Result<_>>()?;
    for i in 0..table.len() {
        let mut rec: Vec<&str> = cols.iter().map(|c| c[i]).collect();
        for ((_, values), r) in extra.iter().zip(&replaced) {
            match r {
                Some(j) => rec[*j] = &values[i],
                None => rec.push(&values[i]),
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    ctx.output(&a.out);
    summary.insert("out".into(), json!(a.out));
    Ok(Value::Object(summary))
}
