//! Command-line front end: argument definitions and command execution.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or feasibility error,
//! 3 numerical failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use calmi::analytic::{bias_grid, AnalyticMethod, GridSpec, PopulationTable};
use calmi::impute::{self, Method, MethodSpec};
use calmi::pool::{self, AnalysisFit, PooledEstimate};
use calmi::simlab::{self, Profile};
use calmi::tabular::{read_csv, ReadOptions};
use calmi::{
    Dataset, DesignSpec, Error, ErrorClass, Mechanism, PopulationDistribution, PopulationSource, SelectionModel,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "calmi", version, about = "Calibrated-delta adjustment multiple imputation for incomplete categorical covariates")]
pub struct Cli {
    /// Worker threads for parallel work (default: all available cores)
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Impute an incomplete categorical variable and pool the analysis model
    Impute(ImputeArgs),
    /// Run Monte Carlo simulation scenarios from a TOML config
    Simulate(SimulateArgs),
    /// Evaluate the expectation-level 2x2 bias surface over a selection-model grid
    AnalyticBias(AnalyticBiasArgs),
    /// Pool per-imputation estimates with Rubin's rules
    Pool(PoolArgs),
    /// Find the selection-model intercept giving a requested missing fraction
    SolveAlpha0(SolveAlpha0Args),
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    /// Input CSV with a header row
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
    /// Incomplete categorical variable to impute
    #[arg(long, value_name = "NAME")]
    pub target: String,
    /// Comma-separated imputation-model predictors (default: every other variable)
    #[arg(long, value_name = "A,B,..", value_delimiter = ',')]
    pub predictors: Vec<String>,
    /// Analysis-model outcome; must be an imputation predictor (default: first predictor)
    #[arg(long, value_name = "NAME")]
    pub outcome: Option<String>,
    /// Method: cra, single, standard-mi, calibrated-mi, marginal-weighted-mi, conditional-weighted-mi
    #[arg(long, value_name = "METHOD", default_value = "calibrated-mi")]
    pub method: String,
    /// Population distribution of the target as "level=prob,..."; one level may be left out
    #[arg(long, value_name = "SPEC")]
    pub pop_dist: Option<String>,
    /// Size of the external sample the population distribution was estimated from (default: exact)
    #[arg(long, value_name = "N")]
    pub pop_n_ex: Option<usize>,
    /// Number of imputations
    #[arg(long, value_name = "M", default_value_t = 10)]
    pub m: usize,
    /// Random seed (required for multiple-imputation methods)
    #[arg(long, value_name = "SEED")]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Analysis model as "outcome ~ a + b" (default: outcome on every other variable)
    #[arg(long, value_name = "FORMULA")]
    pub analysis_model: Option<String>,
    /// Level of the target used to fill missing cells with --method single
    #[arg(long, value_name = "LEVEL")]
    pub fill_level: Option<String>,
    /// Base (reference) level of the target (default: first level)
    #[arg(long, value_name = "LEVEL")]
    pub base: Option<String>,
    /// Token read as missing; repeatable (default: empty field and NA)
    #[arg(long = "missing-token", value_name = "TOKEN")]
    pub missing_tokens: Vec<String>,
    /// Calibrated MI: use point estimates instead of drawing parameters and proportions
    #[arg(long)]
    pub no_uncertainty: bool,
    /// Write one CSV per imputation instead of a single stacked file
    #[arg(long)]
    pub separate: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario config file (TOML; see docs/config.md)
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output directory; one subdirectory per scenario
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Override every scenario's size profile
    #[arg(long, value_enum, value_name = "PROFILE")]
    pub profile: Option<ProfileArg>,
    /// Run only the named scenario; repeatable
    #[arg(long = "scenario", value_name = "NAME")]
    pub scenarios: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProfileArg {
    /// S = 500, n = 2000, M = 10
    Desk,
    /// S = 2000, n = 5000, M = 50
    Full,
}

#[derive(Debug, Args)]
pub struct AnalyticBiasArgs {
    /// Selection model: M1, M2, M3 or M4
    #[arg(long, value_name = "MECH")]
    pub mechanism: String,
    /// Comma-separated methods: cra, standard-mi, marginal-weighted-mi, conditional-weighted-mi, calibrated-mi (default: all)
    #[arg(long, value_name = "METHODS", value_delimiter = ',')]
    pub method: Vec<String>,
    /// Grid of selection-model coefficients as "lo:hi:points"
    #[arg(long, value_name = "LO:HI:N", default_value = "-3:3:61", allow_hyphen_values = true)]
    pub grid: String,
    /// Fixed intercept for the M4 grid
    #[arg(long, value_name = "A0", default_value_t = 0.5, allow_negative_numbers = true)]
    pub m4_alpha0: f64,
    /// Population P(x = 1)
    #[arg(long, value_name = "P", default_value_t = 0.7)]
    pub p_x: f64,
    /// Analysis-model intercept (default: ln 0.5)
    #[arg(long, value_name = "B0", allow_negative_numbers = true)]
    pub beta0: Option<f64>,
    /// Analysis-model log odds ratio (default: ln 1.5)
    #[arg(long, value_name = "BX", allow_negative_numbers = true)]
    pub beta_x: Option<f64>,
    /// Output CSV (default: stdout)
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PoolArgs {
    /// Long-format CSV with columns imputation, coefficient, estimate, variance[, df_complete]
    #[arg(long, value_name = "PATH")]
    pub fits: PathBuf,
    /// Output file (default: stdout)
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Output format
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
    /// Mark the estimates as coming from a weighted imputation model
    #[arg(long)]
    pub weighted: bool,
    /// Also write jackknife Monte Carlo errors of the FMI to this CSV (needs M >= 3)
    #[arg(long, value_name = "PATH")]
    pub fmi_mcse: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct SolveAlpha0Args {
    /// Selection model: M1, M2, M3 or M4
    #[arg(long, value_name = "MECH")]
    pub mechanism: String,
    /// Requested marginal fraction of missing values, in (0, 1)
    #[arg(long, value_name = "F")]
    pub missing_fraction: f64,
    /// Coefficient of x in the selection model (default: the mechanism's reference value)
    #[arg(long, value_name = "AX", allow_negative_numbers = true)]
    pub alpha_x: Option<f64>,
    /// Coefficient of y in the selection model (default: the mechanism's reference value)
    #[arg(long, value_name = "AY", allow_negative_numbers = true)]
    pub alpha_y: Option<f64>,
    /// Population P(x = 1)
    #[arg(long, value_name = "P", default_value_t = 0.7)]
    pub p_x: f64,
    /// Analysis-model intercept (default: ln 0.5)
    #[arg(long, value_name = "B0", allow_negative_numbers = true)]
    pub beta0: Option<f64>,
    /// Analysis-model log odds ratio (default: ln 1.5)
    #[arg(long, value_name = "BX", allow_negative_numbers = true)]
    pub beta_x: Option<f64>,
}

/// A failed command, carrying the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numerical => 3,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("calmi: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        // Fails only if a global pool already exists (e.g. repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Impute(a) => run_impute(a),
        Command::Simulate(a) => run_simulate(a),
        Command::AnalyticBias(a) => run_analytic_bias(a),
        Command::Pool(a) => run_pool(a),
        Command::SolveAlpha0(a) => run_solve_alpha0(a),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e).into())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

/// A buffered file writer, or stdout when no path is given.
fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    })
}

/// Parses "y ~ a + b" (or "y ~ a, b").
pub fn parse_formula(text: &str) -> CliResult<DesignSpec> {
    let (lhs, rhs) = text.split_once('~').ok_or_else(|| usage(format!("analysis model `{text}` has no `~`")))?;
    let outcome = lhs.trim();
    let covariates: Vec<&str> = rhs.split(['+', ',']).map(str::trim).filter(|s| !s.is_empty()).collect();
    if outcome.is_empty() || covariates.is_empty() {
        return Err(usage(format!("analysis model `{text}` needs an outcome and at least one covariate")));
    }
    Ok(DesignSpec::new(outcome, covariates))
}

enum ImputeMethod {
    Single,
    Other(Method),
}

fn parse_method(s: &str) -> CliResult<ImputeMethod> {
    if s.eq_ignore_ascii_case("single") {
        return Ok(ImputeMethod::Single);
    }
    match s.parse::<Method>() {
        Ok(Method::FullData) => Err(usage("`full-data` is only available in simulations")),
        Ok(m) => Ok(ImputeMethod::Other(m)),
        Err(_) => Err(usage(format!(
            "unknown method `{s}` (expected cra, single, standard-mi, calibrated-mi, marginal-weighted-mi or conditional-weighted-mi)"
        ))),
    }
}

fn load_dataset(a: &ImputeArgs) -> CliResult<Dataset> {
    let mut options = ReadOptions::default();
    if !a.missing_tokens.is_empty() {
        options.missing_tokens = a.missing_tokens.clone();
    }
    let mut ds = read_csv(&a.data, &options)?.sort_integer_levels()?;
    let t = ds.index_of(&a.target)?;
    if let Some(base) = &a.base {
        ds = ds.set_base_level(t, base)?;
    }
    Ok(ds)
}

fn write_fits(path: &Path, fits: &[AnalysisFit]) -> CliResult<()> {
    let mut w = create(path)?;
    let io = |e| CliError::from(Error::io(path, e));
    writeln!(w, "imputation,coefficient,estimate,variance,df_complete").map_err(io)?;
    for (i, f) in fits.iter().enumerate() {
        for k in 0..f.names.len() {
            writeln!(w, "{},{},{:?},{:?},{:?}", i + 1, f.names[k], f.estimates[k], f.variances[k], f.df_complete)
                .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn report_pooled(estimates: &[PooledEstimate]) {
    for p in estimates {
        eprintln!(
            "  {:<24} {:>10.5} (se {:.5})  OR {:.4} [{:.4}, {:.4}]  fmi {:.3}",
            p.name,
            p.estimate,
            p.se(),
            p.odds_ratio(),
            p.ci_lo.exp(),
            p.ci_hi.exp(),
            p.fmi
        );
        if p.m > 1 && !p.mc_error_ok() {
            eprintln!("  warning: Monte Carlo error for `{}` exceeds 10% of its SE; increase --m", p.name);
        }
    }
}

fn run_impute(a: ImputeArgs) -> CliResult<()> {
    let method = parse_method(&a.method)?;
    let ds = load_dataset(&a)?;
    let predictors: Vec<String> = if a.predictors.is_empty() {
        ds.variables().iter().map(|v| v.name.clone()).filter(|n| *n != a.target).collect()
    } else {
        a.predictors.clone()
    };
    if predictors.is_empty() {
        return Err(usage("the imputation model needs at least one predictor"));
    }
    if predictors.contains(&a.target) {
        return Err(usage("--target cannot also be a predictor"));
    }
    for p in &predictors {
        ds.index_of(p)?;
    }
    let outcome = a.outcome.clone().unwrap_or_else(|| predictors[0].clone());
    if !predictors.contains(&outcome) {
        return Err(usage(format!("the analysis outcome `{outcome}` must be one of the imputation predictors")));
    }
    let analysis = match &a.analysis_model {
        Some(f) => parse_formula(f)?,
        None => DesignSpec::new(
            outcome.clone(),
            ds.variables().iter().map(|v| v.name.clone()).filter(|n| *n != outcome),
        ),
    };
    let imputation = DesignSpec::new(a.target.clone(), predictors);
    let source = match a.pop_n_ex {
        Some(n_ex) => PopulationSource::Estimated { n_ex },
        None => PopulationSource::Exact,
    };
    let pop = match &a.pop_dist {
        Some(spec) => Some(PopulationDistribution::from_level_spec(ds.variable(ds.index_of(&a.target)?), spec, source)?),
        None => None,
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let (estimates, weighted) = match method {
        ImputeMethod::Single => {
            let level = a.fill_level.as_deref().ok_or_else(|| usage("--method single needs --fill-level"))?;
            let filled = impute::single_impute(&ds, &a.target, level)?;
            filled.write_csv(a.out.join("completed.csv"))?;
            (pool::single(&impute::analyze(&filled, &analysis)?), false)
        }
        ImputeMethod::Other(Method::Cra) => {
            let records = impute::complete_records(&ds, &a.target)?;
            records.write_csv(a.out.join("complete_records.csv"))?;
            (pool::single(&impute::analyze(&records, &analysis)?), false)
        }
        ImputeMethod::Other(m) => {
            let seed = a.seed.ok_or_else(|| usage("--seed is required for multiple-imputation methods"))?;
            if a.m < 2 {
                return Err(usage("--m must be at least 2"));
            }
            if m.needs_population() && pop.is_none() {
                return Err(usage(format!("--method {m} needs --pop-dist")));
            }
            let mut spec = MethodSpec::new(m, a.m);
            spec.propagate_uncertainty = !a.no_uncertainty;
            if a.no_uncertainty && m != Method::CalibratedMi {
                return Err(usage("--no-uncertainty applies only to calibrated-mi"));
            }
            let result = impute::impute(&ds, &imputation, &spec, pop.as_ref(), seed)?;
            for note in &result.notes {
                eprintln!("note: {note}");
            }
            if a.separate {
                result.write_separate_csv(&a.out, "completed")?;
            } else {
                result.write_stacked_csv(a.out.join("completed.csv"))?;
            }
            let fits = result
                .imputations
                .iter()
                .map(|d| impute::analyze(d, &analysis))
                .collect::<calmi::Result<Vec<_>>>()?;
            write_fits(&a.out.join("fits.csv"), &fits)?;
            let json = serde_json::to_string_pretty(&result.diagnostics).expect("diagnostics serialize");
            write_text(&a.out.join("diagnostics.json"), &(json + "\n"))?;
            (pool::pool(&fits)?, m.is_weighted())
        }
    };
    pool::write_csv(a.out.join("pooled.csv"), &estimates, weighted)?;
    write_text(&a.out.join("pooled.json"), &(pool::to_json(&estimates, weighted) + "\n"))?;
    eprintln!("{} ({} records) -> {}", a.method, ds.n_rows(), a.out.display());
    report_pooled(&estimates);
    Ok(())
}

fn run_simulate(a: SimulateArgs) -> CliResult<()> {
    let profile = a.profile.map(|p| match p {
        ProfileArg::Desk => Profile::Desk,
        ProfileArg::Full => Profile::Full,
    });
    let mut configs = simlab::read_config(&a.config, profile)?;
    if !a.scenarios.is_empty() {
        for name in &a.scenarios {
            if !configs.iter().any(|c| &c.name == name) {
                return Err(usage(format!("no scenario named `{name}` in {}", a.config.display())));
            }
        }
        configs.retain(|c| a.scenarios.contains(&c.name));
    }
    let mut names: Vec<&str> = configs.iter().map(|c| c.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(usage("scenario names must be unique"));
    }
    let mut breach = None;
    for cfg in &configs {
        eprintln!(
            "scenario {}: {} n={} reps={} m={} methods={}",
            cfg.name,
            cfg.selection.mechanism,
            cfg.n,
            cfg.reps,
            cfg.m,
            cfg.methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")
        );
        let out = simlab::run_repetitions(cfg)?;
        let dir = a.out.join(&cfg.name);
        simlab::write_outputs(&out, &dir)?;
        for f in out.failures.iter().take(5) {
            eprintln!("  failed: rep {} {}: {}", f.rep, f.method, f.message);
        }
        for s in &out.summary {
            eprintln!(
                "  {:<24} {:<7} bias {:+.4} ({:.4})  empSE {:.4}  modSE {:.4}  cover {:.3}",
                s.method.name(),
                s.parameter,
                s.bias,
                s.bias_mcse,
                s.emp_se,
                s.model_se,
                s.coverage
            );
        }
        if let Err(e) = out.check_failure_cap() {
            eprintln!("  {e}");
            breach.get_or_insert(e);
        }
    }
    match breach {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn generators(p_x: f64, beta0: Option<f64>, beta_x: Option<f64>) -> CliResult<PopulationTable> {
    Ok(PopulationTable::from_generators(
        p_x,
        beta0.unwrap_or_else(|| 0.5f64.ln()),
        beta_x.unwrap_or_else(|| 1.5f64.ln()),
    )?)
}

fn run_analytic_bias(a: AnalyticBiasArgs) -> CliResult<()> {
    let mechanism: Mechanism = a.mechanism.parse().map_err(|e: Error| usage(e.to_string()))?;
    let methods: Vec<AnalyticMethod> = if a.method.is_empty() {
        AnalyticMethod::ALL.to_vec()
    } else {
        a.method.iter().map(|m| m.parse().map_err(|e: Error| usage(e.to_string()))).collect::<CliResult<_>>()?
    };
    let grid = GridSpec { m4_alpha0: a.m4_alpha0, ..GridSpec::parse(&a.grid).map_err(|e| usage(e.to_string()))? };
    let tab = generators(a.p_x, a.beta0, a.beta_x)?;
    let mut w = output(a.out.as_deref())?;
    for (i, &method) in methods.iter().enumerate() {
        let result = bias_grid(&tab, mechanism, method, &grid)?;
        result.write_csv_to(&mut w, i == 0)?;
        let (b0, bx) = result.max_abs_bias();
        eprintln!("{mechanism} {method}: max |bias| beta0 {b0:.3e}, beta_x {bx:.3e}");
    }
    w.flush().map_err(|e| Error::io("<output>", e))?;
    Ok(())
}

fn run_pool(a: PoolArgs) -> CliResult<()> {
    let fits = pool::read_fits_csv(&a.fits)?;
    let estimates = if fits.len() == 1 { pool::single(&fits[0]) } else { pool::pool(&fits)? };
    let mut w = output(a.out.as_deref())?;
    match a.format {
        FormatArg::Csv => pool::write_csv_to(&mut w, &estimates, a.weighted)?,
        FormatArg::Json => writeln!(w, "{}", pool::to_json(&estimates, a.weighted)).map_err(|e| Error::io("<output>", e))?,
    }
    w.flush().map_err(|e| Error::io("<output>", e))?;
    if let Some(path) = &a.fmi_mcse {
        let mut f = create(path)?;
        let io = |e| CliError::from(Error::io(path, e));
        writeln!(f, "coefficient,fmi,mcse").map_err(io)?;
        for e in pool::fmi_mcse(&fits)? {
            writeln!(f, "{},{:?},{:?}", e.name, e.fmi, e.mcse).map_err(io)?;
        }
        f.flush().map_err(io)?;
    }
    report_pooled(&estimates);
    Ok(())
}

fn run_solve_alpha0(a: SolveAlpha0Args) -> CliResult<()> {
    let mechanism: Mechanism = a.mechanism.parse().map_err(|e: Error| usage(e.to_string()))?;
    let reference = SelectionModel::reference(mechanism);
    let model = SelectionModel::new(
        mechanism,
        reference.alpha0,
        a.alpha_x.unwrap_or(reference.alpha_x),
        a.alpha_y.unwrap_or(reference.alpha_y),
    )?;
    let tab = generators(a.p_x, a.beta0, a.beta_x)?;
    let alpha0 = model.alpha0_for_missing_fraction(&tab.cells, a.missing_fraction)?;
    println!("{alpha0:?}");
    Ok(())
}
