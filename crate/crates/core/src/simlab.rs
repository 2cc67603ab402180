//! Monte Carlo engine: generate complete data, ampute, apply each method,
//! fit the analysis model, pool, and aggregate performance over repetitions.
//!
//! Repetition `s` of a scenario draws everything from substreams of
//! `(seed, s)`, so the simulated datasets are shared by all methods of a
//! scenario and results are identical regardless of thread count.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expit;
use crate::glm::DesignSpec;
use crate::impute::{self, analyze, complete_records, Method, MethodSpec};
use crate::pool::{self, fmt, PooledEstimate};
use crate::rng::{derive_seed, substream, StreamRng};
use crate::selection::{ampute, Mechanism, SelectionModel};
use crate::tabular::{Dataset, PopulationDistribution, PopulationSource, Variable};

pub const TARGET: &str = "x";
pub const OUTCOME: &str = "y";
pub const PARAMETERS: [&str; 2] = ["beta0", "beta_x"];

/// Data-generating model: `x ~ Bernoulli(p_x)`, `logit P(y=1|x) = β0 + βx x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub p_x: f64,
    pub beta0: f64,
    pub beta_x: f64,
}

impl Default for Generator {
    fn default() -> Self {
        Generator { p_x: 0.7, beta0: 0.5f64.ln(), beta_x: 1.5f64.ln() }
    }
}

impl Generator {
    pub fn simulate(&self, n: usize, rng: &mut StreamRng) -> Dataset {
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let xv = u32::from(rng.random::<f64>() < self.p_x);
            let py = expit(self.beta0 + self.beta_x * xv as f64);
            y.push(Some(u32::from(rng.random::<f64>() < py)));
            x.push(Some(xv));
        }
        Dataset::new(vec![Variable::binary(OUTCOME), Variable::binary(TARGET)], vec![y, x])
            .expect("generated columns are well formed")
    }

    pub fn truth(&self) -> [f64; 2] {
        [self.beta0, self.beta_x]
    }
}

/// What the analyst knows about the population distribution of `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "case", rename_all = "snake_case")]
pub enum PopulationCase {
    /// The true `p_x` (a census).
    Exact,
    /// Estimated from a fresh external sample of `n_ex` records per repetition.
    External { n_ex: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// S = 500, n = 2000, M = 10.
    #[default]
    Desk,
    /// S = 2000, n = 5000, M = 50.
    Full,
}

impl Profile {
    /// `(n, reps, m)`.
    pub fn sizes(self) -> (usize, usize, usize) {
        match self {
            Profile::Desk => (2000, 500, 10),
            Profile::Full => (5000, 2000, 50),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub n: usize,
    pub reps: usize,
    pub m: usize,
    pub generator: Generator,
    pub selection: SelectionModel,
    pub methods: Vec<Method>,
    pub population: PopulationCase,
    pub seed: u64,
}

impl ScenarioConfig {
    /// Desk-profile scenario with the reference selection model of `mechanism`.
    pub fn desk(mechanism: Mechanism, seed: u64) -> Self {
        let (n, reps, m) = Profile::Desk.sizes();
        ScenarioConfig {
            name: mechanism.to_string(),
            n,
            reps,
            m,
            generator: Generator::default(),
            selection: SelectionModel::reference(mechanism),
            methods: vec![Method::FullData, Method::Cra, Method::StandardMi, Method::CalibratedMi],
            population: PopulationCase::Exact,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 100 {
            return Err(Error::Config(format!("scenario `{}`: n must be at least 100", self.name)));
        }
        if self.reps < 2 {
            return Err(Error::Config(format!("scenario `{}`: reps must be at least 2", self.name)));
        }
        if self.m < 2 {
            return Err(Error::Config(format!("scenario `{}`: m must be at least 2", self.name)));
        }
        if self.methods.is_empty() {
            return Err(Error::Config(format!("scenario `{}`: no methods listed", self.name)));
        }
        if let PopulationCase::External { n_ex } = self.population {
            if n_ex < 1 {
                return Err(Error::Config(format!("scenario `{}`: n_ex must be at least 1", self.name)));
            }
        }
        if !(self.generator.p_x > 0.0 && self.generator.p_x < 1.0) {
            return Err(Error::Config(format!("scenario `{}`: p_x must be in (0, 1)", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    profile: Profile,
    seed: Option<u64>,
    #[serde(default)]
    scenario: Vec<ScenarioToml>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioToml {
    name: Option<String>,
    profile: Option<Profile>,
    n: Option<usize>,
    reps: Option<usize>,
    m: Option<usize>,
    seed: Option<u64>,
    #[serde(default)]
    generator: Option<Generator>,
    mechanism: Mechanism,
    alpha0: Option<f64>,
    alpha_x: Option<f64>,
    alpha_y: Option<f64>,
    methods: Option<Vec<Method>>,
    population: Option<PopulationCase>,
}

/// Parses a TOML scenario file. `profile_override` replaces every profile
/// named in the file. Every scenario must get a seed, either its own or one
/// derived from the top-level `seed`.
pub fn parse_config(text: &str, profile_override: Option<Profile>) -> Result<Vec<ScenarioConfig>> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    if file.scenario.is_empty() {
        return Err(Error::Config("config defines no [[scenario]] entries".into()));
    }
    file.scenario
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let profile = profile_override.or(s.profile).unwrap_or(file.profile);
            let (n, reps, m) = profile.sizes();
            let reference = SelectionModel::reference(s.mechanism);
            let selection = SelectionModel::new(
                s.mechanism,
                s.alpha0.unwrap_or(reference.alpha0),
                s.alpha_x.unwrap_or(reference.alpha_x),
                s.alpha_y.unwrap_or(reference.alpha_y),
            )
            .map_err(|e| Error::Config(e.to_string()))?;
            let cfg = ScenarioConfig {
                name: s.name.unwrap_or_else(|| format!("{}-{}", s.mechanism, i + 1)),
                n: s.n.unwrap_or(n),
                reps: s.reps.unwrap_or(reps),
                m: s.m.unwrap_or(m),
                generator: s.generator.unwrap_or_default(),
                selection,
                methods: s
                    .methods
                    .unwrap_or_else(|| vec![Method::FullData, Method::Cra, Method::StandardMi, Method::CalibratedMi]),
                population: s.population.unwrap_or(PopulationCase::Exact),
                seed: match (s.seed, file.seed) {
                    (Some(seed), _) => seed,
                    (None, Some(base)) => derive_seed(base, &[i as u64]),
                    (None, None) => {
                        return Err(Error::Config(format!(
                            "scenario {}: no seed; set a top-level `seed` or a per-scenario one",
                            i + 1
                        )))
                    }
                },
            };
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

pub fn read_config(path: impl AsRef<Path>, profile_override: Option<Profile>) -> Result<Vec<ScenarioConfig>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, profile_override)
}

/// One method's estimate of one parameter in one repetition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RawRecord {
    pub scenario: String,
    pub rep: usize,
    pub method: Method,
    pub parameter: String,
    pub estimate: f64,
    /// Pooled total variance (the model variance for single fits).
    pub variance: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Between-imputation variance (0 for single fits).
    pub between: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub rep: usize,
    pub method: Method,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerformanceSummary {
    pub method: Method,
    pub parameter: String,
    pub reps: usize,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub bias_mcse: f64,
    pub emp_se: f64,
    pub emp_se_mcse: f64,
    pub model_se: f64,
    pub model_se_mcse: f64,
    pub coverage: f64,
    pub coverage_mcse: f64,
    pub mean_between: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioOutput {
    pub config: ScenarioConfig,
    pub raw: Vec<RawRecord>,
    pub failures: Vec<Failure>,
    pub summary: Vec<PerformanceSummary>,
}

impl ScenarioOutput {
    pub fn summary_for(&self, method: Method, parameter: &str) -> Option<&PerformanceSummary> {
        self.summary.iter().find(|s| s.method == method && s.parameter == parameter)
    }

    /// Number of distinct repetitions with at least one failed method.
    pub fn failed_reps(&self) -> usize {
        self.failures.iter().map(|f| f.rep).collect::<std::collections::BTreeSet<_>>().len()
    }

    /// Errors when more than 1% of repetitions failed.
    pub fn check_failure_cap(&self) -> Result<()> {
        let failed = self.failed_reps();
        if failed as f64 > 0.01 * self.config.reps as f64 {
            return Err(Error::FailureCap { failed, total: self.config.reps });
        }
        Ok(())
    }
}

/// Data shared by all methods in one repetition.
pub struct Replicate {
    pub full: Dataset,
    pub amputed: Dataset,
    pub population: PopulationDistribution,
}

/// Builds repetition `rep`: full data, amputed copy and the population
/// distribution available to the analyst.
pub fn replicate(cfg: &ScenarioConfig, rep: usize) -> Result<Replicate> {
    let s = rep as u64;
    let full = cfg.generator.simulate(cfg.n, &mut substream(cfg.seed, &[s, 0]));
    let amputed = ampute(&full, TARGET, OUTCOME, &cfg.selection, &mut substream(cfg.seed, &[s, 1]))?;
    let population = match cfg.population {
        PopulationCase::Exact => PopulationDistribution::binary(TARGET, cfg.generator.p_x, PopulationSource::Exact)?,
        PopulationCase::External { n_ex } => {
            let mut rng = substream(cfg.seed, &[s, 2]);
            let ones = (0..n_ex).filter(|_| rng.random::<f64>() < cfg.generator.p_x).count();
            PopulationDistribution::binary(TARGET, ones as f64 / n_ex as f64, PopulationSource::Estimated { n_ex })?
        }
    };
    Ok(Replicate { full, amputed, population })
}

fn analysis_spec() -> DesignSpec {
    DesignSpec::new(OUTCOME, [TARGET])
}

fn imputation_spec() -> DesignSpec {
    DesignSpec::new(TARGET, [OUTCOME])
}

/// Applies one method to a replicate and returns the pooled estimates.
pub fn apply_method(data: &Replicate, method: Method, m: usize, seed: u64) -> Result<Vec<PooledEstimate>> {
    let analysis = analysis_spec();
    match method {
        Method::FullData => Ok(pool::single(&analyze(&data.full, &analysis)?)),
        Method::Cra => Ok(pool::single(&analyze(&complete_records(&data.amputed, TARGET)?, &analysis)?)),
        _ => {
            let spec = MethodSpec::new(method, m);
            impute::impute(&data.amputed, &imputation_spec(), &spec, Some(&data.population), seed)?.analyze(&analysis)
        }
    }
}

/// Runs all repetitions of a scenario and summarizes them.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioOutput> {
    let out = run_repetitions(cfg)?;
    out.check_failure_cap()?;
    Ok(out)
}

/// Runs every repetition and summarizes the successful ones without
/// enforcing the failure cap; see [`ScenarioOutput::check_failure_cap`].
pub fn run_repetitions(cfg: &ScenarioConfig) -> Result<ScenarioOutput> {
    cfg.validate()?;
    let per_rep: Vec<(Vec<RawRecord>, Vec<Failure>)> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let mut raw = Vec::new();
            let mut failures = Vec::new();
            let data = match replicate(cfg, rep) {
                Ok(d) => d,
                Err(e) => {
                    for &method in &cfg.methods {
                        failures.push(Failure { rep, method, message: e.to_string() });
                    }
                    return (raw, failures);
                }
            };
            let seed = derive_seed(cfg.seed, &[rep as u64, 3]);
            for &method in &cfg.methods {
                match apply_method(&data, method, cfg.m, seed) {
                    Ok(est) => {
                        for (k, p) in est.iter().enumerate() {
                            raw.push(RawRecord {
                                scenario: cfg.name.clone(),
                                rep,
                                method,
                                parameter: PARAMETERS[k].to_string(),
                                estimate: p.estimate,
                                variance: p.total,
                                ci_lo: p.ci_lo,
                                ci_hi: p.ci_hi,
                                between: p.between,
                            });
                        }
                    }
                    Err(e) => failures.push(Failure { rep, method, message: e.to_string() }),
                }
            }
            (raw, failures)
        })
        .collect();
    let mut raw = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in per_rep {
        raw.extend(r);
        failures.extend(f);
    }
    let truth: BTreeMap<String, f64> =
        PARAMETERS.iter().zip(cfg.generator.truth()).map(|(p, v)| (p.to_string(), v)).collect();
    let summary = summarize(&raw, &truth)?;
    Ok(ScenarioOutput { config: cfg.clone(), raw, failures, summary })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Performance measures per method and parameter, in first-appearance order.
pub fn summarize(raw: &[RawRecord], truth: &BTreeMap<String, f64>) -> Result<Vec<PerformanceSummary>> {
    let mut keys: Vec<(Method, String)> = Vec::new();
    for r in raw {
        let key = (r.method, r.parameter.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.iter()
        .map(|(method, parameter)| {
            let beta = *truth
                .get(parameter)
                .ok_or_else(|| Error::InvalidInput(format!("no true value for `{parameter}`")))?;
            let rows: Vec<&RawRecord> = raw.iter().filter(|r| r.method == *method && &r.parameter == parameter).collect();
            let s = rows.len();
            if s < 2 {
                return Err(Error::InvalidInput(format!("{method} {parameter}: fewer than two repetitions")));
            }
            let sf = s as f64;
            let est: Vec<f64> = rows.iter().map(|r| r.estimate).collect();
            let var: Vec<f64> = rows.iter().map(|r| r.variance).collect();
            let avg = mean(&est);
            let emp_se = sample_var(&est).sqrt();
            let mean_var = mean(&var);
            let model_se = mean_var.sqrt();
            let model_se_mcse =
                if mean_var > 0.0 { (sample_var(&var) / (4.0 * sf * mean_var)).sqrt() } else { 0.0 };
            let coverage = rows.iter().filter(|r| r.ci_lo <= beta && beta <= r.ci_hi).count() as f64 / sf;
            Ok(PerformanceSummary {
                method: *method,
                parameter: parameter.clone(),
                reps: s,
                truth: beta,
                mean: avg,
                bias: avg - beta,
                bias_mcse: emp_se / sf.sqrt(),
                emp_se,
                emp_se_mcse: emp_se / (2.0 * (sf - 1.0)).sqrt(),
                model_se,
                model_se_mcse,
                coverage,
                coverage_mcse: (coverage * (1.0 - coverage) / sf).sqrt(),
                mean_between: mean(&rows.iter().map(|r| r.between).collect::<Vec<_>>()),
            })
        })
        .collect()
}

pub fn write_raw_csv_to<W: Write>(writer: W, raw: &[RawRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let err = |e: csv::Error| Error::InvalidInput(format!("writing raw estimates: {e}"));
    w.write_record(["scenario", "rep", "method", "parameter", "estimate", "variance", "ci_lo", "ci_hi", "between"])
        .map_err(err)?;
    for r in raw {
        w.write_record([
            r.scenario.clone(),
            r.rep.to_string(),
            r.method.to_string(),
            r.parameter.clone(),
            fmt(r.estimate),
            fmt(r.variance),
            fmt(r.ci_lo),
            fmt(r.ci_hi),
            fmt(r.between),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("writing raw estimates: {e}")))
}

/// Reads a raw-estimates file back (for re-summarizing offline).
pub fn read_raw_csv(path: impl AsRef<Path>) -> Result<Vec<RawRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if rec.len() < 9 {
            return Err(Error::Parse { line, message: "expected 9 fields".into() });
        }
        let num = |k: usize| -> Result<f64> {
            rec[k].parse().map_err(|_| Error::Parse { line, message: format!("not a number: `{}`", &rec[k]) })
        };
        out.push(RawRecord {
            scenario: rec[0].to_string(),
            rep: rec[1].parse().map_err(|_| Error::Parse { line, message: "bad rep".into() })?,
            method: rec[2].parse()?,
            parameter: rec[3].to_string(),
            estimate: num(4)?,
            variance: num(5)?,
            ci_lo: num(6)?,
            ci_hi: num(7)?,
            between: num(8)?,
        });
    }
    Ok(out)
}

pub fn write_summary_csv_to<W: Write>(writer: W, scenario: &str, summary: &[PerformanceSummary]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let err = |e: csv::Error| Error::InvalidInput(format!("writing summary: {e}"));
    w.write_record([
        "scenario",
        "method",
        "parameter",
        "reps",
        "truth",
        "mean",
        "bias",
        "bias_mcse",
        "emp_se",
        "emp_se_mcse",
        "model_se",
        "model_se_mcse",
        "coverage",
        "coverage_mcse",
        "mean_between",
    ])
    .map_err(err)?;
    for s in summary {
        w.write_record([
            scenario.to_string(),
            s.method.to_string(),
            s.parameter.clone(),
            s.reps.to_string(),
            fmt(s.truth),
            fmt(s.mean),
            fmt(s.bias),
            fmt(s.bias_mcse),
            fmt(s.emp_se),
            fmt(s.emp_se_mcse),
            fmt(s.model_se),
            fmt(s.model_se_mcse),
            fmt(s.coverage),
            fmt(s.coverage_mcse),
            fmt(s.mean_between),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("writing summary: {e}")))
}

/// Writes `raw.csv`, `summary.csv` and `summary.json` into `dir`.
pub fn write_outputs(out: &ScenarioOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let create = |name: &str| {
        let p = dir.join(name);
        std::fs::File::create(&p).map(std::io::BufWriter::new).map_err(|e| Error::io(p, e))
    };
    write_raw_csv_to(create("raw.csv")?, &out.raw)?;
    write_summary_csv_to(create("summary.csv")?, &out.config.name, &out.summary)?;
    let json = serde_json::json!({
        "config": out.config,
        "failures": out.failures,
        "summary": out.summary,
    });
    let mut f = create("summary.json")?;
    let path = dir.join("summary.json");
    serde_json::to_writer_pretty(&mut f, &json).map_err(|e| Error::InvalidInput(e.to_string()))?;
    f.write_all(b"\n").and_then(|_| f.flush()).map_err(|e| Error::io(path, e))
}
