//! Imputation of one incomplete categorical variable.
//!
//! Every method fits a (multinomial) logistic imputation model to the
//! complete records and draws replacements for the missing cells. They differ
//! in how the fitted model is moved before drawing:
//!
//! * standard MI uses the fit as is;
//! * calibrated MI adds an intercept offset δ chosen so the completed data
//!   reproduce a known population distribution of the target;
//! * weighted MI refits with per-level case weights (marginal or conditional).
//!
//! Imputation `m` draws from its own RNG substream, so results do not depend
//! on thread scheduling.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deltasolve::{solve_delta, CalibrationTarget, LinpredProfile};
use crate::error::{Error, Result};
use crate::glm::{self, DesignSpec, FitOptions, GlmFit};
use crate::pool::{self, AnalysisFit, PooledEstimate};
use crate::rng::{substream, StreamRng};
use crate::tabular::{Dataset, PopulationDistribution, PopulationSource};

/// Bounds applied to drawn proportions.
const PROB_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Analysis of the data before amputation (simulation only).
    FullData,
    Cra,
    StandardMi,
    CalibratedMi,
    MarginalWeightedMi,
    ConditionalWeightedMi,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::FullData,
        Method::Cra,
        Method::StandardMi,
        Method::CalibratedMi,
        Method::MarginalWeightedMi,
        Method::ConditionalWeightedMi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FullData => "full-data",
            Method::Cra => "cra",
            Method::StandardMi => "standard-mi",
            Method::CalibratedMi => "calibrated-mi",
            Method::MarginalWeightedMi => "marginal-weighted-mi",
            Method::ConditionalWeightedMi => "conditional-weighted-mi",
        }
    }

    pub fn is_multiple_imputation(self) -> bool {
        !matches!(self, Method::FullData | Method::Cra)
    }

    pub fn needs_population(self) -> bool {
        matches!(self, Method::CalibratedMi | Method::MarginalWeightedMi | Method::ConditionalWeightedMi)
    }

    pub fn is_weighted(self) -> bool {
        matches!(self, Method::MarginalWeightedMi | Method::ConditionalWeightedMi)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        Ok(match s.as_str() {
            "full-data" | "full" => Method::FullData,
            "cra" | "complete-records" => Method::Cra,
            "standard-mi" | "standard" | "mi" => Method::StandardMi,
            "calibrated-mi" | "calibrated" | "delta" => Method::CalibratedMi,
            "marginal-weighted-mi" | "marginal-weighted" | "marginal" => Method::MarginalWeightedMi,
            "conditional-weighted-mi" | "conditional-weighted" | "conditional" => Method::ConditionalWeightedMi,
            _ => return Err(Error::Config(format!("unknown method `{s}`"))),
        })
    }
}

/// How weighted MI sets its per-level weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Required over observed target distribution.
    Marginal,
    /// Required over the MAR model's mean predicted distribution among the
    /// records with a missing target.
    Conditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    pub m: usize,
    /// When false, parameters and proportions are used at their point
    /// estimates instead of being drawn (calibrated MI only).
    pub propagate_uncertainty: bool,
}

impl MethodSpec {
    pub fn new(method: Method, m: usize) -> Self {
        MethodSpec { method, m, propagate_uncertainty: true }
    }
}

/// What happened inside one imputation.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct ImputationDiagnostics {
    /// 1-based imputation index.
    pub index: usize,
    /// Coefficients used before calibration (θ̃).
    pub theta_tilde: Vec<f64>,
    /// Coefficients used for drawing (θ̇); equal to `theta_tilde` for
    /// uncalibrated methods.
    pub theta_dot: Vec<f64>,
    pub delta: Option<Vec<f64>>,
    pub solver_iterations: Option<usize>,
    pub p_observed: Option<f64>,
    pub p_target_observed: Option<Vec<f64>>,
    pub p_population: Option<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
}

impl ImputationDiagnostics {
    /// Largest absolute difference between θ̃ and θ̇.
    pub fn theta_gap(&self) -> f64 {
        self.theta_tilde.iter().zip(&self.theta_dot).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

#[derive(Debug, Clone)]
pub struct ImputationResult {
    pub method: Method,
    pub target: String,
    pub imputations: Vec<Dataset>,
    pub diagnostics: Vec<ImputationDiagnostics>,
    /// Notes on approximations used (e.g. renormalized categorical draws).
    pub notes: Vec<String>,
}

impl ImputationResult {
    pub fn m(&self) -> usize {
        self.imputations.len()
    }

    /// Target distribution in each completed dataset.
    pub fn completed_distributions(&self) -> Result<Vec<Vec<f64>>> {
        self.imputations
            .iter()
            .map(|ds| {
                let t = ds.index_of(&self.target)?;
                let counts = ds.level_counts(t);
                let n = ds.n_rows() as f64;
                Ok(counts.iter().map(|&c| c as f64 / n).collect())
            })
            .collect()
    }

    /// Fits the analysis model to each completed dataset and pools.
    pub fn analyze(&self, spec: &DesignSpec) -> Result<Vec<PooledEstimate>> {
        let fits = self
            .imputations
            .par_iter()
            .enumerate()
            .map(|(i, ds)| analyze(ds, spec).map_err(|e| e.in_imputation(i + 1)))
            .collect::<Result<Vec<_>>>()?;
        pool::pool(&fits)
    }

    /// One CSV with a leading 1-based `_imputation` column.
    pub fn write_stacked_csv_to<W: Write>(&self, mut writer: W) -> Result<()> {
        for (i, ds) in self.imputations.iter().enumerate() {
            let labels = vec![(i + 1).to_string(); ds.n_rows()];
            let mut buf = Vec::new();
            ds.write_rows(&mut buf, Some(("_imputation", &labels)))?;
            let text = if i == 0 { &buf[..] } else { skip_header(&buf) };
            writer.write_all(text).map_err(|e| Error::io("<stacked output>", e))?;
        }
        writer.flush().map_err(|e| Error::io("<stacked output>", e))
    }

    pub fn write_stacked_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_stacked_csv_to(std::io::BufWriter::new(file))
    }

    /// `{stem}_{m}.csv` per imputation inside `dir`.
    pub fn write_separate_csv(&self, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        self.imputations
            .iter()
            .enumerate()
            .map(|(i, ds)| {
                let path = dir.join(format!("{stem}_{}.csv", i + 1));
                ds.write_csv(&path)?;
                Ok(path)
            })
            .collect()
    }
}

fn skip_header(buf: &[u8]) -> &[u8] {
    match buf.iter().position(|&b| b == b'\n') {
        Some(p) => &buf[p + 1..],
        None => &[],
    }
}

/// Fits the analysis model to every record of `ds`.
pub fn analyze(ds: &Dataset, spec: &DesignSpec) -> Result<AnalysisFit> {
    glm::fit(ds, spec, &FitOptions::default()).map(|f| AnalysisFit::from_glm(&f))
}

/// Records whose target is observed.
pub fn complete_records(ds: &Dataset, target: &str) -> Result<Dataset> {
    let t = ds.index_of(target)?;
    let keep = ds.response_indicator(t);
    if !keep.iter().any(|&k| k) {
        return Err(Error::InvalidInput(format!("`{target}` has no observed values")));
    }
    ds.filter_rows(&keep)
}

/// Fills every missing target cell with one level.
pub fn single_impute(ds: &Dataset, target: &str, level: &str) -> Result<Dataset> {
    let t = ds.index_of(target)?;
    let code = ds
        .variable(t)
        .level_index(level)
        .ok_or_else(|| Error::InvalidInput(format!("`{level}` is not a level of `{target}`")))?;
    let filled = ds.column(t).iter().map(|c| Some(c.unwrap_or(code))).collect();
    ds.with_column(t, filled)
}

/// Shared per-run state: the complete-record fit and the missing records
/// grouped by covariate pattern.
struct Problem<'a> {
    ds: &'a Dataset,
    spec: &'a DesignSpec,
    target: usize,
    observed: Vec<bool>,
    n_obs: usize,
    n_mis: usize,
    /// (covariate codes, rows) per distinct missing-record pattern.
    patterns: Vec<(Vec<u32>, Vec<usize>)>,
    fit: GlmFit,
}

impl<'a> Problem<'a> {
    fn new(ds: &'a Dataset, spec: &'a DesignSpec) -> Result<Self> {
        let target = ds.index_of(&spec.outcome)?;
        if spec.covariates.contains(&spec.outcome) {
            return Err(Error::InvalidInput(format!("`{}` cannot predict itself", spec.outcome)));
        }
        let observed = ds.response_indicator(target);
        let n_obs = observed.iter().filter(|&&r| r).count();
        let n_mis = observed.len() - n_obs;
        if n_obs == 0 {
            return Err(Error::InvalidInput(format!("`{}` has no observed values", spec.outcome)));
        }
        if n_mis == 0 {
            return Err(Error::InvalidInput(format!("`{}` has no missing values to impute", spec.outcome)));
        }
        for name in &spec.covariates {
            let c = ds.index_of(name)?;
            if ds.n_missing(c) > 0 {
                return Err(Error::InvalidInput(format!(
                    "predictor `{name}` has missing values; only the target may be incomplete"
                )));
            }
        }
        let fit = glm::fit(ds, spec, &FitOptions { rows: Some(&observed), ..FitOptions::default() })?;
        let mut index: HashMap<Vec<u32>, usize> = HashMap::new();
        let mut patterns: Vec<(Vec<u32>, Vec<usize>)> = Vec::new();
        for row in (0..ds.n_rows()).filter(|&r| !observed[r]) {
            let codes = fit.design.row_codes(ds, row).expect("predictors are complete");
            match index.get(&codes) {
                Some(&p) => patterns[p].1.push(row),
                None => {
                    index.insert(codes.clone(), patterns.len());
                    patterns.push((codes, vec![row]));
                }
            }
        }
        Ok(Problem { ds, spec, target, observed, n_obs, n_mis, patterns, fit })
    }

    fn n_levels(&self) -> usize {
        self.ds.variable(self.target).n_levels()
    }

    fn level_names(&self) -> Vec<String> {
        self.ds.variable(self.target).levels.clone()
    }

    fn observed_distribution(&self) -> Vec<f64> {
        let counts = self.ds.level_counts(self.target);
        counts.iter().map(|&c| c as f64 / self.n_obs as f64).collect()
    }

    fn p_observed(&self) -> f64 {
        self.n_obs as f64 / self.ds.n_rows() as f64
    }

    fn profiles(&self, fit: &GlmFit, coefficients: &[f64]) -> Vec<LinpredProfile> {
        self.patterns
            .iter()
            .map(|(codes, rows)| LinpredProfile::new(fit.linear_predictors(coefficients, codes), rows.len() as f64))
            .collect()
    }

    /// Mean predicted target distribution over the missing records.
    fn mean_predicted(&self, fit: &GlmFit, coefficients: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_levels()];
        for (codes, rows) in &self.patterns {
            let p = fit.predict_prob(coefficients, codes, &[]);
            for (a, v) in acc.iter_mut().zip(&p) {
                *a += v * rows.len() as f64;
            }
        }
        acc.iter().map(|a| a / self.n_mis as f64).collect()
    }

    /// Draws every missing cell from the model and returns the completed data.
    fn fill(&self, fit: &GlmFit, coefficients: &[f64], offset: &[f64], rng: &mut StreamRng) -> Result<Dataset> {
        let mut column = self.ds.column(self.target).to_vec();
        for (codes, rows) in &self.patterns {
            let probs = fit.predict_prob(coefficients, codes, offset);
            for &row in rows {
                column[row] = Some(sample_level(&probs, rng));
            }
        }
        self.ds.with_column(self.target, column)
    }

    fn check_population(&self, pop: &PopulationDistribution) -> Result<()> {
        if pop.target != self.spec.outcome {
            return Err(Error::InvalidInput(format!(
                "population distribution is for `{}`, not `{}`",
                pop.target, self.spec.outcome
            )));
        }
        if pop.n_levels() != self.n_levels() {
            return Err(Error::InvalidInput(format!(
                "population distribution has {} levels, `{}` has {}",
                pop.n_levels(),
                self.spec.outcome,
                self.n_levels()
            )));
        }
        Ok(())
    }
}

fn sample_level(probs: &[f64], rng: &mut StreamRng) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return j as u32;
        }
    }
    (probs.len() - 1) as u32
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Draws a distribution from independent normal approximations
/// `N(p_j, p_j(1 − p_j)/n)`. Two levels draw only level 1; more levels draw
/// each level, clamp, and renormalize.
fn draw_distribution(p: &[f64], n: f64, rng: &mut StreamRng) -> Vec<f64> {
    let mut one = |pj: f64| clamp_prob(pj + (pj * (1.0 - pj) / n).sqrt() * rng.sample::<f64, _>(StandardNormal));
    if p.len() == 2 {
        let p1 = one(p[1]);
        return vec![1.0 - p1, p1];
    }
    let raw: Vec<f64> = p.iter().map(|&pj| one(pj)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn run_parallel<F>(m: usize, f: F) -> Result<Vec<(Dataset, ImputationDiagnostics)>>
where
    F: Fn(usize) -> Result<(Dataset, ImputationDiagnostics)> + Sync,
{
    if m == 0 {
        return Err(Error::InvalidInput("number of imputations must be at least 1".into()));
    }
    (0..m).into_par_iter().map(|i| f(i).map_err(|e| e.in_imputation(i + 1))).collect()
}

fn split(results: Vec<(Dataset, ImputationDiagnostics)>) -> (Vec<Dataset>, Vec<ImputationDiagnostics>) {
    results.into_iter().unzip()
}

/// Standard MI under MAR.
pub fn impute_standard(ds: &Dataset, spec: &DesignSpec, m: usize, seed: u64) -> Result<ImputationResult> {
    let pr = Problem::new(ds, spec)?;
    let results = run_parallel(m, |i| {
        let mut rng = substream(seed, &[i as u64]);
        let theta = pr.fit.draw(&mut rng)?.coefficients;
        let completed = pr.fill(&pr.fit, &theta, &[], &mut rng)?;
        let diag = ImputationDiagnostics { index: i + 1, theta_dot: theta.clone(), theta_tilde: theta, ..Default::default() };
        Ok((completed, diag))
    })?;
    let (imputations, diagnostics) = split(results);
    Ok(ImputationResult { method: Method::StandardMi, target: spec.outcome.clone(), imputations, diagnostics, notes: vec![] })
}

/// Options for calibrated MI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedOptions {
    /// Draw θ̃, θ̇ and the proportions; when false, all are held at their
    /// point estimates.
    pub propagate_uncertainty: bool,
}

impl Default for CalibratedOptions {
    fn default() -> Self {
        CalibratedOptions { propagate_uncertainty: true }
    }
}

/// Calibrated-δ MI.
///
/// Per imputation: draw θ̃ and the proportions, solve for δ, draw θ̇ from the
/// complete-record fit and impute with δ added to the intercept(s). The
/// offset applies to the records being imputed only; the complete-record
/// likelihood carries no offset, so the refit equals the first fit.
pub fn impute_calibrated(
    ds: &Dataset,
    spec: &DesignSpec,
    m: usize,
    pop: &PopulationDistribution,
    options: &CalibratedOptions,
    seed: u64,
) -> Result<ImputationResult> {
    let pr = Problem::new(ds, spec)?;
    pr.check_population(pop)?;
    let n = ds.n_rows() as f64;
    let p_obs_hat = pr.observed_distribution();
    let p_r_hat = pr.p_observed();
    let levels = pr.level_names();
    let draw = options.propagate_uncertainty;
    let results = run_parallel(m, |i| {
        let mut rng = substream(seed, &[i as u64]);
        let theta_tilde = if draw { pr.fit.draw(&mut rng)?.coefficients } else { pr.fit.coefficients.clone() };
        let p_r = if draw {
            clamp_prob(p_r_hat + (p_r_hat * (1.0 - p_r_hat) / n).sqrt() * rng.sample::<f64, _>(StandardNormal))
        } else {
            p_r_hat
        };
        let p_obs = if draw { draw_distribution(&p_obs_hat, n, &mut rng) } else { p_obs_hat.clone() };
        let p_pop = match pop.source {
            PopulationSource::Estimated { n_ex } if draw => draw_distribution(&pop.proportions, n_ex as f64, &mut rng),
            _ => pop.proportions.clone(),
        };
        let target = CalibrationTarget::new(levels.clone(), p_pop.clone(), p_obs.clone(), p_r)?;
        let adj = solve_delta(&target, &pr.profiles(&pr.fit, &theta_tilde))?;
        let theta_dot = if draw { pr.fit.draw(&mut rng)?.coefficients } else { pr.fit.coefficients.clone() };
        let completed = pr.fill(&pr.fit, &theta_dot, &adj.offsets, &mut rng)?;
        let diag = ImputationDiagnostics {
            index: i + 1,
            theta_tilde,
            theta_dot,
            delta: Some(adj.offsets),
            solver_iterations: Some(adj.iterations),
            p_observed: Some(p_r),
            p_target_observed: Some(p_obs),
            p_population: Some(p_pop),
            weights: None,
        };
        Ok((completed, diag))
    })?;
    let (imputations, diagnostics) = split(results);
    let mut notes = Vec::new();
    if pr.n_levels() > 2 && draw {
        notes.push("categorical proportions drawn level-wise and renormalized".to_string());
    }
    if !draw {
        notes.push("expectation level: no parameter or proportion draws".to_string());
    }
    Ok(ImputationResult { method: Method::CalibratedMi, target: spec.outcome.clone(), imputations, diagnostics, notes })
}

/// Distribution the missing records need, `(p_pop·n − p_obs·n_obs) / n_mis`.
fn required_distribution(pr: &Problem<'_>, pop: &PopulationDistribution) -> Result<Vec<f64>> {
    CalibrationTarget::new(pr.level_names(), pop.proportions.clone(), pr.observed_distribution(), pr.p_observed())?
        .required_missing_dist()
}

/// Case weight per target level given required and reference distributions.
fn level_weights(pr: &Problem<'_>, required: &[f64], reference: &[f64]) -> Result<Vec<f64>> {
    let counts = pr.ds.level_counts(pr.target);
    required
        .iter()
        .zip(reference)
        .enumerate()
        .map(|(j, (req, refp))| {
            if counts[j] == 0 && *req > 0.0 {
                return Err(Error::Degenerate(format!(
                    "level `{}` is never observed but needs proportion {req}",
                    pr.ds.variable(pr.target).levels[j]
                )));
            }
            Ok(if *refp > 0.0 { req / refp } else { 0.0 })
        })
        .collect()
}

/// Weighted MI: the imputation model is refitted with case weight `w_j` on
/// every complete record whose target is level `j`.
pub fn impute_weighted(
    ds: &Dataset,
    spec: &DesignSpec,
    m: usize,
    pop: &PopulationDistribution,
    mode: WeightMode,
    seed: u64,
) -> Result<ImputationResult> {
    let pr = Problem::new(ds, spec)?;
    pr.check_population(pop)?;
    let required = required_distribution(&pr, pop)?;
    let target_col = ds.column(pr.target);
    let row_weights = |w: &[f64]| -> Vec<f64> {
        target_col.iter().map(|c| c.map(|j| w[j as usize]).unwrap_or(0.0)).collect()
    };
    let weighted_fit = |w: &[f64]| -> Result<GlmFit> {
        let rw = row_weights(w);
        let rows: Vec<bool> = pr.observed.iter().zip(&rw).map(|(o, w)| *o && *w > 0.0).collect();
        glm::fit(ds, spec, &FitOptions { rows: Some(&rows), weights: Some(&rw), ..FitOptions::default() })
    };
    let marginal = match mode {
        WeightMode::Marginal => {
            let w = level_weights(&pr, &required, &pr.observed_distribution())?;
            let fit = weighted_fit(&w)?;
            Some((w, fit))
        }
        WeightMode::Conditional => None,
    };
    let results = run_parallel(m, |i| {
        let mut rng = substream(seed, &[i as u64]);
        let (weights, theta_tilde, fit) = match &marginal {
            Some((w, fit)) => (w.clone(), None, fit.clone()),
            None => {
                let tilde = pr.fit.draw(&mut rng)?.coefficients;
                let pred = pr.mean_predicted(&pr.fit, &tilde);
                let w = level_weights(&pr, &required, &pred)?;
                let fit = weighted_fit(&w)?;
                (w, Some(tilde), fit)
            }
        };
        let theta = fit.draw(&mut rng)?.coefficients;
        let completed = pr.fill(&fit, &theta, &[], &mut rng)?;
        let diag = ImputationDiagnostics {
            index: i + 1,
            theta_tilde: theta_tilde.unwrap_or_else(|| theta.clone()),
            theta_dot: theta,
            weights: Some(weights),
            ..Default::default()
        };
        Ok((completed, diag))
    })?;
    let (imputations, diagnostics) = split(results);
    let method = match mode {
        WeightMode::Marginal => Method::MarginalWeightedMi,
        WeightMode::Conditional => Method::ConditionalWeightedMi,
    };
    Ok(ImputationResult {
        method,
        target: spec.outcome.clone(),
        imputations,
        diagnostics,
        notes: vec!["weighted imputation model; pooled variances are not adjusted for weighting".to_string()],
    })
}

/// Dispatches an MI method.
pub fn impute(
    ds: &Dataset,
    spec: &DesignSpec,
    method: &MethodSpec,
    pop: Option<&PopulationDistribution>,
    seed: u64,
) -> Result<ImputationResult> {
    let need_pop = || {
        pop.ok_or_else(|| Error::Config(format!("method `{}` needs a population distribution", method.method)))
    };
    match method.method {
        Method::StandardMi => impute_standard(ds, spec, method.m, seed),
        Method::CalibratedMi => impute_calibrated(
            ds,
            spec,
            method.m,
            need_pop()?,
            &CalibratedOptions { propagate_uncertainty: method.propagate_uncertainty },
            seed,
        ),
        Method::MarginalWeightedMi => impute_weighted(ds, spec, method.m, need_pop()?, WeightMode::Marginal, seed),
        Method::ConditionalWeightedMi => {
            impute_weighted(ds, spec, method.m, need_pop()?, WeightMode::Conditional, seed)
        }
        Method::FullData | Method::Cra => {
            Err(Error::Config(format!("`{}` is not a multiple-imputation method", method.method)))
        }
    }
}
