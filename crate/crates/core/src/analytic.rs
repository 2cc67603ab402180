//! Expectation-level oracle for a binary covariate `x` (possibly missing)
//! and a binary outcome `y`.
//!
//! Everything here is exact arithmetic on the four population cell
//! probabilities: the selection model splits each cell into an observed and a
//! missing part, each method composes a completed-data table from them, and
//! the analysis-model coefficients are read off as log odds.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::deltasolve::{solve_delta_binary, CalibrationTarget, LinpredProfile};
use crate::error::{Error, Result};
use crate::expit;
use crate::selection::{Mechanism, SelectionModel};

/// Population cell probabilities `cells[x][y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PopulationTable {
    pub cells: [[f64; 2]; 2],
}

impl PopulationTable {
    pub fn new(cells: [[f64; 2]; 2]) -> Result<Self> {
        let sum: f64 = cells.iter().flatten().sum();
        if cells.iter().flatten().any(|&c| !(c > 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput("cell probabilities must be positive and sum to 1".into()));
        }
        Ok(PopulationTable { cells })
    }

    /// `P(x = 1) = p_x` and `logit P(y = 1 | x) = β0 + βx x`.
    pub fn from_generators(p_x: f64, beta0: f64, beta_x: f64) -> Result<Self> {
        if !(p_x > 0.0 && p_x < 1.0) {
            return Err(Error::InvalidInput(format!("p_x = {p_x} is not in (0, 1)")));
        }
        let mut cells = [[0.0; 2]; 2];
        for (j, px) in [(0usize, 1.0 - p_x), (1, p_x)] {
            let py = expit(beta0 + beta_x * j as f64);
            cells[j] = [px * (1.0 - py), px * py];
        }
        Self::new(cells)
    }

    /// The reference population: `p_x = 0.7`, `β0 = ln 0.5`, `βx = ln 1.5`.
    pub fn reference() -> Self {
        Self::from_generators(0.7, 0.5f64.ln(), 1.5f64.ln()).expect("valid generators")
    }

    pub fn p_x(&self) -> f64 {
        self.cells[1][0] + self.cells[1][1]
    }

    /// Analysis-model coefficients `(β0, βx)`.
    pub fn betas(&self) -> (f64, f64) {
        analysis_coefficients(&self.cells)
    }

    /// Imputation-model coefficients `(θ0, θy)`.
    pub fn thetas(&self) -> (f64, f64) {
        imputation_coefficients(&self.cells)
    }
}

fn analysis_coefficients(c: &[[f64; 2]; 2]) -> (f64, f64) {
    ((c[0][1] / c[0][0]).ln(), (c[1][1] * c[0][0] / (c[0][1] * c[1][0])).ln())
}

fn imputation_coefficients(c: &[[f64; 2]; 2]) -> (f64, f64) {
    ((c[1][0] / c[0][0]).ln(), (c[1][1] * c[0][0] / (c[1][0] * c[0][1])).ln())
}

/// Observed and missing sub-tables under a selection model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitTable {
    pub observed: [[f64; 2]; 2],
    pub missing: [[f64; 2]; 2],
}

impl SplitTable {
    pub fn new(tab: &PopulationTable, model: &SelectionModel) -> Self {
        let mut observed = [[0.0; 2]; 2];
        let mut missing = [[0.0; 2]; 2];
        for j in 0..2 {
            for k in 0..2 {
                let p = model.observe_prob(j as u32, k as u32);
                observed[j][k] = tab.cells[j][k] * p;
                missing[j][k] = tab.cells[j][k] * (1.0 - p);
            }
        }
        SplitTable { observed, missing }
    }

    pub fn p_observed(&self) -> f64 {
        self.observed.iter().flatten().sum()
    }

    pub fn frac_missing(&self) -> f64 {
        self.missing.iter().flatten().sum()
    }

    /// `P(x = 1)` among observed records.
    pub fn p_x_observed(&self) -> f64 {
        (self.observed[1][0] + self.observed[1][1]) / self.p_observed()
    }

    fn check(&self) -> Result<()> {
        let bad = |t: &[[f64; 2]; 2]| t.iter().flatten().any(|&c| !(c > 0.0) || !c.is_finite());
        if bad(&self.observed) {
            return Err(Error::Degenerate("observed sub-table has an empty cell".into()));
        }
        if bad(&self.missing) {
            return Err(Error::Degenerate("missing sub-table has an empty cell".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThetaIdentities {
    pub theta0_obs: f64,
    pub thetay_obs: f64,
    pub theta0_mis: f64,
    pub thetay_mis: f64,
}

/// Imputation-model coefficients among observed and among missing records.
pub fn theta_identities(tab: &PopulationTable, model: &SelectionModel) -> Result<ThetaIdentities> {
    let split = SplitTable::new(tab, model);
    split.check()?;
    let (theta0_obs, thetay_obs) = imputation_coefficients(&split.observed);
    let (theta0_mis, thetay_mis) = imputation_coefficients(&split.missing);
    Ok(ThetaIdentities { theta0_obs, thetay_obs, theta0_mis, thetay_mis })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalyticMethod {
    Cra,
    StandardMi,
    MarginalWeightedMi,
    ConditionalWeightedMi,
    CalibratedMi,
}

impl AnalyticMethod {
    pub const ALL: [AnalyticMethod; 5] = [
        AnalyticMethod::Cra,
        AnalyticMethod::StandardMi,
        AnalyticMethod::MarginalWeightedMi,
        AnalyticMethod::ConditionalWeightedMi,
        AnalyticMethod::CalibratedMi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnalyticMethod::Cra => "cra",
            AnalyticMethod::StandardMi => "standard-mi",
            AnalyticMethod::MarginalWeightedMi => "marginal-weighted-mi",
            AnalyticMethod::ConditionalWeightedMi => "conditional-weighted-mi",
            AnalyticMethod::CalibratedMi => "calibrated-mi",
        }
    }
}

impl fmt::Display for AnalyticMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnalyticMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        Ok(match s.as_str() {
            "cra" => AnalyticMethod::Cra,
            "standard-mi" | "standard" | "mi" => AnalyticMethod::StandardMi,
            "marginal-weighted-mi" | "marginal-weighted" | "marginal" => AnalyticMethod::MarginalWeightedMi,
            "conditional-weighted-mi" | "conditional-weighted" | "conditional" => AnalyticMethod::ConditionalWeightedMi,
            "calibrated-mi" | "calibrated" => AnalyticMethod::CalibratedMi,
            _ => return Err(Error::Config(format!("unknown analytic method `{s}`"))),
        })
    }
}

/// Shift added to the observed-data imputation intercept by each MI method.
fn intercept_shift(tab: &PopulationTable, split: &SplitTable, method: AnalyticMethod) -> Result<f64> {
    let (t0, ty) = imputation_coefficients(&split.observed);
    let p_r = split.p_observed();
    let target = CalibrationTarget::binary(tab.p_x(), split.p_x_observed(), p_r)?;
    let mis_y = [split.missing[0][0] + split.missing[1][0], split.missing[0][1] + split.missing[1][1]];
    Ok(match method {
        AnalyticMethod::Cra | AnalyticMethod::StandardMi => 0.0,
        AnalyticMethod::CalibratedMi => {
            let profiles = vec![LinpredProfile::new(vec![t0], mis_y[0]), LinpredProfile::new(vec![t0 + ty], mis_y[1])];
            solve_delta_binary(&target, &profiles)?.offsets[0]
        }
        AnalyticMethod::MarginalWeightedMi => {
            let req = target.required_missing_dist()?;
            let w = |j: usize| req[j] / target.observed[j];
            (w(1) / w(0)).ln()
        }
        AnalyticMethod::ConditionalWeightedMi => {
            let req = target.required_missing_dist()?;
            let p1 = (mis_y[0] * expit(t0) + mis_y[1] * expit(t0 + ty)) / (mis_y[0] + mis_y[1]);
            let pred = [1.0 - p1, p1];
            let w = |j: usize| req[j] / pred[j];
            (w(1) / w(0)).ln()
        }
    })
}

/// Expected completed-data table for a method.
pub fn completed_table(tab: &PopulationTable, model: &SelectionModel, method: AnalyticMethod) -> Result<[[f64; 2]; 2]> {
    let split = SplitTable::new(tab, model);
    split.check()?;
    if method == AnalyticMethod::Cra {
        return Ok(split.observed);
    }
    let (t0, ty) = imputation_coefficients(&split.observed);
    let shift = intercept_shift(tab, &split, method)?;
    let mut c = split.observed;
    for k in 0..2 {
        let m = split.missing[0][k] + split.missing[1][k];
        let q = expit(t0 + shift + ty * k as f64);
        c[1][k] += m * q;
        c[0][k] += m * (1.0 - q);
    }
    Ok(c)
}

/// `(β̂0 − β0, β̂x − βx)` at expectation level.
pub fn analytic_bias(tab: &PopulationTable, model: &SelectionModel, method: AnalyticMethod) -> Result<(f64, f64)> {
    let c = completed_table(tab, model, method)?;
    let (b0, bx) = analysis_coefficients(&c);
    let (t0, tx) = tab.betas();
    Ok((b0 - t0, bx - tx))
}

/// Selection-parameter grid. Each mechanism varies its two free parameters
/// (M1 only α0; M4 fixes α0 and varies αx, αy).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    pub m4_alpha0: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { lo: -3.0, hi: 3.0, points: 61, m4_alpha0: 0.5 }
    }
}

impl GridSpec {
    /// Parses `lo:hi:points`.
    pub fn parse(spec: &str) -> Result<Self> {
        let parts: Vec<&str> = spec.split(':').collect();
        let bad = || Error::Config(format!("grid must be `lo:hi:points`, got `{spec}`"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let points: usize = parts[2].trim().parse().map_err(|_| bad())?;
        if !(lo < hi) || points < 2 {
            return Err(bad());
        }
        Ok(GridSpec { lo, hi, points, ..GridSpec::default() })
    }

    pub fn values(&self) -> Vec<f64> {
        let step = (self.hi - self.lo) / (self.points - 1) as f64;
        (0..self.points).map(|i| if i + 1 == self.points { self.hi } else { self.lo + step * i as f64 }).collect()
    }

    pub fn models(&self, mechanism: Mechanism) -> Vec<SelectionModel> {
        let v = self.values();
        let mut out = Vec::new();
        match mechanism {
            Mechanism::M1 => out.extend(v.iter().map(|&a0| SelectionModel::mcar(a0))),
            _ => {
                for &a in &v {
                    for &b in &v {
                        let (a0, ax, ay) = match mechanism {
                            Mechanism::M2 => (a, 0.0, b),
                            Mechanism::M3 => (a, b, 0.0),
                            _ => (self.m4_alpha0, a, b),
                        };
                        out.push(SelectionModel::new(mechanism, a0, ax, ay).expect("finite grid values"));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasPoint {
    pub alpha0: f64,
    pub alpha_x: f64,
    pub alpha_y: f64,
    pub bias_b0: f64,
    pub bias_bx: f64,
    pub frac_missing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasGridResult {
    pub method: AnalyticMethod,
    pub mechanism: Mechanism,
    pub points: Vec<BiasPoint>,
}

impl BiasGridResult {
    /// Largest `(|bias β̂0|, |bias β̂x|)` over the grid.
    pub fn max_abs_bias(&self) -> (f64, f64) {
        self.points
            .iter()
            .fold((0.0f64, 0.0f64), |(a, b), p| (a.max(p.bias_b0.abs()), b.max(p.bias_bx.abs())))
    }

    /// Missing fractions at the smallest and largest grid corner.
    pub fn frac_missing_range(&self) -> (f64, f64) {
        self.points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.frac_missing), hi.max(p.frac_missing)))
    }

    pub fn write_csv_to<W: Write>(&self, writer: W, header: bool) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        let err = |e: csv::Error| Error::InvalidInput(format!("writing bias grid: {e}"));
        if header {
            w.write_record(["method", "alpha0", "alpha_x", "alpha_y", "bias_b0", "bias_bx", "frac_missing"])
                .map_err(err)?;
        }
        for p in &self.points {
            w.write_record([
                self.method.name().to_string(),
                p.alpha0.to_string(),
                p.alpha_x.to_string(),
                p.alpha_y.to_string(),
                p.bias_b0.to_string(),
                p.bias_bx.to_string(),
                p.frac_missing.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::InvalidInput(format!("writing bias grid: {e}")))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(std::io::BufWriter::new(file), true)
    }
}

/// Evaluates `analytic_bias` at every grid point in parallel.
pub fn bias_grid(
    tab: &PopulationTable,
    mechanism: Mechanism,
    method: AnalyticMethod,
    grid: &GridSpec,
) -> Result<BiasGridResult> {
    let points = grid
        .models(mechanism)
        .par_iter()
        .map(|m| {
            let (bias_b0, bias_bx) = analytic_bias(tab, m, method)?;
            Ok(BiasPoint {
                alpha0: m.alpha0,
                alpha_x: m.alpha_x,
                alpha_y: m.alpha_y,
                bias_b0,
                bias_bx,
                frac_missing: SplitTable::new(tab, m).frac_missing(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BiasGridResult { method, mechanism, points })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn generators_round_trip() {
        let tab = PopulationTable::reference();
        let (b0, bx) = tab.betas();
        assert!(close(b0, 0.5f64.ln(), 1e-14));
        assert!(close(bx, 1.5f64.ln(), 1e-14));
        assert!(close(tab.p_x(), 0.7, 1e-15));
    }

    #[test]
    fn m3_theta_example() {
        let tab = PopulationTable::reference();
        let m = SelectionModel::reference(Mechanism::M3);
        let split = SplitTable::new(&tab, &m);
        assert!(close(split.observed[1][0], 0.18504, 5e-5), "{}", split.observed[1][0]);
        assert!(close(split.observed[0][0], 0.15882, 5e-5), "{}", split.observed[0][0]);
        let t = theta_identities(&tab, &m).unwrap();
        assert!(close(t.theta0_obs, 0.15278, 2e-4), "{}", t.theta0_obs);
        assert!(close(t.theta0_mis - t.theta0_obs, 1.5, 1e-10));
        assert!(close(t.thetay_obs, t.thetay_mis, 1e-12));
    }

    #[test]
    fn mcar_leaves_thetas_unchanged() {
        let tab = PopulationTable::reference();
        let (t0, ty) = tab.thetas();
        for a0 in [-2.0, 0.2, 1.7] {
            let t = theta_identities(&tab, &SelectionModel::mcar(a0)).unwrap();
            for v in [t.theta0_obs, t.theta0_mis] {
                assert!(close(v, t0, 1e-12));
            }
            for v in [t.thetay_obs, t.thetay_mis] {
                assert!(close(v, ty, 1e-12));
            }
        }
    }

    #[test]
    fn m4_slope_identity() {
        let tab = PopulationTable::reference();
        let t = theta_identities(&tab, &SelectionModel::reference(Mechanism::M4)).unwrap();
        assert!(close(t.thetay_mis - t.thetay_obs, 0.0, 1e-12));
        assert!(close(t.theta0_mis - t.theta0_obs, 1.5, 1e-10));
    }

    #[test]
    fn degenerate_split_is_an_error() {
        let tab = PopulationTable::reference();
        let m = SelectionModel::mcar(800.0);
        assert!(matches!(theta_identities(&tab, &m), Err(Error::Degenerate(_))));
    }

    #[test]
    fn cra_m3_and_standard_m2_are_unbiased() {
        let tab = PopulationTable::reference();
        let (a, b) = analytic_bias(&tab, &SelectionModel::reference(Mechanism::M3), AnalyticMethod::Cra).unwrap();
        assert!(a.abs() < 1e-12 && b.abs() < 1e-12);
        let (a, b) = analytic_bias(&tab, &SelectionModel::reference(Mechanism::M2), AnalyticMethod::StandardMi).unwrap();
        assert!(a.abs() < 1e-12 && b.abs() < 1e-12);
    }

    #[test]
    fn standard_mi_m3_biases_intercept_only() {
        let tab = PopulationTable::reference();
        let (a, b) = analytic_bias(&tab, &SelectionModel::reference(Mechanism::M3), AnalyticMethod::StandardMi).unwrap();
        assert!(b.abs() < 1e-12);
        assert!(close(a, 0.0494, 5e-4), "{a}");
    }

    #[test]
    fn calibrated_is_unbiased_under_m4() {
        let tab = PopulationTable::reference();
        let (a, b) = analytic_bias(&tab, &SelectionModel::reference(Mechanism::M4), AnalyticMethod::CalibratedMi).unwrap();
        assert!(a.abs() < 1e-9 && b.abs() < 1e-9);
    }

    #[test]
    fn marginal_weights_recover_population_under_m3() {
        let tab = PopulationTable::reference();
        let m = SelectionModel::reference(Mechanism::M3);
        let c = completed_table(&tab, &m, AnalyticMethod::MarginalWeightedMi).unwrap();
        assert!(close(c[1][0] + c[1][1], 0.7, 1e-12));
    }

    #[test]
    fn grid_shape_and_csv() {
        let tab = PopulationTable::reference();
        let g = GridSpec { points: 5, ..GridSpec::default() };
        assert_eq!(g.values(), vec![-3.0, -1.5, 0.0, 1.5, 3.0]);
        let r = bias_grid(&tab, Mechanism::M3, AnalyticMethod::StandardMi, &g).unwrap();
        assert_eq!(r.points.len(), 25);
        assert!(r.points.iter().all(|p| p.alpha_y == 0.0));
        let mut buf = Vec::new();
        r.write_csv_to(&mut buf, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "method,alpha0,alpha_x,alpha_y,bias_b0,bias_bx,frac_missing");
        assert_eq!(text.lines().count(), 26);
        let m1 = bias_grid(&tab, Mechanism::M1, AnalyticMethod::Cra, &g).unwrap();
        assert_eq!(m1.points.len(), 5);
        assert!(GridSpec::parse("-3:3:61").unwrap() == GridSpec::default());
        assert!(GridSpec::parse("3:-3:61").is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in AnalyticMethod::ALL {
            assert_eq!(m.name().parse::<AnalyticMethod>().unwrap(), m);
        }
    }
}
