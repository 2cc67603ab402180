//! The calibrated-δ adjustment.
//!
//! Partitioning the population distribution over observed and missing
//! records, `p_pop = p_obs·p_r + p_mis·(1 − p_r)`, fixes the distribution the
//! missing records must have, `p_mis = (p_pop − p_obs·p_r) / (1 − p_r)`. The
//! adjustment δ is the intercept shift of the imputation model that makes the
//! model-implied mean probability over the missing records equal `p_mis`.
//!
//! For a binary target this is one monotone equation, solved by bisection.
//! For `J` levels it is a system of `J − 1` equations in the per-equation
//! intercept offsets, solved by damped Newton with an analytic Jacobian and a
//! coordinate-wise bisection fallback.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expit;
use crate::glm::softmax_with_base;

const BRACKET_START: f64 = 20.0;
const BRACKET_LIMIT: f64 = 700.0;
const RESIDUAL_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 100;
const MAX_SWEEPS: usize = 50;

/// Observed-data summaries and the reference distribution the completed data
/// must reproduce.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationTarget {
    pub level_names: Vec<String>,
    /// Population proportion of each level.
    pub population: Vec<f64>,
    /// Distribution of the target among complete records.
    pub observed: Vec<f64>,
    /// Probability that a record's target is observed.
    pub p_observed: f64,
}

impl CalibrationTarget {
    pub fn new(level_names: Vec<String>, population: Vec<f64>, observed: Vec<f64>, p_observed: f64) -> Result<Self> {
        let j = level_names.len();
        if j < 2 || population.len() != j || observed.len() != j {
            return Err(Error::InvalidInput("calibration target levels do not line up".into()));
        }
        if !(p_observed > 0.0 && p_observed < 1.0) {
            return Err(Error::InvalidInput(format!("observation probability {p_observed} is not in (0, 1)")));
        }
        Ok(CalibrationTarget { level_names, population, observed, p_observed })
    }

    /// Binary target given `P(x = 1)` in the population and among observed.
    pub fn binary(p_pop: f64, p_obs: f64, p_observed: f64) -> Result<Self> {
        Self::new(vec!["0".into(), "1".into()], vec![1.0 - p_pop, p_pop], vec![1.0 - p_obs, p_obs], p_observed)
    }

    pub fn n_levels(&self) -> usize {
        self.level_names.len()
    }

    /// Distribution the missing records must have for the completed data to
    /// match the population.
    pub fn required_missing_dist(&self) -> Result<Vec<f64>> {
        let pr = self.p_observed;
        let req: Vec<f64> = self
            .population
            .iter()
            .zip(&self.observed)
            .map(|(pop, obs)| (pop - obs * pr) / (1.0 - pr))
            .collect();
        for (name, &value) in self.level_names.iter().zip(&req) {
            if !(-1e-12..=1.0 + 1e-12).contains(&value) || !value.is_finite() {
                return Err(Error::Infeasible { level: name.clone(), value });
            }
        }
        Ok(req.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    fn interior_requirement(&self) -> Result<Vec<f64>> {
        let req = self.required_missing_dist()?;
        if let Some((name, &value)) = self.level_names.iter().zip(&req).find(|(_, &v)| v <= 0.0 || v >= 1.0) {
            return Err(Error::Infeasible { level: name.clone(), value });
        }
        Ok(req)
    }
}

/// Linear predictors of the non-base levels for one missing record (or a
/// pattern of identical records, with `weight` the count).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinpredProfile {
    pub linpred: Vec<f64>,
    pub weight: f64,
}

impl LinpredProfile {
    pub fn new(linpred: Vec<f64>, weight: f64) -> Self {
        LinpredProfile { linpred, weight }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Bisection,
    Newton,
    CoordinateBisection,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaAdjustment {
    /// Intercept offset per non-base level.
    pub offsets: Vec<f64>,
    pub iterations: usize,
    /// ∞-norm of the calibration residual at the returned offsets.
    pub residual: f64,
    pub method: SolverMethod,
}

/// Mean model probability of each level over the profiles, with `delta`
/// added to each equation.
pub fn mean_probabilities(profiles: &[LinpredProfile], delta: &[f64]) -> Vec<f64> {
    let j = delta.len() + 1;
    let mut acc = vec![0.0; j];
    let mut total = 0.0;
    let mut eta = vec![0.0; j - 1];
    for p in profiles {
        for e in 0..j - 1 {
            eta[e] = p.linpred[e] + delta[e];
        }
        let probs = softmax_with_base(&eta);
        for (a, pr) in acc.iter_mut().zip(&probs) {
            *a += p.weight * pr;
        }
        total += p.weight;
    }
    acc.iter().map(|a| a / total).collect()
}

/// Completed-data calibration residual per level:
/// `p_pop − [p_r·p_obs + (1 − p_r)·mean p(δ)]`.
pub fn calibration_residual(target: &CalibrationTarget, profiles: &[LinpredProfile], delta: &[f64]) -> Vec<f64> {
    let pr = target.p_observed;
    mean_probabilities(profiles, delta)
        .iter()
        .zip(target.population.iter().zip(&target.observed))
        .map(|(m, (pop, obs))| pop - (pr * obs + (1.0 - pr) * m))
        .collect()
}

fn check_profiles(profiles: &[LinpredProfile], equations: usize) -> Result<()> {
    if profiles.is_empty() {
        return Err(Error::InvalidInput("no missing records to calibrate".into()));
    }
    if profiles.iter().any(|p| p.linpred.len() != equations || !(p.weight > 0.0)) {
        return Err(Error::InvalidInput("malformed missing-record profile".into()));
    }
    Ok(())
}

/// Scalar δ for a binary target by interval bisection.
pub fn solve_delta_binary(target: &CalibrationTarget, profiles: &[LinpredProfile]) -> Result<DeltaAdjustment> {
    if target.n_levels() != 2 {
        return Err(Error::InvalidInput("binary solver needs a two-level target".into()));
    }
    check_profiles(profiles, 1)?;
    let required = target.interior_requirement()?[1];
    let total: f64 = profiles.iter().map(|p| p.weight).sum();
    let gap = |d: f64| profiles.iter().map(|p| p.weight * expit(p.linpred[0] + d)).sum::<f64>() / total - required;

    let (mut lo, mut hi) = (-BRACKET_START, BRACKET_START);
    let mut trace = Vec::new();
    while gap(lo) > 0.0 || gap(hi) < 0.0 {
        trace.push(gap(lo).abs().max(gap(hi).abs()));
        if hi >= BRACKET_LIMIT {
            return Err(Error::Solver { message: "bisection bracket exhausted".into(), trace });
        }
        lo = (2.0 * lo).max(-BRACKET_LIMIT);
        hi = (2.0 * hi).min(BRACKET_LIMIT);
    }
    let mut iterations = 0;
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..400 {
        iterations += 1;
        mid = 0.5 * (lo + hi);
        let g = gap(mid);
        if g == 0.0 {
            break;
        }
        if g < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 4.0 * f64::EPSILON * mid.abs().max(1.0) {
            break;
        }
    }
    let residual = calibration_residual(target, profiles, &[mid]).iter().fold(0.0f64, |m, r| m.max(r.abs()));
    if residual > RESIDUAL_TOL {
        trace.push(residual);
        return Err(Error::Solver { message: "bisection did not reach the residual tolerance".into(), trace });
    }
    Ok(DeltaAdjustment { offsets: vec![mid], iterations, residual, method: SolverMethod::Bisection })
}

/// Offsets for a `J`-level target: damped Newton from δ = 0, falling back to
/// coordinate-wise bisection sweeps.
pub fn solve_delta_categorical(target: &CalibrationTarget, profiles: &[LinpredProfile]) -> Result<DeltaAdjustment> {
    let eqs = target.n_levels() - 1;
    check_profiles(profiles, eqs)?;
    target.interior_requirement()?;
    let residual = |d: &[f64]| calibration_residual(target, profiles, d)[1..].to_vec();
    let norm = |r: &[f64]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut trace = Vec::new();

    // Newton on F(δ) restricted to the non-base levels.
    let mut delta = vec![0.0; eqs];
    let mut f = residual(&delta);
    let mut iterations = 0;
    let mut newton_ok = false;
    while iterations < NEWTON_MAX_ITER {
        let fnorm = norm(&f);
        trace.push(fnorm);
        if fnorm <= RESIDUAL_TOL * 1e-2 {
            newton_ok = true;
            break;
        }
        iterations += 1;
        let jac = jacobian(target, profiles, &delta);
        let Some(step) = jac.lu().solve(&DVector::from_iterator(eqs, f.iter().map(|v| -v))) else {
            break;
        };
        let merit = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
        let base = merit(&f);
        let mut scale = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = delta.iter().zip(step.iter()).map(|(d, s)| d + scale * s).collect();
            let ft = residual(&trial);
            if ft.iter().all(|v| v.is_finite()) && merit(&ft) < base {
                delta = trial;
                f = ft;
                moved = true;
                break;
            }
            scale *= 0.5;
        }
        if !moved {
            // stalled at rounding level; accept if within tolerance
            newton_ok = fnorm <= RESIDUAL_TOL;
            break;
        }
    }
    if newton_ok && delta.iter().all(|d| d.is_finite()) {
        let residual = norm(&calibration_residual(target, profiles, &delta));
        if residual <= RESIDUAL_TOL {
            return Ok(DeltaAdjustment { offsets: delta, iterations, residual, method: SolverMethod::Newton });
        }
    }

    // Fallback: Gauss–Seidel sweeps, each coordinate solved by bisection.
    let mut delta = vec![0.0; eqs];
    for sweep in 1..=MAX_SWEEPS {
        for e in 0..eqs {
            let fe = |v: f64| {
                let mut d = delta.clone();
                d[e] = v;
                calibration_residual(target, profiles, &d)[e + 1]
            };
            // F_e decreases in δ_e
            let (mut lo, mut hi) = (-BRACKET_START, BRACKET_START);
            while fe(lo) < 0.0 || fe(hi) > 0.0 {
                if hi >= BRACKET_LIMIT {
                    return Err(Error::Solver { message: "coordinate bracket exhausted".into(), trace });
                }
                lo = (2.0 * lo).max(-BRACKET_LIMIT);
                hi = (2.0 * hi).min(BRACKET_LIMIT);
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if fe(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 4.0 * f64::EPSILON * mid.abs().max(1.0) {
                    break;
                }
            }
            delta[e] = 0.5 * (lo + hi);
        }
        let r = norm(&calibration_residual(target, profiles, &delta));
        trace.push(r);
        if r <= RESIDUAL_TOL {
            return Ok(DeltaAdjustment {
                offsets: delta,
                iterations: iterations + sweep,
                residual: r,
                method: SolverMethod::CoordinateBisection,
            });
        }
    }
    Err(Error::Solver { message: "calibration system did not converge".into(), trace })
}

/// Dispatches on the number of target levels.
pub fn solve_delta(target: &CalibrationTarget, profiles: &[LinpredProfile]) -> Result<DeltaAdjustment> {
    if target.n_levels() == 2 {
        solve_delta_binary(target, profiles)
    } else {
        solve_delta_categorical(target, profiles)
    }
}

/// ∂F_j/∂δ_k = −(1 − p_r) · mean π_j (1{j=k} − π_k), non-base levels only.
fn jacobian(target: &CalibrationTarget, profiles: &[LinpredProfile], delta: &[f64]) -> DMatrix<f64> {
    let eqs = delta.len();
    let mut jac = DMatrix::zeros(eqs, eqs);
    let mut total = 0.0;
    let mut eta = vec![0.0; eqs];
    for p in profiles {
        for e in 0..eqs {
            eta[e] = p.linpred[e] + delta[e];
        }
        let pi = softmax_with_base(&eta);
        for j in 0..eqs {
            for k in 0..eqs {
                let d = if j == k { pi[j + 1] } else { 0.0 } - pi[j + 1] * pi[k + 1];
                jac[(j, k)] += p.weight * d;
            }
        }
        total += p.weight;
    }
    jac * (-(1.0 - target.p_observed) / total)
}
