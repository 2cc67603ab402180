//! Binary and multinomial logistic regression on categorical designs.
//!
//! Fitting is Newton–Raphson on the full log-likelihood with step halving.
//! Because every covariate is categorical, records are first collapsed into
//! covariate patterns with (weighted) outcome counts; the likelihood over
//! patterns is identical to the record-level likelihood, so large samples
//! cost no more than the number of distinct patterns.
//!
//! Coefficients are laid out equation-major: for each non-base outcome level
//! `e = 1..J` there is a block `[intercept, dummies...]` of the design width.
//! The binary family is the `J = 2` case with a single block.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tabular::Dataset;

const MAX_ITERATIONS: usize = 100;
const MAX_HALVINGS: usize = 30;
const SCORE_TOL: f64 = 1e-8;
const REL_LL_TOL: f64 = 1e-12;
const SEPARATION_BOUND: f64 = 15.0;

/// Outcome on the left, categorical covariates (dummy coded against level 0)
/// on the right; an intercept is always included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DesignSpec {
    pub outcome: String,
    pub covariates: Vec<String>,
}

impl DesignSpec {
    pub fn new<S: Into<String>>(outcome: impl Into<String>, covariates: impl IntoIterator<Item = S>) -> Self {
        DesignSpec { outcome: outcome.into(), covariates: covariates.into_iter().map(Into::into).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Binary,
    Multinomial { levels: usize },
}

impl Family {
    pub fn n_levels(self) -> usize {
        match self {
            Family::Binary => 2,
            Family::Multinomial { levels } => levels,
        }
    }

    pub fn n_equations(self) -> usize {
        self.n_levels() - 1
    }
}

/// Resolved design: variable indices and dummy layout for one dataset schema.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Design {
    pub outcome: usize,
    pub outcome_levels: Vec<String>,
    pub covariates: Vec<usize>,
    covariate_levels: Vec<usize>,
    /// Column names: `_cons`, then `var=level` for each non-base level.
    pub column_names: Vec<String>,
}

impl Design {
    pub fn resolve(ds: &Dataset, spec: &DesignSpec) -> Result<Design> {
        let outcome = ds.index_of(&spec.outcome)?;
        let mut covariates = Vec::with_capacity(spec.covariates.len());
        let mut covariate_levels = Vec::with_capacity(spec.covariates.len());
        let mut column_names = vec!["_cons".to_string()];
        for name in &spec.covariates {
            let idx = ds.index_of(name)?;
            if idx == outcome {
                return Err(Error::InvalidInput(format!("`{name}` is both outcome and covariate")));
            }
            if covariates.contains(&idx) {
                return Err(Error::InvalidInput(format!("covariate `{name}` listed twice")));
            }
            let var = ds.variable(idx);
            covariates.push(idx);
            covariate_levels.push(var.n_levels());
            column_names.extend(var.levels.iter().skip(1).map(|l| format!("{}={l}", var.name)));
        }
        Ok(Design {
            outcome,
            outcome_levels: ds.variable(outcome).levels.clone(),
            covariates,
            covariate_levels,
            column_names,
        })
    }

    pub fn width(&self) -> usize {
        self.column_names.len()
    }

    /// Dummy-coded design row for covariate codes given in design order.
    pub fn encode(&self, codes: &[u32]) -> Vec<f64> {
        let mut x = vec![0.0; self.width()];
        self.encode_into(codes, &mut x);
        x
    }

    fn encode_into(&self, codes: &[u32], x: &mut [f64]) {
        x.iter_mut().for_each(|v| *v = 0.0);
        x[0] = 1.0;
        let mut offset = 1;
        for (&code, &k) in codes.iter().zip(&self.covariate_levels) {
            if code > 0 {
                x[offset + code as usize - 1] = 1.0;
            }
            offset += k - 1;
        }
    }

    /// Covariate codes of one record, or `None` if any is missing.
    pub fn row_codes(&self, ds: &Dataset, row: usize) -> Option<Vec<u32>> {
        self.covariates.iter().map(|&v| ds.cell(row, v)).collect()
    }

    /// Name of the variable a coefficient column belongs to.
    fn column_variable(&self, ds_names: &[String], column: usize) -> String {
        if column == 0 {
            return "intercept".into();
        }
        let mut offset = 1;
        for (i, &k) in self.covariate_levels.iter().enumerate() {
            if column < offset + k - 1 {
                return ds_names[i].clone();
            }
            offset += k - 1;
        }
        unreachable!("column index within design width")
    }
}

/// Weighted outcome counts for one distinct covariate pattern.
#[derive(Debug, Clone)]
pub(crate) struct Pattern {
    pub x: Vec<f64>,
    pub counts: Vec<f64>,
}

impl Pattern {
    fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Options for [`fit`].
#[derive(Debug, Clone, Default)]
pub struct FitOptions<'a> {
    /// Records to include; all when `None`.
    pub rows: Option<&'a [bool]>,
    /// Positive case weights, indexed by dataset row.
    pub weights: Option<&'a [f64]>,
    /// Fixed per-equation intercept offset δ (not estimated).
    pub offset: Option<Vec<f64>>,
    /// Overrides the family implied by the outcome's level count.
    pub family: Option<Family>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Convergence {
    pub iterations: usize,
    pub score_norm: f64,
    pub log_likelihood: f64,
}

/// A fitted (multinomial) logistic model.
#[derive(Debug, Clone, Serialize)]
pub struct GlmFit {
    pub family: Family,
    pub design: Design,
    pub coefficients: Vec<f64>,
    /// Inverse observed (weighted) information at the estimate.
    #[serde(serialize_with = "serialize_matrix")]
    pub covariance: DMatrix<f64>,
    pub fixed_offset: Vec<f64>,
    pub weighted: bool,
    /// Sum of case weights (record count when unweighted).
    pub n_effective: f64,
    pub n_records: usize,
    pub convergence: Convergence,
}

fn serialize_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for i in 0..m.nrows() {
        let row: Vec<f64> = m.row(i).iter().copied().collect();
        seq.serialize_element(&row)?;
    }
    seq.end()
}

/// A coefficient vector drawn from the normal approximation to the posterior.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamDraw {
    pub coefficients: Vec<f64>,
}

/// Fits the model to the selected records by maximum likelihood.
pub fn fit(ds: &Dataset, spec: &DesignSpec, options: &FitOptions<'_>) -> Result<GlmFit> {
    let design = Design::resolve(ds, spec)?;
    let n_levels = ds.variable(design.outcome).n_levels();
    let family = options.family.unwrap_or(if n_levels == 2 {
        Family::Binary
    } else {
        Family::Multinomial { levels: n_levels }
    });
    if family.n_levels() != n_levels {
        return Err(Error::InvalidInput(format!(
            "family expects {} outcome levels, `{}` has {n_levels}",
            family.n_levels(),
            spec.outcome
        )));
    }
    let (patterns, n_records) = collapse(ds, &design, options.rows, options.weights)?;
    let offset = options.offset.clone().unwrap_or_else(|| vec![0.0; family.n_equations()]);
    if offset.len() != family.n_equations() {
        return Err(Error::InvalidInput("offset length must equal the number of equations".into()));
    }
    fit_patterns(design, family, &patterns, offset, options.weights.is_some(), n_records, ds)
}

fn collapse(
    ds: &Dataset,
    design: &Design,
    rows: Option<&[bool]>,
    weights: Option<&[f64]>,
) -> Result<(Vec<Pattern>, usize)> {
    let n = ds.n_rows();
    if rows.is_some_and(|r| r.len() != n) || weights.is_some_and(|w| w.len() != n) {
        return Err(Error::InvalidInput("row mask and weights must have one entry per record".into()));
    }
    let n_levels = ds.variable(design.outcome).n_levels();
    let outcome = ds.column(design.outcome);
    let mut index: HashMap<Vec<u32>, usize> = HashMap::new();
    let mut patterns: Vec<Pattern> = Vec::new();
    let mut n_records = 0;
    for row in 0..n {
        if rows.is_some_and(|r| !r[row]) {
            continue;
        }
        let y = outcome[row].ok_or_else(|| {
            Error::InvalidInput(format!("outcome `{}` is missing in record {}", ds.variable(design.outcome).name, row + 1))
        })?;
        let codes = design
            .row_codes(ds, row)
            .ok_or_else(|| Error::InvalidInput(format!("covariate missing in record {}", row + 1)))?;
        let w = match weights {
            Some(w) => {
                let w = w[row];
                if !(w.is_finite() && w > 0.0) {
                    return Err(Error::InvalidInput(format!("weight {w} in record {} is not positive", row + 1)));
                }
                w
            }
            None => 1.0,
        };
        let slot = match index.get(&codes) {
            Some(&s) => s,
            None => {
                patterns.push(Pattern { x: design.encode(&codes), counts: vec![0.0; n_levels] });
                index.insert(codes, patterns.len() - 1);
                patterns.len() - 1
            }
        };
        patterns[slot].counts[y as usize] += w;
        n_records += 1;
    }
    if n_records == 0 {
        return Err(Error::EmptyInput);
    }
    Ok((patterns, n_records))
}

/// Log-likelihood, score and observed information for either family.
struct Evaluation {
    ll: f64,
    score: DVector<f64>,
    info: DMatrix<f64>,
}

fn evaluate_binary(patterns: &[Pattern], theta: &[f64], offset: f64, want_info: bool) -> Evaluation {
    let p = theta.len();
    let mut ll = 0.0;
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(if want_info { p } else { 0 }, if want_info { p } else { 0 });
    for pat in patterns {
        let eta = offset + dot(&pat.x, theta);
        let (n0, n1) = (pat.counts[0], pat.counts[1]);
        let n = n0 + n1;
        // log expit(eta) and log expit(-eta), stable for large |eta|
        let log_p1 = -softplus(-eta);
        let log_p0 = -softplus(eta);
        ll += n1 * log_p1 + n0 * log_p0;
        let mu = crate::expit(eta);
        let resid = n1 - n * mu;
        let w = n * mu * (1.0 - mu);
        for a in 0..p {
            if pat.x[a] == 0.0 {
                continue;
            }
            score[a] += pat.x[a] * resid;
            if want_info {
                for b in 0..p {
                    info[(a, b)] += w * pat.x[a] * pat.x[b];
                }
            }
        }
    }
    Evaluation { ll, score, info }
}

fn evaluate_multinomial(patterns: &[Pattern], theta: &[f64], offset: &[f64], want_info: bool) -> Evaluation {
    let eqs = offset.len();
    let p = theta.len() / eqs;
    let k = theta.len();
    let mut ll = 0.0;
    let mut score = DVector::zeros(k);
    let mut info = DMatrix::zeros(if want_info { k } else { 0 }, if want_info { k } else { 0 });
    let mut eta = vec![0.0; eqs + 1];
    let mut prob = vec![0.0; eqs + 1];
    for pat in patterns {
        for e in 0..eqs {
            eta[e + 1] = offset[e] + dot(&pat.x, &theta[e * p..(e + 1) * p]);
        }
        let lse = log_sum_exp(&eta);
        for j in 0..=eqs {
            prob[j] = (eta[j] - lse).exp();
            ll += pat.counts[j] * (eta[j] - lse);
        }
        let n = pat.total();
        for e in 0..eqs {
            let resid = pat.counts[e + 1] - n * prob[e + 1];
            for a in 0..p {
                score[e * p + a] += pat.x[a] * resid;
            }
            if want_info {
                for f in 0..eqs {
                    let w = n * prob[e + 1] * (if e == f { 1.0 } else { 0.0 } - prob[f + 1]);
                    if w == 0.0 {
                        continue;
                    }
                    for a in 0..p {
                        if pat.x[a] == 0.0 {
                            continue;
                        }
                        for b in 0..p {
                            info[(e * p + a, f * p + b)] += w * pat.x[a] * pat.x[b];
                        }
                    }
                }
            }
        }
    }
    Evaluation { ll, score, info }
}

fn fit_patterns(
    design: Design,
    family: Family,
    patterns: &[Pattern],
    offset: Vec<f64>,
    weighted: bool,
    n_records: usize,
    ds: &Dataset,
) -> Result<GlmFit> {
    let eqs = family.n_equations();
    let p = design.width();
    let k = eqs * p;

    let totals: Vec<f64> = (0..=eqs).map(|j| patterns.iter().map(|pt| pt.counts[j]).sum()).collect();
    let n_effective: f64 = totals.iter().sum();
    if let Some(j) = totals.iter().position(|&t| t == 0.0) {
        return Err(Error::Separation {
            variable: format!("{} (level `{}` not observed)", ds.variable(design.outcome).name, design.outcome_levels[j]),
            magnitude: f64::INFINITY,
        });
    }

    let eval = |theta: &[f64], want_info: bool| match family {
        Family::Binary => evaluate_binary(patterns, theta, offset[0], want_info),
        Family::Multinomial { .. } => evaluate_multinomial(patterns, theta, &offset, want_info),
    };

    // Start from the marginal log-odds so the first step is already close.
    let mut theta = vec![0.0; k];
    for e in 0..eqs {
        theta[e * p] = (totals[e + 1] / totals[0]).ln() - offset[e];
    }

    let mut current = eval(&theta, true);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITERATIONS {
        if max_abs(current.score.as_slice()) <= SCORE_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let chol = current
            .info
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular(singular_hint(&design, ds)))?;
        let step = chol.solve(&current.score);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + scale * s).collect();
            let cand = eval(&trial, true);
            if cand.ll.is_finite() && cand.ll >= current.ll - 1e-12 * current.ll.abs().max(1.0) {
                accepted = Some((trial, cand));
                break;
            }
            scale *= 0.5;
        }
        let Some((trial, cand)) = accepted else {
            break;
        };
        let rel_change = (cand.ll - current.ll).abs() / current.ll.abs().max(1e-300);
        theta = trial;
        current = cand;
        if rel_change <= REL_LL_TOL {
            converged = true;
            break;
        }
    }
    let score_norm = max_abs(current.score.as_slice());
    if !converged {
        return Err(Error::NonConvergence { iterations, score_norm });
    }

    let names: Vec<String> = design.covariates.iter().map(|&c| ds.variable(c).name.clone()).collect();
    if let Some((idx, magnitude)) = theta
        .iter()
        .enumerate()
        .map(|(i, t)| (i, t.abs()))
        .find(|(_, m)| *m > SEPARATION_BOUND)
    {
        let column = idx % p;
        return Err(Error::Separation { variable: design.column_variable(&names, column), magnitude });
    }

    let chol = current.info.clone().cholesky().ok_or_else(|| Error::Singular(singular_hint(&design, ds)))?;
    let mut covariance = chol.inverse();
    symmetrize(&mut covariance);

    Ok(GlmFit {
        family,
        design,
        coefficients: theta,
        covariance,
        fixed_offset: offset,
        weighted,
        n_effective,
        n_records,
        convergence: Convergence { iterations, score_norm, log_likelihood: current.ll },
    })
}

fn singular_hint(design: &Design, ds: &Dataset) -> String {
    let names: Vec<&str> = design.covariates.iter().map(|&c| ds.variable(c).name.as_str()).collect();
    format!("rank deficient design for `{}` on [{}]", ds.variable(design.outcome).name, names.join(", "))
}

impl GlmFit {
    pub fn n_equations(&self) -> usize {
        self.family.n_equations()
    }

    pub fn n_coefficients(&self) -> usize {
        self.coefficients.len()
    }

    /// `equation:column` labels, e.g. `1:_cons`, `1:y=1`.
    pub fn coefficient_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_coefficients());
        for e in 0..self.n_equations() {
            for c in &self.design.column_names {
                match self.family {
                    Family::Binary => names.push(c.clone()),
                    Family::Multinomial { .. } => names.push(format!("{}:{c}", self.design.outcome_levels[e + 1])),
                }
            }
        }
        names
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.n_coefficients()).map(|i| self.covariance[(i, i)].max(0.0).sqrt()).collect()
    }

    /// Linear predictors of the non-base levels for one covariate pattern,
    /// including the fit's fixed offset.
    pub fn linear_predictors(&self, coefficients: &[f64], covariates: &[u32]) -> Vec<f64> {
        let x = self.design.encode(covariates);
        let p = self.design.width();
        (0..self.n_equations())
            .map(|e| self.fixed_offset[e] + dot(&x, &coefficients[e * p..(e + 1) * p]))
            .collect()
    }

    /// Outcome-level probabilities for one covariate pattern under the given
    /// coefficients, with `extra_offset` added to each equation.
    pub fn predict_prob(&self, coefficients: &[f64], covariates: &[u32], extra_offset: &[f64]) -> Vec<f64> {
        let mut eta = self.linear_predictors(coefficients, covariates);
        for (e, o) in eta.iter_mut().zip(extra_offset) {
            *e += o;
        }
        softmax_with_base(&eta)
    }

    /// Draws `θ̂ + L z` with `L Lᵀ = Û`, `z` i.i.d. standard normal.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamDraw> {
        draw_normal(&self.coefficients, &self.covariance, rng).map(|coefficients| ParamDraw { coefficients })
    }
}

/// Samples from `N(mean, cov)` through a semi-definite Cholesky factor.
pub fn draw_normal<R: Rng + ?Sized>(mean: &[f64], cov: &DMatrix<f64>, rng: &mut R) -> Result<Vec<f64>> {
    let l = psd_cholesky(cov)?;
    let z: Vec<f64> = (0..mean.len()).map(|_| rng.sample(StandardNormal)).collect();
    Ok((0..mean.len())
        .map(|i| mean[i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>())
        .collect())
}

/// Lower-triangular `L` with `L Lᵀ = A` for symmetric positive semi-definite
/// `A`. Pivots within `1e-12 · max diag` of zero give zero columns, which
/// matches factoring `A + 1e-12 I` up to that jitter.
pub fn psd_cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::NotPsd);
    }
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let d = a[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if d < -tol || !d.is_finite() {
            return Err(Error::NotPsd);
        }
        if d <= tol {
            for i in (j + 1)..n {
                let r = a[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
                if r.abs() > 1e3 * (tol * scale).sqrt() {
                    return Err(Error::NotPsd);
                }
            }
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let r = a[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = r / ljj;
        }
    }
    Ok(l)
}

/// Softmax over `[0, eta_1, ..., eta_{J-1}]`.
pub fn softmax_with_base(eta: &[f64]) -> Vec<f64> {
    let mut full = Vec::with_capacity(eta.len() + 1);
    full.push(0.0);
    full.extend_from_slice(eta);
    let lse = log_sum_exp(&full);
    full.iter().map(|e| (e - lse).exp()).collect()
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

#[cfg(test)]
pub(crate) fn log_likelihood_for_test(
    ds: &Dataset,
    spec: &DesignSpec,
    family: Family,
    theta: &[f64],
    offset: &[f64],
) -> f64 {
    let design = Design::resolve(ds, spec).unwrap();
    let (patterns, _) = collapse(ds, &design, None, None).unwrap();
    match family {
        Family::Binary => evaluate_binary(&patterns, theta, offset[0], false).ll,
        Family::Multinomial { .. } => evaluate_multinomial(&patterns, theta, offset, false).ll,
    }
}

#[cfg(test)]
pub(crate) fn score_for_test(ds: &Dataset, spec: &DesignSpec, family: Family, theta: &[f64], offset: &[f64]) -> Vec<f64> {
    let design = Design::resolve(ds, spec).unwrap();
    let (patterns, _) = collapse(ds, &design, None, None).unwrap();
    let ev = match family {
        Family::Binary => evaluate_binary(&patterns, theta, offset[0], false),
        Family::Multinomial { .. } => evaluate_multinomial(&patterns, theta, offset, false),
    };
    ev.score.iter().copied().collect()
}
