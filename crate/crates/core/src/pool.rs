//! Rubin's rules.
//!
//! Pools per-imputation analysis fits into one estimate per coefficient with
//! total variance `T = W + (1 + 1/M) B`, Barnard–Rubin degrees of freedom,
//! fraction of missing information and relative efficiency.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::glm::GlmFit;

/// Point estimates and variances of one analysis-model fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisFit {
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    pub variances: Vec<f64>,
    /// Complete-data residual degrees of freedom, `n − p`.
    pub df_complete: f64,
}

impl AnalysisFit {
    pub fn new(names: Vec<String>, estimates: Vec<f64>, variances: Vec<f64>, df_complete: f64) -> Result<Self> {
        if names.len() != estimates.len() || names.len() != variances.len() {
            return Err(Error::InvalidInput("fit layout lengths differ".into()));
        }
        Ok(AnalysisFit { names, estimates, variances, df_complete })
    }

    pub fn from_glm(fit: &GlmFit) -> Self {
        AnalysisFit {
            names: fit.coefficient_names(),
            estimates: fit.coefficients.clone(),
            variances: (0..fit.n_coefficients()).map(|i| fit.covariance[(i, i)]).collect(),
            df_complete: fit.n_records as f64 - fit.n_coefficients() as f64,
        }
    }
}

/// Pooled result for one coefficient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledEstimate {
    pub name: String,
    pub m: usize,
    /// Q̄
    pub estimate: f64,
    /// W
    pub within: f64,
    /// B
    pub between: f64,
    /// T
    pub total: f64,
    pub df: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub fmi: f64,
    pub relative_efficiency: f64,
    /// Monte Carlo error of Q̄, √(B/M).
    pub mc_error: f64,
}

impl PooledEstimate {
    pub fn se(&self) -> f64 {
        self.total.sqrt()
    }

    pub fn odds_ratio(&self) -> f64 {
        self.estimate.exp()
    }

    /// Whether the Monte Carlo error is at most 10% of the pooled SE.
    pub fn mc_error_ok(&self) -> bool {
        self.mc_error <= 0.1 * self.se()
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_lo <= value && value <= self.ci_hi
    }
}

fn check_layout(fits: &[AnalysisFit], min_m: usize) -> Result<()> {
    if fits.len() < min_m {
        return Err(Error::InvalidInput(format!("pooling needs at least {min_m} fits, got {}", fits.len())));
    }
    let first = &fits[0];
    if fits.iter().any(|f| f.names != first.names || f.estimates.len() != first.names.len()) {
        return Err(Error::InvalidInput("analysis fits have different coefficient layouts".into()));
    }
    if fits.iter().any(|f| !(f.df_complete > 0.0)) {
        return Err(Error::InvalidInput("complete-data degrees of freedom must be positive".into()));
    }
    Ok(())
}

/// `t_{ν, 0.975}`, switching to the normal quantile for very large ν.
pub fn t_quantile_975(df: f64) -> f64 {
    if df.is_finite() && df < 1e7 {
        StudentsT::new(0.0, 1.0, df).map(|t| t.inverse_cdf(0.975)).unwrap_or(f64::NAN)
    } else {
        z_quantile_975()
    }
}

pub fn z_quantile_975() -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.975)
}

struct Moments {
    qbar: f64,
    w: f64,
    b: f64,
}

fn moments(fits: &[AnalysisFit], k: usize) -> Moments {
    let m = fits.len() as f64;
    let qbar = fits.iter().map(|f| f.estimates[k]).sum::<f64>() / m;
    let w = fits.iter().map(|f| f.variances[k]).sum::<f64>() / m;
    let b = fits.iter().map(|f| (f.estimates[k] - qbar).powi(2)).sum::<f64>() / (m - 1.0);
    Moments { qbar, w, b }
}

/// Barnard–Rubin degrees of freedom.
pub fn barnard_rubin_df(m: usize, within: f64, between: f64, df_complete: f64) -> f64 {
    let m = m as f64;
    let total = within + (1.0 + 1.0 / m) * between;
    let lambda = if total > 0.0 { (1.0 + 1.0 / m) * between / total } else { 0.0 };
    let inv_old = if lambda > 0.0 { lambda * lambda / (m - 1.0) } else { 0.0 };
    let nu_obs = if df_complete.is_infinite() {
        if lambda < 1.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        (df_complete + 1.0) / (df_complete + 3.0) * df_complete * (1.0 - lambda)
    };
    let inv_obs = if nu_obs > 0.0 { 1.0 / nu_obs } else { f64::INFINITY };
    1.0 / (inv_old + inv_obs)
}

/// `(r + 2/(ν+3)) / (r + 1)` with `r = (1 + 1/M) B / W`.
pub fn fraction_missing_information(m: usize, within: f64, between: f64, df: f64) -> f64 {
    if between <= 0.0 && within <= 0.0 {
        return 0.0;
    }
    if within <= 0.0 {
        return 1.0;
    }
    let r = (1.0 + 1.0 / m as f64) * between / within;
    ((r + 2.0 / (df + 3.0)) / (r + 1.0)).clamp(0.0, 1.0)
}

fn pool_moments(name: String, m: usize, mo: Moments, df_complete: f64) -> PooledEstimate {
    let total = mo.w + (1.0 + 1.0 / m as f64) * mo.b;
    let df = barnard_rubin_df(m, mo.w, mo.b, df_complete);
    let half = t_quantile_975(df) * total.sqrt();
    let fmi = fraction_missing_information(m, mo.w, mo.b, df);
    PooledEstimate {
        name,
        m,
        estimate: mo.qbar,
        within: mo.w,
        between: mo.b,
        total,
        df,
        ci_lo: mo.qbar - half,
        ci_hi: mo.qbar + half,
        fmi,
        relative_efficiency: 1.0 / (1.0 + fmi / m as f64),
        mc_error: (mo.b / m as f64).sqrt(),
    }
}

/// Rubin's rules over `M ≥ 2` fits with identical layouts.
pub fn pool(fits: &[AnalysisFit]) -> Result<Vec<PooledEstimate>> {
    check_layout(fits, 2)?;
    let m = fits.len();
    let df_complete = fits[0].df_complete;
    Ok((0..fits[0].names.len())
        .map(|k| pool_moments(fits[0].names[k].clone(), m, moments(fits, k), df_complete))
        .collect())
}

/// Wraps one fit (full data, complete records) in the pooled layout with a
/// normal-quantile interval.
pub fn single(fit: &AnalysisFit) -> Vec<PooledEstimate> {
    let z = z_quantile_975();
    fit.names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let (q, v) = (fit.estimates[k], fit.variances[k]);
            PooledEstimate {
                name: name.clone(),
                m: 1,
                estimate: q,
                within: v,
                between: 0.0,
                total: v,
                df: f64::INFINITY,
                ci_lo: q - z * v.sqrt(),
                ci_hi: q + z * v.sqrt(),
                fmi: 0.0,
                relative_efficiency: 1.0,
                mc_error: 0.0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FmiEstimate {
    pub name: String,
    pub fmi: f64,
    pub mcse: f64,
}

/// FMI with its leave-one-imputation-out jackknife Monte Carlo SE.
pub fn fmi_mcse(fits: &[AnalysisFit]) -> Result<Vec<FmiEstimate>> {
    check_layout(fits, 3)?;
    let m = fits.len();
    let full = pool(fits)?;
    let mut out = Vec::with_capacity(full.len());
    let mut subset: Vec<AnalysisFit> = Vec::with_capacity(m - 1);
    let mut loo = vec![vec![0.0; m]; full.len()];
    for i in 0..m {
        subset.clear();
        subset.extend(fits.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, f)| f.clone()));
        for (k, p) in pool(&subset)?.iter().enumerate() {
            loo[k][i] = p.fmi;
        }
    }
    for (k, p) in full.iter().enumerate() {
        let mean = loo[k].iter().sum::<f64>() / m as f64;
        let ss: f64 = loo[k].iter().map(|v| (v - mean).powi(2)).sum();
        out.push(FmiEstimate { name: p.name.clone(), fmi: p.fmi, mcse: ((m as f64 - 1.0) / m as f64 * ss).sqrt() });
    }
    Ok(out)
}

/// Writes the odds-ratio table: estimate, SE, OR with interval, FMI, RE and
/// the Monte Carlo error flag.
pub fn write_csv_to<W: Write>(writer: W, estimates: &[PooledEstimate], weighted: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let csv_err = |e: csv::Error| Error::InvalidInput(format!("writing pooled table: {e}"));
    w.write_record([
        "coefficient",
        "estimate",
        "se",
        "df",
        "odds_ratio",
        "or_ci_lo",
        "or_ci_hi",
        "fmi",
        "re",
        "within",
        "between",
        "total",
        "mc_error",
        "mc_error_ok",
        "m",
        "weighted",
    ])
    .map_err(csv_err)?;
    for p in estimates {
        w.write_record([
            p.name.clone(),
            fmt(p.estimate),
            fmt(p.se()),
            fmt(p.df),
            fmt(p.odds_ratio()),
            fmt(p.ci_lo.exp()),
            fmt(p.ci_hi.exp()),
            fmt(p.fmi),
            fmt(p.relative_efficiency),
            fmt(p.within),
            fmt(p.between),
            fmt(p.total),
            fmt(p.mc_error),
            p.mc_error_ok().to_string(),
            p.m.to_string(),
            weighted.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("writing pooled table: {e}")))
}

pub fn write_csv(path: impl AsRef<Path>, estimates: &[PooledEstimate], weighted: bool) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(std::io::BufWriter::new(file), estimates, weighted)
}

#[derive(Serialize)]
struct JsonRow<'a> {
    #[serde(flatten)]
    estimate: &'a PooledEstimate,
    se: f64,
    odds_ratio: f64,
    or_ci_lo: f64,
    or_ci_hi: f64,
    mc_error_ok: bool,
}

pub fn to_json(estimates: &[PooledEstimate], weighted: bool) -> String {
    let rows: Vec<JsonRow<'_>> = estimates
        .iter()
        .map(|p| JsonRow {
            estimate: p,
            se: p.se(),
            odds_ratio: p.odds_ratio(),
            or_ci_lo: p.ci_lo.exp(),
            or_ci_hi: p.ci_hi.exp(),
            mc_error_ok: p.mc_error_ok(),
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({ "weighted": weighted, "coefficients": rows }))
        .expect("pooled estimates serialize")
}

pub(crate) fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Reads a long-format table of per-imputation fits: columns `imputation`,
/// `coefficient`, `estimate`, `variance`, and optionally `df_complete`.
pub fn read_fits_csv(path: impl AsRef<Path>) -> Result<Vec<AnalysisFit>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(ci), Some(cc), Some(ce), Some(cv)) = (col("imputation"), col("coefficient"), col("estimate"), col("variance"))
    else {
        return Err(Error::Schema("fits table needs imputation, coefficient, estimate, variance columns".into()));
    };
    let cd = col("df_complete");
    let mut order: Vec<String> = Vec::new();
    let mut fits: Vec<AnalysisFit> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let num = |c: usize| -> Result<f64> {
            rec[c].trim().parse::<f64>().map_err(|_| Error::Parse { line, message: format!("not a number: `{}`", &rec[c]) })
        };
        let key = rec[ci].to_string();
        let pos = match order.iter().position(|k| *k == key) {
            Some(p) => p,
            None => {
                order.push(key);
                fits.push(AnalysisFit { names: vec![], estimates: vec![], variances: vec![], df_complete: f64::INFINITY });
                order.len() - 1
            }
        };
        let f = &mut fits[pos];
        f.names.push(rec[cc].to_string());
        f.estimates.push(num(ce)?);
        f.variances.push(num(cv)?);
        if let Some(cd) = cd {
            f.df_complete = num(cd)?;
        }
    }
    if fits.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(fits)
}
