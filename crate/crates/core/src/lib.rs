//! Calibrated-δ adjustment multiple imputation for an incomplete binary or
//! categorical covariate.
//!
//! The imputation model for the incomplete variable is a (multinomial)
//! logistic regression fitted to the complete records. Standard MI draws
//! missing values from that model as-is, which is only valid under MAR. When
//! the population marginal distribution of the incomplete variable is known
//! (a census) or estimated (an external sample), the intercept(s) of the
//! imputation model can be shifted by an offset δ chosen so that the expected
//! completed-data distribution matches the population. That offset is the
//! calibrated-δ adjustment, and it removes the bias of standard MI under
//! selection models where missingness depends on the incomplete variable
//! itself (optionally also on the outcome).
//!
//! Module map:
//!
//! - [`tabular`]: categorical datasets with a missingness mask, CSV I/O.
//! - [`glm`]: binary and multinomial logistic regression (Newton–Raphson),
//!   posterior parameter draws.
//! - [`selection`]: selection models M1–M4 and amputation.
//! - [`deltasolve`]: the calibration equations and their solvers.
//! - [`impute`]: CRA, single imputation, standard, calibrated and weighted MI.
//! - [`pool`]: Rubin's rules, FMI and its jackknife Monte Carlo error.
//! - [`analytic`]: exact 2×2 expectation-level bias oracle.
//! - [`simlab`]: Monte Carlo simulation studies.

// `!(x > 0.0)` deliberately rejects NaN; index loops mirror the formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analytic;
pub mod deltasolve;
pub mod error;
pub mod glm;
pub mod impute;
pub mod pool;
pub mod rng;
pub mod selection;
pub mod simlab;
pub mod tabular;

pub use error::{Error, ErrorClass, Result};
pub use glm::{DesignSpec, Family, GlmFit, ParamDraw};
pub use impute::{ImputationResult, Method, MethodSpec};
pub use pool::{AnalysisFit, PooledEstimate};
pub use selection::{Mechanism, SelectionModel};
pub use tabular::{Dataset, PopulationDistribution, PopulationSource, Role, Variable};

/// Logistic function, evaluated without overflow for large |z|.
#[inline]
pub fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Log-odds of a probability.
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
