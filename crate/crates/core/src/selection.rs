//! Selection models for missingness in a binary covariate.
//!
//! `logit P(r = 1 | x, y) = α0 + αx·x + αy·y`, with the active terms set by
//! the mechanism: M1 (MCAR), M2 (MAR on y), M3 (MNAR on x), M4 (MNAR on x
//! and y).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expit;
use crate::tabular::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mechanism {
    M1,
    M2,
    M3,
    M4,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::M1, Mechanism::M2, Mechanism::M3, Mechanism::M4];

    pub fn uses_x(self) -> bool {
        matches!(self, Mechanism::M3 | Mechanism::M4)
    }

    pub fn uses_y(self) -> bool {
        matches!(self, Mechanism::M2 | Mechanism::M4)
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "M1" | "MCAR" => Ok(Mechanism::M1),
            "M2" | "MAR" => Ok(Mechanism::M2),
            "M3" => Ok(Mechanism::M3),
            "M4" => Ok(Mechanism::M4),
            other => Err(Error::Config(format!("unknown mechanism `{other}` (expected M1..M4)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionModel {
    pub mechanism: Mechanism,
    pub alpha0: f64,
    #[serde(default)]
    pub alpha_x: f64,
    #[serde(default)]
    pub alpha_y: f64,
}

impl SelectionModel {
    /// Builds a model; coefficients the mechanism does not use are zeroed.
    pub fn new(mechanism: Mechanism, alpha0: f64, alpha_x: f64, alpha_y: f64) -> Result<Self> {
        if ![alpha0, alpha_x, alpha_y].iter().all(|a| a.is_finite()) {
            return Err(Error::InvalidInput("selection parameters must be finite".into()));
        }
        Ok(SelectionModel {
            mechanism,
            alpha0,
            alpha_x: if mechanism.uses_x() { alpha_x } else { 0.0 },
            alpha_y: if mechanism.uses_y() { alpha_y } else { 0.0 },
        })
    }

    pub fn mcar(alpha0: f64) -> Self {
        SelectionModel { mechanism: Mechanism::M1, alpha0, alpha_x: 0.0, alpha_y: 0.0 }
    }

    /// Settings giving roughly 45% missing x for `p_x = 0.7`,
    /// `β0 = ln 0.5`, `βx = ln 1.5`, with `|αx| = |αy| = 1.5`.
    pub fn reference(mechanism: Mechanism) -> Self {
        let (a0, ax, ay) = match mechanism {
            Mechanism::M1 => ((0.55f64 / 0.45).ln(), 0.0, 0.0),
            Mechanism::M2 => (-0.2, 0.0, 1.5),
            Mechanism::M3 => (1.35, -1.5, 0.0),
            Mechanism::M4 => (0.75, -1.5, 1.5),
        };
        SelectionModel { mechanism, alpha0: a0, alpha_x: ax, alpha_y: ay }
    }

    pub fn with_alpha0(self, alpha0: f64) -> Self {
        SelectionModel { alpha0, ..self }
    }

    /// `P(r = 1 | x = j, y = k)`.
    pub fn observe_prob(&self, x_level: u32, y_level: u32) -> f64 {
        expit(self.alpha0 + self.alpha_x * x_level as f64 + self.alpha_y * y_level as f64)
    }

    /// Marginal probability of observing x under a 2×2 cell distribution
    /// `cells[j][k] = P(x = j, y = k)`.
    pub fn marginal_observe_prob(&self, cells: &[[f64; 2]; 2]) -> f64 {
        let mut p = 0.0;
        for (j, row) in cells.iter().enumerate() {
            for (k, pi) in row.iter().enumerate() {
                p += pi * self.observe_prob(j as u32, k as u32);
            }
        }
        p
    }

    /// α0 giving the requested marginal missing fraction, holding αx and αy
    /// fixed. Bisection on the (monotone) marginal observation probability.
    pub fn alpha0_for_missing_fraction(&self, cells: &[[f64; 2]; 2], missing_fraction: f64) -> Result<f64> {
        if !(missing_fraction > 0.0 && missing_fraction < 1.0) {
            return Err(Error::InvalidInput(format!("missing fraction {missing_fraction} is not in (0, 1)")));
        }
        let target = 1.0 - missing_fraction;
        let f = |a0: f64| self.with_alpha0(a0).marginal_observe_prob(cells) - target;
        let (mut lo, mut hi) = (-40.0, 40.0);
        if f(lo) > 0.0 || f(hi) < 0.0 {
            return Err(Error::Solver { message: "missing fraction unreachable".into(), trace: vec![f(lo), f(hi)] });
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-14 {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Sets target cells to missing with probability `1 − observe_prob(x, y)`.
///
/// Non-target cells are never touched. The target must be binary when the
/// model has an αx term, and likewise the outcome for αy.
pub fn ampute<R: Rng + ?Sized>(
    ds: &Dataset,
    target: &str,
    outcome: &str,
    model: &SelectionModel,
    rng: &mut R,
) -> Result<Dataset> {
    let t = ds.index_of(target)?;
    let o = ds.index_of(outcome)?;
    if model.alpha_x != 0.0 && ds.variable(t).n_levels() != 2 {
        return Err(Error::Scope(format!("selection on x requires a binary target; `{target}` is not")));
    }
    if model.alpha_y != 0.0 && ds.variable(o).n_levels() != 2 {
        return Err(Error::Scope(format!("selection on y requires a binary outcome; `{outcome}` is not")));
    }
    let xs = ds.column(t);
    let ys = ds.column(o);
    let mut amputed = Vec::with_capacity(ds.n_rows());
    for (row, (x, y)) in xs.iter().zip(ys).enumerate() {
        let (Some(x), Some(y)) = (x, y) else {
            return Err(Error::InvalidInput(format!("record {} must have complete `{target}` and `{outcome}`", row + 1)));
        };
        let p = model.observe_prob(*x, *y);
        let u: f64 = rng.random();
        amputed.push(if u < p { Some(*x) } else { None });
    }
    ds.with_column(t, amputed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::tabular::Variable;

    fn complete(n: usize, seed: u64) -> Dataset {
        let mut rng = substream(seed, &[]);
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let xv = u32::from(rng.random::<f64>() < 0.7);
            let p = expit(0.5f64.ln() + 1.5f64.ln() * xv as f64);
            x.push(Some(xv));
            y.push(Some(u32::from(rng.random::<f64>() < p)));
        }
        Dataset::new(vec![Variable::binary("y"), Variable::binary("x")], vec![y, x]).unwrap()
    }

    #[test]
    fn mcar_reference_observes_55_percent() {
        let m = SelectionModel::reference(Mechanism::M1);
        for (j, k) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert!((m.observe_prob(j, k) - 0.55).abs() < 1e-15);
        }
    }

    #[test]
    fn m3_cell_probabilities() {
        let m = SelectionModel::new(Mechanism::M3, 1.35, -1.5, 0.0).unwrap();
        assert!((m.observe_prob(0, 0) - 0.794_129_4).abs() < 1e-6);
        assert!((m.observe_prob(1, 1) - 0.462_570_3).abs() < 1e-6);
        assert_eq!(m.observe_prob(1, 0), m.observe_prob(1, 1));
    }

    #[test]
    fn m4_without_slopes_is_m1() {
        let m4 = SelectionModel::new(Mechanism::M4, 0.3, 0.0, 0.0).unwrap();
        let m1 = SelectionModel::mcar(0.3);
        for (j, k) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert_eq!(m4.observe_prob(j, k), m1.observe_prob(j, k));
        }
    }

    #[test]
    fn inactive_coefficients_are_dropped() {
        let m = SelectionModel::new(Mechanism::M2, 0.1, 9.0, 1.0).unwrap();
        assert_eq!(m.alpha_x, 0.0);
        assert_eq!(m.alpha_y, 1.0);
    }

    #[test]
    fn mcar_missing_fraction_near_45_percent() {
        let ds = complete(5000, 1);
        let m = SelectionModel::reference(Mechanism::M1);
        let a = ampute(&ds, "x", "y", &m, &mut substream(2, &[])).unwrap();
        let frac = a.n_missing(1) as f64 / 5000.0;
        let se = (0.45f64 * 0.55 / 5000.0).sqrt();
        assert!((frac - 0.45).abs() < 4.0 * se, "missing fraction {frac}");
    }

    #[test]
    fn saturated_alpha0_leaves_everything_observed() {
        let ds = complete(1000, 3);
        let a = ampute(&ds, "x", "y", &SelectionModel::mcar(20.0), &mut substream(4, &[])).unwrap();
        assert_eq!(a.n_missing(1), 0);
    }

    #[test]
    fn amputation_leaves_other_cells_alone() {
        let ds = complete(2000, 5);
        let m = SelectionModel::reference(Mechanism::M4);
        let a = ampute(&ds, "x", "y", &m, &mut substream(6, &[])).unwrap();
        assert_eq!(a.column(0), ds.column(0));
        for (before, after) in ds.column(1).iter().zip(a.column(1)) {
            assert!(after.is_none() || after == before);
        }
    }

    #[test]
    fn non_binary_target_with_alpha_x_is_out_of_scope() {
        let ds = Dataset::new(
            vec![Variable::binary("y"), Variable::new("x", ["a", "b", "c"])],
            vec![vec![Some(0), Some(1)], vec![Some(2), Some(0)]],
        )
        .unwrap();
        let m = SelectionModel::reference(Mechanism::M3);
        assert!(matches!(ampute(&ds, "x", "y", &m, &mut substream(0, &[])), Err(Error::Scope(_))));
    }

    #[test]
    fn cellwise_rates_match_model_at_scale() {
        let n = 1_000_000;
        let ds = complete(n, 7);
        let m = SelectionModel::reference(Mechanism::M4);
        let a = ampute(&ds, "x", "y", &m, &mut substream(8, &[])).unwrap();
        let mut total = [[0usize; 2]; 2];
        let mut seen = [[0usize; 2]; 2];
        for row in 0..n {
            let (x, y) = (ds.cell(row, 1).unwrap() as usize, ds.cell(row, 0).unwrap() as usize);
            total[x][y] += 1;
            if a.cell(row, 1).is_some() {
                seen[x][y] += 1;
            }
        }
        for j in 0..2 {
            for k in 0..2 {
                let p = m.observe_prob(j as u32, k as u32);
                let rate = seen[j][k] as f64 / total[j][k] as f64;
                let se = (p * (1.0 - p) / total[j][k] as f64).sqrt();
                assert!((rate - p).abs() < 4.0 * se, "cell ({j},{k}): {rate} vs {p}");
            }
        }
        // log odds ratio of observation, x = 1 vs x = 0 within y strata, recovers αx
        let lor = |k: usize| {
            let o = |j: usize| seen[j][k] as f64 / (total[j][k] - seen[j][k]) as f64;
            (o(1) / o(0)).ln()
        };
        let se = |k: usize| {
            (0..2)
                .map(|j| 1.0 / seen[j][k] as f64 + 1.0 / (total[j][k] - seen[j][k]) as f64)
                .sum::<f64>()
                .sqrt()
        };
        for k in 0..2 {
            assert!((lor(k) - m.alpha_x).abs() < 4.0 * se(k));
        }
    }

    #[test]
    fn alpha0_search_hits_requested_fraction() {
        let cells = [[0.2, 0.1], [0.4, 0.3]];
        let m = SelectionModel::new(Mechanism::M4, 0.0, -1.5, 1.5).unwrap();
        let a0 = m.alpha0_for_missing_fraction(&cells, 0.45).unwrap();
        let p = m.with_alpha0(a0).marginal_observe_prob(&cells);
        assert!((p - 0.55).abs() < 1e-12);
    }
}
