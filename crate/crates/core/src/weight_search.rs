//! Cross-validated grid search over the risk-score confidence weight.
//!
//! For every `w` on the grid, each cell's risk score `S(w)` is computed and
//! cell agreement is regressed on `S(w)` with a univariate OLS fit on the
//! training folds; the held-out fold's mean absolute error is averaged over
//! folds. Folds partition item ids, keyed by a seeded hash of the id, so
//! the result does not depend on the order of the input cells.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::CellMetrics;
use crate::regression::RegressionError;

pub const DEFAULT_FOLDS: usize = 10;
pub const WEIGHT_SEARCH_HEADER: &str = "w,cv_mae";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightGrid(Vec<f64>);

impl WeightGrid {
    /// `{0, 0.05, ..., 1.0}`: 21 points.
    pub fn standard() -> Self {
        WeightGrid((0..=20).map(|i| i as f64 / 20.0).collect())
    }

    pub fn new(mut values: Vec<f64>) -> Result<Self, RegressionError> {
        if values.is_empty() {
            return Err(RegressionError::Input("weight grid is empty".into()));
        }
        if let Some(bad) = values.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(RegressionError::Input(format!(
                "grid weight {bad} is outside [0, 1]"
            )));
        }
        values.sort_by(f64::total_cmp);
        values.dedup();
        Ok(WeightGrid(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub w: f64,
    /// `None` when every fold was skipped.
    pub cv_mae: Option<f64>,
    pub folds_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSearchResult {
    pub grid: Vec<GridPoint>,
    pub best_w: f64,
    pub best_mae: f64,
    pub fold_count: usize,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl WeightSearchResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(WEIGHT_SEARCH_HEADER);
        out.push('\n');
        for g in &self.grid {
            match g.cv_mae {
                Some(m) => out.push_str(&format!("{},{}\n", g.w, m)),
                None => out.push_str(&format!("{},\n", g.w)),
            }
        }
        out
    }
}

fn item_hash(seed: u64, item_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(item_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Assigns every item to one of `folds` folds. Items are ordered by a
/// seeded hash of their id and dealt round-robin, so fold sizes differ by
/// at most one.
pub fn fold_assignment<'a, I>(item_ids: I, folds: usize, seed: u64) -> BTreeMap<String, usize>
where
    I: IntoIterator<Item = &'a str>,
{
    let distinct: BTreeSet<&str> = item_ids.into_iter().collect();
    let mut keyed: Vec<(u64, &str)> = distinct
        .into_iter()
        .map(|id| (item_hash(seed, id), id))
        .collect();
    keyed.sort();
    keyed
        .into_iter()
        .enumerate()
        .map(|(rank, (_, id))| (id.to_string(), rank % folds))
        .collect()
}

/// Univariate least squares; `None` when `x` has zero variance.
fn simple_ols(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    if sxx <= 1e-24 * n {
        return None;
    }
    let slope = sxy / sxx;
    Some((my - slope * mx, slope))
}

pub fn cross_validate_weight(
    metrics: &[CellMetrics],
    grid: &WeightGrid,
    folds: usize,
    seed: u64,
) -> Result<WeightSearchResult, RegressionError> {
    if folds < 2 {
        return Err(RegressionError::Input(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    if metrics.len() < folds * 2 {
        return Err(RegressionError::TooFewObservations {
            params: folds * 2 - 1,
            got: metrics.len(),
        });
    }
    let assignment = fold_assignment(metrics.iter().map(|m| m.item_id.as_str()), folds, seed);
    if assignment.len() < folds {
        return Err(RegressionError::Input(format!(
            "{} distinct items cannot fill {folds} folds",
            assignment.len()
        )));
    }
    // Sort cells canonically so floating-point sums do not depend on input order.
    let mut cells: Vec<&CellMetrics> = metrics.iter().collect();
    cells.sort_by(|a, b| {
        (a.item_id.as_str(), a.category_id.as_str())
            .cmp(&(b.item_id.as_str(), b.category_id.as_str()))
    });
    let fold_of: Vec<usize> = cells.iter().map(|m| assignment[&m.item_id]).collect();
    let agreement: Vec<f64> = cells.iter().map(|m| m.agreement).collect();

    let evaluated: Vec<(GridPoint, Vec<String>)> = grid
        .values()
        .par_iter()
        .map(|&w| {
            let s: Vec<f64> = cells
                .iter()
                .map(|m| w * (1.0 - m.mean_conf_norm) + (1.0 - w) * m.diversity)
                .collect();
            let mut maes = Vec::with_capacity(folds);
            let mut warnings = Vec::new();
            for fold in 0..folds {
                let (mut tx, mut ty) = (Vec::new(), Vec::new());
                for i in 0..cells.len() {
                    if fold_of[i] != fold {
                        tx.push(s[i]);
                        ty.push(agreement[i]);
                    }
                }
                let Some((a, b)) = simple_ols(&tx, &ty) else {
                    warnings.push(format!(
                        "w={w}: fold {fold} skipped, risk score has zero variance"
                    ));
                    continue;
                };
                let (mut err, mut n) = (0.0, 0usize);
                for i in 0..cells.len() {
                    if fold_of[i] == fold {
                        err += (agreement[i] - (a + b * s[i])).abs();
                        n += 1;
                    }
                }
                if n > 0 {
                    maes.push(err / n as f64);
                }
            }
            let cv_mae = (!maes.is_empty()).then(|| maes.iter().sum::<f64>() / maes.len() as f64);
            (
                GridPoint {
                    w,
                    cv_mae,
                    folds_used: maes.len(),
                },
                warnings,
            )
        })
        .collect();

    let mut grid_points = Vec::with_capacity(evaluated.len());
    let mut warnings = Vec::new();
    for (g, w) in evaluated {
        grid_points.push(g);
        warnings.extend(w);
    }
    let best = grid_points
        .iter()
        .filter_map(|g| g.cv_mae.map(|m| (g.w, m)))
        .fold(None, |acc: Option<(f64, f64)>, (w, m)| match acc {
            Some((_, bm)) if bm <= m => acc,
            _ => Some((w, m)),
        })
        .ok_or_else(|| RegressionError::Input("every grid point had all folds skipped".into()))?;
    Ok(WeightSearchResult {
        grid: grid_points,
        best_w: best.0,
        best_mae: best.1,
        fold_count: folds,
        seed,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MajorityLabel;

    fn cell(item: usize, cat: usize, agreement: f64, conf: f64, d: f64) -> CellMetrics {
        CellMetrics {
            item_id: format!("item{item:03}"),
            category_id: format!("c{cat}"),
            panel_size: 8,
            p: agreement,
            agreement,
            diversity: d,
            mean_conf_raw: 1.0 + 4.0 * conf,
            mean_conf_norm: conf,
            risk_score: 0.0,
            majority_label: MajorityLabel::Label(1),
        }
    }

    #[test]
    fn standard_grid_has_21_exact_points() {
        let g = WeightGrid::standard();
        assert_eq!(g.values().len(), 21);
        assert_eq!(g.values()[0], 0.0);
        assert_eq!(g.values()[12], 0.6);
        assert_eq!(g.values()[20], 1.0);
        assert!(WeightGrid::new(vec![]).is_err());
        assert!(WeightGrid::new(vec![1.5]).is_err());
    }

    #[test]
    fn folds_are_balanced_and_order_free() {
        let ids: Vec<String> = (0..71).map(|i| format!("s{i}")).collect();
        let a = fold_assignment(ids.iter().map(String::as_str), 10, 42);
        let b = fold_assignment(ids.iter().rev().map(String::as_str), 10, 42);
        assert_eq!(a, b);
        let mut sizes = [0usize; 10];
        for f in a.values() {
            sizes[*f] += 1;
        }
        assert!(sizes.iter().all(|&s| s == 7 || s == 8), "{sizes:?}");
    }

    #[test]
    fn too_few_cells() {
        let cells: Vec<CellMetrics> = (0..5).map(|i| cell(i, 0, 1.0, 1.0, 0.0)).collect();
        assert!(cross_validate_weight(&cells, &WeightGrid::standard(), 10, 42).is_err());
    }

    #[test]
    fn zero_variance_folds_are_skipped() {
        let cells: Vec<CellMetrics> = (0..40).map(|i| cell(i, 0, 1.0, 1.0, 0.0)).collect();
        let r = cross_validate_weight(&cells, &WeightGrid::new(vec![0.5]).unwrap(), 10, 42);
        assert!(r.is_err());
    }
}
