//! Percentile bootstrap over items.
//!
//! Resample `i` is drawn from its own substream, so the interval is
//! bit-identical for a given `(seed, resamples, data)` no matter how many
//! threads evaluate it. A resample whose statistic fails is redrawn from the
//! next attempt substream; more than 5% failures aborts.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{CellKey, DecisionCell, PanelDataset, ReferenceLabels};
use crate::rng::{retry_substream, DEFAULT_SEED};

pub const MIN_RESAMPLES: usize = 100;
const MAX_FAILURE_SHARE: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum BootstrapError {
    #[error("need at least {MIN_RESAMPLES} resamples, got {0}")]
    TooFewResamples(usize),
    #[error("confidence level {0} is outside (0, 1)")]
    InvalidLevel(f64),
    #[error("nothing to resample")]
    Empty,
    #[error("statistic failed on the full data: {0}")]
    Statistic(String),
    #[error("{failures} of {resamples} resamples failed (limit 5%)")]
    TooManyFailures { failures: usize, resamples: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: 1000,
            seed: DEFAULT_SEED,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub resamples: usize,
    pub seed: u64,
    /// Resample attempts that failed and were redrawn.
    pub failures: usize,
}

impl BootstrapCI {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Bootstraps a vector-valued statistic over `units` and returns one
/// percentile interval per component.
pub fn bootstrap_units<U, F>(
    units: &[U],
    cfg: &BootstrapConfig,
    statistic: F,
) -> Result<Vec<BootstrapCI>, BootstrapError>
where
    U: Sync,
    F: Fn(&[&U]) -> Result<Vec<f64>, String> + Sync,
{
    if cfg.resamples < MIN_RESAMPLES {
        return Err(BootstrapError::TooFewResamples(cfg.resamples));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(BootstrapError::InvalidLevel(cfg.level));
    }
    if units.is_empty() {
        return Err(BootstrapError::Empty);
    }
    let all: Vec<&U> = units.iter().collect();
    let point = statistic(&all).map_err(BootstrapError::Statistic)?;
    let dims = point.len();
    let max_attempts = (cfg.resamples as f64 * MAX_FAILURE_SHARE).floor() as u64 + 1;

    let draws: Vec<Result<(Vec<f64>, usize), ()>> = (0..cfg.resamples as u64)
        .into_par_iter()
        .map(|i| {
            let mut sample: Vec<&U> = Vec::with_capacity(units.len());
            for attempt in 0..max_attempts {
                let mut rng = retry_substream(cfg.seed, i, attempt);
                sample.clear();
                sample.extend((0..units.len()).map(|_| &units[rng.random_range(0..units.len())]));
                match statistic(&sample) {
                    Ok(v) if v.len() == dims && v.iter().all(|x| x.is_finite()) => {
                        return Ok((v, attempt as usize))
                    }
                    _ => continue,
                }
            }
            Err(())
        })
        .collect();

    let mut failures = 0usize;
    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.resamples); dims];
    for d in &draws {
        match d {
            Ok((v, retries)) => {
                failures += retries;
                for (col, x) in columns.iter_mut().zip(v) {
                    col.push(*x);
                }
            }
            Err(()) => failures += max_attempts as usize,
        }
    }
    if failures as f64 > cfg.resamples as f64 * MAX_FAILURE_SHARE {
        return Err(BootstrapError::TooManyFailures {
            failures,
            resamples: cfg.resamples,
        });
    }
    let alpha = (1.0 - cfg.level) / 2.0;
    Ok(columns
        .into_iter()
        .zip(point)
        .map(|(mut col, point)| {
            col.sort_by(f64::total_cmp);
            BootstrapCI {
                point,
                lower: percentile(&col, alpha),
                upper: percentile(&col, 1.0 - alpha),
                level: cfg.level,
                resamples: cfg.resamples,
                seed: cfg.seed,
                failures,
            }
        })
        .collect())
}

/// Groups cells by item id; the resampling unit for dataset bootstraps.
pub fn item_groups<T, F>(cells: &[T], item_of: F) -> Vec<Vec<&T>>
where
    F: Fn(&T) -> &str,
{
    let mut groups: BTreeMap<&str, Vec<&T>> = BTreeMap::new();
    for c in cells {
        groups.entry(item_of(c)).or_default().push(c);
    }
    groups.into_values().collect()
}

/// Builds the dataset for one resample. Items drawn more than once get a
/// `~n` suffix on repeats so cell keys stay unique.
fn resampled_dataset(base: &PanelDataset, draw: &[&Vec<&DecisionCell>]) -> PanelDataset {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut cells = Vec::new();
    let mut reference = ReferenceLabels::default();
    for group in draw {
        let Some(first) = group.first() else { continue };
        let n = seen.entry(first.item_id.as_str()).or_insert(0);
        let item_id = if *n == 0 {
            first.item_id.clone()
        } else {
            format!("{}~{}", first.item_id, n)
        };
        *n += 1;
        for cell in group.iter() {
            let old_key = cell.key();
            for (coder, labels) in &base.reference.coders {
                if let Some(&l) = labels.get(&old_key) {
                    reference.insert(
                        coder,
                        CellKey::new(item_id.clone(), cell.category_id.clone()),
                        l,
                    );
                }
            }
            cells.push(DecisionCell {
                item_id: item_id.clone(),
                category_id: cell.category_id.clone(),
                votes: cell.votes.clone(),
            });
        }
    }
    cells.sort_by(|a, b| {
        (a.item_id.as_str(), a.category_id.as_str())
            .cmp(&(b.item_id.as_str(), b.category_id.as_str()))
    });
    PanelDataset {
        dataset_id: base.dataset_id.clone(),
        labels: base.labels.clone(),
        scale: base.scale,
        cells,
        roster: base.roster.clone(),
        reference,
    }
}

/// Percentile bootstrap of a dataset statistic, resampling items with
/// replacement and keeping every category of a drawn item together.
pub fn bootstrap_ci<F>(
    statistic: F,
    ds: &PanelDataset,
    cfg: &BootstrapConfig,
) -> Result<BootstrapCI, BootstrapError>
where
    F: Fn(&PanelDataset) -> Result<f64, String> + Sync,
{
    let groups = item_groups(&ds.cells, |c| c.item_id.as_str());
    let point = statistic(ds).map_err(BootstrapError::Statistic)?;
    let mut ci = bootstrap_units(&groups, cfg, |draw| {
        statistic(&resampled_dataset(ds, draw)).map(|v| vec![v])
    })?
    .remove(0);
    ci.point = point;
    Ok(ci)
}
