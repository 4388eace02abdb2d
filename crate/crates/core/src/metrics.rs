//! Per-cell panel signals: majority share, agreement, normalized-entropy
//! diversity, mean confidence, and the weighted risk score.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{
    csv_field, validate_dataset, CellKey, ConfidenceScale, DecisionCell, PanelDataset,
    ValidationReport, MIN_PANEL_SIZE,
};

/// Default confidence weight of the risk score.
pub const DEFAULT_WEIGHT: f64 = 0.6;

pub const METRICS_HEADER: &str = "item_id,category_id,panel_size,p,agreement,diversity,mean_conf_raw,mean_conf_norm,risk_score,majority_label";

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("insufficient panel at {key}: {size} vote(s), need at least {MIN_PANEL_SIZE}")]
    InsufficientPanel { key: CellKey, size: usize },
    #[error("risk weight {0} is outside [0, 1]")]
    InvalidWeight(f64),
    #[error("risk score input {name} = {value} is outside [0, 1]")]
    OutOfUnitRange { name: &'static str, value: f64 },
    #[error("dataset is not analysis-ready ({} validation error(s))", .0.errors.len())]
    InvalidDataset(ValidationReport),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MajorityLabel {
    Label(usize),
    Tied,
}

impl MajorityLabel {
    pub fn label(self) -> Option<usize> {
        match self {
            MajorityLabel::Label(l) => Some(l),
            MajorityLabel::Tied => None,
        }
    }

    pub fn is_tied(self) -> bool {
        matches!(self, MajorityLabel::Tied)
    }
}

impl fmt::Display for MajorityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MajorityLabel::Label(l) => write!(f, "{l}"),
            MajorityLabel::Tied => f.write_str("tied"),
        }
    }
}

impl Serialize for MajorityLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            MajorityLabel::Label(l) => s.serialize_u64(*l as u64),
            MajorityLabel::Tied => s.serialize_str("tied"),
        }
    }
}

impl<'de> Deserialize<'de> for MajorityLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(usize),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(i) => Ok(MajorityLabel::Label(i)),
            Raw::Text(t) if t == "tied" => Ok(MajorityLabel::Tied),
            Raw::Text(t) => t
                .parse()
                .map(MajorityLabel::Label)
                .map_err(|_| serde::de::Error::custom(format!("bad majority label `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Majority {
    /// Plurality share: largest label count over panel size.
    pub p: f64,
    /// Share of the panel voting with the plurality; equals `p`.
    pub agreement: f64,
    pub label: MajorityLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub item_id: String,
    pub category_id: String,
    pub panel_size: usize,
    pub p: f64,
    pub agreement: f64,
    pub diversity: f64,
    pub mean_conf_raw: f64,
    pub mean_conf_norm: f64,
    pub risk_score: f64,
    pub majority_label: MajorityLabel,
}

impl CellMetrics {
    pub fn key(&self) -> CellKey {
        CellKey::new(self.item_id.clone(), self.category_id.clone())
    }

    pub fn is_unanimous(&self) -> bool {
        self.diversity == 0.0
    }

    pub fn is_tied(&self) -> bool {
        self.majority_label.is_tied()
    }

    /// Risk score under another weight; the other signals are unchanged.
    pub fn risk_at(&self, w: f64) -> Result<f64, MetricError> {
        risk_score(self.mean_conf_norm, self.diversity, w)
    }
}

fn check_panel(cell: &DecisionCell) -> Result<usize, MetricError> {
    let n = cell.votes.len();
    if n < MIN_PANEL_SIZE {
        return Err(MetricError::InsufficientPanel {
            key: cell.key(),
            size: n,
        });
    }
    Ok(n)
}

pub fn majority_share(cell: &DecisionCell, k: usize) -> Result<Majority, MetricError> {
    let n = check_panel(cell)?;
    Ok(majority_from_counts(&cell.vote_counts(k), n))
}

pub(crate) fn majority_from_counts(counts: &[usize], n: usize) -> Majority {
    let top = counts.iter().copied().max().unwrap_or(0);
    let mut leaders = counts.iter().enumerate().filter(|(_, &c)| c == top);
    let first = leaders.next().map(|(i, _)| i).unwrap_or(0);
    let label = if leaders.next().is_some() {
        MajorityLabel::Tied
    } else {
        MajorityLabel::Label(first)
    };
    let p = top as f64 / n as f64;
    Majority {
        p,
        agreement: p,
        label,
    }
}

/// Shannon entropy of a vote-count vector normalized by `ln k`, in `[0, 1]`.
/// Unanimous panels map to exactly 0 and uniform splits over all `k` labels
/// to exactly 1.
pub fn normalized_entropy(counts: &[usize], k: usize) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 || k < 2 {
        return 0.0;
    }
    let mut nonzero: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    // Fixed summation order keeps the result bit-identical under relabeling.
    nonzero.sort_unstable();
    if nonzero.len() <= 1 {
        return 0.0;
    }
    if nonzero.len() == k && nonzero.iter().all(|&c| c == nonzero[0]) {
        return 1.0;
    }
    let n = n as f64;
    let h: f64 = nonzero
        .iter()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    (h / (k as f64).ln()).clamp(0.0, 1.0)
}

pub fn vote_diversity(cell: &DecisionCell, k: usize) -> Result<f64, MetricError> {
    check_panel(cell)?;
    Ok(normalized_entropy(&cell.vote_counts(k), k))
}

/// Mean confidence on the native scale and rescaled to `[0, 1]`.
pub fn mean_confidence(
    cell: &DecisionCell,
    scale: &ConfidenceScale,
) -> Result<(f64, f64), MetricError> {
    let n = check_panel(cell)?;
    let raw = cell.votes.iter().map(|v| v.confidence_raw).sum::<f64>() / n as f64;
    Ok((raw, scale.normalize(raw)))
}

/// `S = w (1 - c) + (1 - w) d` with `c` the normalized mean confidence.
pub fn risk_score(conf_norm: f64, diversity: f64, w: f64) -> Result<f64, MetricError> {
    if !(0.0..=1.0).contains(&w) {
        return Err(MetricError::InvalidWeight(w));
    }
    for (name, value) in [("confidence", conf_norm), ("diversity", diversity)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(MetricError::OutOfUnitRange { name, value });
        }
    }
    if w == 0.0 {
        return Ok(diversity);
    }
    Ok(w * (1.0 - conf_norm) + (1.0 - w) * diversity)
}

pub fn cell_metrics(
    cell: &DecisionCell,
    k: usize,
    scale: &ConfidenceScale,
    w: f64,
) -> Result<CellMetrics, MetricError> {
    let n = check_panel(cell)?;
    let counts = cell.vote_counts(k);
    let majority = majority_from_counts(&counts, n);
    let diversity = normalized_entropy(&counts, k);
    let (mean_conf_raw, mean_conf_norm) = mean_confidence(cell, scale)?;
    Ok(CellMetrics {
        item_id: cell.item_id.clone(),
        category_id: cell.category_id.clone(),
        panel_size: n,
        p: majority.p,
        agreement: majority.agreement,
        diversity,
        mean_conf_raw,
        mean_conf_norm,
        risk_score: risk_score(mean_conf_norm, diversity, w)?,
        majority_label: majority.label,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub key: CellKey,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRun {
    pub cells: Vec<CellMetrics>,
    pub skipped: Vec<SkippedCell>,
}

/// Metrics for every analyzable cell, in canonical cell order. Undersized
/// cells land in `skipped` instead of failing the run.
pub fn compute_all_metrics(ds: &PanelDataset, w: f64) -> Result<MetricsRun, MetricError> {
    if !(0.0..=1.0).contains(&w) {
        return Err(MetricError::InvalidWeight(w));
    }
    let report = validate_dataset(ds);
    if !report.is_clean() {
        return Err(MetricError::InvalidDataset(report));
    }
    let k = ds.label_count();
    let mut cells: Vec<&DecisionCell> = ds.cells.iter().collect();
    cells.sort_by(|a, b| {
        (a.item_id.as_str(), a.category_id.as_str())
            .cmp(&(b.item_id.as_str(), b.category_id.as_str()))
    });
    let results: Vec<Result<CellMetrics, MetricError>> = cells
        .par_iter()
        .map(|c| cell_metrics(c, k, &ds.scale, w))
        .collect();
    let mut run = MetricsRun::default();
    for (cell, res) in cells.iter().zip(results) {
        match res {
            Ok(m) => run.cells.push(m),
            Err(e @ MetricError::InsufficientPanel { .. }) => run.skipped.push(SkippedCell {
                key: cell.key(),
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub category_id: String,
    pub n_items: usize,
    /// Percentage of cells with a unanimous vote.
    pub full_agreement_pct: f64,
    pub mean_agreement: f64,
    pub mean_conf_raw: f64,
    pub mean_conf_norm: f64,
    pub mean_diversity: f64,
}

fn summarize<'a>(
    category_id: &str,
    cells: impl Iterator<Item = &'a CellMetrics>,
) -> Option<CategorySummary> {
    let mut n = 0usize;
    let mut unanimous = 0usize;
    let (mut a, mut c, mut cn, mut d) = (0.0, 0.0, 0.0, 0.0);
    for m in cells {
        n += 1;
        unanimous += m.is_unanimous() as usize;
        a += m.agreement;
        c += m.mean_conf_raw;
        cn += m.mean_conf_norm;
        d += m.diversity;
    }
    if n == 0 {
        return None;
    }
    let nf = n as f64;
    Some(CategorySummary {
        category_id: category_id.to_string(),
        n_items: n,
        full_agreement_pct: 100.0 * unanimous as f64 / nf,
        mean_agreement: a / nf,
        mean_conf_raw: c / nf,
        mean_conf_norm: cn / nf,
        mean_diversity: d / nf,
    })
}

pub fn category_summary(
    metrics: &[CellMetrics],
    category_id: &str,
) -> Result<CategorySummary, MetricError> {
    summarize(
        category_id,
        metrics.iter().filter(|m| m.category_id == category_id),
    )
    .ok_or_else(|| MetricError::UnknownCategory(category_id.to_string()))
}

/// One summary per category, sorted by category id.
pub fn category_summaries<'a, I>(metrics: I) -> Vec<CategorySummary>
where
    I: IntoIterator<Item = &'a CellMetrics>,
{
    let mut by_cat: BTreeMap<&str, Vec<&CellMetrics>> = BTreeMap::new();
    for m in metrics {
        by_cat.entry(m.category_id.as_str()).or_default().push(m);
    }
    by_cat
        .into_iter()
        .filter_map(|(cat, cells)| summarize(cat, cells.into_iter()))
        .collect()
}

pub fn metrics_csv(cells: &[CellMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            csv_field(&m.item_id),
            csv_field(&m.category_id),
            m.panel_size,
            m.p,
            m.agreement,
            m.diversity,
            m.mean_conf_raw,
            m.mean_conf_norm,
            m.risk_score,
            m.majority_label
        ));
    }
    out
}

pub const SUMMARY_HEADER: &str =
    "category_id,n_items,full_agreement_pct,mean_agreement,mean_conf_raw,mean_conf_norm,mean_diversity";

pub fn summaries_csv(summaries: &[CategorySummary]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            csv_field(&s.category_id),
            s.n_items,
            s.full_agreement_pct,
            s.mean_agreement,
            s.mean_conf_raw,
            s.mean_conf_norm,
            s.mean_diversity
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::VoteRecord;

    /// Binary cell with `yes` affirmative votes out of `n`, all at `conf`.
    pub(crate) fn binary_cell(yes: usize, n: usize, conf: f64) -> DecisionCell {
        DecisionCell {
            item_id: "i".into(),
            category_id: "c".into(),
            votes: (0..n)
                .map(|m| VoteRecord {
                    model_id: format!("m{m}"),
                    vote: usize::from(m < yes),
                    confidence_raw: conf,
                    group_tag: None,
                })
                .collect(),
        }
    }

    /// Closed-form binary entropy in bits.
    fn h2(p: f64) -> f64 {
        if p == 0.0 || p == 1.0 {
            0.0
        } else {
            -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
        }
    }

    #[test]
    fn majority_share_examples() {
        let m = majority_share(&binary_cell(8, 8, 5.0), 2).unwrap();
        assert_eq!(
            (m.p, m.agreement, m.label),
            (1.0, 1.0, MajorityLabel::Label(1))
        );
        let m = majority_share(&binary_cell(4, 8, 5.0), 2).unwrap();
        assert_eq!((m.p, m.agreement, m.label), (0.5, 0.5, MajorityLabel::Tied));
        let m = majority_share(&binary_cell(6, 8, 5.0), 2).unwrap();
        assert_eq!((m.p, m.agreement), (0.75, 0.75));
        let m = majority_share(&binary_cell(2, 8, 5.0), 2).unwrap();
        assert_eq!((m.agreement, m.label), (0.75, MajorityLabel::Label(0)));
    }

    #[test]
    fn undersized_cell_is_insufficient_panel() {
        let cell = binary_cell(1, 1, 5.0);
        assert!(matches!(
            majority_share(&cell, 2),
            Err(MetricError::InsufficientPanel { size: 1, .. })
        ));
        assert!(vote_diversity(&cell, 2).is_err());
    }

    #[test]
    fn diversity_matches_closed_form() {
        assert_eq!(vote_diversity(&binary_cell(8, 8, 5.0), 2).unwrap(), 0.0);
        assert_eq!(vote_diversity(&binary_cell(4, 8, 5.0), 2).unwrap(), 1.0);
        for (yes, expected) in [(6, 0.8113), (7, 0.5436), (5, 0.9544)] {
            let d = vote_diversity(&binary_cell(yes, 8, 5.0), 2).unwrap();
            assert!((d - h2(yes as f64 / 8.0)).abs() < 1e-12);
            assert!((d - expected).abs() < 1e-4, "{yes}: {d}");
        }
    }

    #[test]
    fn k_class_diversity_uniform_is_one() {
        assert_eq!(normalized_entropy(&[2, 2, 2], 3), 1.0);
        assert_eq!(normalized_entropy(&[6, 0, 0], 3), 0.0);
        let d = normalized_entropy(&[3, 3, 0], 3);
        assert!((d - 2f64.ln() / 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mean_confidence_examples() {
        let s = ConfidenceScale::default();
        assert_eq!(
            mean_confidence(&binary_cell(8, 8, 5.0), &s).unwrap(),
            (5.0, 1.0)
        );
        assert_eq!(
            mean_confidence(&binary_cell(8, 8, 1.0), &s).unwrap(),
            (1.0, 0.0)
        );
        let mut cell = binary_cell(8, 8, 5.0);
        for (v, c) in cell
            .votes
            .iter_mut()
            .zip([5.0, 5.0, 4.0, 4.0, 4.0, 5.0, 5.0, 4.0])
        {
            v.confidence_raw = c;
        }
        assert_eq!(mean_confidence(&cell, &s).unwrap(), (4.5, 0.875));
    }

    #[test]
    fn risk_score_examples() {
        assert_eq!(risk_score(1.0, 0.0, 0.6).unwrap(), 0.0);
        let s = risk_score(0.9, 0.5436, 0.6).unwrap();
        assert!((s - 0.27744).abs() < 1e-4, "{s}");
        assert_eq!(risk_score(0.3, 0.5436, 0.0).unwrap(), 0.5436);
        assert!(matches!(
            risk_score(0.5, 0.5, 1.2),
            Err(MetricError::InvalidWeight(_))
        ));
        assert!(matches!(
            risk_score(0.5, 0.5, -0.1),
            Err(MetricError::InvalidWeight(_))
        ));
    }

    #[test]
    fn category_summary_examples() {
        let mk = |cat: &str, unanimous: bool, conf: f64| CellMetrics {
            item_id: "i".into(),
            category_id: cat.into(),
            panel_size: 8,
            p: 1.0,
            agreement: 1.0,
            diversity: if unanimous { 0.0 } else { 0.5 },
            mean_conf_raw: conf,
            mean_conf_norm: (conf - 1.0) / 4.0,
            risk_score: 0.0,
            majority_label: MajorityLabel::Label(1),
        };
        let cells: Vec<CellMetrics> = (0..10).map(|i| mk("a", i < 7, 4.0)).collect();
        assert_eq!(
            category_summary(&cells, "a").unwrap().full_agreement_pct,
            70.0
        );
        let all: Vec<CellMetrics> = (0..3).map(|_| mk("b", true, 5.0)).collect();
        assert_eq!(
            category_summary(&all, "b").unwrap().full_agreement_pct,
            100.0
        );
        let pair = vec![mk("c", true, 4.5), mk("c", true, 4.7)];
        assert!((category_summary(&pair, "c").unwrap().mean_conf_raw - 4.6).abs() < 1e-12);
        assert!(matches!(
            category_summary(&pair, "zzz"),
            Err(MetricError::UnknownCategory(_))
        ));
    }
}
