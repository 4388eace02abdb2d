//! Chance-corrected agreement, correlation, multiple-testing correction and
//! per-model reliability against the panel majority.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::majority_from_counts;
use crate::panel::{CellKey, PanelDataset, MIN_PANEL_SIZE};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} observations, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("kappa is undefined: expected agreement is 1 but observed agreement is {observed}")]
    UndefinedKappa { observed: f64 },
    #[error("row {row} has {got} ratings, expected {expected}")]
    RaggedRow {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("correlation is undefined: zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("p-value {0} is outside [0, 1]")]
    InvalidProbability(f64),
    #[error("{0}")]
    Degenerate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub kappa: f64,
    pub observed_agreement: f64,
    pub expected_agreement: f64,
    pub n_decisions: usize,
}

impl KappaResult {
    /// Share of non-identical label pairs.
    pub fn error_rate(&self) -> f64 {
        1.0 - self.observed_agreement
    }
}

fn kappa_from(po: f64, pe: f64, n: usize) -> Result<KappaResult, StatsError> {
    let kappa = if pe >= 1.0 {
        if po >= 1.0 {
            1.0
        } else {
            return Err(StatsError::UndefinedKappa { observed: po });
        }
    } else {
        (po - pe) / (1.0 - pe)
    };
    Ok(KappaResult {
        kappa,
        observed_agreement: po,
        expected_agreement: pe,
        n_decisions: n,
    })
}

/// Cohen's kappa with per-rater marginals.
pub fn cohen_kappa(a: &[usize], b: &[usize]) -> Result<KappaResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(StatsError::TooFew { needed: 1, got: 0 });
    }
    let n = a.len();
    let k = a.iter().chain(b).copied().max().unwrap_or(0) + 1;
    let mut ma = vec![0usize; k];
    let mut mb = vec![0usize; k];
    let mut agree = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        ma[x] += 1;
        mb[y] += 1;
        agree += usize::from(x == y);
    }
    let nf = n as f64;
    let po = agree as f64 / nf;
    let pe: f64 = ma
        .iter()
        .zip(&mb)
        .map(|(&x, &y)| (x as f64 / nf) * (y as f64 / nf))
        .sum();
    kappa_from(po, pe, n)
}

/// Fleiss' kappa over an items × labels count matrix with a fixed number of
/// raters per item.
pub fn fleiss_kappa(counts: &[Vec<usize>]) -> Result<KappaResult, StatsError> {
    let Some(first) = counts.first() else {
        return Err(StatsError::TooFew { needed: 1, got: 0 });
    };
    let raters: usize = first.iter().sum();
    if raters < 2 {
        return Err(StatsError::TooFew {
            needed: 2,
            got: raters,
        });
    }
    let k = first.len();
    for (row, r) in counts.iter().enumerate() {
        let s: usize = r.iter().sum();
        if s != raters || r.len() != k {
            return Err(StatsError::RaggedRow {
                row,
                got: s,
                expected: raters,
            });
        }
    }
    let items = counts.len() as f64;
    let nr = raters as f64;
    let mut totals = vec![0usize; k];
    let mut p_bar = 0.0;
    for r in counts {
        let sq: usize = r.iter().map(|&c| c * c).sum();
        p_bar += (sq as f64 - nr) / (nr * (nr - 1.0));
        for (t, &c) in totals.iter_mut().zip(r) {
            *t += c;
        }
    }
    p_bar /= items;
    let pe: f64 = totals
        .iter()
        .map(|&t| {
            let pj = t as f64 / (items * nr);
            pj * pj
        })
        .sum();
    if pe >= 1.0 {
        return Err(StatsError::UndefinedKappa { observed: p_bar });
    }
    kappa_from(p_bar, pe, counts.len() * raters)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Pearson product-moment correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooFew {
            needed: 3,
            got: x.len(),
        });
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(StatsError::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(StatsError::ZeroVariance("y"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BhResult {
    pub adjusted: Vec<f64>,
    pub rejected: Vec<bool>,
}

/// Benjamini–Hochberg step-up adjustment; outputs are in input order.
pub fn bh_adjust(p_values: &[f64], alpha: f64) -> Result<BhResult, StatsError> {
    if let Some(&bad) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::InvalidProbability(bad));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]).then(i.cmp(&j)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &idx) in order.iter().enumerate().rev() {
        let candidate = p_values[idx] * m as f64 / (rank + 1) as f64;
        running = running.min(candidate).min(1.0);
        adjusted[idx] = running;
    }
    let rejected = adjusted.iter().map(|&a| a <= alpha).collect();
    Ok(BhResult { adjusted, rejected })
}

/// Which labels each model is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KappaReference {
    #[default]
    PanelMajority,
    /// The first reference coder (sorted by coder id).
    ReferenceLabels,
}

impl std::str::FromStr for KappaReference {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "panel-majority" => Ok(KappaReference::PanelMajority),
            "reference-labels" => Ok(KappaReference::ReferenceLabels),
            other => Err(format!(
                "unknown kappa reference `{other}` (expected panel-majority or reference-labels)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReliability {
    pub model_id: String,
    pub kappa: Option<f64>,
    pub n_decisions: usize,
    pub mean_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReliability {
    pub group_tag: String,
    pub models: Vec<ModelReliability>,
    /// Unweighted mean of the member kappas that are defined.
    pub mean_kappa: Option<f64>,
    pub mean_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityComparison {
    pub reference: KappaReference,
    pub groups: Vec<GroupReliability>,
    pub warnings: Vec<String>,
}

impl ReliabilityComparison {
    /// All models sorted by kappa, highest first. Undefined kappas sort last.
    pub fn ranking(&self) -> Vec<&ModelReliability> {
        let mut all: Vec<&ModelReliability> = self.groups.iter().flat_map(|g| &g.models).collect();
        all.sort_by(|a, b| {
            let ka = a.kappa.unwrap_or(f64::NEG_INFINITY);
            let kb = b.kappa.unwrap_or(f64::NEG_INFINITY);
            kb.total_cmp(&ka).then_with(|| a.model_id.cmp(&b.model_id))
        });
        all
    }
}

pub const UNTAGGED_GROUP: &str = "untagged";

/// Per-model Cohen's kappa against the panel majority (non-tied cells only)
/// or the reference labels, grouped by the roster's group tag.
pub fn per_model_reliability(
    ds: &PanelDataset,
    reference: KappaReference,
) -> Result<ReliabilityComparison, StatsError> {
    if ds.roster.len() < 2 {
        return Err(StatsError::TooFew {
            needed: 2,
            got: ds.roster.len(),
        });
    }
    let k = ds.label_count();
    let mut warnings = Vec::new();
    let targets: BTreeMap<CellKey, usize> = match reference {
        KappaReference::PanelMajority => {
            let mut tied = 0usize;
            let mut out = BTreeMap::new();
            for cell in ds.cells.iter().filter(|c| c.votes.len() >= MIN_PANEL_SIZE) {
                match majority_from_counts(&cell.vote_counts(k), cell.votes.len())
                    .label
                    .label()
                {
                    Some(l) => {
                        out.insert(cell.key(), l);
                    }
                    None => tied += 1,
                }
            }
            if tied > 0 {
                warnings.push(format!(
                    "{tied} tied cell(s) have no panel majority and were excluded"
                ));
            }
            out
        }
        KappaReference::ReferenceLabels => match ds.reference.primary() {
            Some((_, labels)) => labels.clone(),
            None => {
                return Err(StatsError::Degenerate(
                    "dataset has no reference labels".into(),
                ))
            }
        },
    };
    if targets.is_empty() {
        return Err(StatsError::Degenerate(
            "no cell has a defined reference label".into(),
        ));
    }

    #[derive(Default)]
    struct Acc {
        own: Vec<usize>,
        target: Vec<usize>,
        conf_sum: f64,
        votes: usize,
    }
    let mut acc: BTreeMap<&str, Acc> = ds
        .roster
        .iter()
        .map(|r| (r.model_id.as_str(), Acc::default()))
        .collect();
    for cell in &ds.cells {
        let target = targets.get(&cell.key());
        for v in &cell.votes {
            let Some(a) = acc.get_mut(v.model_id.as_str()) else {
                continue;
            };
            a.conf_sum += v.confidence_raw;
            a.votes += 1;
            if let Some(&t) = target {
                a.own.push(v.vote);
                a.target.push(t);
            }
        }
    }

    let mut groups: BTreeMap<String, Vec<ModelReliability>> = BTreeMap::new();
    let tags: BTreeMap<&str, Option<&str>> = ds
        .roster
        .iter()
        .map(|r| (r.model_id.as_str(), r.group_tag.as_deref()))
        .collect();
    for (model, a) in acc {
        if a.votes == 0 {
            warnings.push(format!("model {model} has no votes and was excluded"));
            continue;
        }
        let kappa = if a.own.is_empty() {
            warnings.push(format!("model {model} has no scorable cells"));
            None
        } else {
            match cohen_kappa(&a.own, &a.target) {
                Ok(r) => Some(r.kappa),
                Err(e) => {
                    warnings.push(format!("model {model}: {e}"));
                    None
                }
            }
        };
        let tag = tags
            .get(model)
            .copied()
            .flatten()
            .unwrap_or(UNTAGGED_GROUP)
            .to_string();
        groups.entry(tag).or_default().push(ModelReliability {
            model_id: model.to_string(),
            kappa,
            n_decisions: a.own.len(),
            mean_confidence: a.conf_sum / a.votes as f64,
        });
    }

    let groups = groups
        .into_iter()
        .map(|(group_tag, models)| {
            let kappas: Vec<f64> = models.iter().filter_map(|m| m.kappa).collect();
            let confs: Vec<f64> = models.iter().map(|m| m.mean_confidence).collect();
            GroupReliability {
                group_tag,
                mean_kappa: (!kappas.is_empty()).then(|| mean(&kappas)),
                mean_confidence: mean(&confs),
                models,
            }
        })
        .collect();
    Ok(ReliabilityComparison {
        reference,
        groups,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{DecisionCell, RosterEntry, VoteRecord};

    #[test]
    fn cohen_identical_is_one() {
        let a = [0, 1, 1, 0, 2];
        assert_eq!(cohen_kappa(&a, &a).unwrap().kappa, 1.0);
        let constant = [1, 1, 1];
        assert_eq!(cohen_kappa(&constant, &constant).unwrap().kappa, 1.0);
    }

    #[test]
    fn cohen_hand_case() {
        let r = cohen_kappa(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap();
        assert_eq!(r.observed_agreement, 0.75);
        assert_eq!(r.expected_agreement, 0.5);
        assert_eq!(r.kappa, 0.5);
        assert_eq!(r.error_rate(), 0.25);
    }

    #[test]
    fn cohen_errors() {
        assert_eq!(
            cohen_kappa(&[0, 1], &[0]),
            Err(StatsError::LengthMismatch(2, 1))
        );
        assert!(cohen_kappa(&[], &[]).is_err());
    }

    #[test]
    fn fleiss_hand_case() {
        let r = fleiss_kappa(&[vec![3, 0], vec![2, 1]]).unwrap();
        assert!((r.kappa - (-0.2)).abs() < 1e-9, "{}", r.kappa);
        assert_eq!(fleiss_kappa(&[vec![2, 0], vec![0, 2]]).unwrap().kappa, 1.0);
        assert!(matches!(
            fleiss_kappa(&[vec![3, 0]]),
            Err(StatsError::UndefinedKappa { .. })
        ));
        assert!(matches!(
            fleiss_kappa(&[vec![3, 0], vec![1, 1]]),
            Err(StatsError::RaggedRow { row: 1, .. })
        ));
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let yn: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_r(&x, &y2).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson_r(&x, &yn).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson_r(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(pearson_r(&x, &[1.0; 4]), Err(StatsError::ZeroVariance("y")));
    }

    #[test]
    fn bh_examples() {
        let r = bh_adjust(&[0.01, 0.02, 0.03, 0.04], 0.05).unwrap();
        assert!(r.rejected.iter().all(|&x| x));
        assert!(r.adjusted.iter().all(|&a| (a - 0.04).abs() < 1e-15));
        let r = bh_adjust(&[1.0], 0.05).unwrap();
        assert_eq!((r.adjusted, r.rejected), (vec![1.0], vec![false]));
        let r = bh_adjust(&[], 0.05).unwrap();
        assert!(r.adjusted.is_empty() && r.rejected.is_empty());
        assert!(bh_adjust(&[1.5], 0.05).is_err());
    }

    fn panel(votes: &[&[usize]], tags: &[&str]) -> PanelDataset {
        let cells = votes
            .iter()
            .enumerate()
            .map(|(i, vs)| DecisionCell {
                item_id: format!("i{i:02}"),
                category_id: "c".into(),
                votes: vs
                    .iter()
                    .enumerate()
                    .map(|(m, &v)| VoteRecord {
                        model_id: format!("m{m}"),
                        vote: v,
                        confidence_raw: 4.0,
                        group_tag: Some(tags[m].to_string()),
                    })
                    .collect(),
            })
            .collect();
        PanelDataset {
            dataset_id: "t".into(),
            labels: vec!["no".into(), "yes".into()],
            scale: Default::default(),
            cells,
            roster: tags
                .iter()
                .enumerate()
                .map(|(m, t)| RosterEntry {
                    model_id: format!("m{m}"),
                    group_tag: Some(t.to_string()),
                })
                .collect(),
            reference: Default::default(),
        }
    }

    #[test]
    fn model_matching_majority_has_kappa_one() {
        let ds = panel(
            &[&[1, 1, 0], &[0, 0, 0], &[1, 1, 1], &[0, 0, 1]],
            &["a", "a", "b"],
        );
        let r = per_model_reliability(&ds, KappaReference::PanelMajority).unwrap();
        let m0 = &r.groups[0].models[0];
        assert_eq!(m0.kappa, Some(1.0));
        assert_eq!(r.groups[0].mean_kappa, Some(1.0));
        assert_eq!(r.ranking().last().unwrap().model_id, "m2");
    }

    #[test]
    fn two_model_panel_uses_unanimous_cells_only() {
        let ds = panel(&[&[1, 1], &[0, 0], &[1, 0], &[0, 1]], &["a", "b"]);
        let r = per_model_reliability(&ds, KappaReference::PanelMajority).unwrap();
        assert!(r.warnings.iter().any(|w| w.contains("2 tied")));
        for g in &r.groups {
            assert_eq!(g.models[0].n_decisions, 2);
            assert_eq!(g.models[0].kappa, Some(1.0));
        }
    }

    #[test]
    fn reference_mode_requires_labels() {
        let ds = panel(&[&[1, 1], &[0, 0]], &["a", "b"]);
        assert!(per_model_reliability(&ds, KappaReference::ReferenceLabels).is_err());
    }
}
