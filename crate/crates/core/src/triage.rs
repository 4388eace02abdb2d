//! Three-tier routing, stratified audits and adjudication reports.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{CellMetrics, MajorityLabel, DEFAULT_WEIGHT};
use crate::panel::{csv_field, resolve_label, CellKey, Issue, PanelDataset};
use crate::rng::{substream, DEFAULT_SEED};
use crate::stats::{cohen_kappa, StatsError};

pub const DEFAULT_GREEN_MAX: f64 = 0.25;
pub const DEFAULT_AMBER_MAX: f64 = 0.45;
pub const DEFAULT_AUDIT_FRACTION: f64 = 0.20;

pub const PLAN_HEADER: &str = "item_id,category_id,risk_score,tier,tie_forced";
pub const AUDIT_HEADER: &str = "item_id,category_id,tier";
pub const ADJUDICATIONS_HEADER: &str =
    "item_id,category_id,expert_label,source,timestamp,adjudicator_id";

#[derive(Debug, Error)]
pub enum TriageError {
    #[error("invalid triage config: {0}")]
    Config(String),
    #[error("nothing to triage")]
    Empty,
    #[error("nothing to report")]
    NothingToReport,
    #[error("adjudication refers to unknown cell {0}")]
    UnknownCell(CellKey),
    #[error("label {label} is outside the label set of size {k}")]
    InvalidLabel { label: usize, k: usize },
    #[error("{} malformed adjudication row(s); first: {}", .0.len(), .0[0])]
    Adjudications(Vec<Issue>),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Green,
    Amber,
    Red,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Green, Tier::Amber, Tier::Red];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Green => "green",
            Tier::Amber => "amber",
            Tier::Red => "red",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "green" => Ok(Tier::Green),
            "amber" => Ok(Tier::Amber),
            "red" => Ok(Tier::Red),
            other => Err(format!("unknown tier `{other}`")),
        }
    }
}

/// Tied panels are always routed to full review.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TiePolicy {
    #[default]
    ForceRed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriageConfig {
    pub w: f64,
    pub green_max: f64,
    pub amber_max: f64,
    pub tie_policy: TiePolicy,
    pub audit_fraction: f64,
    pub seed: u64,
}

impl Default for TriageConfig {
    fn default() -> Self {
        TriageConfig {
            w: DEFAULT_WEIGHT,
            green_max: DEFAULT_GREEN_MAX,
            amber_max: DEFAULT_AMBER_MAX,
            tie_policy: TiePolicy::ForceRed,
            audit_fraction: DEFAULT_AUDIT_FRACTION,
            seed: DEFAULT_SEED,
        }
    }
}

impl TriageConfig {
    pub fn validate(&self) -> Result<(), TriageError> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(TriageError::Config(format!(
                "w = {} is outside [0, 1]",
                self.w
            )));
        }
        if !(0.0 <= self.green_max && self.green_max < self.amber_max && self.amber_max <= 1.0) {
            return Err(TriageError::Config(format!(
                "thresholds must satisfy 0 <= green_max < amber_max <= 1, got {} and {}",
                self.green_max, self.amber_max
            )));
        }
        if !(self.audit_fraction > 0.0 && self.audit_fraction <= 1.0) {
            return Err(TriageError::Config(format!(
                "audit fraction {} is outside (0, 1]",
                self.audit_fraction
            )));
        }
        Ok(())
    }
}

/// Left-closed intervals: `[0, green_max)` green, `[green_max, amber_max)` amber.
pub fn assign_tier(s: f64, cfg: &TriageConfig, tied: bool) -> Tier {
    if tied {
        Tier::Red
    } else if s < cfg.green_max {
        Tier::Green
    } else if s < cfg.amber_max {
        Tier::Amber
    } else {
        Tier::Red
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriagedCell {
    /// `risk_score` is recomputed at the plan's `w`.
    pub metrics: CellMetrics,
    pub tier: Tier,
    /// Routed to red by the tie policy rather than by its score.
    pub tie_forced: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierCount {
    pub tier: Tier,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriagePlan {
    pub cells: Vec<TriagedCell>,
    pub tiers: Vec<TierCount>,
    pub config: TriageConfig,
}

impl TriagePlan {
    pub fn count(&self, tier: Tier) -> usize {
        self.tiers[tier.index()].count
    }

    pub fn fraction(&self, tier: Tier) -> f64 {
        self.tiers[tier.index()].fraction
    }

    pub fn tier_of(&self, key: &CellKey) -> Option<Tier> {
        self.position(key).map(|i| self.cells[i].tier)
    }

    fn position(&self, key: &CellKey) -> Option<usize> {
        self.cells
            .binary_search_by(|c| {
                (c.metrics.item_id.as_str(), c.metrics.category_id.as_str())
                    .cmp(&(key.item_id.as_str(), key.category_id.as_str()))
            })
            .ok()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(PLAN_HEADER);
        out.push('\n');
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                csv_field(&c.metrics.item_id),
                csv_field(&c.metrics.category_id),
                c.metrics.risk_score,
                c.tier,
                c.tie_forced
            ));
        }
        out
    }
}

pub fn triage_dataset(
    metrics: &[CellMetrics],
    cfg: &TriageConfig,
) -> Result<TriagePlan, TriageError> {
    cfg.validate()?;
    if metrics.is_empty() {
        return Err(TriageError::Empty);
    }
    let mut cells: Vec<TriagedCell> = metrics
        .iter()
        .map(|m| {
            let mut m = m.clone();
            m.risk_score = m
                .risk_at(cfg.w)
                .map_err(|e| TriageError::Config(e.to_string()))?;
            let tied = m.is_tied();
            let tier = assign_tier(m.risk_score, cfg, tied);
            let tie_forced = tied && assign_tier(m.risk_score, cfg, false) != Tier::Red;
            Ok(TriagedCell {
                metrics: m,
                tier,
                tie_forced,
            })
        })
        .collect::<Result<_, TriageError>>()?;
    cells.sort_by(|a, b| {
        (a.metrics.item_id.as_str(), a.metrics.category_id.as_str())
            .cmp(&(b.metrics.item_id.as_str(), b.metrics.category_id.as_str()))
    });
    let mut counts = [0usize; 3];
    for c in &cells {
        counts[c.tier.index()] += 1;
    }
    let n = cells.len() as f64;
    let tiers = Tier::ALL
        .iter()
        .map(|&tier| TierCount {
            tier,
            count: counts[tier.index()],
            fraction: counts[tier.index()] as f64 / n,
        })
        .collect();
    Ok(TriagePlan {
        cells,
        tiers,
        config: *cfg,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub item_id: String,
    pub category_id: String,
    pub tier: Tier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSample {
    pub fraction: f64,
    pub seed: u64,
    /// Tier order, then canonical cell order within a tier.
    pub entries: Vec<AuditEntry>,
    pub notes: Vec<String>,
}

impl AuditSample {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(AUDIT_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{}\n",
                csv_field(&e.item_id),
                csv_field(&e.category_id),
                e.tier
            ));
        }
        out
    }
}

/// Cells drawn from a tier of `size` cells.
pub fn audit_size(fraction: f64, size: usize) -> usize {
    ((fraction * size as f64 - 1e-9).ceil().max(0.0) as usize).min(size)
}

/// Simple random sample without replacement of `ceil(fraction * size)`
/// cells from every tier. Tier `t` draws from substream `t` of `seed`.
pub fn audit_sample(
    plan: &TriagePlan,
    fraction: f64,
    seed: u64,
) -> Result<AuditSample, TriageError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TriageError::Config(format!(
            "audit fraction {fraction} is outside (0, 1]"
        )));
    }
    let mut entries = Vec::new();
    let mut notes = Vec::new();
    for tier in Tier::ALL {
        let members: Vec<&TriagedCell> = plan.cells.iter().filter(|c| c.tier == tier).collect();
        if members.is_empty() {
            notes.push(format!("{tier} tier is empty; skipped"));
            continue;
        }
        let m = audit_size(fraction, members.len());
        let mut rng = substream(seed, tier.index() as u64);
        let mut picked = index::sample(&mut rng, members.len(), m).into_vec();
        picked.sort_unstable();
        entries.extend(picked.into_iter().map(|i| AuditEntry {
            item_id: members[i].metrics.item_id.clone(),
            category_id: members[i].metrics.category_id.clone(),
            tier,
        }));
    }
    Ok(AuditSample {
        fraction,
        seed,
        entries,
        notes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjudicationSource {
    Audit,
    FullReview,
}

impl AdjudicationSource {
    pub fn as_str(self) -> &'static str {
        match self {
            AdjudicationSource::Audit => "audit",
            AdjudicationSource::FullReview => "full-review",
        }
    }
}

impl FromStr for AdjudicationSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "audit" => Ok(AdjudicationSource::Audit),
            "full-review" => Ok(AdjudicationSource::FullReview),
            other => Err(format!(
                "unknown source `{other}`, expected audit or full-review"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjudication {
    pub item_id: String,
    pub category_id: String,
    pub expert_label: usize,
    pub source: AdjudicationSource,
    pub timestamp: String,
    pub adjudicator_id: String,
}

impl Adjudication {
    pub fn key(&self) -> CellKey {
        CellKey::new(self.item_id.clone(), self.category_id.clone())
    }
}

pub fn adjudications_csv(adjudications: &[Adjudication]) -> String {
    let mut out = String::from(ADJUDICATIONS_HEADER);
    out.push('\n');
    for a in adjudications {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            csv_field(&a.item_id),
            csv_field(&a.category_id),
            a.expert_label,
            a.source.as_str(),
            csv_field(&a.timestamp),
            csv_field(&a.adjudicator_id)
        ));
    }
    out
}

/// Parses an adjudication CSV against `ds`. Every bad row is reported;
/// rows are numbered by file line with the header on line 1.
pub fn parse_adjudications<R: Read>(
    reader: R,
    ds: &PanelDataset,
) -> Result<Vec<Adjudication>, TriageError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header: Vec<String> = match rdr.headers() {
        Ok(h) => h.iter().map(|s| s.trim().to_string()).collect(),
        Err(e) => {
            return Err(TriageError::Adjudications(vec![Issue::new(
                Some(1),
                "header",
                e.to_string(),
            )]))
        }
    };
    let col = |name: &str| header.iter().position(|h| h == name);
    let required = ["item_id", "category_id", "expert_label"];
    let missing: Vec<Issue> = required
        .iter()
        .filter(|n| col(n).is_none())
        .map(|n| Issue::new(Some(1), "header", format!("missing column `{n}`")))
        .collect();
    if !missing.is_empty() {
        return Err(TriageError::Adjudications(missing));
    }
    let (ci, cc, cl) = (
        col("item_id").unwrap(),
        col("category_id").unwrap(),
        col("expert_label").unwrap(),
    );
    let (cs, ct, ca) = (col("source"), col("timestamp"), col("adjudicator_id"));
    let k = ds.label_count();

    let mut out = Vec::new();
    let mut issues = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                issues.push(Issue::new(Some(row), "row", e.to_string()));
                continue;
            }
        };
        let get = |c: usize| rec.get(c).map(str::trim).unwrap_or("");
        let item_id = get(ci);
        let category_id = get(cc);
        if item_id.is_empty() || category_id.is_empty() {
            issues.push(Issue::new(Some(row), "item_id", "empty cell identifier"));
            continue;
        }
        let key = CellKey::new(item_id, category_id);
        if ds.cell(&key).is_none() {
            issues.push(Issue::new(
                Some(row),
                "item_id",
                format!("unknown cell {key}"),
            ));
            continue;
        }
        let Some(expert_label) = resolve_label(&ds.labels, get(cl)).filter(|&l| l < k) else {
            issues.push(Issue::new(
                Some(row),
                "expert_label",
                format!("`{}` is not in the label set", get(cl)),
            ));
            continue;
        };
        let source = match cs.map(get).filter(|s| !s.is_empty()) {
            None => AdjudicationSource::FullReview,
            Some(s) => match s.parse() {
                Ok(s) => s,
                Err(e) => {
                    issues.push(Issue::new(Some(row), "source", e));
                    continue;
                }
            },
        };
        out.push(Adjudication {
            item_id: item_id.to_string(),
            category_id: category_id.to_string(),
            expert_label,
            source,
            timestamp: ct.map(get).unwrap_or("").to_string(),
            adjudicator_id: ca.map(get).unwrap_or("").to_string(),
        });
    }
    if issues.is_empty() {
        Ok(out)
    } else {
        Err(TriageError::Adjudications(issues))
    }
}

/// Final label per cell: later entries supersede earlier ones.
pub fn final_labels(adjudications: &[Adjudication]) -> BTreeMap<CellKey, usize> {
    adjudications
        .iter()
        .map(|a| (a.key(), a.expert_label))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierConcentration {
    pub tier: Tier,
    pub cells: usize,
    pub item_share: f64,
    pub adjudicated: usize,
    pub errors: usize,
    /// Share of all adjudicated errors; 0 when there are none.
    pub error_share: f64,
    /// Errors among adjudicated cells of the tier; `None` if none were adjudicated.
    pub residual_rate: Option<f64>,
    /// `residual_rate × cells`.
    pub extrapolated_errors: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub tiers: Vec<TierConcentration>,
    pub adjudicated: usize,
    pub errors: usize,
    pub overall_error_rate: Option<f64>,
    pub kappa_before: Option<f64>,
    pub kappa_after: Option<f64>,
    pub notes: Vec<String>,
}

/// AI majority as a label index; a tie becomes the extra index `k` so it
/// never matches an expert label.
fn ai_label(m: &MajorityLabel, k: usize) -> usize {
    m.label().unwrap_or(k)
}

struct Compared {
    truth: Vec<usize>,
    before: Vec<usize>,
    after: Vec<usize>,
    decisions: usize,
}

fn compare(
    plan: &TriagePlan,
    finals: &BTreeMap<CellKey, usize>,
    k: usize,
) -> Result<Compared, TriageError> {
    let mut c = Compared {
        truth: Vec::new(),
        before: Vec::new(),
        after: Vec::new(),
        decisions: 0,
    };
    for (key, &label) in finals {
        let i = plan
            .position(key)
            .ok_or_else(|| TriageError::UnknownCell(key.clone()))?;
        if label >= k {
            return Err(TriageError::InvalidLabel { label, k });
        }
        let cell = &plan.cells[i];
        let ai = ai_label(&cell.metrics.majority_label, k);
        c.truth.push(label);
        c.before.push(ai);
        c.after
            .push(if cell.tier == Tier::Green { ai } else { label });
        c.decisions += cell.metrics.panel_size;
    }
    Ok(c)
}

fn kappa_or_note(a: &[usize], b: &[usize], what: &str, notes: &mut Vec<String>) -> Option<f64> {
    if a.is_empty() {
        return None;
    }
    match cohen_kappa(a, b) {
        Ok(r) => Some(r.kappa),
        Err(e) => {
            notes.push(format!("{what}: {e}"));
            None
        }
    }
}

/// `k` is the size of the label set.
pub fn error_concentration(
    plan: &TriagePlan,
    adjudications: &[Adjudication],
    k: usize,
) -> Result<ConcentrationReport, TriageError> {
    let finals = final_labels(adjudications);
    let cmp = compare(plan, &finals, k)?;
    let mut notes = Vec::new();

    let mut adjudicated = [0usize; 3];
    let mut errors = [0usize; 3];
    for (key, &label) in &finals {
        let cell = &plan.cells[plan.position(key).expect("checked in compare")];
        let t = cell.tier.index();
        adjudicated[t] += 1;
        if ai_label(&cell.metrics.majority_label, k) != label {
            errors[t] += 1;
        }
    }
    let total_errors: usize = errors.iter().sum();
    let total_cells = plan.cells.len() as f64;
    let tiers = Tier::ALL
        .iter()
        .map(|&tier| {
            let t = tier.index();
            let cells = plan.count(tier);
            let residual_rate =
                (adjudicated[t] > 0).then(|| errors[t] as f64 / adjudicated[t] as f64);
            if adjudicated[t] == 0 && cells > 0 {
                notes.push(format!(
                    "{tier} tier has no adjudicated cells; residual rate not estimated"
                ));
            }
            TierConcentration {
                tier,
                cells,
                item_share: cells as f64 / total_cells,
                adjudicated: adjudicated[t],
                errors: errors[t],
                error_share: if total_errors > 0 {
                    errors[t] as f64 / total_errors as f64
                } else {
                    0.0
                },
                residual_rate,
                extrapolated_errors: residual_rate.map(|r| r * cells as f64),
            }
        })
        .collect();
    let n_adj = finals.len();
    let kappa_before = kappa_or_note(&cmp.before, &cmp.truth, "kappa before review", &mut notes);
    let kappa_after = kappa_or_note(&cmp.after, &cmp.truth, "kappa after review", &mut notes);
    if n_adj == 0 {
        notes.push("no adjudications recorded".into());
    }
    Ok(ConcentrationReport {
        tiers,
        adjudicated: n_adj,
        errors: total_errors,
        overall_error_rate: (n_adj > 0).then(|| total_errors as f64 / n_adj as f64),
        kappa_before,
        kappa_after,
        notes,
    })
}

/// Review cost per cell in each tier, relative to coding a cell by hand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub green: f64,
    pub amber: f64,
    pub red: f64,
}

impl CostWeights {
    pub fn validate(&self) -> Result<(), TriageError> {
        for (name, v) in [
            ("green", self.green),
            ("amber", self.amber),
            ("red", self.red),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TriageError::Config(format!(
                    "{name} cost must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    fn of(&self, tier: Tier) -> f64 {
        match tier {
            Tier::Green => self.green,
            Tier::Amber => self.amber,
            Tier::Red => self.red,
        }
    }
}

/// Parses `green,amber,red`, e.g. `0.05,0.3,1`.
impl FromStr for CostWeights {
    type Err = TriageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [g, a, r] = parts.as_slice() else {
            return Err(TriageError::Config(format!(
                "expected three comma-separated costs, got `{s}`"
            )));
        };
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| TriageError::Config(format!("cost `{v}` is not a number")))
        };
        let w = CostWeights {
            green: num(g)?,
            amber: num(a)?,
            red: num(r)?,
        };
        w.validate()?;
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffortEstimate {
    pub weights: CostWeights,
    /// Workflow cost over the cost of coding every cell by hand.
    pub relative_effort: f64,
    /// `1 - relative_effort`.
    pub reduction: f64,
}

pub fn review_effort(
    plan: &TriagePlan,
    weights: &CostWeights,
) -> Result<EffortEstimate, TriageError> {
    weights.validate()?;
    let relative_effort: f64 = plan
        .tiers
        .iter()
        .map(|t| t.fraction * weights.of(t.tier))
        .sum();
    Ok(EffortEstimate {
        weights: *weights,
        relative_effort,
        reduction: 1.0 - relative_effort,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub condition: String,
    pub kappa: Option<f64>,
    pub error_rate: Option<f64>,
    /// Individual decisions behind the row.
    pub decisions: usize,
    /// Cells compared.
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowReport {
    pub rows: Vec<ReliabilityRow>,
    pub tiers: Vec<TierCount>,
    pub concentration: ConcentrationReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effort: Option<EffortEstimate>,
    pub notes: Vec<String>,
}

pub const HUMAN_PAIR_ROW: &str = "Human pair";
pub const AI_MAJORITY_ROW: &str = "AI majority";
pub const WORKFLOW_ROW: &str = "Three-tier workflow (AI + expert)";

fn row(
    condition: &str,
    a: &[usize],
    b: &[usize],
    decisions: usize,
    notes: &mut Vec<String>,
) -> ReliabilityRow {
    let kappa = kappa_or_note(a, b, condition, notes);
    let error_rate = (!a.is_empty())
        .then(|| a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64);
    ReliabilityRow {
        condition: condition.to_string(),
        kappa,
        error_rate,
        decisions,
        cells: a.len(),
    }
}

/// Human pair versus AI majority versus the reviewed workflow. AI rows are
/// scored against the final adjudicated labels.
pub fn workflow_report(
    ds: &PanelDataset,
    plan: &TriagePlan,
    adjudications: &[Adjudication],
) -> Result<WorkflowReport, TriageError> {
    if ds.cells.is_empty() || plan.cells.is_empty() {
        return Err(TriageError::NothingToReport);
    }
    let k = ds.label_count();
    let concentration = error_concentration(plan, adjudications, k)?;
    let mut notes = Vec::new();
    let mut rows = Vec::new();

    match ds.reference.pair() {
        Some([(_, first), (_, second)]) => {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (key, &l) in first {
                if let Some(&m) = second.get(key) {
                    a.push(l);
                    b.push(m);
                }
            }
            let decisions = 2 * a.len();
            rows.push(row(HUMAN_PAIR_ROW, &a, &b, decisions, &mut notes));
        }
        None => notes.push("fewer than two reference coders; human pair row omitted".into()),
    }

    let cmp = compare(plan, &final_labels(adjudications), k)?;
    if cmp.truth.is_empty() {
        notes.push("no adjudications; AI rows have no ground truth".into());
    }
    rows.push(row(
        AI_MAJORITY_ROW,
        &cmp.before,
        &cmp.truth,
        cmp.decisions,
        &mut notes,
    ));
    rows.push(row(
        WORKFLOW_ROW,
        &cmp.after,
        &cmp.truth,
        cmp.decisions,
        &mut notes,
    ));
    Ok(WorkflowReport {
        rows,
        tiers: plan.tiers.clone(),
        concentration,
        effort: None,
        notes,
    })
}

impl WorkflowReport {
    pub fn row(&self, condition: &str) -> Option<&ReliabilityRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    /// Plain-text table: condition, kappa, error rate (%), decisions.
    pub fn render_text(&self) -> String {
        let opt = |v: Option<f64>, scale: f64, digits: usize| match v {
            Some(x) => format!("{:.*}", digits, x * scale),
            None => "n/a".to_string(),
        };
        let mut out = format!(
            "{:<36} {:>8} {:>15} {:>14}\n",
            "Condition", "kappa", "Error rate (%)", "Decisions (n)"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<36} {:>8} {:>15} {:>14}\n",
                r.condition,
                opt(r.kappa, 1.0, 2),
                opt(r.error_rate, 100.0, 1),
                r.decisions
            ));
        }
        out.push('\n');
        out.push_str(&format!(
            "{:<6} {:>6} {:>10} {:>10} {:>8} {:>12} {:>14}\n",
            "Tier", "Cells", "Share", "Adjudic.", "Errors", "Error share", "Residual rate"
        ));
        for t in &self.concentration.tiers {
            out.push_str(&format!(
                "{:<6} {:>6} {:>10.3} {:>10} {:>8} {:>12.3} {:>14}\n",
                t.tier.as_str(),
                t.cells,
                t.item_share,
                t.adjudicated,
                t.errors,
                t.error_share,
                opt(t.residual_rate, 1.0, 3)
            ));
        }
        let green = self
            .tiers
            .iter()
            .find(|t| t.tier == Tier::Green)
            .map_or(0.0, |t| t.fraction);
        out.push_str(&format!(
            "\nAuto-accepted share: {:.1}% of cells; the amber and red shares are the review workload.\n",
            green * 100.0
        ));
        if let Some(e) = &self.effort {
            out.push_str(&format!(
                "Review effort at costs green {} / amber {} / red {}: {:.1}% of full manual coding ({:.1}% reduction).\n",
                e.weights.green,
                e.weights.amber,
                e.weights.red,
                e.relative_effort * 100.0,
                e.reduction * 100.0
            ));
        }
        for n in self.notes.iter().chain(&self.concentration.notes) {
            out.push_str(&format!("note: {n}\n"));
        }
        out
    }
}
