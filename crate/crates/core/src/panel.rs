//! Panel data model: votes, decision cells, datasets, and ingestion of the
//! CSV / JSONL decision interchange formats.
//!
//! A [`PanelDataset`] is built once and then treated as immutable. Parsing
//! always returns the dataset in canonical order (cells by
//! `(item_id, category_id)`, votes by `model_id`), so two files holding the
//! same records in different row orders produce identical datasets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum number of votes a cell needs before metrics are computed.
pub const MIN_PANEL_SIZE: usize = 2;

/// Header of the decisions CSV interchange format.
pub const DECISIONS_HEADER: [&str; 6] = [
    "item_id",
    "category_id",
    "model_id",
    "vote",
    "confidence",
    "group_tag",
];

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("dataset failed validation with {} error(s); first: {}", .0.errors.len(), .0.first_error())]
    Invalid(ValidationReport),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PanelError {
    fn parse(row: usize, message: impl Into<String>) -> Self {
        PanelError::Parse {
            row,
            message: message.into(),
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        PanelError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Declared bounds of the self-reported confidence scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceScale {
    pub min: f64,
    pub max: f64,
}

impl Default for ConfidenceScale {
    fn default() -> Self {
        ConfidenceScale { min: 1.0, max: 5.0 }
    }
}

impl ConfidenceScale {
    pub fn new(min: f64, max: f64) -> Result<Self, PanelError> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(PanelError::Manifest(format!(
                "confidence scale must satisfy min < max, got [{min}, {max}]"
            )));
        }
        Ok(ConfidenceScale { min, max })
    }

    pub fn contains(&self, raw: f64) -> bool {
        raw.is_finite() && raw >= self.min && raw <= self.max
    }

    /// Affine map of a raw rating onto `[0, 1]`.
    pub fn normalize(&self, raw: f64) -> f64 {
        (raw - self.min) / (self.max - self.min)
    }

    pub fn denormalize(&self, norm: f64) -> f64 {
        self.min + norm * (self.max - self.min)
    }
}

/// Identifies one coding point.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub item_id: String,
    pub category_id: String,
}

impl CellKey {
    pub fn new(item_id: impl Into<String>, category_id: impl Into<String>) -> Self {
        CellKey {
            item_id: item_id.into(),
            category_id: category_id.into(),
        }
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.item_id, self.category_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub model_id: String,
    /// 0-based index into the dataset label set.
    pub vote: usize,
    pub confidence_raw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionCell {
    pub item_id: String,
    pub category_id: String,
    pub votes: Vec<VoteRecord>,
}

impl DecisionCell {
    pub fn key(&self) -> CellKey {
        CellKey::new(self.item_id.clone(), self.category_id.clone())
    }

    pub fn panel_size(&self) -> usize {
        self.votes.len()
    }

    /// Vote counts per label index. Votes at or beyond `k` are ignored.
    pub fn vote_counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0; k];
        for v in &self.votes {
            if let Some(c) = counts.get_mut(v.vote) {
                *c += 1;
            }
        }
        counts
    }

    fn sort_votes(&mut self) {
        self.votes.sort_by(|a, b| a.model_id.cmp(&b.model_id));
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RosterEntry {
    pub model_id: String,
    pub group_tag: Option<String>,
}

/// Human or gold labels keyed by coder. Single-coder files use the coder id
/// [`ReferenceLabels::DEFAULT_CODER`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLabels {
    pub coders: BTreeMap<String, BTreeMap<CellKey, usize>>,
}

impl ReferenceLabels {
    pub const DEFAULT_CODER: &'static str = "reference";

    pub fn is_empty(&self) -> bool {
        self.coders.values().all(|m| m.is_empty())
    }

    /// Labels of the first coder in sorted order.
    pub fn primary(&self) -> Option<(&str, &BTreeMap<CellKey, usize>)> {
        self.coders.iter().next().map(|(k, v)| (k.as_str(), v))
    }

    /// The first two coders in sorted order, when at least two exist.
    pub fn pair(&self) -> Option<[(&str, &BTreeMap<CellKey, usize>); 2]> {
        let mut it = self.coders.iter();
        let a = it.next()?;
        let b = it.next()?;
        Some([(a.0.as_str(), a.1), (b.0.as_str(), b.1)])
    }

    pub fn insert(&mut self, coder: &str, key: CellKey, label: usize) -> Option<usize> {
        self.coders
            .entry(coder.to_string())
            .or_default()
            .insert(key, label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("item_id,category_id,label,coder_id\n");
        for (coder, labels) in &self.coders {
            for (key, label) in labels {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    csv_field(&key.item_id),
                    csv_field(&key.category_id),
                    label,
                    csv_field(coder)
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    pub dataset_id: String,
    pub labels: Vec<String>,
    pub scale: ConfidenceScale,
    pub cells: Vec<DecisionCell>,
    pub roster: Vec<RosterEntry>,
    #[serde(default)]
    pub reference: ReferenceLabels,
}

impl PanelDataset {
    pub fn label_count(&self) -> usize {
        self.labels.len()
    }

    pub fn vote_count(&self) -> usize {
        self.cells.iter().map(|c| c.votes.len()).sum()
    }

    /// Sorts cells and votes into canonical order and rebuilds the roster.
    pub fn canonicalize(&mut self) {
        for cell in &mut self.cells {
            cell.sort_votes();
        }
        self.cells.sort_by(|a, b| {
            (a.item_id.as_str(), a.category_id.as_str())
                .cmp(&(b.item_id.as_str(), b.category_id.as_str()))
        });
        let mut roster: BTreeMap<String, Option<String>> = self
            .roster
            .iter()
            .map(|r| (r.model_id.clone(), r.group_tag.clone()))
            .collect();
        for v in self.cells.iter().flat_map(|c| &c.votes) {
            let entry = roster.entry(v.model_id.clone()).or_insert(None);
            if entry.is_none() {
                *entry = v.group_tag.clone();
            }
        }
        self.roster = roster
            .into_iter()
            .map(|(model_id, group_tag)| RosterEntry {
                model_id,
                group_tag,
            })
            .collect();
    }

    /// Looks up a cell. Requires canonical order.
    pub fn cell(&self, key: &CellKey) -> Option<&DecisionCell> {
        self.cells
            .binary_search_by(|c| {
                (c.item_id.as_str(), c.category_id.as_str())
                    .cmp(&(key.item_id.as_str(), key.category_id.as_str()))
            })
            .ok()
            .map(|i| &self.cells[i])
    }

    /// Distinct item ids in canonical order.
    pub fn item_ids(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.cells.iter().map(|c| c.item_id.as_str()).collect();
        set.into_iter().collect()
    }

    pub fn category_ids(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.cells.iter().map(|c| c.category_id.as_str()).collect();
        set.into_iter().collect()
    }

    /// Resolves a label given either as an index or a label name.
    pub fn resolve_label(&self, raw: &str) -> Option<usize> {
        resolve_label(&self.labels, raw)
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            dataset_id: self.dataset_id.clone(),
            labels: self.labels.clone(),
            scale: self.scale,
            reference_labels_path: None,
        }
    }

    /// Canonical decisions CSV. Byte-identical for datasets holding the same
    /// records regardless of their original order.
    pub fn to_canonical_csv(&self) -> String {
        let mut cells: Vec<&DecisionCell> = self.cells.iter().collect();
        cells.sort_by(|a, b| {
            (a.item_id.as_str(), a.category_id.as_str())
                .cmp(&(b.item_id.as_str(), b.category_id.as_str()))
        });
        let mut out = DECISIONS_HEADER.join(",");
        out.push('\n');
        for cell in cells {
            let mut votes: Vec<&VoteRecord> = cell.votes.iter().collect();
            votes.sort_by(|a, b| a.model_id.cmp(&b.model_id));
            for v in votes {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    csv_field(&cell.item_id),
                    csv_field(&cell.category_id),
                    csv_field(&v.model_id),
                    v.vote,
                    v.confidence_raw,
                    csv_field(v.group_tag.as_deref().unwrap_or(""))
                ));
            }
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for cell in &self.cells {
            for v in &cell.votes {
                let rec = RawRecord {
                    item_id: cell.item_id.clone(),
                    category_id: cell.category_id.clone(),
                    model_id: v.model_id.clone(),
                    vote: v.vote as i64,
                    confidence: v.confidence_raw,
                    group_tag: v.group_tag.clone(),
                };
                out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                out.push('\n');
            }
        }
        out
    }
}

pub(crate) fn resolve_label(labels: &[String], raw: &str) -> Option<usize> {
    let raw = raw.trim();
    if let Ok(i) = raw.parse::<usize>() {
        return (i < labels.len()).then_some(i);
    }
    labels.iter().position(|l| l == raw)
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Dataset manifest (`manifest.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub labels: Vec<String>,
    #[serde(default)]
    pub scale: ConfidenceScale,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_labels_path: Option<String>,
}

impl DatasetManifest {
    /// Binary label set `["no", "yes"]` on the default 1–5 scale.
    pub fn binary(dataset_id: impl Into<String>) -> Self {
        DatasetManifest {
            dataset_id: dataset_id.into(),
            labels: vec!["no".into(), "yes".into()],
            scale: ConfidenceScale::default(),
            reference_labels_path: None,
        }
    }

    pub fn check(&self) -> Result<(), PanelError> {
        if self.dataset_id.trim().is_empty() {
            return Err(PanelError::Manifest("dataset_id is empty".into()));
        }
        if self.labels.len() < 2 {
            return Err(PanelError::Manifest(format!(
                "label set needs at least 2 labels, got {}",
                self.labels.len()
            )));
        }
        let distinct: BTreeSet<&String> = self.labels.iter().collect();
        if distinct.len() != self.labels.len() {
            return Err(PanelError::Manifest("label names must be distinct".into()));
        }
        ConfidenceScale::new(self.scale.min, self.scale.max)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Csv,
    Jsonl,
}

impl InputFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(InputFormat::Csv),
            "jsonl" | "ndjson" => Some(InputFormat::Jsonl),
            _ => None,
        }
    }
}

impl FromStr for InputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(InputFormat::Csv),
            "jsonl" => Ok(InputFormat::Jsonl),
            other => Err(format!("unknown format `{other}` (expected csv or jsonl)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub row: Option<usize>,
    pub field: String,
    pub message: String,
}

impl Issue {
    pub(crate) fn new(row: Option<usize>, field: &str, message: impl Into<String>) -> Self {
        Issue {
            row,
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.row {
            Some(r) => write!(f, "row {r}, {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub cells: usize,
    pub votes: usize,
    pub models: usize,
    pub categories: usize,
    pub items: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
    pub counts: DatasetCounts,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }

    fn first_error(&self) -> String {
        self.errors
            .first()
            .map(|e| e.to_string())
            .unwrap_or_default()
    }
}

/// Checks every dataset invariant. Never fails; problems are reported.
pub fn validate_dataset(ds: &PanelDataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    let k = ds.labels.len();
    if k < 2 {
        report.errors.push(Issue::new(
            None,
            "labels",
            format!("label set needs at least 2 labels, got {k}"),
        ));
    }
    if !(ds.scale.min.is_finite() && ds.scale.max.is_finite() && ds.scale.min < ds.scale.max) {
        report.errors.push(Issue::new(
            None,
            "scale",
            format!("invalid scale [{}, {}]", ds.scale.min, ds.scale.max),
        ));
    }
    let roster: BTreeSet<&str> = ds.roster.iter().map(|r| r.model_id.as_str()).collect();
    let mut seen_cells: BTreeSet<(&str, &str)> = BTreeSet::new();
    let mut models: BTreeSet<&str> = BTreeSet::new();
    for (idx, cell) in ds.cells.iter().enumerate() {
        let row = Some(idx + 1);
        if !seen_cells.insert((&cell.item_id, &cell.category_id)) {
            report.errors.push(Issue::new(
                row,
                "cell",
                format!("duplicate cell {}/{}", cell.item_id, cell.category_id),
            ));
        }
        if cell.votes.len() < MIN_PANEL_SIZE {
            report.warnings.push(Issue::new(
                row,
                "votes",
                format!(
                    "cell below minimum panel size ({} < {MIN_PANEL_SIZE}) at {}/{}",
                    cell.votes.len(),
                    cell.item_id,
                    cell.category_id
                ),
            ));
        }
        let mut cell_models: BTreeSet<&str> = BTreeSet::new();
        for v in &cell.votes {
            models.insert(&v.model_id);
            if !cell_models.insert(&v.model_id) {
                report.errors.push(Issue::new(
                    row,
                    "model_id",
                    format!(
                        "duplicate model vote by {} at {}/{}",
                        v.model_id, cell.item_id, cell.category_id
                    ),
                ));
            }
            if !roster.contains(v.model_id.as_str()) {
                report.errors.push(Issue::new(
                    row,
                    "model_id",
                    format!("model {} is not in the roster", v.model_id),
                ));
            }
            if v.vote >= k {
                report.errors.push(Issue::new(
                    row,
                    "vote",
                    format!("vote {} outside label set of size {k}", v.vote),
                ));
            }
            if !ds.scale.contains(v.confidence_raw) {
                report.errors.push(Issue::new(
                    row,
                    "confidence",
                    format!(
                        "confidence {} out of range [{}, {}]",
                        v.confidence_raw, ds.scale.min, ds.scale.max
                    ),
                ));
            }
        }
    }
    for (coder, labels) in &ds.reference.coders {
        for (key, &label) in labels {
            if label >= k {
                report.errors.push(Issue::new(
                    None,
                    "reference_label",
                    format!("coder {coder}: label {label} outside label set at {key}"),
                ));
            }
            if !seen_cells.contains(&(key.item_id.as_str(), key.category_id.as_str())) {
                report.warnings.push(Issue::new(
                    None,
                    "reference_label",
                    format!("coder {coder}: no panel cell for {key}"),
                ));
            }
        }
    }
    report.counts = DatasetCounts {
        cells: ds.cells.len(),
        votes: ds.vote_count(),
        models: models.len(),
        categories: ds.category_ids().len(),
        items: ds.item_ids().len(),
    };
    report
}

/// Wire record of both interchange formats.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawRecord {
    item_id: String,
    category_id: String,
    model_id: String,
    vote: i64,
    confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group_tag: Option<String>,
}

struct RowRecord {
    row: usize,
    rec: RawRecord,
}

/// Parses a decisions stream into a canonical dataset.
///
/// Syntax problems abort with [`PanelError::Parse`] at the offending row;
/// semantic problems (confidence outside the scale, vote outside the label
/// set, duplicate `(item, category, model)`) are collected and returned
/// together as [`PanelError::Invalid`].
pub fn parse_decisions<R: Read>(
    reader: R,
    format: InputFormat,
    manifest: &DatasetManifest,
) -> Result<PanelDataset, PanelError> {
    manifest.check()?;
    let records = match format {
        InputFormat::Csv => read_csv_records(reader)?,
        InputFormat::Jsonl => read_jsonl_records(reader)?,
    };
    build_dataset(records, manifest)
}

fn read_csv_records<R: Read>(reader: R) -> Result<Vec<RowRecord>, PanelError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| PanelError::parse(1, format!("unreadable header: {e}")))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = [0usize; 5];
    for (slot, name) in idx.iter_mut().zip(DECISIONS_HEADER.iter()) {
        *slot = col(name).ok_or_else(|| {
            PanelError::parse(1, format!("header is missing required column `{name}`"))
        })?;
    }
    let group_col = col("group_tag");

    let mut out = Vec::new();
    for result in rdr.records() {
        let record = result.map_err(|e| {
            let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
            PanelError::parse(row, format!("malformed row: {e}"))
        })?;
        let row = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("");
        let vote = field(idx[3]).parse::<i64>().map_err(|_| {
            PanelError::parse(row, format!("vote `{}` is not an integer", field(idx[3])))
        })?;
        let confidence = field(idx[4]).parse::<f64>().map_err(|_| {
            PanelError::parse(
                row,
                format!("confidence `{}` is not a number", field(idx[4])),
            )
        })?;
        let group_tag = group_col
            .map(field)
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        out.push(RowRecord {
            row,
            rec: RawRecord {
                item_id: field(idx[0]).to_string(),
                category_id: field(idx[1]).to_string(),
                model_id: field(idx[2]).to_string(),
                vote,
                confidence,
                group_tag,
            },
        });
    }
    Ok(out)
}

fn read_jsonl_records<R: Read>(reader: R) -> Result<Vec<RowRecord>, PanelError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let row = i + 1;
        let line = line.map_err(|e| PanelError::parse(row, format!("unreadable line: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: RawRecord = serde_json::from_str(&line)
            .map_err(|e| PanelError::parse(row, format!("malformed record: {e}")))?;
        if rec.group_tag.as_deref() == Some("") {
            rec.group_tag = None;
        }
        out.push(RowRecord { row, rec });
    }
    Ok(out)
}

fn build_dataset(
    records: Vec<RowRecord>,
    manifest: &DatasetManifest,
) -> Result<PanelDataset, PanelError> {
    let k = manifest.labels.len();
    let scale = manifest.scale;
    let mut report = ValidationReport::default();
    let mut cells: BTreeMap<(String, String), Vec<VoteRecord>> = BTreeMap::new();
    let mut seen: BTreeMap<(String, String, String), usize> = BTreeMap::new();
    let mut groups: BTreeMap<String, (Option<String>, usize)> = BTreeMap::new();

    for RowRecord { row, rec } in records {
        for (field, value) in [
            ("item_id", &rec.item_id),
            ("category_id", &rec.category_id),
            ("model_id", &rec.model_id),
        ] {
            if value.is_empty() {
                report.errors.push(Issue::new(
                    Some(row),
                    field,
                    format!("{field} is empty, row {row}"),
                ));
            }
        }
        if rec.vote < 0 || rec.vote as usize >= k {
            report.errors.push(Issue::new(
                Some(row),
                "vote",
                format!("vote {} outside label set of size {k}, row {row}", rec.vote),
            ));
        }
        if !scale.contains(rec.confidence) {
            report.errors.push(Issue::new(
                Some(row),
                "confidence",
                format!("confidence out of range, row {row}"),
            ));
        }
        let key3 = (
            rec.item_id.clone(),
            rec.category_id.clone(),
            rec.model_id.clone(),
        );
        if let Some(first) = seen.insert(key3, row) {
            report.errors.push(Issue::new(
                Some(row),
                "model_id",
                format!(
                    "duplicate model vote by {} for {}/{}, row {row} (first at row {first})",
                    rec.model_id, rec.item_id, rec.category_id
                ),
            ));
            continue;
        }
        match groups.get(&rec.model_id) {
            Some((tag, first)) if *tag != rec.group_tag => {
                report.errors.push(Issue::new(
                    Some(row),
                    "group_tag",
                    format!(
                        "model {} has group_tag {:?} but row {first} declared {:?}",
                        rec.model_id, rec.group_tag, tag
                    ),
                ));
            }
            Some(_) => {}
            None => {
                groups.insert(rec.model_id.clone(), (rec.group_tag.clone(), row));
            }
        }
        cells
            .entry((rec.item_id, rec.category_id))
            .or_default()
            .push(VoteRecord {
                model_id: rec.model_id,
                vote: rec.vote.max(0) as usize,
                confidence_raw: rec.confidence,
                group_tag: rec.group_tag,
            });
    }

    if !report.errors.is_empty() {
        report.errors.sort_by_key(|e| e.row);
        return Err(PanelError::Invalid(report));
    }

    let mut ds = PanelDataset {
        dataset_id: manifest.dataset_id.clone(),
        labels: manifest.labels.clone(),
        scale,
        cells: cells
            .into_iter()
            .map(|((item_id, category_id), votes)| DecisionCell {
                item_id,
                category_id,
                votes,
            })
            .collect(),
        roster: groups
            .into_iter()
            .map(|(model_id, (group_tag, _))| RosterEntry {
                model_id,
                group_tag,
            })
            .collect(),
        reference: ReferenceLabels::default(),
    };
    ds.canonicalize();
    Ok(ds)
}

/// Parses a reference-labels CSV (`item_id,category_id,label[,coder_id]`).
/// Labels may be given as an index or as a label name.
pub fn parse_reference_labels<R: Read>(
    reader: R,
    labels: &[String],
) -> Result<ReferenceLabels, PanelError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| PanelError::parse(1, format!("unreadable header: {e}")))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(ic), Some(cc), Some(lc)) = (col("item_id"), col("category_id"), col("label")) else {
        return Err(PanelError::parse(
            1,
            "reference labels header must contain item_id,category_id,label",
        ));
    };
    let coder_col = col("coder_id");
    let mut out = ReferenceLabels::default();
    for result in rdr.records() {
        let record = result.map_err(|e| {
            let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
            PanelError::parse(row, format!("malformed row: {e}"))
        })?;
        let row = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let raw = record.get(lc).unwrap_or("");
        let label = resolve_label(labels, raw)
            .ok_or_else(|| PanelError::parse(row, format!("unknown label `{raw}`")))?;
        let coder = coder_col
            .and_then(|c| record.get(c))
            .filter(|s| !s.is_empty())
            .unwrap_or(ReferenceLabels::DEFAULT_CODER);
        let key = CellKey::new(record.get(ic).unwrap_or(""), record.get(cc).unwrap_or(""));
        if out.insert(coder, key.clone(), label).is_some() {
            return Err(PanelError::parse(
                row,
                format!("duplicate reference label for {key} by coder {coder}"),
            ));
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<File, PanelError> {
    File::open(path).map_err(|e| PanelError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, PanelError> {
    let text = std::fs::read_to_string(path).map_err(|e| PanelError::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| PanelError::Manifest(format!("{}: {e}", path.display())))?;
    manifest.check()?;
    Ok(manifest)
}

/// Loads a dataset from disk.
///
/// `input` is either a decisions file or a dataset directory holding
/// `manifest.json` plus `decisions.csv` / `decisions.jsonl`. When a file is
/// given without a manifest, the binary `no`/`yes` label set on a 1–5 scale
/// is assumed and the file stem becomes the dataset id.
pub fn load_dataset(
    input: &Path,
    format: Option<InputFormat>,
    manifest_path: Option<&Path>,
) -> Result<PanelDataset, PanelError> {
    let (decisions, manifest_path) = if input.is_dir() {
        let manifest = manifest_path
            .map(Path::to_path_buf)
            .unwrap_or_else(|| input.join("manifest.json"));
        let csv = input.join("decisions.csv");
        let jsonl = input.join("decisions.jsonl");
        let decisions = if csv.exists() {
            csv
        } else if jsonl.exists() {
            jsonl
        } else {
            return Err(PanelError::io(
                &csv,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no decisions file"),
            ));
        };
        (decisions, manifest.exists().then_some(manifest))
    } else {
        (input.to_path_buf(), manifest_path.map(Path::to_path_buf))
    };

    let manifest = match &manifest_path {
        Some(p) => read_manifest(p)?,
        None => DatasetManifest::binary(
            decisions
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("dataset"),
        ),
    };
    let format = format
        .or_else(|| InputFormat::from_path(&decisions))
        .unwrap_or(InputFormat::Csv);
    let mut ds = parse_decisions(open(&decisions)?, format, &manifest)?;

    let base = manifest_path
        .as_deref()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let reference = match &manifest.reference_labels_path {
        Some(rel) => Some(base.join(rel)),
        None if input.is_dir() && input.join("reference_labels.csv").exists() => {
            Some(input.join("reference_labels.csv"))
        }
        None => None,
    };
    if let Some(path) = reference {
        ds.reference = parse_reference_labels(open(&path)?, &ds.labels)?;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> DatasetManifest {
        DatasetManifest::binary("t")
    }

    fn csv_rows(rows: &[&str]) -> String {
        let mut s = String::from("item_id,category_id,model_id,vote,confidence,group_tag\n");
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    #[test]
    fn minimal_csv_two_items_eight_models() {
        let mut rows = Vec::new();
        for item in ["i1", "i2"] {
            for m in 0..8 {
                rows.push(format!("{item},c1,m{m},1,5,"));
            }
        }
        let refs: Vec<&str> = rows.iter().map(String::as_str).collect();
        let ds =
            parse_decisions(csv_rows(&refs).as_bytes(), InputFormat::Csv, &manifest()).unwrap();
        assert_eq!(ds.cells.len(), 2);
        assert_eq!(ds.vote_count(), 16);
        assert_eq!(ds.roster.len(), 8);
        assert!(validate_dataset(&ds).is_clean());
    }

    #[test]
    fn confidence_out_of_range_names_row() {
        let text = csv_rows(&["i1,c1,m1,1,5,", "i1,c1,m2,1,7,"]);
        let err = parse_decisions(text.as_bytes(), InputFormat::Csv, &manifest()).unwrap_err();
        match err {
            PanelError::Invalid(report) => {
                assert_eq!(report.errors.len(), 1);
                assert_eq!(report.errors[0].row, Some(3));
                assert_eq!(report.errors[0].message, "confidence out of range, row 3");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_item_category_model_rejected() {
        let text = csv_rows(&["i1,c1,m1,1,5,", "i1,c1,m1,0,4,"]);
        let err = parse_decisions(text.as_bytes(), InputFormat::Csv, &manifest()).unwrap_err();
        let PanelError::Invalid(report) = err else {
            panic!("expected validation error")
        };
        assert!(report.errors[0].message.starts_with("duplicate model vote"));
    }

    #[test]
    fn malformed_row_is_parse_error_with_row() {
        let text = csv_rows(&["i1,c1,m1,1,5,", "i1,c1,m2,yes,5,"]);
        let err = parse_decisions(text.as_bytes(), InputFormat::Csv, &manifest()).unwrap_err();
        assert!(matches!(err, PanelError::Parse { row: 3, .. }), "{err:?}");
    }

    #[test]
    fn missing_header_column() {
        let text = "item_id,category_id,model_id,vote\ni1,c1,m1,1\n";
        let err = parse_decisions(text.as_bytes(), InputFormat::Csv, &manifest()).unwrap_err();
        assert!(matches!(err, PanelError::Parse { row: 1, .. }));
    }

    #[test]
    fn group_tag_column_is_optional() {
        let text = "item_id,category_id,model_id,vote,confidence\ni1,c1,m1,1,5\ni1,c1,m2,0,3\n";
        let ds = parse_decisions(text.as_bytes(), InputFormat::Csv, &manifest()).unwrap();
        assert_eq!(ds.vote_count(), 2);
        assert!(ds.roster.iter().all(|r| r.group_tag.is_none()));
    }

    #[test]
    fn jsonl_matches_csv() {
        let csv = csv_rows(&["i1,c1,m1,1,5,fam", "i1,c1,m2,0,3,fam"]);
        let jsonl = concat!(
            r#"{"item_id":"i1","category_id":"c1","model_id":"m2","vote":0,"confidence":3,"group_tag":"fam"}"#,
            "\n\n",
            r#"{"item_id":"i1","category_id":"c1","model_id":"m1","vote":1,"confidence":5,"group_tag":"fam"}"#,
            "\n"
        );
        let a = parse_decisions(csv.as_bytes(), InputFormat::Csv, &manifest()).unwrap();
        let b = parse_decisions(jsonl.as_bytes(), InputFormat::Jsonl, &manifest()).unwrap();
        assert_eq!(a, b);
        let c = parse_decisions(a.to_jsonl().as_bytes(), InputFormat::Jsonl, &manifest()).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn single_vote_cell_warns() {
        let text = csv_rows(&["i1,c1,m1,1,5,", "i2,c1,m1,1,5,", "i2,c1,m2,1,5,"]);
        let ds = parse_decisions(text.as_bytes(), InputFormat::Csv, &manifest()).unwrap();
        let report = validate_dataset(&ds);
        assert!(report.is_clean());
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0]
            .message
            .starts_with("cell below minimum panel size"));
    }

    #[test]
    fn validate_flags_duplicate_model_in_constructed_cell() {
        let mut ds = parse_decisions(
            csv_rows(&["i1,c1,m1,1,5,", "i1,c1,m2,1,5,"]).as_bytes(),
            InputFormat::Csv,
            &manifest(),
        )
        .unwrap();
        let dup = ds.cells[0].votes[0].clone();
        ds.cells[0].votes.push(dup);
        let report = validate_dataset(&ds);
        assert_eq!(report.errors.len(), 1);
        assert!(report.errors[0].message.starts_with("duplicate model vote"));
    }

    #[test]
    fn conflicting_group_tags_rejected() {
        let text = csv_rows(&["i1,c1,m1,1,5,a", "i2,c1,m1,1,5,b"]);
        assert!(matches!(
            parse_decisions(text.as_bytes(), InputFormat::Csv, &manifest()),
            Err(PanelError::Invalid(_))
        ));
    }

    #[test]
    fn reference_labels_accept_names_and_indices() {
        let labels = vec!["no".to_string(), "yes".to_string()];
        let text = "item_id,category_id,label,coder_id\ni1,c1,yes,a\ni1,c1,0,b\ni2,c1,1,a\n";
        let r = parse_reference_labels(text.as_bytes(), &labels).unwrap();
        let [(a, la), (b, lb)] = r.pair().unwrap();
        assert_eq!((a, b), ("a", "b"));
        assert_eq!(la[&CellKey::new("i1", "c1")], 1);
        assert_eq!(lb[&CellKey::new("i1", "c1")], 0);
        assert!(parse_reference_labels(
            "item_id,category_id,label\ni1,c1,maybe\n".as_bytes(),
            &labels
        )
        .is_err());
    }

    #[test]
    fn scale_normalization() {
        let s = ConfidenceScale::default();
        assert_eq!(s.normalize(5.0), 1.0);
        assert_eq!(s.normalize(1.0), 0.0);
        assert_eq!(s.normalize(4.5), 0.875);
        assert!(ConfidenceScale::new(5.0, 1.0).is_err());
    }
}
