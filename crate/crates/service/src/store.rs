//! Dataset registry with an append-only adjudication log per dataset.
//!
//! On disk every dataset lives in its own directory:
//!
//! ```text
//! <data_dir>/<dataset_id>/manifest.json
//!                         decisions.csv          canonical form
//!                         reference_labels.csv   when present
//!                         adjudications.jsonl    one event per line
//!                         snapshot.json          log length and last sequence
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use panel_triage::engine::{render_json, ReportConfig};
use panel_triage::panel::{load_dataset, CellKey, PanelDataset, PanelError};
use panel_triage::triage::Adjudication;

const DECISIONS: &str = "decisions.csv";
const MANIFEST: &str = "manifest.json";
const REFERENCE: &str = "reference_labels.csv";
const LOG: &str = "adjudications.jsonl";
const SNAPSHOT: &str = "snapshot.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("dataset `{0}` already exists")]
    Duplicate(String),
    #[error("invalid dataset id `{0}`: use letters, digits, `-`, `_` or `.`")]
    InvalidId(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Load {
        path: PathBuf,
        #[source]
        source: PanelError,
    },
    #[error("{path}, line {line}: {message}")]
    Log {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> StoreError {
    StoreError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjudicationEvent {
    /// Server-assigned, strictly increasing per dataset.
    pub seq: u64,
    pub received_at: String,
    pub adjudication: Adjudication,
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    dataset_id: String,
    events: usize,
    last_seq: u64,
}

/// A rendered report and the log length it was computed from.
#[derive(Debug, Clone)]
pub struct CachedReport {
    pub config: ReportConfig,
    pub events: usize,
    pub body: String,
}

pub struct StoredDataset {
    pub dataset: Arc<PanelDataset>,
    dir: Option<PathBuf>,
    /// Readers clone the `Arc`; appends swap in a new vector.
    log: RwLock<Arc<Vec<AdjudicationEvent>>>,
    writer: Mutex<()>,
    report: Mutex<Option<CachedReport>>,
}

impl StoredDataset {
    fn new(dataset: PanelDataset, dir: Option<PathBuf>, log: Vec<AdjudicationEvent>) -> Self {
        StoredDataset {
            dataset: Arc::new(dataset),
            dir,
            log: RwLock::new(Arc::new(log)),
            writer: Mutex::new(()),
            report: Mutex::new(None),
        }
    }

    pub fn events(&self) -> Arc<Vec<AdjudicationEvent>> {
        self.log.read().clone()
    }

    /// Adjudications in log order; later entries supersede earlier ones.
    pub fn adjudications(&self) -> Vec<Adjudication> {
        self.events()
            .iter()
            .map(|e| e.adjudication.clone())
            .collect()
    }

    /// Final label and sequence number per cell.
    pub fn final_labels(&self) -> BTreeMap<CellKey, (usize, u64)> {
        self.events()
            .iter()
            .map(|e| (e.adjudication.key(), (e.adjudication.expert_label, e.seq)))
            .collect()
    }

    /// Appends one event. Writes are serialized per dataset, so sequence
    /// numbers follow log order.
    pub fn append(
        &self,
        adjudication: Adjudication,
        received_at: String,
    ) -> Result<AdjudicationEvent, StoreError> {
        let _guard = self.writer.lock();
        let current = self.events();
        let event = AdjudicationEvent {
            seq: current.last().map_or(1, |e| e.seq + 1),
            received_at,
            adjudication,
        };
        if let Some(dir) = &self.dir {
            let path = dir.join(LOG);
            let mut line = serde_json::to_string(&event).expect("event serializes");
            line.push('\n');
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| io_err(&path, e))?;
            f.write_all(line.as_bytes()).map_err(|e| io_err(&path, e))?;
            f.sync_data().map_err(|e| io_err(&path, e))?;
            let snap = Snapshot {
                dataset_id: self.dataset.dataset_id.clone(),
                events: current.len() + 1,
                last_seq: event.seq,
            };
            let spath = dir.join(SNAPSHOT);
            fs::write(&spath, render_json(&snap)).map_err(|e| io_err(&spath, e))?;
        }
        let mut next = Vec::with_capacity(current.len() + 1);
        next.extend(current.iter().cloned());
        next.push(event.clone());
        *self.log.write() = Arc::new(next);
        Ok(event)
    }

    /// Returns the cached report when it matches `config` and the current
    /// log; otherwise renders a new one. The flag is `true` when an older
    /// cached report was stale and got replaced.
    pub fn report<F, E>(
        &self,
        config: &ReportConfig,
        render: F,
    ) -> Result<(String, ReportStatus), E>
    where
        F: FnOnce(&PanelDataset, &[Adjudication]) -> Result<String, E>,
    {
        let events = self.events();
        let mut cache = self.report.lock();
        let status = match cache.as_ref() {
            Some(c) if c.config == *config && c.events == events.len() => {
                return Ok((c.body.clone(), ReportStatus::Cached));
            }
            Some(c) if c.config == *config => ReportStatus::Stale,
            _ => ReportStatus::Computed,
        };
        let adjudications: Vec<Adjudication> =
            events.iter().map(|e| e.adjudication.clone()).collect();
        let body = render(&self.dataset, &adjudications)?;
        *cache = Some(CachedReport {
            config: config.clone(),
            events: events.len(),
            body: body.clone(),
        });
        Ok((body, status))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportStatus {
    /// Served from a cache that matched the current log.
    Cached,
    /// The cache predated the latest adjudication and was recomputed.
    Stale,
    /// No usable cache entry existed.
    Computed,
}

impl ReportStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ReportStatus::Cached => "cached",
            ReportStatus::Stale => "stale-recomputed",
            ReportStatus::Computed => "computed",
        }
    }
}

#[derive(Default)]
pub struct Store {
    data_dir: Option<PathBuf>,
    datasets: RwLock<BTreeMap<String, Arc<StoredDataset>>>,
}

impl Store {
    /// In-memory store without persistence.
    pub fn in_memory() -> Self {
        Store::default()
    }

    /// Opens `data_dir`, replaying every dataset directory found there.
    pub fn open(data_dir: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(data_dir).map_err(|e| io_err(data_dir, e))?;
        let mut datasets = BTreeMap::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(data_dir)
            .map_err(|e| io_err(data_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(MANIFEST).is_file() && p.join(DECISIONS).is_file())
            .collect();
        entries.sort();
        for dir in entries {
            let ds = load_dataset(&dir, None, None).map_err(|source| StoreError::Load {
                path: dir.clone(),
                source,
            })?;
            let log = replay(&dir.join(LOG))?;
            let id = ds.dataset_id.clone();
            datasets.insert(id, Arc::new(StoredDataset::new(ds, Some(dir), log)));
        }
        Ok(Store {
            data_dir: Some(data_dir.to_path_buf()),
            datasets: RwLock::new(datasets),
        })
    }

    pub fn get(&self, id: &str) -> Option<Arc<StoredDataset>> {
        self.datasets.read().get(id).cloned()
    }

    pub fn list(&self) -> Vec<Arc<StoredDataset>> {
        self.datasets.read().values().cloned().collect()
    }

    /// Registers a validated dataset and persists its canonical files.
    pub fn insert(&self, ds: PanelDataset) -> Result<Arc<StoredDataset>, StoreError> {
        let id = ds.dataset_id.clone();
        if !valid_id(&id) {
            return Err(StoreError::InvalidId(id));
        }
        let mut map = self.datasets.write();
        if map.contains_key(&id) {
            return Err(StoreError::Duplicate(id));
        }
        let dir = match &self.data_dir {
            Some(root) => {
                let dir = root.join(&id);
                if dir.exists() {
                    return Err(StoreError::Duplicate(id));
                }
                write_dataset(&dir, &ds)?;
                Some(dir)
            }
            None => None,
        };
        let stored = Arc::new(StoredDataset::new(ds, dir, Vec::new()));
        map.insert(id, stored.clone());
        Ok(stored)
    }
}

fn write_dataset(dir: &Path, ds: &PanelDataset) -> Result<(), StoreError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut manifest = ds.manifest();
    if !ds.reference.is_empty() {
        manifest.reference_labels_path = Some(REFERENCE.into());
        let p = dir.join(REFERENCE);
        fs::write(&p, ds.reference.to_csv()).map_err(|e| io_err(&p, e))?;
    }
    let p = dir.join(DECISIONS);
    fs::write(&p, ds.to_canonical_csv()).map_err(|e| io_err(&p, e))?;
    let p = dir.join(LOG);
    fs::write(&p, "").map_err(|e| io_err(&p, e))?;
    // Written last: a directory without a manifest is ignored on replay.
    let p = dir.join(MANIFEST);
    fs::write(&p, render_json(&manifest)).map_err(|e| io_err(&p, e))
}

/// Reads an event log. A torn final line from an interrupted append is
/// dropped; corruption anywhere else is an error.
fn replay(path: &Path) -> Result<Vec<AdjudicationEvent>, StoreError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    let mut out: Vec<AdjudicationEvent> = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<AdjudicationEvent>(line) {
            Ok(e) => {
                if out.last().is_some_and(|p| p.seq >= e.seq) {
                    return Err(StoreError::Log {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: format!("sequence {} is out of order", e.seq),
                    });
                }
                out.push(e);
            }
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => break,
            Err(e) => {
                return Err(StoreError::Log {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_path_safe() {
        assert!(valid_id("panel-1.v2_x"));
        for bad in ["", ".hidden", "a/b", "..", "a b"] {
            assert!(!valid_id(bad), "{bad}");
        }
    }

    #[test]
    fn replay_rejects_out_of_order_sequences() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(LOG);
        let ev = |seq| {
            serde_json::to_string(&AdjudicationEvent {
                seq,
                received_at: "t".into(),
                adjudication: Adjudication {
                    item_id: "i".into(),
                    category_id: "c".into(),
                    expert_label: 0,
                    source: panel_triage::triage::AdjudicationSource::Audit,
                    timestamp: "t".into(),
                    adjudicator_id: "e".into(),
                },
            })
            .unwrap()
        };
        fs::write(&path, format!("{}\n{}\n", ev(2), ev(1))).unwrap();
        assert!(matches!(
            replay(&path),
            Err(StoreError::Log { line: 2, .. })
        ));
        fs::write(&path, format!("{}\n{}\n", ev(1), ev(2))).unwrap();
        assert_eq!(replay(&path).unwrap().len(), 2);
    }
}
