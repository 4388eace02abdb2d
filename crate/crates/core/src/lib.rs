//! Calibration and triage for multi-model annotation panels.
//!
//! A panel of models votes on every (item, category) cell and reports a
//! confidence. Cells are scored on majority share, vote diversity and mean
//! confidence, combined into a risk score that routes each cell to a review
//! tier.

pub mod bootstrap;
pub mod engine;
pub mod metrics;
pub mod panel;
pub mod regression;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod triage;
pub mod weight_search;

pub use metrics::{CellMetrics, MajorityLabel};
pub use panel::{DecisionCell, PanelDataset, VoteRecord};
