//! Output documents shared by the command-line tool and the review service.
//!
//! Both front ends render through these functions, so the same dataset and
//! parameters give byte-identical CSV and JSON.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bootstrap::BootstrapConfig;
use crate::metrics::{
    category_summaries, compute_all_metrics, CategorySummary, CellMetrics, MetricError, SkippedCell,
};
use crate::panel::{csv_field, PanelDataset};
use crate::regression::{
    bootstrap_dual_coefficients, fit_dual_signal, residual_diversity_r, AgreementTarget,
    RegressionError, RegressionFit,
};
use crate::stats::{per_model_reliability, KappaReference, ReliabilityComparison};
use crate::triage::{
    audit_sample, review_effort, triage_dataset, workflow_report, Adjudication, AuditSample,
    CostWeights, TriageConfig, TriageError, TriagePlan, WorkflowReport,
};
use crate::weight_search::{cross_validate_weight, WeightGrid, WeightSearchResult};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Fewest categories a dual-signal fit accepts.
pub const MIN_FIT_CATEGORIES: usize = 4;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Triage(#[from] TriageError),
    #[error(transparent)]
    Regression(#[from] RegressionError),
}

/// Pretty JSON with a trailing newline.
pub fn render_json<T: Serialize>(doc: &T) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("documents serialize");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub engine_version: String,
    pub dataset_id: String,
    pub config: MetricsConfig,
    pub cells: Vec<CellMetrics>,
    pub skipped: Vec<SkippedCell>,
    pub categories: Vec<CategorySummary>,
}

pub fn metrics_document(ds: &PanelDataset, w: f64) -> Result<MetricsDocument, EngineError> {
    let run = compute_all_metrics(ds, w)?;
    let categories = category_summaries(run.cells.iter());
    Ok(MetricsDocument {
        engine_version: ENGINE_VERSION.into(),
        dataset_id: ds.dataset_id.clone(),
        config: MetricsConfig { w },
        cells: run.cells,
        skipped: run.skipped,
        categories,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageDocument {
    pub engine_version: String,
    pub dataset_id: String,
    pub config: TriageConfig,
    pub plan: TriagePlan,
    pub audit: AuditSample,
    pub skipped: Vec<SkippedCell>,
}

pub fn triage_document(
    ds: &PanelDataset,
    cfg: &TriageConfig,
) -> Result<TriageDocument, EngineError> {
    cfg.validate()?;
    let run = compute_all_metrics(ds, cfg.w)?;
    let plan = triage_dataset(&run.cells, cfg)?;
    let audit = audit_sample(&plan, cfg.audit_fraction, cfg.seed)?;
    Ok(TriageDocument {
        engine_version: ENGINE_VERSION.into(),
        dataset_id: ds.dataset_id.clone(),
        config: *cfg,
        plan,
        audit,
        skipped: run.skipped,
    })
}

/// Which confidence scale each analysis uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorScales {
    pub regression_confidence: String,
    pub risk_score_confidence: String,
}

impl Default for PredictorScales {
    fn default() -> Self {
        PredictorScales {
            regression_confidence: "raw".into(),
            risk_score_confidence: "normalized".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBlock {
    pub target: AgreementTarget,
    pub predictor_scales: PredictorScales,
    pub dual: RegressionFit,
    pub confidence_only: RegressionFit,
    pub dual_equation: String,
    pub confidence_only_equation: String,
    pub delta_r_squared: Option<f64>,
    pub delta_mae: f64,
    /// Pearson r between confidence-only residuals and category diversity.
    pub residual_diversity_r: Option<f64>,
}

fn target_name(target: AgreementTarget) -> &'static str {
    match target {
        AgreementTarget::FullAgreement => "full_agreement_pct",
        AgreementTarget::MeanAgreement => "mean_agreement_pct",
    }
}

pub fn calibration_block(
    summaries: &[CategorySummary],
    target: AgreementTarget,
) -> Result<CalibrationBlock, RegressionError> {
    let fit = fit_dual_signal(summaries, target)?;
    let name = target_name(target);
    Ok(CalibrationBlock {
        target,
        predictor_scales: PredictorScales::default(),
        dual_equation: fit.dual.equation(name),
        confidence_only_equation: fit.confidence_only.equation(name),
        residual_diversity_r: residual_diversity_r(&fit.confidence_only, summaries).ok(),
        dual: fit.dual,
        confidence_only: fit.confidence_only,
        delta_r_squared: fit.delta_r_squared,
        delta_mae: fit.delta_mae,
    })
}

/// Category-level residuals of both fits.
pub const RESIDUALS_HEADER: &str =
    "category_id,mean_conf_raw,mean_diversity,target,residual_confidence_only,residual_dual";

pub fn residuals_csv(summaries: &[CategorySummary], block: &CalibrationBlock) -> String {
    let mut out = String::from(RESIDUALS_HEADER);
    out.push('\n');
    for (i, s) in summaries.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            csv_field(&s.category_id),
            s.mean_conf_raw,
            s.mean_diversity,
            block.target.value(s),
            block.confidence_only.residuals[i],
            block.dual.residuals[i]
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub target: AgreementTarget,
    pub bootstrap: Option<BootstrapConfig>,
    pub grid_search: bool,
    pub folds: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDocument {
    pub engine_version: String,
    pub dataset_id: String,
    pub config: CalibrationConfig,
    pub categories: Vec<CategorySummary>,
    /// `None` when the fits could not be computed; see `warnings`.
    pub fits: Option<CalibrationBlock>,
    pub weight_search: Option<WeightSearchResult>,
    pub warnings: Vec<String>,
    /// Set when part of the analysis could not be completed.
    pub incomplete: bool,
}

/// Fits both calibration models and, on request, bootstraps the dual
/// coefficients and runs the weight search. Fit failures are recorded as
/// warnings so the remaining outputs are still produced.
pub fn calibration_document(
    ds: &PanelDataset,
    cfg: &CalibrationConfig,
) -> Result<CalibrationDocument, EngineError> {
    let run = compute_all_metrics(ds, crate::metrics::DEFAULT_WEIGHT)?;
    let categories = category_summaries(run.cells.iter());
    let mut warnings: Vec<String> = run
        .skipped
        .iter()
        .map(|s| format!("skipped {}: {}", s.key, s.reason))
        .collect();
    let mut incomplete = !run.skipped.is_empty();

    let constant_target = categories.len() > 1
        && categories
            .iter()
            .all(|c| cfg.target.value(c) == cfg.target.value(&categories[0]));
    let fits = match calibration_block(&categories, cfg.target) {
        Err(_) if constant_target => {
            warnings.push("degenerate fit: target has zero variance; R² is undefined".into());
            None
        }
        Ok(mut block) => {
            for fit in [&block.dual, &block.confidence_only] {
                if let Some(msg) = &fit.degenerate {
                    warnings.push(format!("degenerate fit: {msg}"));
                }
            }
            if let Some(bcfg) = &cfg.bootstrap {
                if block.dual.degenerate.is_none() {
                    match bootstrap_dual_coefficients(&mut block.dual, &run.cells, cfg.target, bcfg)
                    {
                        Ok(()) => {}
                        Err(e) => {
                            warnings.push(format!("bootstrap: {e}"));
                            incomplete = true;
                        }
                    }
                }
            }
            Some(block)
        }
        Err(e) => {
            warnings.push(format!("calibration fit: {e}"));
            incomplete = true;
            None
        }
    };

    let weight_search = if cfg.grid_search {
        match cross_validate_weight(&run.cells, &WeightGrid::standard(), cfg.folds, cfg.seed) {
            Ok(r) => {
                warnings.extend(r.warnings.iter().cloned());
                Some(r)
            }
            Err(e) => {
                warnings.push(format!("weight search: {e}"));
                incomplete = true;
                None
            }
        }
    } else {
        None
    };

    Ok(CalibrationDocument {
        engine_version: ENGINE_VERSION.into(),
        dataset_id: ds.dataset_id.clone(),
        config: cfg.clone(),
        categories,
        fits,
        weight_search,
        warnings,
        incomplete,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub triage: TriageConfig,
    pub target: AgreementTarget,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub costs: Option<CostWeights>,
    /// Labels the per-model kappas are scored against.
    #[serde(default)]
    pub kappa_reference: KappaReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub engine_version: String,
    pub dataset_id: String,
    pub config: ReportConfig,
    pub reliability: WorkflowReport,
    /// Per-model kappa grouped by roster tag; `None` when undefined, see `notes`.
    pub model_reliability: Option<ReliabilityComparison>,
    pub calibration: Option<CalibrationBlock>,
    /// Plain-text rendering of the reliability table.
    pub table: String,
    pub notes: Vec<String>,
}

pub fn report_document(
    ds: &PanelDataset,
    cfg: &ReportConfig,
    adjudications: &[Adjudication],
) -> Result<ReportDocument, EngineError> {
    cfg.triage.validate()?;
    let run = compute_all_metrics(ds, cfg.triage.w)?;
    let plan = triage_dataset(&run.cells, &cfg.triage)?;
    let mut reliability = workflow_report(ds, &plan, adjudications)?;
    if let Some(w) = &cfg.costs {
        reliability.effort = Some(review_effort(&plan, w)?);
    }
    let mut notes = Vec::new();
    let model_reliability = match per_model_reliability(ds, cfg.kappa_reference) {
        Ok(r) => Some(r),
        Err(e) => {
            notes.push(format!("per-model reliability: {e}"));
            None
        }
    };
    let summaries = category_summaries(run.cells.iter());
    let calibration = if summaries.len() < MIN_FIT_CATEGORIES {
        notes.push(format!(
            "{} categories; calibration fits need at least {MIN_FIT_CATEGORIES}",
            summaries.len()
        ));
        None
    } else {
        match calibration_block(&summaries, cfg.target) {
            Ok(b) => Some(b),
            Err(e) => {
                notes.push(format!("calibration fit: {e}"));
                None
            }
        }
    };
    Ok(ReportDocument {
        engine_version: ENGINE_VERSION.into(),
        dataset_id: ds.dataset_id.clone(),
        config: cfg.clone(),
        table: reliability.render_text(),
        reliability,
        model_reliability,
        calibration,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_panel, SimConfig};

    #[test]
    fn documents_render_deterministically() {
        let (ds, _) = generate_panel(&SimConfig::replication()).unwrap();
        let a = render_json(&metrics_document(&ds, 0.6).unwrap());
        let b = render_json(&metrics_document(&ds, 0.6).unwrap());
        assert_eq!(a, b);
        assert!(a.ends_with('\n'));
        let t = triage_document(&ds, &TriageConfig::default()).unwrap();
        assert_eq!(t.plan.cells.len(), 710);
    }

    #[test]
    fn report_without_adjudications() {
        let (ds, _) = generate_panel(&SimConfig::replication()).unwrap();
        let cfg = ReportConfig {
            triage: TriageConfig::default(),
            target: AgreementTarget::FullAgreement,
            costs: None,
            kappa_reference: KappaReference::default(),
        };
        let r = report_document(&ds, &cfg, &[]).unwrap();
        assert_eq!(r.reliability.rows.len(), 3);
        assert!(r.calibration.is_some());
    }

    #[test]
    fn constant_agreement_is_degenerate_not_fatal() {
        let mut cfg = SimConfig::basic(20, 5, 4, 0.0, 1);
        cfg.confidence.noise_sd = 0.2;
        let (ds, _) = generate_panel(&cfg).unwrap();
        let doc = calibration_document(
            &ds,
            &CalibrationConfig {
                target: AgreementTarget::FullAgreement,
                bootstrap: None,
                grid_search: false,
                folds: 10,
                seed: 42,
            },
        )
        .unwrap();
        assert!(
            doc.warnings.iter().any(|w| w.contains("degenerate")),
            "{:?}",
            doc.warnings
        );
    }
}
