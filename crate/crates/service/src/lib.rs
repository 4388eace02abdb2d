//! HTTP review service: dataset ingest, metrics, triage queues,
//! adjudication recording and reliability reports.
//!
//! Analysis bodies are rendered by `panel_triage::engine`, the same code the
//! command-line tool uses, so equal inputs give equal bytes.

pub mod store;

use std::sync::Arc;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderName, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use panel_triage::engine::{
    metrics_document, render_json, report_document, triage_document, ReportConfig, TriageDocument,
    ENGINE_VERSION,
};
use panel_triage::metrics::{metrics_csv, CellMetrics, DEFAULT_WEIGHT};
use panel_triage::panel::{
    parse_decisions, parse_reference_labels, validate_dataset, CellKey, DatasetManifest,
    InputFormat, Issue, PanelError, ValidationReport, VoteRecord,
};
use panel_triage::regression::AgreementTarget;
use panel_triage::stats::KappaReference;
use panel_triage::triage::{Adjudication, AdjudicationSource, CostWeights, Tier, TriageConfig};

pub use store::{Store, StoreError};

pub const TOKEN_ENV: &str = "PANEL_TRIAGE_TOKEN";
pub const DATA_DIR_ENV: &str = "PANEL_TRIAGE_DATA_DIR";
pub const ADDR_ENV: &str = "PANEL_TRIAGE_ADDR";

pub const ENGINE_VERSION_HEADER: &str = "x-engine-version";
pub const CONFIG_HEADER: &str = "x-config";
pub const REPORT_CACHE_HEADER: &str = "x-report-cache";

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 1000;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub token: Option<String>,
}

impl AppState {
    pub fn new(store: Store, token: Option<String>) -> Self {
        AppState {
            store: Arc::new(store),
            token: token.filter(|t| !t.is_empty()),
        }
    }
}

pub fn router(state: AppState) -> Router {
    let protected = Router::new()
        .route("/datasets", get(list_datasets).post(ingest))
        .route("/datasets/{id}/metrics", get(metrics))
        .route("/datasets/{id}/triage", get(triage))
        .route("/datasets/{id}/queue", get(queue))
        .route(
            "/datasets/{id}/adjudications",
            get(list_adjudications).post(adjudicate),
        )
        .route("/datasets/{id}/report", get(report))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(healthz))
        .merge(protected)
        .layer(middleware::from_fn(version_header))
        .with_state(state)
}

async fn version_header(req: Request, next: Next) -> Response {
    let mut res = next.run(req).await;
    res.headers_mut().insert(
        HeaderName::from_static(ENGINE_VERSION_HEADER),
        HeaderValue::from_static(ENGINE_VERSION),
    );
    res
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn not_found(what: impl std::fmt::Display) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, format!("{what} not found"))
    }

    fn invalid(report: &ValidationReport) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: json!({ "error": "validation failed", "report": report }),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn dataset(state: &AppState, id: &str) -> Result<Arc<store::StoredDataset>, ApiError> {
    state
        .store
        .get(id)
        .ok_or_else(|| ApiError::not_found(format!("dataset `{id}`")))
}

fn with_config<C: Serialize>(mut res: Response, config: &C) -> Response {
    if let Ok(v) = HeaderValue::from_str(&serde_json::to_string(config).expect("config serializes"))
    {
        res.headers_mut()
            .insert(HeaderName::from_static(CONFIG_HEADER), v);
    }
    res
}

fn json_body(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn csv_body(body: String) -> Response {
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], body).into_response()
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "engine_version": ENGINE_VERSION }))
}

#[derive(Serialize)]
struct DatasetSummary {
    dataset_id: String,
    labels: Vec<String>,
    cells: usize,
    votes: usize,
    models: usize,
    adjudication_events: usize,
}

async fn list_datasets(State(state): State<AppState>) -> Json<serde_json::Value> {
    let datasets: Vec<DatasetSummary> = state
        .store
        .list()
        .iter()
        .map(|s| DatasetSummary {
            dataset_id: s.dataset.dataset_id.clone(),
            labels: s.dataset.labels.clone(),
            cells: s.dataset.cells.len(),
            votes: s.dataset.vote_count(),
            models: s.dataset.roster.len(),
            adjudication_events: s.events().len(),
        })
        .collect();
    Json(json!({ "engine_version": ENGINE_VERSION, "datasets": datasets }))
}

#[derive(Deserialize)]
pub struct IngestRequest {
    pub manifest: DatasetManifest,
    /// Decisions file contents.
    pub decisions: String,
    #[serde(default)]
    pub format: Option<InputFormat>,
    /// Reference labels CSV contents.
    #[serde(default)]
    pub reference_labels: Option<String>,
}

fn parse_failure(row: usize, message: String) -> ApiError {
    let report = ValidationReport {
        errors: vec![Issue {
            row: Some(row),
            field: "row".into(),
            message,
        }],
        ..Default::default()
    };
    ApiError::invalid(&report)
}

fn panel_error(e: PanelError) -> ApiError {
    match e {
        PanelError::Invalid(report) => ApiError::invalid(&report),
        PanelError::Parse { row, message } => parse_failure(row, message),
        other => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, other.to_string()),
    }
}

async fn ingest(State(state): State<AppState>, Json(req): Json<IngestRequest>) -> ApiResult {
    req.manifest.check().map_err(panel_error)?;
    if !store::valid_id(&req.manifest.dataset_id) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::InvalidId(req.manifest.dataset_id.clone()).to_string(),
        ));
    }
    if state.store.get(&req.manifest.dataset_id).is_some() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("dataset `{}` already exists", req.manifest.dataset_id),
        ));
    }
    let format = req.format.unwrap_or(InputFormat::Csv);
    let mut ds =
        parse_decisions(req.decisions.as_bytes(), format, &req.manifest).map_err(panel_error)?;
    if let Some(text) = &req.reference_labels {
        ds.reference = parse_reference_labels(text.as_bytes(), &ds.labels).map_err(panel_error)?;
    }
    let report = validate_dataset(&ds);
    if !report.is_clean() {
        return Err(ApiError::invalid(&report));
    }
    let stored = state.store.insert(ds).map_err(|e| match e {
        StoreError::Duplicate(_) => ApiError::new(StatusCode::CONFLICT, e.to_string()),
        StoreError::InvalidId(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
    })?;
    let body = json!({
        "engine_version": ENGINE_VERSION,
        "dataset_id": stored.dataset.dataset_id,
        "counts": report.counts,
        "warnings": report.warnings,
    });
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BodyFormat {
    #[default]
    Json,
    Csv,
}

fn bad_request(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, e.to_string())
}

async fn metrics(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<AnalysisQuery>,
) -> ApiResult {
    let stored = dataset(&state, &id)?;
    let doc =
        metrics_document(&stored.dataset, q.w.unwrap_or(DEFAULT_WEIGHT)).map_err(bad_request)?;
    let res = match q.format {
        BodyFormat::Json => json_body(render_json(&doc)),
        BodyFormat::Csv => csv_body(metrics_csv(&doc.cells)),
    };
    Ok(with_config(res, &doc.config))
}

/// Query parameters shared by the analysis endpoints. Each endpoint reads
/// the subset it needs.
#[derive(Debug, Default, Deserialize)]
pub struct AnalysisQuery {
    w: Option<f64>,
    green_max: Option<f64>,
    amber_max: Option<f64>,
    audit: Option<f64>,
    seed: Option<u64>,
    #[serde(default)]
    format: BodyFormat,
    tier: Option<Tier>,
    #[serde(default)]
    sort: QueueSort,
    page: Option<usize>,
    page_size: Option<usize>,
    audited: Option<AuditedFilter>,
    target: Option<AgreementTarget>,
    /// `green,amber,red` review costs for the effort estimate.
    costs: Option<String>,
    kappa_reference: Option<KappaReference>,
}

impl AnalysisQuery {
    fn config(&self) -> Result<TriageConfig, ApiError> {
        let d = TriageConfig::default();
        let cfg = TriageConfig {
            w: self.w.unwrap_or(d.w),
            green_max: self.green_max.unwrap_or(d.green_max),
            amber_max: self.amber_max.unwrap_or(d.amber_max),
            audit_fraction: self.audit.unwrap_or(d.audit_fraction),
            seed: self.seed.unwrap_or(d.seed),
            ..d
        };
        cfg.validate().map_err(bad_request)?;
        Ok(cfg)
    }
}

fn triage_doc(
    state: &AppState,
    id: &str,
    q: &AnalysisQuery,
) -> Result<(Arc<store::StoredDataset>, TriageDocument), ApiError> {
    let stored = dataset(state, id)?;
    let cfg = q.config()?;
    let doc = triage_document(&stored.dataset, &cfg).map_err(bad_request)?;
    Ok((stored, doc))
}

async fn triage(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<AnalysisQuery>,
) -> ApiResult {
    let (_, doc) = triage_doc(&state, &id, &q)?;
    let res = match q.format {
        BodyFormat::Json => json_body(render_json(&doc)),
        BodyFormat::Csv => csv_body(doc.plan.to_csv()),
    };
    Ok(with_config(res, &doc.config))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueSort {
    #[default]
    RiskDesc,
    RiskAsc,
    Canonical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditedFilter {
    Only,
    Exclude,
}

#[derive(Serialize)]
pub struct AdjudicationStatus {
    pub expert_label: usize,
    pub seq: u64,
}

#[derive(Serialize)]
pub struct QueueItem {
    pub item_id: String,
    pub category_id: String,
    pub tier: Tier,
    pub tie_forced: bool,
    pub audited: bool,
    pub metrics: CellMetrics,
    pub votes: Vec<VoteRecord>,
    pub adjudication: Option<AdjudicationStatus>,
}

async fn queue(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<AnalysisQuery>,
) -> ApiResult {
    let (stored, doc) = triage_doc(&state, &id, &q)?;
    let page = q.page.unwrap_or(1);
    if page == 0 {
        return Err(bad_request("page numbers start at 1"));
    }
    let page_size = q.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
    if page_size == 0 || page_size > MAX_PAGE_SIZE {
        return Err(bad_request(format!(
            "page_size must be within 1..={MAX_PAGE_SIZE}"
        )));
    }
    let audited: std::collections::BTreeSet<CellKey> = doc
        .audit
        .entries
        .iter()
        .map(|e| CellKey::new(e.item_id.clone(), e.category_id.clone()))
        .collect();
    let finals = stored.final_labels();
    let mut cells: Vec<_> = doc
        .plan
        .cells
        .iter()
        .filter(|c| q.tier.is_none_or(|t| c.tier == t))
        .filter(|c| {
            let a = audited.contains(&c.metrics.key());
            match q.audited {
                Some(AuditedFilter::Only) => a,
                Some(AuditedFilter::Exclude) => !a,
                None => true,
            }
        })
        .collect();
    // Plan cells are in canonical order; stable sorts keep it as the tie-break.
    match q.sort {
        QueueSort::RiskDesc => {
            cells.sort_by(|a, b| b.metrics.risk_score.total_cmp(&a.metrics.risk_score))
        }
        QueueSort::RiskAsc => {
            cells.sort_by(|a, b| a.metrics.risk_score.total_cmp(&b.metrics.risk_score))
        }
        QueueSort::Canonical => {}
    }
    let total = cells.len();
    let items: Vec<QueueItem> = cells
        .into_iter()
        .skip((page - 1).saturating_mul(page_size))
        .take(page_size)
        .map(|c| {
            let key = c.metrics.key();
            QueueItem {
                item_id: c.metrics.item_id.clone(),
                category_id: c.metrics.category_id.clone(),
                tier: c.tier,
                tie_forced: c.tie_forced,
                audited: audited.contains(&key),
                votes: stored
                    .dataset
                    .cell(&key)
                    .map(|d| d.votes.clone())
                    .unwrap_or_default(),
                adjudication: finals
                    .get(&key)
                    .map(|&(expert_label, seq)| AdjudicationStatus { expert_label, seq }),
                metrics: c.metrics.clone(),
            }
        })
        .collect();
    let body = json!({
        "engine_version": ENGINE_VERSION,
        "dataset_id": id,
        "config": doc.config,
        "total": total,
        "page": page,
        "page_size": page_size,
        "items": items,
    });
    Ok(with_config(Json(body).into_response(), &doc.config))
}

/// Labels may be sent as an index or as a label name.
#[derive(Deserialize)]
#[serde(untagged)]
pub enum LabelRef {
    Index(usize),
    Name(String),
}

#[derive(Deserialize)]
pub struct AdjudicationRequest {
    pub item_id: String,
    pub category_id: String,
    pub expert_label: LabelRef,
    #[serde(default)]
    pub source: Option<AdjudicationSource>,
    #[serde(default)]
    pub adjudicator_id: String,
    /// Client-side timestamp; the server time is used when absent.
    #[serde(default)]
    pub timestamp: Option<String>,
}

async fn adjudicate(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<AdjudicationRequest>,
) -> ApiResult {
    let stored = dataset(&state, &id)?;
    let key = CellKey::new(req.item_id.clone(), req.category_id.clone());
    if stored.dataset.cell(&key).is_none() {
        return Err(ApiError::not_found(format!("cell {key}")));
    }
    let label = match &req.expert_label {
        LabelRef::Index(i) => (*i < stored.dataset.label_count()).then_some(*i),
        LabelRef::Name(s) => stored.dataset.resolve_label(s),
    }
    .ok_or_else(|| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "expert_label is not in the label set",
        )
    })?;
    let received_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
    let adjudication = Adjudication {
        item_id: req.item_id,
        category_id: req.category_id,
        expert_label: label,
        source: req.source.unwrap_or(AdjudicationSource::FullReview),
        timestamp: req.timestamp.unwrap_or_else(|| received_at.clone()),
        adjudicator_id: req.adjudicator_id,
    };
    let event = stored
        .append(adjudication, received_at)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let final_label = stored
        .final_labels()
        .get(&key)
        .map(|&(l, s)| AdjudicationStatus {
            expert_label: l,
            seq: s,
        });
    let body = json!({
        "engine_version": ENGINE_VERSION,
        "event": event,
        "cell": { "item_id": key.item_id, "category_id": key.category_id, "final": final_label },
    });
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn list_adjudications(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let stored = dataset(&state, &id)?;
    let events = stored.events();
    Ok(Json(json!({ "engine_version": ENGINE_VERSION, "events": *events })).into_response())
}

async fn report(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<AnalysisQuery>,
) -> ApiResult {
    let stored = dataset(&state, &id)?;
    let cfg = ReportConfig {
        triage: q.config()?,
        target: q.target.unwrap_or_default(),
        costs: q
            .costs
            .as_deref()
            .map(str::parse::<CostWeights>)
            .transpose()
            .map_err(bad_request)?,
        kappa_reference: q.kappa_reference.unwrap_or_default(),
    };
    let (body, status) = stored.report(&cfg, |ds, adjudications| {
        report_document(ds, &cfg, adjudications)
            .map(|d| render_json(&d))
            .map_err(bad_request)
    })?;
    let mut res = with_config(json_body(body), &cfg);
    res.headers_mut().insert(
        HeaderName::from_static(REPORT_CACHE_HEADER),
        HeaderValue::from_static(status.as_str()),
    );
    Ok(res)
}

/// Bearer token check helper for clients and tests.
pub fn bearer(token: &str) -> HeaderMap {
    let mut h = HeaderMap::new();
    h.insert(
        header::AUTHORIZATION,
        HeaderValue::from_str(&format!("Bearer {token}")).expect("token is header-safe"),
    );
    h
}
