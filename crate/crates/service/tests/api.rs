use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use panel_triage::engine::{
    metrics_document, render_json, report_document, triage_document, ReportConfig,
};
use panel_triage::metrics::metrics_csv;
use panel_triage::panel::PanelDataset;
use panel_triage::regression::AgreementTarget;
use panel_triage::sim::{generate_panel, DifficultyModel, SimConfig};
use panel_triage::triage::{Adjudication, AdjudicationSource, TriageConfig};
use panel_triage_service::{router, AppState, Store};

fn small_panel(id: &str) -> PanelDataset {
    let mut cfg = SimConfig::basic(12, 6, 5, 0.3, 7);
    cfg.dataset_id = id.into();
    cfg.difficulty = DifficultyModel {
        easy: 0.05,
        hard: 0.6,
        hard_share_min: 0.2,
        hard_share_max: 0.7,
    };
    cfg.human_error_rates = vec![0.1, 0.1];
    generate_panel(&cfg).unwrap().0
}

fn ingest_body(ds: &PanelDataset) -> Value {
    json!({
        "manifest": ds.manifest(),
        "decisions": ds.to_canonical_csv(),
        "reference_labels": ds.reference.to_csv(),
    })
}

async fn send(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
    token: Option<&str>,
) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, bytes)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    send(app, Method::GET, uri, None, None).await
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, _, b) = send(app, Method::POST, uri, Some(body), None).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn app() -> Router {
    router(AppState::new(Store::in_memory(), None))
}

#[tokio::test]
async fn healthz_is_open_and_data_needs_token() {
    let app = router(AppState::new(Store::in_memory(), Some("s3cret".into())));
    let (s, h, _) = send(&app, Method::GET, "/healthz", None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(h.contains_key("x-engine-version"));
    let (s, _, _) = send(&app, Method::GET, "/datasets", None, None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _, _) = send(&app, Method::GET, "/datasets", None, Some("wrong")).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _, _) = send(&app, Method::GET, "/datasets", None, Some("s3cret")).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn ingest_then_duplicate_conflicts() {
    let app = app();
    let ds = small_panel("p1");
    let (s, body) = post(&app, "/datasets", ingest_body(&ds)).await;
    assert_eq!(s, StatusCode::CREATED, "{body}");
    assert_eq!(body["dataset_id"], "p1");
    assert_eq!(body["counts"]["cells"], 72);
    let (s, _) = post(&app, "/datasets", ingest_body(&ds)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _, b) = get(&app, "/datasets").await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v["datasets"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn ingest_reports_row_level_problems() {
    let app = app();
    let ds = small_panel("bad");
    let mut csv = ds.to_canonical_csv();
    csv.push_str("s01,c01,m1,maybe,3\n");
    let mut body = ingest_body(&ds);
    body["decisions"] = Value::String(csv);
    let (s, v) = post(&app, "/datasets", body).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    assert!(
        v["report"]["errors"]
            .as_array()
            .is_some_and(|e| !e.is_empty()),
        "{v}"
    );
    assert!(v["report"]["errors"][0]["row"].is_number(), "{v}");
}

#[tokio::test]
async fn metrics_and_triage_match_engine_bytes() {
    let app = app();
    let ds = small_panel("p2");
    post(&app, "/datasets", ingest_body(&ds)).await;

    let (s, h, b) = get(&app, "/datasets/p2/metrics?w=0.4").await;
    assert_eq!(s, StatusCode::OK);
    assert!(h.contains_key("x-config"));
    let doc = metrics_document(&ds, 0.4).unwrap();
    assert_eq!(String::from_utf8(b).unwrap(), render_json(&doc));
    let (_, _, b) = get(&app, "/datasets/p2/metrics?w=0.4&format=csv").await;
    assert_eq!(String::from_utf8(b).unwrap(), metrics_csv(&doc.cells));

    let cfg = TriageConfig {
        green_max: 0.2,
        audit_fraction: 0.5,
        seed: 9,
        ..TriageConfig::default()
    };
    let doc = triage_document(&ds, &cfg).unwrap();
    let (s, _, b) = get(&app, "/datasets/p2/triage?green_max=0.2&audit=0.5&seed=9").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(String::from_utf8(b).unwrap(), render_json(&doc));
    let (_, _, b) = get(
        &app,
        "/datasets/p2/triage?green_max=0.2&audit=0.5&seed=9&format=csv",
    )
    .await;
    assert_eq!(String::from_utf8(b).unwrap(), doc.plan.to_csv());
}

#[tokio::test]
async fn bad_parameters_and_unknown_ids() {
    let app = app();
    post(&app, "/datasets", ingest_body(&small_panel("p3"))).await;
    let (s, _, _) = get(&app, "/datasets/p3/triage?green_max=0.6&amber_max=0.5").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _, _) = get(&app, "/datasets/p3/metrics?w=1.5").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _, _) = get(&app, "/datasets/nope/triage").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _, _) = get(&app, "/datasets/p3/queue?page=0").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn queue_filters_sorts_and_pages() {
    let app = app();
    let ds = small_panel("q");
    post(&app, "/datasets", ingest_body(&ds)).await;
    let (s, _, b) = get(&app, "/datasets/q/queue?tier=red&page_size=5").await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&b).unwrap();
    let items = v["items"].as_array().unwrap();
    assert!(items.len() <= 5);
    assert!(items.iter().all(|i| i["tier"] == "red"));
    let risks: Vec<f64> = items
        .iter()
        .map(|i| i["metrics"]["risk_score"].as_f64().unwrap())
        .collect();
    assert!(risks.windows(2).all(|w| w[0] >= w[1]));
    assert!(items
        .iter()
        .all(|i| i["votes"].as_array().unwrap().len() == 5));

    let (_, _, b) = get(&app, "/datasets/q/queue?page_size=1000").await;
    let all: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(all["total"], 72);

    let (_, _, b) = get(&app, "/datasets/q/queue?audited=only&page_size=1000").await;
    let audited: Value = serde_json::from_slice(&b).unwrap();
    let (_, _, t) = get(&app, "/datasets/q/triage").await;
    let t: Value = serde_json::from_slice(&t).unwrap();
    assert_eq!(
        audited["total"],
        t["audit"]["entries"].as_array().unwrap().len()
    );
    assert!(audited["items"]
        .as_array()
        .unwrap()
        .iter()
        .all(|i| i["audited"] == true));
}

#[tokio::test]
async fn adjudications_validate_cells_and_labels() {
    let app = app();
    post(&app, "/datasets", ingest_body(&small_panel("a"))).await;
    let (s, _) = post(
        &app,
        "/datasets/a/adjudications",
        json!({"item_id": "zz", "category_id": "c01", "expert_label": 1, "adjudicator_id": "e1"}),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = post(
        &app,
        "/datasets/a/adjudications",
        json!({"item_id": "s01", "category_id": "c01", "expert_label": "maybe", "adjudicator_id": "e1"}),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = post(
        &app,
        "/datasets/nope/adjudications",
        json!({"item_id": "s01", "category_id": "c01", "expert_label": 1, "adjudicator_id": "e1"}),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn last_writer_wins_per_cell() {
    let app = app();
    post(&app, "/datasets", ingest_body(&small_panel("lw"))).await;
    let (s, v) = post(
        &app,
        "/datasets/lw/adjudications",
        json!({"item_id": "s01", "category_id": "c01", "expert_label": "yes", "adjudicator_id": "e1"}),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["event"]["seq"], 1);
    let (_, v) = post(
        &app,
        "/datasets/lw/adjudications",
        json!({"item_id": "s01", "category_id": "c01", "expert_label": 0, "adjudicator_id": "e2", "source": "audit"}),
    )
    .await;
    assert_eq!(v["event"]["seq"], 2);
    assert_eq!(v["cell"]["final"]["expert_label"], 0);
    assert_eq!(v["cell"]["final"]["seq"], 2);

    let (_, _, b) = get(&app, "/datasets/lw/queue?sort=canonical&page_size=1").await;
    let q: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(q["items"][0]["item_id"], "s01");
    assert_eq!(q["items"][0]["adjudication"]["expert_label"], 0);
}

#[tokio::test]
async fn report_is_cached_until_the_log_grows() {
    let app = app();
    let ds = small_panel("r");
    post(&app, "/datasets", ingest_body(&ds)).await;
    let (s, h, first) = get(&app, "/datasets/r/report").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(h["x-report-cache"], "computed");
    let (_, h, again) = get(&app, "/datasets/r/report").await;
    assert_eq!(h["x-report-cache"], "cached");
    assert_eq!(first, again);

    post(
        &app,
        "/datasets/r/adjudications",
        json!({"item_id": "s02", "category_id": "c03", "expert_label": 1, "adjudicator_id": "e1",
               "timestamp": "2026-01-01T00:00:00Z"}),
    )
    .await;
    let (_, h, after) = get(&app, "/datasets/r/report").await;
    assert_eq!(h["x-report-cache"], "stale-recomputed");

    let cfg = ReportConfig {
        triage: TriageConfig::default(),
        target: AgreementTarget::default(),
        costs: None,
        kappa_reference: Default::default(),
    };
    let adj = Adjudication {
        item_id: "s02".into(),
        category_id: "c03".into(),
        expert_label: 1,
        source: AdjudicationSource::FullReview,
        timestamp: "2026-01-01T00:00:00Z".into(),
        adjudicator_id: "e1".into(),
    };
    let expected = render_json(&report_document(&ds, &cfg, &[adj]).unwrap());
    assert_eq!(String::from_utf8(after).unwrap(), expected);
}

#[tokio::test]
async fn log_replays_after_restart() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_panel("disk");
    {
        let app = router(AppState::new(Store::open(dir.path()).unwrap(), None));
        let (s, _) = post(&app, "/datasets", ingest_body(&ds)).await;
        assert_eq!(s, StatusCode::CREATED);
        for (label, who) in [(1, "e1"), (0, "e2"), (1, "e3")] {
            post(
                &app,
                "/datasets/disk/adjudications",
                json!({"item_id": "s03", "category_id": "c02", "expert_label": label, "adjudicator_id": who}),
            )
            .await;
        }
    }
    let store = Store::open(dir.path()).unwrap();
    let stored = store.get("disk").unwrap();
    assert_eq!(*stored.dataset, ds);
    let events = stored.events();
    assert_eq!(
        events.iter().map(|e| e.seq).collect::<Vec<_>>(),
        vec![1, 2, 3]
    );
    assert_eq!(events[2].adjudication.adjudicator_id, "e3");

    let app = router(AppState::new(store, None));
    let (s, v) = post(
        &app,
        "/datasets/disk/adjudications",
        json!({"item_id": "s03", "category_id": "c02", "expert_label": 0, "adjudicator_id": "e4"}),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["event"]["seq"], 4);
    let (s, _) = post(&app, "/datasets", ingest_body(&ds)).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn torn_final_line_is_dropped_on_replay() {
    use std::io::Write;
    let dir = tempfile::tempdir().unwrap();
    {
        let app = router(AppState::new(Store::open(dir.path()).unwrap(), None));
        post(&app, "/datasets", ingest_body(&small_panel("torn"))).await;
        post(
            &app,
            "/datasets/torn/adjudications",
            json!({"item_id": "s01", "category_id": "c01", "expert_label": 1, "adjudicator_id": "e1"}),
        )
        .await;
    }
    let log = dir.path().join("torn").join("adjudications.jsonl");
    let mut f = std::fs::OpenOptions::new().append(true).open(&log).unwrap();
    f.write_all(b"{\"seq\":2,\"received_at\":").unwrap();
    drop(f);
    let store = Store::open(dir.path()).unwrap();
    assert_eq!(store.get("torn").unwrap().events().len(), 1);

    std::fs::write(&log, "not json\n").unwrap();
    assert!(Store::open(dir.path()).is_err());
}

#[tokio::test]
async fn report_costs_are_part_of_the_config() {
    let app = app();
    let ds = small_panel("cost");
    post(&app, "/datasets", ingest_body(&ds)).await;
    let (s, h, body) = get(&app, "/datasets/cost/report?costs=0.1,0.4,1").await;
    assert_eq!(s, StatusCode::OK);
    assert!(h["x-config"].to_str().unwrap().contains("costs"));
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert!(v["reliability"]["effort"]["reduction"].is_number());
    let (_, h, _) = get(&app, "/datasets/cost/report").await;
    assert_eq!(h["x-report-cache"], "computed");
    let (s, _, _) = get(&app, "/datasets/cost/report?costs=a,b,c").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn report_kappa_reference_is_selectable() {
    let app = app();
    let ds = small_panel("kr");
    post(&app, "/datasets", ingest_body(&ds)).await;
    let (s, _, body) = get(&app, "/datasets/kr/report").await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["model_reliability"]["reference"], "panel-majority");
    let (s, _, body) = get(&app, "/datasets/kr/report?kappa_reference=reference-labels").await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["model_reliability"]["reference"], "reference-labels");
    let (s, _, _) = get(&app, "/datasets/kr/report?kappa_reference=gold").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let mut bare = small_panel("bare");
    bare.reference = Default::default();
    post(&app, "/datasets", ingest_body(&bare)).await;
    let (s, _, body) = get(&app, "/datasets/bare/report?kappa_reference=reference-labels").await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert!(v["model_reliability"].is_null());
    assert!(v["notes"].to_string().contains("no reference labels"), "{}", v["notes"]);
    let (s, _, _) = get(&app, "/datasets/kr/report?kappa_reference=gold").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}
