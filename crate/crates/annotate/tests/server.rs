use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use mmt_annotate::{router, AppState, InspectData};
use mmt_core::annotation::{create_session, SessionStore};
use mmt_core::query_builder::{write_queries, QuerySet};
use mmt_core::retrieval::{content_hash, ImageRecord, ImageStatus};

fn fixture_images(dir: &Path, sentences: usize, per: usize) -> Vec<ImageRecord> {
    let pool = mmt_core::fixtures_dir().join("images");
    let mut out = Vec::new();
    for sid in 0..sentences {
        for m in 1..=per {
            let i = sid * per + m - 1;
            let failed = i % 9 == 8;
            let bytes = std::fs::read(pool.join(format!("pool_{:02}.png", i % 12))).unwrap();
            let path = dir.join(format!("{sid}_{m}.png"));
            std::fs::write(&path, &bytes).unwrap();
            out.push(ImageRecord {
                sid,
                m,
                query: format!("query {sid} {m}"),
                url: (!failed).then(|| format!("fixture://pool_{:02}", i % 12)),
                path: (!failed).then(|| path.to_string_lossy().into_owned()),
                hash: (!failed).then(|| content_hash(&bytes)),
                status: if failed { ImageStatus::Failed } else { ImageStatus::Ok },
            });
        }
    }
    out
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>, Option<String>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ct = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_owned());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, ct)
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b, _) = call(app, "GET", uri, None).await;
    (s, serde_json::from_slice(&b).unwrap())
}

struct Fixture {
    _tmp: tempfile::TempDir,
    records: Vec<ImageRecord>,
    session_dir: std::path::PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("img");
    std::fs::create_dir(&img).unwrap();
    let records = fixture_images(&img, 12, 5);
    let session_dir = tmp.path().join("session");
    Fixture {
        _tmp: tmp,
        records,
        session_dir,
    }
}

fn app_for(f: &Fixture, size: usize) -> (Router, String) {
    let session = create_session(&f.records, size, 42).unwrap();
    let id = session.id.clone();
    let store = SessionStore::open(&f.session_dir, session).unwrap();
    let sources = (0..12).map(|i| format!("sentence {i}")).collect();
    (router(AppState::new(vec![store], sources), None), id)
}

#[tokio::test]
async fn full_session_labels_and_stats() {
    let f = fixture();
    let (app, id) = app_for(&f, 20);
    let mut noise = 0;
    for i in 0..20 {
        let (s, next) = get_json(&app, &format!("/session/{id}/next")).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(next["status"], "pending");
        assert_eq!(next["index"], i);
        let label = if i % 3 == 0 { "noise" } else { "informative" };
        noise += usize::from(i % 3 == 0);
        let item = json!({"sid": next["item"]["sid"], "m": next["item"]["m"]});
        let (s, body, _) = call(
            &app,
            "POST",
            &format!("/session/{id}/label"),
            Some(json!({"item": item, "label": label, "annotator": "t"})),
        )
        .await;
        assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    }
    let (_, next) = get_json(&app, &format!("/session/{id}/next")).await;
    assert_eq!(next["status"], "complete");
    let (_, stats) = get_json(&app, &format!("/session/{id}/stats")).await;
    assert_eq!(stats["labeled"], 20);
    assert_eq!(stats["noise_count"], noise);
    assert_eq!(stats["informative_count"], 20 - noise);
    assert_eq!(stats["remaining"], 0);
}

#[tokio::test]
async fn labels_survive_restart_and_resume() {
    let f = fixture();
    let (app, id) = app_for(&f, 20);
    let mut labeled = Vec::new();
    for _ in 0..7 {
        let (_, next) = get_json(&app, &format!("/session/{id}/next")).await;
        let item = json!({"sid": next["item"]["sid"], "m": next["item"]["m"]});
        labeled.push(item.clone());
        call(&app, "POST", &format!("/session/{id}/label"), Some(json!({"item": item, "label": "noise"}))).await;
    }
    drop(app);
    let (app, id2) = app_for(&f, 20);
    assert_eq!(id, id2);
    let (_, stats) = get_json(&app, &format!("/session/{id}/stats")).await;
    assert_eq!(stats["labeled"], 7);
    assert_eq!(stats["noise_count"], 7);
    let (_, next) = get_json(&app, &format!("/session/{id}/next")).await;
    assert_eq!(next["index"], 7);
    let item = json!({"sid": next["item"]["sid"], "m": next["item"]["m"]});
    assert!(!labeled.contains(&item));
}

#[tokio::test]
async fn repeated_label_is_idempotent() {
    let f = fixture();
    let (app, id) = app_for(&f, 10);
    let (_, next) = get_json(&app, &format!("/session/{id}/next")).await;
    let item = json!({"sid": next["item"]["sid"], "m": next["item"]["m"]});
    for _ in 0..3 {
        let (s, _, _) = call(&app, "POST", &format!("/session/{id}/label"), Some(json!({"item": item, "label": "noise"}))).await;
        assert_eq!(s, StatusCode::OK);
    }
    let (_, stats) = get_json(&app, &format!("/session/{id}/stats")).await;
    assert_eq!(stats["labeled"], 1);
    assert_eq!(stats["noise_count"], 1);
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let f = fixture();
    let (app, id) = app_for(&f, 10);
    assert_eq!(get_json(&app, "/session/nope/next").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get_json(&app, "/session/nope/stats").await.0, StatusCode::NOT_FOUND);
    let uri = format!("/session/{id}/label");
    let (s, _, _) = call(&app, "POST", &uri, Some(json!({"item": {"sid": 999, "m": 1}, "label": "noise"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _, _) = call(&app, "POST", &uri, Some(json!({"item": {"sid": 0, "m": 1}, "label": "maybe"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _, _) = call(&app, "POST", &uri, Some(json!({"label": "noise"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let req = Request::builder().method("POST").uri(&uri).body(Body::from("{not json")).unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::BAD_REQUEST);
    let (s, _, _) = call(&app, "POST", "/session/nope/label", Some(json!({"item": {"sid": 0, "m": 1}, "label": "noise"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(get_json(&app, "/inspect/sentences").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn image_bytes_are_served_verbatim() {
    let f = fixture();
    let (app, id) = app_for(&f, 10);
    let (_, next) = get_json(&app, &format!("/session/{id}/next")).await;
    let (s, bytes, ct) = call(&app, "GET", next["image_url"].as_str().unwrap(), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ct.as_deref(), Some("image/png"));
    let rec = f
        .records
        .iter()
        .find(|r| r.sid == next["item"]["sid"] && r.m == next["item"]["m"])
        .unwrap();
    assert_eq!(bytes, std::fs::read(rec.path.as_ref().unwrap()).unwrap());
    assert_eq!(content_hash(&bytes), *rec.hash.as_ref().unwrap());
}

#[tokio::test]
async fn inspection_matches_written_queries() {
    let f = fixture();
    let sets: Vec<QuerySet> = (0..12)
        .map(|sid| QuerySet {
            sid,
            ranked: vec![format!("w{sid}"), "x".into()],
            queries: (1..=5).map(|m| format!("query {sid} {m}")).collect(),
            fallback: sid == 3,
        })
        .collect();
    let qpath = f.session_dir.with_file_name("queries.jsonl");
    write_queries(&qpath, &sets).unwrap();
    let text = std::fs::read_to_string(&qpath).unwrap();
    let sources: Vec<String> = (0..12).map(|i| format!("sentence {i}")).collect();
    let data = InspectData::load(&qpath, &f.records, sources.clone()).unwrap();
    let app = router(AppState::new(Vec::new(), sources).with_inspect(data), None);

    let (s, list) = get_json(&app, "/inspect/sentences?offset=2&limit=3").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(list["total"], 12);
    assert_eq!(list["items"].as_array().unwrap().len(), 3);
    assert_eq!(list["items"][0]["sid"], 2);

    for (line, set) in text.lines().zip(&sets) {
        let (s, detail) = get_json(&app, &format!("/inspect/sentence/{}", set.sid)).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(detail["queries_line"].as_str().unwrap(), line);
        assert_eq!(detail["queries"], json!(set.queries));
        assert_eq!(detail["ranked"], json!(set.ranked));
        assert_eq!(detail["fallback"], set.fallback);
        let images = detail["images"].as_array().unwrap();
        let ms: Vec<u64> = images.iter().map(|i| i["m"].as_u64().unwrap()).collect();
        assert_eq!(ms, vec![1, 2, 3, 4, 5]);
        for img in images {
            let rec = f.records.iter().find(|r| r.sid == set.sid && r.m == img["m"]).unwrap();
            assert_eq!(img["status"], json!(rec.status));
            assert_eq!(img["image_url"].is_null(), rec.status != ImageStatus::Ok);
        }
    }
    let (s, bytes, _) = call(&app, "GET", "/inspect/image/0/1", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(content_hash(&bytes), *f.records[0].hash.as_ref().unwrap());
    assert_eq!(get_json(&app, "/inspect/sentence/99").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn static_client_is_served() {
    let f = fixture();
    let web = f.session_dir.with_file_name("web");
    std::fs::create_dir_all(&web).unwrap();
    std::fs::write(web.join("index.html"), "<html>ok</html>").unwrap();
    let app = router(AppState::default(), Some(web));
    let (s, body, _) = call(&app, "GET", "/index.html", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"<html>ok</html>");
}
