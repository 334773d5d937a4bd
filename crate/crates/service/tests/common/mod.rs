#![allow(dead_code)]

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use chrono::NaiveDate;
use http_body_util::BodyExt;
use serde_json::Value;
use tempfile::TempDir;
use tower::ServiceExt;

use telerehab_core::fixtures::{content_library, plan_playback, PlaybackOptions};
use telerehab_core::session::{start_session, ContentLibrary, SessionMeta, SessionPlan, SessionReport};
use telerehab_service::{router, seed_fixtures, AppState, Store};

pub struct Harness {
    pub dir: TempDir,
    pub app: Router,
}

pub fn harness(seed: bool, token: Option<&str>) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    if seed {
        seed_fixtures(&store).unwrap();
    }
    let app = router(AppState {
        store,
        token: token.map(str::to_string),
    });
    Harness { dir, app }
}

pub struct Reply {
    pub status: StatusCode,
    pub content_type: String,
    pub text: String,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.text).unwrap_or_else(|e| panic!("{e}: {}", self.text))
    }
}

pub async fn send(app: &Router, method: Method, uri: &str, body: Option<&Value>, token: Option<&str>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = match body {
        Some(v) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(serde_json::to_vec(v).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let content_type = res
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|h| h.to_str().ok())
        .unwrap_or_default()
        .to_string();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    Reply {
        status,
        content_type,
        text: String::from_utf8(bytes.to_vec()).unwrap(),
    }
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    send(app, Method::GET, uri, None, None).await
}

pub async fn post(app: &Router, uri: &str, body: &Value) -> Reply {
    send(app, Method::POST, uri, Some(body), None).await
}

pub fn content() -> &'static ContentLibrary {
    static LIB: std::sync::OnceLock<ContentLibrary> = std::sync::OnceLock::new();
    LIB.get_or_init(|| content_library().unwrap())
}

/// Engine report for an exact scripted performance of `plan`, frames kept.
pub fn identity_report(id: &str, patient: &str, date: NaiveDate, plan: SessionPlan) -> SessionReport {
    let content = content();
    let rec = plan_playback(content, &plan, &PlaybackOptions::exact()).unwrap();
    let meta = SessionMeta {
        id: id.into(),
        patient_id: patient.into(),
        date,
    };
    let mut engine = start_session(meta, plan, content).unwrap().with_replay();
    for f in rec.frames() {
        if engine.is_completed() {
            break;
        }
        engine.feed_frame(f).unwrap();
    }
    engine.finish()
}
