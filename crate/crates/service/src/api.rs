//! `/v1` HTTP routes over a [`Store`].

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use telerehab_core::analytics::timeseries_csv;
use telerehab_core::assessment::AutoTest;
use telerehab_core::knowledge::{Exploration, OverrideRule, PatientRecord, Protocol};
use telerehab_core::movement::Movement;
use telerehab_core::posture::PostureConcept;
use telerehab_core::session::{Exercise, SessionReport};

use crate::store::{invalid, Assignment, Collection, Document, Store, StoreError, StoredResponse};
use crate::VasInput;

pub const TOKEN_ENV: &str = "TELEREHAB_TOKEN";

#[derive(Debug)]
pub struct AppState {
    pub store: Store,
    /// Required bearer token; `None` leaves the API open.
    pub token: Option<String>,
}

type Shared = Arc<AppState>;

#[derive(Debug)]
pub struct ApiError(pub StoreError);

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind, path) = match &self.0 {
            StoreError::Validation { path, .. } => (StatusCode::UNPROCESSABLE_ENTITY, "validation", Some(path.clone())),
            StoreError::Integrity(_) => (StatusCode::CONFLICT, "integrity", None),
            StoreError::Conflict(_) => (StatusCode::CONFLICT, "conflict", None),
            StoreError::NotFound { .. } => (StatusCode::NOT_FOUND, "not_found", None),
            StoreError::Io(_) | StoreError::Corrupt(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal", None),
        };
        let mut body = json!({ "error": kind, "message": self.0.to_string() });
        if let Some(p) = path {
            body["path"] = Value::String(p);
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// JSON body parsed with the failing field's path in the error.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, StoreError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        invalid(if path == "." { String::new() } else { path }, e.into_inner())
    })
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("documents serialize")
}

fn created<T: Serialize>(v: &T) -> Response {
    (StatusCode::CREATED, Json(to_value(v))).into_response()
}

// Collections reachable through the generic routes.
fn generic(name: &str) -> Result<Collection, StoreError> {
    let c: Collection = name.parse().map_err(|e: String| StoreError::NotFound {
        collection: Collection::Postures,
        id: e,
    })?;
    match c {
        Collection::Postures
        | Collection::Movements
        | Collection::Exercises
        | Collection::Protocols
        | Collection::Tests
        | Collection::Overrides
        | Collection::Assignments => Ok(c),
        _ => Err(StoreError::NotFound {
            collection: c,
            id: String::new(),
        }),
    }
}

macro_rules! dispatch {
    ($c:expr, $f:ident ( $($arg:expr),* )) => {
        match $c {
            Collection::Postures => $f::<PostureConcept>($($arg),*),
            Collection::Movements => $f::<Movement>($($arg),*),
            Collection::Exercises => $f::<Exercise>($($arg),*),
            Collection::Protocols => $f::<Protocol>($($arg),*),
            Collection::Tests => $f::<AutoTest>($($arg),*),
            Collection::Overrides => $f::<OverrideRule>($($arg),*),
            Collection::Assignments => $f::<Assignment>($($arg),*),
            Collection::Patients => $f::<PatientRecord>($($arg),*),
            Collection::Sessions => $f::<SessionReport>($($arg),*),
            Collection::Responses => $f::<StoredResponse>($($arg),*),
        }
    };
}

fn list_doc<T: Document>(store: &Store) -> Result<Value, StoreError> {
    Ok(to_value(&store.list::<T>()?))
}

fn get_doc<T: Document>(store: &Store, id: &str) -> Result<Value, StoreError> {
    Ok(to_value(&store.get::<T>(id)?))
}

fn create_doc<T: Document>(store: &Store, body: &Bytes) -> Result<Value, StoreError> {
    Ok(to_value(&store.create(parse::<T>(body)?)?))
}

fn put_doc<T: Document>(store: &Store, id: &str, body: &Bytes) -> Result<Value, StoreError> {
    let doc = parse::<T>(body)?;
    if doc.id() != id {
        return Err(invalid("id", format!("body id `{}` differs from `{id}`", doc.id())));
    }
    Ok(to_value(&store.put(doc)?))
}

fn delete_doc<T: Document>(store: &Store, id: &str) -> Result<Value, StoreError> {
    Ok(json!({ "id": id, "revision": store.delete::<T>(id)? }))
}

async fn list_any(State(s): State<Shared>, Path(c): Path<String>) -> ApiResult<Json<Value>> {
    let c = generic(&c)?;
    Ok(Json(dispatch!(c, list_doc(&s.store))?))
}

async fn create_any(State(s): State<Shared>, Path(c): Path<String>, body: Bytes) -> ApiResult<Response> {
    let c = generic(&c)?;
    let v = if c == Collection::Assignments {
        let a: Assignment = parse(&body)?;
        to_value(&s.store.create_with_id(a, "a", |a, id| a.id = id)?)
    } else {
        dispatch!(c, create_doc(&s.store, &body))?
    };
    Ok((StatusCode::CREATED, Json(v)).into_response())
}

async fn get_any(State(s): State<Shared>, Path((c, id)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    let c = generic(&c)?;
    Ok(Json(dispatch!(c, get_doc(&s.store, &id))?))
}

async fn put_any(
    State(s): State<Shared>,
    Path((c, id)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let c = generic(&c)?;
    Ok(Json(dispatch!(c, put_doc(&s.store, &id, &body))?))
}

async fn delete_any(State(s): State<Shared>, Path((c, id)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    let c = generic(&c)?;
    Ok(Json(dispatch!(c, delete_doc(&s.store, &id))?))
}

async fn list_patients(State(s): State<Shared>) -> ApiResult<Json<Value>> {
    Ok(Json(list_doc::<PatientRecord>(&s.store)?))
}

async fn create_patient(State(s): State<Shared>, body: Bytes) -> ApiResult<Response> {
    Ok((StatusCode::CREATED, Json(create_doc::<PatientRecord>(&s.store, &body)?)).into_response())
}

async fn get_patient(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(get_doc::<PatientRecord>(&s.store, &id)?))
}

async fn put_patient(State(s): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    Ok(Json(put_doc::<PatientRecord>(&s.store, &id, &body)?))
}

async fn delete_patient(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(delete_doc::<PatientRecord>(&s.store, &id)?))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    Many(Vec<T>),
    One(T),
}

async fn post_explorations(State(s): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let list = match parse::<OneOrMany<Exploration>>(&body) {
        Ok(OneOrMany::Many(v)) => v,
        Ok(OneOrMany::One(e)) => vec![e],
        // untagged errors carry no path; reparse as a single exploration for one
        Err(_) => vec![parse::<Exploration>(&body)?],
    };
    Ok(created(&crate::add_explorations(&s.store, &id, list)?))
}

async fn post_vas(State(s): State<Shared>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let input: VasInput = parse(&body)?;
    Ok(created(&crate::add_vas(&s.store, &id, &input)?))
}

#[derive(Deserialize)]
struct ProtocolQuery {
    protocol: Option<String>,
}

async fn get_recommendations(
    State(s): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<ProtocolQuery>,
) -> ApiResult<Json<Value>> {
    let protocol = q
        .protocol
        .ok_or_else(|| invalid("protocol", "query parameter is required"))?;
    Ok(Json(to_value(&crate::recommendations(&s.store, &id, &protocol)?)))
}

async fn post_session(State(s): State<Shared>, body: Bytes) -> ApiResult<Response> {
    let report: SessionReport = parse(&body)?;
    Ok(created(&crate::upload_session(&s.store, report)?))
}

async fn list_sessions(State(s): State<Shared>) -> ApiResult<Json<Value>> {
    Ok(Json(list_doc::<SessionReport>(&s.store)?))
}

async fn post_response(State(s): State<Shared>, body: Bytes) -> ApiResult<Response> {
    let r: StoredResponse = parse(&body)?;
    Ok(created(&crate::submit_response(&s.store, r)?))
}

async fn list_responses(State(s): State<Shared>) -> ApiResult<Json<Value>> {
    Ok(Json(list_doc::<StoredResponse>(&s.store)?))
}

#[derive(Deserialize)]
struct FormatQuery {
    format: Option<String>,
}

async fn get_timeseries(
    State(s): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<FormatQuery>,
) -> ApiResult<Response> {
    let points = crate::timeseries(&s.store, &id)?;
    match q.format.as_deref() {
        None | Some("json") => Ok(Json(to_value(&points)).into_response()),
        Some("csv") => Ok(([(header::CONTENT_TYPE, "text/csv")], timeseries_csv(&points)).into_response()),
        Some(other) => Err(invalid("format", format!("unknown format `{other}`")).into()),
    }
}

async fn get_cohort(State(s): State<Shared>) -> ApiResult<Json<Value>> {
    Ok(Json(to_value(&crate::cohort(&s.store)?)))
}

async fn get_replay(State(s): State<Shared>, Path((id, sid)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    Ok(Json(to_value(&crate::replay(&s.store, &id, &sid)?)))
}

async fn require_token(State(s): State<Shared>, req: Request, next: Next) -> Response {
    if let Some(token) = &s.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|h| h.to_str().ok())
            .and_then(|h| h.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            let body = json!({ "error": "unauthorized", "message": "missing or wrong bearer token" });
            return (StatusCode::UNAUTHORIZED, Json(body)).into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: AppState) -> Router {
    let state = Arc::new(state);
    let v1 = Router::new()
        .route("/patients", get(list_patients).post(create_patient))
        .route(
            "/patients/{id}",
            get(get_patient).put(put_patient).delete(delete_patient),
        )
        .route("/patients/{id}/explorations", post(post_explorations))
        .route("/patients/{id}/vas", post(post_vas))
        .route("/patients/{id}/recommendations", get(get_recommendations))
        .route("/patients/{id}/analytics/timeseries", get(get_timeseries))
        .route("/patients/{id}/sessions/{sid}/replay", get(get_replay))
        .route("/sessions", get(list_sessions).post(post_session))
        .route("/responses", get(list_responses).post(post_response))
        .route("/cohort/analytics", get(get_cohort))
        .route("/{collection}", get(list_any).post(create_any))
        .route("/{collection}/{id}", get(get_any).put(put_any).delete(delete_any));
    Router::new()
        .nest("/v1", v1)
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .layer(DefaultBodyLimit::max(256 * 1024 * 1024))
        .with_state(state)
}

/// Serve until Ctrl-C.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
