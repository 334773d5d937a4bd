mod common;

use std::collections::BTreeSet;

use axum::http::{Method, StatusCode};
use chrono::NaiveDate;
use serde_json::{json, Value};

use common::*;
use telerehab_core::analytics::RatingPoint;
use telerehab_core::knowledge::{PatientRecord, RecommendationSet};
use telerehab_core::session::{SessionPlan, SessionReport};
use telerehab_core::skeleton::SkeletonFrame;
use telerehab_service::{Assignment, Collection, Store, StoreError, Stored};

fn day(d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 3, d).unwrap()
}

fn names(set: &RecommendationSet) -> BTreeSet<String> {
    set.recommended.iter().map(|r| r.exercise.clone()).collect()
}

fn expect_set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

#[test]
fn store_revisions_and_tombstones() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let mut p = PatientRecord {
        id: "ann".into(),
        ..Default::default()
    };
    assert_eq!(store.put(p.clone()).unwrap().revision, 1);
    assert_eq!(store.get::<PatientRecord>("ann").unwrap().document, p);
    p.name = "Ann".into();
    assert_eq!(store.put(p.clone()).unwrap().revision, 2);
    assert_eq!(store.delete::<PatientRecord>("ann").unwrap(), 3);
    assert!(matches!(
        store.get::<PatientRecord>("ann"),
        Err(StoreError::NotFound { .. })
    ));
    assert_eq!(store.create(p.clone()).unwrap().revision, 4);
    assert!(matches!(store.create(p.clone()), Err(StoreError::Conflict(_))));

    let (same, changed) = store.ensure(p.clone()).unwrap();
    assert_eq!((same.revision, changed), (4, false));

    // A torn write leaves only a temp file, which is never listed.
    std::fs::write(dir.path().join("patients/.bob.json.tmp"), b"{\"revis").unwrap();
    let reopened = Store::open(dir.path()).unwrap();
    let ids: Vec<String> = reopened
        .documents::<PatientRecord>()
        .unwrap()
        .into_iter()
        .map(|p| p.id)
        .collect();
    assert_eq!(ids, vec!["ann"]);
    let audit = std::fs::read_to_string(dir.path().join("audit.log")).unwrap();
    assert_eq!(audit.lines().count(), 4);
    assert!(Store::open(dir.path())
        .unwrap()
        .exists(Collection::Patients, "ann")
        .unwrap());
    assert!(matches!(
        store.get::<PatientRecord>("../x"),
        Err(StoreError::Validation { .. })
    ));
}

#[test]
fn integrity_on_write_and_delete() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    telerehab_service::seed_fixtures(&store).unwrap();
    let a = Assignment {
        id: String::new(),
        patient_id: "john".into(),
        plan: SessionPlan::single("NoSuchExercise", 1, 1),
        date: None,
        note: String::new(),
    };
    assert!(matches!(
        store.create_with_id(a.clone(), "a", |a, id| a.id = id),
        Err(StoreError::Integrity(_))
    ));
    let ok = Assignment {
        plan: SessionPlan::single("HipFlexion40", 1, 1),
        ..a
    };
    let stored = store.create_with_id(ok, "a", |a, id| a.id = id).unwrap();
    assert_eq!(stored.document.id, "a-0001");
    assert!(matches!(
        store.delete::<PatientRecord>("john"),
        Err(StoreError::Integrity(_))
    ));
    store.delete::<Assignment>("a-0001").unwrap();
    store.delete::<PatientRecord>("john").unwrap();

    let again = telerehab_service::seed_fixtures(&store).unwrap();
    assert_eq!(again.written, 1);
}

#[tokio::test]
async fn recommendations_follow_the_record() {
    let h = harness(true, None);
    let r = get(&h.app, "/v1/patients/john/recommendations?protocol=THR").await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text);
    let set: RecommendationSet = serde_json::from_str(&r.text).unwrap();
    assert_eq!(set.phase.as_str(), "I");
    assert_eq!(
        names(&set),
        expect_set(&["HipFlexion40", "HipAbduction20", "HipExtension15", "SoftSquat"])
    );
    assert_eq!(
        get(&h.app, "/v1/patients/john/recommendations?protocol=THR").await.text,
        r.text
    );

    assert_eq!(
        get(&h.app, "/v1/patients/nobody/recommendations?protocol=THR")
            .await
            .status,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        get(&h.app, "/v1/patients/john/recommendations?protocol=ACL")
            .await
            .status,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        get(&h.app, "/v1/patients/john/recommendations").await.status,
        StatusCode::UNPROCESSABLE_ENTITY
    );

    let r = post(&h.app, "/v1/patients", &json!({ "id": "empty" })).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);
    let set: RecommendationSet = serde_json::from_value(
        get(&h.app, "/v1/patients/empty/recommendations?protocol=THR")
            .await
            .json(),
    )
    .unwrap();
    assert_eq!(set.phase.as_str(), "Unclassified");
    assert!(set.recommended.is_empty());

    let explorations = json!([
        { "date": "2024-03-01", "location": "HipJoint", "side": "Left", "type": "Flexion", "rom": 70.0 },
        { "date": "2024-03-01", "location": "HipJoint", "side": "Left", "type": "Abduction", "rom": 25.0 },
        { "date": "2024-03-01", "location": "HipJoint", "side": "Left", "type": "Extension", "rom": 22.0 },
    ]);
    let r = post(&h.app, "/v1/patients/john/explorations", &explorations).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);
    let r = post(
        &h.app,
        "/v1/patients/john/vas",
        &json!({ "date": "2024-03-01", "value": 1.5 }),
    )
    .await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);
    let set: RecommendationSet = serde_json::from_value(
        get(&h.app, "/v1/patients/john/recommendations?protocol=THR")
            .await
            .json(),
    )
    .unwrap();
    assert_eq!(set.phase.as_str(), "II");
    // Hand evaluation of the second row plus everything the first row allows.
    assert_eq!(
        names(&set),
        expect_set(&[
            "HipFlexion40",
            "HipFlexion80",
            "HipAbduction20",
            "HipExtension15",
            "HipExtension24",
            "SoftSquat"
        ])
    );
}

#[tokio::test]
async fn validation_errors_name_the_field() {
    let h = harness(true, None);
    let bad = json!({ "id": "x", "vas_reports": [{ "date": "2024-01-01", "value": 12.0 }] });
    let r = post(&h.app, "/v1/patients", &bad).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["path"], "vas_reports[0].value");

    let wrong_type = json!({ "id": "x", "explorations": [{ "date": "2024-01-01", "location": "HipJoint", "side": "Up", "type": "Flexion", "rom": 1 }] });
    let r = post(&h.app, "/v1/patients", &wrong_type).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["path"], "explorations[0].side");

    let r = post(
        &h.app,
        "/v1/patients/john/vas",
        &json!({ "date": "2024-03-01", "mark": 120.0, "length": 100.0 }),
    )
    .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let r = post(
        &h.app,
        "/v1/patients/john/vas",
        &json!({ "date": "2024-03-01", "mark": 100.0, "length": 100.0 }),
    )
    .await;
    let patient: Stored<PatientRecord> = serde_json::from_value(r.json()).unwrap();
    assert_eq!(patient.document.vas_reports.last().unwrap().value, 10.0);

    let r = post(
        &h.app,
        "/v1/assignments",
        &json!({ "patient_id": "john", "plan": SessionPlan::single("Nope", 1, 1) }),
    )
    .await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.json()["error"], "integrity");
    let r = post(
        &h.app,
        "/v1/assignments",
        &json!({ "patient_id": "john", "plan": SessionPlan::single("SoftSquat", 2, 5) }),
    )
    .await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);

    let r = send(
        &h.app,
        Method::PUT,
        "/v1/patients/john",
        Some(&json!({ "id": "jane" })),
        None,
    )
    .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(get(&h.app, "/v1/nonsense").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn generic_collections_round_trip() {
    let h = harness(true, None);
    for c in ["postures", "movements", "exercises", "protocols", "tests", "overrides"] {
        let r = get(&h.app, &format!("/v1/{c}")).await;
        assert_eq!(r.status, StatusCode::OK, "{c}");
        let list = r.json();
        let revisions: Vec<Value> = list.as_array().unwrap().iter().map(|s| s["revision"].clone()).collect();
        assert!(revisions.iter().all(|r| r == 1), "{c}");
    }
    let ex = get(&h.app, "/v1/exercises/SoftSquat").await.json();
    let mut doc = ex["document"].clone();
    doc["description"] = json!("Shallow squat");
    let r = send(&h.app, Method::PUT, "/v1/exercises/SoftSquat", Some(&doc), None).await;
    assert_eq!(r.json()["revision"], 2);
    let r = post(&h.app, "/v1/exercises", &doc).await;
    assert_eq!(r.status, StatusCode::CONFLICT);

    let rule = json!({
        "id": "no-deep-flexion",
        "patient_id": "john",
        "kind": "contraindicate",
        "filter": { "location": "HipJoint", "type": "Flexion", "max_rom": 360.0 },
        "quantifier": "SomeMovement",
        "note": "surgeon's instruction"
    });
    let r = post(&h.app, "/v1/overrides", &rule).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);
    let set: RecommendationSet = serde_json::from_value(
        get(&h.app, "/v1/patients/john/recommendations?protocol=THR")
            .await
            .json(),
    )
    .unwrap();
    assert!(!names(&set).contains("HipFlexion40"));
    assert!(set.contraindicated.iter().any(|c| c.exercise == "HipFlexion40"));
    let r = send(&h.app, Method::DELETE, "/v1/overrides/no-deep-flexion", None, None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["revision"], 2);

    let r = send(&h.app, Method::DELETE, "/v1/movements/HipFlex40L", None, None).await;
    assert_eq!(r.status, StatusCode::CONFLICT);

    let resp = json!({
        "patient_id": "john",
        "response": { "test": "PostSession", "answers": [0, 1, 2, 3], "date": "2024-03-02" }
    });
    let r = post(&h.app, "/v1/responses", &resp).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);
    assert_eq!(r.json()["document"]["id"], "r-0001");
    assert_eq!(r.json()["document"]["score"], 6.0);
    let incomplete = json!({
        "patient_id": "john",
        "response": { "test": "PostSession", "answers": [0, null, 2, 3], "date": "2024-03-02" }
    });
    assert_eq!(
        post(&h.app, "/v1/responses", &incomplete).await.status,
        StatusCode::UNPROCESSABLE_ENTITY
    );
}

#[tokio::test]
async fn session_upload_updates_record_and_analytics() {
    let h = harness(true, None);
    let report = identity_report("s-001", "john", day(5), SessionPlan::single("HipFlexion40", 1, 2));
    let frames = report.replay.as_ref().unwrap().len();
    assert!(frames > 0);
    let body = serde_json::to_value(&report).unwrap();

    assert!(get(&h.app, "/v1/patients/john/analytics/timeseries")
        .await
        .json()
        .as_array()
        .unwrap()
        .is_empty());
    let r = post(&h.app, "/v1/sessions", &body).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);
    let up = r.json();
    assert_eq!(up["phases"]["THR"], "I");
    let added = up["explorations_added"].as_array().unwrap();
    assert_eq!(added.len(), 1);
    assert_eq!(added[0]["type"], "Flexion");
    assert!((added[0]["rom"].as_f64().unwrap() - 40.0).abs() < 1.0);
    let patient: PatientRecord = serde_json::from_value(up["patient"]["document"].clone()).unwrap();
    assert_eq!(patient.explorations.len(), 2);
    assert!(patient.validate().is_ok());

    assert_eq!(post(&h.app, "/v1/sessions", &body).await.status, StatusCode::CONFLICT);
    let mut stranger = report.clone();
    stranger.meta.id = "s-002".into();
    stranger.meta.patient_id = "nobody".into();
    let r = post(&h.app, "/v1/sessions", &serde_json::to_value(&stranger).unwrap()).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);

    let series: Vec<RatingPoint> =
        serde_json::from_value(get(&h.app, "/v1/patients/john/analytics/timeseries").await.json()).unwrap();
    assert_eq!(series.len(), 1);
    assert_eq!(
        (series[0].exercise_rating, series[0].session_id.as_str()),
        (1.0, "s-001")
    );
    let csv = get(&h.app, "/v1/patients/john/analytics/timeseries?format=csv").await;
    assert!(csv.content_type.starts_with("text/csv"));
    assert_eq!(csv.text.lines().nth(1), Some("1,2024-03-05,1,1"));
    let cohort = get(&h.app, "/v1/cohort/analytics").await.json();
    assert_eq!(cohort[0]["count"], 1);

    let replay: Vec<SkeletonFrame> =
        serde_json::from_value(get(&h.app, "/v1/patients/john/sessions/s-001/replay").await.json()).unwrap();
    assert_eq!(replay.len(), frames);
    assert_eq!(
        get(&h.app, "/v1/patients/empty/sessions/s-001/replay").await.status,
        StatusCode::NOT_FOUND
    );

    let stored: Vec<Stored<SessionReport>> = serde_json::from_value(get(&h.app, "/v1/sessions").await.json()).unwrap();
    assert_eq!(stored.len(), 1);
    assert!(stored[0].document.validate().is_ok());
    assert_eq!(stored[0].document, report);
}

#[tokio::test]
async fn bearer_token_gate() {
    let h = harness(false, Some("s3cret"));
    assert_eq!(get(&h.app, "/v1/patients").await.status, StatusCode::UNAUTHORIZED);
    let r = send(&h.app, Method::GET, "/v1/patients", None, Some("wrong")).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    let r = send(&h.app, Method::GET, "/v1/patients", None, Some("s3cret")).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json(), json!([]));
}
