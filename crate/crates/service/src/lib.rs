//! Document store and HTTP API for the telerehabilitation engine.

pub mod api;
pub mod store;

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

pub use telerehab_core as core;
pub use telerehab_core::analytics::{CohortPoint, RatingPoint, RomExtent};
pub use telerehab_core::knowledge::{Exploration, OverrideRule, PatientRecord, Protocol, RecommendationSet, VasReport};
pub use telerehab_core::session::SessionReport;

pub use api::{router, serve, AppState};
pub use store::{Assignment, Collection, Document, Store, StoreError, Stored, StoredResponse};

use telerehab_core::analytics::{
    cohort_average, joint_side, patient_timeseries, rom_extents, update_exploration, AnalyticsError,
};
use telerehab_core::assessment::{post_session_test, score_autotest, vas_from_mark, AutoTest};
use telerehab_core::fixtures;
use telerehab_core::knowledge::{classify_patient_phase, recommend_exercises, thr_protocol, Side};
use telerehab_core::movement::MovementType;
use telerehab_core::posture::{FeatureBasis, PostureConcept};
use telerehab_core::skeleton::SkeletonFrame;

use store::invalid;

/// Result of storing a session report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionUpload {
    pub report_revision: u64,
    pub patient: Stored<PatientRecord>,
    pub explorations_added: Vec<Exploration>,
    /// Phase per stored protocol after the update.
    pub phases: BTreeMap<String, String>,
}

/// A VAS entry given either as a value or as a mark on a line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VasInput {
    pub date: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mark: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<f64>,
}

impl VasInput {
    pub fn resolve(&self) -> Result<VasReport, StoreError> {
        let value = match (self.value, self.mark, self.length) {
            (Some(v), None, None) => v,
            (None, Some(mark), Some(length)) => vas_from_mark(mark, length).map_err(|e| invalid("mark", e))?,
            _ => return Err(invalid("value", "give either `value` or both `mark` and `length`")),
        };
        Ok(VasReport { date: self.date, value })
    }
}

pub fn recommendations(store: &Store, patient: &str, protocol: &str) -> Result<RecommendationSet, StoreError> {
    let patient = store.get::<PatientRecord>(patient)?.document;
    let protocol = store.get::<Protocol>(protocol)?.document;
    let content = store.content()?;
    let overrides = store.documents::<OverrideRule>()?;
    Ok(recommend_exercises(&patient, &protocol, &content, &overrides)?)
}

/// Phase of `patient` under every stored protocol.
pub fn phases(store: &Store, patient: &PatientRecord) -> Result<BTreeMap<String, String>, StoreError> {
    Ok(store
        .documents::<Protocol>()?
        .iter()
        .map(|p| (p.name.clone(), classify_patient_phase(patient, p).as_str().to_string()))
        .collect())
}

pub fn add_explorations(
    store: &Store,
    patient: &str,
    explorations: Vec<Exploration>,
) -> Result<Stored<PatientRecord>, StoreError> {
    store.update::<PatientRecord>(patient, |p| {
        p.explorations.extend(explorations);
        p.explorations.sort_by_key(|e| e.date);
        Ok(())
    })
}

pub fn add_vas(store: &Store, patient: &str, input: &VasInput) -> Result<Stored<PatientRecord>, StoreError> {
    let report = input.resolve()?;
    store.update::<PatientRecord>(patient, |p| {
        p.vas_reports.push(report);
        p.vas_reports.sort_by_key(|v| v.date);
        Ok(())
    })
}

/// Every (location, side, type) measured by a report's traces.
fn measured_components(report: &SessionReport) -> Vec<(String, Side, MovementType)> {
    let mut out: Vec<(String, Side, MovementType)> = Vec::new();
    let comps = report
        .exercises
        .iter()
        .flat_map(|e| &e.rep_records)
        .flat_map(|r| &r.traces)
        .flat_map(|t| &t.components);
    for c in comps {
        let Some(side) = c.joint.and_then(joint_side) else {
            continue;
        };
        let key = (c.location.clone(), side, c.movement_type.clone());
        if !out.contains(&key) {
            out.push(key);
        }
    }
    out
}

/// Store a report, append the ranges it measured to the patient's
/// explorations and reclassify.
pub fn upload_session(store: &Store, report: SessionReport) -> Result<SessionUpload, StoreError> {
    let patient_id = report.meta.patient_id.clone();
    if !store.exists(Collection::Patients, &patient_id)? {
        return Err(StoreError::NotFound {
            collection: Collection::Patients,
            id: patient_id,
        });
    }
    let basis = FeatureBasis::default_basis();
    let mut extents = Vec::new();
    for (location, side, ty) in measured_components(&report) {
        match rom_extents(&report, &location, side, &ty, basis) {
            Ok(e) => extents.push(e),
            Err(AnalyticsError::NoTrace { .. }) => {}
            Err(e) => return Err(invalid("exercises", e)),
        }
    }
    let date = report.meta.date;
    let stored = store.create(report)?;
    let mut added = Vec::new();
    let patient = store.update::<PatientRecord>(&patient_id, |p| {
        for e in &extents {
            *p = update_exploration(p, e, date).map_err(|err| invalid("explorations", err))?;
            added.push(Exploration {
                date,
                location: e.location.clone(),
                side: e.side,
                movement_type: e.movement_type.clone(),
                rom: e.max,
            });
        }
        Ok(())
    })?;
    Ok(SessionUpload {
        report_revision: stored.revision,
        phases: phases(store, &patient.document)?,
        patient,
        explorations_added: added,
    })
}

pub fn patient_sessions(store: &Store, patient: &str) -> Result<Vec<SessionReport>, StoreError> {
    store.get::<PatientRecord>(patient)?;
    Ok(store
        .documents::<SessionReport>()?
        .into_iter()
        .filter(|r| r.meta.patient_id == patient)
        .collect())
}

pub fn timeseries(store: &Store, patient: &str) -> Result<Vec<RatingPoint>, StoreError> {
    Ok(patient_timeseries(&patient_sessions(store, patient)?))
}

pub fn cohort(store: &Store) -> Result<Vec<CohortPoint>, StoreError> {
    let mut by_patient: BTreeMap<String, Vec<SessionReport>> = BTreeMap::new();
    for r in store.documents::<SessionReport>()? {
        by_patient.entry(r.meta.patient_id.clone()).or_default().push(r);
    }
    let series: Vec<Vec<RatingPoint>> = by_patient.values().map(patient_timeseries).collect();
    Ok(cohort_average(&series))
}

pub fn replay(store: &Store, patient: &str, session: &str) -> Result<Vec<SkeletonFrame>, StoreError> {
    let report = store.get::<SessionReport>(session)?.document;
    if report.meta.patient_id != patient {
        return Err(StoreError::NotFound {
            collection: Collection::Sessions,
            id: session.to_string(),
        });
    }
    report.replay.ok_or_else(|| StoreError::NotFound {
        collection: Collection::Sessions,
        id: format!("{session}/replay"),
    })
}

/// Score a response against its stored test and keep it.
pub fn submit_response(store: &Store, mut response: StoredResponse) -> Result<Stored<StoredResponse>, StoreError> {
    let test = store.get::<AutoTest>(&response.response.test)?.document;
    response.score = score_autotest(&test, &response.response).map_err(|e| invalid("response", e))?;
    store.create_with_id(response, "r", |r, id| r.id = id)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub written: usize,
    /// Already present, possibly edited since; left as they are.
    pub kept: usize,
}

impl SeedSummary {
    fn add<T: Document>(&mut self, store: &Store, doc: T) -> Result<(), StoreError> {
        match store.create(doc) {
            Ok(_) => self.written += 1,
            Err(StoreError::Conflict(_)) => self.kept += 1,
            Err(e) => return Err(e),
        }
        Ok(())
    }
}

/// Write the demo content library, the THR protocol, the post-session test
/// and the John record where they are missing.
pub fn seed_fixtures(store: &Store) -> Result<SeedSummary, StoreError> {
    let content = fixtures::content_library().map_err(|e| StoreError::Corrupt(e.to_string()))?;
    let mut summary = SeedSummary::default();
    let postures: Vec<PostureConcept> = content.postures.concepts().cloned().collect();
    for p in postures {
        summary.add(store, p)?;
    }
    for m in content.movements.into_values() {
        summary.add(store, m)?;
    }
    for e in content.exercises.into_values() {
        summary.add(store, e)?;
    }
    summary.add(store, thr_protocol())?;
    summary.add(store, post_session_test())?;
    summary.add(store, fixtures::john())?;
    Ok(summary)
}
