//! File-backed document store: one JSON file per document, one directory per
//! collection. Writes go through a temporary file and a rename.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use telerehab_core::assessment::{score_autotest, AutoTest, TestResponse};
use telerehab_core::knowledge::{KnowledgeError, OverrideRule, PatientRecord, Protocol};
use telerehab_core::movement::Movement;
use telerehab_core::posture::{FeatureBasis, PostureConcept, PostureLibrary};
use telerehab_core::session::{ContentLibrary, Exercise, SessionPlan, SessionReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("{path}: {reason}")]
    Validation { path: String, reason: String },
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("{collection} `{id}` not found")]
    NotFound { collection: Collection, id: String },
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("io: {0}")]
    Io(String),
    #[error("corrupt document {0}")]
    Corrupt(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

impl From<KnowledgeError> for StoreError {
    fn from(e: KnowledgeError) -> Self {
        match e {
            KnowledgeError::Invalid { path, reason } => StoreError::Validation { path, reason },
            KnowledgeError::UnknownProtocol(id) => StoreError::NotFound {
                collection: Collection::Protocols,
                id,
            },
        }
    }
}

pub fn invalid(path: impl Into<String>, reason: impl fmt::Display) -> StoreError {
    StoreError::Validation {
        path: path.into(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Collection {
    Patients,
    Postures,
    Movements,
    Exercises,
    Protocols,
    Tests,
    Assignments,
    Sessions,
    Overrides,
    Responses,
}

impl Collection {
    pub const ALL: [Collection; 10] = [
        Collection::Patients,
        Collection::Postures,
        Collection::Movements,
        Collection::Exercises,
        Collection::Protocols,
        Collection::Tests,
        Collection::Assignments,
        Collection::Sessions,
        Collection::Overrides,
        Collection::Responses,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Collection::Patients => "patients",
            Collection::Postures => "postures",
            Collection::Movements => "movements",
            Collection::Exercises => "exercises",
            Collection::Protocols => "protocols",
            Collection::Tests => "tests",
            Collection::Assignments => "assignments",
            Collection::Sessions => "session_reports",
            Collection::Overrides => "overrides",
            Collection::Responses => "responses",
        }
    }
}

impl fmt::Display for Collection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Collection {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Collection::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown collection `{s}`"))
    }
}

/// Therapist-assigned plan for a patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    #[serde(default)]
    pub id: String,
    pub patient_id: String,
    pub plan: SessionPlan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<NaiveDate>,
    #[serde(default)]
    pub note: String,
}

/// A patient's answers to a stored test, with the score it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredResponse {
    #[serde(default)]
    pub id: String,
    pub patient_id: String,
    pub response: TestResponse,
    #[serde(default)]
    pub score: f64,
}

/// A typed collection member.
pub trait Document: Serialize + DeserializeOwned + Clone + Send + Sync + 'static {
    const COLLECTION: Collection;
    fn id(&self) -> String;
    /// Type invariants that need no other documents.
    fn validate(&self) -> Result<(), StoreError>;
    /// Documents this one points at.
    fn references(&self) -> Vec<(Collection, String)> {
        Vec::new()
    }
    /// Invariants that depend on other stored documents.
    fn check_against(&self, _store: &Store) -> Result<(), StoreError> {
        Ok(())
    }
}

impl Document for PatientRecord {
    const COLLECTION: Collection = Collection::Patients;
    fn id(&self) -> String {
        self.id.clone()
    }
    fn validate(&self) -> Result<(), StoreError> {
        Ok(PatientRecord::validate(self)?)
    }
}

impl Document for PostureConcept {
    const COLLECTION: Collection = Collection::Postures;
    fn id(&self) -> String {
        self.name.clone()
    }
    fn validate(&self) -> Result<(), StoreError> {
        PostureConcept::validate(self).map_err(|e| invalid("", e))
    }
}

impl Document for Movement {
    const COLLECTION: Collection = Collection::Movements;
    fn id(&self) -> String {
        self.name.clone()
    }
    fn validate(&self) -> Result<(), StoreError> {
        Movement::validate(self).map_err(|e| invalid("", e))?;
        let basis = FeatureBasis::default_basis();
        for (i, a) in self.relevant_angles.iter().enumerate() {
            if basis.angle_index(a).is_none() {
                return Err(invalid(format!("relevant_angles[{i}]"), format!("unknown angle `{a}`")));
            }
        }
        Ok(())
    }
    fn references(&self) -> Vec<(Collection, String)> {
        vec![
            (Collection::Postures, self.initial.clone()),
            (Collection::Postures, self.final_posture.clone()),
        ]
    }
}

impl Document for Exercise {
    const COLLECTION: Collection = Collection::Exercises;
    fn id(&self) -> String {
        self.name.clone()
    }
    fn validate(&self) -> Result<(), StoreError> {
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        if self.movements.is_empty() {
            return Err(invalid("movements", "must not be empty"));
        }
        if self.default_series == 0 || self.default_reps == 0 {
            return Err(invalid("default_series", "series and reps must be positive"));
        }
        Ok(())
    }
    fn references(&self) -> Vec<(Collection, String)> {
        self.movements
            .iter()
            .map(|m| (Collection::Movements, m.clone()))
            .collect()
    }
    fn check_against(&self, store: &Store) -> Result<(), StoreError> {
        let mut movements = BTreeMap::new();
        for m in &self.movements {
            movements.insert(m.clone(), store.get::<Movement>(m)?.document);
        }
        Exercise::validate(self, &movements).map_err(|e| StoreError::Integrity(e.to_string()))
    }
}

impl Document for Protocol {
    const COLLECTION: Collection = Collection::Protocols;
    fn id(&self) -> String {
        self.name.clone()
    }
    fn validate(&self) -> Result<(), StoreError> {
        Ok(Protocol::validate(self)?)
    }
    fn references(&self) -> Vec<(Collection, String)> {
        self.phases
            .iter()
            .flat_map(|p| &p.any_phase_exercises)
            .map(|e| (Collection::Exercises, e.clone()))
            .collect()
    }
}

impl Document for AutoTest {
    const COLLECTION: Collection = Collection::Tests;
    fn id(&self) -> String {
        self.name.clone()
    }
    fn validate(&self) -> Result<(), StoreError> {
        AutoTest::validate(self).map_err(|e| invalid("", e))
    }
}

fn plan_refs(plan: &SessionPlan) -> impl Iterator<Item = (Collection, String)> + '_ {
    plan.exercises
        .iter()
        .map(|i| (Collection::Exercises, i.exercise.clone()))
}

impl Document for Assignment {
    const COLLECTION: Collection = Collection::Assignments;
    fn id(&self) -> String {
        self.id.clone()
    }
    fn validate(&self) -> Result<(), StoreError> {
        self.plan.validate().map_err(|e| invalid("plan", e))
    }
    fn references(&self) -> Vec<(Collection, String)> {
        std::iter::once((Collection::Patients, self.patient_id.clone()))
            .chain(plan_refs(&self.plan))
            .collect()
    }
}

impl Document for SessionReport {
    const COLLECTION: Collection = Collection::Sessions;
    fn id(&self) -> String {
        self.meta.id.clone()
    }
    fn validate(&self) -> Result<(), StoreError> {
        SessionReport::validate(self).map_err(|e| invalid("", e))
    }
    fn references(&self) -> Vec<(Collection, String)> {
        std::iter::once((Collection::Patients, self.meta.patient_id.clone()))
            .chain(plan_refs(&self.plan))
            .collect()
    }
}

impl Document for OverrideRule {
    const COLLECTION: Collection = Collection::Overrides;
    fn id(&self) -> String {
        self.id.clone()
    }
    fn validate(&self) -> Result<(), StoreError> {
        Ok(OverrideRule::validate(self)?)
    }
    fn references(&self) -> Vec<(Collection, String)> {
        vec![(Collection::Patients, self.patient_id.clone())]
    }
}

impl Document for StoredResponse {
    const COLLECTION: Collection = Collection::Responses;
    fn id(&self) -> String {
        self.id.clone()
    }
    fn validate(&self) -> Result<(), StoreError> {
        if !self.score.is_finite() {
            return Err(invalid("score", "must be finite"));
        }
        Ok(())
    }
    fn references(&self) -> Vec<(Collection, String)> {
        vec![
            (Collection::Patients, self.patient_id.clone()),
            (Collection::Tests, self.response.test.clone()),
        ]
    }
    fn check_against(&self, store: &Store) -> Result<(), StoreError> {
        let test = store.get::<AutoTest>(&self.response.test)?.document;
        let score = score_autotest(&test, &self.response).map_err(|e| invalid("response", e))?;
        if score != self.score {
            return Err(invalid("score", format!("expected {score}")));
        }
        Ok(())
    }
}

fn references_of(c: Collection, v: Value) -> Vec<(Collection, String)> {
    fn refs<T: Document>(v: Value) -> Vec<(Collection, String)> {
        serde_json::from_value::<T>(v)
            .map(|d| d.references())
            .unwrap_or_default()
    }
    match c {
        Collection::Patients => refs::<PatientRecord>(v),
        Collection::Postures => refs::<PostureConcept>(v),
        Collection::Movements => refs::<Movement>(v),
        Collection::Exercises => refs::<Exercise>(v),
        Collection::Protocols => refs::<Protocol>(v),
        Collection::Tests => refs::<AutoTest>(v),
        Collection::Assignments => refs::<Assignment>(v),
        Collection::Sessions => refs::<SessionReport>(v),
        Collection::Overrides => refs::<OverrideRule>(v),
        Collection::Responses => refs::<StoredResponse>(v),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stored<T> {
    pub revision: u64,
    pub document: T,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    revision: u64,
    #[serde(default)]
    deleted: bool,
    document: Value,
}

pub fn check_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(invalid(
            "id",
            format!("`{id}` must be 1-128 characters of [A-Za-z0-9_.-]"),
        ))
    }
}

/// Documents on disk. Reads are lock-free; every mutation holds the writer
/// lock for its whole read-check-write sequence.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    writer: Mutex<()>,
}

impl Store {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        for c in Collection::ALL {
            fs::create_dir_all(root.join(c.as_str()))?;
        }
        Ok(Store {
            root,
            writer: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, c: Collection, id: &str) -> PathBuf {
        self.root.join(c.as_str()).join(format!("{id}.json"))
    }

    fn read_envelope(&self, c: Collection, id: &str) -> Result<Option<Envelope>, StoreError> {
        check_id(id)?;
        let path = self.path(c, id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| StoreError::Corrupt(format!("{}: {e}", path.display())))
    }

    fn live(&self, c: Collection, id: &str) -> Result<Option<Envelope>, StoreError> {
        Ok(self.read_envelope(c, id)?.filter(|e| !e.deleted))
    }

    pub fn exists(&self, c: Collection, id: &str) -> Result<bool, StoreError> {
        Ok(self.live(c, id)?.is_some())
    }

    pub fn get<T: Document>(&self, id: &str) -> Result<Stored<T>, StoreError> {
        let env = self.live(T::COLLECTION, id)?.ok_or_else(|| StoreError::NotFound {
            collection: T::COLLECTION,
            id: id.to_string(),
        })?;
        let document = serde_json::from_value(env.document)
            .map_err(|e| StoreError::Corrupt(format!("{}/{id}: {e}", T::COLLECTION)))?;
        Ok(Stored {
            revision: env.revision,
            document,
        })
    }

    fn ids(&self, c: Collection) -> Result<Vec<String>, StoreError> {
        let mut ids: Vec<String> = fs::read_dir(self.root.join(c.as_str()))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let id = name.strip_suffix(".json")?;
                (!id.starts_with('.')).then(|| id.to_string())
            })
            .collect();
        ids.sort();
        Ok(ids)
    }

    fn list_raw(&self, c: Collection) -> Result<Vec<(String, Envelope)>, StoreError> {
        let mut out = Vec::new();
        for id in self.ids(c)? {
            if let Some(env) = self.live(c, &id)? {
                out.push((id, env));
            }
        }
        Ok(out)
    }

    /// Live documents ordered by id.
    pub fn list<T: Document>(&self) -> Result<Vec<Stored<T>>, StoreError> {
        self.list_raw(T::COLLECTION)?
            .into_iter()
            .map(|(id, env)| {
                let document = serde_json::from_value(env.document)
                    .map_err(|e| StoreError::Corrupt(format!("{}/{id}: {e}", T::COLLECTION)))?;
                Ok(Stored {
                    revision: env.revision,
                    document,
                })
            })
            .collect()
    }

    pub fn documents<T: Document>(&self) -> Result<Vec<T>, StoreError> {
        Ok(self.list::<T>()?.into_iter().map(|s| s.document).collect())
    }

    fn write(&self, c: Collection, id: &str, env: &Envelope) -> Result<(), StoreError> {
        let dir = self.root.join(c.as_str());
        let tmp = dir.join(format!(".{id}.json.tmp"));
        let body = serde_json::to_vec_pretty(env).map_err(|e| StoreError::Io(e.to_string()))?;
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&body)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.path(c, id))?;
        self.audit(c, id, env);
        Ok(())
    }

    fn audit(&self, c: Collection, id: &str, env: &Envelope) {
        let line = serde_json::json!({
            "at": chrono::Utc::now().to_rfc3339(),
            "op": if env.deleted { "delete" } else { "put" },
            "collection": c.as_str(),
            "id": id,
            "revision": env.revision,
        });
        if let Ok(mut f) = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.root.join("audit.log"))
        {
            let _ = writeln!(f, "{line}");
        }
    }

    fn check<T: Document>(&self, doc: &T) -> Result<(), StoreError> {
        check_id(&doc.id())?;
        doc.validate()?;
        for (c, id) in doc.references() {
            if !self.exists(c, &id)? {
                return Err(StoreError::Integrity(format!(
                    "{} `{}` references missing {c} `{id}`",
                    T::COLLECTION,
                    doc.id()
                )));
            }
        }
        doc.check_against(self)
    }

    fn put_locked<T: Document>(&self, doc: T, create_only: bool) -> Result<Stored<T>, StoreError> {
        self.check(&doc)?;
        let id = doc.id();
        let prev = self.read_envelope(T::COLLECTION, &id)?;
        if create_only && prev.as_ref().is_some_and(|e| !e.deleted) {
            return Err(StoreError::Conflict(format!("{} `{id}` already exists", T::COLLECTION)));
        }
        let revision = prev.map_or(0, |e| e.revision) + 1;
        let env = Envelope {
            revision,
            deleted: false,
            document: serde_json::to_value(&doc).map_err(|e| StoreError::Io(e.to_string()))?,
        };
        self.write(T::COLLECTION, &id, &env)?;
        Ok(Stored {
            revision,
            document: doc,
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ()> {
        self.writer.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Create or replace.
    pub fn put<T: Document>(&self, doc: T) -> Result<Stored<T>, StoreError> {
        let _w = self.lock();
        self.put_locked(doc, false)
    }

    /// Create; an existing live document is a conflict.
    pub fn create<T: Document>(&self, doc: T) -> Result<Stored<T>, StoreError> {
        let _w = self.lock();
        self.put_locked(doc, true)
    }

    /// Put unless an identical live document is already stored. The flag
    /// tells whether anything was written.
    pub fn ensure<T: Document + PartialEq>(&self, doc: T) -> Result<(Stored<T>, bool), StoreError> {
        let _w = self.lock();
        if let Ok(existing) = self.get::<T>(&doc.id()) {
            if existing.document == doc {
                return Ok((existing, false));
            }
        }
        self.put_locked(doc, false).map(|s| (s, true))
    }

    /// Read-modify-write of one document under the writer lock.
    pub fn update<T: Document>(
        &self,
        id: &str,
        f: impl FnOnce(&mut T) -> Result<(), StoreError>,
    ) -> Result<Stored<T>, StoreError> {
        let _w = self.lock();
        let mut doc = self.get::<T>(id)?.document;
        f(&mut doc)?;
        if doc.id() != id {
            return Err(invalid("id", "cannot change a document's id"));
        }
        self.put_locked(doc, false)
    }

    /// Create with a generated id `{prefix}-{n}` when the document has none.
    pub fn create_with_id<T: Document>(
        &self,
        mut doc: T,
        prefix: &str,
        set_id: impl Fn(&mut T, String),
    ) -> Result<Stored<T>, StoreError> {
        let _w = self.lock();
        if doc.id().is_empty() {
            let taken: BTreeSet<String> = self.ids(T::COLLECTION)?.into_iter().collect();
            let id = (1..)
                .map(|n| format!("{prefix}-{n:04}"))
                .find(|id| !taken.contains(id))
                .expect("unbounded");
            set_id(&mut doc, id);
        }
        self.put_locked(doc, true)
    }

    /// Remove a document nothing else references. The revision counter
    /// survives in a tombstone.
    pub fn delete<T: Document>(&self, id: &str) -> Result<u64, StoreError> {
        let _w = self.lock();
        let env = self.live(T::COLLECTION, id)?.ok_or_else(|| StoreError::NotFound {
            collection: T::COLLECTION,
            id: id.to_string(),
        })?;
        for c in Collection::ALL {
            for (other, e) in self.list_raw(c)? {
                if references_of(c, e.document).contains(&(T::COLLECTION, id.to_string())) {
                    return Err(StoreError::Integrity(format!(
                        "{} `{id}` is referenced by {c} `{other}`",
                        T::COLLECTION
                    )));
                }
            }
        }
        let revision = env.revision + 1;
        self.write(
            T::COLLECTION,
            id,
            &Envelope {
                revision,
                deleted: true,
                document: Value::Null,
            },
        )?;
        Ok(revision)
    }

    /// Postures, movements and exercises assembled into a library.
    pub fn content(&self) -> Result<ContentLibrary, StoreError> {
        let corrupt = |e: &dyn fmt::Display| StoreError::Corrupt(e.to_string());
        let mut postures = PostureLibrary::new(FeatureBasis::default_basis().clone());
        for p in self.documents::<PostureConcept>()? {
            postures.insert(p).map_err(|e| corrupt(&e))?;
        }
        let mut content = ContentLibrary::new(postures);
        for m in self.documents::<Movement>()? {
            content.add_movement(m).map_err(|e| corrupt(&e))?;
        }
        for e in self.documents::<Exercise>()? {
            content.add_exercise(e).map_err(|e| corrupt(&e))?;
        }
        Ok(content)
    }
}
