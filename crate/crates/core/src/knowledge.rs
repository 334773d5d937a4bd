//! Protocol phases, exercise concepts and patient-specific recommendations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::movement::{Movement, MovementType};
use crate::session::ContentLibrary;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KnowledgeError {
    #[error("unknown protocol `{0}`")]
    UnknownProtocol(String),
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
}

fn invalid(path: impl Into<String>, reason: impl Into<String>) -> KnowledgeError {
    KnowledgeError::Invalid {
        path: path.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exploration {
    pub date: NaiveDate,
    pub location: String,
    pub side: Side,
    #[serde(rename = "type")]
    pub movement_type: MovementType,
    pub rom: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VasReport {
    pub date: NaiveDate,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surgery {
    pub label: String,
    pub date: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<Side>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub personal_data: String,
    #[serde(default)]
    pub family_data: String,
    #[serde(default)]
    pub symptoms: Vec<String>,
    #[serde(default)]
    pub diagnoses: Vec<String>,
    #[serde(default)]
    pub surgeries: Vec<Surgery>,
    #[serde(default)]
    pub goals: String,
    #[serde(default)]
    pub explorations: Vec<Exploration>,
    #[serde(default)]
    pub vas_reports: Vec<VasReport>,
}

fn check_dates<T>(items: &[T], date: impl Fn(&T) -> NaiveDate, path: &str) -> Result<(), KnowledgeError> {
    for (i, w) in items.windows(2).enumerate() {
        if date(&w[1]) < date(&w[0]) {
            return Err(invalid(format!("{path}[{}].date", i + 1), "dates must not decrease"));
        }
    }
    Ok(())
}

impl PatientRecord {
    pub fn validate(&self) -> Result<(), KnowledgeError> {
        if self.id.trim().is_empty() {
            return Err(invalid("id", "must not be empty"));
        }
        for (i, e) in self.explorations.iter().enumerate() {
            if !(0.0..=360.0).contains(&e.rom) {
                return Err(invalid(
                    format!("explorations[{i}].rom"),
                    format!("{} outside [0, 360]", e.rom),
                ));
            }
        }
        for (i, v) in self.vas_reports.iter().enumerate() {
            if !(0.0..=10.0).contains(&v.value) {
                return Err(invalid(
                    format!("vas_reports[{i}].value"),
                    format!("{} outside [0, 10]", v.value),
                ));
            }
        }
        check_dates(&self.explorations, |e| e.date, "explorations")?;
        check_dates(&self.vas_reports, |v| v.date, "vas_reports")?;
        check_dates(&self.surgeries, |s| s.date, "surgeries")?;
        Ok(())
    }

    /// Side of the most recent surgery that declares one.
    pub fn operated_side(&self) -> Option<Side> {
        self.surgeries.iter().rev().find_map(|s| s.side)
    }

    pub fn latest_vas(&self) -> Option<f64> {
        self.vas_reports.last().map(|v| v.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparator {
    Lt,
    Le,
    Ge,
    Gt,
}

impl Comparator {
    pub fn holds(self, value: f64, bound: f64) -> bool {
        match self {
            Comparator::Lt => value < bound,
            Comparator::Le => value <= bound,
            Comparator::Ge => value >= bound,
            Comparator::Gt => value > bound,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Ge => ">=",
            Comparator::Gt => ">",
        }
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl Serialize for Comparator {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.symbol())
    }
}

impl<'de> Deserialize<'de> for Comparator {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(match s.as_str() {
            "<" => Comparator::Lt,
            "<=" | "≤" => Comparator::Le,
            ">=" | "≥" => Comparator::Ge,
            ">" => Comparator::Gt,
            other => return Err(serde::de::Error::custom(format!("unknown comparator `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RomAtom {
    pub location: String,
    #[serde(rename = "type")]
    pub movement_type: MovementType,
    pub cmp: Comparator,
    pub bound: f64,
}

/// Boolean expression over ROM and pain atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseCondition {
    Rom(RomAtom),
    /// Latest VAS report at most `max`.
    Vas {
        max: f64,
    },
    And(Vec<PhaseCondition>),
    Or(Vec<PhaseCondition>),
    Not(Box<PhaseCondition>),
}

impl PhaseCondition {
    fn validate(&self, path: &str) -> Result<(), KnowledgeError> {
        match self {
            PhaseCondition::Rom(a) if !(a.bound >= 0.0) => {
                Err(invalid(format!("{path}.rom.bound"), "must be non-negative"))
            }
            PhaseCondition::Vas { max } if !(0.0..=10.0).contains(max) => {
                Err(invalid(format!("{path}.vas.max"), "must lie in [0, 10]"))
            }
            PhaseCondition::And(xs) | PhaseCondition::Or(xs) => xs
                .iter()
                .enumerate()
                .try_for_each(|(i, x)| x.validate(&format!("{path}[{i}]"))),
            PhaseCondition::Not(x) => x.validate(&format!("{path}.not")),
            _ => Ok(()),
        }
    }
}

/// Latest measured ROM for `(location, type)`. With a known side only that
/// side counts; otherwise the worse (smaller) of the sides' latest values.
pub fn latest_rom(
    explorations: &[Exploration],
    location: &str,
    movement_type: &MovementType,
    side: Option<Side>,
) -> Option<f64> {
    let latest_on = |s: Side| {
        explorations
            .iter()
            .filter(|e| e.side == s && e.location == location && &e.movement_type == movement_type)
            .max_by_key(|e| e.date)
            .map(|e| e.rom)
    };
    match side {
        Some(s) => latest_on(s),
        None => [Side::Left, Side::Right]
            .into_iter()
            .filter_map(latest_on)
            .reduce(f64::min),
    }
}

/// Missing measurements make their atom false.
pub fn eval_condition(
    cond: &PhaseCondition,
    explorations: &[Exploration],
    vas: Option<f64>,
    side: Option<Side>,
) -> bool {
    match cond {
        PhaseCondition::Rom(a) => {
            latest_rom(explorations, &a.location, &a.movement_type, side).is_some_and(|rom| a.cmp.holds(rom, a.bound))
        }
        PhaseCondition::Vas { max } => vas.is_some_and(|v| v <= *max),
        PhaseCondition::And(xs) => xs.iter().all(|x| eval_condition(x, explorations, vas, side)),
        PhaseCondition::Or(xs) => xs.iter().any(|x| eval_condition(x, explorations, vas, side)),
        PhaseCondition::Not(x) => !eval_condition(x, explorations, vas, side),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovementFilter {
    pub location: String,
    #[serde(rename = "type")]
    pub movement_type: MovementType,
    pub max_rom: f64,
}

impl MovementFilter {
    pub fn matches(&self, m: &Movement) -> bool {
        m.components
            .iter()
            .any(|c| c.location == self.location && c.movement_type == self.movement_type && c.rom <= self.max_rom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quantifier {
    AllMovements,
    SomeMovement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExerciseConcept {
    pub name: String,
    pub quantifier: Quantifier,
    pub filter: MovementFilter,
}

fn quantified(quantifier: Quantifier, filter: &MovementFilter, movements: &[&Movement]) -> bool {
    match quantifier {
        Quantifier::AllMovements => !movements.is_empty() && movements.iter().all(|m| filter.matches(m)),
        Quantifier::SomeMovement => movements.iter().any(|m| filter.matches(m)),
    }
}

/// Membership of an exercise, given as its movements, in a concept.
pub fn exercise_in_concept(movements: &[&Movement], concept: &ExerciseConcept) -> bool {
    quantified(concept.quantifier, &concept.filter, movements)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub id: String,
    pub condition: PhaseCondition,
    #[serde(default)]
    pub concepts: Vec<String>,
    #[serde(default)]
    pub any_phase_exercises: Vec<String>,
}

/// Phases are listed from the earliest to the most advanced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub concepts: Vec<ExerciseConcept>,
    pub phases: Vec<Phase>,
}

pub const UNCLASSIFIED: &str = "Unclassified";

impl Protocol {
    pub fn validate(&self) -> Result<(), KnowledgeError> {
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        let mut names = BTreeSet::new();
        for (i, c) in self.concepts.iter().enumerate() {
            if !names.insert(c.name.as_str()) {
                return Err(invalid(
                    format!("concepts[{i}].name"),
                    format!("duplicate concept `{}`", c.name),
                ));
            }
            if !(c.filter.max_rom > 0.0) {
                return Err(invalid(format!("concepts[{i}].filter.max_rom"), "must be positive"));
            }
        }
        let mut ids = BTreeSet::new();
        for (i, p) in self.phases.iter().enumerate() {
            if p.id.trim().is_empty() || p.id == UNCLASSIFIED || !ids.insert(p.id.as_str()) {
                return Err(invalid(
                    format!("phases[{i}].id"),
                    format!("invalid or duplicate id `{}`", p.id),
                ));
            }
            p.condition.validate(&format!("phases[{i}].condition"))?;
            for (j, c) in p.concepts.iter().enumerate() {
                if !names.contains(c.as_str()) {
                    return Err(invalid(
                        format!("phases[{i}].concepts[{j}]"),
                        format!("unknown concept `{c}`"),
                    ));
                }
            }
        }
        if self.phases.is_empty() {
            return Err(invalid("phases", "must not be empty"));
        }
        Ok(())
    }

    pub fn concept(&self, name: &str) -> Option<&ExerciseConcept> {
        self.concepts.iter().find(|c| c.name == name)
    }

    fn phase_index(&self, id: &str) -> Option<usize> {
        self.phases.iter().position(|p| p.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PatientPhase {
    Phase(String),
    Unclassified,
}

impl PatientPhase {
    pub fn as_str(&self) -> &str {
        match self {
            PatientPhase::Phase(id) => id,
            PatientPhase::Unclassified => UNCLASSIFIED,
        }
    }
}

impl fmt::Display for PatientPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for PatientPhase {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for PatientPhase {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == UNCLASSIFIED {
            PatientPhase::Unclassified
        } else {
            PatientPhase::Phase(s)
        })
    }
}

/// Most advanced phase whose condition holds.
pub fn classify_patient_phase(patient: &PatientRecord, protocol: &Protocol) -> PatientPhase {
    let side = patient.operated_side();
    let vas = patient.latest_vas();
    protocol
        .phases
        .iter()
        .rev()
        .find(|p| eval_condition(&p.condition, &patient.explorations, vas, side))
        .map_or(PatientPhase::Unclassified, |p| PatientPhase::Phase(p.id.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverrideKind {
    Recommend,
    Contraindicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverrideRule {
    #[serde(default)]
    pub id: String,
    pub patient_id: String,
    pub kind: OverrideKind,
    pub filter: MovementFilter,
    pub quantifier: Quantifier,
    #[serde(default)]
    pub note: String,
}

impl OverrideRule {
    pub fn validate(&self) -> Result<(), KnowledgeError> {
        if self.patient_id.trim().is_empty() {
            return Err(invalid("patient_id", "must not be empty"));
        }
        if !(self.filter.max_rom > 0.0) {
            return Err(invalid("filter.max_rom", "must be positive"));
        }
        Ok(())
    }

    pub fn matches(&self, movements: &[&Movement]) -> bool {
        quantified(self.quantifier, &self.filter, movements)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    /// Matches a concept of the patient's phase, or is listed for it.
    PhaseMatch {
        phase: String,
        concept: Option<String>,
    },
    /// Valid in an earlier phase.
    CarryOver {
        phase: String,
        concept: Option<String>,
    },
    Override {
        rule: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub exercise: String,
    pub provenance: Vec<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contraindication {
    pub exercise: String,
    pub rule: OverrideRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationSet {
    pub protocol: String,
    pub phase: PatientPhase,
    pub recommended: Vec<Recommendation>,
    pub contraindicated: Vec<Contraindication>,
}

impl RecommendationSet {
    pub fn recommended_names(&self) -> BTreeSet<&str> {
        self.recommended.iter().map(|r| r.exercise.as_str()).collect()
    }
}

fn rule_label(i: usize, r: &OverrideRule) -> String {
    if r.id.is_empty() {
        format!("override#{i}")
    } else {
        r.id.clone()
    }
}

/// Recommended and contraindicated exercises of `content` for `patient`.
/// Only overrides addressed to this patient apply; contraindications win.
pub fn recommend_exercises(
    patient: &PatientRecord,
    protocol: &Protocol,
    content: &ContentLibrary,
    overrides: &[OverrideRule],
) -> Result<RecommendationSet, KnowledgeError> {
    protocol.validate()?;
    let phase = classify_patient_phase(patient, protocol);
    let mine: Vec<(usize, &OverrideRule)> = overrides
        .iter()
        .enumerate()
        .filter(|(_, r)| r.patient_id == patient.id)
        .collect();

    let mut exercises: BTreeMap<&str, Vec<&Movement>> = BTreeMap::new();
    for name in content.exercises.keys() {
        let movements = content
            .exercise_movements(name)
            .map_err(|e| invalid(format!("exercises.{name}"), e.to_string()))?;
        exercises.insert(name, movements);
    }

    let mut recommended: BTreeMap<&str, Vec<Provenance>> = BTreeMap::new();
    if let PatientPhase::Phase(id) = &phase {
        let current = protocol.phase_index(id).expect("classified phase exists");
        for (k, p) in protocol.phases.iter().enumerate().take(current + 1) {
            let tag = |concept: Option<String>| {
                if k == current {
                    Provenance::PhaseMatch {
                        phase: p.id.clone(),
                        concept,
                    }
                } else {
                    Provenance::CarryOver {
                        phase: p.id.clone(),
                        concept,
                    }
                }
            };
            for cname in &p.concepts {
                let concept = protocol.concept(cname).expect("validated");
                for (e, ms) in &exercises {
                    if exercise_in_concept(ms, concept) {
                        recommended.entry(e).or_default().push(tag(Some(cname.clone())));
                    }
                }
            }
            for e in &p.any_phase_exercises {
                let Some((name, _)) = exercises.get_key_value(e.as_str()) else {
                    return Err(invalid(
                        format!("phases[{k}].any_phase_exercises"),
                        format!("unknown exercise `{e}`"),
                    ));
                };
                recommended.entry(name).or_default().push(tag(None));
            }
        }
        for (i, r) in mine.iter().filter(|(_, r)| r.kind == OverrideKind::Recommend) {
            for (e, ms) in &exercises {
                if r.matches(ms) {
                    recommended.entry(e).or_default().push(Provenance::Override {
                        rule: rule_label(*i, r),
                    });
                }
            }
        }
    }

    let mut contraindicated = Vec::new();
    let mut blocked = BTreeSet::new();
    for (e, ms) in &exercises {
        if let Some((_, r)) = mine
            .iter()
            .find(|(_, r)| r.kind == OverrideKind::Contraindicate && r.matches(ms))
        {
            blocked.insert(*e);
            contraindicated.push(Contraindication {
                exercise: e.to_string(),
                rule: (*r).clone(),
            });
        }
    }
    Ok(RecommendationSet {
        protocol: protocol.name.clone(),
        phase,
        recommended: recommended
            .into_iter()
            .filter(|(e, _)| !blocked.contains(e))
            .map(|(e, provenance)| Recommendation {
                exercise: e.to_string(),
                provenance,
            })
            .collect(),
        contraindicated,
    })
}

/// Named protocols.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub protocols: BTreeMap<String, Protocol>,
}

impl KnowledgeBase {
    pub fn insert(&mut self, protocol: Protocol) -> Result<(), KnowledgeError> {
        protocol.validate()?;
        self.protocols.insert(protocol.name.clone(), protocol);
        Ok(())
    }

    pub fn protocol(&self, name: &str) -> Result<&Protocol, KnowledgeError> {
        self.protocols
            .get(name)
            .ok_or_else(|| KnowledgeError::UnknownProtocol(name.to_string()))
    }

    pub fn recommend(
        &self,
        patient: &PatientRecord,
        protocol: &str,
        content: &ContentLibrary,
        overrides: &[OverrideRule],
    ) -> Result<RecommendationSet, KnowledgeError> {
        recommend_exercises(patient, self.protocol(protocol)?, content, overrides)
    }
}

/// The total hip replacement protocol shipped with the crate.
pub fn thr_protocol() -> Protocol {
    serde_json::from_str(include_str!("../data/thr_protocol.json")).expect("bundled protocol parses")
}
