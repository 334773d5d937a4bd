//! Monitoring state machine: consumes a frame stream against a session plan,
//! emits feedback events and produces a scored report.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::movement::{trajectory_similarity, KinematicComponent, Movement, MovementError, Trajectory};
use crate::posture::{descriptor, PostureError, PostureLibrary, ANGLE_COUNT};
use crate::skeleton::SkeletonFrame;

pub const DEFAULT_HOLD_TIME: f64 = 1.0;
pub const DEFAULT_TIMEOUT: f64 = 30.0;
pub const DEFAULT_CORRECT_THRESHOLD: f64 = 0.7;

/// Hold completion tolerance so that frame times like 0.9999999 still count.
const HOLD_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("unknown {kind} `{name}`")]
    Dangling { kind: &'static str, name: String },
    #[error("exercise `{exercise}`: movement {index} starts at `{found}` but the previous one ends at `{expected}`")]
    BrokenChain {
        exercise: String,
        index: usize,
        expected: String,
        found: String,
    },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid exercise: {0}")]
    InvalidExercise(String),
    #[error("`{0}` already exists")]
    Duplicate(String),
    #[error("frame at t={t} does not follow t={previous}")]
    NonMonotonic { previous: f64, t: f64 },
    #[error("session already completed")]
    Completed,
    #[error(transparent)]
    Movement(#[from] MovementError),
    #[error(transparent)]
    Posture(#[from] PostureError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exercise {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub movements: Vec<String>,
    #[serde(default = "one")]
    pub default_series: u32,
    #[serde(default = "one")]
    pub default_reps: u32,
}

fn one() -> u32 {
    1
}

impl Exercise {
    /// Check the non-empty and chaining invariants against `movements`.
    pub fn validate(&self, movements: &BTreeMap<String, Movement>) -> Result<(), SessionError> {
        if self.name.trim().is_empty() {
            return Err(SessionError::InvalidExercise("empty name".into()));
        }
        if self.movements.is_empty() {
            return Err(SessionError::InvalidExercise(format!(
                "`{}` has no movements",
                self.name
            )));
        }
        if self.default_series == 0 || self.default_reps == 0 {
            return Err(SessionError::InvalidExercise(format!(
                "`{}` needs at least one series and one repetition",
                self.name
            )));
        }
        let resolved = self
            .movements
            .iter()
            .map(|m| {
                movements.get(m).ok_or_else(|| SessionError::Dangling {
                    kind: "movement",
                    name: m.clone(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        for (k, pair) in resolved.windows(2).enumerate() {
            if pair[0].final_posture != pair[1].initial {
                return Err(SessionError::BrokenChain {
                    exercise: self.name.clone(),
                    index: k + 1,
                    expected: pair[0].final_posture.clone(),
                    found: pair[1].initial.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Postures, movements and exercises that reference each other by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentLibrary {
    pub postures: PostureLibrary,
    #[serde(default)]
    pub movements: BTreeMap<String, Movement>,
    #[serde(default)]
    pub exercises: BTreeMap<String, Exercise>,
}

impl ContentLibrary {
    pub fn new(postures: PostureLibrary) -> Self {
        ContentLibrary {
            postures,
            movements: BTreeMap::new(),
            exercises: BTreeMap::new(),
        }
    }

    pub fn check_movement(&self, m: &Movement) -> Result<(), SessionError> {
        m.validate()?;
        for p in [&m.initial, &m.final_posture] {
            if self.postures.get(p).is_none() {
                return Err(SessionError::Dangling {
                    kind: "posture",
                    name: p.clone(),
                });
            }
        }
        if let Some(a) = m
            .reference
            .angle_names
            .iter()
            .find(|a| self.postures.basis().angle_index(a).is_none())
        {
            return Err(MovementError::UnknownAngle(a.clone()).into());
        }
        Ok(())
    }

    pub fn add_movement(&mut self, m: Movement) -> Result<(), SessionError> {
        self.check_movement(&m)?;
        if self.movements.contains_key(&m.name) {
            return Err(SessionError::Duplicate(m.name));
        }
        self.movements.insert(m.name.clone(), m);
        Ok(())
    }

    pub fn add_exercise(&mut self, e: Exercise) -> Result<(), SessionError> {
        e.validate(&self.movements)?;
        if self.exercises.contains_key(&e.name) {
            return Err(SessionError::Duplicate(e.name));
        }
        self.exercises.insert(e.name.clone(), e);
        Ok(())
    }

    /// Every cross reference resolves and every exercise chains.
    pub fn validate(&self) -> Result<(), SessionError> {
        for m in self.movements.values() {
            self.check_movement(m)?;
        }
        for e in self.exercises.values() {
            e.validate(&self.movements)?;
        }
        Ok(())
    }

    /// Movements of an exercise in order.
    pub fn exercise_movements(&self, exercise: &str) -> Result<Vec<&Movement>, SessionError> {
        let e = self.exercises.get(exercise).ok_or_else(|| SessionError::Dangling {
            kind: "exercise",
            name: exercise.to_string(),
        })?;
        e.movements
            .iter()
            .map(|m| {
                self.movements.get(m).ok_or_else(|| SessionError::Dangling {
                    kind: "movement",
                    name: m.clone(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanItem {
    pub exercise: String,
    pub series: u32,
    pub reps: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub exercises: Vec<PlanItem>,
    #[serde(default = "default_hold")]
    pub hold_time: f64,
    #[serde(default)]
    pub rest_between_series: f64,
    #[serde(default = "default_timeout")]
    pub timeout_per_movement: f64,
    #[serde(default)]
    pub pain_prompt: bool,
    /// Minimum movement similarity for an exercise to count as correct.
    #[serde(default = "default_correct")]
    pub correct_threshold: f64,
}

fn default_hold() -> f64 {
    DEFAULT_HOLD_TIME
}

fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT
}

fn default_correct() -> f64 {
    DEFAULT_CORRECT_THRESHOLD
}

impl SessionPlan {
    pub fn single(exercise: &str, series: u32, reps: u32) -> Self {
        SessionPlan {
            exercises: vec![PlanItem {
                exercise: exercise.to_string(),
                series,
                reps,
            }],
            hold_time: DEFAULT_HOLD_TIME,
            rest_between_series: 0.0,
            timeout_per_movement: DEFAULT_TIMEOUT,
            pain_prompt: false,
            correct_threshold: DEFAULT_CORRECT_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        let bad = |m: String| Err(SessionError::InvalidPlan(m));
        if self.exercises.is_empty() {
            return bad("no exercises".into());
        }
        if let Some(i) = self.exercises.iter().find(|i| i.series == 0 || i.reps == 0) {
            return bad(format!("`{}` needs series and reps of at least 1", i.exercise));
        }
        if !(self.hold_time >= 0.0 && self.hold_time.is_finite()) {
            return bad(format!("hold_time {} must be non-negative", self.hold_time));
        }
        if !(self.rest_between_series >= 0.0 && self.rest_between_series.is_finite()) {
            return bad(format!(
                "rest_between_series {} must be non-negative",
                self.rest_between_series
            ));
        }
        if !(self.timeout_per_movement > 0.0) {
            return bad(format!(
                "timeout_per_movement {} must be positive",
                self.timeout_per_movement
            ));
        }
        if !(0.0..=1.0).contains(&self.correct_threshold) {
            return bad(format!(
                "correct_threshold {} must lie in [0, 1]",
                self.correct_threshold
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProximityLevel {
    Red,
    Yellow,
    Green,
}

/// Green below `tau`, Yellow below `2 tau`, Red otherwise.
pub fn proximity_level(distance: f64, tau: f64) -> ProximityLevel {
    debug_assert!(tau > 0.0);
    if distance < tau {
        ProximityLevel::Green
    } else if distance < 2.0 * tau {
        ProximityLevel::Yellow
    } else {
        ProximityLevel::Red
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event")]
pub enum FeedbackKind {
    ProximityChanged {
        level: ProximityLevel,
        distance: f64,
    },
    PostureReached {
        name: String,
        posture_rating: f64,
    },
    MovementScored {
        name: String,
        similarity: f64,
    },
    RepCompleted {
        remaining: u32,
    },
    SeriesCompleted {
        remaining: u32,
    },
    ExerciseCompleted {
        name: String,
        correct: bool,
        exercise_rating: f64,
    },
    MovementTimedOut {
        name: String,
    },
    SessionCompleted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub t: f64,
    #[serde(flatten)]
    pub kind: FeedbackKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MovementState {
    AwaitInitial,
    HoldingInitial,
    Ready,
    Transit,
    HoldingFinal,
    Resting,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RibbonItem {
    pub posture: String,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HudSnapshot {
    pub next_posture: String,
    pub movement_state: MovementState,
    pub series_left: u32,
    pub reps_left: u32,
    pub ribbon: Vec<RibbonItem>,
    pub explanation: String,
}

/// Relevant-angle samples of one movement attempt, from activation to the
/// end of the final hold (or the timeout).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovementTrace {
    pub movement: String,
    pub components: Vec<KinematicComponent>,
    pub angle_names: Vec<String>,
    pub timestamps: Vec<f64>,
    /// One row per timestamp, columns follow `angle_names`.
    pub samples: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub series: u32,
    pub rep: u32,
    pub posture_ratings: Vec<f64>,
    pub similarities: Vec<f64>,
    pub timed_out: bool,
    pub traces: Vec<MovementTrace>,
}

impl RepRecord {
    /// `0.5 * mean posture rating + 0.5 * mean similarity`.
    pub fn rating(&self) -> f64 {
        0.5 * mean(&self.posture_ratings) + 0.5 * mean(&self.similarities)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExerciseRecord {
    pub exercise: String,
    pub series: u32,
    pub reps: u32,
    pub rep_records: Vec<RepRecord>,
    pub correct: bool,
    pub exercise_rating: f64,
}

impl ExerciseRecord {
    fn score(&mut self, threshold: f64) {
        let planned = (self.series * self.reps) as usize;
        self.exercise_rating = mean(&self.rep_records.iter().map(RepRecord::rating).collect::<Vec<_>>());
        self.correct = self.rep_records.len() == planned
            && self
                .rep_records
                .iter()
                .all(|r| !r.timed_out && r.similarities.iter().all(|&s| s >= threshold));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    #[serde(default)]
    pub id: String,
    pub patient_id: String,
    pub date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    #[serde(flatten)]
    pub meta: SessionMeta,
    pub plan: SessionPlan,
    pub exercises: Vec<ExerciseRecord>,
    /// Stream time of the first and last frame.
    pub span: Option<(f64, f64)>,
    pub aborted: bool,
    #[serde(default)]
    pub pain_prompt_pending: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay: Option<Vec<SkeletonFrame>>,
}

impl SessionReport {
    pub fn validate(&self) -> Result<(), SessionError> {
        self.plan.validate()?;
        let unit = |x: &f64| (0.0..=1.0).contains(x);
        for e in &self.exercises {
            if !unit(&e.exercise_rating) {
                return Err(SessionError::InvalidPlan(format!(
                    "exercise rating {} outside [0, 1]",
                    e.exercise_rating
                )));
            }
            for r in &e.rep_records {
                if !r.posture_ratings.iter().chain(&r.similarities).all(unit) {
                    return Err(SessionError::InvalidPlan("rating outside [0, 1]".into()));
                }
            }
        }
        Ok(())
    }
}

type Row = (f64, Vec<f64>);

enum Phase {
    AwaitInitial,
    InitialHold {
        start: f64,
    },
    InitialHeld {
        last: Row,
    },
    Transit {
        last: Row,
        window: Vec<Row>,
    },
    FinalHold {
        last: Row,
        window: Vec<Row>,
        buffered: Vec<Row>,
        start: f64,
        min_d: f64,
    },
    Resting {
        until: f64,
    },
    Completed,
}

struct Step {
    exercise: String,
    series: u32,
    reps: u32,
    movements: Vec<Movement>,
    angle_idx: Vec<Vec<usize>>,
}

/// One running session. Frames must be fed in strictly increasing time order.
pub struct SessionEngine {
    meta: SessionMeta,
    plan: SessionPlan,
    postures: PostureLibrary,
    steps: Vec<Step>,
    phase: Phase,
    ei: usize,
    mi: usize,
    series_left: u32,
    reps_left: u32,
    movement_start: Option<f64>,
    level: Option<ProximityLevel>,
    last_t: Option<f64>,
    first_t: Option<f64>,
    records: Vec<ExerciseRecord>,
    rep: RepRecord,
    trace: Vec<Row>,
    angles: [f64; ANGLE_COUNT],
    replay: Option<Vec<SkeletonFrame>>,
}

/// Feed `frames` until the session completes or the frames run out.
pub fn run_session<'a>(
    meta: SessionMeta,
    plan: SessionPlan,
    content: &ContentLibrary,
    frames: impl IntoIterator<Item = &'a SkeletonFrame>,
) -> Result<(SessionReport, Vec<FeedbackEvent>), SessionError> {
    let mut engine = start_session(meta, plan, content)?;
    let mut events = Vec::new();
    for f in frames {
        if engine.is_completed() {
            break;
        }
        events.extend(engine.feed_frame(f)?);
    }
    Ok((engine.finish(), events))
}

pub fn start_session(
    meta: SessionMeta,
    plan: SessionPlan,
    content: &ContentLibrary,
) -> Result<SessionEngine, SessionError> {
    plan.validate()?;
    let basis = content.postures.basis();
    let mut steps = Vec::with_capacity(plan.exercises.len());
    for item in &plan.exercises {
        let e = content
            .exercises
            .get(&item.exercise)
            .ok_or_else(|| SessionError::Dangling {
                kind: "exercise",
                name: item.exercise.clone(),
            })?;
        e.validate(&content.movements)?;
        let movements: Vec<Movement> = content.exercise_movements(&e.name)?.into_iter().cloned().collect();
        for m in &movements {
            content.check_movement(m)?;
        }
        let angle_idx = movements
            .iter()
            .map(|m| {
                m.reference
                    .angle_names
                    .iter()
                    .map(|a| basis.angle_index(a).expect("checked above"))
                    .collect()
            })
            .collect();
        steps.push(Step {
            exercise: e.name.clone(),
            series: item.series,
            reps: item.reps,
            movements,
            angle_idx,
        });
    }
    let (series_left, reps_left) = (steps[0].series, steps[0].reps);
    Ok(SessionEngine {
        meta,
        plan,
        postures: content.postures.clone(),
        steps,
        phase: Phase::AwaitInitial,
        ei: 0,
        mi: 0,
        series_left,
        reps_left,
        movement_start: None,
        level: None,
        last_t: None,
        first_t: None,
        records: Vec::new(),
        rep: RepRecord {
            series: 1,
            rep: 1,
            posture_ratings: vec![],
            similarities: vec![],
            timed_out: false,
            traces: vec![],
        },
        trace: Vec::new(),
        angles: [0.0; ANGLE_COUNT],
        replay: None,
    })
}

impl SessionEngine {
    /// Keep every fed frame in the report for later replay.
    pub fn with_replay(mut self) -> Self {
        self.replay = Some(Vec::new());
        self
    }

    pub fn is_completed(&self) -> bool {
        matches!(self.phase, Phase::Completed)
    }

    fn step(&self) -> &Step {
        &self.steps[self.ei]
    }

    fn movement(&self) -> &Movement {
        &self.steps[self.ei].movements[self.mi]
    }

    fn state(&self) -> MovementState {
        match self.phase {
            Phase::AwaitInitial => MovementState::AwaitInitial,
            Phase::InitialHold { .. } => MovementState::HoldingInitial,
            Phase::InitialHeld { .. } => MovementState::Ready,
            Phase::Transit { .. } => MovementState::Transit,
            Phase::FinalHold { .. } => MovementState::HoldingFinal,
            Phase::Resting { .. } => MovementState::Resting,
            Phase::Completed => MovementState::Completed,
        }
    }

    pub fn hud(&self) -> HudSnapshot {
        let state = self.state();
        if state == MovementState::Completed {
            return HudSnapshot {
                next_posture: String::new(),
                movement_state: state,
                series_left: 0,
                reps_left: 0,
                ribbon: vec![],
                explanation: "Session completed.".into(),
            };
        }
        let m = self.movement();
        let next = match state {
            MovementState::AwaitInitial | MovementState::HoldingInitial | MovementState::Resting => &m.initial,
            _ => &m.final_posture,
        };
        let movements = &self.step().movements;
        let mut ribbon = vec![RibbonItem {
            posture: movements[0].initial.clone(),
            done: self.mi > 0
                || matches!(
                    state,
                    MovementState::Ready | MovementState::Transit | MovementState::HoldingFinal
                ),
        }];
        ribbon.extend(movements.iter().enumerate().map(|(k, mv)| RibbonItem {
            posture: mv.final_posture.clone(),
            done: k < self.mi,
        }));
        let explanation = match state {
            MovementState::AwaitInitial => format!("Get into posture {}.", m.initial),
            MovementState::HoldingInitial => format!("Hold posture {}.", m.initial),
            MovementState::Ready | MovementState::Transit => {
                format!("Perform {} towards posture {}.", m.name, m.final_posture)
            }
            MovementState::HoldingFinal => format!("Hold posture {}.", m.final_posture),
            MovementState::Resting => "Rest before the next series.".into(),
            MovementState::Completed => unreachable!(),
        };
        HudSnapshot {
            next_posture: next.clone(),
            movement_state: state,
            series_left: self.series_left,
            reps_left: self.reps_left,
            ribbon,
            explanation,
        }
    }

    pub fn feed_frame(&mut self, frame: &SkeletonFrame) -> Result<Vec<FeedbackEvent>, SessionError> {
        if self.is_completed() {
            return Err(SessionError::Completed);
        }
        let t = frame.t();
        if let Some(prev) = self.last_t {
            if !(t > prev) {
                return Err(SessionError::NonMonotonic { previous: prev, t });
            }
        }
        let desc = descriptor(frame, self.postures.basis())?;
        self.last_t = Some(t);
        self.angles = desc.angles;
        self.first_t.get_or_insert(t);
        if let Some(r) = self.replay.as_mut() {
            r.push(frame.clone());
        }

        if let Phase::Resting { until } = self.phase {
            if t < until {
                return Ok(vec![]);
            }
            self.phase = Phase::AwaitInitial;
            self.movement_start = None;
        }
        let start = *self.movement_start.get_or_insert(t);

        let mut events = Vec::new();
        let m = self.movement().clone();
        let row: Vec<f64> = self.step().angle_idx[self.mi].iter().map(|&i| desc.angles[i]).collect();
        self.trace.push((t, row.clone()));

        let matched = self.postures.classify(&desc)?.map(|x| x.name);
        let on_initial = matched.as_deref() == Some(m.initial.as_str());
        let on_final = matched.as_deref() == Some(m.final_posture.as_str());
        let target = match self.phase {
            Phase::AwaitInitial | Phase::InitialHold { .. } => &m.initial,
            _ => &m.final_posture,
        };
        let d = self.postures.distance_to(&desc, target)?;
        let tau = self.postures.get(target).expect("validated").tau;
        let level = proximity_level(d, tau);
        if self.level != Some(level) {
            self.level = Some(level);
            events.push(FeedbackEvent {
                t,
                kind: FeedbackKind::ProximityChanged { level, distance: d },
            });
        }
        let d_final = if target == &m.final_posture {
            d
        } else {
            self.postures.distance_to(&desc, &m.final_posture)?
        };

        let hold = self.plan.hold_time;
        let held = |since: f64| t - since >= hold - HOLD_EPS;
        let phase = std::mem::replace(&mut self.phase, Phase::AwaitInitial);
        self.phase = match phase {
            Phase::AwaitInitial | Phase::InitialHold { .. } if !on_initial => Phase::AwaitInitial,
            Phase::AwaitInitial => {
                if held(t) {
                    Phase::InitialHeld { last: (t, row) }
                } else {
                    Phase::InitialHold { start: t }
                }
            }
            Phase::InitialHold { start } => {
                if held(start) {
                    Phase::InitialHeld { last: (t, row) }
                } else {
                    Phase::InitialHold { start }
                }
            }
            Phase::InitialHeld { .. } if on_initial => Phase::InitialHeld { last: (t, row) },
            Phase::InitialHeld { last } => {
                let window = vec![(t, row)];
                if on_final {
                    self.final_hold(last, window, t, d_final)
                } else {
                    Phase::Transit { last, window }
                }
            }
            Phase::Transit { last, mut window } => {
                window.push((t, row));
                if on_final {
                    self.final_hold(last, window, t, d_final)
                } else {
                    Phase::Transit { last, window }
                }
            }
            Phase::FinalHold {
                last,
                mut window,
                mut buffered,
                start,
                min_d,
            } => {
                if on_final {
                    buffered.push((t, row));
                    Phase::FinalHold {
                        last,
                        window,
                        buffered,
                        start,
                        min_d: min_d.min(d_final),
                    }
                } else {
                    window.append(&mut buffered);
                    window.push((t, row));
                    Phase::Transit { last, window }
                }
            }
            Phase::Resting { .. } | Phase::Completed => unreachable!(),
        };

        if let Phase::FinalHold { start: since, .. } = &self.phase {
            if held(*since) {
                let Phase::FinalHold {
                    last, window, min_d, ..
                } = std::mem::replace(&mut self.phase, Phase::AwaitInitial)
                else {
                    unreachable!()
                };
                self.score(&m, last, window, min_d, t, &mut events)?;
                return Ok(events);
            }
        }
        if t - start > self.plan.timeout_per_movement {
            self.time_out(&m, t, &mut events);
        }
        Ok(events)
    }

    fn final_hold(&self, last: Row, window: Vec<Row>, t: f64, d: f64) -> Phase {
        Phase::FinalHold {
            last,
            window,
            buffered: vec![],
            start: t,
            min_d: d,
        }
    }

    fn score(
        &mut self,
        m: &Movement,
        last: Row,
        mut window: Vec<Row>,
        min_d: f64,
        t: f64,
        events: &mut Vec<FeedbackEvent>,
    ) -> Result<(), SessionError> {
        if window.len() < 2 {
            window.insert(0, last);
        }
        let times: Vec<f64> = window.iter().map(|r| r.0).collect();
        let samples = (0..m.reference.angle_names.len())
            .map(|j| window.iter().map(|r| r.1[j]).collect())
            .collect();
        let observed = Trajectory::new(m.reference.angle_names.clone(), samples, &times)?;
        let similarity = trajectory_similarity(&observed, &m.reference)?;
        let tau = self.postures.get(&m.final_posture).expect("validated").tau;
        let rating = (1.0 - min_d / tau).clamp(0.0, 1.0);
        self.rep.posture_ratings.push(rating);
        self.rep.similarities.push(similarity);
        events.push(FeedbackEvent {
            t,
            kind: FeedbackKind::PostureReached {
                name: m.final_posture.clone(),
                posture_rating: rating,
            },
        });
        events.push(FeedbackEvent {
            t,
            kind: FeedbackKind::MovementScored {
                name: m.name.clone(),
                similarity,
            },
        });
        self.close_trace(m);
        if self.mi + 1 < self.step().movements.len() {
            self.mi += 1;
            self.begin_movement(t, true);
        } else {
            self.complete_rep(t, Some(m.final_posture.clone()), events);
        }
        Ok(())
    }

    fn time_out(&mut self, m: &Movement, t: f64, events: &mut Vec<FeedbackEvent>) {
        events.push(FeedbackEvent {
            t,
            kind: FeedbackKind::MovementTimedOut { name: m.name.clone() },
        });
        self.close_trace(m);
        let unscored = self.step().movements.len() - self.rep.similarities.len();
        self.rep.posture_ratings.extend(std::iter::repeat_n(0.0, unscored));
        self.rep.similarities.extend(std::iter::repeat_n(0.0, unscored));
        self.rep.timed_out = true;
        self.complete_rep(t, None, events);
    }

    fn close_trace(&mut self, m: &Movement) {
        let rows = std::mem::take(&mut self.trace);
        self.rep.traces.push(MovementTrace {
            movement: m.name.clone(),
            components: m.components.clone(),
            angle_names: m.reference.angle_names.clone(),
            timestamps: rows.iter().map(|r| r.0).collect(),
            samples: rows.into_iter().map(|r| r.1).collect(),
        });
    }

    /// Activate movement `self.mi` at time `t`. With `on_initial` the current
    /// frame already stands on the movement's initial posture and counts as
    /// its completed initial hold.
    fn begin_movement(&mut self, t: f64, on_initial: bool) {
        self.movement_start = Some(t);
        self.phase = if on_initial {
            let row: Vec<f64> = self.step().angle_idx[self.mi].iter().map(|&i| self.angles[i]).collect();
            self.trace.push((t, row.clone()));
            Phase::InitialHeld { last: (t, row) }
        } else {
            Phase::AwaitInitial
        };
    }

    /// Close the current rep. `ended_on` names the posture the patient stands
    /// on when the rep ended normally.
    fn complete_rep(&mut self, t: f64, ended_on: Option<String>, events: &mut Vec<FeedbackEvent>) {
        let ev = |kind| FeedbackEvent { t, kind };
        let next_rep = RepRecord {
            series: 0,
            rep: 0,
            posture_ratings: vec![],
            similarities: vec![],
            timed_out: false,
            traces: vec![],
        };
        let done = std::mem::replace(&mut self.rep, next_rep);
        self.exercise_record().rep_records.push(done);
        self.reps_left -= 1;
        events.push(ev(FeedbackKind::RepCompleted {
            remaining: self.reps_left,
        }));
        self.mi = 0;
        let mut rest = false;
        if self.reps_left == 0 {
            self.series_left -= 1;
            events.push(ev(FeedbackKind::SeriesCompleted {
                remaining: self.series_left,
            }));
            if self.series_left == 0 {
                let threshold = self.plan.correct_threshold;
                let record = self.exercise_record();
                record.score(threshold);
                events.push(ev(FeedbackKind::ExerciseCompleted {
                    name: record.exercise.clone(),
                    correct: record.correct,
                    exercise_rating: record.exercise_rating,
                }));
                if self.ei + 1 == self.steps.len() {
                    events.push(ev(FeedbackKind::SessionCompleted));
                    self.phase = Phase::Completed;
                    return;
                }
                self.ei += 1;
                self.series_left = self.steps[self.ei].series;
            } else {
                rest = self.plan.rest_between_series > 0.0;
            }
            self.reps_left = self.steps[self.ei].reps;
        }
        self.rep.series = self.steps[self.ei].series - self.series_left + 1;
        self.rep.rep = self.steps[self.ei].reps - self.reps_left + 1;
        if rest {
            self.movement_start = None;
            self.phase = Phase::Resting {
                until: t + self.plan.rest_between_series,
            };
        } else {
            let chained = ended_on.as_deref() == Some(self.movement().initial.as_str());
            self.begin_movement(t, chained);
        }
    }

    /// Record of the exercise in progress, created on its first rep.
    fn exercise_record(&mut self) -> &mut ExerciseRecord {
        let step = &self.steps[self.ei];
        if self.records.len() <= self.ei {
            self.records.push(ExerciseRecord {
                exercise: step.exercise.clone(),
                series: step.series,
                reps: step.reps,
                rep_records: vec![],
                correct: false,
                exercise_rating: 0.0,
            });
        }
        &mut self.records[self.ei]
    }

    /// Final report. Unfinished sessions are flagged as aborted and lose their
    /// partial rep; exercises without a single finished rep are left out.
    pub fn finish(mut self) -> SessionReport {
        let aborted = !self.is_completed();
        if aborted {
            let threshold = self.plan.correct_threshold;
            if let Some(r) = self.records.get_mut(self.ei) {
                r.score(threshold);
            }
        }
        SessionReport {
            meta: self.meta,
            pain_prompt_pending: self.plan.pain_prompt && !aborted,
            plan: self.plan,
            exercises: self.records,
            span: self.first_t.zip(self.last_t),
            aborted,
            replay: self.replay,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{self, PlaybackOptions};
    use crate::posture::{descriptor_distance, PostureConcept};
    use crate::skeleton::{BodyPose, Recording};

    fn meta() -> SessionMeta {
        SessionMeta {
            id: "s1".into(),
            patient_id: "p1".into(),
            date: NaiveDate::from_ymd_opt(2024, 3, 1).unwrap(),
        }
    }

    fn run(content: &ContentLibrary, plan: &SessionPlan, rec: &Recording) -> (Vec<FeedbackEvent>, SessionReport) {
        let mut engine = start_session(meta(), plan.clone(), content).unwrap();
        let mut events = vec![];
        for f in rec.frames() {
            if engine.is_completed() {
                break;
            }
            events.extend(engine.feed_frame(f).unwrap());
        }
        (events, engine.finish())
    }

    fn kinds(events: &[FeedbackEvent]) -> Vec<&FeedbackKind> {
        events
            .iter()
            .map(|e| &e.kind)
            .filter(|k| !matches!(k, FeedbackKind::ProximityChanged { .. }))
            .collect()
    }

    #[test]
    fn proximity_levels() {
        let tau = 0.1;
        assert_eq!(proximity_level(0.5 * tau, tau), ProximityLevel::Green);
        assert_eq!(proximity_level(1.5 * tau, tau), ProximityLevel::Yellow);
        assert_eq!(proximity_level(2.0 * tau, tau), ProximityLevel::Red);
        assert_eq!(proximity_level(tau, tau), ProximityLevel::Yellow);
    }

    #[test]
    fn identity_playback_scores_one() {
        let content = fixtures::content_library().unwrap();
        let from = fixtures::pose("Stand").unwrap();
        let to = fixtures::pose("HipFlex40L").unwrap();
        let rec = fixtures::transition_recording(&from, &to).unwrap();
        let plan = SessionPlan::single("HipFlexion40", 1, 1);
        let (events, report) = run(&content, &plan, &rec);
        assert_eq!(
            kinds(&events),
            vec![
                &FeedbackKind::PostureReached {
                    name: "HipFlex40L".into(),
                    posture_rating: 1.0
                },
                &FeedbackKind::MovementScored {
                    name: "HipFlex40L".into(),
                    similarity: 1.0
                },
                &FeedbackKind::RepCompleted { remaining: 0 },
                &FeedbackKind::SeriesCompleted { remaining: 0 },
                &FeedbackKind::ExerciseCompleted {
                    name: "HipFlexion40".into(),
                    correct: true,
                    exercise_rating: 1.0
                },
                &FeedbackKind::SessionCompleted,
            ]
        );
        assert!(!report.aborted);
        assert_eq!(report.exercises[0].exercise_rating, 1.0);
        assert!(events.windows(2).all(|w| w[0].t <= w[1].t));
        report.validate().unwrap();
    }

    #[test]
    fn frozen_pose_times_out() {
        let content = fixtures::content_library().unwrap();
        let mut plan = SessionPlan::single("HipFlexion40", 1, 1);
        plan.timeout_per_movement = 5.0;
        // stands still on the initial posture and never moves
        let stand = fixtures::pose("Stand").unwrap();
        let script = crate::skeleton::MotionScript::transition(&stand, &stand, 0.0, 8.0, 0.0);
        let rec = crate::skeleton::synth_recording(&script, 0, 0.0).unwrap();
        let (events, report) = run(&content, &plan, &rec);
        let k = kinds(&events);
        assert_eq!(
            k[0],
            &FeedbackKind::MovementTimedOut {
                name: "HipFlex40L".into()
            }
        );
        let timed_out_at = events
            .iter()
            .find(|e| matches!(e.kind, FeedbackKind::MovementTimedOut { .. }))
            .unwrap()
            .t;
        assert!(timed_out_at > 5.0 && timed_out_at < 5.1);
        assert!(matches!(k[3], FeedbackKind::ExerciseCompleted { correct: false, .. }));
        assert!(!report.exercises[0].correct);
        assert!(report.exercises[0].rep_records[0].timed_out);
    }

    #[test]
    fn yellow_after_green() {
        let content = fixtures::content_library().unwrap();
        let stand = fixtures::pose("Stand").unwrap();
        let mut lean = stand;
        lean.trunk_lean = 12.0;
        let basis = content.postures.basis();
        let d_lean = descriptor_distance(
            &descriptor(&SkeletonFrame::new(0.0, lean.positions()).unwrap(), basis).unwrap(),
            &content.postures.get("Stand").unwrap().reference,
            content.postures.alpha(),
        );
        assert!(d_lean > 0.0);
        // Stand's threshold chosen so the leaning frame sits at exactly 1.5 tau
        let mut postures = PostureLibrary::new(basis.clone());
        for c in content.postures.concepts() {
            let tau = if c.name == "Stand" { d_lean / 1.5 } else { c.tau };
            postures.insert(PostureConcept { tau, ..c.clone() }).unwrap();
        }
        let content = ContentLibrary { postures, ..content };
        let mut engine = start_session(meta(), SessionPlan::single("HipFlexion40", 1, 1), &content).unwrap();
        let ev = engine
            .feed_frame(&SkeletonFrame::new(0.0, stand.positions()).unwrap())
            .unwrap();
        assert!(matches!(
            ev[0].kind,
            FeedbackKind::ProximityChanged {
                level: ProximityLevel::Green,
                ..
            }
        ));
        let ev = engine
            .feed_frame(&SkeletonFrame::new(0.1, lean.positions()).unwrap())
            .unwrap();
        match &ev[0].kind {
            FeedbackKind::ProximityChanged { level, distance } => {
                assert_eq!(*level, ProximityLevel::Yellow);
                assert!((distance / (d_lean / 1.5) - 1.5).abs() < 1e-9);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn plan_errors() {
        let content = fixtures::content_library().unwrap();
        let err = start_session(meta(), SessionPlan::single("Nope", 1, 1), &content)
            .err()
            .unwrap();
        assert_eq!(
            err,
            SessionError::Dangling {
                kind: "exercise",
                name: "Nope".into()
            }
        );
        let mut broken = content.clone();
        broken.exercises.insert(
            "Broken".into(),
            Exercise {
                name: "Broken".into(),
                description: String::new(),
                movements: vec!["HipFlex40L".into(), "ArmFwd100L".into()],
                default_series: 1,
                default_reps: 1,
            },
        );
        let err = start_session(meta(), SessionPlan::single("Broken", 1, 1), &broken)
            .err()
            .unwrap();
        assert!(matches!(err, SessionError::BrokenChain { index: 1, .. }));
        let err = start_session(meta(), SessionPlan::single("HipFlexion40", 0, 1), &content)
            .err()
            .unwrap();
        assert!(matches!(err, SessionError::InvalidPlan(_)));
    }

    #[test]
    fn counters_and_event_grammar() {
        let content = fixtures::content_library().unwrap();
        let mut plan = SessionPlan::single("FrontRaise", 2, 3);
        plan.rest_between_series = 2.0;
        plan.exercises.push(PlanItem {
            exercise: "OverheadReach".into(),
            series: 1,
            reps: 2,
        });
        let rec = fixtures::plan_playback(&content, &plan, &PlaybackOptions::exact()).unwrap();
        let mut engine = start_session(meta(), plan.clone(), &content).unwrap();
        let hud = engine.hud();
        assert_eq!((hud.series_left, hud.reps_left), (2, 3));
        assert_eq!(hud.next_posture, "Stand");
        assert_eq!(hud.movement_state, MovementState::AwaitInitial);
        let mut events = vec![];
        let mut rested = false;
        for f in rec.frames() {
            let before = engine.hud();
            let ev = engine.feed_frame(f).unwrap();
            let after = engine.hud();
            rested |= after.movement_state == MovementState::Resting;
            for e in &ev {
                match e.kind {
                    FeedbackKind::RepCompleted { remaining } if remaining > 0 => {
                        assert_eq!(remaining, before.reps_left - 1)
                    }
                    FeedbackKind::SeriesCompleted { remaining } if remaining > 0 => {
                        assert_eq!(remaining, before.series_left - 1)
                    }
                    _ => {}
                }
            }
            events.extend(ev);
            if engine.is_completed() {
                break;
            }
        }
        assert!(rested);
        let k = kinds(&events);
        let count = |f: fn(&FeedbackKind) -> bool| k.iter().filter(|x| f(x)).count();
        assert_eq!(count(|x| matches!(x, FeedbackKind::RepCompleted { .. })), 2 * 3 + 2);
        assert_eq!(count(|x| matches!(x, FeedbackKind::SeriesCompleted { .. })), 3);
        assert_eq!(
            count(|x| matches!(x, FeedbackKind::MovementScored { .. })),
            2 * 3 * 2 + 2 * 3
        );
        assert_eq!(count(|x| matches!(x, FeedbackKind::MovementTimedOut { .. })), 0);
        // PostureReached and MovementScored alternate in pairs
        let scored: Vec<_> = k
            .iter()
            .filter(|x| {
                matches!(
                    x,
                    FeedbackKind::PostureReached { .. } | FeedbackKind::MovementScored { .. }
                )
            })
            .collect();
        for pair in scored.chunks(2) {
            assert!(matches!(pair[0], FeedbackKind::PostureReached { .. }));
            assert!(matches!(pair[1], FeedbackKind::MovementScored { .. }));
        }
        assert_eq!(k.last(), Some(&&FeedbackKind::SessionCompleted));
        let report = engine.finish();
        assert_eq!(report.exercises.len(), 2);
        assert_eq!(report.exercises[0].rep_records.len(), 6);
        let last = &report.exercises[0].rep_records[5];
        assert_eq!((last.series, last.rep), (2, 3));
        assert!(report.exercises.iter().all(|e| e.correct));
        let hud = start_session(meta(), plan, &content).unwrap().hud();
        assert_eq!(hud.ribbon.len(), 3);
    }

    #[test]
    fn rating_formula() {
        let rep = |sims: Vec<f64>| RepRecord {
            series: 1,
            rep: 1,
            posture_ratings: vec![1.0; sims.len()],
            similarities: sims,
            timed_out: false,
            traces: vec![],
        };
        let mut rec = ExerciseRecord {
            exercise: "E".into(),
            series: 1,
            reps: 1,
            rep_records: vec![rep(vec![0.6])],
            correct: true,
            exercise_rating: 0.0,
        };
        rec.score(0.7);
        assert!(!rec.correct);
        assert!((rec.exercise_rating - 0.8).abs() < 1e-12);
        rec.rep_records = vec![rep(vec![1.0, 0.7])];
        rec.score(0.7);
        assert!(rec.correct);
        assert!((rec.exercise_rating - (0.5 + 0.5 * 0.85)).abs() < 1e-12);
    }

    #[test]
    fn abort_and_stream_errors() {
        let content = fixtures::content_library().unwrap();
        let plan = SessionPlan::single("FrontRaise", 1, 2);
        let mut engine = start_session(meta(), plan.clone(), &content).unwrap();
        let stand = BodyPose::standing().positions();
        engine.feed_frame(&SkeletonFrame::new(1.0, stand).unwrap()).unwrap();
        let err = engine.feed_frame(&SkeletonFrame::new(1.0, stand).unwrap()).unwrap_err();
        assert!(matches!(err, SessionError::NonMonotonic { .. }));
        let report = engine.finish();
        assert!(report.aborted);
        assert!(report.exercises.is_empty());
        assert_eq!(report.span, Some((1.0, 1.0)));

        let rec = fixtures::plan_playback(&content, &plan, &PlaybackOptions::exact()).unwrap();
        let mut engine = start_session(meta(), plan, &content).unwrap();
        for f in rec.frames() {
            engine.feed_frame(f).unwrap();
            if engine.is_completed() {
                break;
            }
        }
        let next = SkeletonFrame::new(rec.end() + 1.0, stand).unwrap();
        assert_eq!(engine.feed_frame(&next).unwrap_err(), SessionError::Completed);
    }

    #[test]
    fn deterministic_and_replayable() {
        let content = fixtures::content_library().unwrap();
        let plan = SessionPlan::single("Marching", 1, 1);
        let opts = PlaybackOptions {
            seed: 9,
            noise_sigma: 0.01,
            time_warp: 0.1,
        };
        let rec = fixtures::plan_playback(&content, &plan, &opts).unwrap();
        let (a, ra) = run(&content, &plan, &rec);
        let (b, rb) = run(&content, &plan, &rec);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let doc = serde_json::to_string(&ra).unwrap();
        let back: SessionReport = serde_json::from_str(&doc).unwrap();
        assert_eq!(back, ra);
        let line = serde_json::to_value(&a[0]).unwrap();
        assert_eq!(line["event"], "ProximityChanged");

        let mut engine = start_session(meta(), plan, &content).unwrap().with_replay();
        engine.feed_frame(&rec.frames()[0]).unwrap();
        assert_eq!(engine.finish().replay.unwrap().len(), 1);
    }
}
