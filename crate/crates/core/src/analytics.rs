//! Rating time series, cohort comparison and range-of-motion extents.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::{Exploration, PatientRecord, Side};
use crate::movement::MovementType;
use crate::posture::FeatureBasis;
use crate::session::SessionReport;
use crate::skeleton::JointId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("session `{0}` has no completed repetitions")]
    EmptyReport(String),
    #[error("no trace for {location} {movement_type} on the {side:?} side")]
    NoTrace {
        location: String,
        side: Side,
        movement_type: MovementType,
    },
    #[error("invalid extent: {0}")]
    InvalidExtent(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingPoint {
    pub ordinal: u32,
    pub session_id: String,
    pub date: NaiveDate,
    pub exercise_rating: f64,
    pub posture_rating: f64,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (n, s) = xs.into_iter().fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| s / n as f64)
}

/// Mean exercise rating and mean posture rating of one session. The ordinal
/// is left at 1; [`patient_timeseries`] renumbers.
pub fn session_ratings(report: &SessionReport) -> Result<RatingPoint, AnalyticsError> {
    let empty = || AnalyticsError::EmptyReport(report.meta.id.clone());
    let exercise_rating = mean(report.exercises.iter().map(|e| e.exercise_rating)).ok_or_else(empty)?;
    let posture_rating = mean(
        report
            .exercises
            .iter()
            .flat_map(|e| &e.rep_records)
            .flat_map(|r| r.posture_ratings.iter().copied()),
    )
    .ok_or_else(empty)?;
    Ok(RatingPoint {
        ordinal: 1,
        session_id: report.meta.id.clone(),
        date: report.meta.date,
        exercise_rating,
        posture_rating,
    })
}

/// Points sorted by date, then session id, numbered from 1. Reports without
/// any completed repetition are skipped.
pub fn patient_timeseries<'a>(reports: impl IntoIterator<Item = &'a SessionReport>) -> Vec<RatingPoint> {
    let mut points: Vec<RatingPoint> = reports.into_iter().filter_map(|r| session_ratings(r).ok()).collect();
    points.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.session_id.cmp(&b.session_id)));
    for (i, p) in points.iter_mut().enumerate() {
        p.ordinal = i as u32 + 1;
    }
    points
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortPoint {
    pub ordinal: u32,
    pub mean_exercise_rating: f64,
    pub count: usize,
}

/// Mean exercise rating per session ordinal over the patients that reached it.
pub fn cohort_average(series: &[Vec<RatingPoint>]) -> Vec<CohortPoint> {
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for s in series {
        for p in s {
            let e = acc.entry(p.ordinal).or_default();
            e.0 += p.exercise_rating;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(ordinal, (sum, count))| CohortPoint {
            ordinal,
            mean_exercise_rating: sum / count as f64,
            count,
        })
        .collect()
}

/// CSV with header `ordinal,date,exercise_rating,posture_rating`.
pub fn timeseries_csv(points: &[RatingPoint]) -> String {
    let mut out = String::from("ordinal,date,exercise_rating,posture_rating\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            p.ordinal, p.date, p.exercise_rating, p.posture_rating
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RomExtent {
    pub location: String,
    pub side: Side,
    #[serde(rename = "type")]
    pub movement_type: MovementType,
    pub min: f64,
    pub max: f64,
    pub arc: f64,
}

impl RomExtent {
    pub fn validate(&self) -> Result<(), AnalyticsError> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(AnalyticsError::InvalidExtent(format!(
                "min {} max {}",
                self.min, self.max
            )));
        }
        if (self.arc - (self.max - self.min)).abs() > 1e-9 {
            return Err(AnalyticsError::InvalidExtent(format!(
                "arc {} differs from max - min",
                self.arc
            )));
        }
        Ok(())
    }
}

pub fn joint_side(joint: JointId) -> Option<Side> {
    use JointId::*;
    match joint {
        ShoulderLeft | ElbowLeft | WristLeft | HandLeft | HipLeft | KneeLeft | AnkleLeft | FootLeft => Some(Side::Left),
        ShoulderRight | ElbowRight | WristRight | HandRight | HipRight | KneeRight | AnkleRight | FootRight => {
            Some(Side::Right)
        }
        _ => None,
    }
}

/// Clinical angle for a raw basis angle measured at `vertex`. Hip, knee,
/// elbow and wrist read 180 in the neutral stance; shoulder and ankle angles
/// are used as measured.
pub fn anatomical_angle(vertex: JointId, raw: f64) -> f64 {
    use JointId::*;
    match vertex {
        ShoulderLeft | ShoulderRight | AnkleLeft | AnkleRight => raw,
        _ => 180.0 - raw,
    }
}

/// Extremes of the anatomical angle over every trace of a movement with a
/// component at (`location`, `movement_type`) on `side`. Traces that end
/// closer to neutral than they start are skipped.
pub fn rom_extents(
    report: &SessionReport,
    location: &str,
    side: Side,
    movement_type: &MovementType,
    basis: &FeatureBasis,
) -> Result<RomExtent, AnalyticsError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let traces = report
        .exercises
        .iter()
        .flat_map(|e| &e.rep_records)
        .flat_map(|r| &r.traces);
    for trace in traces {
        for c in &trace.components {
            let Some(joint) = c.joint else { continue };
            if c.location != location || &c.movement_type != movement_type || joint_side(joint) != Some(side) {
                continue;
            }
            let Some(col) = basis
                .angles()
                .iter()
                .filter(|d| d.vertex == joint)
                .find_map(|d| trace.angle_names.iter().position(|n| *n == d.name))
            else {
                continue;
            };
            let (Some(first), Some(last)) = (trace.samples.first(), trace.samples.last()) else {
                continue;
            };
            // Returning towards neutral is not a sample of this range.
            if anatomical_angle(joint, last[col]) < anatomical_angle(joint, first[col]) {
                continue;
            }
            for row in &trace.samples {
                let v = anatomical_angle(joint, row[col]);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if lo > hi {
        return Err(AnalyticsError::NoTrace {
            location: location.to_string(),
            side,
            movement_type: movement_type.clone(),
        });
    }
    Ok(RomExtent {
        location: location.to_string(),
        side,
        movement_type: movement_type.clone(),
        min: lo,
        max: hi,
        arc: hi - lo,
    })
}

/// Record the session's achieved range (its maximum) as a new exploration.
pub fn update_exploration(
    patient: &PatientRecord,
    extent: &RomExtent,
    date: NaiveDate,
) -> Result<PatientRecord, AnalyticsError> {
    extent.validate()?;
    let mut out = patient.clone();
    out.explorations.push(Exploration {
        date,
        location: extent.location.clone(),
        side: extent.side,
        movement_type: extent.movement_type.clone(),
        rom: extent.max,
    });
    out.explorations.sort_by_key(|e| e.date);
    Ok(out)
}
