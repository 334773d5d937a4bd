//! Skeleton data model: the 20-joint Kinect-v1 skeleton, frames, recordings
//! and the two geometric primitives every descriptor is built from.
//!
//! Coordinates are meters with `x` to the sensor's right (the subject's left
//! when facing the sensor), `y` up and `z` increasing away from the sensor.

mod body;
mod io;
mod synth;

use std::fmt;
use std::ops::{Add, Mul, Sub};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use body::{ArmPose, BodyPose, LegPose};
pub use io::{load_recording, save_recording};
pub use synth::{blend, synth_recording, KeyPose, Keyframe, MotionScript};

/// Number of tracked joints.
pub const JOINT_COUNT: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkeletonError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: timestamp {t} does not increase over previous {previous}")]
    NonMonotonic { line: usize, previous: f64, t: f64 },
    #[error("line {line}: missing joint {joint}")]
    MissingJoint { line: usize, joint: JointId },
    #[error("unknown joint name `{0}`")]
    UnknownJoint(String),
    #[error("non-finite value for joint {0}")]
    NonFinite(JointId),
    #[error("confidence {value} for joint {joint} outside [0, 1]")]
    Confidence { joint: JointId, value: f64 },
    #[error("degenerate geometry for angle `{0}`: coincident joints")]
    Degenerate(String),
    #[error("recording has no frames")]
    EmptyRecording,
    #[error("invalid motion script: {0}")]
    InvalidScript(String),
}

/// One of the 20 joints of the Kinect-v1 skeleton. The discriminant is the
/// stable serialization ordinal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JointId {
    HipCenter = 0,
    Spine,
    ShoulderCenter,
    Head,
    ShoulderLeft,
    ElbowLeft,
    WristLeft,
    HandLeft,
    ShoulderRight,
    ElbowRight,
    WristRight,
    HandRight,
    HipLeft,
    KneeLeft,
    AnkleLeft,
    FootLeft,
    HipRight,
    KneeRight,
    AnkleRight,
    FootRight,
}

impl JointId {
    pub const ALL: [JointId; JOINT_COUNT] = [
        JointId::HipCenter,
        JointId::Spine,
        JointId::ShoulderCenter,
        JointId::Head,
        JointId::ShoulderLeft,
        JointId::ElbowLeft,
        JointId::WristLeft,
        JointId::HandLeft,
        JointId::ShoulderRight,
        JointId::ElbowRight,
        JointId::WristRight,
        JointId::HandRight,
        JointId::HipLeft,
        JointId::KneeLeft,
        JointId::AnkleLeft,
        JointId::FootLeft,
        JointId::HipRight,
        JointId::KneeRight,
        JointId::AnkleRight,
        JointId::FootRight,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            JointId::HipCenter => "HipCenter",
            JointId::Spine => "Spine",
            JointId::ShoulderCenter => "ShoulderCenter",
            JointId::Head => "Head",
            JointId::ShoulderLeft => "ShoulderLeft",
            JointId::ElbowLeft => "ElbowLeft",
            JointId::WristLeft => "WristLeft",
            JointId::HandLeft => "HandLeft",
            JointId::ShoulderRight => "ShoulderRight",
            JointId::ElbowRight => "ElbowRight",
            JointId::WristRight => "WristRight",
            JointId::HandRight => "HandRight",
            JointId::HipLeft => "HipLeft",
            JointId::KneeLeft => "KneeLeft",
            JointId::AnkleLeft => "AnkleLeft",
            JointId::FootLeft => "FootLeft",
            JointId::HipRight => "HipRight",
            JointId::KneeRight => "KneeRight",
            JointId::AnkleRight => "AnkleRight",
            JointId::FootRight => "FootRight",
        }
    }
}

impl fmt::Display for JointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for JointId {
    type Err = SkeletonError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        JointId::ALL
            .iter()
            .copied()
            .find(|j| j.name() == s)
            .ok_or_else(|| SkeletonError::UnknownJoint(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    pub fn lerp(self, o: Vec3, u: f64) -> Vec3 {
        self + (o - self) * u
    }

    pub fn axis(self, axis: Axis) -> f64 {
        match axis {
            Axis::X => self.x,
            Axis::Y => self.y,
            Axis::Z => self.z,
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        [v.x, v.y, v.z]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Joint positions of one skeleton, indexed by [`JointId::ordinal`].
pub type Pose = [Vec3; JOINT_COUNT];

/// A timestamped skeleton sample with per-joint tracking confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "io::FrameDoc", into = "io::FrameDoc")]
pub struct SkeletonFrame {
    t: f64,
    positions: Pose,
    confidence: [f64; JOINT_COUNT],
}

impl SkeletonFrame {
    /// Frame with full confidence on every joint.
    pub fn new(t: f64, positions: Pose) -> Result<Self, SkeletonError> {
        Self::with_confidence(t, positions, [1.0; JOINT_COUNT])
    }

    pub fn with_confidence(t: f64, positions: Pose, confidence: [f64; JOINT_COUNT]) -> Result<Self, SkeletonError> {
        if !(t.is_finite() && t >= 0.0) {
            return Err(SkeletonError::InvalidScript(format!(
                "frame time {t} must be finite and non-negative"
            )));
        }
        for j in JointId::ALL {
            if !positions[j.ordinal()].is_finite() {
                return Err(SkeletonError::NonFinite(j));
            }
            let c = confidence[j.ordinal()];
            if !(0.0..=1.0).contains(&c) {
                return Err(SkeletonError::Confidence { joint: j, value: c });
            }
        }
        Ok(SkeletonFrame {
            t,
            positions,
            confidence,
        })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn position(&self, joint: JointId) -> Vec3 {
        self.positions[joint.ordinal()]
    }

    pub fn positions(&self) -> &Pose {
        &self.positions
    }

    pub fn confidence(&self, joint: JointId) -> f64 {
        self.confidence[joint.ordinal()]
    }

    /// Copy of this frame re-stamped at `t`.
    pub fn at(&self, t: f64) -> Result<Self, SkeletonError> {
        Self::with_confidence(t, self.positions, self.confidence)
    }

    /// Whether any joint is tracked with confidence below `threshold`.
    pub fn has_low_confidence(&self, threshold: f64) -> bool {
        self.confidence.iter().any(|&c| c < threshold)
    }
}

/// A non-empty frame sequence with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    frames: Vec<SkeletonFrame>,
    nominal_rate: f64,
}

impl Recording {
    pub const DEFAULT_RATE: f64 = 30.0;

    pub fn new(frames: Vec<SkeletonFrame>, nominal_rate: f64) -> Result<Self, SkeletonError> {
        if frames.is_empty() {
            return Err(SkeletonError::EmptyRecording);
        }
        for (i, w) in frames.windows(2).enumerate() {
            if w[1].t <= w[0].t {
                return Err(SkeletonError::NonMonotonic {
                    line: i + 2,
                    previous: w[0].t,
                    t: w[1].t,
                });
            }
        }
        Ok(Recording { frames, nominal_rate })
    }

    pub fn frames(&self) -> &[SkeletonFrame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<SkeletonFrame> {
        self.frames
    }

    pub fn nominal_rate(&self) -> f64 {
        self.nominal_rate
    }

    pub fn start(&self) -> f64 {
        self.frames[0].t
    }

    pub fn end(&self) -> f64 {
        self.frames[self.frames.len() - 1].t
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Concatenate recordings, shifting each one so that it starts one frame
    /// period after the previous ends.
    pub fn concat(parts: &[Recording]) -> Result<Recording, SkeletonError> {
        let rate = parts
            .first()
            .map(|r| r.nominal_rate)
            .ok_or(SkeletonError::EmptyRecording)?;
        let mut frames: Vec<SkeletonFrame> = Vec::new();
        for part in parts {
            let offset = match frames.last() {
                Some(last) => last.t + 1.0 / rate - part.start(),
                None => -part.start(),
            };
            for f in &part.frames {
                frames.push(f.at(f.t + offset)?);
            }
        }
        Recording::new(frames, rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Greater,
    Less,
}

/// Angle at `vertex` between the rays towards `end_a` and `end_b`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AngleDef {
    pub name: String,
    pub vertex: JointId,
    pub end_a: JointId,
    pub end_b: JointId,
}

impl AngleDef {
    pub fn new(name: &str, end_a: JointId, vertex: JointId, end_b: JointId) -> Self {
        AngleDef {
            name: name.to_string(),
            vertex,
            end_a,
            end_b,
        }
    }

    pub fn is_well_formed(&self) -> bool {
        self.vertex != self.end_a && self.vertex != self.end_b && self.end_a != self.end_b
    }
}

/// Binary relation `lhs.axis <sense> rhs.axis`, compared strictly.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationDef {
    pub name: String,
    pub lhs: JointId,
    pub rhs: JointId,
    pub axis: Axis,
    pub sense: Sense,
}

impl RelationDef {
    pub fn new(name: &str, lhs: JointId, sense: Sense, rhs: JointId, axis: Axis) -> Self {
        RelationDef {
            name: name.to_string(),
            lhs,
            rhs,
            axis,
            sense,
        }
    }

    pub fn is_well_formed(&self) -> bool {
        self.lhs != self.rhs
    }
}

const MIN_RAY: f64 = 1e-9;

/// Angle in degrees, in `[0, 180]`.
pub fn limb_angle(frame: &SkeletonFrame, def: &AngleDef) -> Result<f64, SkeletonError> {
    angle_between(
        frame.position(def.end_a),
        frame.position(def.vertex),
        frame.position(def.end_b),
    )
    .ok_or_else(|| SkeletonError::Degenerate(def.name.clone()))
}

/// atan2 form: well conditioned near 0° and 180°, unlike acos of the cosine.
pub(crate) fn angle_between(a: Vec3, vertex: Vec3, b: Vec3) -> Option<f64> {
    let ra = a - vertex;
    let rb = b - vertex;
    if ra.norm() <= MIN_RAY || rb.norm() <= MIN_RAY {
        return None;
    }
    Some(ra.cross(rb).norm().atan2(ra.dot(rb)).to_degrees())
}

pub fn joint_relation(frame: &SkeletonFrame, def: &RelationDef) -> bool {
    let l = frame.position(def.lhs).axis(def.axis);
    let r = frame.position(def.rhs).axis(def.axis);
    match def.sense {
        Sense::Greater => l > r,
        Sense::Less => l < r,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_with(overrides: &[(JointId, Vec3)]) -> SkeletonFrame {
        let mut pose = BodyPose::standing().positions();
        for &(j, p) in overrides {
            pose[j.ordinal()] = p;
        }
        SkeletonFrame::new(0.0, pose).unwrap()
    }

    fn elbow() -> AngleDef {
        AngleDef::new("ElbowL", JointId::ShoulderLeft, JointId::ElbowLeft, JointId::WristLeft)
    }

    #[test]
    fn collinear_arm_is_straight() {
        let f = frame_with(&[
            (JointId::ShoulderLeft, Vec3::new(0.0, 0.0, 0.0)),
            (JointId::ElbowLeft, Vec3::new(0.0, -0.3, 0.0)),
            (JointId::WristLeft, Vec3::new(0.0, -0.6, 0.0)),
        ]);
        assert_eq!(limb_angle(&f, &elbow()).unwrap(), 180.0);
    }

    #[test]
    fn perpendicular_arm() {
        let f = frame_with(&[
            (JointId::ShoulderLeft, Vec3::new(0.0, 0.0, 0.0)),
            (JointId::ElbowLeft, Vec3::new(0.0, -0.3, 0.0)),
            (JointId::WristLeft, Vec3::new(0.3, -0.3, 0.0)),
        ]);
        assert!((limb_angle(&f, &elbow()).unwrap() - 90.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_joints_are_degenerate() {
        let f = frame_with(&[
            (JointId::ElbowLeft, Vec3::new(0.1, 1.0, 2.0)),
            (JointId::WristLeft, Vec3::new(0.1, 1.0, 2.0)),
        ]);
        assert_eq!(
            limb_angle(&f, &elbow()),
            Err(SkeletonError::Degenerate("ElbowL".into()))
        );
    }

    #[test]
    fn relations_compare_strictly() {
        let above = RelationDef::new(
            "HandL_above_Head",
            JointId::HandLeft,
            Sense::Greater,
            JointId::Head,
            Axis::Y,
        );
        let f = frame_with(&[
            (JointId::HandLeft, Vec3::new(0.2, 1.8, 2.0)),
            (JointId::Head, Vec3::new(0.0, 1.7, 2.0)),
        ]);
        assert!(joint_relation(&f, &above));
        let f = frame_with(&[
            (JointId::HandLeft, Vec3::new(0.2, 1.7, 2.0)),
            (JointId::Head, Vec3::new(0.0, 1.7, 2.0)),
        ]);
        assert!(!joint_relation(&f, &above));

        let front = RelationDef::new(
            "HandR_front",
            JointId::HandRight,
            Sense::Less,
            JointId::ShoulderCenter,
            Axis::Z,
        );
        let f = frame_with(&[
            (JointId::HandRight, Vec3::new(-0.2, 1.2, 0.9)),
            (JointId::ShoulderCenter, Vec3::new(0.0, 1.4, 1.2)),
        ]);
        assert!(joint_relation(&f, &front));
    }

    #[test]
    fn joint_names_round_trip() {
        for j in JointId::ALL {
            assert_eq!(j.name().parse::<JointId>().unwrap(), j);
            assert_eq!(JointId::ALL[j.ordinal()], j);
        }
        assert!("Tail".parse::<JointId>().is_err());
    }

    #[test]
    fn frame_rejects_bad_confidence_and_nan() {
        let pose = BodyPose::standing().positions();
        let mut conf = [1.0; JOINT_COUNT];
        conf[3] = 1.5;
        assert!(matches!(
            SkeletonFrame::with_confidence(0.0, pose, conf),
            Err(SkeletonError::Confidence {
                joint: JointId::Head,
                ..
            })
        ));
        let mut bad = pose;
        bad[0].x = f64::NAN;
        assert!(matches!(
            SkeletonFrame::new(0.0, bad),
            Err(SkeletonError::NonFinite(JointId::HipCenter))
        ));
    }

    #[test]
    fn concat_shifts_time() {
        let f = SkeletonFrame::new(5.0, BodyPose::standing().positions()).unwrap();
        let a = Recording::new(vec![f.clone(), f.at(5.5).unwrap()], 2.0).unwrap();
        let joined = Recording::concat(&[a.clone(), a]).unwrap();
        let ts: Vec<f64> = joined.frames().iter().map(|f| f.t()).collect();
        assert_eq!(ts, vec![0.0, 0.5, 1.0, 1.5]);
    }
}
