//! Movements between two postures: reference angular trajectories, kinematic
//! metadata, and DTW-based trajectory similarity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::posture::{descriptor, FeatureBasis, PostureError, PostureLibrary};
use crate::skeleton::{limb_angle, JointId, Recording, SkeletonError, SkeletonFrame};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MovementError {
    #[error("window [{start}, {end}] does not fit recording span [{rec_start}, {rec_end}]")]
    Window {
        start: f64,
        end: f64,
        rec_start: f64,
        rec_end: f64,
    },
    #[error("trajectory needs at least 2 samples, window holds {0}")]
    TooFewSamples(usize),
    #[error("angle `{0}` is not part of the feature basis")]
    UnknownAngle(String),
    #[error("trajectories cover different angles: {observed:?} vs {reference:?}")]
    AngleMismatch {
        observed: Vec<String>,
        reference: Vec<String>,
    },
    #[error("{which} frame does not match posture `{expected}` (classified as {found:?})")]
    Endpoint {
        which: &'static str,
        expected: String,
        found: Option<String>,
    },
    #[error("invalid movement: {0}")]
    Invalid(String),
    #[error(transparent)]
    Posture(#[from] PostureError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum MovementType {
    Flexion,
    Extension,
    Abduction,
    Adduction,
    Rotation,
    Other(String),
}

impl MovementType {
    /// Type of the same component performed in the opposite direction.
    pub fn opposite(&self) -> MovementType {
        match self {
            MovementType::Flexion => MovementType::Extension,
            MovementType::Extension => MovementType::Flexion,
            MovementType::Abduction => MovementType::Adduction,
            MovementType::Adduction => MovementType::Abduction,
            other => other.clone(),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            MovementType::Flexion => "Flexion",
            MovementType::Extension => "Extension",
            MovementType::Abduction => "Abduction",
            MovementType::Adduction => "Adduction",
            MovementType::Rotation => "Rotation",
            MovementType::Other(label) => label,
        }
    }
}

impl fmt::Display for MovementType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MovementType {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "Flexion" => MovementType::Flexion,
            "Extension" => MovementType::Extension,
            "Abduction" => MovementType::Abduction,
            "Adduction" => MovementType::Adduction,
            "Rotation" => MovementType::Rotation,
            other => MovementType::Other(other.to_string()),
        })
    }
}

impl Serialize for MovementType {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for MovementType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().expect("infallible"))
    }
}

/// One anatomical component of a movement, e.g. hip flexion up to 40°.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicComponent {
    /// Side-agnostic location label such as `HipJoint`.
    pub location: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<JointId>,
    #[serde(rename = "type")]
    pub movement_type: MovementType,
    pub rom: f64,
}

impl KinematicComponent {
    pub fn new(location: &str, movement_type: MovementType, rom: f64) -> Self {
        KinematicComponent {
            location: location.to_string(),
            joint: None,
            movement_type,
            rom,
        }
    }
}

/// Name of the default-basis angle measured at `joint`, if any.
pub fn angle_for_joint(joint: JointId) -> Option<&'static str> {
    use JointId::*;
    Some(match joint {
        ShoulderLeft => "ShoulderL",
        ShoulderRight => "ShoulderR",
        ElbowLeft => "ElbowL",
        ElbowRight => "ElbowR",
        WristLeft => "WristL",
        WristRight => "WristR",
        HipLeft => "HipL",
        HipRight => "HipR",
        KneeLeft => "KneeL",
        KneeRight => "KneeR",
        AnkleLeft => "AnkleL",
        AnkleRight => "AnkleR",
        _ => return None,
    })
}

/// Per-angle samples on a shared, strictly increasing time axis that starts
/// at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub angle_names: Vec<String>,
    pub samples: Vec<Vec<f64>>,
    pub timestamps: Vec<f64>,
}

/// Timestamps live on a nanosecond grid so time reversal is exactly invertible.
fn to_ns(t: f64) -> i64 {
    (t * 1e9).round() as i64
}

fn from_ns(ns: i64) -> f64 {
    ns as f64 / 1e9
}

impl Trajectory {
    /// Build from absolute sample times; times are rebased to start at zero.
    pub fn new(angle_names: Vec<String>, samples: Vec<Vec<f64>>, times: &[f64]) -> Result<Self, MovementError> {
        let Some(&t0) = times.first() else {
            return Err(MovementError::TooFewSamples(0));
        };
        let t0 = to_ns(t0);
        let timestamps = times.iter().map(|&t| from_ns(to_ns(t) - t0)).collect();
        let traj = Trajectory {
            angle_names,
            samples,
            timestamps,
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<(), MovementError> {
        let n = self.timestamps.len();
        if n < 2 {
            return Err(MovementError::TooFewSamples(n));
        }
        if self.angle_names.is_empty() || self.angle_names.len() != self.samples.len() {
            return Err(MovementError::Invalid(
                "one sample sequence per angle name required".into(),
            ));
        }
        if self.samples.iter().any(|s| s.len() != n) {
            return Err(MovementError::Invalid(
                "sample sequences must match timestamp count".into(),
            ));
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MovementError::Invalid("timestamps must increase".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.timestamps[self.len() - 1] - self.timestamps[0]
    }

    /// Time-reversed copy keeping the gaps between samples.
    pub fn reversed(&self) -> Trajectory {
        let ns: Vec<i64> = self.timestamps.iter().map(|&t| to_ns(t)).collect();
        let (first, last) = (ns[0], ns[ns.len() - 1]);
        Trajectory {
            angle_names: self.angle_names.clone(),
            samples: self.samples.iter().map(|s| s.iter().rev().copied().collect()).collect(),
            timestamps: ns.iter().rev().map(|&t| from_ns(first + last - t)).collect(),
        }
    }

    /// `count` samples per angle, uniform over normalized time, linearly
    /// interpolated.
    pub fn resample(&self, count: usize) -> Vec<Vec<f64>> {
        let t0 = self.timestamps[0];
        let span = self.duration();
        let mut out = vec![Vec::with_capacity(count); self.samples.len()];
        let mut seg = 0;
        for k in 0..count {
            let u = if count == 1 { 0.0 } else { k as f64 / (count - 1) as f64 };
            let t = t0 + u * span;
            while seg + 2 < self.len() && self.timestamps[seg + 1] < t {
                seg += 1;
            }
            let (ta, tb) = (self.timestamps[seg], self.timestamps[seg + 1]);
            let w = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
            for (o, s) in out.iter_mut().zip(&self.samples) {
                o.push(s[seg] + (s[seg + 1] - s[seg]) * w);
            }
        }
        out
    }
}

/// Angle samples of the named basis angles over `frames`.
pub fn trajectory_from_frames(
    frames: &[SkeletonFrame],
    basis: &FeatureBasis,
    angle_names: &[String],
) -> Result<Trajectory, MovementError> {
    let defs = angle_names
        .iter()
        .map(|n| basis.angle_def(n).ok_or_else(|| MovementError::UnknownAngle(n.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut samples = vec![Vec::with_capacity(frames.len()); defs.len()];
    for f in frames {
        for (s, d) in samples.iter_mut().zip(&defs) {
            s.push(limb_angle(f, d)?);
        }
    }
    let times: Vec<f64> = frames.iter().map(|f| f.t()).collect();
    Trajectory::new(angle_names.to_vec(), samples, &times)
}

pub fn extract_trajectory(
    rec: &Recording,
    basis: &FeatureBasis,
    angle_names: &[String],
    t_start: f64,
    t_end: f64,
) -> Result<Trajectory, MovementError> {
    if angle_names.is_empty() {
        return Err(MovementError::Invalid("no angles selected".into()));
    }
    if !(t_start < t_end) || t_start > rec.end() || t_end < rec.start() {
        return Err(MovementError::Window {
            start: t_start,
            end: t_end,
            rec_start: rec.start(),
            rec_end: rec.end(),
        });
    }
    let frames: Vec<SkeletonFrame> = rec
        .frames()
        .iter()
        .filter(|f| f.t() >= t_start && f.t() <= t_end)
        .cloned()
        .collect();
    if frames.len() < 2 {
        return Err(MovementError::TooFewSamples(frames.len()));
    }
    trajectory_from_frames(&frames, basis, angle_names)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub resample: usize,
    pub band_fraction: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            resample: 64,
            band_fraction: 0.1,
        }
    }
}

pub fn trajectory_similarity(observed: &Trajectory, reference: &Trajectory) -> Result<f64, MovementError> {
    trajectory_similarity_with(observed, reference, &SimilarityConfig::default())
}

/// `1 - (mean per-cell cost along the optimal warping path) / 180`, clamped to
/// `[0, 1]`. Cell cost is the mean absolute angle difference in degrees.
pub fn trajectory_similarity_with(
    observed: &Trajectory,
    reference: &Trajectory,
    cfg: &SimilarityConfig,
) -> Result<f64, MovementError> {
    if observed.angle_names != reference.angle_names {
        return Err(MovementError::AngleMismatch {
            observed: observed.angle_names.clone(),
            reference: reference.angle_names.clone(),
        });
    }
    observed.validate()?;
    reference.validate()?;
    let n = cfg.resample.max(2);
    let a = observed.resample(n);
    let b = reference.resample(n);
    let band = (cfg.band_fraction * n as f64).floor() as usize;
    let (cost, len) = banded_dtw(&a, &b, band);
    Ok((1.0 - (cost / len as f64) / 180.0).clamp(0.0, 1.0))
}

/// Minimum-cost warping path inside a Sakoe-Chiba band of half-width `band`
/// for two equal-length multivariate series (`series[angle][sample]`).
/// Returns the path cost and the number of cells on it; among equal-cost
/// paths the shortest wins, which keeps the result symmetric in its inputs.
pub fn banded_dtw(a: &[Vec<f64>], b: &[Vec<f64>], band: usize) -> (f64, usize) {
    let n = a[0].len();
    let m = b[0].len();
    let dims = a.len() as f64;
    let cell = |i: usize, j: usize| -> f64 { a.iter().zip(b).map(|(x, y)| (x[i] - y[j]).abs()).sum::<f64>() / dims };
    const INF: (f64, usize) = (f64::INFINITY, usize::MAX);
    let better = |p: (f64, usize), q: (f64, usize)| if q.0 < p.0 || (q.0 == p.0 && q.1 < p.1) { q } else { p };
    let mut prev = vec![INF; m];
    let mut cur = vec![INF; m];
    for i in 0..n {
        cur.fill(INF);
        let lo = i.saturating_sub(band);
        let hi = (i + band).min(m - 1);
        for j in lo..=hi {
            let c = cell(i, j);
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut best = INF;
                if i > 0 && j > 0 {
                    best = better(best, prev[j - 1]);
                }
                if i > 0 {
                    best = better(best, prev[j]);
                }
                if j > 0 {
                    best = better(best, cur[j - 1]);
                }
                best
            };
            if best.0.is_finite() {
                cur[j] = (best.0 + c, best.1 + 1);
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Movement {
    pub name: String,
    pub initial: String,
    #[serde(rename = "final")]
    pub final_posture: String,
    pub relevant_angles: Vec<String>,
    pub reference: Trajectory,
    pub components: Vec<KinematicComponent>,
}

impl Movement {
    pub fn validate(&self) -> Result<(), MovementError> {
        if self.name.trim().is_empty() {
            return Err(MovementError::Invalid("empty name".into()));
        }
        if self.relevant_angles.is_empty() {
            return Err(MovementError::Invalid(format!(
                "`{}` has no relevant angles",
                self.name
            )));
        }
        if let Some(a) = self
            .relevant_angles
            .iter()
            .find(|a| !self.reference.angle_names.contains(a))
        {
            return Err(MovementError::Invalid(format!(
                "relevant angle `{a}` missing from the reference trajectory"
            )));
        }
        if self.components.is_empty() {
            return Err(MovementError::Invalid(format!(
                "`{}` has no kinematic components",
                self.name
            )));
        }
        if let Some(c) = self.components.iter().find(|c| !(c.rom > 0.0 && c.rom <= 360.0)) {
            return Err(MovementError::Invalid(format!(
                "component {} {} has ROM {} outside (0, 360]",
                c.location, c.movement_type, c.rom
            )));
        }
        self.reference.validate()
    }

    /// Whether the movement returns to where it started.
    pub fn is_cyclic(&self) -> bool {
        self.initial == self.final_posture
    }
}

/// Basis angles whose value changes by more than `threshold` degrees between
/// the first and last frame.
pub fn suggest_relevant_angles(
    rec: &Recording,
    basis: &FeatureBasis,
    threshold: f64,
) -> Result<Vec<String>, MovementError> {
    let first = descriptor(&rec.frames()[0], basis)?;
    let last = descriptor(&rec.frames()[rec.len() - 1], basis)?;
    Ok(basis
        .angles()
        .iter()
        .zip(first.angles.iter().zip(&last.angles))
        .filter(|(_, (a, b))| (*a - *b).abs() > threshold)
        .map(|(def, _)| def.name.clone())
        .collect())
}

/// Frame index range `[start, end]` observed for a movement, given per-frame
/// flags telling whether the initial / final posture is reached.
///
/// The window opens at the first frame after the leading run on the initial
/// posture and closes at the first later frame on the final posture; a window
/// of one frame is widened backwards by one. Returns `None` when the sequence
/// never leaves the initial posture or never reaches the final one.
pub fn observation_window(on_initial: &[bool], on_final: &[bool]) -> Option<(usize, usize)> {
    let start = on_initial.iter().position(|&x| !x)?;
    if start == 0 {
        return None;
    }
    let end = start + on_final[start..].iter().position(|&x| x)?;
    Some(if end == start { (start - 1, end) } else { (start, end) })
}

/// Store a movement from a recording that starts on `initial` and ends on
/// `final_posture`. The reference trajectory covers the frames between
/// leaving the initial posture and reaching the final one, which is exactly
/// the span the session engine observes during monitoring; recordings that
/// never leave the initial posture keep their full span.
pub fn record_movement(
    name: &str,
    rec: &Recording,
    initial: &str,
    final_posture: &str,
    relevant_angles: &[String],
    components: Vec<KinematicComponent>,
    lib: &PostureLibrary,
) -> Result<Movement, MovementError> {
    for p in [initial, final_posture] {
        if lib.get(p).is_none() {
            return Err(PostureError::Unknown(p.to_string()).into());
        }
    }
    let basis = lib.basis();
    let matched = rec
        .frames()
        .iter()
        .map(|f| Ok(lib.classify(&descriptor(f, basis)?)?.map(|m| m.name)))
        .collect::<Result<Vec<Option<String>>, MovementError>>()?;
    let first = &matched[0];
    if first.as_deref() != Some(initial) {
        return Err(MovementError::Endpoint {
            which: "initial",
            expected: initial.to_string(),
            found: first.clone(),
        });
    }
    let last = &matched[matched.len() - 1];
    if last.as_deref() != Some(final_posture) {
        return Err(MovementError::Endpoint {
            which: "final",
            expected: final_posture.to_string(),
            found: last.clone(),
        });
    }
    let on_initial: Vec<bool> = matched.iter().map(|m| m.as_deref() == Some(initial)).collect();
    let on_final: Vec<bool> = matched.iter().map(|m| m.as_deref() == Some(final_posture)).collect();
    let frames = rec.frames();
    let reference = match observation_window(&on_initial, &on_final) {
        Some((s, e)) => trajectory_from_frames(&frames[s..=e], basis, relevant_angles)?,
        None => extract_trajectory(rec, basis, relevant_angles, rec.start(), rec.end())?,
    };
    let movement = Movement {
        name: name.to_string(),
        initial: initial.to_string(),
        final_posture: final_posture.to_string(),
        relevant_angles: relevant_angles.to_vec(),
        reference,
        components,
    };
    movement.validate()?;
    Ok(movement)
}

const REVERSE_SUFFIX: &str = "_rev";

/// The same movement performed backwards. Reversing twice restores the
/// original exactly, including the name.
pub fn reverse_movement(m: &Movement) -> Movement {
    let name = match m.name.strip_suffix(REVERSE_SUFFIX) {
        Some(base) => base.to_string(),
        None => format!("{}{REVERSE_SUFFIX}", m.name),
    };
    Movement {
        name,
        initial: m.final_posture.clone(),
        final_posture: m.initial.clone(),
        relevant_angles: m.relevant_angles.clone(),
        reference: m.reference.reversed(),
        components: m
            .components
            .iter()
            .map(|c| KinematicComponent {
                movement_type: c.movement_type.opposite(),
                ..c.clone()
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posture::PostureLibrary;
    use crate::skeleton::{synth_recording, BodyPose, LegPose, MotionScript};

    fn traj(values: &[&[f64]], dt: f64) -> Trajectory {
        let n = values[0].len();
        let times: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
        Trajectory::new(
            (0..values.len()).map(|i| format!("A{i}")).collect(),
            values.iter().map(|v| v.to_vec()).collect(),
            &times,
        )
        .unwrap()
    }

    #[test]
    fn identical_trajectories_score_one() {
        let t = traj(&[&[0.0, 10.0, 40.0, 41.0, 90.0]], 0.1);
        assert_eq!(trajectory_similarity(&t, &t).unwrap(), 1.0);
    }

    #[test]
    fn constant_offset_scores_linearly() {
        let a = traj(&[&[10.0; 5]], 0.1);
        let b = traj(&[&[40.0; 9]], 0.05);
        let s = trajectory_similarity(&a, &b).unwrap();
        assert!((s - (1.0 - 30.0 / 180.0)).abs() < 1e-12);
        assert!((s - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn angle_mismatch_is_an_error() {
        let a = traj(&[&[1.0, 2.0]], 0.1);
        let mut b = a.clone();
        b.angle_names = vec!["Other".into()];
        assert!(matches!(
            trajectory_similarity(&a, &b),
            Err(MovementError::AngleMismatch { .. })
        ));
    }

    /// Independent full-matrix DTW used as an oracle for the banded version.
    fn oracle_dtw(a: &[f64], b: &[f64], band: usize) -> f64 {
        let n = a.len();
        let mut d = vec![vec![(f64::INFINITY, usize::MAX); n]; n];
        for i in 0..n {
            for j in 0..n {
                if i.abs_diff(j) > band {
                    continue;
                }
                let c = (a[i] - b[j]).abs();
                if i == 0 && j == 0 {
                    d[i][j] = (c, 1);
                    continue;
                }
                let mut cands = vec![];
                if i > 0 && j > 0 {
                    cands.push(d[i - 1][j - 1]);
                }
                if i > 0 {
                    cands.push(d[i - 1][j]);
                }
                if j > 0 {
                    cands.push(d[i][j - 1]);
                }
                let best = cands
                    .into_iter()
                    .filter(|x| x.0.is_finite())
                    .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                if let Some(b) = best {
                    d[i][j] = (b.0 + c, b.1 + 1);
                }
            }
        }
        d[n - 1][n - 1].0 / d[n - 1][n - 1].1 as f64
    }

    #[test]
    fn banded_dtw_matches_full_matrix_oracle() {
        let a: Vec<f64> = (0..20).map(|i| (i as f64 * 0.4).sin() * 50.0).collect();
        let b: Vec<f64> = (0..20).map(|i| (i as f64 * 0.35 + 0.3).sin() * 45.0).collect();
        for band in [0, 2, 5, 19] {
            let (c, l) = banded_dtw(std::slice::from_ref(&a), std::slice::from_ref(&b), band);
            assert!((c / l as f64 - oracle_dtw(&a, &b, band)).abs() < 1e-12, "band {band}");
        }
    }

    #[test]
    fn resampled_frame_rate_stays_similar() {
        // Oracle: the same smooth curve sampled at 30 Hz and 17 Hz.
        let curve = |t: f64| 90.0 - 60.0 * (t * 1.3).cos();
        let fast: Vec<f64> = (0..=60).map(|i| curve(i as f64 / 30.0)).collect();
        let slow: Vec<f64> = (0..=34).map(|i| curve(i as f64 / 17.0)).collect();
        let a = traj(&[&fast], 1.0 / 30.0);
        let b = traj(&[&slow], 1.0 / 17.0);
        assert!(trajectory_similarity(&a, &b).unwrap() >= 0.99);
    }

    fn hip_flex_library() -> (PostureLibrary, BodyPose, BodyPose) {
        let basis = crate::posture::FeatureBasis::default_basis().clone();
        let stand = BodyPose::standing();
        let mut flex = stand;
        flex.left_leg = LegPose::raised(60.0, 20.0);
        let mut lib = PostureLibrary::new(basis);
        let f = |p: &BodyPose| SkeletonFrame::new(0.0, p.positions()).unwrap();
        lib.register("Stand", &[f(&stand)], 0.03).unwrap();
        lib.register("HipFlex", &[f(&flex)], 0.03).unwrap();
        (lib, stand, flex)
    }

    #[test]
    fn record_and_reverse() {
        let (lib, stand, flex) = hip_flex_library();
        let rec = synth_recording(&MotionScript::transition(&stand, &flex, 1.0, 2.0, 1.0), 0, 0.0).unwrap();
        let angles = suggest_relevant_angles(&rec, lib.basis(), 10.0).unwrap();
        assert_eq!(angles, vec!["HipL".to_string()]);
        let comps = vec![KinematicComponent::new("HipJoint", MovementType::Flexion, 60.0)];
        let m = record_movement("HipFlex60", &rec, "Stand", "HipFlex", &angles, comps, &lib).unwrap();
        assert!(m.reference.len() >= 2);
        // window excludes the holds
        assert!(m.reference.duration() < 2.0 + 1e-9);

        let r = reverse_movement(&m);
        assert_eq!(r.name, "HipFlex60_rev");
        assert_eq!((r.initial.as_str(), r.final_posture.as_str()), ("HipFlex", "Stand"));
        assert_eq!(r.components[0].movement_type, MovementType::Extension);
        assert_eq!(r.components[0].rom, 60.0);
        assert_eq!(reverse_movement(&r), m);
        assert!(trajectory_similarity(&m.reference, &r.reference).unwrap() < 1.0);
    }

    #[test]
    fn endpoint_errors_name_the_end() {
        let (lib, stand, flex) = hip_flex_library();
        let mut other = stand;
        other.trunk_lean = 40.0;
        other.left_arm = crate::skeleton::ArmPose::raised(170.0, 10.0);
        let comps = vec![KinematicComponent::new("HipJoint", MovementType::Flexion, 60.0)];
        let angles = vec!["HipL".to_string()];

        let bad_start = synth_recording(&MotionScript::transition(&other, &flex, 0.5, 1.0, 0.5), 0, 0.0).unwrap();
        let err = record_movement("m", &bad_start, "Stand", "HipFlex", &angles, comps.clone(), &lib).unwrap_err();
        assert!(matches!(err, MovementError::Endpoint { which: "initial", .. }));

        // ends on Stand instead of HipFlex
        let wrong_end = synth_recording(&MotionScript::transition(&flex, &stand, 0.5, 1.0, 0.5), 0, 0.0).unwrap();
        let err = record_movement("m", &wrong_end, "HipFlex", "HipFlex", &angles, comps.clone(), &lib).unwrap_err();
        assert!(matches!(err, MovementError::Endpoint { which: "final", found: Some(ref f), .. } if f == "Stand"));

        let err = record_movement("m", &wrong_end, "Nope", "Stand", &angles, comps, &lib).unwrap_err();
        assert_eq!(err, MovementError::Posture(PostureError::Unknown("Nope".into())));
    }

    #[test]
    fn extract_window_rules() {
        let stand = BodyPose::standing();
        let rec = synth_recording(&MotionScript::transition(&stand, &stand, 0.0, 1.0, 0.0), 0, 0.0).unwrap();
        let basis = crate::posture::FeatureBasis::default_basis();
        let names = vec!["KneeL".to_string(), "ElbowR".to_string()];
        let t = extract_trajectory(&rec, basis, &names, rec.start(), rec.end()).unwrap();
        assert_eq!(t.len(), rec.len());
        for s in &t.samples {
            assert!(s.iter().all(|&v| (v - s[0]).abs() < 1e-9));
        }
        assert!(matches!(
            extract_trajectory(&rec, basis, &names, rec.end() + 1.0, rec.end() + 2.0),
            Err(MovementError::Window { .. })
        ));
        assert!(matches!(
            extract_trajectory(&rec, basis, &names, 0.5, 0.51),
            Err(MovementError::TooFewSamples(_))
        ));
        assert!(matches!(
            extract_trajectory(&rec, basis, &["Tail".to_string()], 0.0, 1.0),
            Err(MovementError::UnknownAngle(_))
        ));
    }

    #[test]
    fn observation_window_rule() {
        let f = |s: &str| s.chars().map(|c| c == '1').collect::<Vec<_>>();
        assert_eq!(observation_window(&f("1100000"), &f("0000011")), Some((2, 5)));
        assert_eq!(observation_window(&f("1100"), &f("0011")), Some((1, 2)));
        assert_eq!(observation_window(&f("1111"), &f("0000")), None);
        assert_eq!(observation_window(&f("1101"), &f("1101")), Some((2, 3)));
    }

    #[test]
    fn movement_type_serde() {
        let c = KinematicComponent::new("HipJoint", MovementType::Other("Circumduction".into()), 30.0);
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(v["type"], "Circumduction");
        let back: KinematicComponent = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
    }
}
