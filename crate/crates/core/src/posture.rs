//! Posture descriptors (18 joint-relation bits + 12 limb angles), their
//! distance, and thresholded nearest-reference classification.

use std::collections::{BTreeMap, HashSet};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{joint_relation, limb_angle, AngleDef, RelationDef, SkeletonError, SkeletonFrame};

pub const RELATION_COUNT: usize = 18;
pub const ANGLE_COUNT: usize = 12;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_TAU: f64 = 0.10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PostureError {
    #[error("invalid feature basis: {0}")]
    InvalidBasis(String),
    #[error("invalid posture concept `{name}`: {reason}")]
    InvalidConcept { name: String, reason: String },
    #[error("posture library is empty")]
    EmptyLibrary,
    #[error("posture `{0}` already exists")]
    Duplicate(String),
    #[error("unknown posture `{0}`")]
    Unknown(String),
    #[error("no frames given for posture `{0}`")]
    NoFrames(String),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

/// Ordered feature definitions. Cardinalities are fixed at 18 and 12.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisDoc", into = "BasisDoc")]
pub struct FeatureBasis {
    relations: Vec<RelationDef>,
    angles: Vec<AngleDef>,
}

#[derive(Serialize, Deserialize)]
struct BasisDoc {
    relations: Vec<RelationDef>,
    angles: Vec<AngleDef>,
}

impl TryFrom<BasisDoc> for FeatureBasis {
    type Error = PostureError;
    fn try_from(d: BasisDoc) -> Result<Self, Self::Error> {
        FeatureBasis::new(d.relations, d.angles)
    }
}

impl From<FeatureBasis> for BasisDoc {
    fn from(b: FeatureBasis) -> Self {
        BasisDoc {
            relations: b.relations,
            angles: b.angles,
        }
    }
}

impl FeatureBasis {
    pub fn new(relations: Vec<RelationDef>, angles: Vec<AngleDef>) -> Result<Self, PostureError> {
        if relations.len() != RELATION_COUNT || angles.len() != ANGLE_COUNT {
            return Err(PostureError::InvalidBasis(format!(
                "expected {RELATION_COUNT} relations and {ANGLE_COUNT} angles, got {} and {}",
                relations.len(),
                angles.len()
            )));
        }
        let mut names = HashSet::new();
        for r in &relations {
            if !r.is_well_formed() {
                return Err(PostureError::InvalidBasis(format!(
                    "relation `{}` compares a joint with itself",
                    r.name
                )));
            }
            if !names.insert(r.name.as_str()) {
                return Err(PostureError::InvalidBasis(format!(
                    "duplicate feature name `{}`",
                    r.name
                )));
            }
        }
        for a in &angles {
            if !a.is_well_formed() {
                return Err(PostureError::InvalidBasis(format!(
                    "angle `{}` needs three distinct joints",
                    a.name
                )));
            }
            if !names.insert(a.name.as_str()) {
                return Err(PostureError::InvalidBasis(format!(
                    "duplicate feature name `{}`",
                    a.name
                )));
            }
        }
        Ok(FeatureBasis { relations, angles })
    }

    /// The basis shipped in `data/basis.json`.
    pub fn default_basis() -> &'static FeatureBasis {
        static BASIS: OnceLock<FeatureBasis> = OnceLock::new();
        BASIS.get_or_init(|| serde_json::from_str(include_str!("../data/basis.json")).expect("bundled basis is valid"))
    }

    pub fn relations(&self) -> &[RelationDef] {
        &self.relations
    }

    pub fn angles(&self) -> &[AngleDef] {
        &self.angles
    }

    pub fn angle_index(&self, name: &str) -> Option<usize> {
        self.angles.iter().position(|a| a.name == name)
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r.name == name)
    }

    pub fn angle_def(&self, name: &str) -> Option<&AngleDef> {
        self.angles.iter().find(|a| a.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostureDescriptor {
    pub bits: [bool; RELATION_COUNT],
    pub angles: [f64; ANGLE_COUNT],
}

impl PostureDescriptor {
    pub fn is_valid(&self) -> bool {
        self.angles.iter().all(|a| (0.0..=180.0).contains(a))
    }
}

pub fn descriptor(frame: &SkeletonFrame, basis: &FeatureBasis) -> Result<PostureDescriptor, PostureError> {
    let mut bits = [false; RELATION_COUNT];
    for (b, r) in bits.iter_mut().zip(&basis.relations) {
        *b = joint_relation(frame, r);
    }
    let mut angles = [0.0; ANGLE_COUNT];
    for (a, def) in angles.iter_mut().zip(&basis.angles) {
        *a = limb_angle(frame, def)?;
    }
    Ok(PostureDescriptor { bits, angles })
}

/// `alpha * hamming/18 + (1 - alpha) * mean|Δangle|/180`, in `[0, 1]`.
pub fn descriptor_distance(a: &PostureDescriptor, b: &PostureDescriptor, alpha: f64) -> f64 {
    let hamming = a.bits.iter().zip(&b.bits).filter(|(x, y)| x != y).count() as f64;
    let angular: f64 = a.angles.iter().zip(&b.angles).map(|(x, y)| (x - y).abs()).sum();
    alpha * hamming / RELATION_COUNT as f64 + (1.0 - alpha) * (angular / ANGLE_COUNT as f64) / 180.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostureConcept {
    pub name: String,
    pub reference: PostureDescriptor,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl PostureConcept {
    pub fn validate(&self) -> Result<(), PostureError> {
        let bad = |reason: &str| {
            Err(PostureError::InvalidConcept {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        if self.name.trim().is_empty() {
            return bad("empty name");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("threshold must be positive");
        }
        if !self.reference.is_valid() {
            return bad("reference angles must lie in [0, 180]");
        }
        Ok(())
    }
}

/// Mean angles and majority bits (ties set the bit) over `frames`.
pub fn reference_from_frames(
    frames: &[SkeletonFrame],
    basis: &FeatureBasis,
) -> Result<PostureDescriptor, PostureError> {
    let descs = frames
        .iter()
        .map(|f| descriptor(f, basis))
        .collect::<Result<Vec<_>, _>>()?;
    let n = descs.len();
    let mut bits = [false; RELATION_COUNT];
    for (i, b) in bits.iter_mut().enumerate() {
        let ones = descs.iter().filter(|d| d.bits[i]).count();
        *b = 2 * ones >= n;
    }
    let mut angles = [0.0; ANGLE_COUNT];
    for (j, a) in angles.iter_mut().enumerate() {
        *a = descs.iter().map(|d| d.angles[j]).sum::<f64>() / n as f64;
    }
    Ok(PostureDescriptor { bits, angles })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostureMatch {
    pub name: String,
    pub distance: f64,
}

/// Annotated reference postures over one basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LibraryDoc", into = "LibraryDoc")]
pub struct PostureLibrary {
    basis: FeatureBasis,
    alpha: f64,
    concepts: BTreeMap<String, PostureConcept>,
}

#[derive(Serialize, Deserialize)]
struct LibraryDoc {
    basis: FeatureBasis,
    #[serde(default = "default_alpha")]
    alpha: f64,
    concepts: Vec<PostureConcept>,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl TryFrom<LibraryDoc> for PostureLibrary {
    type Error = PostureError;
    fn try_from(d: LibraryDoc) -> Result<Self, Self::Error> {
        let mut lib = PostureLibrary::new(d.basis).with_alpha(d.alpha);
        for c in d.concepts {
            lib.insert(c)?;
        }
        Ok(lib)
    }
}

impl From<PostureLibrary> for LibraryDoc {
    fn from(l: PostureLibrary) -> Self {
        LibraryDoc {
            basis: l.basis,
            alpha: l.alpha,
            concepts: l.concepts.into_values().collect(),
        }
    }
}

impl PostureLibrary {
    pub fn new(basis: FeatureBasis) -> Self {
        PostureLibrary {
            basis,
            alpha: DEFAULT_ALPHA,
            concepts: BTreeMap::new(),
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha.clamp(0.0, 1.0);
        self
    }

    pub fn basis(&self) -> &FeatureBasis {
        &self.basis
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&PostureConcept> {
        self.concepts.get(name)
    }

    pub fn concepts(&self) -> impl Iterator<Item = &PostureConcept> {
        self.concepts.values()
    }

    pub fn insert(&mut self, concept: PostureConcept) -> Result<(), PostureError> {
        concept.validate()?;
        if self.concepts.contains_key(&concept.name) {
            return Err(PostureError::Duplicate(concept.name));
        }
        self.concepts.insert(concept.name.clone(), concept);
        Ok(())
    }

    /// Record a new posture from sample frames of the therapist holding it.
    pub fn register(
        &mut self,
        name: &str,
        frames: &[SkeletonFrame],
        tau: f64,
    ) -> Result<&PostureConcept, PostureError> {
        if self.concepts.contains_key(name) {
            return Err(PostureError::Duplicate(name.to_string()));
        }
        let concept = register_posture(name, frames, &self.basis, tau)?;
        self.insert(concept)?;
        Ok(&self.concepts[name])
    }

    pub fn distance_to(&self, d: &PostureDescriptor, name: &str) -> Result<f64, PostureError> {
        let c = self.get(name).ok_or_else(|| PostureError::Unknown(name.to_string()))?;
        Ok(descriptor_distance(d, &c.reference, self.alpha))
    }

    pub fn classify(&self, d: &PostureDescriptor) -> Result<Option<PostureMatch>, PostureError> {
        classify_posture(d, self, self.alpha)
    }
}

/// Build a concept without a library; duplicate detection is the library's job.
pub fn register_posture(
    name: &str,
    frames: &[SkeletonFrame],
    basis: &FeatureBasis,
    tau: f64,
) -> Result<PostureConcept, PostureError> {
    if frames.is_empty() {
        return Err(PostureError::NoFrames(name.to_string()));
    }
    let concept = PostureConcept {
        name: name.to_string(),
        reference: reference_from_frames(frames, basis)?,
        tau,
    };
    concept.validate()?;
    Ok(concept)
}

/// Nearest concept among those strictly within their own threshold; ties go
/// to the lexicographically smallest name. `None` when nothing qualifies.
pub fn classify_posture(
    d: &PostureDescriptor,
    lib: &PostureLibrary,
    alpha: f64,
) -> Result<Option<PostureMatch>, PostureError> {
    if lib.is_empty() {
        return Err(PostureError::EmptyLibrary);
    }
    let mut best: Option<PostureMatch> = None;
    // BTreeMap iterates by name, so a strict `<` keeps the smallest name on ties.
    for c in lib.concepts() {
        let dist = descriptor_distance(d, &c.reference, alpha);
        if dist < c.tau && best.as_ref().is_none_or(|b| dist < b.distance) {
            best = Some(PostureMatch {
                name: c.name.clone(),
                distance: dist,
            });
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{ArmPose, BodyPose, JointId, Vec3};

    fn frame(pose: &BodyPose) -> SkeletonFrame {
        SkeletonFrame::new(0.0, pose.positions()).unwrap()
    }

    fn desc(bits: &[usize], angles: [f64; ANGLE_COUNT]) -> PostureDescriptor {
        let mut b = [false; RELATION_COUNT];
        for &i in bits {
            b[i] = true;
        }
        PostureDescriptor { bits: b, angles }
    }

    #[test]
    fn default_basis_has_thirty_features() {
        let b = FeatureBasis::default_basis();
        assert_eq!(b.relations().len(), 18);
        assert_eq!(b.angles().len(), 12);
    }

    #[test]
    fn basis_rejects_wrong_cardinality_and_duplicates() {
        let b = FeatureBasis::default_basis();
        let short = b.relations()[..17].to_vec();
        assert!(FeatureBasis::new(short, b.angles().to_vec()).is_err());
        let mut dup = b.relations().to_vec();
        dup[1].name = dup[0].name.clone();
        assert!(matches!(
            FeatureBasis::new(dup, b.angles().to_vec()),
            Err(PostureError::InvalidBasis(_))
        ));
    }

    #[test]
    fn t_pose_has_straight_elbows() {
        let mut p = BodyPose::standing();
        p.left_arm = ArmPose::raised(90.0, 90.0);
        p.right_arm = ArmPose::raised(90.0, 90.0);
        let basis = FeatureBasis::default_basis();
        let d = descriptor(&frame(&p), basis).unwrap();
        for name in ["ElbowL", "ElbowR"] {
            let i = basis.angle_index(name).unwrap();
            assert!((d.angles[i] - 180.0).abs() < 1e-6);
        }
        assert_eq!(d, descriptor(&frame(&p), basis).unwrap());
    }

    #[test]
    fn hand_above_head_sets_bit() {
        let mut pose = BodyPose::standing().positions();
        pose[JointId::HandLeft.ordinal()] = Vec3::new(0.2, 2.0, 2.6);
        let f = SkeletonFrame::new(0.0, pose).unwrap();
        let basis = FeatureBasis::default_basis();
        let d = descriptor(&f, basis).unwrap();
        assert!(d.bits[basis.relation_index("HandL_above_Head").unwrap()]);
    }

    #[test]
    fn degenerate_angle_names_offender() {
        let mut pose = BodyPose::standing().positions();
        pose[JointId::HandRight.ordinal()] = pose[JointId::WristRight.ordinal()];
        let f = SkeletonFrame::new(0.0, pose).unwrap();
        let err = descriptor(&f, FeatureBasis::default_basis()).unwrap_err();
        assert_eq!(err, PostureError::Skeleton(SkeletonError::Degenerate("WristR".into())));
    }

    #[test]
    fn distance_examples() {
        let a = desc(&[0, 3], [90.0; ANGLE_COUNT]);
        assert_eq!(descriptor_distance(&a, &a, 0.5), 0.0);
        let b = desc(&[0, 3, 7], [90.0; ANGLE_COUNT]);
        assert!((descriptor_distance(&a, &b, 0.5) - 0.5 / 18.0).abs() < 1e-12);
        assert!((descriptor_distance(&a, &b, 0.5) - 0.027778).abs() < 1e-6);
        let c = desc(&[0, 3], [108.0; ANGLE_COUNT]);
        assert!((descriptor_distance(&a, &c, 0.5) - 0.05).abs() < 1e-12);
    }

    fn lib_with(entries: &[(&str, PostureDescriptor, f64)]) -> PostureLibrary {
        let mut lib = PostureLibrary::new(FeatureBasis::default_basis().clone());
        for (name, d, tau) in entries {
            lib.insert(PostureConcept {
                name: name.to_string(),
                reference: d.clone(),
                tau: *tau,
            })
            .unwrap();
        }
        lib
    }

    #[test]
    fn classify_examples() {
        let arms_up = desc(&[0, 1], [170.0; ANGLE_COUNT]);
        let stand = desc(&[], [10.0; ANGLE_COUNT]);
        let lib = lib_with(&[("ArmsUp", arms_up.clone(), 0.1), ("Stand", stand, 0.1)]);
        assert_eq!(
            classify_posture(&arms_up, &lib, 0.5).unwrap(),
            Some(PostureMatch {
                name: "ArmsUp".into(),
                distance: 0.0
            })
        );
        // 0.2 from both
        let far = desc(&[0, 1], [98.0; ANGLE_COUNT]);
        let lib2 = lib_with(&[
            ("A", desc(&[0, 1], [170.0; ANGLE_COUNT]), 0.1),
            ("B", desc(&[0, 1], [26.0; ANGLE_COUNT]), 0.1),
        ]);
        assert!((descriptor_distance(&far, &lib2.get("A").unwrap().reference, 0.5) - 0.2).abs() < 1e-12);
        assert_eq!(classify_posture(&far, &lib2, 0.5).unwrap(), None);
        assert_eq!(
            classify_posture(&far, &PostureLibrary::new(FeatureBasis::default_basis().clone()), 0.5),
            Err(PostureError::EmptyLibrary)
        );
    }

    #[test]
    fn ties_break_by_name_exhaustively() {
        // Brute-force oracle over both insertion orders and name orders:
        // equal distances must always resolve to the smaller name.
        let probe = desc(&[], [100.0; ANGLE_COUNT]);
        let x = desc(&[], [118.0; ANGLE_COUNT]);
        let y = desc(&[], [82.0; ANGLE_COUNT]);
        for (n1, n2) in [("A", "B"), ("B", "A")] {
            for swap in [false, true] {
                let (first, second) = if swap {
                    ((n2, &y), (n1, &x))
                } else {
                    ((n1, &x), (n2, &y))
                };
                let lib = lib_with(&[(first.0, first.1.clone(), 0.1), (second.0, second.1.clone(), 0.1)]);
                let m = classify_posture(&probe, &lib, 0.5).unwrap().unwrap();
                assert_eq!(m.name, "A");
                assert!((m.distance - 0.05).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn register_means_and_majority() {
        let basis = FeatureBasis::default_basis();
        let f = frame(&BodyPose::standing());
        let single = register_posture("Stand", std::slice::from_ref(&f), basis, 0.1).unwrap();
        assert_eq!(single.reference, descriptor(&f, basis).unwrap());

        let ki = basis.angle_index("ElbowL").unwrap();
        let frames: Vec<SkeletonFrame> = [10.0, 20.0, 30.0]
            .iter()
            .map(|&bend| {
                let mut p = BodyPose::standing();
                p.left_arm.elbow_flexion = 180.0 - bend;
                frame(&p)
            })
            .collect();
        let c = register_posture("Bent", &frames, basis, 0.1).unwrap();
        assert!((c.reference.angles[ki] - 20.0).abs() < 1e-9);

        // one frame with the hand above the head, one without: tie sets the bit
        let up = {
            let mut p = BodyPose::standing();
            p.left_arm = ArmPose::raised(175.0, 10.0);
            frame(&p)
        };
        let bi = basis.relation_index("HandL_above_Head").unwrap();
        let c = register_posture("Half", &[f.clone(), up], basis, 0.1).unwrap();
        assert!(c.reference.bits[bi]);

        assert!(matches!(
            register_posture("None", &[], basis, 0.1),
            Err(PostureError::NoFrames(_))
        ));
        let mut lib = PostureLibrary::new(basis.clone());
        lib.register("Stand", std::slice::from_ref(&f), 0.1).unwrap();
        assert_eq!(
            lib.register("Stand", &[f], 0.1).unwrap_err(),
            PostureError::Duplicate("Stand".into())
        );
    }

    #[test]
    fn library_document_round_trip() {
        let lib = lib_with(&[("Stand", desc(&[2], [45.0; ANGLE_COUNT]), 0.07)]);
        let text = serde_json::to_string(&lib).unwrap();
        let back: PostureLibrary = serde_json::from_str(&text).unwrap();
        assert_eq!(back, lib);
    }
}
