//! Synthetic content library used by tests, benchmarks and `fixtures init`:
//! postures scripted with the parametric body model, movements recorded from
//! noiseless transitions, and exercises chaining them.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::knowledge::{Exploration, PatientRecord, Side, Surgery, VasReport};
use crate::movement::{
    angle_for_joint, record_movement, reverse_movement, suggest_relevant_angles, KinematicComponent, Movement,
    MovementError, MovementType,
};
use crate::posture::{FeatureBasis, PostureLibrary};
use crate::session::{ContentLibrary, Exercise, SessionError, SessionPlan};
use crate::skeleton::{synth_recording, ArmPose, BodyPose, JointId, Keyframe, LegPose, MotionScript, Recording};

/// Posture threshold used for every fixture posture.
pub const FIXTURE_TAU: f64 = 0.06;
/// Seconds each posture is held in recordings and playbacks.
pub const HOLD: f64 = 1.5;
/// Seconds of each scripted transition.
pub const TRANSIT: f64 = 2.0;
/// Relevant angles must change by more than this many degrees.
pub const RELEVANCE_THRESHOLD: f64 = 10.0;

fn leg(elevation: f64, plane: f64, knee_flexion: f64) -> LegPose {
    LegPose {
        elevation,
        plane,
        knee_flexion,
    }
}

fn arm(elevation: f64, plane: f64, elbow_flexion: f64) -> ArmPose {
    ArmPose {
        elevation,
        plane,
        elbow_flexion,
        wrist_flexion: 0.0,
    }
}

fn with(f: impl FnOnce(&mut BodyPose)) -> BodyPose {
    let mut p = BodyPose::standing();
    f(&mut p);
    p
}

/// Named fixture postures.
pub fn posture_poses() -> Vec<(&'static str, BodyPose)> {
    let flex40 = leg(40.0, -12.0, 0.0);
    let flex80 = leg(80.0, -12.0, 0.0);
    let abd20 = leg(20.0, 80.0, 0.0);
    let curl = leg(12.0, 30.0, 110.0);
    let fwd = arm(100.0, 20.0, 0.0);
    let side = arm(100.0, 105.0, 0.0);
    let up = arm(170.0, 30.0, 0.0);
    let biceps = arm(10.0, 15.0, 100.0);
    let cross = arm(60.0, -30.0, 0.0);
    // forward reach that stays level while the trunk leans
    let lean_fwd = arm(130.0, 20.0, 0.0);
    vec![
        ("Stand", BodyPose::standing()),
        ("HipFlex40L", with(|p| p.left_leg = flex40)),
        ("HipFlex40R", with(|p| p.right_leg = flex40)),
        ("HipFlex80L", with(|p| p.left_leg = flex80)),
        ("HipFlex80R", with(|p| p.right_leg = flex80)),
        ("HipAbd20L", with(|p| p.left_leg = abd20)),
        ("HipAbd20R", with(|p| p.right_leg = abd20)),
        ("HipExt15L", with(|p| p.left_leg = leg(15.0, 205.0, 0.0))),
        ("HipExt24R", with(|p| p.right_leg = leg(24.0, 205.0, 0.0))),
        ("KneeCurlL", with(|p| p.left_leg = curl)),
        ("KneeCurlR", with(|p| p.right_leg = curl)),
        (
            "SoftSquat",
            with(|p| {
                p.trunk_lean = 30.0;
                p.left_leg = leg(30.0, -12.0, 40.0);
                p.right_leg = leg(30.0, -12.0, 40.0);
            }),
        ),
        ("ArmFwd100L", with(|p| p.left_arm = fwd)),
        ("ArmFwd100R", with(|p| p.right_arm = fwd)),
        ("ArmSide100L", with(|p| p.left_arm = side)),
        ("ArmSide100R", with(|p| p.right_arm = side)),
        ("ArmUp170L", with(|p| p.left_arm = up)),
        ("ArmUp170R", with(|p| p.right_arm = up)),
        ("ElbowFlex100L", with(|p| p.left_arm = biceps)),
        ("ElbowFlex100R", with(|p| p.right_arm = biceps)),
        (
            "BothArmsUp",
            with(|p| {
                p.left_arm = up;
                p.right_arm = up;
            }),
        ),
        (
            "BothArmsSide",
            with(|p| {
                p.left_arm = side;
                p.right_arm = side;
            }),
        ),
        (
            "BothArmsFwd",
            with(|p| {
                p.left_arm = fwd;
                p.right_arm = fwd;
            }),
        ),
        (
            "ArmsCrossed",
            with(|p| {
                p.left_arm = cross;
                p.right_arm = cross;
            }),
        ),
        ("TrunkLean30", with(|p| p.trunk_lean = 30.0)),
        (
            "LeanArmsFwd",
            with(|p| {
                p.trunk_lean = 30.0;
                p.left_arm = lean_fwd;
                p.right_arm = lean_fwd;
            }),
        ),
        (
            "MarchL",
            with(|p| {
                p.left_leg = flex40;
                p.right_arm = fwd;
            }),
        ),
        (
            "MarchR",
            with(|p| {
                p.right_leg = flex40;
                p.left_arm = fwd;
            }),
        ),
    ]
}

pub fn pose(name: &str) -> Option<BodyPose> {
    posture_poses().into_iter().find(|(n, _)| *n == name).map(|(_, p)| p)
}

type Comp = (&'static str, JointId, MovementType, f64);

fn comp(location: &str, joint: JointId, movement_type: MovementType, rom: f64) -> KinematicComponent {
    KinematicComponent {
        location: location.to_string(),
        joint: Some(joint),
        movement_type,
        rom,
    }
}

/// Base movements as (name, initial, final, components). Reversals are added
/// by [`content_library`].
pub fn movement_specs() -> Vec<(&'static str, &'static str, &'static str, Vec<Comp>)> {
    use JointId::*;
    use MovementType::*;
    let hip = "HipJoint";
    let knee = "KneeJoint";
    let sh = "ShoulderJoint";
    vec![
        ("HipFlex40L", "Stand", "HipFlex40L", vec![(hip, HipLeft, Flexion, 40.0)]),
        (
            "HipFlex40R",
            "Stand",
            "HipFlex40R",
            vec![(hip, HipRight, Flexion, 40.0)],
        ),
        ("HipFlex80L", "Stand", "HipFlex80L", vec![(hip, HipLeft, Flexion, 80.0)]),
        (
            "HipFlex80R",
            "Stand",
            "HipFlex80R",
            vec![(hip, HipRight, Flexion, 80.0)],
        ),
        ("HipAbd20L", "Stand", "HipAbd20L", vec![(hip, HipLeft, Abduction, 20.0)]),
        (
            "HipAbd20R",
            "Stand",
            "HipAbd20R",
            vec![(hip, HipRight, Abduction, 20.0)],
        ),
        ("HipExt15L", "Stand", "HipExt15L", vec![(hip, HipLeft, Extension, 15.0)]),
        (
            "HipExt24R",
            "Stand",
            "HipExt24R",
            vec![(hip, HipRight, Extension, 24.0)],
        ),
        (
            "KneeCurlL",
            "Stand",
            "KneeCurlL",
            vec![(knee, KneeLeft, Flexion, 110.0)],
        ),
        (
            "KneeCurlR",
            "Stand",
            "KneeCurlR",
            vec![(knee, KneeRight, Flexion, 110.0)],
        ),
        (
            "SoftSquat",
            "Stand",
            "SoftSquat",
            vec![
                (hip, HipLeft, Flexion, 30.0),
                (hip, HipRight, Flexion, 30.0),
                (knee, KneeLeft, Flexion, 40.0),
                (knee, KneeRight, Flexion, 40.0),
            ],
        ),
        (
            "ArmFwd100L",
            "Stand",
            "ArmFwd100L",
            vec![(sh, ShoulderLeft, Flexion, 100.0)],
        ),
        (
            "ArmFwd100R",
            "Stand",
            "ArmFwd100R",
            vec![(sh, ShoulderRight, Flexion, 100.0)],
        ),
        (
            "ArmSide100L",
            "Stand",
            "ArmSide100L",
            vec![(sh, ShoulderLeft, Abduction, 100.0)],
        ),
        (
            "ArmSide100R",
            "Stand",
            "ArmSide100R",
            vec![(sh, ShoulderRight, Abduction, 100.0)],
        ),
        (
            "ArmUp170L",
            "Stand",
            "ArmUp170L",
            vec![(sh, ShoulderLeft, Flexion, 170.0)],
        ),
        (
            "ArmUp170R",
            "Stand",
            "ArmUp170R",
            vec![(sh, ShoulderRight, Flexion, 170.0)],
        ),
        (
            "ArmFwdToUpR",
            "ArmFwd100R",
            "ArmUp170R",
            vec![(sh, ShoulderRight, Flexion, 70.0)],
        ),
        (
            "ElbowFlex100L",
            "Stand",
            "ElbowFlex100L",
            vec![("ElbowJoint", ElbowLeft, Flexion, 100.0)],
        ),
        (
            "ElbowFlex100R",
            "Stand",
            "ElbowFlex100R",
            vec![("ElbowJoint", ElbowRight, Flexion, 100.0)],
        ),
        (
            "BothArmsUp",
            "Stand",
            "BothArmsUp",
            vec![(sh, ShoulderLeft, Flexion, 170.0), (sh, ShoulderRight, Flexion, 170.0)],
        ),
        (
            "BothArmsSide",
            "Stand",
            "BothArmsSide",
            vec![
                (sh, ShoulderLeft, Abduction, 100.0),
                (sh, ShoulderRight, Abduction, 100.0),
            ],
        ),
        (
            "BothArmsFwd",
            "Stand",
            "BothArmsFwd",
            vec![(sh, ShoulderLeft, Flexion, 100.0), (sh, ShoulderRight, Flexion, 100.0)],
        ),
        (
            "ArmsCrossed",
            "Stand",
            "ArmsCrossed",
            vec![
                (sh, ShoulderLeft, Adduction, 60.0),
                (sh, ShoulderRight, Adduction, 60.0),
            ],
        ),
        (
            "TrunkLean30",
            "Stand",
            "TrunkLean30",
            vec![("Trunk", Spine, Flexion, 30.0)],
        ),
        (
            "MarchL",
            "Stand",
            "MarchL",
            vec![(hip, HipLeft, Flexion, 40.0), (sh, ShoulderRight, Flexion, 100.0)],
        ),
        (
            "MarchR",
            "Stand",
            "MarchR",
            vec![(hip, HipRight, Flexion, 40.0), (sh, ShoulderLeft, Flexion, 100.0)],
        ),
    ]
}

/// Exercises as (name, description, movements, default series, default reps).
pub fn exercise_specs() -> Vec<(&'static str, &'static str, Vec<&'static str>, u32, u32)> {
    vec![
        (
            "HipFlexion40",
            "Standing left hip flexion to 40 degrees",
            vec!["HipFlex40L"],
            2,
            5,
        ),
        (
            "HipAbduction20",
            "Standing left hip abduction to 20 degrees",
            vec!["HipAbd20L"],
            2,
            5,
        ),
        (
            "HipExtension15",
            "Standing left hip extension to 15 degrees",
            vec!["HipExt15L"],
            2,
            5,
        ),
        (
            "SoftSquat",
            "Shallow squat with forward trunk lean",
            vec!["SoftSquat"],
            2,
            5,
        ),
        (
            "HipFlexion80",
            "Standing left hip flexion to 80 degrees",
            vec!["HipFlex80L"],
            2,
            5,
        ),
        (
            "HipExtension24",
            "Standing right hip extension to 24 degrees",
            vec!["HipExt24R"],
            2,
            5,
        ),
        (
            "KneeCurl",
            "Standing left hamstring curl",
            vec!["KneeCurlL", "KneeCurlL_rev"],
            2,
            8,
        ),
        (
            "FrontRaise",
            "Left arm front raise",
            vec!["ArmFwd100L", "ArmFwd100L_rev"],
            2,
            8,
        ),
        (
            "LateralRaise",
            "Right arm lateral raise",
            vec!["ArmSide100R", "ArmSide100R_rev"],
            2,
            8,
        ),
        (
            "OverheadReach",
            "Right arm forward, then overhead, then down",
            vec!["ArmFwd100R", "ArmFwdToUpR", "ArmUp170R_rev"],
            2,
            6,
        ),
        (
            "BicepsCurl",
            "Left elbow curl",
            vec!["ElbowFlex100L", "ElbowFlex100L_rev"],
            3,
            10,
        ),
        (
            "TrunkFlexion",
            "Forward trunk lean",
            vec!["TrunkLean30", "TrunkLean30_rev"],
            2,
            6,
        ),
        (
            "Marching",
            "Alternating marching with opposite arm swing",
            vec!["MarchL", "MarchL_rev", "MarchR", "MarchR_rev"],
            2,
            6,
        ),
        (
            "ArmsOverhead",
            "Both arms overhead",
            vec!["BothArmsUp", "BothArmsUp_rev"],
            2,
            8,
        ),
        (
            "TPose",
            "Both arms out to the side",
            vec!["BothArmsSide", "BothArmsSide_rev"],
            2,
            8,
        ),
        (
            "CrossReach",
            "Reach across the body with both arms",
            vec!["ArmsCrossed", "ArmsCrossed_rev"],
            2,
            8,
        ),
    ]
}

/// Noiseless recording of one transition with holds at both ends.
pub fn transition_recording(from: &BodyPose, to: &BodyPose) -> Result<Recording, MovementError> {
    Ok(synth_recording(
        &MotionScript::transition(from, to, HOLD, TRANSIT, HOLD),
        0,
        0.0,
    )?)
}

pub fn posture_library() -> PostureLibrary {
    let basis = FeatureBasis::default_basis().clone();
    let mut lib = PostureLibrary::new(basis);
    for (name, pose) in posture_poses() {
        let frame = crate::skeleton::SkeletonFrame::new(0.0, pose.positions()).expect("finite pose");
        lib.register(name, &[frame], FIXTURE_TAU)
            .expect("fixture postures are valid");
    }
    lib
}

/// Record one base movement from its defining transition.
pub fn record_fixture_movement(
    name: &str,
    initial: &str,
    final_posture: &str,
    components: Vec<KinematicComponent>,
    postures: &PostureLibrary,
) -> Result<Movement, MovementError> {
    let missing = |p: &str| MovementError::Invalid(format!("no fixture pose `{p}`"));
    let from = pose(initial).ok_or_else(|| missing(initial))?;
    let to = pose(final_posture).ok_or_else(|| missing(final_posture))?;
    let rec = transition_recording(&from, &to)?;
    let basis = postures.basis();
    let suggested = suggest_relevant_angles(&rec, basis, RELEVANCE_THRESHOLD)?;
    let angles: Vec<String> = basis
        .angles()
        .iter()
        .map(|a| a.name.clone())
        .filter(|a| {
            suggested.contains(a)
                || components
                    .iter()
                    .any(|c| c.joint.and_then(angle_for_joint) == Some(a.as_str()))
        })
        .collect();
    record_movement(name, &rec, initial, final_posture, &angles, components, postures)
}

/// The complete fixture library: postures, every base movement and its
/// reversal, and the exercises.
pub fn content_library() -> Result<ContentLibrary, SessionError> {
    let mut content = ContentLibrary::new(posture_library());
    for (name, a, b, comps) in movement_specs() {
        let comps = comps.into_iter().map(|(l, j, t, r)| comp(l, j, t, r)).collect();
        let m = record_fixture_movement(name, a, b, comps, &content.postures)?;
        let r = reverse_movement(&m);
        content.add_movement(m)?;
        content.add_movement(r)?;
    }
    for (name, description, movements, series, reps) in exercise_specs() {
        content.add_exercise(Exercise {
            name: name.to_string(),
            description: description.to_string(),
            movements: movements.into_iter().map(String::from).collect(),
            default_series: series,
            default_reps: reps,
        })?;
    }
    Ok(content)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaybackOptions {
    pub seed: u64,
    pub noise_sigma: f64,
    /// Each hold and transit lasts its nominal time scaled by a factor drawn
    /// uniformly from `[1 - time_warp, 1 + time_warp]`.
    pub time_warp: f64,
}

impl PlaybackOptions {
    pub fn exact() -> Self {
        PlaybackOptions {
            seed: 0,
            noise_sigma: 0.0,
            time_warp: 0.0,
        }
    }
}

/// Scripted performance of a plan: every movement of every rep with holds,
/// plus unscored returns to an exercise's start between reps when it does
/// not end where it begins.
pub fn plan_playback(
    content: &ContentLibrary,
    plan: &SessionPlan,
    opts: &PlaybackOptions,
) -> Result<Recording, SessionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut warp = |d: f64| {
        if opts.time_warp > 0.0 {
            d * rng.random_range(1.0 - opts.time_warp..=1.0 + opts.time_warp)
        } else {
            d
        }
    };
    let lookup = |name: &str| {
        pose(name).ok_or_else(|| SessionError::Dangling {
            kind: "fixture pose",
            name: name.to_string(),
        })
    };
    let mut keys: Vec<Keyframe> = Vec::new();
    let mut t = 0.0;
    let mut current: Option<BodyPose> = None;
    let go_to = |keys: &mut Vec<Keyframe>, t: &mut f64, to: BodyPose, transit: f64, hold: f64| {
        let from = keys.last().map(|k| match k.pose {
            crate::skeleton::KeyPose::Body(b) => b,
            crate::skeleton::KeyPose::Joints(_) => unreachable!(),
        });
        match from {
            None => {
                keys.push(Keyframe::body(*t, to));
            }
            Some(from) => {
                let script = MotionScript::transition(&from, &to, 0.0, transit, 0.0);
                for k in script.keyframes.into_iter().skip(1) {
                    keys.push(Keyframe { t: *t + k.t, ..k });
                }
                *t += transit;
            }
        }
        *t += hold;
        keys.push(Keyframe::body(*t, to));
    };
    for item in &plan.exercises {
        let movements = content.exercise_movements(&item.exercise)?;
        let start = lookup(&movements[0].initial)?;
        for s in 0..item.series {
            for _ in 0..item.reps {
                if current != Some(start) {
                    let (tr, h) = (warp(TRANSIT), warp(HOLD));
                    go_to(&mut keys, &mut t, start, tr, h);
                }
                for m in &movements {
                    let to = lookup(&m.final_posture)?;
                    let (tr, h) = (warp(TRANSIT), warp(HOLD));
                    go_to(&mut keys, &mut t, to, tr, h);
                }
                current = Some(lookup(&movements[movements.len() - 1].final_posture)?);
            }
            if s + 1 < item.series && plan.rest_between_series > 0.0 {
                if let Some(p) = current {
                    // the initial posture has to be held again once the rest is over
                    t += plan.rest_between_series + warp(HOLD);
                    keys.push(Keyframe::body(t, p));
                }
            }
        }
    }
    keys.dedup_by(|b, a| a.t == b.t);
    synth_recording(&MotionScript::new(keys), opts.seed, opts.noise_sigma).map_err(|e| SessionError::Movement(e.into()))
}

/// Patient three weeks after a left total hip replacement, still in the
/// first phase of the THR protocol.
pub fn john() -> PatientRecord {
    let d = |m, day| NaiveDate::from_ymd_opt(2024, m, day).expect("valid date");
    PatientRecord {
        id: "john".into(),
        name: "John Doe".into(),
        personal_data: "68 years, retired".into(),
        family_data: "Lives with spouse".into(),
        symptoms: vec!["Hip pain when walking".into()],
        diagnoses: vec!["Left hip osteoarthritis".into()],
        surgeries: vec![Surgery {
            label: "Total hip replacement".into(),
            date: d(1, 10),
            side: Some(Side::Left),
        }],
        goals: "Walk without crutches".into(),
        explorations: vec![Exploration {
            date: d(2, 1),
            location: "HipJoint".into(),
            side: Side::Left,
            movement_type: MovementType::Flexion,
            rom: 48.0,
        }],
        vas_reports: vec![VasReport {
            date: d(2, 1),
            value: 4.0,
        }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posture::descriptor;
    use crate::skeleton::SkeletonFrame;

    fn frame(p: &BodyPose) -> SkeletonFrame {
        SkeletonFrame::new(0.0, p.positions()).unwrap()
    }

    #[test]
    fn relation_margins_are_wide() {
        let basis = FeatureBasis::default_basis();
        let mut worst = (f64::INFINITY, String::new());
        for (name, p) in posture_poses() {
            let f = frame(&p);
            for r in basis.relations() {
                let m = (f.position(r.lhs).axis(r.axis) - f.position(r.rhs).axis(r.axis)).abs();
                if m < worst.0 {
                    worst = (m, format!("{name}/{}", r.name));
                }
            }
        }
        assert!(worst.0 >= 0.04, "thin margin {:.4} at {}", worst.0, worst.1);
    }

    #[test]
    fn postures_are_their_own_nearest_match() {
        let lib = posture_library();
        assert!(lib.len() >= 27);
        for (name, p) in posture_poses() {
            let m = lib
                .classify(&descriptor(&frame(&p), lib.basis()).unwrap())
                .unwrap()
                .unwrap();
            assert_eq!(m.name, name);
            assert_eq!(m.distance, 0.0);
        }
    }

    #[test]
    fn library_has_expected_size() {
        let content = content_library().unwrap();
        assert!(content.movements.len() >= 32);
        assert!(content.exercises.len() >= 10);
        content.validate().unwrap();
    }
}
