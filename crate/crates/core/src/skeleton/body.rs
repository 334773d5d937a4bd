//! Parametric body model used to script synthetic motion.
//!
//! Joint angles map onto the default feature basis exactly: elbow, wrist and
//! knee angles equal `180 - flexion`, the shoulder angle (hip-shoulder-elbow)
//! equals arm elevation and the hip angle (shoulder-hip-knee) equals
//! `180 - leg elevation` while the trunk is upright.

use serde::{Deserialize, Serialize};

use super::{JointId, Pose, Vec3, JOINT_COUNT};

const PELVIS: Vec3 = Vec3::new(0.0, 0.95, 2.6);
const HALF_WIDTH: f64 = 0.15;
const SPINE: f64 = 0.25;
const SHOULDERS: f64 = 0.50;
const HEAD: f64 = 0.70;
const UPPER_ARM: f64 = 0.28;
const FOREARM: f64 = 0.25;
const HAND: f64 = 0.08;
const THIGH: f64 = 0.45;
const SHANK: f64 = 0.42;
const FOOT: f64 = 0.12;

/// Arm configuration, degrees. `plane` 0 is straight forward, 90 is lateral,
/// negative values cross the midline and values above 90 point backwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmPose {
    pub elevation: f64,
    pub plane: f64,
    #[serde(default)]
    pub elbow_flexion: f64,
    #[serde(default)]
    pub wrist_flexion: f64,
}

/// Leg configuration, degrees. `plane` 0 is flexion (forward), 90 abduction,
/// 180 extension (backward). Feet always point forward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LegPose {
    pub elevation: f64,
    pub plane: f64,
    #[serde(default)]
    pub knee_flexion: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyPose {
    /// Forward trunk lean, degrees.
    #[serde(default)]
    pub trunk_lean: f64,
    pub left_arm: ArmPose,
    pub right_arm: ArmPose,
    pub left_leg: LegPose,
    pub right_leg: LegPose,
}

impl ArmPose {
    pub const REST: ArmPose = ArmPose {
        elevation: 12.0,
        plane: 120.0,
        elbow_flexion: 0.0,
        wrist_flexion: 0.0,
    };

    pub fn raised(elevation: f64, plane: f64) -> Self {
        ArmPose {
            elevation,
            plane,
            ..ArmPose::REST
        }
    }
}

impl LegPose {
    pub const REST: LegPose = LegPose {
        elevation: 10.0,
        plane: 110.0,
        knee_flexion: 0.0,
    };

    pub fn raised(elevation: f64, plane: f64) -> Self {
        LegPose {
            elevation,
            plane,
            knee_flexion: 0.0,
        }
    }
}

fn rad(d: f64) -> f64 {
    d.to_radians()
}

/// Position of a two-segment limb hanging from `root`: direction of the
/// proximal segment at `elevation` away from `down` inside the plane spanned
/// by `down` and `heading`, distal segment bent by `bend` towards increasing
/// (`sign` = 1) or decreasing (`sign` = -1) elevation.
struct Limb {
    dir: Vec3,
    /// Unit tangent towards increasing elevation, perpendicular to `dir`.
    tangent: Vec3,
}

impl Limb {
    fn new(down: Vec3, heading: Vec3, elevation: f64) -> Self {
        let (s, c) = rad(elevation).sin_cos();
        Limb {
            dir: down * c + heading * s,
            tangent: down * (-s) + heading * c,
        }
    }

    /// Rotate by `angle` towards the tangent (negative rotates away).
    fn bend(&self, angle: f64) -> Limb {
        let (s, c) = rad(angle).sin_cos();
        Limb {
            dir: self.dir * c + self.tangent * s,
            tangent: self.tangent * c - self.dir * s,
        }
    }
}

/// Unit vector perpendicular to the shank pointing as far forward as possible,
/// so feet face the sensor unless the shank itself is horizontal along z.
fn foot_direction(shank: Vec3, forward: Vec3) -> Vec3 {
    let along = forward - shank * forward.dot(shank);
    if along.norm() > 1e-6 {
        along.normalized()
    } else {
        let up = Vec3::new(0.0, 1.0, 0.0);
        (up - shank * up.dot(shank)).normalized()
    }
}

impl BodyPose {
    pub fn standing() -> Self {
        BodyPose {
            trunk_lean: 0.0,
            left_arm: ArmPose::REST,
            right_arm: ArmPose::REST,
            left_leg: LegPose::REST,
            right_leg: LegPose::REST,
        }
    }

    pub fn positions(&self) -> Pose {
        let mut p: Pose = [Vec3::ZERO; JOINT_COUNT];
        let mut set = |j: JointId, v: Vec3| p[j.ordinal()] = v;

        let (ls, lc) = rad(self.trunk_lean).sin_cos();
        let trunk_up = Vec3::new(0.0, lc, -ls);
        let trunk_fwd = Vec3::new(0.0, -ls, -lc);
        let world_up = Vec3::new(0.0, 1.0, 0.0);
        let world_fwd = Vec3::new(0.0, 0.0, -1.0);

        let hc = PELVIS;
        set(JointId::HipCenter, hc);
        set(JointId::Spine, hc + trunk_up * SPINE);
        let sc = hc + trunk_up * SHOULDERS;
        set(JointId::ShoulderCenter, sc);
        set(JointId::Head, hc + trunk_up * HEAD);

        let sides = [
            (
                1.0,
                &self.left_arm,
                &self.left_leg,
                [
                    JointId::ShoulderLeft,
                    JointId::ElbowLeft,
                    JointId::WristLeft,
                    JointId::HandLeft,
                    JointId::HipLeft,
                    JointId::KneeLeft,
                    JointId::AnkleLeft,
                    JointId::FootLeft,
                ],
            ),
            (
                -1.0,
                &self.right_arm,
                &self.right_leg,
                [
                    JointId::ShoulderRight,
                    JointId::ElbowRight,
                    JointId::WristRight,
                    JointId::HandRight,
                    JointId::HipRight,
                    JointId::KneeRight,
                    JointId::AnkleRight,
                    JointId::FootRight,
                ],
            ),
        ];
        for (side, arm, leg, [sh, el, wr, ha, hi, kn, an, fo]) in sides {
            let lateral = Vec3::new(side, 0.0, 0.0);

            let shoulder = sc + lateral * HALF_WIDTH;
            let (ps, pc) = rad(arm.plane).sin_cos();
            let upper = Limb::new(trunk_up * -1.0, trunk_fwd * pc + lateral * ps, arm.elevation);
            let elbow = shoulder + upper.dir * UPPER_ARM;
            let fore = upper.bend(arm.elbow_flexion);
            let wrist = elbow + fore.dir * FOREARM;
            let hand = wrist + fore.bend(arm.wrist_flexion).dir * HAND;
            set(sh, shoulder);
            set(el, elbow);
            set(wr, wrist);
            set(ha, hand);

            let hip = hc + lateral * HALF_WIDTH;
            let (qs, qc) = rad(leg.plane).sin_cos();
            let thigh = Limb::new(world_up * -1.0, world_fwd * qc + lateral * qs, leg.elevation);
            let knee = hip + thigh.dir * THIGH;
            let shank = thigh.bend(-leg.knee_flexion);
            let ankle = knee + shank.dir * SHANK;
            let foot = ankle + foot_direction(shank.dir, world_fwd) * FOOT;
            set(hi, hip);
            set(kn, knee);
            set(an, ankle);
            set(fo, foot);
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::angle_between;

    fn angle(p: &Pose, a: JointId, v: JointId, b: JointId) -> f64 {
        angle_between(p[a.ordinal()], p[v.ordinal()], p[b.ordinal()]).unwrap()
    }

    #[test]
    fn joint_angles_follow_parameters() {
        let mut pose = BodyPose::standing();
        pose.left_arm = ArmPose {
            elevation: 70.0,
            plane: 30.0,
            elbow_flexion: 45.0,
            wrist_flexion: 20.0,
        };
        pose.right_leg = LegPose {
            elevation: 35.0,
            plane: 10.0,
            knee_flexion: 60.0,
        };
        let p = pose.positions();
        use JointId::*;
        assert!((angle(&p, ShoulderLeft, ElbowLeft, WristLeft) - 135.0).abs() < 1e-9);
        assert!((angle(&p, ElbowLeft, WristLeft, HandLeft) - 160.0).abs() < 1e-9);
        assert!((angle(&p, HipLeft, ShoulderLeft, ElbowLeft) - 70.0).abs() < 1e-9);
        assert!((angle(&p, HipRight, KneeRight, AnkleRight) - 120.0).abs() < 1e-9);
        assert!((angle(&p, ShoulderRight, HipRight, KneeRight) - 145.0).abs() < 1e-9);
        assert!((angle(&p, KneeRight, AnkleRight, FootRight) - 90.0).abs() < 1e-9);
    }

    #[test]
    fn left_side_is_positive_x() {
        let p = BodyPose::standing().positions();
        assert!(p[JointId::ShoulderLeft.ordinal()].x > 0.0);
        assert!(p[JointId::ShoulderRight.ordinal()].x < 0.0);
        assert!(p[JointId::Head.ordinal()].y > p[JointId::ShoulderCenter.ordinal()].y);
    }
}
