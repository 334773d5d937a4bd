//! Deterministic synthetic recordings from keyframed poses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BodyPose, JointId, Pose, Recording, SkeletonError, SkeletonFrame, Vec3, JOINT_COUNT};

/// A full-skeleton keyframe. Positions are given either directly or through
/// the parametric [`BodyPose`] model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub t: f64,
    #[serde(flatten)]
    pub pose: KeyPose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyPose {
    Body(BodyPose),
    Joints(Pose),
}

impl KeyPose {
    fn positions(&self) -> Pose {
        match self {
            KeyPose::Body(b) => b.positions(),
            KeyPose::Joints(p) => *p,
        }
    }
}

impl Keyframe {
    pub fn body(t: f64, pose: BodyPose) -> Self {
        Keyframe {
            t,
            pose: KeyPose::Body(pose),
        }
    }

    pub fn joints(t: f64, pose: Pose) -> Self {
        Keyframe {
            t,
            pose: KeyPose::Joints(pose),
        }
    }
}

/// Keyframes sampled at `rate` with linear interpolation of joint positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionScript {
    pub keyframes: Vec<Keyframe>,
    #[serde(default = "default_rate")]
    pub rate: f64,
}

fn default_rate() -> f64 {
    Recording::DEFAULT_RATE
}

impl MotionScript {
    pub fn new(keyframes: Vec<Keyframe>) -> Self {
        MotionScript {
            keyframes,
            rate: Recording::DEFAULT_RATE,
        }
    }

    /// Hold `from` for `hold_before`, move linearly in parameter space to `to`
    /// over `duration` (sampled as `steps` keyframes), then hold `to` for
    /// `hold_after`. Interpolating body parameters rather than positions keeps
    /// limb lengths constant through the transit.
    pub fn transition(from: &BodyPose, to: &BodyPose, hold_before: f64, duration: f64, hold_after: f64) -> Self {
        let steps = ((duration * 10.0).ceil() as usize).max(2);
        let mut keyframes = vec![Keyframe::body(0.0, *from)];
        for i in 0..=steps {
            let u = i as f64 / steps as f64;
            keyframes.push(Keyframe::body(
                hold_before + u * duration,
                blend(from, to, smoothstep(u)),
            ));
        }
        keyframes.push(Keyframe::body(hold_before + duration + hold_after, *to));
        keyframes.dedup_by(|b, a| a.t == b.t);
        MotionScript::new(keyframes)
    }

    pub fn duration(&self) -> f64 {
        match (self.keyframes.first(), self.keyframes.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }
}

fn smoothstep(u: f64) -> f64 {
    u * u * (3.0 - 2.0 * u)
}

/// Linear blend of every body parameter.
pub fn blend(a: &BodyPose, b: &BodyPose, u: f64) -> BodyPose {
    let l = |x: f64, y: f64| x + (y - x) * u;
    let arm = |x: &super::ArmPose, y: &super::ArmPose| super::ArmPose {
        elevation: l(x.elevation, y.elevation),
        plane: l(x.plane, y.plane),
        elbow_flexion: l(x.elbow_flexion, y.elbow_flexion),
        wrist_flexion: l(x.wrist_flexion, y.wrist_flexion),
    };
    let leg = |x: &super::LegPose, y: &super::LegPose| super::LegPose {
        elevation: l(x.elevation, y.elevation),
        plane: l(x.plane, y.plane),
        knee_flexion: l(x.knee_flexion, y.knee_flexion),
    };
    BodyPose {
        trunk_lean: l(a.trunk_lean, b.trunk_lean),
        left_arm: arm(&a.left_arm, &b.left_arm),
        right_arm: arm(&a.right_arm, &b.right_arm),
        left_leg: leg(&a.left_leg, &b.left_leg),
        right_leg: leg(&a.right_leg, &b.right_leg),
    }
}

/// Sample `script` at its rate from the first to the last keyframe, adding
/// zero-mean Gaussian noise of `noise_sigma` meters to every coordinate.
/// Output is a pure function of `(script, seed, noise_sigma)`.
pub fn synth_recording(script: &MotionScript, seed: u64, noise_sigma: f64) -> Result<Recording, SkeletonError> {
    let keys = &script.keyframes;
    if keys.is_empty() {
        return Err(SkeletonError::InvalidScript("no keyframes".into()));
    }
    if keys.windows(2).any(|w| w[1].t <= w[0].t) {
        return Err(SkeletonError::InvalidScript("keyframe times must increase".into()));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(SkeletonError::InvalidScript(format!(
            "noise sigma {noise_sigma} must be non-negative"
        )));
    }
    if !(script.rate > 0.0 && script.rate.is_finite()) {
        return Err(SkeletonError::InvalidScript(format!(
            "rate {} must be positive",
            script.rate
        )));
    }
    let t0 = keys[0].t;
    if !(t0 >= 0.0) {
        return Err(SkeletonError::InvalidScript(
            "keyframe times must be non-negative".into(),
        ));
    }
    let poses: Vec<Pose> = keys.iter().map(|k| k.pose.positions()).collect();
    let span = keys[keys.len() - 1].t - t0;
    let count = (span * script.rate + 1e-9).floor() as usize + 1;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| SkeletonError::InvalidScript(e.to_string()))?;

    let mut frames = Vec::with_capacity(count);
    let mut seg = 0;
    for i in 0..count {
        let t = t0 + i as f64 / script.rate;
        while seg + 1 < keys.len() - 1 && t > keys[seg + 1].t {
            seg += 1;
        }
        let mut pose: Pose = if keys.len() == 1 {
            poses[0]
        } else {
            let (a, b) = (&keys[seg], &keys[seg + 1]);
            let u = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
            let mut p: Pose = [Vec3::ZERO; JOINT_COUNT];
            for j in 0..JOINT_COUNT {
                p[j] = poses[seg][j].lerp(poses[seg + 1][j], u);
            }
            p
        };
        if noise_sigma > 0.0 {
            for j in JointId::ALL {
                let v = &mut pose[j.ordinal()];
                v.x += normal.sample(&mut rng);
                v.y += normal.sample(&mut rng);
                v.z += normal.sample(&mut rng);
            }
        }
        frames.push(SkeletonFrame::new(t, pose)?);
    }
    Recording::new(frames, script.rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{save_recording, ArmPose};

    fn two_keys() -> MotionScript {
        let a = BodyPose::standing();
        let mut b = a;
        b.left_arm = ArmPose::raised(90.0, 10.0);
        MotionScript::new(vec![Keyframe::body(0.0, a), Keyframe::body(1.0, b)])
    }

    #[test]
    fn noiseless_interpolation_is_exact() {
        let script = two_keys();
        let rec = synth_recording(&script, 7, 0.0).unwrap();
        assert_eq!(rec.len(), 31);
        let a = script.keyframes[0].pose.positions();
        let b = script.keyframes[1].pose.positions();
        for (i, f) in rec.frames().iter().enumerate() {
            let u = i as f64 / 30.0;
            assert!((f.t() - u).abs() < 1e-12);
            for j in JointId::ALL {
                let want = a[j.ordinal()].lerp(b[j.ordinal()], u);
                assert!((f.position(j) - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_same_output_different_seed_differs() {
        let script = two_keys();
        let a = save_recording(&synth_recording(&script, 11, 0.01).unwrap());
        let b = save_recording(&synth_recording(&script, 11, 0.01).unwrap());
        let c = save_recording(&synth_recording(&script, 12, 0.01).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn empty_script_rejected() {
        let script = MotionScript::new(vec![]);
        assert!(matches!(
            synth_recording(&script, 0, 0.0),
            Err(SkeletonError::InvalidScript(_))
        ));
    }

    #[test]
    fn transition_holds_endpoints() {
        let a = BodyPose::standing();
        let mut b = a;
        b.right_leg = crate::skeleton::LegPose::raised(40.0, 10.0);
        let script = MotionScript::transition(&a, &b, 1.5, 2.0, 1.5);
        assert!((script.duration() - 5.0).abs() < 1e-12);
        let rec = synth_recording(&script, 0, 0.0).unwrap();
        assert_eq!(rec.len(), 151);
        assert_eq!(rec.frames()[0].positions(), &a.positions());
        let last = rec.frames().last().unwrap();
        for j in JointId::ALL {
            assert!((last.position(j) - b.positions()[j.ordinal()]).norm() < 1e-12);
        }
    }
}
