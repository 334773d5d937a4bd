//! JSONL recording files: one frame per line,
//! `{"t": s, "joints": {"HipCenter": [x, y, z], ...}, "conf": {...}}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{JointId, Pose, Recording, SkeletonError, SkeletonFrame, Vec3, JOINT_COUNT};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct FrameDoc {
    t: f64,
    joints: BTreeMap<String, [f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conf: Option<BTreeMap<String, f64>>,
}

impl FrameDoc {
    fn into_frame(self, line: usize) -> Result<SkeletonFrame, SkeletonError> {
        for name in self.joints.keys() {
            name.parse::<JointId>()?;
        }
        let mut positions: Pose = [Vec3::ZERO; JOINT_COUNT];
        for j in JointId::ALL {
            let p = self
                .joints
                .get(j.name())
                .ok_or(SkeletonError::MissingJoint { line, joint: j })?;
            positions[j.ordinal()] = Vec3::from(*p);
        }
        let mut confidence = [1.0; JOINT_COUNT];
        if let Some(conf) = &self.conf {
            for (name, c) in conf {
                confidence[name.parse::<JointId>()?.ordinal()] = *c;
            }
        }
        SkeletonFrame::with_confidence(self.t, positions, confidence)
    }
}

impl TryFrom<FrameDoc> for SkeletonFrame {
    type Error = SkeletonError;

    fn try_from(doc: FrameDoc) -> Result<Self, Self::Error> {
        doc.into_frame(0)
    }
}

impl From<SkeletonFrame> for FrameDoc {
    fn from(f: SkeletonFrame) -> Self {
        let joints = JointId::ALL
            .iter()
            .map(|j| (j.name().to_string(), <[f64; 3]>::from(f.position(*j))))
            .collect();
        let conf = if f.confidence.iter().all(|&c| c == 1.0) {
            None
        } else {
            Some(
                JointId::ALL
                    .iter()
                    .map(|j| (j.name().to_string(), f.confidence(*j)))
                    .collect(),
            )
        };
        FrameDoc { t: f.t(), joints, conf }
    }
}

/// Parse a JSONL recording. Blank lines are skipped; line numbers in errors
/// are 1-based file lines.
pub fn load_recording(bytes: &[u8]) -> Result<Recording, SkeletonError> {
    let text = std::str::from_utf8(bytes).map_err(|e| SkeletonError::Parse {
        line: 0,
        message: format!("not UTF-8: {e}"),
    })?;
    let mut frames: Vec<SkeletonFrame> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let doc: FrameDoc = serde_json::from_str(raw).map_err(|e| SkeletonError::Parse {
            line,
            message: e.to_string(),
        })?;
        let frame = doc.into_frame(line)?;
        if let Some(prev) = frames.last() {
            if frame.t() <= prev.t() {
                return Err(SkeletonError::NonMonotonic {
                    line,
                    previous: prev.t(),
                    t: frame.t(),
                });
            }
        }
        frames.push(frame);
    }
    Recording::new(frames, Recording::DEFAULT_RATE)
}

pub fn save_recording(rec: &Recording) -> Vec<u8> {
    let mut out = Vec::new();
    for f in rec.frames() {
        let line = serde_json::to_string(&FrameDoc::from(f.clone())).expect("frame serializes");
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    out
}
