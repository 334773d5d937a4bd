//! Skeleton-based telerehabilitation engine.

pub mod analytics;
pub mod assessment;
pub mod fixtures;
pub mod knowledge;
pub mod movement;
pub mod posture;
pub mod session;
pub mod skeleton;
pub mod telestream;
