//! Noise schedules, the annealing ladder and score/velocity algebra.

mod convert;
mod schedule;

pub use convert::{clean_prediction, clean_prediction_jacobian, score_from_velocity, velocity_from_score};
pub use schedule::{AnnealLadder, NoiseSchedule, PathPoint, ScheduleKind, TauMapping, DEFAULT_EPS_CLAMP};
