//! The expert interface: one conditional score model taking part in the product.

use std::fmt;

use crate::analytic::GmmExpert;
use crate::error::Result;
use crate::flow::{velocity_from_score, NoiseSchedule};
use crate::lattice::LatticeField;

/// A score backend for the marginal `p_tau(x | y)` of one expert.
pub trait ScoreModel: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    /// `grad_x log p_tau(x)`. Implementations clamp `tau` with
    /// [`NoiseSchedule::score_tau`].
    fn score(&self, x: &LatticeField, tau: f64, sched: &NoiseSchedule) -> Result<LatticeField>;

    /// Probability-flow velocity. The default goes through the score.
    fn velocity(&self, x: &LatticeField, tau: f64, sched: &NoiseSchedule) -> Result<LatticeField> {
        let tau = sched.velocity_tau(tau)?;
        let s = self.score(x, tau, sched)?;
        velocity_from_score(x, &s, tau, sched)
    }

    /// Closed-form parameters, when the backend has them.
    fn as_gmm(&self) -> Option<&GmmExpert> {
        None
    }
}
