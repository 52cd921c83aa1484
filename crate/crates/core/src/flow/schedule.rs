use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPS_CLAMP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `alpha = tau`, `sigma = 1 - tau`.
    #[default]
    RectifiedLinear,
    /// `alpha = sin(pi tau / 2)`, `sigma = cos(pi tau / 2)`.
    VariancePreserving,
}

/// `(alpha, sigma)` and their time derivatives at one `tau`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathPoint {
    pub tau: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub alpha_dot: f64,
    pub sigma_dot: f64,
}

impl PathPoint {
    /// `alpha_dot * sigma - sigma_dot * alpha`, the denominator of the clean prediction.
    pub fn cross(&self) -> f64 {
        self.alpha_dot * self.sigma - self.sigma_dot * self.alpha
    }

    /// Coefficients `(a, b)` such that `v = a x + b s`.
    pub fn velocity_coefficients(&self) -> (f64, f64) {
        let a = self.alpha_dot / self.alpha;
        let b = -(self.sigma_dot * self.sigma * self.alpha - self.alpha_dot * self.sigma * self.sigma)
            / self.alpha;
        (a, b)
    }

    /// Marginal variance of a data component with variance `var`.
    pub fn marginal_var(&self, var: f64) -> f64 {
        self.alpha * self.alpha * var + self.sigma * self.sigma
    }
}

/// Gaussian probability path `x_tau = alpha(tau) x_1 + sigma(tau) eps`, with
/// noise at `tau = 0` and data at `tau = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub eps_clamp: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::RectifiedLinear,
            eps_clamp: DEFAULT_EPS_CLAMP,
        }
    }
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, eps_clamp: f64) -> Result<Self> {
        if !(eps_clamp > 0.0 && eps_clamp < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "eps_clamp must lie in (0, 0.5), got {eps_clamp}"
            )));
        }
        Ok(Self { kind, eps_clamp })
    }

    pub fn rectified() -> Self {
        Self::default()
    }

    pub fn alpha(&self, tau: f64) -> f64 {
        match self.kind {
            ScheduleKind::RectifiedLinear => tau,
            ScheduleKind::VariancePreserving => (FRAC_PI_2 * tau).sin(),
        }
    }

    pub fn sigma(&self, tau: f64) -> f64 {
        match self.kind {
            ScheduleKind::RectifiedLinear => 1.0 - tau,
            ScheduleKind::VariancePreserving => (FRAC_PI_2 * tau).cos(),
        }
    }

    pub fn alpha_dot(&self, tau: f64) -> f64 {
        match self.kind {
            ScheduleKind::RectifiedLinear => 1.0,
            ScheduleKind::VariancePreserving => FRAC_PI_2 * (FRAC_PI_2 * tau).cos(),
        }
    }

    pub fn sigma_dot(&self, tau: f64) -> f64 {
        match self.kind {
            ScheduleKind::RectifiedLinear => -1.0,
            ScheduleKind::VariancePreserving => -FRAC_PI_2 * (FRAC_PI_2 * tau).sin(),
        }
    }

    /// Raw path values at `tau` (no clamping).
    pub fn point(&self, tau: f64) -> PathPoint {
        PathPoint {
            tau,
            alpha: self.alpha(tau),
            sigma: self.sigma(tau),
            alpha_dot: self.alpha_dot(tau),
            sigma_dot: self.sigma_dot(tau),
        }
    }

    fn check_unit(&self, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Domain(format!("tau = {tau} outside [0, 1]")));
        }
        Ok(())
    }

    /// Clamp for score evaluation: `[0, 1 - eps]`.
    pub fn score_tau(&self, tau: f64) -> Result<f64> {
        self.check_unit(tau)?;
        Ok(tau.min(1.0 - self.eps_clamp))
    }

    /// Clamp for the score/velocity conversion, which divides by `alpha`
    /// and needs `sigma > 0`: `[eps, 1 - eps]`.
    pub fn velocity_tau(&self, tau: f64) -> Result<f64> {
        self.check_unit(tau)?;
        Ok(tau.clamp(self.eps_clamp, 1.0 - self.eps_clamp))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauMapping {
    /// `tau(t) = (T - t) / T`.
    #[default]
    Uniform,
    /// `tau(t) = (T - t) / (T + 1)`, the alternative `T + 1` grid.
    PlusOne,
}

/// Discrete annealing levels `t = T..0` mapped onto `tau in [0, 1 - eps]`.
///
/// `tau_of(T) = 0` (pure noise) and `tau_of(0) = 1 - eps` (data side).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealLadder {
    steps: usize,
    mapping: TauMapping,
    eps_clamp: f64,
}

impl AnnealLadder {
    pub fn new(steps: usize, mapping: TauMapping, eps_clamp: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("annealing length T must be positive".into()));
        }
        let ladder = Self {
            steps,
            mapping,
            eps_clamp,
        };
        // Levels must stay strictly decreasing once the last one is pinned to 1 - eps.
        if steps > 1 && ladder.raw(1) >= 1.0 - eps_clamp {
            return Err(Error::InvalidArgument(format!(
                "T = {steps} is too fine for eps_clamp = {eps_clamp}"
            )));
        }
        Ok(ladder)
    }

    pub fn uniform(steps: usize, schedule: &NoiseSchedule) -> Result<Self> {
        Self::new(steps, TauMapping::Uniform, schedule.eps_clamp)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn mapping(&self) -> TauMapping {
        self.mapping
    }

    fn raw(&self, t: usize) -> f64 {
        let big_t = self.steps as f64;
        let rem = (self.steps - t) as f64;
        match self.mapping {
            TauMapping::Uniform => rem / big_t,
            TauMapping::PlusOne => rem / (big_t + 1.0),
        }
    }

    /// Map level `t in {T, ..., 0}` to `tau`.
    pub fn tau_of(&self, t: usize) -> f64 {
        assert!(t <= self.steps, "level t={t} beyond T={}", self.steps);
        if t == 0 {
            1.0 - self.eps_clamp
        } else {
            self.raw(t)
        }
    }

    /// `tau(t - 1) - tau(t)` for `t in {T, ..., 1}`.
    pub fn step(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps, "step defined for t in 1..=T");
        self.tau_of(t - 1) - self.tau_of(t)
    }

    /// All levels from `T` down to `0`.
    pub fn taus(&self) -> Vec<f64> {
        (0..=self.steps).rev().map(|t| self.tau_of(t)).collect()
    }
}
