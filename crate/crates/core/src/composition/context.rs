//! Per-level context conditionals: the reference pushed to every noise level
//! by second-order inversion, or forward-noised directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{AnnealLadder, NoiseSchedule};
use crate::lattice::LatticeField;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    #[default]
    Inversion,
    Direct,
}

/// How inversion intermediates become conditionals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionMode {
    /// Invert to noise, then re-simulate forward; `z_t` are the forward states.
    #[default]
    RoundTrip,
    /// Use the inversion intermediates themselves (`z_0` is the reference).
    InvertOnly,
}

/// `z_t` for `t = 0..=T` plus the clean reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextConditionals {
    source: ContextSource,
    reference: LatticeField,
    z: Vec<LatticeField>,
}

impl ContextConditionals {
    /// `z[t]` must be indexed by annealing step, `z[0]` nearest the data end.
    pub fn new(source: ContextSource, reference: LatticeField, z: Vec<LatticeField>) -> Result<Self> {
        if z.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "context needs at least 2 levels, got {}",
                z.len()
            )));
        }
        for zt in &z {
            zt.ensure_same_shape(&reference)?;
        }
        Ok(Self { source, reference, z })
    }

    /// `z_t = reference` at every level.
    pub fn constant(reference: LatticeField, steps: usize) -> Self {
        Self {
            source: ContextSource::Direct,
            z: vec![reference.clone(); steps + 1],
            reference,
        }
    }

    pub fn source(&self) -> ContextSource {
        self.source
    }

    pub fn reference(&self) -> &LatticeField {
        &self.reference
    }

    /// Annealing length `T` (the sequence holds `T + 1` fields).
    pub fn steps(&self) -> usize {
        self.z.len() - 1
    }

    pub fn at(&self, t: usize) -> Result<&LatticeField> {
        self.z.get(t).ok_or(Error::MissingContext { t })
    }

    pub fn levels(&self) -> &[LatticeField] {
        &self.z
    }
}

/// One second-order step `z + d v + d^2/2 v'`, with `v'` from the Heun
/// midpoint difference. Algebraically this is the explicit midpoint rule.
fn second_order_step<F>(z: &LatticeField, tau: f64, d: f64, velocity: &F) -> Result<LatticeField>
where
    F: Fn(&LatticeField, f64) -> Result<LatticeField>,
{
    let v = velocity(z, tau)?;
    let mut probe = z.clone();
    probe.axpy(0.5 * d, &v)?;
    let v_mid = velocity(&probe, tau + 0.5 * d)?;
    let v1 = v_mid.zip_map(&v, |m, a| (m - a) / (0.5 * d))?;
    let mut out = z.clone();
    out.axpy(d, &v)?;
    out.axpy(0.5 * d * d, &v1)?;
    Ok(out)
}

/// Integrates the flow from the data end (`t = 0`) to noise (`t = T`).
/// Returns `z[t]` for `t = 0..=T` with `z[0] = reference`.
pub fn rf_invert<F>(reference: &LatticeField, velocity: F, ladder: &AnnealLadder) -> Result<Vec<LatticeField>>
where
    F: Fn(&LatticeField, f64) -> Result<LatticeField>,
{
    let mut out = Vec::with_capacity(ladder.steps() + 1);
    out.push(reference.clone());
    for t in 0..ladder.steps() {
        let tau = ladder.tau_of(t);
        let d = ladder.tau_of(t + 1) - tau;
        let next = second_order_step(&out[t], tau, d, &velocity)?;
        if !next.is_finite() {
            return Err(Error::InversionDiverged { step: t + 1 });
        }
        out.push(next);
    }
    Ok(out)
}

/// Solver order for forward re-simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardOrder {
    Euler,
    Second,
}

/// Integrates from `z_T` (noise end) back to `t = 0`. Returns `z[t]`, `t = 0..=T`.
pub fn rf_resample<F>(z_top: &LatticeField, velocity: F, ladder: &AnnealLadder, order: ForwardOrder) -> Result<Vec<LatticeField>>
where
    F: Fn(&LatticeField, f64) -> Result<LatticeField>,
{
    let steps = ladder.steps();
    let mut out = vec![z_top.clone(); steps + 1];
    for t in (0..steps).rev() {
        let tau = ladder.tau_of(t + 1);
        let d = ladder.step(t + 1);
        let next = match order {
            ForwardOrder::Second => second_order_step(&out[t + 1], tau, d, &velocity)?,
            ForwardOrder::Euler => {
                let mut z = out[t + 1].clone();
                z.axpy(d, &velocity(&out[t + 1], tau)?)?;
                z
            }
        };
        if !next.is_finite() {
            return Err(Error::InversionDiverged { step: t });
        }
        out[t] = next;
    }
    Ok(out)
}

/// Conditionals from inversion of `reference` under `velocity`.
pub fn invert_conditionals<F>(
    reference: &LatticeField,
    velocity: F,
    ladder: &AnnealLadder,
    mode: InversionMode,
) -> Result<ContextConditionals>
where
    F: Fn(&LatticeField, f64) -> Result<LatticeField>,
{
    let inv = rf_invert(reference, &velocity, ladder)?;
    let z = match mode {
        InversionMode::InvertOnly => inv,
        InversionMode::RoundTrip => rf_resample(&inv[ladder.steps()], &velocity, ladder, ForwardOrder::Second)?,
    };
    ContextConditionals::new(ContextSource::Inversion, reference.clone(), z)
}

/// `z_t = alpha(tau_t) reference + sigma(tau_t) noise`, except `z_0 = reference`.
pub fn direct_conditionals(
    reference: &LatticeField,
    noise: &LatticeField,
    ladder: &AnnealLadder,
    sched: &NoiseSchedule,
) -> Result<ContextConditionals> {
    reference.ensure_same_shape(noise)?;
    let mut z = Vec::with_capacity(ladder.steps() + 1);
    z.push(reference.clone());
    for t in 1..=ladder.steps() {
        let p = sched.point(ladder.tau_of(t));
        z.push(reference.zip_map(noise, |r, e| p.alpha * r + p.sigma * e)?);
    }
    ContextConditionals::new(ContextSource::Direct, reference.clone(), z)
}

/// Relative L2 distance `|a - b| / |b|` (absolute when `b = 0`).
pub fn relative_l2(a: &LatticeField, b: &LatticeField) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let d = a.sq_dist(b).sqrt();
    let n = b.norm();
    Ok(if n > 0.0 { d / n } else { d })
}
