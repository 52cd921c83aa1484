//! The masked product target: composed score, context projection and the
//! reconstruction correction.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::composition::context::ContextConditionals;
use crate::composition::mask::{Mask, MaskSet};
use crate::composition::refine::{refine_masks, RefineConfig};
use crate::error::{Error, Result};
use crate::expert::ScoreModel;
use crate::flow::{clean_prediction, clean_prediction_jacobian, velocity_from_score, AnnealLadder, NoiseSchedule};
use crate::lattice::{LatticeField, Shape};

/// Which mask routes cells to an expert.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskBinding {
    Fg,
    Sim,
    /// `1 - M_context`: every cell not owned by the context.
    NotContext,
    Ones,
    Custom(Mask),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPolicy {
    #[default]
    ProjectHard,
    Soft(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconStep {
    #[serde(default = "default_recon_step")]
    pub step_size: f64,
    #[serde(default = "default_recon_every")]
    pub every: usize,
}

fn default_recon_step() -> f64 {
    0.1
}

fn default_recon_every() -> usize {
    1
}

impl Default for ReconStep {
    fn default() -> Self {
        Self {
            step_size: default_recon_step(),
            every: default_recon_every(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExpertSlot {
    pub model: Arc<dyn ScoreModel>,
    pub binding: MaskBinding,
    pub weight: f64,
}

impl ExpertSlot {
    pub fn new(model: Arc<dyn ScoreModel>, binding: MaskBinding) -> Self {
        Self {
            model,
            binding,
            weight: 1.0,
        }
    }

    pub fn weighted(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }
}

#[derive(Clone, Debug)]
pub struct CompositeTarget {
    shape: Shape,
    sched: NoiseSchedule,
    ladder: AnnealLadder,
    slots: Vec<ExpertSlot>,
    masks: MaskSet,
    context: Option<ContextConditionals>,
    lambda: LambdaPolicy,
    projection: bool,
    recon: Option<ReconStep>,
    refine: Option<RefineConfig>,
}

impl CompositeTarget {
    pub fn new(shape: Shape, sched: NoiseSchedule, ladder: AnnealLadder, slots: Vec<ExpertSlot>, masks: MaskSet) -> Result<Self> {
        shape.validate()?;
        masks.fg().ensure_fits(shape)?;
        for (i, s) in slots.iter().enumerate() {
            if let MaskBinding::Custom(m) = &s.binding {
                m.ensure_fits(shape)?;
            }
            if !(s.weight >= 0.0 && s.weight.is_finite()) {
                return Err(Error::InvalidArgument(format!("expert {i} weight {} must be finite and >= 0", s.weight)));
            }
        }
        Ok(Self {
            shape,
            sched,
            ladder,
            slots,
            masks,
            context: None,
            lambda: LambdaPolicy::ProjectHard,
            projection: true,
            recon: None,
            refine: None,
        })
    }

    pub fn with_context(mut self, ctx: ContextConditionals) -> Result<Self> {
        ctx.reference().ensure_shape(self.shape)?;
        if ctx.steps() != self.ladder.steps() {
            return Err(Error::InvalidArgument(format!(
                "context has {} steps, ladder has {}",
                ctx.steps(),
                self.ladder.steps()
            )));
        }
        self.context = Some(ctx);
        Ok(self)
    }

    pub fn with_lambda(mut self, lambda: LambdaPolicy) -> Result<Self> {
        if let LambdaPolicy::Soft(l) = lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidArgument(format!("lambda {l} must be finite and >= 0")));
            }
        }
        self.lambda = lambda;
        Ok(self)
    }

    /// Disabling projection gives the no-context ablation.
    pub fn with_projection(mut self, enabled: bool) -> Self {
        self.projection = enabled;
        self
    }

    pub fn with_recon(mut self, recon: Option<ReconStep>) -> Result<Self> {
        if let Some(r) = recon {
            if !(r.step_size > 0.0 && r.step_size.is_finite()) || r.every == 0 {
                return Err(Error::InvalidArgument(format!("invalid recon step {r:?}")));
            }
        }
        self.recon = recon;
        Ok(self)
    }

    pub fn with_refine(mut self, refine: Option<RefineConfig>) -> Result<Self> {
        if let Some(r) = &refine {
            r.validate()?;
        }
        self.refine = refine;
        Ok(self)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn ladder(&self) -> &AnnealLadder {
        &self.ladder
    }

    pub fn slots(&self) -> &[ExpertSlot] {
        &self.slots
    }

    pub fn masks(&self) -> &MaskSet {
        &self.masks
    }

    pub fn context(&self) -> Option<&ContextConditionals> {
        self.context.as_ref()
    }

    pub fn lambda(&self) -> LambdaPolicy {
        self.lambda
    }

    pub fn projection_enabled(&self) -> bool {
        self.projection
    }

    pub fn recon(&self) -> Option<ReconStep> {
        self.recon
    }

    pub fn refine_config(&self) -> Option<RefineConfig> {
        self.refine
    }

    pub fn tau(&self, t: usize) -> f64 {
        self.ladder.tau_of(t)
    }

    /// Per-cell mask values for slot `i` under the current masks.
    pub fn slot_mask(&self, i: usize) -> Vec<f64> {
        let cells = self.shape.cells();
        match &self.slots[i].binding {
            MaskBinding::Fg => self.masks.fg().values().to_vec(),
            MaskBinding::Sim => self.masks.sim().values().to_vec(),
            MaskBinding::NotContext => self.masks.context().values().iter().map(|c| 1.0 - c).collect(),
            MaskBinding::Ones => vec![1.0; cells],
            MaskBinding::Custom(m) => m.values().to_vec(),
        }
    }

    /// Context weight per cell; zero when no conditionals are attached.
    pub fn context_weights(&self) -> Vec<f64> {
        match &self.context {
            Some(_) => self.masks.context().values().to_vec(),
            None => vec![0.0; self.shape.cells()],
        }
    }

    /// Every cell must be claimed by some expert or by the context.
    pub fn validate(&self) -> Result<()> {
        let mut cover = self.context_weights();
        for i in 0..self.slots.len() {
            let w = self.slots[i].weight;
            for (c, m) in cover.iter_mut().zip(self.slot_mask(i)) {
                *c += w * m;
            }
        }
        if let Some(cell) = cover.iter().position(|c| *c <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lattice cell {cell} is scored by no expert and no context"
            )));
        }
        if self.recon.is_some() && self.context.is_none() {
            return Err(Error::InvalidArgument("reconstruction step needs context conditionals".into()));
        }
        Ok(())
    }

    /// `sum_i w_i M_i s_i(x, tau_t)`, plus `-lambda M_context (x - z_t)` under the soft policy.
    pub fn composed_score(&self, x: &LatticeField, t: usize) -> Result<LatticeField> {
        x.ensure_shape(self.shape)?;
        let tau = self.tau(t);
        let c = self.shape.c;
        let mut out = LatticeField::zeros(self.shape);
        for (i, slot) in self.slots.iter().enumerate() {
            let mask = self.slot_mask(i);
            if slot.weight == 0.0 || mask.iter().all(|m| *m == 0.0) {
                continue;
            }
            let s = slot.model.score(x, tau, &self.sched).map_err(|e| Error::Expert {
                index: i,
                name: slot.model.name().to_string(),
                source: Box::new(e),
            })?;
            s.ensure_shape(self.shape).map_err(|e| Error::Expert {
                index: i,
                name: slot.model.name().to_string(),
                source: Box::new(e),
            })?;
            for (k, (o, si)) in out.data_mut().iter_mut().zip(s.data()).enumerate() {
                *o += slot.weight * mask[k / c] * si;
            }
        }
        if let (LambdaPolicy::Soft(lambda), Some(ctx)) = (self.lambda, &self.context) {
            if self.projection {
                let z = ctx.at(t)?;
                let m = self.masks.context().values();
                for (k, o) in out.data_mut().iter_mut().enumerate() {
                    *o -= lambda * m[k / c] * (x.data()[k] - z.data()[k]);
                }
            }
        }
        Ok(out)
    }

    /// Whether the hard projection runs.
    pub fn projects(&self) -> bool {
        self.projection && self.context.is_some() && self.lambda == LambdaPolicy::ProjectHard
    }

    /// `(1 - M_context) x + M_context z_t`; identity when projection is off.
    pub fn context_project(&self, x: &LatticeField, t: usize) -> Result<LatticeField> {
        x.ensure_shape(self.shape)?;
        if !self.projects() {
            return Ok(x.clone());
        }
        let z = self.context.as_ref().expect("checked").at(t)?;
        Ok(project(x, z, self.masks.context()))
    }

    pub fn recon_due(&self, t: usize) -> bool {
        matches!(self.recon, Some(r) if self.context.is_some() && t % r.every == 0)
    }

    /// Gradient step on `|M_context (x0_hat(x) - z_ref)|^2` with the score
    /// `score` (evaluated at `x`) held fixed, so `d x0_hat / dx = 1 / alpha`.
    /// The step is capped at `alpha^2 / 2`, inside the quadratic's stability bound.
    pub fn recon_grad_step(&self, x: &LatticeField, t: usize, score: &LatticeField) -> Result<LatticeField> {
        x.ensure_shape(self.shape)?;
        let (recon, ctx) = match (self.recon, &self.context) {
            (Some(r), Some(c)) => (r, c),
            _ => return Ok(x.clone()),
        };
        let tau = self.tau(t);
        let v = velocity_from_score(x, score, tau, &self.sched)?;
        let x0 = clean_prediction(x, &v, tau, &self.sched)?;
        let jac = clean_prediction_jacobian(tau, &self.sched)?;
        let step = recon.step_size.min(0.5 / (jac * jac));
        let m = self.masks.context().values();
        let z = ctx.reference();
        let c = self.shape.c;
        Ok(LatticeField::from_fn(self.shape, |k| {
            let mk = m[k / c];
            x.data()[k] - step * 2.0 * jac * mk * mk * (x0.data()[k] - z.data()[k])
        }))
    }

    pub fn refine_due(&self, t: usize) -> bool {
        match self.refine {
            Some(r) => self.context.is_some() && t > 0 && (self.ladder.steps() - t) % r.every == 0,
            None => false,
        }
    }

    /// Updates masks from the ensemble-mean clean prediction.
    pub fn refine(&mut self, mean_x0: &LatticeField) -> Result<()> {
        let (cfg, ctx) = match (self.refine, &self.context) {
            (Some(r), Some(c)) => (r, c),
            _ => return Ok(()),
        };
        let z0 = ctx.reference();
        let th = cfg.resolve_threshold(z0);
        refine_masks(mean_x0, z0, &mut self.masks, th, cfg.decay)
    }

    /// Masked product log-density at the data end, when every expert is analytic.
    pub fn clean_log_density(&self, x: &LatticeField) -> Option<Result<f64>> {
        let mut total = 0.0;
        for (i, slot) in self.slots.iter().enumerate() {
            let g = slot.model.as_gmm()?;
            let mask = match Mask::from_values(crate::composition::MaskKind::Custom, self.shape, self.slot_mask(i)) {
                Ok(m) => m,
                Err(e) => return Some(Err(e)),
            };
            match g.log_density(x, 1.0, &self.sched, Some(&mask)) {
                Ok(l) => total += slot.weight * l,
                Err(e) => return Some(Err(e)),
            }
        }
        Some(Ok(total))
    }
}

/// `(1 - M) x + M z`, with exact copies where `M` is 0 or 1.
pub fn project(x: &LatticeField, z: &LatticeField, m: &Mask) -> LatticeField {
    let c = x.shape().c;
    LatticeField::from_fn(x.shape(), |k| {
        let mk = m.values()[k / c];
        if mk == 1.0 {
            z.data()[k]
        } else if mk == 0.0 {
            x.data()[k]
        } else {
            (1.0 - mk) * x.data()[k] + mk * z.data()[k]
        }
    })
}
