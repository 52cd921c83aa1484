//! Segmented long-sequence generation: each segment after the first pins its
//! leading `K` frames to the tail of the previous segment through context
//! conditionals.

use std::sync::Arc;

use crate::composition::{
    direct_conditionals, invert_conditionals, relative_l2, CompositeTarget, ContextConditionals, ContextSource,
    ExpertSlot, InversionMode, LambdaPolicy, MaskSet, ReconStep, RefineConfig,
};
use crate::error::{Error, Result};
use crate::expert::ScoreModel;
use crate::flow::{AnnealLadder, NoiseSchedule};
use crate::lattice::LatticeField;
use crate::svgd::{anneal_sample, normal_field, ParticleEnsemble, StepRecord, SvgdConfig, SHARED_STREAM};

/// Output length of `segments` windows of `frames` sharing `overlap` frames.
pub fn total_frames(segments: usize, frames: usize, overlap: usize) -> usize {
    if segments == 0 {
        return 0;
    }
    frames + (segments - 1) * (frames - overlap)
}

/// Everything one segment needs besides the pinned overlap.
#[derive(Clone, Debug)]
pub struct SegmentSpec {
    pub slots: Vec<ExpertSlot>,
    /// Configured masks over the segment's `N` frames; every segment starts from these.
    pub masks: MaskSet,
    pub ladder: Option<AnnealLadder>,
    /// The segment's own conditionals (required context source of segment 1,
    /// optional later). Overlap frames override it for `s > 1`.
    pub context: Option<ContextConditionals>,
    /// Velocity used to invert the overlap frames; defaults to the first slot's model.
    pub inversion_model: Option<Arc<dyn ScoreModel>>,
}

impl SegmentSpec {
    pub fn new(slots: Vec<ExpertSlot>, masks: MaskSet) -> Self {
        Self {
            slots,
            masks,
            ladder: None,
            context: None,
            inversion_model: None,
        }
    }

    pub fn with_context(mut self, ctx: ContextConditionals) -> Self {
        self.context = Some(ctx);
        self
    }

    pub fn with_ladder(mut self, ladder: AnnealLadder) -> Self {
        self.ladder = Some(ladder);
        self
    }

    pub fn with_inversion_model(mut self, model: Arc<dyn ScoreModel>) -> Self {
        self.inversion_model = Some(model);
        self
    }
}

#[derive(Clone, Debug)]
pub struct SegmentPlan {
    pub segments: usize,
    pub frames: usize,
    pub overlap: usize,
    /// One spec per segment.
    pub per_segment: Vec<SegmentSpec>,
}

impl SegmentPlan {
    /// The same spec repeated for every segment.
    pub fn uniform(segments: usize, overlap: usize, spec: SegmentSpec) -> Self {
        Self {
            segments,
            frames: spec.masks.shape().n,
            overlap,
            per_segment: vec![spec; segments],
        }
    }

    pub fn total_frames(&self) -> usize {
        total_frames(self.segments, self.frames, self.overlap)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 {
            return Err(Error::Config("segment plan needs at least one segment".into()));
        }
        if !(0 < self.overlap && self.overlap < self.frames) {
            return Err(Error::Config(format!(
                "overlap K={} must satisfy 0 < K < N={}",
                self.overlap, self.frames
            )));
        }
        if self.per_segment.len() != self.segments {
            return Err(Error::Config(format!(
                "{} segment specs for {} segments",
                self.per_segment.len(),
                self.segments
            )));
        }
        for (s, spec) in self.per_segment.iter().enumerate() {
            if spec.masks.shape().n != self.frames {
                return Err(Error::Config(format!(
                    "segment {s} masks have {} frames, plan has N={}",
                    spec.masks.shape().n,
                    self.frames
                )));
            }
            if spec.slots.is_empty() && spec.inversion_model.is_none() && s > 0 {
                return Err(Error::Config(format!("segment {s} has no model to invert the overlap with")));
            }
        }
        Ok(())
    }
}

/// Settings shared by all segments.
#[derive(Clone, Debug)]
pub struct ExtendSettings {
    pub sched: NoiseSchedule,
    pub ladder: AnnealLadder,
    pub svgd: SvgdConfig,
    pub particles: usize,
    pub seed: u64,
    /// How overlap frames become conditionals.
    pub overlap_source: ContextSource,
    pub inversion_mode: InversionMode,
    pub lambda: LambdaPolicy,
    pub projection: bool,
    pub recon: Option<ReconStep>,
    pub refine: Option<RefineConfig>,
}

impl ExtendSettings {
    pub fn new(sched: NoiseSchedule, ladder: AnnealLadder, svgd: SvgdConfig, particles: usize, seed: u64) -> Self {
        Self {
            sched,
            ladder,
            svgd,
            particles,
            seed,
            overlap_source: ContextSource::Inversion,
            inversion_mode: InversionMode::RoundTrip,
            lambda: LambdaPolicy::ProjectHard,
            projection: true,
            recon: None,
            refine: None,
        }
    }

    /// Seed of segment `s`; segment 0 uses the base seed.
    pub fn segment_seed(&self, s: usize) -> u64 {
        self.seed.wrapping_add(s as u64)
    }
}

#[derive(Clone, Debug)]
pub struct SegmentOutput {
    pub index: usize,
    pub seed: u64,
    pub ensemble: ParticleEnsemble,
    pub records: Vec<StepRecord>,
    /// Relative L2 between this segment's first `K` frames and the previous
    /// segment's last `K` (lead particles); `None` for the first segment.
    pub overlap_error: Option<f64>,
}

impl SegmentOutput {
    /// The particle carried into the sequence.
    pub fn lead(&self) -> &LatticeField {
        &self.ensemble.particles()[0]
    }
}

#[derive(Clone, Debug)]
pub struct Extension {
    pub sequence: LatticeField,
    pub segments: Vec<SegmentOutput>,
}

/// Conditionals for segment `s > 0`: the previous tail inverted (or noised)
/// in place of the first `K` frames, merged into the segment's own context.
fn overlap_context(
    prev_lead: &LatticeField,
    plan: &SegmentPlan,
    spec: &SegmentSpec,
    settings: &ExtendSettings,
    ladder: &AnnealLadder,
    seed: u64,
) -> Result<ContextConditionals> {
    let (n, k) = (plan.frames, plan.overlap);
    let shape = spec.masks.shape();
    let tail = prev_lead.frames(n - k..n)?;
    let mut reference = match &spec.context {
        Some(c) => c.reference().clone(),
        None => {
            // Frames past the overlap repeat the last pinned frame.
            let last = tail.frames(k - 1..k)?;
            let mut r = LatticeField::zeros(shape);
            for f in k..n {
                r.set_frames(f, &last)?;
            }
            r
        }
    };
    reference.set_frames(0, &tail)?;

    let pinned = match settings.overlap_source {
        ContextSource::Inversion => {
            let model = spec
                .inversion_model
                .clone()
                .or_else(|| spec.slots.first().map(|s| s.model.clone()))
                .ok_or_else(|| Error::Config("no model to invert the overlap with".into()))?;
            let sched = settings.sched;
            invert_conditionals(&reference, |x, tau| model.velocity(x, tau, &sched), ladder, settings.inversion_mode)?
        }
        ContextSource::Direct => {
            let noise = normal_field(shape, seed, SHARED_STREAM);
            direct_conditionals(&reference, &noise, ladder, &settings.sched)?
        }
    };
    let Some(own) = &spec.context else {
        return Ok(pinned);
    };
    if own.steps() != ladder.steps() {
        return Err(Error::Config(format!(
            "segment context has T={} but the ladder has T={}",
            own.steps(),
            ladder.steps()
        )));
    }
    let z = own
        .levels()
        .iter()
        .zip(pinned.levels())
        .map(|(o, p)| {
            let mut m = o.clone();
            m.set_frames(0, &p.frames(0..k)?)?;
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    ContextConditionals::new(settings.overlap_source, reference, z)
}

fn build_target(
    plan: &SegmentPlan,
    s: usize,
    settings: &ExtendSettings,
    prev: Option<&LatticeField>,
) -> Result<CompositeTarget> {
    let spec = &plan.per_segment[s];
    let ladder = spec.ladder.unwrap_or(settings.ladder);
    let (masks, context) = match prev {
        None => (spec.masks.clone(), spec.context.clone()),
        Some(lead) => (
            spec.masks.clone().with_pinned_frames(0..plan.overlap)?,
            Some(overlap_context(lead, plan, spec, settings, &ladder, settings.segment_seed(s))?),
        ),
    };
    let mut target = CompositeTarget::new(masks.shape(), settings.sched, ladder, spec.slots.clone(), masks)?
        .with_projection(settings.projection);
    // Reconstruction only applies where there is a reference to match.
    let recon = context.as_ref().and(settings.recon);
    if let Some(ctx) = context {
        target = target.with_context(ctx)?;
    }
    target
        .with_lambda(settings.lambda)?
        .with_recon(recon)?
        .with_refine(settings.refine)
}

/// Runs the segments in order. `sink` sees `(segment, record)` per level.
pub fn extend(
    plan: &SegmentPlan,
    settings: &ExtendSettings,
    sink: &mut dyn FnMut(usize, &StepRecord),
) -> Result<Extension> {
    plan.validate()?;
    let mut outputs: Vec<SegmentOutput> = Vec::with_capacity(plan.segments);
    for s in 0..plan.segments {
        let wrap = |e: Error| Error::Segment {
            segment: s,
            source: Box::new(e),
        };
        let prev = outputs.last().map(|o| o.lead().clone());
        let mut target = build_target(plan, s, settings, prev.as_ref()).map_err(wrap)?;
        let seed = settings.segment_seed(s);
        let mut records = Vec::new();
        let ensemble = anneal_sample(&mut target, &settings.svgd, settings.particles, seed, &mut |r| {
            sink(s, r);
            records.push(r.clone());
        })
        .map_err(wrap)?;
        let overlap_error = match &prev {
            None => None,
            Some(p) => {
                let (n, k) = (plan.frames, plan.overlap);
                let head = ensemble.particles()[0].frames(0..k)?;
                Some(relative_l2(&head, &p.frames(n - k..n)?)?)
            }
        };
        outputs.push(SegmentOutput {
            index: s,
            seed,
            ensemble,
            records,
            overlap_error,
        });
    }
    let mut parts = Vec::with_capacity(plan.segments);
    for (s, o) in outputs.iter().enumerate() {
        // Earlier copies of the overlap win.
        let skip = if s == 0 { 0 } else { plan.overlap };
        parts.push(o.lead().frames(skip..plan.frames)?);
    }
    let sequence = LatticeField::concat_frames(&parts)?;
    debug_assert_eq!(sequence.shape().n, plan.total_frames());
    Ok(Extension {
        sequence,
        segments: outputs,
    })
}
