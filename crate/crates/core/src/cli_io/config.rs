//! Run configuration: one TOML file, validated before any computation.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analytic::{GmmComponent, GmmExpert};
use crate::backend::{Endpoint, RemoteExpert, WirePrecision};
use crate::cli_io::tensor_io;
use crate::composition::{
    direct_conditionals, invert_conditionals, CellBox, CompositeTarget, ContextConditionals, ContextSource,
    ExpertSlot, InversionMode, LambdaPolicy, Mask, MaskBinding, MaskKind, MaskSet, ReconStep, RefineConfig,
    Smoothing,
};
use crate::error::{Error, Result};
use crate::expert::ScoreModel;
use crate::extension::{ExtendSettings, SegmentPlan, SegmentSpec};
use crate::flow::{AnnealLadder, NoiseSchedule, ScheduleKind, TauMapping, DEFAULT_EPS_CLAMP};
use crate::lattice::{LatticeField, Shape};
use crate::svgd::{normal_field, SvgdConfig, SHARED_STREAM};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "ANNEAL_STEIN_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Ensemble size `L`.
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub lattice: LatticeSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub ladder: LadderSpec,
    #[serde(default)]
    pub svgd: SvgdConfig,
    pub experts: Vec<ExpertSpec>,
    #[serde(default)]
    pub masks: MasksSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<ContextSpec>,
    #[serde(default)]
    pub lambda_policy: LambdaPolicy,
    /// Hard context projection after each Stein step.
    #[serde(default = "default_true")]
    pub projection: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recon: Option<ReconStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine: Option<RefineConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<SegmentsSpec>,
}

fn default_particles() -> usize {
    16
}

fn default_true() -> bool {
    true
}

fn default_one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub h: usize,
    pub w: usize,
    pub n: usize,
    #[serde(default = "default_channels")]
    pub c: usize,
}

fn default_channels() -> usize {
    1
}

impl LatticeSpec {
    pub fn shape(&self) -> Shape {
        Shape::new(self.h, self.w, self.n, self.c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default)]
    pub kind: ScheduleKind,
    #[serde(default = "default_eps")]
    pub eps_clamp: f64,
}

fn default_eps() -> f64 {
    DEFAULT_EPS_CLAMP
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::default(),
            eps_clamp: DEFAULT_EPS_CLAMP,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderSpec {
    pub steps: usize,
    #[serde(default)]
    pub mapping: TauMapping,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSpec {
    pub name: String,
    #[serde(default)]
    pub binding: BindingSpec,
    #[serde(default = "default_one")]
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gmm: Option<GmmSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote: Option<RemoteSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindingSpec {
    #[default]
    Fg,
    Sim,
    NotContext,
    Ones,
    Boxes(Vec<CellBox>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    pub components: Vec<ComponentSpec>,
    /// Cells outside these boxes get zero score from this expert.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Vec<CellBox>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    /// Defaults to equal weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    pub mean: MeanSpec,
    pub var: f64,
}

/// A constant or one value per lattice element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeanSpec {
    Scalar(f64),
    Field(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteSpec {
    pub endpoint: Endpoint,
    #[serde(default)]
    pub velocity: bool,
    #[serde(default)]
    pub precision: WirePrecision,
    #[serde(default)]
    pub conditioning: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

fn default_timeout() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSpec {
    Ones,
    Zeros,
    Boxes(Vec<CellBox>),
    Values(Vec<f64>),
}

impl MaskSpec {
    fn build(&self, kind: MaskKind, shape: Shape) -> Result<Mask> {
        match self {
            MaskSpec::Ones => Ok(Mask::ones(kind, shape)),
            MaskSpec::Zeros => Ok(Mask::zeros(kind, shape)),
            MaskSpec::Boxes(b) => Mask::from_boxes(kind, shape, b),
            MaskSpec::Values(v) => Mask::from_values(kind, shape, v.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MasksSpec {
    #[serde(default = "mask_ones")]
    pub fg: MaskSpec,
    #[serde(default = "mask_zeros")]
    pub sim: MaskSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothing: Option<Smoothing>,
}

fn mask_ones() -> MaskSpec {
    MaskSpec::Ones
}

fn mask_zeros() -> MaskSpec {
    MaskSpec::Zeros
}

impl Default for MasksSpec {
    fn default() -> Self {
        Self {
            fg: MaskSpec::Ones,
            sim: MaskSpec::Zeros,
            smoothing: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSpec {
    #[serde(default)]
    pub source: ContextSource,
    #[serde(default)]
    pub mode: InversionMode,
    pub reference: ReferenceSpec,
    /// Expert whose velocity inverts the reference; defaults to the first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inversion_expert: Option<String>,
    /// Directory of precomputed `z_XXXX.lt` levels (as written by `invert`),
    /// relative to the config file. Used instead of inverting when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSpec {
    Constant(f64),
    /// Tensor file, relative to the config file.
    File(PathBuf),
    /// One exact draw from an inline mixture expert.
    Draw { expert: String, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentsSpec {
    pub count: usize,
    pub overlap: usize,
    /// Added to every inline mixture mean per segment index.
    #[serde(default)]
    pub mean_shift: f64,
}

/// A dotted `key=value` override; the value is read as a TOML literal and
/// falls back to a plain string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let value = parse_literal(raw.trim());
    set_path(doc, key.trim(), value)
}

fn parse_literal(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c` in a TOML table, creating intermediate tables.
pub fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let mut cur = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key '{key}': '{p}' is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn remove_path(doc: &mut toml::Table, key: &str) {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = doc;
    for p in &parts[..parts.len() - 1] {
        match cur.get_mut(*p).and_then(|v| v.as_table_mut()) {
            Some(t) => cur = t,
            None => return,
        }
    }
    cur.remove(parts[parts.len() - 1]);
}

impl RunConfig {
    pub fn from_table(doc: toml::Table) -> Result<Self> {
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(doc)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn shape(&self) -> Shape {
        self.lattice.shape()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule.kind, self.schedule.eps_clamp).map_err(as_config)
    }

    pub fn ladder(&self) -> Result<AnnealLadder> {
        AnnealLadder::new(self.ladder.steps, self.ladder.mapping, self.schedule.eps_clamp).map_err(as_config)
    }

    /// Schema-level checks that need no I/O.
    pub fn validate(&self) -> Result<()> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::Config("lattice dimensions must be positive".into()));
        }
        if self.particles == 0 {
            return Err(Error::Config("particles must be >= 1".into()));
        }
        self.schedule()?;
        self.ladder()?;
        self.svgd.validate()?;
        if self.experts.is_empty() {
            return Err(Error::Config("at least one expert is required".into()));
        }
        for (i, e) in self.experts.iter().enumerate() {
            if self.experts[..i].iter().any(|o| o.name == e.name) {
                return Err(Error::Config(format!("duplicate expert name '{}'", e.name)));
            }
            if e.gmm.is_some() == e.remote.is_some() {
                return Err(Error::Config(format!("expert '{}' needs exactly one of gmm / remote", e.name)));
            }
            if !(e.weight >= 0.0 && e.weight.is_finite()) {
                return Err(Error::Config(format!("expert '{}' weight must be >= 0", e.name)));
            }
            if let Some(g) = &e.gmm {
                g.build(&e.name, shape, 0.0).map_err(as_config)?;
            }
        }
        self.masks().map_err(as_config)?;
        if let LambdaPolicy::Soft(l) = self.lambda_policy {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("soft lambda {l} must be >= 0")));
            }
        }
        if let Some(r) = &self.recon {
            if !(r.step_size > 0.0) || r.every == 0 {
                return Err(Error::Config("recon.step_size must be > 0 and recon.every >= 1".into()));
            }
        }
        if let Some(r) = &self.refine {
            r.validate().map_err(as_config)?;
        }
        if let Some(ctx) = &self.context {
            if let Some(name) = &ctx.inversion_expert {
                self.expert_index(name)?;
            }
            if let ReferenceSpec::Draw { expert, .. } = &ctx.reference {
                let i = self.expert_index(expert)?;
                if self.experts[i].gmm.is_none() {
                    return Err(Error::Config(format!("reference draw needs an inline expert, '{expert}' is remote")));
                }
            }
        }
        if let Some(seg) = &self.segments {
            if seg.count == 0 {
                return Err(Error::Config("segments.count must be >= 1".into()));
            }
            if !(0 < seg.overlap && seg.overlap < shape.n) {
                return Err(Error::Config(format!(
                    "segments.overlap K={} must satisfy 0 < K < N={}",
                    seg.overlap, shape.n
                )));
            }
        }
        Ok(())
    }

    fn expert_index(&self, name: &str) -> Result<usize> {
        self.experts
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| Error::Config(format!("unknown expert '{name}'")))
    }

    pub fn masks(&self) -> Result<MaskSet> {
        let shape = self.shape();
        MaskSet::new(
            self.masks.fg.build(MaskKind::Fg, shape)?,
            self.masks.sim.build(MaskKind::Sim, shape)?,
            self.masks.smoothing,
        )
    }

    /// Inline experts shifted by `shift`; remote experts connect here.
    pub fn build_models(&self, shift: f64) -> Result<Vec<Arc<dyn ScoreModel>>> {
        let shape = self.shape();
        self.experts
            .iter()
            .map(|e| -> Result<Arc<dyn ScoreModel>> {
                match (&e.gmm, &e.remote) {
                    (Some(g), _) => Ok(Arc::new(g.build(&e.name, shape, shift)?)),
                    (None, Some(r)) => Ok(Arc::new(
                        RemoteExpert::builder(e.name.clone(), r.endpoint.clone(), r.conditioning.clone())
                            .velocity(r.velocity)
                            .precision(r.precision)
                            .timeout(Duration::from_secs_f64(r.timeout_secs))
                            .connect()?,
                    )),
                    (None, None) => unreachable!("validated"),
                }
            })
            .collect()
    }

    fn slots(&self, models: &[Arc<dyn ScoreModel>]) -> Result<Vec<ExpertSlot>> {
        let shape = self.shape();
        self.experts
            .iter()
            .zip(models)
            .map(|(e, m)| {
                let binding = match &e.binding {
                    BindingSpec::Fg => MaskBinding::Fg,
                    BindingSpec::Sim => MaskBinding::Sim,
                    BindingSpec::NotContext => MaskBinding::NotContext,
                    BindingSpec::Ones => MaskBinding::Ones,
                    BindingSpec::Boxes(b) => MaskBinding::Custom(Mask::from_boxes(MaskKind::Custom, shape, b)?),
                };
                Ok(ExpertSlot::new(m.clone(), binding).weighted(e.weight))
            })
            .collect()
    }

    /// The clean reference of the context, if configured.
    pub fn reference(&self, base_dir: &Path) -> Result<Option<LatticeField>> {
        let Some(ctx) = &self.context else {
            return Ok(None);
        };
        let shape = self.shape();
        let r = match &ctx.reference {
            ReferenceSpec::Constant(v) => LatticeField::filled(shape, *v),
            ReferenceSpec::File(p) => {
                let f = tensor_io::read_tensor(&base_dir.join(p))?;
                f.ensure_shape(shape).map_err(as_config)?;
                f
            }
            ReferenceSpec::Draw { expert, seed } => {
                let e = &self.experts[self.expert_index(expert)?];
                let g = e.gmm.as_ref().expect("validated").build(&e.name, shape, 0.0)?;
                draw_gmm(&g, *seed)
            }
        };
        Ok(Some(r))
    }

    fn conditionals(
        &self,
        base_dir: &Path,
        reference: &LatticeField,
        models: &[Arc<dyn ScoreModel>],
        ladder: &AnnealLadder,
        sched: &NoiseSchedule,
    ) -> Result<ContextConditionals> {
        let ctx = self.context.as_ref().expect("context configured");
        if let Some(dir) = &ctx.cache {
            return load_conditionals(&base_dir.join(dir), ctx.source, reference, ladder.steps());
        }
        match ctx.source {
            ContextSource::Direct => {
                let noise = normal_field(self.shape(), self.seed, SHARED_STREAM);
                direct_conditionals(reference, &noise, ladder, sched)
            }
            ContextSource::Inversion => {
                let i = match &ctx.inversion_expert {
                    Some(n) => self.expert_index(n)?,
                    None => 0,
                };
                let m = &models[i];
                invert_conditionals(reference, |x, tau| m.velocity(x, tau, sched), ladder, ctx.mode)
            }
        }
    }

    /// Conditionals computed from scratch, ignoring any cache.
    pub fn compute_conditionals(&self, base_dir: &Path) -> Result<ContextConditionals> {
        let mut me = self.clone();
        let ctx = me
            .context
            .as_mut()
            .ok_or_else(|| Error::Config("invert needs a [context] section".into()))?;
        ctx.cache = None;
        let sched = me.schedule()?;
        let ladder = me.ladder()?;
        let models = me.build_models(0.0)?;
        let reference = me.reference(base_dir)?.expect("context has a reference");
        me.conditionals(base_dir, &reference, &models, &ladder, &sched)
    }

    /// The single-segment target.
    pub fn build_target(&self, base_dir: &Path) -> Result<CompositeTarget> {
        let sched = self.schedule()?;
        let ladder = self.ladder()?;
        let models = self.build_models(0.0)?;
        let mut target = CompositeTarget::new(self.shape(), sched, ladder, self.slots(&models)?, self.masks()?)?
            .with_projection(self.projection);
        if let Some(reference) = self.reference(base_dir)? {
            let ctx = self.conditionals(base_dir, &reference, &models, &ladder, &sched)?;
            target = target.with_context(ctx)?;
        }
        target
            .with_lambda(self.lambda_policy)?
            .with_recon(self.recon)?
            .with_refine(self.refine)
    }

    /// Segment plan plus shared settings for `extend`.
    pub fn build_extension(&self, base_dir: &Path) -> Result<(SegmentPlan, ExtendSettings)> {
        let seg = self
            .segments
            .ok_or_else(|| Error::Config("extend needs a [segments] section".into()))?;
        let sched = self.schedule()?;
        let ladder = self.ladder()?;
        let reference = self.reference(base_dir)?;
        let mut per_segment = Vec::with_capacity(seg.count);
        for s in 0..seg.count {
            let models = self.build_models(seg.mean_shift * s as f64)?;
            let mut spec = SegmentSpec::new(self.slots(&models)?, self.masks()?);
            if let Some(ctx) = &self.context {
                if s == 0 {
                    let r = reference.as_ref().expect("context has a reference");
                    spec = spec.with_context(self.conditionals(base_dir, r, &models, &ladder, &sched)?);
                }
                if let Some(n) = &ctx.inversion_expert {
                    spec = spec.with_inversion_model(models[self.expert_index(n)?].clone());
                }
            }
            per_segment.push(spec);
        }
        let plan = SegmentPlan {
            segments: seg.count,
            frames: self.lattice.n,
            overlap: seg.overlap,
            per_segment,
        };
        let mut st = ExtendSettings::new(sched, ladder, self.svgd, self.particles, self.seed);
        if let Some(ctx) = &self.context {
            st.overlap_source = ctx.source;
            st.inversion_mode = ctx.mode;
        }
        st.lambda = self.lambda_policy;
        st.projection = self.projection;
        st.recon = self.recon;
        st.refine = self.refine;
        Ok((plan, st))
    }

    /// Inline experts at shift 0, `None` if any expert is remote.
    pub fn inline_experts(&self) -> Option<Vec<GmmExpert>> {
        self.experts
            .iter()
            .map(|e| e.gmm.as_ref().and_then(|g| g.build(&e.name, self.shape(), 0.0).ok()))
            .collect()
    }
}

impl GmmSpec {
    pub fn build(&self, name: &str, shape: Shape, shift: f64) -> Result<GmmExpert> {
        if self.components.is_empty() {
            return Err(Error::Config(format!("expert '{name}' has no components")));
        }
        let k = self.components.len() as f64;
        let components = self
            .components
            .iter()
            .map(|c| {
                let mean = match &c.mean {
                    MeanSpec::Scalar(v) => LatticeField::filled(shape, v + shift),
                    MeanSpec::Field(vs) => LatticeField::from_vec(shape, vs.iter().map(|v| v + shift).collect())?,
                };
                Ok(GmmComponent {
                    weight: c.weight.unwrap_or(1.0 / k),
                    mean,
                    var: c.var,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let region = match &self.region {
            Some(b) => Some(Mask::from_boxes(MaskKind::Custom, shape, b)?),
            None => None,
        };
        GmmExpert::new(name, components, region)
    }
}

/// File name of level `t` in a conditionals directory.
pub fn level_file(t: usize) -> String {
    format!("z_{t:04}.lt")
}

/// Reads `z_0000.lt ..= z_{T}.lt` from `dir`.
pub fn load_conditionals(
    dir: &Path,
    source: ContextSource,
    reference: &LatticeField,
    steps: usize,
) -> Result<ContextConditionals> {
    let z = (0..=steps)
        .map(|t| {
            let f = tensor_io::read_tensor(&dir.join(level_file(t)))?;
            f.ensure_same_shape(reference).map_err(as_config)?;
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    ContextConditionals::new(source, reference.clone(), z)
}

/// Exact sample from the clean mixture.
pub fn draw_gmm(g: &GmmExpert, seed: u64) -> LatticeField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let comps = g.components();
    let comp = comps
        .iter()
        .find(|c| {
            acc += c.weight;
            u < acc
        })
        .unwrap_or(&comps[comps.len() - 1]);
    let sd = comp.var.sqrt();
    let vals = comp.mean.data().iter().map(|m| m + sd * rng.sample::<f64, _>(StandardNormal)).collect();
    LatticeField::from_vec(comp.mean.shape(), vals).expect("same shape")
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}
