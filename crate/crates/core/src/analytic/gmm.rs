use std::f64::consts::PI;

use crate::composition::Mask;
use crate::error::{Error, Result};
use crate::expert::ScoreModel;
use crate::flow::{NoiseSchedule, PathPoint};
use crate::lattice::{LatticeField, Shape};

/// One isotropic component `w N(mean, var I)` of the clean data distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: LatticeField,
    pub var: f64,
}

/// Isotropic Gaussian-mixture expert. Its marginal under the path is again a
/// mixture, with means `alpha mu_k` and variances `alpha^2 v_k + sigma^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmExpert {
    name: String,
    shape: Shape,
    components: Vec<GmmComponent>,
    region: Option<Mask>,
}

impl GmmExpert {
    pub fn new(name: impl Into<String>, components: Vec<GmmComponent>, region: Option<Mask>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidArgument("GMM expert needs at least one component".into()))?;
        let shape = first.mean.shape();
        let mut total = 0.0;
        for c in &components {
            c.mean.ensure_shape(shape)?;
            if !(c.var > 0.0 && c.var.is_finite()) {
                return Err(Error::InvalidArgument(format!("component variance {} must be > 0", c.var)));
            }
            if !(c.weight >= 0.0) {
                return Err(Error::InvalidArgument(format!("component weight {} is negative", c.weight)));
            }
            if !c.mean.is_finite() {
                return Err(Error::InvalidArgument("component mean is not finite".into()));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("component weights sum to {total}, not 1")));
        }
        if let Some(r) = &region {
            r.ensure_fits(shape)?;
        }
        Ok(Self {
            name: name.into(),
            shape,
            components,
            region,
        })
    }

    /// Single component `N(mean, var I)`.
    pub fn gaussian(name: impl Into<String>, mean: LatticeField, var: f64) -> Result<Self> {
        Self::new(name, vec![GmmComponent { weight: 1.0, mean, var }], None)
    }

    /// Single component with a constant mean.
    pub fn isotropic(name: impl Into<String>, shape: Shape, mean: f64, var: f64) -> Result<Self> {
        Self::gaussian(name, LatticeField::filled(shape, mean), var)
    }

    /// Equal-weight symmetric pair with constant means `±offset`.
    pub fn symmetric_pair(name: impl Into<String>, shape: Shape, offset: f64, var: f64) -> Result<Self> {
        Self::new(
            name,
            vec![
                GmmComponent { weight: 0.5, mean: LatticeField::filled(shape, -offset), var },
                GmmComponent { weight: 0.5, mean: LatticeField::filled(shape, offset), var },
            ],
            None,
        )
    }

    pub fn with_region(mut self, region: Mask) -> Result<Self> {
        region.ensure_fits(self.shape)?;
        self.region = Some(region);
        Ok(self)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn region(&self) -> Option<&Mask> {
        self.region.as_ref()
    }

    pub fn is_single_gaussian(&self) -> bool {
        self.components.len() == 1 && self.region.is_none()
    }

    /// Copy with every component mean shifted by `delta`.
    pub fn shifted(&self, delta: f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.components {
            c.mean = c.mean.map(|m| m + delta);
        }
        out
    }

    /// Copy restricted to (or embedded into) a lattice with `frames` frames:
    /// existing frames are kept, extra frames get the last frame's values.
    pub fn resized_frames(&self, frames: usize) -> Result<Self> {
        let shape = self.shape.with_frames(frames);
        let mut out = self.clone();
        out.shape = shape;
        for c in &mut out.components {
            c.mean = resize_frames(&c.mean, frames)?;
        }
        if let Some(r) = &self.region {
            let vals = resize_frames(&LatticeField::from_vec(r.shape(), r.values().to_vec())?, frames)?;
            out.region = Some(Mask::from_values(r.kind(), shape, vals.into_vec())?);
        }
        Ok(out)
    }

    /// `log w_k + log N(x; alpha mu_k, (alpha^2 v_k + sigma^2) I)` over cells weighted by `weights`.
    fn component_logs(&self, x: &LatticeField, p: &PathPoint, weights: Option<&[f64]>) -> Vec<f64> {
        let c = self.shape.c;
        self.components
            .iter()
            .map(|comp| {
                let var = p.marginal_var(comp.var);
                let norm = -0.5 * (2.0 * PI * var).ln();
                let mut acc = 0.0;
                for (i, (&xi, &mi)) in x.data().iter().zip(comp.mean.data()).enumerate() {
                    let r = xi - p.alpha * mi;
                    let term = -0.5 * r * r / var + norm;
                    acc += match weights {
                        Some(w) => w[i / c] * term,
                        None => term,
                    };
                }
                comp.weight.ln() + acc
            })
            .collect()
    }

    fn responsibilities(&self, x: &LatticeField, p: &PathPoint) -> Vec<f64> {
        let mut w = self.component_logs(x, p, None);
        let lse = log_sum_exp(&w);
        w.iter_mut().for_each(|v| *v = (*v - lse).exp());
        w
    }

    /// Score of the convolved mixture, zeroed (weighted) outside `region`.
    pub fn marginal_score(&self, x: &LatticeField, tau: f64, sched: &NoiseSchedule) -> Result<LatticeField> {
        x.ensure_shape(self.shape)?;
        let p = sched.point(sched.score_tau(tau)?);
        let resp = self.responsibilities(x, &p);
        let mut out = LatticeField::zeros(self.shape);
        for (comp, r) in self.components.iter().zip(&resp) {
            if *r == 0.0 {
                continue;
            }
            let var = p.marginal_var(comp.var);
            for ((o, &xi), &mi) in out.data_mut().iter_mut().zip(x.data()).zip(comp.mean.data()) {
                *o -= r * (xi - p.alpha * mi) / var;
            }
        }
        if let Some(region) = &self.region {
            out = region.apply(&out)?;
        }
        Ok(out)
    }

    /// Exact probability-flow velocity `alpha_dot E[x1|x] + sigma_dot E[eps|x]`,
    /// well defined down to `tau = 0`.
    pub fn exact_velocity(&self, x: &LatticeField, tau: f64, sched: &NoiseSchedule) -> Result<LatticeField> {
        x.ensure_shape(self.shape)?;
        let p = sched.point(sched.score_tau(tau)?);
        let resp = self.responsibilities(x, &p);
        let mut out = LatticeField::zeros(self.shape);
        for (comp, r) in self.components.iter().zip(&resp) {
            if *r == 0.0 {
                continue;
            }
            let var = p.marginal_var(comp.var);
            let gain_x1 = p.alpha * comp.var / var;
            let gain_eps = p.sigma / var;
            for ((o, &xi), &mi) in out.data_mut().iter_mut().zip(x.data()).zip(comp.mean.data()) {
                let resid = xi - p.alpha * mi;
                let e_x1 = mi + gain_x1 * resid;
                let e_eps = gain_eps * resid;
                *o += r * (p.alpha_dot * e_x1 + p.sigma_dot * e_eps);
            }
        }
        Ok(out)
    }

    /// Log-density of the marginal at `tau`, with per-cell exponents `mask`
    /// (`mask = 0` everywhere gives the constant density 1).
    pub fn log_density(&self, x: &LatticeField, tau: f64, sched: &NoiseSchedule, mask: Option<&Mask>) -> Result<f64> {
        x.ensure_shape(self.shape)?;
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Domain(format!("tau = {tau} outside [0, 1]")));
        }
        let p = sched.point(tau);
        let weights: Option<Vec<f64>> = match (mask, &self.region) {
            (None, None) => None,
            (Some(m), None) => {
                m.ensure_fits(self.shape)?;
                Some(m.values().to_vec())
            }
            (None, Some(r)) => Some(r.values().to_vec()),
            (Some(m), Some(r)) => {
                m.ensure_fits(self.shape)?;
                Some(m.values().iter().zip(r.values()).map(|(a, b)| a * b).collect())
            }
        };
        let logs = self.component_logs(x, &p, weights.as_deref());
        Ok(log_sum_exp(&logs))
    }
}

impl ScoreModel for GmmExpert {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, x: &LatticeField, tau: f64, sched: &NoiseSchedule) -> Result<LatticeField> {
        self.marginal_score(x, tau, sched)
    }

    fn velocity(&self, x: &LatticeField, tau: f64, sched: &NoiseSchedule) -> Result<LatticeField> {
        if self.region.is_some() {
            let tau = sched.velocity_tau(tau)?;
            let s = self.marginal_score(x, tau, sched)?;
            return crate::flow::velocity_from_score(x, &s, tau, sched);
        }
        self.exact_velocity(x, tau, sched)
    }

    fn as_gmm(&self) -> Option<&GmmExpert> {
        Some(self)
    }
}

/// Free-function form of [`GmmExpert::marginal_score`].
pub fn gmm_marginal_score(
    x: &LatticeField,
    tau: f64,
    expert: &GmmExpert,
    sched: &NoiseSchedule,
) -> Result<LatticeField> {
    expert.marginal_score(x, tau, sched)
}

fn resize_frames(f: &LatticeField, frames: usize) -> Result<LatticeField> {
    let s = f.shape();
    let keep = s.n.min(frames);
    let mut out = LatticeField::zeros(s.with_frames(frames));
    out.set_frames(0, &f.frames(0..keep)?)?;
    if frames > keep {
        let last = f.frames(s.n - 1..s.n)?;
        for n in keep..frames {
            out.set_frames(n, &last)?;
        }
    }
    Ok(out)
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
