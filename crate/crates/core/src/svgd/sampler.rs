use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composition::CompositeTarget;
use crate::error::{Error, Result};
use crate::flow::{clean_prediction, velocity_from_score};
use crate::lattice::LatticeField;
use crate::svgd::ensemble::{mean_field, mean_pairwise_distance, ParticleEnsemble};
use crate::svgd::kernel::{directions_impl, median_bandwidth, BANDWIDTH_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvgdConfig {
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_inner")]
    pub inner_iters: usize,
    #[serde(default = "default_true")]
    pub repulsion: bool,
    #[serde(default = "default_floor")]
    pub bandwidth_floor: f64,
    /// Worker threads; 0 picks the machine default.
    #[serde(default)]
    pub workers: usize,
}

fn default_eta() -> f64 {
    1e-3
}

fn default_inner() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_floor() -> f64 {
    BANDWIDTH_FLOOR
}

impl Default for SvgdConfig {
    fn default() -> Self {
        Self {
            eta: default_eta(),
            inner_iters: default_inner(),
            repulsion: true,
            bandwidth_floor: default_floor(),
            workers: 0,
        }
    }
}

impl SvgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("svgd.eta {} must be > 0", self.eta)));
        }
        if self.inner_iters == 0 {
            return Err(Error::Config("svgd.inner_iters must be >= 1".into()));
        }
        if !(self.bandwidth_floor > 0.0) {
            return Err(Error::Config("svgd.bandwidth_floor must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-level progress record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub tau: f64,
    pub bandwidth: f64,
    pub mean_log_density: Option<f64>,
    pub mean_pairwise_distance: f64,
}

/// Initializes `count` standard-normal particles and anneals them.
pub fn anneal_sample(
    target: &mut CompositeTarget,
    cfg: &SvgdConfig,
    count: usize,
    seed: u64,
    sink: &mut dyn FnMut(&StepRecord),
) -> Result<ParticleEnsemble> {
    let init = ParticleEnsemble::standard_normal(target.shape(), count, seed)?;
    anneal_from(target, cfg, init, sink)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))
}

/// Order-preserving parallel map returning the lowest-index error. A
/// single-thread pool runs inline, which gives the same result without the
/// hand-off cost.
fn par_map<T: Send>(pool: &rayon::ThreadPool, n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    if pool.current_num_threads() == 1 {
        return (0..n).map(f).collect();
    }
    let results: Vec<Result<T>> = pool.install(|| (0..n).into_par_iter().map(&f).collect());
    results.into_iter().collect()
}

fn record(target: &CompositeTarget, t: usize, h: f64, xs: &[LatticeField]) -> StepRecord {
    let dens: Option<Vec<f64>> = xs
        .iter()
        .map(|x| target.clean_log_density(x).and_then(|r| r.ok()))
        .collect();
    StepRecord {
        t,
        tau: target.tau(t),
        bandwidth: h,
        mean_log_density: dens.map(|d| d.iter().sum::<f64>() / d.len() as f64),
        mean_pairwise_distance: mean_pairwise_distance(xs),
    }
}

/// Runs the annealing loop `t = T-1, ..., 0` from an existing ensemble.
///
/// Per level: scores at `tau(t)` on the current positions drive an Euler push
/// of length `step(t+1)`; the bandwidth is fixed on the pushed ensemble; each
/// inner iteration applies a Jacobi Stein step followed by the context
/// projection (the first iteration reuses the push scores, later ones
/// re-evaluate on the projected particles); the reconstruction step and mask
/// refinement follow when scheduled.
pub fn anneal_from(
    target: &mut CompositeTarget,
    cfg: &SvgdConfig,
    init: ParticleEnsemble,
    sink: &mut dyn FnMut(&StepRecord),
) -> Result<ParticleEnsemble> {
    cfg.validate()?;
    target.validate()?;
    init.particles()[0].ensure_shape(target.shape())?;
    let pool = pool(cfg.workers)?;
    let seed = init.seed();
    let steps = target.ladder().steps();
    let mut xs = init.into_particles();
    let l = xs.len();
    sink(&record(target, steps, median_bandwidth(&xs, cfg.bandwidth_floor), &xs));

    for t in (0..steps).rev() {
        let tgt: &CompositeTarget = target;
        let tau = tgt.tau(t);
        let dt = tgt.ladder().step(t + 1);
        let sched = *tgt.schedule();

        let scores = par_map(&pool, l, |i| tgt.composed_score(&xs[i], t))?;
        let mut ys = par_map(&pool, l, |i| {
            let v = velocity_from_score(&xs[i], &scores[i], tau, &sched)?;
            let mut y = xs[i].clone();
            y.axpy(dt, &v)?;
            Ok(y)
        })?;
        let h = median_bandwidth(&ys, cfg.bandwidth_floor);

        let mut cur_scores = scores;
        for it in 0..cfg.inner_iters {
            if it > 0 {
                cur_scores = par_map(&pool, l, |i| tgt.composed_score(&ys[i], t))?;
            }
            let phis = if pool.current_num_threads() == 1 {
                directions_impl(&ys, &cur_scores, h, cfg.repulsion, false)?
            } else {
                pool.install(|| directions_impl(&ys, &cur_scores, h, cfg.repulsion, true))?
            };
            let snapshot = &ys;
            ys = par_map(&pool, l, |i| {
                let mut y = snapshot[i].clone();
                y.axpy(cfg.eta, &phis[i])?;
                tgt.context_project(&y, t)
            })?;
        }

        if tgt.recon_due(t) {
            ys = par_map(&pool, l, |i| {
                let s = tgt.composed_score(&ys[i], t)?;
                tgt.recon_grad_step(&ys[i], t, &s)
            })?;
        }

        if let Some(bad) = ys.iter().position(|y| !y.is_finite()) {
            return Err(Error::Diverged { t, particle: bad });
        }

        if tgt.refine_due(t) {
            let x0s = par_map(&pool, l, |i| {
                let s = tgt.composed_score(&ys[i], t)?;
                let v = velocity_from_score(&ys[i], &s, tau, &sched)?;
                clean_prediction(&ys[i], &v, tau, &sched)
            })?;
            target.refine(&mean_field(&x0s))?;
        }

        xs = ys;
        sink(&record(target, t, h, &xs));
    }
    ParticleEnsemble::from_particles(xs, seed)
}
