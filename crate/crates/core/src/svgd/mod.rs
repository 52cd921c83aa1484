//! Particle ensemble, the RBF Stein direction and the annealed sampler.

mod ensemble;
mod kernel;
mod sampler;

pub use ensemble::{mean_field, mean_pairwise_distance, normal_field, ParticleEnsemble, SHARED_STREAM};
pub use kernel::{median_bandwidth, rbf, svgd_direction, svgd_directions, BANDWIDTH_FLOOR};
pub use sampler::{anneal_from, anneal_sample, StepRecord, SvgdConfig};
