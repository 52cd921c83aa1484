use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::lattice::{LatticeField, Shape};

/// Stream reserved for noise that is shared by the whole run rather than
/// owned by one particle.
pub const SHARED_STREAM: u64 = u64::MAX;

/// Standard-normal field from stream `stream` of the counter-based generator
/// keyed by `seed`.
pub fn normal_field(shape: Shape, seed: u64, stream: u64) -> LatticeField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    LatticeField::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

/// `L` particles sharing one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble {
    particles: Vec<LatticeField>,
    seed: u64,
}

impl ParticleEnsemble {
    /// Independent standard-normal particles, particle `l` drawn from stream `l`.
    pub fn standard_normal(shape: Shape, count: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidArgument("particle count must be >= 1".into()));
        }
        shape.validate()?;
        Ok(Self {
            particles: (0..count).map(|l| normal_field(shape, seed, l as u64)).collect(),
            seed,
        })
    }

    pub fn from_particles(particles: Vec<LatticeField>, seed: u64) -> Result<Self> {
        let first = particles
            .first()
            .ok_or_else(|| Error::InvalidArgument("particle count must be >= 1".into()))?;
        let shape = first.shape();
        for p in &particles {
            p.ensure_shape(shape)?;
        }
        Ok(Self { particles, seed })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.particles[0].shape()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn particles(&self) -> &[LatticeField] {
        &self.particles
    }

    pub fn particles_mut(&mut self) -> &mut [LatticeField] {
        &mut self.particles
    }

    pub fn into_particles(self) -> Vec<LatticeField> {
        self.particles
    }

    /// Elementwise mean over particles.
    pub fn mean_field(&self) -> LatticeField {
        mean_field(&self.particles)
    }

    /// Per-element unbiased variance across particles, averaged over elements.
    pub fn mean_variance(&self) -> f64 {
        let l = self.particles.len();
        if l < 2 {
            return 0.0;
        }
        let m = self.mean_field();
        let mut acc = 0.0;
        for p in &self.particles {
            acc += p.sq_dist(&m);
        }
        acc / ((l - 1) as f64 * m.len() as f64)
    }

    /// Grand mean over particles and elements.
    pub fn grand_mean(&self) -> f64 {
        self.mean_field().mean()
    }

    pub fn mean_pairwise_distance(&self) -> f64 {
        mean_pairwise_distance(&self.particles)
    }
}

pub fn mean_field(particles: &[LatticeField]) -> LatticeField {
    let mut m = LatticeField::zeros(particles[0].shape());
    for p in particles {
        m.axpy(1.0, p).expect("shared shape");
    }
    m.scale(1.0 / particles.len() as f64);
    m
}

/// Mean Euclidean distance over unordered pairs (0 for a single particle).
pub fn mean_pairwise_distance(particles: &[LatticeField]) -> f64 {
    let l = particles.len();
    if l < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..l {
        for j in i + 1..l {
            acc += particles[i].sq_dist(&particles[j]).sqrt();
        }
    }
    acc / (l * (l - 1) / 2) as f64
}
