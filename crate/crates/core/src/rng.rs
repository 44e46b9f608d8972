//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a run seed and positioned on
//! its own 64-bit stream id, so the draws a particle sees depend only on
//! `(seed, domain, index)` and never on which thread happens to run it.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stream domains. Keeping them disjoint means e.g. ground-truth draws never
/// alias sampler noise for the same seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Domain {
    General = 0,
    Particle = 1,
    GroundTruth = 2,
    Bandwidth = 3,
}

#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::derive(seed, Domain::General, 0)
    }

    /// Independent substream `index` of `domain` under `seed`.
    pub fn derive(seed: u64, domain: Domain, index: u32) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(((domain as u64) << 32) | index as u64);
        Self { inner }
    }

    /// Per-particle stream used by every sampler.
    pub fn for_particle(seed: u64, index: usize) -> Self {
        Self::derive(seed, Domain::Particle, index as u32)
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }

    pub fn normal_vec(&mut self, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        self.fill_normal(&mut v);
        v
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Access to the underlying generator for `rand` distribution APIs.
    pub fn rng(&mut self) -> &mut impl RngCore {
        &mut self.inner
    }
}
