//! Counter-based, splittable random streams.
//!
//! Every stream is keyed by a 64-bit seed plus a [`StreamId`]. The key is fed
//! directly to a ChaCha8 block function, so draw `n` of a stream depends only
//! on `(seed, stream id, n)`. Two systems that must see the same randomness
//! (the learner and the genie in a coupled run) simply read the same stream;
//! nothing needs to be stored.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. The discriminant is part of the stream key and
/// must never be renumbered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Arrival = 1,
    Service = 2,
    Explore = 3,
    ExploreTarget = 4,
    Coupling = 5,
    Policy = 6,
    ExternalArrival = 7,
    Observation = 8,
    ReplicationSeed = 9,
    Dispatch = 10,
    Check = 11,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub replication: u64,
    pub purpose: Purpose,
    /// Server index, or another per-purpose lane; `None` for global streams.
    pub server: Option<u64>,
}

impl StreamId {
    pub fn new(replication: u64, purpose: Purpose, server: Option<u64>) -> Self {
        Self {
            replication,
            purpose,
            server,
        }
    }

    pub fn global(purpose: Purpose) -> Self {
        Self::new(0, purpose, None)
    }

    pub fn server(purpose: Purpose, server: usize) -> Self {
        Self::new(0, purpose, Some(server as u64))
    }

    fn key(&self, seed: u64) -> [u8; 32] {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.replication.to_le_bytes());
        key[16..24].copy_from_slice(&(self.purpose as u64).to_le_bytes());
        key[24..32].copy_from_slice(&self.server.unwrap_or(u64::MAX).to_le_bytes());
        key
    }
}

/// A deterministic random stream identified by `(seed, id)`.
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    id: StreamId,
    inner: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        Self {
            seed,
            id,
            inner: ChaCha8Rng::from_seed(id.key(seed)),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    /// Uniform draw on `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Bernoulli draw; always consumes exactly one word.
    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform index in `0..n`.
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        self.inner.random_range(0..n)
    }

    /// Inverse-CDF draw from a (not necessarily normalized) weight vector.
    /// Consumes exactly one word.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        sample_weighted(weights, self.uniform() * total)
    }
}

/// Locate `target` in the cumulative sums of `weights`. Rounding that pushes
/// `target` past the last bucket lands on the last positive weight.
pub(crate) fn sample_weighted(weights: &[f64], target: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if target < acc {
                return i;
            }
        }
    }
    last_positive
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Seed for replication `replication` of scenario `scenario` under a base
/// seed. Adding scenarios or replications never changes existing seeds.
pub fn derive_seed(base: u64, scenario: u64, replication: u64) -> u64 {
    let id = StreamId::new(replication, Purpose::ReplicationSeed, Some(scenario));
    RandomStream::new(base, id).next_u64()
}
