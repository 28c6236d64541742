//! Deterministic RNG streams keyed by (seed, component label, index).
//!
//! Every randomized component draws from its own ChaCha stream so that runs
//! are reproducible under a fixed master seed regardless of thread count or
//! the order in which unrelated components execute.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Factory for per-component RNG streams derived from one master seed.
#[derive(Debug, Clone, Copy)]
pub struct RngFactory {
    master_seed: u64,
}

impl RngFactory {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// RNG stream for `(label, index)`. The same key always yields the same
    /// stream; distinct keys yield statistically independent streams.
    pub fn stream(&self, label: &str, index: u64) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        let mut h = self.master_seed ^ 0x9e37_79b9_7f4a_7c15;
        for &b in label.as_bytes() {
            h = mix64(h ^ u64::from(b));
        }
        h = mix64(h ^ index);
        for chunk in seed.chunks_mut(8) {
            h = mix64(h);
            chunk.copy_from_slice(&h.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }

    /// Sub-factory whose labels are prefixed with `scope`, so nested
    /// components can derive streams without threading label strings around.
    pub fn scoped(&self, scope: &str) -> ScopedRng {
        ScopedRng {
            factory: *self,
            scope: scope.to_string(),
        }
    }
}

/// An [`RngFactory`] with a fixed label prefix.
#[derive(Debug, Clone)]
pub struct ScopedRng {
    factory: RngFactory,
    scope: String,
}

impl ScopedRng {
    pub fn stream(&self, label: &str, index: u64) -> ChaCha8Rng {
        self.factory
            .stream(&format!("{}/{}", self.scope, label), index)
    }

    pub fn scoped(&self, scope: &str) -> ScopedRng {
        ScopedRng {
            factory: self.factory,
            scope: format!("{}/{}", self.scope, scope),
        }
    }
}

/// splitmix64 finalizer.
fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
