use serde::{Deserialize, Serialize};

/// Monotone count of gradient-oracle evaluations.
///
/// Each worker owns its own shard; shards are combined with [`merge`](Self::merge)
/// once stepping has finished.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradientCounter {
    total: u64,
}

impl GradientCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn record(&mut self) {
        self.total += 1;
    }

    #[inline]
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn merge(&mut self, shard: GradientCounter) {
        self.total += shard.total;
    }
}

impl std::iter::Sum for GradientCounter {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        let mut acc = GradientCounter::new();
        for c in iter {
            acc.merge(c);
        }
        acc
    }
}
