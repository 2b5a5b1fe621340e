//! Storage for quantities indexed by a (real time, prediction time) pair.

use serde::{Deserialize, Serialize};

/// Dense triangular table over all pairs `0 <= t < tau <= horizon`.
///
/// Rows are ordered by `t`, and within a row by `tau`, so iteration order is
/// `(0,1), (0,2), .., (0,T), (1,2), .., (T-1,T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMap<V> {
    horizon: usize,
    values: Vec<V>,
}

/// Number of pairs `0 <= t < tau <= horizon`.
pub fn pair_count(horizon: usize) -> usize {
    horizon * (horizon + 1) / 2
}

fn row_start(horizon: usize, t: usize) -> usize {
    // sum_{s < t} (horizon - s)
    t * horizon - t * t.saturating_sub(1) / 2
}

impl<V> PairMap<V> {
    pub fn from_fn(horizon: usize, mut f: impl FnMut(usize, usize) -> V) -> Self {
        let mut values = Vec::with_capacity(pair_count(horizon));
        for t in 0..horizon {
            for tau in t + 1..=horizon {
                values.push(f(t, tau));
            }
        }
        PairMap { horizon, values }
    }

    pub fn try_from_fn<E>(horizon: usize, mut f: impl FnMut(usize, usize) -> Result<V, E>) -> Result<Self, E> {
        let mut values = Vec::with_capacity(pair_count(horizon));
        for t in 0..horizon {
            for tau in t + 1..=horizon {
                values.push(f(t, tau)?);
            }
        }
        Ok(PairMap { horizon, values })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn index(&self, t: usize, tau: usize) -> usize {
        assert!(
            t < tau && tau <= self.horizon,
            "pair (t={t}, tau={tau}) outside horizon {}",
            self.horizon
        );
        row_start(self.horizon, t) + (tau - t - 1)
    }

    pub fn get(&self, t: usize, tau: usize) -> &V {
        &self.values[self.index(t, tau)]
    }

    pub fn get_mut(&mut self, t: usize, tau: usize) -> &mut V {
        let i = self.index(t, tau);
        &mut self.values[i]
    }

    /// All values predicted from real time `t`, ordered by `tau = t+1..=horizon`.
    pub fn row(&self, t: usize) -> &[V] {
        let start = row_start(self.horizon, t);
        &self.values[start..start + (self.horizon - t)]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &V)> + '_ {
        pairs(self.horizon).zip(&self.values).map(|((t, tau), v)| (t, tau, v))
    }

    pub fn values(&self) -> &[V] {
        &self.values
    }

    pub fn map<W>(&self, mut f: impl FnMut(usize, usize, &V) -> W) -> PairMap<W> {
        PairMap {
            horizon: self.horizon,
            values: self.iter().map(|(t, tau, v)| f(t, tau, v)).collect(),
        }
    }
}

/// Iterator over `(t, tau)` in table order.
pub fn pairs(horizon: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..horizon).flat_map(move |t| (t + 1..=horizon).map(move |tau| (t, tau)))
}
