//! Trivial comparators sharing the task runners' cases.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{Dataset, Location};
use crate::error::{Error, Result};
use crate::mask::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    UniformRandomGen,
    LinearInterp,
    Persistence,
    Markov1,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::UniformRandomGen, Baseline::LinearInterp, Baseline::Persistence, Baseline::Markov1];

    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::UniformRandomGen => "uniform-random-gen",
            Baseline::LinearInterp => "linear-interp",
            Baseline::Persistence => "persistence",
            Baseline::Markov1 => "markov1",
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::InvalidParameters(format!("unknown baseline {s:?}")))
    }
}

/// Locations ordered by distance from `(x, y)`, ties by id.
pub fn nearest_locations(vocabulary: &[Location], x: f64, y: f64, k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = vocabulary
        .iter()
        .map(|l| ((l.x - x).powi(2) + (l.y - y).powi(2), l.id))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, id)| id).collect()
}

fn previous_observed(mask: &Mask, locs: &[usize], slot: usize) -> Option<(usize, usize)> {
    (0..slot).rev().find(|&i| mask.is_observed(i)).map(|i| (i, locs[i]))
}

fn next_observed(mask: &Mask, locs: &[usize], slot: usize) -> Option<(usize, usize)> {
    (slot + 1..mask.len()).find(|&i| mask.is_observed(i)).map(|i| (i, locs[i]))
}

fn centroid(vocabulary: &[Location]) -> (f64, f64) {
    let n = vocabulary.len() as f64;
    let (sx, sy) = vocabulary.iter().fold((0.0, 0.0), |(a, b), l| (a + l.x, b + l.y));
    (sx / n, sy / n)
}

/// Interpolate coordinates between the flanking observations in time and
/// rank locations by distance to that point. One flank is copied; none
/// falls back to the vocabulary centroid.
pub fn linear_interp(vocabulary: &[Location], locs: &[usize], mask: &Mask, slot: usize, k: usize) -> Vec<usize> {
    let (x, y) = match (previous_observed(mask, locs, slot), next_observed(mask, locs, slot)) {
        (Some((i0, a)), Some((i1, b))) => {
            let w = (slot - i0) as f64 / (i1 - i0) as f64;
            let (a, b) = (&vocabulary[a], &vocabulary[b]);
            (a.x + w * (b.x - a.x), a.y + w * (b.y - a.y))
        }
        (Some((_, a)), None) | (None, Some((_, a))) => (vocabulary[a].x, vocabulary[a].y),
        (None, None) => centroid(vocabulary),
    };
    nearest_locations(vocabulary, x, y, k)
}

/// Last observed location first, then its nearest neighbours.
pub fn persistence(vocabulary: &[Location], locs: &[usize], mask: &Mask, slot: usize, k: usize) -> Vec<usize> {
    let anchor = previous_observed(mask, locs, slot).or_else(|| next_observed(mask, locs, slot));
    let (x, y) = match anchor {
        Some((_, a)) => (vocabulary[a].x, vocabulary[a].y),
        None => centroid(vocabulary),
    };
    nearest_locations(vocabulary, x, y, k)
}

/// Empirical first-order transition counts between consecutive slots.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransitionCounts {
    pub n_locations: usize,
    pub counts: BTreeMap<usize, BTreeMap<usize, f64>>,
}

impl TransitionCounts {
    pub fn new(n_locations: usize) -> Self {
        Self {
            n_locations,
            counts: BTreeMap::new(),
        }
    }

    pub fn add_sequence(&mut self, locs: &[usize]) {
        for w in locs.windows(2) {
            *self.counts.entry(w[0]).or_default().entry(w[1]).or_insert(0.0) += 1.0;
        }
    }

    /// Counts over every trajectory, current and history, of a dataset.
    pub fn from_dataset(ds: &Dataset) -> Self {
        let mut t = Self::new(ds.n_locations());
        for traj in ds.trajectories.iter().chain(ds.histories.values().flatten()) {
            t.add_sequence(&traj.locations);
        }
        t
    }

    /// Row-normalized transition probabilities; unseen rows stay put.
    fn step(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_locations];
        for (from, &mass) in p.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            match self.counts.get(&from) {
                Some(row) => {
                    let total: f64 = row.values().sum();
                    for (&to, &c) in row {
                        out[to] += mass * c / total;
                    }
                }
                None => out[from] += mass,
            }
        }
        out
    }

    /// Distribution `steps` transitions after `start`.
    pub fn propagate(&self, start: usize, steps: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.n_locations];
        p[start] = 1.0;
        for _ in 0..steps {
            p = self.step(&p);
        }
        p
    }
}

/// Rank by the transition distribution from the previous observation,
/// propagated over the gap; ties fall back to distance from that observation.
pub fn markov1(vocabulary: &[Location], transitions: &TransitionCounts, locs: &[usize], mask: &Mask, slot: usize, k: usize) -> Vec<usize> {
    let Some((i0, a)) = previous_observed(mask, locs, slot) else {
        return persistence(vocabulary, locs, mask, slot, k);
    };
    let p = transitions.propagate(a, slot - i0);
    let origin = &vocabulary[a];
    let mut ids: Vec<usize> = (0..vocabulary.len()).collect();
    ids.sort_by(|&x, &y| {
        p[y].total_cmp(&p[x])
            .then(origin.distance_km(&vocabulary[x]).total_cmp(&origin.distance_km(&vocabulary[y])))
            .then(x.cmp(&y))
    });
    ids.truncate(k);
    ids
}

/// A uniformly random ranking of `k` distinct locations.
pub fn uniform_ranking<R: Rng + ?Sized>(n_locations: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n_locations).collect();
    let (head, _) = ids.partial_shuffle(rng, k.min(n_locations));
    head.to_vec()
}

/// A sequence of uniformly random locations.
pub fn uniform_sequence<R: Rng + ?Sized>(n_locations: usize, len: usize, rng: &mut R) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..n_locations)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::grid_vocabulary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_round_trip() {
        for b in Baseline::ALL {
            assert_eq!(b.as_str().parse::<Baseline>().unwrap(), b);
        }
        assert!("nope".parse::<Baseline>().is_err());
    }

    #[test]
    fn persistence_on_constant_trajectory() {
        let vocab = grid_vocabulary(4, 1.0);
        let locs = vec![6; 10];
        let mask = Mask::from_bits([vec![true; 9], vec![false]].concat());
        assert_eq!(persistence(&vocab, &locs, &mask, 9, 5)[0], 6);
    }

    #[test]
    fn linear_interp_equal_flanks_returns_flank() {
        let vocab = grid_vocabulary(5, 1.0);
        let locs = vec![7, 0, 0, 7];
        let mask = Mask::from_bits(vec![true, false, false, true]);
        assert_eq!(linear_interp(&vocab, &locs, &mask, 1, 3)[0], 7);
        assert_eq!(linear_interp(&vocab, &locs, &mask, 2, 3)[0], 7);
    }

    #[test]
    fn linear_interp_midpoint() {
        let vocab = grid_vocabulary(5, 1.0);
        // (0,0) to (4,0): halfway is (2,0) = id 2
        let locs = vec![0, 9, 9, 9, 4];
        let mask = Mask::from_bits(vec![true, false, false, false, true]);
        assert_eq!(linear_interp(&vocab, &locs, &mask, 2, 1), vec![2]);
        assert_eq!(linear_interp(&vocab, &locs, &mask, 1, 1), vec![1]);
    }

    #[test]
    fn markov1_three_location_chain() {
        // 0→1 twice, 0→2 once, 1→2 three times, 2→0 once
        let vocab = grid_vocabulary(2, 1.0)[..3].to_vec();
        let mut t = TransitionCounts::new(3);
        t.add_sequence(&[0, 1, 2, 0, 1, 2]);
        t.add_sequence(&[0, 2]);
        t.add_sequence(&[1, 2]);
        let mask = Mask::from_bits(vec![true, false]);
        assert_eq!(markov1(&vocab, &t, &[0, 0], &mask, 1, 3), vec![1, 2, 0]);
        assert_eq!(markov1(&vocab, &t, &[1, 0], &mask, 1, 1), vec![2]);
        let p = t.propagate(0, 1);
        assert_eq!(p, vec![0.0, 2.0 / 3.0, 1.0 / 3.0]);
        // two steps from 0: 0→1→2 (2/3) + 0→2→0 (1/3)
        let p2 = t.propagate(0, 2);
        assert!((p2[2] - 2.0 / 3.0).abs() < 1e-12 && (p2[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_ranking_is_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = uniform_ranking(20, 10, &mut rng);
        let set: std::collections::BTreeSet<_> = r.iter().collect();
        assert_eq!(set.len(), 10);
        assert!(uniform_sequence(5, 100, &mut rng).iter().all(|&l| l < 5));
    }
}
