//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use genmove::data::{grid_vocabulary, Dataset, Location, Trajectory};

/// A small random dataset: a few users, random grid, uneven start slots.
pub fn random_small_dataset(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = rng.random_range(2..6);
    let spd = rng.random_range(3..9);
    let mut ds = Dataset::empty(grid_vocabulary(side, rng.random_range(0.5..3.0)), spd);
    let n = ds.n_locations();
    for user in 0..rng.random_range(1..6u32) {
        for _ in 0..rng.random_range(1..3) {
            let len = rng.random_range(1..20);
            let mut locs = Vec::with_capacity(len);
            let mut cur = rng.random_range(0..n);
            for _ in 0..len {
                // sticky walk so stay-runs longer than one slot occur
                if rng.random_bool(0.4) {
                    cur = rng.random_range(0..n);
                }
                locs.push(cur);
            }
            ds.trajectories.push(Trajectory {
                user_id: user,
                start_slot: rng.random_range(0..3 * spd),
                locations: locs,
            });
        }
    }
    ds
}

fn dist(a: &Location, b: &Location) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

/// Per (trajectory, calendar day) travelled km, walking slot by slot.
pub fn oracle_daily_distance(ds: &Dataset) -> Vec<f64> {
    let mut out = Vec::new();
    for t in &ds.trajectories {
        let day = |i: usize| (t.start_slot + i) / ds.slots_per_day;
        let mut acc = 0.0;
        for i in 0..t.locations.len() {
            if i > 0 && day(i) != day(i - 1) {
                out.push(acc);
                acc = 0.0;
            } else if i > 0 {
                acc += dist(&ds.vocabulary[t.locations[i - 1]], &ds.vocabulary[t.locations[i]]);
            }
        }
        out.push(acc);
    }
    out
}

/// Distinct locations per (trajectory, calendar day).
pub fn oracle_daily_loc(ds: &Dataset) -> Vec<usize> {
    let mut out = Vec::new();
    for t in &ds.trajectories {
        let mut by_day: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in t.locations.iter().enumerate() {
            let d = by_day.entry((t.start_slot + i) / ds.slots_per_day).or_default();
            if !d.contains(&l) {
                d.push(l);
            }
        }
        out.extend(by_day.values().map(Vec::len));
    }
    out
}

/// Radius of gyration per user from all pairwise squared distances,
/// Rg² = Σᵢⱼ |xᵢ − xⱼ|² / (2n²).
pub fn oracle_radius(ds: &Dataset) -> Vec<f64> {
    let mut per_user: BTreeMap<u32, Vec<&Location>> = BTreeMap::new();
    for t in &ds.trajectories {
        per_user.entry(t.user_id).or_default().extend(t.locations.iter().map(|&l| &ds.vocabulary[l]));
    }
    per_user
        .values()
        .map(|pts| {
            let n = pts.len() as f64;
            let ss: f64 = pts.iter().flat_map(|a| pts.iter().map(move |b| dist(a, b).powi(2))).sum();
            (ss / (2.0 * n * n)).sqrt()
        })
        .collect()
}

/// Stay-run lengths, found by scanning for change points.
pub fn oracle_durations(ds: &Dataset) -> Vec<usize> {
    let mut out = Vec::new();
    for t in &ds.trajectories {
        let mut start = 0;
        for i in 1..=t.locations.len() {
            if i == t.locations.len() || t.locations[i] != t.locations[start] {
                out.push(i - start);
                start = i;
            }
        }
    }
    out
}

/// Location pairs at each change point.
pub fn oracle_trips(ds: &Dataset) -> BTreeMap<(usize, usize), f64> {
    let mut out = BTreeMap::new();
    for t in &ds.trajectories {
        for w in t.locations.windows(2) {
            if w[0] != w[1] {
                *out.entry((w[0], w[1])).or_insert(0.0) += 1.0;
            }
        }
    }
    out
}

pub fn oracle_density(ds: &Dataset) -> Vec<f64> {
    (0..ds.n_locations())
        .map(|l| ds.trajectories.iter().flat_map(|t| &t.locations).filter(|&&x| x == l).count() as f64)
        .collect()
}

/// Recall@k, MRR and top-1 meters by direct enumeration.
pub fn oracle_recovery(rankings: &[Vec<usize>], truths: &[usize], vocab: &[Location], k: usize) -> (f64, f64, f64) {
    let n = truths.len() as f64;
    let mut recall = 0.0;
    let mut mrr = 0.0;
    let mut meters = 0.0;
    for (r, &t) in rankings.iter().zip(truths) {
        for (pos, &l) in r.iter().enumerate() {
            if l == t {
                mrr += 1.0 / (pos + 1) as f64;
                if pos < k {
                    recall += 1.0;
                }
                break;
            }
        }
        meters += 1000.0 * dist(&vocab[r[0]], &vocab[t]);
    }
    (recall / n, mrr / n, meters / n)
}

pub fn oracle_acc_at_k(rankings: &[Vec<usize>], truths: &[usize], k: usize) -> usize {
    rankings.iter().zip(truths).filter(|(r, t)| r[..k.min(r.len())].contains(t)).count()
}

/// A random permutation prefix of the vocabulary.
pub fn random_ranking<R: Rng>(n: usize, len: usize, rng: &mut R) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    for i in 0..len.min(n) {
        let j = rng.random_range(i..n);
        ids.swap(i, j);
    }
    ids.truncate(len.min(n));
    ids
}

/// A model small enough to train in seconds.
pub const TINY: &[&str] = &[
    "embed_dim=8",
    "embed_epochs=20",
    "steps=10",
    "d_model=16",
    "layers=1",
    "heads=2",
    "conv_channels=8",
    "context_dim=8",
    "history_hidden=8",
    "ff_mult=1",
    "history_days=2",
    "epochs=1",
    "batch_size=8",
    "flow_layers=2",
    "flow_hidden=8",
    "flow_epochs=5",
    "flow_batch=16",
    "samples=6",
    "eval_chunk=4",
];

pub fn tiny_config(extra: &[&str]) -> genmove::harness::ExperimentConfig {
    let overrides: Vec<String> = TINY.iter().chain(extra).map(|s| s.to_string()).collect();
    genmove::harness::ExperimentConfig::load(None, &overrides).unwrap()
}

pub fn small_epr(users: usize, seed: u64) -> Dataset {
    genmove::data::synthesize_epr(&genmove::data::EprParams {
        n_users: users,
        grid_side: 6,
        days: 3,
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// Users that all repeat one fixed daily loop; the loop's last slot differs
/// from the one before it so copying the previous location is wrong.
pub fn periodic_dataset(users: u32, days: usize) -> Dataset {
    let spd = genmove::data::SLOTS_PER_DAY;
    let mut ds = Dataset::empty(grid_vocabulary(5, 1.0), spd);
    let day: Vec<usize> = (0..spd)
        .map(|s| match s {
            0..=15 => 0,
            16..=35 => 18,
            36..=40 => 12,
            41..=46 => 6,
            _ => 24,
        })
        .collect();
    for u in 0..users {
        let history = (0..days - 1)
            .map(|d| Trajectory { user_id: u, start_slot: d * spd, locations: day.clone() })
            .collect();
        ds.histories.insert(u, history);
        ds.trajectories.push(Trajectory { user_id: u, start_slot: (days - 1) * spd, locations: day.clone() });
    }
    ds
}
