//! Distribution and ranking metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::radius_of_gyration;
use crate::data::{Location, Trajectory};
use crate::error::Result;

/// Bins for continuous statistics over the pooled range.
pub const CONTINUOUS_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
}

impl Histogram {
    /// Normalize raw counts over the given bin edges. All-zero counts stay zero.
    pub fn from_counts(edges: Vec<f64>, counts: &[f64]) -> Self {
        assert_eq!(edges.len(), counts.len() + 1, "need one more edge than bins");
        let total: f64 = counts.iter().sum();
        let mass = if total > 0.0 {
            counts.iter().map(|c| c / total).collect()
        } else {
            vec![0.0; counts.len()]
        };
        Self { edges, mass }
    }

    /// Equal-width bins over [lo, hi]; values at `hi` land in the last bin.
    pub fn equal_width(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        assert!(bins > 0 && hi > lo, "bad histogram range");
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0.0; bins];
        for &v in values {
            counts[bin_index(v, lo, hi, bins)] += 1.0;
        }
        Self::from_counts(edges, &counts)
    }

    /// Integer categories 0..n with unit bins [k, k+1).
    pub fn categorical(counts: &[f64]) -> Self {
        let edges = (0..=counts.len()).map(|k| k as f64).collect();
        Self::from_counts(edges, counts)
    }

    pub fn bins(&self) -> usize {
        self.mass.len()
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "bin_left,bin_right,mass")?;
        for (i, m) in self.mass.iter().enumerate() {
            writeln!(w, "{},{},{}", self.edges[i], self.edges[i + 1], m)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let k = ((v - lo) / (hi - lo) * bins as f64).floor();
    (k.max(0.0) as usize).min(bins - 1)
}

/// Equal-width histograms of two samples on their pooled range.
pub fn pooled_histograms(a: &[f64], b: &[f64], bins: usize) -> (Histogram, Histogram) {
    let all = a.iter().chain(b);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    };
    (Histogram::equal_width(a, lo, hi, bins), Histogram::equal_width(b, lo, hi, bins))
}

/// Unit-width integer bins 0..=max over both samples.
pub fn pooled_integer_histograms(a: &[usize], b: &[usize]) -> (Histogram, Histogram) {
    let max = a.iter().chain(b).copied().max().unwrap_or(0);
    let count = |xs: &[usize]| {
        let mut c = vec![0.0; max + 1];
        for &x in xs {
            c[x] += 1.0;
        }
        Histogram::categorical(&c)
    };
    (count(a), count(b))
}

/// Jensen-Shannon divergence in bits.
pub fn jsd(p: &Histogram, q: &Histogram) -> f64 {
    assert_eq!(p.edges, q.edges, "jsd requires identical binning");
    jsd_masses(&p.mass, &q.mass)
}

pub fn jsd_masses(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "jsd requires identical binning");
    let half_kl = |x: f64, m: f64| if x > 0.0 { 0.5 * x * (x / m).log2() } else { 0.0 };
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        // summed in a fixed order so jsd(p,q) == jsd(q,p) bit for bit
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        total += half_kl(lo, m) + half_kl(hi, m);
    }
    total.clamp(0.0, 1.0)
}

/// Raw per-record values behind the six mobility statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MobilityStatistics {
    /// Travelled km per user-day.
    pub distance: Vec<f64>,
    /// Radius of gyration per user, in km.
    pub radius: Vec<f64>,
    /// Stay-run lengths in slots.
    pub duration: Vec<usize>,
    /// Distinct locations per user-day.
    pub daily_loc: Vec<usize>,
    /// Visit counts per location id.
    pub density: Vec<f64>,
    /// Counts of consecutive stay-run location pairs.
    pub trip: BTreeMap<(usize, usize), f64>,
}

/// Maximal runs of equal consecutive values as (value, length).
pub fn stay_runs(locations: &[usize]) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &l in locations {
        match runs.last_mut() {
            Some((v, n)) if *v == l => *n += 1,
            _ => runs.push((l, 1)),
        }
    }
    runs
}

/// Extract the statistics; each trajectory is cut into calendar days using
/// its start slot, and radius pools all of a user's trajectories.
pub fn mobility_statistics(trajs: &[Trajectory], vocabulary: &[Location], slots_per_day: usize) -> MobilityStatistics {
    let mut stats = MobilityStatistics {
        density: vec![0.0; vocabulary.len()],
        ..Default::default()
    };
    let mut per_user: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for traj in trajs {
        per_user.entry(traj.user_id).or_default().extend_from_slice(&traj.locations);
        let mut start = 0;
        while start < traj.locations.len() {
            let day = (traj.start_slot + start) / slots_per_day;
            let end = ((day + 1) * slots_per_day - traj.start_slot).min(traj.locations.len());
            let seg = &traj.locations[start..end];
            let km: f64 = seg
                .windows(2)
                .map(|w| vocabulary[w[0]].distance_km(&vocabulary[w[1]]))
                .sum();
            stats.distance.push(km);
            stats.daily_loc.push(seg.iter().collect::<BTreeSet<_>>().len());
            start = end;
        }
        let runs = stay_runs(&traj.locations);
        stats.duration.extend(runs.iter().map(|r| r.1));
        for w in runs.windows(2) {
            *stats.trip.entry((w[0].0, w[1].0)).or_insert(0.0) += 1.0;
        }
        for &l in &traj.locations {
            stats.density[l] += 1.0;
        }
    }
    stats.radius = per_user.values().map(|locs| radius_of_gyration(locs, vocabulary)).collect();
    stats
}

/// Histogram pairs for the six statistics on shared supports.
#[derive(Debug, Clone, PartialEq)]
pub struct StatisticHistograms {
    pub name: &'static str,
    pub real: Histogram,
    pub generated: Histogram,
}

pub const STATISTIC_NAMES: [&str; 6] = ["distance", "radius", "duration", "daily_loc", "density", "trip"];

pub fn compare_statistics(real: &MobilityStatistics, generated: &MobilityStatistics) -> Vec<StatisticHistograms> {
    let (d_r, d_g) = pooled_histograms(&real.distance, &generated.distance, CONTINUOUS_BINS);
    let (r_r, r_g) = pooled_histograms(&real.radius, &generated.radius, CONTINUOUS_BINS);
    let (u_r, u_g) = pooled_integer_histograms(&real.duration, &generated.duration);
    let (l_r, l_g) = pooled_integer_histograms(&real.daily_loc, &generated.daily_loc);
    let keys: BTreeSet<&(usize, usize)> = real.trip.keys().chain(generated.trip.keys()).collect();
    let trip_counts = |m: &BTreeMap<(usize, usize), f64>| -> Vec<f64> { keys.iter().map(|k| m.get(*k).copied().unwrap_or(0.0)).collect() };
    let pairs = [
        (d_r, d_g),
        (r_r, r_g),
        (u_r, u_g),
        (l_r, l_g),
        (Histogram::categorical(&real.density), Histogram::categorical(&generated.density)),
        (Histogram::categorical(&trip_counts(&real.trip)), Histogram::categorical(&trip_counts(&generated.trip))),
    ];
    STATISTIC_NAMES
        .iter()
        .zip(pairs)
        .map(|(&name, (real, generated))| StatisticHistograms { name, real, generated })
        .collect()
}

/// 1-based rank of `truth` in `ranking`.
pub fn rank_of(ranking: &[usize], truth: usize) -> Option<usize> {
    ranking.iter().position(|&l| l == truth).map(|p| p + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScores {
    pub recall: f64,
    pub map: f64,
    pub distance_m: f64,
}

/// Recall@k, mean reciprocal rank (0 when the truth is unranked) and mean
/// top-1 error in meters, over all missing slots.
pub fn recovery_scores(rankings: &[Vec<usize>], truths: &[usize], vocabulary: &[Location], k: usize) -> RecoveryScores {
    assert_eq!(rankings.len(), truths.len(), "one ranking per missing slot");
    assert!(!truths.is_empty(), "recovery needs at least one missing slot");
    assert!(k >= 1);
    let n = truths.len() as f64;
    let (mut hits, mut rr, mut dist) = (0.0, 0.0, 0.0);
    for (ranking, &truth) in rankings.iter().zip(truths) {
        assert!(truth < vocabulary.len(), "truth {truth} outside the vocabulary");
        let top = *ranking.first().expect("rankings must be non-empty");
        if let Some(r) = rank_of(ranking, truth) {
            rr += 1.0 / r as f64;
            if r <= k {
                hits += 1.0;
            }
        }
        dist += vocabulary[top].distance_km(&vocabulary[truth]) * 1000.0;
    }
    RecoveryScores {
        recall: hits / n,
        map: rr / n,
        distance_m: dist / n,
    }
}

/// Fraction of queries whose truth appears in the top `k`; 0 for no queries.
pub fn accuracy_at_k(rankings: &[Vec<usize>], truths: &[usize], k: usize) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    assert_eq!(rankings.len(), truths.len());
    if truths.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .zip(truths)
        .filter(|(r, &t)| r.iter().take(k).any(|&l| l == t))
        .count();
    hits as f64 / truths.len() as f64
}

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub dataset: String,
    pub seed: u64,
    pub config_hash: String,
    /// Wall-clock creation time; the only field allowed to differ between reruns.
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: u32,
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn new(task: impl Into<String>, metadata: ReportMetadata) -> Self {
        Self {
            schema: REPORT_SCHEMA,
            task: task.into(),
            metrics: BTreeMap::new(),
            metadata,
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, value: f64) {
        self.metrics.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    pub fn all_finite(&self) -> bool {
        self.metrics.values().all(|v| v.is_finite())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if !self.all_finite() {
            return Err(crate::Error::InvalidParameters(format!("report {} holds a non-finite metric", self.task)));
        }
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Serialized form with the timestamp blanked, for rerun comparisons.
    pub fn canonical_json(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.metadata.timestamp.clear();
        copy.to_json()
    }
}
