//! Trajectory data model, synthetic EPR generation, JSON-lines persistence
//! and user-level splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of 30-minute slots in a day.
pub const SLOTS_PER_DAY: usize = 48;

/// Current dataset file format version.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: usize,
    /// Projected coordinate in km.
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub fn distance_km(&self, other: &Location) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub user_id: u32,
    /// Absolute slot index of the first location.
    pub start_slot: usize,
    pub locations: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocabulary: Vec<Location>,
    /// Current (evaluation) trajectories, one per user.
    pub trajectories: Vec<Trajectory>,
    /// Earlier trajectories per user, oldest first.
    pub histories: BTreeMap<u32, Vec<Trajectory>>,
    pub slots_per_day: usize,
}

impl Dataset {
    pub fn empty(vocabulary: Vec<Location>, slots_per_day: usize) -> Self {
        Self {
            vocabulary,
            trajectories: Vec::new(),
            histories: BTreeMap::new(),
            slots_per_day,
        }
    }

    pub fn n_locations(&self) -> usize {
        self.vocabulary.len()
    }

    /// Trajectory length shared by every trajectory, if any exist.
    pub fn trajectory_len(&self) -> Option<usize> {
        self.trajectories
            .first()
            .or_else(|| self.histories.values().flatten().next())
            .map(Trajectory::len)
    }

    pub fn users(&self) -> BTreeSet<u32> {
        self.trajectories
            .iter()
            .map(|t| t.user_id)
            .chain(self.histories.keys().copied())
            .collect()
    }

    pub fn history(&self, user: u32) -> &[Trajectory] {
        self.histories.get(&user).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Restrict to the given users, keeping vocabulary and order.
    pub fn subset(&self, users: &BTreeSet<u32>) -> Dataset {
        Dataset {
            vocabulary: self.vocabulary.clone(),
            trajectories: self
                .trajectories
                .iter()
                .filter(|t| users.contains(&t.user_id))
                .cloned()
                .collect(),
            histories: self
                .histories
                .iter()
                .filter(|(u, _)| users.contains(u))
                .map(|(u, h)| (*u, h.clone()))
                .collect(),
            slots_per_day: self.slots_per_day,
        }
    }

    fn validate(&self) -> Result<()> {
        let v = self.vocabulary.len();
        for (i, loc) in self.vocabulary.iter().enumerate() {
            if loc.id != i {
                return Err(Error::Reference(format!(
                    "vocabulary ids must be dense: position {i} has id {}",
                    loc.id
                )));
            }
            if !loc.x.is_finite() || !loc.y.is_finite() {
                return Err(Error::InvalidParameters(format!("location {i} has non-finite coordinates")));
            }
        }
        for t in self.trajectories.iter().chain(self.histories.values().flatten()) {
            if let Some(&bad) = t.locations.iter().find(|&&l| l >= v) {
                return Err(Error::Reference(format!(
                    "user {} references location {bad} outside vocabulary of size {v}",
                    t.user_id
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the exploration-and-preferential-return generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EprParams {
    /// Exploration scale: P(explore) = rho * S^(-gamma), S = distinct visited.
    pub rho: f64,
    pub gamma: f64,
    pub n_users: usize,
    pub days: usize,
    pub grid_side: usize,
    /// Probability of being at home during a night slot (0:00-6:00).
    pub home_bias: f64,
    /// Probability of staying put during a daytime slot.
    pub stay_prob: f64,
    pub slots_per_day: usize,
    /// Grid spacing in km.
    pub cell_km: f64,
    pub seed: u64,
}

impl Default for EprParams {
    fn default() -> Self {
        Self {
            rho: 0.6,
            gamma: 0.21,
            n_users: 500,
            days: 7,
            grid_side: 16,
            home_bias: 0.9,
            stay_prob: 0.7,
            slots_per_day: SLOTS_PER_DAY,
            cell_km: 1.0,
            seed: 0,
        }
    }
}

impl EprParams {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameters(m.to_string()));
        if self.grid_side * self.grid_side < 2 {
            return bad("grid_side^2 must be at least 2");
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad("rho must be a finite non-negative number");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.home_bias) || !(0.0..=1.0).contains(&self.stay_prob) {
            return bad("home_bias and stay_prob must lie in [0, 1]");
        }
        if self.n_users == 0 || self.days == 0 || self.slots_per_day == 0 {
            return bad("n_users, days and slots_per_day must be positive");
        }
        if !(self.cell_km > 0.0) {
            return bad("cell_km must be positive");
        }
        Ok(())
    }
}

/// Square grid of cells, row-major ids, coordinates in km.
pub fn grid_vocabulary(side: usize, cell_km: f64) -> Vec<Location> {
    (0..side * side)
        .map(|id| Location {
            id,
            x: (id % side) as f64 * cell_km,
            y: (id / side) as f64 * cell_km,
        })
        .collect()
}

/// Generate a synthetic dataset with an EPR process per user.
///
/// Each user gets `days * slots_per_day` slots. The final day becomes the
/// user's current trajectory; earlier days form the history.
pub fn synthesize_epr(params: &EprParams) -> Result<Dataset> {
    params.validate()?;
    let vocabulary = grid_vocabulary(params.grid_side, params.cell_km);
    let spd = params.slots_per_day;
    let night_slots = spd / 4;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut trajectories = Vec::with_capacity(params.n_users);
    let mut histories = BTreeMap::new();
    for user in 0..params.n_users {
        let user_seed: u64 = rng.random();
        let mut urng = ChaCha8Rng::seed_from_u64(user_seed);
        let seq = epr_walk(params, &vocabulary, night_slots, &mut urng);
        let user_id = user as u32;
        let days: Vec<Trajectory> = seq
            .chunks(spd)
            .enumerate()
            .map(|(d, chunk)| Trajectory {
                user_id,
                start_slot: d * spd,
                locations: chunk.to_vec(),
            })
            .collect();
        let (last, earlier) = days.split_last().expect("days > 0");
        trajectories.push(last.clone());
        histories.insert(user_id, earlier.to_vec());
    }

    Ok(Dataset {
        vocabulary,
        trajectories,
        histories,
        slots_per_day: spd,
    })
}

fn epr_walk(params: &EprParams, vocab: &[Location], night_slots: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n_slots = params.days * params.slots_per_day;
    let v = vocab.len();
    let home = rng.random_range(0..v);
    let mut current = home;
    // Arrival counts of visited locations, in first-visit order.
    let mut visited: Vec<(usize, f64)> = vec![(home, 1.0)];
    let mut index: HashMap<usize, usize> = HashMap::from([(home, 0)]);
    let mut out = Vec::with_capacity(n_slots);

    for slot in 0..n_slots {
        let tod = slot % params.slots_per_day;
        let next = if tod < night_slots && rng.random::<f64>() < params.home_bias {
            home
        } else if rng.random::<f64>() < params.stay_prob {
            current
        } else {
            let s = visited.len() as f64;
            let p_new = (params.rho * s.powf(-params.gamma)).min(1.0);
            if visited.len() < v && rng.random::<f64>() < p_new {
                explore(vocab, current, &index, rng)
            } else {
                preferential_return(&visited, rng)
            }
        };
        if next != current {
            match index.get(&next) {
                Some(&i) => visited[i].1 += 1.0,
                None => {
                    index.insert(next, visited.len());
                    visited.push((next, 1.0));
                }
            }
            current = next;
        }
        out.push(current);
    }
    out
}

fn explore(vocab: &[Location], current: usize, visited: &HashMap<usize, usize>, rng: &mut ChaCha8Rng) -> usize {
    let here = vocab[current];
    let candidates: Vec<(usize, f64)> = vocab
        .iter()
        .filter(|l| !visited.contains_key(&l.id))
        .map(|l| (l.id, 1.0 / here.distance_km(l).max(1e-9)))
        .collect();
    weighted_pick(&candidates, rng)
}

fn preferential_return(visited: &[(usize, f64)], rng: &mut ChaCha8Rng) -> usize {
    weighted_pick(visited, rng)
}

fn weighted_pick(items: &[(usize, f64)], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut u = rng.random::<f64>() * total;
    for &(id, w) in items {
        if u < w {
            return id;
        }
        u -= w;
    }
    items.last().expect("non-empty candidate set").0
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    slots_per_day: usize,
    vocabulary: Vec<Location>,
}

#[derive(Serialize, Deserialize, PartialEq, Eq, Clone, Copy)]
#[serde(rename_all = "lowercase")]
enum Role {
    Current,
    History,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Row {
    user: u32,
    start_slot: usize,
    role: Role,
    locs: Vec<usize>,
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header {
        version: FORMAT_VERSION,
        slots_per_day: dataset.slots_per_day,
        vocabulary: dataset.vocabulary.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let rows = dataset
        .trajectories
        .iter()
        .map(|t| (Role::Current, t))
        .chain(dataset.histories.values().flatten().map(|t| (Role::History, t)));
    for (role, t) in rows {
        let row = Row {
            user: t.user_id,
            start_slot: t.start_slot,
            role,
            locs: t.locations.clone(),
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line?).map_err(|e| Error::Parse {
            line: 1,
            message: format!("bad header: {e}"),
        })?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    if header.version != FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            message: format!("unsupported version {}", header.version),
        });
    }
    let v = header.vocabulary.len();
    let mut dataset = Dataset::empty(header.vocabulary, header.slots_per_day);
    let mut expected_len = None;
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if row.locs.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty trajectory".into(),
            });
        }
        if *expected_len.get_or_insert(row.locs.len()) != row.locs.len() {
            return Err(Error::Parse {
                line: lineno,
                message: format!("trajectory length {} differs from {}", row.locs.len(), expected_len.unwrap()),
            });
        }
        if let Some(&bad) = row.locs.iter().find(|&&l| l >= v) {
            return Err(Error::Reference(format!(
                "line {lineno}: location id {bad} outside vocabulary of size {v}"
            )));
        }
        let traj = Trajectory {
            user_id: row.user,
            start_slot: row.start_slot,
            locations: row.locs,
        };
        match row.role {
            Role::Current => dataset.trajectories.push(traj),
            Role::History => dataset.histories.entry(row.user).or_default().push(traj),
        }
    }
    dataset.validate()?;
    Ok(dataset)
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

/// Partition users into train/valid/test by shuffled user order.
///
/// Group sizes use largest-remainder rounding, so each is within one user
/// of its exact fraction.
pub fn split_by_user(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameters(format!(
            "split fractions must be in [0,1] and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let mut users: Vec<u32> = dataset.users().into_iter().collect();
    let n = users.len();
    if n < 3 {
        return Err(Error::SplitImpossible(format!("need at least 3 users, have {n}")));
    }
    users.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let exact = [a * n as f64, b * n as f64, c * n as f64];
    let mut sizes = exact.map(|x| x.floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| (exact[j] - exact[j].floor()).total_cmp(&(exact[i] - exact[i].floor())));
    let mut k = 0;
    while sizes.iter().sum::<usize>() < n {
        sizes[order[k % 3]] += 1;
        k += 1;
    }

    let train: BTreeSet<u32> = users[..sizes[0]].iter().copied().collect();
    let valid: BTreeSet<u32> = users[sizes[0]..sizes[0] + sizes[1]].iter().copied().collect();
    let test: BTreeSet<u32> = users[sizes[0] + sizes[1]..].iter().copied().collect();
    Ok(Split {
        train: dataset.subset(&train),
        valid: dataset.subset(&valid),
        test: dataset.subset(&test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> EprParams {
        EprParams {
            n_users: 20,
            days: 3,
            grid_side: 6,
            seed: 3,
            ..EprParams::default()
        }
    }

    #[test]
    fn zero_rho_never_leaves_home() {
        let d = synthesize_epr(&EprParams { rho: 0.0, ..small_params() }).unwrap();
        for t in &d.trajectories {
            let home = d.history(t.user_id)[0].locations[0];
            assert!(t.locations.iter().all(|&l| l == home));
            assert!(d.history(t.user_id).iter().flat_map(|h| &h.locations).all(|&l| l == home));
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let p = small_params();
        assert_eq!(synthesize_epr(&p).unwrap(), synthesize_epr(&p).unwrap());
        let other = synthesize_epr(&EprParams { seed: 4, ..p }).unwrap();
        assert_ne!(synthesize_epr(&small_params()).unwrap(), other);
    }

    #[test]
    fn tiny_grid_rejected() {
        let err = synthesize_epr(&EprParams { grid_side: 1, ..small_params() }).unwrap_err();
        assert!(matches!(err, Error::InvalidParameters(_)));
    }

    #[test]
    fn desk_scale_shape() {
        let p = EprParams { n_users: 500, grid_side: 16, days: 7, slots_per_day: 48, ..EprParams::default() };
        let d = synthesize_epr(&p).unwrap();
        assert_eq!(d.trajectories.len(), 500);
        assert_eq!(d.users().len(), 500);
        assert_eq!(d.vocabulary.len(), 256);
        let distinct: BTreeSet<usize> = d
            .trajectories
            .iter()
            .chain(d.histories.values().flatten())
            .flat_map(|t| t.locations.iter().copied())
            .collect();
        assert!(distinct.len() <= 256);
        for t in &d.trajectories {
            assert_eq!(t.len(), 48);
            assert_eq!(t.start_slot, 6 * 48);
            let h = d.history(t.user_id);
            assert_eq!(h.iter().map(Trajectory::len).sum::<usize>(), 6 * 48);
        }
    }

    #[test]
    fn exploration_is_sublinear() {
        let p = EprParams { n_users: 100, days: 2, ..EprParams::default() };
        let d = synthesize_epr(&p).unwrap();
        let (mut one, mut two) = (0.0, 0.0);
        for t in &d.trajectories {
            let h = &d.history(t.user_id)[0];
            let first: BTreeSet<_> = h.locations.iter().collect();
            let both: BTreeSet<_> = h.locations.iter().chain(&t.locations).collect();
            one += first.len() as f64;
            two += both.len() as f64;
        }
        assert!(two < 2.0 * one, "distinct(2L)={two} distinct(L)={one}");
    }

    #[test]
    fn round_trip_and_reference_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let d = synthesize_epr(&small_params()).unwrap();
        save_dataset(&d, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), d);

        let v = d.vocabulary.len();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str(&format!("{{\"user\":0,\"start_slot\":0,\"role\":\"history\",\"locs\":[{}]}}\n", vec![v.to_string(); 48].join(",")));
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Reference(_))));
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            "{\"version\":1,\"slots_per_day\":48,\"vocabulary\":[{\"id\":0,\"x\":0.0,\"y\":0.0}]}\n\
             {\"user\":0,\"start_slot\":0,\"role\":\"current\",\"locs\":[0]}\n\
             {\"user\":0,\"start_slot\":0,\"role\":\"bogus\",\"locs\":[0]}\n",
        )
        .unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_trajectory_section() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let d = Dataset::empty(grid_vocabulary(3, 1.0), 48);
        save_dataset(&d, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert!(loaded.trajectories.is_empty());
        assert_eq!(loaded.vocabulary.len(), 9);
    }

    fn users_of(d: &Dataset) -> BTreeSet<u32> {
        d.users()
    }

    #[test]
    fn split_ten_users() {
        let d = synthesize_epr(&EprParams { n_users: 10, ..small_params() }).unwrap();
        let s = split_by_user(&d, (0.7, 0.1, 0.2), 1).unwrap();
        assert_eq!(
            (users_of(&s.train).len(), users_of(&s.valid).len(), users_of(&s.test).len()),
            (7, 1, 2)
        );
    }

    #[test]
    fn split_three_users_is_partition() {
        let d = synthesize_epr(&EprParams { n_users: 3, ..small_params() }).unwrap();
        let s = split_by_user(&d, (0.7, 0.1, 0.2), 9).unwrap();
        let (a, b, c) = (users_of(&s.train), users_of(&s.valid), users_of(&s.test));
        assert!((1..=2).contains(&a.len()) && b.len() <= 1 && c.len() <= 1);
        assert_eq!(a.len() + b.len() + c.len(), 3);
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
    }

    #[test]
    fn split_needs_three_users() {
        let d = synthesize_epr(&EprParams { n_users: 2, ..small_params() }).unwrap();
        assert!(matches!(split_by_user(&d, (0.7, 0.1, 0.2), 0), Err(Error::SplitImpossible(_))));
    }

    #[test]
    fn split_is_deterministic() {
        let d = synthesize_epr(&small_params()).unwrap();
        let a = split_by_user(&d, (0.7, 0.1, 0.2), 5).unwrap();
        let b = split_by_user(&d, (0.7, 0.1, 0.2), 5).unwrap();
        assert_eq!(users_of(&a.test), users_of(&b.test));
        assert_eq!(users_of(&a.train), users_of(&b.train));
    }

    proptest::proptest! {
        #[test]
        fn split_partitions_any_population(n in 3usize..60, seed in 0u64..1000) {
            let d = synthesize_epr(&EprParams { n_users: n, days: 2, grid_side: 3, ..small_params() }).unwrap();
            let s = split_by_user(&d, (0.7, 0.1, 0.2), seed).unwrap();
            let (a, b, c) = (users_of(&s.train), users_of(&s.valid), users_of(&s.test));
            proptest::prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
            proptest::prop_assert_eq!(a.len() + b.len() + c.len(), n);
            for (size, frac) in [(a.len(), 0.7), (b.len(), 0.1), (c.len(), 0.2)] {
                proptest::prop_assert!((size as f64 - frac * n as f64).abs() <= 1.0);
            }
        }
    }
}
