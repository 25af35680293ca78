use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::{radius_of_gyration, ConditionFeatures, ContextEmbedding};
use crate::data::{Dataset, Trajectory};
use crate::diffusion::{sample_batch, SampleCase};
use crate::error::{Error, Result};
use crate::geo::{decode, embed_ids};
use crate::mask::{apply_mask, sample_mask, Mask, MaskMixture, Strategy};
use crate::metrics::{
    accuracy_at_k, compare_statistics, mobility_statistics, recovery_scores, EvalReport, Histogram, ReportMetadata,
};
use crate::nn::Mat;

use super::baselines::{self, Baseline, TransitionCounts};
use super::config::{hex, ExperimentConfig};
use super::train::{split, Artifacts};

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Generate,
    GenerateControlled,
    Recover,
    PredictNext,
    PredictLong,
    PredictSparse,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Generate,
        Task::GenerateControlled,
        Task::Recover,
        Task::PredictNext,
        Task::PredictLong,
        Task::PredictSparse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Generate => "generate",
            Task::GenerateControlled => "generate-controlled",
            Task::Recover => "recover",
            Task::PredictNext => "predict-next",
            Task::PredictLong => "predict-long",
            Task::PredictSparse => "predict-sparse",
        }
    }

    pub fn is_generation(self) -> bool {
        matches!(self, Task::Generate | Task::GenerateControlled)
    }

    fn code(self) -> u64 {
        Self::ALL.iter().position(|&t| t == self).unwrap() as u64
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidParameters(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerateContext {
    Null,
    Flow,
}

/// A task plus its knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    /// Terminal slots to predict.
    pub horizon: usize,
    pub missing_ratio: f64,
    pub radius_km: f64,
    pub samples: usize,
    pub omega: f64,
    pub sparse_ratio: f64,
    pub context: GenerateContext,
}

impl TaskSpec {
    pub fn from_config(task: Task, cfg: &ExperimentConfig) -> Self {
        let horizon = match task {
            Task::PredictLong => cfg.long_horizon,
            _ => 1,
        };
        let omega = match task {
            Task::Generate => cfg.omega_generate,
            _ => cfg.omega,
        };
        let context = if cfg.generate_context == "flow" {
            GenerateContext::Flow
        } else {
            GenerateContext::Null
        };
        Self {
            task,
            horizon,
            missing_ratio: cfg.missing_ratio,
            radius_km: cfg.control_radius_km,
            samples: cfg.samples,
            omega,
            sparse_ratio: cfg.sparse_ratio,
            context,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidParameters("horizon must be at least 1".into()));
        }
        if !(self.missing_ratio > 0.0 && self.missing_ratio < 1.0) {
            return Err(Error::InvalidParameters(format!("missing ratio {} must lie in (0, 1)", self.missing_ratio)));
        }
        Ok(())
    }
}

/// One evaluation query on a held-out user's current trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub traj: Trajectory,
    pub mask: Mask,
    /// Observed history slots per day, oldest first.
    pub history: Vec<Vec<usize>>,
}

impl EvalCase {
    pub fn truths(&self) -> Vec<usize> {
        self.mask.targets().map(|i| self.traj.locations[i]).collect()
    }
}

/// Per-case RNG: `purpose` 0 draws masks, 1 draws diffusion noise.
fn case_rng(seed: u64, task: Task, index: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(task.code()));
    rng.set_stream(((index as u64) << 1) | purpose);
    rng
}

fn test_trajectories(cfg: &ExperimentConfig, test: &Dataset) -> Vec<Trajectory> {
    let n = if cfg.eval_users == 0 {
        test.trajectories.len()
    } else {
        cfg.eval_users.min(test.trajectories.len())
    };
    test.trajectories[..n].to_vec()
}

/// Masked queries for a prediction or recovery task on the test users.
pub fn build_cases(spec: &TaskSpec, cfg: &ExperimentConfig, test: &Dataset) -> Result<Vec<EvalCase>> {
    if spec.task.is_generation() {
        return Ok(Vec::new());
    }
    let spd = test.slots_per_day;
    test_trajectories(cfg, test)
        .into_iter()
        .enumerate()
        .map(|(i, traj)| {
            let mut rng = case_rng(cfg.seed, spec.task, i, 0);
            let (strategy, mixture) = match spec.task {
                Task::Recover => (
                    Strategy::Random,
                    MaskMixture {
                        random_ratio: spec.missing_ratio,
                        ..MaskMixture::default()
                    },
                ),
                _ => (
                    Strategy::Terminal,
                    MaskMixture {
                        terminal_horizon: spec.horizon,
                        ..MaskMixture::default()
                    },
                ),
            };
            let mask = sample_mask(strategy, traj.len(), spd, traj.start_slot, &mixture, &mut rng)?;
            let past = test.history(traj.user_id);
            let from = past.len().saturating_sub(cfg.history_days);
            let mut history = Vec::new();
            for day in &past[from..] {
                if spec.task == Task::PredictSparse {
                    let thin = MaskMixture {
                        random_ratio: spec.sparse_ratio,
                        ..MaskMixture::default()
                    };
                    let keep = sample_mask(Strategy::Random, day.len(), spd, day.start_slot, &thin, &mut rng)?;
                    history.push((0..day.len()).filter(|&s| keep.is_observed(s)).map(|s| day.locations[s]).collect());
                } else {
                    history.push(day.locations.clone());
                }
            }
            Ok(EvalCase { traj, mask, history })
        })
        .collect()
}

/// Report plus the histograms to dump alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub report: EvalReport,
    pub histograms: Vec<(String, Histogram)>,
    /// Decoded trajectories for generation tasks.
    pub generated: Vec<Trajectory>,
}

impl TaskOutcome {
    /// Write `report.json` and `hist_*.csv`; nothing for an empty report.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        if self.report.metrics.is_empty() {
            return Ok(());
        }
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.report.save(dir.join(REPORT_FILE))?;
        for (name, h) in &self.histograms {
            h.write_csv(dir.join(format!("hist_{name}.csv")))?;
        }
        Ok(())
    }
}

/// Short SHA-256 fingerprint of a dataset's contents.
pub fn dataset_fingerprint(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update((ds.slots_per_day as u64).to_le_bytes());
    for l in &ds.vocabulary {
        h.update((l.id as u64).to_le_bytes());
        h.update(l.x.to_le_bytes());
        h.update(l.y.to_le_bytes());
    }
    for t in ds.trajectories.iter().chain(ds.histories.values().flatten()) {
        h.update(t.user_id.to_le_bytes());
        h.update((t.start_slot as u64).to_le_bytes());
        for &l in &t.locations {
            h.update((l as u64).to_le_bytes());
        }
    }
    hex(&h.finalize())[..16].to_string()
}

fn timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("{secs}")
}

fn new_report(name: &str, cfg: &ExperimentConfig, dataset: &Dataset) -> EvalReport {
    EvalReport::new(
        name,
        ReportMetadata {
            dataset: dataset_fingerprint(dataset),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            timestamp: timestamp(),
        },
    )
}

/// Rank the target slots of every case by sampling once and decoding.
pub fn genmove_rankings(spec: &TaskSpec, cfg: &ExperimentConfig, art: &Artifacts, cases: &[EvalCase]) -> Result<Vec<Vec<Vec<usize>>>> {
    let schedule = cfg.schedule()?;
    let indexed: Vec<(usize, &EvalCase)> = cases.iter().enumerate().collect();
    let chunks: Vec<Vec<Vec<Vec<usize>>>> = indexed
        .par_chunks(cfg.eval_chunk)
        .map(|chunk| {
            let sample_cases: Vec<SampleCase> = chunk
                .iter()
                .map(|(_, c)| {
                    let e_all = embed_ids(&c.traj.locations, &art.table);
                    let hist: Vec<Mat> = c.history.iter().filter(|h| !h.is_empty()).map(|h| embed_ids(h, &art.table)).collect();
                    SampleCase {
                        e_co: apply_mask(&e_all, &c.mask).e_co,
                        mask: c.mask.clone(),
                        context: art.model.encode_history(&hist),
                    }
                })
                .collect();
            let mut rngs: Vec<ChaCha8Rng> = chunk.iter().map(|(i, _)| case_rng(cfg.seed, spec.task, *i, 1)).collect();
            let out = sample_batch(&art.model, &sample_cases, &schedule, spec.omega, &mut rngs);
            chunk
                .iter()
                .zip(out)
                .map(|((_, c), e)| c.mask.targets().map(|s| decode(e.row(s), &art.table, cfg.decode_k)).collect())
                .collect()
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

fn baseline_rankings(name: Baseline, spec: &TaskSpec, cfg: &ExperimentConfig, train: &Dataset, cases: &[EvalCase]) -> Vec<Vec<Vec<usize>>> {
    let vocab = &train.vocabulary;
    let k = cfg.decode_k;
    let transitions = (name == Baseline::Markov1).then(|| TransitionCounts::from_dataset(train));
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = case_rng(cfg.seed, spec.task, i, 1);
            let locs = &c.traj.locations;
            c.mask
                .targets()
                .map(|s| match name {
                    Baseline::UniformRandomGen => baselines::uniform_ranking(vocab.len(), k, &mut rng),
                    Baseline::LinearInterp => baselines::linear_interp(vocab, locs, &c.mask, s, k),
                    Baseline::Persistence => baselines::persistence(vocab, locs, &c.mask, s, k),
                    Baseline::Markov1 => baselines::markov1(vocab, transitions.as_ref().unwrap(), locs, &c.mask, s, k),
                })
                .collect()
        })
        .collect()
}

fn score_cases(report: &mut EvalReport, spec: &TaskSpec, cfg: &ExperimentConfig, dataset: &Dataset, cases: &[EvalCase], rankings: &[Vec<Vec<usize>>]) {
    let truths: Vec<usize> = cases.iter().flat_map(|c| c.truths()).collect();
    let flat: Vec<Vec<usize>> = rankings.iter().flatten().cloned().collect();
    report.insert("n_cases", cases.len() as f64);
    report.insert("n_slots", truths.len() as f64);
    if truths.is_empty() {
        return;
    }
    match spec.task {
        Task::Recover => {
            let s = recovery_scores(&flat, &truths, &dataset.vocabulary, cfg.recall_k);
            report.insert("recall", s.recall);
            report.insert("map", s.map);
            report.insert("distance_m", s.distance_m);
        }
        _ => {
            for k in [1, 3, 5, 10] {
                if k <= cfg.decode_k {
                    report.insert(format!("acc@{k}"), accuracy_at_k(&flat, &truths, k));
                }
            }
        }
    }
}

fn generation_templates(cfg: &ExperimentConfig, test: &Dataset, n: usize) -> Vec<Trajectory> {
    let pool = test_trajectories(cfg, test);
    (0..n)
        .map(|i| {
            let t = &pool[i % pool.len()];
            Trajectory {
                user_id: i as u32,
                start_slot: t.start_slot,
                locations: vec![0; t.len()],
            }
        })
        .collect()
}

fn radius_summary(report: &mut EvalReport, trajs: &[Trajectory], dataset: &Dataset) -> Histogram {
    let mut radii: Vec<f64> = trajs.iter().map(|t| radius_of_gyration(&t.locations, &dataset.vocabulary)).collect();
    radii.sort_by(f64::total_cmp);
    report.insert("median_radius_km", median(&radii));
    report.insert("mean_radius_km", radii.iter().sum::<f64>() / radii.len() as f64);
    let hi = radii.last().copied().unwrap_or(0.0).max(1e-9);
    Histogram::equal_width(&radii, 0.0, hi, crate::metrics::CONTINUOUS_BINS)
}

pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn generation_outcome(name: &str, spec: &TaskSpec, cfg: &ExperimentConfig, dataset: &Dataset, test: &Dataset, generated: Vec<Trajectory>) -> TaskOutcome {
    let mut report = new_report(name, cfg, dataset);
    let mut histograms = Vec::new();
    if generated.is_empty() {
        return TaskOutcome {
            report,
            histograms,
            generated,
        };
    }
    report.insert("n_samples", generated.len() as f64);
    match spec.task {
        Task::GenerateControlled => {
            report.insert("target_radius_km", spec.radius_km);
            let h = radius_summary(&mut report, &generated, dataset);
            histograms.push(("radius_generated".to_string(), h));
        }
        _ => {
            let real = mobility_statistics(&test_trajectories(cfg, test), &dataset.vocabulary, dataset.slots_per_day);
            let gen = mobility_statistics(&generated, &dataset.vocabulary, dataset.slots_per_day);
            for pair in compare_statistics(&real, &gen) {
                report.insert(format!("jsd_{}", pair.name), crate::metrics::jsd(&pair.real, &pair.generated));
                histograms.push((format!("{}_real", pair.name), pair.real));
                histograms.push((format!("{}_generated", pair.name), pair.generated));
            }
        }
    }
    TaskOutcome {
        report,
        histograms,
        generated,
    }
}

/// Sample, decode and score one task with the trained model.
pub fn run_task(spec: &TaskSpec, cfg: &ExperimentConfig, art: &Artifacts, dataset: &Dataset) -> Result<TaskOutcome> {
    spec.validate()?;
    if art.table.n_locations() != dataset.n_locations() || art.model.config.loc_dim != art.table.dim() {
        return Err(Error::InvalidParameters("checkpoints do not match the dataset".into()));
    }
    let parts = split(cfg, dataset)?;
    let test = &parts.test;
    if test.trajectories.is_empty() {
        return Err(Error::InvalidParameters("no held-out users to evaluate".into()));
    }
    if spec.task.is_generation() {
        let templates = generation_templates(cfg, test, spec.samples);
        let generated = generate(spec, cfg, art, &templates)?;
        return Ok(generation_outcome(spec.task.as_str(), spec, cfg, dataset, test, generated));
    }
    let cases = build_cases(spec, cfg, test)?;
    let rankings = genmove_rankings(spec, cfg, art, &cases)?;
    let mut report = new_report(spec.task.as_str(), cfg, dataset);
    score_cases(&mut report, spec, cfg, dataset, &cases, &rankings);
    Ok(TaskOutcome {
        report,
        histograms: Vec::new(),
        generated: Vec::new(),
    })
}

/// Fully masked sampling of one trajectory per template.
fn generate(spec: &TaskSpec, cfg: &ExperimentConfig, art: &Artifacts, templates: &[Trajectory]) -> Result<Vec<Trajectory>> {
    let schedule = cfg.schedule()?;
    let d = art.table.dim();
    let ctx_dim = art.model.config.context_dim;
    let indexed: Vec<(usize, &Trajectory)> = templates.iter().enumerate().collect();
    let chunks: Vec<Vec<Trajectory>> = indexed
        .par_chunks(cfg.eval_chunk)
        .map(|chunk| {
            let mut rngs: Vec<ChaCha8Rng> = chunk.iter().map(|(i, _)| case_rng(cfg.seed, spec.task, *i, 1)).collect();
            let cases: Vec<SampleCase> = chunk
                .iter()
                .map(|(i, t)| {
                    let context = match (spec.task, spec.context) {
                        (Task::GenerateControlled, _) | (_, GenerateContext::Flow) => {
                            let features = ConditionFeatures {
                                radius_km: spec.radius_km,
                                mean_speed: None,
                            };
                            let mut rng = case_rng(cfg.seed, spec.task, *i, 0);
                            art.flow.generate(&features, &mut rng)
                        }
                        _ => ContextEmbedding::null(ctx_dim),
                    };
                    SampleCase {
                        e_co: Mat::zeros((t.len(), d)),
                        mask: Mask::all_target(t.len()),
                        context,
                    }
                })
                .collect();
            let out = sample_batch(&art.model, &cases, &schedule, spec.omega, &mut rngs);
            chunk
                .iter()
                .zip(out)
                .map(|((_, t), e)| Trajectory {
                    user_id: t.user_id,
                    start_slot: t.start_slot,
                    locations: (0..t.len()).map(|s| decode(e.row(s), &art.table, 1)[0]).collect(),
                })
                .collect()
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

/// Score a comparator on the same cases as [`run_task`].
pub fn run_baseline(name: Baseline, spec: &TaskSpec, cfg: &ExperimentConfig, dataset: &Dataset) -> Result<TaskOutcome> {
    spec.validate()?;
    let parts = split(cfg, dataset)?;
    let test = &parts.test;
    if test.trajectories.is_empty() {
        return Err(Error::InvalidParameters("no held-out users to evaluate".into()));
    }
    let label = format!("{}:{}", name, spec.task);
    if spec.task.is_generation() {
        if name != Baseline::UniformRandomGen {
            return Err(Error::Unsupported(format!("baseline {name} does not generate trajectories")));
        }
        let generated: Vec<Trajectory> = generation_templates(cfg, test, spec.samples)
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let mut rng = case_rng(cfg.seed, spec.task, i, 1);
                Trajectory {
                    locations: baselines::uniform_sequence(dataset.n_locations(), t.len(), &mut rng),
                    ..t
                }
            })
            .collect();
        return Ok(generation_outcome(&label, spec, cfg, dataset, test, generated));
    }
    let cases = build_cases(spec, cfg, test)?;
    let rankings = baseline_rankings(name, spec, cfg, &parts.train, &cases);
    let mut report = new_report(&label, cfg, dataset);
    score_cases(&mut report, spec, cfg, dataset, &cases, &rankings);
    Ok(TaskOutcome {
        report,
        histograms: Vec::new(),
        generated: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_epr, EprParams};

    fn small() -> (ExperimentConfig, Dataset) {
        let ds = synthesize_epr(&EprParams {
            n_users: 30,
            days: 3,
            grid_side: 6,
            ..EprParams::default()
        })
        .unwrap();
        let cfg = ExperimentConfig {
            train_fraction: 0.6,
            valid_fraction: 0.2,
            test_fraction: 0.2,
            ..ExperimentConfig::default()
        };
        (cfg, ds)
    }

    #[test]
    fn task_names_round_trip() {
        for t in Task::ALL {
            assert_eq!(t.as_str().parse::<Task>().unwrap(), t);
        }
        assert!("fly".parse::<Task>().is_err());
    }

    #[test]
    fn cases_follow_task_masks() {
        let (cfg, ds) = small();
        let test = split(&cfg, &ds).unwrap().test;
        let next = build_cases(&TaskSpec::from_config(Task::PredictNext, &cfg), &cfg, &test).unwrap();
        assert_eq!(next.len(), test.trajectories.len());
        assert!(next.iter().all(|c| c.mask.targets().collect::<Vec<_>>() == vec![47]));
        let long = build_cases(&TaskSpec::from_config(Task::PredictLong, &cfg), &cfg, &test).unwrap();
        assert!(long.iter().all(|c| c.mask.n_targets() == 8));
        let rec = build_cases(&TaskSpec::from_config(Task::Recover, &cfg), &cfg, &test).unwrap();
        assert!(rec.iter().all(|c| c.mask.n_targets() == 9));
        let sparse = build_cases(&TaskSpec::from_config(Task::PredictSparse, &cfg), &cfg, &test).unwrap();
        assert!(sparse.iter().all(|c| c.history.iter().all(|h| h.len() == 24)));
        // masks are a pure function of (seed, task, case)
        assert_eq!(rec, build_cases(&TaskSpec::from_config(Task::Recover, &cfg), &cfg, &test).unwrap());
    }

    #[test]
    fn baseline_reports_have_expected_keys() {
        let (cfg, ds) = small();
        let rec = run_baseline(Baseline::LinearInterp, &TaskSpec::from_config(Task::Recover, &cfg), &cfg, &ds).unwrap();
        for key in ["recall", "map", "distance_m"] {
            assert!(rec.report.get(key).is_some(), "{key}");
        }
        let next = run_baseline(Baseline::Markov1, &TaskSpec::from_config(Task::PredictNext, &cfg), &cfg, &ds).unwrap();
        assert!(next.report.get("acc@5").is_some());
        let gen = run_baseline(Baseline::UniformRandomGen, &TaskSpec::from_config(Task::Generate, &cfg), &cfg, &ds).unwrap();
        assert!(gen.report.get("jsd_radius").unwrap() > 0.0);
        assert!(run_baseline(Baseline::Persistence, &TaskSpec::from_config(Task::Generate, &cfg), &cfg, &ds).is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let (_, ds) = small();
        let mut other = ds.clone();
        other.trajectories[0].locations[0] = (other.trajectories[0].locations[0] + 1) % other.n_locations();
        assert_ne!(dataset_fingerprint(&ds), dataset_fingerprint(&other));
        assert_eq!(dataset_fingerprint(&ds).len(), 16);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[1.0, 2.0, 9.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 4.0, 9.0]), 3.0);
    }
}
