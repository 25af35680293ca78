use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_denoiser, load_flow, save_denoiser, save_flow};
use crate::context::{concat_history, radius_of_gyration, ConditionalFlow};
use crate::data::{split_by_user, Dataset, Split, Trajectory};
use crate::denoiser::{DenoiseExample, DenoiserModel};
use crate::diffusion::{draw_noise, NoiseDraw, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geo::{build_spatial_graph, embed, train_embeddings, EmbeddingTable};
use crate::mask::{apply_mask, sample_mask, sample_strategy, MaskMixture};
use crate::nn::{Adam, Graph, Mat};

use super::config::ExperimentConfig;

pub const EMBED_FILE: &str = "ckpt_embed.bin";
pub const MODEL_FILE: &str = "ckpt_model.bin";
pub const FLOW_FILE: &str = "ckpt_flow.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// RNG stream ids, so each consumer draws independently of the others.
pub(crate) mod stream {
    pub const SPLIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const VALID: u64 = 3;
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trained components needed to run tasks.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub table: EmbeddingTable,
    pub model: DenoiserModel,
    pub flow: ConditionalFlow,
}

impl Artifacts {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        for f in [EMBED_FILE, MODEL_FILE, FLOW_FILE] {
            if !dir.join(f).exists() {
                return Err(Error::Checkpoint {
                    path: dir.join(f),
                    message: "missing checkpoint".into(),
                });
            }
        }
        Ok(Self {
            table: EmbeddingTable::load(dir.join(EMBED_FILE))?,
            model: load_denoiser(dir.join(MODEL_FILE))?,
            flow: load_flow(dir.join(FLOW_FILE))?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation loss per epoch on fixed masks and noise.
    pub valid_loss: Vec<f64>,
    pub flow_nll: Vec<f64>,
    pub artifacts: Artifacts,
}

pub fn split(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Split> {
    split_by_user(
        dataset,
        (cfg.train_fraction, cfg.valid_fraction, cfg.test_fraction),
        cfg.seed.wrapping_add(stream::SPLIT),
    )
}

/// LINE embeddings of the k-nearest-neighbour graph, standardized.
pub fn prepare_embeddings(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<EmbeddingTable> {
    let graph = build_spatial_graph(&dataset.vocabulary, cfg.embed_neighbours)?;
    Ok(train_embeddings(&graph, &cfg.line_config())?.standardized())
}

/// One trajectory to denoise with its embedded context history.
#[derive(Debug, Clone)]
pub(crate) struct Sequence {
    pub start_slot: usize,
    pub e_all: Mat,
    pub history: Option<Mat>,
}

/// Embedded history of the `days` most recent trajectories in `past`.
pub(crate) fn embed_history(past: &[Trajectory], days: usize, table: &EmbeddingTable) -> Option<Mat> {
    let from = past.len().saturating_sub(days);
    let mats: Vec<Mat> = past[from..].iter().map(|t| embed(t, table)).collect();
    concat_history(&mats)
}

fn sequences(cfg: &ExperimentConfig, ds: &Dataset, table: &EmbeddingTable) -> Vec<Sequence> {
    let mut out = Vec::new();
    for traj in &ds.trajectories {
        let past = ds.history(traj.user_id);
        if cfg.augment_history {
            for (k, day) in past.iter().enumerate() {
                out.push(Sequence {
                    start_slot: day.start_slot,
                    e_all: embed(day, table),
                    history: embed_history(&past[..k], cfg.history_days, table),
                });
            }
        }
        out.push(Sequence {
            start_slot: traj.start_slot,
            e_all: embed(traj, table),
            history: embed_history(past, cfg.history_days, table),
        });
    }
    out
}

fn example<R: rand::Rng>(
    seq: &Sequence,
    mixture: &MaskMixture,
    spd: usize,
    schedule: &NoiseSchedule,
    lambda: f64,
    rng: &mut R,
) -> Result<(DenoiseExample, NoiseDraw)> {
    let strategy = sample_strategy(mixture, rng);
    let mask = sample_mask(strategy, seq.e_all.nrows(), spd, seq.start_slot, mixture, rng)?;
    let pair = apply_mask(&seq.e_all, &mask);
    let draw = draw_noise(&mask, seq.e_all.ncols(), schedule, lambda, rng);
    Ok((
        DenoiseExample {
            e_co: pair.e_co,
            e_ta0: pair.e_ta0,
            mask,
            history: seq.history.clone(),
        },
        draw,
    ))
}

fn batch_loss(model: &DenoiserModel, examples: &[DenoiseExample], draws: &[NoiseDraw], schedule: &NoiseSchedule) -> Option<f64> {
    let mut g = Graph::new(&model.params);
    model.denoising_loss(&mut g, examples, draws, schedule).map(|l| g.scalar(l))
}

/// Train embeddings, the denoiser with its history encoder, then the flow.
///
/// With an output directory, checkpoints are written after every epoch
/// together with the loss log and the resolved config.
pub fn train(cfg: &ExperimentConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.trajectories.is_empty() {
        return Err(Error::TrainingImpossible("dataset has no trajectories".into()));
    }
    let parts = split(cfg, dataset)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    }
    let table = match out_dir.map(|d| d.join(EMBED_FILE)).filter(|p| p.exists()) {
        Some(path) => {
            let t = EmbeddingTable::load(&path)?;
            if t.n_locations() != dataset.n_locations() || t.dim() != cfg.embed_dim {
                return Err(Error::Checkpoint {
                    path,
                    message: "embedding table does not match dataset and config".into(),
                });
            }
            t
        }
        None => {
            let t = prepare_embeddings(cfg, dataset)?;
            let t = round_to_f32_table(&t);
            if let Some(dir) = out_dir {
                t.save(dir.join(EMBED_FILE))?;
            }
            t
        }
    };

    let schedule = cfg.schedule()?;
    let mixture = cfg.mixture();
    let spd = dataset.slots_per_day;
    let train_seqs = sequences(cfg, &parts.train, &table);
    let valid_seqs: Vec<Sequence> = sequences(&ExperimentConfig { augment_history: false, ..cfg.clone() }, &parts.valid, &table);
    let mut model = DenoiserModel::new(cfg.denoiser_config())?;
    let mut adam = Adam::new(&model.params, cfg.lr).with_clip(cfg.clip_norm);
    let mut rng = rng_for(cfg.seed, stream::TRAIN);

    let model_path: Option<PathBuf> = out_dir.map(|d| d.join(MODEL_FILE));
    let mut log = match out_dir {
        Some(d) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(d.join(LOSS_FILE))?);
            writeln!(f, "epoch,train_loss,valid_loss")?;
            f.flush()?;
            Some(f)
        }
        None => None,
    };
    if let Some(p) = &model_path {
        save_denoiser(p, &model)?;
    }

    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut valid_loss = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut examples = Vec::with_capacity(chunk.len());
            let mut draws = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (e, d) = example(&train_seqs[i], &mixture, spd, &schedule, cfg.lambda_uncond, &mut rng)?;
                examples.push(e);
                draws.push(d);
            }
            if examples.iter().all(|e| e.mask.n_targets() == 0) {
                continue;
            }
            let (value, grads) = model
                .parameter_gradients(|m, g| m.denoising_loss(g, &examples, &draws, &schedule).expect("targets present"))
                .map_err(|e| match e {
                    Error::Gradient(msg) => Error::NonFiniteLoss {
                        epoch,
                        batch: bi,
                        value: msg.parse().unwrap_or(f64::NAN),
                    },
                    other => other,
                })?;
            adam.step(&mut model.params, &grads);
            sum += value;
            n += 1;
        }
        let mean = if n == 0 { 0.0 } else { sum / n as f64 };
        train_loss.push(mean);
        let vl = validation_loss(&model, &valid_seqs, &mixture, spd, &schedule, cfg)?;
        valid_loss.push(vl);
        if let Some(f) = log.as_mut() {
            writeln!(f, "{},{},{}", epoch + 1, mean, vl)?;
            f.flush()?;
        }
        if let Some(p) = &model_path {
            save_denoiser(p, &model)?;
        }
    }

    // the flow learns the encoder's p_u of the final model, per training user
    let mut flow = ConditionalFlow::new(cfg.flow_config());
    let (radii, contexts) = flow_pairs(cfg, &parts.train, &model, &table);
    let flow_nll = if radii.is_empty() {
        Vec::new()
    } else {
        flow.fit(&radii, &contexts)?
    };
    if let Some(dir) = out_dir {
        save_flow(dir.join(FLOW_FILE), &flow)?;
    }

    // evaluation always sees parameters as stored on disk
    let model = match &model_path {
        Some(p) => load_denoiser(p)?,
        None => round_model(&model)?,
    };
    let flow = ConditionalFlow::from_parts(flow.config.clone(), &round(&flow.params.to_flat()))?;
    Ok(TrainOutcome {
        train_loss,
        valid_loss,
        flow_nll,
        artifacts: Artifacts { table, model, flow },
    })
}

fn validation_loss(
    model: &DenoiserModel,
    seqs: &[Sequence],
    mixture: &MaskMixture,
    spd: usize,
    schedule: &NoiseSchedule,
    cfg: &ExperimentConfig,
) -> Result<f64> {
    let mut rng = rng_for(cfg.seed, stream::VALID);
    let (mut sum, mut n) = (0.0, 0usize);
    for chunk in seqs.chunks(cfg.batch_size) {
        let mut examples = Vec::with_capacity(chunk.len());
        let mut draws = Vec::with_capacity(chunk.len());
        for s in chunk {
            let (e, d) = example(s, mixture, spd, schedule, 0.0, &mut rng)?;
            examples.push(e);
            draws.push(d);
        }
        if let Some(l) = batch_loss(model, &examples, &draws, schedule) {
            sum += l;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// (radius of the current trajectory, encoded p_u) for users with history.
pub(crate) fn flow_pairs(cfg: &ExperimentConfig, ds: &Dataset, model: &DenoiserModel, table: &EmbeddingTable) -> (Vec<f64>, Mat) {
    let mut radii = Vec::new();
    let mut rows = Vec::new();
    for traj in &ds.trajectories {
        let Some(h) = embed_history(ds.history(traj.user_id), cfg.history_days, table) else {
            continue;
        };
        let p = model.encode_history(&[h]);
        radii.push(radius_of_gyration(&traj.locations, &ds.vocabulary));
        rows.extend_from_slice(p.values());
    }
    let dim = model.config.context_dim;
    let n = radii.len();
    (radii, Mat::from_shape_vec((n, dim), rows).expect("one row per pair"))
}

fn round(flat: &[f64]) -> Vec<f64> {
    flat.iter().map(|&v| v as f32 as f64).collect()
}

fn round_model(model: &DenoiserModel) -> Result<DenoiserModel> {
    DenoiserModel::from_parts(model.config.clone(), &round(&model.params.to_flat()))
}

fn round_to_f32_table(t: &EmbeddingTable) -> EmbeddingTable {
    EmbeddingTable {
        vectors: t.vectors.mapv(|v| v as f32 as f64),
    }
}

/// Read back `epoch,train_loss,valid_loss` rows.
pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<(usize, f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let parse = || -> Option<(usize, f64, f64)> { Some((f.first()?.parse().ok()?, f.get(1)?.parse().ok()?, f.get(2)?.parse().ok()?)) };
            parse().ok_or_else(|| Error::Parse {
                line: i + 2,
                message: format!("bad loss row {line:?}"),
            })
        })
        .collect()
}
