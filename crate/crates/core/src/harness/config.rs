use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::FlowConfig;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::geo::LineConfig;
use crate::mask::MaskMixture;

pub const SEED_ENV: &str = "GENMOVE_SEED";

/// Every tunable of an experiment, loaded from a flat TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,

    pub embed_dim: usize,
    pub embed_neighbours: usize,
    pub embed_epochs: usize,
    pub embed_negatives: usize,
    pub embed_lr: f64,

    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Guidance weight for conditioned tasks.
    pub omega: f64,
    /// Guidance weight for unconditional generation.
    pub omega_generate: f64,
    pub lambda_uncond: f64,

    pub mask_random: f64,
    pub mask_terminal: f64,
    pub mask_complete: f64,
    pub mask_sequential: f64,
    pub mask_circadian: f64,
    pub random_ratio: f64,
    pub sequential_ratio: f64,
    pub terminal_horizon: usize,

    /// Use the full-size denoiser instead of the fields below.
    pub faithful: bool,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub conv_channels: usize,
    pub context_dim: usize,
    pub history_hidden: usize,
    pub ff_mult: usize,
    pub positional: bool,
    /// Most recent history days fed to the encoder.
    pub history_days: usize,
    /// Also train on each history day, conditioned on the days before it.
    pub augment_history: bool,

    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,

    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub flow_epochs: usize,
    pub flow_lr: f64,
    pub flow_batch: usize,

    /// Trajectories drawn by the generation tasks.
    pub samples: usize,
    pub missing_ratio: f64,
    pub long_horizon: usize,
    /// Fraction of history slots dropped in the sparse prediction task.
    pub sparse_ratio: f64,
    pub control_radius_km: f64,
    /// "null" or "flow".
    pub generate_context: String,
    pub decode_k: usize,
    pub recall_k: usize,
    /// Cases sampled together in one fused batch.
    pub eval_chunk: usize,
    /// Test users evaluated; 0 means all.
    pub eval_users: usize,

    /// Mask mixture weights for `sweep`, in strategy order
    /// random, terminal, complete, sequential, circadian.
    pub sweep_grid: Vec<[f64; 5]>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mix = MaskMixture::default();
        Self {
            seed: 0,
            train_fraction: 0.8,
            valid_fraction: 0.1,
            test_fraction: 0.1,
            embed_dim: 32,
            embed_neighbours: 4,
            embed_epochs: 200,
            embed_negatives: 5,
            embed_lr: 0.025,
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.2,
            omega: 1.0,
            omega_generate: 0.0,
            lambda_uncond: 0.1,
            mask_random: mix.weights[0],
            mask_terminal: mix.weights[1],
            mask_complete: mix.weights[2],
            mask_sequential: mix.weights[3],
            mask_circadian: mix.weights[4],
            random_ratio: mix.random_ratio,
            sequential_ratio: mix.sequential_ratio,
            terminal_horizon: mix.terminal_horizon,
            faithful: false,
            d_model: 64,
            layers: 2,
            heads: 4,
            conv_channels: 32,
            context_dim: 32,
            history_hidden: 32,
            ff_mult: 2,
            positional: true,
            history_days: 6,
            augment_history: true,
            lr: 1e-3,
            batch_size: 16,
            epochs: 40,
            clip_norm: 1.0,
            flow_layers: 4,
            flow_hidden: 64,
            flow_epochs: 300,
            flow_lr: 1e-3,
            flow_batch: 64,
            samples: 200,
            missing_ratio: 0.2,
            long_horizon: 8,
            sparse_ratio: 0.5,
            control_radius_km: 2.0,
            generate_context: "null".into(),
            decode_k: 10,
            recall_k: 1,
            eval_chunk: 32,
            eval_users: 0,
            sweep_grid: vec![mix.weights],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a file (or defaults when `path` is `None`), apply `key=value`
    /// overrides, then the seed environment variable.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        Self::from_table(table, overrides)
    }

    /// Copy with `key=value` overrides (and the seed variable) applied.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(table, overrides)
    }

    fn from_table(mut table: toml::Table, overrides: &[String]) -> Result<Self> {
        for kv in overrides {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
            table.insert(key.trim().to_string(), parse_value(value.trim()));
        }
        if let Ok(seed) = std::env::var(SEED_ENV) {
            let seed: i64 = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={seed:?} is not an integer")))?;
            table.insert("seed".into(), toml::Value::Integer(seed));
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let fr = self.train_fraction + self.valid_fraction + self.test_fraction;
        if (fr - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions sum to {fr}, not 1"));
        }
        if !(self.missing_ratio > 0.0 && self.missing_ratio < 1.0) {
            return bad(format!("missing_ratio {} must lie in (0, 1)", self.missing_ratio));
        }
        if !(0.0..1.0).contains(&self.sparse_ratio) {
            return bad(format!("sparse_ratio {} must lie in [0, 1)", self.sparse_ratio));
        }
        if self.long_horizon == 0 || self.terminal_horizon == 0 {
            return bad("horizons must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_chunk == 0 || self.decode_k == 0 || self.recall_k == 0 {
            return bad("batch_size, eval_chunk, decode_k and recall_k must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return bad("lr and clip_norm must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lambda_uncond) {
            return bad(format!("lambda_uncond {} must lie in [0, 1]", self.lambda_uncond));
        }
        if !matches!(self.generate_context.as_str(), "null" | "flow") {
            return bad(format!("generate_context {:?} must be \"null\" or \"flow\"", self.generate_context));
        }
        if self.control_radius_km < 0.0 {
            return bad("control_radius_km must be non-negative".into());
        }
        self.mixture().validate()?;
        self.schedule()?;
        self.denoiser_config().validate()?;
        Ok(())
    }

    pub fn mixture(&self) -> MaskMixture {
        MaskMixture {
            weights: [
                self.mask_random,
                self.mask_terminal,
                self.mask_complete,
                self.mask_sequential,
                self.mask_circadian,
            ],
            random_ratio: self.random_ratio,
            sequential_ratio: self.sequential_ratio,
            terminal_horizon: self.terminal_horizon,
        }
    }

    pub fn set_mixture_weights(&mut self, w: [f64; 5]) {
        [
            self.mask_random,
            self.mask_terminal,
            self.mask_complete,
            self.mask_sequential,
            self.mask_circadian,
        ] = w;
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end, ScheduleKind::Linear)
    }

    pub fn line_config(&self) -> LineConfig {
        LineConfig {
            dim: self.embed_dim,
            epochs: self.embed_epochs,
            negatives: self.embed_negatives,
            lr: self.embed_lr,
            seed: self.seed,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        if self.faithful {
            return DenoiserConfig::faithful(self.embed_dim, self.seed);
        }
        DenoiserConfig {
            loc_dim: self.embed_dim,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            conv_channels: self.conv_channels,
            context_dim: self.context_dim,
            history_hidden: self.history_hidden,
            ff_mult: self.ff_mult,
            positional: self.positional,
            seed: self.seed,
        }
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            dim: self.denoiser_config().context_dim,
            layers: self.flow_layers,
            hidden: self.flow_hidden,
            epochs: self.flow_epochs,
            lr: self.flow_lr,
            batch_size: self.flow_batch,
            seed: self.seed,
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Interpret an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
