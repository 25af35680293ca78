//! Mask strategies, the strategy mixture and the split of a trajectory
//! embedding into conditional observation and task target.
//!
//! Bit convention: `true` (1) marks an observed slot that conditions the
//! model, `false` (0) marks a target slot to be generated.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Terminal,
    Complete,
    Sequential,
    Circadian,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Random,
        Strategy::Terminal,
        Strategy::Complete,
        Strategy::Sequential,
        Strategy::Circadian,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Terminal => "terminal",
            Strategy::Complete => "complete",
            Strategy::Sequential => "sequential",
            Strategy::Circadian => "circadian",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidParameters(format!("unknown mask strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn all_observed(len: usize) -> Self {
        Self { bits: vec![true; len] }
    }

    pub fn all_target(len: usize) -> Self {
        Self { bits: vec![false; len] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_observed(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn targets(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| !b).map(|(i, _)| i)
    }

    pub fn n_targets(&self) -> usize {
        self.bits.iter().filter(|&&b| !b).count()
    }

    /// L×1 column of 0/1 values.
    pub fn to_column(&self) -> Mat {
        Mat::from_shape_fn((self.bits.len(), 1), |(i, _)| if self.bits[i] { 1.0 } else { 0.0 })
    }
}

/// Mixture g(·) over the five strategies and their knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMixture {
    /// Indexed (random, terminal, complete, sequential, circadian).
    pub weights: [f64; 5],
    pub random_ratio: f64,
    pub sequential_ratio: f64,
    pub terminal_horizon: usize,
}

impl Default for MaskMixture {
    fn default() -> Self {
        Self {
            weights: [0.25, 0.20, 0.20, 0.20, 0.15],
            random_ratio: 0.3,
            sequential_ratio: 0.25,
            terminal_horizon: 1,
        }
    }
}

impl MaskMixture {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameters(m));
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad(format!("mixture weights must be non-negative: {:?}", self.weights));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("mixture weights must sum to 1, got {total}"));
        }
        if !(self.random_ratio > 0.0 && self.random_ratio < 1.0) {
            return bad(format!("random_ratio must lie in (0,1), got {}", self.random_ratio));
        }
        if !(self.sequential_ratio > 0.0 && self.sequential_ratio < 1.0) {
            return bad(format!("sequential_ratio must lie in (0,1), got {}", self.sequential_ratio));
        }
        if self.terminal_horizon < 1 {
            return bad("terminal_horizon must be at least 1".into());
        }
        Ok(())
    }

    pub fn weight(&self, strategy: Strategy) -> f64 {
        self.weights[Strategy::ALL.iter().position(|&s| s == strategy).unwrap()]
    }
}

/// Categorical draw of a strategy with the mixture weights.
pub fn sample_strategy<R: Rng + ?Sized>(mixture: &MaskMixture, rng: &mut R) -> Strategy {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = None;
    for (s, &w) in Strategy::ALL.iter().zip(&mixture.weights) {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = Some(*s);
        if u < acc {
            return *s;
        }
    }
    last.expect("mixture has positive weight")
}

/// True when a slot falls in the 0:00–6:00 window.
pub fn is_night_slot(absolute_slot: usize, slots_per_day: usize) -> bool {
    (absolute_slot % slots_per_day) * 4 < slots_per_day
}

pub fn sample_mask<R: Rng + ?Sized>(
    strategy: Strategy,
    len: usize,
    slots_per_day: usize,
    start_slot: usize,
    mixture: &MaskMixture,
    rng: &mut R,
) -> Result<Mask> {
    if len == 0 {
        return Err(Error::InvalidMask("trajectory length must be at least 1".into()));
    }
    let mut bits = vec![true; len];
    match strategy {
        Strategy::Random => {
            let zeros = (mixture.random_ratio * len as f64).floor() as usize;
            for i in index::sample(rng, len, zeros) {
                bits[i] = false;
            }
        }
        Strategy::Terminal => {
            let h = mixture.terminal_horizon;
            if h >= len {
                return Err(Error::InvalidMask(format!(
                    "terminal horizon {h} leaves nothing observed in length {len}; use the complete strategy"
                )));
            }
            bits[len - h..].iter_mut().for_each(|b| *b = false);
        }
        Strategy::Complete => bits.iter_mut().for_each(|b| *b = false),
        Strategy::Sequential => {
            let run = (mixture.sequential_ratio * len as f64).floor() as usize;
            let start = rng.random_range(0..=len - run);
            bits[start..start + run].iter_mut().for_each(|b| *b = false);
        }
        Strategy::Circadian => {
            for (i, b) in bits.iter_mut().enumerate() {
                if is_night_slot(start_slot + i, slots_per_day) {
                    *b = false;
                }
            }
        }
    }
    Ok(Mask { bits })
}

/// Conditional observation / task target pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPair {
    pub e_co: Mat,
    pub e_ta0: Mat,
    pub mask: Mask,
}

pub fn apply_mask(e_all: &Mat, mask: &Mask) -> MaskedPair {
    assert_eq!(e_all.nrows(), mask.len(), "mask length must equal trajectory length");
    let mut e_co = e_all.clone();
    let mut e_ta0 = e_all.clone();
    for (i, &observed) in mask.bits.iter().enumerate() {
        if observed {
            e_ta0.row_mut(i).fill(0.0);
        } else {
            e_co.row_mut(i).fill(0.0);
        }
    }
    MaskedPair {
        e_co,
        e_ta0,
        mask: mask.clone(),
    }
}
