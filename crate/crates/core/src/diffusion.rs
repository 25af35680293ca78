//! Noise schedule, forward noising, the masked training objective with
//! context dropout, and the guided reverse sampler.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::context::ContextEmbedding;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::nn::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// Per-step noise coefficients, stored 0-based (index t−1 holds step t).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Build from explicit betas in [0, 1).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Schedule("at least one diffusion step is required".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b >= 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta {b} outside [0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigma = (0..beta.len())
            .map(|i| {
                if i == 0 {
                    beta[0].sqrt()
                } else {
                    let denom = 1.0 - alpha_bar[i];
                    if denom <= 0.0 {
                        0.0
                    } else {
                        ((1.0 - alpha_bar[i - 1]) / denom * beta[i]).sqrt()
                    }
                }
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Schedule("steps must be at least 1".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Schedule(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    NoiseSchedule::from_betas(beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Guidance weight ω.
    pub omega: f64,
    /// Probability λ of replacing the context with ∅ during training.
    pub lambda_uncond: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            omega: 1.0,
            lambda_uncond: 0.1,
        }
    }
}

/// One noise-prediction request.
#[derive(Debug, Clone, Copy)]
pub struct NoiseQuery<'a> {
    pub e_t: &'a Mat,
    pub e_co: &'a Mat,
    pub mask: &'a Mask,
    pub t: usize,
    pub context: &'a ContextEmbedding,
}

/// A noise predictor ε_θ(e_ta^t, t | e_co, m, p_u).
pub trait NoiseModel {
    fn predict(&self, e_t: &Mat, e_co: &Mat, mask: &Mask, t: usize, context: &ContextEmbedding) -> Mat;

    /// Evaluate several queries; implementations may fuse them.
    fn predict_batch(&self, queries: &[NoiseQuery<'_>]) -> Vec<Mat> {
        queries
            .iter()
            .map(|q| self.predict(q.e_t, q.e_co, q.mask, q.t, q.context))
            .collect()
    }
}

impl<M: NoiseModel + ?Sized> NoiseModel for &M {
    fn predict(&self, e_t: &Mat, e_co: &Mat, mask: &Mask, t: usize, context: &ContextEmbedding) -> Mat {
        (**self).predict(e_t, e_co, mask, t, context)
    }

    fn predict_batch(&self, queries: &[NoiseQuery<'_>]) -> Vec<Mat> {
        (**self).predict_batch(queries)
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Standard normal noise on target rows, zero on observed rows.
pub fn target_noise<R: Rng + ?Sized>(mask: &Mask, cols: usize, rng: &mut R) -> Mat {
    let mut eps = Mat::zeros((mask.len(), cols));
    for i in mask.targets() {
        eps.row_mut(i).iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
    }
    eps
}

/// e_ta^t = √ᾱ_t · e_ta^0 + √(1−ᾱ_t) · ε
pub fn q_sample(e_ta0: &Mat, t: usize, epsilon: &Mat, schedule: &NoiseSchedule) -> Mat {
    let ab = schedule.alpha_bar(t);
    e_ta0 * ab.sqrt() + epsilon * (1.0 - ab).sqrt()
}

/// One training example: the masked pair plus the user's context.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub e_co: Mat,
    pub e_ta0: Mat,
    pub mask: Mask,
    pub context: ContextEmbedding,
}

/// Random quantities drawn for one training example.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: usize,
    pub epsilon: Mat,
    pub drop_context: bool,
}

pub fn draw_noise<R: Rng + ?Sized>(mask: &Mask, cols: usize, schedule: &NoiseSchedule, lambda_uncond: f64, rng: &mut R) -> NoiseDraw {
    let t = rng.random_range(1..=schedule.steps());
    let epsilon = target_noise(mask, cols, rng);
    let drop_context = rng.random::<f64>() < lambda_uncond;
    NoiseDraw {
        t,
        epsilon,
        drop_context,
    }
}

/// Mean squared error over target rows; `None` when nothing is masked.
pub fn target_mse(pred: &Mat, epsilon: &Mat, mask: &Mask) -> Option<f64> {
    let n = mask.n_targets() * pred.ncols();
    if n == 0 {
        return None;
    }
    let sum: f64 = mask
        .targets()
        .map(|i| {
            pred.row(i)
                .iter()
                .zip(epsilon.row(i).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    Some(sum / n as f64)
}

/// Masked denoising loss over a batch, with context dropout probability λ.
pub fn training_loss<M: NoiseModel, R: Rng + ?Sized>(
    model: &M,
    batch: &[TrainingItem],
    schedule: &NoiseSchedule,
    lambda_uncond: f64,
    rng: &mut R,
) -> f64 {
    assert!(!batch.is_empty(), "training batch must be non-empty");
    let (mut total, mut count) = (0.0, 0usize);
    for item in batch {
        let draw = draw_noise(&item.mask, item.e_ta0.ncols(), schedule, lambda_uncond, rng);
        let e_t = q_sample(&item.e_ta0, draw.t, &draw.epsilon, schedule);
        let null = ContextEmbedding::null(item.context.dim());
        let ctx = if draw.drop_context { &null } else { &item.context };
        let pred = model.predict(&e_t, &item.e_co, &item.mask, draw.t, ctx);
        if let Some(l) = target_mse(&pred, &draw.epsilon, &item.mask) {
            total += l;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// ε̃ = (1+ω)·ε_θ(· | p_u) − ω·ε_θ(· | ∅). One model call when ω = 0.
pub fn guided_noise<M: NoiseModel>(model: &M, e_t: &Mat, e_co: &Mat, mask: &Mask, t: usize, context: &ContextEmbedding, omega: f64) -> Mat {
    let cond = model.predict(e_t, e_co, mask, t, context);
    if omega == 0.0 {
        return cond;
    }
    let uncond = model.predict(e_t, e_co, mask, t, &ContextEmbedding::null(context.dim()));
    cond * (1.0 + omega) - uncond * omega
}

/// e^{t−1} = (e^t − (1−α_t)/√(1−ᾱ_t)·ε̃)/√α_t + σ_t·z
pub fn p_sample_step(e_t: &Mat, t: usize, eps_tilde: &Mat, schedule: &NoiseSchedule, z: Option<&Mat>) -> Mat {
    let a = schedule.alpha(t);
    let ab = schedule.alpha_bar(t);
    let coef = if ab < 1.0 { (1.0 - a) / (1.0 - ab).sqrt() } else { 0.0 };
    let mean = (e_t - &(eps_tilde * coef)) / a.sqrt();
    match z {
        Some(z) if t > 1 => mean + z * schedule.sigma(t),
        _ => mean,
    }
}

/// Guided ancestral sampling of the target rows, T → 1.
///
/// Observed rows stay at zero during the chain and are restored from
/// `e_co` in the result.
pub fn sample<M: NoiseModel, R: Rng + ?Sized>(
    model: &M,
    e_co: &Mat,
    mask: &Mask,
    context: &ContextEmbedding,
    schedule: &NoiseSchedule,
    omega: f64,
    rng: &mut R,
) -> Mat {
    let cols = e_co.ncols();
    let mut out = e_co.clone();
    if mask.n_targets() == 0 {
        return out;
    }
    let observed: Vec<usize> = (0..mask.len()).filter(|&i| mask.is_observed(i)).collect();
    let mut e_t = target_noise(mask, cols, rng);
    for t in (1..=schedule.steps()).rev() {
        let eps = guided_noise(model, &e_t, e_co, mask, t, context, omega);
        let z = (t > 1).then(|| target_noise(mask, cols, rng));
        e_t = p_sample_step(&e_t, t, &eps, schedule, z.as_ref());
        for &i in &observed {
            e_t.row_mut(i).fill(0.0);
        }
    }
    for i in mask.targets() {
        out.row_mut(i).assign(&e_t.row(i));
    }
    out
}

/// Conditioning for one sampling case.
#[derive(Debug, Clone)]
pub struct SampleCase {
    pub e_co: Mat,
    pub mask: Mask,
    pub context: ContextEmbedding,
}

/// Run [`sample`] for many cases in lockstep, fusing model calls per step.
///
/// Case `i` draws all of its noise from `rngs[i]`, so each result is
/// independent of how cases are grouped.
pub fn sample_batch<M: NoiseModel, R: Rng>(
    model: &M,
    cases: &[SampleCase],
    schedule: &NoiseSchedule,
    omega: f64,
    rngs: &mut [R],
) -> Vec<Mat> {
    assert_eq!(cases.len(), rngs.len(), "one rng stream per case");
    let active: Vec<usize> = (0..cases.len()).filter(|&i| cases[i].mask.n_targets() > 0).collect();
    let mut states: Vec<Mat> = cases
        .iter()
        .zip(rngs.iter_mut())
        .map(|(c, r)| {
            if c.mask.n_targets() > 0 {
                target_noise(&c.mask, c.e_co.ncols(), r)
            } else {
                Mat::zeros(c.e_co.dim())
            }
        })
        .collect();
    let nulls: Vec<ContextEmbedding> = cases.iter().map(|c| ContextEmbedding::null(c.context.dim())).collect();

    for t in (1..=schedule.steps()).rev() {
        let mut queries = Vec::with_capacity(active.len() * 2);
        for &i in &active {
            let c = &cases[i];
            queries.push(NoiseQuery { e_t: &states[i], e_co: &c.e_co, mask: &c.mask, t, context: &c.context });
        }
        if omega != 0.0 {
            for &i in &active {
                let c = &cases[i];
                queries.push(NoiseQuery { e_t: &states[i], e_co: &c.e_co, mask: &c.mask, t, context: &nulls[i] });
            }
        }
        let preds = model.predict_batch(&queries);
        let n = active.len();
        for (k, &i) in active.iter().enumerate() {
            let eps = if omega == 0.0 {
                preds[k].clone()
            } else {
                &preds[k] * (1.0 + omega) - &preds[n + k] * omega
            };
            let c = &cases[i];
            let z = (t > 1).then(|| target_noise(&c.mask, c.e_co.ncols(), &mut rngs[i]));
            let mut next = p_sample_step(&states[i], t, &eps, schedule, z.as_ref());
            for r in 0..c.mask.len() {
                if c.mask.is_observed(r) {
                    next.row_mut(r).fill(0.0);
                }
            }
            states[i] = next;
        }
    }
    cases
        .iter()
        .zip(states)
        .map(|(c, state)| {
            let mut out = c.e_co.clone();
            for i in c.mask.targets() {
                out.row_mut(i).assign(&state.row(i));
            }
            out
        })
        .collect()
}
