//! User context p_u: the recurrent history encoder, trajectory features,
//! and the conditional affine-coupling flow that maps features to p_u.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Location, Trajectory};
use crate::error::{Error, Result};
use crate::nn::{Adam, Graph, Mat, ParamId, ParamStore, Var};

/// Trajectory-level embedding p_u, or the null context ∅ (all zeros).
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbedding {
    values: Vec<f64>,
    is_null: bool,
}

impl ContextEmbedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, is_null: false }
    }

    pub fn null(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
            is_null: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_null(&self) -> bool {
        self.is_null
    }

    pub fn to_row(&self) -> Mat {
        Mat::from_shape_vec((1, self.values.len()), self.values.clone()).expect("row shape")
    }

    pub fn cosine(&self, other: &ContextEmbedding) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        let na: f64 = self.values.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = other.values.iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-12)
    }
}

/// LSTM over the concatenated history embedding, final state projected to
/// the context dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEncoder {
    pub input_dim: usize,
    pub hidden: usize,
    pub context_dim: usize,
    gates_w: ParamId,
    gates_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl HistoryEncoder {
    pub fn register<R: Rng>(params: &mut ParamStore, input_dim: usize, hidden: usize, context_dim: usize, rng: &mut R) -> Self {
        let gates_w = params.normal("history.lstm.w", input_dim + hidden, 4 * hidden, 1.0, rng);
        let mut bias = Mat::zeros((1, 4 * hidden));
        // forget gate starts open
        bias.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        let gates_b = params.add("history.lstm.b", bias);
        let proj_w = params.normal("history.proj.w", hidden, context_dim, 1.0, rng);
        let proj_b = params.zeros("history.proj.b", 1, context_dim);
        Self {
            input_dim,
            hidden,
            context_dim,
            gates_w,
            gates_b,
            proj_w,
            proj_b,
        }
    }

    /// p_u as a 1×context_dim node; `history` holds one embedded slot per row.
    pub fn forward(&self, g: &mut Graph, history: &Mat) -> Var {
        let x = g.constant(history.clone());
        let w = g.param(self.gates_w);
        let b = g.param(self.gates_b);
        let h = g.lstm(x, w, b);
        g.linear(h, self.proj_w, self.proj_b)
    }

    /// p_u for several non-empty histories at once, B×context_dim.
    pub fn forward_batch(&self, g: &mut Graph, histories: &[Mat]) -> Var {
        let w = g.param(self.gates_w);
        let b = g.param(self.gates_b);
        let h = g.lstm_batch(histories, w, b);
        g.linear(h, self.proj_w, self.proj_b)
    }

    /// Encode a user's embedded history trajectories; ∅ when there are none.
    pub fn encode(&self, params: &ParamStore, histories: &[Mat]) -> ContextEmbedding {
        match concat_history(histories) {
            None => ContextEmbedding::null(self.context_dim),
            Some(seq) => {
                let mut g = Graph::new(params);
                let p = self.forward(&mut g, &seq);
                ContextEmbedding::new(g.value(p).iter().copied().collect())
            }
        }
    }
}

/// Stack history trajectories in time order; `None` if there are no rows.
pub fn concat_history(histories: &[Mat]) -> Option<Mat> {
    let views: Vec<_> = histories.iter().filter(|h| h.nrows() > 0).map(|h| h.view()).collect();
    if views.is_empty() {
        return None;
    }
    Some(ndarray::concatenate(ndarray::Axis(0), &views).expect("history embeddings share a dimension"))
}

/// Trajectory features r_u that drive the conditional controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionFeatures {
    pub radius_km: f64,
    /// Mean displacement per slot, km.
    pub mean_speed: Option<f64>,
}

/// Root-mean-square distance of visited coordinates from their centroid.
pub fn radius_of_gyration(locations: &[usize], vocabulary: &[Location]) -> f64 {
    let n = locations.len() as f64;
    let (sx, sy) = locations
        .iter()
        .fold((0.0, 0.0), |(sx, sy), &l| (sx + vocabulary[l].x, sy + vocabulary[l].y));
    let (cx, cy) = (sx / n, sy / n);
    let ss: f64 = locations
        .iter()
        .map(|&l| (vocabulary[l].x - cx).powi(2) + (vocabulary[l].y - cy).powi(2))
        .sum();
    (ss / n).sqrt()
}

pub fn condition_features(traj: &Trajectory, vocabulary: &[Location]) -> ConditionFeatures {
    let radius_km = radius_of_gyration(&traj.locations, vocabulary);
    let mean_speed = (traj.len() > 1).then(|| {
        traj.locations
            .windows(2)
            .map(|w| vocabulary[w[0]].distance_km(&vocabulary[w[1]]))
            .sum::<f64>()
            / (traj.len() - 1) as f64
    });
    ConditionFeatures { radius_km, mean_speed }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            layers: 4,
            hidden: 64,
            epochs: 300,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Coupling {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    /// Which half conditions the other: false → first half is passive.
    swap: bool,
}

/// Conditional affine-coupling flow f(z | r) → p_u.
///
/// p_u and the radius are standardized with statistics fitted on the
/// training pairs; the coupling layers act in standardized space.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalFlow {
    pub config: FlowConfig,
    pub params: ParamStore,
    layers: Vec<Coupling>,
    p_mean: ParamId,
    p_std: ParamId,
    /// 1×2: mean and std of the radius feature.
    r_stats: ParamId,
}

/// Bounded log-scale keeps every layer's Jacobian well conditioned.
const LOG_SCALE_BOUND: f64 = 3.0;

impl ConditionalFlow {
    /// Flow with zero output layers: forward is the identity map.
    pub fn new(config: FlowConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let half = config.dim / 2;
        let mut layers = Vec::with_capacity(config.layers);
        for k in 0..config.layers {
            let swap = k % 2 == 1;
            let passive = if swap { config.dim - half } else { half };
            let active = config.dim - passive;
            layers.push(Coupling {
                w1: params.normal(format!("flow.{k}.w1"), passive + 1, config.hidden, 1.0, &mut rng),
                b1: params.zeros(format!("flow.{k}.b1"), 1, config.hidden),
                w2: params.zeros(format!("flow.{k}.w2"), config.hidden, 2 * active),
                b2: params.zeros(format!("flow.{k}.b2"), 1, 2 * active),
                swap,
            });
        }
        let p_mean = params.zeros("flow.stats.p_mean", 1, config.dim);
        let p_std = params.ones("flow.stats.p_std", 1, config.dim);
        let r_stats = params.add("flow.stats.r", ndarray::array![[0.0, 1.0]]);
        Self {
            config,
            params,
            layers,
            p_mean,
            p_std,
            r_stats,
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    fn half_split(&self, layer: &Coupling) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let half = self.config.dim / 2;
        if layer.swap {
            (half..self.config.dim, 0..half)
        } else {
            (0..half, half..self.config.dim)
        }
    }

    fn normalize_radius(&self, r: f64) -> f64 {
        let s = self.params.get(self.r_stats);
        (r - s[[0, 0]]) / s[[0, 1]]
    }

    /// (log-scale, shift) for one layer from the passive half and condition.
    fn scale_shift(&self, g: &mut Graph, layer: &Coupling, passive: Var, cond: Var) -> (Var, Var) {
        let input = g.concat_cols(&[passive, cond]);
        let h = g.linear(input, layer.w1, layer.b1);
        let h = g.relu(h);
        let out = g.linear(h, layer.w2, layer.b2);
        let active = g.shape(out).1 / 2;
        let raw = g.slice_cols(out, 0, active);
        let shift = g.slice_cols(out, active, 2 * active);
        let t = g.scale(raw, 1.0 / LOG_SCALE_BOUND);
        let t = g.tanh(t);
        let log_scale = g.scale(t, LOG_SCALE_BOUND);
        (log_scale, shift)
    }

    fn reassemble(&self, g: &mut Graph, layer: &Coupling, passive: Var, active: Var) -> Var {
        if layer.swap {
            g.concat_cols(&[active, passive])
        } else {
            g.concat_cols(&[passive, active])
        }
    }

    /// Standardized p → z, returning z and the summed log-scales
    /// (log|det ∂p/∂z| per row), both as graph nodes.
    fn inverse_graph(&self, g: &mut Graph, p_std: Var, cond: Var) -> (Var, Vec<Var>) {
        let mut x = p_std;
        let mut log_scales = Vec::with_capacity(self.layers.len());
        for layer in self.layers.iter().rev() {
            let (pr, ar) = self.half_split(layer);
            let passive = g.slice_cols(x, pr.start, pr.end);
            let active = g.slice_cols(x, ar.start, ar.end);
            let (s, t) = self.scale_shift(g, layer, passive, cond);
            let centred = g.sub(active, t);
            let neg = g.scale(s, -1.0);
            let inv = g.exp(neg);
            let restored = g.mul(centred, inv);
            x = self.reassemble(g, layer, passive, restored);
            log_scales.push(s);
        }
        (x, log_scales)
    }

    fn standardize_p(&self, p: &Mat) -> Mat {
        (p - self.params.get(self.p_mean)) / self.params.get(self.p_std)
    }

    fn cond_column(&self, radii: &[f64]) -> Mat {
        Mat::from_shape_fn((radii.len(), 1), |(i, _)| self.normalize_radius(radii[i]))
    }

    /// z (rows) → p_u (rows), conditioned on per-row radius.
    pub fn forward_batch(&self, z: &Mat, radii: &[f64]) -> Mat {
        let mut g = Graph::new(&self.params);
        let cond = g.constant(self.cond_column(radii));
        let mut x = g.constant(z.clone());
        for layer in &self.layers {
            let (pr, ar) = self.half_split(layer);
            let passive = g.slice_cols(x, pr.start, pr.end);
            let active = g.slice_cols(x, ar.start, ar.end);
            let (s, t) = self.scale_shift(&mut g, layer, passive, cond);
            let e = g.exp(s);
            let scaled = g.mul(active, e);
            let moved = g.add(scaled, t);
            x = self.reassemble(&mut g, layer, passive, moved);
        }
        g.value(x) * self.params.get(self.p_std) + self.params.get(self.p_mean)
    }

    pub fn inverse_batch(&self, p: &Mat, radii: &[f64]) -> Mat {
        let mut g = Graph::new(&self.params);
        let cond = g.constant(self.cond_column(radii));
        let x = g.constant(self.standardize_p(p));
        let (z, _) = self.inverse_graph(&mut g, x, cond);
        g.value(z).clone()
    }

    pub fn forward(&self, z: &[f64], features: &ConditionFeatures) -> ContextEmbedding {
        let z = Mat::from_shape_vec((1, z.len()), z.to_vec()).expect("row");
        let p = self.forward_batch(&z, &[features.radius_km]);
        ContextEmbedding::new(p.iter().copied().collect())
    }

    pub fn inverse(&self, p_u: &ContextEmbedding, features: &ConditionFeatures) -> Vec<f64> {
        let p = p_u.to_row();
        self.inverse_batch(&p, &[features.radius_km]).iter().copied().collect()
    }

    /// Draw p_u for a target radius.
    pub fn generate<R: Rng + ?Sized>(&self, features: &ConditionFeatures, rng: &mut R) -> ContextEmbedding {
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.forward(&z, features)
    }

    /// Mean negative log-likelihood (nats, up to the Gaussian constant) of
    /// standardized p_u rows.
    fn nll_graph(&self, g: &mut Graph, p: &Mat, radii: &[f64]) -> Var {
        let n = p.nrows() as f64;
        let cond = g.constant(self.cond_column(radii));
        let x = g.constant(self.standardize_p(p));
        let (z, log_scales) = self.inverse_graph(g, x, cond);
        let zz = g.mul(z, z);
        let mut total = g.sum_all(zz);
        total = g.scale(total, 0.5);
        for s in log_scales {
            let ls = g.sum_all(s);
            total = g.add(total, ls);
        }
        g.scale(total, 1.0 / n)
    }

    pub fn mean_nll(&self, p: &Mat, radii: &[f64]) -> f64 {
        let mut g = Graph::new(&self.params);
        let v = self.nll_graph(&mut g, p, radii);
        g.scalar(v)
    }

    /// Largest |log det| of any single layer over the given rows.
    pub fn max_abs_log_det(&self, p: &Mat, radii: &[f64]) -> f64 {
        let mut g = Graph::new(&self.params);
        let cond = g.constant(self.cond_column(radii));
        let x = g.constant(self.standardize_p(p));
        let (_, log_scales) = self.inverse_graph(&mut g, x, cond);
        log_scales
            .into_iter()
            .flat_map(|s| g.value(s).rows().into_iter().map(|r| r.sum().abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    }

    /// Fit standardization statistics, then maximize likelihood of the
    /// (radius, p_u) pairs with Adam. Returns the per-epoch mean NLL.
    pub fn fit(&mut self, radii: &[f64], contexts: &Mat) -> Result<Vec<f64>> {
        if radii.len() != contexts.nrows() || radii.is_empty() {
            return Err(Error::TrainingImpossible("flow needs matching, non-empty (radius, p_u) pairs".into()));
        }
        if contexts.ncols() != self.config.dim {
            return Err(Error::InvalidParameters(format!(
                "context dim {} does not match flow dim {}",
                contexts.ncols(),
                self.config.dim
            )));
        }
        let n = radii.len() as f64;
        let mean = contexts.mean_axis(ndarray::Axis(0)).unwrap().insert_axis(ndarray::Axis(0));
        let std = contexts
            .var_axis(ndarray::Axis(0), 0.0)
            .mapv(|v| v.sqrt().max(1e-6))
            .insert_axis(ndarray::Axis(0));
        *self.params.get_mut(self.p_mean) = mean;
        *self.params.get_mut(self.p_std) = std;
        let r_mean = radii.iter().sum::<f64>() / n;
        let r_std = (radii.iter().map(|r| (r - r_mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-6);
        *self.params.get_mut(self.r_stats) = ndarray::array![[r_mean, r_std]];

        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed);
        let mut adam = Adam::new(&self.params, self.config.lr).with_clip(5.0);
        let mut order: Vec<usize> = (0..radii.len()).collect();
        let mut history = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            let (mut sum, mut batches) = (0.0, 0);
            for (bi, chunk) in order.chunks(self.config.batch_size.max(1)).enumerate() {
                let p = ndarray::stack(ndarray::Axis(0), &chunk.iter().map(|&i| contexts.row(i)).collect::<Vec<_>>())
                    .expect("rows share width");
                let r: Vec<f64> = chunk.iter().map(|&i| radii[i]).collect();
                let grads = {
                    let mut g = Graph::new(&self.params);
                    let loss = self.nll_graph(&mut g, &p, &r);
                    let value = g.scalar(loss);
                    if !value.is_finite() {
                        return Err(Error::NonFiniteLoss { epoch, batch: bi, value });
                    }
                    sum += value;
                    batches += 1;
                    g.backward(loss)
                };
                adam.step(&mut self.params, &grads);
            }
            history.push(sum / batches as f64);
        }
        Ok(history)
    }

    pub(crate) fn from_parts(config: FlowConfig, flat: &[f64]) -> Result<Self> {
        let mut flow = Self::new(config);
        if flat.len() != flow.params.n_scalars() {
            return Err(Error::InvalidParameters(format!(
                "flow expects {} parameters, got {}",
                flow.params.n_scalars(),
                flat.len()
            )));
        }
        flow.params.set_flat(flat);
        Ok(flow)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::grid_vocabulary;

    fn traj(locs: Vec<usize>) -> Trajectory {
        Trajectory { user_id: 0, start_slot: 0, locations: locs }
    }

    #[test]
    fn radius_examples() {
        let vocab = grid_vocabulary(11, 1.0);
        assert_eq!(condition_features(&traj(vec![5; 10]), &vocab).radius_km, 0.0);
        // ids 0 and 10 sit 10 km apart on the first row
        let r = condition_features(&traj(vec![0, 10, 0, 10]), &vocab).radius_km;
        assert!((r - 5.0).abs() < 1e-12);
    }

    #[test]
    fn radius_matches_brute_force_and_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vocab = grid_vocabulary(8, 0.7);
        for _ in 0..50 {
            let locs: Vec<usize> = (0..20).map(|_| rng.random_range(0..64)).collect();
            let got = radius_of_gyration(&locs, &vocab);
            let pts: Vec<(f64, f64)> = locs.iter().map(|&l| (vocab[l].x, vocab[l].y)).collect();
            let cx = pts.iter().map(|p| p.0).sum::<f64>() / 20.0;
            let cy = pts.iter().map(|p| p.1).sum::<f64>() / 20.0;
            let mut acc = 0.0;
            for p in &pts {
                acc += (p.0 - cx) * (p.0 - cx) + (p.1 - cy) * (p.1 - cy);
            }
            assert!((got - (acc / 20.0).sqrt()).abs() < 1e-9);

            let shifted: Vec<Location> = vocab.iter().map(|l| Location { id: l.id, x: l.x + 0.5, y: l.y - 0.25 }).collect();
            let moved = radius_of_gyration(&locs, &shifted);
            assert!((moved - got).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_history_is_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamStore::new();
        let enc = HistoryEncoder::register(&mut params, 4, 6, 5, &mut rng);
        let c = enc.encode(&params, &[]);
        assert!(c.is_null());
        assert_eq!(c.values(), &[0.0; 5]);

        let h = Mat::from_shape_fn((7, 4), |(i, j)| (i as f64 - j as f64) * 0.1);
        let a = enc.encode(&params, &[h.clone()]);
        let b = enc.encode(&params, &[h.clone()]);
        assert_eq!(a, b);
        assert!(!a.is_null());
        assert!((a.cosine(&b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_flow_is_identity() {
        let flow = ConditionalFlow::new(FlowConfig { dim: 6, ..FlowConfig::default() });
        let z = vec![0.3, -1.0, 2.0, 0.0, 0.5, -0.2];
        let f = ConditionalFlow::new(FlowConfig { dim: 6, ..FlowConfig::default() });
        let p = f.forward(&z, &ConditionFeatures { radius_km: 3.0, mean_speed: None });
        for (a, b) in p.values().iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(flow.max_abs_log_det(&Mat::ones((2, 6)), &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn trained_flow_inverts_and_tracks_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 400;
        let radii: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..6.0)).collect();
        // p depends on radius in its first coordinate
        let contexts = Mat::from_shape_fn((n, 4), |(i, j)| {
            let noise: f64 = rng.sample(StandardNormal);
            if j == 0 { radii[i] * 2.0 + 0.2 * noise } else { noise }
        });
        let mut flow = ConditionalFlow::new(FlowConfig { dim: 4, hidden: 32, epochs: 60, batch_size: 50, ..FlowConfig::default() });
        let hist = flow.fit(&radii, &contexts).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);

        let feats = ConditionFeatures { radius_km: 2.0, mean_speed: None };
        for _ in 0..10 {
            let z: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            let p = flow.forward(&z, &feats);
            let back = flow.inverse(&p, &feats);
            for (a, b) in back.iter().zip(&z) {
                assert!((a - b).abs() < 1e-5);
            }
        }
        let mean_first = |r: f64, rng: &mut ChaCha8Rng| {
            (0..200).map(|_| flow.generate(&ConditionFeatures { radius_km: r, mean_speed: None }, rng).values()[0]).sum::<f64>() / 200.0
        };
        let lo = mean_first(1.0, &mut rng);
        let hi = mean_first(5.0, &mut rng);
        assert!(lo < hi, "lo {lo} hi {hi}");
        assert!(flow.max_abs_log_det(&contexts, &radii) < 50.0);
    }
}
