//! Transformer noise predictor and the diffusion-step embedding.

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{ContextEmbedding, HistoryEncoder};
use crate::diffusion::{q_sample, NoiseDraw, NoiseModel, NoiseQuery, NoiseSchedule};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::nn::{Gradients, Graph, Mat, ParamId, ParamStore, Var};

pub const STEP_EMBED_DIM: usize = 128;

/// values[j] = sin(t·10^{4j/63}), values[64+j] = cos(t·10^{4j/63}).
pub fn step_embedding(t: usize) -> Vec<f64> {
    let half = STEP_EMBED_DIM / 2;
    let mut values = vec![0.0; STEP_EMBED_DIM];
    for j in 0..half {
        let arg = t as f64 * 10f64.powf(4.0 * j as f64 / 63.0);
        values[j] = arg.sin();
        values[half + j] = arg.cos();
    }
    values
}

/// Sinusoidal slot-position table, `len` × `dim`.
pub fn positional_encoding(len: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((len, dim), |(pos, i)| {
        let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
        let a = pos as f64 * freq;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Location embedding width D.
    pub loc_dim: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub conv_channels: usize,
    pub context_dim: usize,
    pub history_hidden: usize,
    /// Feed-forward width as a multiple of d_model.
    pub ff_mult: usize,
    /// Add slot positional encodings before the attention stack.
    pub positional: bool,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            loc_dim: 32,
            d_model: 64,
            layers: 2,
            heads: 4,
            conv_channels: 32,
            context_dim: 32,
            history_hidden: 32,
            ff_mult: 2,
            positional: true,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    /// Full-size architecture: 4 layers, 8 heads, 64 channels, 128-wide.
    pub fn faithful(loc_dim: usize, seed: u64) -> Self {
        Self {
            loc_dim,
            d_model: 128,
            layers: 4,
            heads: 8,
            conv_channels: 64,
            context_dim: 128,
            history_hidden: 128,
            ff_mult: 4,
            positional: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("loc_dim", self.loc_dim),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("conv_channels", self.conv_channels),
            ("context_dim", self.context_dim),
            ("history_hidden", self.history_hidden),
            ("ff_mult", self.ff_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidParameters(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidParameters(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
}

/// Parameter layout of the noise network (everything except the history encoder).
#[derive(Debug, Clone, PartialEq)]
struct Network {
    conv_w: ParamId,
    conv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    skip_w: ParamId,
    step1_w: ParamId,
    step1_b: ParamId,
    step2_w: ParamId,
    step2_b: ParamId,
    ctx_w: ParamId,
    ctx_b: ParamId,
    blocks: Vec<Block>,
    out_g: ParamId,
    out_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// Where an item's context vector comes from.
#[derive(Debug, Clone, Copy)]
pub enum ContextSource<'a> {
    Null,
    Embedding(&'a ContextEmbedding),
    /// Embedded history slots, encoded inside the graph.
    History(&'a Mat),
}

#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a> {
    pub e_t: &'a Mat,
    pub e_co: &'a Mat,
    pub mask: &'a Mask,
    pub t: usize,
    pub context: ContextSource<'a>,
}

/// One joint-training example; the context is encoded from `history`.
#[derive(Debug, Clone)]
pub struct DenoiseExample {
    pub e_co: Mat,
    pub e_ta0: Mat,
    pub mask: Mask,
    /// Concatenated embedded history, `None` when the user has none.
    pub history: Option<Mat>,
}

/// ε_θ together with the history encoder that produces p_u.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    net: Network,
    encoder: HistoryEncoder,
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let (d, c, dm) = (config.loc_dim, config.conv_channels, config.d_model);
        let ff = config.ff_mult * dm;
        let conv_w = p.normal("conv.w", 2 * d + 1, c, 2f64.sqrt(), &mut rng);
        let conv_b = p.zeros("conv.b", 1, c);
        let proj_w = p.normal("proj.w", c, dm, 1.0, &mut rng);
        let proj_b = p.zeros("proj.b", 1, dm);
        let skip_w = p.normal("skip.w", 2 * d + 1, dm, 1.0, &mut rng);
        let step1_w = p.normal("step.w1", STEP_EMBED_DIM, dm, 2f64.sqrt(), &mut rng);
        let step1_b = p.zeros("step.b1", 1, dm);
        let step2_w = p.normal("step.w2", dm, dm, 1.0, &mut rng);
        let step2_b = p.zeros("step.b2", 1, dm);
        let ctx_w = p.normal("ctx.w", config.context_dim, dm, 1.0, &mut rng);
        let ctx_b = p.zeros("ctx.b", 1, dm);
        let blocks = (0..config.layers)
            .map(|k| Block {
                ln1_g: p.ones(format!("block{k}.ln1.g"), 1, dm),
                ln1_b: p.zeros(format!("block{k}.ln1.b"), 1, dm),
                wq: p.normal(format!("block{k}.wq"), dm, dm, 1.0, &mut rng),
                wk: p.normal(format!("block{k}.wk"), dm, dm, 1.0, &mut rng),
                wv: p.normal(format!("block{k}.wv"), dm, dm, 1.0, &mut rng),
                wo: p.normal(format!("block{k}.wo"), dm, dm, 1.0, &mut rng),
                bo: p.zeros(format!("block{k}.bo"), 1, dm),
                ln2_g: p.ones(format!("block{k}.ln2.g"), 1, dm),
                ln2_b: p.zeros(format!("block{k}.ln2.b"), 1, dm),
                ff1_w: p.normal(format!("block{k}.ff1.w"), dm, ff, 2f64.sqrt(), &mut rng),
                ff1_b: p.zeros(format!("block{k}.ff1.b"), 1, ff),
                ff2_w: p.normal(format!("block{k}.ff2.w"), ff, dm, 1.0, &mut rng),
                ff2_b: p.zeros(format!("block{k}.ff2.b"), 1, dm),
            })
            .collect();
        let out_g = p.ones("out.ln.g", 1, dm);
        let out_b = p.zeros("out.ln.b", 1, dm);
        let head_w = p.normal("head.w", dm, d, 1.0, &mut rng);
        let head_b = p.zeros("head.b", 1, d);
        let net = Network {
            conv_w,
            conv_b,
            proj_w,
            proj_b,
            skip_w,
            step1_w,
            step1_b,
            step2_w,
            step2_b,
            ctx_w,
            ctx_b,
            blocks,
            out_g,
            out_b,
            head_w,
            head_b,
        };
        let encoder = HistoryEncoder::register(&mut p, d, config.history_hidden, config.context_dim, &mut rng);
        Ok(Self {
            config,
            params: p,
            net,
            encoder,
        })
    }

    /// Rebuild a model from a config and a flat parameter vector.
    pub fn from_parts(config: DenoiserConfig, flat: &[f64]) -> Result<Self> {
        let mut model = Self::new(config)?;
        if flat.len() != model.params.n_scalars() {
            return Err(Error::InvalidParameters(format!(
                "denoiser expects {} parameters, got {}",
                model.params.n_scalars(),
                flat.len()
            )));
        }
        model.params.set_flat(flat);
        if !model.params.all_finite() {
            return Err(Error::InvalidParameters("non-finite denoiser parameter".into()));
        }
        Ok(model)
    }

    pub fn n_parameters(&self) -> usize {
        self.params.n_scalars()
    }

    pub fn encoder(&self) -> &HistoryEncoder {
        &self.encoder
    }

    /// p_u for a user's embedded history trajectories; ∅ if there are none.
    pub fn encode_history(&self, histories: &[Mat]) -> ContextEmbedding {
        self.encoder.encode(&self.params, histories)
    }

    /// Stacked noise predictions for every input, (Σ L_i) × D.
    pub fn forward(&self, g: &mut Graph, inputs: &[DenoiserInput<'_>]) -> Var {
        assert!(!inputs.is_empty(), "forward needs at least one input");
        let cfg = &self.config;
        let d = cfg.loc_dim;
        let lens: Vec<usize> = inputs.iter().map(|x| x.e_t.nrows()).collect();
        let n_rows: usize = lens.iter().sum();

        let mut feats = Mat::zeros((n_rows, 2 * d + 1));
        let mut expand = Mat::zeros((n_rows, inputs.len()));
        let mut steps = Mat::zeros((inputs.len(), STEP_EMBED_DIM));
        let mut row = 0;
        for (i, x) in inputs.iter().enumerate() {
            let l = lens[i];
            assert_eq!(x.e_t.dim(), (l, d), "e_t shape mismatch");
            assert_eq!(x.e_co.dim(), (l, d), "e_co shape mismatch");
            assert_eq!(x.mask.len(), l, "mask length mismatch");
            let mut block = feats.slice_mut(ndarray::s![row..row + l, ..]);
            block.slice_mut(ndarray::s![.., ..d]).assign(x.e_t);
            block.slice_mut(ndarray::s![.., d..2 * d]).assign(x.e_co);
            for r in 0..l {
                block[[r, 2 * d]] = if x.mask.is_observed(r) { 1.0 } else { 0.0 };
            }
            expand.slice_mut(ndarray::s![row..row + l, i]).fill(1.0);
            steps.row_mut(i).assign(&ndarray::Array1::from(step_embedding(x.t)));
            row += l;
        }

        // pointwise convolution over slots, then up to model width; the
        // linear skip keeps the raw slot values past the channel bottleneck
        let x = g.constant(feats);
        let h = g.linear(x, self.net.conv_w, self.net.conv_b);
        let h = g.relu(h);
        let h = g.linear(h, self.net.proj_w, self.net.proj_b);
        let skip_w = g.param(self.net.skip_w);
        let skip = g.matmul(x, skip_w);
        let mut h = g.add(h, skip);

        let s = g.constant(steps);
        let s = g.linear(s, self.net.step1_w, self.net.step1_b);
        let s = g.relu(s);
        let s = g.linear(s, self.net.step2_w, self.net.step2_b);
        let ctx = self.context_rows(g, inputs);
        let ctx = g.linear(ctx, self.net.ctx_w, self.net.ctx_b);
        let cond = g.add(s, ctx);
        let e = g.constant(expand);
        let cond = g.matmul(e, cond);
        h = g.add(h, cond);

        if cfg.positional {
            let views: Vec<Mat> = lens.iter().map(|&l| positional_encoding(l, cfg.d_model)).collect();
            let views: Vec<_> = views.iter().map(|m| m.view()).collect();
            let pe = ndarray::concatenate(Axis(0), &views).expect("same width");
            let pe = g.constant(pe);
            h = g.add(h, pe);
        }

        for block in &self.net.blocks {
            h = self.block(g, block, h, &lens);
        }
        let h = g.layer_norm(h, self.net.out_g, self.net.out_b);
        g.linear(h, self.net.head_w, self.net.head_b)
    }

    /// n_items × context_dim: fixed embeddings plus encoded histories.
    fn context_rows(&self, g: &mut Graph, inputs: &[DenoiserInput<'_>]) -> Var {
        let dim = self.config.context_dim;
        let mut fixed = Mat::zeros((inputs.len(), dim));
        let mut histories: Vec<Mat> = Vec::new();
        let mut owners = Vec::new();
        for (i, x) in inputs.iter().enumerate() {
            match x.context {
                ContextSource::Null => {}
                ContextSource::Embedding(c) => {
                    assert_eq!(c.dim(), dim, "context dimension mismatch");
                    fixed.row_mut(i).assign(&ndarray::ArrayView1::from(c.values()));
                }
                ContextSource::History(h) if h.nrows() > 0 => {
                    histories.push(h.clone());
                    owners.push(i);
                }
                ContextSource::History(_) => {}
            }
        }
        let fixed = g.constant(fixed);
        if histories.is_empty() {
            return fixed;
        }
        let encoded = self.encoder.forward_batch(g, &histories);
        let mut scatter = Mat::zeros((inputs.len(), owners.len()));
        for (k, &i) in owners.iter().enumerate() {
            scatter[[i, k]] = 1.0;
        }
        let scatter = g.constant(scatter);
        let placed = g.matmul(scatter, encoded);
        g.add(fixed, placed)
    }

    fn block(&self, g: &mut Graph, b: &Block, x: Var, lens: &[usize]) -> Var {
        let heads = self.config.heads;
        let dh = self.config.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = g.layer_norm(x, b.ln1_g, b.ln1_b);
        let wq = g.param(b.wq);
        let wk = g.param(b.wk);
        let wv = g.param(b.wv);
        let q = g.matmul(n, wq);
        let k = g.matmul(n, wk);
        let v = g.matmul(n, wv);
        let mut items = Vec::with_capacity(lens.len());
        let mut start = 0;
        for &l in lens {
            let (qi, ki, vi) = (
                g.slice_rows(q, start, start + l),
                g.slice_rows(k, start, start + l),
                g.slice_rows(v, start, start + l),
            );
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (a, z) = (hd * dh, (hd + 1) * dh);
                let qh = g.slice_cols(qi, a, z);
                let kh = g.slice_cols(ki, a, z);
                let vh = g.slice_cols(vi, a, z);
                let scores = g.matmul_t(qh, kh);
                let scores = g.scale(scores, scale);
                let att = g.softmax_rows(scores);
                outs.push(g.matmul(att, vh));
            }
            items.push(if heads == 1 { outs[0] } else { g.concat_cols(&outs) });
            start += l;
        }
        let att = if items.len() == 1 { items[0] } else { g.concat_rows(&items) };
        let att = g.linear(att, b.wo, b.bo);
        let x = g.add(x, att);
        let n = g.layer_norm(x, b.ln2_g, b.ln2_b);
        let f = g.linear(n, b.ff1_w, b.ff1_b);
        let f = g.relu(f);
        let f = g.linear(f, b.ff2_w, b.ff2_b);
        g.add(x, f)
    }

    /// ε̂ for one trajectory.
    pub fn predict_noise(&self, e_t: &Mat, e_co: &Mat, mask: &Mask, t: usize, context: &ContextEmbedding) -> Mat {
        self.predict_inputs(&[DenoiserInput {
            e_t,
            e_co,
            mask,
            t,
            context: source_of(context),
        }])
        .pop()
        .expect("one output")
    }

    fn predict_inputs(&self, inputs: &[DenoiserInput<'_>]) -> Vec<Mat> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, inputs);
        let value = g.value(out);
        let mut start = 0;
        inputs
            .iter()
            .map(|x| {
                let l = x.e_t.nrows();
                let m = value.slice(ndarray::s![start..start + l, ..]).to_owned();
                start += l;
                m
            })
            .collect()
    }

    /// Masked denoising loss node for a batch; `None` when no item has targets.
    ///
    /// Each item contributes the mean squared error over its target entries
    /// and items are averaged. A dropped context becomes ∅.
    pub fn denoising_loss(&self, g: &mut Graph, examples: &[DenoiseExample], draws: &[NoiseDraw], schedule: &NoiseSchedule) -> Option<Var> {
        assert_eq!(examples.len(), draws.len(), "one draw per example");
        let counted = examples.iter().filter(|x| x.mask.n_targets() > 0).count();
        if counted == 0 {
            return None;
        }
        let noisy: Vec<Mat> = examples
            .iter()
            .zip(draws)
            .map(|(x, dr)| q_sample(&x.e_ta0, dr.t, &dr.epsilon, schedule))
            .collect();
        let inputs: Vec<DenoiserInput<'_>> = examples
            .iter()
            .zip(draws)
            .zip(&noisy)
            .map(|((x, dr), e_t)| DenoiserInput {
                e_t,
                e_co: &x.e_co,
                mask: &x.mask,
                t: dr.t,
                context: match (&x.history, dr.drop_context) {
                    (Some(h), false) => ContextSource::History(h),
                    _ => ContextSource::Null,
                },
            })
            .collect();
        let pred = self.forward(g, &inputs);
        let d = self.config.loc_dim as f64;
        let mut weights = Vec::with_capacity(g.shape(pred).0);
        for x in examples {
            let nt = x.mask.n_targets();
            for r in 0..x.mask.len() {
                weights.push(if x.mask.is_observed(r) {
                    0.0
                } else {
                    1.0 / (nt as f64 * d * counted as f64)
                });
            }
        }
        let views: Vec<_> = draws.iter().map(|dr| dr.epsilon.view()).collect();
        let target = ndarray::concatenate(Axis(0), &views).expect("noise widths agree");
        Some(g.weighted_sq_err(pred, target, weights))
    }

    /// Loss value and reverse-mode gradients of the scalar built by `loss`.
    pub fn parameter_gradients<F>(&self, loss: F) -> Result<(f64, Gradients)>
    where
        F: FnOnce(&Self, &mut Graph) -> Var,
    {
        let mut g = Graph::new(&self.params);
        let l = loss(self, &mut g);
        let value = g.scalar(l);
        if !value.is_finite() {
            return Err(Error::Gradient(format!("loss is not finite ({value})")));
        }
        let grads = g.backward(l);
        if !grads.all_finite() {
            return Err(Error::Gradient("non-finite gradient".into()));
        }
        Ok((value, grads))
    }
}

fn source_of(c: &ContextEmbedding) -> ContextSource<'_> {
    if c.is_null() {
        ContextSource::Null
    } else {
        ContextSource::Embedding(c)
    }
}

impl NoiseModel for DenoiserModel {
    fn predict(&self, e_t: &Mat, e_co: &Mat, mask: &Mask, t: usize, context: &ContextEmbedding) -> Mat {
        self.predict_noise(e_t, e_co, mask, t, context)
    }

    fn predict_batch(&self, queries: &[NoiseQuery<'_>]) -> Vec<Mat> {
        if queries.is_empty() {
            return Vec::new();
        }
        let inputs: Vec<DenoiserInput<'_>> = queries
            .iter()
            .map(|q| DenoiserInput {
                e_t: q.e_t,
                e_co: q.e_co,
                mask: q.mask,
                t: q.t,
                context: source_of(q.context),
            })
            .collect();
        self.predict_inputs(&inputs)
    }
}
