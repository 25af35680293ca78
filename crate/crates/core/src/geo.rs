//! Spatial graph, second-order LINE location embeddings, trajectory
//! embedding and nearest-neighbour decoding.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Location, Trajectory};
use crate::error::{Error, Result};
use crate::nn::Mat;

pub const EMBED_MAGIC: &[u8; 4] = b"GMEM";
pub const EMBED_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    /// Euclidean distance in km.
    pub weight: f64,
}

/// Symmetric k-nearest-neighbour graph over locations. Both directions of
/// every undirected edge are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGraph {
    pub n_nodes: usize,
    pub edges: Vec<Edge>,
}

impl SpatialGraph {
    pub fn n_undirected(&self) -> usize {
        self.edges.len() / 2
    }

    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for e in &self.edges {
            adj[e.src].push(e.dst);
        }
        adj
    }

    /// Hop distances from `source` (usize::MAX when unreachable).
    pub fn hops_from(&self, source: usize) -> Vec<usize> {
        let adj = self.neighbours();
        let mut dist = vec![usize::MAX; self.n_nodes];
        let mut queue = std::collections::VecDeque::from([source]);
        dist[source] = 0;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

pub fn build_spatial_graph(vocabulary: &[Location], k_nearest: usize) -> Result<SpatialGraph> {
    let n = vocabulary.len();
    if k_nearest >= n.max(1) {
        return Err(Error::InvalidParameters(format!(
            "k_nearest ({k_nearest}) must be smaller than the number of locations ({n})"
        )));
    }
    let mut pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (i, a) in vocabulary.iter().enumerate() {
        let mut others: Vec<(f64, usize)> = vocabulary
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, b)| (a.distance_km(b), j))
            .collect();
        others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for &(_, j) in others.iter().take(k_nearest) {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    let edges = pairs
        .into_iter()
        .flat_map(|(u, v)| {
            let w = vocabulary[u].distance_km(&vocabulary[v]);
            [Edge { src: u, dst: v, weight: w }, Edge { src: v, dst: u, weight: w }]
        })
        .collect();
    Ok(SpatialGraph { n_nodes: n, edges })
}

/// Location id → D-dimensional vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vectors: Mat,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn n_locations(&self) -> usize {
        self.vectors.nrows()
    }

    /// Centre the table and rescale it to unit root-mean-square entry.
    pub fn standardized(&self) -> EmbeddingTable {
        let mean = self.vectors.mean_axis(ndarray::Axis(0)).expect("non-empty table");
        let centred = &self.vectors - &mean;
        let rms = (centred.mapv(|x| x * x).mean().unwrap_or(0.0)).sqrt();
        let k = if rms > 0.0 { 1.0 / rms } else { 1.0 };
        EmbeddingTable { vectors: centred * k }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(EMBED_MAGIC)?;
        w.write_all(&EMBED_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_locations() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for x in self.vectors.iter() {
            w.write_all(&(*x as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |m: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message: m,
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != EMBED_MAGIC {
            return Err(bad("not an embedding checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != EMBED_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let v = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        let mut buf = vec![0u8; v * d * 4];
        r.read_exact(&mut buf).map_err(|e| bad(format!("truncated payload: {e}")))?;
        let values: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Self {
            vectors: Array2::from_shape_vec((v, d), values).expect("shape matches payload"),
        })
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineConfig {
    pub dim: usize,
    /// Passes over the directed edge set.
    pub epochs: usize,
    pub negatives: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for LineConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            epochs: 200,
            negatives: 5,
            lr: 0.025,
            seed: 0,
        }
    }
}

/// Walker alias table for O(1) categorical draws.
struct Alias {
    prob: Vec<f64>,
    alias: Vec<usize>,
}

impl Alias {
    fn new(weights: &[f64]) -> Self {
        let n = weights.len();
        let total: f64 = weights.iter().sum();
        let mut prob: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
        let mut alias = vec![0; n];
        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| prob[i] < 1.0);
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            alias[s] = l;
            prob[l] -= 1.0 - prob[s];
            if prob[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        for i in large.into_iter().chain(small) {
            prob[i] = 1.0;
        }
        Self { prob, alias }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        let i = rng.random_range(0..self.prob.len());
        if rng.random::<f64>() < self.prob[i] {
            i
        } else {
            self.alias[i]
        }
    }
}

/// Second-order LINE: vertex vectors are pulled towards the context vectors
/// of their graph neighbours and pushed from degree^0.75-sampled negatives.
///
/// Edges are sampled with strength 1/(1 + distance) so that nearer
/// neighbours bind more tightly. Returns the vertex vectors.
pub fn train_embeddings(graph: &SpatialGraph, cfg: &LineConfig) -> Result<EmbeddingTable> {
    if cfg.dim < 2 {
        return Err(Error::InvalidParameters("embedding dim must be at least 2".into()));
    }
    let n = graph.n_nodes;
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vertex = Array2::from_shape_simple_fn((n, d), || (rng.random::<f64>() - 0.5) / d as f64);
    if cfg.epochs == 0 {
        return Ok(EmbeddingTable { vectors: vertex });
    }
    if graph.edges.is_empty() {
        return Err(Error::TrainingImpossible("graph has no edges".into()));
    }
    let mut context = Array2::<f64>::zeros((n, d));

    let strengths: Vec<f64> = graph.edges.iter().map(|e| 1.0 / (1.0 + e.weight)).collect();
    let edge_alias = Alias::new(&strengths);
    let mut degree = vec![0.0; n];
    for e in &graph.edges {
        degree[e.src] += 1.0;
    }
    let noise: Vec<f64> = degree.iter().map(|x: &f64| x.powf(0.75)).collect();
    let noise_alias = Alias::new(&noise);

    let total = cfg.epochs * graph.edges.len();
    let mut grad = vec![0.0; d];
    for step in 0..total {
        let lr = cfg.lr * (1.0 - step as f64 / total as f64).max(1e-4);
        let e = &graph.edges[edge_alias.draw(&mut rng)];
        let u = e.src;
        grad.iter_mut().for_each(|g| *g = 0.0);
        for k in 0..=cfg.negatives {
            let (target, label) = if k == 0 {
                (e.dst, 1.0)
            } else {
                let mut t = noise_alias.draw(&mut rng);
                while t == u {
                    t = noise_alias.draw(&mut rng);
                }
                (t, 0.0)
            };
            let score: f64 = (0..d).map(|j| vertex[[u, j]] * context[[target, j]]).sum();
            let g = (label - crate::nn::tape::sigmoid(score)) * lr;
            for j in 0..d {
                grad[j] += g * context[[target, j]];
                context[[target, j]] += g * vertex[[u, j]];
            }
        }
        for j in 0..d {
            vertex[[u, j]] += grad[j];
        }
    }
    Ok(EmbeddingTable { vectors: vertex })
}

/// Row i of the result is the embedding of the trajectory's i-th location.
pub fn embed(traj: &Trajectory, table: &EmbeddingTable) -> Mat {
    embed_ids(&traj.locations, table)
}

pub fn embed_ids(ids: &[usize], table: &EmbeddingTable) -> Mat {
    let mut out = Mat::zeros((ids.len(), table.dim()));
    for (mut row, &id) in out.rows_mut().into_iter().zip(ids) {
        row.assign(&table.vectors.row(id));
    }
    out
}

/// The `k` ids nearest to `vector` in Euclidean distance, ascending, ties by id.
pub fn decode(vector: ndarray::ArrayView1<f64>, table: &EmbeddingTable, k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = table
        .vectors
        .rows()
        .into_iter()
        .enumerate()
        .map(|(id, row)| {
            let d2: f64 = row.iter().zip(vector.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2, id)
        })
        .collect();
    let k = k.min(scored.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    scored.into_iter().map(|(_, id)| id).collect()
}

/// Mean cosine similarity of vertex pairs bucketed by hop distance
/// (exact hop `near`, and hops ≥ `far`).
pub fn cosine_by_hops(graph: &SpatialGraph, table: &EmbeddingTable, near: usize, far: usize) -> (f64, f64) {
    let norms: Vec<f64> = table.vectors.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let (mut near_sum, mut near_n, mut far_sum, mut far_n) = (0.0, 0usize, 0.0, 0usize);
    for u in 0..graph.n_nodes {
        let hops = graph.hops_from(u);
        for v in (u + 1)..graph.n_nodes {
            let cos = table.vectors.row(u).dot(&table.vectors.row(v)) / (norms[u] * norms[v]).max(1e-12);
            if hops[v] == near {
                near_sum += cos;
                near_n += 1;
            } else if hops[v] >= far && hops[v] != usize::MAX {
                far_sum += cos;
                far_n += 1;
            }
        }
    }
    (near_sum / near_n.max(1) as f64, far_sum / far_n.max(1) as f64)
}
