//! Reverse-mode automatic differentiation over 2-D f64 matrices.
//!
//! A [`Graph`] records every operation on a flat tape. Parameters are leaves
//! that point into a borrowed [`ParamStore`]; `backward` walks the tape in
//! reverse and returns one gradient matrix per parameter.

use ndarray::{s, Array1, Array2, Axis, Zip};

use super::params::{Gradients, ParamId, ParamStore};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// a + row, row broadcast over rows of a
    AddRow(Var, Var),
    /// a ⊙ row, row broadcast over rows of a
    MulRow(Var, Var),
    /// a ⊙ col, col (n×1) broadcast over columns of a
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    SoftmaxRows(Var),
    /// Row-wise normalization without affine terms; caches 1/std per row.
    Normalize(Var, Array1<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    SumAll(Var),
    /// Σ_i w_i Σ_j (a_ij − target_ij)²
    WeightedSqErr(Var, Mat, Vec<f64>),
    Lstm(Box<LstmCache>),
    LstmBatch(Box<LstmBatchCache>),
}

#[derive(Debug)]
struct LstmBatchCache {
    weight: Var,
    bias: Var,
    hidden: usize,
    /// Sequence indices sorted by decreasing length.
    order: Vec<usize>,
    /// Per sorted position, the step whose hidden state is returned.
    lengths: Vec<usize>,
    /// Per step: stacked [x_t, h_{t-1}] for the active prefix.
    stacked: Vec<Mat>,
    /// Per step: activated gates [i, f, o, g] for the active prefix.
    gates: Vec<Mat>,
    /// Per step: cell state c_t for the active prefix.
    cells: Vec<Mat>,
}

#[derive(Debug)]
struct LstmCache {
    input: Var,
    weight: Var,
    bias: Var,
    hidden: usize,
    /// Rows: [x_s, h_{s-1}] per step.
    stacked: Mat,
    /// Rows: activated gates [i, f, o, g] per step.
    gates: Mat,
    /// Cell states c_0..c_S (row 0 is the zero initial state).
    cells: Mat,
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id), true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1×n row");
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a 1×n row");
        let value = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "mul_col expects an n×1 column");
        let value = self.value(a) * self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    /// a·w + b for a row-vector bias b.
    pub fn linear(&mut self, a: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let h = self.matmul(a, w);
        self.add_row(h, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Layer normalization over columns with learned gain and bias rows.
    pub fn layer_norm(&mut self, a: Var, gain: ParamId, bias: ParamId) -> Var {
        let n = self.normalize(a);
        let g = self.param(gain);
        let b = self.param(bias);
        let scaled = self.mul_row(n, g);
        self.add_row(scaled, b)
    }

    pub fn normalize(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-5;
        let x = self.value(a);
        let mut value = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            let mean = row.mean().unwrap_or(0.0);
            row.mapv_inplace(|v| v - mean);
            let var = row.mapv(|v| v * v).mean().unwrap_or(0.0);
            let k = 1.0 / (var + EPS).sqrt();
            row *= k;
            inv_std[i] = k;
        }
        let ng = self.ng(a);
        self.push(value, Op::Normalize(a, inv_std), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start, end), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, start, end), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    /// Σ_i row_weights[i] · Σ_j (a_ij − target_ij)², as a 1×1 node.
    pub fn weighted_sq_err(&mut self, a: Var, target: Mat, row_weights: Vec<f64>) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), target.dim(), "weighted_sq_err shape mismatch");
        assert_eq!(row_weights.len(), x.nrows());
        let total: f64 = x
            .rows()
            .into_iter()
            .zip(target.rows())
            .zip(&row_weights)
            .filter(|(_, &w)| w != 0.0)
            .map(|((r, t), &w)| w * r.iter().zip(t.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
            .sum();
        let ng = self.ng(a);
        self.push(Array2::from_elem((1, 1), total), Op::WeightedSqErr(a, target, row_weights), ng)
    }

    /// Single-layer LSTM over the rows of `input`, from a zero state.
    ///
    /// `weight` is (in + hidden) × 4·hidden with gate blocks ordered
    /// input, forget, output, candidate. Returns the final hidden state (1×hidden).
    pub fn lstm(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (steps, n_in) = x.dim();
        let hidden = w.ncols() / 4;
        assert_eq!(w.nrows(), n_in + hidden, "lstm weight rows must be in + hidden");
        assert_eq!(b.dim(), (1, 4 * hidden));

        let mut stacked = Mat::zeros((steps, n_in + hidden));
        let mut gates = Mat::zeros((steps, 4 * hidden));
        let mut cells = Mat::zeros((steps + 1, hidden));
        let mut h = Array1::<f64>::zeros(hidden);
        let b_row = b.row(0);
        for step in 0..steps {
            stacked.slice_mut(s![step, ..n_in]).assign(&x.row(step));
            stacked.slice_mut(s![step, n_in..]).assign(&h);
            let mut z = stacked.row(step).dot(w);
            z += &b_row;
            for j in 0..hidden {
                let i_g = sigmoid(z[j]);
                let f_g = sigmoid(z[hidden + j]);
                let o_g = sigmoid(z[2 * hidden + j]);
                let g_g = z[3 * hidden + j].tanh();
                let c = f_g * cells[[step, j]] + i_g * g_g;
                cells[[step + 1, j]] = c;
                h[j] = o_g * c.tanh();
                gates[[step, j]] = i_g;
                gates[[step, hidden + j]] = f_g;
                gates[[step, 2 * hidden + j]] = o_g;
                gates[[step, 3 * hidden + j]] = g_g;
            }
        }
        let value = h.insert_axis(Axis(0));
        let ng = self.ng(input) || self.ng(weight) || self.ng(bias);
        let cache = LstmCache {
            input,
            weight,
            bias,
            hidden,
            stacked,
            gates,
            cells,
        };
        self.push(value, Op::Lstm(Box::new(cache)), ng)
    }

    /// The LSTM of [`Graph::lstm`] run over several constant sequences at
    /// once. Returns one final hidden state per sequence (B×hidden, in input
    /// order); an empty sequence yields zeros.
    pub fn lstm_batch(&mut self, inputs: &[Mat], weight: Var, bias: Var) -> Var {
        let w = self.value(weight);
        let b = self.value(bias);
        let hidden = w.ncols() / 4;
        let n_in = w.nrows() - hidden;
        assert_eq!(b.dim(), (1, 4 * hidden));
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.sort_by(|&a, &c| inputs[c].nrows().cmp(&inputs[a].nrows()).then(a.cmp(&c)));
        let lengths: Vec<usize> = order.iter().map(|&i| inputs[i].nrows()).collect();
        for x in inputs.iter().filter(|x| x.nrows() > 0) {
            assert_eq!(x.ncols(), n_in, "lstm_batch input width mismatch");
        }
        let steps = lengths.first().copied().unwrap_or(0);
        let mut h = Mat::zeros((inputs.len(), hidden));
        let mut c = Mat::zeros((inputs.len(), hidden));
        let mut stacked = Vec::with_capacity(steps);
        let mut gates = Vec::with_capacity(steps);
        let mut cells = Vec::with_capacity(steps);
        for t in 0..steps {
            let active = lengths.iter().take_while(|&&l| l > t).count();
            let mut z_in = Mat::zeros((active, n_in + hidden));
            for (r, &i) in order[..active].iter().enumerate() {
                z_in.slice_mut(s![r, ..n_in]).assign(&inputs[i].row(t));
            }
            z_in.slice_mut(s![.., n_in..]).assign(&h.slice(s![..active, ..]));
            let mut z = z_in.dot(w);
            z += b;
            for r in 0..active {
                for j in 0..hidden {
                    let i_g = sigmoid(z[[r, j]]);
                    let f_g = sigmoid(z[[r, hidden + j]]);
                    let o_g = sigmoid(z[[r, 2 * hidden + j]]);
                    let g_g = z[[r, 3 * hidden + j]].tanh();
                    let cell = f_g * c[[r, j]] + i_g * g_g;
                    c[[r, j]] = cell;
                    h[[r, j]] = o_g * cell.tanh();
                    z[[r, j]] = i_g;
                    z[[r, hidden + j]] = f_g;
                    z[[r, 2 * hidden + j]] = o_g;
                    z[[r, 3 * hidden + j]] = g_g;
                }
            }
            stacked.push(z_in);
            gates.push(z);
            cells.push(c.slice(s![..active, ..]).to_owned());
        }
        let mut value = Mat::zeros((inputs.len(), hidden));
        for (r, &i) in order.iter().enumerate() {
            value.row_mut(i).assign(&h.row(r));
        }
        let ng = self.ng(weight) || self.ng(bias);
        let cache = LstmBatchCache {
            weight,
            bias,
            hidden,
            order,
            lengths,
            stacked,
            gates,
            cells,
        };
        self.push(value, Op::LstmBatch(Box::new(cache)), ng)
    }

    /// Gradients of the scalar node `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        acc(&mut grads, *b, -&g);
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, row) => {
                    if self.ng(*row) {
                        let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *row, gr);
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, &g * self.value(*row));
                    }
                }
                Op::MulCol(a, col) => {
                    if self.ng(*col) {
                        let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        acc(&mut grads, *col, gc);
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, &g * self.value(*col));
                    }
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(&mut grads, *a, d);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = drow.sum();
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &yv| *d -= yv * dot);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Normalize(a, inv_std) => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut d = Mat::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let gy = g.row(i);
                        let yy = y.row(i);
                        let mean_g = gy.sum() / n;
                        let mean_gy = gy.dot(&yy) / n;
                        let k = inv_std[i];
                        Zip::from(d.row_mut(i))
                            .and(&gy)
                            .and(&yy)
                            .for_each(|d, &gv, &yv| *d = k * (gv - mean_g - yv * mean_gy));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        if self.ng(*p) {
                            acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        if self.ng(*p) {
                            acc(&mut grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                        }
                        start += h;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    d.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::SliceRows(a, start, end) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    d.slice_mut(s![*start..*end, ..]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let k = g[[0, 0]];
                    acc(&mut grads, *a, Array2::from_elem(self.shape(*a), k));
                }
                Op::WeightedSqErr(a, target, w) => {
                    let k = g[[0, 0]];
                    let mut d = self.value(*a) - target;
                    for (mut row, &wi) in d.rows_mut().into_iter().zip(w) {
                        row *= 2.0 * wi * k;
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Lstm(cache) => self.lstm_backward(cache, &g, &mut grads),
                Op::LstmBatch(cache) => self.lstm_batch_backward(cache, &g, &mut grads),
            }
        }
        out
    }

    fn lstm_backward(&self, c: &LstmCache, g: &Mat, grads: &mut [Option<Mat>]) {
        let hd = c.hidden;
        let w = self.value(c.weight);
        let steps = c.gates.nrows();
        let n_in = c.stacked.ncols() - hd;
        let mut dz_all = Mat::zeros((steps, 4 * hd));
        let mut dh = g.row(0).to_owned();
        let mut dc = Array1::<f64>::zeros(hd);
        let mut dx = Mat::zeros((steps, n_in));
        for step in (0..steps).rev() {
            let gate = c.gates.row(step);
            for j in 0..hd {
                let (i_g, f_g, o_g, g_g) = (gate[j], gate[hd + j], gate[2 * hd + j], gate[3 * hd + j]);
                let c_prev = c.cells[[step, j]];
                let tc = c.cells[[step + 1, j]].tanh();
                let d_o = dh[j] * tc;
                let dcj = dc[j] + dh[j] * o_g * (1.0 - tc * tc);
                dz_all[[step, j]] = dcj * g_g * i_g * (1.0 - i_g);
                dz_all[[step, hd + j]] = dcj * c_prev * f_g * (1.0 - f_g);
                dz_all[[step, 2 * hd + j]] = d_o * o_g * (1.0 - o_g);
                dz_all[[step, 3 * hd + j]] = dcj * i_g * (1.0 - g_g * g_g);
                dc[j] = dcj * f_g;
            }
            let d_stacked = w.dot(&dz_all.row(step));
            dh.assign(&d_stacked.slice(s![n_in..]));
            dx.row_mut(step).assign(&d_stacked.slice(s![..n_in]));
        }
        if self.ng(c.weight) {
            acc(grads, c.weight, c.stacked.t().dot(&dz_all));
        }
        if self.ng(c.bias) {
            acc(grads, c.bias, dz_all.sum_axis(Axis(0)).insert_axis(Axis(0)));
        }
        if self.ng(c.input) {
            acc(grads, c.input, dx);
        }
    }
}

impl Graph<'_> {
    fn lstm_batch_backward(&self, c: &LstmBatchCache, g: &Mat, grads: &mut [Option<Mat>]) {
        let hd = c.hidden;
        let w = self.value(c.weight);
        let n = c.order.len();
        let n_in = w.nrows() - hd;
        let mut dw = Mat::zeros(w.dim());
        let mut db = Mat::zeros((1, 4 * hd));
        let mut dh = Mat::zeros((n, hd));
        let mut dc = Mat::zeros((n, hd));
        for t in (0..c.gates.len()).rev() {
            let gate = &c.gates[t];
            let active = gate.nrows();
            // sequences whose last step is t receive the output gradient here
            for r in 0..active {
                if c.lengths[r] == t + 1 {
                    dh.row_mut(r).scaled_add(1.0, &g.row(c.order[r]));
                }
            }
            let mut dz = Mat::zeros((active, 4 * hd));
            for r in 0..active {
                for j in 0..hd {
                    let (i_g, f_g, o_g, g_g) = (gate[[r, j]], gate[[r, hd + j]], gate[[r, 2 * hd + j]], gate[[r, 3 * hd + j]]);
                    let c_prev = if t == 0 { 0.0 } else { c.cells[t - 1][[r, j]] };
                    let tc = c.cells[t][[r, j]].tanh();
                    let d_o = dh[[r, j]] * tc;
                    let dcj = dc[[r, j]] + dh[[r, j]] * o_g * (1.0 - tc * tc);
                    dz[[r, j]] = dcj * g_g * i_g * (1.0 - i_g);
                    dz[[r, hd + j]] = dcj * c_prev * f_g * (1.0 - f_g);
                    dz[[r, 2 * hd + j]] = d_o * o_g * (1.0 - o_g);
                    dz[[r, 3 * hd + j]] = dcj * i_g * (1.0 - g_g * g_g);
                    dc[[r, j]] = dcj * f_g;
                }
            }
            dw += &c.stacked[t].t().dot(&dz);
            db += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));
            let d_stacked = dz.dot(&w.t());
            dh.slice_mut(s![..active, ..]).assign(&d_stacked.slice(s![.., n_in..]));
        }
        if self.ng(c.weight) {
            acc(grads, c.weight, dw);
        }
        if self.ng(c.bias) {
            acc(grads, c.bias, db);
        }
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
