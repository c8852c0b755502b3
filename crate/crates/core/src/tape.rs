//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every value is a dense `f64` matrix (scalars are 1x1, vectors 1xN).
//! Operations execute eagerly and record themselves; [`Tape::backward`]
//! walks the tape in reverse creation order, which is always a valid
//! topological order. One tape per forward pass; parameters are copied
//! in as leaves and their gradients read back out after `backward`.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

pub type NodeId = usize;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// matrix + broadcast row
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// matrix * broadcast row
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// x^p elementwise; x must stay positive for fractional p
    PowConst(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    MeanRows(NodeId),
    MaxRows(NodeId, Vec<usize>),
    SumAll(NodeId),
    /// row-wise softmax over the first `valid` columns; the rest emit 0
    SoftmaxRowsMasked(NodeId, usize),
    LogSoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: usize,
        stride: usize,
        pad_left: usize,
        cols: Array2<f64>,
    },
    CtcLoss {
        logp: NodeId,
        target: Vec<usize>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Association between a named parameter and its leaf on the tape.
pub struct Binding {
    pub name: String,
    pub id: NodeId,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<Binding>,
}

/// CTC blank index, fixed to match the phoneme vocabulary.
pub const CTC_BLANK: usize = 0;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn bindings(&self) -> &[Binding] {
        &self.bindings
    }

    /// Insert a constant or input leaf.
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Insert a trainable leaf and remember its name for the optimizer.
    pub fn param(&mut self, name: &str, value: Array2<f64>) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.bindings.push(Binding {
            name: name.to_string(),
            id,
        });
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[row].value.nrows(), 1);
        let v = &self.nodes[x].value + &self.nodes[row].value;
        self.push(v, Op::AddRow(x, row))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[row].value.nrows(), 1);
        let v = &self.nodes[x].value * &self.nodes[row].value;
        self.push(v, Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[x].value * c;
        self.push(v, Op::Scale(x, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.t().to_owned();
        self.push(v, Op::Transpose(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|e| e.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|e| 1.0 / (1.0 + (-e).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn pow_const(&mut self, x: NodeId, p: f64) -> NodeId {
        let v = self.nodes[x].value.mapv(|e| e.powf(p));
        self.push(v, Op::PowConst(x, p))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.nodes[parts[0]].value.nrows();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.ncols()).sum();
        let mut v = Array2::zeros((rows, total));
        let mut off = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            v.slice_mut(ndarray::s![.., off..off + pv.ncols()])
                .assign(pv);
            off += pv.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[x]
            .value
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        self.push(v, Op::SliceRows(x, start, len))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[x]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols(x, start, len))
    }

    /// Column means over all rows: T x d -> 1 x d.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let v = xv
            .mean_axis(Axis(0))
            .expect("mean over empty matrix")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(x))
    }

    /// Column maxima over all rows: T x d -> 1 x d. Ties keep the lowest row.
    pub fn max_rows(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (rows, cols) = (xv.nrows(), xv.ncols());
        let mut argmax = vec![0usize; cols];
        let mut v = Array2::zeros((1, cols));
        for j in 0..cols {
            let mut best = xv[[0, j]];
            for i in 1..rows {
                if xv[[i, j]] > best {
                    best = xv[[i, j]];
                    argmax[j] = i;
                }
            }
            v[[0, j]] = best;
        }
        self.push(v, Op::MaxRows(x, argmax))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(x))
    }

    /// Row softmax over columns `0..valid`; masked columns output 0.
    pub fn softmax_rows_masked(&mut self, x: NodeId, valid: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        assert!(valid >= 1 && valid <= xv.ncols(), "mask out of range");
        let mut v = Array2::zeros(xv.dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let m = row
                .iter()
                .take(valid)
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..valid {
                let e = (row[j] - m).exp();
                v[[i, j]] = e;
                z += e;
            }
            for j in 0..valid {
                v[[i, j]] /= z;
            }
        }
        self.push(v, Op::SoftmaxRowsMasked(x, valid))
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let mut v = xv.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&e| (e - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|e| e - lse);
        }
        self.push(v, Op::LogSoftmaxRows(x))
    }

    /// Row-wise layer normalization with affine parameters (1 x d each).
    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = &self.nodes[x].value;
        let gv = &self.nodes[gamma].value;
        let bv = &self.nodes[beta].value;
        let d = xv.ncols() as f64;
        let mut v = Array2::zeros(xv.dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mu = row.sum() / d;
            let var = row.iter().map(|&e| (e - mu) * (e - mu)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..xv.ncols() {
                v[[i, j]] = (row[j] - mu) * inv * gv[[0, j]] + bv[[0, j]];
            }
        }
        self.push(v, Op::LayerNormRows { x, gamma, beta, eps })
    }

    /// 1-D convolution over time. `x` is T x C_in, `w` is (kernel*C_in) x C_out
    /// laid out tap-major, `b` is 1 x C_out. Output is T_out x C_out with
    /// T_out = (T + pad_left + pad_right - kernel) / stride + 1.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: usize,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> NodeId {
        let xv = &self.nodes[x].value;
        let (t_in, c_in) = xv.dim();
        let padded = t_in + pad_left + pad_right;
        assert!(padded >= kernel, "conv input shorter than kernel");
        let t_out = (padded - kernel) / stride + 1;
        let mut cols = Array2::zeros((t_out, kernel * c_in));
        for o in 0..t_out {
            for k in 0..kernel {
                let t = o * stride + k;
                if t >= pad_left && t - pad_left < t_in {
                    let src = xv.row(t - pad_left);
                    cols.slice_mut(ndarray::s![o, k * c_in..(k + 1) * c_in])
                        .assign(&src);
                }
            }
        }
        let v = cols.dot(&self.nodes[w].value) + &self.nodes[b].value;
        self.push(
            v,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                pad_left,
                cols,
            },
        )
    }

    /// CTC loss over log-probabilities (T x C, rows already log-softmaxed).
    /// `target` must not contain the blank index. Infeasible targets error.
    pub fn ctc_loss(&mut self, logp: NodeId, target: &[usize]) -> Result<NodeId> {
        let lp = &self.nodes[logp].value;
        let t_len = lp.nrows();
        let n_classes = lp.ncols();
        for &k in target {
            if k == CTC_BLANK || k >= n_classes {
                return Err(Error::LabelRange {
                    label: k,
                    classes: n_classes,
                });
            }
        }
        let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
        let needed = target.len() + repeats;
        if t_len < needed {
            return Err(Error::InfeasibleAlignment {
                frames: t_len,
                needed,
            });
        }
        let ext = extended_labels(target);
        let alpha = ctc_alpha(lp, &ext);
        let s = ext.len();
        let mut ll = alpha[(t_len - 1) * s + (s - 1)];
        if s > 1 {
            ll = log_add(ll, alpha[(t_len - 1) * s + (s - 2)]);
        }
        let loss = Array2::from_elem((1, 1), -ll);
        Ok(self.push(
            loss,
            Op::CtcLoss {
                logp,
                target: target.to_vec(),
            },
        ))
    }

    /// Reverse pass. `loss` must be 1x1. Returns nothing; read gradients
    /// with [`Tape::grad`] afterwards.
    pub fn backward(&mut self, loss: NodeId) -> Gradients {
        assert_eq!(self.nodes[loss].value.dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..self.nodes.len()).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::AddRow(x, row) => {
                    let (x, row) = (*x, *row);
                    let row_g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, x, g);
                    accumulate(&mut grads, row, row_g);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = &g * &self.nodes[b].value;
                    let gb = &g * &self.nodes[a].value;
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::MulRow(x, row) => {
                    let (x, row) = (*x, *row);
                    let gx = &g * &self.nodes[row].value;
                    let gr = (&g * &self.nodes[x].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    accumulate(&mut grads, x, gx);
                    accumulate(&mut grads, row, gr);
                }
                Op::Scale(x, c) => {
                    let (x, c) = (*x, *c);
                    accumulate(&mut grads, x, &g * c);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.dot(&self.nodes[b].value.t());
                    let gb = self.nodes[a].value.t().dot(&g);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Transpose(x) => {
                    let x = *x;
                    accumulate(&mut grads, x, g.t().to_owned());
                }
                Op::Relu(x) => {
                    let x = *x;
                    let gx = &g * &self.nodes[x].value.mapv(|e| if e > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, x, gx);
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    let y = &self.nodes[id].value;
                    let gx = &g * &(y * &y.mapv(|e| 1.0 - e));
                    accumulate(&mut grads, x, gx);
                }
                Op::PowConst(x, p) => {
                    let (x, p) = (*x, *p);
                    let gx = &g * &self.nodes[x].value.mapv(|e| p * e.powf(p - 1.0));
                    accumulate(&mut grads, x, gx);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let w = self.nodes[p].value.ncols();
                        let gp = g.slice(ndarray::s![.., off..off + w]).to_owned();
                        accumulate(&mut grads, p, gp);
                        off += w;
                    }
                }
                Op::SliceRows(x, start, len) => {
                    let (x, start, len) = (*x, *start, *len);
                    let mut gx = Array2::zeros(self.nodes[x].value.dim());
                    gx.slice_mut(ndarray::s![start..start + len, ..]).assign(&g);
                    accumulate(&mut grads, x, gx);
                }
                Op::SliceCols(x, start, len) => {
                    let (x, start, len) = (*x, *start, *len);
                    let mut gx = Array2::zeros(self.nodes[x].value.dim());
                    gx.slice_mut(ndarray::s![.., start..start + len]).assign(&g);
                    accumulate(&mut grads, x, gx);
                }
                Op::MeanRows(x) => {
                    let x = *x;
                    let rows = self.nodes[x].value.nrows() as f64;
                    let gx = g.broadcast(self.nodes[x].value.dim()).unwrap().to_owned() / rows;
                    accumulate(&mut grads, x, gx);
                }
                Op::MaxRows(x, argmax) => {
                    let x = *x;
                    let argmax = argmax.clone();
                    let mut gx = Array2::zeros(self.nodes[x].value.dim());
                    for (j, &i) in argmax.iter().enumerate() {
                        gx[[i, j]] += g[[0, j]];
                    }
                    accumulate(&mut grads, x, gx);
                }
                Op::SumAll(x) => {
                    let x = *x;
                    let gx = Array2::from_elem(self.nodes[x].value.dim(), g[[0, 0]]);
                    accumulate(&mut grads, x, gx);
                }
                Op::SoftmaxRowsMasked(x, valid) => {
                    let (x, valid) = (*x, *valid);
                    let y = &self.nodes[id].value;
                    let mut gx = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = (0..valid).map(|j| g[[i, j]] * y[[i, j]]).sum();
                        for j in 0..valid {
                            gx[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    accumulate(&mut grads, x, gx);
                }
                Op::LogSoftmaxRows(x) => {
                    let x = *x;
                    let y = &self.nodes[id].value;
                    let mut gx = g.clone();
                    for i in 0..y.nrows() {
                        let gsum: f64 = g.row(i).sum();
                        for j in 0..y.ncols() {
                            gx[[i, j]] -= y[[i, j]].exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, x, gx);
                }
                Op::LayerNormRows { x, gamma, beta, eps } => {
                    let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                    let xv = &self.nodes[x].value;
                    let gv = &self.nodes[gamma].value;
                    let d = xv.ncols();
                    let df = d as f64;
                    let mut gx = Array2::zeros(xv.dim());
                    let mut ggamma = Array2::zeros((1, d));
                    let mut gbeta = Array2::zeros((1, d));
                    for i in 0..xv.nrows() {
                        let row = xv.row(i);
                        let mu = row.sum() / df;
                        let var = row.iter().map(|&e| (e - mu) * (e - mu)).sum::<f64>() / df;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&e| (e - mu) * inv).collect();
                        let gh: Vec<f64> =
                            (0..d).map(|j| g[[i, j]] * gv[[0, j]]).collect();
                        let gh_mean = gh.iter().sum::<f64>() / df;
                        let ghx_mean =
                            gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / df;
                        for j in 0..d {
                            gx[[i, j]] = inv * (gh[j] - gh_mean - xhat[j] * ghx_mean);
                            ggamma[[0, j]] += g[[i, j]] * xhat[j];
                            gbeta[[0, j]] += g[[i, j]];
                        }
                    }
                    accumulate(&mut grads, x, gx);
                    accumulate(&mut grads, gamma, ggamma);
                    accumulate(&mut grads, beta, gbeta);
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    kernel,
                    stride,
                    pad_left,
                    cols,
                } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (kernel, stride, pad_left) = (*kernel, *stride, *pad_left);
                    let gw = cols.t().dot(&g);
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gcols = g.dot(&self.nodes[w].value.t());
                    let (t_in, c_in) = self.nodes[x].value.dim();
                    let mut gx = Array2::zeros((t_in, c_in));
                    for o in 0..gcols.nrows() {
                        for k in 0..kernel {
                            let t = o * stride + k;
                            if t >= pad_left && t - pad_left < t_in {
                                for c in 0..c_in {
                                    gx[[t - pad_left, c]] += gcols[[o, k * c_in + c]];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, x, gx);
                    accumulate(&mut grads, w, gw);
                    accumulate(&mut grads, b, gb);
                }
                Op::CtcLoss { logp, target } => {
                    let (logp, target) = (*logp, target.clone());
                    let lp = &self.nodes[logp].value;
                    let gx = ctc_logp_grad(lp, &target) * g[[0, 0]];
                    accumulate(&mut grads, logp, gx);
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradient results of one backward pass, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf; zero matrix if the leaf never influenced the loss.
    pub fn of(&self, id: NodeId, shape: (usize, usize)) -> Array2<f64> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Target labels interleaved with blanks: a b -> _ a _ b _.
fn extended_labels(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(CTC_BLANK);
    for &t in target {
        ext.push(t);
        ext.push(CTC_BLANK);
    }
    ext
}

/// Forward lattice in log space; alpha[t*S + s] includes the emission at t.
fn ctc_alpha(logp: &Array2<f64>, ext: &[usize]) -> Vec<f64> {
    let t_len = logp.nrows();
    let s_len = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; t_len * s_len];
    alpha[0] = logp[[0, ext[0]]];
    if s_len > 1 {
        alpha[1] = logp[[0, ext[1]]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = log_add(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && ext[s] != CTC_BLANK && ext[s] != ext[s - 2] {
                acc = log_add(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = acc + logp[[t, ext[s]]];
        }
    }
    alpha
}

/// Backward lattice; beta[t*S + s] includes the emission at t.
fn ctc_beta(logp: &Array2<f64>, ext: &[usize]) -> Vec<f64> {
    let t_len = logp.nrows();
    let s_len = ext.len();
    let mut beta = vec![f64::NEG_INFINITY; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = logp[[t_len - 1, ext[s_len - 1]]];
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = logp[[t_len - 1, ext[s_len - 2]]];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                acc = log_add(acc, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && ext[s + 2] != CTC_BLANK && ext[s + 2] != ext[s] {
                acc = log_add(acc, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = acc + logp[[t, ext[s]]];
        }
    }
    beta
}

/// d(-log P)/d(logp): minus the per-frame symbol posterior.
fn ctc_logp_grad(logp: &Array2<f64>, target: &[usize]) -> Array2<f64> {
    let ext = extended_labels(target);
    let t_len = logp.nrows();
    let s_len = ext.len();
    let alpha = ctc_alpha(logp, &ext);
    let beta = ctc_beta(logp, &ext);
    let mut ll = alpha[(t_len - 1) * s_len + s_len - 1];
    if s_len > 1 {
        ll = log_add(ll, alpha[(t_len - 1) * s_len + s_len - 2]);
    }
    let mut grad = Array2::zeros(logp.dim());
    for t in 0..t_len {
        for (s, &lab) in ext.iter().enumerate() {
            // alpha and beta both include the emission at t: divide once.
            let post = alpha[t * s_len + s] + beta[t * s_len + s] - logp[[t, lab]] - ll;
            if post > f64::NEG_INFINITY {
                grad[[t, lab]] -= post.exp();
            }
        }
    }
    grad
}
