//! A small reverse-mode autodiff tape over [`Tensor`]s.
//!
//! A [`Graph`] borrows a [`ParamStore`]; parameters enter the graph without
//! being copied. Nodes are appended in evaluation order, so a single reverse
//! sweep in [`Graph::backward`] visits every node after all of its consumers.
//! Shape mismatches inside the graph are programming errors and panic; public
//! model entry points validate their inputs before building nodes.

use crate::heads::crf::{CrfGrads, CrfScores};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Spatial geometry of a square-kernel convolution over a `height x width` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// `(output position, patch column, input position)` for every in-bounds tap.
    fn taps(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let (oh, ow) = (self.out_height(), self.out_width());
        (0..oh).flat_map(move |oy| {
            (0..ow).flat_map(move |ox| {
                (0..self.kernel).flat_map(move |ky| {
                    (0..self.kernel).filter_map(move |kx| {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if iy < 0 || ix < 0 || iy as usize >= self.height || ix as usize >= self.width {
                            return None;
                        }
                        Some((
                            oy * ow + ox,
                            (ky * self.kernel + kx) * self.channels,
                            iy as usize * self.width + ix as usize,
                        ))
                    })
                })
            })
        })
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    SumAll(Var),
    AddN(Vec<Var>),
    Gather(Var, Vec<usize>),
    Im2Col(Var, ConvGeom),
    PairwiseAdd(Var, Var),
    Reshape(Var),
    Crf { inputs: [Var; 4], grads: Box<CrfGrads> },
    SoftmaxCe { logits: Var, probs: Vec<f64>, class: usize },
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "not a scalar");
        t.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// The graph node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// An input leaf. Its gradient is still available from [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.rows(), "matmul {:?} x {:?}", ta.shape(), tb.shape());
        let out = ta.matmul(tb);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    fn broadcast_row(&self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.shape(), (1, ta.cols()), "row broadcast {:?} with {:?}", ta.shape(), tr.shape());
        let r = tr.data();
        let mut out = ta.clone();
        for i in 0..out.rows() {
            for (x, &y) in out.row_mut(i).iter_mut().zip(r) {
                *x = f(*x, y);
            }
        }
        out
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.broadcast_row(a, row, |x, y| x + y);
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.broadcast_row(a, row, |x, y| x * y);
        self.push(out, Op::MulRow(a, row))
    }

    pub fn linear(&mut self, x: Var, weight: ParamId, bias: ParamId) -> Var {
        let w = self.param(weight);
        let b = self.param(bias);
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| s * x);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let mut out = self.value(a).clone();
        let c = out.cols() as f64;
        let mut inv_std = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let is = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { input: a, inv_std })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[off..off + t.cols()].copy_from_slice(t.row(i));
            }
            off += t.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        assert!(start < end && end <= t.rows(), "slice_rows {start}..{end} of {}", t.rows());
        let out = Tensor::from_vec(end - start, t.cols(), t.data()[start * t.cols()..end * t.cols()].to_vec());
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        assert!(start < end && end <= t.cols(), "slice_cols {start}..{end} of {}", t.cols());
        let mut out = Tensor::zeros(t.rows(), end - start);
        for i in 0..t.rows() {
            out.row_mut(i).copy_from_slice(&t.row(i)[start..end]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    /// Column means, `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert!(t.rows() > 0, "mean of zero rows");
        let mut out = vec![0.0; t.cols()];
        for i in 0..t.rows() {
            for (o, x) in out.iter_mut().zip(t.row(i)) {
                *o += x;
            }
        }
        let n = t.rows() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        self.push(Tensor::row_vector(out), Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::SumAll(a))
    }

    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            out.add_assign(self.value(p));
        }
        self.push(out, Op::AddN(parts.to_vec()))
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < t.rows(), "gather index {id} out of {} rows", t.rows());
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    /// Unfolds convolution patches: `(h*w) x c` to `(oh*ow) x (k*k*c)`, zero padded.
    pub fn im2col(&mut self, a: Var, geom: ConvGeom) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape(), (geom.height * geom.width, geom.channels), "im2col input shape");
        let mut out = Tensor::zeros(geom.out_height() * geom.out_width(), geom.patch_len());
        let c = geom.channels;
        for (o, col, i) in geom.taps() {
            out.row_mut(o)[col..col + c].copy_from_slice(t.row(i));
        }
        self.push(out, Op::Im2Col(a, geom))
    }

    /// `out[i * kb + j] = q[i] + k[j]` for all row pairs.
    pub fn pairwise_add(&mut self, q: Var, k: Var) -> Var {
        let (tq, tk) = (self.value(q), self.value(k));
        assert_eq!(tq.cols(), tk.cols(), "pairwise_add width mismatch");
        let mut out = Tensor::zeros(tq.rows() * tk.rows(), tq.cols());
        for i in 0..tq.rows() {
            for j in 0..tk.rows() {
                let row = out.row_mut(i * tk.rows() + j);
                for ((o, a), b) in row.iter_mut().zip(tq.row(i)).zip(tk.row(j)) {
                    *o = a + b;
                }
            }
        }
        self.push(out, Op::PairwiseAdd(q, k))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), rows * cols, "reshape size mismatch");
        let out = Tensor::from_vec(rows, cols, t.data().to_vec());
        self.push(out, Op::Reshape(a))
    }

    /// Linear-chain CRF negative log-likelihood of `tags` (a `1 x 1` node).
    pub fn crf_nll(&mut self, emissions: Var, transitions: Var, start: Var, end: Var, tags: &[usize]) -> crate::Result<Var> {
        let (nll, grads) = {
            let scores = CrfScores::new(
                self.value(emissions),
                self.value(transitions),
                self.value(start).data(),
                self.value(end).data(),
            )?;
            scores.nll_with_grads(tags)?
        };
        Ok(self.push(
            Tensor::from_vec(1, 1, vec![nll]),
            Op::Crf {
                inputs: [emissions, transitions, start, end],
                grads: Box::new(grads),
            },
        ))
    }

    /// Cross-entropy of a `1 x R` logit row against `class`.
    pub fn softmax_ce(&mut self, logits: Var, class: usize) -> crate::Result<Var> {
        let t = self.value(logits);
        if t.rows() != 1 {
            return Err(crate::error::shape_err!("softmax_ce expects one logit row, got {:?}", t.shape()));
        }
        if class >= t.cols() {
            return Err(crate::error::invalid!("class {class} out of range for {} classes", t.cols()));
        }
        let m = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = t.data().iter().map(|x| (x - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let loss = z.ln() + m - t.data()[class];
        let probs = exps.iter().map(|e| e / z).collect();
        Ok(self.push(Tensor::from_vec(1, 1, vec![loss]), Op::SoftmaxCe { logits, probs, class }))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = self.value(Var(idx));
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    gemm(&g, false, tb, true, slot(&mut grads, *a, ta.shape()), 1.0);
                    gemm(ta, true, &g, false, slot(&mut grads, *b, tb.shape()), 1.0);
                }
                Op::Transpose(a) => slot(&mut grads, *a, (g.cols(), g.rows())).add_assign(&g.transpose()),
                Op::Add(a, b) => {
                    slot(&mut grads, *a, g.shape()).add_assign(&g);
                    slot(&mut grads, *b, g.shape()).add_assign(&g);
                }
                Op::Sub(a, b) => {
                    slot(&mut grads, *a, g.shape()).add_assign(&g);
                    slot(&mut grads, *b, g.shape()).scaled_add_assign(-1.0, &g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    accumulate_zip(slot(&mut grads, *a, g.shape()), &g, tb);
                    accumulate_zip(slot(&mut grads, *b, g.shape()), &g, ta);
                }
                Op::AddRow(a, r) => {
                    slot(&mut grads, *a, g.shape()).add_assign(&g);
                    let dr = slot(&mut grads, *r, (1, g.cols()));
                    for i in 0..g.rows() {
                        for (d, x) in dr.data_mut().iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                    }
                }
                Op::MulRow(a, r) => {
                    let (ta, tr) = (self.value(*a), self.value(*r));
                    let da = slot(&mut grads, *a, g.shape());
                    for i in 0..g.rows() {
                        for ((d, x), y) in da.row_mut(i).iter_mut().zip(g.row(i)).zip(tr.data()) {
                            *d += x * y;
                        }
                    }
                    let dr = slot(&mut grads, *r, (1, g.cols()));
                    for i in 0..g.rows() {
                        for ((d, x), y) in dr.data_mut().iter_mut().zip(g.row(i)).zip(ta.row(i)) {
                            *d += x * y;
                        }
                    }
                }
                Op::Scale(a, s) => slot(&mut grads, *a, g.shape()).scaled_add_assign(*s, &g),
                Op::AddScalar(a) => slot(&mut grads, *a, g.shape()).add_assign(&g),
                Op::Tanh(a) => {
                    let d = slot(&mut grads, *a, g.shape());
                    for ((d, x), y) in d.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *d += x * (1.0 - y * y);
                    }
                }
                Op::Gelu(a) => {
                    let input = self.value(*a);
                    let d = slot(&mut grads, *a, g.shape());
                    for ((d, x), z) in d.data_mut().iter_mut().zip(g.data()).zip(input.data()) {
                        *d += x * gelu_grad(*z);
                    }
                }
                Op::Exp(a) => accumulate_zip(slot(&mut grads, *a, g.shape()), &g, out),
                Op::Clamp(a, lo, hi) => {
                    let input = self.value(*a);
                    let d = slot(&mut grads, *a, g.shape());
                    for ((d, x), z) in d.data_mut().iter_mut().zip(g.data()).zip(input.data()) {
                        if *z > *lo && *z < *hi {
                            *d += x;
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let d = slot(&mut grads, *a, g.shape());
                    for i in 0..g.rows() {
                        let (gr, yr) = (g.row(i), out.row(i));
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((d, x), y) in d.row_mut(i).iter_mut().zip(gr).zip(yr) {
                            *d += y * (x - dot);
                        }
                    }
                }
                Op::LayerNorm { input, inv_std } => {
                    let c = g.cols() as f64;
                    let d = slot(&mut grads, *input, g.shape());
                    for i in 0..g.rows() {
                        let (gr, xr) = (g.row(i), out.row(i));
                        let mean_g = gr.iter().sum::<f64>() / c;
                        let mean_gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c;
                        for ((d, gv), xv) in d.row_mut(i).iter_mut().zip(gr).zip(xr) {
                            *d += inv_std[i] * (gv - mean_g - xv * mean_gx);
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for &p in parts {
                        let shape = self.shape(p);
                        let piece = Tensor::from_vec(
                            shape.0,
                            shape.1,
                            g.data()[r0 * shape.1..(r0 + shape.0) * shape.1].to_vec(),
                        );
                        slot(&mut grads, p, shape).add_assign(&piece);
                        r0 += shape.0;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let shape = self.shape(p);
                        let d = slot(&mut grads, p, shape);
                        for i in 0..shape.0 {
                            for (dv, gv) in d.row_mut(i).iter_mut().zip(&g.row(i)[c0..c0 + shape.1]) {
                                *dv += gv;
                            }
                        }
                        c0 += shape.1;
                    }
                }
                Op::SliceRows(a, start) => {
                    let shape = self.shape(*a);
                    let d = slot(&mut grads, *a, shape);
                    for i in 0..g.rows() {
                        for (dv, gv) in d.row_mut(start + i).iter_mut().zip(g.row(i)) {
                            *dv += gv;
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    let shape = self.shape(*a);
                    let d = slot(&mut grads, *a, shape);
                    for i in 0..g.rows() {
                        for (dv, gv) in d.row_mut(i)[*start..start + g.cols()].iter_mut().zip(g.row(i)) {
                            *dv += gv;
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let shape = self.shape(*a);
                    let inv = 1.0 / shape.0 as f64;
                    let d = slot(&mut grads, *a, shape);
                    for i in 0..shape.0 {
                        for (dv, gv) in d.row_mut(i).iter_mut().zip(g.data()) {
                            *dv += gv * inv;
                        }
                    }
                }
                Op::SumAll(a) => {
                    let shape = self.shape(*a);
                    let gv = g.data()[0];
                    slot(&mut grads, *a, shape).data_mut().iter_mut().for_each(|d| *d += gv);
                }
                Op::AddN(parts) => {
                    for &p in parts {
                        slot(&mut grads, p, g.shape()).add_assign(&g);
                    }
                }
                Op::Gather(table, ids) => {
                    let shape = self.shape(*table);
                    let d = slot(&mut grads, *table, shape);
                    for (r, &id) in ids.iter().enumerate() {
                        for (dv, gv) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                            *dv += gv;
                        }
                    }
                }
                Op::Im2Col(a, geom) => {
                    let shape = self.shape(*a);
                    let c = geom.channels;
                    let d = slot(&mut grads, *a, shape);
                    for (o, col, i) in geom.taps() {
                        for (dv, gv) in d.row_mut(i).iter_mut().zip(&g.row(o)[col..col + c]) {
                            *dv += gv;
                        }
                    }
                }
                Op::PairwiseAdd(q, k) => {
                    let (sq, sk) = (self.shape(*q), self.shape(*k));
                    {
                        let dq = slot(&mut grads, *q, sq);
                        for i in 0..sq.0 {
                            for j in 0..sk.0 {
                                for (dv, gv) in dq.row_mut(i).iter_mut().zip(g.row(i * sk.0 + j)) {
                                    *dv += gv;
                                }
                            }
                        }
                    }
                    let dk = slot(&mut grads, *k, sk);
                    for i in 0..sq.0 {
                        for j in 0..sk.0 {
                            for (dv, gv) in dk.row_mut(j).iter_mut().zip(g.row(i * sk.0 + j)) {
                                *dv += gv;
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.shape(*a);
                    let d = slot(&mut grads, *a, shape);
                    for (dv, gv) in d.data_mut().iter_mut().zip(g.data()) {
                        *dv += gv;
                    }
                }
                Op::Crf { inputs, grads: cg } => {
                    let gv = g.data()[0];
                    let [e, t, s, en] = *inputs;
                    slot(&mut grads, e, cg.emissions.shape()).scaled_add_assign(gv, &cg.emissions);
                    slot(&mut grads, t, cg.transitions.shape()).scaled_add_assign(gv, &cg.transitions);
                    let ds = slot(&mut grads, s, (1, cg.start.len()));
                    for (d, x) in ds.data_mut().iter_mut().zip(&cg.start) {
                        *d += gv * x;
                    }
                    let de = slot(&mut grads, en, (1, cg.end.len()));
                    for (d, x) in de.data_mut().iter_mut().zip(&cg.end) {
                        *d += gv * x;
                    }
                }
                Op::SoftmaxCe { logits, probs, class } => {
                    let gv = g.data()[0];
                    let d = slot(&mut grads, *logits, (1, probs.len()));
                    for (j, (dv, p)) in d.data_mut().iter_mut().zip(probs).enumerate() {
                        let target = if j == *class { 1.0 } else { 0.0 };
                        *dv += gv * (p - target);
                    }
                }
            }
            grads[idx] = Some(g);
        }

        Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        }
    }
}

fn slot(grads: &mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

fn accumulate_zip(d: &mut Tensor, g: &Tensor, other: &Tensor) {
    for ((d, x), y) in d.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
        *d += x * y;
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// `None` when the parameter did not take part in the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_vars
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|v| self.wrt(v))
    }
}
