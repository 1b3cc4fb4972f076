use std::collections::HashMap;
use std::str::FromStr;

use super::{gemm, ParamId, ParamStore, Tensor};
use crate::error::{dim_err, Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberately wrong backward rules, used as a negative control for the
/// gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    Gelu,
    Softmax,
    Conv1d,
}

impl FromStr for BackwardFault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Self::Gelu),
            "softmax" => Ok(Self::Softmax),
            "conv1d" => Ok(Self::Conv1d),
            other => Err(Error::Config(format!("unknown backward fault `{other}`"))),
        }
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Var),
    Conv1d { x: Var, w: Var, b: Var },
    MeanPool { x: Var, window: usize, stride: usize },
    Softmax(Var),
    Repeat { x: Var, factor: usize },
    PadRows(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    CrossEntropySum { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Concat(Vec<Var>),
    Transpose(Var),
    Sum(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) | Op::ScaleRows(a, b) => {
                vec![*a, *b]
            }
            Op::Conv1d { x, w, b } => vec![*x, *w, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Scale(x, _)
            | Op::MeanPool { x, .. }
            | Op::Softmax(x)
            | Op::Repeat { x, .. }
            | Op::PadRows(x)
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Gelu(x)
            | Op::Transpose(x)
            | Op::Sum(x) => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropySum { logits, .. } => vec![*logits],
            Op::Concat(xs) => xs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-threaded record of a forward computation.
///
/// A tape supports exactly one backward pass; build a fresh tape per step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
    fault: Option<BackwardFault>,
}

/// Gradients of one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when no path reaches it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into `store` in parameter order.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, var) in &self.params {
            if let Some(g) = self.wrt(var) {
                let p = store.get_mut(id);
                if p.frozen {
                    continue;
                }
                for (acc, gi) in p.grad.iter_mut().zip(g) {
                    *acc += gi;
                }
            }
        }
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    if s.len() == 1 {
        (1, s[0])
    } else {
        (s[..s.len() - 1].iter().product(), s[s.len() - 1])
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => dim_err(op, format!("expected a matrix, got shape {s:?}")),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Installs a deliberately wrong backward rule for one op kind.
    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf)
    }

    /// Records a leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        let v = self.push("variable", value, Op::Leaf)?;
        self.nodes[v.0].needs_grad = true;
        Ok(v)
    }

    /// Brings a stored parameter onto the tape. Repeated calls return the same
    /// handle. Frozen parameters are recorded as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = self.push("param", p.value.clone(), Op::Param)?;
        self.nodes[v.0].needs_grad = !p.frozen;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_2d("matmul", self.value(a))?;
        let (k2, n) = require_2d("matmul", self.value(b))?;
        if k != k2 {
            return dim_err("matmul", format!("inner dimensions {k} and {k2} disagree"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push("add", Tensor::new(shape, data)?, Op::Add(a, b))
    }

    /// `x[n×d] + bias[d]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = rows_cols(self.value(x));
        if self.value(bias).len() != d {
            return dim_err("add_bias", format!("bias has {} values for {d} columns", self.value(bias).len()));
        }
        let b = self.value(bias).data();
        let data = self.value(x).data().chunks(d).flat_map(|r| r.iter().zip(b).map(|(u, v)| u + v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_bias", Tensor::new(shape, data)?, Op::AddBias(x, bias))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", Tensor::new(shape, data)?, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", Tensor::new(shape, data)?, Op::Scale(x, factor))
    }

    /// Multiplies row `i` of `x[n×d]` by `w[i]` where `w` is `n×1`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, d) = require_2d("scale_rows", self.value(x))?;
        if self.value(w).shape() != [n, 1] {
            return dim_err("scale_rows", format!("weights {:?} for {n} rows", self.shape(w)));
        }
        let wv = self.value(w).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .zip(wv)
            .flat_map(|(r, s)| r.iter().map(move |v| v * s))
            .collect();
        self.push("scale_rows", Tensor::new(vec![n, d], data)?, Op::ScaleRows(x, w))
    }

    /// Length-preserving channel-mixing convolution with symmetric zero
    /// padding of `(k-1)/2`. `filters` is `k×d_in×d_out`, `bias` is `d_out`.
    pub fn conv1d_same(&mut self, x: Var, filters: Var, bias: Var) -> Result<Var> {
        let (l, din) = require_2d("conv1d_same", self.value(x))?;
        let (k, fin, dout) = match *self.shape(filters) {
            [k, a, b] => (k, a, b),
            ref s => return dim_err("conv1d_same", format!("filters must be k×d_in×d_out, got {s:?}")),
        };
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv kernel size must be odd, got {k}")));
        }
        if fin != din || self.value(bias).len() != dout {
            return dim_err("conv1d_same", format!("input has {din} channels, filters {fin}→{dout}, bias {}", self.value(bias).len()));
        }
        let pad = (k - 1) / 2;
        let mut out = vec![0.0; l * dout];
        let b = self.value(bias).data();
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(b);
        }
        let xd = self.value(x).data();
        let wd = self.value(filters).data();
        for t in 0..k {
            let Some((lo, hi)) = conv_rows(l, t, pad) else { continue };
            let src = lo + t - pad;
            gemm(
                hi - lo,
                din,
                dout,
                &xd[src * din..],
                false,
                &wd[t * din * dout..(t + 1) * din * dout],
                false,
                &mut out[lo * dout..],
                true,
            );
        }
        self.push("conv1d_same", Tensor::new(vec![l, dout], out)?, Op::Conv1d { x, w: filters, b: bias })
    }

    /// Strided mean pooling over rows without implicit padding.
    pub fn mean_pool_1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (l, d) = require_2d("mean_pool_1d", self.value(x))?;
        if window == 0 || stride == 0 {
            return Err(Error::Config(format!("pool window {window} and stride {stride} must be ≥ 1")));
        }
        if l < window {
            return Err(Error::EmptyOutput {
                op: "mean_pool_1d",
                detail: format!("length {l} is shorter than window {window}; pad first"),
            });
        }
        let n = (l - window) / stride + 1;
        let xd = self.value(x).data();
        let inv = 1.0 / window as f64;
        let mut out = vec![0.0; n * d];
        let mut buf = Vec::with_capacity(window);
        for (j, orow) in out.chunks_mut(d).enumerate() {
            let start = j * stride;
            for (c, o) in orow.iter_mut().enumerate() {
                // Summing in sorted order makes the mean exactly invariant
                // to permutations inside the window.
                buf.clear();
                buf.extend((start..start + window).map(|r| xd[r * d + c]));
                buf.sort_unstable_by(f64::total_cmp);
                *o = buf.iter().sum::<f64>() * inv;
            }
        }
        self.push("mean_pool_1d", Tensor::new(vec![n, d], out)?, Op::MeanPool { x, window, stride })
    }

    /// Softmax over the trailing axis with per-row max subtraction.
    pub fn softmax_last_axis(&mut self, x: Var) -> Result<Var> {
        let (_, m) = rows_cols(self.value(x));
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(m) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        self.push("softmax_last_axis", Tensor::new(shape, data)?, Op::Softmax(x))
    }

    /// Row `j` of the output is row `j / factor` of `x`.
    pub fn repeat_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Config("upsample factor must be ≥ 1".into()));
        }
        let (n, d) = require_2d("repeat_upsample", self.value(x))?;
        let mut out = Vec::with_capacity(n * factor * d);
        for row in self.value(x).data().chunks(d) {
            for _ in 0..factor {
                out.extend_from_slice(row);
            }
        }
        self.push("repeat_upsample", Tensor::new(vec![n * factor, d], out)?, Op::Repeat { x, factor })
    }

    /// Appends `extra` zero rows.
    pub fn pad_rows(&mut self, x: Var, extra: usize) -> Result<Var> {
        if extra == 0 {
            return Ok(x);
        }
        let (n, d) = require_2d("pad_rows", self.value(x))?;
        let mut data = self.value(x).data().to_vec();
        data.resize((n + extra) * d, 0.0);
        self.push("pad_rows", Tensor::new(vec![n + extra, d], data)?, Op::PadRows(x))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = require_2d("slice_rows", self.value(x))?;
        if start >= end || end > n {
            return dim_err("slice_rows", format!("range {start}..{end} of {n} rows"));
        }
        if start == 0 && end == n {
            return Ok(x);
        }
        let data = self.value(x).data()[start * d..end * d].to_vec();
        self.push("slice_rows", Tensor::new(vec![end - start, d], data)?, Op::SliceRows { x, start })
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = require_2d("slice_cols", self.value(x))?;
        if start >= end || end > d {
            return dim_err("slice_cols", format!("range {start}..{end} of {d} columns"));
        }
        let data = self.value(x).data().chunks(d).flat_map(|r| r[start..end].iter().copied()).collect();
        self.push("slice_cols", Tensor::new(vec![n, end - start], data)?, Op::SliceCols { x, start })
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = require_2d("embedding_gather", self.value(table))?;
        if let Some(&id) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::Range { id, rows });
        }
        let t = self.value(table);
        let data = ids.iter().flat_map(|&id| t.row(id).iter().copied()).collect();
        self.push(
            "embedding_gather",
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Gather { table, ids: ids.to_vec() },
        )
    }

    /// Per-row normalization followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (_, d) = rows_cols(self.value(x));
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return dim_err("layer_norm", format!("gain/bias must have {d} values"));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let xd = self.value(x).data();
        let mut xhat = Vec::with_capacity(xd.len());
        let mut inv_std = Vec::with_capacity(xd.len() / d);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", Tensor::new(shape, data)?, Op::Gelu(x))
    }

    /// Summed token cross-entropy of `logits[T×V]` against `targets`.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, v) = require_2d("cross_entropy_with_logits", self.value(logits))?;
        if targets.len() != t {
            return dim_err("cross_entropy_with_logits", format!("{} targets for {t} rows", targets.len()));
        }
        if let Some(&id) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::Range { id, rows: v });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(v).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
        }
        self.push(
            "cross_entropy_with_logits",
            Tensor::scalar(loss),
            Op::CrossEntropySum { logits, targets: targets.to_vec(), probs },
        )
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_last_axis(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return dim_err("concat_last_axis", "no inputs");
        };
        let (n, _) = require_2d("concat_last_axis", self.value(first))?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = require_2d("concat_last_axis", self.value(x))?;
            if r != n {
                return dim_err("concat_last_axis", format!("row counts {n} and {r} differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&x, &c) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[i * c..(i + 1) * c]);
            }
        }
        self.push("concat_last_axis", Tensor::new(vec![n, total], out)?, Op::Concat(xs.to_vec()))
    }

    pub fn transpose_2d(&mut self, x: Var) -> Result<Var> {
        let (n, d) = require_2d("transpose_2d", self.value(x))?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[j * n + i] = xd[i * d + j];
            }
        }
        self.push("transpose_2d", Tensor::new(vec![d, n], out)?, Op::Transpose(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse pass from a scalar. Fails if called twice on the same tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backward_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.param_vars.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort_by_key(|(p, _)| p.index());
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let fault = self.fault;
        // Adds into the gradient slot of `v`, allocating it on first touch.
        let slot = |v: Var, grads: &mut [Option<Vec<f64>>], f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                slot(*a, grads, &mut |ga| gemm(m, n, k, g, false, bv.data(), true, ga, true));
                slot(*b, grads, &mut |gb| gemm(k, m, n, av.data(), true, g, false, gb, true));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    slot(v, grads, &mut |ga| add_assign(ga, g));
                }
            }
            Op::AddBias(x, b) => {
                slot(*x, grads, &mut |gx| add_assign(gx, g));
                slot(*b, grads, &mut |gb| {
                    let d = gb.len();
                    for row in g.chunks(d) {
                        add_assign(gb, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                slot(*a, grads, &mut |ga| {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                });
                slot(*b, grads, &mut |gb| {
                    for ((o, gi), y) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * y;
                    }
                });
            }
            Op::Scale(x, f) => slot(*x, grads, &mut |gx| {
                for (o, gi) in gx.iter_mut().zip(g) {
                    *o += gi * f;
                }
            }),
            Op::ScaleRows(x, w) => {
                let xv = self.value(*x);
                let wv = self.value(*w).data();
                let d = xv.cols();
                slot(*x, grads, &mut |gx| {
                    for ((orow, grow), s) in gx.chunks_mut(d).zip(g.chunks(d)).zip(wv) {
                        for (o, gi) in orow.iter_mut().zip(grow) {
                            *o += gi * s;
                        }
                    }
                });
                slot(*w, grads, &mut |gw| {
                    for ((o, grow), xrow) in gw.iter_mut().zip(g.chunks(d)).zip(xv.data().chunks(d)) {
                        *o += dot(grow, xrow);
                    }
                });
            }
            Op::Conv1d { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (l, din) = (xv.rows(), xv.cols());
                let (k, dout) = (wv.shape()[0], wv.shape()[2]);
                let pad = (k - 1) / 2;
                let scale = if fault == Some(BackwardFault::Conv1d) { 1.5 } else { 1.0 };
                let gs: Vec<f64> = g.iter().map(|v| v * scale).collect();
                slot(*x, grads, &mut |gx| {
                    for t in 0..k {
                        let Some((lo, hi)) = conv_rows(l, t, pad) else { continue };
                        let src = lo + t - pad;
                        let wt = &wv.data()[t * din * dout..(t + 1) * din * dout];
                        gemm(hi - lo, dout, din, &gs[lo * dout..], false, wt, true, &mut gx[src * din..], true);
                    }
                });
                slot(*w, grads, &mut |gw| {
                    for t in 0..k {
                        let Some((lo, hi)) = conv_rows(l, t, pad) else { continue };
                        let src = lo + t - pad;
                        let n = hi - lo;
                        gemm(
                            din,
                            n,
                            dout,
                            &xv.data()[src * din..(src + n) * din],
                            true,
                            &gs[lo * dout..hi * dout],
                            false,
                            &mut gw[t * din * dout..(t + 1) * din * dout],
                            true,
                        );
                    }
                });
                slot(*b, grads, &mut |gb| {
                    for row in gs.chunks(dout) {
                        add_assign(gb, row);
                    }
                });
            }
            Op::MeanPool { x, window, stride } => {
                let d = out.cols();
                let inv = 1.0 / *window as f64;
                slot(*x, grads, &mut |gx| {
                    for (j, grow) in g.chunks(d).enumerate() {
                        for r in 0..*window {
                            let dst = &mut gx[(j * stride + r) * d..(j * stride + r + 1) * d];
                            for (o, gi) in dst.iter_mut().zip(grow) {
                                *o += gi * inv;
                            }
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let m = out.cols();
                let scale = if fault == Some(BackwardFault::Softmax) { 1.5 } else { 1.0 };
                slot(*x, grads, &mut |gx| {
                    for ((o, grow), yrow) in gx.chunks_mut(m).zip(g.chunks(m)).zip(out.data().chunks(m)) {
                        let s = dot(grow, yrow);
                        for ((oi, gi), yi) in o.iter_mut().zip(grow).zip(yrow) {
                            *oi += scale * yi * (gi - s);
                        }
                    }
                });
            }
            Op::Repeat { x, factor } => {
                let d = out.cols();
                slot(*x, grads, &mut |gx| {
                    for (j, grow) in g.chunks(d).enumerate() {
                        let dst = &mut gx[(j / factor) * d..(j / factor + 1) * d];
                        add_assign(dst, grow);
                    }
                });
            }
            Op::PadRows(x) => slot(*x, grads, &mut |gx| {
                let n = gx.len();
                add_assign(gx, &g[..n]);
            }),
            Op::SliceRows { x, start } => {
                let d = out.cols();
                slot(*x, grads, &mut |gx| add_assign(&mut gx[start * d..start * d + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let w = out.cols();
                let d = self.value(*x).cols();
                slot(*x, grads, &mut |gx| {
                    for (orow, grow) in gx.chunks_mut(d).zip(g.chunks(w)) {
                        add_assign(&mut orow[*start..start + w], grow);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = out.cols();
                slot(*table, grads, &mut |gt| {
                    for (&id, grow) in ids.iter().zip(g.chunks(d)) {
                        add_assign(&mut gt[id * d..(id + 1) * d], grow);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = out.cols();
                let gv = self.value(*gain).data();
                slot(*x, grads, &mut |gx| {
                    for (((orow, grow), hrow), is) in gx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).zip(inv_std) {
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dot(&dh, hrow) / d as f64;
                        for ((o, dhi), hi) in orow.iter_mut().zip(&dh).zip(hrow) {
                            *o += is * (dhi - mean_dh - hi * mean_dh_h);
                        }
                    }
                });
                slot(*gain, grads, &mut |gg| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, gi), hi) in gg.iter_mut().zip(grow).zip(hrow) {
                            *o += gi * hi;
                        }
                    }
                });
                slot(*bias, grads, &mut |gb| {
                    for grow in g.chunks(d) {
                        add_assign(gb, grow);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let scale = if fault == Some(BackwardFault::Gelu) { 1.5 } else { 1.0 };
                slot(*x, grads, &mut |gx| {
                    for ((o, gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *o += scale * gi * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::CrossEntropySum { logits, targets, probs } => {
                let v = self.value(*logits).cols();
                let gs = g[0];
                slot(*logits, grads, &mut |gl| {
                    for ((orow, prow), &y) in gl.chunks_mut(v).zip(probs.chunks(v)).zip(targets) {
                        for (o, p) in orow.iter_mut().zip(prow) {
                            *o += gs * p;
                        }
                        orow[y] -= gs;
                    }
                });
            }
            Op::Concat(xs) => {
                let total = out.cols();
                let mut offset = 0;
                for &x in xs {
                    let c = self.value(x).cols();
                    slot(x, grads, &mut |gx| {
                        for (orow, grow) in gx.chunks_mut(c).zip(g.chunks(total)) {
                            add_assign(orow, &grow[offset..offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::Transpose(x) => {
                let (d, n) = (out.rows(), out.cols());
                slot(*x, grads, &mut |gx| {
                    for i in 0..n {
                        for j in 0..d {
                            gx[i * d + j] += g[j * n + i];
                        }
                    }
                });
            }
            Op::Sum(x) => slot(*x, grads, &mut |gx| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
        }
    }
}

/// Output rows `lo..hi` that read a real (non-padding) input row at tap `t`.
fn conv_rows(l: usize, t: usize, pad: usize) -> Option<(usize, usize)> {
    let lo = pad.saturating_sub(t);
    let hi = (l + pad).saturating_sub(t).min(l);
    (lo < hi).then_some((lo, hi))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
