//! Tape of primitive applications with a reverse sweep.
//!
//! Nodes are appended in evaluation order, so the node vector is itself a
//! topological order and the backward pass is a single reverse scan.

use std::collections::HashMap;

use super::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Zero padding for [`Graph::conv1d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// `(k-1)/2 * dilation` zeros on both sides; output length equals input length.
    Same,
    /// No padding; output length is `len - (k-1) * dilation`.
    Valid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    LogClamped(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Embedding(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    MaxRows(Var, Vec<usize>),
    MeanRows(Var),
    Reshape(Var),
    Conv1d {
        input: Var,
        kernel: Var,
        dilation: usize,
        pad: usize,
    },
    AvgPool {
        input: Var,
        window: usize,
        stride: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Affine(..) => "affine",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::LogClamped(..) => "log",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Gather(..) => "gather",
            Op::Embedding(..) => "embedding_lookup",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MaxRows(..) => "max_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::Reshape(..) => "reshape",
            Op::Conv1d { .. } => "conv1d_dilated",
            Op::AvgPool { .. } => "avg_pool1d",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Affine(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::LogClamped(a, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Gather(a, _)
            | Op::Embedding(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MaxRows(a, _)
            | Op::MeanRows(a)
            | Op::Reshape(a) => vec![*a],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::Conv1d { input, kernel, .. } => vec![*input, *kernel],
            Op::AvgPool { input, .. } => vec![*input],
        }
    }
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

impl Node {
    fn rows(&self) -> usize {
        self.shape[0]
    }

    fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }
}

/// Recorded computation.
///
/// A graph is single-threaded and single-use: build it for one forward pass,
/// call [`Graph::backward`] once, then drop it.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: HashMap<(u64, usize), Var>,
    frozen: Vec<u64>,
    checked: bool,
    fault: Option<TensorError>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that records the first non-finite intermediate; `backward`
    /// then refuses to run.
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::default()
        }
    }

    pub fn fault(&self) -> Option<&TensorError> {
        self.fault.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters of `store` bound after this call enter as constants.
    pub fn freeze(&mut self, store: &ParamStore) {
        self.frozen.push(store.tag());
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        if self.checked && self.fault.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.fault = Some(TensorError::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, t: &Tensor, needs_grad: bool) -> Var {
        let v = self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf);
        self.nodes[v.0].needs_grad = needs_grad;
        v
    }

    /// A detached input; receives no gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    /// A free input whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Binds a stored parameter. Repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.tag(), id.index());
        if let Some(v) = self.bindings.get(&key) {
            return *v;
        }
        let trainable = !self.frozen.contains(&store.tag());
        let v = self.leaf(store.get(id), trainable);
        self.bindings.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "not a scalar: {:?}", n.shape);
        n.value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape")
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows(), n.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, bb) in orow.iter_mut().zip(brow) {
                    *o += x * bb;
                }
            }
        }
        self.push(out, vec![m, n], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        self.push(out, vec![c, r], Op::Transpose(a))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(na.shape, nb.shape, "{} shape mismatch", op.name());
        let out = na.value.iter().zip(&nb.value).map(|(x, y)| f(*x, *y)).collect();
        let shape = na.shape.clone();
        self.push(out, shape, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 × C` row to every row of an `R × C` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(self.dims(row), (1, c), "add_row expects a 1x{c} row");
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[row.0].value;
        let mut out = av.clone();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += bv[j];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, Op::AddRow(a, row))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let n = &self.nodes[a.0];
        let out = n.value.iter().map(|x| scale * x + shift).collect();
        let shape = n.shape.clone();
        self.push(out, shape, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let n = &self.nodes[a.0];
        let out = n.value.iter().map(|x| f(*x)).collect();
        let shape = n.shape.clone();
        self.push(out, shape, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    /// Natural log of `max(a, floor)`; the gradient is zero where clamped.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        self.map(a, |x| x.max(floor).ln(), Op::LogClamped(a, floor))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.log_clamped(a, 0.0)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(out, vec![r, c], Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(out, vec![r, c], Op::LogSoftmaxRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, pc) = self.dims(*p);
            assert_eq!(pc, c, "concat_rows width mismatch");
            out.extend_from_slice(&self.nodes[p.0].value);
            rows += r;
        }
        self.push(out, vec![rows, c], Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let r = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (pr, pc) = self.dims(*p);
                assert_eq!(pr, r, "concat_cols height mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let v = &self.nodes[p.0].value;
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(out, vec![r, total], Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims(a);
        assert!(start + len <= r && len > 0, "slice_rows out of range");
        let out = self.nodes[a.0].value[start * c..(start + len) * c].to_vec();
        self.push(out, vec![len, c], Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims(a);
        assert!(start + len <= c && len > 0, "slice_cols out of range");
        let v = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        self.push(out, vec![r, len], Op::SliceCols(a, start))
    }

    /// Picks column `idx[i]` of row `i`, giving an `R × 1` column.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(idx.len(), r, "gather needs one index per row");
        let v = &self.nodes[a.0].value;
        let out = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c, "gather index {j} out of {c}");
                v[i * c + j]
            })
            .collect();
        self.push(out, vec![r, 1], Op::Gather(a, idx.to_vec()))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, e) = self.dims(table);
        assert!(!ids.is_empty(), "embedding_lookup of no ids");
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            assert!(id < v, "token id {id} outside table of {v}");
            out.extend_from_slice(&tv[id * e..(id + 1) * e]);
        }
        self.push(out, vec![ids.len(), e], Op::Embedding(table, ids.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(vec![s], vec![1, 1], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![s], vec![1, 1], Op::Mean(a))
    }

    /// Column-wise maximum over rows (max-over-time pooling).
    pub fn max_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = &self.nodes[a.0].value;
        let mut arg = vec![0usize; c];
        let mut out = v[..c].to_vec();
        for i in 1..r {
            for j in 0..c {
                if v[i * c + j] > out[j] {
                    out[j] = v[i * c + j];
                    arg[j] = i;
                }
            }
        }
        self.push(out, vec![1, c], Op::MaxRows(a, arg))
    }

    /// Column-wise mean over rows.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; c];
        for row in v.chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push(out, vec![1, c], Op::MeanRows(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let n = &self.nodes[a.0];
        assert_eq!(n.value.len(), shape.iter().product::<usize>(), "reshape size");
        let out = n.value.clone();
        self.push(out, shape.to_vec(), Op::Reshape(a))
    }

    /// Dilated 1-D convolution of an `L × C_in` signal with a
    /// `k × C_in × C_out` kernel.
    pub fn conv1d(&mut self, input: Var, kernel: Var, dilation: usize, padding: Padding) -> Result<Var> {
        if dilation < 1 {
            return Err(TensorError::ZeroDilation);
        }
        let kshape = self.nodes[kernel.0].shape.clone();
        assert_eq!(kshape.len(), 3, "kernel must be k x C_in x C_out");
        let (k, cin, cout) = (kshape[0], kshape[1], kshape[2]);
        let (len, c) = self.dims(input);
        assert_eq!(c, cin, "conv1d channel mismatch");
        let span = (k - 1) * dilation;
        let (pad, out_len) = match padding {
            Padding::Same => {
                if k % 2 == 0 {
                    return Err(TensorError::EvenKernel(k));
                }
                (span / 2, len)
            }
            Padding::Valid => {
                if span >= len {
                    return Err(TensorError::InputTooShort { len, span: span + 1 });
                }
                (0, len - span)
            }
        };
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[kernel.0].value;
        let mut out = vec![0.0; out_len * cout];
        for t in 0..out_len {
            let orow = &mut out[t * cout..(t + 1) * cout];
            for j in 0..k {
                let src = (t + j * dilation) as isize - pad as isize;
                if src < 0 || src as usize >= len {
                    continue;
                }
                let xrow = &x[src as usize * cin..(src as usize + 1) * cin];
                for (ci, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &w[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                    for (o, wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            vec![out_len, cout],
            Op::Conv1d {
                input,
                kernel,
                dilation,
                pad,
            },
        ))
    }

    /// Same-padded dilated convolution.
    pub fn conv1d_dilated(&mut self, input: Var, kernel: Var, dilation: usize) -> Result<Var> {
        self.conv1d(input, kernel, dilation, Padding::Same)
    }

    /// Mean over windows along the row axis; trailing rows that do not fill
    /// a window are dropped.
    pub fn avg_pool1d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(TensorError::ZeroStride);
        }
        let (len, c) = self.dims(input);
        if window == 0 || window > len {
            return Err(TensorError::WindowTooLarge { window, len });
        }
        let out_len = (len - window) / stride + 1;
        let x = &self.nodes[input.0].value;
        let mut out = vec![0.0; out_len * c];
        for t in 0..out_len {
            let orow = &mut out[t * c..(t + 1) * c];
            for s in t * stride..t * stride + window {
                orow.iter_mut().zip(&x[s * c..(s + 1) * c]).for_each(|(o, v)| *o += v);
            }
            orow.iter_mut().for_each(|o| *o /= window as f64);
        }
        Ok(self.push(out, vec![out_len, c], Op::AvgPool { input, window, stride }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if let Some(f) = &self.fault {
            return Err(f.clone());
        }
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !ln.needs_grad {
            return Ok(Gradients {
                grads,
                bindings: self.bindings.clone(),
            });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            bindings: self.bindings.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        // accumulate into an input's gradient buffer
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:expr) => {{
                let v: Var = $v;
                if wants(v) {
                    let n = self.nodes[v.0].value.len();
                    let $buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                    $body
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let (av, bv) = (val(*a), val(*b));
                acc!(*a, |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc!(*b, |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += x * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                acc!(*a, |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc!(*a, |da| add_into(da, g));
                acc!(*b, |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc!(*a, |da| add_into(da, g));
                acc!(*b, |db| db.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc!(*a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                acc!(*b, |db| {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, row) => {
                let c = self.dims(*a).1;
                acc!(*a, |da| add_into(da, g));
                acc!(*row, |dr| {
                    for grow in g.chunks(c) {
                        add_into(dr, grow);
                    }
                });
            }
            Op::Affine(a, s) => acc!(*a, |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += s * x)),
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc!(*a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc!(*a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc!(*a, |da| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc!(*a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i];
                    }
                });
            }
            Op::LogClamped(a, floor) => {
                let x = val(*a);
                acc!(*a, |da| {
                    for i in 0..g.len() {
                        if x[i] > *floor {
                            da[i] += g[i] / x[i];
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = node.cols();
                let y = &node.value;
                acc!(*a, |da| {
                    for ((drow, yrow), grow) in da.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let c = node.cols();
                let y = &node.value;
                acc!(*a, |da| {
                    for ((drow, yrow), grow) in da.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let total: f64 = grow.iter().sum();
                        for j in 0..c {
                            drow[j] += grow[j] - yrow[j].exp() * total;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).len();
                    acc!(*p, |dp| add_into(dp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.cols();
                let mut off = 0;
                for p in parts {
                    let (r, w) = self.dims(*p);
                    acc!(*p, |dp| {
                        for i in 0..r {
                            add_into(&mut dp[i * w..(i + 1) * w], &g[i * total + off..i * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let c = self.dims(*a).1;
                acc!(*a, |da| add_into(&mut da[start * c..start * c + g.len()], g));
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.dims(*a);
                let len = node.cols();
                acc!(*a, |da| {
                    for i in 0..r {
                        add_into(&mut da[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::Gather(a, idx) => {
                let c = self.dims(*a).1;
                acc!(*a, |da| {
                    for (i, &j) in idx.iter().enumerate() {
                        da[i * c + j] += g[i];
                    }
                });
            }
            Op::Embedding(table, ids) => {
                let e = self.dims(*table).1;
                acc!(*table, |dt| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * e..(id + 1) * e], &g[i * e..(i + 1) * e]);
                    }
                });
            }
            Op::Sum(a) => acc!(*a, |da| da.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc!(*a, |da| da.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MaxRows(a, arg) => {
                let c = self.dims(*a).1;
                acc!(*a, |da| {
                    for (j, &i) in arg.iter().enumerate() {
                        da[i * c + j] += g[j];
                    }
                });
            }
            Op::MeanRows(a) => {
                let (r, c) = self.dims(*a);
                acc!(*a, |da| {
                    for drow in da.chunks_mut(c) {
                        for j in 0..c {
                            drow[j] += g[j] / r as f64;
                        }
                    }
                });
            }
            Op::Reshape(a) => acc!(*a, |da| add_into(da, g)),
            Op::Conv1d {
                input,
                kernel,
                dilation,
                pad,
            } => {
                let kshape = &self.nodes[kernel.0].shape;
                let (k, cin, cout) = (kshape[0], kshape[1], kshape[2]);
                let len = self.dims(*input).0;
                let out_len = node.rows();
                let (x, w) = (val(*input), val(*kernel));
                let src_of = |t: usize, j: usize| -> Option<usize> {
                    let s = (t + j * dilation) as isize - *pad as isize;
                    (s >= 0 && (s as usize) < len).then_some(s as usize)
                };
                acc!(*input, |dx| {
                    for t in 0..out_len {
                        let grow = &g[t * cout..(t + 1) * cout];
                        for j in 0..k {
                            let Some(s) = src_of(t, j) else { continue };
                            for ci in 0..cin {
                                let wrow = &w[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                                dx[s * cin + ci] += wrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                });
                acc!(*kernel, |dw| {
                    for t in 0..out_len {
                        let grow = &g[t * cout..(t + 1) * cout];
                        for j in 0..k {
                            let Some(s) = src_of(t, j) else { continue };
                            for ci in 0..cin {
                                let xv = x[s * cin + ci];
                                if xv == 0.0 {
                                    continue;
                                }
                                let drow = &mut dw[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                                for (d, gv) in drow.iter_mut().zip(grow) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::AvgPool { input, window, stride } => {
                let c = self.dims(*input).1;
                let out_len = node.rows();
                acc!(*input, |dx| {
                    for t in 0..out_len {
                        for s in t * stride..t * stride + window {
                            for j in 0..c {
                                dx[s * c + j] += g[t * c + j] / *window as f64;
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    bindings: HashMap<(u64, usize), Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for one stored parameter, if it was bound and reached.
    pub fn for_param(&self, store: &ParamStore, id: ParamId) -> Option<&[f64]> {
        self.bindings
            .get(&(store.tag(), id.index()))
            .and_then(|v| self.wrt(*v))
    }

    /// Adds the gradients of every bound parameter of `store` into its
    /// gradient buffers. Returns how many parameters received gradient.
    pub fn accumulate(&self, store: &mut ParamStore) -> usize {
        let tag = store.tag();
        let mut touched = 0;
        for idx in 0..store.len() {
            if let Some(v) = self.bindings.get(&(tag, idx)) {
                if let Some(g) = self.wrt(*v) {
                    store.tensor_mut(ParamId::from_index(idx)).accumulate_grad(g);
                    touched += 1;
                }
            }
        }
        touched
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
