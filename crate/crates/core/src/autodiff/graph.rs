use std::collections::HashMap;

use super::params::{BufferId, ParamId, ParamStore};
use super::tensor::{matmul_nt, matmul_raw, matmul_tn, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Constant,
    Param,
    Add,
    AddCol,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Tanh,
    Relu,
    Sigmoid,
    MatMul,
    Transpose,
    Sum,
    Mean,
    Concat,
    Narrow,
    Repeat,
    Reshape,
    Softmax,
    Conv1d,
    BatchNormTrain,
    BatchNormEval,
    Embedding,
    MaskedMse,
    BceWithLogits,
    SoftmaxCrossEntropy,
}

impl Primitive {
    pub const ALL: [Primitive; 27] = [
        Primitive::Constant,
        Primitive::Param,
        Primitive::Add,
        Primitive::AddCol,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::AddScalar,
        Primitive::Tanh,
        Primitive::Relu,
        Primitive::Sigmoid,
        Primitive::MatMul,
        Primitive::Transpose,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::Concat,
        Primitive::Narrow,
        Primitive::Repeat,
        Primitive::Reshape,
        Primitive::Softmax,
        Primitive::Conv1d,
        Primitive::BatchNormTrain,
        Primitive::BatchNormEval,
        Primitive::Embedding,
        Primitive::MaskedMse,
        Primitive::BceWithLogits,
        Primitive::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Constant => "constant",
            Primitive::Param => "param",
            Primitive::Add => "add",
            Primitive::AddCol => "add_col",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::AddScalar => "add_scalar",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Concat => "concat",
            Primitive::Narrow => "narrow",
            Primitive::Repeat => "broadcast_repeat",
            Primitive::Reshape => "reshape",
            Primitive::Softmax => "softmax",
            Primitive::Conv1d => "conv1d_same",
            Primitive::BatchNormTrain => "batchnorm_train",
            Primitive::BatchNormEval => "batchnorm_eval",
            Primitive::Embedding => "embedding",
            Primitive::MaskedMse => "masked_mse",
            Primitive::BceWithLogits => "bce_with_logits",
            Primitive::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Primitive> {
        Self::ALL.iter().copied().find(|p| p.name() == name)
    }
}

enum Op<F> {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    AddCol(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Concat {
        axis: usize,
        parts: Vec<Var>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Repeat {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad_left: usize,
    },
    BatchNorm {
        train: bool,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedMse {
        pred: Var,
        target: Tensor<F>,
        mask: Vec<bool>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<F>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<F>,
    },
}

impl<F> Op<F> {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Constant => Primitive::Constant,
            Op::Param(_) => Primitive::Param,
            Op::Add(..) => Primitive::Add,
            Op::AddCol(..) => Primitive::AddCol,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::AddScalar(..) => Primitive::AddScalar,
            Op::Tanh(_) => Primitive::Tanh,
            Op::Relu(_) => Primitive::Relu,
            Op::Sigmoid(_) => Primitive::Sigmoid,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Transpose(_) => Primitive::Transpose,
            Op::Sum(_) => Primitive::Sum,
            Op::Mean(_) => Primitive::Mean,
            Op::Concat { .. } => Primitive::Concat,
            Op::Narrow { .. } => Primitive::Narrow,
            Op::Repeat { .. } => Primitive::Repeat,
            Op::Reshape(_) => Primitive::Reshape,
            Op::Softmax { .. } => Primitive::Softmax,
            Op::Conv1d { .. } => Primitive::Conv1d,
            Op::BatchNorm { train: true, .. } => Primitive::BatchNormTrain,
            Op::BatchNorm { train: false, .. } => Primitive::BatchNormEval,
            Op::Embedding { .. } => Primitive::Embedding,
            Op::MaskedMse { .. } => Primitive::MaskedMse,
            Op::BceWithLogits { .. } => Primitive::BceWithLogits,
            Op::SoftmaxCrossEntropy { .. } => Primitive::SoftmaxCrossEntropy,
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Batch statistics observed by a train-mode batchnorm, applied to the
/// running buffers after the forward pass.
#[derive(Clone, Debug)]
pub struct BnObservation<F> {
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

/// Append-only tape. Nodes are created in topological order, so backward is
/// a single reverse sweep.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
    bn_observations: Vec<BnObservation<F>>,
    fault: Option<Primitive>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<F: Real>(what: &str, a: &Tensor<F>, b: &Tensor<F>) -> Error {
    Error::InvalidShape(format!(
        "{what}: {:?} vs {:?}",
        a.shape(),
        b.shape()
    ))
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Output length and left padding of a "same" convolution.
pub fn same_padding(t: usize, k: usize, stride: usize) -> (usize, usize) {
    let t_out = t.div_ceil(stride);
    let needed = (t_out - 1) * stride + k;
    let total = needed.saturating_sub(t);
    (t_out, total / 2)
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            param_vars: HashMap::new(),
            bn_observations: Vec::new(),
            fault: None,
        }
    }

    /// Test fixture: scales the backward contribution of `primitive` by 1.5
    /// so gradient checks can demonstrate that they catch a broken rule.
    pub fn with_fault(primitive: Primitive) -> Self {
        let mut g = Self::new();
        g.fault = Some(primitive);
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    pub fn primitive(&self, v: Var) -> Primitive {
        self.nodes[v.0].op.primitive()
    }

    pub fn take_bn_observations(&mut self) -> Vec<BnObservation<F>> {
        std::mem::take(&mut self.bn_observations)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            requires_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(what, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `a (m×n) + col (m×1)` broadcast across columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
        let (m, n) = ta.dims2();
        if tc.len() != m {
            return Err(shape_err("add_col", ta, tc));
        }
        let mut data = ta.data().to_vec();
        for i in 0..m {
            let c = tc.data()[i];
            for v in &mut data[i * n..(i + 1) * n] {
                *v = *v + c;
            }
        }
        let t = Tensor::new(ta.shape(), data)?;
        Ok(self.push(t, Op::AddCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let t = self.nodes[a.0].value.map(|x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let t = self.nodes[a.0].value.map(|x| x + s);
        self.push(t, Op::AddScalar(a), &[a])
    }

    /// `1 - a`, used by the GRU update gate.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -F::one());
        self.add_scalar(neg, F::one())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|x| x.tanh());
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|x| x.max(F::zero()));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        if k != k2 {
            return Err(shape_err("matmul inner extents differ", ta, tb));
        }
        let t = Tensor::new(&[m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.transpose();
        self.push(t, Op::Transpose(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push(t, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let t = Tensor::scalar(v.sum() / F::of(v.len() as f64));
        self.push(t, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Concatenation of 2-D values along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat of zero tensors".into()));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.dims(p)).collect();
        let t = match axis {
            0 => {
                let n = dims[0].1;
                if dims.iter().any(|d| d.1 != n) {
                    return Err(Error::InvalidShape(format!(
                        "concat(axis=0) column extents differ: {dims:?}"
                    )));
                }
                let mut data = Vec::new();
                for &p in parts {
                    data.extend_from_slice(self.nodes[p.0].value.data());
                }
                let m = dims.iter().map(|d| d.0).sum::<usize>();
                Tensor::new(&[m, n], data)?
            }
            1 => {
                let m = dims[0].0;
                if dims.iter().any(|d| d.0 != m) {
                    return Err(Error::InvalidShape(format!(
                        "concat(axis=1) row extents differ: {dims:?}"
                    )));
                }
                let n = dims.iter().map(|d| d.1).sum::<usize>();
                let mut data = Vec::with_capacity(m * n);
                for i in 0..m {
                    for &p in parts {
                        data.extend_from_slice(self.nodes[p.0].value.row_slice(i));
                    }
                }
                Tensor::new(&[m, n], data)?
            }
            _ => return Err(Error::InvalidShape(format!("concat axis {axis} > 1"))),
        };
        Ok(self.push(
            t,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis` of a 2-D value.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (m, n) = tx.dims2();
        let extent = if axis == 0 { m } else { n };
        if axis > 1 || len == 0 || start + len > extent {
            return Err(Error::InvalidShape(format!(
                "narrow(axis={axis}, start={start}, len={len}) of {:?}",
                tx.shape()
            )));
        }
        let t = if axis == 0 {
            Tensor::new(&[len, n], tx.data()[start * n..(start + len) * n].to_vec())?
        } else {
            let mut data = Vec::with_capacity(m * len);
            for i in 0..m {
                data.extend_from_slice(&tx.row_slice(i)[start..start + len]);
            }
            Tensor::new(&[m, len], data)?
        };
        Ok(self.push(t, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let (m, n) = self.dims(x);
        let extent = if axis == 0 { m } else { n };
        if sizes.iter().sum::<usize>() != extent {
            return Err(Error::InvalidShape(format!(
                "split sizes {sizes:?} do not cover extent {extent}"
            )));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            out.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Repeats an extent-1 axis `n` times.
    pub fn broadcast_repeat(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (r, c) = tx.dims2();
        let t = match (axis, r, c) {
            (1, _, 1) => {
                let mut data = Vec::with_capacity(r * n);
                for &v in tx.data() {
                    data.extend(std::iter::repeat_n(v, n));
                }
                Tensor::new(&[r, n], data)?
            }
            (0, 1, _) => {
                let mut data = Vec::with_capacity(c * n);
                for _ in 0..n {
                    data.extend_from_slice(tx.data());
                }
                Tensor::new(&[n, c], data)?
            }
            _ => {
                return Err(Error::InvalidShape(format!(
                    "broadcast_repeat(axis={axis}) needs extent 1 on that axis, got {:?}",
                    tx.shape()
                )))
            }
        };
        Ok(self.push(t, Op::Repeat { x, axis }, &[x]))
    }

    /// Numerically stable softmax of a 2-D value along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (m, n) = tx.dims2();
        if axis > 1 {
            return Err(Error::InvalidShape(format!("softmax axis {axis} > 1")));
        }
        let mut out = tx.data().to_vec();
        let (lines, len, stride, step) = if axis == 1 { (m, n, n, 1) } else { (n, m, 1, n) };
        for l in 0..lines {
            let base = l * stride;
            let idx = |j: usize| base + j * step;
            let mx = (0..len).map(|j| out[idx(j)]).fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for j in 0..len {
                let e = (out[idx(j)] - mx).exp();
                out[idx(j)] = e;
                total = total + e;
            }
            for j in 0..len {
                out[idx(j)] = out[idx(j)] / total;
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    /// Strided 1-D convolution over the time axis with "same" zero padding:
    /// `x: c_in×T`, `w: c_out×c_in×k`, `b: c_out` → `c_out×⌈T/stride⌉`.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (tx, tw, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let (c_in, t) = tx.dims2();
        let [c_out, wc_in, k] = *tw.shape() else {
            return Err(Error::InvalidShape(format!(
                "conv weight must be c_out×c_in×k, got {:?}",
                tw.shape()
            )));
        };
        if wc_in != c_in {
            return Err(shape_err("conv1d input channels", tx, tw));
        }
        if tb.len() != c_out {
            return Err(shape_err("conv1d bias", tw, tb));
        }
        if k % 2 == 0 || stride == 0 {
            return Err(Error::InvalidShape(format!(
                "conv1d needs odd kernel and positive stride (k={k}, stride={stride})"
            )));
        }
        let (t_out, pad_left) = same_padding(t, k, stride);
        let (xd, wd, bd) = (tx.data(), tw.data(), tb.data());
        let mut out = vec![F::zero(); c_out * t_out];
        for o in 0..c_out {
            let row = &mut out[o * t_out..(o + 1) * t_out];
            row.iter_mut().for_each(|v| *v = bd[o]);
            for c in 0..c_in {
                let xrow = &xd[c * t..(c + 1) * t];
                for j in 0..k {
                    let wv = wd[(o * c_in + c) * k + j];
                    for (to, r) in row.iter_mut().enumerate() {
                        let pos = (to * stride + j) as isize - pad_left as isize;
                        if pos >= 0 && (pos as usize) < t {
                            *r = *r + wv * xrow[pos as usize];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[c_out, t_out], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
            },
            &[x, w, b],
        ))
    }

    /// Per-channel (row) batch normalization over the time axis.
    /// `running` is `Some` in train mode: batch statistics are used and
    /// recorded for the running buffers. In eval mode, pass the running
    /// statistics as `eval_stats`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
        mode: BatchNormMode<'_, F>,
    ) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (c, t) = tx.dims2();
        let (tg, tbeta) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if tg.len() != c || tbeta.len() != c {
            return Err(shape_err("batchnorm affine", tx, tg));
        }
        let xd = tx.data();
        let mut means = vec![F::zero(); c];
        let mut vars = vec![F::zero(); c];
        let train = matches!(mode, BatchNormMode::Train { .. });
        match &mode {
            BatchNormMode::Train { .. } => {
                let nf = F::of(t as f64);
                for ch in 0..c {
                    let row = &xd[ch * t..(ch + 1) * t];
                    let mean = row.iter().copied().sum::<F>() / nf;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
                    means[ch] = mean;
                    vars[ch] = var;
                }
            }
            BatchNormMode::Eval { mean, var } => {
                means.copy_from_slice(mean.data());
                vars.copy_from_slice(var.data());
            }
        }
        let inv_std: Vec<F> = vars.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![F::zero(); c * t];
        let mut out = vec![F::zero(); c * t];
        for ch in 0..c {
            let (gm, bt) = (tg.data()[ch], tbeta.data()[ch]);
            for i in 0..t {
                let h = (xd[ch * t + i] - means[ch]) * inv_std[ch];
                xhat[ch * t + i] = h;
                out[ch * t + i] = gm * h + bt;
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        if let BatchNormMode::Train {
            running_mean,
            running_var,
        } = mode
        {
            self.bn_observations.push(BnObservation {
                running_mean,
                running_var,
                mean: means,
                var: vars,
            });
        }
        Ok(self.push(
            value,
            Op::BatchNorm {
                train,
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Columns of the result are rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        let (v, d) = tt.dims2();
        if ids.is_empty() {
            return Err(Error::EmptyInput("embedding of an empty id sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::OutOfVocabulary { id: bad, vocab: v });
        }
        let n = ids.len();
        let mut out = vec![F::zero(); d * n];
        for (col, &id) in ids.iter().enumerate() {
            for (r, &val) in tt.row_slice(id).iter().enumerate() {
                out[r * n + col] = val;
            }
        }
        let value = Tensor::new(&[d, n], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean squared error over the columns where `mask` is true.
    pub fn masked_mse(&mut self, pred: Var, target: Tensor<F>, mask: &[bool]) -> Result<Var> {
        let tp = &self.nodes[pred.0].value;
        if tp.shape() != target.shape() {
            return Err(shape_err("masked_mse", tp, &target));
        }
        let (d, n) = tp.dims2();
        if mask.len() != n {
            return Err(Error::InvalidShape(format!(
                "mask length {} vs {n} columns",
                mask.len()
            )));
        }
        let valid = mask.iter().filter(|&&m| m).count();
        if valid == 0 {
            return Err(Error::EmptyInput("masked_mse with every column masked".into()));
        }
        let mut total = F::zero();
        for r in 0..d {
            for c in 0..n {
                if mask[c] {
                    let e = tp.at(r, c) - target.at(r, c);
                    total = total + e * e;
                }
            }
        }
        let value = Tensor::scalar(total / F::of((d * valid) as f64));
        Ok(self.push(
            value,
            Op::MaskedMse {
                pred,
                target,
                mask: mask.to_vec(),
            },
            &[pred],
        ))
    }

    /// Mean binary cross-entropy of logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[F]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        if tl.len() != targets.len() {
            return Err(Error::InvalidShape(format!(
                "bce: {} logits vs {} targets",
                tl.len(),
                targets.len()
            )));
        }
        let n = F::of(targets.len() as f64);
        let total = tl
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(F::zero()) - z * y + (F::one() + (-z.abs()).exp()).ln())
            .sum::<F>();
        let value = Tensor::scalar(total / n);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// `-ln softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        if label >= tl.len() {
            return Err(Error::InvalidShape(format!(
                "label {label} outside {} logits",
                tl.len()
            )));
        }
        let mx = tl.data().iter().copied().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = tl.data().iter().map(|&z| (z - mx).exp()).collect();
        let total: F = exps.iter().copied().sum();
        let probs: Vec<F> = exps.iter().map(|&e| e / total).collect();
        let loss = -(tl.data()[label] - mx - total.ln());
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        ))
    }

    /// First node (in creation order) whose value is not finite.
    pub fn check_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.all_finite() {
                return Err(Error::NonFinite {
                    primitive: n.op.primitive().name(),
                    node: i,
                });
            }
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`; parameter gradients are added to
    /// whatever the store already holds.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<F>) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), F::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.local_backward(node, &g);
            let corrupt = self.fault == Some(node.op.primitive());
            for (parent, mut cg) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                if corrupt {
                    cg.scale_assign(F::of(1.5));
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&cg),
                    slot => *slot = Some(cg),
                }
            }
            if let Op::Param(id) = node.op {
                store.accumulate(id, &g);
            }
        }
        Ok(())
    }

    fn local_backward(&self, node: &Node<F>, g: &Tensor<F>) -> Vec<(Var, Tensor<F>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let with = |t: &Tensor<F>, data: Vec<F>| Tensor::new(t.shape(), data).expect("shape");
        match &node.op {
            Op::Constant | Op::Param(_) => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let mut out = Vec::new();
                if needs(*a) {
                    let d = g.data().iter().zip(val(*b).data()).map(|(&x, &y)| x * y);
                    out.push((*a, with(g, d.collect())));
                }
                if needs(*b) {
                    let d = g.data().iter().zip(val(*a).data()).map(|(&x, &y)| x * y);
                    out.push((*b, with(g, d.collect())));
                }
                out
            }
            Op::AddCol(a, col) => {
                let (m, n) = g.dims2();
                let mut gc = vec![F::zero(); m];
                for (i, s) in gc.iter_mut().enumerate() {
                    *s = g.data()[i * n..(i + 1) * n].iter().copied().sum();
                }
                vec![(*a, g.clone()), (*col, with(val(*col), gc))]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|v| v * *s))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Tanh(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * (F::one() - y * y));
                vec![(*a, with(g, d.collect()))]
            }
            Op::Relu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gv, &x)| if x > F::zero() { gv } else { F::zero() });
                vec![(*a, with(g, d.collect()))]
            }
            Op::Sigmoid(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * y * (F::one() - y));
                vec![(*a, with(g, d.collect()))]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.dims2();
                let n = tb.cols();
                let mut out = Vec::new();
                if needs(*a) {
                    out.push((*a, with(ta, matmul_nt(g.data(), tb.data(), m, n, k))));
                }
                if needs(*b) {
                    out.push((*b, with(tb, matmul_tn(ta.data(), g.data(), m, k, n))));
                }
                out
            }
            Op::Transpose(a) => vec![(*a, with(val(*a), g.transpose().into_data()))],
            Op::Sum(a) => {
                let t = val(*a);
                vec![(*a, Tensor::full(t.shape(), g.data()[0]))]
            }
            Op::Mean(a) => {
                let t = val(*a);
                let s = g.data()[0] / F::of(t.len() as f64);
                vec![(*a, Tensor::full(t.shape(), s))]
            }
            Op::Reshape(a) => vec![(*a, with(val(*a), g.data().to_vec()))],
            Op::Concat { axis, parts } => {
                let (_, n) = g.dims2();
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let tp = val(p);
                    let (pm, pn) = tp.dims2();
                    let data = if *axis == 0 {
                        g.data()[offset * n..(offset + pm) * n].to_vec()
                    } else {
                        let mut d = Vec::with_capacity(pm * pn);
                        for i in 0..pm {
                            d.extend_from_slice(&g.row_slice(i)[offset..offset + pn]);
                        }
                        d
                    };
                    offset += if *axis == 0 { pm } else { pn };
                    if needs(p) {
                        out.push((p, with(tp, data)));
                    }
                }
                out
            }
            Op::Narrow { x, axis, start } => {
                let tx = val(*x);
                let (m, n) = tx.dims2();
                let (gm, gn) = g.dims2();
                let mut d = vec![F::zero(); m * n];
                if *axis == 0 {
                    d[start * n..(start + gm) * n].copy_from_slice(g.data());
                } else {
                    for i in 0..m {
                        d[i * n + start..i * n + start + gn].copy_from_slice(g.row_slice(i));
                    }
                }
                vec![(*x, with(tx, d))]
            }
            Op::Repeat { x, axis } => {
                let tx = val(*x);
                let (gm, gn) = g.dims2();
                let d = if *axis == 1 {
                    (0..gm).map(|i| g.row_slice(i).iter().copied().sum()).collect()
                } else {
                    (0..gn).map(|j| (0..gm).map(|i| g.at(i, j)).sum()).collect()
                };
                vec![(*x, with(tx, d))]
            }
            Op::Softmax { axis, x } => {
                let y = &node.value;
                let (m, n) = y.dims2();
                let (lines, len, stride, step) =
                    if *axis == 1 { (m, n, n, 1) } else { (n, m, 1, n) };
                let mut d = vec![F::zero(); m * n];
                for l in 0..lines {
                    let idx = |j: usize| l * stride + j * step;
                    let dot: F = (0..len).map(|j| g.data()[idx(j)] * y.data()[idx(j)]).sum();
                    for j in 0..len {
                        d[idx(j)] = y.data()[idx(j)] * (g.data()[idx(j)] - dot);
                    }
                }
                vec![(*x, with(y, d))]
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
            } => {
                let (tx, tw) = (val(*x), val(*w));
                let (c_in, t) = tx.dims2();
                let [c_out, _, k] = *tw.shape() else { unreachable!() };
                let t_out = g.cols();
                let (xd, wd, gd) = (tx.data(), tw.data(), g.data());
                let mut dx = vec![F::zero(); c_in * t];
                let mut dw = vec![F::zero(); c_out * c_in * k];
                let mut db = vec![F::zero(); c_out];
                for o in 0..c_out {
                    let grow = &gd[o * t_out..(o + 1) * t_out];
                    db[o] = grow.iter().copied().sum();
                    for c in 0..c_in {
                        for j in 0..k {
                            let widx = (o * c_in + c) * k + j;
                            let wv = wd[widx];
                            let mut acc = F::zero();
                            for (to, &gv) in grow.iter().enumerate() {
                                let pos = (to * stride + j) as isize - *pad_left as isize;
                                if pos >= 0 && (pos as usize) < t {
                                    let p = c * t + pos as usize;
                                    acc = acc + gv * xd[p];
                                    dx[p] = dx[p] + gv * wv;
                                }
                            }
                            dw[widx] = acc;
                        }
                    }
                }
                let mut out = vec![(*w, with(tw, dw)), (*b, with(val(*b), db))];
                if needs(*x) {
                    out.push((*x, with(tx, dx)));
                }
                out
            }
            Op::BatchNorm {
                train,
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let tx = val(*x);
                let (c, t) = tx.dims2();
                let gd = g.data();
                let gam = val(*gamma).data();
                let mut dx = vec![F::zero(); c * t];
                let mut dg = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                let nf = F::of(t as f64);
                for ch in 0..c {
                    let rows = ch * t..(ch + 1) * t;
                    let (gr, hr) = (&gd[rows.clone()], &xhat[rows.clone()]);
                    dbeta[ch] = gr.iter().copied().sum();
                    dg[ch] = gr.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                    if *train {
                        // dxhat = g·γ; dx = inv_std/N · (N·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                        let sum_dh = dbeta[ch] * gam[ch];
                        let sum_dh_h = dg[ch] * gam[ch];
                        for i in 0..t {
                            let dh = gr[i] * gam[ch];
                            dx[ch * t + i] =
                                inv_std[ch] / nf * (nf * dh - sum_dh - hr[i] * sum_dh_h);
                        }
                    } else {
                        for i in 0..t {
                            dx[ch * t + i] = gr[i] * gam[ch] * inv_std[ch];
                        }
                    }
                }
                vec![
                    (*x, with(tx, dx)),
                    (*gamma, with(val(*gamma), dg)),
                    (*beta, with(val(*beta), dbeta)),
                ]
            }
            Op::Embedding { table, ids } => {
                let tt = val(*table);
                let d = tt.cols();
                let n = ids.len();
                let mut dt = vec![F::zero(); tt.len()];
                for (col, &id) in ids.iter().enumerate() {
                    for r in 0..d {
                        dt[id * d + r] = dt[id * d + r] + g.data()[r * n + col];
                    }
                }
                vec![(*table, with(tt, dt))]
            }
            Op::MaskedMse { pred, target, mask } => {
                let tp = val(*pred);
                let (d, n) = tp.dims2();
                let valid = mask.iter().filter(|&&m| m).count();
                let scale = g.data()[0] * F::of(2.0 / (d * valid) as f64);
                let mut dp = vec![F::zero(); d * n];
                for r in 0..d {
                    for c in 0..n {
                        if mask[c] {
                            dp[r * n + c] = scale * (tp.at(r, c) - target.at(r, c));
                        }
                    }
                }
                vec![(*pred, with(tp, dp))]
            }
            Op::BceWithLogits { logits, targets } => {
                let tl = val(*logits);
                let s = g.data()[0] / F::of(targets.len() as f64);
                let d = tl
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| s * (sigmoid(z) - y))
                    .collect();
                vec![(*logits, with(tl, d))]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            } => {
                let tl = val(*logits);
                let s = g.data()[0];
                let d = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| s * (p - if i == *label { F::one() } else { F::zero() }))
                    .collect();
                vec![(*logits, with(tl, d))]
            }
        }
    }
}

/// Statistics source for [`Graph::batchnorm`].
pub enum BatchNormMode<'a, F: Real> {
    Train {
        running_mean: BufferId,
        running_var: BufferId,
    },
    Eval {
        mean: &'a Tensor<F>,
        var: &'a Tensor<F>,
    },
}

impl<F: Real> ParamStore<F> {
    /// Folds observed batch statistics into the running buffers:
    /// `running = momentum·running + (1 − momentum)·batch`.
    pub fn apply_bn_observations(&mut self, obs: &[BnObservation<F>], momentum: F) {
        for o in obs {
            for (buf, batch) in [(o.running_mean, &o.mean), (o.running_var, &o.var)] {
                let t = self.buffer_mut(buf);
                for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                    *r = momentum * *r + (F::one() - momentum) * b;
                }
            }
        }
    }
}
