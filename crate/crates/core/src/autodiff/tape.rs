use super::kernels::{gemm, gemm_batched, std_normal_cdf, std_normal_pdf, transpose_batched};
use super::{AutodiffError, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Backward rule of a custom node: `(inputs, output, upstream) -> one gradient per input`.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Matmul { batched: bool },
    Add { broadcast: bool },
    Sub,
    Mul,
    MulScalar(f64),
    AddScalar,
    Relu,
    Reshape,
    TransposeLast2,
    Concat { axis: usize },
    Narrow { axis: usize, start: usize },
    ExpandLeading,
    Softmax,
    Gelu,
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { probs: Vec<f64>, labels: Vec<usize> },
    Sum,
    Mean,
    Custom(BackwardFn),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MulScalar(_) => "mul_scalar",
            Op::AddScalar => "add_scalar",
            Op::Relu => "relu",
            Op::Reshape => "reshape",
            Op::TransposeLast2 => "transpose_last2",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::ExpandLeading => "expand_leading",
            Op::Softmax => "softmax",
            Op::Gelu => "gelu",
            Op::LayerNorm { .. } => "layernorm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Custom(_) => "custom",
        }
    }
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run gradient tape.
///
/// Nodes are appended in execution order, so node ids are already a
/// topological order. [`Tape::backward`] walks them once in reverse and
/// accumulates gradients in input order, which makes repeated runs
/// bit-identical. A tape is single-use: record, backpropagate, drop.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backpropagated: bool,
}

fn split_rows(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    let rows = shape[r - 2];
    let cols = shape[r - 1];
    (shape[..r - 2].iter().product(), rows, cols)
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass w.r.t. `v`; `None` if `v` does not
    /// require grad or received no contribution.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, inputs: Vec<usize>, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            inputs,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// `a[..., m, k] · b[k, n]` (weight broadcast over leading dims) or
    /// `a[B..., m, k] · b[B..., k, n]` (batched, identical leading dims).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (lead, m, k) = split_rows(&sa);
        let (value, batched) = if sb.len() == 2 {
            if sb[0] != k {
                return Err(mismatch());
            }
            let n = sb[1];
            let out = gemm(self.value(a).data(), self.value(b).data(), lead * m, k, n);
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            (Tensor::new(shape, out)?, false)
        } else {
            let (lead_b, kb, n) = split_rows(&sb);
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] || kb != k {
                return Err(mismatch());
            }
            let out = gemm_batched(self.value(a).data(), self.value(b).data(), lead_b, m, k, n);
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            (Tensor::new(shape, out)?, true)
        };
        self.push(value, vec![a.0, b.0], Op::Matmul { batched })
    }

    /// Elementwise sum. `b` may also have a shape equal to a suffix of
    /// `a`'s shape, in which case it is broadcast over the leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let broadcast = if sa == sb {
            false
        } else if sb.len() < sa.len() && sa.ends_with(sb) {
            true
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        };
        let bd = self.value(b).data();
        let blen = bd.len();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % blen])
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        self.push(value, vec![a.0, b.0], Op::Add { broadcast })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, vec![a.0, b.0], Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, vec![a.0, b.0], Op::Mul)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        self.push(value, vec![a.0], Op::MulScalar(s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + s);
        self.push(value, vec![a.0], Op::AddScalar)
    }

    /// `max(x, 0)`; the gradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(value, vec![a.0], Op::Relu)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        self.push(value, vec![a.0], Op::Reshape)
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(AutodiffError::InvalidAxis {
                axis: 1,
                rank: shape.len(),
            });
        }
        let (lead, rows, cols) = split_rows(&shape);
        let data = transpose_batched(self.value(a).data(), lead, rows, cols);
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape.swap(r - 2, r - 1);
        let value = Tensor::new(out_shape, data)?;
        self.push(value, vec![a.0], Op::TransposeLast2)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or(AutodiffError::InvalidAxis { axis, rank: 0 })?).to_vec();
        if axis >= first.len() {
            return Err(AutodiffError::InvalidAxis {
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.value(x).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push(value, xs.iter().map(|v| v.0).collect(), Op::Concat { axis })
    }

    pub fn concat_lastdim(&mut self, xs: &[Var]) -> Result<Var> {
        let axis = self.shape(xs[0]).len() - 1;
        self.concat(xs, axis)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(AutodiffError::ShapeMismatch {
                op: "narrow",
                lhs: shape,
                rhs: vec![start, len],
            });
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        self.push(value, vec![a.0], Op::Narrow { axis, start })
    }

    /// `[n × d_model] -> h × [n × d_head]` along the last dim.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        let last = shape.len() - 1;
        if heads == 0 || shape[last] % heads != 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "split_heads",
                lhs: shape,
                rhs: vec![heads],
            });
        }
        let dh = shape[last] / heads;
        (0..heads).map(|i| self.narrow(x, last, i * dh, dh)).collect()
    }

    pub fn merge_heads(&mut self, heads: &[Var]) -> Result<Var> {
        self.concat_lastdim(heads)
    }

    /// Repeat `a` `n` times along a new leading axis.
    pub fn expand_leading(&mut self, a: Var, n: usize) -> Result<Var> {
        let src = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(src.shape());
        let data = src.data().repeat(n);
        let value = Tensor::new(shape, data)?;
        self.push(value, vec![a.0], Op::ExpandLeading)
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.is_finite() {
            return Err(AutodiffError::NonFinite { op: "softmax" });
        }
        let c = *x.shape().last().unwrap();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(value, vec![a.0], Op::Softmax)
    }

    /// Exact GELU `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * std_normal_cdf(x));
        self.push(value, vec![a.0], Op::Gelu)
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "layernorm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            vec![x.0, gamma.0, beta.0],
            Op::LayerNorm { xhat, inv_std },
        )
    }

    /// Mean softmax cross-entropy of `logits[B × C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(AutodiffError::LabelOutOfRange { label, classes: c });
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &x[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[r]];
        }
        let value = Tensor::scalar(loss / b as f64);
        self.push(
            value,
            vec![logits.0],
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, vec![a.0], Op::Sum)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(value, vec![a.0], Op::Mean)
    }

    /// Record a node whose forward value is `forward(inputs)` and whose
    /// backward rule is `backward` applied verbatim. Nothing inside
    /// `forward` is differentiated.
    pub fn custom<F, B>(&mut self, inputs: &[Var], forward: F, backward: B) -> Result<Var>
    where
        F: FnOnce(&[&Tensor]) -> Result<Tensor>,
        B: Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + 'static,
    {
        let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let value = forward(&values)?;
        self.push(
            value,
            inputs.iter().map(|v| v.0).collect(),
            Op::Custom(Box::new(backward)),
        )
    }

    /// Reverse pass from a scalar `loss`. Fills [`Tape::grad`] for every
    /// node that requires grad and lies upstream of `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backpropagated = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let input_grads = self.node_backward(node, &upstream)?;
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                let Some(g) = g else { continue };
                if g.shape() != self.nodes[input].value.shape() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "backward",
                        lhs: self.nodes[input].value.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[id] = Some(upstream);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[id] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let input = |i: usize| &self.nodes[node.inputs[i]].value;
        let wants = |i: usize| self.nodes[node.inputs[i]].requires_grad;
        let gd = g.data();
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Matmul { batched } => {
                let a = input(0);
                let b = input(1);
                let (lead, m, k) = split_rows(a.shape());
                let n = *b.shape().last().unwrap();
                let mut ga = None;
                let mut gb = None;
                if *batched {
                    if wants(0) {
                        let bt = transpose_batched(b.data(), lead, k, n);
                        ga = Some(Tensor::new(a.shape().to_vec(), gemm_batched(gd, &bt, lead, m, n, k))?);
                    }
                    if wants(1) {
                        let at = transpose_batched(a.data(), lead, m, k);
                        gb = Some(Tensor::new(b.shape().to_vec(), gemm_batched(&at, gd, lead, k, m, n))?);
                    }
                } else {
                    let rows = lead * m;
                    if wants(0) {
                        let bt = transpose_batched(b.data(), 1, k, n);
                        ga = Some(Tensor::new(a.shape().to_vec(), gemm(gd, &bt, rows, n, k))?);
                    }
                    if wants(1) {
                        let at = transpose_batched(a.data(), 1, rows, k);
                        gb = Some(Tensor::new(b.shape().to_vec(), gemm(&at, gd, k, rows, n))?);
                    }
                }
                vec![ga, gb]
            }
            Op::Add { broadcast } => {
                let gb = if *broadcast {
                    let bshape = input(1).shape();
                    let blen = input(1).len();
                    let mut acc = vec![0.0; blen];
                    for (i, v) in gd.iter().enumerate() {
                        acc[i % blen] += v;
                    }
                    Tensor::new(bshape.to_vec(), acc)?
                } else {
                    g.clone()
                };
                vec![Some(g.clone()), Some(gb)]
            }
            Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Mul => {
                let a = input(0);
                let b = input(1);
                let ga: Vec<f64> = gd.iter().zip(b.data()).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = gd.iter().zip(a.data()).map(|(g, x)| g * x).collect();
                vec![
                    Some(Tensor::new(a.shape().to_vec(), ga)?),
                    Some(Tensor::new(b.shape().to_vec(), gb)?),
                ]
            }
            Op::MulScalar(s) => vec![Some(g.map(|v| v * s))],
            Op::AddScalar | Op::Reshape => {
                vec![Some(Tensor::new(input(0).shape().to_vec(), gd.to_vec())?)]
            }
            Op::Relu => {
                let data = gd
                    .iter()
                    .zip(input(0).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![Some(Tensor::new(input(0).shape().to_vec(), data)?)]
            }
            Op::TransposeLast2 => {
                let (lead, rows, cols) = split_rows(g.shape());
                let data = transpose_batched(gd, lead, rows, cols);
                vec![Some(Tensor::new(input(0).shape().to_vec(), data)?)]
            }
            Op::Concat { axis } => {
                let (outer, inner) = outer_inner(g.shape(), *axis);
                let total = g.shape()[*axis];
                let mut offset = 0;
                let mut res = Vec::with_capacity(node.inputs.len());
                for i in 0..node.inputs.len() {
                    let s = input(i).shape();
                    let len = s[*axis] * inner;
                    let mut data = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        let base = o * total * inner + offset;
                        data.extend_from_slice(&gd[base..base + len]);
                    }
                    offset += len;
                    res.push(Some(Tensor::new(s.to_vec(), data)?));
                }
                res
            }
            Op::Narrow { axis, start } => {
                let s = input(0).shape();
                let (outer, inner) = outer_inner(s, *axis);
                let len = g.shape()[*axis];
                let mut data = vec![0.0; input(0).len()];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                vec![Some(Tensor::new(s.to_vec(), data)?)]
            }
            Op::ExpandLeading => {
                let n = input(0).len();
                let mut acc = vec![0.0; n];
                for chunk in gd.chunks(n) {
                    for (a, v) in acc.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                vec![Some(Tensor::new(input(0).shape().to_vec(), acc)?)]
            }
            Op::Softmax => {
                let y = node.value.data();
                let c = *g.shape().last().unwrap();
                let mut data = vec![0.0; y.len()];
                for ((dx, yr), gr) in data.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::new(g.shape().to_vec(), data)?)]
            }
            Op::Gelu => {
                let data = gd
                    .iter()
                    .zip(input(0).data())
                    .map(|(g, &x)| g * (std_normal_cdf(x) + x * std_normal_pdf(x)))
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), data)?)]
            }
            Op::LayerNorm { xhat, inv_std } => {
                let gamma = input(1).data();
                let d = gamma.len();
                let mut dx = vec![0.0; gd.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gamma[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gamma[j];
                        dx[r * d + j] = is * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![
                    Some(Tensor::new(g.shape().to_vec(), dx)?),
                    Some(Tensor::new(vec![d], dgamma)?),
                    Some(Tensor::new(vec![d], dbeta)?),
                ]
            }
            Op::CrossEntropy { probs, labels } => {
                let shape = input(0).shape();
                let (b, c) = (shape[0], shape[1]);
                let scale = gd[0] / b as f64;
                let mut data: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    data[r * c + l] -= scale;
                }
                vec![Some(Tensor::new(shape.to_vec(), data)?)]
            }
            Op::Sum => vec![Some(Tensor::full(input(0).shape(), gd[0]))],
            Op::Mean => {
                let n = input(0).len() as f64;
                vec![Some(Tensor::full(input(0).shape(), gd[0] / n))]
            }
            Op::Custom(backward) => {
                let inputs: Vec<&Tensor> = (0..node.inputs.len()).map(input).collect();
                let res = backward(&inputs, &node.value, g);
                if res.len() != inputs.len() {
                    return Err(AutodiffError::ArityMismatch {
                        expected: inputs.len(),
                        got: res.len(),
                    });
                }
                res.into_iter().map(Some).collect()
            }
        };
        Ok(out)
    }
}
