//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is built fresh for every forward call. Each primitive computes
//! its value eagerly and, when any input requires a gradient, records what
//! the backward pass needs. [`Tape::backward`] walks the recorded nodes in
//! reverse insertion order, which is a valid reverse topological order
//! because inputs always precede their consumers.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpdError};
use crate::tensor::{same_shape, Elem, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    RmsNorm,
    LayerNorm,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Elem),
    AddRow(Var, Var),
    Gelu(Var),
    Silu(Var),
    SoftmaxCausal(Var),
    Norm { x: Var, weight: Var, bias: Option<Var>, xhat: Vec<Elem>, inv_std: Vec<Elem>, kind: NormKind },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    SliceVec { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<Elem> },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn gelu(x: Elem) -> Elem {
    const C: Elem = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: Elem) -> Elem {
    const C: Elem = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: Elem) -> Elem {
    1.0 / (1.0 + (-x).exp())
}

/// Causal softmax over the two trailing (square) dimensions.
///
/// Masked positions are set to `-inf` before the row max is subtracted, so
/// entries above the diagonal come out as exact zeros.
pub fn softmax_causal(scores: &Tensor) -> Result<Tensor> {
    let shape = scores.shape();
    if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
        return Err(SpdError::Dimension(format!(
            "causal softmax needs square trailing dims, got {shape:?}"
        )));
    }
    let t = shape[shape.len() - 1];
    let mut out = scores.data().to_vec();
    for row in out.chunks_mut(t.max(1)).enumerate().map(|(r, row)| (r % t.max(1), row)) {
        let (pos, row) = row;
        for v in row[pos + 1..].iter_mut() {
            *v = Elem::NEG_INFINITY;
        }
        let max = row.iter().copied().fold(Elem::NEG_INFINITY, Elem::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Row-wise normalization of a `[T, d]` matrix. Returns the output and the
/// normalized rows and inverse scales needed for backward.
fn normalize_rows(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    kind: NormKind,
    eps: Elem,
) -> Result<(Tensor, Vec<Elem>, Vec<Elem>)> {
    if eps <= 0.0 {
        return Err(SpdError::Parameter(format!("norm eps must be positive, got {eps}")));
    }
    let (rows, d) = x.dims2()?;
    if weight.shape() != [d] || bias.is_some_and(|b| b.shape() != [d]) {
        return Err(SpdError::Dimension(format!(
            "norm params do not match width {d}: weight {:?}",
            weight.shape()
        )));
    }
    let n = d as Elem;
    let mut xhat = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let row = x.row(r);
        let (mean, var) = match kind {
            NormKind::RmsNorm => (0.0, row.iter().map(|v| v * v).sum::<Elem>() / n),
            NormKind::LayerNorm => {
                let mean = row.iter().sum::<Elem>() / n;
                (mean, row.iter().map(|v| (v - mean) * (v - mean)).sum::<Elem>() / n)
            }
        };
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = h * weight.data()[j] + bias.map_or(0.0, |b| b.data()[j]);
        }
    }
    Ok((Tensor::new(vec![rows, d], out)?, xhat, inv_std))
}

/// Non-recording normalization, for callers outside a tape.
pub fn normalize(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    kind: NormKind,
    eps: Elem,
) -> Result<Tensor> {
    normalize_rows(x, weight, bias, kind, eps).map(|(out, _, _)| out)
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

    /// Records a leaf. Its gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(SpdError::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push("matmul", v, &[a, b], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        self.push("transpose", v, &[a], Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push("add", v, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        self.push("sub", v, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", v, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: Elem) -> Result<Var> {
        let v = self.value(a).scale(c);
        self.push("scale", v, &[a], Op::Scale(a, c))
    }

    /// Adds a `[d]` vector to every row of a `[T, d]` matrix.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, d) = self.value(x).dims2()?;
        let bias = self.value(b);
        if bias.shape() != [d] {
            return Err(SpdError::Dimension(format!(
                "row bias {:?} does not match width {d}",
                bias.shape()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        for r in 0..rows {
            for (o, &bv) in out[r * d..(r + 1) * d].iter_mut().zip(bias.data()) {
                *o += bv;
            }
        }
        let v = Tensor::new(vec![rows, d], out)?;
        self.push("add_row", v, &[x, b], Op::AddRow(x, b))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(gelu);
        self.push("gelu", v, &[a], Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push("silu", v, &[a], Op::Silu(a))
    }

    pub fn softmax_causal(&mut self, a: Var) -> Result<Var> {
        let v = softmax_causal(self.value(a))?;
        self.push("softmax_causal", v, &[a], Op::SoftmaxCausal(a))
    }

    pub fn normalize(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        kind: NormKind,
        eps: Elem,
    ) -> Result<Var> {
        let (v, xhat, inv_std) = normalize_rows(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            kind,
            eps,
        )?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push("normalize", v, &inputs, Op::Norm { x, weight, bias, xhat, inv_std, kind })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_cols(start, len)?;
        self.push("slice_cols", v, &[x], Op::SliceCols { x, start })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_rows(start, len)?;
        self.push("slice_rows", v, &[x], Op::SliceRows { x, start })
    }

    pub fn slice_vec(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_vec(start, len)?;
        self.push("slice_vec", v, &[x], Op::SliceVec { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let v = Tensor::concat_cols(&tensors)?;
        self.push("concat_cols", v, parts, Op::ConcatCols(parts.to_vec()))
    }

    /// Row lookup: `out[t] = table[ids[t]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.value(table).dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(SpdError::Data(format!("index {id} out of range for {rows} rows")));
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let v = Tensor::new(vec![ids.len(), d], out)?;
        self.push("gather_rows", v, &[table], Op::Gather { table, ids: ids.to_vec() })
    }

    /// Mean next-token negative log-likelihood of `targets` under row-wise
    /// softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.value(logits).dims2()?;
        if rows != targets.len() || rows == 0 {
            return Err(SpdError::Dimension(format!(
                "cross entropy over {rows} rows with {} targets",
                targets.len()
            )));
        }
        let mut probs = vec![0.0; rows * vocab];
        let mut nll = 0.0;
        for r in 0..rows {
            if targets[r] >= vocab {
                return Err(SpdError::Data(format!("target {} out of vocab {vocab}", targets[r])));
            }
            let row = self.value(logits).row(r);
            let max = row.iter().copied().fold(Elem::NEG_INFINITY, Elem::max);
            let mut sum = 0.0;
            for (p, &l) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (l - max).exp();
                sum += *p;
            }
            nll += sum.ln() - (row[targets[r]] - max);
            for p in probs[r * vocab..(r + 1) * vocab].iter_mut() {
                *p /= sum;
            }
        }
        let v = Tensor::scalar(nll / rows as Elem);
        self.push(
            "cross_entropy",
            v,
            &[logits],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b))?;
        let n = self.value(a).numel() as Elem;
        let s: Elem = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push("mse", Tensor::scalar(s / n), &[a, b], Op::Mse(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.numel() as Elem);
        self.push("mean", v, &[a], Op::Mean(a))
    }

    /// Reverse pass from a scalar `loss`, producing gradients for every node
    /// that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(SpdError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut seed = Tensor::full(self.value(loss).shape(), 1.0);
        seed.requires_grad = false;
        grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = g.matmul(&self.value(*b).transpose()?)?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let gb = self.value(*a).transpose()?.matmul(g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?)?,
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c))?,
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.requires_grad(*b) {
                    let (rows, d) = g.dims2()?;
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for (acc, &v) in gb.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![d], gb)?)?;
                }
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv * gelu_grad(x))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Silu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * (s + x * s * (1.0 - s))
                })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::SoftmaxCausal(a) => {
                let y = &node.value;
                let t = *y.shape().last().unwrap_or(&1);
                let mut ga = vec![0.0; y.numel()];
                for ((gr, yr), out) in
                    g.data().chunks(t).zip(y.data().chunks(t)).zip(ga.chunks_mut(t))
                {
                    let dot: Elem = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), ga)?)?;
            }
            Op::Norm { x, weight, bias, xhat, inv_std, kind } => {
                let (rows, d) = g.dims2()?;
                let w = self.value(*weight).data();
                let n = d as Elem;
                let mut gx = vec![0.0; rows * d];
                let mut gw = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    let gr = g.row(r);
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_g = 0.0;
                    let mut mean_gh = 0.0;
                    for j in 0..d {
                        let gh = gr[j] * w[j];
                        mean_g += gh;
                        mean_gh += gh * hr[j];
                        gw[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                    }
                    mean_g /= n;
                    mean_gh /= n;
                    if *kind == NormKind::RmsNorm {
                        mean_g = 0.0;
                    }
                    for j in 0..d {
                        gx[r * d + j] = (gr[j] * w[j] - mean_g - hr[j] * mean_gh) * inv_std[r];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![rows, d], gx)?)?;
                self.accumulate(grads, *weight, Tensor::new(vec![d], gw)?)?;
                if let Some(b) = bias {
                    self.accumulate(grads, *b, Tensor::new(vec![d], gb)?)?;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.value(*x).dims2()?;
                let (_, len) = g.dims2()?;
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, Tensor::new(vec![rows, cols], gx)?)?;
            }
            Op::SliceRows { x, start } => {
                let (rows, cols) = self.value(*x).dims2()?;
                let mut gx = vec![0.0; rows * cols];
                gx[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::new(vec![rows, cols], gx)?)?;
            }
            Op::SliceVec { x, start } => {
                let n = self.value(*x).numel();
                let mut gx = vec![0.0; n];
                gx[*start..start + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::new(vec![n], gx)?)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2()?;
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, g.slice_cols(offset, w)?)?;
                    }
                    offset += w;
                }
            }
            Op::Gather { table, ids } => {
                let (rows, d) = self.value(*table).dims2()?;
                let mut gt = vec![0.0; rows * d];
                for (t, &id) in ids.iter().enumerate() {
                    for (acc, &v) in gt[id * d..(id + 1) * d].iter_mut().zip(g.row(t)) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *table, Tensor::new(vec![rows, d], gt)?)?;
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (rows, vocab) = self.value(*logits).dims2()?;
                let scale = g.item() / rows as Elem;
                let mut gl: Vec<Elem> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * vocab + t] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(vec![rows, vocab], gl)?)?;
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).numel() as Elem;
                let c = 2.0 * g.item() / n;
                let diff = self.value(*a).zip_map(self.value(*b), |x, y| (x - y) * c)?;
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, diff.scale(-1.0))?;
                }
                self.accumulate(grads, *a, diff)?;
            }
            Op::Sum(a) => {
                let t = Tensor::full(self.value(*a).shape(), g.item());
                self.accumulate(grads, *a, t)?;
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as Elem;
                let t = Tensor::full(self.value(*a).shape(), g.item() / n);
                self.accumulate(grads, *a, t)?;
            }
        }
        Ok(())
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences on `n_coords` randomly chosen parameter coordinates.
///
/// `f` rebuilds the loss on a fresh tape from the given parameter leaves.
/// Returns the maximum of `|analytic - fd| / (|analytic| + |fd| + 1e-12)`.
pub fn grad_check<F>(f: F, params: &[Tensor], step: Elem, n_coords: usize, seed: u64) -> Result<Elem>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<Elem> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();

    let total: usize = params.iter().map(Tensor::numel).sum();
    let picks = sample(&mut ChaCha8Rng::seed_from_u64(seed), total, n_coords.min(total));
    let mut worst: Elem = 0.0;
    let mut perturbed = params.to_vec();
    for flat in picks.iter() {
        let (mut p, mut i) = (0, flat);
        while i >= params[p].numel() {
            i -= params[p].numel();
            p += 1;
        }
        let orig = params[p].data()[i];
        perturbed[p].data_mut()[i] = orig + step;
        let up = eval(&perturbed)?;
        perturbed[p].data_mut()[i] = orig - step;
        let down = eval(&perturbed)?;
        perturbed[p].data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let a = analytic[p].data()[i];
        worst = worst.max((a - fd).abs() / (a.abs() + fd.abs() + 1e-12));
    }
    Ok(worst)
}
