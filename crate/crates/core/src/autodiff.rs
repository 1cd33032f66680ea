//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of a forward pass as a node. Nodes are
//! appended in evaluation order, so walking the node list backwards from the
//! loss visits every node after all of its consumers. Parameters are leaves
//! registered with a stable path such as `theta_R.layer0.W_down_for`;
//! constants (inputs, frozen weights) are leaves without a path and never
//! receive a gradient entry.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{
    gelu_derivative_scalar, matmul_raw, sigmoid_scalar, topk_keep, transpose_raw,
    Tensor,
};

/// Named parameter tensors, ordered by path.
pub type ParamStore = BTreeMap<String, Tensor>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    /// Matrix plus a row vector broadcast over every row.
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    /// Tensor times one element of another node.
    ScaleBy { x: usize, s: usize, index: usize },
    Gelu(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    MeanRows(usize),
    Sum(usize),
    /// Elementwise mask held constant under differentiation.
    Mask { x: usize, keep: Vec<bool> },
    Gather { x: usize, index: Vec<usize> },
    WeightedBce { logits: usize, target: Tensor, weight: Tensor },
    WeightedIou { logits: usize, target: Tensor, weight: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<String>,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op_name(&op)));
        }
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a trainable parameter. Registering the same path twice is
    /// an error: shared weights must reuse the returned handle.
    pub fn param(&mut self, path: impl Into<String>, value: Tensor) -> Result<Var> {
        let path = path.into();
        if self.nodes.iter().any(|n| n.param.as_deref() == Some(path.as_str())) {
            return Err(Error::invalid(format!("parameter `{path}` registered twice")));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: Some(path),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.val(a), self.val(b))?;
        self.push(out, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        let (m, n) = x.require_matrix("transpose")?;
        let out = Tensor::from_raw(vec![n, m], transpose_raw(x.data(), m, n));
        self.push(out, Op::Transpose(a.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.val(a), self.val(b));
        y.require_shape("add", x.shape())?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::from_raw(x.shape().to_vec(), data);
        self.push(out, Op::Add(a.0, b.0))
    }

    /// `a[i, j] + bias[j]` for a matrix `a` and a bias of `cols(a)` elements.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.val(a), self.val(bias));
        let (m, n) = x.require_matrix("add_row")?;
        if b.len() != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                expected: vec![n],
                got: b.shape().to_vec(),
            });
        }
        let mut data = x.data().to_vec();
        for i in 0..m {
            for (o, bv) in data[i * n..(i + 1) * n].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.push(Tensor::from_raw(vec![m, n], data), Op::AddRow(a.0, bias.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.val(a), self.val(b));
        y.require_shape("mul", x.shape())?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_raw(x.shape().to_vec(), data);
        self.push(out, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.val(a);
        let out = Tensor::from_raw(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect());
        self.push(out, Op::Scale(a.0, c))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.val(a);
        let out = Tensor::from_raw(x.shape().to_vec(), x.data().iter().map(|v| v + c).collect());
        self.push(out, Op::Offset(a.0))
    }

    /// Multiplies every element of `x` by element `index` of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var, index: usize) -> Result<Var> {
        let factor = *self.val(s).data().get(index).ok_or_else(|| {
            Error::invalid(format!("scale_by index {index} out of range"))
        })?;
        let t = self.val(x);
        let out = Tensor::from_raw(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect());
        self.push(out, Op::ScaleBy { x: x.0, s: s.0, index })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = crate::tensor::gelu(self.val(a));
        self.push(out, Op::Gelu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = crate::tensor::sigmoid(self.val(a));
        self.push(out, Op::Sigmoid(a.0))
    }

    /// Softmax along the last axis of each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        let (m, n) = x.require_matrix("softmax_rows")?;
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(Tensor::from_raw(vec![m, n], data), Op::SoftmaxRows(a.0))
    }

    /// Mean over rows: `[m x n] -> [1 x n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.val(a);
        let (m, n) = x.require_matrix("mean_rows")?;
        let mut data = vec![0.0; n];
        for row in x.data().chunks(n) {
            for (o, v) in data.iter_mut().zip(row) {
                *o += v;
            }
        }
        data.iter_mut().for_each(|v| *v /= m as f64);
        self.push(Tensor::from_raw(vec![1, n], data), Op::MeanRows(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.val(a).sum());
        self.push(out, Op::Sum(a.0))
    }

    /// Zeroes every element whose `keep` flag is false. Gradient flows only
    /// through kept elements.
    pub fn mask(&mut self, a: Var, keep: Vec<bool>) -> Result<Var> {
        let x = self.val(a);
        if keep.len() != x.len() {
            return Err(Error::ShapeMismatch {
                op: "mask",
                expected: x.shape().to_vec(),
                got: vec![keep.len()],
            });
        }
        let data = x
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { 0.0 })
            .collect();
        let out = Tensor::from_raw(x.shape().to_vec(), data);
        self.push(out, Op::Mask { x: a.0, keep })
    }

    /// Per-row TopK masking of a matrix: each row keeps `k` channels (the
    /// largest or the smallest) and zeroes the rest. The selection is a
    /// constant under differentiation.
    pub fn topk_mask(&mut self, a: Var, k: usize, largest: bool) -> Result<Var> {
        let x = self.val(a);
        let (_, n) = x.require_matrix("topk_mask")?;
        if k > n {
            return Err(Error::invalid(format!("topk k={k} exceeds {n} channels")));
        }
        let keep: Vec<bool> = x
            .data()
            .chunks(n)
            .flat_map(|row| topk_keep(row, k, largest))
            .collect();
        self.mask(a, keep)
    }

    /// `out[i] = a[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let x = self.val(a);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::InvalidShape {
                shape,
                len: index.len(),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(Error::invalid(format!("gather index {bad} out of range")));
        }
        let data = index.iter().map(|&i| x.data()[i]).collect();
        self.push(Tensor::from_raw(shape, data), Op::Gather { x: a.0, index })
    }

    /// Weighted binary cross-entropy on logits:
    /// `sum(w * bce(sigmoid(logits), target)) / sum(w)`.
    pub fn weighted_bce(&mut self, logits: Var, target: &Tensor, weight: &Tensor) -> Result<Var> {
        let p = self.val(logits);
        target.require_shape("weighted_bce", p.shape())?;
        weight.require_shape("weighted_bce", p.shape())?;
        let loss = weighted_bce_value(p.data(), target.data(), weight.data());
        self.push(
            Tensor::scalar(loss),
            Op::WeightedBce {
                logits: logits.0,
                target: target.clone(),
                weight: weight.clone(),
            },
        )
    }

    /// Weighted soft IoU loss on logits:
    /// `1 - (sum(w p g) + 1) / (sum(w (p + g - p g)) + 1)` with `p = sigmoid(logits)`.
    pub fn weighted_iou(&mut self, logits: Var, target: &Tensor, weight: &Tensor) -> Result<Var> {
        let p = self.val(logits);
        target.require_shape("weighted_iou", p.shape())?;
        weight.require_shape("weighted_iou", p.shape())?;
        let (inter, union) = iou_terms(p.data(), target.data(), weight.data());
        self.push(
            Tensor::scalar(1.0 - inter / union),
            Op::WeightedIou {
                logits: logits.0,
                target: target.clone(),
                weight: weight.clone(),
            },
        )
    }

    /// Gradients of the scalar `loss` with respect to every registered
    /// parameter. Parameters the loss does not depend on get a zero entry.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let root = &self.nodes[loss.0].value;
        if !root.is_scalar() {
            return Err(Error::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if node.param.is_some() {
                grads[id] = Some(upstream);
                continue;
            }
            self.propagate(id, &upstream, &mut grads);
        }

        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(path) = &node.param {
                let data = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                out.insert(path.clone(), Tensor::from_raw(node.value.shape().to_vec(), data));
            }
        }
        let map = GradientMap(out);
        if map.0.values().any(|t| !t.all_finite()) {
            return Err(Error::NonFinite("backward"));
        }
        Ok(map)
    }

    fn propagate(&self, id: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                let n = self.nodes[*b].value.cols();
                let bt = transpose_raw(self.nodes[*b].value.data(), k, n);
                accumulate(grads, *a, matmul_raw(up, &bt, m, n, k));
                let at = transpose_raw(self.nodes[*a].value.data(), m, k);
                accumulate(grads, *b, matmul_raw(&at, up, k, m, n));
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                accumulate(grads, *a, transpose_raw(up, m, n));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, up.to_vec());
                accumulate(grads, *b, up.to_vec());
            }
            Op::AddRow(a, bias) => {
                let n = node.value.cols();
                let mut gb = vec![0.0; n];
                for row in up.chunks(n) {
                    for (g, u) in gb.iter_mut().zip(row) {
                        *g += u;
                    }
                }
                accumulate(grads, *a, up.to_vec());
                accumulate(grads, *bias, gb);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                accumulate(grads, *a, up.iter().zip(y).map(|(u, v)| u * v).collect());
                accumulate(grads, *b, up.iter().zip(x).map(|(u, v)| u * v).collect());
            }
            Op::Scale(a, c) => accumulate(grads, *a, up.iter().map(|u| u * c).collect()),
            Op::Offset(a) => accumulate(grads, *a, up.to_vec()),
            Op::ScaleBy { x, s, index } => {
                let sv = &self.nodes[*s].value;
                let factor = sv.data()[*index];
                let xv = self.nodes[*x].value.data();
                accumulate(grads, *x, up.iter().map(|u| u * factor).collect());
                let mut gs = vec![0.0; sv.len()];
                gs[*index] = up.iter().zip(xv).map(|(u, v)| u * v).sum();
                accumulate(grads, *s, gs);
            }
            Op::Gelu(a) => {
                let z = self.nodes[*a].value.data();
                let g = up
                    .iter()
                    .zip(z)
                    .map(|(u, &z)| u * gelu_derivative_scalar(z))
                    .collect();
                accumulate(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                accumulate(grads, *a, up.iter().zip(y).map(|(u, y)| u * y * (1.0 - y)).collect());
            }
            Op::SoftmaxRows(a) => {
                let n = node.value.cols();
                let mut g = vec![0.0; up.len()];
                for ((gr, ur), yr) in g.chunks_mut(n).zip(up.chunks(n)).zip(node.value.data().chunks(n)) {
                    let dot: f64 = ur.iter().zip(yr).map(|(u, y)| u * y).sum();
                    for ((gi, ui), yi) in gr.iter_mut().zip(ur).zip(yr) {
                        *gi = yi * (ui - dot);
                    }
                }
                accumulate(grads, *a, g);
            }
            Op::MeanRows(a) => {
                let src = &self.nodes[*a].value;
                let m = src.rows() as f64;
                let g = (0..src.len()).map(|i| up[i % src.cols()] / m).collect();
                accumulate(grads, *a, g);
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.len();
                accumulate(grads, *a, vec![up[0]; n]);
            }
            Op::Mask { x, keep } => {
                let g = up
                    .iter()
                    .zip(keep)
                    .map(|(&u, &k)| if k { u } else { 0.0 })
                    .collect();
                accumulate(grads, *x, g);
            }
            Op::Gather { x, index } => {
                let mut g = vec![0.0; self.nodes[*x].value.len()];
                for (u, &i) in up.iter().zip(index) {
                    g[i] += u;
                }
                accumulate(grads, *x, g);
            }
            Op::WeightedBce {
                logits,
                target,
                weight,
            } => {
                let p = self.nodes[*logits].value.data();
                let total: f64 = weight.sum();
                let g = p
                    .iter()
                    .zip(target.data())
                    .zip(weight.data())
                    .map(|((&x, &t), &w)| up[0] * w * (sigmoid_scalar(x) - t) / total)
                    .collect();
                accumulate(grads, *logits, g);
            }
            Op::WeightedIou {
                logits,
                target,
                weight,
            } => {
                let p = self.nodes[*logits].value.data();
                let (inter, union) = iou_terms(p, target.data(), weight.data());
                let u2 = union * union;
                let g = p
                    .iter()
                    .zip(target.data())
                    .zip(weight.data())
                    .map(|((&x, &t), &w)| {
                        let s = sigmoid_scalar(x);
                        let d_inter = w * t;
                        let d_union = w * (1.0 - t);
                        let d_loss_dp = -(d_inter * union - inter * d_union) / u2;
                        up[0] * d_loss_dp * s * (1.0 - s)
                    })
                    .collect();
                accumulate(grads, *logits, g);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut grads[id] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(g),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Offset(..) => "offset",
        Op::ScaleBy { .. } => "scale_by",
        Op::Gelu(_) => "gelu",
        Op::Sigmoid(_) => "sigmoid",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::MeanRows(_) => "mean_rows",
        Op::Sum(_) => "sum",
        Op::Mask { .. } => "mask",
        Op::Gather { .. } => "gather",
        Op::WeightedBce { .. } => "weighted_bce",
        Op::WeightedIou { .. } => "weighted_iou",
    }
}

/// Per-pixel BCE in logit form: `max(x, 0) - x t + ln(1 + exp(-|x|))`.
pub(crate) fn bce_with_logit(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

fn weighted_bce_value(logits: &[f64], target: &[f64], weight: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&x, &t), &w) in logits.iter().zip(target).zip(weight) {
        num += w * bce_with_logit(x, t);
        den += w;
    }
    num / den
}

/// Smoothed weighted intersection and union, both offset by 1.
fn iou_terms(logits: &[f64], target: &[f64], weight: &[f64]) -> (f64, f64) {
    let mut inter = 1.0;
    let mut union = 1.0;
    for ((&x, &t), &w) in logits.iter().zip(target).zip(weight) {
        let p = sigmoid_scalar(x);
        inter += w * p * t;
        union += w * (p + t - p * t);
    }
    (inter, union)
}

/// Gradient tensors keyed by parameter path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap(BTreeMap<String, Tensor>);

impl GradientMap {
    pub fn new(entries: BTreeMap<String, Tensor>) -> Self {
        GradientMap(entries)
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.0.get(path)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    /// Concatenation, in path order, of every gradient whose path starts with
    /// `prefix` followed by a `.`.
    pub fn flatten_group(&self, prefix: &str) -> Vec<f64> {
        self.0
            .iter()
            .filter(|(path, _)| in_group(path, prefix))
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub(crate) fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.0.get_mut(path)
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.0
    }
}

pub(crate) fn in_group(path: &str, prefix: &str) -> bool {
    path.len() > prefix.len() && path.starts_with(prefix) && path.as_bytes()[prefix.len()] == b'.'
}

/// Central finite-difference estimate of the gradient of `f` at `params`:
/// `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)` for every coordinate.
pub fn finite_diff_gradient<F>(mut f: F, params: &ParamStore, eps: f64) -> Result<GradientMap>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let mut probe = params.clone();
    let mut out = BTreeMap::new();
    for (path, tensor) in params {
        let mut grad = vec![0.0; tensor.len()];
        for (i, g) in grad.iter_mut().enumerate() {
            let base = tensor.data()[i];
            probe.get_mut(path).expect("probe mirrors params").data_mut()[i] = base + eps;
            let plus = f(&probe)?;
            probe.get_mut(path).expect("probe mirrors params").data_mut()[i] = base - eps;
            let minus = f(&probe)?;
            probe.get_mut(path).expect("probe mirrors params").data_mut()[i] = base;
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(Error::NonFinite("finite_diff_gradient"));
            }
            *g = (plus - minus) / (2.0 * eps);
        }
        out.insert(path.clone(), Tensor::from_raw(tensor.shape().to_vec(), grad));
    }
    Ok(GradientMap(out))
}
