//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied; [`Graph::backward`]
//! walks the tape in reverse and returns gradients aligned with that store.

use crate::error::{Result, TadaError};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    MaskedSoftmax(Var),
    Mean(Var, usize),
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    Permute3(Var, [usize; 3]),
    Concat(Vec<Var>, usize),
    GatherRows(Var, Vec<usize>),
    BroadcastRows(Var),
    CrossEntropy(Var, Vec<usize>),
    LayerNormRows(Var, Vec<f64>),
    WindowGates(Box<GateSpec>),
    WindowedAttention {
        alpha: Var,
        gates: Var,
        values: Var,
        mask: Vec<bool>,
    },
}

#[derive(Debug)]
struct GateSpec {
    radius: Var,
    times: Vec<f64>,
    anchors: Vec<f64>,
    tau: f64,
    hard: bool,
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Window shape used by [`Graph::window_gates`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateMode {
    /// Indicator of `t in [max(0, a - r), min(horizon, a + r)]`.
    Hard,
    /// `sigmoid((r - |t - a|) / tau)`, zeroed outside `[0, horizon]`.
    Soft { tau: f64 },
}

/// Recording of one forward pass.
pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus for positive `y`.
pub fn inverse_softplus(y: f64) -> f64 {
    // ln(e^y - 1), stable for large y
    y + (-(-y).exp_m1()).ln()
}

pub fn softplus_value(x: f64) -> f64 {
    softplus(x)
}

/// Membership of `t` in the clipped window `[max(0, a - r), min(horizon, a + r)]`.
pub fn in_window(t: f64, anchor: f64, radius: f64, horizon: f64) -> bool {
    t >= (anchor - radius).max(0.0) && t <= (anchor + radius).min(horizon)
}

pub fn gate_value(t: f64, anchor: f64, radius: f64, horizon: f64, mode: GateMode) -> f64 {
    match mode {
        GateMode::Hard => f64::from(u8::from(in_window(t, anchor, radius, horizon))),
        GateMode::Soft { tau } => {
            if t < 0.0 || t > horizon {
                0.0
            } else {
                sigmoid((radius - (t - anchor).abs()) / tau)
            }
        }
    }
}

/// Weights of one gated softmax row: `w_j ∝ gate_j * exp(score_j)` over entries
/// with `mask_j && gate_j > 0`. Returns the weights and the shifted normalizer
/// (0 when no entry survives, in which case all weights are 0).
pub fn gated_softmax_row(
    scores: impl Iterator<Item = f64> + Clone,
    gates: impl Iterator<Item = f64> + Clone,
    mask: impl Iterator<Item = bool> + Clone,
    out: &mut [f64],
) -> (f64, f64) {
    let mut mx = f64::NEG_INFINITY;
    for ((s, g), m) in scores.clone().zip(gates.clone()).zip(mask.clone()) {
        if m && g > 0.0 && s > mx {
            mx = s;
        }
    }
    if mx == f64::NEG_INFINITY {
        out.iter_mut().for_each(|w| *w = 0.0);
        return (0.0, mx);
    }
    let mut total = 0.0;
    for (((s, g), m), w) in scores.zip(gates).zip(mask).zip(out.iter_mut()) {
        *w = if m && g > 0.0 {
            g * (s - mx).exp()
        } else {
            0.0
        };
        total += *w;
    }
    if total > 0.0 {
        out.iter_mut().for_each(|w| *w /= total);
    }
    (total, mx)
}

/// Row-wise masked softmax on plain slices; all-false rows give zeros.
pub fn masked_softmax(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if scores.len() != mask.len() {
        return Err(TadaError::dim(
            "masked_softmax",
            format!("scores len {} vs mask len {}", scores.len(), mask.len()),
        ));
    }
    let mut out = vec![0.0; scores.len()];
    gated_softmax_row(
        scores.iter().copied(),
        std::iter::repeat(1.0),
        mask.iter().copied(),
        &mut out,
    );
    Ok(out)
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
        }
    }

    /// A graph with no parameters; only constants and their functions.
    pub fn detached() -> Graph<'static> {
        Graph {
            store: None,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.expect("param node without store").get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, &[])
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(self.store.is_some(), "param() on a detached graph");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(TadaError::dim(
                "matmul",
                format!("inner axes differ: lhs axis 1 = {k}, rhs axis 0 = {k2}"),
            ));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            n,
            k,
            m,
        );
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TadaError::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `a (r×c) + b (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if self.value(b).len() != c {
            return Err(TadaError::dim(
                "add_row",
                format!("lhs axis 1 = {c}, bias has {} entries", self.value(b).len()),
            ));
        }
        let bias = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..r {
            for (x, bv) in data[i * c..(i + 1) * c].iter_mut().zip(bias) {
                *x += bv;
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        Ok(self.push(t, Op::AddRow(a, b), &[a, b]))
    }

    /// `a (r×c) * b (r×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if self.value(b).len() != r {
            return Err(TadaError::dim(
                "mul_col",
                format!(
                    "lhs axis 0 = {r}, column has {} entries",
                    self.value(b).len()
                ),
            ));
        }
        let col = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..r {
            data[i * c..(i + 1) * c]
                .iter_mut()
                .for_each(|x| *x *= col[i]);
        }
        let t = Tensor::new(vec![r, c], data)?;
        Ok(self.push(t, Op::MulCol(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(softplus);
        self.push(t, Op::Softplus(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    /// Softmax along the last axis of a matrix, restricted to `mask` entries.
    /// Rows with no true entries produce zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if mask.len() != r * c {
            return Err(TadaError::dim(
                "masked_softmax",
                format!("scores are {r}×{c}, mask has {} entries", mask.len()),
            ));
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            gated_softmax_row(
                x[i * c..(i + 1) * c].iter().copied(),
                std::iter::repeat(1.0),
                mask[i * c..(i + 1) * c].iter().copied(),
                &mut out[i * c..(i + 1) * c],
            );
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::MaskedSoftmax(a), &[a]))
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TadaError::dim(
                "mean_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, n, inner) = outer_inner(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut new_shape = shape;
        new_shape[axis] = 1;
        let t = Tensor::new(new_shape, out)?;
        Ok(self.push(t, Op::Mean(a, axis), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    /// Reorders the axes of a rank-3 tensor: output axis `k` is input axis `perm[k]`.
    pub fn permute3(&mut self, a: Var, perm: [usize; 3]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut sorted = perm;
        sorted.sort_unstable();
        if shape.len() != 3 || sorted != [0, 1, 2] {
            return Err(TadaError::dim(
                "permute3",
                format!("cannot permute {shape:?} by {perm:?}"),
            ));
        }
        let t = permute3_tensor(self.value(a), perm);
        Ok(self.push(t, Op::Permute3(a, perm), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| TadaError::dim("concat", "no inputs"))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(TadaError::dim(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !ok {
                return Err(TadaError::dim(
                    "concat",
                    format!("shape {s:?} incompatible with {first:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = outer_inner(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Selects rows of a matrix by index (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TadaError::dim(
                "gather_rows",
                format!("index {bad} out of range for axis 0 of extent {r}"),
            ));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(src.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(t, Op::GatherRows(a, idx), &[a]))
    }

    /// Repeats a `1×c` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if r != 1 {
            return Err(TadaError::dim(
                "broadcast_rows",
                format!("expected a single row, got axis 0 = {r}"),
            ));
        }
        let row = self.value(a).data().to_vec();
        let data = row.repeat(n);
        let t = Tensor::new(vec![n, c], data)?;
        Ok(self.push(t, Op::BroadcastRows(a), &[a]))
    }

    /// Mean cross-entropy of `logits (n×classes)` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let (n, c) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(TadaError::dim(
                "cross_entropy",
                format!("logits axis 0 = {n}, {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TadaError::Data(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let x = self.value(logits);
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = x.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[l];
        }
        let t = Tensor::scalar(total / n as f64);
        Ok(self.push(t, Op::CrossEntropy(logits, labels), &[logits]))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + 1e-5)` without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + 1e-5).sqrt();
            inv_std[i] = is;
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::LayerNormRows(a, inv_std), &[a]))
    }

    /// Per-channel window gates, shape `C × L × T`, for radii `radius` (`C` entries),
    /// `anchors` (`L`) and observation `times` (`T`).
    pub fn window_gates(
        &mut self,
        radius: Var,
        times: &[f64],
        anchors: &[f64],
        horizon: f64,
        mode: GateMode,
    ) -> Result<Var> {
        let c = self.value(radius).len();
        let (l, t) = (anchors.len(), times.len());
        if l == 0 || t == 0 {
            return Err(TadaError::dim("window_gates", "empty anchors or times"));
        }
        let r = self.value(radius).data();
        let mut data = Vec::with_capacity(c * l * t);
        for &rc in r {
            for &a in anchors {
                for &tj in times {
                    data.push(gate_value(tj, a, rc, horizon, mode));
                }
            }
        }
        let out = Tensor::new(vec![c, l, t], data)?;
        let (hard, tau) = match mode {
            GateMode::Hard => (true, 0.0),
            GateMode::Soft { tau } => (false, tau),
        };
        let spec = GateSpec {
            radius,
            times: times.to_vec(),
            anchors: anchors.to_vec(),
            tau,
            hard,
        };
        Ok(self.push(out, Op::WindowGates(Box::new(spec)), &[radius]))
    }

    /// Local attention: for each query `i` and channel `c`,
    /// `out[i][c] = Σ_j w_ijc · values[j][c]` with
    /// `w_ijc ∝ gates[c][i][j] · mask[j][c] · exp(alpha[i][j])`; empty windows give 0.
    pub fn windowed_attention(
        &mut self,
        alpha: Var,
        gates: Var,
        values: Var,
        mask: Vec<bool>,
    ) -> Result<Var> {
        let (l, t) = self.value(alpha).dims2()?;
        let (t2, c) = self.value(values).dims2()?;
        let gs = self.shape(gates).to_vec();
        if t != t2 || gs != [c, l, t] || mask.len() != t * c {
            return Err(TadaError::dim(
                "windowed_attention",
                format!(
                    "alpha {l}×{t}, values {t2}×{c}, gates {gs:?}, mask {} entries",
                    mask.len()
                ),
            ));
        }
        let out = {
            let a = self.value(alpha).data();
            let g = self.value(gates).data();
            let v = self.value(values).data();
            let mut out = vec![0.0; l * c];
            let mut w = vec![0.0; t];
            for ch in 0..c {
                for i in 0..l {
                    gated_softmax_row(
                        a[i * t..(i + 1) * t].iter().copied(),
                        g[(ch * l + i) * t..(ch * l + i + 1) * t].iter().copied(),
                        (0..t).map(|j| mask[j * c + ch]),
                        &mut w,
                    );
                    out[i * c + ch] = (0..t).map(|j| w[j] * v[j * c + ch]).sum();
                }
            }
            Tensor::new(vec![l, c], out)?
        };
        Ok(self.push(
            out,
            Op::WindowedAttention {
                alpha,
                gates,
                values,
                mask,
            },
            &[alpha, gates, values],
        ))
    }

    /// Convenience: `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a single-element `loss`; returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TadaError::dim(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut param_grads = match self.store {
            Some(s) => Gradients::zeros_like(s),
            None => Gradients::zeros_like(&ParamStore::new()),
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(idx, &node.op, g, &mut grads, &mut param_grads)?;
        }
        Ok(param_grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(
        &self,
        idx: usize,
        op: &Op,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        param_grads: &mut Gradients,
    ) -> Result<()> {
        let out = self.value(Var(idx));
        match op {
            Op::Constant => {}
            Op::Param(id) => param_grads.get_mut(*id).add_assign(&g),
            Op::MatMul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (n, k) = ta.dims2()?;
                let (_, m) = tb.dims2()?;
                if self.nodes[a.0].needs_grad {
                    // dA = G · Bᵀ
                    let bt = tb.transpose2()?;
                    let mut da = vec![0.0; n * k];
                    matmul_into(g.data(), bt.data(), &mut da, n, m, k);
                    self.accumulate(grads, *a, Tensor::new(vec![n, k], da)?);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · G
                    let at = ta.transpose2()?;
                    let mut db = vec![0.0; k * m];
                    matmul_into(at.data(), g.data(), &mut db, k, n, m);
                    self.accumulate(grads, *b, Tensor::new(vec![k, m], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.map(|x| -x));
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let ga = zip(&g, self.value(*b), |x, y| x * y);
                let gb = zip(&g, self.value(*a), |x, y| x * y);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddRow(a, b) => {
                let (r, c) = g.dims2()?;
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    for (acc, v) in gb.iter_mut().zip(g.row(i)) {
                        *acc += v;
                    }
                }
                let shape = self.shape(*b).to_vec();
                self.accumulate(grads, *b, Tensor::new(shape, gb)?);
                self.accumulate(grads, *a, g);
            }
            Op::MulCol(a, b) => {
                let (r, c) = g.dims2()?;
                let ta = self.value(*a);
                let col = self.value(*b).data();
                let mut gb = vec![0.0; r];
                let mut ga = g.data().to_vec();
                for i in 0..r {
                    gb[i] = g.row(i).iter().zip(ta.row(i)).map(|(x, y)| x * y).sum();
                    ga[i * c..(i + 1) * c].iter_mut().for_each(|x| *x *= col[i]);
                }
                let shape = self.shape(*b).to_vec();
                self.accumulate(grads, *b, Tensor::new(shape, gb)?);
                self.accumulate(grads, *a, Tensor::new(vec![r, c], ga)?);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::Relu(a) => {
                let ga = zip(&g, self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = zip(&g, out, |x, s| x * s * (1.0 - s));
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = zip(&g, self.value(*a), |x, y| x * sigmoid(y));
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = zip(&g, out, |x, e| x * e);
                self.accumulate(grads, *a, ga);
            }
            Op::MaskedSoftmax(a) => {
                let (r, c) = out.dims2()?;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let w = out.row(i);
                    let gi = g.row(i);
                    let dot: f64 = w.iter().zip(gi).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        ga[i * c + j] = w[j] * (gi[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![r, c], ga)?);
            }
            Op::Mean(a, axis) => {
                let shape = self.shape(*a).to_vec();
                let (outer, n, inner) = outer_inner(&shape, *axis);
                let gd = g.data();
                let mut ga = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            ga[(o * n + k) * inner + i] = gd[o * inner + i] / n as f64;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(shape, ga)?);
            }
            Op::Sum(a) => {
                let shape = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(shape, g.item()));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.reshaped(&shape)?);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose2()?),
            Op::Permute3(a, perm) => {
                let mut inv = [0usize; 3];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                self.accumulate(grads, *a, permute3_tensor(&g, inv));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = outer_inner(g.shape(), *axis);
                let gd = g.data();
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let width = shape[*axis];
                    if self.nodes[p.0].needs_grad {
                        let mut gp = Vec::with_capacity(outer * width * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&gd[start..start + width * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(shape, gp)?);
                    }
                    offset += width;
                }
            }
            Op::GatherRows(a, idx_list) => {
                let shape = self.shape(*a).to_vec();
                let c = shape[1];
                let mut ga = Tensor::zeros(&shape);
                let gdata = ga.data_mut();
                for (k, &i) in idx_list.iter().enumerate() {
                    for (acc, v) in gdata[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::BroadcastRows(a) => {
                let (n, c) = g.dims2()?;
                let mut ga = vec![0.0; c];
                for i in 0..n {
                    for (acc, v) in ga.iter_mut().zip(g.row(i)) {
                        *acc += v;
                    }
                }
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::new(shape, ga)?);
            }
            Op::CrossEntropy(logits, labels) => {
                let x = self.value(*logits);
                let (n, c) = x.dims2()?;
                let scale = g.item() / n as f64;
                let mut gl = vec![0.0; n * c];
                for (i, &l) in labels.iter().enumerate() {
                    let row = x.row(i);
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - mx).exp() / z;
                        let onehot = if j == l { 1.0 } else { 0.0 };
                        gl[i * c + j] = scale * (p - onehot);
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(vec![n, c], gl)?);
            }
            Op::LayerNormRows(a, inv_std) => {
                let (r, c) = out.dims2()?;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let y = out.row(i);
                    let gi = g.row(i);
                    let mean_g = gi.iter().sum::<f64>() / c as f64;
                    let mean_gy = gi.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        ga[i * c + j] = inv_std[i] * (gi[j] - mean_g - y[j] * mean_gy);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![r, c], ga)?);
            }
            Op::WindowGates(spec) => {
                if spec.hard {
                    return Ok(());
                }
                let radius = self.value(spec.radius);
                let (l, t) = (spec.anchors.len(), spec.times.len());
                let gd = g.data();
                let od = out.data();
                let mut gr = vec![0.0; radius.len()];
                for (ch, acc) in gr.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for k in ch * l * t..(ch + 1) * l * t {
                        let gate = od[k];
                        if gate > 0.0 {
                            s += gd[k] * gate * (1.0 - gate) / spec.tau;
                        }
                    }
                    *acc = s;
                }
                let shape = radius.shape().to_vec();
                self.accumulate(grads, spec.radius, Tensor::new(shape, gr)?);
            }
            Op::WindowedAttention {
                alpha,
                gates,
                values,
                mask,
            } => {
                let ta = self.value(*alpha);
                let tg = self.value(*gates);
                let tv = self.value(*values);
                let (l, t) = ta.dims2()?;
                let (_, c) = tv.dims2()?;
                let (a, gt, v) = (ta.data(), tg.data(), tv.data());
                let mut ga = vec![0.0; l * t];
                let mut gg = vec![0.0; c * l * t];
                let mut gv = vec![0.0; t * c];
                let mut w = vec![0.0; t];
                for ch in 0..c {
                    for i in 0..l {
                        let gout = g.data()[i * c + ch];
                        if gout == 0.0 {
                            continue;
                        }
                        let row = (ch * l + i) * t;
                        let (total, mx) = gated_softmax_row(
                            a[i * t..(i + 1) * t].iter().copied(),
                            gt[row..row + t].iter().copied(),
                            (0..t).map(|j| mask[j * c + ch]),
                            &mut w,
                        );
                        if total <= 0.0 {
                            continue;
                        }
                        let o = out.data()[i * c + ch];
                        for j in 0..t {
                            if !mask[j * c + ch] || gt[row + j] <= 0.0 {
                                continue;
                            }
                            let vj = v[j * c + ch];
                            gv[j * c + ch] += gout * w[j];
                            ga[i * t + j] += gout * w[j] * (vj - o);
                            gg[row + j] += gout * (a[i * t + j] - mx).exp() * (vj - o) / total;
                        }
                    }
                }
                self.accumulate(grads, *alpha, Tensor::new(vec![l, t], ga)?);
                self.accumulate(grads, *gates, Tensor::new(vec![c, l, t], gg)?);
                self.accumulate(grads, *values, Tensor::new(vec![t, c], gv)?);
            }
        }
        Ok(())
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn permute3_tensor(t: &Tensor, perm: [usize; 3]) -> Tensor {
    let s = t.shape();
    let new_shape = [s[perm[0]], s[perm[1]], s[perm[2]]];
    let strides = [s[1] * s[2], s[2], 1];
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for i in 0..new_shape[0] {
        for j in 0..new_shape[1] {
            for k in 0..new_shape[2] {
                let off = i * strides[perm[0]] + j * strides[perm[1]] + k * strides[perm[2]];
                out.push(src[off]);
            }
        }
    }
    Tensor::new(new_shape.to_vec(), out).expect("permuted shape")
}

/// Operations with analytic gradients offered by [`Graph`].
pub fn required_ops() -> &'static [&'static str] {
    &[
        "matmul",
        "add",
        "sub",
        "mul",
        "add_row",
        "mul_col",
        "scale",
        "add_scalar",
        "concat",
        "relu",
        "sigmoid",
        "softplus",
        "exp",
        "masked_softmax",
        "mean_axis",
        "sum",
        "reshape",
        "transpose",
        "permute3",
        "broadcast_rows",
        "gather_rows",
        "cross_entropy",
        "layer_norm_rows",
        "window_gates",
        "windowed_attention",
    ]
}
