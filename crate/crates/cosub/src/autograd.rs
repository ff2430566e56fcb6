//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of a forward pass in creation order;
//! [`Tape::backward`] replays it in reverse. The tape is rebuilt every step —
//! drop patterns change per batch, so the graph topology is data-dependent.
//!
//! Determinism: node ids are assigned in creation order and the backward pass
//! accumulates gradients in fixed (reverse-tape) order, so the same inputs
//! produce bitwise-identical values in single-threaded use.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Recorded operation, holding the input handles its backward rule needs.
#[derive(Debug)]
enum Op<E> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Matmul(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    MeanAll(Var),
    SumAll(Var),
    Broadcast(Var),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    IndexSelect { x: Var, rows: Vec<usize> },
    IndexAdd { base: Var, src: Var, rows: Vec<usize> },
    Scale { x: Var, factor: E },
    StopGrad(Var),
    BceWithLogits { logits: Var, targets: Var },
    CeWithLogits { logits: Var, targets: Var },
}

#[derive(Debug)]
struct Node<E> {
    value: Tensor<E>,
    /// True if a requires-grad leaf is reachable from this node.
    needs_grad: bool,
    op: Op<E>,
}

/// Epsilon inside the layernorm variance square root.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Wengert tape: forward values plus backward rules, in topological order
/// (an operation's inputs always precede it).
#[derive(Debug, Default)]
pub struct Tape<E> {
    nodes: Vec<Node<E>>,
}

/// Per-node gradients produced by [`Tape::backward`]. Leaves with
/// `requires_grad = false` never receive an entry.
#[derive(Debug)]
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when `v` is unreachable
    /// from the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<E> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- leaves -------------------------------------------------------

    /// Record an input tensor. Gradients are produced for it only when
    /// `requires_grad` is true.
    pub fn input(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Record a constant (never receives a gradient).
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.input(value, false)
    }

    fn push(&mut self, value: Tensor<E>, needs_grad: bool, op: Op<E>) -> Var {
        self.nodes.push(Node { value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| {
            E::from_f64(x.to_f64() + y.to_f64())
        });
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, needs, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| {
            E::from_f64(x.to_f64() - y.to_f64())
        });
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, needs, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| {
            E::from_f64(x.to_f64() * y.to_f64())
        });
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, needs, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: E) -> Var {
        let value = self.value(x).map(|v| E::from_f64(v.to_f64() * factor.to_f64()));
        let needs = self.needs(x);
        self.push(value, needs, Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.maximum(E::ZERO));
        let needs = self.needs(x);
        self.push(value, needs, Op::Relu(x))
    }

    /// Gelu with the tanh approximation:
    /// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| E::from_f64(gelu_f64(v.to_f64())));
        let needs = self.needs(x);
        self.push(value, needs, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| E::from_f64(sigmoid_f64(v.to_f64())));
        let needs = self.needs(x);
        self.push(value, needs, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        let needs = self.needs(x);
        self.push(value, needs, Op::Log(x))
    }

    // ---- reductions & shape ---------------------------------------------

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.numel() as f64;
        let sum: f64 = t.data().iter().map(|v| v.to_f64()).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(E::from_f64(sum / n)), needs, Op::MeanAll(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let sum: f64 = t.data().iter().map(|v| v.to_f64()).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(E::from_f64(sum)), needs, Op::SumAll(x))
    }

    /// Broadcast `x` to `target` shape (numpy rules: right-aligned, size-1
    /// axes expand). Backward sums over the expanded axes.
    pub fn broadcast_to(&mut self, x: Var, target: &[usize]) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        if !broadcast_compatible(&src_shape, target) {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: src_shape,
                rhs: target.to_vec(),
            });
        }
        let value = broadcast_copy(self.value(x), target);
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::Broadcast(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::Reshape(x)))
    }

    /// Permute axes; `axes` must be a permutation of `0..rank`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        validate_permutation(&shape, axes)?;
        let value = permute_copy(self.value(x), axes);
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::Permute { x, axes: axes.to_vec() }))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("axis {axis} range {start}..{} out of shape {:?}", start + len, shape),
            ));
        }
        let value = narrow_copy(self.value(x), axis, start, len);
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::Narrow { x, axis, start }))
    }

    /// Concatenate along `axis`; all other dims must match.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no parts"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of rank {}", first.len())));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let tensors: Vec<&Tensor<E>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = concat_copy(&tensors, axis, &out_shape);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, needs, Op::Concat { parts: parts.to_vec(), axis }))
    }

    // ---- gather / scatter -------------------------------------------------

    /// Gather rows (axis 0). Output row `i` is `x[rows[i]]`.
    pub fn index_select(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::invalid("index_select", "scalar input"));
        }
        let batch = shape[0];
        for &r in rows {
            if r >= batch {
                return Err(Error::IndexOutOfRange { op: "index_select", index: r, size: batch });
            }
        }
        let row_len: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            data.extend_from_slice(&src[r * row_len..(r + 1) * row_len]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = rows.len();
        let value = Tensor::new(out_shape, data)?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::IndexSelect { x, rows: rows.to_vec() }))
    }

    /// `out = base; out[rows[i]] += src[i]` — the scatter-add that puts a
    /// sub-batch residual back onto the full batch.
    pub fn index_add(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let base_shape = self.shape(base).to_vec();
        let src_shape = self.shape(src).to_vec();
        if base_shape.is_empty()
            || src_shape.is_empty()
            || base_shape[1..] != src_shape[1..]
            || src_shape[0] != rows.len()
        {
            return Err(Error::ShapeMismatch { op: "index_add", lhs: base_shape, rhs: src_shape });
        }
        let batch = base_shape[0];
        for &r in rows {
            if r >= batch {
                return Err(Error::IndexOutOfRange { op: "index_add", index: r, size: batch });
            }
        }
        let row_len: usize = base_shape[1..].iter().product();
        let mut value = self.value(base).clone();
        {
            let src_data = self.value(src).data();
            let dst = value.data_mut();
            for (i, &r) in rows.iter().enumerate() {
                let s = &src_data[i * row_len..(i + 1) * row_len];
                let d = &mut dst[r * row_len..(r + 1) * row_len];
                for (dv, sv) in d.iter_mut().zip(s.iter()) {
                    *dv = E::from_f64(dv.to_f64() + sv.to_f64());
                }
            }
        }
        let needs = self.needs(base) || self.needs(src);
        Ok(self.push(value, needs, Op::IndexAdd { base, src, rows: rows.to_vec() }))
    }

    // ---- matmul -----------------------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// Supported shapes: `(..., m, k) x (k, n)` (shared right operand) and
    /// `(..., m, k) x (..., k, n)` with identical leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let spec = MatmulSpec::resolve(&ashape, &bshape)?;
        let mut out = Tensor::zeros(&spec.out_shape);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let (m, k, n) = (spec.m, spec.k, spec.n);
            let out_data = out.data_mut();
            for s in 0..spec.batch {
                let asl = &av[s * m * k..(s + 1) * m * k];
                let bsl = if spec.shared_rhs { bv } else { &bv[s * k * n..(s + 1) * k * n] };
                E::matmul_acc(&mut out_data[s * m * n..(s + 1) * m * n], asl, bsl, m, k, n);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, Op::Matmul(a, b)))
    }

    // ---- normalization ------------------------------------------------------

    /// Softmax over the last axis (max-subtracted for stability).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(Error::invalid("softmax", "scalar input"));
        }
        let cols = *t.shape().last().unwrap();
        let mut value = t.clone();
        for row in value.data_mut().chunks_mut(cols) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
            let mut denom = 0.0;
            for v in row.iter_mut() {
                let e = (v.to_f64() - max).exp();
                denom += e;
                *v = E::from_f64(e);
            }
            for v in row.iter_mut() {
                *v = E::from_f64(v.to_f64() / denom);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::Softmax(x)))
    }

    /// Layer normalization over the last axis with learnable scale/shift.
    /// `gamma` and `beta` must be 1-D of the last-axis length.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let cols = *xs.last().ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [cols] {
                return Err(Error::invalid(
                    "layer_norm",
                    format!("{name} shape {:?} != [{cols}]", self.shape(v)),
                ));
            }
        }
        let gamma_v = self.value(gamma).data().to_vec();
        let beta_v = self.value(beta).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(cols) {
            let (mu, var) = row_mean_var(row);
            let inv_std = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                let xhat = (v.to_f64() - mu) * inv_std;
                *v = E::from_f64(gamma_v[j].to_f64() * xhat + beta_v[j].to_f64());
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(value, needs, Op::LayerNorm { x, gamma, beta }))
    }

    // ---- gradient flow control ---------------------------------------------

    /// Forward identity, backward zero: the stop-gradient operator.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        // Nothing upstream of a stop-gradient ever needs a gradient through
        // this edge.
        self.push(value, false, Op::StopGrad(x))
    }

    // ---- fused, numerically stable losses ------------------------------------

    /// Mean binary cross-entropy of `logits` against target probabilities,
    /// computed in the stable form `max(z,0) - z*t + ln(1 + exp(-|z|))`.
    /// Gradient: `(sigmoid(z) - t) / numel` toward logits, `-z / numel`
    /// toward targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.check_same_shape("bce_with_logits", logits, targets)?;
        let z = self.value(logits).data();
        let t = self.value(targets).data();
        let n = z.len() as f64;
        let mut total = 0.0;
        for (zv, tv) in z.iter().zip(t.iter()) {
            let zf = zv.to_f64();
            total += zf.max(0.0) - zf * tv.to_f64() + (-zf.abs()).exp().ln_1p();
        }
        let needs = self.needs(logits) || self.needs(targets);
        Ok(self.push(
            Tensor::scalar(E::from_f64(total / n)),
            needs,
            Op::BceWithLogits { logits, targets },
        ))
    }

    /// Mean (over last-axis rows) softmax cross-entropy of `logits` against
    /// target distributions: `lse(z) * sum(t) - sum(t * z)` per row.
    pub fn ce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.check_same_shape("ce_with_logits", logits, targets)?;
        let shape = self.shape(logits).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::invalid("ce_with_logits", "scalar"))?;
        let rows = self.value(logits).numel() / cols;
        let z = self.value(logits).data();
        let t = self.value(targets).data();
        let mut total = 0.0;
        for r in 0..rows {
            let zr = &z[r * cols..(r + 1) * cols];
            let tr = &t[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(zr);
            let tsum: f64 = tr.iter().map(|v| v.to_f64()).sum();
            let dot: f64 = zr.iter().zip(tr.iter()).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
            total += lse * tsum - dot;
        }
        let needs = self.needs(logits) || self.needs(targets);
        Ok(self.push(
            Tensor::scalar(E::from_f64(total / rows as f64)),
            needs,
            Op::CeWithLogits { logits, targets },
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar loss. Visits each node at most once, in
    /// reverse creation order; fan-out gradients accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        if !self.value(loss).is_scalar() && self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), E::ONE));
        }
        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            self.backprop_node(id, &gout, &mut grads)?;
            // Leaves keep their gradient; interior grads are dropped once
            // consumed unless a later node still needs them (they cannot:
            // all consumers have higher ids and were already processed).
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(gout);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<E>>], v: Var, delta: Tensor<E>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                let gd = g.data_mut();
                for (a, b) in gd.iter_mut().zip(delta.data().iter()) {
                    *a = E::from_f64(a.to_f64() + b.to_f64());
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(
        &self,
        id: usize,
        gout: &Tensor<E>,
        grads: &mut [Option<Tensor<E>>],
    ) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.map(|v| E::from_f64(-v.to_f64())));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    self.accumulate(grads, a, zip_map(gout, self.value(b), mul_f64));
                }
                if self.needs(b) {
                    self.accumulate(grads, b, zip_map(gout, self.value(a), mul_f64));
                }
            }
            Op::Scale { x, factor } => {
                let f = factor.to_f64();
                self.accumulate(grads, *x, gout.map(|v| E::from_f64(v.to_f64() * f)));
            }
            Op::Relu(x) => {
                let mask = zip_map(gout, self.value(*x), |g, xv| {
                    if xv.to_f64() > 0.0 {
                        g
                    } else {
                        E::ZERO
                    }
                });
                self.accumulate(grads, *x, mask);
            }
            Op::Gelu(x) => {
                let gx = zip_map(gout, self.value(*x), |g, xv| {
                    E::from_f64(g.to_f64() * gelu_grad_f64(xv.to_f64()))
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                // d sigma = sigma (1 - sigma); reuse the stored output.
                let y = &self.nodes[id].value;
                let gx = zip_map(gout, y, |g, yv| {
                    let s = yv.to_f64();
                    E::from_f64(g.to_f64() * s * (1.0 - s))
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Log(x) => {
                let gx = zip_map(gout, self.value(*x), |g, xv| {
                    E::from_f64(g.to_f64() / xv.to_f64())
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                // dx = y * (g - <g, y>_row)
                let y = &self.nodes[id].value;
                let cols = *y.shape().last().unwrap();
                let mut gx = Tensor::zeros(y.shape());
                {
                    let yd = y.data();
                    let gd = gout.data();
                    let out = gx.data_mut();
                    for r in 0..yd.len() / cols {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = yd[span.clone()]
                            .iter()
                            .zip(gd[span.clone()].iter())
                            .map(|(a, b)| a.to_f64() * b.to_f64())
                            .sum();
                        for j in span.clone() {
                            out[j] =
                                E::from_f64(yd[j].to_f64() * (gd[j].to_f64() - dot));
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, gamma, beta } => {
                self.backprop_layer_norm(*x, *gamma, *beta, gout, grads);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel() as f64;
                let g = gout.data()[0].to_f64() / n;
                self.accumulate(
                    grads,
                    *x,
                    Tensor::full(self.shape(*x), E::from_f64(g)),
                );
            }
            Op::SumAll(x) => {
                let g = gout.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::Broadcast(x) => {
                let gx = broadcast_reduce(gout, self.shape(*x));
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let gx = gout.clone().reshaped(self.shape(*x).to_vec()).expect("reshape grad");
                self.accumulate(grads, *x, gx);
            }
            Op::Permute { x, axes } => {
                let inv = invert_permutation(axes);
                self.accumulate(grads, *x, permute_copy(gout, &inv));
            }
            Op::Narrow { x, axis, start } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                narrow_scatter(&mut gx, gout, *axis, *start);
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0usize;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    let gp = narrow_copy(gout, *axis, offset, len);
                    offset += len;
                    self.accumulate(grads, p, gp);
                }
            }
            Op::IndexSelect { x, rows } => {
                let mut gx: Tensor<E> = Tensor::zeros(self.shape(*x));
                let row_len: usize = self.shape(*x)[1..].iter().product();
                {
                    let dst = gx.data_mut();
                    let src = gout.data();
                    for (i, &r) in rows.iter().enumerate() {
                        let s = &src[i * row_len..(i + 1) * row_len];
                        let d = &mut dst[r * row_len..(r + 1) * row_len];
                        for (dv, sv) in d.iter_mut().zip(s.iter()) {
                            *dv = E::from_f64(dv.to_f64() + sv.to_f64());
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::IndexAdd { base, src, rows } => {
                let (base, src) = (*base, *src);
                if self.needs(base) {
                    self.accumulate(grads, base, gout.clone());
                }
                if self.needs(src) {
                    let row_len: usize = self.shape(src)[1..].iter().product();
                    let mut gs = Tensor::zeros(self.shape(src));
                    {
                        let dst = gs.data_mut();
                        let g = gout.data();
                        for (i, &r) in rows.iter().enumerate() {
                            dst[i * row_len..(i + 1) * row_len]
                                .copy_from_slice(&g[r * row_len..(r + 1) * row_len]);
                        }
                    }
                    self.accumulate(grads, src, gs);
                }
            }
            Op::Matmul(a, b) => {
                self.backprop_matmul(*a, *b, gout, grads)?;
            }
            Op::BceWithLogits { logits, targets } => {
                let (logits, targets) = (*logits, *targets);
                let n = self.value(logits).numel() as f64;
                let g = gout.data()[0].to_f64() / n;
                if self.needs(logits) {
                    let gz = zip_map(self.value(logits), self.value(targets), |zv, tv| {
                        E::from_f64(g * (sigmoid_f64(zv.to_f64()) - tv.to_f64()))
                    });
                    self.accumulate(grads, logits, gz);
                }
                if self.needs(targets) {
                    let gt = self.value(logits).map(|zv| E::from_f64(-g * zv.to_f64()));
                    self.accumulate(grads, targets, gt);
                }
            }
            Op::CeWithLogits { logits, targets } => {
                let (logits, targets) = (*logits, *targets);
                let shape = self.shape(logits).to_vec();
                let cols = *shape.last().unwrap();
                let rows = self.value(logits).numel() / cols;
                let g = gout.data()[0].to_f64() / rows as f64;
                let z = self.value(logits).data();
                let t = self.value(targets).data();
                if self.needs(logits) {
                    let mut gz = Tensor::zeros(&shape);
                    {
                        let out = gz.data_mut();
                        for r in 0..rows {
                            let span = r * cols..(r + 1) * cols;
                            let zr = &z[span.clone()];
                            let tsum: f64 =
                                t[span.clone()].iter().map(|v| v.to_f64()).sum();
                            let lse = log_sum_exp(zr);
                            for (j, idx) in span.clone().enumerate() {
                                let p = (zr[j].to_f64() - lse).exp();
                                out[idx] =
                                    E::from_f64(g * (p * tsum - t[idx].to_f64()));
                            }
                        }
                    }
                    self.accumulate(grads, logits, gz);
                }
                if self.needs(targets) {
                    let mut gt = Tensor::zeros(&shape);
                    {
                        let out = gt.data_mut();
                        for r in 0..rows {
                            let span = r * cols..(r + 1) * cols;
                            let lse = log_sum_exp(&z[span.clone()]);
                            for idx in span {
                                out[idx] = E::from_f64(g * (lse - z[idx].to_f64()));
                            }
                        }
                    }
                    self.accumulate(grads, targets, gt);
                }
            }
        }
        Ok(())
    }

    fn backprop_layer_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        gout: &Tensor<E>,
        grads: &mut [Option<Tensor<E>>],
    ) {
        let xs = self.value(x);
        let cols = *xs.shape().last().unwrap();
        let rows = xs.numel() / cols;
        let gamma_v = self.value(gamma).data();
        let g = gout.data();
        let xd = xs.data();

        let mut gx: Tensor<E> = Tensor::zeros(xs.shape());
        let mut ggamma: Tensor<E> = Tensor::zeros(&[cols]);
        let mut gbeta: Tensor<E> = Tensor::zeros(&[cols]);
        {
            let gxd = gx.data_mut();
            let ggd = ggamma.data_mut();
            let gbd = gbeta.data_mut();
            let mut xhat = vec![0.0f64; cols];
            for r in 0..rows {
                let span = r * cols..(r + 1) * cols;
                let row = &xd[span.clone()];
                let (mu, var) = row_mean_var(row);
                let inv_std = 1.0 / (var + LAYERNORM_EPS).sqrt();
                for (j, v) in row.iter().enumerate() {
                    xhat[j] = (v.to_f64() - mu) * inv_std;
                }
                let grow = &g[span.clone()];
                // dxhat = g * gamma; dx = inv_std * (dxhat - mean(dxhat)
                //          - xhat * mean(dxhat * xhat))
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for j in 0..cols {
                    let dxh = grow[j].to_f64() * gamma_v[j].to_f64();
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xhat[j];
                }
                mean_dxhat /= cols as f64;
                mean_dxhat_xhat /= cols as f64;
                for j in 0..cols {
                    let gj = grow[j].to_f64();
                    let dxh = gj * gamma_v[j].to_f64();
                    gxd[r * cols + j] = E::from_f64(
                        inv_std * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat),
                    );
                    ggd[j] = E::from_f64(ggd[j].to_f64() + gj * xhat[j]);
                    gbd[j] = E::from_f64(gbd[j].to_f64() + gj);
                }
            }
        }
        self.accumulate(grads, x, gx);
        self.accumulate(grads, gamma, ggamma);
        self.accumulate(grads, beta, gbeta);
    }

    fn backprop_matmul(
        &self,
        a: Var,
        b: Var,
        gout: &Tensor<E>,
        grads: &mut [Option<Tensor<E>>],
    ) -> Result<()> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let spec = MatmulSpec::resolve(&ashape, &bshape)?;
        let (m, k, n) = (spec.m, spec.k, spec.n);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let g = gout.data();
        if self.needs(a) {
            // dA = dC * B^T per slice
            let mut ga = Tensor::zeros(&ashape);
            {
                let out = ga.data_mut();
                for s in 0..spec.batch {
                    let gsl = &g[s * m * n..(s + 1) * m * n];
                    let bsl = if spec.shared_rhs { bv } else { &bv[s * k * n..(s + 1) * k * n] };
                    E::matmul_nt_acc(&mut out[s * m * k..(s + 1) * m * k], gsl, bsl, m, n, k);
                }
            }
            self.accumulate(grads, a, ga);
        }
        if self.needs(b) {
            // dB = A^T * dC, accumulated over slices when B is shared
            let mut gb = Tensor::zeros(&bshape);
            {
                let out = gb.data_mut();
                for s in 0..spec.batch {
                    let asl = &av[s * m * k..(s + 1) * m * k];
                    let gsl = &g[s * m * n..(s + 1) * m * n];
                    if spec.shared_rhs {
                        E::matmul_tn_acc(out, asl, gsl, k, m, n);
                    } else {
                        E::matmul_tn_acc(
                            &mut out[s * k * n..(s + 1) * k * n],
                            asl,
                            gsl,
                            k,
                            m,
                            n,
                        );
                    }
                }
            }
            self.accumulate(grads, b, gb);
        }
        Ok(())
    }
}

// ---- matmul shape resolution ------------------------------------------------

struct MatmulSpec {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
    out_shape: Vec<usize>,
}

impl MatmulSpec {
    fn resolve(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() });
        }
        let (m, k1) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        let a_lead = &a[..a.len() - 2];
        let b_lead = &b[..b.len() - 2];
        let shared_rhs = b.len() == 2 && a.len() >= 2;
        let lead_ok = shared_rhs || a_lead == b_lead;
        if k1 != k2 || !lead_ok {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() });
        }
        let batch: usize = a_lead.iter().product();
        let mut out_shape = a_lead.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        Ok(MatmulSpec { batch, m, k: k1, n, shared_rhs, out_shape })
    }
}

// ---- scalar math helpers ------------------------------------------------------

#[inline]
fn sigmoid_f64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[inline]
fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
fn gelu_grad_f64(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn log_sum_exp<E: Element>(row: &[E]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
    let sum: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
    max + sum.ln()
}

fn row_mean_var<E: Element>(row: &[E]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var = row.iter().map(|v| (v.to_f64() - mu).powi(2)).sum::<f64>() / n;
    (mu, var)
}

fn mul_f64<E: Element>(a: E, b: E) -> E {
    E::from_f64(a.to_f64() * b.to_f64())
}

fn zip_map<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    debug_assert_eq!(a.numel(), b.numel());
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map shape")
}

// ---- broadcast / permute / slice helpers --------------------------------------

fn broadcast_compatible(src: &[usize], target: &[usize]) -> bool {
    if src.len() > target.len() {
        return false;
    }
    let offset = target.len() - src.len();
    src.iter().enumerate().all(|(i, &d)| d == target[offset + i] || d == 1)
}

/// Row-major strides, with 0 stride on broadcast axes.
fn broadcast_strides(src: &[usize], target: &[usize]) -> Vec<usize> {
    let offset = target.len() - src.len();
    let mut strides = vec![0usize; target.len()];
    let mut acc = 1usize;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[offset + i] = acc;
        }
        acc *= src[i];
    }
    strides
}

fn broadcast_copy<E: Element>(src: &Tensor<E>, target: &[usize]) -> Tensor<E> {
    let numel: usize = target.iter().product();
    let strides = broadcast_strides(src.shape(), target);
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; target.len()];
    let s = src.data();
    for _ in 0..numel {
        let off: usize = idx.iter().zip(strides.iter()).map(|(i, st)| i * st).sum();
        out.push(s[off]);
        for ax in (0..target.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < target[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(target.to_vec(), out).expect("broadcast shape")
}

/// Sum `g` (shaped like the broadcast target) back down to `src_shape`.
fn broadcast_reduce<E: Element>(g: &Tensor<E>, src_shape: &[usize]) -> Tensor<E> {
    let target = g.shape();
    let strides = broadcast_strides(src_shape, target);
    let mut out: Tensor<E> = Tensor::zeros(src_shape);
    {
        let o = out.data_mut();
        let gd = g.data();
        let mut idx = vec![0usize; target.len()];
        for &gv in gd.iter() {
            let off: usize = idx.iter().zip(strides.iter()).map(|(i, st)| i * st).sum();
            o[off] = E::from_f64(o[off].to_f64() + gv.to_f64());
            for ax in (0..target.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < target[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
    }
    out
}

fn validate_permutation(shape: &[usize], axes: &[usize]) -> Result<()> {
    if axes.len() != shape.len() {
        return Err(Error::invalid(
            "permute",
            format!("axes {:?} rank != shape {:?}", axes, shape),
        ));
    }
    let mut seen = vec![false; axes.len()];
    for &a in axes {
        if a >= axes.len() || seen[a] {
            return Err(Error::invalid("permute", format!("axes {:?} not a permutation", axes)));
        }
        seen[a] = true;
    }
    Ok(())
}

fn invert_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn permute_copy<E: Element>(src: &Tensor<E>, axes: &[usize]) -> Tensor<E> {
    let in_shape = src.shape();
    let rank = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let numel = src.numel();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let s = src.data();
    for _ in 0..numel {
        let off: usize = idx.iter().enumerate().map(|(d, &i)| i * in_strides[axes[d]]).sum();
        out.push(s[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute shape")
}

fn narrow_copy<E: Element>(src: &Tensor<E>, axis: usize, start: usize, len: usize) -> Tensor<E> {
    let shape = src.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let axis_len = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    let s = src.data();
    for o in 0..outer {
        let base = o * axis_len * inner + start * inner;
        out.extend_from_slice(&s[base..base + len * inner]);
    }
    Tensor::new(out_shape, out).expect("narrow shape")
}

/// Add `part` into `dst` at `start` along `axis` (inverse of narrow).
fn narrow_scatter<E: Element>(dst: &mut Tensor<E>, part: &Tensor<E>, axis: usize, start: usize) {
    let shape = dst.shape().to_vec();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let axis_len = shape[axis];
    let len = part.shape()[axis];
    let d = dst.data_mut();
    let p = part.data();
    for o in 0..outer {
        let dbase = o * axis_len * inner + start * inner;
        let pbase = o * len * inner;
        for j in 0..len * inner {
            d[dbase + j] = E::from_f64(d[dbase + j].to_f64() + p[pbase + j].to_f64());
        }
    }
}

fn concat_copy<E: Element>(parts: &[&Tensor<E>], axis: usize, out_shape: &[usize]) -> Tensor<E> {
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    for o in 0..outer {
        for t in parts {
            let len = t.shape()[axis];
            let base = o * len * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("concat shape")
}

// ---- gradient checking ---------------------------------------------------------

/// Result of a finite-difference gradient check.
#[derive(Debug)]
pub struct GradCheckReport {
    /// Max over all coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1).
    pub max_rel_err: f64,
    /// (param index, coordinate) where the max occurred.
    pub worst: Option<(usize, usize)>,
    /// Coordinates where non-finite values appeared.
    pub non_finite: Vec<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_err < tolerance
    }
}

/// Check analytic gradients of a scalar-valued graph against central finite
/// differences `(f(p + eps e) - f(p - eps e)) / (2 eps)`, in 64-bit.
///
/// `build` must construct the loss from the given leaves; it is re-invoked
/// for every probe, so it must be a pure function of the parameter values.
pub fn grad_check<F>(build: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |probe: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Option<Vec<Tensor<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> =
            probe.iter().map(|t| tape.input(t.clone(), with_grad)).collect();
        let loss = build(&mut tape, &vars)?;
        if !tape.value(loss).is_scalar() {
            return Err(Error::invalid("grad_check", "loss must be scalar"));
        }
        let value = tape.value(loss).item()?;
        if with_grad {
            let grads = tape.backward(loss)?;
            let g = vars
                .iter()
                .zip(probe.iter())
                .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
                .collect();
            Ok((value, Some(g)))
        } else {
            Ok((value, None))
        }
    };

    let (_, analytic) = eval(params, true)?;
    let analytic = analytic.unwrap();

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, non_finite: Vec::new() };
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.numel() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[ci] += eps;
            let (fp, _) = eval(&plus, false)?;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[ci] -= eps;
            let (fm, _) = eval(&minus, false)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi].data()[ci];
            if !numeric.is_finite() || !a.is_finite() {
                report.non_finite.push((pi, ci));
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, ci));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::EngineRng;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn rand_tensor(rng: &mut EngineRng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_on_tape() {
        let mut tape = Tape::new();
        let a = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.constant(t64(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_grad_at_zero_is_quarter() {
        let mut tape = Tape::new();
        let z = tape.input(t64(&[1], &[0.0]), true);
        let s = tape.sigmoid(z);
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(z).unwrap().data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sum_of_squares_grad() {
        // loss = sum(w * w), w = [1, 2] -> grad [2, 4]
        let mut tape = Tape::new();
        let w = tape.input(t64(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn independent_param_gets_zero_grad() {
        let mut tape = Tape::new();
        let w = tape.input(t64(&[3], &[1.0, 2.0, 3.0]), true);
        let u = tape.input(t64(&[2], &[5.0, 6.0]), true);
        let loss = tape.sum_all(u);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get_or_zeros(w, &[3]).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn fanout_gradients_sum() {
        // loss = sum(w) + sum(w * w): grad = 1 + 2w, checked two ways.
        let w0 = t64(&[3], &[0.5, -1.0, 2.0]);
        let build = |tape: &mut Tape<f64>, vars: &[Var]| {
            let w = vars[0];
            let s1 = tape.sum_all(w);
            let sq = tape.mul(w, w)?;
            let s2 = tape.sum_all(sq);
            tape.add(s1, s2)
        };
        let report = grad_check(build, &[w0.clone()], 1e-6).unwrap();
        assert!(report.passed(1e-7), "max rel err {}", report.max_rel_err);

        let mut tape = Tape::new();
        let w = tape.input(w0, true);
        let s1 = tape.sum_all(w);
        let sq = tape.mul(w, w).unwrap();
        let s2 = tape.sum_all(sq);
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (g, w) in grads.get(w).unwrap().data().iter().zip([0.5, -1.0, 2.0]) {
            assert!((g - (1.0 + 2.0 * w)).abs() < 1e-12);
        }
    }

    #[test]
    fn stop_grad_is_forward_identity_backward_zero() {
        let mut tape = Tape::new();
        let w = tape.input(t64(&[3], &[1.0, -2.0, 3.0]), true);
        let sg = tape.stop_grad(w);
        assert_eq!(tape.value(sg).data(), tape.value(w).data());
        let loss = tape.sum_all(sg);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
    }

    #[test]
    fn stop_grad_product_rule_single_sided() {
        // loss = sum(w * stop_grad(w)), w = [3] -> grad [3], not [6].
        let mut tape = Tape::new();
        let w = tape.input(t64(&[1], &[3.0]), true);
        let sg = tape.stop_grad(w);
        let prod = tape.mul(w, sg).unwrap();
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.input(t64(&[2], &[1.0, 2.0]), true);
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 3]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 3]"), "{err}");
    }

    #[test]
    fn grad_check_quadratic_is_tight() {
        let mut rng = EngineRng::seed_from_u64(11);
        let w = rand_tensor(&mut rng, &[5]);
        let report = grad_check(
            |tape, vars| {
                let sq = tape.mul(vars[0], vars[0])?;
                Ok(tape.sum_all(sq))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(report.passed(1e-7), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_constant_function() {
        let report = grad_check(
            |tape, _| {
                let c = tape.constant(Tensor::scalar(4.0));
                Ok(tape.scale(c, 1.0))
            },
            &[t64(&[2], &[1.0, 2.0])],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    /// Every primitive against central finite differences, random inputs.
    #[test]
    fn primitives_pass_grad_checks() {
        let mut rng = EngineRng::seed_from_u64(42);
        let trials = 100;
        for trial in 0..trials {
            let shapes: (Vec<usize>, Vec<usize>) = match trial % 4 {
                0 => (vec![2, 3], vec![2, 3]),
                1 => (vec![4], vec![4]),
                2 => (vec![2, 2, 3], vec![2, 2, 3]),
                _ => (vec![3, 5], vec![3, 5]),
            };
            let a = rand_tensor(&mut rng, &shapes.0);
            let b = rand_tensor(&mut rng, &shapes.1);

            // Elementwise + reductions + activations in one graph.
            let report = grad_check(
                |tape, vars| {
                    let (a, b) = (vars[0], vars[1]);
                    let sum = tape.add(a, b)?;
                    let diff = tape.sub(a, b)?;
                    let prod = tape.mul(sum, diff)?;
                    let r = tape.relu(prod);
                    let g = tape.gelu(r);
                    let s = tape.sigmoid(g);
                    let sm = tape.softmax(s)?;
                    let m = tape.mean_all(sm);
                    let q = tape.sum_all(s);
                    let qs = tape.scale(q, 0.25);
                    tape.add(m, qs)
                },
                &[a, b],
                1e-6,
            )
            .unwrap();
            assert!(report.passed(1e-4), "trial {trial}: rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn matmul_and_shape_ops_pass_grad_checks() {
        let mut rng = EngineRng::seed_from_u64(43);
        for trial in 0..100 {
            let a = rand_tensor(&mut rng, &[2, 3, 4]);
            let w = rand_tensor(&mut rng, &[4, 5]);
            let report = grad_check(
                |tape, vars| {
                    let (a, w) = (vars[0], vars[1]);
                    let y = tape.matmul(a, w)?; // (2,3,5)
                    let p = tape.permute(y, &[1, 0, 2])?; // (3,2,5)
                    let r = tape.reshape(p, &[6, 5])?;
                    let nr = tape.narrow(r, 0, 1, 3)?;
                    let sel = tape.index_select(nr, &[2, 0, 0])?;
                    let base = tape.index_add(nr, sel, &[0, 1, 2])?;
                    tape.mean_all(base);
                    let cat = tape.concat(&[nr, base], 1)?;
                    Ok(tape.mean_all(cat))
                },
                &[a, w],
                1e-6,
            )
            .unwrap();
            assert!(report.passed(1e-4), "trial {trial}: rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn batched_matmul_matches_per_slice() {
        let mut rng = EngineRng::seed_from_u64(44);
        let a = rand_tensor(&mut rng, &[3, 2, 4]);
        let b = rand_tensor(&mut rng, &[3, 4, 2]);
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let c = tape.matmul(av, bv).unwrap();
        assert_eq!(tape.shape(c), &[3, 2, 2]);
        for s in 0..3 {
            let mut expect = vec![0.0f64; 4];
            f64::matmul_acc(
                &mut expect,
                &a.data()[s * 8..(s + 1) * 8],
                &b.data()[s * 8..(s + 1) * 8],
                2,
                4,
                2,
            );
            assert_eq!(&tape.value(c).data()[s * 4..(s + 1) * 4], &expect[..]);
        }
    }

    #[test]
    fn normalization_and_loss_ops_pass_grad_checks() {
        let mut rng = EngineRng::seed_from_u64(45);
        for trial in 0..100 {
            let x = rand_tensor(&mut rng, &[3, 6]);
            let gamma = rand_tensor(&mut rng, &[6]);
            let beta = rand_tensor(&mut rng, &[6]);
            let z = rand_tensor(&mut rng, &[3, 6]);
            let report = grad_check(
                |tape, vars| {
                    let (x, gamma, beta, z) = (vars[0], vars[1], vars[2], vars[3]);
                    let ln = tape.layer_norm(x, gamma, beta)?;
                    let t = tape.sigmoid(z);
                    let bce = tape.bce_with_logits(ln, t)?;
                    let sm = tape.softmax(t)?;
                    let ce = tape.ce_with_logits(ln, sm)?;
                    tape.add(bce, ce)
                },
                &[x, gamma, beta, z],
                1e-6,
            )
            .unwrap();
            assert!(report.passed(1e-4), "trial {trial}: rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn log_and_broadcast_pass_grad_checks() {
        let mut rng = EngineRng::seed_from_u64(46);
        for _ in 0..100 {
            // Positive inputs for log.
            let x = rand_tensor(&mut rng, &[4]).map(|v| v.abs() + 0.5);
            let b = rand_tensor(&mut rng, &[2, 1, 4]);
            let report = grad_check(
                |tape, vars| {
                    let (x, b) = (vars[0], vars[1]);
                    let lx = tape.log(x);
                    let bx = tape.broadcast_to(lx, &[2, 3, 4])?;
                    let bb = tape.broadcast_to(b, &[2, 3, 4])?;
                    let prod = tape.mul(bx, bb)?;
                    Ok(tape.mean_all(prod))
                },
                &[x, b],
                1e-6,
            )
            .unwrap();
            assert!(report.passed(1e-4), "rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = EngineRng::seed_from_u64(47);
        let x = rand_tensor(&mut rng, &[20, 9]).map(|v| v * 3.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv).unwrap();
        for row in tape.value(y).data().chunks(9) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_rows_are_standardized() {
        let mut rng = EngineRng::seed_from_u64(48);
        let x = rand_tensor(&mut rng, &[10, 32]).map(|v| v * 2.0 + 0.7);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let gamma = tape.constant(Tensor::full(&[32], 1.0));
        let beta = tape.constant(Tensor::zeros(&[32]));
        let y = tape.layer_norm(xv, gamma, beta).unwrap();
        for row in tape.value(y).data().chunks(32) {
            let (mu, var) = row_mean_var(row);
            assert!(mu.abs() < 1e-5, "row mean {mu}");
            assert!((var - 1.0).abs() < 1e-4, "row var {var}");
        }
    }

    #[test]
    fn tape_replay_is_deterministic() {
        let mut rng = EngineRng::seed_from_u64(49);
        let x = rand_tensor(&mut rng, &[4, 8]);
        let w = rand_tensor(&mut rng, &[8, 8]);
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone(), true);
            let wv = tape.input(w.clone(), true);
            let h = tape.matmul(xv, wv).unwrap();
            let g = tape.gelu(h);
            let loss = tape.mean_all(g);
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).data().to_vec(),
                grads.get(wv).unwrap().data().to_vec(),
            )
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }
}
