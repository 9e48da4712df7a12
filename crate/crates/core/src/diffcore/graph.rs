//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every operation appends a slot holding the
//! computed value, a gradient accumulator of the same shape, and a record
//! of the producing operation. Inputs always precede outputs on the tape,
//! so the backward pass is a single reverse sweep. Graphs are rebuilt per
//! minibatch and confined to one thread from forward through backward.

use super::rng::SeededRng;
use super::tensor::Tensor;
use super::DiffError;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Forward operations exposed through [`Graph::forward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Affine,
    Tanh,
    Relu,
    Sigmoid,
    Softmax,
}

/// Loss kinds exposed through [`Graph::pointwise_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Bce,
    SoftmaxCe,
}

/// Target of a pointwise loss: dense values or one class index per row.
pub enum LossTarget<'a> {
    Values(&'a Tensor),
    Classes(&'a [usize]),
}

enum Op {
    Leaf,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    Reparameterize { mu: NodeId, log_var: NodeId, eps: Tensor },
    KlDiagGaussian { mu: NodeId, log_var: NodeId },
    Mse { pred: NodeId, target: Tensor },
    Bce { pred: NodeId, target: Tensor },
    BceWithLogits { logits: NodeId, target: Tensor },
    SoftmaxCe { logits: NodeId, classes: Vec<usize> },
    WeightedSum { x: NodeId, weights: Tensor },
}

struct Slot {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

/// Reverse-mode computation tape.
#[derive(Default)]
pub struct Graph {
    slots: Vec<Slot>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { slots: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.slots[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for slot in &mut self.slots {
            slot.grad.data_mut().fill(0.0);
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let grad = Tensor::zeros(value.shape());
        self.slots.push(Slot { value, grad, op });
        NodeId(self.slots.len() - 1)
    }

    /// Insert an input node (parameter, data, or constant).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Generic dispatch over the forward op kinds.
    ///
    /// `Affine` expects `inputs = [x, w, b]`; the pointwise kinds and
    /// softmax expect a single input.
    pub fn forward(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId, DiffError> {
        match (kind, inputs) {
            (OpKind::Affine, &[x, w, b]) => self.affine(x, w, b),
            (OpKind::Tanh, &[x]) => Ok(self.tanh(x)),
            (OpKind::Relu, &[x]) => Ok(self.relu(x)),
            (OpKind::Sigmoid, &[x]) => Ok(self.sigmoid(x)),
            (OpKind::Softmax, &[x]) => Ok(self.softmax(x)),
            _ => Err(DiffError::Arity {
                op: op_name(kind),
                got: inputs.len(),
            }),
        }
    }

    /// Generic dispatch over the loss kinds.
    pub fn pointwise_loss(
        &mut self,
        kind: LossKind,
        prediction: NodeId,
        target: LossTarget<'_>,
    ) -> Result<NodeId, DiffError> {
        match (kind, target) {
            (LossKind::Mse, LossTarget::Values(t)) => self.mse(prediction, t),
            (LossKind::Bce, LossTarget::Values(t)) => self.bce(prediction, t),
            (LossKind::SoftmaxCe, LossTarget::Classes(c)) => self.softmax_ce(prediction, c),
            (LossKind::Mse | LossKind::Bce, LossTarget::Classes(_)) => Err(DiffError::Arity {
                op: "dense loss with class targets",
                got: 0,
            }),
            (LossKind::SoftmaxCe, LossTarget::Values(_)) => Err(DiffError::Arity {
                op: "softmax_ce with dense targets",
                got: 0,
            }),
        }
    }

    /// `y = x · wᵀ + b` with `x: [B, n]`, `w: [m, n]`, `b: [1, m]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (xs, ws, bs) = (
            self.slots[x.0].value.shape().to_vec(),
            self.slots[w.0].value.shape().to_vec(),
            self.slots[b.0].value.shape().to_vec(),
        );
        let xv = &self.slots[x.0].value;
        let wv = &self.slots[w.0].value;
        let bv = &self.slots[b.0].value;
        let (batch, n_in) = (xv.rows(), xv.cols());
        let (n_out, wn_in) = (wv.rows(), wv.cols());
        if n_in != wn_in {
            return Err(DiffError::ShapeMismatch {
                op: "affine input/weight",
                lhs: xs,
                rhs: ws,
            });
        }
        if bv.len() != n_out {
            return Err(DiffError::ShapeMismatch {
                op: "affine weight/bias",
                lhs: ws,
                rhs: bs,
            });
        }
        let mut out = vec![0.0; batch * n_out];
        for r in 0..batch {
            let xr = xv.row_slice(r);
            let or = &mut out[r * n_out..(r + 1) * n_out];
            for o in 0..n_out {
                or[o] = bv.data()[o] + dot(xr, wv.row_slice(o));
            }
        }
        let value = Tensor::matrix(batch, n_out, out)?;
        Ok(self.push(value, Op::Affine { x, w, b }))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = map(&self.slots[x.0].value, f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = map(&self.slots[x.0].value, |v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = map(&self.slots[x.0].value, sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = &self.slots[x.0].value;
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = xv.data().to_vec();
        for r in 0..rows {
            softmax_row(&mut out[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("shape preserved");
        self.push(value, Op::Softmax(x))
    }

    /// Elementwise sum of two same-shaped nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let av = &self.slots[a.0].value;
        let bv = &self.slots[b.0].value;
        if !av.same_shape(bv) {
            return Err(DiffError::ShapeMismatch {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(p, q)| p + q)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let value = map(&self.slots[x.0].value, |v| k * v);
        self.push(value, Op::Scale(x, k))
    }

    /// Column range `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        let xv = &self.slots[x.0].value;
        let (rows, cols) = (xv.rows(), xv.cols());
        if len == 0 || start + len > cols {
            return Err(DiffError::SliceOutOfRange { start, len, cols });
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.row_slice(r)[start..start + len]);
        }
        let value = Tensor::matrix(rows, len, out)?;
        Ok(self.push(value, Op::SliceCols { x, start, len }))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::EmptyConcat);
        }
        let rows = self.slots[parts[0].0].value.rows();
        let mut cols = 0;
        for &p in parts {
            let pv = &self.slots[p.0].value;
            if pv.rows() != rows {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.slots[parts[0].0].value.shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            cols += pv.cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.slots[p.0].value.row_slice(r));
            }
        }
        let value = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// `z = mu + exp(log_var / 2) ⊙ ε` with `ε ~ N(0, I)` drawn row-major
    /// from `rng`. Gradients flow to `mu` and `log_var`, not to `ε`.
    pub fn reparameterize(
        &mut self,
        mu: NodeId,
        log_var: NodeId,
        rng: &mut SeededRng,
    ) -> Result<NodeId, DiffError> {
        let shape = self.slots[mu.0].value.shape().to_vec();
        let len: usize = shape.iter().product();
        let eps = Tensor::new(shape, (0..len).map(|_| rng.next_normal()).collect())?;
        self.reparameterize_with(mu, log_var, eps)
    }

    /// Reparameterize with a caller-supplied noise tensor.
    pub fn reparameterize_with(
        &mut self,
        mu: NodeId,
        log_var: NodeId,
        eps: Tensor,
    ) -> Result<NodeId, DiffError> {
        let muv = &self.slots[mu.0].value;
        let lvv = &self.slots[log_var.0].value;
        if !muv.same_shape(lvv) {
            return Err(DiffError::ShapeMismatch {
                op: "reparameterize mu/log_var",
                lhs: muv.shape().to_vec(),
                rhs: lvv.shape().to_vec(),
            });
        }
        if !muv.same_shape(&eps) {
            return Err(DiffError::ShapeMismatch {
                op: "reparameterize mu/eps",
                lhs: muv.shape().to_vec(),
                rhs: eps.shape().to_vec(),
            });
        }
        let data = muv
            .data()
            .iter()
            .zip(lvv.data())
            .zip(eps.data())
            .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
            .collect();
        let value = Tensor::new(muv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Reparameterize { mu, log_var, eps }))
    }

    /// KL divergence of a diagonal Gaussian posterior from the standard
    /// normal prior: `½ Σ_d (μ_d² + exp(lv_d) − 1 − lv_d)` per row,
    /// averaged over rows. Always nonnegative.
    pub fn kl_diag_gaussian(&mut self, mu: NodeId, log_var: NodeId) -> Result<NodeId, DiffError> {
        let muv = &self.slots[mu.0].value;
        let lvv = &self.slots[log_var.0].value;
        if !muv.same_shape(lvv) {
            return Err(DiffError::ShapeMismatch {
                op: "kl_diag_gaussian",
                lhs: muv.shape().to_vec(),
                rhs: lvv.shape().to_vec(),
            });
        }
        let rows = muv.rows() as f64;
        let total: f64 = muv
            .data()
            .iter()
            .zip(lvv.data())
            .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
            .sum();
        Ok(self.push(
            Tensor::scalar(total / rows),
            Op::KlDiagGaussian { mu, log_var },
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId, DiffError> {
        let pv = &self.slots[pred.0].value;
        if !pv.same_shape(target) {
            return Err(DiffError::ShapeMismatch {
                op: "mse",
                lhs: pv.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = pv.len() as f64;
        let total: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Mse {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Mean binary cross-entropy (natural log) over all elements.
    ///
    /// Predictions must lie strictly inside `(0, 1)`; the caller applies
    /// a sigmoid first. Targets must lie in `[0, 1]`.
    pub fn bce(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId, DiffError> {
        let pv = &self.slots[pred.0].value;
        if !pv.same_shape(target) {
            return Err(DiffError::ShapeMismatch {
                op: "bce",
                lhs: pv.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        for &p in pv.data() {
            if !(p > 0.0 && p < 1.0) {
                return Err(DiffError::InvalidProbability { value: p });
            }
        }
        for &t in target.data() {
            if !(0.0..=1.0).contains(&t) {
                return Err(DiffError::InvalidTarget { value: t });
            }
        }
        let n = pv.len() as f64;
        let total: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Bce {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Mean binary cross-entropy computed from logits.
    ///
    /// Numerically equivalent to `bce(sigmoid(x), t)` but stable for
    /// saturated logits; used for the reconstruction term during training.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: &Tensor) -> Result<NodeId, DiffError> {
        let xv = &self.slots[logits.0].value;
        if !xv.same_shape(target) {
            return Err(DiffError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: xv.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        for &t in target.data() {
            if !(0.0..=1.0).contains(&t) {
                return Err(DiffError::InvalidTarget { value: t });
            }
        }
        let n = xv.len() as f64;
        let total: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits {
                logits,
                target: target.clone(),
            },
        ))
    }

    /// Mean softmax cross-entropy: `−log softmax(x_row)[class]` per row,
    /// averaged over rows.
    pub fn softmax_ce(&mut self, logits: NodeId, classes: &[usize]) -> Result<NodeId, DiffError> {
        let xv = &self.slots[logits.0].value;
        let (rows, cols) = (xv.rows(), xv.cols());
        if classes.len() != rows {
            return Err(DiffError::ShapeMismatch {
                op: "softmax_ce rows/classes",
                lhs: xv.shape().to_vec(),
                rhs: vec![classes.len()],
            });
        }
        let mut total = 0.0;
        for (r, &c) in classes.iter().enumerate() {
            if c >= cols {
                return Err(DiffError::ClassOutOfRange {
                    class: c,
                    n_classes: cols,
                });
            }
            let row = xv.row_slice(r);
            total += log_sum_exp(row) - row[c];
        }
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::SoftmaxCe {
                logits,
                classes: classes.to_vec(),
            },
        ))
    }

    /// `Σ w ⊙ x`, reducing any tensor to a scalar with fixed weights.
    pub fn weighted_sum(&mut self, x: NodeId, weights: &Tensor) -> Result<NodeId, DiffError> {
        let xv = &self.slots[x.0].value;
        if !xv.same_shape(weights) {
            return Err(DiffError::ShapeMismatch {
                op: "weighted_sum",
                lhs: xv.shape().to_vec(),
                rhs: weights.shape().to_vec(),
            });
        }
        let total = dot(xv.data(), weights.data());
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                x,
                weights: weights.clone(),
            },
        ))
    }

    /// Accumulate gradients of a scalar loss into every reachable node.
    ///
    /// Repeated calls add up unless [`Graph::zero_grads`] is called in
    /// between.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), DiffError> {
        {
            let lv = &self.slots[loss.0].value;
            if lv.len() != 1 {
                return Err(DiffError::NonScalar {
                    shape: lv.shape().to_vec(),
                });
            }
        }
        let mut cot: Vec<Option<Tensor>> = (0..self.slots.len()).map(|_| None).collect();
        cot[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = cot[id].take() else { continue };
            self.propagate(id, &g, &mut cot);
            let acc = self.slots[id].grad.data_mut();
            for (a, &gi) in acc.iter_mut().zip(g.data()) {
                *a += gi;
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor, cot: &mut [Option<Tensor>]) {
        let slot = &self.slots[id];
        match &slot.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xv = &self.slots[x.0].value;
                let wv = &self.slots[w.0].value;
                let (batch, n_in) = (xv.rows(), xv.cols());
                let n_out = wv.rows();
                let gx = ensure(cot, *x, &[batch, n_in]);
                for r in 0..batch {
                    let gr = g.row_slice(r);
                    let gxr = &mut gx.data_mut()[r * n_in..(r + 1) * n_in];
                    for o in 0..n_out {
                        axpy(gr[o], wv.row_slice(o), gxr);
                    }
                }
                let gw = ensure(cot, *w, &[n_out, n_in]);
                for r in 0..batch {
                    let gr = g.row_slice(r);
                    let xr = xv.row_slice(r);
                    for o in 0..n_out {
                        axpy(gr[o], xr, &mut gw.data_mut()[o * n_in..(o + 1) * n_in]);
                    }
                }
                let gb = ensure(cot, *b, &[1, n_out]);
                for r in 0..batch {
                    let gr = g.row_slice(r);
                    for (o, gb_o) in gb.data_mut().iter_mut().enumerate() {
                        *gb_o += gr[o];
                    }
                }
            }
            Op::Tanh(x) => {
                let y = &slot.value;
                let gx = ensure(cot, *x, y.shape());
                for ((gx_i, &y_i), &g_i) in gx.data_mut().iter_mut().zip(y.data()).zip(g.data()) {
                    *gx_i += g_i * (1.0 - y_i * y_i);
                }
            }
            Op::Relu(x) => {
                let xv = &self.slots[x.0].value;
                let gx = ensure(cot, *x, xv.shape());
                for ((gx_i, &x_i), &g_i) in gx.data_mut().iter_mut().zip(xv.data()).zip(g.data()) {
                    if x_i > 0.0 {
                        *gx_i += g_i;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &slot.value;
                let gx = ensure(cot, *x, y.shape());
                for ((gx_i, &y_i), &g_i) in gx.data_mut().iter_mut().zip(y.data()).zip(g.data()) {
                    *gx_i += g_i * y_i * (1.0 - y_i);
                }
            }
            Op::Softmax(x) => {
                let y = &slot.value;
                let (rows, cols) = (y.rows(), y.cols());
                let gx = ensure(cot, *x, y.shape());
                for r in 0..rows {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let inner = dot(yr, gr);
                    let gxr = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        gxr[c] += yr[c] * (gr[c] - inner);
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(ensure(cot, *a, g.shape()), g.data(), 1.0);
                add_into(ensure(cot, *b, g.shape()), g.data(), 1.0);
            }
            Op::Scale(x, k) => {
                add_into(ensure(cot, *x, g.shape()), g.data(), *k);
            }
            Op::SliceCols { x, start, len } => {
                let xv = &self.slots[x.0].value;
                let (rows, cols) = (xv.rows(), xv.cols());
                let gx = ensure(cot, *x, &[rows, cols]);
                for r in 0..rows {
                    let gr = g.row_slice(r);
                    let gxr = &mut gx.data_mut()[r * cols + start..r * cols + start + len];
                    for (o, &gi) in gxr.iter_mut().zip(gr) {
                        *o += gi;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = slot.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.slots[p.0].value.cols();
                    let gp = ensure(cot, p, &[rows, pc]);
                    for r in 0..rows {
                        let gr = &g.row_slice(r)[offset..offset + pc];
                        let gpr = &mut gp.data_mut()[r * pc..(r + 1) * pc];
                        for (o, &gi) in gpr.iter_mut().zip(gr) {
                            *o += gi;
                        }
                    }
                    offset += pc;
                }
            }
            Op::Reparameterize { mu, log_var, eps } => {
                let lvv = &self.slots[log_var.0].value;
                add_into(ensure(cot, *mu, g.shape()), g.data(), 1.0);
                let glv = ensure(cot, *log_var, g.shape());
                for (((glv_i, &g_i), &lv), &e) in glv
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(lvv.data())
                    .zip(eps.data())
                {
                    *glv_i += g_i * 0.5 * e * (0.5 * lv).exp();
                }
            }
            Op::KlDiagGaussian { mu, log_var } => {
                let gs = g.data()[0];
                let muv = &self.slots[mu.0].value;
                let lvv = &self.slots[log_var.0].value;
                let rows = muv.rows() as f64;
                let gmu = ensure(cot, *mu, muv.shape());
                for (o, &m) in gmu.data_mut().iter_mut().zip(muv.data()) {
                    *o += gs * m / rows;
                }
                let glv = ensure(cot, *log_var, lvv.shape());
                for (o, &lv) in glv.data_mut().iter_mut().zip(lvv.data()) {
                    *o += gs * 0.5 * (lv.exp() - 1.0) / rows;
                }
            }
            Op::Mse { pred, target } => {
                let gs = g.data()[0];
                let pv = &self.slots[pred.0].value;
                let n = pv.len() as f64;
                let gp = ensure(cot, *pred, pv.shape());
                for ((o, &p), &t) in gp.data_mut().iter_mut().zip(pv.data()).zip(target.data()) {
                    *o += gs * 2.0 * (p - t) / n;
                }
            }
            Op::Bce { pred, target } => {
                let gs = g.data()[0];
                let pv = &self.slots[pred.0].value;
                let n = pv.len() as f64;
                let gp = ensure(cot, *pred, pv.shape());
                for ((o, &p), &t) in gp.data_mut().iter_mut().zip(pv.data()).zip(target.data()) {
                    *o += gs * (p - t) / (p * (1.0 - p)) / n;
                }
            }
            Op::BceWithLogits { logits, target } => {
                let gs = g.data()[0];
                let xv = &self.slots[logits.0].value;
                let n = xv.len() as f64;
                let gx = ensure(cot, *logits, xv.shape());
                for ((o, &x), &t) in gx.data_mut().iter_mut().zip(xv.data()).zip(target.data()) {
                    *o += gs * (sigmoid(x) - t) / n;
                }
            }
            Op::SoftmaxCe { logits, classes } => {
                let gs = g.data()[0];
                let xv = &self.slots[logits.0].value;
                let (rows, cols) = (xv.rows(), xv.cols());
                let gx = ensure(cot, *logits, xv.shape());
                for (r, &c) in classes.iter().enumerate() {
                    let mut probs = xv.row_slice(r).to_vec();
                    softmax_row(&mut probs);
                    let gxr = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                    for (j, &p) in probs.iter().enumerate() {
                        let indicator = if j == c { 1.0 } else { 0.0 };
                        gxr[j] += gs * (p - indicator) / rows as f64;
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                let gs = g.data()[0];
                add_into(ensure(cot, *x, weights.shape()), weights.data(), gs);
            }
        }
    }
}

fn ensure<'a>(cot: &'a mut [Option<Tensor>], id: NodeId, shape: &[usize]) -> &'a mut Tensor {
    cot[id.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        .expect("shape preserved")
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(k: f64, x: &[f64], acc: &mut [f64]) {
    if k == 0.0 {
        return;
    }
    for (a, &xi) in acc.iter_mut().zip(x) {
        *a += k * xi;
    }
}

fn add_into(t: &mut Tensor, src: &[f64], k: f64) {
    for (a, &s) in t.data_mut().iter_mut().zip(src) {
        *a += k * s;
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &mut [f64]) {
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

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn op_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Affine => "affine",
        OpKind::Tanh => "tanh",
        OpKind::Relu => "relu",
        OpKind::Sigmoid => "sigmoid",
        OpKind::Softmax => "softmax",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_graph() -> (Graph, NodeId) {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, 2.0, 3.0]));
        (g, x)
    }

    #[test]
    fn affine_identity_passes_input_through() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![0.3, -1.2, 4.0]));
        let w = g.leaf(
            Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let b = g.leaf(Tensor::row(vec![0.0; 3]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -1.2, 4.0]);
    }

    #[test]
    fn affine_rejects_shape_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, 2.0]));
        let w = g.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.leaf(Tensor::row(vec![0.0; 2]));
        let err = g.affine(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn pointwise_values_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![0.0]));
        let t = g.tanh(x);
        let s = g.sigmoid(x);
        assert_eq!(g.value(t).data()[0], 0.0);
        assert_eq!(g.value(s).data()[0], 0.5);
    }

    #[test]
    fn softmax_of_uniform_vector_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.7; 4]));
        let y = g.softmax(x);
        for &p in g.value(y).data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let (mut g, x) = scalar_graph();
        let ones = Tensor::row(vec![1.0; 3]);
        let loss = g.weighted_sum(x, &ones).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_linear_affine_gives_input_as_weight_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![2.0, -3.0]));
        let w = g.leaf(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap());
        let b = g.leaf(Tensor::row(vec![0.0]));
        let y = g.affine(x, w, b).unwrap();
        let loss = g.weighted_sum(y, &Tensor::scalar(1.0)).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).data(), &[2.0, -3.0]);
        assert_eq!(g.grad(b).data(), &[1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let (mut g, x) = scalar_graph();
        let y = g.tanh(x);
        assert!(matches!(g.backward(y), Err(DiffError::NonScalar { .. })));
    }

    #[test]
    fn backward_accumulates_across_calls_until_zeroed() {
        let (mut g, x) = scalar_graph();
        let ones = Tensor::row(vec![1.0; 3]);
        let loss = g.weighted_sum(x, &ones).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0, 2.0, 2.0]);
        g.zero_grads();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn fan_out_sums_branch_gradients() {
        // loss = sum(x) + 2 * sum(x) => dloss/dx = 3
        let (mut g, x) = scalar_graph();
        let ones = Tensor::row(vec![1.0; 3]);
        let s1 = g.weighted_sum(x, &ones).unwrap();
        let s2 = g.weighted_sum(x, &ones).unwrap();
        let s2_scaled = g.scale(s2, 2.0);
        let loss = g.add(s1, s2_scaled).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn kl_zero_at_standard_posterior() {
        let mut g = Graph::new();
        let mu = g.leaf(Tensor::row(vec![0.0; 4]));
        let lv = g.leaf(Tensor::row(vec![0.0; 4]));
        let kl = g.kl_diag_gaussian(mu, lv).unwrap();
        assert_eq!(g.value(kl).data()[0], 0.0);
    }

    #[test]
    fn kl_closed_form_single_dimension() {
        let mut g = Graph::new();
        let mu = g.leaf(Tensor::row(vec![1.0]));
        let lv = g.leaf(Tensor::row(vec![0.0]));
        let kl = g.kl_diag_gaussian(mu, lv).unwrap();
        assert!((g.value(kl).data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_is_nonnegative_on_random_inputs() {
        let mut rng = SeededRng::new(11);
        for _ in 0..200 {
            let mut g = Graph::new();
            let mu = g.leaf(Tensor::row((0..6).map(|_| rng.next_normal()).collect()));
            let lv = g.leaf(Tensor::row(
                (0..6).map(|_| 2.0 * rng.next_f64() - 1.0).collect(),
            ));
            let kl = g.kl_diag_gaussian(mu, lv).unwrap();
            assert!(g.value(kl).data()[0] >= 0.0);
        }
    }

    #[test]
    fn reparameterize_with_zero_noise_returns_mu() {
        let mut g = Graph::new();
        let mu = g.leaf(Tensor::row(vec![0.7, -0.2]));
        let lv = g.leaf(Tensor::row(vec![0.3, 0.3]));
        let z = g
            .reparameterize_with(mu, lv, Tensor::row(vec![0.0, 0.0]))
            .unwrap();
        assert_eq!(g.value(z).data(), &[0.7, -0.2]);
    }

    #[test]
    fn reparameterize_with_tiny_variance_collapses_to_mu() {
        let mut g = Graph::new();
        let mu = g.leaf(Tensor::row(vec![0.25]));
        let lv = g.leaf(Tensor::row(vec![-60.0]));
        let mut rng = SeededRng::new(5);
        let z = g.reparameterize(mu, lv, &mut rng).unwrap();
        assert!((g.value(z).data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn reparameterize_moments_match_posterior() {
        let mut g = Graph::new();
        let n = 1_000_000;
        let mu = g.leaf(Tensor::matrix(n, 1, vec![0.0; n]).unwrap());
        let lv = g.leaf(Tensor::matrix(n, 1, vec![0.0; n]).unwrap());
        let mut rng = SeededRng::new(13);
        let z = g.reparameterize(mu, lv, &mut rng).unwrap();
        let data = g.value(z).data();
        let mean = data.iter().sum::<f64>() / n as f64;
        let var = data.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "variance {var}");
    }

    #[test]
    fn mse_of_identical_tensors_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![0.4, -0.8]));
        let loss = g.mse(x, &Tensor::row(vec![0.4, -0.8])).unwrap();
        assert_eq!(g.value(loss).data()[0], 0.0);
    }

    #[test]
    fn bce_half_prediction_of_one_is_ln_two() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::row(vec![0.5]));
        let loss = g.bce(p, &Tensor::row(vec![1.0])).unwrap();
        assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_rejects_predictions_outside_open_interval() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::row(vec![1.0]));
        assert!(matches!(
            g.bce(p, &Tensor::row(vec![1.0])),
            Err(DiffError::InvalidProbability { .. })
        ));
    }

    #[test]
    fn bce_with_logits_matches_plain_bce() {
        let mut rng = SeededRng::new(21);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..5).map(|_| 4.0 * rng.next_normal()).collect();
            let targets: Vec<f64> = (0..5).map(|_| rng.next_f64()).collect();
            let mut g = Graph::new();
            let x = g.leaf(Tensor::row(logits.clone()));
            let s = g.sigmoid(x);
            let l_plain = g.bce(s, &Tensor::row(targets.clone())).unwrap();
            let l_fused = g.bce_with_logits(x, &Tensor::row(targets)).unwrap();
            let a = g.value(l_plain).data()[0];
            let b = g.value(l_fused).data()[0];
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_ce_uniform_logits_two_classes_is_ln_two() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![0.0, 0.0]));
        let loss = g.softmax_ce(x, &[0]).unwrap();
        assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softmax_ce_rejects_class_out_of_range() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![0.0, 0.0]));
        assert!(matches!(
            g.softmax_ce(x, &[2]),
            Err(DiffError::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 4, (0..8).map(|i| i as f64).collect()).unwrap());
        let a = g.slice_cols(x, 0, 1).unwrap();
        let b = g.slice_cols(x, 1, 3).unwrap();
        let y = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let ones = Tensor::matrix(2, 4, vec![1.0; 8]).unwrap();
        let loss = g.weighted_sum(y, &ones).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0; 8]);
    }

    #[test]
    fn forward_dispatch_covers_all_kinds() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![0.5, -0.5]));
        let w = g.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.leaf(Tensor::row(vec![0.0, 0.0]));
        assert!(g.forward(OpKind::Affine, &[x, w, b]).is_ok());
        for kind in [OpKind::Tanh, OpKind::Relu, OpKind::Sigmoid, OpKind::Softmax] {
            assert!(g.forward(kind, &[x]).is_ok());
        }
        assert!(matches!(
            g.forward(OpKind::Affine, &[x]),
            Err(DiffError::Arity { .. })
        ));
    }
}
