//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, so node ids are
//! already a topological order: [`Graph::backward`] walks the tape once in
//! reverse and visits every node exactly once. Values are computed eagerly;
//! the tape only keeps what each backward rule needs.

use crate::kernels::{self, ConvGeometry};
use crate::tensor::{matmul, Real, Tensor, TensorError};

/// Probability floor used by [`Graph::cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on the total mass of a soft cross-entropy target.
pub const TARGET_SUM_TOLERANCE: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwiseOp {
    Add,
    Mul,
}

/// How the right-hand operand of an element-wise op maps onto the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    /// Identical shapes.
    Full,
    /// `b` has shape `(C)`; `a` is `(N, C, ...)` with `inner` trailing elements per channel.
    Channel { channels: usize, inner: usize },
    /// `b` has shape `(N, C)`; `a` is `(N, C, ...)`.
    BatchChannel { inner: usize },
}

impl Broadcast {
    /// Run length of `a` elements that share one `b` element.
    #[inline]
    fn block(self) -> usize {
        match self {
            Broadcast::Full => 1,
            Broadcast::Channel { inner, .. } | Broadcast::BatchChannel { inner } => inner.max(1),
        }
    }

    /// Index into `b` of block `j`.
    #[inline]
    fn source(self, j: usize) -> usize {
        match self {
            Broadcast::Channel { channels, .. } => j % channels,
            Broadcast::Full | Broadcast::BatchChannel { .. } => j,
        }
    }

    /// Visit `(a_chunk, b_value)` pairs, where each chunk of `a` shares
    /// one `b` element.
    #[inline]
    fn zip_mut<T: Copy>(self, a: &mut [T], b: &[T], mut f: impl FnMut(&mut T, T)) {
        if let Broadcast::Full = self {
            for (x, &y) in a.iter_mut().zip(b) {
                f(x, y);
            }
            return;
        }
        for (j, chunk) in a.chunks_mut(self.block()).enumerate() {
            let y = b[self.source(j)];
            for x in chunk {
                f(x, y);
            }
        }
    }
}

/// Axis selection for [`Graph::softmax`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftmaxAxis {
    /// Last axis of an `(N, K)` tensor.
    Class,
    /// Flattened `H x W` of each `(n, c)` plane of an `(N, C, H, W)` tensor.
    Spatial,
}

/// Target of a cross-entropy loss.
#[derive(Debug, Clone)]
pub enum Target<T: Real = f32> {
    /// One class index per sample.
    Hard(Vec<usize>),
    /// A non-negative map per sample (same shape as the predictions) summing to 1.
    Soft(Tensor<T>),
}

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Softmax {
        input: Var,
        row: usize,
    },
    CrossEntropy {
        probs: Var,
        target: Target<T>,
        exact: f64,
    },
    Ewise {
        op: EwiseOp,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Reshape(Var),
    SelectRow {
        table: Var,
        row: usize,
    },
    Sum {
        input: Var,
        exact: f64,
    },
    Scale {
        input: Var,
        factor: T,
    },
}

impl<T: Real> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::Linear {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::Relu(v) | Op::Reshape(v) => vec![*v],
            Op::Sum { input, .. } => vec![*input],
            Op::MaxPool { input, .. }
            | Op::Upsample { input, .. }
            | Op::Softmax { input, .. }
            | Op::Scale { input, .. } => vec![*input],
            Op::CrossEntropy { probs, .. } => vec![*probs],
            Op::Ewise { a, b, .. } => vec![*a, *b],
            Op::SelectRow { table, .. } => vec![*table],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `var`; zeros when `var` did not
    /// contribute to the loss.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[var.0].clone()),
        }
    }

    /// `None` when the loss does not depend on `var`.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Tensor<T> {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0].clone()))
    }
}

/// The tape. Confined to one thread; build a fresh graph per forward pass.
#[derive(Debug, Clone, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients (parameters, inputs under test).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        let (n, c, h, w) = self
            .value(input)
            .dims4()
            .ok_or_else(|| TensorError::shape(OP, format!("input must be NCHW, got {:?}", self.shape(input))))?;
        let (o, wi, kh, kw) = self
            .value(weight)
            .dims4()
            .ok_or_else(|| TensorError::shape(OP, format!("weight must be OIKK, got {:?}", self.shape(weight))))?;
        if wi != c {
            return Err(TensorError::shape(
                OP,
                format!("input channels (dim 1) = {c} but weight expects {wi}"),
            ));
        }
        if kh != kw {
            return Err(TensorError::shape(OP, format!("kernel must be square, got {kh}x{kw}")));
        }
        if self.shape(bias) != [o] {
            return Err(TensorError::shape(
                OP,
                format!("bias shape {:?} does not match {o} output channels", self.shape(bias)),
            ));
        }
        if stride == 0 {
            return Err(TensorError::arg(OP, "stride must be >= 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::shape(
                OP,
                format!("kernel {kh} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let geom = ConvGeometry {
            in_channels: c,
            out_channels: o,
            kernel: kh,
            stride,
            pad,
            in_h: h,
            in_w: w,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let mut out = Tensor::zeros(vec![n, o, geom.out_h, geom.out_w]);
        kernels::conv_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            &geom,
            out.data_mut(),
        );
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// `input (N, D) . weight (M, D)^T + bias (M)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        const OP: &str = "linear";
        let (n, d) = match self.shape(input) {
            &[n, d] => (n, d),
            s => return Err(TensorError::shape(OP, format!("input must be (N, D), got {s:?}"))),
        };
        let (m, wd) = match self.shape(weight) {
            &[m, wd] => (m, wd),
            s => return Err(TensorError::shape(OP, format!("weight must be (M, D), got {s:?}"))),
        };
        if wd != d {
            return Err(TensorError::shape(
                OP,
                format!("input last dim = {d} but weight expects {wd}"),
            ));
        }
        if self.shape(bias) != [m] {
            return Err(TensorError::shape(
                OP,
                format!("bias shape {:?} does not match {m} outputs", self.shape(bias)),
            ));
        }
        let mut out = vec![T::ZERO; n * m];
        let b = self.value(bias).data();
        for row in out.chunks_mut(m) {
            row.copy_from_slice(b);
        }
        matmul(
            n,
            d,
            m,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            &mut out,
            true,
        );
        let out = Tensor::new(vec![n, m], out)?;
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v > T::ZERO { v } else { T::ZERO })
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Relu(input))
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize) -> Result<Var, TensorError> {
        const OP: &str = "maxpool2d";
        let (n, c, h, w) = self
            .value(input)
            .dims4()
            .ok_or_else(|| TensorError::shape(OP, format!("input must be NCHW, got {:?}", self.shape(input))))?;
        if k == 0 {
            return Err(TensorError::arg(OP, "window must be >= 1"));
        }
        if h % k != 0 || w % k != 0 {
            return Err(TensorError::shape(
                OP,
                format!("spatial dims {h}x{w} not divisible by window {k}"),
            ));
        }
        let mut out = Tensor::zeros(vec![n, c, h / k, w / k]);
        let mut argmax = vec![0u32; out.len()];
        kernels::maxpool_forward(
            self.value(input).data(),
            n * c,
            h,
            w,
            k,
            out.data_mut(),
            &mut argmax,
        );
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var, TensorError> {
        const OP: &str = "upsample_nearest";
        let (n, c, h, w) = self
            .value(input)
            .dims4()
            .ok_or_else(|| TensorError::shape(OP, format!("input must be NCHW, got {:?}", self.shape(input))))?;
        if factor == 0 {
            return Err(TensorError::arg(OP, "factor must be >= 1"));
        }
        let mut out = Tensor::zeros(vec![n, c, h * factor, w * factor]);
        kernels::upsample_forward(self.value(input).data(), n * c, h, w, factor, out.data_mut());
        Ok(self.push(out, Op::Upsample { input, factor }))
    }

    pub fn softmax(&mut self, input: Var, axis: SoftmaxAxis) -> Result<Var, TensorError> {
        const OP: &str = "softmax";
        let shape = self.shape(input).to_vec();
        let row = match (axis, shape.as_slice()) {
            (SoftmaxAxis::Class, &[_, k]) => k,
            (SoftmaxAxis::Spatial, &[_, _, h, w]) => h * w,
            _ => {
                return Err(TensorError::arg(
                    OP,
                    format!("axis {axis:?} not valid for shape {shape:?}"),
                ))
            }
        };
        if row == 0 {
            return Err(TensorError::arg(OP, "empty softmax axis"));
        }
        let mut out = Tensor::zeros(shape);
        kernels::softmax_rows(self.value(input).data(), row, out.data_mut());
        Ok(self.push(out, Op::Softmax { input, row }))
    }

    /// Mean over the batch of `-sum(t * ln(max(p, 1e-12)))`.
    ///
    /// Hard targets index the class axis of an `(N, K)` probability tensor;
    /// soft targets have the probability tensor's shape and must sum to 1
    /// per sample.
    pub fn cross_entropy(&mut self, probs: Var, target: Target<T>) -> Result<Var, TensorError> {
        const OP: &str = "cross_entropy";
        let p = self.value(probs);
        let n = *p
            .shape()
            .first()
            .ok_or_else(|| TensorError::shape(OP, "predictions must have a batch axis"))?;
        if n == 0 {
            return Err(TensorError::shape(OP, "empty batch"));
        }
        let per = p.len() / n;
        let floor = T::from_f64(PROB_FLOOR);
        let mut total = 0.0f64;
        match &target {
            Target::Hard(labels) => {
                if p.rank() != 2 {
                    return Err(TensorError::shape(
                        OP,
                        format!("hard targets need (N, K) predictions, got {:?}", p.shape()),
                    ));
                }
                if labels.len() != n {
                    return Err(TensorError::shape(
                        OP,
                        format!("{} labels for batch of {n}", labels.len()),
                    ));
                }
                for (i, &label) in labels.iter().enumerate() {
                    if label >= per {
                        return Err(TensorError::arg(
                            OP,
                            format!("label {label} out of range for {per} classes"),
                        ));
                    }
                    let v = p.data()[i * per + label];
                    total -= clamp(v, floor).ln().to_f64();
                }
            }
            Target::Soft(t) => {
                if t.shape() != p.shape() {
                    return Err(TensorError::shape(
                        OP,
                        format!("target shape {:?} vs predictions {:?}", t.shape(), p.shape()),
                    ));
                }
                for (i, (ts, ps)) in t.data().chunks(per).zip(p.data().chunks(per)).enumerate() {
                    let mut mass = 0.0f64;
                    for (&tv, &pv) in ts.iter().zip(ps) {
                        if tv < T::ZERO {
                            return Err(TensorError::arg(OP, "soft target has negative entries"));
                        }
                        mass += tv.to_f64();
                        if tv > T::ZERO {
                            total -= tv.to_f64() * clamp(pv, floor).ln().to_f64();
                        }
                    }
                    if (mass - 1.0).abs() > TARGET_SUM_TOLERANCE {
                        return Err(TensorError::UnnormalizedTarget { sample: i, sum: mass });
                    }
                }
            }
        }
        let exact = total / n as f64;
        Ok(self.push(
            Tensor::scalar(T::from_f64(exact)),
            Op::CrossEntropy {
                probs,
                target,
                exact,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.ewise(a, b, EwiseOp::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.ewise(a, b, EwiseOp::Mul)
    }

    /// Element-wise `a op b`. `b` may match `a` exactly, be a per-channel
    /// vector `(C)`, or a per-sample per-channel matrix `(N, C)`, broadcast
    /// over the trailing (spatial) axes of `a`.
    pub fn ewise(&mut self, a: Var, b: Var, op: EwiseOp) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bcast = if sa == sb {
            Broadcast::Full
        } else if sa.len() >= 2 && sb.len() == 1 && sb[0] == sa[1] {
            Broadcast::Channel {
                channels: sa[1],
                inner: sa[2..].iter().product(),
            }
        } else if sa.len() >= 2 && sb.len() == 2 && sb[..] == sa[..2] {
            Broadcast::BatchChannel {
                inner: sa[2..].iter().product(),
            }
        } else {
            return Err(TensorError::shape(
                "ewise",
                format!("cannot broadcast {sb:?} onto {sa:?}"),
            ));
        };
        let mut data = self.value(a).data().to_vec();
        let bv = self.value(b).data();
        match op {
            EwiseOp::Add => bcast.zip_mut(&mut data, bv, |x, y| *x += y),
            EwiseOp::Mul => bcast.zip_mut(&mut data, bv, |x, y| *x *= y),
        }
        let out = Tensor::new(sa, data)?;
        Ok(self.push(out, Op::Ewise { op, a, b, bcast }))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        let out = self.value(input).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(input)))
    }

    /// `(N, C, H, W)` to `(N, C*H*W)`.
    pub fn flatten(&mut self, input: Var) -> Result<Var, TensorError> {
        let shape = self.shape(input);
        let n = *shape
            .first()
            .ok_or_else(|| TensorError::shape("flatten", "scalar input"))?;
        let rest = shape[1..].iter().product::<usize>();
        self.reshape(input, vec![n, rest])
    }

    /// Row `row` of a `(R, C)` table as a `(C)` vector (one-hot product).
    pub fn select_row(&mut self, table: Var, row: usize) -> Result<Var, TensorError> {
        let (rows, cols) = match self.shape(table) {
            &[r, c] => (r, c),
            s => return Err(TensorError::shape("select_row", format!("table must be 2-D, got {s:?}"))),
        };
        if row >= rows {
            return Err(TensorError::arg(
                "select_row",
                format!("row {row} out of range for {rows} rows"),
            ));
        }
        let data = self.value(table).data()[row * cols..(row + 1) * cols].to_vec();
        let out = Tensor::new(vec![cols], data)?;
        Ok(self.push(out, Op::SelectRow { table, row }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self
            .value(input)
            .data()
            .iter()
            .fold(0.0f64, |acc, v| acc + v.to_f64());
        self.push(
            Tensor::scalar(T::from_f64(total)),
            Op::Sum {
                input,
                exact: total,
            },
        )
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale { input, factor })
    }

    /// Mean of several scalar losses.
    pub fn mean_of(&mut self, terms: &[Var]) -> Result<Var, TensorError> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| TensorError::arg("mean_of", "no terms"))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(self.scale(acc, T::from_f64(1.0 / terms.len() as f64)))
    }

    /// Value of a scalar node without the final rounding to `T`: reductions
    /// keep their `f64` accumulator, and sums/products/scalings of scalars
    /// are re-evaluated in `f64`.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        if node.value.len() != 1 {
            return node.value.data()[0].to_f64();
        }
        match &node.op {
            Op::Sum { exact, .. } | Op::CrossEntropy { exact, .. } => *exact,
            Op::Scale { input, factor } if self.value(*input).len() == 1 => {
                factor.to_f64() * self.scalar_f64(*input)
            }
            Op::Ewise { op, a, b, .. }
                if self.value(*a).len() == 1 && self.value(*b).len() == 1 =>
            {
                let (x, y) = (self.scalar_f64(*a), self.scalar_f64(*b));
                match op {
                    EwiseOp::Add => x + y,
                    EwiseOp::Mul => x * y,
                }
            }
            _ => node.value.item().to_f64(),
        }
    }

    /// Reverse pass from a scalar `loss`. Leaves keep their gradients in the
    /// returned [`Gradients`]; interior gradients are released as soon as
    /// they have been propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(loss_value.shape().to_vec(), T::ONE));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, g, &mut grads);
        }
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = self.value(*input);
                let n = x.shape()[0];
                let mut dx = self.wants(*input).then(|| vec![T::ZERO; x.len()]);
                let mut dw = self
                    .wants(*weight)
                    .then(|| vec![T::ZERO; self.value(*weight).len()]);
                let mut db = self
                    .wants(*bias)
                    .then(|| vec![T::ZERO; self.value(*bias).len()]);
                kernels::conv_backward(
                    x.data(),
                    self.value(*weight).data(),
                    gd,
                    n,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.accumulate(grads, *input, dx);
                self.accumulate(grads, *weight, dw);
                self.accumulate(grads, *bias, db);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let m = w.shape()[0];
                let dx = self.wants(*input).then(|| {
                    let mut dx = vec![T::ZERO; n * d];
                    matmul(n, m, d, gd, false, w.data(), false, &mut dx, false);
                    dx
                });
                let dw = self.wants(*weight).then(|| {
                    let mut dw = vec![T::ZERO; m * d];
                    matmul(m, n, d, gd, true, x.data(), false, &mut dw, false);
                    dw
                });
                let db = self.wants(*bias).then(|| {
                    let mut db = vec![T::ZERO; m];
                    for row in gd.chunks(m) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    db
                });
                self.accumulate(grads, *input, dx);
                self.accumulate(grads, *weight, dw);
                self.accumulate(grads, *bias, db);
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let mut dx = g.into_data();
                for (d, &xv) in dx.iter_mut().zip(x) {
                    if xv <= T::ZERO {
                        *d = T::ZERO;
                    }
                }
                self.accumulate(grads, *input, Some(dx));
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::ZERO; self.value(*input).len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx[src as usize] += gv;
                }
                self.accumulate(grads, *input, Some(dx));
            }
            Op::Upsample { input, factor } => {
                let (n, c, h, w) = self.value(*input).dims4().expect("rank 4");
                let mut dx = vec![T::ZERO; n * c * h * w];
                kernels::upsample_backward(gd, n * c, h, w, *factor, &mut dx);
                self.accumulate(grads, *input, Some(dx));
            }
            Op::Softmax { input, row } => {
                let y = node.value.data();
                let mut dx = vec![T::ZERO; y.len()];
                for ((ys, gs), ds) in y.chunks(*row).zip(gd.chunks(*row)).zip(dx.chunks_mut(*row)) {
                    let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in ds.iter_mut().zip(ys).zip(gs) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *input, Some(dx));
            }
            Op::CrossEntropy { probs, target, .. } => {
                let p = self.value(*probs);
                let n = p.shape()[0];
                let per = p.len() / n;
                let scale = gd[0] / T::from_f64(n as f64);
                let floor = T::from_f64(PROB_FLOOR);
                let mut dp = vec![T::ZERO; p.len()];
                let mut put = |i: usize, t: T| {
                    let pv = p.data()[i];
                    if pv > floor {
                        dp[i] = -(t * scale) / pv;
                    }
                };
                match target {
                    Target::Hard(labels) => {
                        for (s, &label) in labels.iter().enumerate() {
                            put(s * per + label, T::ONE);
                        }
                    }
                    Target::Soft(t) => {
                        for (i, &tv) in t.data().iter().enumerate() {
                            if tv > T::ZERO {
                                put(i, tv);
                            }
                        }
                    }
                }
                self.accumulate(grads, *probs, Some(dp));
            }
            Op::Ewise { op, a, b, bcast } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*b) {
                    let mut db = vec![T::ZERO; bv.len()];
                    if let Broadcast::Full = bcast {
                        for (i, (d, &gv)) in db.iter_mut().zip(gd).enumerate() {
                            *d = match op {
                                EwiseOp::Add => gv,
                                EwiseOp::Mul => gv * av[i],
                            };
                        }
                    } else {
                        let block = bcast.block();
                        for (j, gs) in gd.chunks(block).enumerate() {
                            let contrib = match op {
                                EwiseOp::Add => gs.iter().copied().sum(),
                                EwiseOp::Mul => gs
                                    .iter()
                                    .zip(&av[j * block..])
                                    .map(|(&gv, &x)| gv * x)
                                    .sum(),
                            };
                            db[bcast.source(j)] += contrib;
                        }
                    }
                    self.accumulate(grads, *b, Some(db));
                }
                if self.wants(*a) {
                    let mut da = g.into_data();
                    if let EwiseOp::Mul = op {
                        bcast.zip_mut(&mut da, bv, |d, y| *d *= y);
                    }
                    self.accumulate(grads, *a, Some(da));
                }
            }
            Op::Reshape(input) => {
                self.accumulate(grads, *input, Some(g.into_data()));
            }
            Op::SelectRow { table, row } => {
                let t = self.value(*table);
                let cols = t.shape()[1];
                let mut dt = vec![T::ZERO; t.len()];
                dt[row * cols..(row + 1) * cols].copy_from_slice(gd);
                self.accumulate(grads, *table, Some(dt));
            }
            Op::Sum { input, .. } => {
                let dx = vec![gd[0]; self.value(*input).len()];
                self.accumulate(grads, *input, Some(dx));
            }
            Op::Scale { input, factor } => {
                let mut dx = g.into_data();
                for v in dx.iter_mut() {
                    *v *= *factor;
                }
                self.accumulate(grads, *input, Some(dx));
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], target: Var, delta: Option<Vec<T>>) {
        let Some(delta) = delta else {
            return;
        };
        if !self.wants(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => {
                let shape = self.shape(target).to_vec();
                *slot = Some(Tensor::new(shape, delta).expect("gradient shape"));
            }
        }
    }
}

#[inline]
fn clamp<T: Real>(v: T, floor: T) -> T {
    if v < floor {
        floor
    } else if v > T::ONE {
        T::ONE
    } else {
        v
    }
}
