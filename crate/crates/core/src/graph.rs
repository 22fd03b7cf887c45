//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends one node to the [`Graph`]; nodes are stored in
//! execution order, so the record is already topologically sorted and the
//! backward sweep visits each node exactly once, in reverse. Tensors are
//! immutable values; a node keeps its output plus whatever the operation
//! saved for its backward pass.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Debug;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Padding};
use crate::scalar::Scalar;
use crate::tensor::{reduce_to_shape, zip_broadcast, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

trait OpBackward<T: Scalar>: Debug {
    /// Gradients with respect to each input, given the upstream gradient.
    /// Entries where `needs[i]` is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<Var>,
    backward: Option<Box<dyn OpBackward<T>>>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    named: HashMap<String, Var>,
}

/// Gradients produced by one backward sweep, indexed by leaf [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            named: HashMap::new(),
        }
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

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, vec![], None, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, vec![], None, requires_grad)
    }

    /// Named trainable leaf. Re-entering the same name returns the existing
    /// node so shared parameters accumulate gradients from every use.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = self.push(t.clone(), vec![], None, true);
        self.named.insert(name.to_string(), v);
        v
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        inputs: Vec<Var>,
        backward: Option<Box<dyn OpBackward<T>>>,
        leaf_requires_grad: bool,
    ) -> Var {
        let requires_grad = if backward.is_some() {
            inputs.iter().any(|v| self.nodes[v.0].requires_grad)
        } else {
            leaf_requires_grad
        };
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    fn op(&mut self, value: Tensor<T>, inputs: Vec<Var>, b: impl OpBackward<T> + 'static) -> Var {
        self.push(value, inputs, Some(Box::new(b)), false)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_broadcast("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.op(v, vec![a, b], AddOp))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_broadcast("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.op(v, vec![a, b], SubOp))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_broadcast("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.op(v, vec![a, b], MulOp))
    }

    /// Multiply by a learnable single-element tensor.
    pub fn scale(&mut self, x: Var, gamma: Var) -> Result<Var> {
        if self.value(gamma).len() != 1 {
            return Err(Error::invalid("scale", "gamma must hold a single scalar"));
        }
        self.mul(x, gamma)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > T::zero() { a } else { T::zero() });
        self.op(v, vec![x], ReluOp)
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        let al = T::from_f64(alpha);
        let v = self.value(x).map(|a| if a > T::zero() { a } else { al * a });
        self.op(v, vec![x], LeakyReluOp { alpha: al })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid_scalar);
        self.op(v, vec![x], SigmoidOp)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.tanh());
        self.op(v, vec![x], TanhOp)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.abs());
        self.op(v, vec![x], AbsOp)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        let v = self.value(x).map(|a| if a < l { l } else if a > h { h } else { a });
        self.op(v, vec![x], ClampOp { lo: l, hi: h })
    }

    /// `x / s` for a single-element divisor node.
    pub fn div_by_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let v = self.value(x).map(|a| a / sv);
        Ok(self.op(v, vec![x, s], DivByScalarOp))
    }

    // ---- structure ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.op(v, vec![x], ReshapeOp))
    }

    /// Concatenate two tensors along the channel axis (axis 1).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, c1, c2, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (c1 + c2) * plane);
        for s in 0..n {
            data.extend_from_slice(&ta.data()[s * c1 * plane..(s + 1) * c1 * plane]);
            data.extend_from_slice(&tb.data()[s * c2 * plane..(s + 1) * c2 * plane]);
        }
        let v = Tensor::new(vec![n, c1 + c2, h, w], data);
        Ok(self.op(v, vec![a, b], ConcatChannelsOp { c1 }))
    }

    /// Channels `[from, to)` of a 4-D tensor.
    pub fn channel_slice(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 || from >= to || to > s[1] {
            return Err(Error::invalid(
                "channel_slice",
                format!("range {from}..{to} on shape {s:?}"),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (to - from) * plane);
        for smp in 0..n {
            let base = (smp * c + from) * plane;
            data.extend_from_slice(&t.data()[base..base + (to - from) * plane]);
        }
        let v = Tensor::new(vec![n, to - from, h, w], data);
        Ok(self.op(v, vec![x], ChannelSliceOp { from, to }))
    }

    /// Swap the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let v = transpose_last2_value(self.value(x))?;
        Ok(self.op(v, vec![x], TransposeLast2Op))
    }

    // ---- contractions ----

    /// Matrix product for rank-2 tensors or batched rank-3 tensors with equal
    /// leading dimension.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul_value(self.value(a), self.value(b))?;
        Ok(self.op(v, vec![a, b], MatMulOp))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom = kernels::conv_geometry(self.shape(x), self.shape(w), stride, padding)?;
        check_bias("conv2d", self.value(b), geom.cout)?;
        let v = kernels::conv2d(self.value(x), self.value(w), self.value(b).data(), &geom);
        Ok(self.op(v, vec![x, w, b], Conv2dOp { geom }))
    }

    /// Transposed convolution with `same` padding: spatial dims multiply by
    /// `stride`. The forward pass is the exact adjoint of [`Graph::conv2d`]
    /// with the same weight, so `<conv2d(x,w), y> == <x, conv2d_transpose(y,w)>`.
    /// Weight layout is `[c_in, c_out, kh, kw]`.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::invalid(
                "conv2d_transpose",
                format!("expected 4-D input and weight, got {xs:?} / {ws:?}"),
            ));
        }
        if xs[1] != ws[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d_transpose (input channels)",
                lhs: xs,
                rhs: ws,
            });
        }
        let cout = ws[1];
        // Geometry of the underlying convolution this op is the adjoint of.
        let big = [xs[0], cout, xs[2] * stride, xs[3] * stride];
        let geom = kernels::conv_geometry(&big, &ws, stride, Padding::Same)?;
        debug_assert_eq!(geom.ho, xs[2]);
        check_bias("conv2d_transpose", self.value(b), cout)?;
        let mut v = kernels::conv2d_input_grad(self.value(x), self.value(w), &geom);
        let bias = self.value(b);
        if bias.data().iter().any(|&bv| bv != T::zero()) {
            v = zip_broadcast(
                "conv2d_transpose bias",
                &v,
                &bias.reshape(&[1, cout, 1, 1])?,
                |a, bv| a + bv,
            )?;
        }
        Ok(self.op(v, vec![x, w, b], ConvTranspose2dOp { geom }))
    }

    // ---- reductions and normalizations ----

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for shape {:?}", t.shape()),
            ));
        }
        let v = softmax_value(t, axis);
        Ok(self.op(v, vec![x], SoftmaxOp { axis }))
    }

    /// Per-channel spatial mean: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_average(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::invalid(
                "global_average",
                format!("expected 4-D input, got {s:?}"),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let inv = T::from_f64(1.0 / plane as f64);
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n * c {
            let sum: T = t.data()[i * plane..(i + 1) * plane].iter().copied().sum();
            data.push(sum * inv);
        }
        let v = Tensor::new(vec![n, c, 1, 1], data);
        Ok(self.op(v, vec![x], GlobalAverageOp))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.op(v, vec![x], SumAllOp)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let inv = T::from_f64(1.0 / t.len() as f64);
        let v = Tensor::scalar(t.sum() * inv);
        self.op(v, vec![x], MeanAllOp)
    }

    /// Training-mode batch normalization over `(N, H, W)` per channel.
    /// `scale`/`shift` are `[C]` parameter nodes. Returns the output node plus
    /// the biased batch mean and variance for the caller's running-stat
    /// update. Fails when a channel has fewer than two elements.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        epsilon: f64,
    ) -> Result<(Var, Tensor<T>, Tensor<T>)> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::invalid(
                "batch_norm",
                format!("expected 4-D input, got {s:?}"),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let m = n * h * w;
        if m < 2 {
            return Err(Error::DegenerateStatistics { elements: m });
        }
        if self.value(scale).len() != c || self.value(shift).len() != c {
            return Err(Error::invalid(
                "batch_norm",
                format!("scale/shift must be [{c}]"),
            ));
        }
        let plane = h * w;
        let inv_m = T::from_f64(1.0 / m as f64);
        let eps = T::from_f64(epsilon);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for smp in 0..n {
                let base = (smp * c + ch) * plane;
                acc = acc + t.data()[base..base + plane].iter().copied().sum();
            }
            mean[ch] = acc * inv_m;
            let mu = mean[ch];
            let mut vacc = T::zero();
            for smp in 0..n {
                let base = (smp * c + ch) * plane;
                for &v in &t.data()[base..base + plane] {
                    let d = v - mu;
                    vacc = vacc + d * d;
                }
            }
            var[ch] = vacc * inv_m;
        }
        let invstd: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let (sc, sh) = (self.value(scale).clone(), self.value(shift).clone());
        let mut xhat = vec![T::zero(); t.len()];
        let mut out = vec![T::zero(); t.len()];
        for smp in 0..n {
            for ch in 0..c {
                let base = (smp * c + ch) * plane;
                let (mu, is, g, b) = (mean[ch], invstd[ch], sc.data()[ch], sh.data()[ch]);
                for i in base..base + plane {
                    let xh = (t.data()[i] - mu) * is;
                    xhat[i] = xh;
                    out[i] = g * xh + b;
                }
            }
        }
        let mean_t = Tensor::new(vec![c], mean);
        let var_t = Tensor::new(vec![c], var);
        let op = BatchNormOp {
            xhat: Tensor::new(s.to_vec(), xhat),
            invstd: Tensor::new(vec![c], invstd),
        };
        let y = self.op(Tensor::new(s.to_vec(), out), vec![x, scale, shift], op);
        Ok((y, mean_t, var_t))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Returns gradients for every leaf
    /// with `requires_grad`; parameters not reached by the sweep simply have
    /// no entry (callers treat that as a zero gradient).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(op) = node.backward.as_ref() else {
                continue; // leaf: keep the accumulated gradient
            };
            let Some(gout) = grads[id].take() else {
                continue; // not on any path to the loss
            };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let gs = op.backward(&inputs, &node.value, &gout, &needs);
            debug_assert_eq!(gs.len(), node.inputs.len());
            for (slot, g) in node.inputs.iter().zip(gs) {
                if let Some(g) = g {
                    debug_assert_eq!(g.shape(), self.nodes[slot.0].value.shape());
                    accumulate(&mut grads[slot.0], g);
                }
            }
        }
        // Drop everything but leaf gradients.
        for (id, slot) in grads.iter_mut().enumerate() {
            if self.nodes[id].backward.is_some() {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradient of every named parameter, zero-filled for parameters the loss
    /// does not reach.
    pub fn named_gradients(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.named {
            let g = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
            out.insert(name.clone(), g);
        }
        out
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            let sum = zip_broadcast("grad-acc", acc, &g, |a, b| a + b)
                .expect("accumulated gradients always share a shape");
            *slot = Some(sum);
        }
    }
}

fn check_bias<T: Scalar>(op: &'static str, b: &Tensor<T>, cout: usize) -> Result<()> {
    if b.len() != cout {
        return Err(Error::invalid(
            op,
            format!("bias must have {cout} entries, got {}", b.len()),
        ));
    }
    Ok(())
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // Stable in both tails.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn transpose_last2_value<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let s = t.shape();
    let (batch, m, n) = match s.len() {
        2 => (1, s[0], s[1]),
        3 => (s[0], s[1], s[2]),
        _ => {
            return Err(Error::invalid(
                "transpose_last2",
                format!("expected rank 2 or 3, got {s:?}"),
            ))
        }
    };
    let mut data = vec![T::zero(); t.len()];
    for b in 0..batch {
        let src = &t.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut data[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape.swap(r - 2, r - 1);
    Ok(Tensor::new(shape, data))
}

fn matmul_value<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    match (sa.len(), sb.len()) {
        (2, 2) => {
            if sa[1] != sb[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let out = kernels::matmul(a.data(), b.data(), sa[0], sa[1], sb[1]);
            Ok(Tensor::new(vec![sa[0], sb[1]], out))
        }
        (3, 3) => {
            if sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut data = vec![T::zero(); batch * m * n];
            for s in 0..batch {
                kernels::matmul_acc(
                    &a.data()[s * m * k..(s + 1) * m * k],
                    &b.data()[s * k * n..(s + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut data[s * m * n..(s + 1) * m * n],
                );
            }
            Ok(Tensor::new(vec![batch, m, n], data))
        }
        _ => Err(Error::ShapeMismatch {
            op: "matmul (rank)",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        }),
    }
}

fn softmax_value<T: Scalar>(t: &Tensor<T>, axis: usize) -> Tensor<T> {
    let s = t.shape();
    let axis_len = s[axis];
    let inner: usize = s[axis + 1..].iter().product();
    let outer: usize = s[..axis].iter().product();
    let mut data = vec![T::zero(); t.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut maxv = t.data()[base];
            for j in 1..axis_len {
                let v = t.data()[base + j * inner];
                if v > maxv {
                    maxv = v;
                }
            }
            let mut denom = T::zero();
            for j in 0..axis_len {
                let e = (t.data()[base + j * inner] - maxv).exp();
                data[base + j * inner] = e;
                denom = denom + e;
            }
            for j in 0..axis_len {
                data[base + j * inner] = data[base + j * inner] / denom;
            }
        }
    }
    Tensor::new(s.to_vec(), data)
}

// ---- op backward implementations ----

#[derive(Debug)]
struct AddOp;
impl<T: Scalar> OpBackward<T> for AddOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![
            needs[0].then(|| reduce_to_shape(grad, inputs[0].shape())),
            needs[1].then(|| reduce_to_shape(grad, inputs[1].shape())),
        ]
    }
}

#[derive(Debug)]
struct SubOp;
impl<T: Scalar> OpBackward<T> for SubOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![
            needs[0].then(|| reduce_to_shape(grad, inputs[0].shape())),
            needs[1].then(|| reduce_to_shape(&grad.map(|g| -g), inputs[1].shape())),
        ]
    }
}

#[derive(Debug)]
struct MulOp;
impl<T: Scalar> OpBackward<T> for MulOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let ga = needs[0].then(|| {
            let raw = zip_broadcast("mul-bwd", grad, inputs[1], |g, b| g * b).unwrap();
            reduce_to_shape(&raw, inputs[0].shape())
        });
        let gb = needs[1].then(|| {
            let raw = zip_broadcast("mul-bwd", grad, inputs[0], |g, a| g * a).unwrap();
            reduce_to_shape(&raw, inputs[1].shape())
        });
        vec![ga, gb]
    }
}

#[derive(Debug)]
struct ReluOp;
impl<T: Scalar> OpBackward<T> for ReluOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        // Subgradient at exactly zero is zero.
        vec![needs[0].then(|| {
            zip_broadcast("relu-bwd", grad, inputs[0], |g, x| {
                if x > T::zero() {
                    g
                } else {
                    T::zero()
                }
            })
            .unwrap()
        })]
    }
}

#[derive(Debug)]
struct LeakyReluOp<T> {
    alpha: T,
}
impl<T: Scalar> OpBackward<T> for LeakyReluOp<T> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let a = self.alpha;
        vec![needs[0].then(|| {
            zip_broadcast("leaky-bwd", grad, inputs[0], |g, x| {
                if x > T::zero() {
                    g
                } else {
                    a * g
                }
            })
            .unwrap()
        })]
    }
}

#[derive(Debug)]
struct SigmoidOp;
impl<T: Scalar> OpBackward<T> for SigmoidOp {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            zip_broadcast("sigmoid-bwd", grad, output, |g, y| g * y * (T::one() - y)).unwrap()
        })]
    }
}

#[derive(Debug)]
struct TanhOp;
impl<T: Scalar> OpBackward<T> for TanhOp {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            zip_broadcast("tanh-bwd", grad, output, |g, y| g * (T::one() - y * y)).unwrap()
        })]
    }
}

#[derive(Debug)]
struct AbsOp;
impl<T: Scalar> OpBackward<T> for AbsOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            zip_broadcast("abs-bwd", grad, inputs[0], |g, x| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            })
            .unwrap()
        })]
    }
}

#[derive(Debug)]
struct ClampOp<T> {
    lo: T,
    hi: T,
}
impl<T: Scalar> OpBackward<T> for ClampOp<T> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (lo, hi) = (self.lo, self.hi);
        vec![needs[0].then(|| {
            zip_broadcast("clamp-bwd", grad, inputs[0], |g, x| {
                if x > lo && x < hi {
                    g
                } else {
                    T::zero()
                }
            })
            .unwrap()
        })]
    }
}

#[derive(Debug)]
struct DivByScalarOp;
impl<T: Scalar> OpBackward<T> for DivByScalarOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let s = inputs[1].data()[0];
        let gx = needs[0].then(|| grad.map(|g| g / s));
        let gs = needs[1].then(|| {
            let num: T = grad
                .data()
                .iter()
                .zip(inputs[0].data().iter())
                .map(|(&g, &x)| g * x)
                .sum();
            Tensor::scalar(-num / (s * s))
        });
        vec![gx, gs]
    }
}

#[derive(Debug)]
struct ReshapeOp;
impl<T: Scalar> OpBackward<T> for ReshapeOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| grad.reshape(inputs[0].shape()).unwrap())]
    }
}

#[derive(Debug)]
struct ConcatChannelsOp {
    c1: usize,
}
impl<T: Scalar> OpBackward<T> for ConcatChannelsOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let s = output.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let c2 = c - self.c1;
        let split = |lo: usize, hi: usize, shape: &[usize]| {
            let mut data = Vec::with_capacity(n * (hi - lo) * plane);
            for smp in 0..n {
                let base = (smp * c + lo) * plane;
                data.extend_from_slice(&grad.data()[base..base + (hi - lo) * plane]);
            }
            Tensor::new(shape.to_vec(), data)
        };
        vec![
            needs[0].then(|| split(0, self.c1, inputs[0].shape())),
            needs[1].then(|| split(self.c1, self.c1 + c2, inputs[1].shape())),
        ]
    }
}

#[derive(Debug)]
struct ChannelSliceOp {
    from: usize,
    to: usize,
}
impl<T: Scalar> OpBackward<T> for ChannelSliceOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            let s = inputs[0].shape();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let plane = h * w;
            let width = self.to - self.from;
            let mut data = vec![T::zero(); inputs[0].len()];
            for smp in 0..n {
                let dst = (smp * c + self.from) * plane;
                let src = smp * width * plane;
                data[dst..dst + width * plane]
                    .copy_from_slice(&grad.data()[src..src + width * plane]);
            }
            Tensor::new(s.to_vec(), data)
        })]
    }
}

#[derive(Debug)]
struct TransposeLast2Op;
impl<T: Scalar> OpBackward<T> for TransposeLast2Op {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| transpose_last2_value(grad).unwrap())]
    }
}

#[derive(Debug)]
struct MatMulOp;
impl<T: Scalar> OpBackward<T> for MatMulOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let a = inputs[0];
        let b = inputs[1];
        let ga = needs[0].then(|| {
            let bt = transpose_last2_value(b).unwrap();
            matmul_value(grad, &bt).unwrap()
        });
        let gb = needs[1].then(|| {
            let at = transpose_last2_value(a).unwrap();
            matmul_value(&at, grad).unwrap()
        });
        vec![ga, gb]
    }
}

#[derive(Debug)]
struct Conv2dOp {
    geom: ConvGeom,
}
impl<T: Scalar> OpBackward<T> for Conv2dOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let g = &self.geom;
        vec![
            needs[0].then(|| kernels::conv2d_input_grad(grad, inputs[1], g)),
            needs[1].then(|| kernels::conv2d_weight_grad(inputs[0], grad, g)),
            needs[2].then(|| Tensor::new(vec![g.cout], kernels::conv2d_bias_grad(grad, g))),
        ]
    }
}

#[derive(Debug)]
struct ConvTranspose2dOp {
    /// Geometry of the underlying convolution (large spatial side = output).
    geom: ConvGeom,
}
impl<T: Scalar> OpBackward<T> for ConvTranspose2dOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let g = &self.geom;
        // Forward is x -> C^T x with C the underlying convolution, so the
        // input gradient is C(grad) and the weight gradient swaps the roles
        // of input and output gradient.
        let cout = g.cout;
        let zeros = vec![T::zero(); cout];
        vec![
            needs[0].then(|| kernels::conv2d(grad, inputs[1], &zeros, g)),
            needs[1].then(|| kernels::conv2d_weight_grad(grad, inputs[0], g)),
            needs[2].then(|| {
                // Bias is added on the (large) output: per-channel sum of grad.
                let s = grad.shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let mut gb = vec![T::zero(); c];
                for smp in 0..n {
                    for ch in 0..c {
                        let base = (smp * c + ch) * plane;
                        gb[ch] = gb[ch]
                            + grad.data()[base..base + plane].iter().copied().sum();
                    }
                }
                Tensor::new(vec![c], gb)
            }),
        ]
    }
}

#[derive(Debug)]
struct SoftmaxOp {
    axis: usize,
}
impl<T: Scalar> OpBackward<T> for SoftmaxOp {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            // dx = (g - sum_axis(g * y)) * y
            let s = output.shape();
            let axis_len = s[self.axis];
            let inner: usize = s[self.axis + 1..].iter().product();
            let outer: usize = s[..self.axis].iter().product();
            let mut data = vec![T::zero(); output.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * axis_len * inner + i;
                    let mut dot = T::zero();
                    for j in 0..axis_len {
                        let idx = base + j * inner;
                        dot = dot + grad.data()[idx] * output.data()[idx];
                    }
                    for j in 0..axis_len {
                        let idx = base + j * inner;
                        data[idx] = (grad.data()[idx] - dot) * output.data()[idx];
                    }
                }
            }
            Tensor::new(s.to_vec(), data)
        })]
    }
}

#[derive(Debug)]
struct GlobalAverageOp;
impl<T: Scalar> OpBackward<T> for GlobalAverageOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| {
            let s = inputs[0].shape();
            let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
            let inv = T::from_f64(1.0 / plane as f64);
            let mut data = vec![T::zero(); inputs[0].len()];
            for i in 0..n * c {
                let g = grad.data()[i] * inv;
                data[i * plane..(i + 1) * plane].fill(g);
            }
            Tensor::new(s.to_vec(), data)
        })]
    }
}

#[derive(Debug)]
struct SumAllOp;
impl<T: Scalar> OpBackward<T> for SumAllOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let g = grad.data()[0];
        vec![needs[0].then(|| Tensor::full(inputs[0].shape(), g))]
    }
}

#[derive(Debug)]
struct MeanAllOp;
impl<T: Scalar> OpBackward<T> for MeanAllOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let g = grad.data()[0] * T::from_f64(1.0 / inputs[0].len() as f64);
        vec![needs[0].then(|| Tensor::full(inputs[0].shape(), g))]
    }
}

#[derive(Debug)]
struct BatchNormOp<T: Scalar> {
    xhat: Tensor<T>,
    invstd: Tensor<T>,
}
impl<T: Scalar> OpBackward<T> for BatchNormOp<T> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let s = self.xhat.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let m = n * plane;
        let scale = inputs[1];

        // Per-channel sums of g*scale and g*scale*xhat.
        let mut sum_gx = vec![T::zero(); c];
        let mut sum_gxx = vec![T::zero(); c];
        let mut sum_g = vec![T::zero(); c];
        let mut sum_g_xhat = vec![T::zero(); c];
        for smp in 0..n {
            for ch in 0..c {
                let base = (smp * c + ch) * plane;
                for i in base..base + plane {
                    let g = grad.data()[i];
                    let gx = g * scale.data()[ch];
                    sum_gx[ch] = sum_gx[ch] + gx;
                    sum_gxx[ch] = sum_gxx[ch] + gx * self.xhat.data()[i];
                    sum_g[ch] = sum_g[ch] + g;
                    sum_g_xhat[ch] = sum_g_xhat[ch] + g * self.xhat.data()[i];
                }
            }
        }
        let gx = needs[0].then(|| {
            let inv_m = T::from_f64(1.0 / m as f64);
            let mut data = vec![T::zero(); grad.len()];
            for smp in 0..n {
                for ch in 0..c {
                    let base = (smp * c + ch) * plane;
                    let is = self.invstd.data()[ch];
                    for i in base..base + plane {
                        let gxh = grad.data()[i] * scale.data()[ch];
                        data[i] = is
                            * (gxh - inv_m * (sum_gx[ch] + self.xhat.data()[i] * sum_gxx[ch]));
                    }
                }
            }
            Tensor::new(s.to_vec(), data)
        });
        let gscale = needs[1].then(|| Tensor::new(vec![c], sum_g_xhat.clone()));
        let gshift = needs[2].then(|| Tensor::new(vec![c], sum_g.clone()));
        vec![gx, gscale, gshift]
    }
}
