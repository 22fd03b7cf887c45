//! Self-attention (non-local block) and channel attention (squeeze and
//! excitation) as reusable differentiable blocks.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::Padding;
use crate::params::{SlotKind, Visit};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Conventional squeeze-excitation reduction factor.
pub const DEFAULT_REDUCTION: usize = 16;

/// Weights of one self-attention block. The query/key projections narrow the
/// channels to `max(C/8, 1)`, the value path runs through `max(C/2, 1)` and
/// is projected back to `C`; `gamma` starts at zero so a freshly inserted
/// block is the identity map.
#[derive(Clone, Debug)]
pub struct SelfAttentionParams<T: Scalar> {
    prefix: String,
    pub channels: usize,
    pub wf: Tensor<T>,
    pub wg: Tensor<T>,
    pub wh: Tensor<T>,
    pub wv: Tensor<T>,
    pub gamma: Tensor<T>,
}

impl<T: Scalar> SelfAttentionParams<T> {
    pub fn init(prefix: impl Into<String>, channels: usize, rng: &mut Rng) -> Self {
        let qk = (channels / 8).max(1);
        let mid = (channels / 2).max(1);
        let conv_w = |cout: usize, cin: usize, rng: &mut Rng| {
            Tensor::new(
                vec![cout, cin, 1, 1],
                (0..cout * cin)
                    .map(|_| T::from_f64(rng.truncated_normal(0.02)))
                    .collect(),
            )
        };
        SelfAttentionParams {
            prefix: prefix.into(),
            channels,
            wf: conv_w(qk, channels, rng),
            wg: conv_w(qk, channels, rng),
            wh: conv_w(mid, channels, rng),
            wv: conv_w(channels, mid, rng),
            gamma: Tensor::zeros(&[1]),
        }
    }
}

impl<T: Scalar> Visit<T> for SelfAttentionParams<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, SlotKind, &'a Tensor<T>)) {
        f(format!("{}.wf", self.prefix), SlotKind::Param, &self.wf);
        f(format!("{}.wg", self.prefix), SlotKind::Param, &self.wg);
        f(format!("{}.wh", self.prefix), SlotKind::Param, &self.wh);
        f(format!("{}.wv", self.prefix), SlotKind::Param, &self.wv);
        f(format!("{}.gamma", self.prefix), SlotKind::Param, &self.gamma);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, SlotKind, &mut Tensor<T>)) {
        f(format!("{}.wf", self.prefix), SlotKind::Param, &mut self.wf);
        f(format!("{}.wg", self.prefix), SlotKind::Param, &mut self.wg);
        f(format!("{}.wh", self.prefix), SlotKind::Param, &mut self.wh);
        f(format!("{}.wv", self.prefix), SlotKind::Param, &mut self.wv);
        f(format!("{}.gamma", self.prefix), SlotKind::Param, &mut self.gamma);
    }
}

/// `Y = gamma * v(A h(X)) + X` with `A = softmax(f(X)^T g(X))` over flattened
/// spatial positions; every query position's attention weights sum to one.
pub fn self_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &SelfAttentionParams<T>,
) -> Result<Var> {
    let (y, _) = self_attention_with_map(g, x, p)?;
    Ok(y)
}

/// [`self_attention`] that also returns the `[N, HW, HW]` attention map node.
pub fn self_attention_with_map<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &SelfAttentionParams<T>,
) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != p.channels {
        return Err(Error::invalid(
            "self_attention",
            format!("expected [N,{},H,W], got {:?}", p.channels, s),
        ));
    }
    let (n, _c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let qk = p.wf.shape()[0];
    let mid = p.wh.shape()[0];

    let proj = |g: &mut Graph<T>, name: &str, wt: &Tensor<T>, cout: usize| -> Result<Var> {
        let wn = g.param(&format!("{}.{}", p.prefix, name), wt);
        let zero = g.constant(Tensor::zeros(&[cout]));
        g.conv2d(x, wn, zero, 1, Padding::Same)
    };

    let f = proj(g, "wf", &p.wf, qk)?;
    let k = proj(g, "wg", &p.wg, qk)?;
    let hh = proj(g, "wh", &p.wh, mid)?;

    let f_flat = g.reshape(f, &[n, qk, hw])?;
    let k_flat = g.reshape(k, &[n, qk, hw])?;
    let h_flat = g.reshape(hh, &[n, mid, hw])?;

    // A[q, k] = <f(., q), g(., k)>, softmax over the key axis.
    let q = g.transpose_last2(f_flat)?;
    let logits = g.matmul(q, k_flat)?;
    let attn = g.softmax(logits, 2)?;

    // O[., q] = sum_k h(., k) A[q, k]
    let attn_t = g.transpose_last2(attn)?;
    let o_flat = g.matmul(h_flat, attn_t)?;
    let o = g.reshape(o_flat, &[n, mid, h, w])?;

    let wv = g.param(&format!("{}.wv", p.prefix), &p.wv);
    let zero_v = g.constant(Tensor::zeros(&[p.channels]));
    let o = g.conv2d(o, wv, zero_v, 1, Padding::Same)?;

    let gamma = g.param(&format!("{}.gamma", p.prefix), &p.gamma);
    let scaled = g.scale(o, gamma)?;
    let y = g.add(scaled, x)?;
    Ok((y, attn))
}

/// Weights of one squeeze-excitation block: two 1x1 convolutions realizing
/// the fully connected squeeze (`C -> C/r`) and excitation (`C/r -> C`).
#[derive(Clone, Debug)]
pub struct ChannelAttentionParams<T: Scalar> {
    prefix: String,
    pub channels: usize,
    pub reduction: usize,
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
}

impl<T: Scalar> ChannelAttentionParams<T> {
    pub fn init(
        prefix: impl Into<String>,
        channels: usize,
        reduction: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::invalid(
                "channel_attention",
                format!("channels {channels} not divisible by reduction {reduction}"),
            ));
        }
        let hidden = channels / reduction;
        let conv_w = |cout: usize, cin: usize, rng: &mut Rng| {
            Tensor::new(
                vec![cout, cin, 1, 1],
                (0..cout * cin)
                    .map(|_| T::from_f64(rng.truncated_normal(0.02)))
                    .collect(),
            )
        };
        Ok(ChannelAttentionParams {
            prefix: prefix.into(),
            channels,
            reduction,
            w1: conv_w(hidden, channels, rng),
            w2: conv_w(channels, hidden, rng),
        })
    }
}

impl<T: Scalar> Visit<T> for ChannelAttentionParams<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, SlotKind, &'a Tensor<T>)) {
        f(format!("{}.w1", self.prefix), SlotKind::Param, &self.w1);
        f(format!("{}.w2", self.prefix), SlotKind::Param, &self.w2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, SlotKind, &mut Tensor<T>)) {
        f(format!("{}.w1", self.prefix), SlotKind::Param, &mut self.w1);
        f(format!("{}.w2", self.prefix), SlotKind::Param, &mut self.w2);
    }
}

/// `Y = sigmoid(W2 relu(W1 GlobalAverage(X))) * X`, gating each channel by a
/// factor strictly inside (0, 1).
pub fn channel_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &ChannelAttentionParams<T>,
) -> Result<Var> {
    let (y, _) = channel_attention_with_gate(g, x, p)?;
    Ok(y)
}

/// [`channel_attention`] that also returns the `[N, C, 1, 1]` gate node.
pub fn channel_attention_with_gate<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &ChannelAttentionParams<T>,
) -> Result<(Var, Var)> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != p.channels {
        return Err(Error::invalid(
            "channel_attention",
            format!("expected [N,{},H,W], got {:?}", p.channels, s),
        ));
    }
    let hidden = p.channels / p.reduction;
    let z = g.global_average(x)?;
    let w1 = g.param(&format!("{}.w1", p.prefix), &p.w1);
    let zero1 = g.constant(Tensor::zeros(&[hidden]));
    let a = g.conv2d(z, w1, zero1, 1, Padding::Same)?;
    let a = g.relu(a);
    let w2 = g.param(&format!("{}.w2", p.prefix), &p.w2);
    let zero2 = g.constant(Tensor::zeros(&[p.channels]));
    let a = g.conv2d(a, w2, zero2, 1, Padding::Same)?;
    let gate = g.sigmoid(a);
    let y = g.mul(gate, x)?;
    Ok((y, gate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.range(-1.0, 1.0)).collect())
    }

    #[test]
    fn gamma_zero_is_identity() {
        let mut rng = Rng::new(10);
        let p = SelfAttentionParams::<f64>::init("sa", 8, &mut rng);
        let x = random_tensor(&mut rng, &[1, 8, 3, 3]);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let y = self_attention(&mut g, xv, &p).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn single_position_attention_is_one() {
        let mut rng = Rng::new(11);
        let p = SelfAttentionParams::<f64>::init("sa", 8, &mut rng);
        let x = random_tensor(&mut rng, &[2, 8, 1, 1]);
        let mut g = Graph::new();
        let xv = g.leaf(x, false);
        let (_, attn) = self_attention_with_map(&mut g, xv, &p).unwrap();
        assert_eq!(g.value(attn).shape(), &[2, 1, 1]);
        for &a in g.value(attn).data() {
            assert!((a - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = Rng::new(12);
        let p = SelfAttentionParams::<f64>::init("sa", 8, &mut rng);
        let x = random_tensor(&mut rng, &[1, 8, 2, 2]);
        let mut g = Graph::new();
        let xv = g.leaf(x, false);
        let (_, attn) = self_attention_with_map(&mut g, xv, &p).unwrap();
        for row in g.value(attn).data().chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn channel_mismatch_is_error() {
        let mut rng = Rng::new(13);
        let p = SelfAttentionParams::<f64>::init("sa", 8, &mut rng);
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::zeros(&[1, 4, 2, 2]), false);
        assert!(self_attention(&mut g, xv, &p).is_err());
    }

    #[test]
    fn squeeze_of_constant_channels() {
        // Channels constant at 2 and 4: the squeeze output is exactly [2, 4].
        let mut data = vec![2.0; 4];
        data.extend(vec![4.0; 4]);
        let x = Tensor::<f64>::from_vec(&[1, 2, 2, 2], data).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(x, false);
        let z = g.global_average(xv).unwrap();
        assert_eq!(g.value(z).data(), &[2.0, 4.0]);
    }

    #[test]
    fn saturated_gate_passes_input_through() {
        let mut rng = Rng::new(14);
        let mut p = ChannelAttentionParams::<f64>::init("ca", 4, 2, &mut rng).unwrap();
        // Large positive weights => pre-sigmoid activation large => gate -> 1.
        p.w1 = Tensor::full(p.w1.shape(), 50.0);
        p.w2 = Tensor::full(p.w2.shape(), 50.0);
        let x = Tensor::full(&[1, 4, 2, 2], 1.0);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let y = channel_attention(&mut g, xv, &p).unwrap();
        for (got, want) in g.value(y).data().iter().zip(x.data()) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn gate_strictly_inside_unit_interval_and_contraction() {
        let mut rng = Rng::new(15);
        let p = ChannelAttentionParams::<f64>::init("ca", 16, 4, &mut rng).unwrap();
        let x = random_tensor(&mut rng, &[1, 16, 4, 4]);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let (y, gate) = channel_attention_with_gate(&mut g, xv, &p).unwrap();
        for &a in g.value(gate).data() {
            assert!(a > 0.0 && a < 1.0, "gate {a}");
        }
        for (out, inp) in g.value(y).data().iter().zip(x.data()) {
            assert!(out.abs() <= inp.abs() + 1e-15);
        }
    }

    #[test]
    fn reduction_must_divide_channels() {
        let mut rng = Rng::new(16);
        assert!(ChannelAttentionParams::<f64>::init("ca", 10, 4, &mut rng).is_err());
    }
}
