//! Composite building blocks: encode/decode blocks, residual and
//! residual-in-residual blocks, the global residual, and the convolutional
//! recurrent feedback cell. The models module wires these into full
//! generators and the discriminator.

use crate::attention::{channel_attention, ChannelAttentionParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::Padding;
use crate::norm::{batch_norm, spectral_normalize, BatchNormState, Mode, SpectralState};
use crate::params::{SlotKind, Visit};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

fn init_weight<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| T::from_f64(rng.truncated_normal(INIT_STD))).collect(),
    )
}

/// A convolution (or transposed convolution) with optional bias and optional
/// spectral normalization of the weight.
#[derive(Clone, Debug)]
pub struct Conv<T: Scalar> {
    prefix: String,
    pub w: Tensor<T>,
    pub b: Option<Tensor<T>>,
    pub sn: Option<SpectralState<T>>,
    pub stride: usize,
    pub padding: Padding,
    pub transpose: bool,
}

pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub bias: bool,
    pub spectral: bool,
    pub transpose: bool,
}

impl ConvSpec {
    pub fn plain(kernel: usize, stride: usize) -> Self {
        ConvSpec {
            kernel,
            stride,
            padding: Padding::Same,
            bias: true,
            spectral: false,
            transpose: false,
        }
    }

    pub fn transposed(kernel: usize, stride: usize) -> Self {
        ConvSpec {
            transpose: true,
            ..ConvSpec::plain(kernel, stride)
        }
    }

    pub fn spectral(mut self, on: bool) -> Self {
        self.spectral = on;
        self
    }

    pub fn bias(mut self, on: bool) -> Self {
        self.bias = on;
        self
    }
}

impl<T: Scalar> Conv<T> {
    pub fn init(prefix: impl Into<String>, cin: usize, cout: usize, spec: ConvSpec, rng: &mut Rng) -> Self {
        let prefix = prefix.into();
        // Transposed convolutions store weights as [c_in, c_out, kh, kw].
        let w_shape = if spec.transpose {
            vec![cin, cout, spec.kernel, spec.kernel]
        } else {
            vec![cout, cin, spec.kernel, spec.kernel]
        };
        let w = init_weight(&w_shape, rng);
        let sn = spec
            .spectral
            .then(|| SpectralState::init(format!("{prefix}"), w_shape[0], rng));
        Conv {
            prefix,
            w,
            b: spec.bias.then(|| Tensor::zeros(&[cout])),
            sn,
            stride: spec.stride,
            padding: spec.padding,
            transpose: spec.transpose,
        }
    }

    pub fn out_channels(&self) -> usize {
        if self.transpose {
            self.w.shape()[1]
        } else {
            self.w.shape()[0]
        }
    }

    pub fn in_channels(&self) -> usize {
        if self.transpose {
            self.w.shape()[0]
        } else {
            self.w.shape()[1]
        }
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let w = g.param(&format!("{}.w", self.prefix), &self.w);
        let w = match self.sn.as_mut() {
            Some(state) => spectral_normalize(g, w, state, mode)?,
            None => w,
        };
        let cout = self.out_channels();
        let b = match &self.b {
            Some(b) => g.param(&format!("{}.b", self.prefix), b),
            None => g.constant(Tensor::zeros(&[cout])),
        };
        if self.transpose {
            g.conv2d_transpose(x, w, b, self.stride)
        } else {
            g.conv2d(x, w, b, self.stride, self.padding)
        }
    }
}

impl<T: Scalar> Visit<T> for Conv<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, SlotKind, &'a Tensor<T>)) {
        f(format!("{}.w", self.prefix), SlotKind::Param, &self.w);
        if let Some(b) = &self.b {
            f(format!("{}.b", self.prefix), SlotKind::Param, b);
        }
        if let Some(sn) = &self.sn {
            sn.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, SlotKind, &mut Tensor<T>)) {
        f(format!("{}.w", self.prefix), SlotKind::Param, &mut self.w);
        if let Some(b) = &mut self.b {
            f(format!("{}.b", self.prefix), SlotKind::Param, b);
        }
        if let Some(sn) = &mut self.sn {
            sn.visit_mut(f);
        }
    }
}

/// Stride-2 convolution, batch norm, ReLU: halves the spatial dimensions.
#[derive(Clone, Debug)]
pub struct EncodeBlockParams<T: Scalar> {
    pub conv: Conv<T>,
    pub bn: Option<BatchNormState<T>>,
}

impl<T: Scalar> EncodeBlockParams<T> {
    /// `use_bn` is off for blocks whose output is a single spatial element,
    /// where batch statistics would be degenerate.
    pub fn init(
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        use_bn: bool,
        spectral: bool,
        rng: &mut Rng,
    ) -> Self {
        EncodeBlockParams {
            conv: Conv::init(
                format!("{prefix}.conv"),
                cin,
                cout,
                ConvSpec::plain(kernel, 2).spectral(spectral),
                rng,
            ),
            bn: use_bn.then(|| BatchNormState::init(format!("{prefix}.bn"), cout)),
        }
    }
}

impl<T: Scalar> Visit<T> for EncodeBlockParams<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, SlotKind, &'a Tensor<T>)) {
        self.conv.visit(f);
        if let Some(bn) = &self.bn {
            bn.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, SlotKind, &mut Tensor<T>)) {
        self.conv.visit_mut(f);
        if let Some(bn) = &mut self.bn {
            bn.visit_mut(f);
        }
    }
}

pub fn encode_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &mut EncodeBlockParams<T>,
    mode: Mode,
) -> Result<Var> {
    let s = g.shape(x);
    if s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(Error::invalid(
            "encode_block",
            format!("spatial dims must be even, got {:?}", s),
        ));
    }
    let mut h = p.conv.forward(g, x, mode)?;
    if let Some(bn) = p.bn.as_mut() {
        h = batch_norm(g, h, bn, mode)?;
    }
    Ok(g.relu(h))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

/// Transposed convolution, batch norm, activation: doubles the spatial
/// dimensions. An optional skip tensor is concatenated on the channel axis
/// before the convolution. The final block of a decoder uses `Tanh`.
#[derive(Clone, Debug)]
pub struct DecodeBlockParams<T: Scalar> {
    pub conv: Conv<T>,
    pub bn: Option<BatchNormState<T>>,
    pub activation: Activation,
}

impl<T: Scalar> DecodeBlockParams<T> {
    pub fn init(
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        activation: Activation,
        use_bn: bool,
        spectral: bool,
        rng: &mut Rng,
    ) -> Self {
        DecodeBlockParams {
            conv: Conv::init(
                format!("{prefix}.conv"),
                cin,
                cout,
                ConvSpec::transposed(kernel, 2).spectral(spectral),
                rng,
            ),
            bn: use_bn.then(|| BatchNormState::init(format!("{prefix}.bn"), cout)),
            activation,
        }
    }
}

impl<T: Scalar> Visit<T> for DecodeBlockParams<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, SlotKind, &'a Tensor<T>)) {
        self.conv.visit(f);
        if let Some(bn) = &self.bn {
            bn.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, SlotKind, &mut Tensor<T>)) {
        self.conv.visit_mut(f);
        if let Some(bn) = &mut self.bn {
            bn.visit_mut(f);
        }
    }
}

pub fn decode_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    skip: Option<Var>,
    p: &mut DecodeBlockParams<T>,
    mode: Mode,
) -> Result<Var> {
    let inp = match skip {
        Some(s) => g.concat_channels(x, s)?,
        None => x,
    };
    let mut h = p.conv.forward(g, inp, mode)?;
    if let Some(bn) = p.bn.as_mut() {
        h = batch_norm(g, h, bn, mode)?;
    }
    Ok(match p.activation {
        Activation::Relu => g.relu(h),
        Activation::Tanh => g.tanh(h),
    })
}

/// Residual block: two units of convolution followed by channel attention,
/// added back onto the input. Shape preserving.
#[derive(Clone, Debug)]
pub struct ResBlockParams<T: Scalar> {
    pub c1: Conv<T>,
    pub ca1: ChannelAttentionParams<T>,
    pub c2: Conv<T>,
    pub ca2: ChannelAttentionParams<T>,
}

impl<T: Scalar> ResBlockParams<T> {
    pub fn init(
        prefix: &str,
        channels: usize,
        reduction: usize,
        spectral: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(ResBlockParams {
            c1: Conv::init(
                format!("{prefix}.c1"),
                channels,
                channels,
                ConvSpec::plain(3, 1).spectral(spectral),
                rng,
            ),
            ca1: ChannelAttentionParams::init(format!("{prefix}.ca1"), channels, reduction, rng)?,
            c2: Conv::init(
                format!("{prefix}.c2"),
                channels,
                channels,
                ConvSpec::plain(3, 1).spectral(spectral),
                rng,
            ),
            ca2: ChannelAttentionParams::init(format!("{prefix}.ca2"), channels, reduction, rng)?,
        })
    }
}

impl<T: Scalar> Visit<T> for ResBlockParams<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, SlotKind, &'a Tensor<T>)) {
        self.c1.visit(f);
        self.ca1.visit(f);
        self.c2.visit(f);
        self.ca2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, SlotKind, &mut Tensor<T>)) {
        self.c1.visit_mut(f);
        self.ca1.visit_mut(f);
        self.c2.visit_mut(f);
        self.ca2.visit_mut(f);
    }
}

pub fn res_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &mut ResBlockParams<T>,
    mode: Mode,
) -> Result<Var> {
    let u = p.c1.forward(g, x, mode)?;
    let u = channel_attention(g, u, &p.ca1)?;
    let u = p.c2.forward(g, u, mode)?;
    let u = channel_attention(g, u, &p.ca2)?;
    g.add(x, u)
}

/// Residual-in-residual block: two residual blocks, a stride-2 convolution
/// (encoder) or transposed convolution (decoder) with batch norm and ReLU,
/// plus a shortcut convolution scaling the input to the same size; the two
/// paths are added.
#[derive(Clone, Debug)]
pub struct RiRBlockParams<T: Scalar> {
    pub r1: ResBlockParams<T>,
    pub r2: ResBlockParams<T>,
    pub conv: Conv<T>,
    pub bn: BatchNormState<T>,
    pub shortcut: Conv<T>,
    pub decode: bool,
}

impl<T: Scalar> RiRBlockParams<T> {
    pub fn init(
        prefix: &str,
        cin: usize,
        cout: usize,
        reduction: usize,
        decode: bool,
        spectral: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let main_spec = if decode {
            ConvSpec::transposed(4, 2).spectral(spectral)
        } else {
            ConvSpec::plain(4, 2).spectral(spectral)
        };
        // The shortcut only matches sizes: 1x1 stride-2 convolution on the
        // way down, 2x2 stride-2 transposed convolution on the way up.
        let short_spec = if decode {
            ConvSpec::transposed(2, 2).spectral(spectral)
        } else {
            ConvSpec::plain(1, 2).spectral(spectral)
        };
        Ok(RiRBlockParams {
            r1: ResBlockParams::init(&format!("{prefix}.r1"), cin, reduction, spectral, rng)?,
            r2: ResBlockParams::init(&format!("{prefix}.r2"), cin, reduction, spectral, rng)?,
            conv: Conv::init(format!("{prefix}.conv"), cin, cout, main_spec, rng),
            bn: BatchNormState::init(format!("{prefix}.bn"), cout),
            shortcut: Conv::init(format!("{prefix}.short"), cin, cout, short_spec, rng),
            decode,
        })
    }
}

impl<T: Scalar> Visit<T> for RiRBlockParams<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, SlotKind, &'a Tensor<T>)) {
        self.r1.visit(f);
        self.r2.visit(f);
        self.conv.visit(f);
        self.bn.visit(f);
        self.shortcut.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, SlotKind, &mut Tensor<T>)) {
        self.r1.visit_mut(f);
        self.r2.visit_mut(f);
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
        self.shortcut.visit_mut(f);
    }
}

pub fn rir_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &mut RiRBlockParams<T>,
    mode: Mode,
) -> Result<Var> {
    let m = res_block(g, x, &mut p.r1, mode)?;
    let m = res_block(g, m, &mut p.r2, mode)?;
    let m = p.conv.forward(g, m, mode)?;
    let m = batch_norm(g, m, &mut p.bn, mode)?;
    let m = g.relu(m);
    let s = p.shortcut.forward(g, x, mode)?;
    if g.shape(m) != g.shape(s) {
        return Err(Error::ShapeMismatch {
            op: "rir_block (main vs shortcut)",
            lhs: g.shape(m).to_vec(),
            rhs: g.shape(s).to_vec(),
        });
    }
    g.add(m, s)
}

/// Adds the input image onto the model output and clamps to the valid
/// normalized range [-1, 1], so the network only learns per-pixel residuals.
pub fn global_residual<T: Scalar>(g: &mut Graph<T>, model_out: Var, input_image: Var) -> Result<Var> {
    if g.shape(model_out) != g.shape(input_image) {
        return Err(Error::ShapeMismatch {
            op: "global_residual",
            lhs: g.shape(model_out).to_vec(),
            rhs: g.shape(input_image).to_vec(),
        });
    }
    let sum = g.add(model_out, input_image)?;
    Ok(g.clamp(sum, -1.0, 1.0))
}

/// Convolutional gate weights of the recurrent feedback cell. Gates read the
/// channel concatenation `[hidden, x]` through 3x3 convolutions.
#[derive(Clone, Debug)]
pub struct FeedbackParams<T: Scalar> {
    pub input_gate: Conv<T>,
    pub forget_gate: Conv<T>,
    pub output_gate: Conv<T>,
    pub candidate: Conv<T>,
    pub channels: usize,
}

impl<T: Scalar> FeedbackParams<T> {
    pub fn init(prefix: &str, channels: usize, rng: &mut Rng) -> Self {
        let gate =
            |name: &str, rng: &mut Rng| Conv::init(format!("{prefix}.{name}"), 2 * channels, channels, ConvSpec::plain(3, 1), rng);
        FeedbackParams {
            input_gate: gate("wi", rng),
            forget_gate: gate("wf", rng),
            output_gate: gate("wo", rng),
            candidate: gate("wc", rng),
            channels,
        }
    }
}

impl<T: Scalar> Visit<T> for FeedbackParams<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, SlotKind, &'a Tensor<T>)) {
        self.input_gate.visit(f);
        self.forget_gate.visit(f);
        self.output_gate.visit(f);
        self.candidate.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, SlotKind, &mut Tensor<T>)) {
        self.input_gate.visit_mut(f);
        self.forget_gate.visit_mut(f);
        self.output_gate.visit_mut(f);
        self.candidate.visit_mut(f);
    }
}

/// Hidden and cell tensors threaded between feedback iterations.
#[derive(Clone, Debug)]
pub struct FeedbackState<T: Scalar> {
    pub hidden: Tensor<T>,
    pub cell: Tensor<T>,
}

impl<T: Scalar> FeedbackState<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        FeedbackState {
            hidden: Tensor::zeros(shape),
            cell: Tensor::zeros(shape),
        }
    }
}

/// One recurrent update: sigmoid input/forget/output gates, tanh candidate.
/// Returns `(y, hidden', cell')` with `y = hidden'`; iterating threads the
/// returned state into the next call within the same graph.
pub fn feedback_cell<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    hidden: Var,
    cell: Var,
    p: &mut FeedbackParams<T>,
    mode: Mode,
) -> Result<(Var, Var, Var)> {
    if g.shape(x) != g.shape(hidden) || g.shape(x) != g.shape(cell) {
        return Err(Error::ShapeMismatch {
            op: "feedback_cell (state shape drift)",
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(hidden).to_vec(),
        });
    }
    let hx = g.concat_channels(hidden, x)?;
    let i_raw = p.input_gate.forward(g, hx, mode)?;
    let i = g.sigmoid(i_raw);
    let f_raw = p.forget_gate.forward(g, hx, mode)?;
    let f = g.sigmoid(f_raw);
    let o_raw = p.output_gate.forward(g, hx, mode)?;
    let o = g.sigmoid(o_raw);
    let c_raw = p.candidate.forward(g, hx, mode)?;
    let cand = g.tanh(c_raw);

    let keep = g.mul(f, cell)?;
    let write = g.mul(i, cand)?;
    let cell_next = g.add(keep, write)?;
    let cell_act = g.tanh(cell_next);
    let hidden_next = g.mul(o, cell_act)?;
    Ok((hidden_next, hidden_next, cell_next))
}
