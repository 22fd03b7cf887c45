//! Generator architectures (pix2pix U-Net, residual-in-residual and its
//! large variant, DeblurGAN-style) and the Markovian (PatchGAN)
//! discriminator, assembled from `blocks` under feature-flag configuration.

use std::collections::BTreeMap;

use crate::attention::{
    channel_attention, self_attention, ChannelAttentionParams, SelfAttentionParams,
    DEFAULT_REDUCTION,
};
use crate::blocks::{
    decode_block, encode_block, feedback_cell, global_residual, rir_block, Activation, Conv,
    ConvSpec, DecodeBlockParams, EncodeBlockParams, FeedbackParams, RiRBlockParams,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::norm::{batch_norm, BatchNormState, Mode};
use crate::params::{named_tensors, param_count, SlotKind, Visit};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Pix2Pix,
    Rir,
    RirLarge,
    DeblurGan,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Pix2Pix => "pix2pix",
            Arch::Rir => "rir",
            Arch::RirLarge => "rir_large",
            Arch::DeblurGan => "deblurgan",
        }
    }

    pub fn parse(s: &str) -> Result<Arch> {
        match s {
            "pix2pix" => Ok(Arch::Pix2Pix),
            "rir" => Ok(Arch::Rir),
            "rir_large" => Ok(Arch::RirLarge),
            "deblurgan" => Ok(Arch::DeblurGan),
            other => Err(Error::invalid("arch", format!("unknown architecture {other:?}"))),
        }
    }
}

pub const MAX_WIDTH: usize = 512;
pub const BASE_WIDTH: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub arch: Arch,
    pub use_self_attention: bool,
    pub use_channel_attention: bool,
    pub use_global_residual: bool,
    pub use_spectral_norm: bool,
    pub use_edge_channel: bool,
    /// 0 = no feedback module; k >= 1 runs k full passes threading the
    /// recurrent state at the bottleneck.
    pub feedback_iterations: usize,
    pub input_size: (usize, usize),
}

impl GeneratorConfig {
    pub fn new(arch: Arch, input_size: (usize, usize)) -> Self {
        GeneratorConfig {
            arch,
            use_self_attention: false,
            use_channel_attention: false,
            use_global_residual: false,
            use_spectral_norm: false,
            use_edge_channel: false,
            feedback_iterations: 0,
            input_size,
        }
    }

    pub fn in_channels(&self) -> usize {
        if self.use_edge_channel {
            4
        } else {
            3
        }
    }

    /// Number of halving stages between the input and the bottleneck.
    pub fn depth(&self) -> usize {
        match self.arch {
            Arch::Pix2Pix => self.input_size.0.trailing_zeros() as usize,
            Arch::Rir => 3,
            Arch::RirLarge => 4,
            Arch::DeblurGan => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        match self.arch {
            Arch::Pix2Pix => {
                // The encoder must reach a 1x1x512 bottleneck: square
                // power-of-two inputs of at least 16 (four doublings reach
                // width 512).
                if h != w || !h.is_power_of_two() || h < 16 {
                    return Err(Error::invalid(
                        "generator config",
                        format!("pix2pix needs square power-of-two input >= 16, got {h}x{w}"),
                    ));
                }
            }
            _ => {
                let m = 1usize << self.depth();
                if h % m != 0 || w % m != 0 {
                    return Err(Error::invalid(
                        "generator config",
                        format!(
                            "{} needs input dimensions divisible by {m}, got {h}x{w}",
                            self.arch.name()
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Divisibility check for an arbitrary inference-time image.
    pub fn check_image_dims(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << self.depth();
        match self.arch {
            Arch::Pix2Pix => {
                if h != w || !h.is_power_of_two() || h < m {
                    return Err(Error::invalid(
                        "input image",
                        format!(
                            "pix2pix (depth {}) needs a square power-of-two image of at least {m}, got {h}x{w}",
                            self.depth()
                        ),
                    ));
                }
            }
            _ => {
                if h % m != 0 || w % m != 0 {
                    return Err(Error::invalid(
                        "input image",
                        format!("image dimensions must be multiples of {m}, got {h}x{w}"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Compact `key=value` form for checkpoint metadata.
    pub fn serialize(&self) -> String {
        format!(
            "arch={};sa={};ca={};gr={};sn={};edge={};fb={};h={};w={}",
            self.arch.name(),
            self.use_self_attention as u8,
            self.use_channel_attention as u8,
            self.use_global_residual as u8,
            self.use_spectral_norm as u8,
            self.use_edge_channel as u8,
            self.feedback_iterations,
            self.input_size.0,
            self.input_size.1,
        )
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for part in s.split(';') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid("generator config", format!("bad field {part:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<String> {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::invalid("generator config", format!("missing field {k}")))
        };
        let flag = |k: &str| -> Result<bool> { Ok(get(k)? == "1") };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::invalid("generator config", format!("bad number for {k}")))
        };
        Ok(GeneratorConfig {
            arch: Arch::parse(&get("arch")?)?,
            use_self_attention: flag("sa")?,
            use_channel_attention: flag("ca")?,
            use_global_residual: flag("gr")?,
            use_spectral_norm: flag("sn")?,
            use_edge_channel: flag("edge")?,
            feedback_iterations: num("fb")?,
            input_size: (num("h")?, num("w")?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    /// Widths of the stride-2/stride-1 convolution stack.
    pub widths: Vec<usize>,
    pub use_spectral_norm: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        // Four convolution layers, receptive field 70.
        DiscriminatorConfig {
            widths: vec![64, 128, 256, 512],
            use_spectral_norm: false,
        }
    }
}

// ---- generator ----

#[derive(Clone, Debug)]
struct AttentionSite<T: Scalar> {
    position: usize, // 1-based block index the module follows
    sa: Option<SelfAttentionParams<T>>,
    ca: Option<ChannelAttentionParams<T>>,
}

impl<T: Scalar> AttentionSite<T> {
    fn apply(&self, g: &mut Graph<T>, mut x: Var) -> Result<Var> {
        if let Some(sa) = &self.sa {
            x = self_attention(g, x, sa)?;
        }
        if let Some(ca) = &self.ca {
            x = channel_attention(g, x, ca)?;
        }
        Ok(x)
    }
}

impl<T: Scalar> Visit<T> for AttentionSite<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, SlotKind, &'a Tensor<T>)) {
        if let Some(sa) = &self.sa {
            sa.visit(f);
        }
        if let Some(ca) = &self.ca {
            ca.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, SlotKind, &mut Tensor<T>)) {
        if let Some(sa) = &mut self.sa {
            sa.visit_mut(f);
        }
        if let Some(ca) = &mut self.ca {
            ca.visit_mut(f);
        }
    }
}

/// Plain residual unit of the DeblurGAN body: conv-bn-relu-conv-bn plus the
/// skip, with channel attention appended when the flag is on.
#[derive(Clone, Debug)]
struct DeblurResBlock<T: Scalar> {
    c1: Conv<T>,
    bn1: BatchNormState<T>,
    c2: Conv<T>,
    bn2: BatchNormState<T>,
}

impl<T: Scalar> DeblurResBlock<T> {
    fn init(prefix: &str, channels: usize, spectral: bool, rng: &mut Rng) -> Self {
        DeblurResBlock {
            c1: Conv::init(
                format!("{prefix}.c1"),
                channels,
                channels,
                ConvSpec::plain(3, 1).spectral(spectral),
                rng,
            ),
            bn1: BatchNormState::init(format!("{prefix}.bn1"), channels),
            c2: Conv::init(
                format!("{prefix}.c2"),
                channels,
                channels,
                ConvSpec::plain(3, 1).spectral(spectral),
                rng,
            ),
            bn2: BatchNormState::init(format!("{prefix}.bn2"), channels),
        }
    }

    fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.c1.forward(g, x, mode)?;
        let h = batch_norm(g, h, &mut self.bn1, mode)?;
        let h = g.relu(h);
        let h = self.c2.forward(g, h, mode)?;
        let h = batch_norm(g, h, &mut self.bn2, mode)?;
        g.add(x, h)
    }
}

impl<T: Scalar> Visit<T> for DeblurResBlock<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, SlotKind, &'a Tensor<T>)) {
        self.c1.visit(f);
        self.bn1.visit(f);
        self.c2.visit(f);
        self.bn2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, SlotKind, &mut Tensor<T>)) {
        self.c1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.c2.visit_mut(f);
        self.bn2.visit_mut(f);
    }
}

#[derive(Clone, Debug)]
enum GeneratorBody<T: Scalar> {
    Pix2Pix {
        enc: Vec<EncodeBlockParams<T>>,
        dec: Vec<DecodeBlockParams<T>>,
        enc_attn: Vec<AttentionSite<T>>,
        dec_attn: Vec<AttentionSite<T>>,
        bottleneck_ca: Option<ChannelAttentionParams<T>>,
    },
    Rir {
        head: Conv<T>,
        enc: Vec<RiRBlockParams<T>>,
        dec: Vec<RiRBlockParams<T>>,
        tail: Conv<T>,
        enc_attn: Vec<AttentionSite<T>>,
        dec_attn: Vec<AttentionSite<T>>,
        bottleneck_ca: Option<ChannelAttentionParams<T>>,
    },
    DeblurGan {
        head: Conv<T>,
        down: Vec<(Conv<T>, BatchNormState<T>)>,
        res: Vec<DeblurResBlock<T>>,
        res_attn: Vec<AttentionSite<T>>,
        res_ca: Vec<Option<ChannelAttentionParams<T>>>,
        up: Vec<(Conv<T>, BatchNormState<T>)>,
        tail: Conv<T>,
    },
}

#[derive(Clone, Debug)]
pub struct Generator<T: Scalar> {
    pub cfg: GeneratorConfig,
    body: GeneratorBody<T>,
    feedback: Option<FeedbackParams<T>>,
    bottleneck_channels: usize,
}

/// Details captured during a forward pass, for wiring checks.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub bottleneck_shape: Vec<usize>,
}

fn enc_width(stage: usize) -> usize {
    // stage is 1-based; 64, 128, 256, then capped at 512.
    (BASE_WIDTH << (stage - 1)).min(MAX_WIDTH)
}

/// 1-based positions that receive an attention module: after every third
/// block, never after the block that emits the image itself.
fn attention_positions(depth: usize, excluding_last: bool) -> Vec<usize> {
    let last = if excluding_last { depth.saturating_sub(1) } else { depth };
    (1..=last).filter(|p| p % 3 == 0).collect()
}

pub fn build_generator<T: Scalar>(cfg: &GeneratorConfig, rng: &mut Rng) -> Result<Generator<T>> {
    cfg.validate()?;
    let want_attn = cfg.use_self_attention || cfg.use_channel_attention;
    let r = DEFAULT_REDUCTION;
    let sn = cfg.use_spectral_norm;

    let make_site = |prefix: String, channels: usize, cfgr: &GeneratorConfig, position: usize, rng: &mut Rng| -> Result<AttentionSite<T>> {
        Ok(AttentionSite {
            position,
            sa: cfgr
                .use_self_attention
                .then(|| SelfAttentionParams::init(format!("{prefix}.sa"), channels, rng)),
            ca: if cfgr.use_channel_attention {
                Some(ChannelAttentionParams::init(format!("{prefix}.ca"), channels, r, rng)?)
            } else {
                None
            },
        })
    };

    let (body, bottleneck_channels) = match cfg.arch {
        Arch::Pix2Pix => {
            let depth = cfg.depth();
            let mut enc = Vec::with_capacity(depth);
            let mut widths = Vec::with_capacity(depth);
            let mut cin = cfg.in_channels();
            for i in 1..=depth {
                let cout = enc_width(i);
                // The block producing the 1x1 bottleneck skips batch norm:
                // its statistics would be degenerate at batch size 1.
                let use_bn = i != depth;
                enc.push(EncodeBlockParams::init(
                    &format!("g.enc{i}"),
                    cin,
                    cout,
                    4,
                    use_bn,
                    sn,
                    rng,
                ));
                widths.push(cout);
                cin = cout;
            }
            let mut dec = Vec::with_capacity(depth);
            let mut prev = widths[depth - 1];
            for i in 1..=depth {
                let skip_ch = if i == 1 { 0 } else { widths[depth - i] };
                let cout = if i == depth { 3 } else { widths[depth - i - 1] };
                let act = if i == depth { Activation::Tanh } else { Activation::Relu };
                let use_bn = i != depth;
                dec.push(DecodeBlockParams::init(
                    &format!("g.dec{i}"),
                    prev + skip_ch,
                    cout,
                    4,
                    act,
                    use_bn,
                    sn,
                    rng,
                ));
                prev = cout;
            }
            let mut enc_attn = Vec::new();
            let mut dec_attn = Vec::new();
            if want_attn {
                for p in attention_positions(depth, false) {
                    enc_attn.push(make_site(format!("g.enc{p}"), widths[p - 1], cfg, p, rng)?);
                }
                for p in attention_positions(depth, true) {
                    let ch = widths[depth - p - 1];
                    dec_attn.push(make_site(format!("g.dec{p}"), ch, cfg, p, rng)?);
                }
            }
            let bottleneck_ca = if want_attn {
                Some(ChannelAttentionParams::init(
                    "g.bottleneck.ca",
                    widths[depth - 1],
                    r,
                    rng,
                )?)
            } else {
                None
            };
            (
                GeneratorBody::Pix2Pix {
                    enc,
                    dec,
                    enc_attn,
                    dec_attn,
                    bottleneck_ca,
                },
                widths[depth - 1],
            )
        }
        Arch::Rir | Arch::RirLarge => {
            let depth = cfg.depth();
            let head = Conv::init(
                "g.head",
                cfg.in_channels(),
                BASE_WIDTH,
                ConvSpec::plain(3, 1).spectral(sn),
                rng,
            );
            let mut enc = Vec::new();
            let mut widths = Vec::new();
            let mut cin = BASE_WIDTH;
            for i in 1..=depth {
                let cout = enc_width(i + 1);
                enc.push(RiRBlockParams::init(
                    &format!("g.enc{i}"),
                    cin,
                    cout,
                    r,
                    false,
                    sn,
                    rng,
                )?);
                widths.push(cout);
                cin = cout;
            }
            let mut dec = Vec::new();
            let mut prev = cin;
            for i in 1..=depth {
                let cout = if i == depth {
                    BASE_WIDTH
                } else {
                    widths[depth - i - 1]
                };
                dec.push(RiRBlockParams::init(
                    &format!("g.dec{i}"),
                    prev,
                    cout,
                    r,
                    true,
                    sn,
                    rng,
                )?);
                prev = cout;
            }
            let tail = Conv::init("g.tail", BASE_WIDTH, 3, ConvSpec::plain(3, 1).spectral(sn), rng);
            let mut enc_attn = Vec::new();
            let mut dec_attn = Vec::new();
            if want_attn {
                for p in attention_positions(depth, false) {
                    enc_attn.push(make_site(format!("g.enc{p}"), widths[p - 1], cfg, p, rng)?);
                }
                for p in attention_positions(depth, false) {
                    let ch = if p == depth { BASE_WIDTH } else { widths[depth - p - 1] };
                    dec_attn.push(make_site(format!("g.dec{p}"), ch, cfg, p, rng)?);
                }
            }
            let bottleneck_ca = if want_attn {
                Some(ChannelAttentionParams::init(
                    "g.bottleneck.ca",
                    cin,
                    r,
                    rng,
                )?)
            } else {
                None
            };
            (
                GeneratorBody::Rir {
                    head,
                    enc,
                    dec,
                    tail,
                    enc_attn,
                    dec_attn,
                    bottleneck_ca,
                },
                cin,
            )
        }
        Arch::DeblurGan => {
            let head = Conv::init(
                "g.head",
                cfg.in_channels(),
                BASE_WIDTH,
                ConvSpec::plain(7, 1).spectral(sn),
                rng,
            );
            let mut down = Vec::new();
            let mut cin = BASE_WIDTH;
            for i in 1..=2 {
                let cout = cin * 2;
                down.push((
                    Conv::init(
                        format!("g.down{i}.conv"),
                        cin,
                        cout,
                        ConvSpec::plain(3, 2).spectral(sn),
                        rng,
                    ),
                    BatchNormState::init(format!("g.down{i}.bn"), cout),
                ));
                cin = cout;
            }
            let res: Vec<DeblurResBlock<T>> = (1..=9)
                .map(|i| DeblurResBlock::init(&format!("g.res{i}"), cin, sn, rng))
                .collect();
            let mut res_attn = Vec::new();
            let mut res_ca = Vec::new();
            for i in 1..=9usize {
                if want_attn && i % 3 == 0 {
                    res_attn.push(make_site(format!("g.res{i}"), cin, cfg, i, rng)?);
                }
                res_ca.push(None);
            }
            let mut up = Vec::new();
            for i in 1..=2 {
                let cout = cin / 2;
                up.push((
                    Conv::init(
                        format!("g.up{i}.conv"),
                        cin,
                        cout,
                        ConvSpec::transposed(4, 2).spectral(sn),
                        rng,
                    ),
                    BatchNormState::init(format!("g.up{i}.bn"), cout),
                ));
                cin = cout;
            }
            let tail = Conv::init("g.tail", cin, 3, ConvSpec::plain(7, 1).spectral(sn), rng);
            (
                GeneratorBody::DeblurGan {
                    head,
                    down,
                    res,
                    res_attn,
                    res_ca,
                    up,
                    tail,
                },
                256,
            )
        }
    };

    let feedback = (cfg.feedback_iterations >= 1)
        .then(|| FeedbackParams::init("g.fb", bottleneck_channels, rng));

    Ok(Generator {
        cfg: cfg.clone(),
        body,
        feedback,
        bottleneck_channels,
    })
}

impl<T: Scalar> Generator<T> {
    pub fn bottleneck_channels(&self) -> usize {
        self.bottleneck_channels
    }

    pub fn named_tensors(&self) -> BTreeMap<String, Tensor<T>> {
        named_tensors(self)
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }

    /// Zeroes the weights and bias of the layer that produces the output
    /// image; with the global residual on, the generator then reproduces its
    /// input exactly.
    pub fn zero_output_layer(&mut self) {
        let conv: &mut Conv<T> = match &mut self.body {
            GeneratorBody::Pix2Pix { dec, .. } => &mut dec.last_mut().unwrap().conv,
            GeneratorBody::Rir { tail, .. } => tail,
            GeneratorBody::DeblurGan { tail, .. } => tail,
        };
        conv.w = Tensor::zeros(conv.w.shape());
        if let Some(b) = &mut conv.b {
            *b = Tensor::zeros(b.shape());
        }
    }
}

impl<T: Scalar> Visit<T> for Generator<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, SlotKind, &'a Tensor<T>)) {
        match &self.body {
            GeneratorBody::Pix2Pix {
                enc,
                dec,
                enc_attn,
                dec_attn,
                bottleneck_ca,
            } => {
                enc.iter().for_each(|b| b.visit(f));
                dec.iter().for_each(|b| b.visit(f));
                enc_attn.iter().for_each(|b| b.visit(f));
                dec_attn.iter().for_each(|b| b.visit(f));
                if let Some(ca) = bottleneck_ca {
                    ca.visit(f);
                }
            }
            GeneratorBody::Rir {
                head,
                enc,
                dec,
                tail,
                enc_attn,
                dec_attn,
                bottleneck_ca,
            } => {
                head.visit(f);
                enc.iter().for_each(|b| b.visit(f));
                dec.iter().for_each(|b| b.visit(f));
                tail.visit(f);
                enc_attn.iter().for_each(|b| b.visit(f));
                dec_attn.iter().for_each(|b| b.visit(f));
                if let Some(ca) = bottleneck_ca {
                    ca.visit(f);
                }
            }
            GeneratorBody::DeblurGan {
                head,
                down,
                res,
                res_attn,
                res_ca,
                up,
                tail,
            } => {
                head.visit(f);
                down.iter().for_each(|(c, b)| {
                    c.visit(f);
                    b.visit(f);
                });
                res.iter().for_each(|b| b.visit(f));
                res_attn.iter().for_each(|b| b.visit(f));
                res_ca.iter().flatten().for_each(|b| b.visit(f));
                up.iter().for_each(|(c, b)| {
                    c.visit(f);
                    b.visit(f);
                });
                tail.visit(f);
            }
        }
        if let Some(fb) = &self.feedback {
            fb.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, SlotKind, &mut Tensor<T>)) {
        match &mut self.body {
            GeneratorBody::Pix2Pix {
                enc,
                dec,
                enc_attn,
                dec_attn,
                bottleneck_ca,
            } => {
                enc.iter_mut().for_each(|b| b.visit_mut(f));
                dec.iter_mut().for_each(|b| b.visit_mut(f));
                enc_attn.iter_mut().for_each(|b| b.visit_mut(f));
                dec_attn.iter_mut().for_each(|b| b.visit_mut(f));
                if let Some(ca) = bottleneck_ca {
                    ca.visit_mut(f);
                }
            }
            GeneratorBody::Rir {
                head,
                enc,
                dec,
                tail,
                enc_attn,
                dec_attn,
                bottleneck_ca,
            } => {
                head.visit_mut(f);
                enc.iter_mut().for_each(|b| b.visit_mut(f));
                dec.iter_mut().for_each(|b| b.visit_mut(f));
                tail.visit_mut(f);
                enc_attn.iter_mut().for_each(|b| b.visit_mut(f));
                dec_attn.iter_mut().for_each(|b| b.visit_mut(f));
                if let Some(ca) = bottleneck_ca {
                    ca.visit_mut(f);
                }
            }
            GeneratorBody::DeblurGan {
                head,
                down,
                res,
                res_attn,
                res_ca,
                up,
                tail,
            } => {
                head.visit_mut(f);
                down.iter_mut().for_each(|(c, b)| {
                    c.visit_mut(f);
                    b.visit_mut(f);
                });
                res.iter_mut().for_each(|b| b.visit_mut(f));
                res_attn.iter_mut().for_each(|b| b.visit_mut(f));
                res_ca.iter_mut().flatten().for_each(|b| b.visit_mut(f));
                up.iter_mut().for_each(|(c, b)| {
                    c.visit_mut(f);
                    b.visit_mut(f);
                });
                tail.visit_mut(f);
            }
        }
        if let Some(fb) = &mut self.feedback {
            fb.visit_mut(f);
        }
    }
}

/// One full pass of the generator body. `state` carries the feedback hidden
/// and cell nodes when the feedback module is enabled.
fn body_forward<T: Scalar>(
    gen: &mut Generator<T>,
    g: &mut Graph<T>,
    x: Var,
    state: Option<(Var, Var)>,
    mode: Mode,
) -> Result<(Var, Option<(Var, Var)>, ForwardTrace)> {
    let mut trace = ForwardTrace::default();
    let mut next_state = None;

    let mut apply_feedback = |gen_fb: &mut Option<FeedbackParams<T>>,
                              g: &mut Graph<T>,
                              bottleneck: Var|
     -> Result<Var> {
        if let (Some(fb), Some((h, c))) = (gen_fb.as_mut(), state) {
            let (y, h2, c2) = feedback_cell(g, bottleneck, h, c, fb, mode)?;
            next_state = Some((h2, c2));
            Ok(y)
        } else {
            Ok(bottleneck)
        }
    };

    let raw = match &mut gen.body {
        GeneratorBody::Pix2Pix {
            enc,
            dec,
            enc_attn,
            dec_attn,
            bottleneck_ca,
        } => {
            let depth = enc.len();
            let mut skips = Vec::with_capacity(depth);
            let mut h = x;
            for (i, block) in enc.iter_mut().enumerate() {
                h = encode_block(g, h, block, mode)?;
                if let Some(site) = enc_attn.iter().find(|s| s.position == i + 1) {
                    h = site.apply(g, h)?;
                }
                skips.push(h);
            }
            trace.bottleneck_shape = g.shape(h).to_vec();
            if let Some(ca) = bottleneck_ca {
                h = channel_attention(g, h, ca)?;
            }
            h = apply_feedback(&mut gen.feedback, g, h)?;
            for (i, block) in dec.iter_mut().enumerate() {
                let skip = if i == 0 {
                    None
                } else {
                    Some(skips[depth - 1 - i])
                };
                h = decode_block(g, h, skip, block, mode)?;
                if let Some(site) = dec_attn.iter().find(|s| s.position == i + 1) {
                    h = site.apply(g, h)?;
                }
            }
            h
        }
        GeneratorBody::Rir {
            head,
            enc,
            dec,
            tail,
            enc_attn,
            dec_attn,
            bottleneck_ca,
        } => {
            let mut h = head.forward(g, x, mode)?;
            for (i, block) in enc.iter_mut().enumerate() {
                h = rir_block(g, h, block, mode)?;
                if let Some(site) = enc_attn.iter().find(|s| s.position == i + 1) {
                    h = site.apply(g, h)?;
                }
            }
            trace.bottleneck_shape = g.shape(h).to_vec();
            if let Some(ca) = bottleneck_ca {
                h = channel_attention(g, h, ca)?;
            }
            h = apply_feedback(&mut gen.feedback, g, h)?;
            for (i, block) in dec.iter_mut().enumerate() {
                h = rir_block(g, h, block, mode)?;
                if let Some(site) = dec_attn.iter().find(|s| s.position == i + 1) {
                    h = site.apply(g, h)?;
                }
            }
            let t = tail.forward(g, h, mode)?;
            g.tanh(t)
        }
        GeneratorBody::DeblurGan {
            head,
            down,
            res,
            res_attn,
            up,
            tail,
            ..
        } => {
            let mut h = head.forward(g, x, mode)?;
            h = g.relu(h);
            for (conv, bn) in down.iter_mut() {
                h = conv.forward(g, h, mode)?;
                h = batch_norm(g, h, bn, mode)?;
                h = g.relu(h);
            }
            trace.bottleneck_shape = g.shape(h).to_vec();
            h = apply_feedback(&mut gen.feedback, g, h)?;
            for (i, block) in res.iter_mut().enumerate() {
                h = block.forward(g, h, mode)?;
                if let Some(site) = res_attn.iter().find(|s| s.position == i + 1) {
                    h = site.apply(g, h)?;
                }
            }
            for (conv, bn) in up.iter_mut() {
                h = conv.forward(g, h, mode)?;
                h = batch_norm(g, h, bn, mode)?;
                h = g.relu(h);
            }
            let t = tail.forward(g, h, mode)?;
            g.tanh(t)
        }
    };

    let out = if gen.cfg.use_global_residual {
        let image = if gen.cfg.use_edge_channel {
            g.channel_slice(x, 0, 3)?
        } else {
            x
        };
        global_residual(g, raw, image)?
    } else {
        raw
    };
    Ok((out, next_state, trace))
}

/// Restores an image: `[N, 3(+1), H, W] -> [N, 3, H, W]` in `[-1, 1]`. With
/// feedback enabled the same input is passed `feedback_iterations` times,
/// threading the recurrent state; the final pass's output is returned.
pub fn generator_forward<T: Scalar>(
    g: &mut Graph<T>,
    gen: &mut Generator<T>,
    input: Var,
    mode: Mode,
) -> Result<Var> {
    Ok(generator_forward_traced(g, gen, input, mode)?.0)
}

pub fn generator_forward_traced<T: Scalar>(
    g: &mut Graph<T>,
    gen: &mut Generator<T>,
    input: Var,
    mode: Mode,
) -> Result<(Var, ForwardTrace)> {
    let s = g.shape(input).to_vec();
    if s.len() != 4 || s[1] != gen.cfg.in_channels() {
        return Err(Error::invalid(
            "generator_forward",
            format!(
                "expected [N,{},H,W] input, got {s:?}",
                gen.cfg.in_channels()
            ),
        ));
    }
    gen.cfg.check_image_dims(s[2], s[3])?;

    if gen.feedback.is_none() {
        let (out, _, trace) = body_forward(gen, g, input, None, mode)?;
        return Ok((out, trace));
    }

    let iters = gen.cfg.feedback_iterations.max(1);
    let shrink = 1usize << gen.cfg.depth();
    let state_shape = vec![
        s[0],
        gen.bottleneck_channels,
        s[2] / shrink,
        s[3] / shrink,
    ];
    let mut h = g.leaf(Tensor::zeros(&state_shape), false);
    let mut c = g.leaf(Tensor::zeros(&state_shape), false);
    let mut out = input;
    let mut trace = ForwardTrace::default();
    for it in 0..iters {
        // Persistent state (running stats, power-iteration vectors) advances
        // once per training step, on the first iteration.
        let pass_mode = if it == 0 || mode != Mode::Train {
            mode
        } else {
            Mode::Frozen
        };
        let (o, st, tr) = body_forward(gen, g, input, Some((h, c)), pass_mode)?;
        out = o;
        trace = tr;
        if let Some((h2, c2)) = st {
            h = h2;
            c = c2;
        }
    }
    Ok((out, trace))
}

// ---- discriminator ----

#[derive(Clone, Debug)]
pub struct Discriminator<T: Scalar> {
    pub cfg: DiscriminatorConfig,
    layers: Vec<(Conv<T>, Option<BatchNormState<T>>)>,
    final_conv: Conv<T>,
}

pub fn build_discriminator<T: Scalar>(
    cfg: &DiscriminatorConfig,
    rng: &mut Rng,
) -> Result<Discriminator<T>> {
    if cfg.widths.is_empty() {
        return Err(Error::invalid("discriminator config", "no layer widths"));
    }
    let sn = cfg.use_spectral_norm;
    let mut layers = Vec::new();
    let mut cin = 3;
    for (i, &cout) in cfg.widths.iter().enumerate() {
        // Stride 2 throughout, except the last width which keeps resolution;
        // the first layer has no batch norm.
        let stride = if i + 1 == cfg.widths.len() { 1 } else { 2 };
        layers.push((
            Conv::init(
                format!("d.l{}.conv", i + 1),
                cin,
                cout,
                ConvSpec::plain(4, stride).spectral(sn),
                rng,
            ),
            (i != 0).then(|| BatchNormState::init(format!("d.l{}.bn", i + 1), cout)),
        ));
        cin = cout;
    }
    let final_conv = Conv::init("d.out.conv", cin, 1, ConvSpec::plain(4, 1).spectral(sn), rng);
    Ok(Discriminator {
        cfg: cfg.clone(),
        layers,
        final_conv,
    })
}

impl<T: Scalar> Visit<T> for Discriminator<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, SlotKind, &'a Tensor<T>)) {
        for (conv, bn) in &self.layers {
            conv.visit(f);
            if let Some(bn) = bn {
                bn.visit(f);
            }
        }
        self.final_conv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, SlotKind, &mut Tensor<T>)) {
        for (conv, bn) in &mut self.layers {
            conv.visit_mut(f);
            if let Some(bn) = bn {
                bn.visit_mut(f);
            }
        }
        self.final_conv.visit_mut(f);
    }
}

impl<T: Scalar> Discriminator<T> {
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor<T>> {
        named_tensors(self)
    }
}

/// Scores each receptive-field patch of the image; returns the raw score map
/// (no sigmoid; the least-squares objective consumes raw scores) plus its
/// spatial mean.
pub fn discriminator_forward<T: Scalar>(
    g: &mut Graph<T>,
    d: &mut Discriminator<T>,
    image: Var,
    mode: Mode,
) -> Result<(Var, Var)> {
    let s = g.shape(image);
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::invalid(
            "discriminator_forward",
            format!("expected [N,3,H,W] image, got {s:?}"),
        ));
    }
    let mut h = image;
    for (conv, bn) in d.layers.iter_mut() {
        h = conv.forward(g, h, mode)?;
        if let Some(bn) = bn {
            h = batch_norm(g, h, bn, mode)?;
        }
        h = g.leaky_relu(h, 0.2);
    }
    let map = d.final_conv.forward(g, h, mode)?;
    let mean = g.mean_all(map);
    Ok((map, mean))
}

/// The generator configurations evaluated in the paper's result tables, with
/// the classical loss used by each row.
pub fn table_configs(input_size: (usize, usize)) -> Vec<(String, GeneratorConfig, &'static str)> {
    let base = |arch: Arch| GeneratorConfig::new(arch, input_size);
    let mut rows = Vec::new();

    let p = base(Arch::Pix2Pix);
    rows.push(("pix2pix".to_string(), p.clone(), "l1"));
    let mut sa = p.clone();
    sa.use_self_attention = true;
    rows.push(("pix2pix+sa".to_string(), sa.clone(), "l1"));
    let mut sa_gr = sa.clone();
    sa_gr.use_global_residual = true;
    rows.push(("pix2pix+sa+gr".to_string(), sa_gr.clone(), "l1"));
    let mut sa_sn = sa.clone();
    sa_sn.use_spectral_norm = true;
    rows.push(("pix2pix+sa+sn".to_string(), sa_sn, "l1"));
    let mut full = sa_gr.clone();
    full.use_channel_attention = true;
    full.use_spectral_norm = true;
    rows.push(("pix2pix+sa+ca+gr+sn".to_string(), full, "perceptual"));

    let mut rir = base(Arch::Rir);
    rir.use_self_attention = true;
    rir.use_channel_attention = true;
    rir.use_spectral_norm = true;
    rir.use_global_residual = true;
    rows.push(("rir+ca+sa+sn+gr".to_string(), rir.clone(), "perceptual"));
    let mut rir_large = rir;
    rir_large.arch = Arch::RirLarge;
    rows.push(("rir_large+ca+sa+sn+gr".to_string(), rir_large, "l1"));

    let dg = base(Arch::DeblurGan);
    rows.push(("deblurgan".to_string(), dg.clone(), "l1"));
    let mut dg_edge = dg.clone();
    dg_edge.use_edge_channel = true;
    rows.push(("deblurgan+edge".to_string(), dg_edge, "l1"));
    let mut dg_fb = dg;
    dg_fb.feedback_iterations = 4;
    rows.push(("deblurgan+feedback".to_string(), dg_fb, "l1"));

    rows
}
