//! The full super-resolution network in either form.
//!
//! Architecture, fixed up to its size knobs:
//!
//! ```text
//! head 3x3 conv (colors -> c), PReLU
//! m body blocks (multi-branch while training, plain 3x3 once collapsed),
//!   each followed by PReLU
//! tail 3x3 conv (c -> colors * scale^2), pixel shuffle to full resolution
//! plus a global nearest-neighbor skip from the input
//! ```
//!
//! The two forms share everything except the body, so collapsing swaps
//! `Body::Training` for `Body::Plain` and nothing else. The tail has no
//! activation after it: the network predicts a residual around the
//! nearest-neighbor upsample, which is already in the output's range.

use crate::block::{
    block_backward, block_forward_with_tape, block_infer, build_block, BlockGrads, BlockParams,
    BlockSpec, BlockTape,
};
use crate::error::{Error, Result};
use crate::ops::activation::{prelu, prelu_backward, prelu_with_tape, PreluParams, PreluTape};
use crate::ops::batchnorm::{BnMode, BnParams};
use crate::ops::conv::{conv2d, conv2d_backward, conv2d_with_tape, ConvParams, ConvTape};
use crate::ops::resample::{nearest_upsample, pixel_shuffle, pixel_shuffle_backward};
use crate::reparam::PlainConv;
use crate::tensor::{seeded_normal, Prng, Scalar, Tensor4};

/// Static description of a network: size knobs plus the block layout.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    /// Number of body blocks.
    pub blocks: usize,
    /// Feature channels throughout the body.
    pub channels: usize,
    /// Upscaling factor (2, 3, or 4).
    pub scale: usize,
    /// Image channels (1 for grayscale, 3 for RGB).
    pub colors: usize,
    /// Layout of each body block during training.
    pub block: BlockSpec,
}

impl ModelSpec {
    /// Spec with default block layout for the given sizes.
    pub fn new(blocks: usize, channels: usize, scale: usize, colors: usize) -> Self {
        ModelSpec {
            blocks,
            channels,
            scale,
            colors,
            block: BlockSpec::new(channels),
        }
    }

    /// Parse compact size notation like `M4C16x2`: 4 blocks, 16 channels,
    /// scale 2.
    pub fn parse_notation(s: &str) -> Result<(usize, usize, usize)> {
        let bad = || Error::invalid("parse_notation", format!("`{s}` is not M<int>C<int>x<int>"));
        let rest = s.strip_prefix('M').ok_or_else(bad)?;
        let (m, rest) = rest.split_once('C').ok_or_else(bad)?;
        let (c, r) = rest.split_once('x').ok_or_else(bad)?;
        let blocks = m.parse().map_err(|_| bad())?;
        let channels = c.parse().map_err(|_| bad())?;
        let scale = r.parse().map_err(|_| bad())?;
        Ok((blocks, channels, scale))
    }

    /// Compact size notation, the inverse of [`Self::parse_notation`].
    pub fn notation(&self) -> String {
        format!("M{}C{}x{}", self.blocks, self.channels, self.scale)
    }

    /// Check every structural constraint.
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.scale) {
            return Err(Error::invalid(
                "ModelSpec::validate",
                format!("scale {} not in 2..=4", self.scale),
            ));
        }
        if self.colors != 1 && self.colors != 3 {
            return Err(Error::invalid(
                "ModelSpec::validate",
                format!("colors {} must be 1 or 3", self.colors),
            ));
        }
        if self.blocks == 0 {
            return Err(Error::invalid(
                "ModelSpec::validate",
                "need at least one body block".to_string(),
            ));
        }
        if self.block.channels != self.channels {
            return Err(Error::invalid(
                "ModelSpec::validate",
                format!(
                    "block channels {} disagree with model channels {}",
                    self.block.channels, self.channels
                ),
            ));
        }
        self.block.validate()
    }
}

/// Which body the model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ModelForm {
    /// Multi-branch blocks with batch norms: the trainable form.
    #[serde(rename = "training")]
    Training,
    /// One 3x3 convolution per block: the deployment form.
    #[serde(rename = "plain")]
    Plain,
}

impl std::fmt::Display for ModelForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelForm::Training => "training",
            ModelForm::Plain => "plain",
        })
    }
}

/// Body of the network in one of the two forms.
#[derive(Clone, Debug, PartialEq)]
pub enum Body<T> {
    Training(Vec<BlockParams<T>>),
    Plain(Vec<PlainConv<T>>),
}

/// The network: head, activations, body, tail. The global skip is part of
/// the forward pass, not a parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    /// 3x3 convolution from image channels to features.
    pub head: ConvParams<T>,
    /// PReLU after the head and after every block: `blocks + 1` of them.
    pub acts: Vec<PreluParams<T>>,
    pub body: Body<T>,
    /// 3x3 convolution from features to `colors * scale^2` channels.
    pub tail: ConvParams<T>,
}

/// Randomly initialize a training-form model.
///
/// Head and expand convolutions use fan-in scaling; squeeze convolutions
/// are damped (see [`build_block`]); the tail uses plain `1/fan_in`
/// variance since no activation follows it. All biases start at zero.
pub fn build_model<T: Scalar>(spec: &ModelSpec, rng: &mut Prng) -> Result<Model<T>> {
    spec.validate()?;
    let c = spec.channels;
    let head_std = (2.0 / (9.0 * spec.colors as f64)).sqrt();
    let head = ConvParams::new(
        seeded_normal([c, spec.colors, 3, 3], 0.0, head_std, rng)?,
        vec![T::zero(); c],
    )?;
    let mut blocks = Vec::with_capacity(spec.blocks);
    for _ in 0..spec.blocks {
        blocks.push(build_block(&spec.block, rng)?);
    }
    let tail_out = spec.colors * spec.scale * spec.scale;
    let tail_std = (1.0 / (9.0 * c as f64)).sqrt();
    let tail = ConvParams::new(
        seeded_normal([tail_out, c, 3, 3], 0.0, tail_std, rng)?,
        vec![T::zero(); tail_out],
    )?;
    let acts = (0..=spec.blocks).map(|_| PreluParams::new(c)).collect();
    Ok(Model {
        spec: spec.clone(),
        head,
        acts,
        body: Body::Training(blocks),
        tail,
    })
}

impl<T: Scalar> Model<T> {
    /// Which form the body is in.
    pub fn form(&self) -> ModelForm {
        match self.body {
            Body::Training(_) => ModelForm::Training,
            Body::Plain(_) => ModelForm::Plain,
        }
    }

    fn check_input(&self, op: &'static str, x: &Tensor4<T>) -> Result<()> {
        if x.c() != self.spec.colors {
            return Err(Error::ChannelMismatch {
                op,
                tensor: x.c(),
                params: self.spec.colors,
            });
        }
        if x.n() == 0 || x.h() == 0 || x.w() == 0 {
            return Err(Error::invalid(op, "input has an empty dimension"));
        }
        if self.acts.len() != self.spec.blocks + 1 {
            return Err(Error::ModelStructure {
                op,
                msg: format!(
                    "expected {} activations, model has {}",
                    self.spec.blocks + 1,
                    self.acts.len()
                ),
            });
        }
        Ok(())
    }

    /// Deployment forward pass: batch norms use their stored statistics
    /// whatever their mode, nothing is mutated. `(n, colors, h, w)` in,
    /// `(n, colors, h*scale, w*scale)` out.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input("Model::forward", x)?;
        let mut feat = prelu(&conv2d(x, &self.head)?, &self.acts[0])?;
        match &self.body {
            Body::Training(blocks) => {
                for (i, block) in blocks.iter().enumerate() {
                    let out = block_infer(&feat, block, &self.spec.block)?;
                    feat = prelu(&out, &self.acts[i + 1])?;
                }
            }
            Body::Plain(convs) => {
                for (i, pc) in convs.iter().enumerate() {
                    let out = conv2d(&feat, pc.conv())?;
                    feat = prelu(&out, &self.acts[i + 1])?;
                }
            }
        }
        let up = pixel_shuffle(&conv2d(&feat, &self.tail)?, self.spec.scale)?;
        let skip = nearest_upsample(x, self.spec.scale)?;
        up.add(&skip)
    }

    /// Training forward pass with tapes. Mode-respecting: `Batch`-mode
    /// norms use batch statistics and update their running estimates
    /// (hence `&mut`), latched norms behave exactly like [`Self::forward`].
    /// Only the training form supports this.
    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<(Tensor4<T>, ModelTape<T>)> {
        self.check_input("Model::forward_train", x)?;
        let blocks = match &mut self.body {
            Body::Training(blocks) => blocks,
            Body::Plain(_) => {
                return Err(Error::ModelStructure {
                    op: "Model::forward_train",
                    msg: "plain form has nothing to train; use the multi-branch form".into(),
                })
            }
        };
        let (h0, head_tape) = conv2d_with_tape(x, &self.head)?;
        let (mut feat, act0_tape) = prelu_with_tape(&h0, &self.acts[0])?;
        let mut act_tapes = vec![act0_tape];
        let mut block_tapes = Vec::with_capacity(blocks.len());
        for (i, block) in blocks.iter_mut().enumerate() {
            let (out, btape) = block_forward_with_tape(&feat, block, &self.spec.block)?;
            let (next, atape) = prelu_with_tape(&out, &self.acts[i + 1])?;
            feat = next;
            block_tapes.push(btape);
            act_tapes.push(atape);
        }
        let (t0, tail_tape) = conv2d_with_tape(&feat, &self.tail)?;
        let up = pixel_shuffle(&t0, self.spec.scale)?;
        let skip = nearest_upsample(x, self.spec.scale)?;
        let y = up.add(&skip)?;
        Ok((
            y,
            ModelTape {
                head: head_tape,
                acts: act_tapes,
                blocks: block_tapes,
                tail: tail_tape,
            },
        ))
    }

    /// Reverse-mode gradients for every trainable parameter, given the
    /// gradient of the loss with respect to the output. Consumes the tape.
    pub fn backward(&self, grad_out: &Tensor4<T>, tape: ModelTape<T>) -> Result<ModelGrads<T>> {
        let blocks = match &self.body {
            Body::Training(blocks) => blocks,
            Body::Plain(_) => {
                return Err(Error::ModelStructure {
                    op: "Model::backward",
                    msg: "plain form has nothing to train".into(),
                })
            }
        };
        // The skip path is parameter-free, so only the main path matters.
        let g_tail_out = pixel_shuffle_backward(grad_out, self.spec.scale)?;
        let tail_grads = conv2d_backward(&g_tail_out, tape.tail, &self.tail)?;
        let mut g = tail_grads.input;

        let mut act_grads: Vec<Vec<T>> = vec![Vec::new(); self.acts.len()];
        let mut block_grads: Vec<Option<BlockGrads<T>>> =
            (0..blocks.len()).map(|_| None).collect();
        let mut act_tapes = tape.acts;
        let act0_tape = act_tapes.remove(0);
        for ((i, block), (btape, atape)) in blocks
            .iter()
            .enumerate()
            .zip(tape.blocks.into_iter().zip(act_tapes))
            .rev()
        {
            let pa = prelu_backward(&g, atape, &self.acts[i + 1])?;
            act_grads[i + 1] = pa.slope;
            let (g_in, bg) = block_backward(&pa.input, btape, block, &self.spec.block)?;
            block_grads[i] = Some(bg);
            g = g_in;
        }
        let pa = prelu_backward(&g, act0_tape, &self.acts[0])?;
        act_grads[0] = pa.slope;
        let head_grads = conv2d_backward(&pa.input, tape.head, &self.head)?;

        Ok(ModelGrads {
            head_weight: head_grads.weight,
            head_bias: head_grads.bias,
            acts: act_grads,
            blocks: block_grads.into_iter().map(|b| b.unwrap()).collect(),
            tail_weight: tail_grads.weight,
            tail_bias: tail_grads.bias,
        })
    }

    /// Every batch-norm layer in a fixed traversal order (block-major).
    /// Empty for the plain form.
    pub fn bn_layers(&self) -> Vec<&BnParams<T>> {
        match &self.body {
            Body::Training(blocks) => blocks.iter().flat_map(|b| b.bn_layers()).collect(),
            Body::Plain(_) => Vec::new(),
        }
    }

    /// Mutable variant of [`Self::bn_layers`], same order.
    pub fn bn_layers_mut(&mut self) -> Vec<&mut BnParams<T>> {
        match &mut self.body {
            Body::Training(blocks) => blocks.iter_mut().flat_map(|b| b.bn_layers_mut()).collect(),
            Body::Plain(_) => Vec::new(),
        }
    }

    /// Trainable parameter slices in the canonical order: head weight and
    /// bias, the head activation, then per block its parameters followed
    /// by its activation, then tail weight and bias. Mirrored exactly by
    /// [`ModelGrads::grad_slices`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        out.push(self.head.weight.data_mut());
        out.push(&mut self.head.bias);
        let mut acts = self.acts.iter_mut();
        out.push(&mut acts.next().expect("validated: blocks + 1 acts").slope);
        match &mut self.body {
            Body::Training(blocks) => {
                for block in blocks {
                    out.extend(block.param_slices_mut());
                    out.push(&mut acts.next().expect("one act per block").slope);
                }
            }
            Body::Plain(convs) => {
                for pc in convs {
                    let conv = pc.conv_mut();
                    out.push(conv.weight.data_mut());
                    out.push(&mut conv.bias);
                    out.push(&mut acts.next().expect("one act per block").slope);
                }
            }
        }
        out.push(self.tail.weight.data_mut());
        out.push(&mut self.tail.bias);
        out
    }

    /// Total trainable scalar count of this instance.
    pub fn param_count(&mut self) -> usize {
        self.param_slices_mut().iter().map(|s| s.len()).sum()
    }
}

/// Saved forward state of [`Model::forward_train`].
#[derive(Debug)]
pub struct ModelTape<T> {
    head: ConvTape<T>,
    acts: Vec<PreluTape<T>>,
    blocks: Vec<BlockTape<T>>,
    tail: ConvTape<T>,
}

/// Gradients for every trainable parameter of a training-form model.
pub struct ModelGrads<T> {
    pub head_weight: Tensor4<T>,
    pub head_bias: Vec<T>,
    /// One slope-gradient vector per activation.
    pub acts: Vec<Vec<T>>,
    pub blocks: Vec<BlockGrads<T>>,
    pub tail_weight: Tensor4<T>,
    pub tail_bias: Vec<T>,
}

impl<T: Scalar> ModelGrads<T> {
    /// Gradient slices in the canonical order of
    /// [`Model::param_slices_mut`].
    pub fn grad_slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        out.push(self.head_weight.data());
        out.push(&self.head_bias);
        out.push(&self.acts[0]);
        for (i, bg) in self.blocks.iter().enumerate() {
            out.extend(bg.grad_slices());
            out.push(&self.acts[i + 1]);
        }
        out.push(self.tail_weight.data());
        out.push(&self.tail_bias);
        out
    }
}

/// Parameter and multiply-accumulate counts from [`count_params_flops`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    /// Trainable scalar count.
    pub params: usize,
    /// Multiply-accumulate operations for one forward pass at the given
    /// input size.
    pub macs: u64,
}

impl CostReport {
    /// MACs in units of 10^9, the customary reporting unit.
    pub fn gmacs(&self) -> f64 {
        self.macs as f64 / 1e9
    }
}

/// Closed-form parameter and MAC counts for a spec in either form.
///
/// Parameters count every trainable scalar: convolution weights and
/// biases, batch-norm affine pairs, PReLU slopes. MACs count convolution
/// work only — weights and bias additions — at the low-resolution input
/// size `(h, w)`; normalization, activations, and resampling are excluded
/// as is customary. Every convolution in this architecture runs at low
/// resolution (upscaling happens at the very end via pixel shuffle), so
/// MACs scale linearly in `h * w`.
pub fn count_params_flops(
    spec: &ModelSpec,
    form: ModelForm,
    h: usize,
    w: usize,
) -> Result<CostReport> {
    spec.validate()?;
    let c = spec.channels;
    let colors = spec.colors;
    let r2 = spec.scale * spec.scale;
    let head = c * colors * 9 + c;
    let tail = (colors * r2) * c * 9 + colors * r2;
    let acts = (spec.blocks + 1) * c;

    let (body_params, body_macs_per_px) = match form {
        ModelForm::Training => {
            let per_block = spec.block.param_count();
            let m = spec.block.mid_channels();
            // MACs per block: the two convolutions of each branch; norms
            // are excluded even though they carry parameters.
            let branch_macs = (m * c * 9 + m) + (c * m + c);
            (
                spec.blocks * per_block,
                spec.blocks * spec.block.num_branches * branch_macs,
            )
        }
        ModelForm::Plain => {
            let per_block = c * c * 9 + c;
            (spec.blocks * per_block, spec.blocks * per_block)
        }
    };

    let params = head + acts + body_params + tail;
    let macs = (head + body_macs_per_px + tail) as u64 * (h * w) as u64;
    Ok(CostReport { params, macs })
}

/// Re-estimate every batch-norm layer's population statistics from one
/// probe batch.
///
/// Runs a single Batch-mode feature pass with momentum 1, so the stored
/// estimates become exactly the probe batch's statistics, then restores
/// each layer's previous mode and momentum. Useful when training-time
/// estimates have gone stale (or as the self-consistency anchor for the
/// statistics trace). Plain models have no such layers and are rejected.
pub fn recalibrate_bn<T: Scalar>(model: &mut Model<T>, probe: &Tensor4<T>) -> Result<()> {
    model.check_input("recalibrate_bn", probe)?;
    if model.bn_layers().is_empty() {
        return Err(Error::NoBnLayers);
    }
    let saved: Vec<(BnMode, T)> = model
        .bn_layers()
        .iter()
        .map(|bn| (bn.mode, bn.momentum))
        .collect();
    for bn in model.bn_layers_mut() {
        bn.mode = BnMode::Batch;
        bn.momentum = T::one();
    }
    // Feature path only: batch norms live in the blocks, so the tail,
    // shuffle, and skip contribute nothing here.
    let result = (|| -> Result<()> {
        let mut feat = prelu(&conv2d(probe, &model.head)?, &model.acts[0])?;
        let spec_block = model.spec.block;
        if let Body::Training(blocks) = &mut model.body {
            for (i, block) in blocks.iter_mut().enumerate() {
                let out = crate::block::block_forward(&feat, block, &spec_block)?;
                feat = prelu(&out, &model.acts[i + 1])?;
            }
        }
        Ok(())
    })();
    for (bn, (mode, momentum)) in model.bn_layers_mut().into_iter().zip(saved) {
        bn.mode = mode;
        bn.momentum = momentum;
    }
    result
}
