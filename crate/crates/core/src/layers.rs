//! Concrete DNN layers as data-only descriptors.
//!
//! A [`LayerSpec`] knows how to map itself onto the abstract layer once the
//! input shape is known ([`LayerSpec::bind`]). It owns no computation:
//! everything runs through [`crate::driver`].

use crate::error::{Error, Result};
use crate::layer::{output_shape, BinaryMode, LayerParams, MaxFloor, ReductionOp};
use crate::layout::{Pads, WeightShape};

/// Spatial padding policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Valid,
    /// Output `ceil(I / S)`; the extra row/column goes to the bottom/right.
    Same,
    Explicit(Pads),
}

impl Padding {
    pub fn resolve(&self, input: (usize, usize), window: (usize, usize), stride: (usize, usize)) -> Pads {
        match *self {
            Padding::Valid => Pads::NONE,
            Padding::Explicit(p) => p,
            Padding::Same => {
                let (top, bottom) = same_split(input.0, window.0, stride.0);
                let (left, right) = same_split(input.1, window.1, stride.1);
                Pads { top, bottom, left, right }
            }
        }
    }
}

fn same_split(input: usize, window: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + window).saturating_sub(input);
    (total / 2, total - total / 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d { f_h: usize, f_w: usize, stride: (usize, usize), out_channels: usize },
    DepthwiseConv { f_h: usize, f_w: usize, stride: (usize, usize) },
    GroupConv { f_h: usize, f_w: usize, stride: (usize, usize), channels_per_group: usize, filters_per_group: usize },
    MaxPool { f_h: usize, f_w: usize, stride: (usize, usize) },
    Relu,
    FullyConnected { out_features: usize },
    Add,
    BatchNormAffine,
    UpsampleNearest { scale: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub padding: Padding,
}

/// A layer mapped onto the abstract layer for one input shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundLayer {
    pub params: LayerParams,
    pub op: ReductionOp,
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
    pub groups: usize,
}

impl BoundLayer {
    /// Plain weight tensor dimensions for FMA layers.
    pub fn weight_shape(&self) -> Option<WeightShape> {
        let p = &self.params;
        match self.op {
            ReductionOp::Fma => Some(WeightShape {
                groups: self.groups,
                filters: p.k,
                channels: p.f_c,
                height: p.f_h,
                width: p.f_w,
            }),
            _ => None,
        }
    }

    /// Learned parameters: `G K F_C F_H F_W` for FMA, scale + shift for affine.
    pub fn param_count(&self) -> usize {
        match self.op {
            ReductionOp::Fma => self.weight_shape().map_or(0, |w| w.len()),
            ReductionOp::PointwiseFmaBinary(BinaryMode::Affine) => 2 * self.output.2,
            _ => 0,
        }
    }

    /// Single-element layers may overwrite their input.
    pub fn in_place(&self) -> bool {
        crate::driver::in_place_capable(&self.params, self.op)
    }
}

pub fn conv2d(f_h: usize, f_w: usize, stride: usize, out_channels: usize, padding: Padding) -> LayerSpec {
    LayerSpec { kind: LayerKind::Conv2d { f_h, f_w, stride: (stride, stride), out_channels }, padding }
}

pub fn depthwise_conv(f_h: usize, f_w: usize, stride: usize, padding: Padding) -> LayerSpec {
    LayerSpec { kind: LayerKind::DepthwiseConv { f_h, f_w, stride: (stride, stride) }, padding }
}

pub fn group_conv(
    f_h: usize,
    f_w: usize,
    stride: usize,
    channels_per_group: usize,
    filters_per_group: usize,
    padding: Padding,
) -> LayerSpec {
    LayerSpec {
        kind: LayerKind::GroupConv { f_h, f_w, stride: (stride, stride), channels_per_group, filters_per_group },
        padding,
    }
}

pub fn maxpool(f_h: usize, f_w: usize, stride: usize) -> LayerSpec {
    LayerSpec { kind: LayerKind::MaxPool { f_h, f_w, stride: (stride, stride) }, padding: Padding::Valid }
}

pub fn relu() -> LayerSpec {
    LayerSpec { kind: LayerKind::Relu, padding: Padding::Valid }
}

pub fn fully_connected(out_features: usize) -> LayerSpec {
    LayerSpec { kind: LayerKind::FullyConnected { out_features }, padding: Padding::Valid }
}

pub fn add() -> LayerSpec {
    LayerSpec { kind: LayerKind::Add, padding: Padding::Valid }
}

pub fn batchnorm_affine() -> LayerSpec {
    LayerSpec { kind: LayerKind::BatchNormAffine, padding: Padding::Valid }
}

pub fn upsample_nearest(scale: usize) -> LayerSpec {
    LayerSpec { kind: LayerKind::UpsampleNearest { scale }, padding: Padding::Valid }
}

impl LayerSpec {
    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::DepthwiseConv { .. } => "depthwise_conv",
            LayerKind::GroupConv { .. } => "group_conv",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Relu => "relu",
            LayerKind::FullyConnected { .. } => "fully_connected",
            LayerKind::Add => "add",
            LayerKind::BatchNormAffine => "batchnorm",
            LayerKind::UpsampleNearest { .. } => "upsample",
        }
    }

    /// Maps the layer onto `(LayerParams, ReductionOp)` for `input = (H, W, C)`.
    pub fn bind(&self, input: (usize, usize, usize)) -> Result<BoundLayer> {
        let (ih, iw, ic) = input;
        let windowed = |f_h: usize, f_w: usize, stride: (usize, usize), f_c: usize, s_c: usize, k: usize| {
            let pads = self.padding.resolve((ih, iw), (f_h, f_w), stride);
            LayerParams::new(f_h, f_w, f_c, stride.0, stride.1, s_c, k).with_pads(pads)
        };
        let (params, op) = match self.kind {
            LayerKind::Conv2d { f_h, f_w, stride, out_channels } => {
                (windowed(f_h, f_w, stride, ic, 1, out_channels), ReductionOp::Fma)
            }
            LayerKind::DepthwiseConv { f_h, f_w, stride } => (windowed(f_h, f_w, stride, 1, 1, 1), ReductionOp::Fma),
            LayerKind::GroupConv { f_h, f_w, stride, channels_per_group, filters_per_group } => {
                if channels_per_group == 0 || ic % channels_per_group != 0 {
                    return Err(Error::Params(format!(
                        "{ic} input channels do not split into groups of {channels_per_group}"
                    )));
                }
                let p = windowed(f_h, f_w, stride, channels_per_group, channels_per_group, filters_per_group);
                (p, ReductionOp::Fma)
            }
            LayerKind::MaxPool { f_h, f_w, stride } => {
                (windowed(f_h, f_w, stride, 1, 1, 1), ReductionOp::Max(MaxFloor::NegInfinity))
            }
            LayerKind::Relu => (LayerParams::pointwise(), ReductionOp::Max(MaxFloor::Zero)),
            LayerKind::FullyConnected { out_features } => {
                (LayerParams::new(ih, iw, ic, 1, 1, 1, out_features), ReductionOp::Fma)
            }
            LayerKind::Add => (LayerParams::pointwise(), ReductionOp::PointwiseFmaBinary(BinaryMode::Add)),
            LayerKind::BatchNormAffine => {
                (LayerParams::pointwise(), ReductionOp::PointwiseFmaBinary(BinaryMode::Affine))
            }
            LayerKind::UpsampleNearest { scale } => {
                if scale == 0 {
                    return Err(Error::Params("upsample scale must be >= 1".into()));
                }
                let bound = BoundLayer {
                    params: LayerParams::pointwise(),
                    op: ReductionOp::UpsampleNearest { scale },
                    input,
                    output: (ih * scale, iw * scale, ic),
                    groups: ic,
                };
                return Ok(bound);
            }
        };
        let o = output_shape(&params, input)?;
        Ok(BoundLayer { params, op, input, output: (o.height, o.width, o.channels), groups: o.groups })
    }
}
