//! The seven-parameter abstract layer and its shape calculus.

use crate::error::{Error, Result};
use crate::layout::Pads;

/// Reduction window, strides and filter count of an abstract layer.
///
/// `f_*` are window extents, `s_*` strides, `k` the filters applied to
/// each window (filters per group). The group count `G` follows from the
/// input channels; see [`output_shape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerParams {
    pub f_h: usize,
    pub f_w: usize,
    pub f_c: usize,
    pub s_h: usize,
    pub s_w: usize,
    pub s_c: usize,
    pub k: usize,
    pub pads: Pads,
}

impl LayerParams {
    pub fn new(f_h: usize, f_w: usize, f_c: usize, s_h: usize, s_w: usize, s_c: usize, k: usize) -> Self {
        LayerParams { f_h, f_w, f_c, s_h, s_w, s_c, k, pads: Pads::NONE }
    }

    /// `1 x 1 x 1` window, unit strides, one filter.
    pub fn pointwise() -> Self {
        Self::new(1, 1, 1, 1, 1, 1, 1)
    }

    pub fn with_pads(mut self, pads: Pads) -> Self {
        self.pads = pads;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("F_H", self.f_h),
            ("F_W", self.f_w),
            ("F_C", self.f_c),
            ("S_H", self.s_h),
            ("S_W", self.s_w),
            ("S_C", self.s_c),
            ("K", self.k),
        ];
        for (name, v) in named {
            if v == 0 {
                return Err(Error::Params(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Weights per group and filter (`F_H * F_W * F_C`).
    pub fn window_len(&self) -> usize {
        self.f_h * self.f_w * self.f_c
    }
}

/// Output geometry of a bound layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OutputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub groups: usize,
}

/// `O_H = (I_H + pad - F_H) / S_H + 1` (floor), likewise `O_W`;
/// `G = (I_C - F_C) / S_C + 1`, `O_C = K * G`.
pub fn output_shape(params: &LayerParams, input: (usize, usize, usize)) -> Result<OutputShape> {
    params.validate()?;
    let (ih, iw, ic) = input;
    if ih == 0 || iw == 0 || ic == 0 {
        return Err(Error::Params(format!("input dims must be >= 1, got {ih}x{iw}x{ic}")));
    }
    let ph = ih + params.pads.vertical();
    let pw = iw + params.pads.horizontal();
    if params.f_h > ph {
        return Err(Error::Window { dim: "height", window: params.f_h, input: ph });
    }
    if params.f_w > pw {
        return Err(Error::Window { dim: "width", window: params.f_w, input: pw });
    }
    if params.f_c > ic {
        return Err(Error::Window { dim: "channels", window: params.f_c, input: ic });
    }
    let groups = (ic - params.f_c) / params.s_c + 1;
    Ok(OutputShape {
        height: (ph - params.f_h) / params.s_h + 1,
        width: (pw - params.f_w) / params.s_w + 1,
        channels: params.k * groups,
        groups,
    })
}

/// When a MAX reduction starts: below every input, or at zero (ReLU).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaxFloor {
    NegInfinity,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryMode {
    /// `a + b` with a second activation tensor (residual add).
    Add,
    /// `a * scale[c] + shift[c]` (inference batch norm).
    Affine,
}

/// How window elements are combined into one output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReductionOp {
    /// Multiply-accumulate with a weight tensor.
    Fma,
    /// Running maximum, no weights.
    Max(MaxFloor),
    /// Element-wise combination with a second operand.
    PointwiseFmaBinary(BinaryMode),
    /// Output `(h, w)` copies input `(h / scale, w / scale)`.
    UpsampleNearest { scale: usize },
}

impl ReductionOp {
    /// Whether the op consumes a weight tensor or second input.
    pub fn needs_operand(&self) -> bool {
        matches!(self, ReductionOp::Fma | ReductionOp::PointwiseFmaBinary(_))
    }

    pub fn name(&self) -> &'static str {
        match self {
            ReductionOp::Fma => "fma",
            ReductionOp::Max(_) => "max",
            ReductionOp::PointwiseFmaBinary(BinaryMode::Add) => "add",
            ReductionOp::PointwiseFmaBinary(BinaryMode::Affine) => "affine",
            ReductionOp::UpsampleNearest { .. } => "upsample",
        }
    }
}

/// The five layer classes, by number and location of reduced inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerClass {
    SingleElement,
    SingleChannel,
    PartialChannel,
    FullChannel,
    Full,
}

/// Classifies a layer by its window against the padded input.
///
/// Rows can coincide when dimensions are 1; the first match in the order
/// SingleElement, SingleChannel, Full, FullChannel wins, PartialChannel
/// otherwise.
pub fn classify(params: &LayerParams, input: (usize, usize, usize)) -> LayerClass {
    let (ih, iw, ic) = input;
    let ph = ih + params.pads.vertical();
    let pw = iw + params.pads.horizontal();
    let p = params;
    if p.f_h == 1 && p.f_w == 1 && p.f_c == 1 && p.k == 1 {
        LayerClass::SingleElement
    } else if p.f_c == 1 && p.k == 1 && p.s_c == 1 {
        LayerClass::SingleChannel
    } else if p.f_h == ph && p.f_w == pw && p.f_c == ic {
        LayerClass::Full
    } else if p.f_c == ic {
        LayerClass::FullChannel
    } else {
        LayerClass::PartialChannel
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_channel_conv_shape() {
        let p = LayerParams::new(3, 3, 16, 1, 1, 1, 32);
        let o = output_shape(&p, (48, 48, 16)).unwrap();
        assert_eq!(o, OutputShape { height: 46, width: 46, channels: 32, groups: 1 });
    }

    #[test]
    fn overlapping_groups() {
        // F_C = 4 sliding by 2 over 6 channels: two overlapping groups of 3 filters
        let p = LayerParams::new(3, 3, 4, 1, 1, 2, 3);
        let o = output_shape(&p, (5, 5, 6)).unwrap();
        assert_eq!(o.groups, 2);
        assert_eq!(o.channels, 6);
    }

    #[test]
    fn depthwise_groups_equal_channels() {
        let p = LayerParams::new(3, 3, 1, 1, 1, 1, 1);
        let o = output_shape(&p, (8, 8, 64)).unwrap();
        assert_eq!((o.groups, o.channels), (64, 64));
    }

    #[test]
    fn padding_enters_spatial_formula() {
        let p = LayerParams::new(3, 3, 16, 1, 1, 1, 16).with_pads(Pads::uniform(1));
        let o = output_shape(&p, (32, 32, 16)).unwrap();
        assert_eq!((o.height, o.width), (32, 32));
    }

    #[test]
    fn floor_division_drops_trailing_rows() {
        let p = LayerParams::new(2, 2, 1, 2, 2, 1, 1);
        let o = output_shape(&p, (5, 7, 3)).unwrap();
        assert_eq!((o.height, o.width), (2, 3));
    }

    #[test]
    fn oversized_window_names_dimension() {
        let p = LayerParams::new(3, 9, 1, 1, 1, 1, 1);
        match output_shape(&p, (4, 4, 1)) {
            Err(Error::Window { dim, window, input }) => {
                assert_eq!((dim, window, input), ("width", 9, 4));
            }
            other => panic!("unexpected {other:?}"),
        }
        let p = LayerParams::new(1, 1, 5, 1, 1, 1, 1);
        assert!(matches!(output_shape(&p, (4, 4, 4)), Err(Error::Window { dim: "channels", .. })));
    }

    #[test]
    fn zero_param_rejected() {
        let p = LayerParams::new(1, 1, 1, 0, 1, 1, 1);
        assert!(matches!(output_shape(&p, (4, 4, 4)), Err(Error::Params(_))));
    }

    #[test]
    fn classes_from_table() {
        assert_eq!(classify(&LayerParams::pointwise(), (4, 4, 8)), LayerClass::SingleElement);
        let full = LayerParams::new(4, 5, 6, 1, 1, 1, 10);
        assert_eq!(classify(&full, (4, 5, 6)), LayerClass::Full);
        let partial = LayerParams::new(3, 3, 4, 1, 1, 4, 2);
        assert_eq!(classify(&partial, (8, 8, 8)), LayerClass::PartialChannel);
        let conv = LayerParams::new(3, 3, 8, 1, 1, 1, 16);
        assert_eq!(classify(&conv, (8, 8, 8)), LayerClass::FullChannel);
        let dw = LayerParams::new(3, 3, 1, 2, 2, 1, 1);
        assert_eq!(classify(&dw, (8, 8, 8)), LayerClass::SingleChannel);
    }
}
