//! Naive ground truth: direct loops over plain tensors, no blocking.
//!
//! The float oracle accumulates in `f64`; the integer oracle accumulates
//! in `i128` so it cannot overflow where the `i32` kernels might.

use crate::error::{Error, Result};
use crate::layer::{output_shape, BinaryMode, LayerParams, MaxFloor, ReductionOp};
use crate::layout::PlainTensor;
use crate::quantized::LayerQuant;

/// Second operand for the oracles. Weights are plain `[G][K][F_C][F_H][F_W]`.
#[derive(Debug, Clone, Copy)]
pub enum OracleOperand<'a, E> {
    None,
    Weights(&'a [E]),
    Tensor(&'a PlainTensor<E>),
    Affine { scale: &'a [f64], shift: &'a [f64] },
}

pub fn to_f64<T: num_traits::ToPrimitive + Copy>(t: &PlainTensor<T>) -> PlainTensor<f64> {
    PlainTensor {
        height: t.height,
        width: t.width,
        channels: t.channels,
        data: t.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
    }
}

fn out_dims(params: &LayerParams, op: ReductionOp, input: (usize, usize, usize)) -> Result<(usize, usize, usize, usize)> {
    match op {
        ReductionOp::UpsampleNearest { scale } => Ok((input.0 * scale, input.1 * scale, input.2, input.2)),
        _ => {
            let o = output_shape(params, input)?;
            Ok((o.height, o.width, o.channels, o.groups))
        }
    }
}

/// Window element `(oh, ow, channel)` at tap `(x, y)`, `None` in the padding.
#[inline]
fn tap<E: Copy>(input: &PlainTensor<E>, p: &LayerParams, oh: usize, ow: usize, x: usize, y: usize, ic: usize) -> Option<E> {
    let h = (oh * p.s_h + x).checked_sub(p.pads.top)?;
    let w = (ow * p.s_w + y).checked_sub(p.pads.left)?;
    (h < input.height && w < input.width).then(|| input.get(h, w, ic))
}

fn weight_index(p: &LayerParams, g: usize, k: usize, c: usize, x: usize, y: usize) -> usize {
    (((g * p.k + k) * p.f_c + c) * p.f_h + x) * p.f_w + y
}

fn check_weights(p: &LayerParams, groups: usize, len: usize) -> Result<()> {
    let expected = groups * p.k * p.window_len();
    if len != expected {
        return Err(Error::WeightLength { expected, actual: len });
    }
    Ok(())
}

/// Direct six-loop evaluation of one abstract layer in `f64`.
pub fn oracle_layer(
    params: &LayerParams,
    op: ReductionOp,
    input: &PlainTensor<f64>,
    operand: OracleOperand<'_, f64>,
) -> Result<PlainTensor<f64>> {
    let p = params;
    let (oh_n, ow_n, oc_n, groups) = out_dims(p, op, input.shape())?;
    let mut out = PlainTensor::zeros(oh_n, ow_n, oc_n);
    match (op, operand) {
        (ReductionOp::Fma, OracleOperand::Weights(wts)) => {
            check_weights(p, groups, wts.len())?;
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    for g in 0..groups {
                        for k in 0..p.k {
                            let mut acc = 0.0f64;
                            for c in 0..p.f_c {
                                for x in 0..p.f_h {
                                    for y in 0..p.f_w {
                                        let v = tap(input, p, oh, ow, x, y, g * p.s_c + c).unwrap_or(0.0);
                                        acc += v * wts[weight_index(p, g, k, c, x, y)];
                                    }
                                }
                            }
                            out.set(oh, ow, g * p.k + k, acc);
                        }
                    }
                }
            }
        }
        (ReductionOp::Max(floor), OracleOperand::None) => {
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    for g in 0..groups {
                        let mut acc = match floor {
                            MaxFloor::NegInfinity => f64::NEG_INFINITY,
                            MaxFloor::Zero => 0.0,
                        };
                        for c in 0..p.f_c {
                            for x in 0..p.f_h {
                                for y in 0..p.f_w {
                                    let v = tap(input, p, oh, ow, x, y, g * p.s_c + c).unwrap_or(f64::NEG_INFINITY);
                                    if v > acc || v.is_nan() {
                                        acc = v;
                                    }
                                }
                            }
                        }
                        out.set(oh, ow, g, acc);
                    }
                }
            }
        }
        (ReductionOp::PointwiseFmaBinary(BinaryMode::Add), OracleOperand::Tensor(b)) => {
            if b.shape() != input.shape() {
                return Err(Error::Contract("add operands differ in shape".into()));
            }
            out.data = input.data.iter().zip(&b.data).map(|(a, b)| a + b).collect();
        }
        (ReductionOp::PointwiseFmaBinary(BinaryMode::Affine), OracleOperand::Affine { scale, shift }) => {
            out = PlainTensor::from_fn(oh_n, ow_n, oc_n, |h, w, c| input.get(h, w, c) * scale[c] + shift[c]);
        }
        (ReductionOp::UpsampleNearest { scale }, OracleOperand::None) => {
            out = PlainTensor::from_fn(oh_n, ow_n, oc_n, |h, w, c| input.get(h / scale, w / scale, c));
        }
        _ => return Err(Error::Contract(format!("oracle: operand does not fit {} layer", op.name()))),
    }
    Ok(out)
}

/// Integer oracle of the quantized path: exact `i128` sums, then the same
/// `f64` requantization the kernels use.
pub fn oracle_layer_quantized(
    params: &LayerParams,
    op: ReductionOp,
    input: &PlainTensor<u8>,
    operand: OracleOperand<'_, u8>,
    quant: &LayerQuant,
) -> Result<PlainTensor<u8>> {
    let p = params;
    let arith = quant.arith();
    let requant = |real: f64| arith.requantize(real);
    let (oh_n, ow_n, oc_n, groups) = out_dims(p, op, input.shape())?;
    let mut out = PlainTensor::zeros(oh_n, ow_n, oc_n);
    let (zx, zw) = (arith.x_zero as i128, arith.w_zero as i128);
    match (op, operand) {
        (ReductionOp::Fma, OracleOperand::Weights(wts)) => {
            check_weights(p, groups, wts.len())?;
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    for g in 0..groups {
                        for k in 0..p.k {
                            let mut acc: i128 = 0;
                            for c in 0..p.f_c {
                                for x in 0..p.f_h {
                                    for y in 0..p.f_w {
                                        // padding holds the zero point, i.e. real zero
                                        if let Some(v) = tap(input, p, oh, ow, x, y, g * p.s_c + c) {
                                            let w = wts[weight_index(p, g, k, c, x, y)] as i128;
                                            acc += (v as i128 - zx) * (w - zw);
                                        }
                                    }
                                }
                            }
                            let acc = i32::try_from(acc).map_err(|_| Error::AccumulatorOverflow {
                                window: p.window_len(),
                                limit: crate::quantized::MAX_WINDOW,
                            })?;
                            out.set(oh, ow, g * p.k + k, requant(acc as f64 * arith.mac_scale));
                        }
                    }
                }
            }
        }
        (ReductionOp::Max(floor), OracleOperand::None) => {
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    for g in 0..groups {
                        let mut acc = match floor {
                            MaxFloor::NegInfinity => 0u8,
                            MaxFloor::Zero => arith.x_zero as u8,
                        };
                        for c in 0..p.f_c {
                            for x in 0..p.f_h {
                                for y in 0..p.f_w {
                                    acc = acc.max(tap(input, p, oh, ow, x, y, g * p.s_c + c).unwrap_or(0));
                                }
                            }
                        }
                        out.set(oh, ow, g, acc);
                    }
                }
            }
        }
        (ReductionOp::PointwiseFmaBinary(BinaryMode::Add), OracleOperand::Tensor(b)) => {
            if b.shape() != input.shape() {
                return Err(Error::Contract("add operands differ in shape".into()));
            }
            out.data = input
                .data
                .iter()
                .zip(&b.data)
                .map(|(&a, &b)| {
                    requant(
                        (a as i32 - arith.x_zero) as f64 * arith.a_scale
                            + (b as i32 - arith.b_zero) as f64 * arith.b_scale,
                    )
                })
                .collect();
        }
        (ReductionOp::PointwiseFmaBinary(BinaryMode::Affine), OracleOperand::Affine { scale, shift }) => {
            out = PlainTensor::from_fn(oh_n, ow_n, oc_n, |h, w, c| {
                requant((input.get(h, w, c) as i32 - arith.x_zero) as f64 * scale[c] + shift[c])
            });
        }
        (ReductionOp::UpsampleNearest { scale }, OracleOperand::None) => {
            out = PlainTensor::from_fn(oh_n, ow_n, oc_n, |h, w, c| input.get(h / scale, w / scale, c));
        }
        _ => return Err(Error::Contract(format!("oracle: operand does not fit {} layer", op.name()))),
    }
    Ok(out)
}

/// `max |got - expected| / max |expected|` (absolute error when `expected` is all zero).
pub fn relative_error(got: &[f64], expected: &[f64]) -> f64 {
    let scale = expected.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = got.iter().zip(expected).fold(0.0f64, |m, (g, e)| {
        if g == e {
            m
        } else {
            m.max((g - e).abs()).max(if (g - e).is_nan() { f64::INFINITY } else { 0.0 })
        }
    });
    if scale > 0.0 {
        err / scale
    } else {
        err
    }
}
