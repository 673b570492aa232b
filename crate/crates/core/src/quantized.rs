//! `uint8` inference on the shared driver and kernels.
//!
//! Activations and weights are per-tensor affine quantized
//! (`real = scale * (q - zero_point)`). Kernels accumulate
//! `(x - x_zero) * (w - w_zero)` in `i32` and requantize once at STORE.

use std::io::Read;
use std::path::Path;

use crate::arith::QuantArith;
use crate::driver::{execute, execute_in_place, Operand, RunStats};
use crate::error::{Error, Result};
use crate::kernels::{KernelConfig, NoProbe, Probe};
use crate::layer::{LayerParams, ReductionOp};
use crate::layout::{BlockedMut, BlockedRef, PlainTensor};

/// Largest window whose worst-case `i32` sum cannot overflow:
/// `n * 255 * 255 <= i32::MAX`.
pub const MAX_WINDOW: usize = i32::MAX as usize / (255 * 255);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: u8,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: u8) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Params(format!("quantization scale must be positive, got {scale}")));
        }
        Ok(QuantParams { scale, zero_point })
    }

    /// `clamp(round(x / scale) + zero_point, 0, 255)`, ties away from zero.
    #[inline]
    pub fn quantize_value(&self, x: f64) -> u8 {
        ((x / self.scale).round() + self.zero_point as f64).clamp(0.0, 255.0) as u8
    }

    #[inline]
    pub fn dequantize_value(&self, q: u8) -> f64 {
        self.scale * (q as f64 - self.zero_point as f64)
    }
}

pub fn quantize(t: &PlainTensor<f32>, q: QuantParams) -> PlainTensor<u8> {
    PlainTensor {
        height: t.height,
        width: t.width,
        channels: t.channels,
        data: t.data.iter().map(|&x| q.quantize_value(x as f64)).collect(),
    }
}

pub fn dequantize(t: &PlainTensor<u8>, q: QuantParams) -> PlainTensor<f32> {
    PlainTensor {
        height: t.height,
        width: t.width,
        channels: t.channels,
        data: t.data.iter().map(|&v| q.dequantize_value(v) as f32).collect(),
    }
}

/// Quantization of everything one layer touches.
///
/// `weights` is used by FMA layers, `second` by residual add. MAX and
/// upsample layers pass bytes through, so their `output` must equal `input`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerQuant {
    pub input: QuantParams,
    pub weights: QuantParams,
    pub second: QuantParams,
    pub output: QuantParams,
}

impl LayerQuant {
    /// Pass-through quantization for weightless layers.
    pub fn identity(q: QuantParams) -> Self {
        LayerQuant { input: q, weights: q, second: q, output: q }
    }

    pub fn arith(&self) -> QuantArith {
        QuantArith {
            x_zero: self.input.zero_point as i32,
            w_zero: self.weights.zero_point as i32,
            out_zero: self.output.zero_point as i32,
            mac_scale: self.input.scale * self.weights.scale / self.output.scale,
            a_scale: self.input.scale / self.output.scale,
            b_zero: self.second.zero_point as i32,
            b_scale: self.second.scale / self.output.scale,
        }
    }
}

/// Rejects windows whose `i32` accumulation could overflow.
pub fn check_accumulator(params: &LayerParams) -> Result<()> {
    let window = params.window_len();
    if window > MAX_WINDOW {
        return Err(Error::AccumulatorOverflow { window, limit: MAX_WINDOW });
    }
    Ok(())
}

fn check_layer(params: &LayerParams, op: ReductionOp, quant: &LayerQuant) -> Result<()> {
    match op {
        ReductionOp::Fma => check_accumulator(params),
        ReductionOp::Max(_) | ReductionOp::UpsampleNearest { .. } if quant.output != quant.input => Err(
            Error::Contract(format!("{} passes bytes through; output quantization must equal input", op.name())),
        ),
        _ => Ok(()),
    }
}

/// Quantized mirror of [`crate::driver::run_layer`].
///
/// Affine coefficients are in output units: `q = round((a - a_zero) * scale + shift) + out_zero`.
#[allow(clippy::too_many_arguments)]
pub fn run_layer_quantized(
    params: &LayerParams,
    op: ReductionOp,
    input: BlockedRef<'_, u8>,
    operand: Operand<'_, u8, f64>,
    quant: &LayerQuant,
    config: &KernelConfig,
    output: BlockedMut<'_, u8>,
    threads: usize,
) -> Result<RunStats> {
    let mut scratch = Vec::new();
    run_layer_quantized_with(params, op, input, operand, quant, config, output, threads, &mut scratch, &NoProbe)
}

/// [`run_layer_quantized`] with caller-owned padding scratch and a probe.
#[allow(clippy::too_many_arguments)]
pub fn run_layer_quantized_with<P: Probe>(
    params: &LayerParams,
    op: ReductionOp,
    input: BlockedRef<'_, u8>,
    operand: Operand<'_, u8, f64>,
    quant: &LayerQuant,
    config: &KernelConfig,
    output: BlockedMut<'_, u8>,
    threads: usize,
    scratch: &mut Vec<u8>,
    probe: &P,
) -> Result<RunStats> {
    check_layer(params, op, quant)?;
    execute(&quant.arith(), params, op, input, operand, config, output, threads, scratch, probe)
}

/// Quantized single-element layer over `data` in place.
pub fn run_layer_quantized_in_place(
    params: &LayerParams,
    op: ReductionOp,
    data: BlockedMut<'_, u8>,
    operand: Operand<'_, u8, f64>,
    quant: &LayerQuant,
    config: &KernelConfig,
    threads: usize,
) -> Result<RunStats> {
    check_layer(params, op, quant)?;
    execute_in_place(&quant.arith(), params, op, data, operand, config, threads, &NoProbe)
}

/// One quantized weight tensor: `f64` LE scale, `u8` zero point, payload.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub quant: QuantParams,
    pub data: Vec<u8>,
}

pub fn encode_quant_tensor(t: &QuantTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + t.data.len());
    out.extend_from_slice(&t.quant.scale.to_le_bytes());
    out.push(t.quant.zero_point);
    out.extend_from_slice(&t.data);
    out
}

/// Decodes consecutive quantized tensors of the given payload lengths.
pub fn decode_quant_tensors(bytes: &[u8], lengths: &[usize]) -> Result<Vec<QuantTensor>> {
    let expected: usize = lengths.iter().map(|n| n + 9).sum();
    if bytes.len() != expected {
        return Err(Error::WeightLength { expected, actual: bytes.len() });
    }
    let mut at = 0;
    let mut out = Vec::with_capacity(lengths.len());
    for &n in lengths {
        let scale = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        let quant = QuantParams::new(scale, bytes[at + 8]).map_err(|e| Error::Format(e.to_string()))?;
        out.push(QuantTensor { quant, data: bytes[at + 9..at + 9 + n].to_vec() });
        at += 9 + n;
    }
    Ok(out)
}

pub fn read_quant_tensors(path: impl AsRef<Path>, lengths: &[usize]) -> Result<Vec<QuantTensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_quant_tensors(&bytes, lengths)
}
