//! The single loop-nest driver every layer executes through.
//!
//! Loop order: output-channel blocks (parallel, `C_b = G_b * K_b` channels
//! each), then output rows, then output columns in steps of `O_wb`. The
//! input-channel blocks (`F_Cb`) and the window loops run inside the
//! kernel, between its LOAD and STORE, so each output tile is loaded and
//! stored exactly once. A narrower kernel handles the column remainder;
//! channel remainders are padded lanes masked at STORE.

use crate::arith::{Arith, FloatArith};
use crate::error::{Error, Result};
use crate::instrument;
use crate::kernels::{
    kernel_fma, kernel_max, kernel_pointwise_binary, kernel_upsample, BinaryOperand, Geometry, InputView,
    KernelConfig, LoadMode, NoProbe, Probe, Tile, MAX_BLOCK, MAX_O_WB,
};
use crate::layer::{BinaryMode, LayerParams, ReductionOp};
use crate::layout::{pad_into, padded_shape, BlockedMut, BlockedRef, BlockedShape, BlockedTensor, PackedWeights};
use crate::scalar::Scalar;

/// The weight tensor or second input a layer consumes.
///
/// `C` is the affine coefficient type (the element type for floats).
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a, E, C = E> {
    None,
    Weights(&'a PackedWeights<E>),
    /// Second activation, same shape as the input (residual add).
    Tensor(BlockedRef<'a, E>),
    /// Per-channel coefficients, at least one per padded channel.
    Affine { scale: &'a [C], shift: &'a [C] },
}

impl<E, C> Operand<'_, E, C> {
    fn name(&self) -> &'static str {
        match self {
            Operand::None => "no operand",
            Operand::Weights(_) => "weights",
            Operand::Tensor(_) => "a second tensor",
            Operand::Affine { .. } => "affine coefficients",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunStats {
    /// Worker threads used (`min(threads, output-channel blocks)`).
    pub workers: usize,
}

/// Output shape of `op` on a (unpadded) blocked input.
pub fn bound_output(params: &LayerParams, op: ReductionOp, input: BlockedShape) -> Result<BlockedShape> {
    let padded = padded_shape(input, params.pads);
    Ok(Geometry::new(params, op, padded, 1)?.output)
}

/// Runs one layer from `input` into the pre-allocated `output`.
///
/// Uses at most `threads` workers, each owning a contiguous range of
/// output-channel blocks. Spatial padding in `params` is materialized into
/// a temporary buffer.
pub fn run_layer<T: Scalar>(
    params: &LayerParams,
    op: ReductionOp,
    input: BlockedRef<'_, T>,
    operand: Operand<'_, T>,
    config: &KernelConfig,
    output: BlockedMut<'_, T>,
    threads: usize,
) -> Result<RunStats> {
    run_layer_probed(params, op, input, operand, config, output, threads, &NoProbe)
}

/// [`run_layer`] with a kernel-phase observer.
#[allow(clippy::too_many_arguments)]
pub fn run_layer_probed<T: Scalar, P: Probe>(
    params: &LayerParams,
    op: ReductionOp,
    input: BlockedRef<'_, T>,
    operand: Operand<'_, T>,
    config: &KernelConfig,
    output: BlockedMut<'_, T>,
    threads: usize,
    probe: &P,
) -> Result<RunStats> {
    let mut scratch = Vec::new();
    let arith = FloatArith::<T>::new();
    execute(&arith, params, op, input, operand, config, output, threads, &mut scratch, probe)
}

/// Allocates the output and runs the layer.
pub fn forward<T: Scalar>(
    params: &LayerParams,
    op: ReductionOp,
    input: &BlockedTensor<T>,
    operand: Operand<'_, T>,
    config: &KernelConfig,
    threads: usize,
) -> Result<BlockedTensor<T>> {
    let shape = bound_output(params, op, input.shape)?;
    let mut out = BlockedTensor::filled(shape, T::zero());
    run_layer(params, op, input.view(), operand, config, out.view_mut(), threads)?;
    Ok(out)
}

/// Runs a single-element layer (ReLU, add, affine) over `data` in place.
///
/// Each tile is staged in a stack buffer before its kernel overwrites it,
/// so no second activation buffer is needed.
pub fn run_layer_in_place<T: Scalar>(
    params: &LayerParams,
    op: ReductionOp,
    data: BlockedMut<'_, T>,
    operand: Operand<'_, T>,
    config: &KernelConfig,
    threads: usize,
) -> Result<RunStats> {
    let arith = FloatArith::<T>::new();
    execute_in_place(&arith, params, op, data, operand, config, threads, &NoProbe)
}

/// Whether `op` with `params` may run in place (single-element window).
pub fn in_place_capable(params: &LayerParams, op: ReductionOp) -> bool {
    *params == LayerParams::pointwise() && !matches!(op, ReductionOp::Fma | ReductionOp::UpsampleNearest { .. })
}

fn check_operand<E: Copy, C>(
    op: ReductionOp,
    operand: &Operand<'_, E, C>,
    geom: &Geometry,
    input: BlockedShape,
) -> Result<()> {
    let ok = matches!(
        (op, operand),
        (ReductionOp::Fma, Operand::Weights(_))
            | (ReductionOp::Max(_), Operand::None)
            | (ReductionOp::UpsampleNearest { .. }, Operand::None)
            | (ReductionOp::PointwiseFmaBinary(BinaryMode::Add), Operand::Tensor(_))
            | (ReductionOp::PointwiseFmaBinary(BinaryMode::Affine), Operand::Affine { .. })
    );
    if !ok {
        return Err(Error::Contract(format!("{} layer cannot take {}", op.name(), operand.name())));
    }
    match operand {
        Operand::Weights(w) => {
            let p = &geom.params;
            let expected = (geom.groups, p.k, p.f_c, p.f_h, p.f_w);
            let actual = (w.groups, w.filters_per_group, w.filter_channels, w.filter_height, w.filter_width);
            if expected != actual {
                return Err(Error::Contract(format!(
                    "weights are {actual:?} (G, K, F_C, F_H, F_W), layer needs {expected:?}"
                )));
            }
            if w.out_block != geom.block() {
                return Err(Error::Contract(format!(
                    "weights packed for C_b = {}, activations use {}",
                    w.out_block,
                    geom.block()
                )));
            }
        }
        Operand::Tensor(t) => {
            if t.shape != input {
                return Err(Error::Contract(format!("second input {:?} differs from input {input:?}", t.shape)));
            }
        }
        Operand::Affine { scale, shift } => {
            let n = input.padded_channels();
            if scale.len() < n || shift.len() < n {
                return Err(Error::Contract(format!(
                    "affine needs {n} coefficients, got {} / {}",
                    scale.len(),
                    shift.len()
                )));
            }
        }
        Operand::None => {}
    }
    Ok(())
}

fn check_config(config: &KernelConfig, block: usize) -> Result<()> {
    config.validate()?;
    if config.block() != block {
        return Err(Error::Contract(format!(
            "kernel block G_b * K_b = {} but activations use C_b = {block}",
            config.block()
        )));
    }
    Ok(())
}

fn f_cb_for(op: ReductionOp, params: &LayerParams, operand: &Operand<'_, impl Copy, impl Sized>, block: usize) -> usize {
    match (op, operand) {
        (ReductionOp::Fma, Operand::Weights(w)) => w.in_block,
        _ if params.f_c == 1 => 1,
        _ => block.min(params.f_c),
    }
}

/// The generic driver shared by the float and quantized paths.
#[allow(clippy::too_many_arguments)]
pub(crate) fn execute<A: Arith, P: Probe>(
    arith: &A,
    params: &LayerParams,
    op: ReductionOp,
    input: BlockedRef<'_, A::Elem>,
    operand: Operand<'_, A::Elem, A::Coef>,
    config: &KernelConfig,
    mut output: BlockedMut<'_, A::Elem>,
    threads: usize,
    scratch: &mut Vec<A::Elem>,
    probe: &P,
) -> Result<RunStats> {
    params.validate()?;
    let block = input.shape.block;
    check_config(config, block)?;
    let padded = padded_shape(input.shape, params.pads);
    let geom = Geometry::new(params, op, padded, f_cb_for(op, params, &operand, block))?;
    check_operand(op, &operand, &geom, input.shape)?;
    if output.shape != geom.output {
        return Err(Error::Contract(format!(
            "output buffer is {:?}, layer produces {:?}",
            output.shape, geom.output
        )));
    }
    instrument::record_driver_run();

    let input = if params.pads.is_zero() {
        input
    } else {
        let fill = arith.spatial_fill(op);
        scratch.clear();
        scratch.resize(padded.len(), fill);
        let mut dst = BlockedMut::new(padded, &mut scratch[..])?;
        pad_into(input, params.pads, fill, &mut dst);
        BlockedRef { shape: padded, data: &scratch[..] }
    };

    let view = InputView::new(padded, input.data);
    let second = match operand {
        Operand::Tensor(t) => Some(BinaryOperand::Tensor(InputView::new(t.shape, t.data))),
        Operand::Affine { scale, shift } => Some(BinaryOperand::Affine { scale, shift }),
        _ => None,
    };
    let weights = match operand {
        Operand::Weights(w) => Some(w),
        _ => None,
    };

    let body = |ob: usize, out_block: &mut [A::Elem]| {
        let weight_block = weights.map(|w| w.out_block_slice(ob));
        for_each_tile(&geom, config, ob, out_block, |tile, out_tile| {
            let variant = config.select_kernel(op, tile.width, config.prefer_vectorized);
            match op {
                ReductionOp::Fma => kernel_fma(
                    variant,
                    arith,
                    &geom,
                    tile,
                    view,
                    weight_block.expect("checked operand"),
                    out_tile,
                    LoadMode::Seed,
                    probe,
                ),
                ReductionOp::Max(_) => kernel_max(variant, arith, &geom, tile, view, out_tile, LoadMode::Seed, probe),
                ReductionOp::PointwiseFmaBinary(_) => kernel_pointwise_binary(
                    variant,
                    arith,
                    &geom,
                    tile,
                    view,
                    second.expect("checked operand"),
                    out_tile,
                    probe,
                ),
                ReductionOp::UpsampleNearest { .. } => {
                    kernel_upsample(variant, arith, &geom, tile, view, out_tile, probe)
                }
            }
        });
    };
    let workers = parallel_blocks(output.reborrow(), threads, body);
    probe.workers(workers);
    Ok(RunStats { workers })
}

/// In-place variant of [`execute`] for single-element layers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn execute_in_place<A: Arith, P: Probe>(
    arith: &A,
    params: &LayerParams,
    op: ReductionOp,
    mut data: BlockedMut<'_, A::Elem>,
    operand: Operand<'_, A::Elem, A::Coef>,
    config: &KernelConfig,
    threads: usize,
    probe: &P,
) -> Result<RunStats> {
    if !in_place_capable(params, op) {
        return Err(Error::Contract(format!("{} layer cannot run in place", op.name())));
    }
    let block = data.shape.block;
    check_config(config, block)?;
    let geom = Geometry::new(params, op, data.shape, 1)?;
    check_operand(op, &operand, &geom, data.shape)?;
    instrument::record_driver_run();

    let second = match operand {
        Operand::Tensor(t) => Some(BinaryOperand::Tensor(InputView::new(t.shape, t.data))),
        Operand::Affine { scale, shift } => Some(BinaryOperand::Affine { scale, shift }),
        _ => None,
    };
    let body = |ob: usize, out_block: &mut [A::Elem]| {
        let mut stage = [A::Elem::default(); MAX_O_WB * MAX_BLOCK];
        for_each_tile(&geom, config, ob, out_block, |tile, out_tile| {
            let staged = &mut stage[..out_tile.len()];
            staged.copy_from_slice(out_tile);
            let view = InputView::staged(staged, block, tile.ob, tile.oh, tile.ow);
            let variant = config.select_kernel(op, tile.width, config.prefer_vectorized);
            match op {
                ReductionOp::Max(_) => kernel_max(variant, arith, &geom, tile, view, out_tile, LoadMode::Seed, probe),
                _ => kernel_pointwise_binary(
                    variant,
                    arith,
                    &geom,
                    tile,
                    view,
                    second.expect("checked operand"),
                    out_tile,
                    probe,
                ),
            }
        });
    };
    let workers = parallel_blocks(data.reborrow(), threads, body);
    probe.workers(workers);
    Ok(RunStats { workers })
}

/// Rows, then column tiles of one output-channel block.
#[inline]
fn for_each_tile<E>(
    geom: &Geometry,
    config: &KernelConfig,
    ob: usize,
    out_block: &mut [E],
    mut kernel: impl FnMut(Tile, &mut [E]),
) {
    let block = geom.block();
    let (oh_n, ow_n) = (geom.output.height, geom.output.width);
    for oh in 0..oh_n {
        let mut ow = 0;
        while ow < ow_n {
            let width = config.o_wb.min(ow_n - ow);
            let at = (oh * ow_n + ow) * block;
            kernel(Tile { ob, oh, ow, width }, &mut out_block[at..at + width * block]);
            ow += width;
        }
    }
}

/// Splits the output into per-block slices and hands contiguous ranges of
/// them to at most `threads` scoped workers. Returns the worker count.
fn parallel_blocks<E: Send>(
    output: BlockedMut<'_, E>,
    threads: usize,
    body: impl Fn(usize, &mut [E]) + Sync,
) -> usize {
    let n_blocks = output.shape.num_blocks();
    let block_len = output.shape.block_len();
    let workers = threads.max(1).min(n_blocks);
    if workers <= 1 {
        for (ob, chunk) in output.data.chunks_exact_mut(block_len).enumerate() {
            body(ob, chunk);
        }
        return 1;
    }
    let per = n_blocks.div_ceil(workers);
    let body = &body;
    std::thread::scope(|s| {
        for (wi, range) in output.data.chunks_mut(per * block_len).enumerate() {
            s.spawn(move || {
                for (i, chunk) in range.chunks_exact_mut(block_len).enumerate() {
                    body(wi * per + i, chunk);
                }
            });
        }
    });
    n_blocks.div_ceil(per)
}
