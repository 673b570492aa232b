//! Register-tile kernels: the only code that changes between targets.
//!
//! A kernel updates one output tile of `width x C_b` scalars (one row
//! segment of one output-channel block) in three phases: LOAD the tile
//! into accumulators, COMPUTE the whole window reduction
//! (`F_H x F_W x F_C`, `F_Cb` input lanes at a time), STORE it back with
//! channel pad lanes masked to zero.
//!
//! Each op has a portable reference kernel that handles every channel
//! access pattern with per-lane address arithmetic, and vectorized kernels
//! for the two regular patterns: [`ChannelPattern::Broadcast`] (one input
//! scalar feeds all lanes: convolution, fully connected) and
//! [`ChannelPattern::LaneAligned`] (lane `l` reads input lane `l`:
//! depthwise, pooling, element-wise ops).

mod reference;
mod vectorized;

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use vectorized::{binary_lane, dispatch_width, fma_broadcast, fma_lane, max_lane};

use crate::arith::Arith;
use crate::error::{Error, Result};
use crate::layer::{output_shape, LayerParams, ReductionOp};
use crate::layout::{BlockedShape, DEFAULT_BLOCK};

/// Largest supported output-width tile.
pub const MAX_O_WB: usize = 16;
/// Largest supported channel block.
pub const MAX_BLOCK: usize = 64;
/// Channel block the vectorized kernels are instantiated for.
pub const VECTOR_BLOCK: usize = 16;
/// Tile widths with a vectorized instantiation.
pub const VECTOR_WIDTHS: [usize; 3] = [4, 6, 8];

const fn native_lane_width() -> usize {
    if cfg!(target_feature = "avx512f") {
        16
    } else if cfg!(target_feature = "avx") {
        8
    } else {
        4
    }
}

const fn native_register_budget() -> usize {
    if cfg!(any(target_feature = "avx512f", target_arch = "aarch64")) {
        32
    } else {
        16
    }
}

/// Register-tiling parameters.
///
/// `g_b * k_b` is the output-channel block `C_b` shared with the activation
/// layout. `f_cb` is the number of input channels per weight tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelConfig {
    pub o_wb: usize,
    pub g_b: usize,
    pub k_b: usize,
    pub f_cb: usize,
    /// Scalars per vector register on the target.
    pub lane_width: usize,
    /// Vector registers available for accumulators.
    pub register_budget: usize,
    pub prefer_vectorized: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            o_wb: 6,
            g_b: 1,
            k_b: DEFAULT_BLOCK,
            f_cb: DEFAULT_BLOCK,
            lane_width: native_lane_width().min(DEFAULT_BLOCK),
            register_budget: native_register_budget(),
            prefer_vectorized: true,
        }
    }
}

impl KernelConfig {
    /// Output-channel block `C_b` (= `O_cb` = `g_b * k_b`).
    pub fn block(&self) -> usize {
        self.g_b * self.k_b
    }

    pub fn with_block(mut self, block: usize) -> Self {
        self.g_b = 1;
        self.k_b = block;
        self.f_cb = self.f_cb.min(block);
        // largest power of two dividing the block, capped at the native width
        let pow2 = 1 << block.trailing_zeros();
        self.lane_width = native_lane_width().min(pow2);
        self
    }

    pub fn with_o_wb(mut self, o_wb: usize) -> Self {
        self.o_wb = o_wb;
        self
    }

    pub fn with_f_cb(mut self, f_cb: usize) -> Self {
        self.f_cb = f_cb;
        self
    }

    pub fn with_vectorized(mut self, prefer: bool) -> Self {
        self.prefer_vectorized = prefer;
        self
    }

    /// Specializes the blocking for one layer: `k_b` is the largest divisor
    /// of `C_b` not above `K`, `F_Cb` is `C_b` for multi-channel windows
    /// and 1 for single-channel ones.
    pub fn for_layer(&self, params: &LayerParams) -> KernelConfig {
        let block = self.block();
        let k_b = (1..=params.k.min(block)).rev().find(|&d| block.is_multiple_of(d)).unwrap_or(1);
        KernelConfig {
            g_b: block / k_b,
            k_b,
            f_cb: if params.f_c == 1 { 1 } else { block.min(params.f_c) },
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let block = self.block();
        if block == 0 || block > MAX_BLOCK {
            return Err(Error::Contract(format!("channel block {block} outside 1..={MAX_BLOCK}")));
        }
        if self.o_wb == 0 || self.o_wb > MAX_O_WB {
            return Err(Error::Contract(format!("o_wb {} outside 1..={MAX_O_WB}", self.o_wb)));
        }
        if self.f_cb == 0 || self.f_cb > block {
            return Err(Error::Contract(format!("f_cb {} outside 1..={block}", self.f_cb)));
        }
        if self.lane_width == 0 || !block.is_multiple_of(self.lane_width) {
            return Err(Error::Contract(format!(
                "channel block {block} is not a multiple of lane width {}",
                self.lane_width
            )));
        }
        let registers = self.o_wb * block / self.lane_width;
        if registers > self.register_budget {
            return Err(Error::Contract(format!(
                "{}x{block} accumulator tile needs {registers} registers, budget {}",
                self.o_wb, self.register_budget
            )));
        }
        Ok(())
    }

    /// Picks the kernel for an `op` tile of `width` output columns.
    ///
    /// Falls back to the reference kernel whenever no vectorized
    /// instantiation exists.
    pub fn select_kernel(&self, op: ReductionOp, width: usize, prefer_vectorized: bool) -> KernelVariant {
        let vectorized = prefer_vectorized
            && self.block() == VECTOR_BLOCK
            && VECTOR_WIDTHS.contains(&width)
            && !matches!(op, ReductionOp::UpsampleNearest { .. });
        KernelVariant {
            op,
            width,
            implementation: if vectorized { KernelImpl::Vectorized } else { KernelImpl::Reference },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelImpl {
    Reference,
    Vectorized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KernelVariant {
    pub op: ReductionOp,
    pub width: usize,
    pub implementation: KernelImpl,
}

impl KernelVariant {
    pub fn reference(op: ReductionOp, width: usize) -> Self {
        KernelVariant { op, width, implementation: KernelImpl::Reference }
    }
}

/// How output lanes of one block map onto input channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelPattern {
    /// Every lane of a block belongs to the same group, so each input
    /// scalar is broadcast across the lanes.
    Broadcast,
    /// `K = F_C = S_C = 1`: output lane `l` reads input lane `l` of the same block.
    LaneAligned,
    /// Lanes read different, possibly overlapping, input channels.
    Gather,
}

/// Everything a kernel needs to know about the layer it serves.
///
/// `input` is the already padded input; `params.pads` is ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub params: LayerParams,
    pub op: ReductionOp,
    pub groups: usize,
    pub input: BlockedShape,
    pub output: BlockedShape,
    pub f_cb: usize,
    pub pattern: ChannelPattern,
}

impl Geometry {
    pub fn new(params: &LayerParams, op: ReductionOp, input: BlockedShape, f_cb: usize) -> Result<Self> {
        let block = input.block;
        let unpadded = LayerParams { pads: Default::default(), ..*params };
        let (output, groups) = match op {
            ReductionOp::UpsampleNearest { scale } => {
                if scale == 0 {
                    return Err(Error::Params("upsample scale must be >= 1".into()));
                }
                if unpadded != LayerParams::pointwise() {
                    return Err(Error::Params("upsample uses a 1x1x1 window".into()));
                }
                let out = BlockedShape::new(input.height * scale, input.width * scale, input.channels, block);
                (out, input.channels)
            }
            _ => {
                let o = output_shape(&unpadded, (input.height, input.width, input.channels))?;
                (BlockedShape::new(o.height, o.width, o.channels, block), o.groups)
            }
        };
        match op {
            ReductionOp::Max(_) if params.k != 1 => {
                return Err(Error::Params("max reduction takes K = 1".into()));
            }
            ReductionOp::PointwiseFmaBinary(_) if unpadded != LayerParams::pointwise() => {
                return Err(Error::Params("pointwise op uses a 1x1x1 window".into()));
            }
            _ => {}
        }
        if f_cb == 0 || f_cb > block {
            return Err(Error::Contract(format!("f_cb {f_cb} outside 1..={block}")));
        }
        let p = &unpadded;
        let pattern = if p.k == 1 && p.f_c == 1 && p.s_c == 1 {
            ChannelPattern::LaneAligned
        } else if groups == 1 || p.k.is_multiple_of(block) {
            ChannelPattern::Broadcast
        } else {
            ChannelPattern::Gather
        };
        Ok(Geometry { params: unpadded, op, groups, input, output, f_cb, pattern })
    }

    pub fn block(&self) -> usize {
        self.output.block
    }

    /// Input-channel blocks of the weight tile (`ceil(F_C / F_Cb)`).
    pub fn n_ib(&self) -> usize {
        self.params.f_c.div_ceil(self.f_cb)
    }

    /// Live input lanes of input-channel block `ib`.
    #[inline]
    pub fn fc_len(&self, ib: usize) -> usize {
        self.f_cb.min(self.params.f_c - ib * self.f_cb)
    }

    /// Real (non-pad) output lanes of output block `ob`.
    #[inline]
    pub fn live_lanes(&self, ob: usize) -> usize {
        self.block().min(self.output.channels.saturating_sub(ob * self.block()))
    }

    /// Packed weights per output block.
    pub fn weight_block_len(&self) -> usize {
        self.n_ib() * self.params.f_h * self.params.f_w * self.f_cb * self.block()
    }

    /// Multiply-accumulates of the whole layer, `O_H O_W G K F_H F_W F_C`.
    pub fn macs(&self) -> u64 {
        let p = &self.params;
        (self.output.height * self.output.width * self.output.channels * p.f_h * p.f_w * p.f_c) as u64
    }

    /// Input region `(channel blocks, rows, columns)` a tile may read.
    pub fn footprint(&self, tile: Tile) -> Footprint {
        let p = &self.params;
        let block = self.block();
        if let ReductionOp::UpsampleNearest { scale } = self.op {
            return Footprint {
                blocks: tile.ob..tile.ob + 1,
                rows: tile.oh / scale..tile.oh / scale + 1,
                cols: tile.ow / scale..(tile.ow + tile.width - 1) / scale + 1,
            };
        }
        let first_oc = tile.ob * block;
        let last_oc = first_oc + self.live_lanes(tile.ob).max(1) - 1;
        let (blocks, _) = match self.pattern {
            ChannelPattern::LaneAligned => (tile.ob..tile.ob + 1, ()),
            _ => {
                let lo = (first_oc / p.k) * p.s_c;
                let hi = (last_oc / p.k) * p.s_c + p.f_c - 1;
                (lo / block..hi / block + 1, ())
            }
        };
        Footprint {
            blocks,
            rows: tile.oh * p.s_h..tile.oh * p.s_h + p.f_h,
            cols: tile.ow * p.s_w..(tile.ow + tile.width - 1) * p.s_w + p.f_w,
        }
    }
}

/// Input region read by one tile, in padded-input coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Footprint {
    pub blocks: std::ops::Range<usize>,
    pub rows: std::ops::Range<usize>,
    pub cols: std::ops::Range<usize>,
}

/// One kernel invocation: `width` output columns from `(oh, ow)` in block `ob`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub ob: usize,
    pub oh: usize,
    pub ow: usize,
    pub width: usize,
}

/// Read access to blocked input, optionally re-based onto a staged copy.
#[derive(Debug, Clone, Copy)]
pub struct InputView<'a, E> {
    pub data: &'a [E],
    block: usize,
    block_stride: usize,
    row_stride: usize,
    base: (usize, usize, usize),
}

impl<'a, E: Copy> InputView<'a, E> {
    pub fn new(shape: BlockedShape, data: &'a [E]) -> Self {
        InputView {
            data,
            block: shape.block,
            block_stride: shape.block_len(),
            row_stride: shape.row_len(),
            base: (0, 0, 0),
        }
    }

    /// View of a single staged tile whose first pixel is `(ob, oh, ow)`.
    pub fn staged(data: &'a [E], block: usize, ob: usize, oh: usize, ow: usize) -> Self {
        InputView { data, block, block_stride: 0, row_stride: 0, base: (ob, oh, ow) }
    }

    /// Offset of lane 0 of pixel `(h, w)` in channel block `b`.
    #[inline(always)]
    pub fn at(&self, b: usize, h: usize, w: usize) -> usize {
        (b - self.base.0) * self.block_stride + (h - self.base.1) * self.row_stride + (w - self.base.2) * self.block
    }
}

/// Second operand of a pointwise binary kernel.
pub enum BinaryOperand<'a, A: Arith> {
    Tensor(InputView<'a, A::Elem>),
    /// Per-channel coefficients, indexed by padded channel.
    Affine { scale: &'a [A::Coef], shift: &'a [A::Coef] },
}

impl<A: Arith> Clone for BinaryOperand<'_, A> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<A: Arith> Copy for BinaryOperand<'_, A> {}

/// Where LOAD takes its accumulator values from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// The reduction identity (zero for FMA, the floor for MAX).
    Seed,
    /// The current output values (partial update).
    Accumulate,
}

/// Observer for kernel phases; the default methods compile away.
pub trait Probe: Sync {
    #[inline(always)]
    fn load(&self) {}
    #[inline(always)]
    fn compute(&self, _ops: u64) {}
    #[inline(always)]
    fn store(&self) {}
    #[inline(always)]
    fn workers(&self, _n: usize) {}
}

pub struct NoProbe;

impl Probe for NoProbe {}

/// Counts phases, reduction work and peak worker count.
#[derive(Debug, Default)]
pub struct PhaseCounter {
    pub loads: AtomicU64,
    pub computes: AtomicU64,
    pub stores: AtomicU64,
    pub ops: AtomicU64,
    pub max_workers: AtomicUsize,
}

impl PhaseCounter {
    pub fn snapshot(&self) -> (u64, u64, u64, u64) {
        (
            self.loads.load(Ordering::Relaxed),
            self.computes.load(Ordering::Relaxed),
            self.stores.load(Ordering::Relaxed),
            self.ops.load(Ordering::Relaxed),
        )
    }
}

impl Probe for PhaseCounter {
    fn load(&self) {
        self.loads.fetch_add(1, Ordering::Relaxed);
    }
    fn compute(&self, ops: u64) {
        self.computes.fetch_add(1, Ordering::Relaxed);
        self.ops.fetch_add(ops, Ordering::Relaxed);
    }
    fn store(&self) {
        self.stores.fetch_add(1, Ordering::Relaxed);
    }
    fn workers(&self, n: usize) {
        self.max_workers.fetch_max(n, Ordering::Relaxed);
    }
}

#[inline]
fn use_vectorized(variant: KernelVariant, geom: &Geometry) -> bool {
    variant.implementation == KernelImpl::Vectorized
        && geom.block() == VECTOR_BLOCK
        && geom.input.block == VECTOR_BLOCK
        && VECTOR_WIDTHS.contains(&variant.width)
}

/// `out_tile (+)= Σ input x weight` over the window (FMA kernel).
///
/// `weights` is the packed block for `tile.ob`; `out_tile` holds
/// `tile.width * C_b` scalars.
#[allow(clippy::too_many_arguments)]
pub fn kernel_fma<A: Arith, P: Probe>(
    variant: KernelVariant,
    arith: &A,
    geom: &Geometry,
    tile: Tile,
    input: InputView<'_, A::Elem>,
    weights: &[A::Elem],
    out_tile: &mut [A::Elem],
    load: LoadMode,
    probe: &P,
) {
    debug_assert_eq!(out_tile.len(), tile.width * geom.block());
    debug_assert_eq!(weights.len(), geom.weight_block_len());
    if use_vectorized(variant, geom) {
        let done = match geom.pattern {
            ChannelPattern::Broadcast => {
                dispatch_width!(variant.width, fma_broadcast, arith, geom, tile, input, weights, out_tile, load, probe)
            }
            ChannelPattern::LaneAligned => {
                dispatch_width!(variant.width, fma_lane, arith, geom, tile, input, weights, out_tile, load, probe)
            }
            ChannelPattern::Gather => false,
        };
        if done {
            return;
        }
    }
    reference::fma(arith, geom, tile, input, weights, out_tile, load, probe);
}

/// `out_tile = max(out_tile, window)` (MAX kernel, pooling and ReLU).
#[allow(clippy::too_many_arguments)]
pub fn kernel_max<A: Arith, P: Probe>(
    variant: KernelVariant,
    arith: &A,
    geom: &Geometry,
    tile: Tile,
    input: InputView<'_, A::Elem>,
    out_tile: &mut [A::Elem],
    load: LoadMode,
    probe: &P,
) {
    debug_assert_eq!(out_tile.len(), tile.width * geom.block());
    if use_vectorized(variant, geom) && geom.pattern == ChannelPattern::LaneAligned {
        let done = dispatch_width!(variant.width, max_lane, arith, geom, tile, input, out_tile, load, probe);
        if done {
            return;
        }
    }
    reference::max(arith, geom, tile, input, out_tile, load, probe);
}

/// `out = a + b` or `out = a * scale + shift`, lane by lane.
#[allow(clippy::too_many_arguments)]
pub fn kernel_pointwise_binary<A: Arith, P: Probe>(
    variant: KernelVariant,
    arith: &A,
    geom: &Geometry,
    tile: Tile,
    a: InputView<'_, A::Elem>,
    b: BinaryOperand<'_, A>,
    out_tile: &mut [A::Elem],
    probe: &P,
) {
    debug_assert_eq!(out_tile.len(), tile.width * geom.block());
    if use_vectorized(variant, geom) {
        let done = dispatch_width!(variant.width, binary_lane, arith, geom, tile, a, b, out_tile, probe);
        if done {
            return;
        }
    }
    reference::binary(arith, geom, tile, a, b, out_tile, probe);
}

/// Nearest-neighbour replication of the input block into the tile.
pub fn kernel_upsample<A: Arith, P: Probe>(
    _variant: KernelVariant,
    arith: &A,
    geom: &Geometry,
    tile: Tile,
    input: InputView<'_, A::Elem>,
    out_tile: &mut [A::Elem],
    probe: &P,
) {
    reference::upsample(arith, geom, tile, input, out_tile, probe);
}

#[cfg(test)]
mod tests;
