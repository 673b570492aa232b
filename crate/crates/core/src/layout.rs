//! The shared activation layout, the co-tiled weight layout, and the only
//! conversions into and out of them.
//!
//! Activations are stored `[channel_block][height][width][lane]` with the
//! `block` lanes of a channel block fastest. Every layer reads and writes
//! this layout, so conversions happen only at model entry/exit
//! ([`pack_activations`], [`unpack_activations`]) and when weights are
//! loaded ([`pack_weights`]).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::instrument;
use crate::kernels::KernelConfig;

/// Default channel block `C_b`, in scalar lanes.
pub const DEFAULT_BLOCK: usize = 16;

/// Row-major `[height][width][channels]` tensor, channels fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainTensor<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> PlainTensor<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Contract(format!(
                "tensor dims must be >= 1, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Contract(format!(
                "tensor {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(PlainTensor { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::default())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        PlainTensor { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for h in 0..height {
            for w in 0..width {
                for c in 0..channels {
                    data.push(f(h, w, c));
                }
            }
        }
        PlainTensor { height, width, channels, data }
    }
}

impl<T: Copy> PlainTensor<T> {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, c: usize) -> usize {
        (h * self.width + w) * self.channels + c
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, c: usize) -> T {
        self.data[self.index(h, w, c)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, c: usize, v: T) {
        let i = self.index(h, w, c);
        self.data[i] = v;
    }
}

/// Geometry of a channel-blocked buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockedShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub block: usize,
}

impl BlockedShape {
    pub fn new(height: usize, width: usize, channels: usize, block: usize) -> Self {
        assert!(block >= 1, "channel block must be >= 1");
        BlockedShape { height, width, channels, block }
    }

    /// Channels rounded up to a whole number of blocks.
    pub fn padded_channels(&self) -> usize {
        self.channels.div_ceil(self.block) * self.block
    }

    pub fn num_blocks(&self) -> usize {
        self.channels.div_ceil(self.block)
    }

    /// Scalars in one channel block (`height * width * block`).
    pub fn block_len(&self) -> usize {
        self.height * self.width * self.block
    }

    pub fn row_len(&self) -> usize {
        self.width * self.block
    }

    pub fn len(&self) -> usize {
        self.num_blocks() * self.block_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Buffer offset of logical element `(h, w, c)`.
    #[inline]
    pub fn offset(&self, h: usize, w: usize, c: usize) -> usize {
        (c / self.block) * self.block_len() + (h * self.width + w) * self.block + c % self.block
    }
}

/// Owned channel-blocked activation tensor.
///
/// Lanes with channel index `>= channels` hold the pack-time fill (zero by
/// default) and are rewritten with zero by every kernel STORE.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockedTensor<T> {
    pub shape: BlockedShape,
    pub data: Vec<T>,
}

impl<T: Copy + Default> BlockedTensor<T> {
    pub fn zeros(height: usize, width: usize, channels: usize, block: usize) -> Self {
        Self::filled(BlockedShape::new(height, width, channels, block), T::default())
    }

    pub fn filled(shape: BlockedShape, value: T) -> Self {
        BlockedTensor { shape, data: vec![value; shape.len()] }
    }

    pub fn from_data(shape: BlockedShape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Contract(format!(
                "blocked buffer needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(BlockedTensor { shape, data })
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn block(&self) -> usize {
        self.shape.block
    }

    pub fn padded_channels(&self) -> usize {
        self.shape.padded_channels()
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, c: usize) -> T {
        self.data[self.shape.offset(h, w, c)]
    }

    pub fn view(&self) -> BlockedRef<'_, T> {
        BlockedRef { shape: self.shape, data: &self.data }
    }

    pub fn view_mut(&mut self) -> BlockedMut<'_, T> {
        BlockedMut { shape: self.shape, data: &mut self.data }
    }
}

/// Borrowed blocked tensor (e.g. one end of the model's activation arena).
#[derive(Debug, Clone, Copy)]
pub struct BlockedRef<'a, T> {
    pub shape: BlockedShape,
    pub data: &'a [T],
}

#[derive(Debug)]
pub struct BlockedMut<'a, T> {
    pub shape: BlockedShape,
    pub data: &'a mut [T],
}

impl<'a, T: Copy> BlockedRef<'a, T> {
    pub fn new(shape: BlockedShape, data: &'a [T]) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(BlockedRef { shape, data })
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, c: usize) -> T {
        self.data[self.shape.offset(h, w, c)]
    }

    pub fn to_owned(&self) -> BlockedTensor<T> {
        BlockedTensor { shape: self.shape, data: self.data.to_vec() }
    }
}

impl<'a, T: Copy> BlockedMut<'a, T> {
    pub fn new(shape: BlockedShape, data: &'a mut [T]) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(BlockedMut { shape, data })
    }

    pub fn as_ref(&self) -> BlockedRef<'_, T> {
        BlockedRef { shape: self.shape, data: self.data }
    }

    pub fn reborrow(&mut self) -> BlockedMut<'_, T> {
        BlockedMut { shape: self.shape, data: self.data }
    }
}

fn check_len(shape: BlockedShape, len: usize) -> Result<()> {
    if len != shape.len() {
        return Err(Error::Contract(format!(
            "blocked view {}x{}x{} (block {}) needs {} values, got {len}",
            shape.height,
            shape.width,
            shape.channels,
            shape.block,
            shape.len()
        )));
    }
    Ok(())
}

/// Packs a plain tensor into the blocked layout with zero-filled pad lanes.
pub fn pack_activations<T: Copy + Default>(src: &PlainTensor<T>, block: usize) -> BlockedTensor<T> {
    pack_activations_with_fill(src, block, T::default())
}

pub fn pack_activations_with_fill<T: Copy + Default>(
    src: &PlainTensor<T>,
    block: usize,
    fill: T,
) -> BlockedTensor<T> {
    let shape = BlockedShape::new(src.height, src.width, src.channels, block);
    let mut out = BlockedTensor::filled(shape, fill);
    pack_into(src, &mut out.view_mut(), fill);
    out
}

/// Packs `src` into an existing blocked buffer of matching shape.
pub fn pack_into<T: Copy>(src: &PlainTensor<T>, dst: &mut BlockedMut<'_, T>, fill: T) {
    let shape = dst.shape;
    assert_eq!(
        (shape.height, shape.width, shape.channels),
        src.shape(),
        "pack target shape mismatch"
    );
    instrument::record_pack();
    let block = shape.block;
    for (b, block_data) in dst.data.chunks_exact_mut(shape.block_len()).enumerate() {
        let c0 = b * block;
        let live = block.min(shape.channels - c0);
        for (pixel, lanes) in block_data.chunks_exact_mut(block).enumerate() {
            let base = pixel * shape.channels + c0;
            lanes[..live].copy_from_slice(&src.data[base..base + live]);
            lanes[live..].fill(fill);
        }
    }
}

/// Drops pad lanes and restores `[h][w][c]` order.
pub fn unpack_activations<T: Copy + Default>(src: &BlockedTensor<T>) -> PlainTensor<T> {
    unpack_view(src.view())
}

pub fn unpack_view<T: Copy + Default>(src: BlockedRef<'_, T>) -> PlainTensor<T> {
    instrument::record_unpack();
    let shape = src.shape;
    let mut out = PlainTensor::zeros(shape.height, shape.width, shape.channels);
    let block = shape.block;
    for (b, block_data) in src.data.chunks_exact(shape.block_len()).enumerate() {
        let c0 = b * block;
        let live = block.min(shape.channels - c0);
        for (pixel, lanes) in block_data.chunks_exact(block).enumerate() {
            let base = pixel * shape.channels + c0;
            out.data[base..base + live].copy_from_slice(&lanes[..live]);
        }
    }
    out
}

/// Spatial padding counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Pads {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pads {
    pub const NONE: Pads = Pads { top: 0, bottom: 0, left: 0, right: 0 };

    pub fn uniform(p: usize) -> Self {
        Pads { top: p, bottom: p, left: p, right: p }
    }

    pub fn is_zero(&self) -> bool {
        *self == Pads::NONE
    }

    pub fn vertical(&self) -> usize {
        self.top + self.bottom
    }

    pub fn horizontal(&self) -> usize {
        self.left + self.right
    }
}

/// Shape of `src` after padding.
pub fn padded_shape(src: BlockedShape, pads: Pads) -> BlockedShape {
    BlockedShape {
        height: src.height + pads.vertical(),
        width: src.width + pads.horizontal(),
        ..src
    }
}

/// Materializes a spatially padded copy; the border holds `fill`.
pub fn pad_spatial<T: Copy + Default>(src: &BlockedTensor<T>, pads: Pads, fill: T) -> BlockedTensor<T> {
    let mut out = BlockedTensor::filled(padded_shape(src.shape, pads), fill);
    pad_into(src.view(), pads, fill, &mut out.view_mut());
    out
}

/// Pads into a caller-owned buffer (the model's padding scratch).
///
/// Channel pad lanes are copied from `src` as-is, so they keep the zero
/// written by pack or by the producing kernel.
pub fn pad_into<T: Copy>(src: BlockedRef<'_, T>, pads: Pads, fill: T, dst: &mut BlockedMut<'_, T>) {
    let s = src.shape;
    let d = dst.shape;
    assert_eq!(d, padded_shape(s, pads), "pad target shape mismatch");
    let block = s.block;
    for (src_block, dst_block) in
        src.data.chunks_exact(s.block_len()).zip(dst.data.chunks_exact_mut(d.block_len()))
    {
        let top = pads.top * d.row_len();
        dst_block[..top].fill(fill);
        let bottom = (pads.top + s.height) * d.row_len();
        dst_block[bottom..].fill(fill);
        for h in 0..s.height {
            let row = &mut dst_block[(pads.top + h) * d.row_len()..(pads.top + h + 1) * d.row_len()];
            let left = pads.left * block;
            row[..left].fill(fill);
            row[left..left + s.row_len()]
                .copy_from_slice(&src_block[h * s.row_len()..(h + 1) * s.row_len()]);
            row[left + s.row_len()..].fill(fill);
        }
    }
}

/// Logical dimensions of a weight tensor, stored `[G][K][F_C][F_H][F_W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WeightShape {
    pub groups: usize,
    pub filters: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl WeightShape {
    pub fn len(&self) -> usize {
        self.groups * self.filters * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn plain_index(&self, g: usize, k: usize, c: usize, x: usize, y: usize) -> usize {
        (((g * self.filters + k) * self.channels + c) * self.height + x) * self.width + y
    }
}

/// Weights co-tiled on output and input channels, ordered
/// `[out_block][in_block][F_H][F_W][in_lane][out_lane]`.
///
/// Output lane `l` of block `ob` is output channel `oc = ob * out_block + l`,
/// which belongs to group `oc / K`, filter `oc % K`. Lanes past `G * K` and
/// input lanes past `F_C` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedWeights<T> {
    pub groups: usize,
    pub filters_per_group: usize,
    pub filter_channels: usize,
    pub filter_height: usize,
    pub filter_width: usize,
    pub out_block: usize,
    pub in_block: usize,
    pub data: Vec<T>,
}

impl<T: Copy> PackedWeights<T> {
    pub fn shape(&self) -> WeightShape {
        WeightShape {
            groups: self.groups,
            filters: self.filters_per_group,
            channels: self.filter_channels,
            height: self.filter_height,
            width: self.filter_width,
        }
    }

    pub fn num_out_blocks(&self) -> usize {
        (self.groups * self.filters_per_group).div_ceil(self.out_block)
    }

    pub fn num_in_blocks(&self) -> usize {
        self.filter_channels.div_ceil(self.in_block)
    }

    /// Scalars per output block.
    pub fn out_block_len(&self) -> usize {
        self.num_in_blocks() * self.filter_height * self.filter_width * self.in_block * self.out_block
    }

    pub fn out_block_slice(&self, ob: usize) -> &[T] {
        let n = self.out_block_len();
        &self.data[ob * n..(ob + 1) * n]
    }

    #[inline]
    pub fn index(&self, ob: usize, ib: usize, x: usize, y: usize, ii: usize, lane: usize) -> usize {
        ((((ob * self.num_in_blocks() + ib) * self.filter_height + x) * self.filter_width + y)
            * self.in_block
            + ii)
            * self.out_block
            + lane
    }
}

/// Co-tiles plain `[G][K][F_C][F_H][F_W]` weights for `config`'s
/// output block (`C_b`) and input block (`F_Cb`).
pub fn pack_weights<T: Copy + Default>(
    src: &[T],
    shape: WeightShape,
    config: &KernelConfig,
) -> Result<PackedWeights<T>> {
    if src.len() != shape.len() {
        return Err(Error::WeightLength { expected: shape.len(), actual: src.len() });
    }
    let out_block = config.block();
    let in_block = config.f_cb;
    let mut packed = PackedWeights {
        groups: shape.groups,
        filters_per_group: shape.filters,
        filter_channels: shape.channels,
        filter_height: shape.height,
        filter_width: shape.width,
        out_block,
        in_block,
        data: Vec::new(),
    };
    packed.data = vec![T::default(); packed.num_out_blocks() * packed.out_block_len()];
    let out_channels = shape.groups * shape.filters;
    for oc in 0..out_channels {
        let (g, k) = (oc / shape.filters, oc % shape.filters);
        let (ob, lane) = (oc / out_block, oc % out_block);
        for c in 0..shape.channels {
            let (ib, ii) = (c / in_block, c % in_block);
            for x in 0..shape.height {
                for y in 0..shape.width {
                    let dst = packed.index(ob, ib, x, y, ii, lane);
                    packed.data[dst] = src[shape.plain_index(g, k, c, x, y)];
                }
            }
        }
    }
    Ok(packed)
}

/// Reads `n` little-endian `f32` values.
pub fn decode_f32_le(bytes: &[u8]) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Format(format!("{} bytes is not a whole number of f32", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

pub fn encode_f32_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Reads a plain tensor file: three little-endian `u32` dims (H, W, C)
/// followed by `H*W*C` little-endian `f32` values.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<PlainTensor<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_tensor(&bytes)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<PlainTensor<f32>> {
    if bytes.len() < 12 {
        return Err(Error::Format("tensor header needs 12 bytes".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let data = decode_f32_le(&bytes[12..])?;
    PlainTensor::new(h, w, c, data)
}

pub fn encode_tensor(t: &PlainTensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.data.len());
    for d in [t.height, t.width, t.channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend(encode_f32_le(&t.data));
    out
}

pub fn write_tensor(path: impl AsRef<Path>, t: &PlainTensor<f32>) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_tensor(t))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(h: usize, w: usize, c: usize) -> PlainTensor<f32> {
        PlainTensor::from_fn(h, w, c, |a, b, d| (a * 1000 + b * 10 + d) as f32 + 0.5)
    }

    #[test]
    fn single_element_gets_zero_padding() {
        let t = PlainTensor::new(1, 1, 1, vec![7.0f32]).unwrap();
        let b = pack_activations(&t, 4);
        assert_eq!(b.data, vec![7.0, 0.0, 0.0, 0.0]);
        assert_eq!(unpack_activations(&b), t);
    }

    #[test]
    fn one_full_block_is_identity_order() {
        let t = seq(2, 2, 16);
        let b = pack_activations(&t, 16);
        assert_eq!(b.shape.num_blocks(), 1);
        assert_eq!(b.data, t.data);
    }

    #[test]
    fn offsets_match_index_arithmetic() {
        let t = seq(4, 4, 3);
        let b = pack_activations(&t, 16);
        assert_eq!(b.data.len(), 4 * 4 * 16);
        for h in 0..4 {
            for w in 0..4 {
                for c in 0..16 {
                    let expect = if c < 3 { t.get(h, w, c) } else { 0.0 };
                    assert_eq!(b.data[(h * 4 + w) * 16 + c], expect);
                }
            }
        }
    }

    #[test]
    fn blocked_offset_is_a_bijection() {
        for (h, w, c, blk) in [(3, 2, 5, 4), (2, 3, 16, 16), (1, 4, 17, 8), (2, 2, 3, 1)] {
            let s = BlockedShape::new(h, w, c, blk);
            let mut seen = vec![false; s.len()];
            for a in 0..h {
                for b in 0..w {
                    for d in 0..c {
                        let o = s.offset(a, b, d);
                        assert!(!seen[o], "offset {o} hit twice");
                        seen[o] = true;
                    }
                }
            }
            let live = seen.iter().filter(|&&x| x).count();
            assert_eq!(live, h * w * c);
            // everything not hit is a pad lane
            for (o, hit) in seen.iter().enumerate() {
                let lane = o % blk;
                let blk_idx = o / s.block_len();
                assert_eq!(*hit, blk_idx * blk + lane < c);
            }
        }
    }

    #[test]
    fn pad_zero_is_copy() {
        let b = pack_activations(&seq(3, 5, 20), 16);
        assert_eq!(pad_spatial(&b, Pads::NONE, -1.0), b);
    }

    #[test]
    fn pad_single_pixel() {
        let b = pack_activations(&seq(1, 1, 3), 4);
        let p = pad_spatial(&b, Pads::uniform(1), 0.0);
        assert_eq!((p.height(), p.width()), (3, 3));
        for h in 0..3 {
            for w in 0..3 {
                for c in 0..3 {
                    let expect = if (h, w) == (1, 1) { b.get(0, 0, c) } else { 0.0 };
                    assert_eq!(p.get(h, w, c), expect);
                }
            }
        }
    }

    #[test]
    fn pad_asymmetric_fill() {
        let b = pack_activations(&seq(2, 3, 18), 16);
        let pads = Pads { top: 0, bottom: 2, left: 1, right: 3 };
        let p = pad_spatial(&b, pads, f32::NEG_INFINITY);
        assert_eq!((p.height(), p.width()), (4, 7));
        for h in 0..4 {
            for w in 0..7 {
                for c in 0..18 {
                    let inside = h < 2 && (1..4).contains(&w);
                    let v = p.get(h, w, c);
                    if inside {
                        assert_eq!(v, b.get(h, w - 1, c));
                    } else {
                        assert_eq!(v, f32::NEG_INFINITY);
                    }
                }
            }
        }
    }

    #[test]
    fn weight_count_for_two_groups_of_three() {
        // 2 groups of 3 filters over a 3x3x4 window
        let shape = WeightShape { groups: 2, filters: 3, channels: 4, height: 3, width: 3 };
        assert_eq!(shape.len(), 216);
        let src: Vec<f32> = (1..=216).map(|v| v as f32).collect();
        let cfg = KernelConfig::default().with_f_cb(16);
        let p = pack_weights(&src, shape, &cfg).unwrap();
        assert_eq!(p.data.len(), 16 * 16 * 9);
        let nonzero: Vec<f32> = p.data.iter().copied().filter(|&v| v != 0.0).collect();
        assert_eq!(nonzero.len(), 216);
        let mut sorted = nonzero.clone();
        sorted.sort_by(f32::total_cmp);
        assert_eq!(sorted, src);
    }

    #[test]
    fn single_weight_pads_lanes() {
        let shape = WeightShape { groups: 1, filters: 1, channels: 1, height: 1, width: 1 };
        let cfg = KernelConfig::default().with_block(4).with_f_cb(1);
        let p = pack_weights(&[3.0f32], shape, &cfg).unwrap();
        assert_eq!(p.data, vec![3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn weight_length_mismatch() {
        let shape = WeightShape { groups: 1, filters: 2, channels: 1, height: 1, width: 1 };
        let err = pack_weights(&[1.0f32], shape, &KernelConfig::default()).unwrap_err();
        assert!(matches!(err, Error::WeightLength { expected: 2, actual: 1 }));
    }

    #[test]
    fn tensor_file_roundtrip() {
        let t = seq(2, 3, 4);
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[..4], &2u32.to_le_bytes());
        assert_eq!(decode_tensor(&bytes).unwrap(), t);
        assert!(decode_tensor(&bytes[..13]).is_err());
    }
}
