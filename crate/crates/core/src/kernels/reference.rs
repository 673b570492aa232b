//! Portable kernels with per-lane channel addressing.
//!
//! These handle every channel access pattern, including overlapping
//! groups, and serve as the fallback wherever no vectorized instantiation
//! exists. Accumulation order matches the vectorized kernels, so both
//! produce identical results.

// Index loops mirror the lane arithmetic of the vectorized kernels.
#![allow(clippy::needless_range_loop)]

use super::{BinaryOperand, Geometry, InputView, LoadMode, Probe, Tile, MAX_BLOCK, MAX_O_WB};
use crate::arith::Arith;
use crate::layer::{MaxFloor, ReductionOp};

#[inline]
fn store<A: Arith>(out: &mut [A::Elem], block: usize, live: usize, width: usize, mut f: impl FnMut(usize, usize) -> A::Elem, pad: A::Elem) {
    for px in 0..width {
        for l in 0..block {
            out[px * block + l] = if l < live { f(px, l) } else { pad };
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn fma<A: Arith, P: Probe>(
    arith: &A,
    geom: &Geometry,
    tile: Tile,
    input: InputView<'_, A::Elem>,
    weights: &[A::Elem],
    out: &mut [A::Elem],
    load: LoadMode,
    probe: &P,
) {
    let p = &geom.params;
    let cb = geom.block();
    let in_cb = geom.input.block;
    let live = geom.live_lanes(tile.ob);
    let mut acc = [[arith.fma_seed(); MAX_BLOCK]; MAX_O_WB];

    probe.load();
    if load == LoadMode::Accumulate {
        for (px, row) in acc.iter_mut().enumerate().take(tile.width) {
            for (l, a) in row.iter_mut().enumerate().take(live) {
                *a = arith.load(out[px * cb + l]);
            }
        }
    }

    // first input channel of each lane's group
    let mut first = [0usize; MAX_BLOCK];
    for (l, f) in first.iter_mut().enumerate().take(live) {
        *f = ((tile.ob * cb + l) / p.k) * p.s_c;
    }

    for ib in 0..geom.n_ib() {
        for x in 0..p.f_h {
            let h = tile.oh * p.s_h + x;
            for y in 0..p.f_w {
                let wrow = ((ib * p.f_h + x) * p.f_w + y) * geom.f_cb * cb;
                for ii in 0..geom.fc_len(ib) {
                    let c = ib * geom.f_cb + ii;
                    for px in 0..tile.width {
                        let w = (tile.ow + px) * p.s_w + y;
                        for l in 0..live {
                            let ic = first[l] + c;
                            let xv = input.data[input.at(ic / in_cb, h, w) + ic % in_cb];
                            acc[px][l] = arith.mac(acc[px][l], xv, weights[wrow + ii * cb + l]);
                        }
                    }
                }
            }
        }
    }
    probe.compute((tile.width * live * p.window_len()) as u64);

    probe.store();
    store::<A>(out, cb, live, tile.width, |px, l| arith.store_fma(acc[px][l]), arith.pad_lane());
}

pub(super) fn max<A: Arith, P: Probe>(
    arith: &A,
    geom: &Geometry,
    tile: Tile,
    input: InputView<'_, A::Elem>,
    out: &mut [A::Elem],
    load: LoadMode,
    probe: &P,
) {
    let p = &geom.params;
    let cb = geom.block();
    let in_cb = geom.input.block;
    let live = geom.live_lanes(tile.ob);
    let floor = match geom.op {
        ReductionOp::Max(f) => f,
        _ => MaxFloor::NegInfinity,
    };
    let mut acc = [[arith.max_seed(floor); MAX_BLOCK]; MAX_O_WB];

    probe.load();
    if load == LoadMode::Accumulate {
        for (px, row) in acc.iter_mut().enumerate().take(tile.width) {
            for (l, a) in row.iter_mut().enumerate().take(live) {
                *a = arith.load(out[px * cb + l]);
            }
        }
    }

    for ib in 0..geom.n_ib() {
        for x in 0..p.f_h {
            let h = tile.oh * p.s_h + x;
            for y in 0..p.f_w {
                for ii in 0..geom.fc_len(ib) {
                    let c = ib * geom.f_cb + ii;
                    for px in 0..tile.width {
                        let w = (tile.ow + px) * p.s_w + y;
                        for l in 0..live {
                            let oc = tile.ob * cb + l;
                            let ic = oc * p.s_c + c;
                            let xv = input.data[input.at(ic / in_cb, h, w) + ic % in_cb];
                            acc[px][l] = arith.max(acc[px][l], xv);
                        }
                    }
                }
            }
        }
    }
    probe.compute((tile.width * live * p.window_len()) as u64);

    probe.store();
    store::<A>(out, cb, live, tile.width, |px, l| arith.store_max(acc[px][l]), arith.pad_lane());
}

#[allow(clippy::too_many_arguments)]
pub(super) fn binary<A: Arith, P: Probe>(
    arith: &A,
    geom: &Geometry,
    tile: Tile,
    a: InputView<'_, A::Elem>,
    b: BinaryOperand<'_, A>,
    out: &mut [A::Elem],
    probe: &P,
) {
    let cb = geom.block();
    let live = geom.live_lanes(tile.ob);
    // LOAD: a pointwise op has a single-element window, so the operands
    // are read straight into the tile
    probe.load();
    let mut tile_vals = [[A::Elem::default(); MAX_BLOCK]; MAX_O_WB];
    for (px, row) in tile_vals.iter_mut().enumerate().take(tile.width) {
        let base = a.at(tile.ob, tile.oh, tile.ow + px);
        for (l, v) in row.iter_mut().enumerate().take(live) {
            *v = a.data[base + l];
        }
    }
    for (px, row) in tile_vals.iter_mut().enumerate().take(tile.width) {
        for (l, v) in row.iter_mut().enumerate().take(live) {
            *v = match b {
                BinaryOperand::Tensor(bv) => arith.add(*v, bv.data[bv.at(tile.ob, tile.oh, tile.ow + px) + l]),
                BinaryOperand::Affine { scale, shift } => {
                    let c = tile.ob * cb + l;
                    arith.affine(*v, scale[c], shift[c])
                }
            };
        }
    }
    probe.compute((tile.width * live) as u64);
    probe.store();
    store::<A>(out, cb, live, tile.width, |px, l| tile_vals[px][l], arith.pad_lane());
}

pub(super) fn upsample<A: Arith, P: Probe>(
    arith: &A,
    geom: &Geometry,
    tile: Tile,
    input: InputView<'_, A::Elem>,
    out: &mut [A::Elem],
    probe: &P,
) {
    let scale = match geom.op {
        ReductionOp::UpsampleNearest { scale } => scale,
        _ => 1,
    };
    let cb = geom.block();
    let live = geom.live_lanes(tile.ob);
    probe.load();
    probe.compute((tile.width * live) as u64);
    probe.store();
    let h = tile.oh / scale;
    store::<A>(
        out,
        cb,
        live,
        tile.width,
        |px, l| input.data[input.at(tile.ob, h, (tile.ow + px) / scale) + l],
        arith.pad_lane(),
    );
}
