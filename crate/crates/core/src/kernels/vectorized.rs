//! Register-tiled kernels for `C_b = 16`, instantiated per tile width.
//!
//! The accumulator tile is a `[[Acc; 16]; W]` array that stays in vector
//! registers for the whole window reduction; the lane loop is a fixed
//! 16-wide loop the compiler maps onto the target's SIMD width.

use super::{BinaryOperand, Geometry, InputView, LoadMode, Probe, Tile, VECTOR_BLOCK};
use crate::arith::Arith;
use crate::layer::{MaxFloor, ReductionOp};

const CB: usize = VECTOR_BLOCK;

/// Calls `$f::<_, _, W>(args..)` for a supported width, yielding whether it ran.
macro_rules! dispatch_width {
    ($w:expr, $f:ident, $($arg:expr),* $(,)?) => {
        match $w {
            4 => { $f::<_, _, 4>($($arg),*); true }
            6 => { $f::<_, _, 6>($($arg),*); true }
            8 => { $f::<_, _, 8>($($arg),*); true }
            _ => false,
        }
    };
}
pub(super) use dispatch_width;

#[inline(always)]
fn lanes<E: Copy>(s: &[E], at: usize) -> &[E; CB] {
    s[at..at + CB].try_into().expect("16 lanes")
}

#[inline(always)]
fn load_tile<A: Arith, const W: usize>(arith: &A, acc: &mut [[A::Acc; CB]; W], out: &[A::Elem]) {
    for (px, row) in acc.iter_mut().enumerate() {
        let o = lanes(out, px * CB);
        for l in 0..CB {
            row[l] = arith.load(o[l]);
        }
    }
}

#[inline(always)]
fn store_tile<A: Arith, const W: usize>(
    out: &mut [A::Elem],
    live: usize,
    pad: A::Elem,
    acc: &[[A::Acc; CB]; W],
    f: impl Fn(A::Acc) -> A::Elem,
) {
    for (px, row) in acc.iter().enumerate() {
        let o: &mut [A::Elem; CB] = (&mut out[px * CB..px * CB + CB]).try_into().expect("16 lanes");
        for l in 0..CB {
            o[l] = if l < live { f(row[l]) } else { pad };
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn fma_broadcast<A: Arith, P: Probe, const W: usize>(
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
    let live = geom.live_lanes(tile.ob);
    let mut acc = [[arith.fma_seed(); CB]; W];
    probe.load();
    if load == LoadMode::Accumulate {
        load_tile(arith, &mut acc, out);
    }

    // the whole block sits in one group
    let c0 = (tile.ob * CB / p.k) * p.s_c;
    let step = p.s_w * CB;
    for ib in 0..geom.n_ib() {
        let fcl = geom.fc_len(ib);
        for x in 0..p.f_h {
            let h = tile.oh * p.s_h + x;
            for y in 0..p.f_w {
                let wrow = ((ib * p.f_h + x) * p.f_w + y) * geom.f_cb * CB;
                let w0 = tile.ow * p.s_w + y;
                for ii in 0..fcl {
                    let ic = c0 + ib * geom.f_cb + ii;
                    let base = input.at(ic / CB, h, w0) + ic % CB;
                    let xs = &input.data[base..=base + (W - 1) * step];
                    let wv = lanes(weights, wrow + ii * CB);
                    for (px, row) in acc.iter_mut().enumerate() {
                        let xv = xs[px * step];
                        for l in 0..CB {
                            row[l] = arith.mac(row[l], xv, wv[l]);
                        }
                    }
                }
            }
        }
    }
    probe.compute((W * live * p.window_len()) as u64);

    probe.store();
    store_tile::<A, W>(out, live, arith.pad_lane(), &acc, |a| arith.store_fma(a));
}

#[allow(clippy::too_many_arguments)]
pub(super) fn fma_lane<A: Arith, P: Probe, const W: usize>(
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
    let live = geom.live_lanes(tile.ob);
    let mut acc = [[arith.fma_seed(); CB]; W];
    probe.load();
    if load == LoadMode::Accumulate {
        load_tile(arith, &mut acc, out);
    }

    let step = p.s_w * CB;
    for x in 0..p.f_h {
        let h = tile.oh * p.s_h + x;
        for y in 0..p.f_w {
            let wv = lanes(weights, (x * p.f_w + y) * geom.f_cb * CB);
            let base = input.at(tile.ob, h, tile.ow * p.s_w + y);
            for (px, row) in acc.iter_mut().enumerate() {
                let xv = lanes(input.data, base + px * step);
                for l in 0..CB {
                    row[l] = arith.mac(row[l], xv[l], wv[l]);
                }
            }
        }
    }
    probe.compute((W * live * p.window_len()) as u64);

    probe.store();
    store_tile::<A, W>(out, live, arith.pad_lane(), &acc, |a| arith.store_fma(a));
}

#[allow(clippy::too_many_arguments)]
pub(super) fn max_lane<A: Arith, P: Probe, const W: usize>(
    arith: &A,
    geom: &Geometry,
    tile: Tile,
    input: InputView<'_, A::Elem>,
    out: &mut [A::Elem],
    load: LoadMode,
    probe: &P,
) {
    let p = &geom.params;
    let live = geom.live_lanes(tile.ob);
    let floor = match geom.op {
        ReductionOp::Max(f) => f,
        _ => MaxFloor::NegInfinity,
    };
    let mut acc = [[arith.max_seed(floor); CB]; W];
    probe.load();
    if load == LoadMode::Accumulate {
        load_tile(arith, &mut acc, out);
    }

    let step = p.s_w * CB;
    for x in 0..p.f_h {
        let h = tile.oh * p.s_h + x;
        for y in 0..p.f_w {
            let base = input.at(tile.ob, h, tile.ow * p.s_w + y);
            for (px, row) in acc.iter_mut().enumerate() {
                let xv = lanes(input.data, base + px * step);
                for l in 0..CB {
                    row[l] = arith.max(row[l], xv[l]);
                }
            }
        }
    }
    probe.compute((W * live * p.window_len()) as u64);

    probe.store();
    store_tile::<A, W>(out, live, arith.pad_lane(), &acc, |a| arith.store_max(a));
}

#[allow(clippy::too_many_arguments)]
pub(super) fn binary_lane<A: Arith, P: Probe, const W: usize>(
    arith: &A,
    geom: &Geometry,
    tile: Tile,
    a: InputView<'_, A::Elem>,
    b: BinaryOperand<'_, A>,
    out: &mut [A::Elem],
    probe: &P,
) {
    let live = geom.live_lanes(tile.ob);
    probe.load();
    let mut vals = [[A::Elem::default(); CB]; W];
    for (px, row) in vals.iter_mut().enumerate() {
        *row = *lanes(a.data, a.at(tile.ob, tile.oh, tile.ow + px));
    }
    match b {
        BinaryOperand::Tensor(bv) => {
            for (px, row) in vals.iter_mut().enumerate() {
                let bl = lanes(bv.data, bv.at(tile.ob, tile.oh, tile.ow + px));
                for l in 0..CB {
                    row[l] = arith.add(row[l], bl[l]);
                }
            }
        }
        BinaryOperand::Affine { scale, shift } => {
            let sc = lanes(scale, tile.ob * CB);
            let sh = lanes(shift, tile.ob * CB);
            for row in vals.iter_mut() {
                for l in 0..CB {
                    row[l] = arith.affine(row[l], sc[l], sh[l]);
                }
            }
        }
    }
    probe.compute((W * live) as u64);
    probe.store();
    for (px, row) in vals.iter().enumerate() {
        for l in 0..CB {
            out[px * CB + l] = if l < live { row[l] } else { arith.pad_lane() };
        }
    }
}
