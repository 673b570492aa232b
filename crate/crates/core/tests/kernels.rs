use std::sync::Mutex;

use proptest::prelude::*;
use unistencil::arith::FloatArith;
use unistencil::driver::{bound_output, forward, run_layer_probed, Operand};
use unistencil::kernels::{
    kernel_fma, kernel_max, Geometry, InputView, KernelVariant, LoadMode, NoProbe, PhaseCounter, Probe, Tile,
};
use unistencil::layout::{pack_activations, pack_weights, padded_shape, BlockedShape, BlockedTensor, PlainTensor};
use unistencil::model::weights::Lcg;
use unistencil::verify::{check_float_case, random_case, ALL_CLASSES};
use unistencil::{KernelConfig, LayerParams, MaxFloor, ReductionOp};

fn tensor(seed: u64, h: usize, w: usize, c: usize) -> PlainTensor<f32> {
    let mut rng = Lcg::new(seed);
    PlainTensor::from_fn(h, w, c, |_, _, _| 2.0 * rng.unit() - 1.0)
}

fn weights_for(params: &LayerParams, ic: usize, config: &KernelConfig, seed: u64) -> unistencil::PackedWeights<f32> {
    let groups = (ic - params.f_c) / params.s_c + 1;
    let shape = unistencil::layout::WeightShape {
        groups,
        filters: params.k,
        channels: params.f_c,
        height: params.f_h,
        width: params.f_w,
    };
    let raw = Lcg::new(seed).float_weights(shape.len(), params.window_len());
    pack_weights(&raw, shape, &config.for_layer(params)).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Load,
    Compute,
    Store,
}

/// Records the phase sequence of a single-threaded run.
#[derive(Default)]
struct Recorder(Mutex<Vec<Phase>>);

impl Probe for Recorder {
    fn load(&self) {
        self.0.lock().unwrap().push(Phase::Load);
    }
    fn compute(&self, _ops: u64) {
        self.0.lock().unwrap().push(Phase::Compute);
    }
    fn store(&self) {
        self.0.lock().unwrap().push(Phase::Store);
    }
}

#[test]
fn every_tile_is_load_compute_store() {
    let params = LayerParams::new(3, 3, 20, 1, 2, 1, 24);
    let config = KernelConfig::default();
    let x = pack_activations(&tensor(1, 9, 15, 20), 16);
    let w = weights_for(&params, 20, &config, 2);
    let out_shape = bound_output(&params, ReductionOp::Fma, x.shape).unwrap();
    let mut out = BlockedTensor::filled(out_shape, 0.0f32);
    let rec = Recorder::default();
    run_layer_probed(&params, ReductionOp::Fma, x.view(), Operand::Weights(&w), &config, out.view_mut(), 1, &rec)
        .unwrap();
    let seq = rec.0.into_inner().unwrap();
    let tiles = out_shape.num_blocks() * out_shape.height * out_shape.width.div_ceil(config.o_wb);
    let mut i = 0;
    let mut seen = 0;
    while i < seq.len() {
        assert_eq!(seq[i], Phase::Load, "tile {seen} must start with LOAD");
        i += 1;
        let start = i;
        while seq[i] == Phase::Compute {
            i += 1;
        }
        assert!(i > start, "tile {seen} has no COMPUTE");
        assert_eq!(seq[i], Phase::Store);
        i += 1;
        seen += 1;
    }
    assert_eq!(seen, tiles);
}

#[test]
fn mac_count_matches_formula() {
    let cases = [
        (LayerParams::new(3, 3, 16, 1, 1, 1, 32), (12, 12, 16)),
        (LayerParams::new(3, 3, 1, 2, 2, 1, 1), (13, 11, 40)),
        (LayerParams::new(3, 3, 4, 1, 1, 2, 3), (8, 9, 12)),
        (LayerParams::new(5, 4, 7, 1, 1, 1, 10), (5, 4, 7)),
    ];
    for (params, (h, w, c)) in cases {
        let config = KernelConfig::default();
        let x = pack_activations(&tensor(3, h, w, c), 16);
        let wts = weights_for(&params, c, &config, 4);
        let out_shape = bound_output(&params, ReductionOp::Fma, x.shape).unwrap();
        let mut out = BlockedTensor::filled(out_shape, 0.0f32);
        for threads in [1, 3] {
            let counter = PhaseCounter::default();
            run_layer_probed(&params, ReductionOp::Fma, x.view(), Operand::Weights(&wts), &config, out.view_mut(), threads, &counter)
                .unwrap();
            let (loads, _, stores, ops) = counter.snapshot();
            let o = unistencil::output_shape(&params, (h, w, c)).unwrap();
            let expected = o.height * o.width * o.groups * params.k * params.f_h * params.f_w * params.f_c;
            assert_eq!(ops, expected as u64, "{params:?}");
            assert_eq!(loads, stores);
            let geom = Geometry::new(&params, ReductionOp::Fma, x.shape, 1).unwrap();
            assert_eq!(ops, geom.macs());
        }
    }
}

#[test]
fn workers_never_exceed_blocks_or_ceiling() {
    let params = LayerParams::new(3, 3, 8, 1, 1, 1, 40);
    let config = KernelConfig::default();
    let x = pack_activations(&tensor(5, 6, 6, 8), 16);
    let w = weights_for(&params, 8, &config, 6);
    for threads in 1..=8 {
        let counter = PhaseCounter::default();
        let out_shape = bound_output(&params, ReductionOp::Fma, x.shape).unwrap();
        let mut out = BlockedTensor::filled(out_shape, 0.0f32);
        let stats = run_layer_probed(
            &params,
            ReductionOp::Fma,
            x.view(),
            Operand::Weights(&w),
            &config,
            out.view_mut(),
            threads,
            &counter,
        )
        .unwrap();
        // 40 channels -> 3 output blocks
        assert_eq!(stats.workers, threads.min(3));
        assert!(counter.max_workers.load(std::sync::atomic::Ordering::Relaxed) <= threads.min(3));
    }
}

/// Runs one tile on a copy of the input where every element outside the
/// tile's footprint is NaN; the result must not change.
fn poisoned_tile_matches(params: LayerParams, op: ReductionOp, input: (usize, usize, usize), seed: u64) {
    let (h, w, c) = input;
    let shape = BlockedShape::new(h, w, c, 16);
    let x = pack_activations(&tensor(seed, h, w, c), 16);
    let config = KernelConfig::default();
    let geom = Geometry::new(&params, op, shape, config.for_layer(&params).f_cb).unwrap();
    let arith = FloatArith::<f32>::new();
    let packed = (op == ReductionOp::Fma).then(|| weights_for(&params, c, &config, seed + 1));
    let run = |data: &[f32], tile: Tile| {
        let mut out = vec![0.0f32; tile.width * 16];
        let variant = config.select_kernel(op, tile.width, true);
        let view = InputView::new(shape, data);
        match &packed {
            Some(w) => kernel_fma(variant, &arith, &geom, tile, view, w.out_block_slice(tile.ob), &mut out, LoadMode::Seed, &NoProbe),
            None => kernel_max(variant, &arith, &geom, tile, view, &mut out, LoadMode::Seed, &NoProbe),
        }
        out
    };
    for ob in 0..geom.output.num_blocks() {
        for oh in 0..geom.output.height {
            let mut ow = 0;
            while ow < geom.output.width {
                let width = config.o_wb.min(geom.output.width - ow);
                let tile = Tile { ob, oh, ow, width };
                let fp = geom.footprint(tile);
                let mut poisoned = x.data.clone();
                for b in 0..shape.num_blocks() {
                    for r in 0..h {
                        for col in 0..w {
                            if !(fp.blocks.contains(&b) && fp.rows.contains(&r) && fp.cols.contains(&col)) {
                                let base = b * shape.block_len() + r * shape.row_len() + col * 16;
                                poisoned[base..base + 16].fill(f32::NAN);
                            }
                        }
                    }
                }
                let clean = run(&x.data, tile);
                let dirty = run(&poisoned, tile);
                let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&clean), bits(&dirty), "{params:?} tile {tile:?} read outside {fp:?}");
                ow += width;
            }
        }
    }
}

#[test]
fn tiles_read_only_their_footprint() {
    poisoned_tile_matches(LayerParams::new(3, 3, 16, 1, 1, 1, 32), ReductionOp::Fma, (7, 13, 16), 1);
    poisoned_tile_matches(LayerParams::new(3, 3, 40, 2, 2, 1, 20), ReductionOp::Fma, (9, 9, 40), 2);
    poisoned_tile_matches(LayerParams::new(3, 3, 1, 1, 2, 1, 1), ReductionOp::Fma, (8, 17, 35), 3);
    poisoned_tile_matches(LayerParams::new(3, 3, 4, 1, 1, 2, 3), ReductionOp::Fma, (6, 8, 20), 4);
    poisoned_tile_matches(LayerParams::new(2, 2, 1, 2, 2, 1, 1), ReductionOp::Max(MaxFloor::NegInfinity), (8, 14, 24), 5);
}

#[test]
fn disjoint_groups_read_disjoint_channels() {
    // 4 groups of 5 channels, 3 filters each: perturbing one input channel
    // changes only the 3 outputs of its group.
    let params = LayerParams::new(3, 3, 5, 1, 1, 5, 3);
    let config = KernelConfig::default();
    let base = tensor(8, 6, 6, 20);
    let w = weights_for(&params, 20, &config, 9);
    let run = |t: &PlainTensor<f32>| {
        let out = forward(&params, ReductionOp::Fma, &pack_activations(t, 16), Operand::Weights(&w), &config, 1).unwrap();
        unistencil::layout::unpack_activations(&out)
    };
    let reference = run(&base);
    for ch in 0..20 {
        let mut t = base.clone();
        for h in 0..6 {
            for x in 0..6 {
                t.set(h, x, ch, t.get(h, x, ch) + 1.0);
            }
        }
        let out = run(&t);
        for oc in 0..12 {
            let changed = (0..4).any(|h| (0..4).any(|x| out.get(h, x, oc) != reference.get(h, x, oc)));
            assert_eq!(changed, oc / 3 == ch / 5, "channel {ch} -> output {oc}");
        }
    }
}

#[test]
fn padding_needs_padded_footprint() {
    // footprint is stated on the padded input
    let params = LayerParams::new(3, 3, 16, 1, 1, 1, 16).with_pads(unistencil::layout::Pads::uniform(1));
    let padded = padded_shape(BlockedShape::new(4, 4, 16, 16), params.pads);
    let geom = Geometry::new(&params, ReductionOp::Fma, padded, 16).unwrap();
    let fp = geom.footprint(Tile { ob: 0, oh: 3, ow: 0, width: 4 });
    assert_eq!((fp.rows, fp.cols), (3..6, 0..6));
}

#[test]
fn variants_agree_with_reference_width() {
    let op = ReductionOp::Fma;
    let v = KernelConfig::default().select_kernel(op, 6, true);
    assert_eq!(v, KernelVariant { op, width: 6, implementation: unistencil::KernelImpl::Vectorized });
    assert_eq!(KernelConfig::default().select_kernel(op, 6, false), KernelVariant::reference(op, 6));
    assert_eq!(KernelConfig::default().select_kernel(op, 5, true), KernelVariant::reference(op, 5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn layer_outputs_independent_of_threads(class_ix in 0usize..5, seed in any::<u64>()) {
        let mut rng = Lcg::new(seed);
        let case = random_case(&mut rng, ALL_CLASSES[class_ix]);
        let mut outs = Vec::new();
        for threads in 1..=4 {
            let case = unistencil::verify::Case { threads, ..case };
            let mut r = Lcg::new(seed ^ 1);
            prop_assert!(check_float_case(&case, &mut r).unwrap().1);
            let x = pack_activations(&tensor(seed, case.input.0, case.input.1, case.input.2), 16);
            if case.op == ReductionOp::Fma {
                let w = weights_for(&case.params, case.input.2, &case.config, seed);
                let out = forward(&case.params, case.op, &x, Operand::Weights(&w), &case.config, threads).unwrap();
                outs.push(out.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
        }
        prop_assert!(outs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn vectorized_matches_reference(class_ix in 0usize..5, seed in any::<u64>()) {
        let mut rng = Lcg::new(seed);
        let case = random_case(&mut rng, ALL_CLASSES[class_ix]);
        if case.op != ReductionOp::Fma {
            return Ok(());
        }
        let x = pack_activations(&tensor(seed, case.input.0, case.input.1, case.input.2), 16);
        let cfg = KernelConfig::default();
        let w = weights_for(&case.params, case.input.2, &cfg, seed);
        let r = forward(&case.params, case.op, &x, Operand::Weights(&w), &cfg.with_vectorized(false), 1).unwrap();
        let v = forward(&case.params, case.op, &x, Operand::Weights(&w), &cfg, 1).unwrap();
        let scale = r.data.iter().fold(0.0f32, |m, a| m.max(a.abs())).max(f32::MIN_POSITIVE);
        let err = r.data.iter().zip(&v.data).fold(0.0f32, |m, (a, b)| m.max((a - b).abs())) / scale;
        prop_assert!(err <= 1e-5, "{err}");
    }
}
