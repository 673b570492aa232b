use super::*;
use crate::arith::{FloatArith, QuantArith};
use crate::layer::{BinaryMode, MaxFloor};

struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f32 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    }
    fn byte(&mut self) -> u8 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 56) as u8
    }
}

fn geometry(params: LayerParams, op: ReductionOp, ih: usize, iw: usize, ic: usize, f_cb: usize) -> Geometry {
    Geometry::new(&params, op, BlockedShape::new(ih, iw, ic, 16), f_cb).unwrap()
}

fn run_fma<A: Arith>(
    arith: &A,
    geom: &Geometry,
    tile: Tile,
    input: &[A::Elem],
    weights: &[A::Elem],
    implementation: KernelImpl,
) -> Vec<A::Elem> {
    let mut out = vec![A::Elem::default(); tile.width * 16];
    let variant = KernelVariant { op: geom.op, width: tile.width, implementation };
    kernel_fma(variant, arith, geom, tile, InputView::new(geom.input, input), weights, &mut out, LoadMode::Seed, &NoProbe);
    out
}

#[test]
fn vectorized_conv_tile_matches_reference() {
    let geom = geometry(LayerParams::new(3, 3, 16, 1, 1, 1, 32), ReductionOp::Fma, 8, 12, 16, 16);
    assert_eq!(geom.pattern, ChannelPattern::Broadcast);
    let mut rng = Lcg(1);
    let input: Vec<f32> = (0..geom.input.len()).map(|_| rng.next()).collect();
    let weights: Vec<f32> = (0..geom.weight_block_len()).map(|_| rng.next()).collect();
    let arith = FloatArith::<f32>::new();
    for width in [4, 6, 8] {
        let tile = Tile { ob: 1, oh: 2, ow: 1, width };
        let r = run_fma(&arith, &geom, tile, &input, &weights, KernelImpl::Reference);
        let v = run_fma(&arith, &geom, tile, &input, &weights, KernelImpl::Vectorized);
        assert_eq!(r, v);
    }
}

#[test]
fn vectorized_depthwise_matches_reference_quantized() {
    let geom = geometry(LayerParams::new(3, 3, 1, 2, 2, 1, 1), ReductionOp::Fma, 9, 21, 20, 1);
    assert_eq!(geom.pattern, ChannelPattern::LaneAligned);
    let mut rng = Lcg(2);
    let input: Vec<u8> = (0..geom.input.len()).map(|_| rng.byte()).collect();
    let weights: Vec<u8> = (0..geom.weight_block_len()).map(|_| rng.byte()).collect();
    let arith = QuantArith { x_zero: 120, w_zero: 131, out_zero: 128, mac_scale: 1e-3, a_scale: 1.0, b_zero: 0, b_scale: 1.0 };
    for ob in 0..2 {
        let tile = Tile { ob, oh: 1, ow: 2, width: 6 };
        let r = run_fma(&arith, &geom, tile, &input, &weights, KernelImpl::Reference);
        let v = run_fma(&arith, &geom, tile, &input, &weights, KernelImpl::Vectorized);
        assert_eq!(r, v);
        // channels 20..32 are pad lanes in block 1
        if ob == 1 {
            assert!(v.chunks(16).all(|px| px[4..].iter().all(|&b| b == 0)));
        }
    }
}

#[test]
fn zero_weights_leave_partial_unchanged() {
    let geom = geometry(LayerParams::new(3, 3, 16, 1, 1, 1, 16), ReductionOp::Fma, 5, 8, 16, 16);
    let input = vec![1.0f32; geom.input.len()];
    let weights = vec![0.0f32; geom.weight_block_len()];
    let tile = Tile { ob: 0, oh: 0, ow: 0, width: 6 };
    for implementation in [KernelImpl::Reference, KernelImpl::Vectorized] {
        let mut out: Vec<f32> = (0..96).map(|i| i as f32).collect();
        let expected = out.clone();
        let variant = KernelVariant { op: ReductionOp::Fma, width: 6, implementation };
        let arith = FloatArith::<f32>::new();
        let view = InputView::new(geom.input, &input);
        kernel_fma(variant, &arith, &geom, tile, view, &weights, &mut out, LoadMode::Accumulate, &NoProbe);
        assert_eq!(out, expected);
    }
}

#[test]
fn relu_as_max_with_zero() {
    let geom = geometry(LayerParams::pointwise(), ReductionOp::Max(MaxFloor::Zero), 1, 4, 1, 1);
    let mut input = vec![0.0f32; geom.input.len()];
    input[0] = -3.0;
    input[16] = 5.0;
    for implementation in [KernelImpl::Reference, KernelImpl::Vectorized] {
        let mut out = vec![9.0f32; 64];
        let variant = KernelVariant { op: geom.op, width: 4, implementation };
        let tile = Tile { ob: 0, oh: 0, ow: 0, width: 4 };
        let arith = FloatArith::<f32>::new();
        kernel_max(variant, &arith, &geom, tile, InputView::new(geom.input, &input), &mut out, LoadMode::Seed, &NoProbe);
        assert_eq!((out[0], out[16]), (0.0, 5.0));
        assert_eq!(out[1], 0.0, "pad lane");
    }
}

#[test]
fn pointwise_identity_cases() {
    let geom = geometry(LayerParams::pointwise(), ReductionOp::PointwiseFmaBinary(BinaryMode::Affine), 1, 6, 16, 1);
    let mut rng = Lcg(3);
    let a: Vec<f32> = (0..geom.input.len()).map(|_| rng.next()).collect();
    let zeros = vec![0.0f32; a.len()];
    let ones = vec![1.0f32; 16];
    let arith = FloatArith::<f32>::new();
    let tile = Tile { ob: 0, oh: 0, ow: 0, width: 6 };
    for implementation in [KernelImpl::Reference, KernelImpl::Vectorized] {
        let variant = KernelVariant { op: geom.op, width: 6, implementation };
        let mut out = vec![0.0f32; 96];
        let view = InputView::new(geom.input, &a);
        let b = BinaryOperand::Affine { scale: &ones, shift: &zeros[..16] };
        kernel_pointwise_binary(variant, &arith, &geom, tile, view, b, &mut out, &NoProbe);
        assert_eq!(out, a);
        let b = BinaryOperand::Tensor(InputView::new(geom.input, &zeros));
        kernel_pointwise_binary(variant, &arith, &geom, tile, view, b, &mut out, &NoProbe);
        assert_eq!(out, a);
    }
}

#[test]
fn select_kernel_rules() {
    let c = KernelConfig::default();
    assert_eq!(c.select_kernel(ReductionOp::Fma, 6, true).implementation, KernelImpl::Vectorized);
    assert_eq!(c.select_kernel(ReductionOp::Fma, 6, false).implementation, KernelImpl::Reference);
    assert_eq!(c.select_kernel(ReductionOp::Fma, 5, true).implementation, KernelImpl::Reference);
    let up = ReductionOp::UpsampleNearest { scale: 2 };
    assert_eq!(c.select_kernel(up, 6, true).implementation, KernelImpl::Reference);
    let small = c.with_block(8);
    assert_eq!(small.select_kernel(ReductionOp::Fma, 6, true).implementation, KernelImpl::Reference);
}

#[test]
fn config_validation() {
    assert!(KernelConfig::default().validate().is_ok());
    assert!(KernelConfig::default().with_o_wb(0).validate().is_err());
    assert!(KernelConfig::default().with_o_wb(17).validate().is_err());
    let c = KernelConfig { register_budget: 2, ..Default::default() };
    assert!(c.validate().is_err());
    let layer = KernelConfig::default().for_layer(&LayerParams::new(3, 3, 1, 1, 1, 1, 1));
    assert_eq!((layer.g_b, layer.k_b, layer.f_cb), (16, 1, 1));
    let layer = KernelConfig::default().for_layer(&LayerParams::new(3, 3, 8, 1, 1, 1, 10));
    assert_eq!((layer.g_b * layer.k_b, layer.f_cb), (16, 8));
}

#[test]
fn overlapping_groups_use_gather() {
    let geom = geometry(LayerParams::new(3, 3, 4, 1, 1, 2, 3), ReductionOp::Fma, 5, 5, 6, 4);
    assert_eq!(geom.pattern, ChannelPattern::Gather);
    let fp = geom.footprint(Tile { ob: 0, oh: 0, ow: 0, width: 3 });
    assert_eq!((fp.blocks, fp.rows, fp.cols), (0..1, 0..3, 0..5));
}
