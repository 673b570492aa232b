use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unistencil::layers::{self, Padding};
use unistencil::layout::{
    pack_activations, pack_weights, pad_spatial, unpack_activations, BlockedShape, Pads, PlainTensor, WeightShape,
};
use unistencil::{classify, output_shape, KernelConfig, LayerClass, LayerParams};

fn random_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> PlainTensor<f32> {
    PlainTensor::from_fn(h, w, c, |_, _, _| rng.random_range(-10.0..10.0))
}

#[test]
fn round_trip_benchmark_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (h, w, c) in [(1, 1, 1), (48, 48, 16), (6, 6, 512)] {
        let t = random_tensor(&mut rng, h, w, c);
        let back = unpack_activations(&pack_activations(&t, 16));
        let bits = |t: &PlainTensor<f32>| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
    }
}

#[test]
fn single_element_block_four() {
    let t = PlainTensor::new(1, 1, 1, vec![7.5f32]).unwrap();
    assert_eq!(pack_activations(&t, 4).data, vec![7.5, 0.0, 0.0, 0.0]);
}

#[test]
fn packed_address_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = random_tensor(&mut rng, 4, 4, 3);
    let b = pack_activations(&t, 16);
    for h in 0..4 {
        for w in 0..4 {
            for c in 0..16 {
                let addr = (c / 16) * 4 * 4 * 16 + h * 4 * 16 + w * 16 + c % 16;
                let want = if c < 3 { t.get(h, w, c) } else { 0.0 };
                assert_eq!(b.data[addr], want);
            }
        }
    }
}

#[test]
fn packed_weights_match_formula() {
    // G=4, K=8 (32 output channels), F=3x3x16
    let shape = WeightShape { groups: 4, filters: 8, channels: 16, height: 3, width: 3 };
    let raw: Vec<f32> = (0..shape.len()).map(|i| i as f32 + 1.0).collect();
    let params = LayerParams::new(3, 3, 16, 1, 1, 16, 8);
    let config = KernelConfig::default().for_layer(&params);
    let packed = pack_weights(&raw, shape, &config).unwrap();
    let (cb, icb) = (16, packed.in_block);
    let n_ib = 16usize.div_ceil(icb);
    assert_eq!(packed.data.len(), 2 * cb * n_ib * icb * 9);
    for g in 0..4 {
        for k in 0..8 {
            let oc = g * 8 + k;
            for c in 0..16 {
                for y in 0..3 {
                    for x in 0..3 {
                        let addr = ((((oc / cb * n_ib + c / icb) * 3 + y) * 3 + x) * icb + c % icb) * cb + oc % cb;
                        assert_eq!(packed.data[addr], raw[shape.plain_index(g, k, c, y, x)]);
                    }
                }
            }
        }
    }
}

#[test]
fn two_groups_of_three_weight_count() {
    // two groups of three filters over a 3x3x4 window
    let shape = WeightShape { groups: 2, filters: 3, channels: 4, height: 3, width: 3 };
    assert_eq!(shape.len(), 216);
    let raw = vec![1.0f32; 216];
    let params = LayerParams::new(3, 3, 4, 1, 1, 2, 3);
    let packed = pack_weights(&raw, shape, &KernelConfig::default().for_layer(&params)).unwrap();
    assert_eq!(packed.data.iter().filter(|&&v| v == 1.0).count(), 216);
}

#[test]
fn padded_window_count() {
    let t = pack_activations(&PlainTensor::filled(32, 32, 16, 1.0f32), 16);
    let padded = pad_spatial(&t, Pads::uniform(1), 0.0);
    assert_eq!((padded.height(), padded.width()), (34, 34));
    let o = output_shape(&LayerParams::new(3, 3, 16, 1, 1, 1, 1).with_pads(Pads::uniform(1)), (32, 32, 16)).unwrap();
    assert_eq!(o.height, 32);
}

fn count(extent: usize, window: usize, stride: usize) -> usize {
    (0..extent).step_by(stride).filter(|s| s + window <= extent).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pack_round_trip(h in 1usize..9, w in 1usize..9, c in 1usize..40, block in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_tensor(&mut rng, h, w, c);
        let b = pack_activations(&t, block);
        prop_assert_eq!(b.data.len(), c.div_ceil(block) * block * h * w);
        prop_assert_eq!(unpack_activations(&b), t);
    }

    #[test]
    fn blocked_address_bijection(h in 1usize..6, w in 1usize..6, c in 1usize..35, block in 1usize..17) {
        let shape = BlockedShape::new(h, w, c, block);
        let mut seen = vec![false; shape.len()];
        for hh in 0..h {
            for ww in 0..w {
                for cc in 0..c {
                    let o = shape.offset(hh, ww, cc);
                    prop_assert!(!seen[o]);
                    seen[o] = true;
                }
            }
        }
        // exactly the non-padding positions are hit
        prop_assert_eq!(seen.iter().filter(|&&s| s).count(), h * w * c);
        for (o, hit) in seen.iter().enumerate() {
            prop_assert_eq!(*hit, o % block + (o / (h * w * block)) * block < c);
        }
    }

    #[test]
    fn shapes_match_enumeration(
        ih in 1usize..40, iw in 1usize..40, ic in 1usize..64,
        f_h in 1usize..8, f_w in 1usize..8, fc_frac in 0.0f64..1.0,
        s_h in 1usize..5, s_w in 1usize..5, s_c in 1usize..5, k in 1usize..9,
        pt in 0usize..4, pb in 0usize..4, pl in 0usize..4, pr in 0usize..4,
    ) {
        let f_c = 1 + ((ic - 1) as f64 * fc_frac) as usize;
        let pads = Pads { top: pt, bottom: pb, left: pl, right: pr };
        let p = LayerParams::new(f_h, f_w, f_c, s_h, s_w, s_c, k).with_pads(pads);
        let (ph, pw) = (ih + pt + pb, iw + pl + pr);
        match output_shape(&p, (ih, iw, ic)) {
            Ok(o) => {
                let g = count(ic, f_c, s_c);
                prop_assert_eq!((o.height, o.width, o.groups), (count(ph, f_h, s_h), count(pw, f_w, s_w), g));
                prop_assert_eq!(o.channels, k * g);
            }
            Err(_) => prop_assert!(f_h > ph || f_w > pw),
        }
    }

    #[test]
    fn same_padding_gives_ceil(i in 1usize..50, f in 1usize..8, s in 1usize..5) {
        let b = layers::conv2d(f, f, s, 4, Padding::Same).bind((i, i, 3)).unwrap();
        prop_assert_eq!(b.output.0, i.div_ceil(s));
        prop_assert_eq!(b.output.1, i.div_ceil(s));
    }

    #[test]
    fn bound_layers_land_in_their_class(h in 3usize..20, w in 3usize..20, c in 2usize..48, k in 2usize..40) {
        let shape = (h, w, c);
        let class = |spec: unistencil::LayerSpec| {
            let b = spec.bind(shape).unwrap();
            classify(&b.params, b.input)
        };
        prop_assert_eq!(class(layers::relu()), LayerClass::SingleElement);
        prop_assert_eq!(class(layers::add()), LayerClass::SingleElement);
        prop_assert_eq!(class(layers::batchnorm_affine()), LayerClass::SingleElement);
        prop_assert_eq!(class(layers::upsample_nearest(2)), LayerClass::SingleElement);
        prop_assert_eq!(class(layers::depthwise_conv(3, 3, 1, Padding::Same)), LayerClass::SingleChannel);
        prop_assert_eq!(class(layers::maxpool(2, 2, 2)), LayerClass::SingleChannel);
        // a 3x3 window over a 3x3 input covers everything
        let want = if h == 3 && w == 3 { LayerClass::Full } else { LayerClass::FullChannel };
        prop_assert_eq!(class(layers::conv2d(3, 3, 1, k, Padding::Valid)), want);
        prop_assert_eq!(class(layers::conv2d(1, 1, 1, k, Padding::Valid)), LayerClass::FullChannel);
        prop_assert_eq!(class(layers::fully_connected(k)), LayerClass::Full);
        if c % 2 == 0 {
            prop_assert_eq!(class(layers::group_conv(3, 3, 1, c / 2, k, Padding::Same)), LayerClass::PartialChannel);
        }
    }
}

#[test]
fn worked_shape_examples() {
    let o = output_shape(&LayerParams::new(3, 3, 16, 1, 1, 1, 32), (48, 48, 16)).unwrap();
    assert_eq!((o.height, o.width, o.channels, o.groups), (46, 46, 32, 1));
    let o = output_shape(&LayerParams::new(3, 3, 4, 1, 1, 2, 3), (8, 8, 6)).unwrap();
    assert_eq!(o.groups, 2);
    let o = output_shape(&LayerParams::new(3, 3, 1, 1, 1, 1, 1), (8, 8, 64)).unwrap();
    assert_eq!((o.groups, o.channels), (64, 64));
    assert_eq!(classify(&LayerParams::new(1, 1, 1, 1, 1, 1, 1), (5, 5, 5)), LayerClass::SingleElement);
    assert_eq!(classify(&LayerParams::new(5, 6, 7, 1, 1, 1, 3), (5, 6, 7)), LayerClass::Full);
    assert_eq!(classify(&LayerParams::new(3, 3, 4, 1, 1, 4, 2), (8, 8, 8)), LayerClass::PartialChannel);
}
