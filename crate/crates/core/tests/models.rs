use std::path::PathBuf;

use unistencil::driver::Operand;
use unistencil::instrument::Counters;
use unistencil::layout::{encode_f32_le, pack_activations, pack_weights, BlockedTensor, PlainTensor, WeightShape};
use unistencil::model::weights::Lcg;
use unistencil::model::{
    memory_report, DType, FloatModel, InferOptions, ModelPlan, QuantizedModel, WeightSource,
};
use unistencil::quantized::{quantize, run_layer_quantized, LayerQuant, QuantParams};
use unistencil::{Error, KernelConfig, LayerParams, ReductionOp};

const SHIPPED: [&str; 4] = ["autoencoder", "dscnn", "resnet", "mobilenet"];

fn config_path(name: &str) -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "..", "models", &format!("{name}.toml")].iter().collect()
}

fn plan(name: &str) -> ModelPlan {
    ModelPlan::from_file(config_path(name)).unwrap()
}

fn input(plan: &ModelPlan, seed: u64) -> PlainTensor<f32> {
    let mut rng = Lcg::new(seed);
    let (h, w, c) = plan.input;
    PlainTensor::from_fn(h, w, c, |_, _, _| 2.0 * rng.unit() - 1.0)
}

#[test]
fn shipped_parameter_counts() {
    let counts: Vec<_> = SHIPPED.iter().map(|m| plan(m).param_count).collect();
    assert_eq!(counts, [133_120, 20_288, 77_744, 3_201_472]);
    assert_eq!(plan("autoencoder").input, (1, 1, 128));
}

#[test]
fn autoencoder_float_memory() {
    let mib = memory_report(&plan("autoencoder"), DType::Float).mib();
    assert!((mib - 0.509).abs() / 0.509 < 0.02, "{mib}");
}

#[test]
fn seeded_outputs_finite_and_stable() {
    for name in SHIPPED {
        let p = plan(name);
        let x = input(&p, 1);
        let mut a = FloatModel::<f32>::seeded(p.clone(), 7).unwrap();
        let mut b = FloatModel::<f32>::seeded(p.clone(), 7).unwrap();
        let first = a.infer(&x, 1).unwrap();
        assert!(first.data.iter().all(|v| v.is_finite()), "{name}");
        assert_eq!(first, a.infer(&x, 1).unwrap(), "{name}: second run differs");
        assert_eq!(first, b.infer(&x, 2).unwrap(), "{name}: fresh model differs");
        let exp = a.reference(&x).unwrap();
        let got: Vec<f64> = first.data.iter().map(|&v| v as f64).collect();
        assert!(unistencil::oracle::relative_error(&got, &exp.data) <= 1e-5, "{name}");
    }
}

#[test]
fn one_pack_one_unpack_per_inference() {
    for name in SHIPPED {
        let p = plan(name);
        let x = input(&p, 2);
        let mut m = FloatModel::<f32>::seeded(p, 2).unwrap();
        m.infer(&x, 1).unwrap();
        let before = Counters::now();
        m.infer(&x, 1).unwrap();
        let c = Counters::since(before);
        assert_eq!((c.packs, c.unpacks), (1, 1), "{name}");
    }
}

#[test]
fn canary_run_matches_plain_run() {
    // every free buffer is stamped with NaN (0xA5 for uint8) before each
    // layer; any output cell a layer failed to write would surface
    for name in SHIPPED {
        let p = plan(name);
        let x = input(&p, 3);
        let mut m = FloatModel::<f32>::seeded(p.clone(), 3).unwrap();
        let plain = m.infer(&x, 2).unwrap();
        let (stamped, _) = m.infer_with(&x, InferOptions { p_max: 2, canary: true }).unwrap();
        assert_eq!(plain, stamped, "{name}");
        let mut q = QuantizedModel::seeded(p, 3).unwrap();
        let qx = quantize(&x, q.input_quant());
        let plain = q.infer(&qx, 2).unwrap();
        let (stamped, _) = q.infer_with(&qx, InferOptions { p_max: 2, canary: true }).unwrap();
        assert_eq!(plain, stamped, "{name}");
    }
}

#[test]
fn workers_bounded_by_available_blocks() {
    let p = plan("resnet");
    let x = input(&p, 4);
    let mut m = FloatModel::<f32>::seeded(p, 4).unwrap();
    for p_max in [1, 2, 4] {
        let (_, stats) = m.infer_with(&x, InferOptions::threads(p_max)).unwrap();
        assert!(stats.workers.iter().zip(&stats.available).all(|(&w, &a)| w == a.min(p_max)));
    }
    // 32-channel layers offer two output blocks
    let (_, stats) = m.infer_with(&x, InferOptions::threads(4)).unwrap();
    assert!(stats.available.contains(&2));
    assert!(stats.workers.iter().all(|&w| w <= 4));
}

#[test]
fn weight_file_matches_seeded_stream() {
    let p = plan("dscnn");
    let mut rng = Lcg::new(11);
    let mut values = Vec::new();
    for step in &p.steps {
        for l in step.parameterized() {
            values.extend(rng.float_weights(l.param_count(), l.params.window_len()));
        }
    }
    let bytes = encode_f32_le(&values);
    let x = input(&p, 5);
    let seeded = FloatModel::<f32>::seeded(p.clone(), 11).unwrap().infer(&x, 1).unwrap();
    let mut from_bytes = FloatModel::<f32>::new(p.clone(), WeightSource::Bytes(&bytes), KernelConfig::default()).unwrap();
    assert_eq!(seeded, from_bytes.infer(&x, 1).unwrap());
    let short = &bytes[..bytes.len() - 4];
    assert!(matches!(
        FloatModel::<f32>::new(p, WeightSource::Bytes(short), KernelConfig::default()),
        Err(Error::WeightLength { .. })
    ));
}

#[test]
fn quantized_models_equal_integer_oracle() {
    for name in SHIPPED {
        let p = plan(name);
        let x = input(&p, 6);
        let mut m = QuantizedModel::seeded(p, 6).unwrap();
        let qx = quantize(&x, m.input_quant());
        assert_eq!(m.infer(&qx, 1).unwrap(), m.reference(&qx).unwrap(), "{name}");
    }
}

#[test]
fn wrong_input_shape_rejected() {
    let p = plan("dscnn");
    let mut m = FloatModel::<f32>::seeded(p, 1).unwrap();
    assert!(matches!(m.infer(&PlainTensor::zeros(2, 2, 2), 1), Err(Error::Contract(_))));
}

#[test]
fn oversized_quantized_window_rejected() {
    // F_H * F_W * F_C = 40000 > i32::MAX / 255^2
    let params = LayerParams::new(100, 100, 4, 1, 1, 1, 1);
    let shape = WeightShape { groups: 1, filters: 1, channels: 4, height: 100, width: 100 };
    let w = pack_weights(&vec![1u8; shape.len()], shape, &KernelConfig::default().for_layer(&params)).unwrap();
    let x = pack_activations(&PlainTensor::filled(100, 100, 4, 255u8), 16);
    let mut out = BlockedTensor::zeros(1, 1, 1, 16);
    let q = LayerQuant::identity(QuantParams::new(1.0, 0).unwrap());
    let r = run_layer_quantized(
        &params,
        ReductionOp::Fma,
        x.view(),
        Operand::Weights(&w),
        &q,
        &KernelConfig::default(),
        out.view_mut(),
        1,
    );
    assert!(matches!(r, Err(Error::AccumulatorOverflow { window: 40_000, .. })));
}

#[test]
fn zero_input_with_zero_point_zero_gives_zero() {
    let params = LayerParams::new(3, 3, 8, 1, 1, 1, 4);
    let shape = WeightShape { groups: 1, filters: 4, channels: 8, height: 3, width: 3 };
    let w = pack_weights(&Lcg::new(1).byte_weights(shape.len()), shape, &KernelConfig::default().for_layer(&params))
        .unwrap();
    let x = pack_activations(&PlainTensor::filled(5, 5, 8, 0u8), 16);
    let mut out = BlockedTensor::filled(unistencil::driver::bound_output(&params, ReductionOp::Fma, x.shape).unwrap(), 9u8);
    let zero = QuantParams::new(0.1, 0).unwrap();
    let q = LayerQuant { input: zero, weights: QuantParams::new(0.01, 128).unwrap(), second: zero, output: zero };
    run_layer_quantized(&params, ReductionOp::Fma, x.view(), Operand::Weights(&w), &q, &KernelConfig::default(), out.view_mut(), 1)
        .unwrap();
    assert!(out.data.iter().all(|&v| v == 0));
}
