//! Randomized oracle-equivalence suites, shared by the CLI and the tests.
//!
//! Cases are drawn per layer class from the seeded LCG, run through the
//! blocked driver with a random kernel configuration and thread count,
//! and compared against [`crate::oracle`]: float FMA and affine within
//! [`FMA_TOLERANCE`] relative error, everything else bit-exact.

use std::collections::BTreeMap;

use crate::driver::{bound_output, forward, Operand};
use crate::error::Result;
use crate::kernels::KernelConfig;
use crate::layer::{classify, BinaryMode, LayerClass, LayerParams, MaxFloor, ReductionOp};
use crate::layout::{pack_activations, pack_weights, unpack_activations, BlockedTensor, Pads, PlainTensor, WeightShape};
use crate::model::weights::Lcg;
use crate::model::{FloatModel, ModelPlan, QuantizedModel};
use crate::oracle::{oracle_layer, oracle_layer_quantized, relative_error, to_f64, OracleOperand};
use crate::quantized::{quantize, run_layer_quantized, LayerQuant, QuantParams};

/// Relative error bound for float multiply-accumulate paths.
pub const FMA_TOLERANCE: f64 = 1e-5;

pub const ALL_CLASSES: [LayerClass; 5] = [
    LayerClass::SingleElement,
    LayerClass::SingleChannel,
    LayerClass::PartialChannel,
    LayerClass::FullChannel,
    LayerClass::Full,
];

/// One randomized layer invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Case {
    pub class: LayerClass,
    pub layer: &'static str,
    pub params: LayerParams,
    pub op: ReductionOp,
    pub input: (usize, usize, usize),
    pub threads: usize,
    pub config: KernelConfig,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuiteReport {
    pub passed: usize,
    pub failed: usize,
    /// `(passed, failed)` per layer name.
    pub by_layer: BTreeMap<String, (usize, usize)>,
    /// Largest relative error seen on tolerance-checked cases.
    pub max_error: f64,
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn record(&mut self, label: &str, ok: bool, detail: impl FnOnce() -> String) {
        let entry = self.by_layer.entry(label.to_string()).or_default();
        if ok {
            self.passed += 1;
            entry.0 += 1;
        } else {
            self.failed += 1;
            entry.1 += 1;
            if self.failures.len() < 20 {
                self.failures.push(detail());
            }
        }
    }

    pub fn ok(&self) -> bool {
        self.failed == 0 && self.passed > 0
    }
}

fn below(rng: &mut Lcg, n: usize) -> usize {
    (rng.next_u64() >> 33) as usize % n
}

fn between(rng: &mut Lcg, lo: usize, hi: usize) -> usize {
    lo + below(rng, hi - lo + 1)
}

fn uniform(rng: &mut Lcg) -> f32 {
    2.0 * rng.unit() - 1.0
}

fn random_pads(rng: &mut Lcg, f_h: usize, f_w: usize) -> Pads {
    if below(rng, 2) == 0 {
        return Pads::NONE;
    }
    Pads {
        top: below(rng, f_h),
        bottom: below(rng, f_h),
        left: below(rng, f_w),
        right: below(rng, f_w),
    }
}

/// Spatial input extent that fits window `f` with `pad` padding.
fn extent(rng: &mut Lcg, f: usize, pad: usize, max: usize) -> usize {
    between(rng, f.saturating_sub(pad).max(1), max.max(f))
}

fn random_config(rng: &mut Lcg) -> KernelConfig {
    let base = KernelConfig::default().with_vectorized(below(rng, 4) != 0);
    let o_wb = [6, 6, 4, 8, 1, 3, 5, 7][below(rng, 8)];
    let c = base.with_o_wb(o_wb);
    if c.validate().is_ok() {
        c
    } else {
        base
    }
}

fn draw(rng: &mut Lcg, class: LayerClass) -> (&'static str, LayerParams, ReductionOp, (usize, usize, usize)) {
    match class {
        LayerClass::SingleElement => {
            let input = (between(rng, 1, 10), between(rng, 1, 10), between(rng, 1, 40));
            let p = LayerParams::pointwise();
            match below(rng, 5) {
                0 => ("relu", p, ReductionOp::Max(MaxFloor::Zero), input),
                1 => ("add", p, ReductionOp::PointwiseFmaBinary(BinaryMode::Add), input),
                2 => ("batchnorm", p, ReductionOp::PointwiseFmaBinary(BinaryMode::Affine), input),
                3 => ("channel_scale", p, ReductionOp::Fma, input),
                _ => ("upsample", p, ReductionOp::UpsampleNearest { scale: between(rng, 1, 3) }, input),
            }
        }
        LayerClass::SingleChannel => {
            let (f_h, f_w) = (between(rng, 1, 4), between(rng, 1, 4));
            let pads = random_pads(rng, f_h, f_w);
            let input = (
                extent(rng, f_h, pads.vertical(), 12),
                extent(rng, f_w, pads.horizontal(), 12),
                between(rng, 1, 40),
            );
            let p = LayerParams::new(f_h, f_w, 1, between(rng, 1, 3), between(rng, 1, 3), 1, 1).with_pads(pads);
            if below(rng, 2) == 0 {
                ("depthwise", p, ReductionOp::Fma, input)
            } else {
                ("maxpool", p, ReductionOp::Max(MaxFloor::NegInfinity), input)
            }
        }
        LayerClass::PartialChannel => {
            let ic = between(rng, 2, 40);
            let f_c = between(rng, 1, ic - 1);
            let s_c = between(rng, 1, f_c + 2);
            let (f_h, f_w) = (between(rng, 1, 3), between(rng, 1, 3));
            let pads = random_pads(rng, f_h, f_w);
            let input = (extent(rng, f_h, pads.vertical(), 9), extent(rng, f_w, pads.horizontal(), 9), ic);
            let (sh, sw) = (between(rng, 1, 2), between(rng, 1, 2));
            if below(rng, 4) == 0 {
                let p = LayerParams::new(f_h, f_w, f_c, sh, sw, s_c, 1).with_pads(pads);
                ("channel_maxpool", p, ReductionOp::Max(MaxFloor::NegInfinity), input)
            } else {
                let p = LayerParams::new(f_h, f_w, f_c, sh, sw, s_c, between(rng, 1, 20)).with_pads(pads);
                let name = match s_c.cmp(&f_c) {
                    std::cmp::Ordering::Equal => "group_conv",
                    std::cmp::Ordering::Less => "overlapping_group_conv",
                    std::cmp::Ordering::Greater => "strided_group_conv",
                };
                (name, p, ReductionOp::Fma, input)
            }
        }
        LayerClass::FullChannel => {
            let ic = between(rng, 1, 40);
            let (f_h, f_w) = if below(rng, 3) == 0 { (1, 1) } else { (between(rng, 1, 4), between(rng, 1, 4)) };
            let pads = random_pads(rng, f_h, f_w);
            let input = (extent(rng, f_h, pads.vertical(), 12), extent(rng, f_w, pads.horizontal(), 12), ic);
            let p = LayerParams::new(f_h, f_w, ic, between(rng, 1, 3), between(rng, 1, 3), 1, between(rng, 1, 40))
                .with_pads(pads);
            ("conv2d", p, ReductionOp::Fma, input)
        }
        LayerClass::Full => {
            let input = (between(rng, 1, 6), between(rng, 1, 6), between(rng, 1, 40));
            let p = LayerParams::new(input.0, input.1, input.2, 1, 1, 1, between(rng, 1, 40));
            ("fully_connected", p, ReductionOp::Fma, input)
        }
    }
}

/// Draws a case whose layer classifies as `class`.
pub fn random_case(rng: &mut Lcg, class: LayerClass) -> Case {
    loop {
        let (layer, params, op, input) = draw(rng, class);
        if classify(&params, input) == class {
            return Case { class, layer, params, op, input, threads: between(rng, 1, 4), config: random_config(rng) };
        }
    }
}

fn random_tensor(rng: &mut Lcg, shape: (usize, usize, usize)) -> PlainTensor<f32> {
    PlainTensor::from_fn(shape.0, shape.1, shape.2, |_, _, _| uniform(rng))
}

fn groups_of(case: &Case) -> usize {
    let p = &case.params;
    (case.input.2 - p.f_c) / p.s_c + 1
}

fn weight_shape(case: &Case) -> WeightShape {
    let p = &case.params;
    WeightShape { groups: groups_of(case), filters: p.k, channels: p.f_c, height: p.f_h, width: p.f_w }
}

fn padded_channels(c: usize, block: usize) -> usize {
    c.div_ceil(block) * block
}

/// Outcome of one float case: relative error and whether it passed.
pub fn check_float_case(case: &Case, rng: &mut Lcg) -> Result<(f64, bool)> {
    let x = random_tensor(rng, case.input);
    let block = case.config.block();
    let blocked = pack_activations(&x, block);
    let c = case.input.2;
    let (raw, second, scale, shift);
    let (operand, oracle_operand) = match case.op {
        ReductionOp::Fma => {
            let shape = weight_shape(case);
            raw = (0..shape.len()).map(|_| uniform(rng)).collect::<Vec<f32>>();
            let packed = pack_weights(&raw, shape, &case.config.for_layer(&case.params))?;
            let wide: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
            let out = forward(&case.params, case.op, &blocked, Operand::Weights(&packed), &case.config, case.threads)?;
            let exp = oracle_layer(&case.params, case.op, &to_f64(&x), OracleOperand::Weights(&wide))?;
            return Ok(compare(&unpack_activations(&out), &exp, true));
        }
        ReductionOp::PointwiseFmaBinary(BinaryMode::Add) => {
            let y = random_tensor(rng, case.input);
            second = (pack_activations(&y, block), to_f64(&y));
            (Operand::Tensor(second.0.view()), OracleOperand::Tensor(&second.1))
        }
        ReductionOp::PointwiseFmaBinary(BinaryMode::Affine) => {
            let n = padded_channels(c, block);
            scale = (0..n).map(|i| if i < c { uniform(rng) * 2.0 } else { 0.0 }).collect::<Vec<f32>>();
            shift = (0..n).map(|i| if i < c { uniform(rng) } else { 0.0 }).collect::<Vec<f32>>();
            let wide = (
                scale.iter().map(|&v| v as f64).collect::<Vec<_>>(),
                shift.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            );
            let out = forward(
                &case.params,
                case.op,
                &blocked,
                Operand::Affine { scale: &scale, shift: &shift },
                &case.config,
                case.threads,
            )?;
            let exp = oracle_layer(&case.params, case.op, &to_f64(&x), OracleOperand::Affine { scale: &wide.0, shift: &wide.1 })?;
            return Ok(compare(&unpack_activations(&out), &exp, true));
        }
        _ => (Operand::None, OracleOperand::None),
    };
    let out = forward(&case.params, case.op, &blocked, operand, &case.config, case.threads)?;
    let exp = oracle_layer(&case.params, case.op, &to_f64(&x), oracle_operand)?;
    Ok(compare(&unpack_activations(&out), &exp, false))
}

fn compare(got: &PlainTensor<f32>, exp: &PlainTensor<f64>, tolerant: bool) -> (f64, bool) {
    if got.shape() != exp.shape() {
        return (f64::INFINITY, false);
    }
    let wide: Vec<f64> = got.data.iter().map(|&v| v as f64).collect();
    let err = relative_error(&wide, &exp.data);
    if tolerant {
        (err, err <= FMA_TOLERANCE)
    } else {
        let exact = got.data.iter().zip(&exp.data).all(|(&g, &e)| (e as f32).to_bits() == g.to_bits());
        (err, exact)
    }
}

fn random_quant(rng: &mut Lcg) -> QuantParams {
    QuantParams { scale: 0.005 + rng.unit() as f64 * 0.05, zero_point: rng.byte() }
}

/// Runs one case on the `uint8` path; `true` when it equals the integer oracle.
pub fn check_quant_case(case: &Case, rng: &mut Lcg) -> Result<bool> {
    let (ih, iw, ic) = case.input;
    let block = case.config.block();
    let x = PlainTensor::from_fn(ih, iw, ic, |_, _, _| rng.byte());
    let blocked = pack_activations(&x, block);
    let input_q = random_quant(rng);
    let out_shape = bound_output(&case.params, case.op, blocked.shape)?;
    let mut out = BlockedTensor::filled(out_shape, 0u8);
    let (raw, second, scale, shift);
    let (quant, operand, oracle_operand) = match case.op {
        ReductionOp::Fma => {
            let shape = weight_shape(case);
            raw = (0..shape.len()).map(|_| rng.byte()).collect::<Vec<u8>>();
            let packed = pack_weights(&raw, shape, &case.config.for_layer(&case.params))?;
            let wq = QuantParams { scale: (3.0 / case.params.window_len() as f64).sqrt() / 128.0, zero_point: rng.byte() };
            let output = QuantParams {
                scale: input_q.scale * wq.scale * (case.params.window_len() as f64).sqrt() * 52.0,
                zero_point: rng.byte(),
            };
            let q = LayerQuant { input: input_q, weights: wq, second: input_q, output };
            let r = run_layer_quantized(
                &case.params,
                case.op,
                blocked.view(),
                crate::driver::Operand::Weights(&packed),
                &q,
                &case.config,
                out.view_mut(),
                case.threads,
            );
            r?;
            let exp = oracle_layer_quantized(&case.params, case.op, &x, OracleOperand::Weights(&raw), &q)?;
            return Ok(unpack_activations(&out) == exp);
        }
        ReductionOp::PointwiseFmaBinary(BinaryMode::Add) => {
            let y = PlainTensor::from_fn(ih, iw, ic, |_, _, _| rng.byte());
            second = (pack_activations(&y, block), y);
            let q = LayerQuant { input: input_q, weights: input_q, second: random_quant(rng), output: random_quant(rng) };
            (q, Operand::Tensor(second.0.view()), OracleOperand::Tensor(&second.1))
        }
        ReductionOp::PointwiseFmaBinary(BinaryMode::Affine) => {
            let n = padded_channels(ic, block);
            scale = (0..n).map(|_| uniform(rng) as f64 * 2.0).collect::<Vec<f64>>();
            shift = (0..n).map(|_| uniform(rng) as f64 * 50.0).collect::<Vec<f64>>();
            let q = LayerQuant { output: random_quant(rng), ..LayerQuant::identity(input_q) };
            (q, Operand::Affine { scale: &scale, shift: &shift }, OracleOperand::Affine { scale: &scale, shift: &shift })
        }
        _ => (LayerQuant::identity(input_q), Operand::None, OracleOperand::None),
    };
    run_layer_quantized(&case.params, case.op, blocked.view(), operand, &quant, &case.config, out.view_mut(), case.threads)?;
    let exp = oracle_layer_quantized(&case.params, case.op, &x, oracle_operand, &quant)?;
    Ok(unpack_activations(&out) == exp)
}

fn describe(case: &Case, extra: &str) -> String {
    format!(
        "{:?}/{} input {:?} params {:?} op {:?} threads {} o_wb {} vec {}: {extra}",
        case.class,
        case.layer,
        case.input,
        case.params,
        case.op,
        case.threads,
        case.config.o_wb,
        case.config.prefer_vectorized
    )
}

/// Float layer suite: `per_class` cases for each of the five classes.
pub fn layer_suite(per_class: usize, seed: u64) -> SuiteReport {
    let mut rng = Lcg::new(seed);
    let mut report = SuiteReport::default();
    for class in ALL_CLASSES {
        for _ in 0..per_class {
            let case = random_case(&mut rng, class);
            match check_float_case(&case, &mut rng) {
                Ok((err, ok)) => {
                    if err.is_finite() && matches!(case.op, ReductionOp::Fma | ReductionOp::PointwiseFmaBinary(BinaryMode::Affine)) {
                        report.max_error = report.max_error.max(err);
                    }
                    report.record(case.layer, ok, || describe(&case, &format!("error {err:e}")));
                }
                Err(e) => report.record(case.layer, false, || describe(&case, &e.to_string())),
            }
        }
    }
    report
}

/// Quantized layer suite, bit-exact against the integer oracle.
pub fn quantized_suite(per_class: usize, seed: u64) -> SuiteReport {
    let mut rng = Lcg::new(seed);
    let mut report = SuiteReport::default();
    for class in ALL_CLASSES {
        for _ in 0..per_class {
            let case = random_case(&mut rng, class);
            match check_quant_case(&case, &mut rng) {
                Ok(ok) => report.record(case.layer, ok, || describe(&case, "mismatch")),
                Err(e) => report.record(case.layer, false, || describe(&case, &e.to_string())),
            }
        }
    }
    report
}

/// Seeded end-to-end checks per model: float vs the `f64` oracle, uint8
/// vs the integer oracle, and bit-identical outputs for `p_max` 1, 2, 4.
pub fn model_suite(plans: &[ModelPlan], seed: u64) -> SuiteReport {
    let mut report = SuiteReport::default();
    for plan in plans {
        let name = plan.name.clone();
        let mut rng = Lcg::new(seed);
        let (h, w, c) = plan.input;
        let x = PlainTensor::from_fn(h, w, c, |_, _, _| uniform(&mut rng));
        let float = (|| -> Result<(f64, bool)> {
            let mut m = FloatModel::<f32>::seeded(plan.clone(), seed)?;
            let outs = [1, 2, 4].map(|p| m.infer(&x, p));
            let [a, b, c] = outs;
            let (a, b, c) = (a?, b?, c?);
            let exp = m.reference(&x)?;
            let (err, ok) = compare(&a, &exp, true);
            Ok((err, ok && a == b && a == c))
        })();
        match float {
            Ok((err, ok)) => {
                report.max_error = report.max_error.max(err);
                report.record(&format!("{name}/float"), ok, || format!("{name} float: error {err:e}"));
            }
            Err(e) => report.record(&format!("{name}/float"), false, || format!("{name} float: {e}")),
        }
        let quant = (|| -> Result<bool> {
            let mut m = QuantizedModel::seeded(plan.clone(), seed)?;
            let qx = quantize(&x, m.input_quant());
            let a = m.infer(&qx, 1)?;
            let b = m.infer(&qx, 4)?;
            Ok(a == b && a == m.reference(&qx)?)
        })();
        match quant {
            Ok(ok) => report.record(&format!("{name}/uint8"), ok, || format!("{name} uint8: mismatch")),
            Err(e) => report.record(&format!("{name}/uint8"), false, || format!("{name} uint8: {e}")),
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cases_hit_requested_class() {
        let mut rng = Lcg::new(3);
        for class in ALL_CLASSES {
            for _ in 0..50 {
                assert_eq!(random_case(&mut rng, class).class, class);
            }
        }
    }

    #[test]
    fn small_suites_pass() {
        let r = layer_suite(10, 11);
        assert!(r.ok(), "{:#?}", r.failures);
        let q = quantized_suite(10, 12);
        assert!(q.ok(), "{:#?}", q.failures);
    }
}
