use std::path::Path;

use super::weights::{split_f32, Lcg};
use super::{ModelPlan, Step};
use crate::arith::FloatArith;
use crate::driver::{execute, execute_in_place, Operand, RunStats};
use crate::error::{Error, Result};
use crate::kernels::{KernelConfig, NoProbe};
use crate::layer::{BinaryMode, ReductionOp};
use crate::layers::BoundLayer;
use crate::layout::{pack_into, pack_weights, unpack_view, BlockedMut, BlockedRef, BlockedShape, PackedWeights, PlainTensor};
use crate::oracle::{oracle_layer, oracle_layer_quantized, to_f64, OracleOperand};
use crate::quantized::{check_accumulator, decode_quant_tensors, LayerQuant, QuantParams, QuantTensor};
use crate::scalar::Scalar;

/// Where a model's parameters come from.
#[derive(Debug, Clone, Copy)]
pub enum WeightSource<'a> {
    /// Deterministic LCG weights (see [`super::weights`]).
    Seed(u64),
    File(&'a Path),
    Bytes(&'a [u8]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferOptions {
    /// Thread ceiling; each layer uses `min(p_avail, p_max)` workers.
    pub p_max: usize,
    /// Stamp each layer's output region and verify its input survives.
    pub canary: bool,
}

impl InferOptions {
    pub fn threads(p_max: usize) -> Self {
        InferOptions { p_max, canary: false }
    }
}

impl Default for InferOptions {
    fn default() -> Self {
        let p = std::thread::available_parallelism().map_or(1, |n| n.get());
        InferOptions::threads(p)
    }
}

/// Per-driver-run parallelism of one inference.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InferStats {
    /// Workers used.
    pub workers: Vec<usize>,
    /// Output-channel blocks available (`p_avail`).
    pub available: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Params<E, C> {
    Fma { plain: Vec<E>, packed: PackedWeights<E> },
    Affine { scale: Vec<C>, shift: Vec<C> },
}

impl<E: Copy, C: Copy> Params<E, C> {
    fn operand(&self) -> Operand<'_, E, C> {
        match self {
            Params::Fma { packed, .. } => Operand::Weights(packed),
            Params::Affine { scale, shift } => Operand::Affine { scale, shift },
        }
    }
}

#[derive(Debug, Clone)]
struct StepParams<E, C> {
    main: Option<Params<E, C>>,
    projection: Option<Params<E, C>>,
}

/// What the arena walk hands to a step.
enum StepIo<'a, E> {
    Layer { input: BlockedRef<'a, E>, output: BlockedMut<'a, E> },
    InPlace { data: BlockedMut<'a, E> },
    Projection { input: BlockedRef<'a, E>, output: BlockedMut<'a, E> },
    Add { data: BlockedMut<'a, E>, other: BlockedRef<'a, E> },
}

/// `(live, free)` ends of the arena.
fn ends<E>(arena: &mut [E], live_left: bool, live: usize, free: usize) -> (&mut [E], &mut [E]) {
    let cap = arena.len();
    if live_left {
        let (a, b) = arena.split_at_mut(cap - free);
        (&mut a[..live], b)
    } else {
        let (a, b) = arena.split_at_mut(free);
        let n = b.len();
        (&mut b[n - live..], a)
    }
}

/// Packs the input into the arena, walks the plan and unpacks the result.
fn walk<E: Copy + Default + PartialEq + Send + Sync>(
    plan: &ModelPlan,
    arena: &mut [E],
    side: &mut [E],
    input: &PlainTensor<E>,
    canary: Option<E>,
    stats: &mut InferStats,
    mut run: impl FnMut(usize, &Step, StepIo<'_, E>) -> Result<RunStats>,
) -> Result<PlainTensor<E>> {
    if input.shape() != plan.input {
        return Err(Error::Contract(format!("input is {:?}, model expects {:?}", input.shape(), plan.input)));
    }
    let shape = |s: (usize, usize, usize)| BlockedShape::new(s.0, s.1, s.2, plan.block);
    let mut cur = shape(plan.input);
    let mut live_left = true;
    pack_into(input, &mut BlockedMut::new(cur, &mut arena[..cur.len()])?, E::default());
    let mut saved: Option<BlockedShape> = None;

    for (i, step) in plan.steps.iter().enumerate() {
        let mut record = |r: Result<RunStats>, blocks: usize| -> Result<()> {
            let r = r.map_err(|e| e.at_layer(i, step.name()))?;
            stats.workers.push(r.workers);
            stats.available.push(blocks);
            Ok(())
        };
        match step {
            Step::Layer { bound, .. } if bound.in_place() => {
                let (live, _) = ends(arena, live_left, cur.len(), 0);
                let data = BlockedMut::new(cur, live)?;
                record(run(i, step, StepIo::InPlace { data }), cur.num_blocks())?;
            }
            Step::Layer { bound, .. } => {
                let out = shape(bound.output);
                let (live, free) = ends(arena, live_left, cur.len(), out.len());
                let before = match canary {
                    Some(c) => {
                        free.fill(c);
                        Some(live.to_vec())
                    }
                    None => None,
                };
                let io = StepIo::Layer { input: BlockedRef::new(cur, live)?, output: BlockedMut::new(out, free)? };
                record(run(i, step, io), out.num_blocks())?;
                if before.is_some_and(|b| b != *live) {
                    return Err(Error::Contract(format!("step {i} ({}) overwrote its own input", step.name())));
                }
                live_left = !live_left;
                cur = out;
            }
            Step::Save { .. } => {
                let (live, _) = ends(arena, live_left, cur.len(), 0);
                side[..cur.len()].copy_from_slice(live);
                saved = Some(cur);
            }
            Step::Add { projection, .. } => {
                let side_shape = saved.take().ok_or_else(|| Error::Contract("add without checkpoint".into()))?;
                let side_ref = BlockedRef::new(side_shape, &side[..side_shape.len()])?;
                match projection {
                    Some(p) => {
                        let out = shape(p.output);
                        let (live, free) = ends(arena, live_left, cur.len(), out.len());
                        let io = StepIo::Projection { input: side_ref, output: BlockedMut::new(out, &mut free[..])? };
                        record(run(i, step, io), out.num_blocks())?;
                        let io = StepIo::Add { data: BlockedMut::new(cur, live)?, other: BlockedRef::new(out, free)? };
                        record(run(i, step, io), cur.num_blocks())?;
                    }
                    None => {
                        let (live, _) = ends(arena, live_left, cur.len(), 0);
                        let io = StepIo::Add { data: BlockedMut::new(cur, live)?, other: side_ref };
                        record(run(i, step, io), cur.num_blocks())?;
                    }
                }
            }
        }
    }
    let (live, _) = ends(arena, live_left, cur.len(), 0);
    Ok(unpack_view(BlockedRef::new(cur, live)?))
}

fn layer_of(step: &Step) -> Option<&BoundLayer> {
    match step {
        Step::Layer { bound, .. } => Some(bound),
        _ => None,
    }
}

/// Float model with packed weights and its own activation buffers.
#[derive(Debug, Clone)]
pub struct FloatModel<T> {
    plan: ModelPlan,
    config: KernelConfig,
    params: Vec<StepParams<T, T>>,
    arena: Vec<T>,
    side: Vec<T>,
    scratch: Vec<T>,
}

fn float_params<T: Scalar>(layer: &BoundLayer, values: Vec<f32>, config: &KernelConfig) -> Result<Params<T, T>> {
    let values: Vec<T> = values.into_iter().map(T::cast_f32).collect();
    match layer.op {
        ReductionOp::Fma => {
            let shape = layer.weight_shape().expect("fma layer");
            let packed = pack_weights(&values, shape, &config.for_layer(&layer.params))?;
            Ok(Params::Fma { plain: values, packed })
        }
        _ => {
            let c = layer.output.2;
            let padded = c.div_ceil(config.block()) * config.block();
            let mut scale = vec![T::zero(); padded];
            let mut shift = vec![T::zero(); padded];
            scale[..c].copy_from_slice(&values[..c]);
            shift[..c].copy_from_slice(&values[c..]);
            Ok(Params::Affine { scale, shift })
        }
    }
}

impl<T: Scalar> FloatModel<T> {
    pub fn new(plan: ModelPlan, source: WeightSource<'_>, config: KernelConfig) -> Result<Self> {
        if config.block() != plan.block {
            return Err(Error::Contract(format!("config block {} but plan block {}", config.block(), plan.block)));
        }
        let lengths = plan.weight_lengths();
        let mut tensors = match source {
            WeightSource::Seed(seed) => {
                let mut rng = Lcg::new(seed);
                let mut out = Vec::new();
                for step in &plan.steps {
                    for l in step.parameterized() {
                        out.push(match l.op {
                            ReductionOp::Fma => rng.float_weights(l.param_count(), l.params.window_len()),
                            // scale in [0.75, 1.25), shift in [-0.25, 0.25)
                            _ => {
                                let c = l.output.2;
                                let mut v = rng.float_weights(2 * c, 48);
                                v[..c].iter_mut().for_each(|s| *s += 1.0);
                                v
                            }
                        });
                    }
                }
                out
            }
            WeightSource::File(path) => split_f32(&std::fs::read(path)?, &lengths)?,
            WeightSource::Bytes(bytes) => split_f32(bytes, &lengths)?,
        }
        .into_iter();
        let mut params = Vec::with_capacity(plan.steps.len());
        for step in &plan.steps {
            let mut next = |l: &BoundLayer| -> Result<Params<T, T>> {
                float_params(l, tensors.next().expect("one tensor per layer"), &config)
            };
            let main = layer_of(step).filter(|l| l.param_count() > 0).map(&mut next).transpose()?;
            let projection = match step {
                Step::Add { projection: Some(p), .. } => Some(next(p)?),
                _ => None,
            };
            params.push(StepParams { main, projection });
        }
        Ok(FloatModel {
            arena: vec![T::zero(); plan.arena_len],
            side: vec![T::zero(); plan.side_len],
            scratch: Vec::with_capacity(plan.pad_len),
            plan,
            config,
            params,
        })
    }

    pub fn seeded(plan: ModelPlan, seed: u64) -> Result<Self> {
        Self::new(plan, WeightSource::Seed(seed), KernelConfig::default())
    }

    pub fn plan(&self) -> &ModelPlan {
        &self.plan
    }

    pub fn infer(&mut self, input: &PlainTensor<T>, p_max: usize) -> Result<PlainTensor<T>> {
        Ok(self.infer_with(input, InferOptions::threads(p_max))?.0)
    }

    pub fn infer_with(&mut self, input: &PlainTensor<T>, opts: InferOptions) -> Result<(PlainTensor<T>, InferStats)> {
        let FloatModel { plan, config, params, arena, side, scratch } = self;
        let arith = FloatArith::<T>::new();
        let p = opts.p_max.max(1);
        let mut stats = InferStats::default();
        let canary = opts.canary.then(T::nan);
        let out = walk(plan, arena, side, input, canary, &mut stats, |i, step, io| {
            let sp = &params[i];
            let main = sp.main.as_ref().map_or(Operand::None, |w| w.operand());
            match (step, io) {
                (Step::Layer { bound, .. }, StepIo::Layer { input, output }) => {
                    execute(&arith, &bound.params, bound.op, input, main, config, output, p, scratch, &NoProbe)
                }
                (Step::Layer { bound, .. }, StepIo::InPlace { data }) => {
                    execute_in_place(&arith, &bound.params, bound.op, data, main, config, p, &NoProbe)
                }
                (Step::Add { projection: Some(pl), .. }, StepIo::Projection { input, output }) => {
                    let w = sp.projection.as_ref().expect("projection weights").operand();
                    execute(&arith, &pl.params, pl.op, input, w, config, output, p, scratch, &NoProbe)
                }
                (Step::Add { bound, .. }, StepIo::Add { data, other }) => {
                    execute_in_place(&arith, &bound.params, bound.op, data, Operand::Tensor(other), config, p, &NoProbe)
                }
                _ => unreachable!("walk pairs steps with their io"),
            }
        })?;
        Ok((out, stats))
    }

    /// The same model evaluated by the `f64` oracle on plain tensors.
    pub fn reference(&self, input: &PlainTensor<T>) -> Result<PlainTensor<f64>> {
        let widen = |v: &[T]| v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect::<Vec<f64>>();
        let eval = |l: &BoundLayer, x: &PlainTensor<f64>, p: Option<&Params<T, T>>, other: Option<&PlainTensor<f64>>| {
            let (w, scale, shift);
            let operand = match (p, other) {
                (Some(Params::Fma { plain, .. }), _) => {
                    w = widen(plain);
                    OracleOperand::Weights(&w)
                }
                (Some(Params::Affine { scale: s, shift: t }), _) => {
                    (scale, shift) = (widen(s), widen(t));
                    OracleOperand::Affine { scale: &scale, shift: &shift }
                }
                (None, Some(o)) => OracleOperand::Tensor(o),
                (None, None) => OracleOperand::None,
            };
            oracle_layer(&l.params, l.op, x, operand)
        };
        let mut x = to_f64(input);
        let mut saved = None;
        for (i, step) in self.plan.steps.iter().enumerate() {
            let sp = &self.params[i];
            x = match step {
                Step::Layer { bound, .. } => eval(bound, &x, sp.main.as_ref(), None)?,
                Step::Save { .. } => {
                    saved = Some(x.clone());
                    x
                }
                Step::Add { bound, projection } => {
                    let side = saved.take().expect("planned checkpoint");
                    let other = match projection {
                        Some(p) => eval(p, &side, sp.projection.as_ref(), None)?,
                        None => side,
                    };
                    eval(bound, &x, None, Some(&other))?
                }
            };
        }
        Ok(x)
    }
}

/// `uint8` model: per-tensor quantized weights and activations.
///
/// Activation scales follow the weights: an FMA layer with window `n`
/// outputs at `in_scale * w_scale * sqrt(n) * 52` (keeps seeded activations
/// spread over the byte range), an add at the sum of
/// its operand scales; every zero point is 128. Max and upsample layers
/// pass quantization through. Batch norm is not supported (fold it into
/// the preceding convolution before quantizing).
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    plan: ModelPlan,
    config: KernelConfig,
    params: Vec<StepParams<u8, f64>>,
    quant: Vec<(Option<LayerQuant>, Option<LayerQuant>)>,
    input_quant: QuantParams,
    output_quant: QuantParams,
    arena: Vec<u8>,
    side: Vec<u8>,
    scratch: Vec<u8>,
}

/// Default input quantization: `[-1, 1)` on the byte grid.
pub const DEFAULT_INPUT_QUANT: QuantParams = QuantParams { scale: 1.0 / 128.0, zero_point: 128 };

fn fma_output_quant(input: QuantParams, weights: QuantParams, window: usize) -> QuantParams {
    QuantParams { scale: input.scale * weights.scale * (window as f64).sqrt() * 52.0, zero_point: 128 }
}

impl QuantizedModel {
    pub fn new(plan: ModelPlan, source: WeightSource<'_>, config: KernelConfig, input_quant: QuantParams) -> Result<Self> {
        if config.block() != plan.block {
            return Err(Error::Contract(format!("config block {} but plan block {}", config.block(), plan.block)));
        }
        let lengths = plan.weight_lengths();
        let mut tensors = match source {
            WeightSource::Seed(seed) => {
                let mut rng = Lcg::new(seed);
                let mut out = Vec::new();
                for step in &plan.steps {
                    for l in step.parameterized() {
                        let scale = (3.0 / l.params.window_len() as f64).sqrt() / 128.0;
                        out.push(QuantTensor {
                            quant: QuantParams { scale, zero_point: 128 },
                            data: rng.byte_weights(l.param_count()),
                        });
                    }
                }
                out
            }
            WeightSource::File(path) => decode_quant_tensors(&std::fs::read(path)?, &lengths)?,
            WeightSource::Bytes(bytes) => decode_quant_tensors(bytes, &lengths)?,
        }
        .into_iter();

        let mut act = input_quant;
        let mut saved = act;
        let mut params = Vec::new();
        let mut quant = Vec::new();
        for (i, step) in plan.steps.iter().enumerate() {
            let at = |e: Error| e.at_layer(i, step.name());
            let mut fma = |l: &BoundLayer, input: QuantParams| -> Result<(Params<u8, f64>, LayerQuant)> {
                check_accumulator(&l.params)?;
                let t = tensors.next().expect("one tensor per layer");
                let shape = l.weight_shape().expect("fma layer");
                let packed = pack_weights(&t.data, shape, &config.for_layer(&l.params))?;
                let output = fma_output_quant(input, t.quant, l.params.window_len());
                Ok((Params::Fma { plain: t.data, packed }, LayerQuant { input, weights: t.quant, second: input, output }))
            };
            let (sp, sq) = match step {
                Step::Layer { bound, .. } => match bound.op {
                    ReductionOp::Fma => {
                        let (p, q) = fma(bound, act).map_err(at)?;
                        act = q.output;
                        (StepParams { main: Some(p), projection: None }, (Some(q), None))
                    }
                    ReductionOp::PointwiseFmaBinary(BinaryMode::Affine) => {
                        return Err(at(Error::Unsupported("quantized batch norm; fold it into the convolution".into())));
                    }
                    _ => (StepParams { main: None, projection: None }, (Some(LayerQuant::identity(act)), None)),
                },
                Step::Save { .. } => {
                    saved = act;
                    (StepParams { main: None, projection: None }, (None, None))
                }
                Step::Add { projection, .. } => {
                    let (proj, pq, other) = match projection {
                        Some(p) => {
                            let (w, q) = fma(p, saved).map_err(at)?;
                            (Some(w), Some(q), q.output)
                        }
                        None => (None, None, saved),
                    };
                    let output = QuantParams { scale: act.scale + other.scale, zero_point: 128 };
                    let q = LayerQuant { input: act, weights: act, second: other, output };
                    act = output;
                    (StepParams { main: None, projection: proj }, (Some(q), pq))
                }
            };
            params.push(sp);
            quant.push(sq);
        }
        Ok(QuantizedModel {
            arena: vec![0; plan.arena_len],
            side: vec![0; plan.side_len],
            scratch: Vec::with_capacity(plan.pad_len),
            plan,
            config,
            params,
            quant,
            input_quant,
            output_quant: act,
        })
    }

    pub fn seeded(plan: ModelPlan, seed: u64) -> Result<Self> {
        Self::new(plan, WeightSource::Seed(seed), KernelConfig::default(), DEFAULT_INPUT_QUANT)
    }

    pub fn plan(&self) -> &ModelPlan {
        &self.plan
    }

    pub fn input_quant(&self) -> QuantParams {
        self.input_quant
    }

    pub fn output_quant(&self) -> QuantParams {
        self.output_quant
    }

    pub fn infer(&mut self, input: &PlainTensor<u8>, p_max: usize) -> Result<PlainTensor<u8>> {
        Ok(self.infer_with(input, InferOptions::threads(p_max))?.0)
    }

    pub fn infer_with(&mut self, input: &PlainTensor<u8>, opts: InferOptions) -> Result<(PlainTensor<u8>, InferStats)> {
        let QuantizedModel { plan, config, params, quant, arena, side, scratch, .. } = self;
        let p = opts.p_max.max(1);
        let mut stats = InferStats::default();
        let canary = opts.canary.then_some(0xA5u8);
        let out = walk(plan, arena, side, input, canary, &mut stats, |i, step, io| {
            let sp = &params[i];
            let (main_q, proj_q) = &quant[i];
            let main_q = main_q.as_ref().expect("quantized step");
            let main = sp.main.as_ref().map_or(Operand::None, |w| w.operand());
            let bound = match step {
                Step::Layer { bound, .. } | Step::Add { bound, .. } => bound,
                Step::Save { .. } => unreachable!("save runs no layer"),
            };
            match io {
                StepIo::Layer { input, output } => {
                    crate::quantized::run_layer_quantized_with(
                        &bound.params, bound.op, input, main, main_q, config, output, p, scratch, &NoProbe,
                    )
                }
                StepIo::InPlace { data } => crate::quantized::run_layer_quantized_in_place(
                    &bound.params,
                    bound.op,
                    data,
                    main,
                    main_q,
                    config,
                    p,
                ),
                StepIo::Projection { input, output } => {
                    let Step::Add { projection: Some(pl), .. } = step else { unreachable!("projection io") };
                    let w = sp.projection.as_ref().expect("projection weights").operand();
                    let q = proj_q.as_ref().expect("projection quant");
                    crate::quantized::run_layer_quantized_with(
                        &pl.params, pl.op, input, w, q, config, output, p, scratch, &NoProbe,
                    )
                }
                StepIo::Add { data, other } => crate::quantized::run_layer_quantized_in_place(
                    &bound.params,
                    bound.op,
                    data,
                    Operand::Tensor(other),
                    main_q,
                    config,
                    p,
                ),
            }
        })?;
        Ok((out, stats))
    }

    /// The same model evaluated by the integer oracle.
    pub fn reference(&self, input: &PlainTensor<u8>) -> Result<PlainTensor<u8>> {
        let eval = |l: &BoundLayer, x: &PlainTensor<u8>, p: Option<&Params<u8, f64>>, other: Option<&PlainTensor<u8>>, q: &LayerQuant| {
            let operand = match (p, other) {
                (Some(Params::Fma { plain, .. }), _) => OracleOperand::Weights(plain),
                (Some(Params::Affine { .. }), _) => unreachable!("quantized affine is rejected at build"),
                (None, Some(o)) => OracleOperand::Tensor(o),
                (None, None) => OracleOperand::None,
            };
            oracle_layer_quantized(&l.params, l.op, x, operand, q)
        };
        let mut x = input.clone();
        let mut saved = None;
        for (i, step) in self.plan.steps.iter().enumerate() {
            let sp = &self.params[i];
            let (q, pq) = &self.quant[i];
            x = match step {
                Step::Layer { bound, .. } => eval(bound, &x, sp.main.as_ref(), None, q.as_ref().expect("quant"))?,
                Step::Save { .. } => {
                    saved = Some(x.clone());
                    x
                }
                Step::Add { bound, projection } => {
                    let side = saved.take().expect("planned checkpoint");
                    let other = match projection {
                        Some(p) => eval(p, &side, sp.projection.as_ref(), None, pq.as_ref().expect("quant"))?,
                        None => side,
                    };
                    eval(bound, &x, None, Some(&other), q.as_ref().expect("quant"))?
                }
            };
        }
        Ok(x)
    }
}
