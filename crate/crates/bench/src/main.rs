//! Benchmark and verification CLI. Results go to stdout as CSV, logs to stderr.

use std::error::Error;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use unistencil::driver::{forward, Operand};
use unistencil::layer::{BinaryMode, ReductionOp};
use unistencil::layers::{self, LayerSpec, Padding};
use unistencil::layout::{pack_activations, pack_weights, PlainTensor};
use unistencil::model::weights::Lcg;
use unistencil::model::{memory_report, DType, FloatModel, InferOptions, ModelPlan, QuantizedModel};
use unistencil::quantized::quantize;
use unistencil::verify::{self, SuiteReport};
use unistencil::KernelConfig;

type BoxResult<T> = Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "unistencil-bench", version, about = "Layer and model benchmarks for the unistencil engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Times one layer over N trials.
    BenchLayer {
        /// conv<F>x<F>, dwconv<F>x<F>, maxpool<F>x<F>, relu, fc, add, batchnorm or upsample<S>.
        #[arg(long)]
        layer: String,
        /// Input shape as HxWxC.
        #[arg(long)]
        shape: String,
        #[arg(long, value_enum, default_value_t = KernelChoice::Vectorized)]
        kernel: KernelChoice,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Output channels for conv and fc (defaults to the input channels).
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long, value_enum, default_value_t = PaddingChoice::Valid)]
        padding: PaddingChoice,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// End-to-end frames per second for each thread ceiling.
    BenchModel {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        pmax: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, value_enum, default_value_t = DTypeChoice::Float)]
        dtype: DTypeChoice,
        /// Seed for generated weights and input.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Little-endian weight file instead of seeded weights.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Memory used by a model and its breakdown.
    ReportMemory {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = DTypeChoice::Float)]
        dtype: DTypeChoice,
    },
    /// Randomized oracle-equivalence suites.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
        /// Cases per layer class for the layer suites.
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Model configs for the models suite (defaults to every .toml in `--models-dir`).
        #[arg(long)]
        config: Vec<PathBuf>,
        #[arg(long, default_value = "models")]
        models_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelChoice {
    Reference,
    Vectorized,
}

#[derive(Clone, Copy, ValueEnum)]
enum PaddingChoice {
    Valid,
    Same,
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeChoice {
    Float,
    Uint8,
}

impl From<DTypeChoice> for DType {
    fn from(d: DTypeChoice) -> Self {
        match d {
            DTypeChoice::Float => DType::Float,
            DTypeChoice::Uint8 => DType::Uint8,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Layers,
    Models,
    Quantized,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> BoxResult<bool> {
    match cli.command {
        Command::BenchLayer { layer, shape, kernel, trials, warmup, stride, channels, padding, threads } => {
            let shape = parse_shape(&shape)?;
            let padding = match padding {
                PaddingChoice::Valid => Padding::Valid,
                PaddingChoice::Same => Padding::Same,
            };
            let spec = parse_layer(&layer, stride, channels.unwrap_or(shape.2), padding)?;
            bench_layer(&layer, spec, shape, kernel, trials.max(1), warmup, threads.max(1))?;
            Ok(true)
        }
        Command::BenchModel { config, pmax, trials, warmup, dtype, seed, weights } => {
            bench_model(&config, &pmax, trials.max(1), warmup, dtype.into(), seed, weights.as_deref())?;
            Ok(true)
        }
        Command::ReportMemory { config, dtype } => {
            report_memory(&config, dtype.into())?;
            Ok(true)
        }
        Command::Verify { suite, cases, seed, config, models_dir } => run_verify(suite, cases, seed, config, &models_dir),
    }
}

fn parse_shape(s: &str) -> BoxResult<(usize, usize, usize)> {
    let dims = s
        .split(['x', 'X'])
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| format!("bad shape {s:?}: {e}"))?;
    match dims[..] {
        [h, w, c] if h > 0 && w > 0 && c > 0 => Ok((h, w, c)),
        _ => Err(format!("shape must be HxWxC with positive dims, got {s:?}").into()),
    }
}

/// Parses `<prefix><F>x<F>` window suffixes.
fn window(rest: &str) -> BoxResult<(usize, usize)> {
    let (a, b) = rest.split_once('x').ok_or_else(|| format!("expected <F>x<F>, got {rest:?}"))?;
    Ok((a.parse()?, b.parse()?))
}

fn parse_layer(name: &str, stride: usize, channels: usize, padding: Padding) -> BoxResult<LayerSpec> {
    let spec = if let Some(rest) = name.strip_prefix("dwconv") {
        let (f_h, f_w) = window(rest)?;
        layers::depthwise_conv(f_h, f_w, stride, padding)
    } else if let Some(rest) = name.strip_prefix("conv") {
        let (f_h, f_w) = window(rest)?;
        layers::conv2d(f_h, f_w, stride, channels, padding)
    } else if let Some(rest) = name.strip_prefix("maxpool") {
        let (f_h, f_w) = window(rest)?;
        layers::maxpool(f_h, f_w, stride).with_padding(padding)
    } else if let Some(rest) = name.strip_prefix("upsample") {
        layers::upsample_nearest(if rest.is_empty() { 2 } else { rest.parse()? })
    } else {
        match name {
            "relu" => layers::relu(),
            "fc" => layers::fully_connected(channels),
            "add" => layers::add(),
            "batchnorm" => layers::batchnorm_affine(),
            _ => return Err(format!("unknown layer type {name:?}").into()),
        }
    };
    Ok(spec)
}

/// Timestamp counter where the platform exposes one.
#[cfg(target_arch = "x86_64")]
fn cycles() -> Option<u64> {
    // SAFETY: rdtsc is available on every x86_64 CPU.
    Some(unsafe { std::arch::x86_64::_rdtsc() })
}

#[cfg(not(target_arch = "x86_64"))]
fn cycles() -> Option<u64> {
    None
}

const COUNTER: &str = if cfg!(target_arch = "x86_64") { "rdtsc" } else { "none" };

/// Minimum and median of `xs`; `xs` must be non-empty.
fn min_median<T: Copy + PartialOrd>(xs: &mut [T]) -> (T, T) {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("comparable samples"));
    (xs[0], xs[xs.len() / 2])
}

struct Samples {
    secs: Vec<f64>,
    cycles: Vec<u64>,
}

/// Runs `f` `warmup` times untimed, then `trials` timed.
fn measure(trials: usize, warmup: usize, mut f: impl FnMut() -> BoxResult<()>) -> BoxResult<Samples> {
    for _ in 0..warmup {
        f()?;
    }
    let mut s = Samples { secs: Vec::with_capacity(trials), cycles: Vec::with_capacity(trials) };
    for _ in 0..trials {
        let c0 = cycles();
        let t0 = Instant::now();
        f()?;
        let dt = t0.elapsed().as_secs_f64();
        if let (Some(a), Some(b)) = (c0, cycles()) {
            s.cycles.push(b.wrapping_sub(a));
        }
        s.secs.push(dt);
    }
    Ok(s)
}

fn stdout_csv() -> csv::Writer<io::Stdout> {
    csv::Writer::from_writer(io::stdout())
}

fn bench_layer(
    name: &str,
    spec: LayerSpec,
    shape: (usize, usize, usize),
    kernel: KernelChoice,
    trials: usize,
    warmup: usize,
    threads: usize,
) -> BoxResult<()> {
    let bound = spec.bind(shape)?;
    let config = KernelConfig::default().with_vectorized(matches!(kernel, KernelChoice::Vectorized));
    let mut rng = Lcg::new(1);
    let x = PlainTensor::from_fn(shape.0, shape.1, shape.2, |_, _, _| 2.0 * rng.unit() - 1.0);
    let block = config.block();
    let input = pack_activations(&x, block);
    let second = pack_activations(&x, block);
    let channels = input.padded_channels();
    let (scale, shift) = (vec![1.0f32; channels], vec![0.0f32; channels]);
    let packed = match bound.weight_shape() {
        Some(ws) => Some(pack_weights(&rng.float_weights(ws.len(), ws.channels * ws.height * ws.width), ws, &config.for_layer(&bound.params))?),
        None => None,
    };
    let operand = match (bound.op, &packed) {
        (ReductionOp::Fma, Some(w)) => Operand::Weights(w),
        (ReductionOp::PointwiseFmaBinary(BinaryMode::Add), _) => Operand::Tensor(second.view()),
        (ReductionOp::PointwiseFmaBinary(BinaryMode::Affine), _) => Operand::Affine { scale: &scale, shift: &shift },
        _ => Operand::None,
    };
    let mut samples = measure(trials, warmup, || {
        std::hint::black_box(forward(&bound.params, bound.op, &input, operand, &config, threads)?);
        Ok(())
    })?;
    let (min_s, med_s) = min_median(&mut samples.secs);
    let (min_c, med_c) = if samples.cycles.is_empty() {
        (String::new(), String::new())
    } else {
        let (a, b) = min_median(&mut samples.cycles);
        (a.to_string(), b.to_string())
    };
    let mut w = stdout_csv();
    w.write_record([
        "layer", "shape", "kernel", "threads", "trials", "warmup", "min_us", "median_us", "counter", "min_cycles",
        "median_cycles",
    ])?;
    w.write_record([
        name.to_string(),
        format!("{}x{}x{}", shape.0, shape.1, shape.2),
        match kernel {
            KernelChoice::Reference => "reference".into(),
            KernelChoice::Vectorized => "vectorized".into(),
        },
        threads.to_string(),
        trials.to_string(),
        warmup.to_string(),
        format!("{:.3}", min_s * 1e6),
        format!("{:.3}", med_s * 1e6),
        COUNTER.to_string(),
        min_c,
        med_c,
    ])?;
    w.flush()?;
    Ok(())
}

fn load_plan(path: &Path) -> BoxResult<ModelPlan> {
    ModelPlan::from_file(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn bench_model(
    config: &Path,
    pmax: &[usize],
    trials: usize,
    warmup: usize,
    dtype: DType,
    seed: u64,
    weights: Option<&Path>,
) -> BoxResult<()> {
    let plan = load_plan(config)?;
    if pmax.is_empty() || pmax.contains(&0) {
        return Err("--pmax needs positive thread ceilings".into());
    }
    let (h, w, c) = plan.input;
    let mut rng = Lcg::new(seed ^ 0x5eed);
    let x = PlainTensor::from_fn(h, w, c, |_, _, _| 2.0 * rng.unit() - 1.0);
    let source = match weights {
        Some(p) => unistencil::model::WeightSource::File(p),
        None => unistencil::model::WeightSource::Seed(seed),
    };
    let mut rows = Vec::with_capacity(pmax.len());
    match dtype {
        DType::Float => {
            let mut m = FloatModel::<f32>::new(plan.clone(), source, KernelConfig::default())?;
            for &p in pmax {
                let mut workers = 0;
                let mut s = measure(trials, warmup, || {
                    let (out, stats) = m.infer_with(&x, InferOptions::threads(p))?;
                    std::hint::black_box(out);
                    workers = stats.workers.iter().copied().max().unwrap_or(0);
                    Ok(())
                })?;
                rows.push((p, workers, min_median(&mut s.secs)));
            }
        }
        DType::Uint8 => {
            let mut m = QuantizedModel::new(
                plan.clone(),
                source,
                KernelConfig::default(),
                unistencil::model::DEFAULT_INPUT_QUANT,
            )?;
            let qx = quantize(&x, m.input_quant());
            for &p in pmax {
                let mut workers = 0;
                let mut s = measure(trials, warmup, || {
                    let (out, stats) = m.infer_with(&qx, InferOptions::threads(p))?;
                    std::hint::black_box(out);
                    workers = stats.workers.iter().copied().max().unwrap_or(0);
                    Ok(())
                })?;
                rows.push((p, workers, min_median(&mut s.secs)));
            }
        }
    }
    let fastest = rows
        .iter()
        .min_by(|a, b| a.2 .0.total_cmp(&b.2 .0))
        .map(|r| r.0)
        .expect("at least one p_max");
    let mut out = stdout_csv();
    out.write_record(["model", "dtype", "p_max", "max_workers", "trials", "min_ms", "median_ms", "fps", "fastest"])?;
    for (p, workers, (min_s, med_s)) in rows {
        out.write_record([
            plan.name.clone(),
            dtype_name(dtype).into(),
            p.to_string(),
            workers.to_string(),
            trials.to_string(),
            format!("{:.4}", min_s * 1e3),
            format!("{:.4}", med_s * 1e3),
            format!("{:.2}", 1.0 / min_s),
            (p == fastest).to_string(),
        ])?;
    }
    out.flush()?;
    eprintln!("{}: fastest p_max = {fastest}", plan.name);
    Ok(())
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::Float => "float",
        DType::Uint8 => "uint8",
    }
}

fn report_memory(config: &Path, dtype: DType) -> BoxResult<()> {
    let plan = load_plan(config)?;
    let r = memory_report(&plan, dtype);
    let mut w = stdout_csv();
    w.write_record([
        "model", "dtype", "params", "input", "arena", "quant_extra", "total_bytes", "total_mib", "scratch",
        "scratch_bytes",
    ])?;
    w.write_record([
        plan.name.clone(),
        dtype_name(dtype).into(),
        r.params.to_string(),
        r.input.to_string(),
        r.arena.to_string(),
        r.quant_extra.to_string(),
        r.total_bytes.to_string(),
        format!("{:.4}", r.mib()),
        r.scratch.to_string(),
        r.scratch_bytes.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

fn model_configs(explicit: Vec<PathBuf>, dir: &Path) -> BoxResult<Vec<PathBuf>> {
    if !explicit.is_empty() {
        return Ok(explicit);
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(format!("no model configs in {}", dir.display()).into());
    }
    Ok(found)
}

fn run_verify(suite: Suite, cases: usize, seed: u64, configs: Vec<PathBuf>, dir: &Path) -> BoxResult<bool> {
    let (name, report): (&str, SuiteReport) = match suite {
        Suite::Layers => ("layers", verify::layer_suite(cases, seed)),
        Suite::Quantized => ("quantized", verify::quantized_suite(cases, seed)),
        Suite::Models => {
            let plans = model_configs(configs, dir)?.iter().map(|p| load_plan(p)).collect::<BoxResult<Vec<_>>>()?;
            ("models", verify::model_suite(&plans, seed))
        }
    };
    let mut w = stdout_csv();
    w.write_record(["suite", "case", "passed", "failed"])?;
    for (case, (passed, failed)) in &report.by_layer {
        w.write_record([name, case, &passed.to_string(), &failed.to_string()])?;
    }
    w.write_record([name, "total", &report.passed.to_string(), &report.failed.to_string()])?;
    w.flush()?;
    for f in &report.failures {
        eprintln!("FAIL {f}");
    }
    eprintln!(
        "{name}: {} passed, {} failed, max relative error {:e}",
        report.passed, report.failed, report.max_error
    );
    Ok(report.ok())
}
