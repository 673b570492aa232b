//! Sequential models: shape binding, buffer planning, memory accounting
//! and execution.
//!
//! All activations live in one arena whose two ends act as the ping-pong
//! buffers: a layer reads the live end and writes the other, so the arena
//! only needs the largest `input + output` pair. Single-element layers
//! (ReLU, add, batch norm) update the live end in place. Residual
//! connections are a `save` checkpoint copied to a side buffer and a later
//! `add`, optionally through a projection convolution.

pub mod config;
mod exec;
pub mod weights;

use std::path::Path;

pub use config::{Entry, ModelConfig};
pub use exec::{FloatModel, InferOptions, InferStats, QuantizedModel, WeightSource, DEFAULT_INPUT_QUANT};

use crate::error::{Error, Result};
use crate::layers::{self, BoundLayer, LayerSpec};
use crate::layout::{padded_shape, BlockedShape, DEFAULT_BLOCK};

/// One executable step of a bound model.
#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Layer { spec: LayerSpec, bound: BoundLayer },
    /// Copies the live activation into the side buffer.
    Save { shape: (usize, usize, usize) },
    /// `live += projection(side)` or `live += side`.
    Add { bound: BoundLayer, projection: Option<BoundLayer> },
}

impl Step {
    pub fn name(&self) -> &'static str {
        match self {
            Step::Layer { spec, .. } => spec.name(),
            Step::Save { .. } => "save",
            Step::Add { .. } => "add",
        }
    }

    /// Layers that carry learned parameters, in weight-file order.
    pub fn parameterized(&self) -> impl Iterator<Item = &BoundLayer> {
        let (a, b) = match self {
            Step::Layer { bound, .. } => (Some(bound), None),
            Step::Add { projection, .. } => (None, projection.as_ref()),
            Step::Save { .. } => (None, None),
        };
        a.into_iter().chain(b).filter(|l| l.param_count() > 0)
    }
}

/// A model bound to its input shape, with buffer sizes resolved.
///
/// Buffer sizes are in blocked elements (channels padded to the block).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPlan {
    pub name: String,
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
    pub block: usize,
    pub steps: Vec<Step>,
    pub param_count: usize,
    /// Ping-pong arena: largest simultaneous input + output.
    pub arena_len: usize,
    /// Residual checkpoint buffer.
    pub side_len: usize,
    /// Largest spatially padded layer input.
    pub pad_len: usize,
    /// Largest `H * W` of any activation, the model input included.
    pub max_hw: usize,
}

fn blocked(shape: (usize, usize, usize), block: usize) -> BlockedShape {
    BlockedShape::new(shape.0, shape.1, shape.2, block)
}

impl ModelPlan {
    pub fn from_config(config: &ModelConfig) -> Result<Self> {
        Self::from_entries(&config.name, config.input.into(), &config.entries()?, DEFAULT_BLOCK)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_config(&ModelConfig::parse(text)?)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Binds every entry to its input shape and sizes the buffers.
    pub fn from_entries(name: &str, input: (usize, usize, usize), entries: &[Entry], block: usize) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyModel);
        }
        if input.0 == 0 || input.1 == 0 || input.2 == 0 {
            return Err(Error::Config(format!("input dims must be >= 1, got {input:?}")));
        }
        let mut cur = input;
        let mut saved: Option<(usize, usize, usize)> = None;
        let mut arena_len = blocked(input, block).len();
        let (mut side_len, mut pad_len, mut param_count) = (0, 0, 0);
        let mut max_hw = input.0 * input.1;
        let mut steps = Vec::with_capacity(entries.len());

        let pad_need = |b: &BoundLayer| {
            if b.params.pads.is_zero() {
                0
            } else {
                padded_shape(blocked(b.input, block), b.params.pads).len()
            }
        };

        for (i, entry) in entries.iter().enumerate() {
            let step = (|| -> Result<Step> {
                Ok(match entry {
                    Entry::Layer(spec) => Step::Layer { spec: *spec, bound: spec.bind(cur)? },
                    Entry::GlobalMaxPool => {
                        let spec = layers::maxpool(cur.0, cur.1, 1);
                        Step::Layer { spec, bound: spec.bind(cur)? }
                    }
                    Entry::Save => {
                        if saved.is_some() {
                            return Err(Error::Config("checkpoint saved twice without an add".into()));
                        }
                        Step::Save { shape: cur }
                    }
                    Entry::Add { projection } => {
                        let side = saved.ok_or_else(|| Error::Config("add without a saved checkpoint".into()))?;
                        let projection = projection.map(|p| p.bind(side)).transpose()?;
                        let other = projection.map_or(side, |p| p.output);
                        if other != cur {
                            return Err(Error::Config(format!("add of {other:?} onto {cur:?}")));
                        }
                        Step::Add { bound: layers::add().bind(cur)?, projection }
                    }
                })
            })()
            .map_err(|e| e.at_layer(i, entry_name(entry)))?;

            let cur_len = blocked(cur, block).len();
            match &step {
                Step::Layer { bound, .. } => {
                    if !bound.in_place() {
                        arena_len = arena_len.max(cur_len + blocked(bound.output, block).len());
                    }
                    pad_len = pad_len.max(pad_need(bound));
                    param_count += bound.param_count();
                    cur = bound.output;
                }
                Step::Save { .. } => {
                    side_len = side_len.max(cur_len);
                    saved = Some(cur);
                }
                Step::Add { projection, .. } => {
                    if let Some(p) = projection {
                        arena_len = arena_len.max(cur_len + blocked(p.output, block).len());
                        pad_len = pad_len.max(pad_need(p));
                        param_count += p.param_count();
                    }
                    saved = None;
                }
            }
            max_hw = max_hw.max(cur.0 * cur.1);
            steps.push(step);
        }
        Ok(ModelPlan {
            name: name.to_string(),
            input,
            output: cur,
            block,
            steps,
            param_count,
            arena_len,
            side_len,
            pad_len,
            max_hw,
        })
    }

    /// Plain weight-tensor lengths in file order.
    pub fn weight_lengths(&self) -> Vec<usize> {
        self.steps.iter().flat_map(|s| s.parameterized().map(|l| l.param_count())).collect()
    }

    pub fn input_len(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }
}

fn entry_name(e: &Entry) -> String {
    match e {
        Entry::Layer(spec) => spec.name().to_string(),
        Entry::Save => "save".into(),
        Entry::Add { .. } => "add".into(),
        Entry::GlobalMaxPool => "maxpool".into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    Float,
    Uint8,
}

impl DType {
    pub fn bytes(&self) -> usize {
        match self {
            DType::Float => 4,
            DType::Uint8 => 1,
        }
    }
}

/// Memory use of a plan.
///
/// `total_bytes` is `bytes * (params + input + arena)`, plus
/// `4 * max_hw` for `uint8` models. The residual checkpoint and
/// padding scratch are reported in `scratch_bytes`, outside the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryReport {
    pub dtype: DType,
    pub params: usize,
    pub input: usize,
    pub arena: usize,
    pub quant_extra: usize,
    pub scratch: usize,
    pub total_bytes: usize,
    pub scratch_bytes: usize,
}

impl MemoryReport {
    /// Total in MiB (2^20 bytes).
    pub fn mib(&self) -> f64 {
        self.total_bytes as f64 / (1u64 << 20) as f64
    }
}

pub fn memory_report(plan: &ModelPlan, dtype: DType) -> MemoryReport {
    let quant_extra = match dtype {
        DType::Float => 0,
        DType::Uint8 => 4 * plan.max_hw,
    };
    let b = dtype.bytes();
    let input = plan.input_len();
    let scratch = plan.side_len + plan.pad_len;
    MemoryReport {
        dtype,
        params: plan.param_count,
        input,
        arena: plan.arena_len,
        quant_extra,
        scratch,
        total_bytes: b * (plan.param_count + input + plan.arena_len) + quant_extra,
        scratch_bytes: b * scratch,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"
        name = "tiny"
        input = [8, 8, 3]
        [[layer]]
        type = "conv"
        filter = [3, 3]
        channels = 16
        padding = "same"
        activation = "relu"
        [[layer]]
        type = "save"
        [[layer]]
        type = "conv"
        filter = [3, 3]
        stride = 2
        channels = 32
        padding = "same"
        [[layer]]
        type = "add"
        projection = { filter = [1, 1], stride = 2, channels = 32 }
        [[layer]]
        type = "maxpool"
        [[layer]]
        type = "fc"
        channels = 10
    "#;

    #[test]
    fn plan_shapes_and_params() {
        let plan = ModelPlan::parse(TINY).unwrap();
        assert_eq!(plan.output, (1, 1, 10));
        let expected = 3 * 3 * 3 * 16 + 3 * 3 * 16 * 32 + 16 * 32 + 32 * 10;
        assert_eq!(plan.param_count, expected);
        assert_eq!(plan.weight_lengths().iter().sum::<usize>(), expected);
        // conv1: 8x8x3 in (block 16) + 8x8x16 out
        assert_eq!(plan.arena_len, 2 * 8 * 8 * 16);
        assert_eq!(plan.side_len, 8 * 8 * 16);
        assert_eq!(plan.max_hw, 64);
    }

    #[test]
    fn empty_model_rejected() {
        assert!(matches!(ModelPlan::parse("name = \"e\"\ninput = [1, 1, 1]"), Err(Error::EmptyModel)));
    }

    #[test]
    fn shape_error_names_layer() {
        let text = r#"
            name = "bad"
            input = [4, 4, 1]
            [[layer]]
            type = "conv"
            filter = [3, 3]
            channels = 2
            [[layer]]
            type = "conv"
            filter = [3, 3]
            channels = 2
        "#;
        match ModelPlan::parse(text) {
            Err(Error::Layer { index, source, .. }) => {
                assert_eq!(index, 1);
                assert!(matches!(*source, Error::Window { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn add_without_save_rejected() {
        let text = "name = \"x\"\ninput = [2, 2, 2]\n[[layer]]\ntype = \"add\"";
        assert!(matches!(ModelPlan::parse(text), Err(Error::Layer { index: 0, .. })));
    }

    #[test]
    fn identity_model_memory() {
        // one 1x1 conv: 4 * (N params + in + out) when nothing is padded
        let text = "name = \"id\"\ninput = [2, 2, 16]\n[[layer]]\ntype = \"conv\"\nfilter = [1, 1]\nchannels = 16";
        let plan = ModelPlan::parse(text).unwrap();
        let r = memory_report(&plan, DType::Float);
        assert_eq!(r.total_bytes, 4 * (256 + 64 + 64 + 64));
        let q = memory_report(&plan, DType::Uint8);
        assert_eq!(q.total_bytes, 256 + 64 + 128 + 4 * 4);
    }
}
