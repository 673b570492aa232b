//! TOML model description.
//!
//! ```toml
//! name = "tiny"
//! input = [32, 32, 3]          # H, W, C
//!
//! [[layer]]
//! type = "conv"                # conv | depthwise | group_conv | maxpool | relu | fc
//!                              # | batchnorm | upsample | save | add
//! filter = [3, 3]
//! stride = 1
//! channels = 16
//! padding = "same"             # valid (default) | same
//! activation = "relu"          # optional, runs in place after the layer
//!
//! [[layer]]
//! type = "save"                # checkpoint the current activation
//!
//! [[layer]]
//! type = "add"                 # current += checkpoint
//! projection = { filter = [1, 1], stride = 2, channels = 32 }
//! ```

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::layers::{self, LayerSpec, Padding};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub input: [usize; 3],
    #[serde(default, rename = "layer")]
    pub layers: Vec<LayerConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    #[serde(rename = "type")]
    pub kind: String,
    pub filter: Option<[usize; 2]>,
    pub stride: Option<usize>,
    pub channels: Option<usize>,
    /// Input channels per group (`group_conv`).
    pub group_channels: Option<usize>,
    pub padding: Option<String>,
    pub activation: Option<String>,
    pub scale: Option<usize>,
    pub projection: Option<ProjectionConfig>,
}

/// Convolution applied to the checkpoint before an `add`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionConfig {
    pub filter: Option<[usize; 2]>,
    pub stride: Option<usize>,
    pub channels: usize,
    pub padding: Option<String>,
}

/// One entry of the parsed model, before shapes are known.
#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Layer(LayerSpec),
    Save,
    Add { projection: Option<LayerSpec> },
    /// Global max pool over whatever spatial size arrives.
    GlobalMaxPool,
}

impl ModelConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Expands the entries; an `activation` becomes a following ReLU entry.
    pub fn entries(&self) -> Result<Vec<Entry>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let wrap = |e: Error| e.at_layer(i, l.kind.clone());
            out.push(l.entry().map_err(wrap)?);
            match l.activation.as_deref() {
                None | Some("none") => {}
                Some("relu") => out.push(Entry::Layer(layers::relu())),
                Some(other) => return Err(wrap(Error::Config(format!("unknown activation {other:?}")))),
            }
        }
        Ok(out)
    }
}

fn padding(p: Option<&str>) -> Result<Padding> {
    match p {
        None | Some("valid") => Ok(Padding::Valid),
        Some("same") => Ok(Padding::Same),
        Some(other) => Err(Error::Config(format!("unknown padding {other:?}"))),
    }
}

impl LayerConfig {
    fn require<T: Copy>(&self, v: Option<T>, field: &str) -> Result<T> {
        v.ok_or_else(|| Error::Config(format!("{} needs `{field}`", self.kind)))
    }

    fn entry(&self) -> Result<Entry> {
        let stride = self.stride.unwrap_or(1);
        let pad = padding(self.padding.as_deref())?;
        let spec = match self.kind.as_str() {
            "conv" => {
                let [h, w] = self.require(self.filter, "filter")?;
                layers::conv2d(h, w, stride, self.require(self.channels, "channels")?, pad)
            }
            "depthwise" => {
                let [h, w] = self.require(self.filter, "filter")?;
                layers::depthwise_conv(h, w, stride, pad)
            }
            "group_conv" => {
                let [h, w] = self.require(self.filter, "filter")?;
                let per_group = self.require(self.group_channels, "group_channels")?;
                layers::group_conv(h, w, stride, per_group, self.require(self.channels, "channels")?, pad)
            }
            "maxpool" => match self.filter {
                Some([h, w]) => layers::maxpool(h, w, self.stride.unwrap_or(h)).with_padding(pad),
                None => return Ok(Entry::GlobalMaxPool),
            },
            "relu" => layers::relu(),
            "fc" => layers::fully_connected(self.require(self.channels, "channels")?),
            "batchnorm" => layers::batchnorm_affine(),
            "upsample" => layers::upsample_nearest(self.require(self.scale, "scale")?),
            "save" => return Ok(Entry::Save),
            "add" => {
                let projection = match &self.projection {
                    None => None,
                    Some(p) => {
                        let [h, w] = p.filter.unwrap_or([1, 1]);
                        Some(layers::conv2d(h, w, p.stride.unwrap_or(1), p.channels, padding(p.padding.as_deref())?))
                    }
                };
                return Ok(Entry::Add { projection });
            }
            other => return Err(Error::Config(format!("unknown layer type {other:?}"))),
        };
        Ok(Entry::Layer(spec))
    }
}
