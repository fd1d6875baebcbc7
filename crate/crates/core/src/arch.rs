//! Declarative network descriptions read from JSON.
//!
//! ```json
//! {
//!   "name": "lenet300",
//!   "defaults": {"rank": 3, "batch": 1},
//!   "layers": [
//!     {"name": "fc1", "kind": "fc", "in_shape": [4, 7, 4, 7], "out_shape": [3, 4, 5, 5]}
//!   ]
//! }
//! ```
//!
//! Conv and resblock rows carry `"conv": {"D", "s", "p", "H", "W"}`. Unknown
//! keys are rejected and every error carries a JSON pointer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::SpatialMode;
use crate::tensor::ConvSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Fc,
    Conv,
    /// Two convolutions, `I -> O` then `O -> O`; the second keeps stride 1.
    Resblock,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvGeometry {
    #[serde(rename = "D")]
    pub filter: usize,
    #[serde(rename = "s", default = "one")]
    pub stride: usize,
    #[serde(rename = "p", default)]
    pub padding: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
}

fn one() -> usize {
    1
}

/// Published coefficients to compare against; mismatches are flagged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub params_r2: Option<u64>,
    pub macs_r3: Option<u64>,
    pub macs_r2: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: LayerKind,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvGeometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial_mode: Option<SpatialMode>,
    /// Identical copies of this row, applied in sequence.
    #[serde(default = "one")]
    pub repeat: usize,
    #[serde(default)]
    pub bias: bool,
    /// 2x2 max-pooling after the activation (conv rows only).
    #[serde(default)]
    pub pool: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Reference>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defaults {
    #[serde(default = "one")]
    pub rank: usize,
    #[serde(default = "one")]
    pub batch: usize,
}

impl Default for Defaults {
    fn default() -> Self {
        Self { rank: 1, batch: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub defaults: Defaults,
}

/// One linear map after expanding rows: a fully-connected layer or a single
/// convolution.
#[derive(Clone, Debug, PartialEq)]
pub enum Unit {
    Fc {
        in_shape: Vec<usize>,
        out_shape: Vec<usize>,
        bias: bool,
    },
    Conv {
        spec: ConvSpec,
        mode: SpatialMode,
        in_shape: Vec<usize>,
        out_shape: Vec<usize>,
        bias: bool,
        pool: bool,
    },
}

fn schema(pointer: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        pointer: pointer.into(),
        message: message.into(),
    }
}

pub(crate) fn path_to_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

impl LayerSpec {
    pub fn in_size(&self) -> usize {
        self.in_shape.iter().product()
    }

    pub fn out_size(&self) -> usize {
        self.out_shape.iter().product()
    }

    pub fn label(&self, index: usize) -> String {
        self.name.clone().unwrap_or_else(|| format!("layer{index}"))
    }

    fn validate(&self, at: &str) -> Result<()> {
        if let Some(i) = self.in_shape.iter().position(|&v| v == 0) {
            return Err(schema(format!("{at}/in_shape/{i}"), "mode sizes must be >= 1"));
        }
        if let Some(i) = self.out_shape.iter().position(|&v| v == 0) {
            return Err(schema(format!("{at}/out_shape/{i}"), "mode sizes must be >= 1"));
        }
        if self.out_shape.is_empty() {
            return Err(schema(format!("{at}/out_shape"), "needs at least one mode"));
        }
        if self.repeat == 0 {
            return Err(schema(format!("{at}/repeat"), "must be >= 1"));
        }
        match self.kind {
            LayerKind::Fc => {
                if self.in_shape.is_empty() {
                    return Err(schema(format!("{at}/in_shape"), "needs at least one mode"));
                }
                for (key, present) in [
                    ("conv", self.conv.is_some()),
                    ("spatial_mode", self.spatial_mode.is_some()),
                ] {
                    if present {
                        return Err(schema(format!("{at}/{key}"), "only valid for conv and resblock layers"));
                    }
                }
                if self.pool {
                    return Err(schema(format!("{at}/pool"), "only valid for conv layers"));
                }
            }
            LayerKind::Conv | LayerKind::Resblock => {
                let Some(c) = self.conv else {
                    return Err(schema(at.to_string(), "missing conv geometry \"conv\""));
                };
                for (key, v) in [("D", c.filter), ("s", c.stride), ("H", c.height), ("W", c.width)] {
                    if v == 0 {
                        return Err(schema(format!("{at}/conv/{key}"), "must be >= 1"));
                    }
                }
                if c.height + 2 * c.padding < c.filter || c.width + 2 * c.padding < c.filter {
                    return Err(schema(format!("{at}/conv/D"), "filter larger than padded input"));
                }
                if self.kind == LayerKind::Resblock && self.pool {
                    return Err(schema(format!("{at}/pool"), "only valid for conv layers"));
                }
            }
        }
        Ok(())
    }

    /// The convolutions or fully-connected map of one copy of this row.
    pub fn units(&self) -> Result<Vec<Unit>> {
        match self.kind {
            LayerKind::Fc => Ok(vec![Unit::Fc {
                in_shape: self.in_shape.clone(),
                out_shape: self.out_shape.clone(),
                bias: self.bias,
            }]),
            LayerKind::Conv | LayerKind::Resblock => {
                let c = self.conv.ok_or_else(|| Error::invalid("conv geometry missing"))?;
                let mode = self.spatial_mode.unwrap_or_default();
                let first = ConvSpec {
                    height: c.height,
                    width: c.width,
                    in_channels: self.in_size(),
                    out_channels: self.out_size(),
                    filter: c.filter,
                    stride: c.stride,
                    padding: c.padding,
                };
                let mut units = vec![Unit::Conv {
                    spec: first,
                    mode,
                    in_shape: self.in_shape.clone(),
                    out_shape: self.out_shape.clone(),
                    bias: self.bias,
                    pool: self.pool,
                }];
                if self.kind == LayerKind::Resblock {
                    let (h, w) = first.output_hw()?;
                    let second = ConvSpec {
                        height: h,
                        width: w,
                        in_channels: self.out_size(),
                        stride: 1,
                        ..first
                    };
                    second.output_hw()?;
                    units.push(Unit::Conv {
                        spec: second,
                        mode,
                        in_shape: self.out_shape.clone(),
                        out_shape: self.out_shape.clone(),
                        bias: self.bias,
                        pool: false,
                    });
                }
                Ok(units)
            }
        }
    }
}

impl ArchSpec {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let spec: Self = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let pointer = path_to_pointer(e.path());
            schema(pointer, e.into_inner().to_string())
        })?;
        de.end().map_err(|e| schema("", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.defaults.rank == 0 {
            return Err(schema("/defaults/rank", "must be >= 1"));
        }
        if self.defaults.batch == 0 {
            return Err(schema("/defaults/batch", "must be >= 1"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let at = format!("/layers/{i}");
            layer.validate(&at)?;
            layer.units().map_err(|e| schema(at, e.to_string()))?;
        }
        Ok(())
    }

    /// Every unit in execution order, with the row it came from.
    pub fn units(&self) -> Result<Vec<(usize, Unit)>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let units = layer.units()?;
            for _ in 0..layer.repeat {
                out.extend(units.iter().cloned().map(|u| (i, u)));
            }
        }
        Ok(out)
    }
}
