//! The JSON network configuration shared by the trainer, the cost model and
//! the simulator, plus the shipped presets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::cost::ProtocolParams;
use crate::error::{Error, Result};
use crate::tensor::kernels::window_output_extent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerConfig {
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
    },
    Avgpool {
        name: String,
        kernel: usize,
        stride: usize,
    },
    /// A ReLU-bearing layer; its variant is picked per network variant.
    Activation { name: String },
    Dropout { name: String, rate: f64 },
}

fn one() -> usize {
    1
}

impl LayerConfig {
    pub fn name(&self) -> &str {
        match self {
            LayerConfig::Conv { name, .. }
            | LayerConfig::Linear { name, .. }
            | LayerConfig::Avgpool { name, .. }
            | LayerConfig::Activation { name }
            | LayerConfig::Dropout { name, .. } => name,
        }
    }
}

/// Where a gated activation gets its groups from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GroupSource {
    /// Non-overlapping `k x k` patches.
    Uniform(usize),
    /// Windowed agglomerative clustering; `file` holds the grouping spec
    /// written by the `cluster` command, relative to the config file.
    Clustered {
        window: usize,
        k: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        file: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// Trainable weights kept secret-shared at inference.
    #[default]
    LearnedPrivate,
    /// Trainable weights published with the architecture.
    LearnedPublic,
    /// The middle activation of each group decides for the whole group.
    Middle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub p_keep: f64,
    #[serde(default)]
    pub at_inference: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GreluConfig {
    pub groups: GroupSource,
    #[serde(default)]
    pub gate: GateKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseConfig>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ActivationVariant {
    #[default]
    Relu,
    Grelu(GreluConfig),
}

/// Activation layer name -> variant. Unlisted layers keep standard ReLU.
pub type Variant = BTreeMap<String, ActivationVariant>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Gaussian blobs around per-class prototype images, generated in memory.
    Synthetic { train: usize, test: usize, noise: f64, seed: u64 },
    /// `label,pixel0,pixel1,...` rows with pixels in `[0, 1]`.
    Csv { train: String, test: String },
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
    },
    Cifar { train: Vec<String>, test: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Reuse matching parameters from an existing checkpoint.
    #[default]
    Warm,
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
    pub max_profile_samples: usize,
    pub init: InitMode,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 30,
            temperature: 1.0,
            max_profile_samples: 10_000,
            init: InitMode::Warm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub ring_bits: u32,
    pub log_p: u32,
    pub scale_bits: u32,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            ring_bits: 64,
            log_p: 8,
            scale_bits: 13,
        }
    }
}

impl ProtocolConfig {
    pub fn params(&self) -> ProtocolParams {
        ProtocolParams {
            ring_bits: self.ring_bits,
            log_p: self.log_p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub name: String,
    pub input: InputShape,
    pub classes: usize,
    pub layers: Vec<LayerConfig>,
    #[serde(default)]
    pub variants: BTreeMap<String, Variant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub seed: u64,
}

/// Activation tensor shape between layers (batch axis excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ActShape {
    Map { channels: usize, height: usize, width: usize },
    Flat(usize),
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match *self {
            ActShape::Map { channels, height, width } => channels * height * width,
            ActShape::Flat(n) => n,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Map { channels, height, width } => vec![channels, height, width],
            ActShape::Flat(n) => vec![n],
        }
    }
}

impl std::fmt::Display for ActShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ActShape::Map { channels, height, width } => write!(f, "{height}x{width}x{channels}"),
            ActShape::Flat(n) => write!(f, "{n}"),
        }
    }
}

/// A layer with its variant chosen and shapes resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedLayer {
    pub config: LayerConfig,
    pub activation: Option<ActivationVariant>,
    pub input: ActShape,
    pub output: ActShape,
}

impl ResolvedLayer {
    pub fn name(&self) -> &str {
        self.config.name()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedNetwork {
    pub name: String,
    pub variant: String,
    pub input: InputShape,
    pub classes: usize,
    pub layers: Vec<ResolvedLayer>,
    pub protocol: ProtocolConfig,
    /// Directory that relative file references resolve against.
    pub base_dir: Option<PathBuf>,
}

impl ResolvedNetwork {
    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name() == name)
            .ok_or_else(|| Error::config(format!("no layer named `{name}`")))
    }

    pub fn resolve_path(&self, rel: &str) -> PathBuf {
        match &self.base_dir {
            Some(dir) => dir.join(rel),
            None => PathBuf::from(rel),
        }
    }
}

impl NetworkConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: NetworkConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// JSON Schema of the config format, as shipped in `presets/schema.json`.
    pub fn json_schema() -> String {
        let mut text = serde_json::to_string_pretty(&schemars::schema_for!(NetworkConfig)).expect("schema serializes");
        text.push('\n');
        text
    }

    pub fn variant_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.variants.keys().cloned().collect();
        if !self.variants.contains_key("original") {
            names.insert(0, "original".into());
        }
        names
    }

    /// Checks layer names, chain consistency and every declared variant.
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.name()) {
                return Err(Error::config(format!("duplicate layer name `{}`", l.name())));
            }
        }
        if self.protocol.ring_bits < 8 || self.protocol.ring_bits > 64 || !self.protocol.ring_bits.is_multiple_of(8) {
            return Err(Error::config(format!(
                "ring_bits must be a multiple of 8 in [8, 64], got {}",
                self.protocol.ring_bits
            )));
        }
        if self.protocol.log_p == 0 {
            return Err(Error::config("log_p must be positive"));
        }
        if self.protocol.scale_bits == 0 || self.protocol.scale_bits + 2 >= self.protocol.ring_bits {
            return Err(Error::config("scale_bits must leave room for an integer part"));
        }
        for name in self.variant_names() {
            self.resolve(&name)?;
        }
        Ok(())
    }

    pub fn variant(&self, name: &str) -> Result<Variant> {
        match self.variants.get(name) {
            Some(v) => Ok(v.clone()),
            None if name == "original" => Ok(Variant::new()),
            None => Err(Error::config(format!(
                "unknown variant `{name}` (available: {})",
                self.variant_names().join(", ")
            ))),
        }
    }

    /// Resolves shapes for `variant`, checking that every layer's declared
    /// input matches its predecessor's output.
    pub fn resolve(&self, variant: &str) -> Result<ResolvedNetwork> {
        let chosen = self.variant(variant)?;
        let activation_names: Vec<&str> = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerConfig::Activation { .. }))
            .map(LayerConfig::name)
            .collect();
        if let Some(bad) = chosen.keys().find(|k| !activation_names.contains(&k.as_str())) {
            return Err(Error::config(format!(
                "variant `{variant}` refers to `{bad}`, which is not an activation layer"
            )));
        }
        let mut shape = ActShape::Map {
            channels: self.input.channels,
            height: self.input.height,
            width: self.input.width,
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let ctx = |msg: String| Error::config(format!("layer `{}`: {msg}", l.name()));
            let (output, activation) = match l {
                LayerConfig::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let ActShape::Map { channels, height, width } = shape else {
                        return Err(ctx(format!("convolution needs a feature map, got {shape}")));
                    };
                    if channels != *in_channels {
                        return Err(ctx(format!("declares {in_channels} input channels but receives {channels}")));
                    }
                    if *out_channels == 0 {
                        return Err(ctx("needs at least one output channel".into()));
                    }
                    let oh = window_output_extent(height, *kernel, *stride, *padding).map_err(|e| ctx(e.to_string()))?;
                    let ow = window_output_extent(width, *kernel, *stride, *padding).map_err(|e| ctx(e.to_string()))?;
                    (
                        ActShape::Map {
                            channels: *out_channels,
                            height: oh,
                            width: ow,
                        },
                        None,
                    )
                }
                LayerConfig::Linear {
                    in_features,
                    out_features,
                    ..
                } => {
                    if shape.numel() != *in_features {
                        return Err(ctx(format!("declares {in_features} input features but receives {shape}")));
                    }
                    (ActShape::Flat(*out_features), None)
                }
                LayerConfig::Avgpool { kernel, stride, .. } => {
                    let ActShape::Map { channels, height, width } = shape else {
                        return Err(ctx(format!("pooling needs a feature map, got {shape}")));
                    };
                    if *kernel > height || *kernel > width {
                        return Err(ctx(format!("window {kernel} exceeds {height}x{width}")));
                    }
                    let oh = window_output_extent(height, *kernel, *stride, 0).map_err(|e| ctx(e.to_string()))?;
                    let ow = window_output_extent(width, *kernel, *stride, 0).map_err(|e| ctx(e.to_string()))?;
                    (
                        ActShape::Map {
                            channels,
                            height: oh,
                            width: ow,
                        },
                        None,
                    )
                }
                LayerConfig::Dropout { rate, .. } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(ctx(format!("dropout rate {rate} outside [0, 1)")));
                    }
                    (shape, None)
                }
                LayerConfig::Activation { name } => {
                    let act = chosen.get(name).cloned().unwrap_or_default();
                    if let ActivationVariant::Grelu(g) = &act {
                        check_grelu(g, shape).map_err(|e| ctx(e.to_string()))?;
                    }
                    (shape, Some(act))
                }
            };
            layers.push(ResolvedLayer {
                config: l.clone(),
                activation,
                input: shape,
                output,
            });
            shape = output;
        }
        if shape.numel() != self.classes {
            return Err(Error::config(format!(
                "network ends with {shape} outputs but declares {} classes",
                self.classes
            )));
        }
        Ok(ResolvedNetwork {
            name: self.name.clone(),
            variant: variant.to_string(),
            input: self.input,
            classes: self.classes,
            layers,
            protocol: self.protocol,
            base_dir: None,
        })
    }
}

fn check_grelu(g: &GreluConfig, shape: ActShape) -> Result<()> {
    let ActShape::Map { height, width, .. } = shape else {
        return Err(Error::config("shared gates need a feature map input"));
    };
    match &g.groups {
        GroupSource::Uniform(k) if *k < 1 => return Err(Error::config("patch size must be at least 1")),
        GroupSource::Clustered { window, k, .. } => {
            if *window < 1 || *k < 1 || *k > window * window {
                return Err(Error::config(format!("invalid clustering ({window}x{window}, {k})")));
            }
            if g.gate == GateKind::Middle {
                return Err(Error::config("clustered groups have no middle activation; use a learned gate"));
            }
        }
        _ => {}
    }
    if let Some(n) = &g.noise {
        if !(n.p_keep > 0.0 && n.p_keep <= 1.0) {
            return Err(Error::config(format!("p_keep {} outside (0, 1]", n.p_keep)));
        }
    }
    let _ = (height, width);
    Ok(())
}

/// A config together with the directory it was loaded from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: NetworkConfig,
    pub base_dir: Option<PathBuf>,
}

impl LoadedConfig {
    /// Loads a config file, or a shipped preset when `source` names one
    /// (`cifar10`, `svhn`, `fashion`, `desk`) and no such file exists.
    pub fn load(source: &str) -> Result<Self> {
        let path = Path::new(source);
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            return Ok(LoadedConfig {
                config: NetworkConfig::from_json(&text)?,
                base_dir: path.parent().map(Path::to_path_buf),
            });
        }
        let name = source.trim_end_matches(".json");
        match presets::get(name) {
            Some(text) => Ok(LoadedConfig {
                config: NetworkConfig::from_json(text)?,
                base_dir: None,
            }),
            None => Err(Error::config(format!("`{source}` is neither a file nor a preset"))),
        }
    }

    pub fn resolve(&self, variant: &str) -> Result<ResolvedNetwork> {
        let mut net = self.config.resolve(variant)?;
        net.base_dir = self.base_dir.clone();
        Ok(net)
    }
}

pub mod presets {
    pub const CIFAR10: &str = include_str!("../presets/cifar10.json");
    pub const SVHN: &str = include_str!("../presets/svhn.json");
    pub const FASHION: &str = include_str!("../presets/fashion.json");
    pub const DESK: &str = include_str!("../presets/desk.json");

    pub const NAMES: [&str; 4] = ["cifar10", "svhn", "fashion", "desk"];

    pub fn get(name: &str) -> Option<&'static str> {
        match name {
            "cifar10" => Some(CIFAR10),
            "svhn" => Some(SVHN),
            "fashion" => Some(FASHION),
            "desk" => Some(DESK),
            _ => None,
        }
    }
}
