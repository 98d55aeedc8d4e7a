//! Network topology: layer specs, shape composition, and the line-oriented
//! topology config format.
//!
//! ```text
//! input 227x227x3
//! 1 conv conv1 in=227x227x3 out=64 kernel=3 stride=2 pad=0 relu=1
//! 2 maxpool pool1 in=113x113x64 kernel=3 stride=2
//! 3 fire fire2 in=56x56x64 squeeze=16 expand1=64 expand3=64
//! ```
//!
//! Every layer declares its input shape; the parser checks it against the
//! predecessor's computed output so a mis-composed file is rejected at the
//! offending layer.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::reference::conv_output_dims;

/// The SqueezeNet v1.1 topology shipped with the crate.
pub const SQUEEZENET_V1_1: &str = include_str!("../../assets/squeezenet_v1_1.topology");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels }
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.channels)
    }
}

impl FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split('x').collect();
        if parts.len() != 3 {
            return Err(format!("shape {s:?} is not WxHxC"));
        }
        let n = |p: &str| p.parse::<usize>().map_err(|_| format!("bad number {p:?} in shape {s:?}"));
        Ok(Shape::new(n(parts[0])?, n(parts[1])?, n(parts[2])?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Maxpool,
    Fire,
    Avgpool,
    Softmax,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        match self {
            LayerKind::Conv => 0,
            LayerKind::Maxpool => 1,
            LayerKind::Fire => 2,
            LayerKind::Avgpool => 3,
            LayerKind::Softmax => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => LayerKind::Conv,
            1 => LayerKind::Maxpool,
            2 => LayerKind::Fire,
            3 => LayerKind::Avgpool,
            4 => LayerKind::Softmax,
            _ => return None,
        })
    }

    /// Capitalised name as used in per-layer report rows ("Conv", "Fire", ...).
    pub fn title(self) -> &'static str {
        match self {
            LayerKind::Conv => "Conv",
            LayerKind::Maxpool => "Maxpool",
            LayerKind::Fire => "Fire",
            LayerKind::Avgpool => "Avgpool",
            LayerKind::Softmax => "Softmax",
        }
    }

    pub fn from_title(title: &str) -> Option<Self> {
        [LayerKind::Conv, LayerKind::Maxpool, LayerKind::Fire, LayerKind::Avgpool, LayerKind::Softmax]
            .into_iter()
            .find(|k| k.title() == title)
    }

    pub fn is_conv_or_fire(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Fire)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvDims {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FireDims {
    pub in_channels: usize,
    pub squeeze: usize,
    pub expand1: usize,
    pub expand3: usize,
}

impl FireDims {
    pub fn out_channels(&self) -> usize {
        self.expand1 + self.expand3
    }

    pub fn squeeze_conv(&self) -> ConvDims {
        ConvDims {
            in_channels: self.in_channels,
            out_channels: self.squeeze,
            kernel: 1,
            stride: 1,
            pad: 0,
            relu: true,
        }
    }

    pub fn expand1_conv(&self) -> ConvDims {
        ConvDims { in_channels: self.squeeze, out_channels: self.expand1, kernel: 1, stride: 1, pad: 0, relu: true }
    }

    pub fn expand3_conv(&self) -> ConvDims {
        ConvDims { in_channels: self.squeeze, out_channels: self.expand3, kernel: 3, stride: 1, pad: 1, relu: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerDims {
    Conv(ConvDims),
    Maxpool { kernel: usize, stride: usize },
    Fire(FireDims),
    Avgpool,
    Softmax,
}

impl LayerDims {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerDims::Conv(_) => LayerKind::Conv,
            LayerDims::Maxpool { .. } => LayerKind::Maxpool,
            LayerDims::Fire(_) => LayerKind::Fire,
            LayerDims::Avgpool => LayerKind::Avgpool,
            LayerDims::Softmax => LayerKind::Softmax,
        }
    }

    /// Convolutions carried by the layer, in storage order: a plain conv has
    /// one, a Fire module squeeze, expand1 and expand3.
    pub fn conv_units(&self) -> Vec<(ConvUnit, ConvDims)> {
        match self {
            LayerDims::Conv(c) => vec![(ConvUnit::Conv, *c)],
            LayerDims::Fire(f) => vec![
                (ConvUnit::Squeeze, f.squeeze_conv()),
                (ConvUnit::Expand1, f.expand1_conv()),
                (ConvUnit::Expand3, f.expand3_conv()),
            ],
            _ => Vec::new(),
        }
    }

    /// Output shape for the given input, validating channel counts.
    pub fn output_shape(&self, input: Shape) -> std::result::Result<Shape, String> {
        let check_in = |c: usize| {
            if c == input.channels {
                Ok(())
            } else {
                Err(format!("declares {c} input channels but receives {}", input.channels))
            }
        };
        match self {
            LayerDims::Conv(c) => {
                check_in(c.in_channels)?;
                let (w, h) = conv_output_dims(input.width, input.height, c.kernel, c.stride, c.pad)
                    .map_err(|e| e.to_string())?;
                Ok(Shape::new(w, h, c.out_channels))
            }
            LayerDims::Maxpool { kernel, stride } => {
                if *kernel == 0 || *stride == 0 || *kernel > input.width || *kernel > input.height {
                    return Err(format!("pool kernel {kernel}/stride {stride} invalid for {input}"));
                }
                Ok(Shape::new(
                    (input.width - kernel) / stride + 1,
                    (input.height - kernel) / stride + 1,
                    input.channels,
                ))
            }
            LayerDims::Fire(f) => {
                check_in(f.in_channels)?;
                Ok(Shape::new(input.width, input.height, f.out_channels()))
            }
            LayerDims::Avgpool => Ok(Shape::new(1, 1, input.channels)),
            LayerDims::Softmax => {
                if input.width != 1 || input.height != 1 {
                    return Err(format!("softmax needs a 1x1xC input, got {input}"));
                }
                Ok(input)
            }
        }
    }
}

/// Which convolution of a layer a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConvUnit {
    Conv,
    Squeeze,
    Expand1,
    Expand3,
}

impl ConvUnit {
    pub fn suffix(self) -> &'static str {
        match self {
            ConvUnit::Conv => "",
            ConvUnit::Squeeze => "/squeeze1x1",
            ConvUnit::Expand1 => "/expand1x1",
            ConvUnit::Expand3 => "/expand3x3",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    /// 1-based position in the network.
    pub index: usize,
    pub name: String,
    pub dims: LayerDims,
    pub input: Shape,
    pub output: Shape,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        self.dims.kind()
    }

    /// Row label such as `"1:Conv"` or `"15:Softmax"`.
    pub fn label(&self) -> String {
        format!("{}:{}", self.index, self.kind().title())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkDef {
    input: Shape,
    layers: Vec<LayerSpec>,
}

/// Layer order of SqueezeNet v1.1 as benchmarked per layer.
pub const V11_ORDER: [LayerKind; 15] = [
    LayerKind::Conv,
    LayerKind::Maxpool,
    LayerKind::Fire,
    LayerKind::Fire,
    LayerKind::Maxpool,
    LayerKind::Fire,
    LayerKind::Fire,
    LayerKind::Maxpool,
    LayerKind::Fire,
    LayerKind::Fire,
    LayerKind::Fire,
    LayerKind::Fire,
    LayerKind::Conv,
    LayerKind::Avgpool,
    LayerKind::Softmax,
];

pub const V11_CLASSES: usize = 1000;

impl NetworkDef {
    /// Builds a network from `(name, dims)` pairs, computing shapes.
    pub fn from_layers(input: Shape, layers: Vec<(String, LayerDims)>) -> Result<Self> {
        let mut shape = input;
        let mut specs = Vec::with_capacity(layers.len());
        for (i, (name, dims)) in layers.into_iter().enumerate() {
            let output = dims
                .output_shape(shape)
                .map_err(|msg| Error::Topology { layer: i + 1, msg })?;
            specs.push(LayerSpec { index: i + 1, name, dims, input: shape, output });
            shape = output;
        }
        let net = Self { input, layers: specs };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::Topology { layer: 0, msg: "network has no layers".into() });
        };
        if last.kind() != LayerKind::Softmax {
            return Err(Error::Topology { layer: last.index, msg: "last layer must be softmax".into() });
        }
        for l in &self.layers[..self.layers.len() - 1] {
            if l.kind() == LayerKind::Softmax {
                return Err(Error::Topology { layer: l.index, msg: "softmax must be the last layer".into() });
            }
        }
        if self.input.channels == 0 || self.input.width == 0 || self.input.height == 0 {
            return Err(Error::Topology { layer: 0, msg: "empty input geometry".into() });
        }
        Ok(())
    }

    /// Parses the line-oriented topology format. Blank lines and `#`
    /// comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut input: Option<Shape> = None;
        let mut layers = Vec::new();
        let mut shape = Shape::new(0, 0, 0);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks[0] == "input" {
                let s = toks
                    .get(1)
                    .ok_or_else(|| Error::Topology { layer: 0, msg: format!("line {}: missing input shape", lineno + 1) })?
                    .parse::<Shape>()
                    .map_err(|msg| Error::Topology { layer: 0, msg })?;
                input = Some(s);
                shape = s;
                continue;
            }
            let expected_index = layers.len() + 1;
            let err = |msg: String| Error::Topology { layer: expected_index, msg };
            let Some(_) = input else {
                return Err(err("layer listed before the input line".into()));
            };
            if toks.len() < 3 {
                return Err(err(format!("line {}: expected `index kind name key=value...`", lineno + 1)));
            }
            let index: usize = toks[0].parse().map_err(|_| err(format!("bad layer index {:?}", toks[0])))?;
            if index != expected_index {
                return Err(err(format!("layer index {index} out of sequence")));
            }
            let name = toks[2].to_string();
            let mut kv = HashMap::new();
            for t in &toks[3..] {
                let (k, v) = t.split_once('=').ok_or_else(|| err(format!("expected key=value, got {t:?}")))?;
                kv.insert(k, v);
            }
            let get = |k: &str| -> Result<usize> {
                kv.get(k)
                    .ok_or_else(|| err(format!("missing `{k}`")))?
                    .parse::<usize>()
                    .map_err(|_| err(format!("`{k}` is not a number")))
            };
            let declared: Shape = kv
                .get("in")
                .ok_or_else(|| err("missing `in=WxHxC`".into()))?
                .parse()
                .map_err(err)?;
            if declared != shape {
                return Err(err(format!("declares input {declared} but the previous layer produces {shape}")));
            }
            let dims = match toks[1] {
                "conv" => LayerDims::Conv(ConvDims {
                    in_channels: declared.channels,
                    out_channels: get("out")?,
                    kernel: get("kernel")?,
                    stride: get("stride")?,
                    pad: get("pad")?,
                    relu: get("relu")? != 0,
                }),
                "maxpool" => LayerDims::Maxpool { kernel: get("kernel")?, stride: get("stride")? },
                "fire" => LayerDims::Fire(FireDims {
                    in_channels: declared.channels,
                    squeeze: get("squeeze")?,
                    expand1: get("expand1")?,
                    expand3: get("expand3")?,
                }),
                "avgpool" => LayerDims::Avgpool,
                "softmax" => LayerDims::Softmax,
                other => return Err(err(format!("unknown layer kind {other:?}"))),
            };
            shape = dims.output_shape(shape).map_err(err)?;
            layers.push((name, dims));
        }
        let input = input.ok_or_else(|| Error::Topology { layer: 0, msg: "missing `input` line".into() })?;
        Self::from_layers(input, layers)
    }

    pub fn input(&self) -> Shape {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map(|l| l.output.channels).unwrap_or(0)
    }

    /// Serialises back to the topology text format.
    pub fn to_config(&self) -> String {
        let mut s = format!("input {}\n", self.input);
        for l in &self.layers {
            let body = match l.dims {
                LayerDims::Conv(c) => format!(
                    "conv {} in={} out={} kernel={} stride={} pad={} relu={}",
                    l.name, l.input, c.out_channels, c.kernel, c.stride, c.pad, c.relu as u8
                ),
                LayerDims::Maxpool { kernel, stride } => {
                    format!("maxpool {} in={} kernel={kernel} stride={stride}", l.name, l.input)
                }
                LayerDims::Fire(f) => format!(
                    "fire {} in={} squeeze={} expand1={} expand3={}",
                    l.name, l.input, f.squeeze, f.expand1, f.expand3
                ),
                LayerDims::Avgpool => format!("avgpool {} in={}", l.name, l.input),
                LayerDims::Softmax => format!("softmax {} in={}", l.name, l.input),
            };
            s.push_str(&format!("{} {body}\n", l.index));
        }
        s
    }
}

/// Parses a topology and checks it is the 15-layer SqueezeNet v1.1 shape:
/// the fixed Conv/Maxpool/Fire/.../Softmax order and 1000 classes.
pub fn build_v11_topology(config: &str) -> Result<NetworkDef> {
    let net = NetworkDef::parse(config)?;
    if net.layers.len() != V11_ORDER.len() {
        return Err(Error::Topology {
            layer: net.layers.len(),
            msg: format!("expected {} layers, got {}", V11_ORDER.len(), net.layers.len()),
        });
    }
    for (l, want) in net.layers.iter().zip(V11_ORDER) {
        if l.kind() != want {
            return Err(Error::Topology {
                layer: l.index,
                msg: format!("expected {}, got {}", want.title(), l.kind().title()),
            });
        }
    }
    if net.classes() != V11_CLASSES {
        return Err(Error::Topology {
            layer: net.layers.len(),
            msg: format!("expected {V11_CLASSES} classes, got {}", net.classes()),
        });
    }
    Ok(net)
}

/// The shipped SqueezeNet v1.1 network.
pub fn squeezenet_v1_1() -> NetworkDef {
    build_v11_topology(SQUEEZENET_V1_1).expect("shipped topology is valid")
}
