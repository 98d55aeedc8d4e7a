//! Execution plans and the layer-by-layer forward pass.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use crate::clock::Clock;
use crate::error::{Error, Result};
use crate::fixed::{rescale, saturate_i16, QFormat};
use crate::fmap::Fmap;
use crate::graph::topology::{ConvUnit, LayerDims, LayerKind, NetworkDef};
use crate::graph::weights::{ConvWeights, WeightStore};
use crate::quantizer::QuantConvParams;
use crate::reference::{
    avgpool_global_ref, concat_channels, conv2d_quant_ref, conv2d_ref, fire_quant_ref, maxpool_ref, softmax_ref,
    FloatLayerParams,
};
use crate::sqj::{SqjConfig, SqjEngine, SqjStats};

/// Global execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Every layer in 32-bit float.
    Float,
    /// Quantized, with Conv and Fire layers on the naive integer reference.
    QuantNaive,
    /// Quantized, with Conv and Fire layers on the accelerator model.
    QuantSqj,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(Mode::Float),
            "quant-naive" => Ok(Mode::QuantNaive),
            "quant-sqj" => Ok(Mode::QuantSqj),
            other => Err(Error::Invalid(format!("unknown mode {other:?} (float, quant-naive, quant-sqj)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Float => "float",
            Mode::QuantNaive => "quant-naive",
            Mode::QuantSqj => "quant-sqj",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backend {
    ReferenceFloat,
    ReferenceQuant,
    Sqj,
}

/// Backend assignment per layer. In `QuantSqj` mode exactly the Conv and
/// Fire layers run on the accelerator (the first layer on its dedicated
/// unit); pooling and softmax stay on the reference path.
#[derive(Debug, Clone)]
pub struct ExecPlan {
    mode: Mode,
    backends: Vec<Backend>,
    engine: SqjEngine,
}

impl ExecPlan {
    pub fn new(net: &NetworkDef, mode: Mode) -> Self {
        Self::with_config(net, mode, SqjConfig::default())
    }

    pub fn with_config(net: &NetworkDef, mode: Mode, cfg: SqjConfig) -> Self {
        let backends = net
            .layers()
            .iter()
            .map(|l| match (mode, l.kind()) {
                (Mode::Float, _) => Backend::ReferenceFloat,
                (_, LayerKind::Avgpool | LayerKind::Softmax) => Backend::ReferenceFloat,
                (_, LayerKind::Maxpool) => Backend::ReferenceQuant,
                (Mode::QuantNaive, _) => Backend::ReferenceQuant,
                (Mode::QuantSqj, _) => Backend::Sqj,
            })
            .collect();
        Self { mode, backends, engine: SqjEngine::new(cfg) }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn backends(&self) -> &[Backend] {
        &self.backends
    }

    pub fn engine(&self) -> &SqjEngine {
        &self.engine
    }
}

/// Network input, either float or already quantized in a known format.
#[derive(Debug, Clone, Copy)]
pub enum NetInput<'a> {
    Float(&'a Fmap<f32>),
    Quant(&'a Fmap<i16>, QFormat),
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub probs: Vec<f64>,
    /// Wall time per layer, present when a clock was supplied.
    pub per_layer: Option<Vec<Duration>>,
    /// Accelerator counters per layer; zero for layers it did not run.
    pub sqj_stats: Vec<SqjStats>,
}

impl ForwardOutput {
    pub fn per_layer_ms(&self) -> Option<Vec<f64>> {
        self.per_layer.as_ref().map(|v| v.iter().map(|d| d.as_secs_f64() * 1e3).collect())
    }
}

enum Act {
    Float(Fmap<f32>),
    Quant(Fmap<i16>, QFormat),
    Probs(Vec<f64>),
}

impl Act {
    fn into_float(self) -> Result<Fmap<f32>> {
        match self {
            Act::Float(f) => Ok(f),
            Act::Quant(q, fmt) => Ok(q.dequantize(fmt)),
            Act::Probs(_) => Err(Error::Topology { layer: 0, msg: "layer after softmax".into() }),
        }
    }

    fn into_quant(self, want: QFormat) -> Result<Fmap<i16>> {
        match self {
            Act::Float(f) => Ok(f.quantize(want)),
            Act::Quant(q, fmt) if fmt == want => Ok(q),
            Act::Quant(q, fmt) => {
                let (from, to) = (fmt.frac_bits(), want.frac_bits());
                Ok(q.map(|&r| saturate_i16(rescale(r as i64, from, to))))
            }
            Act::Probs(_) => Err(Error::Topology { layer: 0, msg: "layer after softmax".into() }),
        }
    }
}

fn float_params<'a>(cw: &'a ConvWeights, name: &str, unit: ConvUnit) -> Result<&'a FloatLayerParams> {
    cw.float.as_ref().ok_or_else(|| {
        Error::Weights(format!("{name}{} has no float parameters; float execution needs them", unit.suffix()))
    })
}

fn quant_params<'a>(cw: &'a ConvWeights, name: &str, unit: ConvUnit) -> Result<&'a QuantConvParams> {
    cw.quant.as_ref().ok_or_else(|| {
        Error::Weights(format!(
            "{name}{} has no quantized parameters; quantized execution needs them",
            unit.suffix()
        ))
    })
}

fn check_input(net: &NetworkDef, dims: (usize, usize, usize)) -> Result<()> {
    let s = net.input();
    if dims != (s.width, s.height, s.channels) {
        return Err(Error::Dimension(format!(
            "input is {}x{}x{}, network expects {s}",
            dims.0, dims.1, dims.2
        )));
    }
    Ok(())
}

/// Runs the network with the planned backend per layer and returns softmax
/// probabilities. With a clock, per-layer wall times are recorded.
pub fn forward(
    net: &NetworkDef,
    store: &WeightStore,
    plan: &ExecPlan,
    input: NetInput<'_>,
    clock: Option<&dyn Clock>,
) -> Result<ForwardOutput> {
    store.check_against(net)?;
    if plan.backends.len() != net.layers().len() {
        return Err(Error::Invalid("execution plan was built for a different network".into()));
    }
    let mut act = match input {
        NetInput::Float(f) => {
            check_input(net, f.dims())?;
            Act::Float(f.clone())
        }
        NetInput::Quant(q, fmt) => {
            check_input(net, q.dims())?;
            Act::Quant(q.clone(), fmt)
        }
    };
    let n = net.layers().len();
    let mut per_layer = clock.map(|_| Vec::with_capacity(n));
    let mut sqj_stats = vec![SqjStats::default(); n];
    let engine = plan.engine;

    for (i, (spec, lw)) in net.layers().iter().zip(&store.layers).enumerate() {
        let t0 = clock.map(|c| c.now());
        let backend = plan.backends[i];
        let name = spec.name.as_str();
        act = match (&spec.dims, backend) {
            (LayerDims::Conv(cd), Backend::ReferenceFloat) => {
                let p = float_params(&lw.units[0], name, ConvUnit::Conv)?;
                Act::Float(conv2d_ref(&act.into_float()?, p, cd.relu)?)
            }
            (LayerDims::Conv(cd), Backend::ReferenceQuant | Backend::Sqj) => {
                let p = quant_params(&lw.units[0], name, ConvUnit::Conv)?;
                let x = act.into_quant(p.qspec().input_fmt)?;
                let y = if backend == Backend::Sqj {
                    let (y, stats) = if i == 0 {
                        engine.conv_first_layer(&x, p, cd.relu)?
                    } else {
                        engine.conv_sqj(&x, p, cd.relu)?
                    };
                    sqj_stats[i] = stats;
                    y
                } else {
                    conv2d_quant_ref(&x, p, cd.relu)?
                };
                Act::Quant(y, p.qspec().output_fmt)
            }
            (LayerDims::Fire(_), Backend::ReferenceFloat) => {
                let sq = float_params(&lw.units[0], name, ConvUnit::Squeeze)?;
                let e1 = float_params(&lw.units[1], name, ConvUnit::Expand1)?;
                let e3 = float_params(&lw.units[2], name, ConvUnit::Expand3)?;
                Act::Float(crate::reference::fire_ref(&act.into_float()?, sq, e1, e3)?)
            }
            (LayerDims::Fire(_), Backend::ReferenceQuant | Backend::Sqj) => {
                let sq = quant_params(&lw.units[0], name, ConvUnit::Squeeze)?;
                let e1 = quant_params(&lw.units[1], name, ConvUnit::Expand1)?;
                let e3 = quant_params(&lw.units[2], name, ConvUnit::Expand3)?;
                if e1.qspec().output_fmt != e3.qspec().output_fmt {
                    return Err(Error::Weights(format!("{name}: expand layers disagree on the output format")));
                }
                let x = act.into_quant(sq.qspec().input_fmt)?;
                let y = if backend == Backend::Sqj {
                    let (y, stats) = engine.fire(&x, sq, e1, e3)?;
                    sqj_stats[i] = stats;
                    y
                } else {
                    fire_quant_ref(&x, sq, e1, e3)?
                };
                Act::Quant(y, e1.qspec().output_fmt)
            }
            (LayerDims::Maxpool { kernel, stride }, _) => match act {
                Act::Quant(q, fmt) if backend != Backend::ReferenceFloat => {
                    Act::Quant(maxpool_ref(&q, *kernel, *stride)?, fmt)
                }
                other => Act::Float(maxpool_ref(&other.into_float()?, *kernel, *stride)?),
            },
            (LayerDims::Avgpool, _) => Act::Float(avgpool_global_ref(&act.into_float()?)),
            (LayerDims::Softmax, _) => {
                let logits: Vec<f64> = act.into_float()?.data().iter().map(|&v| v as f64).collect();
                Act::Probs(softmax_ref(&logits))
            }
        };
        if let (Some(c), Some(t0), Some(v)) = (clock, t0, per_layer.as_mut()) {
            v.push(c.now().saturating_sub(t0));
        }
    }
    match act {
        Act::Probs(probs) => Ok(ForwardOutput { probs, per_layer, sqj_stats }),
        _ => Err(Error::Topology { layer: n, msg: "network does not end in softmax".into() }),
    }
}

/// Callback for [`forward_float_observed`]: `(layer_position, unit, input,
/// output)`. `unit` is `None` for the whole-layer event and `Some` for each
/// convolution inside it.
pub type FloatObserver<'a> = dyn FnMut(usize, Option<ConvUnit>, &Fmap<f32>, &Fmap<f32>) + 'a;

/// Float forward pass reporting every intermediate feature map.
pub fn forward_float_observed(
    net: &NetworkDef,
    store: &WeightStore,
    input: &Fmap<f32>,
    observer: &mut FloatObserver<'_>,
) -> Result<Vec<f64>> {
    store.check_against(net)?;
    check_input(net, input.dims())?;
    let mut x = input.clone();
    for (i, (spec, lw)) in net.layers().iter().zip(&store.layers).enumerate() {
        let name = spec.name.as_str();
        let y = match &spec.dims {
            LayerDims::Conv(cd) => {
                let y = conv2d_ref(&x, float_params(&lw.units[0], name, ConvUnit::Conv)?, cd.relu)?;
                observer(i, Some(ConvUnit::Conv), &x, &y);
                y
            }
            LayerDims::Fire(_) => {
                let sq = float_params(&lw.units[0], name, ConvUnit::Squeeze)?;
                let e1 = float_params(&lw.units[1], name, ConvUnit::Expand1)?;
                let e3 = float_params(&lw.units[2], name, ConvUnit::Expand3)?;
                let s = conv2d_ref(&x, sq, true)?;
                observer(i, Some(ConvUnit::Squeeze), &x, &s);
                let a = conv2d_ref(&s, e1, true)?;
                observer(i, Some(ConvUnit::Expand1), &s, &a);
                let b = conv2d_ref(&s, e3, true)?;
                observer(i, Some(ConvUnit::Expand3), &s, &b);
                concat_channels(&a, &b)?
            }
            LayerDims::Maxpool { kernel, stride } => maxpool_ref(&x, *kernel, *stride)?,
            LayerDims::Avgpool => avgpool_global_ref(&x),
            LayerDims::Softmax => {
                let logits: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
                return Ok(softmax_ref(&logits));
            }
        };
        observer(i, None, &x, &y);
        x = y;
    }
    Err(Error::Topology { layer: net.layers().len(), msg: "network does not end in softmax".into() })
}
