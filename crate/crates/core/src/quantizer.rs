//! Dynamic fixed-point quantization of a float network.
//!
//! Range statistics are max-absolute values collected by running the float
//! network over calibration samples. Each tensor group gets the largest
//! fraction length that keeps its maximum unsaturated: parameters at 8 bits,
//! feature maps at 16 bits. No fine-tuning is performed.
//!
//! Feature-map formats are per edge of the graph: a layer's input format is
//! its producer's output format, max pooling passes its format through, and
//! the two expand convolutions of a Fire module share one output format so
//! their concatenation is a single fmap.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fixed::{rescale, QFormat, MAX_FRAC_BITS, MIN_FRAC_BITS};
use crate::fmap::{Fmap, QTensor};
use crate::graph::forward::{forward, forward_float_observed, ExecPlan, Mode, NetInput};
use crate::graph::topology::{ConvUnit, LayerDims, NetworkDef};
use crate::graph::top_k;
use crate::graph::weights::{ConvWeights, LayerWeights, WeightStore};
use crate::reference::FloatLayerParams;

/// Formats of one quantized convolution: 8-bit weights and bias, 16-bit
/// input and output feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerQSpec {
    pub weight_fmt: QFormat,
    pub bias_fmt: QFormat,
    pub input_fmt: QFormat,
    pub output_fmt: QFormat,
}

impl LayerQSpec {
    pub fn new(weight_fmt: QFormat, bias_fmt: QFormat, input_fmt: QFormat, output_fmt: QFormat) -> Result<Self> {
        let widths = [weight_fmt, bias_fmt, input_fmt, output_fmt].map(|f| f.total_bits());
        if widths != [8, 8, 16, 16] {
            return Err(Error::Format(format!(
                "layer formats must be 8/8/16/16 bits (weight/bias/input/output), got {widths:?}"
            )));
        }
        Ok(Self { weight_fmt, bias_fmt, input_fmt, output_fmt })
    }

    /// Fraction length of the 32-bit accumulator: products of a weight and
    /// an activation land at `weight_frac + input_frac`.
    pub fn acc_frac(&self) -> i32 {
        self.weight_fmt.frac_bits() + self.input_fmt.frac_bits()
    }

    /// The four fraction lengths, weight/bias/input/output.
    pub fn frac_bits(&self) -> [i32; 4] {
        [self.weight_fmt, self.bias_fmt, self.input_fmt, self.output_fmt].map(|f| f.frac_bits())
    }

    pub fn from_frac_bits(frac: [i32; 4]) -> Result<Self> {
        Self::new(QFormat::q8(frac[0])?, QFormat::q8(frac[1])?, QFormat::q16(frac[2])?, QFormat::q16(frac[3])?)
    }
}

/// A quantized convolution ready for either integer backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantConvParams {
    weights: QTensor,
    bias: Vec<i8>,
    qspec: LayerQSpec,
    stride: usize,
    pad: usize,
}

impl QuantConvParams {
    pub fn new(weights: QTensor, bias: Vec<i8>, qspec: LayerQSpec, stride: usize, pad: usize) -> Result<Self> {
        if weights.format() != qspec.weight_fmt {
            return Err(Error::Format(format!(
                "weight tensor format {} differs from the layer's weight format {}",
                weights.format(),
                qspec.weight_fmt
            )));
        }
        if bias.len() != weights.out_channels() {
            return Err(Error::Dimension(format!(
                "bias length {} != out_channels {}",
                bias.len(),
                weights.out_channels()
            )));
        }
        if weights.kernel_h() != weights.kernel_w() {
            return Err(Error::Dimension("only square kernels are supported".into()));
        }
        if stride == 0 {
            return Err(Error::Dimension("stride must be at least 1".into()));
        }
        Ok(Self { weights, bias, qspec, stride, pad })
    }

    pub fn weights(&self) -> &QTensor {
        &self.weights
    }

    pub fn bias(&self) -> &[i8] {
        &self.bias
    }

    pub fn qspec(&self) -> &LayerQSpec {
        &self.qspec
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn kernel(&self) -> usize {
        self.weights.kernel_h()
    }

    /// Bias raws shifted to the accumulator scale. Fails if a shifted bias
    /// no longer fits 32 bits.
    pub fn aligned_bias(&self) -> Result<Vec<i32>> {
        let from = self.qspec.bias_fmt.frac_bits();
        let to = self.qspec.acc_frac();
        self.bias
            .iter()
            .map(|&b| {
                let v = rescale(b as i64, from, to);
                i32::try_from(v).map_err(|_| Error::AccumulatorOverflow(v))
            })
            .collect()
    }

    /// Dequantized float view of the same layer.
    pub fn dequantize(&self) -> FloatLayerParams {
        let wf = self.qspec.weight_fmt;
        let bf = self.qspec.bias_fmt;
        FloatLayerParams::new(
            self.weights.out_channels(),
            self.weights.in_channels(),
            self.kernel(),
            self.stride,
            self.pad,
            self.weights.data().iter().map(|&w| wf.to_real(w as i64) as f32).collect(),
            self.bias.iter().map(|&b| bf.to_real(b as i64) as f32).collect(),
        )
        .expect("shapes already validated")
    }
}

/// Largest fraction length at which `±max_abs` quantizes without
/// saturating. Zero range gets `total_bits - 1`; the result is clamped to
/// the supported fraction range.
pub fn choose_frac_bits(max_abs: f64, total_bits: u8) -> i32 {
    let max_abs = max_abs.abs();
    if max_abs == 0.0 || !max_abs.is_finite() {
        return if max_abs == 0.0 { total_bits as i32 - 1 } else { MIN_FRAC_BITS };
    }
    let fits = |f: i32| {
        let fmt = QFormat::new(total_bits, f).expect("width checked by caller");
        !fmt.saturates(max_abs) && !fmt.saturates(-max_abs)
    };
    // Start from the magnitude estimate and correct for rounding at the edge.
    let estimate = (total_bits as i32 - 1) - max_abs.log2().ceil() as i32;
    let mut f = estimate.clamp(MIN_FRAC_BITS, MAX_FRAC_BITS);
    while f > MIN_FRAC_BITS && !fits(f) {
        f -= 1;
    }
    while f < MAX_FRAC_BITS && fits(f + 1) {
        f += 1;
    }
    f
}

fn fmt_for(max_abs: f64, total_bits: u8) -> QFormat {
    QFormat::new(total_bits, choose_frac_bits(max_abs, total_bits)).expect("frac clamped to range")
}

fn max_abs(values: &[f32]) -> f64 {
    values.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitStats {
    pub unit: ConvUnit,
    pub input_max: f64,
    pub output_max: f64,
    pub weight_max: f64,
    pub bias_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub name: String,
    pub input_max: f64,
    pub output_max: f64,
    pub units: Vec<UnitStats>,
}

/// Per-layer max-absolute values over all calibration samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStats {
    pub layers: Vec<LayerStats>,
}

impl CalibrationStats {
    /// Elementwise maximum of two stat sets over the same network.
    pub fn merge(&mut self, other: &CalibrationStats) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.input_max = a.input_max.max(b.input_max);
            a.output_max = a.output_max.max(b.output_max);
            for (ua, ub) in a.units.iter_mut().zip(&b.units) {
                ua.input_max = ua.input_max.max(ub.input_max);
                ua.output_max = ua.output_max.max(ub.output_max);
                ua.weight_max = ua.weight_max.max(ub.weight_max);
                ua.bias_max = ua.bias_max.max(ub.bias_max);
            }
        }
    }
}

fn empty_stats(net: &NetworkDef, store: &WeightStore) -> Result<CalibrationStats> {
    let mut layers = Vec::with_capacity(net.layers().len());
    for (spec, lw) in net.layers().iter().zip(&store.layers) {
        let mut units = Vec::new();
        for ((unit, _), cw) in spec.dims.conv_units().into_iter().zip(&lw.units) {
            let fp = cw
                .float
                .as_ref()
                .ok_or_else(|| Error::Calibration(format!("layer {} has no float parameters", spec.name)))?;
            units.push(UnitStats {
                unit,
                input_max: 0.0,
                output_max: 0.0,
                weight_max: max_abs(fp.weights()),
                bias_max: max_abs(fp.bias()),
            });
        }
        layers.push(LayerStats { name: spec.name.clone(), input_max: 0.0, output_max: 0.0, units });
    }
    Ok(CalibrationStats { layers })
}

/// Runs the float network over `samples`, recording the largest magnitude
/// seen on every feature map and parameter tensor.
pub fn calibrate(net: &NetworkDef, store: &WeightStore, samples: &[Fmap<f32>]) -> Result<CalibrationStats> {
    if samples.is_empty() {
        return Err(Error::Calibration("at least one calibration sample is required".into()));
    }
    store.check_against(net)?;
    let mut stats = empty_stats(net, store)?;
    for sample in samples {
        forward_float_observed(net, store, sample, &mut |layer, unit, input, output| {
            let ls = &mut stats.layers[layer];
            let (imax, omax) = (max_abs(input.data()), max_abs(output.data()));
            match unit {
                None => {
                    ls.input_max = ls.input_max.max(imax);
                    ls.output_max = ls.output_max.max(omax);
                }
                Some(u) => {
                    if let Some(us) = ls.units.iter_mut().find(|s| s.unit == u) {
                        us.input_max = us.input_max.max(imax);
                        us.output_max = us.output_max.max(omax);
                    }
                }
            }
        })?;
    }
    Ok(stats)
}

/// Quantizes one float convolution with the given feature-map formats.
pub fn quantize_conv(
    params: &FloatLayerParams,
    input_fmt: QFormat,
    output_fmt: QFormat,
    weight_max: f64,
    bias_max: f64,
) -> Result<QuantConvParams> {
    let weight_fmt = fmt_for(weight_max, 8);
    let bias_fmt = fmt_for(bias_max, 8);
    let qspec = LayerQSpec::new(weight_fmt, bias_fmt, input_fmt, output_fmt)?;
    let weights: Vec<i8> = params.weights().iter().map(|&w| weight_fmt.quantize(w as f64) as i8).collect();
    let bias: Vec<i8> = params.bias().iter().map(|&b| bias_fmt.quantize(b as f64) as i8).collect();
    let k = params.kernel();
    let tensor = QTensor::new(params.out_channels(), params.in_channels(), k, k, weight_fmt, weights)?;
    QuantConvParams::new(tensor, bias, qspec, params.stride(), params.pad())
}

/// Produces a store carrying both the original float parameters and their
/// quantized counterparts with per-convolution [`LayerQSpec`]s.
pub fn quantize_network(net: &NetworkDef, store: &WeightStore, stats: &CalibrationStats) -> Result<WeightStore> {
    store.check_against(net)?;
    if stats.layers.len() != net.layers().len() {
        return Err(Error::Calibration(format!(
            "stats cover {} layers, network has {}",
            stats.layers.len(),
            net.layers().len()
        )));
    }
    let mut edge = fmt_for(stats.layers[0].input_max, 16);
    let mut out_layers = Vec::with_capacity(store.layers.len());
    for ((spec, lw), ls) in net.layers().iter().zip(&store.layers).zip(&stats.layers) {
        let want = spec.dims.conv_units().len();
        if ls.units.len() != want {
            return Err(Error::Calibration(format!(
                "stats for layer {} cover {} convolutions, expected {want}",
                spec.name,
                ls.units.len()
            )));
        }
        let float = |i: usize| -> Result<&FloatLayerParams> {
            lw.units[i]
                .float
                .as_ref()
                .ok_or_else(|| Error::Weights(format!("layer {} has no float parameters", spec.name)))
        };
        let q = |i: usize, input: QFormat, output: QFormat| -> Result<ConvWeights> {
            let u = &ls.units[i];
            Ok(ConvWeights {
                float: Some(float(i)?.clone()),
                quant: Some(quantize_conv(float(i)?, input, output, u.weight_max, u.bias_max)?),
            })
        };
        let units = match spec.dims {
            LayerDims::Conv(_) => {
                let out = fmt_for(ls.units[0].output_max, 16);
                let units = vec![q(0, edge, out)?];
                edge = out;
                units
            }
            LayerDims::Fire(_) => {
                let squeezed = fmt_for(ls.units[0].output_max, 16);
                let expanded = fmt_for(ls.units[1].output_max.max(ls.units[2].output_max), 16);
                let units = vec![q(0, edge, squeezed)?, q(1, squeezed, expanded)?, q(2, squeezed, expanded)?];
                edge = expanded;
                units
            }
            _ => Vec::new(),
        };
        out_layers.push(LayerWeights { name: lw.name.clone(), dims: lw.dims, units });
    }
    Ok(WeightStore { layers: out_layers })
}

/// Top-k accuracies of a float and a quantized classifier over one dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyDelta {
    pub float_topk_acc: f64,
    pub quant_topk_acc: f64,
    /// `float - quant`; positive means quantization lost accuracy.
    pub delta: f64,
}

/// Generic top-k comparison of two classifiers given as closures returning
/// class probabilities.
pub fn accuracy_delta<I, F, Q>(
    dataset: &[(I, usize)],
    k: usize,
    classes: usize,
    mut float_fn: F,
    mut quant_fn: Q,
) -> Result<AccuracyDelta>
where
    F: FnMut(&I) -> Result<Vec<f64>>,
    Q: FnMut(&I) -> Result<Vec<f64>>,
{
    if dataset.is_empty() {
        return Err(Error::Invalid("dataset is empty".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let (mut hits_f, mut hits_q) = (0usize, 0usize);
    for (input, label) in dataset {
        if *label >= classes {
            return Err(Error::Invalid(format!("label {label} outside {classes} classes")));
        }
        let contains = |probs: Vec<f64>| -> Result<bool> {
            Ok(top_k(&probs, k.min(probs.len()))?.iter().any(|&(c, _)| c == *label))
        };
        hits_f += contains(float_fn(input)?)? as usize;
        hits_q += contains(quant_fn(input)?)? as usize;
    }
    let n = dataset.len() as f64;
    let (fa, qa) = (hits_f as f64 / n, hits_q as f64 / n);
    Ok(AccuracyDelta { float_topk_acc: fa, quant_topk_acc: qa, delta: fa - qa })
}

/// Top-k accuracy of the float network versus a quantized mode over the same
/// store.
pub fn measure_accuracy_delta(
    net: &NetworkDef,
    store: &WeightStore,
    quant_mode: Mode,
    dataset: &[(Fmap<f32>, usize)],
    k: usize,
) -> Result<AccuracyDelta> {
    let float_plan = ExecPlan::new(net, Mode::Float);
    let quant_plan = ExecPlan::new(net, quant_mode);
    accuracy_delta(
        dataset,
        k,
        net.classes(),
        |x| Ok(forward(net, store, &float_plan, NetInput::Float(x), None)?.probs),
        |x| Ok(forward(net, store, &quant_plan, NetInput::Float(x), None)?.probs),
    )
}

/// Text table of the chosen formats and observed ranges per convolution.
pub fn render_report(net: &NetworkDef, store: &WeightStore, stats: &CalibrationStats) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<24} {:>5} {:>5} {:>5} {:>5} {:>12} {:>12} {:>12} {:>12}",
        "layer", "w_fl", "b_fl", "in_fl", "out_fl", "max|w|", "max|b|", "max|in|", "max|out|"
    );
    for ((spec, lw), ls) in net.layers().iter().zip(&store.layers).zip(&stats.layers) {
        for (cw, us) in lw.units.iter().zip(&ls.units) {
            let Some(q) = &cw.quant else { continue };
            let [w, b, i, o] = q.qspec().frac_bits();
            let _ = writeln!(
                s,
                "{:<24} {:>5} {:>5} {:>5} {:>5} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
                format!("{}{}", spec.name, us.unit.suffix()),
                w,
                b,
                i,
                o,
                us.weight_max,
                us.bias_max,
                us.input_max,
                us.output_max
            );
        }
    }
    s
}
