//! Single-threaded reference layers.
//!
//! The float functions are the 32-bit CPU path and the correctness oracle for
//! everything quantized. [`conv2d_quant_ref`] is the plain nested-loop form of
//! the integer convolution contract the accelerator model must match.
//!
//! Padding, activation placement and pooling mode follow the public
//! SqueezeNet v1.1 definition: ReLU after every convolution, floor-mode
//! max pooling without padding.

use crate::error::{Error, Result};
use crate::fixed::{rescale, saturate_i16};
use crate::fmap::Fmap;
use crate::quantizer::QuantConvParams;

/// Float convolution parameters, weights laid out `[out][ky][kx][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatLayerParams {
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl FloatLayerParams {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(Error::Dimension("kernel and stride must be at least 1".into()));
        }
        if weights.len() != out_channels * kernel * kernel * in_channels {
            return Err(Error::Dimension(format!(
                "{out_channels}x{kernel}x{kernel}x{in_channels} weights need {} values, got {}",
                out_channels * kernel * kernel * in_channels,
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::Dimension(format!(
                "bias length {} != out_channels {out_channels}",
                bias.len()
            )));
        }
        Ok(Self { out_channels, in_channels, kernel, stride, pad, weights, bias })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel,
            stride,
            pad,
            weights: vec![0.0; out_channels * kernel * kernel * in_channels],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    #[inline]
    pub fn weight_index(&self, o: usize, ky: usize, kx: usize, c: usize) -> usize {
        ((o * self.kernel + ky) * self.kernel + kx) * self.in_channels + c
    }

    pub fn output_dims(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        conv_output_dims(width, height, self.kernel, self.stride, self.pad)
    }
}

/// `floor((in + 2 * pad - k) / stride) + 1` in both dimensions.
pub fn conv_output_dims(
    width: usize,
    height: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    if width + 2 * pad < kernel || height + 2 * pad < kernel {
        return Err(Error::Dimension(format!(
            "kernel {kernel} larger than padded input {}x{}",
            width + 2 * pad,
            height + 2 * pad
        )));
    }
    Ok(((width + 2 * pad - kernel) / stride + 1, (height + 2 * pad - kernel) / stride + 1))
}

pub fn conv2d_ref(input: &Fmap<f32>, params: &FloatLayerParams, relu: bool) -> Result<Fmap<f32>> {
    if input.channels() != params.in_channels {
        return Err(Error::Dimension(format!(
            "input has {} channels, weights expect {}",
            input.channels(),
            params.in_channels
        )));
    }
    let (w, h) = (input.width(), input.height());
    let (ow, oh) = params.output_dims(w, h)?;
    let (k, s, pad, cin) = (params.kernel, params.stride, params.pad as isize, params.in_channels);
    let mut out = Fmap::zeros(ow, oh, params.out_channels);
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = out.px_mut(ox, oy);
            for (o, slot) in dst.iter_mut().enumerate() {
                let mut acc = params.bias[o];
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = input.px(ix as usize, iy as usize);
                        let wi = params.weight_index(o, ky, kx, 0);
                        for (a, wt) in src.iter().zip(&params.weights[wi..wi + cin]) {
                            acc += wt * a;
                        }
                    }
                }
                *slot = if relu { acc.max(0.0) } else { acc };
            }
        }
    }
    Ok(out)
}

/// Floor-mode max pooling. Generic so the quantized path can pool raw codes
/// directly: max commutes with any monotone format.
pub fn maxpool_ref<T: Copy + PartialOrd + Default>(
    input: &Fmap<T>,
    kernel: usize,
    stride: usize,
) -> Result<Fmap<T>> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Dimension("pool kernel and stride must be at least 1".into()));
    }
    if kernel > input.width() || kernel > input.height() {
        return Err(Error::Dimension(format!(
            "pool kernel {kernel} larger than input {}x{}",
            input.width(),
            input.height()
        )));
    }
    let ow = (input.width() - kernel) / stride + 1;
    let oh = (input.height() - kernel) / stride + 1;
    let c = input.channels();
    let mut out = Fmap::zeros(ow, oh, c);
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = out.px_mut(ox, oy);
            dst.copy_from_slice(input.px(ox * stride, oy * stride));
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let src = input.px(ox * stride + kx, oy * stride + ky);
                    for (d, &v) in dst.iter_mut().zip(src) {
                        if v > *d {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-channel mean over the whole map, accumulated in f64.
pub fn avgpool_global_ref(input: &Fmap<f32>) -> Fmap<f32> {
    let c = input.channels();
    let mut sums = vec![0.0f64; c];
    for px in input.pixels() {
        for (s, &v) in sums.iter_mut().zip(px) {
            *s += v as f64;
        }
    }
    let n = (input.width() * input.height()) as f64;
    let data = sums.into_iter().map(|s| (s / n) as f32).collect();
    Fmap::from_vec(1, 1, c, data).expect("1x1xC")
}

/// Numerically stable softmax in f64. An empty input yields an empty output.
pub fn softmax_ref(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Squeeze 1x1, then expand 1x1 and expand 3x3 concatenated along channels,
/// expand1 channels first. ReLU after every convolution.
pub fn fire_ref(
    input: &Fmap<f32>,
    squeeze: &FloatLayerParams,
    expand1: &FloatLayerParams,
    expand3: &FloatLayerParams,
) -> Result<Fmap<f32>> {
    check_fire_shapes(squeeze.out_channels, expand1.in_channels, expand3.in_channels)?;
    let squeezed = conv2d_ref(input, squeeze, true)?;
    let e1 = conv2d_ref(&squeezed, expand1, true)?;
    let e3 = conv2d_ref(&squeezed, expand3, true)?;
    concat_channels(&e1, &e3)
}

pub(crate) fn check_fire_shapes(squeeze_out: usize, e1_in: usize, e3_in: usize) -> Result<()> {
    if e1_in != squeeze_out || e3_in != squeeze_out {
        return Err(Error::Dimension(format!(
            "expand layers take {e1_in}/{e3_in} channels but squeeze produces {squeeze_out}"
        )));
    }
    Ok(())
}

/// Channel concatenation of two maps with equal spatial dims.
pub fn concat_channels<T: Copy + Default>(a: &Fmap<T>, b: &Fmap<T>) -> Result<Fmap<T>> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Dimension(format!(
            "cannot concatenate {}x{} with {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (ca, cb) = (a.channels(), b.channels());
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    for (pa, pb) in a.pixels().zip(b.pixels()) {
        data.extend_from_slice(&pa[..ca]);
        data.extend_from_slice(&pb[..cb]);
    }
    Fmap::from_vec(a.width(), a.height(), ca + cb, data)
}

/// Naive integer convolution: accumulate `bias_aligned + sum(w * a)` exactly,
/// then shift-round-saturate to the output format and apply ReLU.
pub fn conv2d_quant_ref(input: &Fmap<i16>, params: &QuantConvParams, relu: bool) -> Result<Fmap<i16>> {
    let wts = params.weights();
    if input.channels() != wts.in_channels() {
        return Err(Error::Dimension(format!(
            "input has {} channels, weights expect {}",
            input.channels(),
            wts.in_channels()
        )));
    }
    let (k, s, pad) = (wts.kernel_h(), params.stride(), params.pad() as isize);
    let (w, h) = (input.width(), input.height());
    let (ow, oh) = conv_output_dims(w, h, k, params.stride(), params.pad())?;
    let bias = params.aligned_bias()?;
    let acc_frac = params.qspec().acc_frac();
    let out_frac = params.qspec().output_fmt.frac_bits();
    let mut out = Fmap::zeros(ow, oh, wts.out_channels());
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = out.px_mut(ox, oy);
            for (o, slot) in dst.iter_mut().enumerate() {
                let mut acc = bias[o] as i64;
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = input.px(ix as usize, iy as usize);
                        for (&a, &wt) in src.iter().zip(wts.tap(o, ky, kx)) {
                            acc += wt as i64 * a as i64;
                        }
                    }
                }
                if acc < i32::MIN as i64 || acc > i32::MAX as i64 {
                    return Err(Error::AccumulatorOverflow(acc));
                }
                let v = saturate_i16(rescale(acc, acc_frac, out_frac));
                *slot = if relu { v.max(0) } else { v };
            }
        }
    }
    Ok(out)
}

pub fn fire_quant_ref(
    input: &Fmap<i16>,
    squeeze: &QuantConvParams,
    expand1: &QuantConvParams,
    expand3: &QuantConvParams,
) -> Result<Fmap<i16>> {
    check_fire_shapes(
        squeeze.weights().out_channels(),
        expand1.weights().in_channels(),
        expand3.weights().in_channels(),
    )?;
    let squeezed = conv2d_quant_ref(input, squeeze, true)?;
    let e1 = conv2d_quant_ref(&squeezed, expand1, true)?;
    let e3 = conv2d_quant_ref(&squeezed, expand3, true)?;
    concat_channels(&e1, &e3)
}
