//! Deterministic fixtures for the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sqj_core::fmap::Fmap;
use sqj_core::graph::init::{random_conv, random_float_store};
use sqj_core::graph::topology::{squeezenet_v1_1, ConvDims, NetworkDef};
use sqj_core::graph::weights::WeightStore;
use sqj_core::preprocess::{normalize, PreprocessConfig, RgbImage};
use sqj_core::quantizer::{calibrate, choose_frac_bits, quantize_conv, quantize_network, QuantConvParams};
use sqj_core::reference::conv2d_ref;
use sqj_core::QFormat;

pub use sqj_core;

pub fn random_image(seed: u64, width: usize, height: usize) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::new(width, height, (0..width * height * 3).map(|_| rng.random()).collect()).expect("valid size")
}

fn max_abs(v: &[f32]) -> f64 {
    v.iter().fold(0f32, |m, x| m.max(x.abs())) as f64
}

/// A quantized convolution and a matching input, formats picked from the
/// float layer's own ranges.
pub fn quant_layer(seed: u64, size: usize, dims: &ConvDims) -> (Fmap<i16>, QuantConvParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fp = random_conv(dims, &mut rng);
    let n = size * size * dims.in_channels;
    let x = Fmap::from_vec(size, size, dims.in_channels, (0..n).map(|_| rng.random_range(0.0f32..4.0)).collect())
        .expect("valid size");
    let y = conv2d_ref(&x, &fp, true).expect("valid layer");
    let fmt = |v: &[f32]| QFormat::q16(choose_frac_bits(max_abs(v), 16)).expect("16-bit format");
    let (in_fmt, out_fmt) = (fmt(x.data()), fmt(y.data()));
    let q = quantize_conv(&fp, in_fmt, out_fmt, max_abs(fp.weights()), max_abs(fp.bias())).expect("quantizable");
    (x.quantize(in_fmt), q)
}

/// The shipped network with random weights, calibrated on one random image.
pub fn quantized_network(seed: u64) -> (NetworkDef, WeightStore) {
    let net = squeezenet_v1_1();
    let float = random_float_store(&net, seed);
    let x = normalize(&random_image(seed, 227, 227), &PreprocessConfig::default()).expect("default config");
    let stats = calibrate(&net, &float, &[x]).expect("calibration");
    let store = quantize_network(&net, &float, &stats).expect("quantization");
    (net, store)
}
