#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sqj_core::fixed::QFormat;
use sqj_core::fmap::{Fmap, QTensor};
use sqj_core::graph::init::random_float_store;
use sqj_core::graph::topology::{squeezenet_v1_1, NetworkDef};
use sqj_core::graph::weights::WeightStore;
use sqj_core::preprocess::{normalize, PreprocessConfig, RgbImage};
use sqj_core::quantizer::{calibrate, choose_frac_bits, quantize_conv, quantize_network, LayerQSpec, QuantConvParams};
use sqj_core::reference::{conv2d_ref, FloatLayerParams};
use sqj_core::sqj::SqjEngine;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn pow2(e: i32) -> BigRational {
    let two = BigRational::from_integer(BigInt::from(2));
    if e >= 0 {
        num_traits::pow(two, e as usize)
    } else {
        BigRational::one() / num_traits::pow(two, (-e) as usize)
    }
}

/// Nearest integer, halves away from zero.
pub fn round_half_away(x: &BigRational) -> BigInt {
    let half = BigRational::new(BigInt::from(1), BigInt::from(2));
    let mag = (x.abs() + half).floor().to_integer();
    if x.is_negative() {
        -mag
    } else {
        mag
    }
}

/// Direct convolution over raw integers, written from the integer contract
/// alone: products at scale `w + x`, bias rounded onto that scale, exact
/// sum, one rounding onto the output scale, clamp to 16 bits, optional
/// ReLU. `None` when the sum leaves the 32-bit accumulator range.
pub fn naive_quant_conv(
    input: &Fmap<i16>,
    weights: &QTensor,
    bias: &[i8],
    q: &LayerQSpec,
    stride: usize,
    pad: usize,
    relu: bool,
) -> Option<Fmap<i16>> {
    let k = weights.kernel_h();
    let (w, h, c_in) = input.dims();
    let ow = (w + 2 * pad - k) / stride + 1;
    let oh = (h + 2 * pad - k) / stride + 1;
    let c_out = weights.out_channels();
    let acc_frac = q.weight_fmt.frac_bits() + q.input_fmt.frac_bits();
    let mut out = vec![0i16; ow * oh * c_out];
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..c_out {
                let b = BigRational::from_integer(BigInt::from(bias[o])) * pow2(acc_frac - q.bias_fmt.frac_bits());
                let mut acc: i64 = round_half_away(&b).to_i64()?;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                            continue;
                        }
                        for c in 0..c_in {
                            let x = input.data()[((iy as usize) * w + ix as usize) * c_in + c] as i64;
                            let wt = weights.data()[((o * k + ky) * k + kx) * c_in + c] as i64;
                            acc += x * wt;
                        }
                    }
                }
                if acc < i32::MIN as i64 || acc > i32::MAX as i64 {
                    return None;
                }
                let real = BigRational::from_integer(BigInt::from(acc)) * pow2(q.output_fmt.frac_bits() - acc_frac);
                let mut v = round_half_away(&real).clamp(BigInt::from(i16::MIN), BigInt::from(i16::MAX));
                if relu && v < BigInt::zero() {
                    v = BigInt::zero();
                }
                out[(oy * ow + ox) * c_out + o] = v.to_i16().unwrap();
            }
        }
    }
    Some(Fmap::from_vec(ow, oh, c_out, out).unwrap())
}

pub fn random_qfmap(rng: &mut impl Rng, w: usize, h: usize, c: usize) -> Fmap<i16> {
    let data = (0..w * h * c).map(|_| rng.random::<i16>()).collect();
    Fmap::from_vec(w, h, c, data).unwrap()
}

/// Random layer with formats drawn so that the 32-bit accumulator cannot
/// overflow for up to 48 input channels and a 3x3 kernel.
pub fn random_qconv(rng: &mut impl Rng, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> QuantConvParams {
    let wf = rng.random_range(2..=9);
    let xf = rng.random_range(-2..=12);
    let bf = rng.random_range(wf + xf - 12..=wf + xf + 3);
    let of = rng.random_range(xf - 6..=xf + 6);
    let q = LayerQSpec::new(
        QFormat::q8(wf).unwrap(),
        QFormat::q8(bf).unwrap(),
        QFormat::q16(xf).unwrap(),
        QFormat::q16(of).unwrap(),
    )
    .unwrap();
    let weights = (0..c_out * k * k * c_in).map(|_| rng.random::<i8>()).collect();
    let t = QTensor::new(c_out, c_in, k, k, q.weight_fmt, weights).unwrap();
    let bias = (0..c_out).map(|_| rng.random::<i8>()).collect();
    QuantConvParams::new(t, bias, q, stride, pad).unwrap()
}

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> RgbImage {
    RgbImage::new(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
}

/// The shipped topology with He-initialised float weights, calibrated on
/// two random images and quantized.
pub fn quantized_v11(seed: u64) -> (NetworkDef, WeightStore) {
    let net = squeezenet_v1_1();
    let float = random_float_store(&net, seed);
    let cfg = PreprocessConfig::default();
    let mut r = rng(seed ^ 0x5eed);
    let samples: Vec<Fmap<f32>> =
        (0..2).map(|_| normalize(&random_image(&mut r, 227, 227), &cfg).unwrap()).collect();
    let stats = calibrate(&net, &float, &samples).unwrap();
    let store = quantize_network(&net, &float, &stats).unwrap();
    (net, store)
}

/// A small network in the shipped layer order, cheap enough for property tests.
pub fn tiny_net() -> NetworkDef {
    NetworkDef::parse(
        "input 19x19x3\n\
         1 conv conv1 in=19x19x3 out=16 kernel=3 stride=2 pad=0 relu=1\n\
         2 maxpool pool1 in=9x9x16 kernel=3 stride=2\n\
         3 fire fire2 in=4x4x16 squeeze=16 expand1=16 expand3=16\n\
         4 conv conv10 in=4x4x32 out=8 kernel=1 stride=1 pad=0 relu=1\n\
         5 avgpool pool10 in=4x4x8\n\
         6 softmax prob in=1x1x8\n",
    )
    .unwrap()
}

pub fn quantized_tiny(seed: u64) -> (NetworkDef, WeightStore) {
    let net = tiny_net();
    let float = random_float_store(&net, seed);
    let mut r = rng(seed);
    let samples: Vec<Fmap<f32>> = (0..3)
        .map(|_| {
            let data = (0..19 * 19 * 3).map(|_| r.random_range(-128.0f32..128.0)).collect();
            Fmap::from_vec(19, 19, 3, data).unwrap()
        })
        .collect();
    let stats = calibrate(&net, &float, &samples).unwrap();
    (net.clone(), quantize_network(&net, &float, &stats).unwrap())
}

/// Cheap deterministic classifier keyed on the pixel sum.
pub struct MockClassifier;

impl sqj_core::service::Classifier for MockClassifier {
    fn classify(&self, image: &RgbImage) -> sqj_core::Result<Vec<(usize, f64)>> {
        let sum: u64 = image.data().iter().map(|&b| b as u64).sum();
        Ok((0..5).map(|j| (((sum + 7 * j) % 1000) as usize, 0.5 / (j + 1) as f64)).collect())
    }
}

pub fn valid_frame(rng: &mut impl Rng) -> Vec<u8> {
    let img = random_image(rng, 227, 227);
    sqj_core::service::RecognitionRequest::from_image(&img).encode()
}

/// One fuzz case derived from a valid request frame.
pub fn mutate_frame(rng: &mut impl Rng, valid: &[u8]) -> Vec<u8> {
    let mut f = valid.to_vec();
    match rng.random_range(0..8) {
        0 => {
            for _ in 0..rng.random_range(1..4) {
                let i = rng.random_range(0..15);
                f[i] = rng.random();
            }
        }
        1 => f.truncate(rng.random_range(0..f.len())),
        2 => f.truncate(rng.random_range(0..20)),
        3 => {
            let n = if rng.random_bool(0.9) { rng.random_range(0..64) } else { rng.random_range(0..=1 << 20) };
            f = (0..n).map(|_| rng.random()).collect();
        }
        4 => {
            let at = rng.random_range(11..15);
            f[at] = rng.random();
        }
        5 => f.extend((0..rng.random_range(1..256)).map(|_| rng.random::<u8>())),
        6 => {
            let i = rng.random_range(0..f.len());
            f[i] ^= 1 << rng.random_range(0..8);
        }
        _ => {
            let i = rng.random_range(0..16);
            f.insert(i, rng.random());
        }
    }
    f
}

/// A response frame is well-formed: decodable, and an OK frame carries five
/// descending entries with class ids below 1000.
pub fn check_response(bytes: &[u8]) -> Result<(), String> {
    use sqj_core::service::{RecognitionResponse, Status};
    match RecognitionResponse::decode(bytes)? {
        RecognitionResponse::Ok(e) => {
            if e.len() != 5 || e.windows(2).any(|w| w[0].1 < w[1].1) || e.iter().any(|&(c, _)| c >= 1000) {
                return Err(format!("bad entries {e:?}"));
            }
        }
        RecognitionResponse::Error { status, .. } => {
            if status == Status::Ok {
                return Err("error frame with status 0".into());
            }
        }
    }
    Ok(())
}

/// Quantizes a random float layer, runs it on the accelerator model and
/// counts outputs farther from the float reference than
/// `weight_step * sum|a| + output_step`. Inputs sit on the input grid and
/// biases on the bias grid, so weights and the output are the only
/// rounding sources.
pub fn quant_bound_violations(seed: u64, k3: bool) -> usize {
    use rand::Rng;
    let mut r = rng(seed);
    let (k, pad) = if k3 { (3, 1) } else { (1, 0) };
    let c_in = 16 * r.random_range(1..=3);
    let c_out = 8 * r.random_range(1..=4);
    let (w, h) = (r.random_range(1..=8), r.random_range(1..=8));
    let in_fmt = QFormat::q16(r.random_range(4..=10)).unwrap();
    let x_raw = Fmap::from_vec(w, h, c_in, (0..w * h * c_in).map(|_| r.random_range(-2000i16..2000)).collect()).unwrap();
    let x = x_raw.dequantize(in_fmt);
    let wscale: f32 = r.random_range(0.05..2.0);
    let weights: Vec<f32> = (0..c_out * k * k * c_in).map(|_| r.random_range(-wscale..wscale)).collect();
    let w_max = weights.iter().fold(0f32, |m, v| m.max(v.abs())) as f64;
    let w_fmt = QFormat::q8(choose_frac_bits(w_max, 8)).unwrap();
    // coarse enough that the bias format picked from its maximum still
    // aligns onto the accumulator scale without rounding
    let b_fmt = QFormat::q8(w_fmt.frac_bits() + in_fmt.frac_bits() - 7 - r.random_range(0..=4)).unwrap();
    let bias: Vec<f32> = (0..c_out).map(|_| b_fmt.to_real(r.random_range(-127i64..=127)) as f32).collect();
    let b_max = bias.iter().fold(0f32, |m, v| m.max(v.abs())) as f64;
    let fp = FloatLayerParams::new(c_out, c_in, k, 1, pad, weights, bias).unwrap();
    let want = conv2d_ref(&x, &fp, false).unwrap();
    let out_max = want.data().iter().fold(0f32, |m, v| m.max(v.abs())) as f64;
    let out_fmt = QFormat::q16(choose_frac_bits(out_max, 16)).unwrap();
    let q = quantize_conv(&fp, in_fmt, out_fmt, w_max, b_max).unwrap();
    assert!(q.qspec().bias_fmt.frac_bits() <= q.qspec().acc_frac() || b_max == 0.0);
    let (got, _) = SqjEngine::default().conv_sqj(&x_raw, &q, false).unwrap();
    debug_assert_eq!(Some(got.clone()), naive_quant_conv(&x_raw, q.weights(), q.bias(), q.qspec(), 1, pad, false));
    let got = got.dequantize(out_fmt);
    let w_step = q.qspec().weight_fmt.step();
    let mut violations = 0;
    for oy in 0..h {
        for ox in 0..w {
            let mut sum_abs = 0.0f64;
            for ky in 0..k {
                for kx in 0..k {
                    let (iy, ix) = (oy as isize + ky as isize - pad as isize, ox as isize + kx as isize - pad as isize);
                    if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                        sum_abs += x.pixel(ix as usize, iy as usize).unwrap().iter().map(|v| v.abs() as f64).sum::<f64>();
                    }
                }
            }
            let bound = w_step * sum_abs + out_fmt.step();
            for o in 0..c_out {
                let i = (oy * w + ox) * c_out + o;
                if (got.data()[i] as f64 - want.data()[i] as f64).abs() > bound {
                    violations += 1;
                }
            }
        }
    }
    violations
}
