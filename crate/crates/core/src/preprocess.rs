//! Image decoding, resizing and the normalisation/quantization tail that
//! turns 8-bit pixels into the network input fmap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, PpmError, Result};
use crate::fixed::QFormat;
use crate::fmap::Fmap;
use crate::quantizer::choose_frac_bits;

/// Interleaved 8-bit RGB, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension("image dimensions must be positive".into()));
        }
        if width.checked_mul(height).and_then(|n| n.checked_mul(3)) != Some(data.len()) {
            return Err(Error::Dimension(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, rgb.repeat(width * height))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<u32, PpmError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(PpmError::Header)
    }
}

/// Decodes a binary PPM (`P6`, maxval 255). Comments in the header are
/// skipped; bytes after the raster are ignored.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, PpmError> {
    if !bytes.starts_with(b"P6") {
        return Err(PpmError::NotP6);
    }
    let mut r = HeaderReader { bytes, pos: 2 };
    if !r.bytes.get(r.pos).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(PpmError::NotP6);
    }
    let width = r.number()? as usize;
    let height = r.number()? as usize;
    let maxval = r.number()?;
    if maxval != 255 {
        return Err(PpmError::MaxVal(maxval));
    }
    // exactly one whitespace byte separates maxval from the raster
    if !r.bytes.get(r.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PpmError::Header);
    }
    r.pos += 1;
    if width == 0 || height == 0 {
        return Err(PpmError::Header);
    }
    let expected = width.checked_mul(height).and_then(|n| n.checked_mul(3)).ok_or(PpmError::Header)?;
    let raster = &bytes[r.pos..];
    if raster.len() < expected {
        return Err(PpmError::Truncated { expected, actual: raster.len() });
    }
    Ok(RgbImage { width, height, data: raster[..expected].to_vec() })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Bilinear resize with half-pixel sample centres and edge clamping.
/// Interpolated values are rounded half up.
pub fn resize_bilinear(img: &RgbImage, target_w: usize, target_h: usize) -> Result<RgbImage> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::Dimension("resize target must be positive".into()));
    }
    if (target_w, target_h) == (img.width, img.height) {
        return Ok(img.clone());
    }
    let taps = |src: usize, dst: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                (i0, (i0 + 1).min(src - 1), s - i0 as f64)
            })
            .collect()
    };
    let xs = taps(img.width, target_w);
    let ys = taps(img.height, target_h);
    let mut data = Vec::with_capacity(target_w * target_h * 3);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let (a, b, c, d) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
            for ch in 0..3 {
                let lerp = |p: u8, q: u8, t: f64| p as f64 + (q as f64 - p as f64) * t;
                let top = lerp(a[ch], b[ch], tx);
                let bottom = lerp(c[ch], d[ch], tx);
                let v = top + (bottom - top) * ty;
                data.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(RgbImage { width: target_w, height: target_h, data })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ChannelOrder {
    Rgb,
    Bgr,
}

impl ChannelOrder {
    /// Source RGB index of output channel `c`.
    pub fn source(self, c: usize) -> usize {
        match self {
            ChannelOrder::Rgb => c,
            ChannelOrder::Bgr => 2 - c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMethod {
    #[default]
    Bilinear,
}

/// `means` are listed in `channel_order`, i.e. for BGR the first mean is
/// subtracted from the blue channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_width: usize,
    pub target_height: usize,
    pub channel_order: ChannelOrder,
    pub means: [f64; 3],
    pub resize: ResizeMethod,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_width: 227,
            target_height: 227,
            channel_order: ChannelOrder::Bgr,
            means: [104.0, 117.0, 123.0],
            resize: ResizeMethod::Bilinear,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_width == 0 || self.target_height == 0 {
            return Err(Error::Config("target dimensions must be positive".into()));
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("channel means must be finite".into()));
        }
        Ok(())
    }

    /// Input format wide enough for every `pixel - mean` value.
    pub fn input_format(&self) -> QFormat {
        let hi = self.means.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lo = self.means.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        // pixel - mean spans [-hi, 255 - lo]
        let frac = choose_frac_bits(hi.abs().max((255.0 - lo).abs()), 16);
        QFormat::q16(frac).expect("frac bits within range")
    }
}

/// Client-side part: decode and resize to the network geometry.
pub fn prepare_ppm(bytes: &[u8], cfg: &PreprocessConfig) -> Result<RgbImage> {
    let img = decode_ppm(bytes)?;
    match cfg.resize {
        ResizeMethod::Bilinear => resize_bilinear(&img, cfg.target_width, cfg.target_height),
    }
}

fn check_dims(img: &RgbImage, cfg: &PreprocessConfig) -> Result<()> {
    if (img.width, img.height) != (cfg.target_width, cfg.target_height) {
        return Err(Error::Dimension(format!(
            "image is {}x{}, expected {}x{}",
            img.width, img.height, cfg.target_width, cfg.target_height
        )));
    }
    Ok(())
}

/// Mean subtraction and channel reordering into a float fmap.
pub fn normalize(img: &RgbImage, cfg: &PreprocessConfig) -> Result<Fmap<f32>> {
    check_dims(img, cfg)?;
    let mut data = Vec::with_capacity(img.data.len());
    for px in img.data.chunks_exact(3) {
        for c in 0..3 {
            data.push((px[cfg.channel_order.source(c)] as f64 - cfg.means[c]) as f32);
        }
    }
    Fmap::from_vec(img.width, img.height, 3, data)
}

/// Mean subtraction, channel reordering and quantization to `input_fmt`.
pub fn normalize_quantize(img: &RgbImage, cfg: &PreprocessConfig, input_fmt: QFormat) -> Result<Fmap<i16>> {
    check_dims(img, cfg)?;
    if input_fmt.total_bits() != 16 {
        return Err(Error::Format(format!("input format must be 16-bit, got {input_fmt}")));
    }
    let mut data = Vec::with_capacity(img.data.len());
    for px in img.data.chunks_exact(3) {
        for c in 0..3 {
            data.push(input_fmt.quantize(px[cfg.channel_order.source(c)] as f64 - cfg.means[c]) as i16);
        }
    }
    Fmap::from_vec(img.width, img.height, 3, data)
}
