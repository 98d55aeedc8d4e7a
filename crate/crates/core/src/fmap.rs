//! Pixel-major feature maps and 8-bit parameter tensors.

use crate::error::{Error, Result};
use crate::fixed::QFormat;

/// A `width x height x channels` activation volume stored pixel-major: all
/// channels of one `(x, y)` location are contiguous, and pixels follow in
/// row-major order. `index(x, y, c) = (y * width + x) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fmap<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Fmap<T> {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![T::default(); width * height * channels] }
    }
}

impl<T> Fmap<T> {
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "fmap {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    /// The contiguous channel vector at `(x, y)`.
    pub fn pixel(&self, x: usize, y: usize) -> Result<&[T]> {
        self.check(x, y)?;
        let start = self.index(x, y, 0);
        Ok(&self.data[start..start + self.channels])
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> Result<&mut [T]> {
        self.check(x, y)?;
        let start = self.index(x, y, 0);
        Ok(&mut self.data[start..start + self.channels])
    }

    /// Bounds-unchecked pixel access for inner loops.
    #[inline]
    pub(crate) fn px(&self, x: usize, y: usize) -> &[T] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub(crate) fn px_mut(&mut self, x: usize, y: usize) -> &mut [T] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Row-major iterator over pixel slices.
    pub fn pixels(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks(self.channels.max(1))
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Fmap<U> {
        Fmap {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(f).collect(),
        }
    }

    fn check(&self, x: usize, y: usize) -> Result<()> {
        if x >= self.width || y >= self.height {
            return Err(Error::OutOfBounds { x, y, width: self.width, height: self.height });
        }
        Ok(())
    }
}

/// Free-function form of [`Fmap::pixel`].
pub fn pixel_slice<T>(fmap: &Fmap<T>, x: usize, y: usize) -> Result<&[T]> {
    fmap.pixel(x, y)
}

impl Fmap<i16> {
    pub fn dequantize(&self, fmt: QFormat) -> Fmap<f32> {
        self.map(|&r| fmt.to_real(r as i64) as f32)
    }
}

impl Fmap<f32> {
    pub fn quantize(&self, fmt: QFormat) -> Fmap<i16> {
        debug_assert_eq!(fmt.total_bits(), 16);
        self.map(|&v| fmt.quantize(v as f64) as i16)
    }
}

/// Quantized convolution weights, `[out][ky][kx][in]` with input channels
/// innermost so a 16-channel operand is one contiguous read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QTensor {
    out_channels: usize,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    format: QFormat,
    data: Vec<i8>,
}

impl QTensor {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        format: QFormat,
        data: Vec<i8>,
    ) -> Result<Self> {
        if format.total_bits() != 8 {
            return Err(Error::Format(format!("weight tensor needs an 8-bit format, got {format}")));
        }
        let expected = out_channels * in_channels * kernel_h * kernel_w;
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "weight tensor {out_channels}x{kernel_h}x{kernel_w}x{in_channels} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { out_channels, in_channels, kernel_h, kernel_w, format, data })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_h(&self) -> usize {
        self.kernel_h
    }

    pub fn kernel_w(&self) -> usize {
        self.kernel_w
    }

    pub fn format(&self) -> QFormat {
        self.format
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    #[inline]
    pub fn index(&self, o: usize, ky: usize, kx: usize, c: usize) -> usize {
        ((o * self.kernel_h + ky) * self.kernel_w + kx) * self.in_channels + c
    }

    /// All input-channel weights of one tap.
    #[inline]
    pub fn tap(&self, o: usize, ky: usize, kx: usize) -> &[i8] {
        let start = self.index(o, ky, kx, 0);
        &self.data[start..start + self.in_channels]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_layout() {
        let f = Fmap::from_vec(2, 2, 3, (0..12).collect::<Vec<i32>>()).unwrap();
        assert_eq!(f.pixel(1, 0).unwrap(), &[3, 4, 5]);
        assert_eq!(f.pixel(0, 1).unwrap(), &[6, 7, 8]);
    }

    #[test]
    fn single_pixel_is_whole_map() {
        let f = Fmap::from_vec(1, 1, 5, vec![1.0f32, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(f.pixel(0, 0).unwrap(), f.data());
    }

    #[test]
    fn pixel_mut_touches_only_its_pixel() {
        let mut f = Fmap::<i16>::zeros(3, 2, 4);
        f.pixel_mut(2, 1).unwrap().fill(7);
        let touched: Vec<usize> =
            f.data().iter().enumerate().filter(|(_, &v)| v == 7).map(|(i, _)| i).collect();
        assert_eq!(touched, (20..24).collect::<Vec<_>>());
    }

    #[test]
    fn out_of_bounds() {
        let f = Fmap::<i16>::zeros(3, 2, 4);
        assert!(matches!(f.pixel(3, 0), Err(Error::OutOfBounds { .. })));
        assert!(f.pixel(0, 2).is_err());
    }

    #[test]
    fn length_checked() {
        assert!(Fmap::from_vec(2, 2, 2, vec![0u8; 7]).is_err());
        assert!(QTensor::new(2, 16, 1, 1, QFormat::q8(7).unwrap(), vec![0; 31]).is_err());
        assert!(QTensor::new(2, 16, 1, 1, QFormat::q16(7).unwrap(), vec![0; 32]).is_err());
    }
}
