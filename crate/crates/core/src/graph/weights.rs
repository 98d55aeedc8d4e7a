//! Per-layer parameter storage and the `SQNW` binary container.
//!
//! All multi-byte integers are little-endian.
//!
//! ```text
//! "SQNW" | version:u16 = 1 | layer_count:u16
//! per layer:
//!   name_len:u16 | name:utf8 | kind:u8 | dims | unit_count:u8
//!   dims  conv:    in:u32 out:u32 kernel:u8 stride:u8 pad:u8 relu:u8
//!         maxpool: kernel:u8 stride:u8
//!         fire:    in:u32 squeeze:u32 expand1:u32 expand3:u32
//!         avgpool, softmax: (empty)
//!   per unit (conv: 1, fire: squeeze, expand1, expand3):
//!     flags:u8 (bit0 quantized, bit1 float)
//!     quantized: frac_bits:i8 x4 (weight, bias, input, output)
//!                n:u32 | n x i8 weights | m:u32 | m x i8 bias
//!     float:     n:u32 | n x f32 weights | m:u32 | m x f32 bias
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result, WeightFileError};
use crate::fixed::QFormat;
use crate::fmap::QTensor;
use crate::graph::topology::{ConvDims, FireDims, LayerDims, LayerKind, NetworkDef};
use crate::quantizer::{LayerQSpec, QuantConvParams};
use crate::reference::FloatLayerParams;

pub const MAGIC: [u8; 4] = *b"SQNW";
pub const VERSION: u16 = 1;

const FLAG_QUANT: u8 = 0b01;
const FLAG_FLOAT: u8 = 0b10;

/// Float and/or quantized parameters of one convolution.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvWeights {
    pub float: Option<FloatLayerParams>,
    pub quant: Option<QuantConvParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub name: String,
    pub dims: LayerDims,
    /// One entry per convolution of the layer, see [`LayerDims::conv_units`].
    pub units: Vec<ConvWeights>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    pub layers: Vec<LayerWeights>,
}

impl WeightStore {
    /// An empty store shaped like `net`.
    pub fn empty_for(net: &NetworkDef) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| LayerWeights {
                name: l.name.clone(),
                dims: l.dims,
                units: vec![ConvWeights::default(); l.dims.conv_units().len()],
            })
            .collect();
        Self { layers }
    }

    pub fn has_float(&self) -> bool {
        self.units().all(|u| u.float.is_some())
    }

    pub fn has_quant(&self) -> bool {
        self.units().all(|u| u.quant.is_some())
    }

    fn units(&self) -> impl Iterator<Item = &ConvWeights> {
        self.layers.iter().flat_map(|l| &l.units)
    }

    /// Input format of the first quantized convolution, i.e. the format the
    /// network input must be quantized to.
    pub fn input_format(&self) -> Option<QFormat> {
        self.units().next()?.quant.as_ref().map(|q| q.qspec().input_fmt)
    }

    /// Checks layer dims and every tensor shape against `net`.
    pub fn check_against(&self, net: &NetworkDef) -> Result<()> {
        if self.layers.len() != net.layers().len() {
            return Err(Error::Weights(format!(
                "store has {} layers, network has {}",
                self.layers.len(),
                net.layers().len()
            )));
        }
        for (lw, spec) in self.layers.iter().zip(net.layers()) {
            if lw.dims != spec.dims {
                return Err(Error::Weights(format!(
                    "layer {} ({}) dims differ from the topology",
                    spec.index, spec.name
                )));
            }
            let convs = spec.dims.conv_units();
            if lw.units.len() != convs.len() {
                return Err(Error::Weights(format!("layer {} has {} parameter sets", spec.name, lw.units.len())));
            }
            for (cw, (unit, cd)) in lw.units.iter().zip(convs) {
                let what = format!("{}{}", spec.name, unit.suffix());
                check_unit(cw, &cd).map_err(|m| Error::Weights(format!("{what}: {m}")))?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u16).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.name.len() as u16).to_le_bytes());
            out.extend_from_slice(l.name.as_bytes());
            out.push(l.dims.kind().tag());
            match l.dims {
                LayerDims::Conv(c) => {
                    out.extend_from_slice(&(c.in_channels as u32).to_le_bytes());
                    out.extend_from_slice(&(c.out_channels as u32).to_le_bytes());
                    out.extend_from_slice(&[c.kernel as u8, c.stride as u8, c.pad as u8, c.relu as u8]);
                }
                LayerDims::Maxpool { kernel, stride } => out.extend_from_slice(&[kernel as u8, stride as u8]),
                LayerDims::Fire(f) => {
                    for v in [f.in_channels, f.squeeze, f.expand1, f.expand3] {
                        out.extend_from_slice(&(v as u32).to_le_bytes());
                    }
                }
                LayerDims::Avgpool | LayerDims::Softmax => {}
            }
            out.push(l.units.len() as u8);
            for u in &l.units {
                let flags = (u.quant.is_some() as u8 * FLAG_QUANT) | (u.float.is_some() as u8 * FLAG_FLOAT);
                out.push(flags);
                if let Some(q) = &u.quant {
                    out.extend(q.qspec().frac_bits().map(|f| f as i8 as u8));
                    out.extend_from_slice(&(q.weights().data().len() as u32).to_le_bytes());
                    out.extend(q.weights().data().iter().map(|&v| v as u8));
                    out.extend_from_slice(&(q.bias().len() as u32).to_le_bytes());
                    out.extend(q.bias().iter().map(|&v| v as u8));
                }
                if let Some(f) = &u.float {
                    for vals in [f.weights(), f.bias()] {
                        out.extend_from_slice(&(vals.len() as u32).to_le_bytes());
                        for v in vals {
                            out.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightFileError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(WeightFileError::BadMagic(magic));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(WeightFileError::VersionMismatch(version));
        }
        let count = r.u16("layer count")? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16("layer name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "layer name")?.to_vec())
                .map_err(|_| WeightFileError::Malformed("layer name is not UTF-8".into()))?;
            let tag = r.u8("kind tag")?;
            let kind = LayerKind::from_tag(tag)
                .ok_or_else(|| WeightFileError::Malformed(format!("unknown layer kind tag {tag}")))?;
            let dims = match kind {
                LayerKind::Conv => LayerDims::Conv(ConvDims {
                    in_channels: r.u32("conv dims")? as usize,
                    out_channels: r.u32("conv dims")? as usize,
                    kernel: r.u8("conv dims")? as usize,
                    stride: r.u8("conv dims")? as usize,
                    pad: r.u8("conv dims")? as usize,
                    relu: r.u8("conv dims")? != 0,
                }),
                LayerKind::Maxpool => LayerDims::Maxpool {
                    kernel: r.u8("maxpool dims")? as usize,
                    stride: r.u8("maxpool dims")? as usize,
                },
                LayerKind::Fire => LayerDims::Fire(FireDims {
                    in_channels: r.u32("fire dims")? as usize,
                    squeeze: r.u32("fire dims")? as usize,
                    expand1: r.u32("fire dims")? as usize,
                    expand3: r.u32("fire dims")? as usize,
                }),
                LayerKind::Avgpool => LayerDims::Avgpool,
                LayerKind::Softmax => LayerDims::Softmax,
            };
            let convs = dims.conv_units();
            let unit_count = r.u8("unit count")? as usize;
            let mismatch = |msg: String| WeightFileError::ShapeMismatch { layer: name.clone(), msg };
            if unit_count != convs.len() {
                return Err(mismatch(format!("{unit_count} parameter sets, dims imply {}", convs.len())));
            }
            let mut units = Vec::with_capacity(unit_count);
            for (unit, cd) in convs {
                let flags = r.u8("unit flags")?;
                if flags & !(FLAG_QUANT | FLAG_FLOAT) != 0 {
                    return Err(WeightFileError::Malformed(format!("unknown unit flags {flags:#04x}")));
                }
                let n_w = [cd.kernel, cd.kernel, cd.in_channels]
                    .iter()
                    .try_fold(cd.out_channels, |acc, &d| acc.checked_mul(d))
                    .ok_or_else(|| mismatch("dims overflow".into()))?;
                let n_b = cd.out_channels;
                let which = |what: &str| format!("{what} params{}", unit.suffix());
                let mut cw = ConvWeights::default();
                if flags & FLAG_QUANT != 0 {
                    let fr = r.take(4, "quantized formats")?;
                    let frac = [fr[0] as i8 as i32, fr[1] as i8 as i32, fr[2] as i8 as i32, fr[3] as i8 as i32];
                    let qspec =
                        LayerQSpec::from_frac_bits(frac).map_err(|e| mismatch(format!("formats: {e}")))?;
                    let n = r.u32("weight count")? as usize;
                    if n != n_w {
                        return Err(mismatch(format!("{}: {n} weights, dims imply {n_w}", which("quantized"))));
                    }
                    let w: Vec<i8> = r.take(n, "quantized weights")?.iter().map(|&b| b as i8).collect();
                    let m = r.u32("bias count")? as usize;
                    if m != n_b {
                        return Err(mismatch(format!("{}: {m} biases, dims imply {n_b}", which("quantized"))));
                    }
                    let b: Vec<i8> = r.take(m, "quantized bias")?.iter().map(|&b| b as i8).collect();
                    let t = QTensor::new(cd.out_channels, cd.in_channels, cd.kernel, cd.kernel, qspec.weight_fmt, w)
                        .map_err(|e| mismatch(e.to_string()))?;
                    cw.quant = Some(
                        QuantConvParams::new(t, b, qspec, cd.stride, cd.pad).map_err(|e| mismatch(e.to_string()))?,
                    );
                }
                if flags & FLAG_FLOAT != 0 {
                    let n = r.u32("weight count")? as usize;
                    if n != n_w {
                        return Err(mismatch(format!("{}: {n} weights, dims imply {n_w}", which("float"))));
                    }
                    let w = r.f32s(n, "float weights")?;
                    let m = r.u32("bias count")? as usize;
                    if m != n_b {
                        return Err(mismatch(format!("{}: {m} biases, dims imply {n_b}", which("float"))));
                    }
                    let b = r.f32s(m, "float bias")?;
                    cw.float = Some(
                        FloatLayerParams::new(cd.out_channels, cd.in_channels, cd.kernel, cd.stride, cd.pad, w, b)
                            .map_err(|e| mismatch(e.to_string()))?,
                    );
                }
                units.push(cw);
            }
            layers.push(LayerWeights { name, dims, units });
        }
        if r.pos != bytes.len() {
            return Err(WeightFileError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    store.save(path)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore> {
    WeightStore::load(path)
}

fn check_unit(cw: &ConvWeights, cd: &ConvDims) -> std::result::Result<(), String> {
    if let Some(f) = &cw.float {
        let got = (f.out_channels(), f.in_channels(), f.kernel(), f.stride(), f.pad());
        let want = (cd.out_channels, cd.in_channels, cd.kernel, cd.stride, cd.pad);
        if got != want {
            return Err(format!("float params (out, in, k, stride, pad) = {got:?}, expected {want:?}"));
        }
    }
    if let Some(q) = &cw.quant {
        let w = q.weights();
        let got = (w.out_channels(), w.in_channels(), q.kernel(), q.stride(), q.pad());
        let want = (cd.out_channels, cd.in_channels, cd.kernel, cd.stride, cd.pad);
        if got != want {
            return Err(format!("quantized params (out, in, k, stride, pad) = {got:?}, expected {want:?}"));
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], WeightFileError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(WeightFileError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, WeightFileError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, WeightFileError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, WeightFileError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>, WeightFileError> {
        let bytes = self.take(n.checked_mul(4).ok_or(WeightFileError::Truncated(what))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}
