//! Functional model of the SqueezeJet convolution accelerator.
//!
//! The datapath is an array of `P = 2^n` MAC-16 units. Each unit multiplies a
//! 16-wide input-channel chunk by the matching weights and accumulates into a
//! 32-bit register in one cycle; the `P` units work on `P` consecutive output
//! channels in lockstep. Input pixels stream through a rolling row buffer
//! (ITB) holding `kernel` padded rows, and a `kernel x kernel` window (ITBW)
//! slides across it one pixel at a time. Output pixels leave in row-major
//! order with all channels of a pixel produced before the next pixel.
//!
//! The general unit handles the stride-1, 1x1 / 3x3 layers with input
//! channels a multiple of 16 and output channels a multiple of `P`. The first
//! network layer (3 input channels, 3x3, stride 2) runs on a dedicated unit
//! that zero-pads its channels to one 16-lane chunk.
//!
//! Arithmetic follows the integer contract of
//! [`conv2d_quant_ref`](crate::reference::conv2d_quant_ref): bias aligned to
//! the accumulator scale, exact accumulation, then one shift-round-saturate
//! to the output format.

use std::borrow::Cow;
use std::fmt;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed::{rescale, saturate_i16};
use crate::fmap::Fmap;
use crate::graph::topology::{LayerDims, LayerSpec};
use crate::quantizer::QuantConvParams;
use crate::reference::{check_fire_shapes, conv_output_dims};

/// Input-channel chunk processed by one MAC-16 unit per cycle.
pub const LANES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqjConfig {
    mac_units: usize,
    clock_mhz: f64,
}

impl Default for SqjConfig {
    fn default() -> Self {
        Self { mac_units: 8, clock_mhz: 100.0 }
    }
}

impl SqjConfig {
    pub fn new(mac_units: usize, clock_mhz: f64) -> Result<Self> {
        if mac_units < 4 || !mac_units.is_power_of_two() {
            return Err(Error::Invalid(format!("MAC-16 unit count must be 2^n with n >= 2, got {mac_units}")));
        }
        if !(clock_mhz.is_finite() && clock_mhz > 0.0) {
            return Err(Error::Invalid(format!("clock must be a positive frequency, got {clock_mhz} MHz")));
        }
        Ok(Self { mac_units, clock_mhz })
    }

    pub fn mac_units(&self) -> usize {
        self.mac_units
    }

    pub fn clock_mhz(&self) -> f64 {
        self.clock_mhz
    }

    pub fn cycles_to_ms(&self, cycles: u64) -> f64 {
        cycles as f64 / (self.clock_mhz * 1000.0)
    }
}

/// One MAC-16 operation: `acc + sum(w[i] * a[i])` in exact arithmetic.
/// A result outside the 32-bit accumulator is an error.
#[inline]
pub fn mac16(weights: &[i8; LANES], acts: &[i16; LANES], acc: i32) -> Result<i32> {
    let mut sum = acc as i64;
    for i in 0..LANES {
        sum += weights[i] as i64 * acts[i] as i64;
    }
    i32::try_from(sum).map_err(|_| Error::AccumulatorOverflow(sum))
}

/// Work counters of one or more accelerator invocations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SqjStats {
    /// Cycles of the MAC array; each drives all `P` units once.
    pub mac_cycles: u64,
    /// Individual MAC-16 operations, `P` per full cycle.
    pub mac16_calls: u64,
    pub buffer_init_cycles: u64,
    pub pixels_emitted: u64,
}

impl AddAssign for SqjStats {
    fn add_assign(&mut self, o: Self) {
        self.mac_cycles += o.mac_cycles;
        self.mac16_calls += o.mac16_calls;
        self.buffer_init_cycles += o.buffer_init_cycles;
        self.pixels_emitted += o.pixels_emitted;
    }
}

/// Rolling input tile buffer: `kernel` zero-padded rows of `lanes` channels.
struct Itb<'a> {
    input: &'a Fmap<i16>,
    pad: usize,
    kernel: usize,
    padded_w: usize,
    lanes: usize,
    rows: Vec<i16>,
    loaded: usize,
}

impl<'a> Itb<'a> {
    fn new(input: &'a Fmap<i16>, kernel: usize, pad: usize, lanes: usize) -> Self {
        let padded_w = input.width() + 2 * pad;
        Self { input, pad, kernel, padded_w, lanes, rows: vec![0; kernel * padded_w * lanes], loaded: 0 }
    }

    /// Streams padded rows in until rows `[.., upto)` are resident.
    fn fill_to(&mut self, upto: usize) {
        while self.loaded < upto {
            let py = self.loaded;
            let slot = py % self.kernel;
            let row = &mut self.rows[slot * self.padded_w * self.lanes..(slot + 1) * self.padded_w * self.lanes];
            row.fill(0);
            let iy = py as isize - self.pad as isize;
            if iy >= 0 && (iy as usize) < self.input.height() {
                let c = self.input.channels();
                for ix in 0..self.input.width() {
                    let px = ix + self.pad;
                    row[px * self.lanes..px * self.lanes + c].copy_from_slice(self.input.px(ix, iy as usize));
                }
            }
            self.loaded += 1;
        }
    }

    #[inline]
    fn pixel(&self, px: usize, py: usize) -> &[i16] {
        debug_assert!(py < self.loaded && py + self.kernel >= self.loaded);
        let slot = py % self.kernel;
        let start = (slot * self.padded_w + px) * self.lanes;
        &self.rows[start..start + self.lanes]
    }
}

/// Kernel-sized window over the ITB, laid out `[ky][kx][lane]`.
struct Itbw {
    kernel: usize,
    lanes: usize,
    data: Vec<i16>,
}

impl Itbw {
    fn new(kernel: usize, lanes: usize) -> Self {
        Self { kernel, lanes, data: vec![0; kernel * kernel * lanes] }
    }

    fn load_column(&mut self, itb: &Itb, kx: usize, px: usize, py0: usize) {
        for ky in 0..self.kernel {
            let dst = (ky * self.kernel + kx) * self.lanes;
            self.data[dst..dst + self.lanes].copy_from_slice(itb.pixel(px, py0 + ky));
        }
    }

    /// Positions the window at padded origin `(px0, py0)`. When moving right
    /// by `shift < kernel` columns the overlap is kept and only new columns
    /// are read from the ITB.
    fn slide(&mut self, itb: &Itb, px0: usize, py0: usize, shift: Option<usize>) {
        let k = self.kernel;
        let keep = match shift {
            Some(s) if s < k => k - s,
            _ => 0,
        };
        if keep > 0 {
            let s = k - keep;
            for ky in 0..k {
                let row = ky * k * self.lanes;
                self.data.copy_within(row + s * self.lanes..row + k * self.lanes, row);
            }
        }
        for kx in keep..k {
            self.load_column(itb, kx, px0 + kx, py0);
        }
    }

    #[inline]
    fn chunk(&self, ky: usize, kx: usize, chunk: usize) -> &[i16; LANES] {
        let start = (ky * self.kernel + kx) * self.lanes + chunk * LANES;
        self.data[start..start + LANES].try_into().expect("16 lanes")
    }
}

/// The accelerator model. Configuration is fixed at construction.
#[derive(Debug, Clone, Copy, Default)]
pub struct SqjEngine {
    cfg: SqjConfig,
}

impl SqjEngine {
    pub fn new(cfg: SqjConfig) -> Self {
        Self { cfg }
    }

    pub fn config(&self) -> &SqjConfig {
        &self.cfg
    }

    fn check_general(&self, input: &Fmap<i16>, params: &QuantConvParams) -> Result<()> {
        let w = params.weights();
        if input.channels() != w.in_channels() {
            return Err(Error::Dimension(format!(
                "input has {} channels, weights expect {}",
                input.channels(),
                w.in_channels()
            )));
        }
        if params.stride() != 1 {
            return Err(Error::Constraint(format!("stride must be 1, got {}", params.stride())));
        }
        match (params.kernel(), params.pad()) {
            (1, 0) | (3, 1) => {}
            (k, p) => {
                return Err(Error::Constraint(format!("kernel must be 1x1 pad 0 or 3x3 pad 1, got {k}x{k} pad {p}")))
            }
        }
        if w.in_channels() == 0 || !w.in_channels().is_multiple_of(LANES) {
            return Err(Error::Constraint(format!(
                "input channels must be a multiple of {LANES}, got {}",
                w.in_channels()
            )));
        }
        if w.out_channels() == 0 || !w.out_channels().is_multiple_of(self.cfg.mac_units) {
            return Err(Error::Constraint(format!(
                "output channels must be a multiple of the {} MAC-16 units, got {}",
                self.cfg.mac_units,
                w.out_channels()
            )));
        }
        Ok(())
    }

    fn check_first(&self, input: &Fmap<i16>, params: &QuantConvParams) -> Result<()> {
        let w = params.weights();
        if input.channels() != 3 || w.in_channels() != 3 {
            return Err(Error::Constraint(format!(
                "first-layer unit takes 3 input channels, got input {} / weights {}",
                input.channels(),
                w.in_channels()
            )));
        }
        if params.kernel() != 3 || params.stride() != 2 || params.pad() != 0 {
            return Err(Error::Constraint(format!(
                "first-layer unit is 3x3 stride 2 pad 0, got {k}x{k} stride {} pad {}",
                params.stride(),
                params.pad(),
                k = params.kernel()
            )));
        }
        Ok(())
    }

    /// Runs a stride-1 layer, handing each output pixel to `sink` as it is
    /// produced.
    pub fn conv_streamed(
        &self,
        input: &Fmap<i16>,
        params: &QuantConvParams,
        relu: bool,
        sink: &mut dyn FnMut(usize, usize, &[i16]),
    ) -> Result<SqjStats> {
        self.check_general(input, params)?;
        self.stream(input, params, relu, sink)
    }

    pub fn conv_sqj(&self, input: &Fmap<i16>, params: &QuantConvParams, relu: bool) -> Result<(Fmap<i16>, SqjStats)> {
        self.check_general(input, params)?;
        self.collect(input, params, relu)
    }

    /// The dedicated first-layer unit.
    pub fn conv_first_layer(
        &self,
        input: &Fmap<i16>,
        params: &QuantConvParams,
        relu: bool,
    ) -> Result<(Fmap<i16>, SqjStats)> {
        self.check_first(input, params)?;
        self.collect(input, params, relu)
    }

    /// Squeeze, then both expands streamed straight into their halves of
    /// the concatenated output.
    pub fn fire(
        &self,
        input: &Fmap<i16>,
        squeeze: &QuantConvParams,
        expand1: &QuantConvParams,
        expand3: &QuantConvParams,
    ) -> Result<(Fmap<i16>, SqjStats)> {
        check_fire_shapes(
            squeeze.weights().out_channels(),
            expand1.weights().in_channels(),
            expand3.weights().in_channels(),
        )?;
        let (squeezed, mut stats) = self.conv_sqj(input, squeeze, true)?;
        let (e1, e3) = (expand1.weights().out_channels(), expand3.weights().out_channels());
        let mut out = Fmap::zeros(squeezed.width(), squeezed.height(), e1 + e3);
        stats += self.conv_streamed(&squeezed, expand1, true, &mut |x, y, px| {
            out.px_mut(x, y)[..e1].copy_from_slice(px);
        })?;
        stats += self.conv_streamed(&squeezed, expand3, true, &mut |x, y, px| {
            out.px_mut(x, y)[e1..].copy_from_slice(px);
        })?;
        Ok((out, stats))
    }

    /// Output coordinates in the order the accelerator emits them.
    pub fn trace_stream(&self, input: &Fmap<i16>, params: &QuantConvParams) -> Result<Vec<(usize, usize)>> {
        let mut trace = Vec::new();
        self.conv_streamed(input, params, false, &mut |x, y, _| trace.push((x, y)))?;
        Ok(trace)
    }

    fn collect(&self, input: &Fmap<i16>, params: &QuantConvParams, relu: bool) -> Result<(Fmap<i16>, SqjStats)> {
        let (ow, oh) = conv_output_dims(input.width(), input.height(), params.kernel(), params.stride(), params.pad())?;
        let mut out = Fmap::zeros(ow, oh, params.weights().out_channels());
        let stats = self.stream(input, params, relu, &mut |x, y, px| out.px_mut(x, y).copy_from_slice(px))?;
        Ok((out, stats))
    }

    fn stream(
        &self,
        input: &Fmap<i16>,
        params: &QuantConvParams,
        relu: bool,
        sink: &mut dyn FnMut(usize, usize, &[i16]),
    ) -> Result<SqjStats> {
        let wts = params.weights();
        let (k, s, pad) = (params.kernel(), params.stride(), params.pad());
        let (cin, cout) = (wts.in_channels(), wts.out_channels());
        let chunks = cin.div_ceil(LANES);
        let lanes = chunks * LANES;
        let (ow, oh) = conv_output_dims(input.width(), input.height(), k, s, pad)?;

        // Parameter store, zero-padded to whole chunks when needed.
        let wbuf: Cow<[i8]> = if lanes == cin {
            Cow::Borrowed(wts.data())
        } else {
            let mut padded = vec![0i8; cout * k * k * lanes];
            for o in 0..cout {
                for ky in 0..k {
                    for kx in 0..k {
                        let dst = ((o * k + ky) * k + kx) * lanes;
                        padded[dst..dst + cin].copy_from_slice(wts.tap(o, ky, kx));
                    }
                }
            }
            Cow::Owned(padded)
        };
        let weight_chunk = |o: usize, ky: usize, kx: usize, c: usize| -> &[i8; LANES] {
            let start = ((o * k + ky) * k + kx) * lanes + c * LANES;
            wbuf[start..start + LANES].try_into().expect("16 lanes")
        };

        let bias = params.aligned_bias()?;
        let acc_frac = params.qspec().acc_frac();
        let out_frac = params.qspec().output_fmt.frac_bits();
        let p = self.cfg.mac_units;

        let mut stats = SqjStats {
            buffer_init_cycles: (chunks * k * input.width()) as u64,
            ..Default::default()
        };
        let mut itb = Itb::new(input, k, pad, lanes);
        let mut window = Itbw::new(k, lanes);
        let mut accs = vec![0i32; p];
        let mut pixel = vec![0i16; cout];

        for oy in 0..oh {
            itb.fill_to(oy * s + k);
            for ox in 0..ow {
                window.slide(&itb, ox * s, oy * s, if ox == 0 { None } else { Some(s) });
                for group_start in (0..cout).step_by(p) {
                    let units = p.min(cout - group_start);
                    accs[..units].copy_from_slice(&bias[group_start..group_start + units]);
                    for ky in 0..k {
                        for kx in 0..k {
                            for c in 0..chunks {
                                let acts = window.chunk(ky, kx, c);
                                // One cycle: every unit consumes the same activations.
                                for (u, acc) in accs[..units].iter_mut().enumerate() {
                                    *acc = mac16(weight_chunk(group_start + u, ky, kx, c), acts, *acc)?;
                                }
                                stats.mac_cycles += 1;
                                stats.mac16_calls += units as u64;
                            }
                        }
                    }
                    for (u, &acc) in accs[..units].iter().enumerate() {
                        let v = saturate_i16(rescale(acc as i64, acc_frac, out_frac));
                        pixel[group_start + u] = if relu { v.max(0) } else { v };
                    }
                }
                sink(ox, oy, &pixel);
                stats.pixels_emitted += 1;
            }
        }
        Ok(stats)
    }
}

/// Spatial and channel extent of one accelerated convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

/// Analytic cycle estimate. `mac_cycles` counts MAC-array cycles only;
/// `buffer_init_cycles` models one ITB fill pass. Memory traffic, pipeline
/// fill and stalls are not modelled, so latencies are lower bounds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub mac_cycles: u64,
    pub buffer_init_cycles: u64,
    pub total_cycles: u64,
    pub latency_ms: f64,
}

impl CycleReport {
    fn from_parts(mac_cycles: u64, buffer_init_cycles: u64, cfg: &SqjConfig) -> Self {
        let total = mac_cycles + buffer_init_cycles;
        Self { mac_cycles, buffer_init_cycles, total_cycles: total, latency_ms: cfg.cycles_to_ms(total) }
    }

    pub fn combine(&self, other: &CycleReport, cfg: &SqjConfig) -> Self {
        Self::from_parts(
            self.mac_cycles + other.mac_cycles,
            self.buffer_init_cycles + other.buffer_init_cycles,
            cfg,
        )
    }

    /// Machine-readable `key=value` record.
    pub fn to_kv(&self) -> String {
        format!(
            "mac_cycles={} buffer_init_cycles={} total_cycles={} latency_ms={}",
            self.mac_cycles, self.buffer_init_cycles, self.total_cycles, self.latency_ms
        )
    }

    pub fn from_kv(s: &str) -> Result<Self> {
        let mut r = CycleReport::default();
        let bad = || Error::Invalid(format!("malformed cycle record {s:?}"));
        let mut seen = 0;
        for tok in s.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(bad)?;
            match k {
                "mac_cycles" => r.mac_cycles = v.parse().map_err(|_| bad())?,
                "buffer_init_cycles" => r.buffer_init_cycles = v.parse().map_err(|_| bad())?,
                "total_cycles" => r.total_cycles = v.parse().map_err(|_| bad())?,
                "latency_ms" => r.latency_ms = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
            seen += 1;
        }
        if seen != 4 {
            return Err(bad());
        }
        Ok(r)
    }
}

impl fmt::Display for CycleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} MAC cycles + {} buffer-init cycles = {} cycles ({:.4} ms)",
            self.mac_cycles, self.buffer_init_cycles, self.total_cycles, self.latency_ms
        )
    }
}

/// `mac_cycles = H_out * W_out * ceil(C_in/16) * K^2 * ceil(C_out/P)` and
/// `buffer_init_cycles = ceil(C_in/16) * K * W_in`.
pub fn estimate_cycles(g: &ConvGeometry, cfg: &SqjConfig) -> CycleReport {
    let chunks = g.c_in.div_ceil(LANES) as u64;
    let groups = g.c_out.div_ceil(cfg.mac_units) as u64;
    let k = g.kernel as u64;
    let mac = g.h_out as u64 * g.w_out as u64 * chunks * k * k * groups;
    let init = chunks * k * g.w_in as u64;
    CycleReport::from_parts(mac, init, cfg)
}

/// Cycle estimate of a Conv or Fire layer (sum over a Fire module's three
/// convolutions); `None` for layers the accelerator does not run.
pub fn estimate_layer_cycles(spec: &LayerSpec, cfg: &SqjConfig) -> Option<CycleReport> {
    let geometry = |cd: &crate::graph::topology::ConvDims, w_in: usize, h_in: usize| {
        let (w_out, h_out) = conv_output_dims(w_in, h_in, cd.kernel, cd.stride, cd.pad).ok()?;
        Some(ConvGeometry { w_in, h_out, w_out, c_in: cd.in_channels, c_out: cd.out_channels, kernel: cd.kernel })
    };
    match &spec.dims {
        LayerDims::Conv(cd) => Some(estimate_cycles(&geometry(cd, spec.input.width, spec.input.height)?, cfg)),
        LayerDims::Fire(fd) => {
            let (w, h) = (spec.input.width, spec.input.height);
            let mut total = CycleReport::from_parts(0, 0, cfg);
            for cd in [fd.squeeze_conv(), fd.expand1_conv(), fd.expand3_conv()] {
                total = total.combine(&estimate_cycles(&geometry(&cd, w, h)?, cfg), cfg);
            }
            Some(total)
        }
        _ => None,
    }
}
