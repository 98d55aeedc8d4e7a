//! Latency benchmarks and the arithmetic derived from them (fps, speedup,
//! power efficiency), plus report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::error::{Error, Result};
use crate::graph::forward::{forward, ExecPlan, NetInput};
use crate::graph::topology::{LayerKind, NetworkDef};
use crate::graph::weights::WeightStore;
use crate::preprocess::{prepare_ppm, PreprocessConfig};
use crate::service::Client;

pub const ROW_PREPROCESSING: &str = "Img Preprocessing";
pub const ROW_INFERENCE: &str = "SqN Inference";
pub const ROW_TRANSFER: &str = "Net Transfer";
pub const ROW_END_TO_END: &str = "End-To-End";
pub const ROW_TOTAL: &str = "Total";
pub const ROW_CONV_FIRE: &str = "Total Conv+Fire";

/// Arithmetic mean in milliseconds. The sum is taken in integer nanoseconds,
/// so the result does not depend on sample order.
pub fn mean_ms(samples: &[Duration]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let total: u128 = samples.iter().map(Duration::as_nanos).sum();
    total as f64 / samples.len() as f64 / 1e6
}

fn positive(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::Invalid(format!("{what} must be positive and finite, got {v}")))
    }
}

pub fn compute_fps(end_to_end_ms: f64) -> Result<f64> {
    Ok(1000.0 / positive("end-to-end latency", end_to_end_ms)?)
}

pub fn compute_speedup(baseline_ms: f64, accelerated_ms: f64) -> Result<f64> {
    Ok(positive("baseline latency", baseline_ms)? / positive("accelerated latency", accelerated_ms)?)
}

/// How many times less power `accelerated_w` draws than `baseline_w`.
pub fn watts_ratio(baseline_w: f64, accelerated_w: f64) -> Result<f64> {
    Ok(positive("baseline power", baseline_w)? / positive("accelerated power", accelerated_w)?)
}

/// Chip power per named platform, in watts. Configured, never measured.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PowerProfile {
    pub platforms: BTreeMap<String, f64>,
}

impl PowerProfile {
    pub fn new(platforms: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let p = Self { platforms: platforms.into_iter().collect() };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, &w) in &self.platforms {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Config(format!("power for {name:?} must be positive, got {w}")));
            }
        }
        Ok(())
    }

    pub fn watts(&self, platform: &str) -> Result<f64> {
        self.platforms
            .get(platform)
            .copied()
            .ok_or_else(|| Error::Config(format!("no power figure for platform {platform:?}")))
    }
}

/// Power efficiency of platform `a` relative to `b`: `watts(b) / watts(a)`.
pub fn power_efficiency(profile: &PowerProfile, a: &str, b: &str) -> Result<f64> {
    watts_ratio(profile.watts(b)?, profile.watts(a)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemoteRows {
    pub img_preprocessing_ms: f64,
    pub inference_ms: f64,
    pub net_transfer_ms: f64,
    pub end_to_end_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    /// `"<index>:<Kind>"`, e.g. `"3:Fire"`.
    pub label: String,
    pub ms: f64,
}

impl LayerRow {
    pub fn kind(&self) -> Option<LayerKind> {
        self.label.split_once(':').and_then(|(_, k)| LayerKind::from_title(k))
    }
}

/// Sum of the Conv and Fire rows.
pub fn total_conv_fire(rows: &[LayerRow]) -> f64 {
    rows.iter().filter(|r| r.kind().is_some_and(LayerKind::is_conv_or_fire)).map(|r| r.ms).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalRows {
    pub layers: Vec<LayerRow>,
    pub total_conv_fire_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub iterations: usize,
    pub remote: Option<RemoteRows>,
    pub local: Option<LocalRows>,
}

/// One remote iteration as seen by the client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RemoteSample {
    pub preprocessing: Duration,
    pub inference: Duration,
    pub net_transfer: Duration,
    pub end_to_end: Duration,
}

/// Source of remote iterations; the network client in production, synthetic
/// samples in tests.
pub trait RemoteProbe {
    fn sample(&mut self) -> Result<RemoteSample>;
}

/// Decodes, resizes and classifies one PPM image per iteration.
pub struct NetworkProbe<'a> {
    pub client: Client,
    pub ppm: &'a [u8],
    pub preprocess: &'a PreprocessConfig,
    pub clock: &'a dyn Clock,
}

impl RemoteProbe for NetworkProbe<'_> {
    fn sample(&mut self) -> Result<RemoteSample> {
        let t0 = self.clock.now();
        let image = prepare_ppm(self.ppm, self.preprocess)?;
        let preprocessing = self.clock.now().saturating_sub(t0);
        let c = self.client.classify(&image, self.clock).map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(RemoteSample {
            preprocessing,
            inference: c.timing.inference,
            net_transfer: c.timing.net_transfer,
            end_to_end: c.timing.end_to_end,
        })
    }
}

/// Runs `iterations` samples strictly in sequence and averages each row.
/// `Total` is end-to-end plus preprocessing, averaged per iteration.
pub fn bench_remote(probe: &mut dyn RemoteProbe, iterations: usize) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(Error::Invalid("iterations must be at least 1".into()));
    }
    let mut samples = Vec::with_capacity(iterations);
    for i in 0..iterations {
        let s = probe.sample().map_err(|e| Error::Invalid(format!("iteration {i} failed: {e}")))?;
        samples.push(s);
    }
    let col = |f: fn(&RemoteSample) -> Duration| mean_ms(&samples.iter().map(f).collect::<Vec<_>>());
    Ok(BenchReport {
        iterations,
        remote: Some(RemoteRows {
            img_preprocessing_ms: col(|s| s.preprocessing),
            inference_ms: col(|s| s.inference),
            net_transfer_ms: col(|s| s.net_transfer),
            end_to_end_ms: col(|s| s.end_to_end),
            total_ms: col(|s| s.end_to_end + s.preprocessing),
        }),
        local: None,
    })
}

/// Per-layer means of `samples[iteration][layer]`.
pub fn local_rows(net: &NetworkDef, samples: &[Vec<Duration>]) -> Result<LocalRows> {
    let n = net.layers().len();
    if let Some(bad) = samples.iter().find(|s| s.len() != n) {
        return Err(Error::Invalid(format!("sample has {} layer timings, network has {n} layers", bad.len())));
    }
    let layers: Vec<LayerRow> = net
        .layers()
        .iter()
        .enumerate()
        .map(|(l, spec)| LayerRow {
            label: spec.label(),
            ms: mean_ms(&samples.iter().map(|s| s[l]).collect::<Vec<_>>()),
        })
        .collect();
    let totals: Vec<Duration> = samples.iter().map(|s| s.iter().sum()).collect();
    Ok(LocalRows { total_conv_fire_ms: total_conv_fire(&layers), total_ms: mean_ms(&totals), layers })
}

/// Times every layer of `iterations` forward passes.
pub fn bench_local(
    net: &NetworkDef,
    store: &WeightStore,
    plan: &ExecPlan,
    input: NetInput<'_>,
    iterations: usize,
    clock: &dyn Clock,
) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(Error::Invalid("iterations must be at least 1".into()));
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let out = forward(net, store, plan, input, Some(clock))?;
        samples.push(out.per_layer.expect("clock supplied"));
    }
    Ok(BenchReport { iterations, remote: None, local: Some(local_rows(net, &samples)?) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    JsonLines,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "jsonl" | "json-lines" => Ok(ReportFormat::JsonLines),
            other => Err(Error::Invalid(format!("unknown report format {other:?} (table, csv, jsonl)"))),
        }
    }
}

/// Flat record shared by the csv and json-lines formats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Record {
    section: String,
    row: String,
    value: f64,
}

fn records(r: &BenchReport) -> Vec<Record> {
    let rec = |section: &str, row: &str, value: f64| Record { section: section.into(), row: row.into(), value };
    let mut out = vec![rec("meta", "iterations", r.iterations as f64)];
    if let Some(m) = &r.remote {
        out.push(rec("remote", ROW_PREPROCESSING, m.img_preprocessing_ms));
        out.push(rec("remote", ROW_INFERENCE, m.inference_ms));
        out.push(rec("remote", ROW_TRANSFER, m.net_transfer_ms));
        out.push(rec("remote", ROW_END_TO_END, m.end_to_end_ms));
        out.push(rec("remote", ROW_TOTAL, m.total_ms));
    }
    if let Some(l) = &r.local {
        out.extend(l.layers.iter().map(|row| rec("layer", &row.label, row.ms)));
        out.push(rec("local", ROW_CONV_FIRE, l.total_conv_fire_ms));
        out.push(rec("local", ROW_TOTAL, l.total_ms));
    }
    out
}

fn from_records(recs: Vec<Record>) -> Result<BenchReport> {
    let bad = |msg: String| Error::Invalid(format!("report: {msg}"));
    let mut iterations = None;
    let mut remote: BTreeMap<String, f64> = BTreeMap::new();
    let mut layers = Vec::new();
    let mut local: BTreeMap<String, f64> = BTreeMap::new();
    for r in recs {
        match r.section.as_str() {
            "meta" if r.row == "iterations" => {
                if r.value < 0.0 || r.value.fract() != 0.0 {
                    return Err(bad(format!("iterations {} is not a count", r.value)));
                }
                iterations = Some(r.value as usize);
            }
            "remote" => {
                remote.insert(r.row, r.value);
            }
            "layer" => layers.push(LayerRow { label: r.row, ms: r.value }),
            "local" => {
                local.insert(r.row, r.value);
            }
            _ => return Err(bad(format!("unknown row {}/{}", r.section, r.row))),
        }
    }
    let take = |m: &mut BTreeMap<String, f64>, k: &str| m.remove(k).ok_or_else(|| bad(format!("missing row {k:?}")));
    let remote = if remote.is_empty() {
        None
    } else {
        let rows = RemoteRows {
            img_preprocessing_ms: take(&mut remote, ROW_PREPROCESSING)?,
            inference_ms: take(&mut remote, ROW_INFERENCE)?,
            net_transfer_ms: take(&mut remote, ROW_TRANSFER)?,
            end_to_end_ms: take(&mut remote, ROW_END_TO_END)?,
            total_ms: take(&mut remote, ROW_TOTAL)?,
        };
        if let Some(k) = remote.keys().next() {
            return Err(bad(format!("unknown remote row {k:?}")));
        }
        Some(rows)
    };
    let local = if layers.is_empty() && local.is_empty() {
        None
    } else {
        let rows = LocalRows {
            layers,
            total_conv_fire_ms: take(&mut local, ROW_CONV_FIRE)?,
            total_ms: take(&mut local, ROW_TOTAL)?,
        };
        if let Some(k) = local.keys().next() {
            return Err(bad(format!("unknown local row {k:?}")));
        }
        Some(rows)
    };
    Ok(BenchReport { iterations: iterations.ok_or_else(|| bad("missing iteration count".into()))?, remote, local })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_csv_line(line: &str) -> Result<Vec<String>> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut chars = line.chars().peekable();
    let mut quoted = false;
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', true) => quoted = false,
            ('"', false) if cur.is_empty() => quoted = true,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            (c, _) => cur.push(c),
        }
    }
    if quoted {
        return Err(Error::Invalid(format!("unterminated quote in csv line {line:?}")));
    }
    fields.push(cur);
    Ok(fields)
}

pub fn render_report(r: &BenchReport, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Table => {
            if let Some(m) = &r.remote {
                let _ = writeln!(out, "Remote latency (ms, mean of {} iterations)", r.iterations);
                for (name, v) in [
                    (ROW_PREPROCESSING, m.img_preprocessing_ms),
                    (ROW_INFERENCE, m.inference_ms),
                    (ROW_TRANSFER, m.net_transfer_ms),
                    (ROW_END_TO_END, m.end_to_end_ms),
                    (ROW_TOTAL, m.total_ms),
                ] {
                    let _ = writeln!(out, "  {name:<20} {v:>12.4}");
                }
                if let Ok(fps) = compute_fps(m.end_to_end_ms) {
                    let _ = writeln!(out, "  {:<20} {fps:>12.2}", "fps");
                }
            }
            if let Some(l) = &r.local {
                let _ = writeln!(out, "Per-layer latency (ms, mean of {} iterations)", r.iterations);
                for row in &l.layers {
                    let _ = writeln!(out, "  {:<20} {:>12.4}", row.label, row.ms);
                }
                let _ = writeln!(out, "  {ROW_CONV_FIRE:<20} {:>12.4}", l.total_conv_fire_ms);
                let _ = writeln!(out, "  {ROW_TOTAL:<20} {:>12.4}", l.total_ms);
            }
        }
        ReportFormat::Csv => {
            out.push_str("section,row,value\n");
            for rec in records(r) {
                let _ = writeln!(out, "{},{},{}", rec.section, csv_field(&rec.row), rec.value);
            }
        }
        ReportFormat::JsonLines => {
            for rec in records(r) {
                out.push_str(&serde_json::to_string(&rec).expect("plain record serializes"));
                out.push('\n');
            }
        }
    }
    out
}

/// Inverse of [`render_report`] for the machine formats.
pub fn parse_report(text: &str, format: ReportFormat) -> Result<BenchReport> {
    let mut recs = Vec::new();
    match format {
        ReportFormat::Table => return Err(Error::Invalid("the table format is not machine-readable".into())),
        ReportFormat::Csv => {
            let mut lines = text.lines();
            if lines.next() != Some("section,row,value") {
                return Err(Error::Invalid("csv report must start with the header section,row,value".into()));
            }
            for line in lines.filter(|l| !l.is_empty()) {
                let f = split_csv_line(line)?;
                let [section, row, value] = <[String; 3]>::try_from(f)
                    .map_err(|f| Error::Invalid(format!("csv line has {} fields: {line:?}", f.len())))?;
                let value = value.parse().map_err(|_| Error::Invalid(format!("bad number {value:?}")))?;
                recs.push(Record { section, row, value });
            }
        }
        ReportFormat::JsonLines => {
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                recs.push(serde_json::from_str(line).map_err(|e| Error::Invalid(format!("json line: {e}")))?);
            }
        }
    }
    from_records(recs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ScriptedClock;

    struct Fixed(Vec<RemoteSample>);

    impl RemoteProbe for Fixed {
        fn sample(&mut self) -> Result<RemoteSample> {
            Ok(self.0.remove(0))
        }
    }

    fn ms(v: u64) -> Duration {
        Duration::from_millis(v)
    }

    #[test]
    fn mean_of_one_to_hundred() {
        let s: Vec<Duration> = (1..=100).map(ms).collect();
        assert_eq!(mean_ms(&s), 50.5);
    }

    #[test]
    fn single_iteration_is_the_measurement() {
        let s = RemoteSample { preprocessing: ms(10), inference: ms(200), net_transfer: ms(30), end_to_end: ms(230) };
        let r = bench_remote(&mut Fixed(vec![s]), 1).unwrap().remote.unwrap();
        assert_eq!(
            (r.img_preprocessing_ms, r.inference_ms, r.net_transfer_ms, r.end_to_end_ms, r.total_ms),
            (10.0, 200.0, 30.0, 230.0, 240.0)
        );
    }

    #[test]
    fn fps_and_ratios() {
        assert_eq!(compute_fps(1000.0).unwrap(), 1.0);
        assert!(compute_fps(0.0).is_err());
        assert!(compute_speedup(1.0, -1.0).is_err());
        assert_eq!(compute_speedup(3.5, 3.5).unwrap(), 1.0);
        let p = PowerProfile::new([("a".to_string(), 2.0), ("b".to_string(), 2.0)]).unwrap();
        assert_eq!(power_efficiency(&p, "a", "b").unwrap(), 1.0);
        let e = power_efficiency(&p, "a", "zynq").unwrap_err().to_string();
        assert!(e.contains("zynq"), "{e}");
        assert!(PowerProfile::new([("x".to_string(), 0.0)]).is_err());
    }

    #[test]
    fn frozen_clock_gives_zero_rows() {
        let net = NetworkDef::parse(
            "input 9x9x3\n1 conv c in=9x9x3 out=16 kernel=3 stride=2 pad=0 relu=1\n\
             2 fire f in=4x4x16 squeeze=16 expand1=8 expand3=8\n3 avgpool a in=4x4x16\n4 softmax s in=1x1x16\n",
        )
        .unwrap();
        let store = crate::graph::init::random_float_store(&net, 1);
        let plan = ExecPlan::new(&net, crate::graph::forward::Mode::Float);
        let x = crate::fmap::Fmap::<f32>::zeros(9, 9, 3);
        let r = bench_local(&net, &store, &plan, NetInput::Float(&x), 3, &ScriptedClock::frozen()).unwrap();
        let l = r.local.unwrap();
        assert_eq!(l.layers.len(), 4);
        assert!(l.layers.iter().all(|r| r.ms == 0.0));
        assert_eq!((l.total_ms, l.total_conv_fire_ms), (0.0, 0.0));
    }

    #[test]
    fn remote_report_has_no_layer_rows() {
        let s = RemoteSample { preprocessing: ms(1), inference: ms(2), net_transfer: ms(3), end_to_end: ms(5) };
        let r = bench_remote(&mut Fixed(vec![s]), 1).unwrap();
        let csv = render_report(&r, ReportFormat::Csv);
        assert!(!csv.contains("layer,"));
        let table = render_report(&r, ReportFormat::Table);
        for row in [ROW_PREPROCESSING, ROW_INFERENCE, ROW_TRANSFER, ROW_END_TO_END, ROW_TOTAL] {
            assert!(table.contains(row), "{row}");
        }
        assert!(!table.contains("Per-layer"));
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(split_csv_line(&format!("a,{},1", csv_field("x,\"y\""))).unwrap(), ["a", "x,\"y\"", "1"]);
    }
}
