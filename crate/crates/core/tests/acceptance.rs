//! End-to-end acceptance run. One line per criterion; exits non-zero if any
//! criterion fails.

mod common;

use std::io::{Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{
    check_response, mutate_frame, naive_quant_conv, quant_bound_violations, quantized_tiny, quantized_v11,
    random_image, random_qconv, random_qfmap, rng, valid_frame, MockClassifier,
};
use rand::Rng;
use sqj_core::bench::{
    compute_fps, compute_speedup, parse_report, power_efficiency, render_report, total_conv_fire, BenchReport,
    LayerRow, LocalRows, PowerProfile, RemoteRows, ReportFormat,
};
use sqj_core::clock::MonotonicClock;
use sqj_core::graph::forward::{forward, ExecPlan, Mode, NetInput};
use sqj_core::graph::topology::{squeezenet_v1_1, LayerKind};
use sqj_core::graph::weights::{load_weights, save_weights};
use sqj_core::preprocess::{decode_ppm, encode_ppm, normalize_quantize, PreprocessConfig};
use sqj_core::service::{serve, Classifier, Client, InferenceEngine, ServerConfig};
use sqj_core::sqj::{estimate_layer_cycles, SqjConfig, SqjEngine};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bit_exact_dataflow() -> Outcome {
    let t = Instant::now();
    let engine = SqjEngine::new(SqjConfig::new(8, 100.0).unwrap());
    let mut r = rng(0xacc1);
    let cases = 1200;
    let mut mismatches = 0;
    for _ in 0..cases {
        let c_in = [16, 32, 48][r.random_range(0..3)];
        let c_out = [8, 16, 32][r.random_range(0..3)];
        let (k, pad) = if r.random() { (1, 0) } else { (3, 1) };
        let (w, h) = (r.random_range(1..=8), r.random_range(1..=8));
        let p = random_qconv(&mut r, c_in, c_out, k, 1, pad);
        let x = random_qfmap(&mut r, w, h, c_in);
        let relu = r.random();
        let want = naive_quant_conv(&x, p.weights(), p.bias(), p.qspec(), 1, pad, relu)
            .ok_or("oracle accumulator overflow")?;
        let (got, _) = engine.conv_sqj(&x, &p, relu).map_err(|e| e.to_string())?;
        if got != want {
            mismatches += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(mismatches == 0, || format!("{mismatches} of {cases} layers differ"))?;
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("{cases} random layers, 0 mismatches, {secs:.2} s"))
}

fn backend_equivalence() -> Outcome {
    let (net, store) = quantized_v11(21);
    let fmt = store.input_format().ok_or("no input format")?;
    let cfg = PreprocessConfig::default();
    let naive = ExecPlan::new(&net, Mode::QuantNaive);
    let sqj = ExecPlan::new(&net, Mode::QuantSqj);
    let mut r = rng(0xacc2);
    let n = 20;
    for i in 0..n {
        let x = normalize_quantize(&random_image(&mut r, 227, 227), &cfg, fmt).map_err(|e| e.to_string())?;
        let a = forward(&net, &store, &naive, NetInput::Quant(&x, fmt), None).map_err(|e| e.to_string())?;
        let b = forward(&net, &store, &sqj, NetInput::Quant(&x, fmt), None).map_err(|e| e.to_string())?;
        let bits = |p: &[f64]| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(bits(&a.probs) == bits(&b.probs), || format!("input {i}: probability vectors differ"))?;
    }
    Ok(format!("{n} inputs through {} layers, probabilities bit-identical", net.layers().len()))
}

fn mac_count_identity() -> Outcome {
    let (net, store) = quantized_v11(22);
    let fmt = store.input_format().ok_or("no input format")?;
    let cfg = SqjConfig::new(8, 100.0).unwrap();
    let plan = ExecPlan::with_config(&net, Mode::QuantSqj, cfg);
    let x = normalize_quantize(&random_image(&mut rng(0xacc3), 227, 227), &PreprocessConfig::default(), fmt)
        .map_err(|e| e.to_string())?;
    let out = forward(&net, &store, &plan, NetInput::Quant(&x, fmt), None).map_err(|e| e.to_string())?;
    let mut checked = 0;
    let mut total = 0u64;
    for (i, (spec, stats)) in net.layers().iter().zip(&out.sqj_stats).enumerate() {
        match estimate_layer_cycles(spec, &cfg) {
            Some(est) => {
                ensure(stats.mac_cycles == est.mac_cycles, || {
                    format!("layer {}: counted {} MAC cycles, model {}", i + 1, stats.mac_cycles, est.mac_cycles)
                })?;
                ensure(stats.mac16_calls == 8 * est.mac_cycles, || {
                    format!("layer {}: {} mac16 calls for {} cycles", i + 1, stats.mac16_calls, est.mac_cycles)
                })?;
                checked += 1;
                total += stats.mac_cycles;
            }
            None => ensure(stats.mac_cycles == 0 && stats.mac16_calls == 0, || {
                format!("layer {} is not accelerated but counted MACs", i + 1)
            })?,
        }
    }
    ensure(checked == 10, || format!("{checked} accelerated layers, expected 10"))?;
    Ok(format!("{checked} Conv/Fire layers, {total} MAC cycles, counts equal the model (P = 8)"))
}

fn quantization_bound() -> Outcome {
    let mut violations = 0;
    for seed in 0..100u64 {
        violations += quant_bound_violations(0xacc4_0000 + seed, seed % 2 == 1);
    }
    ensure(violations == 0, || format!("{violations} outputs outside the bound"))?;
    Ok("100 random layers, 0 bound violations".into())
}

fn derived_arithmetic() -> Outcome {
    let close = |got: f64, want: f64, tol: f64, what: &str| {
        ensure((got - want).abs() <= tol, || format!("{what}: got {got}, want {want} +- {tol}"))
    };
    let fps = |ms| compute_fps(ms).map_err(|e| e.to_string());
    for (ms, want) in [(240.1507, 4.16), (342.8810, 2.92), (5149.2687, 0.19), (381.7705, 2.62)] {
        close(fps(ms)?, want, 0.005, &format!("fps({ms})"))?;
    }
    let speedup = compute_speedup(5149.2687, 381.7705).map_err(|e| e.to_string())?;
    close(speedup, 13.487, 0.001, "speedup")?;
    let profile = PowerProfile::new([("i5".to_string(), 5.9883), ("ARM+SqJ".to_string(), 2.227)])
        .map_err(|e| e.to_string())?;
    let power = power_efficiency(&profile, "ARM+SqJ", "i5").map_err(|e| e.to_string())?;
    close(power, 2.689, 0.01, "power efficiency")?;
    let conv_fire = [
        (1, "Conv", 25.5531),
        (3, "Fire", 16.6766),
        (4, "Fire", 17.8092),
        (6, "Fire", 14.167),
        (7, "Fire", 15.1649),
        (9, "Fire", 7.7804),
        (10, "Fire", 8.2085),
        (11, "Fire", 13.7099),
        (12, "Fire", 14.2955),
        (13, "Conv", 36.3992),
    ];
    let mut rows: Vec<LayerRow> =
        conv_fire.iter().map(|&(i, k, ms)| LayerRow { label: format!("{i}:{k}"), ms }).collect();
    // other kinds must not contribute
    for (i, k) in [(2, "Maxpool"), (5, "Maxpool"), (8, "Maxpool"), (14, "Avgpool"), (15, "Softmax")] {
        rows.push(LayerRow { label: format!("{i}:{k}"), ms: 1000.0 });
    }
    let total = total_conv_fire(&rows);
    close(total, 169.7643, 0.0001, "Total Conv+Fire")?;
    Ok(format!("fps 4.16/2.92/0.19/2.62, speedup {speedup:.4}, power {power:.4}, Conv+Fire {total:.4} ms"))
}

/// Sends one fuzz frame and reads until close. Returns what came back.
fn fuzz_exchange(addr: std::net::SocketAddr, frame: &[u8], limit: Duration) -> Result<Vec<u8>, String> {
    let t = Instant::now();
    let mut s = TcpStream::connect(addr).map_err(|e| format!("connect: {e}"))?;
    s.set_read_timeout(Some(limit)).unwrap();
    s.set_write_timeout(Some(limit)).unwrap();
    let _ = s.write_all(frame);
    let _ = s.shutdown(Shutdown::Write);
    let mut out = Vec::new();
    let mut buf = [0u8; 4096];
    loop {
        match s.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => out.extend_from_slice(&buf[..n]),
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                return Err(format!("no close after {:?}", t.elapsed()));
            }
            // a reset after the server gave up on an oversized frame
            Err(_) => break,
        }
    }
    if t.elapsed() > limit {
        return Err(format!("exchange took {:?}", t.elapsed()));
    }
    Ok(out)
}

fn protocol_robustness() -> Outcome {
    let deadline = Duration::from_millis(500);
    let limit = deadline + Duration::from_secs(3);
    let server = serve(
        TcpListener::bind("127.0.0.1:0").unwrap(),
        MockClassifier,
        ServerConfig { max_pending: 64, read_timeout: deadline },
    )
    .map_err(|e| e.to_string())?;
    let addr = server.local_addr();
    let total = 10_000;
    let threads = 8;
    let frames = Arc::new(AtomicUsize::new(0));
    let closes = Arc::new(AtomicUsize::new(0));
    let workers: Vec<_> = (0..threads)
        .map(|t| {
            let (frames, closes) = (frames.clone(), closes.clone());
            std::thread::spawn(move || -> Result<(), String> {
                let mut r = rng(0xacc6_0000 + t as u64);
                let valid = valid_frame(&mut r);
                for i in 0..total / threads {
                    let f = mutate_frame(&mut r, &valid);
                    let out = fuzz_exchange(addr, &f, limit).map_err(|e| format!("case {t}/{i}: {e}"))?;
                    if out.is_empty() {
                        closes.fetch_add(1, Ordering::Relaxed);
                    } else {
                        check_response(&out).map_err(|e| format!("case {t}/{i}: {e}"))?;
                        frames.fetch_add(1, Ordering::Relaxed);
                    }
                }
                Ok(())
            })
        })
        .collect();
    for w in workers {
        w.join().map_err(|_| "fuzz worker panicked".to_string())??;
    }
    server.shutdown();

    // real engine behind the socket, compared with the same engine in process
    let (net, store) = quantized_v11(26);
    let cfg = PreprocessConfig::default();
    let oracle = InferenceEngine::new(net.clone(), store.clone(), Mode::QuantSqj, cfg.clone()).map_err(|e| e.to_string())?;
    let engine = InferenceEngine::new(net, store, Mode::QuantSqj, cfg).map_err(|e| e.to_string())?;
    let server = serve(TcpListener::bind("127.0.0.1:0").unwrap(), engine, ServerConfig::default())
        .map_err(|e| e.to_string())?;
    let img = random_image(&mut rng(0xacc6), 227, 227);
    let got = Client::new("127.0.0.1", server.local_addr().port())
        .classify(&img, &MonotonicClock::new())
        .map_err(|e| e.to_string())?;
    server.shutdown();
    let want: Vec<(u16, f32)> =
        oracle.classify(&img).map_err(|e| e.to_string())?.into_iter().map(|(k, p)| (k as u16, p as f32)).collect();
    ensure(got.entries.len() == 5, || format!("{} entries", got.entries.len()))?;
    ensure(got.entries.windows(2).all(|w| w[0].1 >= w[1].1), || "entries not descending".into())?;
    let bits = |v: &[(u16, f32)]| v.iter().map(|&(k, p)| (k, p.to_bits())).collect::<Vec<_>>();
    ensure(bits(&got.entries) == bits(&want), || format!("loopback {:?} vs oracle {want:?}", got.entries))?;
    Ok(format!(
        "{total} fuzz frames: {} error/result frames, {} clean closes, none past the deadline; loopback top-5 matches",
        frames.load(Ordering::Relaxed),
        closes.load(Ordering::Relaxed)
    ))
}

fn serialization_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut n = 0;
    for seed in 0..5 {
        let (_, store) = quantized_tiny(seed);
        let path = dir.path().join(format!("w{seed}.sqnw"));
        save_weights(&store, &path).map_err(|e| e.to_string())?;
        let back = load_weights(&path).map_err(|e| e.to_string())?;
        ensure(back == store, || "weights differ after reload".into())?;
        ensure(back.to_bytes() == std::fs::read(&path).unwrap(), || "weight bytes differ".into())?;
        n += 1;
    }
    let mut r = rng(0xacc7);
    for _ in 0..50 {
        let (w, h) = (r.random_range(1..=64), r.random_range(1..=64));
        let img = random_image(&mut r, w, h);
        ensure(decode_ppm(&encode_ppm(&img)).map_err(|e| e.to_string())? == img, || "ppm differs".into())?;
    }
    let net = squeezenet_v1_1();
    let layers: Vec<LayerRow> = net
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| LayerRow { label: format!("{}:{}", i + 1, l.kind().title()), ms: r.random_range(0.0..50.0) })
        .collect();
    ensure(layers.iter().all(|l| l.kind().is_some()), || "unparsed layer label".into())?;
    let report = BenchReport {
        iterations: 100,
        remote: Some(RemoteRows {
            img_preprocessing_ms: 38.621,
            inference_ms: r.random(),
            net_transfer_ms: 1.0 / 3.0,
            end_to_end_ms: 381.7705,
            total_ms: 420.3915,
        }),
        local: Some(LocalRows {
            total_conv_fire_ms: total_conv_fire(&layers),
            total_ms: layers.iter().map(|l| l.ms).sum(),
            layers,
        }),
    };
    for f in [ReportFormat::Csv, ReportFormat::JsonLines] {
        let back = parse_report(&render_report(&report, f), f).map_err(|e| e.to_string())?;
        ensure(back == report, || format!("{f:?} report differs after parse"))?;
    }
    Ok(format!("{n} weight files, 50 PPM images, csv and jsonl reports identical after round trip"))
}

fn cycle_model_report() -> Outcome {
    let net = squeezenet_v1_1();
    let cfg = SqjConfig::new(8, 100.0).unwrap();
    let spec = &net.layers()[12];
    ensure(spec.kind() == LayerKind::Conv, || "layer 13 is not a convolution".into())?;
    let est = estimate_layer_cycles(spec, &cfg).ok_or("no estimate for layer 13")?;
    ensure(est.mac_cycles == 676_000, || format!("layer 13 model gives {} MAC cycles", est.mac_cycles))?;
    let model_ms = cfg.cycles_to_ms(est.mac_cycles);
    let measured_ms = 49.5907;
    println!("  layer 13 cycle model: {est}");
    println!(
        "  layer 13 model {model_ms:.2} ms (MAC only) vs measured {measured_ms} ms on hardware: gap {:.2}x, not asserted",
        measured_ms / model_ms
    );
    println!("  not reproduced here: absolute latencies and watts, FPGA resource use, top-5 accuracy on the validation set");
    Ok(format!("layer 13: {} MAC cycles = {model_ms:.2} ms at 100 MHz (lower bound)", est.mac_cycles))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("bit-exact dataflow", bit_exact_dataflow),
        ("backend equivalence", backend_equivalence),
        ("MAC-count identity", mac_count_identity),
        ("quantization error bound", quantization_bound),
        ("derived arithmetic", derived_arithmetic),
        ("protocol robustness", protocol_robustness),
        ("serialization round trips", serialization_round_trips),
        ("cycle model report", cycle_model_report),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("ACCEPTANCE {} PASS: {name}: {msg} [{secs:.1} s]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("ACCEPTANCE {} FAIL: {name}: {msg} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
