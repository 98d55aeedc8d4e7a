mod common;

use std::io::{Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::time::{Duration, Instant};

use common::{check_response, mutate_frame, random_image, rng, valid_frame, MockClassifier};
use sqj_core::bench::{bench_remote, NetworkProbe};
use sqj_core::clock::{MonotonicClock, ScriptedClock};
use sqj_core::preprocess::{encode_ppm, PreprocessConfig, RgbImage};
use sqj_core::service::{
    handle_request, serve, Classifier, Client, ClientError, RecognitionRequest, RecognitionResponse, ServerConfig,
    ServerHandle, Status,
};

fn start(cfg: ServerConfig) -> ServerHandle {
    serve(TcpListener::bind("127.0.0.1:0").unwrap(), MockClassifier, cfg).unwrap()
}

fn raw_exchange(h: &ServerHandle, bytes: &[u8], close_write: bool) -> Vec<u8> {
    let mut s = TcpStream::connect(h.local_addr()).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
    let _ = s.write_all(bytes);
    if close_write {
        let _ = s.shutdown(Shutdown::Write);
    }
    let mut out = Vec::new();
    let _ = s.read_to_end(&mut out);
    out
}

#[test]
fn loopback_matches_in_process_oracle() {
    let h = start(ServerConfig::default());
    let img = random_image(&mut rng(1), 227, 227);
    let c = Client::new("127.0.0.1", h.local_addr().port()).classify(&img, &MonotonicClock::new()).unwrap();
    let want: Vec<(u16, f32)> =
        MockClassifier.classify(&img).unwrap().into_iter().map(|(k, p)| (k as u16, p as f32)).collect();
    assert_eq!(c.entries, want);
    let t = c.timing;
    assert!(t.end_to_end >= t.net_transfer);
    assert_eq!(t.end_to_end, t.net_transfer + t.inference);
    h.shutdown();
}

#[test]
fn repeated_requests_give_identical_bytes() {
    let h = start(ServerConfig::default());
    let frame = valid_frame(&mut rng(2));
    let first = raw_exchange(&h, &frame, false);
    assert_eq!(first, handle_request(&frame, &MockClassifier));
    for _ in 0..9 {
        assert_eq!(raw_exchange(&h, &frame, false), first);
    }
    h.shutdown();
}

#[test]
fn error_statuses_over_the_wire() {
    let h = start(ServerConfig::default());
    let frame = valid_frame(&mut rng(3));
    let status = |bytes: &[u8]| match RecognitionResponse::decode(&raw_exchange(&h, bytes, true)).unwrap() {
        RecognitionResponse::Error { status, .. } => status,
        RecognitionResponse::Ok(_) => Status::Ok,
    };
    let mut bad = frame.clone();
    bad[..4].copy_from_slice(b"JPEG");
    assert_eq!(status(&bad), Status::BadMagic);
    let mut bad = frame.clone();
    bad[4] = 2;
    assert_eq!(status(&bad), Status::BadVersion);
    let mut bad = frame.clone();
    bad[5..7].copy_from_slice(&224u16.to_be_bytes());
    assert_eq!(status(&bad), Status::BadDims);
    let mut bad = frame.clone();
    bad[10] = 3;
    assert_eq!(status(&bad), Status::BadFormat);
    assert_eq!(status(&frame[..frame.len() / 2]), Status::Truncated);
    assert_eq!(status(&frame), Status::Ok);
    h.shutdown();
}

#[test]
fn silent_client_hits_the_read_deadline() {
    let deadline = Duration::from_millis(300);
    let h = start(ServerConfig { read_timeout: deadline, ..Default::default() });
    let mut s = TcpStream::connect(h.local_addr()).unwrap();
    s.write_all(b"SQNJ\x01").unwrap();
    let t = Instant::now();
    let mut out = Vec::new();
    s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    let mut buf = [0u8; 256];
    loop {
        match s.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                out.extend_from_slice(&buf[..n]);
                if RecognitionResponse::frame_len(&out).unwrap() == Some(out.len()) {
                    break;
                }
            }
        }
    }
    assert!(t.elapsed() < deadline + Duration::from_secs(2));
    match RecognitionResponse::decode(&out).unwrap() {
        RecognitionResponse::Error { status, .. } => assert_eq!(status, Status::Truncated),
        r => panic!("unexpected {r:?}"),
    }
    h.shutdown();
}

#[test]
fn excess_connections_are_refused_busy() {
    let h = start(ServerConfig { max_pending: 1, read_timeout: Duration::from_secs(5) });
    // occupies the only slot without finishing its request
    let mut hold = TcpStream::connect(h.local_addr()).unwrap();
    hold.write_all(b"SQ").unwrap();
    std::thread::sleep(Duration::from_millis(100));
    let resp = raw_exchange(&h, b"", true);
    match RecognitionResponse::decode(&resp).unwrap() {
        RecognitionResponse::Error { status, .. } => assert_eq!(status, Status::Busy),
        r => panic!("unexpected {r:?}"),
    }
    drop(hold);
    h.shutdown();
}

#[test]
fn unreachable_server_is_a_connect_error() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let img = RgbImage::filled(227, 227, [0, 0, 0]).unwrap();
    let e = Client::new("127.0.0.1", port)
        .with_timeout(Duration::from_secs(2))
        .classify(&img, &MonotonicClock::new())
        .unwrap_err();
    assert!(matches!(e, ClientError::Connect { .. }), "{e}");
}

#[test]
fn server_error_reaches_the_client() {
    let h = start(ServerConfig::default());
    let img = RgbImage::filled(10, 10, [1, 2, 3]).unwrap();
    let e = Client::new("127.0.0.1", h.local_addr().port()).classify(&img, &MonotonicClock::new()).unwrap_err();
    assert!(matches!(e, ClientError::Server { status: Status::BadDims, .. }), "{e}");
    h.shutdown();
}

#[test]
fn handle_request_is_total() {
    let mut r = rng(4);
    let valid = valid_frame(&mut r);
    for _ in 0..2000 {
        let f = mutate_frame(&mut r, &valid);
        check_response(&handle_request(&f, &MockClassifier)).unwrap();
    }
    let zero = RecognitionRequest::from_image(&RgbImage::filled(227, 227, [0, 0, 0]).unwrap()).encode();
    check_response(&handle_request(&zero, &MockClassifier)).unwrap();
}

#[test]
fn bench_remote_with_scripted_clock() {
    let h = start(ServerConfig::default());
    let cfg = PreprocessConfig::default();
    let ppm = encode_ppm(&random_image(&mut rng(5), 40, 30));
    // per iteration the probe reads the clock six times: around
    // preprocessing, then connect, sent, first byte, done
    let mut steps = Vec::new();
    for i in 1..=100u64 {
        if i > 1 {
            steps.push(Duration::ZERO);
        }
        steps.extend([Duration::from_millis(2), Duration::ZERO, Duration::ZERO, Duration::from_millis(i), Duration::from_millis(1)]);
    }
    let clock = ScriptedClock::new(steps);
    let mut probe = NetworkProbe {
        client: Client::new("127.0.0.1", h.local_addr().port()),
        ppm: &ppm,
        preprocess: &cfg,
        clock: &clock,
    };
    let rows = bench_remote(&mut probe, 100).unwrap().remote.unwrap();
    assert_eq!(rows.inference_ms, 50.5);
    assert_eq!(rows.net_transfer_ms, 1.0);
    assert_eq!(rows.end_to_end_ms, 51.5);
    assert_eq!(rows.img_preprocessing_ms, 2.0);
    assert_eq!(rows.total_ms, 53.5);
    h.shutdown();
}
