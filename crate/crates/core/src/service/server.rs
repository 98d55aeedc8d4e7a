use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::wire::{check_header, RecognitionResponse, Status, WireError, HEADER_LEN, HEIGHT, WIDTH};
use super::{respond, Classifier};
use crate::error::Result;
use crate::preprocess::RgbImage;

/// Upper bound on bytes discarded after replying, so an early error frame
/// is not lost to a reset while the peer is still sending.
const DRAIN_LIMIT: usize = 2 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerConfig {
    /// Connections admitted at once (queued or running); more are answered `Busy`.
    pub max_pending: usize,
    /// Total time allowed for receiving one request.
    pub read_timeout: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { max_pending: 16, read_timeout: Duration::from_secs(10) }
    }
}

struct Job {
    image: RgbImage,
    reply: mpsc::Sender<RecognitionResponse>,
}

/// A running server. Dropping the handle leaves it running in the background.
#[derive(Debug)]
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections and waits for the accept loop to exit.
    /// Connections already admitted finish on their own threads.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let mut wake = self.addr;
        if wake.ip().is_unspecified() {
            wake.set_ip(std::net::Ipv4Addr::LOCALHOST.into());
        }
        let _ = TcpStream::connect_timeout(&wake, Duration::from_secs(1));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Blocks for the lifetime of the server.
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

/// Serves on `listener`. Each connection carries one request; inference runs
/// on a single worker thread in arrival order.
pub fn serve<C>(listener: TcpListener, classifier: C, cfg: ServerConfig) -> Result<ServerHandle>
where
    C: Classifier + Send + 'static,
{
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel::<Job>();

    thread::Builder::new().name("sqj-worker".into()).spawn(move || {
        for job in rx {
            let _ = job.reply.send(respond(&classifier, &job.image));
        }
    })?;

    let in_flight = Arc::new(AtomicUsize::new(0));
    let stop_flag = Arc::clone(&stop);
    let accept = thread::Builder::new().name("sqj-accept".into()).spawn(move || {
        for conn in listener.incoming() {
            if stop_flag.load(Ordering::SeqCst) {
                break;
            }
            let stream = match conn {
                Ok(s) => s,
                Err(e) => {
                    warn!("accept failed: {e}");
                    thread::sleep(Duration::from_millis(10));
                    continue;
                }
            };
            if in_flight.fetch_add(1, Ordering::SeqCst) >= cfg.max_pending {
                in_flight.fetch_sub(1, Ordering::SeqCst);
                debug!("refusing connection, {} pending", cfg.max_pending);
                refuse(stream, cfg.read_timeout);
                continue;
            }
            let tx = tx.clone();
            let counter = Arc::clone(&in_flight);
            let spawned = thread::Builder::new().name("sqj-conn".into()).spawn(move || {
                handle_connection(stream, &tx, cfg.read_timeout);
                counter.fetch_sub(1, Ordering::SeqCst);
            });
            if let Err(e) = spawned {
                warn!("cannot spawn connection thread: {e}");
                in_flight.fetch_sub(1, Ordering::SeqCst);
            }
        }
    })?;
    info!("listening on {addr}");
    Ok(ServerHandle { addr, stop, accept: Some(accept) })
}

fn refuse(mut stream: TcpStream, timeout: Duration) {
    let frame = RecognitionResponse::error(WireError::new(Status::Busy, "too many pending requests")).encode();
    let _ = stream.set_write_timeout(Some(timeout));
    let _ = stream.write_all(&frame);
    let _ = stream.shutdown(Shutdown::Both);
}

enum ReadOutcome {
    Data(usize),
    Eof,
    Deadline,
}

fn read_until(stream: &mut TcpStream, buf: &mut [u8], deadline: Instant) -> io::Result<ReadOutcome> {
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Ok(ReadOutcome::Deadline);
        }
        stream.set_read_timeout(Some(left))?;
        match stream.read(buf) {
            Ok(0) => return Ok(ReadOutcome::Eof),
            Ok(n) => return Ok(ReadOutcome::Data(n)),
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                return Ok(ReadOutcome::Deadline)
            }
            Err(e) => return Err(e),
        }
    }
}

fn read_request(stream: &mut TcpStream, deadline: Instant) -> std::result::Result<RgbImage, WireError> {
    let io_err = |e: io::Error| WireError::new(Status::Truncated, format!("read failed: {e}"));
    let late = || WireError::new(Status::Truncated, "read deadline exceeded");

    let mut header = [0u8; HEADER_LEN];
    let mut have = 0;
    let len = loop {
        match check_header(&header[..have]) {
            Ok(len) => break len,
            Err(e) if e.status != Status::Truncated => return Err(e),
            Err(e) => match read_until(stream, &mut header[have..], deadline).map_err(io_err)? {
                ReadOutcome::Data(n) => have += n,
                ReadOutcome::Eof => return Err(e),
                ReadOutcome::Deadline => return Err(late()),
            },
        }
    };

    let mut payload = vec![0u8; len];
    let mut got = 0;
    while got < len {
        match read_until(stream, &mut payload[got..], deadline).map_err(io_err)? {
            ReadOutcome::Data(n) => got += n,
            ReadOutcome::Eof => {
                return Err(WireError::new(Status::Truncated, format!("payload has {got} of {len} bytes")))
            }
            ReadOutcome::Deadline => return Err(late()),
        }
    }
    Ok(RgbImage::new(WIDTH as usize, HEIGHT as usize, payload).expect("header fixes the geometry"))
}

fn handle_connection(mut stream: TcpStream, jobs: &mpsc::Sender<Job>, read_timeout: Duration) {
    let deadline = Instant::now() + read_timeout;
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_else(|_| "?".into());
    let _ = stream.set_nodelay(true);

    let response = match read_request(&mut stream, deadline) {
        Err(e) => {
            debug!("{peer}: rejected: {}", e.message);
            RecognitionResponse::error(e)
        }
        Ok(image) => {
            let (reply_tx, reply_rx) = mpsc::channel();
            let queued = jobs.send(Job { image, reply: reply_tx }).is_ok();
            match reply_rx.recv() {
                Ok(r) if queued => r,
                _ => RecognitionResponse::error(WireError::new(Status::Internal, "inference worker unavailable")),
            }
        }
    };
    if let RecognitionResponse::Error { status: Status::Internal, message } = &response {
        warn!("{peer}: {message}");
    }

    let _ = stream.set_write_timeout(Some(read_timeout));
    if let Err(e) = stream.write_all(&response.encode()).and_then(|_| stream.flush()) {
        debug!("{peer}: write failed: {e}");
        return;
    }
    let _ = stream.shutdown(Shutdown::Write);
    drain(&mut stream, deadline.max(Instant::now() + Duration::from_millis(200)));
}

fn drain(stream: &mut TcpStream, deadline: Instant) {
    let mut sink = [0u8; 8192];
    let mut total = 0;
    while total < DRAIN_LIMIT {
        match read_until(stream, &mut sink, deadline) {
            Ok(ReadOutcome::Data(n)) => total += n,
            _ => break,
        }
    }
}
