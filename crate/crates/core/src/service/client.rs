use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use thiserror::Error;

use super::wire::{RecognitionRequest, RecognitionResponse, Status, TOP_K};
use crate::clock::{Clock, MonotonicClock};
use crate::preprocess::RgbImage;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot connect to {addr}: {source}")]
    Connect { addr: String, source: io::Error },

    #[error("timed out while {0}")]
    Timeout(&'static str),

    #[error("i/o error while {what}: {source}")]
    Io { what: &'static str, source: io::Error },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("server answered {status} (code {}): {message}", status.code())]
    Server { status: Status, message: String },
}

fn io_error(what: &'static str) -> impl Fn(io::Error) -> ClientError {
    move |e| match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => ClientError::Timeout(what),
        _ => ClientError::Io { what, source: e },
    }
}

/// Client-side timing of one round trip.
///
/// `net_transfer` covers connecting, sending the request and receiving the
/// response after its first byte; `inference` is the wait between the last
/// request byte and the first response byte, which includes server-side
/// parsing. `end_to_end = net_transfer + inference`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClientTiming {
    pub net_transfer: Duration,
    pub inference: Duration,
    pub end_to_end: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub entries: Vec<(u16, f32)>,
    pub timing: ClientTiming,
}

#[derive(Debug, Clone)]
pub struct Client {
    addr: String,
    timeout: Duration,
}

impl Client {
    pub fn new(host: &str, port: u16) -> Self {
        let addr = if host.contains(':') && !host.starts_with('[') {
            format!("[{host}]:{port}")
        } else {
            format!("{host}:{port}")
        };
        Self { addr, timeout: Duration::from_secs(30) }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn connect(&self) -> Result<TcpStream, ClientError> {
        let connect_err = |source| ClientError::Connect { addr: self.addr.clone(), source };
        let mut last = io::Error::new(io::ErrorKind::NotFound, "no addresses resolved");
        for sa in self.addr.to_socket_addrs().map_err(connect_err)? {
            match TcpStream::connect_timeout(&sa, self.timeout) {
                Ok(s) => return Ok(s),
                Err(e) => last = e,
            }
        }
        Err(connect_err(last))
    }

    /// Sends one raw frame and returns the raw response frame.
    pub fn exchange(&self, frame: &[u8]) -> Result<Vec<u8>, ClientError> {
        self.exchange_timed(frame, &MonotonicClock::new()).map(|(bytes, _)| bytes)
    }

    fn exchange_timed(&self, frame: &[u8], clock: &dyn Clock) -> Result<(Vec<u8>, ClientTiming), ClientError> {
        let t0 = clock.now();
        let mut stream = self.connect()?;
        let _ = stream.set_nodelay(true);
        stream.set_read_timeout(Some(self.timeout)).map_err(io_error("configuring the socket"))?;
        stream.set_write_timeout(Some(self.timeout)).map_err(io_error("configuring the socket"))?;
        stream.write_all(frame).and_then(|_| stream.flush()).map_err(io_error("sending the request"))?;
        let t1 = clock.now();

        let mut resp = Vec::with_capacity(64);
        let mut buf = [0u8; 512];
        let mut t2 = None;
        loop {
            if let Some(len) = RecognitionResponse::frame_len(&resp).map_err(ClientError::Protocol)? {
                if resp.len() >= len {
                    resp.truncate(len);
                    break;
                }
            }
            let n = match stream.read(&mut buf) {
                Ok(n) => n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(io_error("reading the response")(e)),
            };
            if n == 0 {
                return Err(ClientError::Protocol(format!(
                    "connection closed after {} response bytes",
                    resp.len()
                )));
            }
            if t2.is_none() {
                t2 = Some(clock.now());
            }
            resp.extend_from_slice(&buf[..n]);
        }
        let t3 = clock.now();
        let t2 = t2.unwrap_or(t3);
        let timing = ClientTiming {
            net_transfer: t1.saturating_sub(t0) + t3.saturating_sub(t2),
            inference: t2.saturating_sub(t1),
            end_to_end: t3.saturating_sub(t0),
        };
        Ok((resp, timing))
    }

    /// Classifies an image already at the network geometry.
    pub fn classify(&self, image: &RgbImage, clock: &dyn Clock) -> Result<Classification, ClientError> {
        let frame = RecognitionRequest::from_image(image).encode();
        let (bytes, timing) = self.exchange_timed(&frame, clock)?;
        match RecognitionResponse::decode(&bytes).map_err(ClientError::Protocol)? {
            RecognitionResponse::Error { status, message } => Err(ClientError::Server { status, message }),
            RecognitionResponse::Ok(entries) => {
                if entries.len() != TOP_K {
                    return Err(ClientError::Protocol(format!("expected {TOP_K} entries, got {}", entries.len())));
                }
                if entries.windows(2).any(|w| w[0].1 < w[1].1) {
                    return Err(ClientError::Protocol("entries are not in descending order".into()));
                }
                Ok(Classification { entries, timing })
            }
        }
    }
}

pub fn client_classify(host: &str, port: u16, image: &RgbImage) -> Result<Classification, ClientError> {
    Client::new(host, port).classify(image, &MonotonicClock::new())
}
