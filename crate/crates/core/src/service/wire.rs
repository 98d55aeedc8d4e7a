//! Request and response frames. All multi-byte integers are big-endian.
//!
//! Request:  `"SQNJ" | version u8 | width u16 | height u16 | channels u8 |
//! pixel_format u8 | payload_len u32 | payload`
//!
//! Response: `"SQNR" | status u8 | count u8 | count x (class u16, prob f32)`;
//! when status != 0 the count byte is followed by `msg_len u16 | msg`.

use std::fmt;

use crate::preprocess::RgbImage;

pub const REQUEST_MAGIC: [u8; 4] = *b"SQNJ";
pub const RESPONSE_MAGIC: [u8; 4] = *b"SQNR";
pub const VERSION: u8 = 1;
pub const WIDTH: u16 = 227;
pub const HEIGHT: u16 = 227;
pub const CHANNELS: u8 = 3;
pub const PIXEL_FORMAT_RGB8: u8 = 0;
pub const PAYLOAD_LEN: u32 = WIDTH as u32 * HEIGHT as u32 * CHANNELS as u32;
pub const HEADER_LEN: usize = 15;
pub const TOP_K: usize = 5;
const MAX_MESSAGE: usize = u16::MAX as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    BadMagic = 1,
    BadVersion = 2,
    BadDims = 3,
    BadFormat = 4,
    Truncated = 5,
    Internal = 6,
    Busy = 7,
}

impl Status {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Status::Ok,
            1 => Status::BadMagic,
            2 => Status::BadVersion,
            3 => Status::BadDims,
            4 => Status::BadFormat,
            5 => Status::Truncated,
            6 => Status::Internal,
            7 => Status::Busy,
            _ => return None,
        })
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Status::Ok => "ok",
            Status::BadMagic => "malformed (bad magic)",
            Status::BadVersion => "unsupported version",
            Status::BadDims => "wrong dimensions",
            Status::BadFormat => "unsupported pixel format",
            Status::Truncated => "truncated request",
            Status::Internal => "internal error",
            Status::Busy => "server busy",
        };
        f.write_str(s)
    }
}

/// A rejected request: the status to answer with and a human-readable reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireError {
    pub status: Status,
    pub message: String,
}

impl WireError {
    pub fn new(status: Status, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecognitionRequest {
    pub width: u16,
    pub height: u16,
    pub channels: u8,
    pub pixel_format: u8,
    pub payload: Vec<u8>,
}

impl RecognitionRequest {
    pub fn from_image(img: &RgbImage) -> Self {
        Self {
            width: img.width().min(u16::MAX as usize) as u16,
            height: img.height().min(u16::MAX as usize) as u16,
            channels: CHANNELS,
            pixel_format: PIXEL_FORMAT_RGB8,
            payload: img.data().to_vec(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&REQUEST_MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.width.to_be_bytes());
        out.extend_from_slice(&self.height.to_be_bytes());
        out.push(self.channels);
        out.push(self.pixel_format);
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn image(&self) -> RgbImage {
        RgbImage::new(self.width as usize, self.height as usize, self.payload.clone())
            .expect("validated request geometry")
    }
}

fn truncated(what: &str) -> WireError {
    WireError::new(Status::Truncated, format!("request ends inside {what}"))
}

/// Validates as much of a request header as `bytes` contains. Fields are
/// checked in wire order; the first bad field decides the status, and a
/// field cut short yields `Truncated`. Returns the payload length once the
/// whole header is present and valid.
pub fn check_header(bytes: &[u8]) -> Result<usize, WireError> {
    let n = bytes.len().min(4);
    if bytes[..n] != REQUEST_MAGIC[..n] {
        return Err(WireError::new(Status::BadMagic, "bad magic, expected \"SQNJ\""));
    }
    if bytes.len() < 4 {
        return Err(truncated("magic"));
    }
    match bytes.get(4) {
        None => return Err(truncated("version")),
        Some(&v) if v != VERSION => {
            return Err(WireError::new(Status::BadVersion, format!("version {v} not supported, expected {VERSION}")))
        }
        _ => {}
    }
    if bytes.len() < 10 {
        return Err(truncated("dimensions"));
    }
    let w = u16::from_be_bytes([bytes[5], bytes[6]]);
    let h = u16::from_be_bytes([bytes[7], bytes[8]]);
    let c = bytes[9];
    if (w, h, c) != (WIDTH, HEIGHT, CHANNELS) {
        return Err(WireError::new(
            Status::BadDims,
            format!("image is {w}x{h}x{c}, expected {WIDTH}x{HEIGHT}x{CHANNELS}"),
        ));
    }
    match bytes.get(10) {
        None => return Err(truncated("pixel format")),
        Some(&f) if f != PIXEL_FORMAT_RGB8 => {
            return Err(WireError::new(Status::BadFormat, format!("pixel format {f} not supported")))
        }
        _ => {}
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated("payload length"));
    }
    let len = u32::from_be_bytes([bytes[11], bytes[12], bytes[13], bytes[14]]);
    if len != PAYLOAD_LEN {
        return Err(WireError::new(Status::BadDims, format!("payload length {len}, expected {PAYLOAD_LEN}")));
    }
    Ok(len as usize)
}

/// Parses a complete request frame. Bytes after the payload are ignored.
pub fn parse_request(bytes: &[u8]) -> Result<RecognitionRequest, WireError> {
    let len = check_header(bytes)?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < len {
        return Err(WireError::new(
            Status::Truncated,
            format!("payload has {} of {len} bytes", payload.len()),
        ));
    }
    Ok(RecognitionRequest {
        width: WIDTH,
        height: HEIGHT,
        channels: CHANNELS,
        pixel_format: PIXEL_FORMAT_RGB8,
        payload: payload[..len].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecognitionResponse {
    Ok(Vec<(u16, f32)>),
    Error { status: Status, message: String },
}

impl RecognitionResponse {
    pub fn error(e: WireError) -> Self {
        RecognitionResponse::Error { status: e.status, message: e.message }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = RESPONSE_MAGIC.to_vec();
        match self {
            RecognitionResponse::Ok(entries) => {
                out.push(Status::Ok.code());
                out.push(entries.len().min(u8::MAX as usize) as u8);
                for (class, p) in entries.iter().take(u8::MAX as usize) {
                    out.extend_from_slice(&class.to_be_bytes());
                    out.extend_from_slice(&p.to_be_bytes());
                }
            }
            RecognitionResponse::Error { status, message } => {
                out.push(status.code());
                out.push(0);
                let mut end = message.len().min(MAX_MESSAGE);
                while !message.is_char_boundary(end) {
                    end -= 1;
                }
                out.extend_from_slice(&(end as u16).to_be_bytes());
                out.extend_from_slice(&message.as_bytes()[..end]);
            }
        }
        out
    }

    /// Length of the frame starting at `bytes`, once enough of it is known.
    /// `Ok(None)` means more bytes are needed.
    pub fn frame_len(bytes: &[u8]) -> Result<Option<usize>, String> {
        if bytes.len() < 6 {
            return Ok(None);
        }
        if bytes[..4] != RESPONSE_MAGIC {
            return Err("bad response magic".into());
        }
        match Status::from_code(bytes[4]) {
            None => Err(format!("unknown status {}", bytes[4])),
            Some(Status::Ok) => Ok(Some(6 + 6 * bytes[5] as usize)),
            Some(_) if bytes.len() < 8 => Ok(None),
            Some(_) => Ok(Some(8 + u16::from_be_bytes([bytes[6], bytes[7]]) as usize)),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        let len = Self::frame_len(bytes)?.ok_or("response frame too short")?;
        if bytes.len() != len {
            return Err(format!("response frame is {} bytes, header says {len}", bytes.len()));
        }
        let status = Status::from_code(bytes[4]).expect("checked by frame_len");
        if status == Status::Ok {
            let entries = bytes[6..]
                .chunks_exact(6)
                .map(|e| (u16::from_be_bytes([e[0], e[1]]), f32::from_be_bytes([e[2], e[3], e[4], e[5]])))
                .collect();
            return Ok(RecognitionResponse::Ok(entries));
        }
        if bytes[5] != 0 {
            return Err("error response with a nonzero entry count".into());
        }
        let message = String::from_utf8(bytes[8..].to_vec()).map_err(|_| "error message is not UTF-8")?;
        Ok(RecognitionResponse::Error { status, message })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valid() -> Vec<u8> {
        RecognitionRequest {
            width: WIDTH,
            height: HEIGHT,
            channels: 3,
            pixel_format: 0,
            payload: vec![7; PAYLOAD_LEN as usize],
        }
        .encode()
    }

    #[test]
    fn request_round_trip() {
        let bytes = valid();
        assert_eq!(bytes.len(), HEADER_LEN + 154_587);
        assert_eq!(parse_request(&bytes).unwrap().encode(), bytes);
    }

    #[test]
    fn status_codes() {
        let code = |b: &[u8]| parse_request(b).unwrap_err().status.code();
        let mut b = valid();
        b[0] = b'X';
        assert_eq!(code(&b), 1);
        let mut b = valid();
        b[4] = 2;
        assert_eq!(code(&b), 2);
        let mut b = valid();
        b[6] = 0;
        assert_eq!(code(&b), 3);
        let mut b = valid();
        b[10] = 1;
        assert_eq!(code(&b), 4);
        let b = valid();
        assert_eq!(code(&b[..1000]), 5);
        assert_eq!(code(&b[..3]), 5);
        assert_eq!(code(b""), 5);
        assert_eq!(code(b"SQ"), 5);
        assert_eq!(code(b"SX"), 1);
    }

    #[test]
    fn response_round_trip() {
        let ok = RecognitionResponse::Ok(vec![(3, 0.5), (999, 0.25), (1, 0.1), (2, 0.1), (0, 0.05)]);
        assert_eq!(RecognitionResponse::decode(&ok.encode()).unwrap(), ok);
        let err = RecognitionResponse::Error { status: Status::BadMagic, message: "nope".into() };
        let bytes = err.encode();
        assert_eq!(bytes[4], 1);
        assert_eq!(RecognitionResponse::decode(&bytes).unwrap(), err);
    }
}
