//! Minimal HTTP/1.1 subset shared by the virtual-time origin (over
//! transport streams) and the real TCP origin: GET requests, 200/404
//! responses with `Content-Length`, and chunked transfer encoding for
//! segments that are still being produced.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpRequest {
    pub method: String,
    pub path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HttpError {
    Malformed(&'static str),
}

impl core::fmt::Display for HttpError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            HttpError::Malformed(what) => write!(f, "malformed http: {what}"),
        }
    }
}

impl core::error::Error for HttpError {}

pub fn render_request(path: &str) -> Vec<u8> {
    format!("GET {path} HTTP/1.1\r\nHost: origin\r\nConnection: close\r\n\r\n").into_bytes()
}

/// Accumulates request bytes until the header block is complete.
#[derive(Debug, Default)]
pub struct RequestParser {
    buf: Vec<u8>,
}

impl RequestParser {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) -> Result<Option<HttpRequest>, HttpError> {
        self.buf.extend_from_slice(bytes);
        let Some(head_end) = find_subslice(&self.buf, b"\r\n\r\n") else {
            return Ok(None);
        };
        let head = core::str::from_utf8(&self.buf[..head_end])
            .map_err(|_| HttpError::Malformed("request head not utf-8"))?;
        let line = head.lines().next().ok_or(HttpError::Malformed("empty request"))?;
        let mut parts = line.split(' ');
        let method = parts.next().ok_or(HttpError::Malformed("missing method"))?;
        let path = parts.next().ok_or(HttpError::Malformed("missing path"))?;
        let version = parts.next().ok_or(HttpError::Malformed("missing version"))?;
        if !version.starts_with("HTTP/1.") {
            return Err(HttpError::Malformed("unsupported version"));
        }
        Ok(Some(HttpRequest { method: method.to_string(), path: path.to_string() }))
    }
}

fn status_line(status: u16) -> &'static str {
    match status {
        200 => "200 OK",
        404 => "404 Not Found",
        _ => "500 Internal Server Error",
    }
}

pub fn render_response_full(status: u16, content_type: &str, body: &[u8]) -> Vec<u8> {
    let mut out = format!(
        "HTTP/1.1 {}\r\nContent-Type: {}\r\nContent-Length: {}\r\n\r\n",
        status_line(status),
        content_type,
        body.len()
    )
    .into_bytes();
    out.extend_from_slice(body);
    out
}

pub fn render_response_chunked_head(content_type: &str) -> Vec<u8> {
    format!(
        "HTTP/1.1 200 OK\r\nContent-Type: {content_type}\r\nTransfer-Encoding: chunked\r\n\r\n"
    )
    .into_bytes()
}

pub fn render_chunk(data: &[u8]) -> Vec<u8> {
    let mut out = format!("{:x}\r\n", data.len()).into_bytes();
    out.extend_from_slice(data);
    out.extend_from_slice(b"\r\n");
    out
}

pub fn render_last_chunk() -> Vec<u8> {
    b"0\r\n\r\n".to_vec()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RespEvent {
    Status(u16),
    Body(Vec<u8>),
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Head,
    FixedBody { remaining: usize },
    ChunkSize,
    ChunkBody { remaining: usize },
    ChunkSep,
    Trailer,
    Done,
}

/// Incremental response parser covering `Content-Length` bodies, chunked
/// transfer encoding, and bodyless responses.
#[derive(Debug)]
pub struct ResponseParser {
    buf: Vec<u8>,
    stage: Stage,
}

impl Default for ResponseParser {
    fn default() -> Self {
        Self::new()
    }
}

impl ResponseParser {
    pub fn new() -> Self {
        Self { buf: Vec::new(), stage: Stage::Head }
    }

    pub fn done(&self) -> bool {
        self.stage == Stage::Done
    }

    pub fn push(&mut self, bytes: &[u8]) -> Result<Vec<RespEvent>, HttpError> {
        self.buf.extend_from_slice(bytes);
        let mut events = Vec::new();
        loop {
            match self.stage {
                Stage::Head => {
                    let Some(head_end) = find_subslice(&self.buf, b"\r\n\r\n") else { break };
                    let head = core::str::from_utf8(&self.buf[..head_end])
                        .map_err(|_| HttpError::Malformed("response head not utf-8"))?;
                    let mut lines = head.lines();
                    let status_line =
                        lines.next().ok_or(HttpError::Malformed("empty response"))?;
                    let status: u16 = status_line
                        .split(' ')
                        .nth(1)
                        .and_then(|s| s.parse().ok())
                        .ok_or(HttpError::Malformed("bad status line"))?;
                    let mut content_length: Option<usize> = None;
                    let mut chunked = false;
                    for line in lines {
                        let Some((name, value)) = line.split_once(':') else { continue };
                        let value = value.trim();
                        if name.eq_ignore_ascii_case("content-length") {
                            content_length = value.parse().ok();
                        } else if name.eq_ignore_ascii_case("transfer-encoding")
                            && value.eq_ignore_ascii_case("chunked")
                        {
                            chunked = true;
                        }
                    }
                    self.buf.drain(..head_end + 4);
                    events.push(RespEvent::Status(status));
                    self.stage = if chunked {
                        Stage::ChunkSize
                    } else {
                        match content_length.unwrap_or(0) {
                            0 => {
                                events.push(RespEvent::End);
                                Stage::Done
                            }
                            n => Stage::FixedBody { remaining: n },
                        }
                    };
                }
                Stage::FixedBody { remaining } => {
                    if self.buf.is_empty() {
                        break;
                    }
                    let take = remaining.min(self.buf.len());
                    let chunk: Vec<u8> = self.buf.drain(..take).collect();
                    events.push(RespEvent::Body(chunk));
                    if take == remaining {
                        events.push(RespEvent::End);
                        self.stage = Stage::Done;
                    } else {
                        self.stage = Stage::FixedBody { remaining: remaining - take };
                    }
                }
                Stage::ChunkSize => {
                    let Some(line_end) = find_subslice(&self.buf, b"\r\n") else { break };
                    let line = core::str::from_utf8(&self.buf[..line_end])
                        .map_err(|_| HttpError::Malformed("chunk size not utf-8"))?;
                    let size = usize::from_str_radix(line.trim(), 16)
                        .map_err(|_| HttpError::Malformed("bad chunk size"))?;
                    self.buf.drain(..line_end + 2);
                    self.stage = if size == 0 {
                        Stage::Trailer
                    } else {
                        Stage::ChunkBody { remaining: size }
                    };
                }
                Stage::ChunkBody { remaining } => {
                    if self.buf.is_empty() {
                        break;
                    }
                    let take = remaining.min(self.buf.len());
                    let chunk: Vec<u8> = self.buf.drain(..take).collect();
                    events.push(RespEvent::Body(chunk));
                    self.stage = if take == remaining {
                        Stage::ChunkSep
                    } else {
                        Stage::ChunkBody { remaining: remaining - take }
                    };
                }
                Stage::ChunkSep => {
                    if self.buf.len() < 2 {
                        break;
                    }
                    if &self.buf[..2] != b"\r\n" {
                        return Err(HttpError::Malformed("missing chunk separator"));
                    }
                    self.buf.drain(..2);
                    self.stage = Stage::ChunkSize;
                }
                Stage::Trailer => {
                    if self.buf.len() < 2 {
                        break;
                    }
                    if &self.buf[..2] != b"\r\n" {
                        return Err(HttpError::Malformed("missing trailer end"));
                    }
                    self.buf.drain(..2);
                    events.push(RespEvent::End);
                    self.stage = Stage::Done;
                }
                Stage::Done => break,
            }
        }
        Ok(events)
    }
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_round_trip() {
        let bytes = render_request("/live.mpd");
        let mut parser = RequestParser::new();
        let req = parser.push(&bytes).unwrap().unwrap();
        assert_eq!(req, HttpRequest { method: "GET".into(), path: "/live.mpd".into() });
    }

    #[test]
    fn request_parses_across_partial_pushes() {
        let bytes = render_request("/seg-3.m4s");
        let mut parser = RequestParser::new();
        assert!(parser.push(&bytes[..10]).unwrap().is_none());
        let req = parser.push(&bytes[10..]).unwrap().unwrap();
        assert_eq!(req.path, "/seg-3.m4s");
    }

    #[test]
    fn full_response_round_trip() {
        let body = b"0123456789".repeat(100);
        let wire = render_response_full(200, "video/mp4", &body);
        let mut parser = ResponseParser::new();
        let mut got = Vec::new();
        let mut status = 0;
        // Feed in awkward slices.
        for chunk in wire.chunks(7) {
            for event in parser.push(chunk).unwrap() {
                match event {
                    RespEvent::Status(s) => status = s,
                    RespEvent::Body(b) => got.extend(b),
                    RespEvent::End => {}
                }
            }
        }
        assert_eq!(status, 200);
        assert_eq!(got, body);
        assert!(parser.done());
    }

    #[test]
    fn not_found_has_no_body() {
        let wire = render_response_full(404, "text/plain", b"");
        let mut parser = ResponseParser::new();
        let events = parser.push(&wire).unwrap();
        assert_eq!(events, [RespEvent::Status(404), RespEvent::End]);
    }

    #[test]
    fn chunked_stream_round_trip() {
        let mut wire = render_response_chunked_head("video/mp4");
        let parts: [&[u8]; 3] = [b"alpha", b"beta-beta", b"gamma!"];
        for part in parts {
            wire.extend(render_chunk(part));
        }
        wire.extend(render_last_chunk());

        let mut parser = ResponseParser::new();
        let mut got = Vec::new();
        let mut ended = false;
        for chunk in wire.chunks(3) {
            for event in parser.push(chunk).unwrap() {
                match event {
                    RespEvent::Status(s) => assert_eq!(s, 200),
                    RespEvent::Body(b) => got.extend(b),
                    RespEvent::End => ended = true,
                }
            }
        }
        assert_eq!(got, b"alphabeta-betagamma!".to_vec());
        assert!(ended);
    }

    #[test]
    fn garbage_is_malformed() {
        let mut parser = ResponseParser::new();
        assert!(parser.push(b"HTTP/1.1 banana\r\n\r\n").is_err());
    }
}
