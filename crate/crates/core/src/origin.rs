//! Origin-server state for the HTTP delivery paths.
//!
//! Holds the manifest, the init segment and the live segment store, and
//! answers GET routes. Availability is state-driven: a plain-DASH segment
//! 404s until the packager marked it complete; a low-latency segment is
//! requestable as soon as the packager opened it, with fragments flushed
//! as chunks while it fills. Socket handling lives with the drivers.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::collections::BTreeMap;

use crate::mpd::{render_mpd, MpdConfig};

pub const MPD_PATH: &str = "/live.mpd";
pub const INIT_PATH: &str = "/init.mp4";

#[derive(Debug, Default)]
struct SegmentBuf {
    chunks: Vec<Vec<u8>>,
    complete: bool,
}

#[derive(Debug)]
pub struct OriginState {
    cfg: MpdConfig,
    mpd_text: String,
    init_bytes: Vec<u8>,
    segments: BTreeMap<u64, SegmentBuf>,
}

/// How a GET resolves against current origin state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OriginResponse {
    NotFound,
    Full { content_type: &'static str, body: Vec<u8> },
    /// Low-latency segment: is already-produced chunks plus whether the
    /// segment finished; the driver keeps streaming future fragments.
    Chunked { content_type: &'static str, chunks: Vec<Vec<u8>>, complete: bool, segment: u64 },
}

impl OriginState {
    pub fn new(cfg: MpdConfig, init_bytes: Vec<u8>) -> Self {
        let mpd_text = render_mpd(&cfg).expect("valid manifest config");
        Self { cfg, mpd_text, init_bytes, segments: BTreeMap::new() }
    }

    pub fn config(&self) -> &MpdConfig {
        &self.cfg
    }

    /// Packager opened segment `n`; it becomes requestable in low-latency
    /// mode from this point on.
    pub fn open_segment(&mut self, n: u64) {
        self.segments.entry(n).or_default();
    }

    /// Appends one produced fragment to segment `n`.
    pub fn publish_fragment(&mut self, n: u64, bytes: Vec<u8>) {
        self.segments.entry(n).or_default().chunks.push(bytes);
    }

    pub fn complete_segment(&mut self, n: u64) {
        self.segments.entry(n).or_default().complete = true;
    }

    pub fn is_complete(&self, n: u64) -> bool {
        self.segments.get(&n).is_some_and(|s| s.complete)
    }

    pub fn chunk_count(&self, n: u64) -> usize {
        self.segments.get(&n).map_or(0, |s| s.chunks.len())
    }

    pub fn chunk(&self, n: u64, index: usize) -> Option<&[u8]> {
        self.segments.get(&n)?.chunks.get(index).map(Vec::as_slice)
    }

    pub fn handle_get(&self, path: &str) -> OriginResponse {
        if path == MPD_PATH {
            return OriginResponse::Full {
                content_type: "application/dash+xml",
                body: self.mpd_text.clone().into_bytes(),
            };
        }
        if path == INIT_PATH {
            return OriginResponse::Full {
                content_type: "video/mp4",
                body: self.init_bytes.clone(),
            };
        }
        if let Some(n) = parse_segment_path(path) {
            let Some(segment) = self.segments.get(&n) else {
                return OriginResponse::NotFound;
            };
            if self.cfg.low_latency {
                return OriginResponse::Chunked {
                    content_type: "video/mp4",
                    chunks: segment.chunks.clone(),
                    complete: segment.complete,
                    segment: n,
                };
            }
            if segment.complete {
                let mut body = Vec::new();
                for chunk in &segment.chunks {
                    body.extend_from_slice(chunk);
                }
                return OriginResponse::Full { content_type: "video/mp4", body };
            }
            return OriginResponse::NotFound;
        }
        OriginResponse::NotFound
    }
}

/// `/seg-<N>.m4s` route, per the segment template.
pub fn parse_segment_path(path: &str) -> Option<u64> {
    path.strip_prefix("/seg-")?.strip_suffix(".m4s")?.parse().ok()
}

pub fn segment_path(n: u64) -> String {
    alloc::format!("/seg-{n}.m4s")
}
