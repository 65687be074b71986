//! Frame synthesis and the deterministic mock codec.
//!
//! Real encoders are out of scope; what the latency paths need is an
//! access-unit stream with realistic sizes and a machine-checkable capture
//! timestamp. Each encoded payload starts with a small header carrying the
//! capture time and a CRC, followed by padding that the receiver can
//! regenerate from `(seed, seq)` to verify end-to-end integrity.

use alloc::vec;
use alloc::vec::Vec;

use crate::prng;

pub const TIMESCALE: u64 = 90_000;

/// Size of the access-unit header embedded at the start of every payload.
pub const AU_HEADER_LEN: usize = 25;
const AU_MAGIC: &[u8; 4] = b"RRAU";
const AU_VERSION: u8 = 1;

/// Length-prefix plus fixed field block of a serialized access-unit record.
pub const AU_RECORD_FIXED: usize = 29;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VideoConfig {
    pub width: u32,
    pub height: u32,
    pub fps: u32,
    pub seed: u64,
}

impl Default for VideoConfig {
    fn default() -> Self {
        Self { width: 1920, height: 1080, fps: 60, seed: 1 }
    }
}

impl VideoConfig {
    pub fn frame_payload_len(&self) -> usize {
        (self.width as usize * self.height as usize * 3) / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EncoderConfig {
    pub gop_length: u32,
    pub bitrate_bps: u64,
    pub fps: u32,
    /// Size ratio of a keyframe relative to a P frame.
    pub i_to_p_weight: u32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { gop_length: 5, bitrate_bps: 10_000_000, fps: 60, i_to_p_weight: 3 }
    }
}

impl EncoderConfig {
    /// Per-GOP byte budget: `floor(bitrate * gop / (8 * fps))`.
    pub fn gop_budget_bytes(&self) -> u64 {
        self.bitrate_bps * self.gop_length as u64 / (8 * self.fps as u64)
    }

    /// Payload size of one frame under the I/P weighting scheme.
    pub fn frame_payload_len(&self, keyframe: bool) -> usize {
        let budget = self.gop_budget_bytes();
        let denom = (self.i_to_p_weight + self.gop_length - 1) as u64;
        let raw = if keyframe {
            self.i_to_p_weight as u64 * budget / denom
        } else {
            budget / denom
        };
        // A payload must at least hold its own header.
        raw.max(AU_HEADER_LEN as u64) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrame {
    pub seq: u64,
    pub capture_ts_us: u64,
    pub width: u32,
    pub height: u32,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessUnit {
    pub seq: u64,
    pub pts_90k: u64,
    pub dts_90k: u64,
    pub keyframe: bool,
    pub capture_ts_us: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MediaError {
    /// Encoder was handed a frame out of sequence order.
    OutOfOrder { expected: u64, got: u64 },
    /// Byte input does not form a valid record or access unit.
    Malformed(&'static str),
}

impl core::fmt::Display for MediaError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MediaError::OutOfOrder { expected, got } => {
                write!(f, "frame out of order: expected seq {expected}, got {got}")
            }
            MediaError::Malformed(what) => write!(f, "malformed input: {what}"),
        }
    }
}

impl core::error::Error for MediaError {}

/// Presentation timestamp of a frame index in 90 kHz ticks.
pub fn pts_90k(seq: u64, fps: u32) -> u64 {
    (seq * TIMESCALE + fps as u64 / 2) / fps as u64
}

/// Produces the raw frame for `seq` with a pattern keyed by `(cfg.seed, seq)`.
pub fn synthesize_frame(seq: u64, cfg: &VideoConfig, now_us: u64) -> RawFrame {
    let mut payload = vec![0u8; cfg.frame_payload_len()];
    prng::fill_frame_pattern(cfg.seed, seq, &mut payload);
    RawFrame { seq, capture_ts_us: now_us, width: cfg.width, height: cfg.height, payload }
}

/// Mock encoder. Frames must be presented in sequence order.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    seed: u64,
    next_seq: u64,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Self {
        Self { cfg, seed, next_seq: 0 }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn encode(&mut self, frame: &RawFrame) -> Result<AccessUnit, MediaError> {
        if frame.seq != self.next_seq {
            return Err(MediaError::OutOfOrder { expected: self.next_seq, got: frame.seq });
        }
        self.next_seq += 1;

        let keyframe = frame.seq % self.cfg.gop_length as u64 == 0;
        let payload_len = self.cfg.frame_payload_len(keyframe);
        let mut payload = vec![0u8; payload_len];
        write_au_header(&mut payload, frame.seq, frame.capture_ts_us);
        prng::fill_au_padding(self.seed, frame.seq, &mut payload[AU_HEADER_LEN..]);

        let pts = pts_90k(frame.seq, self.cfg.fps);
        Ok(AccessUnit {
            seq: frame.seq,
            pts_90k: pts,
            dts_90k: pts,
            keyframe,
            capture_ts_us: frame.capture_ts_us,
            payload,
        })
    }
}

fn write_au_header(payload: &mut [u8], seq: u64, capture_ts_us: u64) {
    let total_len = payload.len() as u32;
    payload[0..4].copy_from_slice(AU_MAGIC);
    payload[4] = AU_VERSION;
    payload[5..9].copy_from_slice(&(seq as u32).to_be_bytes());
    payload[9..17].copy_from_slice(&capture_ts_us.to_be_bytes());
    payload[17..21].copy_from_slice(&total_len.to_be_bytes());
    let crc = crc32fast::hash(&payload[..21]);
    payload[21..25].copy_from_slice(&crc.to_be_bytes());
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodedAu {
    pub seq: u64,
    pub capture_ts_us: u64,
    pub verified: bool,
}

/// Parses an access-unit payload and checks header CRC plus padding.
pub fn decode_verify(au_bytes: &[u8], seed: u64) -> Result<DecodedAu, MediaError> {
    if au_bytes.len() < AU_HEADER_LEN {
        return Err(MediaError::Malformed("access unit shorter than header"));
    }
    if &au_bytes[0..4] != AU_MAGIC {
        return Err(MediaError::Malformed("bad access unit magic"));
    }
    if au_bytes[4] != AU_VERSION {
        return Err(MediaError::Malformed("unsupported access unit version"));
    }
    let seq = u32::from_be_bytes(au_bytes[5..9].try_into().unwrap()) as u64;
    let capture_ts_us = u64::from_be_bytes(au_bytes[9..17].try_into().unwrap());
    let payload_len = u32::from_be_bytes(au_bytes[17..21].try_into().unwrap()) as usize;
    if payload_len != au_bytes.len() {
        return Err(MediaError::Malformed("access unit length mismatch"));
    }
    let stored_crc = u32::from_be_bytes(au_bytes[21..25].try_into().unwrap());
    let mut verified = crc32fast::hash(&au_bytes[..21]) == stored_crc;
    if verified {
        let mut expect = vec![0u8; au_bytes.len() - AU_HEADER_LEN];
        prng::fill_au_padding(seed, seq, &mut expect);
        verified = expect == au_bytes[AU_HEADER_LEN..];
    }
    Ok(DecodedAu { seq, capture_ts_us, verified })
}

/// Serializes an access unit as one length-prefixed record.
///
/// Layout, all big-endian: `len u32` (bytes following the length field),
/// `seq u32`, `pts u64`, `dts u64`, `keyframe u8`, `capture_ts_us u64`,
/// then the payload.
pub fn serialize_au(au: &AccessUnit) -> Vec<u8> {
    let body_len = AU_RECORD_FIXED + au.payload.len();
    let mut out = Vec::with_capacity(4 + body_len);
    out.extend_from_slice(&(body_len as u32).to_be_bytes());
    out.extend_from_slice(&(au.seq as u32).to_be_bytes());
    out.extend_from_slice(&au.pts_90k.to_be_bytes());
    out.extend_from_slice(&au.dts_90k.to_be_bytes());
    out.push(au.keyframe as u8);
    out.extend_from_slice(&au.capture_ts_us.to_be_bytes());
    out.extend_from_slice(&au.payload);
    out
}

/// Inverse of [`serialize_au`]. The input must be exactly one record.
pub fn deserialize_au(bytes: &[u8]) -> Result<AccessUnit, MediaError> {
    if bytes.len() < 4 + AU_RECORD_FIXED {
        return Err(MediaError::Malformed("record shorter than fixed block"));
    }
    let body_len = u32::from_be_bytes(bytes[0..4].try_into().unwrap()) as usize;
    if bytes.len() != 4 + body_len {
        return Err(MediaError::Malformed("record length mismatch"));
    }
    let seq = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let pts_90k = u64::from_be_bytes(bytes[8..16].try_into().unwrap());
    let dts_90k = u64::from_be_bytes(bytes[16..24].try_into().unwrap());
    let keyframe = match bytes[24] {
        0 => false,
        1 => true,
        _ => return Err(MediaError::Malformed("bad keyframe flag")),
    };
    let capture_ts_us = u64::from_be_bytes(bytes[25..33].try_into().unwrap());
    Ok(AccessUnit { seq, pts_90k, dts_90k, keyframe, capture_ts_us, payload: bytes[33..].to_vec() })
}
