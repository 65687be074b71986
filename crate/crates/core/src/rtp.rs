//! RTP packetization, reassembly and a fixed-depth jitter buffer.
//!
//! Wire layout is the RFC 3550 fixed header, big-endian, no extensions and
//! no CSRC entries. All packets of one access unit share the timestamp and
//! the last one carries the marker bit; boundaries are detected from marker
//! plus sequence continuity, which is enough because the mock codec has no
//! NAL structure.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec::Vec;

pub const RTP_HEADER_LEN: usize = 12;
pub const DEFAULT_MTU_PAYLOAD: usize = 1200;
pub const MIN_MTU_PAYLOAD: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RtpHeader {
    pub marker: bool,
    pub payload_type: u8,
    pub seq: u16,
    pub timestamp: u32,
    pub ssrc: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RtpPacket {
    pub header: RtpHeader,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RtpError {
    Malformed(&'static str),
    BadVersion(u8),
}

impl core::fmt::Display for RtpError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            RtpError::Malformed(what) => write!(f, "malformed rtp packet: {what}"),
            RtpError::BadVersion(v) => write!(f, "unsupported rtp version {v}"),
        }
    }
}

impl core::error::Error for RtpError {}

pub fn serialize_header(h: &RtpHeader) -> [u8; RTP_HEADER_LEN] {
    let mut out = [0u8; RTP_HEADER_LEN];
    out[0] = 0x80; // version 2, no padding, no extension, no CSRCs
    out[1] = ((h.marker as u8) << 7) | (h.payload_type & 0x7F);
    out[2..4].copy_from_slice(&h.seq.to_be_bytes());
    out[4..8].copy_from_slice(&h.timestamp.to_be_bytes());
    out[8..12].copy_from_slice(&h.ssrc.to_be_bytes());
    out
}

pub fn parse_header(bytes: &[u8]) -> Result<RtpHeader, RtpError> {
    if bytes.len() < RTP_HEADER_LEN {
        return Err(RtpError::Malformed("shorter than fixed header"));
    }
    let version = bytes[0] >> 6;
    if version != 2 {
        return Err(RtpError::BadVersion(version));
    }
    if bytes[0] & 0x3F != 0 {
        return Err(RtpError::Malformed("padding/extension/csrc not supported"));
    }
    Ok(RtpHeader {
        marker: bytes[1] & 0x80 != 0,
        payload_type: bytes[1] & 0x7F,
        seq: u16::from_be_bytes(bytes[2..4].try_into().unwrap()),
        timestamp: u32::from_be_bytes(bytes[4..8].try_into().unwrap()),
        ssrc: u32::from_be_bytes(bytes[8..12].try_into().unwrap()),
    })
}

impl RtpPacket {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RTP_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&serialize_header(&self.header));
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RtpError> {
        let header = parse_header(bytes)?;
        Ok(Self { header, payload: bytes[RTP_HEADER_LEN..].to_vec() })
    }
}

/// Splits one access-unit payload into RTP packets of at most `mtu_payload`
/// payload bytes. Sequence numbers are contiguous (wrapping) from
/// `seq_start`; the marker sits on the last packet only.
pub fn packetize(
    au_payload: &[u8],
    timestamp: u32,
    mtu_payload: usize,
    payload_type: u8,
    ssrc: u32,
    seq_start: u16,
) -> Vec<RtpPacket> {
    assert!(mtu_payload >= MIN_MTU_PAYLOAD, "mtu_payload must be >= {MIN_MTU_PAYLOAD}");
    let chunks: Vec<&[u8]> = if au_payload.is_empty() {
        alloc::vec![&au_payload[..]]
    } else {
        au_payload.chunks(mtu_payload).collect()
    };
    let last = chunks.len() - 1;
    chunks
        .into_iter()
        .enumerate()
        .map(|(i, chunk)| RtpPacket {
            header: RtpHeader {
                marker: i == last,
                payload_type,
                seq: seq_start.wrapping_add(i as u16),
                timestamp,
                ssrc,
            },
            payload: chunk.to_vec(),
        })
        .collect()
}

/// A reassembled access-unit payload plus reception metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReassembledAu {
    pub payload: Vec<u8>,
    pub timestamp: u32,
    /// Arrival time of whichever fragment of this unit arrived first.
    pub first_fragment_arrival_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DepacketizerEvent {
    AuComplete(ReassembledAu),
    /// An access unit was abandoned because of a sequence gap. Carries the
    /// RTP timestamp of the unit when any of its fragments were seen.
    AuLost { timestamp: Option<u32> },
}

#[derive(Debug, Clone)]
struct Slot {
    payload: Vec<u8>,
    marker: bool,
    timestamp: u32,
    arrival_us: u64,
}

/// Reorder-tolerant reassembler.
///
/// Sequence numbers are unwrapped into a 64-bit space. An access unit is
/// emitted once every fragment from the current start boundary through a
/// marker packet is present; if a later unit completes while an earlier one
/// still has a hole, the earlier unit is discarded and reported lost.
#[derive(Debug, Default)]
pub struct Depacketizer {
    window: BTreeMap<u64, Slot>,
    expected_start: Option<u64>,
    highest_ext: Option<u64>,
    decided_any: bool,
    anchored: bool,
}

impl Depacketizer {
    /// Best-effort mode: the first packet seen is assumed to start a unit.
    /// Arbitrary arrival orders at stream start can misplace the boundary;
    /// prefer [`Depacketizer::with_initial_seq`] when the sender's first
    /// sequence number is known.
    pub fn new() -> Self {
        Self::default()
    }

    /// Anchored mode: reassembly starts exactly at `seq`, so any arrival
    /// permutation of the first unit reassembles correctly.
    pub fn with_initial_seq(seq: u16) -> Self {
        let mut d = Self { anchored: true, ..Self::default() };
        let ext = d.extend_seq(seq);
        d.expected_start = Some(ext);
        d
    }

    fn extend_seq(&mut self, seq: u16) -> u64 {
        // The extended space starts well above zero so reordered fragments
        // just below the first seen sequence number still unwrap downwards.
        const BASE: u64 = 1 << 32;
        let ext = match self.highest_ext {
            None => BASE + seq as u64,
            Some(hi) => {
                let page = hi & !0xFFFF;
                let mut candidate = page | seq as u64;
                let half = 0x8000u64;
                if candidate + half < hi {
                    candidate += 0x1_0000;
                } else if candidate > hi + half {
                    candidate -= 0x1_0000;
                }
                candidate
            }
        };
        if self.highest_ext.map_or(true, |hi| ext > hi) {
            self.highest_ext = Some(ext);
        }
        ext
    }

    pub fn on_packet(&mut self, packet: &RtpPacket, arrival_us: u64) -> Vec<DepacketizerEvent> {
        let ext = self.extend_seq(packet.header.seq);
        match self.expected_start {
            None => self.expected_start = Some(ext),
            Some(start) if ext < start => {
                if self.decided_any || self.anchored {
                    // Belongs to a unit that already played out or was
                    // abandoned; too late to matter.
                    return Vec::new();
                }
                // Reordered fragment at stream start lowers the boundary.
                self.expected_start = Some(ext);
            }
            _ => {}
        }
        self.window.entry(ext).or_insert_with(|| Slot {
            payload: packet.payload.clone(),
            marker: packet.header.marker,
            timestamp: packet.header.timestamp,
            arrival_us,
        });
        self.drain()
    }

    fn drain(&mut self) -> Vec<DepacketizerEvent> {
        let mut events = Vec::new();
        loop {
            let Some(start) = self.expected_start else { break };
            match self.contiguous_marker(start) {
                Some(marker_ext) => {
                    events.push(DepacketizerEvent::AuComplete(self.take_au(start, marker_ext)));
                    self.expected_start = Some(marker_ext + 1);
                    self.decided_any = true;
                }
                None => {
                    // Incomplete from `start`. Abandon it only once a later
                    // unit is fully present; reordered fragments of a live
                    // unit keep it pending.
                    let Some(next_start) = self.later_complete_start(start) else { break };
                    let mut lost_ts: Vec<u32> = self
                        .window
                        .range(start..next_start)
                        .map(|(_, slot)| slot.timestamp)
                        .collect();
                    lost_ts.dedup();
                    let doomed: Vec<u64> =
                        self.window.range(start..next_start).map(|(k, _)| *k).collect();
                    for k in doomed {
                        self.window.remove(&k);
                    }
                    if lost_ts.is_empty() {
                        events.push(DepacketizerEvent::AuLost { timestamp: None });
                    } else {
                        for ts in lost_ts {
                            events.push(DepacketizerEvent::AuLost { timestamp: Some(ts) });
                        }
                    }
                    self.expected_start = Some(next_start);
                    self.decided_any = true;
                }
            }
        }
        events
    }

    /// Marker position if everything from `start` through a marker is stored.
    fn contiguous_marker(&self, start: u64) -> Option<u64> {
        let mut ext = start;
        while let Some(slot) = self.window.get(&ext) {
            if slot.marker {
                return Some(ext);
            }
            ext += 1;
        }
        None
    }

    /// Start of the first fully-present unit strictly after a hole.
    fn later_complete_start(&self, start: u64) -> Option<u64> {
        for (&marker_ext, slot) in self.window.range(start..) {
            if !slot.marker {
                continue;
            }
            let ts = slot.timestamp;
            // Walk down the group sharing this timestamp.
            let mut lo = marker_ext;
            while lo > start {
                match self.window.get(&(lo - 1)) {
                    Some(prev) if prev.timestamp == ts && !prev.marker => lo -= 1,
                    _ => break,
                }
            }
            if lo == start {
                // This is the stalled unit itself (or merges into it).
                continue;
            }
            // Fragments of the same timestamp below the walk-down stop mean
            // this marker belongs to the stalled unit, split by a hole.
            if self.window.range(start..lo).any(|(_, s)| s.timestamp == ts) {
                continue;
            }
            match self.window.get(&(lo - 1)) {
                // An adjacent fragment of an older unit pins the boundary.
                Some(prev) if prev.timestamp != ts => return Some(lo),
                Some(_) => continue,
                None => {
                    // The boundary region itself is a hole, so the group may
                    // still be missing its own head. Only declare it once a
                    // further unit has started arriving: with jitter well
                    // below one frame interval any reordered fragment would
                    // have landed by then. A truncated head is caught later
                    // by payload verification.
                    if self.window.range(marker_ext + 1..).any(|(_, s)| s.marker) {
                        return Some(lo);
                    }
                    continue;
                }
            }
        }
        None
    }

    fn take_au(&mut self, start: u64, marker_ext: u64) -> ReassembledAu {
        let mut payload = Vec::new();
        let mut first_arrival = u64::MAX;
        let mut timestamp = 0;
        for ext in start..=marker_ext {
            let slot = self.window.remove(&ext).expect("contiguous range present");
            payload.extend_from_slice(&slot.payload);
            first_arrival = first_arrival.min(slot.arrival_us);
            timestamp = slot.timestamp;
        }
        ReassembledAu { payload, timestamp, first_fragment_arrival_us: first_arrival }
    }

    /// Number of fragments currently buffered.
    pub fn pending_fragments(&self) -> usize {
        self.window.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct JitterBufferConfig {
    pub target_delay_ms: u64,
    pub max_late_ms: u64,
}

impl Default for JitterBufferConfig {
    fn default() -> Self {
        Self { target_delay_ms: 50, max_late_ms: 200 }
    }
}

/// Playout-relevant fields of a verified access unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlayoutAu {
    pub seq: u64,
    pub pts_90k: u64,
    pub capture_ts_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JitterInsert {
    Queued,
    DroppedLate,
}

#[derive(Debug)]
struct JitterEntry {
    au: PlayoutAu,
    ready_at_us: u64,
}

/// Fixed-target playout buffer: a unit becomes ready `target_delay` after
/// its first fragment arrived and units leave strictly in pts order.
#[derive(Debug)]
pub struct JitterBuffer {
    cfg: JitterBufferConfig,
    entries: BTreeMap<u64, JitterEntry>,
    last_popped_pts: Option<u64>,
    recent_pops: VecDeque<(u64, u64)>, // (pts, pop time)
    late_dropped: u64,
}

impl JitterBuffer {
    pub fn new(cfg: JitterBufferConfig) -> Self {
        Self {
            cfg,
            entries: BTreeMap::new(),
            last_popped_pts: None,
            recent_pops: VecDeque::new(),
            late_dropped: 0,
        }
    }

    pub fn insert(&mut self, au: PlayoutAu, arrival_us: u64) -> JitterInsert {
        if let Some(last) = self.last_popped_pts {
            if au.pts_90k <= last {
                // A later unit already played. Allow it through only while
                // its successor's pop is younger than max_late.
                let successor_pop = self
                    .recent_pops
                    .iter()
                    .filter(|(pts, _)| *pts > au.pts_90k)
                    .map(|(_, at)| *at)
                    .min();
                let within = successor_pop
                    .map(|at| arrival_us.saturating_sub(at) <= self.cfg.max_late_ms * 1_000)
                    .unwrap_or(false);
                if !within {
                    self.late_dropped += 1;
                    return JitterInsert::DroppedLate;
                }
                // Late but tolerated: poppable immediately.
                self.entries.insert(au.pts_90k, JitterEntry { au, ready_at_us: arrival_us });
                return JitterInsert::Queued;
            }
        }
        let ready_at_us = arrival_us + self.cfg.target_delay_ms * 1_000;
        self.entries.insert(au.pts_90k, JitterEntry { au, ready_at_us });
        JitterInsert::Queued
    }

    /// Pops every unit that is ready, lowest pts first. A ready unit is
    /// never popped past a lower-pts unit that is still waiting.
    pub fn pop_ready(&mut self, now_us: u64) -> Vec<PlayoutAu> {
        let mut out = Vec::new();
        while let Some((&pts, entry)) = self.entries.iter().next() {
            if entry.ready_at_us > now_us {
                break;
            }
            out.push(entry.au);
            self.entries.remove(&pts);
            self.last_popped_pts = Some(pts);
            self.recent_pops.push_back((pts, now_us));
        }
        let horizon = now_us.saturating_sub(self.cfg.max_late_ms * 1_000 * 2);
        while self.recent_pops.front().is_some_and(|(_, at)| *at < horizon) {
            self.recent_pops.pop_front();
        }
        out
    }

    /// Ready time of the next unit in pts order, if any.
    pub fn next_ready_at(&self) -> Option<u64> {
        self.entries.values().next().map(|e| e.ready_at_us)
    }

    pub fn late_dropped(&self) -> u64 {
        self.late_dropped
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
