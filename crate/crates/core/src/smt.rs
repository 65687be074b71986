//! Stream-multiplexed transport over emulated datagrams.
//!
//! Ordered reliable byte streams with per-stream independence, plus
//! fire-and-forget datagrams. Reliability is cumulative-ACK with per-frame
//! retransmission timers at `rto = max(4 * srtt, 25 ms)`; there is no
//! congestion or flow control, the link emulator shapes bandwidth. This is
//! deliberately not the QUIC wire format, only the latency-relevant
//! behaviour: stream multiplexing, loss recovery and head-of-line effects.
//!
//! One wire frame travels per link datagram, big-endian throughout.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec::Vec;

pub const DEFAULT_MTU_PAYLOAD: usize = 1200;
pub const MIN_RTO_US: u64 = 25_000;
pub const STREAM_HEADER_LEN: usize = 16;

const TYPE_STREAM: u8 = 0;
const TYPE_ACK: u8 = 1;
const TYPE_DATAGRAM: u8 = 2;
const TYPE_PING: u8 = 3;
const FLAG_FIN: u8 = 0x01;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SmtFrame {
    Stream { stream_id: u32, offset: u64, fin: bool, data: Vec<u8> },
    Ack { stream_id: u32, cum_offset: u64 },
    Datagram { data: Vec<u8> },
    Ping,
}

impl SmtFrame {
    pub fn serialize(&self) -> Vec<u8> {
        match self {
            SmtFrame::Stream { stream_id, offset, fin, data } => {
                let mut out = Vec::with_capacity(STREAM_HEADER_LEN + data.len());
                out.push(TYPE_STREAM);
                out.extend_from_slice(&stream_id.to_be_bytes());
                out.extend_from_slice(&offset.to_be_bytes());
                out.push(if *fin { FLAG_FIN } else { 0 });
                out.extend_from_slice(&(data.len() as u16).to_be_bytes());
                out.extend_from_slice(data);
                out
            }
            SmtFrame::Ack { stream_id, cum_offset } => {
                let mut out = Vec::with_capacity(13);
                out.push(TYPE_ACK);
                out.extend_from_slice(&stream_id.to_be_bytes());
                out.extend_from_slice(&cum_offset.to_be_bytes());
                out
            }
            SmtFrame::Datagram { data } => {
                let mut out = Vec::with_capacity(3 + data.len());
                out.push(TYPE_DATAGRAM);
                out.extend_from_slice(&(data.len() as u16).to_be_bytes());
                out.extend_from_slice(data);
                out
            }
            SmtFrame::Ping => alloc::vec![TYPE_PING],
        }
    }

    pub fn parse(bytes: &[u8]) -> Result<SmtFrame, SmtError> {
        let kind = *bytes.first().ok_or(SmtError::Malformed("empty frame"))?;
        match kind {
            TYPE_STREAM => {
                if bytes.len() < STREAM_HEADER_LEN {
                    return Err(SmtError::Malformed("short stream header"));
                }
                let stream_id = u32::from_be_bytes(bytes[1..5].try_into().unwrap());
                let offset = u64::from_be_bytes(bytes[5..13].try_into().unwrap());
                let flags = bytes[13];
                let len = u16::from_be_bytes(bytes[14..16].try_into().unwrap()) as usize;
                if bytes.len() != STREAM_HEADER_LEN + len {
                    return Err(SmtError::Malformed("stream frame length mismatch"));
                }
                Ok(SmtFrame::Stream {
                    stream_id,
                    offset,
                    fin: flags & FLAG_FIN != 0,
                    data: bytes[STREAM_HEADER_LEN..].to_vec(),
                })
            }
            TYPE_ACK => {
                if bytes.len() != 13 {
                    return Err(SmtError::Malformed("bad ack length"));
                }
                Ok(SmtFrame::Ack {
                    stream_id: u32::from_be_bytes(bytes[1..5].try_into().unwrap()),
                    cum_offset: u64::from_be_bytes(bytes[5..13].try_into().unwrap()),
                })
            }
            TYPE_DATAGRAM => {
                if bytes.len() < 3 {
                    return Err(SmtError::Malformed("short datagram header"));
                }
                let len = u16::from_be_bytes(bytes[1..3].try_into().unwrap()) as usize;
                if bytes.len() != 3 + len {
                    return Err(SmtError::Malformed("datagram length mismatch"));
                }
                Ok(SmtFrame::Datagram { data: bytes[3..].to_vec() })
            }
            TYPE_PING => {
                if bytes.len() != 1 {
                    return Err(SmtError::Malformed("bad ping length"));
                }
                Ok(SmtFrame::Ping)
            }
            _ => Err(SmtError::Malformed("unknown frame type")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmtError {
    Malformed(&'static str),
    UnknownStream(u32),
    FinAlreadySent(u32),
    DatagramTooLarge(usize),
}

impl core::fmt::Display for SmtError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SmtError::Malformed(what) => write!(f, "malformed frame: {what}"),
            SmtError::UnknownStream(id) => write!(f, "stream {id} was never opened"),
            SmtError::FinAlreadySent(id) => write!(f, "stream {id} already finished"),
            SmtError::DatagramTooLarge(len) => write!(f, "datagram of {len} bytes too large"),
        }
    }
}

impl core::error::Error for SmtError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SmtEvent {
    /// New contiguous bytes on a peer stream.
    StreamData { stream_id: u32, data: Vec<u8> },
    /// Peer stream fully delivered through its FIN.
    StreamFin { stream_id: u32 },
    DatagramIn { data: Vec<u8> },
    AckProcessed { stream_id: u32, cum_offset: u64 },
    /// A datagram failed to parse as any frame.
    ConnectionError { reason: &'static str },
}

#[derive(Debug)]
struct SentFrame {
    data: Vec<u8>,
    fin: bool,
    send_time_us: u64,
    expiry_us: u64,
    retransmitted: bool,
}

#[derive(Debug, Default)]
struct SendStream {
    next_offset: u64,
    acked_offset: u64,
    fin_sent: bool,
    unacked: BTreeMap<u64, SentFrame>,
}

#[derive(Debug, Default)]
struct RecvStream {
    delivered: u64,
    pending: BTreeMap<u64, Vec<u8>>,
    fin_offset: Option<u64>,
    fin_emitted: bool,
}

/// One endpoint of a connection. Sender-side stream ids and peer stream
/// ids are independent namespaces, so both endpoints may open stream 1.
#[derive(Debug)]
pub struct SmtConnection {
    mtu_payload: usize,
    next_stream_id: u32,
    send_streams: BTreeMap<u32, SendStream>,
    recv_streams: BTreeMap<u32, RecvStream>,
    outgoing: VecDeque<Vec<u8>>,
    srtt_us: Option<u64>,
    retransmits: u64,
}

impl SmtConnection {
    pub fn new(mtu_payload: usize) -> Self {
        Self {
            mtu_payload: mtu_payload.min(u16::MAX as usize),
            next_stream_id: 1,
            send_streams: BTreeMap::new(),
            recv_streams: BTreeMap::new(),
            outgoing: VecDeque::new(),
            srtt_us: None,
            retransmits: 0,
        }
    }

    /// Stream ids count up from 1 and are never reused.
    pub fn open_stream(&mut self) -> u32 {
        let id = self.next_stream_id;
        self.next_stream_id += 1;
        self.send_streams.insert(id, SendStream::default());
        id
    }

    /// Attaches the reply direction of a peer-opened stream, so a
    /// responder can write back under the same id. Future locally
    /// allocated ids skip past `id`.
    pub fn ensure_send_stream(&mut self, id: u32) {
        self.send_streams.entry(id).or_default();
        if self.next_stream_id <= id {
            self.next_stream_id = id + 1;
        }
    }

    pub fn srtt_us(&self) -> Option<u64> {
        self.srtt_us
    }

    pub fn rto_us(&self) -> u64 {
        self.srtt_us.map_or(MIN_RTO_US, |s| (4 * s).max(MIN_RTO_US))
    }

    pub fn retransmits(&self) -> u64 {
        self.retransmits
    }

    /// Queues stream data, chunked into frames of at most `mtu_payload`
    /// data bytes. Unacked frames are retransmitted on their timers.
    pub fn stream_send(
        &mut self,
        stream_id: u32,
        bytes: &[u8],
        fin: bool,
        now_us: u64,
    ) -> Result<(), SmtError> {
        let rto = self.rto_us();
        let mtu = self.mtu_payload;
        let stream =
            self.send_streams.get_mut(&stream_id).ok_or(SmtError::UnknownStream(stream_id))?;
        if stream.fin_sent {
            return Err(SmtError::FinAlreadySent(stream_id));
        }
        let chunks: Vec<&[u8]> = if bytes.is_empty() {
            alloc::vec![&bytes[..]]
        } else {
            bytes.chunks(mtu).collect()
        };
        let last = chunks.len() - 1;
        for (i, chunk) in chunks.into_iter().enumerate() {
            let frame_fin = fin && i == last;
            let offset = stream.next_offset;
            stream.next_offset += chunk.len() as u64;
            let frame = SmtFrame::Stream {
                stream_id,
                offset,
                fin: frame_fin,
                data: chunk.to_vec(),
            };
            self.outgoing.push_back(frame.serialize());
            stream.unacked.insert(
                offset,
                SentFrame {
                    data: chunk.to_vec(),
                    fin: frame_fin,
                    send_time_us: now_us,
                    expiry_us: now_us + rto,
                    retransmitted: false,
                },
            );
        }
        if fin {
            stream.fin_sent = true;
        }
        Ok(())
    }

    /// Fire-and-forget datagram: no ACK, no retransmission.
    pub fn send_datagram(&mut self, bytes: &[u8]) -> Result<(), SmtError> {
        if bytes.len() > u16::MAX as usize
            || 3 + bytes.len() > crate::netem::MAX_DATAGRAM
        {
            return Err(SmtError::DatagramTooLarge(bytes.len()));
        }
        self.outgoing.push_back(SmtFrame::Datagram { data: bytes.to_vec() }.serialize());
        Ok(())
    }

    /// Next serialized frame destined for the link, if any.
    pub fn poll_transmit(&mut self) -> Option<Vec<u8>> {
        self.outgoing.pop_front()
    }

    pub fn has_transmit(&self) -> bool {
        !self.outgoing.is_empty()
    }

    /// Earliest retransmission deadline across all unacked frames.
    pub fn next_timeout(&self) -> Option<u64> {
        self.send_streams
            .values()
            .flat_map(|s| s.unacked.values().map(|f| f.expiry_us))
            .min()
    }

    /// Retransmits every frame whose timer expired.
    pub fn on_timeout(&mut self, now_us: u64) {
        let rto = self.rto_us();
        for (&stream_id, stream) in &mut self.send_streams {
            for (&offset, frame) in &mut stream.unacked {
                if frame.expiry_us <= now_us {
                    frame.retransmitted = true;
                    frame.send_time_us = now_us;
                    frame.expiry_us = now_us + rto;
                    self.retransmits += 1;
                    self.outgoing.push_back(
                        SmtFrame::Stream {
                            stream_id,
                            offset,
                            fin: frame.fin,
                            data: frame.data.clone(),
                        }
                        .serialize(),
                    );
                }
            }
        }
    }

    /// Feeds one received link datagram through the connection.
    pub fn on_datagram(&mut self, bytes: &[u8], now_us: u64) -> Vec<SmtEvent> {
        let frame = match SmtFrame::parse(bytes) {
            Ok(frame) => frame,
            Err(SmtError::Malformed(reason)) => {
                return alloc::vec![SmtEvent::ConnectionError { reason }];
            }
            Err(_) => unreachable!("parse only returns Malformed"),
        };
        match frame {
            SmtFrame::Stream { stream_id, offset, fin, data } => {
                self.on_stream_frame(stream_id, offset, fin, data)
            }
            SmtFrame::Ack { stream_id, cum_offset } => self.on_ack(stream_id, cum_offset, now_us),
            SmtFrame::Datagram { data } => alloc::vec![SmtEvent::DatagramIn { data }],
            SmtFrame::Ping => Vec::new(),
        }
    }

    fn on_stream_frame(
        &mut self,
        stream_id: u32,
        offset: u64,
        fin: bool,
        data: Vec<u8>,
    ) -> Vec<SmtEvent> {
        let stream = self.recv_streams.entry(stream_id).or_default();
        if fin {
            stream.fin_offset = Some(offset + data.len() as u64);
        }
        let end = offset + data.len() as u64;
        if end > stream.delivered && !data.is_empty() {
            // Keep only what is new; duplicates are dropped wholesale.
            stream.pending.entry(offset).or_insert(data);
        }

        let mut delivered = Vec::new();
        loop {
            let Some((&off, _)) = stream.pending.iter().next() else { break };
            if off > stream.delivered {
                break;
            }
            let chunk = stream.pending.remove(&off).unwrap();
            let end = off + chunk.len() as u64;
            if end > stream.delivered {
                let skip = (stream.delivered - off) as usize;
                delivered.extend_from_slice(&chunk[skip..]);
                stream.delivered = end;
            }
        }

        let mut events = Vec::new();
        if !delivered.is_empty() {
            events.push(SmtEvent::StreamData { stream_id, data: delivered });
        }
        if !stream.fin_emitted && stream.fin_offset == Some(stream.delivered) {
            stream.fin_emitted = true;
            events.push(SmtEvent::StreamFin { stream_id });
        }
        // Every received stream frame triggers a cumulative ACK.
        let ack = SmtFrame::Ack { stream_id, cum_offset: stream.delivered };
        self.outgoing.push_back(ack.serialize());
        events
    }

    fn on_ack(&mut self, stream_id: u32, cum_offset: u64, now_us: u64) -> Vec<SmtEvent> {
        if let Some(stream) = self.send_streams.get_mut(&stream_id) {
            if cum_offset > stream.acked_offset {
                stream.acked_offset = cum_offset;
            }
            let covered: Vec<u64> = stream
                .unacked
                .iter()
                .take_while(|(&off, frame)| off + frame.data.len() as u64 <= cum_offset)
                .map(|(&off, _)| off)
                .collect();
            let mut rtt_sample: Option<u64> = None;
            for off in covered {
                let frame = stream.unacked.remove(&off).unwrap();
                if !frame.retransmitted {
                    let sample = now_us.saturating_sub(frame.send_time_us);
                    rtt_sample = Some(rtt_sample.map_or(sample, |s: u64| s.max(sample)));
                }
            }
            if let Some(sample) = rtt_sample {
                // EWMA with alpha = 1/8.
                self.srtt_us = Some(match self.srtt_us {
                    None => sample,
                    Some(srtt) => (7 * srtt + sample) / 8,
                });
            }
        }
        alloc::vec![SmtEvent::AckProcessed { stream_id, cum_offset }]
    }

    /// Highest cumulatively acked offset for a send stream.
    pub fn acked_offset(&self, stream_id: u32) -> Option<u64> {
        self.send_streams.get(&stream_id).map(|s| s.acked_offset)
    }

    /// Bytes sent on a stream so far (offset of the next write).
    pub fn stream_offset(&self, stream_id: u32) -> Option<u64> {
        self.send_streams.get(&stream_id).map(|s| s.next_offset)
    }

    pub fn unacked_frames(&self) -> usize {
        self.send_streams.values().map(|s| s.unacked.len()).sum()
    }
}
