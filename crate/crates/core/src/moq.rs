//! Simplified media-over-streams delivery: tracks, groups and objects.
//!
//! A group maps to one GOP and rides its own transport stream, so loss in
//! one group never blocks another. Each object wraps a single-sample
//! movie fragment. The subscriber plays groups in order and, when a group
//! stalls while a later group's first object (a keyframe by construction)
//! is already complete, abandons the stale group and resumes there.
//!
//! Wire layouts are fixed big-endian structs; this is a named
//! simplification, not the IETF wire format.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::bmff;
use crate::media::AccessUnit;
use crate::smt::SmtConnection;

pub const OBJECT_HEADER_LEN: usize = 20;
const CTRL_ANNOUNCE: u8 = 1;
const CTRL_SUBSCRIBE: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MoqControlMessage {
    Announce { track_id: u32, name: String },
    Subscribe { track_id: u32 },
}

impl MoqControlMessage {
    pub fn serialize(&self) -> Vec<u8> {
        match self {
            MoqControlMessage::Announce { track_id, name } => {
                let name = &name.as_bytes()[..name.len().min(255)];
                let mut out = Vec::with_capacity(6 + name.len());
                out.push(CTRL_ANNOUNCE);
                out.extend_from_slice(&track_id.to_be_bytes());
                out.push(name.len() as u8);
                out.extend_from_slice(name);
                out
            }
            MoqControlMessage::Subscribe { track_id } => {
                let mut out = Vec::with_capacity(5);
                out.push(CTRL_SUBSCRIBE);
                out.extend_from_slice(&track_id.to_be_bytes());
                out
            }
        }
    }

    pub fn parse(bytes: &[u8]) -> Result<(MoqControlMessage, usize), MoqError> {
        let kind = *bytes.first().ok_or(MoqError::Malformed("empty control message"))?;
        match kind {
            CTRL_ANNOUNCE => {
                if bytes.len() < 6 {
                    return Err(MoqError::Malformed("short announce"));
                }
                let track_id = u32::from_be_bytes(bytes[1..5].try_into().unwrap());
                let name_len = bytes[5] as usize;
                if bytes.len() < 6 + name_len {
                    return Err(MoqError::Malformed("short announce name"));
                }
                let name = core::str::from_utf8(&bytes[6..6 + name_len])
                    .map_err(|_| MoqError::Malformed("announce name not utf-8"))?;
                Ok((
                    MoqControlMessage::Announce { track_id, name: String::from(name) },
                    6 + name_len,
                ))
            }
            CTRL_SUBSCRIBE => {
                if bytes.len() < 5 {
                    return Err(MoqError::Malformed("short subscribe"));
                }
                let track_id = u32::from_be_bytes(bytes[1..5].try_into().unwrap());
                Ok((MoqControlMessage::Subscribe { track_id }, 5))
            }
            _ => Err(MoqError::Malformed("unknown control type")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoqObjectHeader {
    pub track_id: u32,
    pub group_id: u64,
    pub object_id: u32,
    pub payload_len: u32,
}

impl MoqObjectHeader {
    pub fn serialize(&self) -> [u8; OBJECT_HEADER_LEN] {
        let mut out = [0u8; OBJECT_HEADER_LEN];
        out[0..4].copy_from_slice(&self.track_id.to_be_bytes());
        out[4..12].copy_from_slice(&self.group_id.to_be_bytes());
        out[12..16].copy_from_slice(&self.object_id.to_be_bytes());
        out[16..20].copy_from_slice(&self.payload_len.to_be_bytes());
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<MoqObjectHeader, MoqError> {
        if bytes.len() < OBJECT_HEADER_LEN {
            return Err(MoqError::Malformed("short object header"));
        }
        Ok(MoqObjectHeader {
            track_id: u32::from_be_bytes(bytes[0..4].try_into().unwrap()),
            group_id: u64::from_be_bytes(bytes[4..12].try_into().unwrap()),
            object_id: u32::from_be_bytes(bytes[12..16].try_into().unwrap()),
            payload_len: u32::from_be_bytes(bytes[16..20].try_into().unwrap()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoqError {
    Malformed(&'static str),
    OutOfOrder { expected: u64, got: u64 },
}

impl core::fmt::Display for MoqError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MoqError::Malformed(what) => write!(f, "malformed moq data: {what}"),
            MoqError::OutOfOrder { expected, got } => {
                write!(f, "access unit out of order: expected {expected}, got {got}")
            }
        }
    }
}

impl core::error::Error for MoqError {}

/// Publisher side: one object per access unit, one stream per group.
#[derive(Debug)]
pub struct MoqPublisher {
    track_id: u32,
    gop_length: u32,
    sample_duration_90k: u32,
    control_stream: u32,
    next_seq: u64,
    current_stream: Option<u32>,
    subscribed: bool,
}

impl MoqPublisher {
    /// Opens the control stream (always the connection's first, id 1) and
    /// announces the track.
    pub fn new(
        conn: &mut SmtConnection,
        track_id: u32,
        name: &str,
        gop_length: u32,
        fps: u32,
        now_us: u64,
    ) -> Self {
        let control_stream = conn.open_stream();
        let msg = MoqControlMessage::Announce { track_id, name: String::from(name) };
        conn.stream_send(control_stream, &msg.serialize(), false, now_us)
            .expect("control stream just opened");
        Self {
            track_id,
            gop_length,
            sample_duration_90k: 90_000 / fps,
            control_stream,
            next_seq: 0,
            current_stream: None,
            subscribed: false,
        }
    }

    pub fn control_stream(&self) -> u32 {
        self.control_stream
    }

    pub fn is_subscribed(&self) -> bool {
        self.subscribed
    }

    /// Handles control bytes arriving from the subscriber.
    pub fn on_control_data(&mut self, data: &[u8]) -> Result<(), MoqError> {
        let (msg, _) = MoqControlMessage::parse(data)?;
        if let MoqControlMessage::Subscribe { track_id } = msg {
            if track_id == self.track_id {
                self.subscribed = true;
            }
        }
        Ok(())
    }

    pub fn group_of(&self, seq: u64) -> u64 {
        seq / self.gop_length as u64
    }

    pub fn object_of(&self, seq: u64) -> u32 {
        (seq % self.gop_length as u64) as u32
    }

    /// Publishes one access unit: opens a fresh stream at each group start,
    /// writes `header + fragment`, and finishes the stream after the
    /// group's last object.
    pub fn publish(
        &mut self,
        conn: &mut SmtConnection,
        au: &AccessUnit,
        now_us: u64,
    ) -> Result<(), MoqError> {
        if au.seq != self.next_seq {
            return Err(MoqError::OutOfOrder { expected: self.next_seq, got: au.seq });
        }
        self.next_seq += 1;

        let group_id = self.group_of(au.seq);
        let object_id = self.object_of(au.seq);
        if object_id == 0 {
            self.current_stream = Some(conn.open_stream());
        }
        let stream = self.current_stream.expect("stream opened at group start");

        let fragment =
            bmff::build_fragment(core::slice::from_ref(au), au.seq as u32 + 1, 1, self.sample_duration_90k)
                .expect("single access unit");
        let header = MoqObjectHeader {
            track_id: self.track_id,
            group_id,
            object_id,
            payload_len: fragment.bytes.len() as u32,
        };
        let mut object = Vec::with_capacity(OBJECT_HEADER_LEN + fragment.bytes.len());
        object.extend_from_slice(&header.serialize());
        object.extend_from_slice(&fragment.bytes);

        let fin = object_id == self.gop_length - 1;
        conn.stream_send(stream, &object, fin, now_us)
            .expect("group stream accepts writes until fin");
        if fin {
            self.current_stream = None;
        }
        Ok(())
    }
}

/// One access unit handed to playout, in play order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveredAu {
    pub group_id: u64,
    pub object_id: u32,
    pub pts_90k: u64,
    pub keyframe: bool,
    pub payload: Vec<u8>,
    pub arrival_us: u64,
}

#[derive(Debug, Default)]
struct GroupState {
    /// Complete objects waiting for emission, keyed by object id.
    objects: BTreeMap<u32, (Vec<u8>, u64)>,
    next_emit: u32,
}

#[derive(Debug, Default)]
struct StreamBuf {
    bytes: Vec<u8>,
    /// Arrival of the first byte of the object currently assembling; the
    /// playout buffer anchors on first-fragment arrival, matching the
    /// packet paths.
    first_arrival: Option<u64>,
}

/// Subscriber side: reassembles objects per stream, plays groups in
/// ascending order, skips stale groups at keyframe boundaries.
#[derive(Debug)]
pub struct MoqSubscriber {
    gop_length: u32,
    announced: Option<(u32, String)>,
    stream_bufs: BTreeMap<u32, StreamBuf>,
    stream_group: BTreeMap<u32, u64>,
    groups: BTreeMap<u64, GroupState>,
    play_group: u64,
    skipped_frames: u64,
    errored_streams: u64,
}

impl MoqSubscriber {
    pub fn new(gop_length: u32) -> Self {
        Self {
            gop_length,
            announced: None,
            stream_bufs: BTreeMap::new(),
            stream_group: BTreeMap::new(),
            groups: BTreeMap::new(),
            play_group: 0,
            skipped_frames: 0,
            errored_streams: 0,
        }
    }

    /// Control bytes from the publisher; returns the announced track.
    pub fn on_control_data(&mut self, data: &[u8]) -> Result<Option<(u32, String)>, MoqError> {
        let (msg, _) = MoqControlMessage::parse(data)?;
        if let MoqControlMessage::Announce { track_id, name } = msg {
            self.announced = Some((track_id, name.clone()));
            return Ok(Some((track_id, name)));
        }
        Ok(None)
    }

    /// Sends the subscription for `track_id` on the connection's control
    /// stream (opened here if this endpoint has none yet).
    pub fn subscribe(&self, conn: &mut SmtConnection, track_id: u32, now_us: u64) -> u32 {
        let control = conn.open_stream();
        let msg = MoqControlMessage::Subscribe { track_id };
        conn.stream_send(control, &msg.serialize(), false, now_us)
            .expect("control stream just opened");
        control
    }

    pub fn skipped_frames(&self) -> u64 {
        self.skipped_frames
    }

    pub fn errored_streams(&self) -> u64 {
        self.errored_streams
    }

    /// Feeds contiguous stream bytes from one media stream.
    pub fn on_stream_data(
        &mut self,
        stream_id: u32,
        data: &[u8],
        arrival_us: u64,
    ) -> Vec<DeliveredAu> {
        {
            let buf = self.stream_bufs.entry(stream_id).or_default();
            if buf.bytes.is_empty() && !data.is_empty() {
                buf.first_arrival = Some(arrival_us);
            }
            buf.bytes.extend_from_slice(data);
        }

        // Parse as many complete objects as the buffer holds.
        loop {
            let buf = self.stream_bufs.get_mut(&stream_id).unwrap();
            if buf.bytes.len() < OBJECT_HEADER_LEN {
                break;
            }
            let header = match MoqObjectHeader::parse(&buf.bytes) {
                Ok(h) => h,
                Err(_) => {
                    self.errored_streams += 1;
                    self.stream_bufs.remove(&stream_id);
                    break;
                }
            };
            let total = OBJECT_HEADER_LEN + header.payload_len as usize;
            if buf.bytes.len() < total {
                break;
            }
            let payload = buf.bytes[OBJECT_HEADER_LEN..total].to_vec();
            buf.bytes.drain(..total);
            let object_arrival = buf.first_arrival.take().unwrap_or(arrival_us);
            if !buf.bytes.is_empty() {
                // Leftover bytes start the next object; they landed now.
                buf.first_arrival = Some(arrival_us);
            }
            self.stream_group.entry(stream_id).or_insert(header.group_id);
            if header.group_id >= self.play_group {
                self.groups
                    .entry(header.group_id)
                    .or_default()
                    .objects
                    .insert(header.object_id, (payload, object_arrival));
            }
        }
        self.drain()
    }

    /// Emits everything playable: the current group's next objects in
    /// order, advancing across completed groups, applying the skip policy
    /// when the current group stalls behind a ready keyframe.
    fn drain(&mut self) -> Vec<DeliveredAu> {
        let mut out = Vec::new();
        loop {
            let group_id = self.play_group;
            let emitted_before = self.groups.get(&group_id).map_or(0, |g| g.next_emit);

            // Emit in object order while data is ready.
            let mut finished_group = false;
            if let Some(group) = self.groups.get_mut(&group_id) {
                while let Some((payload, arrival)) = group.objects.remove(&group.next_emit) {
                    if let Some(au) = delivered_from_object(group_id, group.next_emit, &payload, arrival) {
                        out.push(au);
                    } else {
                        self.errored_streams += 1;
                    }
                    group.next_emit += 1;
                    if group.next_emit == self.gop_length {
                        finished_group = true;
                        break;
                    }
                }
            }
            if finished_group {
                self.groups.remove(&group_id);
                self.play_group += 1;
                continue;
            }
            let _ = emitted_before;

            // Stalled. Jump only if a later group's keyframe object is in.
            let next_key = self
                .groups
                .range(group_id + 1..)
                .find(|(_, g)| g.objects.contains_key(&0) || g.next_emit > 0)
                .map(|(&id, _)| id);
            match next_key {
                Some(target) => {
                    let mut skipped = 0u64;
                    for gid in group_id..target {
                        let emitted =
                            self.groups.get(&gid).map_or(0, |g| g.next_emit) as u64;
                        skipped += self.gop_length as u64 - emitted;
                        self.groups.remove(&gid);
                    }
                    self.skipped_frames += skipped;
                    self.play_group = target;
                }
                None => break,
            }
        }
        out
    }
}

fn delivered_from_object(
    group_id: u64,
    object_id: u32,
    fragment_bytes: &[u8],
    arrival_us: u64,
) -> Option<DeliveredAu> {
    let parsed = bmff::parse_fragment(fragment_bytes).ok()?;
    let payload = parsed.payloads.into_iter().next()?;
    Some(DeliveredAu {
        group_id,
        object_id,
        pts_90k: parsed.base_dts_90k,
        keyframe: *parsed.keyframes.first()?,
        payload,
        arrival_us,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::{synthesize_frame, Encoder, EncoderConfig, VideoConfig};
    use crate::smt::{SmtEvent, DEFAULT_MTU_PAYLOAD};

    fn encode_n(n: u64) -> Vec<AccessUnit> {
        let vcfg = VideoConfig::default();
        let mut enc = Encoder::new(EncoderConfig::default(), vcfg.seed);
        (0..n)
            .map(|seq| enc.encode(&synthesize_frame(seq, &vcfg, seq * 16_667)).unwrap())
            .collect()
    }

    #[test]
    fn control_messages_round_trip() {
        for msg in [
            MoqControlMessage::Announce { track_id: 7, name: String::from("video0") },
            MoqControlMessage::Subscribe { track_id: 7 },
        ] {
            let bytes = msg.serialize();
            let (parsed, used) = MoqControlMessage::parse(&bytes).unwrap();
            assert_eq!(parsed, msg);
            assert_eq!(used, bytes.len());
        }
        assert!(MoqControlMessage::parse(&[9]).is_err());
    }

    #[test]
    fn object_header_round_trip() {
        let h = MoqObjectHeader { track_id: 1, group_id: 55, object_id: 4, payload_len: 999 };
        assert_eq!(MoqObjectHeader::parse(&h.serialize()).unwrap(), h);
        assert!(MoqObjectHeader::parse(&[0; 19]).is_err());
    }

    #[test]
    fn group_object_mapping() {
        let mut conn = SmtConnection::new(DEFAULT_MTU_PAYLOAD);
        let publisher = MoqPublisher::new(&mut conn, 1, "video", 5, 60, 0);
        assert_eq!(publisher.group_of(12), 2);
        assert_eq!(publisher.object_of(12), 2);
        assert_eq!(publisher.group_of(0), 0);
    }

    #[test]
    fn one_stream_per_group_with_fin() {
        let mut conn = SmtConnection::new(DEFAULT_MTU_PAYLOAD);
        let mut publisher = MoqPublisher::new(&mut conn, 1, "video", 5, 60, 0);
        while conn.poll_transmit().is_some() {}
        for au in encode_n(5) {
            publisher.publish(&mut conn, &au, 0).unwrap();
        }
        let mut stream_ids = alloc::collections::BTreeSet::new();
        let mut fin_count = 0;
        while let Some(frame) = conn.poll_transmit() {
            if let crate::smt::SmtFrame::Stream { stream_id, fin, .. } =
                crate::smt::SmtFrame::parse(&frame).unwrap()
            {
                stream_ids.insert(stream_id);
                fin_count += usize::from(fin);
            }
        }
        assert_eq!(stream_ids.len(), 1);
        assert_eq!(fin_count, 1);
        // 600 frames -> 120 groups, each on its own stream (plus control).
        let mut conn = SmtConnection::new(DEFAULT_MTU_PAYLOAD);
        let mut publisher = MoqPublisher::new(&mut conn, 1, "video", 5, 60, 0);
        for au in encode_n(600) {
            publisher.publish(&mut conn, &au, 0).unwrap();
        }
        assert_eq!(publisher.group_of(599), 119);
        assert_eq!(conn.stream_offset(121).is_some(), true);
        assert_eq!(conn.stream_offset(122), None);
    }

    #[test]
    fn out_of_order_publish_rejected() {
        let mut conn = SmtConnection::new(DEFAULT_MTU_PAYLOAD);
        let mut publisher = MoqPublisher::new(&mut conn, 1, "video", 5, 60, 0);
        let aus = encode_n(3);
        publisher.publish(&mut conn, &aus[0], 0).unwrap();
        assert_eq!(
            publisher.publish(&mut conn, &aus[2], 0),
            Err(MoqError::OutOfOrder { expected: 1, got: 2 })
        );
    }

    #[test]
    fn lossless_transfer_delivers_in_order() {
        let mut pub_conn = SmtConnection::new(DEFAULT_MTU_PAYLOAD);
        let mut sub_conn = SmtConnection::new(DEFAULT_MTU_PAYLOAD);
        let mut publisher = MoqPublisher::new(&mut pub_conn, 1, "video", 5, 60, 0);
        let mut subscriber = MoqSubscriber::new(5);
        subscriber.subscribe(&mut sub_conn, 1, 0);

        // Control exchange both ways.
        while let Some(frame) = sub_conn.poll_transmit() {
            for ev in pub_conn.on_datagram(&frame, 0) {
                if let SmtEvent::StreamData { data, .. } = ev {
                    publisher.on_control_data(&data).unwrap();
                }
            }
        }
        assert!(publisher.is_subscribed());

        let aus = encode_n(25);
        let mut delivered = Vec::new();
        for au in &aus {
            publisher.publish(&mut pub_conn, au, 0).unwrap();
            while let Some(frame) = pub_conn.poll_transmit() {
                for ev in sub_conn.on_datagram(&frame, 0) {
                    match ev {
                        SmtEvent::StreamData { stream_id, data }
                            if stream_id != publisher.control_stream() =>
                        {
                            delivered.extend(subscriber.on_stream_data(stream_id, &data, 0));
                        }
                        SmtEvent::StreamData { data, .. } => {
                            subscriber.on_control_data(&data).unwrap();
                        }
                        _ => {}
                    }
                }
            }
        }
        assert_eq!(delivered.len(), aus.len());
        for (i, au) in delivered.iter().enumerate() {
            assert_eq!(au.payload, aus[i].payload);
            assert_eq!(au.pts_90k, aus[i].pts_90k);
            assert_eq!(au.keyframe, i % 5 == 0);
        }
        assert_eq!(subscriber.skipped_frames(), 0);
    }

    /// Builds the raw object bytes for one access unit.
    fn object_bytes(au: &AccessUnit, gop: u32) -> (u64, u32, Vec<u8>) {
        let group = au.seq / gop as u64;
        let object = (au.seq % gop as u64) as u32;
        let fragment = bmff::build_fragment(core::slice::from_ref(au), au.seq as u32 + 1, 1, 1500).unwrap();
        let header = MoqObjectHeader {
            track_id: 1,
            group_id: group,
            object_id: object,
            payload_len: fragment.bytes.len() as u32,
        };
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&header.serialize());
        bytes.extend_from_slice(&fragment.bytes);
        (group, object, bytes)
    }

    #[test]
    fn stalled_group_skipped_at_next_keyframe() {
        // Groups 0..2 play fine; group 3 stalls mid-way; once group 4's
        // keyframe object lands, playout jumps to seq 20.
        let aus = encode_n(25);
        let mut subscriber = MoqSubscriber::new(5);
        let mut emitted = Vec::new();
        for au in &aus {
            let (group, object, bytes) = object_bytes(au, 5);
            // Withhold objects 2..5 of group 3.
            if group == 3 && object >= 2 {
                continue;
            }
            let stream_id = 2 + group as u32;
            emitted.extend(subscriber.on_stream_data(stream_id, &bytes, au.seq * 16_667));
        }
        let seqs: Vec<u64> = emitted.iter().map(|au| au.group_id * 5 + au.object_id as u64).collect();
        let expect: Vec<u64> = (0..17).chain(20..25).collect();
        assert_eq!(seqs, expect);
        // Three frames of group 3 were abandoned.
        assert_eq!(subscriber.skipped_frames(), 3);
        // Playout resumed exactly at a keyframe.
        let jump = emitted.iter().find(|au| au.group_id == 4).unwrap();
        assert!(jump.keyframe);
    }

    #[test]
    fn fully_missing_group_counts_five_skips() {
        let aus = encode_n(15);
        let mut subscriber = MoqSubscriber::new(5);
        let mut emitted = Vec::new();
        for au in &aus {
            let (group, _, bytes) = object_bytes(au, 5);
            if group == 1 {
                continue; // whole group lost
            }
            emitted.extend(subscriber.on_stream_data(2 + group as u32, &bytes, 0));
        }
        assert_eq!(emitted.len(), 10);
        assert_eq!(subscriber.skipped_frames(), 5);
        let seqs: Vec<u64> = emitted.iter().map(|au| au.group_id * 5 + au.object_id as u64).collect();
        assert!(seqs.windows(2).all(|w| w[0] < w[1]));
    }
}
