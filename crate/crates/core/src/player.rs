//! HTTP live player model for the DASH and low-latency DASH paths.
//!
//! The player fetches the manifest, the init segment, then live-edge media
//! segments in order, decoding frames out of arriving fragments. Playout
//! starts one buffer target after the first media bytes arrive and then
//! advances at wall rate; a frame whose data has not arrived by its slot
//! stalls playout, shifts the clock anchor, and is logged as a rebuffer
//! with the affected sample flagged.
//!
//! It is sans-IO: a driver performs the requests it asks for and feeds
//! response bytes back in.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::bmff;
use crate::http::{HttpError, RespEvent, ResponseParser};
use crate::media;
use crate::mpd::{parse_mpd, MpdDocument};
use crate::origin;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlayerConfig {
    pub buffer_target_us: u64,
    pub poll_interval_us: u64,
    /// Seed the stream's padding is keyed by, for end-to-end verification.
    pub media_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchTarget {
    Mpd,
    Init,
    Segment(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchRequest {
    pub target: FetchTarget,
    pub path: String,
}

/// One displayed frame, on the player's clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DisplayEvent {
    pub seq: u64,
    pub capture_ts_us: u64,
    pub display_us: u64,
    /// Display was delayed by a rebuffer.
    pub flagged: bool,
}

#[derive(Debug)]
struct InFlight {
    target: FetchTarget,
    parser: ResponseParser,
    failed: bool,
    body: Vec<u8>,
}

#[derive(Debug, Clone, Copy)]
struct PendingFrame {
    seq: u64,
    capture_ts_us: u64,
    arrival_us: u64,
}

#[derive(Debug)]
pub struct DashPlayer {
    cfg: PlayerConfig,
    clock_offset_us: i64,
    mpd: Option<MpdDocument>,
    init_ok: bool,
    in_flight: Option<InFlight>,
    next_poll_us: u64,
    next_segment: Option<u64>,
    media_buf: Vec<u8>,
    frames: BTreeMap<u64, PendingFrame>,
    first_arrival_us: Option<u64>,
    anchor: Option<(u64, u64)>, // (wall instant, media instant)
    last_displayed_media: Option<u64>,
    rebuffers: Vec<(u64, u64)>,
    displayed: u64,
    corrupt: u64,
    http_errors: u64,
    segments_fetched: u64,
}

impl DashPlayer {
    pub fn new(cfg: PlayerConfig) -> Self {
        Self {
            cfg,
            clock_offset_us: 0,
            mpd: None,
            init_ok: false,
            in_flight: None,
            next_poll_us: 0,
            next_segment: None,
            media_buf: Vec::new(),
            frames: BTreeMap::new(),
            first_arrival_us: None,
            anchor: None,
            last_displayed_media: None,
            rebuffers: Vec::new(),
            displayed: 0,
            corrupt: 0,
            http_errors: 0,
            segments_fetched: 0,
        }
    }

    /// Offset from the clock-sync handshake (origin clock minus player
    /// clock); used to compute segment availability on the origin's
    /// timeline.
    pub fn set_clock_offset(&mut self, offset_us: i64) {
        self.clock_offset_us = offset_us;
    }

    pub fn rebuffers(&self) -> &[(u64, u64)] {
        &self.rebuffers
    }

    pub fn displayed(&self) -> u64 {
        self.displayed
    }

    pub fn corrupt(&self) -> u64 {
        self.corrupt
    }

    pub fn http_errors(&self) -> u64 {
        self.http_errors
    }

    pub fn segments_fetched(&self) -> u64 {
        self.segments_fetched
    }

    pub fn buffered_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn fetch_in_flight(&self) -> bool {
        self.in_flight.is_some()
    }

    fn origin_now(&self, now_us: u64) -> i64 {
        now_us as i64 + self.clock_offset_us
    }

    fn low_latency(&self) -> bool {
        self.mpd
            .as_ref()
            .is_some_and(|m| m.segment_template.availability_time_offset_s.is_some())
    }

    /// Segment this player wants next, given the origin-side clock.
    fn desired_segment(&self, now_us: u64) -> Option<u64> {
        let mpd = self.mpd.as_ref()?;
        let seg_us = mpd.segment_duration_us() as i64;
        let elapsed = self.origin_now(now_us) - mpd.availability_start_time_us as i64;
        if let Some(next) = self.next_segment {
            // Sequential steady state; available yet?
            let available_at = if self.low_latency() {
                (next as i64 - 1) * seg_us
            } else {
                next as i64 * seg_us
            };
            return (elapsed >= available_at).then_some(next);
        }
        // Join at the live edge.
        if self.low_latency() {
            (elapsed >= 0).then(|| (elapsed / seg_us) as u64 + 1)
        } else {
            let newest_complete = elapsed / seg_us;
            (newest_complete >= 1).then_some(newest_complete as u64)
        }
    }

    /// Asks for the next request, if any is due at `now`.
    pub fn poll(&mut self, now_us: u64) -> Option<FetchRequest> {
        if self.in_flight.is_some() || now_us < self.next_poll_us {
            return None;
        }
        let target = if self.mpd.is_none() {
            Some(FetchTarget::Mpd)
        } else if !self.init_ok {
            Some(FetchTarget::Init)
        } else {
            self.desired_segment(now_us).map(FetchTarget::Segment)
        };
        match target {
            Some(target) => {
                let path = match target {
                    FetchTarget::Mpd => String::from(origin::MPD_PATH),
                    FetchTarget::Init => String::from(origin::INIT_PATH),
                    FetchTarget::Segment(n) => origin::segment_path(n),
                };
                self.in_flight = Some(InFlight {
                    target,
                    parser: ResponseParser::new(),
                    failed: false,
                    body: Vec::new(),
                });
                Some(FetchRequest { target, path })
            }
            None => {
                self.next_poll_us = now_us + self.cfg.poll_interval_us;
                None
            }
        }
    }

    /// When the driver should poll again.
    pub fn next_wakeup(&self, now_us: u64) -> Option<u64> {
        if self.in_flight.is_some() {
            return None;
        }
        Some(self.next_poll_us.max(now_us))
    }

    /// Feeds response bytes for the in-flight fetch. Returns frames that
    /// became displayable right away (a rebuffer releasing, typically).
    pub fn on_fetch_bytes(&mut self, bytes: &[u8], now_us: u64) -> Result<Vec<DisplayEvent>, HttpError> {
        let events = match self.in_flight.as_mut() {
            Some(fetch) => fetch.parser.push(bytes)?,
            None => return Ok(Vec::new()),
        };
        let mut media_arrived = false;
        let mut ended = false;
        for event in events {
            match event {
                RespEvent::Status(200) => {}
                RespEvent::Status(_) => {
                    self.in_flight.as_mut().unwrap().failed = true;
                    self.http_errors += 1;
                }
                RespEvent::Body(data) => {
                    let fetch = self.in_flight.as_mut().unwrap();
                    if !fetch.failed {
                        fetch.body.extend_from_slice(&data);
                        if matches!(fetch.target, FetchTarget::Segment(_)) {
                            self.media_buf.extend_from_slice(&data);
                            media_arrived = true;
                        }
                    }
                }
                RespEvent::End => ended = true,
            }
        }
        if media_arrived {
            self.ingest_fragments(now_us);
        }
        if ended {
            self.finish_fetch(now_us);
        }
        Ok(if media_arrived { self.pop_displays(now_us) } else { Vec::new() })
    }

    fn finish_fetch(&mut self, now_us: u64) {
        let Some(fetch) = self.in_flight.take() else { return };
        if fetch.failed {
            self.next_poll_us = now_us + self.cfg.poll_interval_us;
            return;
        }
        match fetch.target {
            FetchTarget::Mpd => {
                match parse_mpd(core::str::from_utf8(&fetch.body).unwrap_or("")) {
                    Ok(doc) => self.mpd = Some(doc),
                    Err(_) => {
                        self.http_errors += 1;
                        self.next_poll_us = now_us + self.cfg.poll_interval_us;
                    }
                }
            }
            FetchTarget::Init => {
                let ok = bmff::parse_boxes(&fetch.body)
                    .is_ok_and(|boxes| boxes.iter().any(|b| &b.fourcc == b"moov"));
                if ok {
                    self.init_ok = true;
                } else {
                    self.http_errors += 1;
                    self.next_poll_us = now_us + self.cfg.poll_interval_us;
                }
            }
            FetchTarget::Segment(n) => {
                if fetch.body.is_empty() {
                    // Segment admitted before any fragment was produced and
                    // closed empty; ask again after a poll interval.
                    self.next_poll_us = now_us + self.cfg.poll_interval_us;
                } else {
                    self.segments_fetched += 1;
                    self.next_segment = Some(n + 1);
                }
                self.media_buf.clear();
            }
        }
    }

    /// Pulls complete fragments out of the media buffer and decodes frames.
    fn ingest_fragments(&mut self, now_us: u64) {
        loop {
            let Some(span) = next_fragment_span(&self.media_buf) else { break };
            let fragment = &self.media_buf[span.0..span.1];
            if let Ok(parsed) = bmff::parse_fragment(fragment) {
                let mut pts = parsed.base_dts_90k;
                for (payload, duration) in
                    parsed.payloads.iter().zip(parsed.sample_durations.iter())
                {
                    match media::decode_verify(payload, self.cfg.media_seed) {
                        Ok(decoded) if decoded.verified => {
                            let media_us = pts * 1_000_000 / 90_000;
                            if self.first_arrival_us.is_none() {
                                self.first_arrival_us = Some(now_us);
                            }
                            self.frames.insert(
                                media_us,
                                PendingFrame {
                                    seq: decoded.seq,
                                    capture_ts_us: decoded.capture_ts_us,
                                    arrival_us: now_us,
                                },
                            );
                        }
                        _ => self.corrupt += 1,
                    }
                    pts += *duration as u64;
                }
            } else {
                self.corrupt += 1;
            }
            self.media_buf.drain(..span.1);
        }
    }

    /// Emits every frame whose playout slot has passed and whose bytes are
    /// here. Starts the playout clock one buffer target after first media.
    pub fn pop_displays(&mut self, now_us: u64) -> Vec<DisplayEvent> {
        let mut out = Vec::new();
        loop {
            let Some((&media_us, frame)) = self.frames.iter().next() else { break };
            let frame = *frame;
            if self.anchor.is_none() {
                let start = self.first_arrival_us.expect("frame implies arrival")
                    + self.cfg.buffer_target_us;
                if now_us < start {
                    break;
                }
                self.anchor = Some((start, media_us));
            }
            let (anchor_wall, anchor_media) = self.anchor.unwrap();
            let mut scheduled = anchor_wall + (media_us - anchor_media);
            let mut flagged = false;
            if frame.arrival_us > scheduled {
                // Data arrived after its slot: playout had stalled.
                self.rebuffers.push((scheduled, frame.arrival_us));
                self.anchor = Some((anchor_wall + (frame.arrival_us - scheduled), anchor_media));
                scheduled = frame.arrival_us;
                flagged = true;
            }
            if scheduled > now_us {
                break;
            }
            self.frames.remove(&media_us);
            self.last_displayed_media = Some(media_us);
            self.displayed += 1;
            out.push(DisplayEvent {
                seq: frame.seq,
                capture_ts_us: frame.capture_ts_us,
                display_us: scheduled,
                flagged,
            });
        }
        out
    }

    /// Wall time of the next pending display, for schedulers.
    pub fn next_display_at(&self) -> Option<u64> {
        let (&media_us, frame) = self.frames.iter().next()?;
        match self.anchor {
            Some((anchor_wall, anchor_media)) => {
                let scheduled = anchor_wall + (media_us - anchor_media);
                Some(scheduled.max(frame.arrival_us))
            }
            None => Some(self.first_arrival_us? + self.cfg.buffer_target_us),
        }
    }
}

/// Span `[start, end)` of the first complete `styp? moof mdat` run in
/// `buf`, skipping unknown leading boxes.
fn next_fragment_span(buf: &[u8]) -> Option<(usize, usize)> {
    let mut offset = 0;
    let mut start: Option<usize> = None;
    let mut seen_moof = false;
    while buf.len() >= offset + 8 {
        let size = u32::from_be_bytes(buf[offset..offset + 4].try_into().unwrap()) as usize;
        if size < 8 || buf.len() < offset + size {
            return None;
        }
        let fourcc = &buf[offset + 4..offset + 8];
        match fourcc {
            b"styp" => {
                start = Some(offset);
                seen_moof = false;
            }
            b"moof" => {
                if start.is_none() {
                    start = Some(offset);
                }
                seen_moof = true;
            }
            b"mdat" if seen_moof => {
                return Some((start.unwrap(), offset + size));
            }
            _ => {
                if !seen_moof {
                    start = None;
                }
            }
        }
        offset += size;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::{synthesize_frame, Encoder, EncoderConfig, VideoConfig};
    use crate::mpd::MpdConfig;

    fn fragment_bytes(aus: &[crate::media::AccessUnit]) -> Vec<u8> {
        bmff::build_fragment(aus, 1, 1, 1500).unwrap().bytes
    }

    fn player(buffer_target_us: u64) -> DashPlayer {
        DashPlayer::new(PlayerConfig {
            buffer_target_us,
            poll_interval_us: 100_000,
            media_seed: VideoConfig::default().seed,
        })
    }

    fn feed_mpd_and_init(player: &mut DashPlayer, cfg: &MpdConfig, now: u64) {
        let req = player.poll(now).unwrap();
        assert_eq!(req.target, FetchTarget::Mpd);
        let body = crate::mpd::render_mpd(cfg).unwrap().into_bytes();
        player
            .on_fetch_bytes(&crate::http::render_response_full(200, "application/dash+xml", &body), now)
            .unwrap();
        let req = player.poll(now).unwrap();
        assert_eq!(req.target, FetchTarget::Init);
        let init = bmff::build_init_segment(&bmff::TrackConfig::default()).bytes;
        player
            .on_fetch_bytes(&crate::http::render_response_full(200, "video/mp4", &init), now)
            .unwrap();
    }

    #[test]
    fn fetch_order_is_mpd_init_then_live_edge_segment() {
        let mut p = player(4_000_000);
        let cfg = MpdConfig::dash(2.0);
        feed_mpd_and_init(&mut p, &cfg, 0);
        // Nothing complete yet at t=1s.
        assert_eq!(p.poll(1_000_000), None);
        // Segment 1 completes at 2s; request follows.
        let req = p.poll(2_000_100).unwrap();
        assert_eq!(req.target, FetchTarget::Segment(1));
        assert_eq!(req.path, "/seg-1.m4s");
    }

    #[test]
    fn late_join_starts_at_newest_complete_segment() {
        let mut p = player(4_000_000);
        let cfg = MpdConfig::dash(2.0);
        feed_mpd_and_init(&mut p, &cfg, 9_300_000);
        let req = p.poll(9_300_000).unwrap();
        assert_eq!(req.target, FetchTarget::Segment(4));
    }

    #[test]
    fn displays_start_one_buffer_target_after_first_media() {
        let mut p = player(4_000_000);
        let cfg = MpdConfig::dash(2.0);
        feed_mpd_and_init(&mut p, &cfg, 0);

        let vcfg = VideoConfig::default();
        let mut enc = Encoder::new(EncoderConfig::default(), vcfg.seed);
        let aus: Vec<_> = (0..120)
            .map(|seq| enc.encode(&synthesize_frame(seq, &vcfg, seq * 16_667)).unwrap())
            .collect();
        let body = fragment_bytes(&aus);

        assert!(p.poll(2_000_000).is_some());
        let arrived = 2_050_000;
        let events = p
            .on_fetch_bytes(&crate::http::render_response_full(200, "video/mp4", &body), arrived)
            .unwrap();
        assert!(events.is_empty());
        assert_eq!(p.buffered_frames(), 120);

        // Playout starts at arrival + 4 s, media 0 first.
        let start = arrived + 4_000_000;
        assert_eq!(p.next_display_at(), Some(start));
        assert!(p.pop_displays(start - 1).is_empty());
        let first = p.pop_displays(start);
        assert_eq!(first[0].seq, 0);
        assert_eq!(first[0].display_us, start);
        assert!(!first[0].flagged);
        // One frame interval later the next frame plays.
        let more = p.pop_displays(start + 16_667);
        assert_eq!(more[0].seq, 1);
    }

    #[test]
    fn missing_data_rebuffers_and_flags() {
        let mut p = player(100_000);
        let cfg = MpdConfig::dash(2.0);
        feed_mpd_and_init(&mut p, &cfg, 0);

        let vcfg = VideoConfig::default();
        let mut enc = Encoder::new(EncoderConfig::default(), vcfg.seed);
        let first: Vec<_> = (0..120)
            .map(|seq| enc.encode(&synthesize_frame(seq, &vcfg, seq * 16_667)).unwrap())
            .collect();
        let second: Vec<_> = (120..240)
            .map(|seq| enc.encode(&synthesize_frame(seq, &vcfg, seq * 16_667)).unwrap())
            .collect();

        assert!(p.poll(2_000_000).is_some());
        p.on_fetch_bytes(
            &crate::http::render_response_full(200, "video/mp4", &fragment_bytes(&first)),
            2_000_000,
        )
        .unwrap();
        // Drain the first segment fully: playout reaches media end.
        let displayed = p.pop_displays(2_100_000 + 2_000_000).len();
        assert_eq!(displayed, 120);

        // Second segment arrives 3 s late (outage): first frame of it is
        // overdue, so it displays on arrival, flagged, with a rebuffer.
        assert!(p.poll(4_000_100).is_some());
        let late_arrival = 7_500_000;
        let events = p
            .on_fetch_bytes(
                &crate::http::render_response_full(200, "video/mp4", &fragment_bytes(&second)),
                late_arrival,
            )
            .unwrap();
        assert_eq!(events[0].seq, 120);
        assert_eq!(events[0].display_us, late_arrival);
        assert!(events[0].flagged);
        assert_eq!(p.rebuffers().len(), 1);
        let (scheduled, resumed) = p.rebuffers()[0];
        assert!(scheduled < resumed);
    }

    #[test]
    fn http_404_retries_at_poll_interval() {
        let mut p = player(4_000_000);
        let cfg = MpdConfig::dash(2.0);
        feed_mpd_and_init(&mut p, &cfg, 0);
        assert!(p.poll(2_000_000).is_some());
        p.on_fetch_bytes(&crate::http::render_response_full(404, "text/plain", b""), 2_000_000)
            .unwrap();
        assert_eq!(p.http_errors(), 1);
        assert!(p.poll(2_050_000).is_none(), "waits out the poll interval");
        assert!(p.poll(2_100_000).is_some());
    }

    #[test]
    fn fragment_span_scanner_handles_partials() {
        let vcfg = VideoConfig::default();
        let mut enc = Encoder::new(EncoderConfig::default(), vcfg.seed);
        let aus: Vec<_> = (0..5)
            .map(|seq| enc.encode(&synthesize_frame(seq, &vcfg, 0)).unwrap())
            .collect();
        let bytes = fragment_bytes(&aus);
        assert_eq!(next_fragment_span(&bytes), Some((0, bytes.len())));
        assert_eq!(next_fragment_span(&bytes[..bytes.len() - 1]), None);
        let mut two = bytes.clone();
        two.extend_from_slice(&bytes);
        assert_eq!(next_fragment_span(&two), Some((0, bytes.len())));
    }
}
