//! Realtime drivers: the same protocol machines as the virtual-time
//! runner, driven by the wall clock over real sockets.
//!
//! The packet paths send UDP through a forwarder thread that applies the
//! link profile (delay, jitter, loss, bandwidth) with real sleeps. The
//! HTTP paths run a real TCP origin with chunked transfer; the TCP legs
//! are plain loopback without link impairment, which keeps the focus on
//! protocol behaviour rather than kernel TCP tuning.
//!
//! Sender and receiver run as separate threads, each owning its pipeline
//! exclusively and exchanging nothing but packets.

use std::net::{SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::io::{Read, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rrsb_core::bmff;
use rrsb_core::clocksync::{self, SyncClient, DEFAULT_ROUNDS, DEFAULT_ROUND_TIMEOUT_US};
use rrsb_core::http;
use rrsb_core::media::{self, Encoder};
use rrsb_core::moq::{MoqPublisher, MoqSubscriber};
use rrsb_core::mpd::MpdConfig;
use rrsb_core::netem::EmuLink;
use rrsb_core::origin::{OriginResponse, OriginState};
use rrsb_core::paths::{
    LatencySample, PathDiagnostics, ProtocolPath, RunConfig, RunCounters, RunResult, StageTimes,
};
use rrsb_core::player::{DashPlayer, PlayerConfig};
use rrsb_core::rtp::{self, Depacketizer, DepacketizerEvent, JitterBuffer, PlayoutAu};
use rrsb_core::smt::{SmtConnection, SmtEvent};

use crate::runner::BenchError;

const GO_MARKER: u8 = 0x53;
const RTP_PAYLOAD_TYPE: u8 = 96;
const RTP_SSRC: u32 = 0x5252_5342;

/// Wall clock in microseconds since the Unix epoch, monotonic within the
/// process.
#[derive(Clone, Copy)]
struct WallClock {
    anchor: Instant,
    epoch_us: u64,
}

impl WallClock {
    fn new() -> Self {
        let epoch_us = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_micros() as u64)
            .unwrap_or(0);
        Self { anchor: Instant::now(), epoch_us }
    }

    fn now_us(&self) -> u64 {
        self.epoch_us + self.anchor.elapsed().as_micros() as u64
    }

    fn sleep_until(&self, target_us: u64) {
        let now = self.now_us();
        if target_us > now {
            thread::sleep(Duration::from_micros(target_us - now));
        }
    }
}

/// One direction of the emulated link over UDP: receives on an ingress
/// socket, applies the seeded impairments, and forwards to a target.
struct UdpLinkForwarder {
    ingress_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<thread::JoinHandle<EmuLink>>,
}

impl UdpLinkForwarder {
    fn spawn(mut link: EmuLink, target: SocketAddr, clock: WallClock) -> std::io::Result<Self> {
        let ingress = UdpSocket::bind("127.0.0.1:0")?;
        let ingress_addr = ingress.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = stop.clone();
        let handle = thread::spawn(move || {
            let mut buf = [0u8; 65_535];
            loop {
                let now = clock.now_us();
                let wait = link
                    .next_delivery()
                    .map(|at| at.saturating_sub(now).min(2_000))
                    .unwrap_or(2_000)
                    .max(100);
                ingress
                    .set_read_timeout(Some(Duration::from_micros(wait)))
                    .expect("timeout settable");
                match ingress.recv_from(&mut buf) {
                    Ok((len, _)) => {
                        let _ = link.send(&buf[..len], clock.now_us());
                    }
                    Err(ref e)
                        if e.kind() == std::io::ErrorKind::WouldBlock
                            || e.kind() == std::io::ErrorKind::TimedOut => {}
                    Err(_) => break,
                }
                for payload in link.poll(clock.now_us()) {
                    let _ = ingress.send_to(&payload, target);
                }
                if stop_flag.load(Ordering::Relaxed) && link.in_flight() == 0 {
                    break;
                }
            }
            link
        });
        Ok(Self { ingress_addr, stop, handle: Some(handle) })
    }

    fn stop(mut self) -> EmuLink {
        self.stop.store(true, Ordering::Relaxed);
        self.handle.take().expect("not yet joined").join().expect("forwarder panicked")
    }
}

fn recv_datagram(sock: &UdpSocket, timeout_us: u64, buf: &mut [u8]) -> Option<usize> {
    sock.set_read_timeout(Some(Duration::from_micros(timeout_us.max(100))))
        .expect("timeout settable");
    match sock.recv_from(buf) {
        Ok((len, _)) => Some(len),
        _ => None,
    }
}

/// Receiver-side clock sync over a raw datagram path, followed by a GO
/// marker so the sender starts pacing.
fn sync_client_over_udp(
    sock: &UdpSocket,
    request_target: SocketAddr,
    clock: WallClock,
) -> Result<clocksync::ClockEstimate, BenchError> {
    let mut client = SyncClient::new(DEFAULT_ROUNDS, DEFAULT_ROUND_TIMEOUT_US)
        .map_err(|e| BenchError::BadArg(e.to_string()))?;
    let mut buf = [0u8; 2_048];
    while !client.done() {
        if let Some(request) = client.poll_request(clock.now_us()) {
            let _ = sock.send_to(&request, request_target);
        }
        if let Some(len) = recv_datagram(sock, 5_000, &mut buf) {
            let _ = client.on_reply(&buf[..len], clock.now_us());
        }
    }
    client.result().map_err(|e| BenchError::BadArg(format!("clock sync failed: {e}")))
}

/// RTP over UDP datagrams through the link forwarders.
pub fn run_rtp_udp_realtime(cfg: &RunConfig) -> Result<RunResult, BenchError> {
    let clock = WallClock::new();
    let total = cfg.frames_total();
    let fps = cfg.video.fps as u64;

    let receiver_sock = UdpSocket::bind("127.0.0.1:0")?;
    let sender_sock = UdpSocket::bind("127.0.0.1:0")?;
    let fwd = UdpLinkForwarder::spawn(
        EmuLink::new(cfg.profile.with_seed(rrsb_core::prng::sub_seed(cfg.seed, "link-fwd"))),
        receiver_sock.local_addr()?,
        clock,
    )?;
    let rev = UdpLinkForwarder::spawn(
        EmuLink::new(cfg.profile.with_seed(rrsb_core::prng::sub_seed(cfg.seed, "link-rev"))),
        sender_sock.local_addr()?,
        clock,
    )?;
    let fwd_ingress = fwd.ingress_addr;
    let rev_ingress = rev.ingress_addr;

    let video = cfg.video;
    let encoder_cfg = cfg.encoder;
    let mtu = cfg.mtu_payload;
    let jitter_cfg = cfg.player.jitter;

    // Sender thread: answer sync probes until GO, then pace frames.
    let sender = thread::spawn(move || -> (Vec<StageTimes>, u64) {
        let mut stage_log = Vec::with_capacity(total as usize);
        let mut buf = [0u8; 2_048];
        // Sync + GO phase.
        let deadline = clock.now_us() + 10_000_000;
        loop {
            if let Some(len) = recv_datagram(&sender_sock, 2_000, &mut buf) {
                let datagram = &buf[..len];
                if datagram.first() == Some(&GO_MARKER) {
                    break;
                }
                if let Some(reply) = clocksync::answer_request(datagram, clock.now_us()) {
                    let _ = sender_sock.send_to(&reply, fwd_ingress);
                }
            }
            if clock.now_us() > deadline {
                return (stage_log, 0);
            }
        }
        let mut encoder = Encoder::new(encoder_cfg, video.seed);
        let mut rtp_seq: u16 = 0;
        let start = clock.now_us() + 10_000;
        for i in 0..total {
            let target = start + i * 1_000_000 / fps;
            clock.sleep_until(target);
            // Keep answering any straggling probes.
            while let Some(len) = recv_datagram(&sender_sock, 1, &mut buf) {
                if let Some(reply) = clocksync::answer_request(&buf[..len], clock.now_us()) {
                    let _ = sender_sock.send_to(&reply, fwd_ingress);
                }
            }
            let stamp = clock.now_us();
            let raw = media::synthesize_frame(i, &video, stamp);
            let Ok(au) = encoder.encode(&raw) else { break };
            let packets =
                rtp::packetize(&au.payload, au.pts_90k as u32, mtu, RTP_PAYLOAD_TYPE, RTP_SSRC, rtp_seq);
            rtp_seq = rtp_seq.wrapping_add(packets.len() as u16);
            for packet in &packets {
                let _ = sender_sock.send_to(&packet.to_bytes(), fwd_ingress);
            }
            stage_log.push(StageTimes {
                seq: i,
                capture_us: stamp,
                encoded_us: stamp,
                packaged_us: clock.now_us(),
                transported_us: clock.now_us(),
            });
        }
        (stage_log, total)
    });

    // Receiver: sync first, then GO, then consume media.
    let estimate = sync_client_over_udp(&receiver_sock, rev_ingress, clock)?;
    let _ = receiver_sock.send_to(&[GO_MARKER], rev_ingress);

    let mut depack = Depacketizer::with_initial_seq(0);
    let mut jitter = JitterBuffer::new(jitter_cfg);
    let mut samples: Vec<LatencySample> = Vec::new();
    let mut counters = RunCounters { sent: total, ..Default::default() };
    let mut buf = [0u8; 65_535];
    let mut last_activity = clock.now_us();
    let mut seen_media = false;
    loop {
        let now = clock.now_us();
        let wait = jitter
            .next_ready_at()
            .map(|at| at.saturating_sub(now).min(2_000))
            .unwrap_or(2_000);
        if let Some(len) = recv_datagram(&receiver_sock, wait.max(100), &mut buf) {
            last_activity = clock.now_us();
            if let Ok(packet) = rtp::RtpPacket::from_bytes(&buf[..len]) {
                seen_media = true;
                for event in depack.on_packet(&packet, clock.now_us()) {
                    if let DepacketizerEvent::AuComplete(au) = event {
                        match media::decode_verify(&au.payload, video.seed) {
                            Ok(d) if d.verified => {
                                jitter.insert(
                                    PlayoutAu {
                                        seq: d.seq,
                                        pts_90k: au.timestamp as u64,
                                        capture_ts_us: d.capture_ts_us,
                                    },
                                    au.first_fragment_arrival_us,
                                );
                            }
                            _ => counters.corrupt += 1,
                        }
                    }
                }
            }
        } else if !seen_media {
            // GO may have been lost; nudge the sender again.
            let _ = receiver_sock.send_to(&[GO_MARKER], rev_ingress);
        }
        let now = clock.now_us();
        for au in jitter.pop_ready(now) {
            samples.push(LatencySample {
                seq: au.seq,
                capture_ts_us: au.capture_ts_us,
                display_ts_us: now,
                latency_us: now as i64 + estimate.offset_us - au.capture_ts_us as i64,
                flagged: false,
            });
        }
        if samples.len() as u64 == total {
            break;
        }
        if clock.now_us().saturating_sub(last_activity) > 2_000_000 && jitter.is_empty() {
            break;
        }
    }

    let (stage_log, _) = sender.join().expect("sender thread panicked");
    let mut fwd_link = fwd.stop();
    let mut rev_link = rev.stop();
    counters.late_dropped = jitter.late_dropped();
    samples.sort_by_key(|s| s.seq);
    counters.delivered = samples.len() as u64;
    counters.lost = counters.sent - counters.delivered;
    Ok(RunResult {
        samples,
        counters,
        clock_offset_true_us: 0,
        clock_offset_est_us: estimate.offset_us,
        stage_log,
        fwd_trace: fwd_link.take_trace(),
        rev_trace: rev_link.take_trace(),
        diagnostics: PathDiagnostics::default(),
    })
}

/// RTP on one reliable stream, and object delivery, share one driver shape:
/// a sender loop owning an `SmtConnection` and a receiver loop owning the
/// peer connection.
pub fn run_smt_based_realtime(cfg: &RunConfig) -> Result<RunResult, BenchError> {
    let clock = WallClock::new();
    let total = cfg.frames_total();
    let fps = cfg.video.fps as u64;
    let is_moq = cfg.path == ProtocolPath::MoqLite;

    let receiver_sock = UdpSocket::bind("127.0.0.1:0")?;
    let sender_sock = UdpSocket::bind("127.0.0.1:0")?;
    let fwd = UdpLinkForwarder::spawn(
        EmuLink::new(cfg.profile.with_seed(rrsb_core::prng::sub_seed(cfg.seed, "link-fwd"))),
        receiver_sock.local_addr()?,
        clock,
    )?;
    let rev = UdpLinkForwarder::spawn(
        EmuLink::new(cfg.profile.with_seed(rrsb_core::prng::sub_seed(cfg.seed, "link-rev"))),
        sender_sock.local_addr()?,
        clock,
    )?;
    let fwd_ingress = fwd.ingress_addr;
    let rev_ingress = rev.ingress_addr;

    let video = cfg.video;
    let encoder_cfg = cfg.encoder;
    let mtu = cfg.mtu_payload;
    let jitter_cfg = cfg.player.jitter;

    let sender = thread::spawn(move || -> (Vec<StageTimes>, u64, u64) {
        let mut conn = SmtConnection::new(mtu);
        let mut publisher =
            is_moq.then(|| MoqPublisher::new(&mut conn, 1, "video0", encoder_cfg.gop_length, video.fps, clock.now_us()));
        let media_stream = if is_moq { 0 } else { conn.open_stream() };
        let mut stage_log = Vec::with_capacity(total as usize);
        let mut buf = [0u8; 65_535];

        let pump = |conn: &mut SmtConnection, sock: &UdpSocket| {
            while let Some(frame) = conn.poll_transmit() {
                let _ = sock.send_to(&frame, fwd_ingress);
            }
        };

        // Wait for GO, answering sync probes carried in datagram frames.
        let deadline = clock.now_us() + 10_000_000;
        'sync: loop {
            if let Some(len) = recv_datagram(&sender_sock, 2_000, &mut buf) {
                if buf[0] == GO_MARKER {
                    break 'sync;
                }
                for event in conn.on_datagram(&buf[..len], clock.now_us()) {
                    match event {
                        SmtEvent::DatagramIn { data } => {
                            if let Some(reply) = clocksync::answer_request(&data, clock.now_us()) {
                                let _ = conn.send_datagram(&reply);
                            }
                        }
                        SmtEvent::StreamData { data, .. } => {
                            if let Some(p) = publisher.as_mut() {
                                let _ = p.on_control_data(&data);
                            }
                        }
                        _ => {}
                    }
                }
                pump(&mut conn, &sender_sock);
            }
            if clock.now_us() > deadline {
                return (stage_log, 0, conn.retransmits());
            }
        }

        let mut encoder = Encoder::new(encoder_cfg, video.seed);
        let mut rtp_seq: u16 = 0;
        let start = clock.now_us() + 10_000;
        let mut next_frame = 0u64;
        loop {
            let now = clock.now_us();
            if next_frame < total {
                let target = start + next_frame * 1_000_000 / fps;
                if now >= target {
                    let stamp = clock.now_us();
                    let raw = media::synthesize_frame(next_frame, &video, stamp);
                    let Ok(au) = encoder.encode(&raw) else { break };
                    if let Some(p) = publisher.as_mut() {
                        if p.publish(&mut conn, &au, stamp).is_err() {
                            break;
                        }
                    } else {
                        let packets = rtp::packetize(
                            &au.payload,
                            au.pts_90k as u32,
                            mtu - rtp::RTP_HEADER_LEN - 2,
                            RTP_PAYLOAD_TYPE,
                            RTP_SSRC,
                            rtp_seq,
                        );
                        rtp_seq = rtp_seq.wrapping_add(packets.len() as u16);
                        for packet in &packets {
                            let bytes = packet.to_bytes();
                            let mut framed = Vec::with_capacity(2 + bytes.len());
                            framed.extend_from_slice(&(bytes.len() as u16).to_be_bytes());
                            framed.extend_from_slice(&bytes);
                            if conn.stream_send(media_stream, &framed, false, stamp).is_err() {
                                break;
                            }
                        }
                    }
                    stage_log.push(StageTimes {
                        seq: next_frame,
                        capture_us: stamp,
                        encoded_us: stamp,
                        packaged_us: stamp,
                        transported_us: clock.now_us(),
                    });
                    next_frame += 1;
                }
            }
            pump(&mut conn, &sender_sock);
            if let Some(len) = recv_datagram(&sender_sock, 500, &mut buf) {
                for event in conn.on_datagram(&buf[..len], clock.now_us()) {
                    if let SmtEvent::StreamData { data, .. } = event {
                        if let Some(p) = publisher.as_mut() {
                            let _ = p.on_control_data(&data);
                        }
                    }
                }
            }
            if conn.next_timeout().is_some_and(|t| t <= clock.now_us()) {
                conn.on_timeout(clock.now_us());
            }
            pump(&mut conn, &sender_sock);
            if next_frame >= total && conn.unacked_frames() == 0 {
                break;
            }
            if next_frame >= total && clock.now_us() > start + (total * 1_000_000 / fps) + 10_000_000 {
                break;
            }
        }
        (stage_log, total, conn.retransmits())
    });

    // Receiver side.
    let mut conn = SmtConnection::new(cfg.mtu_payload);
    let mut subscriber = is_moq.then(|| MoqSubscriber::new(cfg.encoder.gop_length));

    // Clock sync over transport datagrams.
    let mut client = SyncClient::new(DEFAULT_ROUNDS, DEFAULT_ROUND_TIMEOUT_US)
        .map_err(|e| BenchError::BadArg(e.to_string()))?;
    let mut buf = [0u8; 65_535];
    while !client.done() {
        if let Some(request) = client.poll_request(clock.now_us()) {
            let _ = conn.send_datagram(&request);
            while let Some(frame) = conn.poll_transmit() {
                let _ = receiver_sock.send_to(&frame, rev_ingress);
            }
        }
        if let Some(len) = recv_datagram(&receiver_sock, 5_000, &mut buf) {
            for event in conn.on_datagram(&buf[..len], clock.now_us()) {
                if let SmtEvent::DatagramIn { data } = event {
                    let _ = client.on_reply(&data, clock.now_us());
                }
            }
        }
    }
    let estimate = client
        .result()
        .map_err(|e| BenchError::BadArg(format!("clock sync failed: {e}")))?;
    if let Some(sub) = subscriber.as_mut() {
        sub.subscribe(&mut conn, 1, clock.now_us());
        while let Some(frame) = conn.poll_transmit() {
            let _ = receiver_sock.send_to(&frame, rev_ingress);
        }
    }
    let _ = receiver_sock.send_to(&[GO_MARKER], rev_ingress);

    let mut depack = Depacketizer::with_initial_seq(0);
    let mut framer_buf: Vec<u8> = Vec::new();
    let mut jitter = JitterBuffer::new(jitter_cfg);
    let mut samples: Vec<LatencySample> = Vec::new();
    let mut counters = RunCounters { sent: total, ..Default::default() };
    let mut last_activity = clock.now_us();
    let mut seen_media = false;
    let control_stream = 1; // publisher's announce stream

    loop {
        let now = clock.now_us();
        let wait = jitter
            .next_ready_at()
            .map(|at| at.saturating_sub(now).min(2_000))
            .unwrap_or(2_000);
        if let Some(len) = recv_datagram(&receiver_sock, wait.max(100), &mut buf) {
            last_activity = clock.now_us();
            let arrival = clock.now_us();
            for event in conn.on_datagram(&buf[..len], arrival) {
                if let SmtEvent::StreamData { stream_id, data } = event {
                    seen_media = true;
                    match subscriber.as_mut() {
                        Some(sub) => {
                            if stream_id == control_stream {
                                let _ = sub.on_control_data(&data);
                                continue;
                            }
                            for delivered in sub.on_stream_data(stream_id, &data, arrival) {
                                match media::decode_verify(&delivered.payload, video.seed) {
                                    Ok(d) if d.verified => {
                                        jitter.insert(
                                            PlayoutAu {
                                                seq: d.seq,
                                                pts_90k: delivered.pts_90k,
                                                capture_ts_us: d.capture_ts_us,
                                            },
                                            delivered.arrival_us,
                                        );
                                    }
                                    _ => counters.corrupt += 1,
                                }
                            }
                        }
                        None => {
                            framer_buf.extend_from_slice(&data);
                            loop {
                                if framer_buf.len() < 2 {
                                    break;
                                }
                                let plen =
                                    u16::from_be_bytes([framer_buf[0], framer_buf[1]]) as usize;
                                if framer_buf.len() < 2 + plen {
                                    break;
                                }
                                let packet_bytes: Vec<u8> =
                                    framer_buf.drain(..2 + plen).skip(2).collect();
                                if let Ok(packet) = rtp::RtpPacket::from_bytes(&packet_bytes) {
                                    for dev in depack.on_packet(&packet, arrival) {
                                        if let DepacketizerEvent::AuComplete(au) = dev {
                                            match media::decode_verify(&au.payload, video.seed) {
                                                Ok(d) if d.verified => {
                                                    jitter.insert(
                                                        PlayoutAu {
                                                            seq: d.seq,
                                                            pts_90k: au.timestamp as u64,
                                                            capture_ts_us: d.capture_ts_us,
                                                        },
                                                        au.first_fragment_arrival_us,
                                                    );
                                                }
                                                _ => counters.corrupt += 1,
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            while let Some(frame) = conn.poll_transmit() {
                let _ = receiver_sock.send_to(&frame, rev_ingress);
            }
        } else if !seen_media {
            let _ = receiver_sock.send_to(&[GO_MARKER], rev_ingress);
        }
        let now = clock.now_us();
        for au in jitter.pop_ready(now) {
            samples.push(LatencySample {
                seq: au.seq,
                capture_ts_us: au.capture_ts_us,
                display_ts_us: now,
                latency_us: now as i64 + estimate.offset_us - au.capture_ts_us as i64,
                flagged: false,
            });
        }
        let skipped = subscriber.as_ref().map_or(0, |s| s.skipped_frames());
        if samples.len() as u64 + skipped >= total {
            break;
        }
        if clock.now_us().saturating_sub(last_activity) > 2_000_000 && jitter.is_empty() {
            break;
        }
    }

    let (stage_log, _, retransmits) = sender.join().expect("sender thread panicked");
    let mut fwd_link = fwd.stop();
    let mut rev_link = rev.stop();
    counters.skipped = subscriber.as_ref().map_or(0, |s| s.skipped_frames());
    counters.late_dropped = jitter.late_dropped();
    counters.retransmits = retransmits;
    samples.sort_by_key(|s| s.seq);
    counters.delivered = samples.len() as u64;
    counters.lost = counters.sent - counters.delivered - counters.skipped;
    Ok(RunResult {
        samples,
        counters,
        clock_offset_true_us: 0,
        clock_offset_est_us: estimate.offset_us,
        stage_log,
        fwd_trace: fwd_link.take_trace(),
        rev_trace: rev_link.take_trace(),
        diagnostics: PathDiagnostics::default(),
    })
}

struct SharedOrigin {
    state: Mutex<OriginState>,
    publish_signal: Condvar,
}

/// DASH and LL-DASH over a real TCP origin on loopback.
pub fn run_http_realtime(cfg: &RunConfig) -> Result<RunResult, BenchError> {
    let clock = WallClock::new();
    let total = cfg.frames_total();
    let fps = cfg.video.fps as u64;
    let media_start = clock.now_us() + 50_000;

    let mpd_cfg = MpdConfig {
        availability_start_time_us: media_start,
        bandwidth_bps: cfg.encoder.bitrate_bps,
        width: cfg.video.width,
        height: cfg.video.height,
        ..cfg.mpd
    };
    let track = bmff::TrackConfig {
        width: cfg.video.width,
        height: cfg.video.height,
        ..bmff::TrackConfig::default()
    };
    let init = bmff::build_init_segment(&track);
    let shared = Arc::new(SharedOrigin {
        state: Mutex::new(OriginState::new(mpd_cfg, init.bytes)),
        publish_signal: Condvar::new(),
    });

    let listener = TcpListener::bind("127.0.0.1:0")?;
    let origin_addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));

    // Accept loop: one thread per request connection.
    let accept_shared = shared.clone();
    let accept_stop = stop.clone();
    listener.set_nonblocking(true)?;
    let acceptor = thread::spawn(move || {
        let mut handlers = Vec::new();
        while !accept_stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let shared = accept_shared.clone();
                    handlers.push(thread::spawn(move || serve_connection(stream, shared)));
                }
                Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(2));
                }
                Err(_) => break,
            }
        }
        for h in handlers {
            let _ = h.join();
        }
    });

    // Packager thread: paced capture -> encode -> fragment -> origin.
    let video = cfg.video;
    let encoder_cfg = cfg.encoder;
    let frames_per_fragment = (fps * mpd_cfg.fragment_duration_us() / 1_000_000).max(1);
    let frames_per_segment = (fps * mpd_cfg.segment_duration_us() / 1_000_000).max(1);
    let sample_duration_90k = (90_000 / fps) as u32;
    let packager_shared = shared.clone();
    let packager = thread::spawn(move || -> Vec<StageTimes> {
        let mut encoder = Encoder::new(encoder_cfg, video.seed);
        let mut stage_log = Vec::with_capacity(total as usize);
        let mut batch = Vec::new();
        let mut captures = Vec::new();
        let mut fragment_counter = 0u32;
        for i in 0..total {
            clock.sleep_until(media_start + i * 1_000_000 / fps);
            let stamp = clock.now_us();
            let segment = 1 + i / frames_per_segment;
            if i % frames_per_segment == 0 {
                packager_shared.state.lock().unwrap().open_segment(segment);
            }
            let raw = media::synthesize_frame(i, &video, stamp);
            let Ok(au) = encoder.encode(&raw) else { break };
            captures.push(stamp);
            batch.push(au);
            let last = i + 1 == total;
            if (i + 1) % frames_per_fragment == 0 || last {
                fragment_counter += 1;
                if let Ok(fragment) =
                    bmff::build_fragment(&batch, fragment_counter, track.track_id, sample_duration_90k)
                {
                    let publish_stamp = clock.now_us();
                    for au in &batch {
                        stage_log.push(StageTimes {
                            seq: au.seq,
                            capture_us: captures[au.seq as usize],
                            encoded_us: captures[au.seq as usize],
                            packaged_us: publish_stamp,
                            transported_us: publish_stamp,
                        });
                    }
                    batch.clear();
                    let mut state = packager_shared.state.lock().unwrap();
                    state.publish_fragment(segment, fragment.bytes);
                    if (i + 1) % frames_per_segment == 0 || last {
                        state.complete_segment(segment);
                    }
                    drop(state);
                    packager_shared.publish_signal.notify_all();
                }
            }
        }
        stage_log
    });

    // Player: same state machine as the virtual run, over blocking TCP.
    let mut player = DashPlayer::new(PlayerConfig {
        buffer_target_us: (cfg.player.buffer_target_s * 1e6) as u64,
        poll_interval_us: cfg.player.poll_interval_ms * 1_000,
        media_seed: cfg.video.seed,
    });
    player.set_clock_offset(0); // one host, one clock

    let mut samples: Vec<LatencySample> = Vec::new();
    let mut counters = RunCounters { sent: total, ..Default::default() };
    let deadline = media_start
        + total * 1_000_000 / fps
        + (cfg.player.buffer_target_s * 1e6) as u64
        + mpd_cfg.segment_duration_us() * 2
        + 5_000_000;

    let record = |samples: &mut Vec<LatencySample>, events: Vec<rrsb_core::player::DisplayEvent>| {
        for d in events {
            samples.push(LatencySample {
                seq: d.seq,
                capture_ts_us: d.capture_ts_us,
                display_ts_us: d.display_us,
                latency_us: d.display_us as i64 - d.capture_ts_us as i64,
                flagged: d.flagged,
            });
        }
    };

    loop {
        let now = clock.now_us();
        if player.displayed() + player.corrupt() >= total || now > deadline {
            break;
        }
        if let Some(request) = player.poll(now) {
            match TcpStream::connect(origin_addr) {
                Ok(mut stream) => {
                    let _ = stream.write_all(&http::render_request(&request.path));
                    let _ = stream.set_read_timeout(Some(Duration::from_millis(2)));
                    let mut buf = [0u8; 16_384];
                    while player.fetch_in_flight() {
                        match stream.read(&mut buf) {
                            Ok(0) => break,
                            Ok(n) => {
                                let events = player
                                    .on_fetch_bytes(&buf[..n], clock.now_us())
                                    .unwrap_or_default();
                                record(&mut samples, events);
                            }
                            Err(ref e)
                                if e.kind() == std::io::ErrorKind::WouldBlock
                                    || e.kind() == std::io::ErrorKind::TimedOut => {}
                            Err(_) => break,
                        }
                        record(&mut samples, player.pop_displays(clock.now_us()));
                        if clock.now_us() > deadline {
                            break;
                        }
                    }
                }
                Err(_) => thread::sleep(Duration::from_millis(5)),
            }
        }
        record(&mut samples, player.pop_displays(clock.now_us()));
        let next = player
            .next_display_at()
            .into_iter()
            .chain(player.next_wakeup(clock.now_us()))
            .min()
            .unwrap_or(clock.now_us() + 2_000);
        let now = clock.now_us();
        if next > now {
            thread::sleep(Duration::from_micros((next - now).min(2_000)));
        }
    }

    let stage_log = packager.join().expect("packager panicked");
    stop.store(true, Ordering::Relaxed);
    let _ = acceptor.join();

    counters.corrupt = player.corrupt();
    counters.rebuffers = player.rebuffers().len() as u64;
    counters.http_errors = player.http_errors();
    counters.segments_fetched = player.segments_fetched();
    samples.sort_by_key(|s| s.seq);
    counters.delivered = samples.len() as u64;
    counters.lost = counters.sent - counters.delivered;
    Ok(RunResult {
        samples,
        counters,
        clock_offset_true_us: 0,
        clock_offset_est_us: 0,
        stage_log,
        fwd_trace: Vec::new(),
        rev_trace: Vec::new(),
        diagnostics: PathDiagnostics::default(),
    })
}

/// Serves one HTTP connection against the shared origin, streaming
/// low-latency segments chunk by chunk as the packager produces them.
fn serve_connection(mut stream: TcpStream, shared: Arc<SharedOrigin>) {
    let mut parser = http::RequestParser::new();
    let mut buf = [0u8; 4_096];
    let request = loop {
        match stream.read(&mut buf) {
            Ok(0) => return,
            Ok(n) => match parser.push(&buf[..n]) {
                Ok(Some(request)) => break request,
                Ok(None) => {}
                Err(_) => return,
            },
            Err(_) => return,
        }
    };

    let response = shared.state.lock().unwrap().handle_get(&request.path);
    match response {
        OriginResponse::Full { content_type, body } => {
            let _ = stream.write_all(&http::render_response_full(200, content_type, &body));
        }
        OriginResponse::NotFound => {
            let _ = stream.write_all(&http::render_response_full(404, "text/plain", b""));
        }
        OriginResponse::Chunked { content_type, chunks, complete, segment } => {
            let _ = stream.write_all(&http::render_response_chunked_head(content_type));
            let mut sent = 0usize;
            for chunk in &chunks {
                let _ = stream.write_all(&http::render_chunk(chunk));
                sent += 1;
            }
            let mut done = complete;
            while !done {
                // Collect new chunks under the lock, write them outside it.
                let mut pending: Vec<Vec<u8>> = Vec::new();
                {
                    let state = shared.state.lock().unwrap();
                    let (state, _timeout) = shared
                        .publish_signal
                        .wait_timeout_while(state, Duration::from_millis(200), |s| {
                            s.chunk_count(segment) <= sent && !s.is_complete(segment)
                        })
                        .unwrap();
                    while let Some(chunk) = state.chunk(segment, sent + pending.len()) {
                        pending.push(chunk.to_vec());
                    }
                    done = state.is_complete(segment)
                        && state.chunk_count(segment) == sent + pending.len();
                }
                for chunk in &pending {
                    if stream.write_all(&http::render_chunk(chunk)).is_err() {
                        return;
                    }
                }
                sent += pending.len();
            }
            let _ = stream.write_all(&http::render_last_chunk());
        }
    }
    let _ = stream.flush();
}

/// Entry point used by the CLI for `--realtime` runs.
pub fn run_path_realtime(cfg: &RunConfig) -> Result<RunResult, BenchError> {
    match cfg.path {
        ProtocolPath::RtpUdp => run_rtp_udp_realtime(cfg),
        ProtocolPath::RtpSmt | ProtocolPath::MoqLite => run_smt_based_realtime(cfg),
        ProtocolPath::Dash | ProtocolPath::LlDash => run_http_realtime(cfg),
    }
}
