//! Peer-to-peer clock offset estimation.
//!
//! Sender and receiver run on different clocks, so before measuring
//! capture-to-display latency the receiver exchanges a few four-timestamp
//! probes with the sender, NTP style, and keeps the minimum-RTT sample.
//! Sync messages ride transport datagrams: one type byte (0x51 request,
//! 0x52 reply) followed by big-endian microsecond timestamps.

use alloc::vec::Vec;

pub const SYNC_REQUEST: u8 = 0x51;
pub const SYNC_REPLY: u8 = 0x52;

pub const DEFAULT_ROUNDS: u32 = 8;
pub const DEFAULT_ROUND_TIMEOUT_US: u64 = 250_000;

/// One four-timestamp exchange: client send, server receive, server send,
/// client receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClockSample {
    pub t1: u64,
    pub t2: u64,
    pub t3: u64,
    pub t4: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClockEstimate {
    /// Server clock minus client clock.
    pub offset_us: i64,
    pub rtt_us: u64,
    pub samples_used: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockSyncError {
    /// Sample violates `t4 >= t1`, `t3 >= t2` or implies a negative RTT.
    InvalidSample,
    /// `rounds` must be at least one.
    NoRounds,
    /// No reply arrived within the per-round deadline for any round.
    Timeout,
    /// Reply bytes did not parse.
    BadMessage,
}

impl core::fmt::Display for ClockSyncError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ClockSyncError::InvalidSample => write!(f, "invalid clock sample"),
            ClockSyncError::NoRounds => write!(f, "handshake needs at least one round"),
            ClockSyncError::Timeout => write!(f, "clock sync timed out"),
            ClockSyncError::BadMessage => write!(f, "malformed sync message"),
        }
    }
}

impl core::error::Error for ClockSyncError {}

/// Standard four-timestamp offset/RTT estimate:
/// `offset = ((t2-t1)+(t3-t4))/2`, `rtt = (t4-t1)-(t3-t2)`.
pub fn estimate_offset(s: &ClockSample) -> Result<ClockEstimate, ClockSyncError> {
    if s.t4 < s.t1 || s.t3 < s.t2 {
        return Err(ClockSyncError::InvalidSample);
    }
    let rtt = (s.t4 - s.t1) as i64 - (s.t3 - s.t2) as i64;
    // A round trip that took no time at all cannot be a real measurement.
    if rtt <= 0 {
        return Err(ClockSyncError::InvalidSample);
    }
    let offset = ((s.t2 as i64 - s.t1 as i64) + (s.t3 as i64 - s.t4 as i64)) / 2;
    Ok(ClockEstimate { offset_us: offset, rtt_us: rtt as u64, samples_used: 1 })
}

/// Builds the client request datagram carrying `t1`.
pub fn encode_request(t1: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(9);
    out.push(SYNC_REQUEST);
    out.extend_from_slice(&t1.to_be_bytes());
    out
}

/// Server side: answers a request datagram, echoing `t1` and stamping the
/// receive/send times (one server timestamp serves as both here; processing
/// is instantaneous for this in-memory responder).
pub fn answer_request(datagram: &[u8], server_now_us: u64) -> Option<Vec<u8>> {
    if datagram.len() != 9 || datagram[0] != SYNC_REQUEST {
        return None;
    }
    let mut out = Vec::with_capacity(25);
    out.push(SYNC_REPLY);
    out.extend_from_slice(&datagram[1..9]);
    out.extend_from_slice(&server_now_us.to_be_bytes());
    out.extend_from_slice(&server_now_us.to_be_bytes());
    Some(out)
}

fn parse_reply(datagram: &[u8]) -> Result<(u64, u64, u64), ClockSyncError> {
    if datagram.len() != 25 || datagram[0] != SYNC_REPLY {
        return Err(ClockSyncError::BadMessage);
    }
    let t1 = u64::from_be_bytes(datagram[1..9].try_into().unwrap());
    let t2 = u64::from_be_bytes(datagram[9..17].try_into().unwrap());
    let t3 = u64::from_be_bytes(datagram[17..25].try_into().unwrap());
    Ok((t1, t2, t3))
}

/// Client-side handshake state machine, driven by the caller's event loop.
///
/// Call [`SyncClient::poll_request`] to learn when the next probe should go
/// out, feed replies to [`SyncClient::on_reply`], and finish with
/// [`SyncClient::result`] once [`SyncClient::done`] reports true.
#[derive(Debug)]
pub struct SyncClient {
    rounds: u32,
    timeout_us: u64,
    sent: u32,
    outstanding_t1: Option<u64>,
    deadline_us: u64,
    best: Option<ClockEstimate>,
    used: u32,
}

impl SyncClient {
    pub fn new(rounds: u32, timeout_us: u64) -> Result<Self, ClockSyncError> {
        if rounds == 0 {
            return Err(ClockSyncError::NoRounds);
        }
        Ok(Self {
            rounds,
            timeout_us,
            sent: 0,
            outstanding_t1: None,
            deadline_us: 0,
            best: None,
            used: 0,
        })
    }

    /// Returns a request datagram if one should be sent at `now`.
    pub fn poll_request(&mut self, now: u64) -> Option<Vec<u8>> {
        if self.sent >= self.rounds && self.outstanding_t1.is_none() {
            return None;
        }
        match self.outstanding_t1 {
            Some(_) if now < self.deadline_us => None,
            Some(_) => {
                // Round timed out; move on.
                self.outstanding_t1 = None;
                if self.sent >= self.rounds {
                    return None;
                }
                self.start_round(now)
            }
            None => self.start_round(now),
        }
    }

    fn start_round(&mut self, now: u64) -> Option<Vec<u8>> {
        self.sent += 1;
        self.outstanding_t1 = Some(now);
        self.deadline_us = now + self.timeout_us;
        Some(encode_request(now))
    }

    /// Time at which [`poll_request`](Self::poll_request) should be polled
    /// again, if the handshake is still running.
    pub fn next_wakeup(&self) -> Option<u64> {
        if self.done() {
            None
        } else if self.outstanding_t1.is_some() {
            Some(self.deadline_us)
        } else {
            Some(0)
        }
    }

    pub fn on_reply(&mut self, datagram: &[u8], now: u64) -> Result<(), ClockSyncError> {
        let (t1, t2, t3) = parse_reply(datagram)?;
        if self.outstanding_t1 != Some(t1) {
            // Stale or duplicated reply; ignore.
            return Ok(());
        }
        self.outstanding_t1 = None;
        let sample = ClockSample { t1, t2, t3, t4: now };
        if let Ok(est) = estimate_offset(&sample) {
            self.used += 1;
            if self.best.map_or(true, |b| est.rtt_us < b.rtt_us) {
                self.best = Some(est);
            }
        }
        Ok(())
    }

    pub fn done(&self) -> bool {
        self.sent >= self.rounds && self.outstanding_t1.is_none()
    }

    pub fn result(&self) -> Result<ClockEstimate, ClockSyncError> {
        match self.best {
            Some(best) => Ok(ClockEstimate { samples_used: self.used, ..best }),
            None => Err(ClockSyncError::Timeout),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_formula() {
        let est = estimate_offset(&ClockSample { t1: 100, t2: 150, t3: 152, t4: 112 }).unwrap();
        assert_eq!(est.offset_us, 45);
        assert_eq!(est.rtt_us, 10);
    }

    #[test]
    fn symmetric_equal_clocks() {
        let est = estimate_offset(&ClockSample { t1: 0, t2: 50, t3: 50, t4: 100 }).unwrap();
        assert_eq!(est.offset_us, 0);
        assert_eq!(est.rtt_us, 100);
    }

    #[test]
    fn negative_rtt_rejected() {
        assert_eq!(
            estimate_offset(&ClockSample { t1: 0, t2: 10, t3: 12, t4: 2 }),
            Err(ClockSyncError::InvalidSample)
        );
    }

    #[test]
    fn symmetric_delay_cancels_regardless_of_magnitude() {
        for delay in [1u64, 500, 40_000, 3_000_000] {
            let off = 123_456i64;
            let t1 = 1_000_000;
            let t2 = (t1 + delay) as i64 + off;
            let t3 = t2 + 77;
            let t4 = t1 + delay + 77 + delay;
            let est = estimate_offset(&ClockSample {
                t1,
                t2: t2 as u64,
                t3: t3 as u64,
                t4,
            })
            .unwrap();
            assert_eq!(est.offset_us, off);
        }
    }

    #[test]
    fn zero_rounds_is_an_error() {
        assert_eq!(SyncClient::new(0, 1000).unwrap_err(), ClockSyncError::NoRounds);
    }

    #[test]
    fn handshake_prefers_min_rtt_sample() {
        let mut client = SyncClient::new(3, 250_000).unwrap();
        let true_offset = 5_000i64;
        // Asymmetry per round; the middle round has the smallest rtt.
        let legs = [(4_000u64, 1_000u64), (2_000, 2_000), (1_500, 6_000)];
        let mut now = 0u64;
        for (fwd, back) in legs {
            let req = client.poll_request(now).unwrap();
            let server_now = (now + fwd) as i64 + true_offset;
            let reply = answer_request(&req, server_now as u64).unwrap();
            now += fwd + back;
            client.on_reply(&reply, now).unwrap();
            now += 1_000;
        }
        assert!(client.done());
        let est = client.result().unwrap();
        assert_eq!(est.samples_used, 3);
        assert_eq!(est.rtt_us, 4_000);
        assert_eq!(est.offset_us, true_offset);
    }

    #[test]
    fn handshake_times_out_without_replies() {
        let mut client = SyncClient::new(2, 1_000).unwrap();
        let mut now = 0;
        while !client.done() {
            let _ = client.poll_request(now);
            now += 1_500;
        }
        assert_eq!(client.result(), Err(ClockSyncError::Timeout));
    }
}
