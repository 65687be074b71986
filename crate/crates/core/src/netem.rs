//! Deterministic seeded link emulator: delay, uniform jitter, loss,
//! reordering and serialization against a bandwidth cap.
//!
//! The link is clock-agnostic; callers pass the current time, so the same
//! code runs under the virtual-time scheduler and behind real sockets.
//! Loss, jitter and reorder decisions come from three independent seeded
//! streams, which keeps delivery schedules reproducible run to run.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::prng;

/// Maximum UDP payload over IPv4.
pub const MAX_DATAGRAM: usize = 65_507;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NetProfile {
    pub one_way_delay_us: u64,
    /// Uniform jitter bound; each delivery shifts by a draw in `[-j, +j]`.
    pub jitter_us: u64,
    pub loss_rate: f64,
    pub reorder_rate: f64,
    pub bandwidth_bps: u64,
    pub seed: u64,
}

impl NetProfile {
    /// Ideal link: constant-latency FIFO limited only by serialization.
    pub fn zero_impairment() -> Self {
        Self {
            one_way_delay_us: 0,
            jitter_us: 0,
            loss_rate: 0.0,
            reorder_rate: 0.0,
            bandwidth_bps: 10_000_000_000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), NetemError> {
        if !(0.0..=1.0).contains(&self.loss_rate) || !(0.0..=1.0).contains(&self.reorder_rate) {
            return Err(NetemError::BadProfile("rates must be within [0, 1]"));
        }
        if self.bandwidth_bps == 0 {
            return Err(NetemError::BadProfile("bandwidth must be positive"));
        }
        if self.jitter_us > self.one_way_delay_us {
            return Err(NetemError::BadProfile("jitter bound may not exceed the base delay"));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn with_loss(self, loss_rate: f64) -> Self {
        Self { loss_rate, ..self }
    }
}

/// Named presets standing in for the two physical links. The values are
/// this testbed's own choices for plausible WiFi-6 and private-5G regimes.
pub fn profile(name: &str) -> Result<NetProfile, NetemError> {
    match name {
        "wifi" => Ok(NetProfile {
            one_way_delay_us: 2_000,
            jitter_us: 1_000,
            loss_rate: 0.001,
            reorder_rate: 0.0,
            bandwidth_bps: 300_000_000,
            seed: 0,
        }),
        "fiveg" => Ok(NetProfile {
            one_way_delay_us: 15_000,
            jitter_us: 5_000,
            loss_rate: 0.005,
            reorder_rate: 0.0,
            bandwidth_bps: 75_000_000,
            seed: 0,
        }),
        other => Err(NetemError::UnknownProfile(String::from(other))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetemError {
    Oversize { len: usize },
    UnknownProfile(String),
    BadProfile(&'static str),
}

impl core::fmt::Display for NetemError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            NetemError::Oversize { len } => {
                write!(f, "datagram of {len} bytes exceeds {MAX_DATAGRAM}")
            }
            NetemError::UnknownProfile(name) => write!(f, "unknown profile \"{name}\""),
            NetemError::BadProfile(what) => write!(f, "invalid profile: {what}"),
        }
    }
}

impl core::error::Error for NetemError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Scheduled { deliver_at_us: u64 },
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TraceKind {
    Send,
    Deliver,
    Drop,
    Reorder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TraceEvent {
    pub ts_us: u64,
    pub kind: TraceKind,
    pub bytes: usize,
}

/// Test hook: forcibly drop chosen datagrams. Arguments are the link-local
/// send index (0-based) and the payload.
pub type DropFilter = Box<dyn FnMut(u64, &[u8]) -> bool + Send>;

/// One direction of an emulated link.
pub struct EmuLink {
    profile: NetProfile,
    in_flight: BTreeMap<(u64, u64), Vec<u8>>,
    busy_until_us: u64,
    send_index: u64,
    last_scheduled: Option<(u64, u64)>,
    loss_rng: ChaCha8Rng,
    jitter_rng: ChaCha8Rng,
    reorder_rng: ChaCha8Rng,
    drop_filter: Option<DropFilter>,
    trace: Option<Vec<TraceEvent>>,
    dropped: Vec<(u64, u64, Vec<u8>)>,
    keep_dropped: bool,
}

impl core::fmt::Debug for EmuLink {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("EmuLink")
            .field("profile", &self.profile)
            .field("in_flight", &self.in_flight.len())
            .field("busy_until_us", &self.busy_until_us)
            .field("send_index", &self.send_index)
            .finish()
    }
}

impl EmuLink {
    pub fn new(profile: NetProfile) -> Self {
        Self {
            loss_rng: prng::rng_for(profile.seed, "link-loss"),
            jitter_rng: prng::rng_for(profile.seed, "link-jitter"),
            reorder_rng: prng::rng_for(profile.seed, "link-reorder"),
            profile,
            in_flight: BTreeMap::new(),
            busy_until_us: 0,
            send_index: 0,
            last_scheduled: None,
            drop_filter: None,
            trace: None,
            dropped: Vec::new(),
            keep_dropped: false,
        }
    }

    pub fn profile(&self) -> &NetProfile {
        &self.profile
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> Option<&[TraceEvent]> {
        self.trace.as_deref()
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.trace.take().unwrap_or_default()
    }

    /// Keep full payloads of dropped datagrams for post-run attribution.
    pub fn keep_dropped_payloads(&mut self) {
        self.keep_dropped = true;
    }

    /// Dropped datagrams as `(send_index, send_ts, payload)`.
    pub fn dropped(&self) -> &[(u64, u64, Vec<u8>)] {
        &self.dropped
    }

    pub fn set_drop_filter(&mut self, filter: Option<DropFilter>) {
        self.drop_filter = filter;
    }

    fn record(&mut self, ts_us: u64, kind: TraceKind, bytes: usize) {
        if let Some(trace) = &mut self.trace {
            trace.push(TraceEvent { ts_us, kind, bytes });
        }
    }

    /// Offers a datagram to the link at `now_us`.
    pub fn send(&mut self, datagram: &[u8], now_us: u64) -> Result<SendOutcome, NetemError> {
        if datagram.len() > MAX_DATAGRAM {
            return Err(NetemError::Oversize { len: datagram.len() });
        }
        let index = self.send_index;
        self.send_index += 1;
        self.record(now_us, TraceKind::Send, datagram.len());

        let forced_drop = match &mut self.drop_filter {
            Some(filter) => filter(index, datagram),
            None => false,
        };
        let random_drop = self.profile.loss_rate > 0.0
            && prng::unit_f64(&mut self.loss_rng) < self.profile.loss_rate;
        if forced_drop || random_drop {
            self.record(now_us, TraceKind::Drop, datagram.len());
            if self.keep_dropped {
                self.dropped.push((index, now_us, datagram.to_vec()));
            }
            return Ok(SendOutcome::Dropped);
        }

        let tx_us = serialization_us(datagram.len(), self.profile.bandwidth_bps);
        let start = self.busy_until_us.max(now_us);
        self.busy_until_us = start + tx_us;

        let jitter = if self.profile.jitter_us > 0 {
            prng::jitter_draw(&mut self.jitter_rng, self.profile.jitter_us as i64)
        } else {
            0
        };
        let mut deliver_at =
            (self.busy_until_us as i64 + self.profile.one_way_delay_us as i64 + jitter) as u64;
        // Physical floor: nothing arrives before it finished serializing.
        deliver_at = deliver_at.max(self.busy_until_us);

        if self.profile.reorder_rate > 0.0
            && prng::unit_f64(&mut self.reorder_rng) < self.profile.reorder_rate
        {
            if let Some(prev_key) = self.last_scheduled {
                if let Some(prev_payload) = self.in_flight.remove(&prev_key) {
                    // Swap delivery instants with the previous datagram.
                    let (prev_at, prev_idx) = prev_key;
                    self.in_flight.insert((deliver_at, prev_idx), prev_payload);
                    self.record(now_us, TraceKind::Reorder, datagram.len());
                    self.in_flight.insert((prev_at, index), datagram.to_vec());
                    self.last_scheduled = Some((prev_at, index));
                    return Ok(SendOutcome::Scheduled { deliver_at_us: prev_at });
                }
            }
        }

        self.in_flight.insert((deliver_at, index), datagram.to_vec());
        self.last_scheduled = Some((deliver_at, index));
        Ok(SendOutcome::Scheduled { deliver_at_us: deliver_at })
    }

    /// All datagrams due by `now_us`, in delivery order.
    pub fn poll(&mut self, now_us: u64) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        while let Some((&(at, idx), _)) = self.in_flight.iter().next() {
            if at > now_us {
                break;
            }
            let payload = self.in_flight.remove(&(at, idx)).unwrap();
            self.record(at, TraceKind::Deliver, payload.len());
            out.push(payload);
        }
        if self.last_scheduled.is_some_and(|key| !self.in_flight.contains_key(&key)) {
            self.last_scheduled = None;
        }
        out
    }

    pub fn next_delivery(&self) -> Option<u64> {
        self.in_flight.keys().next().map(|&(at, _)| at)
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }
}

/// Time to push `len` bytes through `bandwidth_bps`, rounded up.
pub fn serialization_us(len: usize, bandwidth_bps: u64) -> u64 {
    let bits = len as u64 * 8 * 1_000_000;
    bits.div_ceil(bandwidth_bps)
}
