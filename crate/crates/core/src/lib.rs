//! Core building blocks for a desk-scale live-streaming latency testbed.
//!
//! The crate hosts everything that does not touch the operating system:
//! a deterministic mock video codec ([`media`]), RTP packetization and a
//! jitter buffer ([`rtp`]), a minimal fragmented-MP4 muxer ([`bmff`]),
//! DASH manifest handling ([`mpd`]), a seeded network emulator ([`netem`]),
//! a stream-multiplexed reliable transport ([`smt`]), a simplified
//! media-over-streams delivery model ([`moq`]), peer-to-peer clock offset
//! estimation ([`clocksync`]) and the virtual-time end-to-end delivery
//! paths built from all of the above ([`paths`]).
//!
//! Every state machine in here is sans-IO: time is always passed in as
//! microseconds and wire bytes are plain `Vec<u8>`, so the same code runs
//! under the deterministic virtual-time scheduler and, from the companion
//! binary crate, over real sockets and pipes.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod bmff;
pub mod clocksync;
pub mod http;
pub mod media;
pub mod moq;
pub mod mpd;
pub mod netem;
pub mod origin;
pub mod paths;
pub mod player;
pub mod prng;
pub mod rtp;
pub mod smt;
pub mod timefmt;
