//! Seeded pseudorandom helpers shared by the codec and the emulator.
//!
//! All randomness in the workspace flows through here so that runs are
//! reproducible from a single `u64` seed. Draw helpers are written against
//! `RngCore` directly to keep the byte streams independent of distribution
//! changes in downstream crates.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// SplitMix64 step, used to derive independent sub-seeds from one root seed.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a sub-seed for a named domain so that unrelated consumers of the
/// same root seed never share a stream.
pub fn sub_seed(seed: u64, domain: &str) -> u64 {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &b in domain.as_bytes() {
        state ^= u64::from(b);
        acc ^= splitmix64(&mut state);
    }
    acc
}

/// Deterministic generator keyed by `(seed, domain)`.
pub fn rng_for(seed: u64, domain: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, domain))
}

/// Uniform draw in `[0, 1)` from the top 53 bits of one `next_u64`.
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform signed draw in `[-bound, +bound]`.
pub fn jitter_draw(rng: &mut impl RngCore, bound: i64) -> i64 {
    if bound == 0 {
        return 0;
    }
    let span = (2 * bound + 1) as u64;
    (rng.next_u64() % span) as i64 - bound
}

/// Tile size for bulk frame fills. One tile is generated per frame and
/// repeated, which keeps multi-megabyte raw frames cheap to synthesize.
const TILE: usize = 64 * 1024;

/// Fills `out` with a deterministic pattern keyed by `(seed, frame_seq)`.
///
/// Large buffers are tiled from one generated block; buffers up to one tile
/// are raw generator output.
pub fn fill_frame_pattern(seed: u64, frame_seq: u64, out: &mut [u8]) {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed ^ frame_seq.rotate_left(17), "frame-pattern"));
    if out.len() <= TILE {
        rng.fill_bytes(out);
        return;
    }
    let mut tile = alloc::vec![0u8; TILE];
    rng.fill_bytes(&mut tile);
    for chunk in out.chunks_mut(TILE) {
        chunk.copy_from_slice(&tile[..chunk.len()]);
    }
}

/// Fills `out` with the access-unit padding stream keyed by `(seed, seq)`.
///
/// Unlike the tiled frame pattern this is a straight generator stream: the
/// receiver regenerates it byte-for-byte to verify end-to-end integrity.
pub fn fill_au_padding(seed: u64, seq: u64, out: &mut [u8]) {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed ^ seq.rotate_left(41), "au-padding"));
    rng.fill_bytes(out);
}
