//! Deterministic stream splitting.
//!
//! Every random quantity in this crate derives from a single `u64` master
//! seed. A task that needs randomness asks for `substream(master, tag, index)`
//! where `tag` names the purpose (simulation, bootstrap, ...) and `index` is a
//! counter (unit number, replicate number). Distinct `(tag, index)` pairs give
//! statistically independent streams, and the stream drawn for a task does not
//! depend on scheduling order, which is what makes parallel runs byte-stable.
//!
//! The derivation hashes `(master, tag, index)` into a 256-bit ChaCha8 key
//! with four rounds of SplitMix64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for the substreams used inside the crate.
pub mod tags {
    /// Panel unit draws in `dgp::simulate`.
    pub const SIM_PANEL: u64 = 0x01;
    /// Refreshment unit draws in `dgp::simulate`.
    pub const SIM_REFRESH: u64 = 0x02;
    /// Bootstrap replicate resampling.
    pub const BOOTSTRAP: u64 = 0x03;
    /// Monte Carlo replication data draws.
    pub const MC_SIM: u64 = 0x04;
    /// Monte Carlo warp-speed bootstrap draws.
    pub const MC_BOOT: u64 = 0x05;
    /// Internal quadrature used for DGP calibration and true parameters.
    pub const QUADRATURE: u64 = 0x06;
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// First word of the `(master, tag, index)` stream, for nesting schemes
/// that need a fresh master seed per task.
pub fn derived_seed(master: u64, tag: u64, index: u64) -> u64 {
    use rand::Rng;
    substream(master, tag, index).random()
}

/// Derive the ChaCha8 stream for `(master, tag, index)`.
pub fn substream(master: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut state = master;
    let _ = splitmix64(&mut state);
    state ^= tag.wrapping_mul(0xd1342543de82ef95);
    let _ = splitmix64(&mut state);
    state ^= index.wrapping_mul(0xaf251af3b0f025b5);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
