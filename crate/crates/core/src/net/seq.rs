//! Sequence-number arithmetic on the 2^32 ring.
//!
//! TCP validity checks ("is this seq inside the receive window", "is this
//! ack inside the challenge window") are interval-membership questions on a
//! ring, so every check here is phrased as a wrapping subtraction followed
//! by an unsigned compare. Windows are always strictly smaller than half the
//! ring, which keeps membership unambiguous.

/// True iff `x` lies in the inclusive window `[lo, lo + size]` on the 2^32
/// ring. `size` must be < 2^31 so the window covers less than half the ring.
#[must_use]
pub fn seq_in_window(x: u32, lo: u32, size: u32) -> bool {
    debug_assert!(size < 1 << 31, "window must span less than half the ring");
    x.wrapping_sub(lo) <= size
}

/// Forward distance from `from` to `to` on the ring (how far `to` is ahead).
#[must_use]
pub fn seq_distance(from: u32, to: u32) -> u32 {
    to.wrapping_sub(from)
}
