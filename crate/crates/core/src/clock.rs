//! Host-wide monotonic timestamps.
//!
//! `Instant` cannot be exchanged between processes, so loop timestamps are
//! read from `CLOCK_MONOTONIC` directly. Every process on the host sees the
//! same clock, which is what lets T0 (stamped by the agent) and T1 (stamped
//! by the dApp) be compared.

/// Nanoseconds on the host monotonic clock.
pub fn monotonic_ns() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec and CLOCK_MONOTONIC is always supported on Linux.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
    debug_assert_eq!(rc, 0);
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}
