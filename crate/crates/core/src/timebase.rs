//! Host and device time points, and the offset estimate that maps one onto
//! the other.
//!
//! The host issues frequency-change requests and timestamps them with its own
//! clock; the accelerator timestamps every workload iteration with a
//! free-running device timer. To compare the two, the session runs a
//! four-timestamp exchange before every switching-latency measurement:
//!
//! ```text
//!   host                 device
//!    t1 ───── request ────▶ t2
//!    t4 ◀──── reply ─────── t3
//! ```
//!
//! Assuming a symmetric link, `offset = ((t2 - t1) + (t3 - t4)) / 2` and the
//! one-way path delay is `((t4 - t1) - (t3 - t2)) / 2`. Of `rounds` exchanges,
//! the one with the smallest round trip wins, since queueing noise only ever
//! adds delay.

use std::fmt;

use crate::device::{Accelerator, DeviceError};

/// Nanoseconds on the host clock, relative to an arbitrary epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct HostInstant(pub i64);

/// Nanoseconds on the device timer, relative to an arbitrary device epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct DeviceInstant(pub i64);

impl HostInstant {
    pub fn as_nanos(self) -> i64 {
        self.0
    }
}

impl DeviceInstant {
    pub fn as_nanos(self) -> i64 {
        self.0
    }

    /// Rounds down to a multiple of `resolution` nanoseconds.
    pub fn quantized(raw_ns: i64, resolution: u64) -> Self {
        let res = resolution.max(1) as i64;
        DeviceInstant(raw_ns.div_euclid(res) * res)
    }
}

impl fmt::Display for HostInstant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "host+{}ns", self.0)
    }
}

impl fmt::Display for DeviceInstant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dev+{}ns", self.0)
    }
}

/// One request/reply exchange between host and device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncExchange {
    pub host_send: HostInstant,
    pub device_receive: DeviceInstant,
    pub device_reply: DeviceInstant,
    pub host_receive: HostInstant,
}

impl SyncExchange {
    pub fn new(t1: i64, t2: i64, t3: i64, t4: i64) -> Self {
        SyncExchange {
            host_send: HostInstant(t1),
            device_receive: DeviceInstant(t2),
            device_reply: DeviceInstant(t3),
            host_receive: HostInstant(t4),
        }
    }

    fn raw(&self) -> (i64, i64, i64, i64) {
        (
            self.host_send.0,
            self.device_receive.0,
            self.device_reply.0,
            self.host_receive.0,
        )
    }

    /// Device epoch minus host epoch.
    pub fn offset(&self) -> i64 {
        let (t1, t2, t3, t4) = self.raw();
        exchange_offset(t1, t2, t3, t4)
    }

    /// One-way path delay.
    pub fn path_delay(&self) -> i64 {
        let (t1, t2, t3, t4) = self.raw();
        exchange_delay(t1, t2, t3, t4)
    }

    /// Host-observed round trip minus device turnaround.
    pub fn round_trip(&self) -> i64 {
        let (t1, t2, t3, t4) = self.raw();
        (t4 - t1) - (t3 - t2)
    }

    fn check_monotonic(&self) -> Result<(), DeviceError> {
        let (t1, t2, t3, t4) = self.raw();
        if t4 < t1 || t3 < t2 {
            return Err(DeviceError::NonMonotonicClock(format!(
                "exchange t1={t1} t2={t2} t3={t3} t4={t4}"
            )));
        }
        Ok(())
    }
}

/// `((t2 - t1) + (t3 - t4)) / 2`, truncating toward zero so that the estimate is
/// exactly antisymmetric under swapping the two clocks' roles.
pub fn exchange_offset(t1: i64, t2: i64, t3: i64, t4: i64) -> i64 {
    let sum = (t2 as i128 - t1 as i128) + (t3 as i128 - t4 as i128);
    (sum / 2) as i64
}

/// `((t4 - t1) - (t3 - t2)) / 2`.
pub fn exchange_delay(t1: i64, t2: i64, t3: i64, t4: i64) -> i64 {
    let diff = (t4 as i128 - t1 as i128) - (t3 as i128 - t2 as i128);
    (diff / 2) as i64
}

/// Offset estimate between host and device clocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClockSync {
    /// Device epoch minus host epoch, nanoseconds.
    pub offset: i64,
    pub path_delay: u64,
    /// Bound on the offset error: path delay (unknown asymmetry) plus timer resolution.
    pub uncertainty: u64,
    pub taken_at: HostInstant,
}

impl ClockSync {
    pub fn from_exchange(exchange: &SyncExchange, timer_resolution: u64) -> Self {
        let delay = exchange.path_delay().max(0) as u64;
        ClockSync {
            offset: exchange.offset(),
            path_delay: delay,
            uncertainty: delay + timer_resolution.max(1),
            taken_at: exchange.host_send,
        }
    }
}

/// Runs `rounds` timestamp exchanges and keeps the one with the smallest round trip.
pub fn synchronize_clocks<A: Accelerator + ?Sized>(
    device: &mut A,
    rounds: u32,
) -> Result<ClockSync, DeviceError> {
    let rounds = rounds.max(1);
    let resolution = device.spec().timer_resolution;
    let mut best: Option<SyncExchange> = None;
    for _ in 0..rounds {
        let exchange = device.exchange_timestamps()?;
        exchange.check_monotonic()?;
        best = match best {
            Some(b) if b.round_trip() <= exchange.round_trip() => Some(b),
            _ => Some(exchange),
        };
    }
    let best = best.expect("at least one round");
    Ok(ClockSync::from_exchange(&best, resolution))
}

pub fn host_to_device(t: HostInstant, sync: &ClockSync) -> DeviceInstant {
    DeviceInstant(t.0 + sync.offset)
}

pub fn device_to_host(t: DeviceInstant, sync: &ClockSync) -> HostInstant {
    HostInstant(t.0 - sync.offset)
}
